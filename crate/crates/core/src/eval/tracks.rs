//! Feature tracks cut into short segments and triangulated.
//!
//! Each segment becomes its own point variable, so a point only couples
//! poses that are a few frames apart and the pose block of the normal
//! equations stays banded. Long-range constraints come from the landmarks.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::graph_opt::PointTrack;
use crate::world_sim::Frame;

/// Longest run of consecutive frames sharing one point variable.
pub const SEGMENT_FRAMES: usize = 10;
/// Fewest observations for a segment to be kept.
pub const MIN_OBSERVATIONS: usize = 3;
/// Smallest angle between the extreme rays of a segment, radians.
pub const MIN_PARALLAX: f64 = 0.5f64.to_radians();
const MIN_DEPTH: f64 = 0.1;

/// Index of the smallest detection box containing `px`.
fn containing_detection(frame: &Frame, px: &nalgebra::Vector2<f64>) -> Option<usize> {
    frame
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.bbox.contains(px))
        .min_by(|a, b| a.1.bbox.area().total_cmp(&b.1.bbox.area()).then(a.0.cmp(&b.0)))
        .map(|(j, _)| j)
}

/// Midpoint triangulation: the point closest to all rays in the least-squares sense.
pub fn triangulate(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (origin, dir) in rays {
        let p = Matrix3::identity() - dir * dir.transpose();
        a += p;
        b += p * origin;
    }
    a.try_inverse().map(|inv| inv * b)
}

/// Splits the feature observations of `frames` into segments and
/// triangulates each one from the poses in `trajectory`.
pub fn build_tracks(frames: &[Frame], trajectory: &[Pose], intr: &CameraIntrinsics) -> Vec<PointTrack> {
    let mut by_point: BTreeMap<usize, Vec<(usize, nalgebra::Vector2<f64>)>> = BTreeMap::new();
    for f in frames {
        for o in &f.features {
            by_point.entry(o.point).or_default().push((f.index, o.pixel));
        }
    }
    let mut out = Vec::new();
    for obs in by_point.values() {
        let mut seg: Vec<(usize, nalgebra::Vector2<f64>)> = Vec::new();
        for &(t, px) in obs {
            let broken = seg.last().is_some_and(|&(lt, _)| lt + 1 != t) || seg.len() == SEGMENT_FRAMES;
            if broken {
                out.extend(finish(&seg, frames, trajectory, intr));
                seg.clear();
            }
            seg.push((t, px));
        }
        out.extend(finish(&seg, frames, trajectory, intr));
    }
    out
}

fn finish(
    seg: &[(usize, nalgebra::Vector2<f64>)],
    frames: &[Frame],
    trajectory: &[Pose],
    intr: &CameraIntrinsics,
) -> Option<PointTrack> {
    if seg.len() < MIN_OBSERVATIONS {
        return None;
    }
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = seg
        .iter()
        .map(|(t, px)| {
            let x = &trajectory[*t];
            (*x.translation(), (x.rotation() * intr.unproject(px)).normalize())
        })
        .collect();
    let first = rays.first()?.1;
    let last = rays.last()?.1;
    if first.dot(&last).clamp(-1.0, 1.0).acos() < MIN_PARALLAX {
        return None;
    }
    let p = triangulate(&rays)?;
    let in_front = seg
        .iter()
        .all(|(t, _)| trajectory[*t].inverse().apply(&p).z > MIN_DEPTH);
    if !in_front || !p.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(PointTrack {
        position: p,
        observations: seg
            .iter()
            .map(|&(t, px)| (t, px, containing_detection(&frames[t], &px)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_sim::{camera_looking, FeatureObs};
    use nalgebra::Vector2;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    fn frames_for(points: &[Vector3<f64>], poses: &[Pose]) -> Vec<Frame> {
        poses
            .iter()
            .enumerate()
            .map(|(t, x)| Frame {
                index: t,
                detections: vec![],
                features: points
                    .iter()
                    .enumerate()
                    .filter_map(|(id, p)| {
                        intr()
                            .project(&x.inverse().apply(p))
                            .ok()
                            .map(|px| FeatureObs { point: id, pixel: px })
                    })
                    .collect(),
                lines: vec![],
                ground_points: vec![],
                odom: Pose::identity(),
            })
            .collect()
    }

    #[test]
    fn exact_points_and_segmentation() {
        let poses: Vec<Pose> = (0..25)
            .map(|i| camera_looking(Vector3::new(0.0, 0.05 * i as f64, 1.0), Vector2::new(1.0, 0.0), 0.1))
            .collect();
        let points = vec![Vector3::new(4.0, 0.5, 1.2), Vector3::new(5.0, 0.9, 0.3)];
        let tracks = build_tracks(&frames_for(&points, &poses), &poses, &intr());
        // 25 frames → segments of 10, 10, 5 per point
        assert_eq!(tracks.len(), 6);
        for tr in &tracks {
            assert!(tr.observations.len() <= SEGMENT_FRAMES);
            let err = points
                .iter()
                .map(|p| (p - tr.position).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn no_parallax_dropped() {
        let poses = vec![camera_looking(Vector3::new(0.0, 0.0, 1.0), Vector2::new(1.0, 0.0), 0.1); 5];
        let tracks = build_tracks(&frames_for(&[Vector3::new(4.0, 0.0, 1.0)], &poses), &poses, &intr());
        assert!(tracks.is_empty());
    }
}
