//! Absolute trajectory error after rigid alignment.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AteError {
    #[error("estimated trajectory has {estimated} poses, ground truth {ground_truth}")]
    LengthMismatch { estimated: usize, ground_truth: usize },
    #[error("trajectories are empty")]
    Empty,
}

/// Rigid transform `T` minimizing `Σ |dst_k − T·src_k|²` (closed form, no scale).
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len().min(dst.len()).max(1) as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Pose::new(r, md - r * ms).unwrap_or_else(|_| Pose::from_translation(md - ms))
}

/// Translational RMSE between `estimated` and `ground_truth` after aligning
/// the estimate onto the ground truth.
pub fn ate_rmse(estimated: &[Pose], ground_truth: &[Pose]) -> Result<f64, AteError> {
    if estimated.len() != ground_truth.len() {
        return Err(AteError::LengthMismatch {
            estimated: estimated.len(),
            ground_truth: ground_truth.len(),
        });
    }
    if estimated.is_empty() {
        return Err(AteError::Empty);
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(|p| *p.translation()).collect();
    let dst: Vec<Vector3<f64>> = ground_truth.iter().map(|p| *p.translation()).collect();
    let t = align_rigid(&src, &dst);
    let sum: f64 = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    Ok((sum / src.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector6;
    use proptest::prelude::*;

    fn line(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.3;
                Pose::from_yaw(a, Vector3::new(a.cos() * 2.0, a.sin(), 0.1 * i as f64))
            })
            .collect()
    }

    #[test]
    fn identical_is_zero() {
        let t = line(10);
        assert!(ate_rmse(&t, &t).unwrap() < 1e-12);
    }

    #[test]
    fn rigid_offset_removed() {
        let t = line(12);
        let g = Pose::exp(&Vector6::new(3.0, -1.0, 0.5, 0.2, -0.4, 1.3));
        let moved: Vec<Pose> = t.iter().map(|p| g.compose(p)).collect();
        assert!(ate_rmse(&moved, &t).unwrap() < 1e-9);
    }

    #[test]
    fn two_pose_residuals() {
        // after centroid alignment each end is 0.1 m off along the segment
        let est = [Pose::identity(), Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))];
        let gt = [
            Pose::from_translation(Vector3::new(5.0, 1.0, 0.0)),
            Pose::from_translation(Vector3::new(6.2, 1.0, 0.0)),
        ];
        assert!((ate_rmse(&est, &gt).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            ate_rmse(&line(3), &line(4)),
            Err(AteError::LengthMismatch {
                estimated: 3,
                ground_truth: 4
            })
        );
    }

    proptest! {
        #[test]
        fn invariant_under_common_transform(
            xi in prop::array::uniform6(-2.0f64..2.0),
            noise in prop::collection::vec(-0.2f64..0.2, 30),
        ) {
            let gt = line(10);
            let est: Vec<Pose> = gt
                .iter()
                .enumerate()
                .map(|(i, p)| p.compose(&Pose::from_translation(Vector3::new(noise[3 * i], noise[3 * i + 1], noise[3 * i + 2]))))
                .collect();
            let g = Pose::exp(&Vector6::from_row_slice(&xi));
            let a = ate_rmse(&est, &gt).unwrap();
            let ge: Vec<Pose> = est.iter().map(|p| g.compose(p)).collect();
            let gg: Vec<Pose> = gt.iter().map(|p| g.compose(p)).collect();
            let b = ate_rmse(&ge, &gg).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
