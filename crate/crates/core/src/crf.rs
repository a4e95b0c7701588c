//! Proposal selection over a short window of frames.
//!
//! Each detection ("object" within a frame) may activate at most one of its 3D
//! proposals. The energy is a sum of per-proposal unary terms, a temporal term
//! that rewards agreement between a proposal and the warped selection of the
//! matching object in the previous frame, and a hard at-most-one constraint.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::classes::{ClassCode, ObjectDatabase};
use crate::geometry::{iou, project_model_bbox, BBox2D, CameraIntrinsics, Pose};
use crate::proposals::Proposal3D;
use crate::world_sim::Frame;

/// Energy reported for assignments that activate two proposals of one object in one frame.
pub const INFEASIBLE: f64 = 1e18;
/// Above this many joint configurations, [`select`] switches from enumeration to ICM.
pub const EXHAUSTIVE_LIMIT: f64 = 1e4;
pub const MAX_SWEEPS: usize = 50;
/// Minimum warped IOU for matching objects across frames.
pub const MATCH_IOU: f64 = 0.2;

/// Class codes of a frame's detections in raster order of their top-left corners.
pub type SemanticSequence = Vec<ClassCode>;

fn code_of(db: &ObjectDatabase, label: &str) -> ClassCode {
    db.code(label).unwrap_or(ClassCode::new(0).expect("0 fits in 6 bits"))
}

/// Detection indices sorted by `(y_min, x_min)`, ties by index.
pub fn raster_order(boxes: &[BBox2D]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| {
        boxes[a]
            .y_min
            .total_cmp(&boxes[b].y_min)
            .then(boxes[a].x_min.total_cmp(&boxes[b].x_min))
            .then(a.cmp(&b))
    });
    idx
}

pub fn encode_sequence(frame: &Frame, db: &ObjectDatabase) -> SemanticSequence {
    let boxes: Vec<BBox2D> = frame.detections.iter().map(|d| d.bbox).collect();
    raster_order(&boxes)
        .into_iter()
        .map(|i| code_of(db, &frame.detections[i].label))
        .collect()
}

fn multiset(seq: &[ClassCode]) -> BTreeMap<ClassCode, usize> {
    let mut m = BTreeMap::new();
    for c in seq {
        *m.entry(*c).or_insert(0) += 1;
    }
    m
}

/// Multiset Jaccard ratio of two sequences; 1 for two empty sequences.
pub fn beta(a: &[ClassCode], b: &[ClassCode]) -> f64 {
    let (ma, mb) = (multiset(a), multiset(b));
    let mut inter = 0usize;
    let mut union = 0usize;
    for k in ma.keys().chain(mb.keys().filter(|k| !ma.contains_key(k))) {
        let (x, y) = (ma.get(k).copied().unwrap_or(0), mb.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Multiset union (elementwise max count), in code order.
fn multiset_union<'a>(seqs: impl IntoIterator<Item = &'a SemanticSequence>) -> SemanticSequence {
    let mut m: BTreeMap<ClassCode, usize> = BTreeMap::new();
    for s in seqs {
        for (k, n) in multiset(s) {
            let e = m.entry(k).or_insert(0);
            *e = (*e).max(n);
        }
    }
    m.into_iter().flat_map(|(k, n)| std::iter::repeat_n(k, n)).collect()
}

/// What the energy needs to know about one proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfProposal {
    pub bbox: BBox2D,
    pub centroid_px: Vector2<f64>,
    pub score: f64,
    /// This proposal reprojected into the next frame of the window.
    pub warped_next: Option<BBox2D>,
}

impl CrfProposal {
    pub fn from_proposal(p: &Proposal3D) -> Self {
        Self {
            bbox: p.bbox,
            centroid_px: p.centroid_px,
            score: p.score,
            warped_next: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfObject {
    /// Classification confidence of the detection.
    pub alpha: f64,
    pub code: ClassCode,
    pub det_bbox: BBox2D,
    pub proposals: Vec<CrfProposal>,
    /// Matching object in the previous frame of the window.
    pub prev_match: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfFrame {
    pub objects: Vec<CrfObject>,
    pub sequence: SemanticSequence,
    /// Shared-feature ratio with the previous frame (unused for the first frame).
    pub shared_ratio: f64,
}

/// Consecutive frames optimized jointly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfWindow {
    /// Index of the first frame in the sequence.
    pub start: usize,
    pub frames: Vec<CrfFrame>,
}

/// Binary activations `x[t][j][i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentVector {
    pub x: Vec<Vec<Vec<bool>>>,
}

impl AssignmentVector {
    pub fn empty(window: &CrfWindow) -> Self {
        Self {
            x: window
                .frames
                .iter()
                .map(|f| f.objects.iter().map(|o| vec![false; o.proposals.len()]).collect())
                .collect(),
        }
    }

    /// Builds a feasible assignment from one optional choice per `(t, j)`.
    pub fn from_choices(window: &CrfWindow, choices: &[Vec<Option<usize>>]) -> Self {
        let mut a = Self::empty(window);
        for (t, row) in choices.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if let Some(i) = c {
                    a.x[t][j][*i] = true;
                }
            }
        }
        a
    }

    pub fn active_count(&self, t: usize, j: usize) -> usize {
        self.x[t][j].iter().filter(|&&b| b).count()
    }

    /// The single active proposal of `(t, j)`; `None` when none or several are active.
    pub fn choice(&self, t: usize, j: usize) -> Option<usize> {
        let mut it = self.x[t][j].iter().enumerate().filter(|(_, &b)| b);
        match (it.next(), it.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    pub fn choices(&self) -> Vec<Vec<Option<usize>>> {
        (0..self.x.len())
            .map(|t| (0..self.x[t].len()).map(|j| self.choice(t, j)).collect())
            .collect()
    }

    pub fn is_feasible(&self) -> bool {
        self.x
            .iter()
            .all(|f| f.iter().all(|o| o.iter().filter(|&&b| b).count() <= 1))
    }
}

/// `α · (−s · (1 − d_norm))` with `d_norm` the centroid offset over the box diagonal, clamped to `[0, 1]`.
pub fn unary(p: &CrfProposal, det_bbox: &BBox2D, alpha: f64) -> f64 {
    let diag = det_bbox.diagonal();
    let d_norm = if diag > 0.0 {
        ((p.centroid_px - det_bbox.center()).norm() / diag).clamp(0.0, 1.0)
    } else {
        1.0
    };
    alpha * (-p.score * (1.0 - d_norm))
}

/// Raw temporal disagreement between frame `t − 1` and frame `t` (before the `s(1 − β)` factor).
fn pairwise_sum(prev: &CrfFrame, cur: &CrfFrame, prev_choice: &[Option<usize>], cur_choice: &[Option<usize>]) -> f64 {
    let mut sum = 0.0;
    for (j, obj) in cur.objects.iter().enumerate() {
        let (Some(m), Some(i)) = (obj.prev_match, cur_choice[j]) else {
            continue;
        };
        let Some(n) = prev_choice[m] else {
            continue;
        };
        sum += pair_cost(&prev.objects[m].proposals[n], &obj.proposals[i]);
    }
    sum
}

fn pair_cost(prev: &CrfProposal, cur: &CrfProposal) -> f64 {
    match prev.warped_next {
        Some(w) => 1.0 - iou(&cur.bbox, &w),
        None => 1.0,
    }
}

/// Temporal factor `s · (1 − β)` between frame `t − 1` and frame `t`.
pub fn pairwise_weight(prev: &CrfFrame, cur: &CrfFrame) -> f64 {
    cur.shared_ratio * (1.0 - beta(&prev.sequence, &cur.sequence))
}

/// Pairwise energy between consecutive frames with feasible choices.
pub fn pairwise(prev: &CrfFrame, cur: &CrfFrame, prev_choice: &[Option<usize>], cur_choice: &[Option<usize>]) -> f64 {
    let w = pairwise_weight(prev, cur);
    if w == 0.0 {
        return 0.0;
    }
    w * pairwise_sum(prev, cur, prev_choice, cur_choice)
}

/// Object tracks: chains of `(frame, object)` linked by `prev_match`.
pub fn tracks(window: &CrfWindow) -> Vec<Vec<(usize, usize)>> {
    let mut next: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    let mut has_prev = std::collections::BTreeSet::new();
    for (t, f) in window.frames.iter().enumerate().skip(1) {
        for (j, o) in f.objects.iter().enumerate() {
            if let Some(m) = o.prev_match {
                if m < window.frames[t - 1].objects.len() && !next.contains_key(&(t - 1, m)) {
                    next.insert((t - 1, m), (t, j));
                    has_prev.insert((t, j));
                }
            }
        }
    }
    let mut out = Vec::new();
    for (t, f) in window.frames.iter().enumerate() {
        for j in 0..f.objects.len() {
            if has_prev.contains(&(t, j)) {
                continue;
            }
            let mut chain = vec![(t, j)];
            let mut cur = (t, j);
            while let Some(&n) = next.get(&cur) {
                chain.push(n);
                cur = n;
            }
            out.push(chain);
        }
    }
    out
}

/// Hard constraint over one object track: 0 when every frame activates at
/// most one proposal, [`INFEASIBLE`] otherwise. Zero activations are allowed.
pub fn high_order(assign: &AssignmentVector, track: &[(usize, usize)]) -> f64 {
    if track.iter().any(|&(t, j)| assign.active_count(t, j) > 1) {
        INFEASIBLE
    } else {
        0.0
    }
}

/// `β*` of frame `t`: its sequence against the union of the window up to `t`.
pub fn beta_star(window: &CrfWindow, t: usize) -> f64 {
    let union = multiset_union(window.frames[..=t].iter().map(|f| &f.sequence));
    beta(&window.frames[t].sequence, &union)
}

/// Total window energy; [`INFEASIBLE`] when any object activates more than one proposal in a frame.
pub fn total_energy(window: &CrfWindow, assign: &AssignmentVector) -> f64 {
    if !assign.is_feasible() {
        return INFEASIBLE;
    }
    let choices = assign.choices();
    energy_of_choices(window, &choices)
}

fn energy_of_choices(window: &CrfWindow, choices: &[Vec<Option<usize>>]) -> f64 {
    let mut e = 0.0;
    for (t, f) in window.frames.iter().enumerate() {
        for (j, o) in f.objects.iter().enumerate() {
            if let Some(i) = choices[t][j] {
                e += unary(&o.proposals[i], &o.det_bbox, o.alpha);
            }
        }
        if t > 0 {
            e += pairwise(&window.frames[t - 1], f, &choices[t - 1], &choices[t]);
        }
    }
    // feasible high-order terms are exactly zero for any β*
    e
}

fn combinations(window: &CrfWindow) -> f64 {
    window
        .frames
        .iter()
        .flat_map(|f| f.objects.iter())
        .map(|o| (o.proposals.len() + 1) as f64)
        .product()
}

/// Enumerates every feasible assignment; the first strict minimum in
/// lexicographic `(frame, object)` order wins, with "none" after all proposals.
pub fn select_exhaustive(window: &CrfWindow) -> AssignmentVector {
    let slots: Vec<(usize, usize, usize)> = window
        .frames
        .iter()
        .enumerate()
        .flat_map(|(t, f)| {
            f.objects
                .iter()
                .enumerate()
                .map(move |(j, o)| (t, j, o.proposals.len()))
        })
        .collect();
    let mut choices: Vec<Vec<Option<usize>>> = window.frames.iter().map(|f| vec![None; f.objects.len()]).collect();
    let mut digits = vec![0usize; slots.len()];
    let mut best = (f64::INFINITY, choices.clone());
    loop {
        for (k, &(t, j, p)) in slots.iter().enumerate() {
            choices[t][j] = if digits[k] < p { Some(digits[k]) } else { None };
        }
        let e = energy_of_choices(window, &choices);
        if e < best.0 {
            best = (e, choices.clone());
        }
        // mixed-radix increment, last slot fastest
        let mut k = slots.len();
        loop {
            if k == 0 {
                return AssignmentVector::from_choices(window, &best.1);
            }
            k -= 1;
            digits[k] += 1;
            if digits[k] <= slots[k].2 {
                break;
            }
            digits[k] = 0;
        }
    }
}

fn top_scored(o: &CrfObject) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in o.proposals.iter().enumerate() {
        if best.is_none_or(|b| p.score > o.proposals[b].score) {
            best = Some(i);
        }
    }
    best
}

/// Exact minimization of one track with the rest of the window fixed.
///
/// Terms touching the track are its unaries, the pairwise terms along the
/// chain, and pairwise terms with objects outside the chain (which only exist
/// if `prev_match` links are not one-to-one). Solved by dynamic programming
/// along the chain with options ordered `[0, …, P−1, none]`.
fn optimize_track(window: &CrfWindow, track: &[(usize, usize)], choices: &mut [Vec<Option<usize>>]) {
    let opts = |(t, j): (usize, usize)| -> Vec<Option<usize>> {
        let p = window.frames[t].objects[j].proposals.len();
        (0..p).map(Some).chain(std::iter::once(None)).collect()
    };
    // local cost of node k taking option o, with neighbours outside the chain fixed
    let node_cost = |k: usize, o: Option<usize>, choices: &[Vec<Option<usize>>]| -> f64 {
        let (t, j) = track[k];
        let obj = &window.frames[t].objects[j];
        let mut c = o.map_or(0.0, |i| unary(&obj.proposals[i], &obj.det_bbox, obj.alpha));
        let Some(i) = o else { return c };
        // link to an off-chain predecessor
        if k == 0 && t > 0 {
            if let Some(m) = obj.prev_match {
                if let Some(n) = choices[t - 1][m] {
                    let w = pairwise_weight(&window.frames[t - 1], &window.frames[t]);
                    c += w * pair_cost(&window.frames[t - 1].objects[m].proposals[n], &obj.proposals[i]);
                }
            }
        }
        // off-chain successors pointing at this node
        if t + 1 < window.frames.len() {
            let nf = &window.frames[t + 1];
            let w = pairwise_weight(&window.frames[t], nf);
            for (jj, no) in nf.objects.iter().enumerate() {
                if no.prev_match != Some(j) || (k + 1 < track.len() && track[k + 1] == (t + 1, jj)) {
                    continue;
                }
                if let Some(ii) = choices[t + 1][jj] {
                    c += w * pair_cost(&obj.proposals[i], &no.proposals[ii]);
                }
            }
        }
        c
    };
    let edge_cost = |k: usize, a: Option<usize>, b: Option<usize>| -> f64 {
        let (t0, j0) = track[k - 1];
        let (t1, j1) = track[k];
        match (a, b) {
            (Some(n), Some(i)) => {
                let w = pairwise_weight(&window.frames[t0], &window.frames[t1]);
                w * pair_cost(
                    &window.frames[t0].objects[j0].proposals[n],
                    &window.frames[t1].objects[j1].proposals[i],
                )
            }
            _ => 0.0,
        }
    };
    let options: Vec<Vec<Option<usize>>> = track.iter().map(|&n| opts(n)).collect();
    let mut cost: Vec<f64> = options[0].iter().map(|&o| node_cost(0, o, choices)).collect();
    let mut back: Vec<Vec<usize>> = vec![Vec::new()];
    for k in 1..track.len() {
        let mut nc = Vec::with_capacity(options[k].len());
        let mut nb = Vec::with_capacity(options[k].len());
        for &o in &options[k] {
            let mut best = (f64::INFINITY, 0usize);
            for (pi, &po) in options[k - 1].iter().enumerate() {
                let v = cost[pi] + edge_cost(k, po, o);
                if v < best.0 {
                    best = (v, pi);
                }
            }
            nc.push(best.0 + node_cost(k, o, choices));
            nb.push(best.1);
        }
        cost = nc;
        back.push(nb);
    }
    let mut idx = (0..cost.len()).fold(0, |b, i| if cost[i] < cost[b] { i } else { b });
    for k in (0..track.len()).rev() {
        let (t, j) = track[k];
        choices[t][j] = options[k][idx];
        if k > 0 {
            idx = back[k][idx];
        }
    }
}

/// Iterated conditional modes over object tracks, starting from the
/// top-scored proposal of every object. A track update is kept only when it
/// strictly lowers the window energy.
pub fn select_icm(window: &CrfWindow) -> AssignmentVector {
    let mut choices: Vec<Vec<Option<usize>>> = window
        .frames
        .iter()
        .map(|f| f.objects.iter().map(top_scored).collect())
        .collect();
    let mut energy = energy_of_choices(window, &choices);
    let tracks = tracks(window);
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for track in &tracks {
            let mut trial = choices.clone();
            optimize_track(window, track, &mut trial);
            let e = energy_of_choices(window, &trial);
            if e < energy {
                energy = e;
                choices = trial;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    AssignmentVector::from_choices(window, &choices)
}

/// Minimizes the window energy: enumeration for small windows, ICM otherwise.
pub fn select(window: &CrfWindow) -> AssignmentVector {
    if combinations(window) <= EXHAUSTIVE_LIMIT {
        select_exhaustive(window)
    } else {
        select_icm(window)
    }
}

/// Per-frame inputs for building windows from a sequence.
pub struct WindowInput<'a> {
    pub frame: &'a Frame,
    /// Proposals per detection.
    pub proposals: &'a [Vec<Proposal3D>],
    /// Current estimate of the camera-in-world pose.
    pub world_from_cam: Pose,
}

fn warp_into(p: &Proposal3D, next_from_cur: &Pose, intr: &CameraIntrinsics) -> Option<BBox2D> {
    let cam_from_ground = next_from_cur.compose(&p.cam_from_ground);
    project_model_bbox(&p.model, &cam_from_ground, intr)
        .ok()
        .map(|b| b.bbox)
}

/// Greedy one-to-one matching of same-class objects by IOU between the
/// previous object's warped box and the current detection box.
fn match_objects(prev: &[(ClassCode, BBox2D)], cur: &[(ClassCode, BBox2D)]) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (j, (cc, cb)) in cur.iter().enumerate() {
        for (m, (pc, pb)) in prev.iter().enumerate() {
            if cc != pc {
                continue;
            }
            let o = iou(cb, pb);
            if o >= MATCH_IOU {
                pairs.push((o, j, m));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; cur.len()];
    let mut used = vec![false; prev.len()];
    for (_, j, m) in pairs {
        if out[j].is_none() && !used[m] {
            out[j] = Some(m);
            used[m] = true;
        }
    }
    out
}

/// Builds a window from consecutive frames.
pub fn build_window(start: usize, inputs: &[WindowInput], intr: &CameraIntrinsics, db: &ObjectDatabase) -> CrfWindow {
    let mut frames: Vec<CrfFrame> = Vec::with_capacity(inputs.len());
    // where each object of the previous frame is expected in the current one
    let mut prev_predicted: Vec<(ClassCode, BBox2D)> = Vec::new();
    for (k, inp) in inputs.iter().enumerate() {
        let next_from_cur = inputs
            .get(k + 1)
            .map(|n| n.world_from_cam.inverse().compose(&inp.world_from_cam));
        let mut objects = Vec::with_capacity(inp.frame.detections.len());
        for (d, det) in inp.frame.detections.iter().enumerate() {
            let props = inp.proposals.get(d).map(Vec::as_slice).unwrap_or(&[]);
            let proposals = props
                .iter()
                .map(|p| CrfProposal {
                    warped_next: next_from_cur.as_ref().and_then(|h| warp_into(p, h, intr)),
                    ..CrfProposal::from_proposal(p)
                })
                .collect();
            objects.push(CrfObject {
                alpha: det.score,
                code: code_of(db, &det.label),
                det_bbox: det.bbox,
                proposals,
                prev_match: None,
            });
        }
        let cur_keys: Vec<(ClassCode, BBox2D)> = objects.iter().map(|o| (o.code, o.det_bbox)).collect();
        let mut shared_ratio = 0.0;
        if k > 0 {
            let matches = match_objects(&prev_predicted, &cur_keys);
            for (o, m) in objects.iter_mut().zip(&matches) {
                o.prev_match = *m;
            }
            shared_ratio = shared_feature_ratio(inputs[k - 1].frame, inp.frame, &matches);
        }
        prev_predicted = objects
            .iter()
            .map(|o| {
                let warped = top_scored(o).and_then(|i| o.proposals[i].warped_next);
                (o.code, warped.unwrap_or(o.det_bbox))
            })
            .collect();
        frames.push(CrfFrame {
            objects,
            sequence: encode_sequence(inp.frame, db),
            shared_ratio,
        });
    }
    CrfWindow { start, frames }
}

/// Fraction of feature tracks inside matched current boxes that were also
/// inside the matching previous box; 1 when the matched boxes hold no features.
fn shared_feature_ratio(prev: &Frame, cur: &Frame, matches: &[Option<usize>]) -> f64 {
    let mut shared = 0usize;
    let mut total = 0usize;
    for (j, m) in matches.iter().enumerate() {
        let Some(m) = m else { continue };
        let before: std::collections::BTreeSet<usize> = prev.features_in(*m).map(|f| f.point).collect();
        for f in cur.features_in(j) {
            total += 1;
            if before.contains(&f.point) {
                shared += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        shared as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_sim::Detection;

    fn code(c: u8) -> ClassCode {
        ClassCode::new(c).unwrap()
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox2D {
        BBox2D::new(x0, y0, x1, y1).unwrap()
    }

    fn prop(b: BBox2D, score: f64) -> CrfProposal {
        CrfProposal {
            bbox: b,
            centroid_px: b.center(),
            score,
            warped_next: Some(b),
        }
    }

    fn frame_with(dets: &[(&str, BBox2D)]) -> Frame {
        Frame {
            index: 0,
            detections: dets
                .iter()
                .map(|(l, b)| Detection {
                    bbox: *b,
                    label: l.to_string(),
                    score: 1.0,
                    truth: None,
                })
                .collect(),
            features: vec![],
            lines: vec![],
            ground_points: vec![],
            odom: Pose::identity(),
        }
    }

    #[test]
    fn sequence_encoding() {
        let db = ObjectDatabase::default();
        assert!(encode_sequence(&frame_with(&[]), &db).is_empty());
        let one = encode_sequence(&frame_with(&[("chair", bx(0.0, 0.0, 10.0, 10.0))]), &db);
        assert_eq!(one.iter().map(|c| c.bits()).collect::<Vec<_>>(), vec!["000001"]);
        let two = encode_sequence(
            &frame_with(&[
                ("sofa", bx(50.0, 5.0, 60.0, 10.0)),
                ("chair", bx(10.0, 5.0, 20.0, 10.0)),
            ]),
            &db,
        );
        assert_eq!(two, vec![code(1), code(2)]);
    }

    #[test]
    fn beta_examples() {
        let (c, s, d) = (code(1), code(2), code(3));
        assert_eq!(beta(&[c, s], &[c, s]), 1.0);
        assert_eq!(beta(&[c], &[s]), 0.0);
        assert_eq!(beta(&[c, c, s], &[c, s, d]), 0.5);
        assert_eq!(beta(&[], &[]), 1.0);
        assert_eq!(beta(&[c, s], &[s, c]), 1.0);
    }

    #[test]
    fn unary_examples() {
        let det = bx(0.0, 0.0, 30.0, 40.0);
        let p = prop(det, 0.5);
        assert!((unary(&p, &det, 1.0) + 0.5).abs() < 1e-15);
        let far = CrfProposal {
            centroid_px: Vector2::new(100.0, 100.0),
            ..p.clone()
        };
        assert_eq!(unary(&far, &det, 1.0), 0.0);
        assert_eq!(unary(&CrfProposal { score: 0.0, ..p }, &det, 1.0), 0.0);
    }

    fn two_frame(iou_target_shift: f64, shared: f64, seq_b: Vec<ClassCode>) -> (CrfWindow, AssignmentVector) {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let shifted = bx(iou_target_shift, 0.0, 10.0 + iou_target_shift, 10.0);
        let f0 = CrfFrame {
            objects: vec![CrfObject {
                alpha: 1.0,
                code: code(1),
                det_bbox: b,
                proposals: vec![prop(b, 0.5)],
                prev_match: None,
            }],
            sequence: vec![code(1)],
            shared_ratio: 0.0,
        };
        let f1 = CrfFrame {
            objects: vec![CrfObject {
                alpha: 1.0,
                code: code(1),
                det_bbox: shifted,
                proposals: vec![prop(shifted, 0.5)],
                prev_match: Some(0),
            }],
            sequence: seq_b,
            shared_ratio: shared,
        };
        let w = CrfWindow {
            start: 0,
            frames: vec![f0, f1],
        };
        let a = AssignmentVector::from_choices(&w, &[vec![Some(0)], vec![Some(0)]]);
        (w, a)
    }

    #[test]
    fn pairwise_examples() {
        // identical boxes: IOU 1
        let (w, _) = two_frame(0.0, 1.0, vec![code(2)]);
        assert_eq!(pairwise(&w.frames[0], &w.frames[1], &[Some(0)], &[Some(0)]), 0.0);
        // beta = 1 silences the term
        let (w, _) = two_frame(5.0, 1.0, vec![code(1)]);
        assert_eq!(pairwise(&w.frames[0], &w.frames[1], &[Some(0)], &[Some(0)]), 0.0);
        // shift 2.5 px of a 10 px box: IOU = 7.5/12.5 = 0.6
        let (w, _) = two_frame(2.5, 1.0, vec![code(2)]);
        let e = pairwise(&w.frames[0], &w.frames[1], &[Some(0)], &[Some(0)]);
        assert!((e - 0.4).abs() < 1e-12, "{e}");
    }

    #[test]
    fn high_order_and_feasibility() {
        let (w, mut a) = two_frame(0.0, 1.0, vec![code(1)]);
        let tr = tracks(&w);
        assert_eq!(tr, vec![vec![(0, 0), (1, 0)]]);
        assert_eq!(high_order(&a, &tr[0]), 0.0);
        assert_eq!(high_order(&AssignmentVector::empty(&w), &tr[0]), 0.0);
        a.x[1][0].push(true);
        let mut w2 = w.clone();
        w2.frames[1].objects[0]
            .proposals
            .push(prop(bx(0.0, 0.0, 5.0, 5.0), 0.1));
        assert_eq!(high_order(&a, &tr[0]), INFEASIBLE);
        assert_eq!(total_energy(&w2, &a), INFEASIBLE);
    }

    #[test]
    fn total_energy_examples() {
        let (w, a) = two_frame(2.5, 1.0, vec![code(2)]);
        assert_eq!(total_energy(&w, &AssignmentVector::empty(&w)), 0.0);
        let single = CrfWindow {
            start: 0,
            frames: vec![w.frames[0].clone()],
        };
        let one = AssignmentVector::from_choices(&single, &[vec![Some(0)]]);
        let o = &single.frames[0].objects[0];
        assert_eq!(
            total_energy(&single, &one),
            unary(&o.proposals[0], &o.det_bbox, o.alpha)
        );
        let e = total_energy(&w, &a);
        let u1 = unary(
            &w.frames[1].objects[0].proposals[0],
            &w.frames[1].objects[0].det_bbox,
            1.0,
        );
        assert!((e - (-0.5 + u1 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn select_picks_negative_unary() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let w = CrfWindow {
            start: 0,
            frames: vec![CrfFrame {
                objects: vec![CrfObject {
                    alpha: 0.9,
                    code: code(1),
                    det_bbox: b,
                    proposals: vec![prop(b, 0.7)],
                    prev_match: None,
                }],
                sequence: vec![code(1)],
                shared_ratio: 0.0,
            }],
        };
        assert_eq!(select(&w).choices(), vec![vec![Some(0)]]);
    }

    #[test]
    fn beta_star_uses_window_union() {
        let mk = |seq: Vec<ClassCode>| CrfFrame {
            objects: vec![],
            sequence: seq,
            shared_ratio: 0.0,
        };
        let w = CrfWindow {
            start: 0,
            frames: vec![mk(vec![code(1), code(2)]), mk(vec![code(1)])],
        };
        assert_eq!(beta_star(&w, 0), 1.0);
        assert_eq!(beta_star(&w, 1), 0.5);
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let prev = vec![(code(1), a)];
        let cur = vec![(code(1), bx(1.0, 0.0, 11.0, 10.0)), (code(1), a), (code(2), a)];
        assert_eq!(match_objects(&prev, &cur), vec![None, Some(0), None]);
    }

    fn arb_window() -> impl proptest::strategy::Strategy<Value = CrfWindow> {
        use proptest::prelude::*;
        let proposal = (0.0..300.0f64, 0.0..200.0f64, 20.0..80.0f64, 0.0..1.0f64, -15.0..15.0f64).prop_map(
            |(x, y, s, score, dx)| {
                let b = bx(x, y, x + s, y + s);
                CrfProposal {
                    bbox: b,
                    centroid_px: b.center() + Vector2::new(dx, 0.0),
                    score,
                    warped_next: Some(bx(x + dx, y, x + dx + s, y + s)),
                }
            },
        );
        let object = (
            0.1..1.0f64,
            1u8..3,
            prop::collection::vec(proposal, 0..4),
            any::<bool>(),
        );
        let frame = (prop::collection::vec(object, 1..4), 0.0..1.0f64);
        prop::collection::vec(frame, 1..4).prop_map(|frames| {
            let mut out: Vec<CrfFrame> = Vec::new();
            for (t, (objs, shared)) in frames.into_iter().enumerate() {
                let prev_len = out.last().map_or(0, |f: &CrfFrame| f.objects.len());
                let objects: Vec<CrfObject> = objs
                    .into_iter()
                    .enumerate()
                    .map(|(j, (alpha, c, proposals, linked))| CrfObject {
                        alpha,
                        code: code(c),
                        det_bbox: proposals.first().map_or(bx(0.0, 0.0, 50.0, 50.0), |p| p.bbox),
                        proposals,
                        prev_match: (t > 0 && linked && j < prev_len).then_some(j),
                    })
                    .collect();
                let sequence = objects.iter().map(|o| o.code).collect();
                out.push(CrfFrame {
                    objects,
                    sequence,
                    shared_ratio: shared,
                });
            }
            CrfWindow { start: 0, frames: out }
        })
    }

    proptest::proptest! {
        #[test]
        fn icm_matches_enumeration(w in arb_window()) {
            let exact = total_energy(&w, &select_exhaustive(&w));
            let icm = select_icm(&w);
            proptest::prop_assert!(icm.is_feasible());
            let e = total_energy(&w, &icm);
            proptest::prop_assert!((e - exact).abs() < 1e-12, "icm {} vs exact {}", e, exact);
            let init: Vec<Vec<Option<usize>>> = w.frames.iter().map(|f| f.objects.iter().map(top_scored).collect()).collect();
            proptest::prop_assert!(e <= energy_of_choices(&w, &init));
        }

        #[test]
        fn beta_symmetric_and_bounded(a in proptest::collection::vec(0u8..5, 0..6), b in proptest::collection::vec(0u8..5, 0..6)) {
            let a: Vec<ClassCode> = a.into_iter().map(code).collect();
            let b: Vec<ClassCode> = b.into_iter().map(code).collect();
            let x = beta(&a, &b);
            proptest::prop_assert_eq!(x, beta(&b, &a));
            proptest::prop_assert!((0.0..=1.0).contains(&x));
            proptest::prop_assert_eq!(beta(&a, &a), 1.0);
        }
    }
}
