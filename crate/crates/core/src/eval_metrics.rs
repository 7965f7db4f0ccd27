//! Reconstruction scores: thresholded one-to-one point matching, RMS
//! accuracy, IoU and a tree-structure consistency score.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::curve_tree::Topology;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::sequence::{tree_polylines, TreeSequence};

pub const DEFAULT_THRESHOLD_MM: f64 = 10.0;
pub const DEFAULT_RESAMPLE_MM: f64 = 1.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(model_id, gt_id, distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_model: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl Matching {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Minimum-cost assignment of every row of an `n x m` cost matrix (`n <= m`).
/// Returns the column of each row.
fn hungarian(cost: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Maximum-cardinality one-to-one matching among pairs within `threshold`,
/// with minimum total distance among those.
pub fn match_points(model: &[Vector3<f64>], gt: &[Vector3<f64>], threshold: f64) -> Matching {
    let (n, m) = (model.len(), gt.len());
    if n == 0 || m == 0 {
        return Matching {
            pairs: Vec::new(),
            unmatched_model: (0..n).collect(),
            unmatched_gt: (0..m).collect(),
        };
    }
    let transpose = n > m;
    let (rows, cols) = if transpose { (gt, model) } else { (model, gt) };
    // any real matching costs less than one forbidden pair
    let big = threshold * (rows.len() as f64 + 1.0) + 1.0;
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| {
            cols.iter()
                .map(|b| {
                    let d = (a - b).norm();
                    if d <= threshold {
                        d
                    } else {
                        big
                    }
                })
                .collect()
        })
        .collect();
    let assign = hungarian(&cost, cols.len());
    let mut pairs = Vec::new();
    let mut row_used = vec![false; rows.len()];
    let mut col_used = vec![false; cols.len()];
    for (r, &c) in assign.iter().enumerate() {
        let d = (rows[r] - cols[c]).norm();
        if d <= threshold {
            row_used[r] = true;
            col_used[c] = true;
            pairs.push(if transpose { (c, r, d) } else { (r, c, d) });
        }
    }
    pairs.sort_by_key(|p| (p.0, p.1));
    let (mu, gu) = if transpose { (col_used, row_used) } else { (row_used, col_used) };
    Matching {
        pairs,
        unmatched_model: (0..n).filter(|&k| !mu[k]).collect(),
        unmatched_gt: (0..m).filter(|&k| !gu[k]).collect(),
    }
}

pub fn rms_accuracy(m: &Matching) -> Result<f64> {
    if m.pairs.is_empty() {
        return Err(Error::EmptyMatching);
    }
    Ok((m.pairs.iter().map(|p| p.2 * p.2).sum::<f64>() / m.pairs.len() as f64).sqrt())
}

pub fn iou(m: &Matching, n_model: usize, n_gt: usize) -> Result<f64> {
    let k = m.pairs.len();
    if n_model == 0 && n_gt == 0 {
        return Err(Error::EmptyMatching);
    }
    if k > n_model || k > n_gt {
        return Err(Error::InvalidParameter(format!("{k} matches for {n_model} and {n_gt} points")));
    }
    Ok(k as f64 / (n_model + n_gt - k) as f64)
}

/// Points every `step` of arc length along a polyline, starting at `s = 0`
/// or at `s = step` when `skip_start`.
pub fn resample_polyline(poly: &[Vector3<f64>], step: f64, skip_start: bool) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    if poly.is_empty() {
        return out;
    }
    let total: f64 = poly.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let mut k = if skip_start { 1 } else { 0 };
    let mut seg = 0;
    let mut seg_start = 0.0;
    loop {
        let s = k as f64 * step;
        if s > total + 1e-12 {
            break;
        }
        while seg + 1 < poly.len() {
            let len = (poly[seg + 1] - poly[seg]).norm();
            if s <= seg_start + len || seg + 2 == poly.len() {
                break;
            }
            seg_start += len;
            seg += 1;
        }
        let x = if poly.len() == 1 {
            poly[0]
        } else {
            let len = (poly[seg + 1] - poly[seg]).norm();
            let f = if len > 0.0 { ((s - seg_start) / len).clamp(0.0, 1.0) } else { 0.0 };
            poly[seg] + (poly[seg + 1] - poly[seg]) * f
        };
        out.push(x);
        k += 1;
    }
    out
}

/// Resampled points of frame `i` with their 1-based curve labels.
pub fn labelled_points(seq: &TreeSequence, i: usize, step: f64) -> (Vec<Vector3<f64>>, Vec<usize>) {
    let polys = tree_polylines(&seq.topology, &seq.sites, &seq.points[i]);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, poly) in polys.iter().enumerate() {
        let skip = !seq.topology.is_root(c + 1);
        for x in resample_polyline(poly, step, skip) {
            pts.push(x);
            labels.push(c + 1);
        }
    }
    (pts, labels)
}

fn check_time_axes(a: &TreeSequence, b: &TreeSequence) -> Result<()> {
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::DimensionMismatch(format!(
            "time axes differ ({} vs {} frames)",
            a.times.len(),
            b.times.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TscReport {
    pub score: f64,
    pub geometric_inconsistencies: usize,
    pub parent_child_inconsistencies: usize,
    pub identity_switches: usize,
    pub opportunities: usize,
    /// Per frame, the gt curve of each model curve (1-based), if any.
    pub correspondence: Vec<Vec<Option<usize>>>,
}

fn plurality(votes: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (g, &n) in votes.iter().enumerate().skip(1) {
        if n > 0 && best.is_none_or(|b| n > b.1) {
            best = Some((g, n));
        }
    }
    best.map(|b| b.0)
}

fn related(gt: &Topology, parent: usize, child: usize) -> bool {
    parent == child || gt.parent(child) == parent
}

/// Tree-structure consistency, TSC-variant:
/// (a) model curves whose matches span several gt curves, plus gt curves
///     whose matches span several model curves;
/// (b) model parent-child pairs whose gt curves are neither the same nor
///     parent and child;
/// (c) model curves whose gt curve changes between adjacent frames.
pub fn tsc(model: &TreeSequence, gt: &TreeSequence, threshold: f64, step: f64) -> Result<TscReport> {
    check_time_axes(model, gt)?;
    let nm = model.topology.n_curves();
    let ng = gt.topology.n_curves();
    let t = model.times.len();
    let mut geo = 0;
    let mut pc = 0;
    let mut corr = Vec::with_capacity(t);
    for i in 0..t {
        let (mp, ml) = labelled_points(model, i, step);
        let (gp, gl) = labelled_points(gt, i, step);
        let m = match_points(&mp, &gp, threshold);
        // votes[model][gt]
        let mut votes = vec![vec![0usize; ng + 1]; nm + 1];
        for &(a, b, _) in &m.pairs {
            votes[ml[a]][gl[b]] += 1;
        }
        for row in votes.iter().skip(1) {
            if row.iter().filter(|&&n| n > 0).count() >= 2 {
                geo += 1;
            }
        }
        for g in 1..=ng {
            if (1..=nm).filter(|&c| votes[c][g] > 0).count() >= 2 {
                geo += 1;
            }
        }
        let frame: Vec<Option<usize>> = (1..=nm).map(|c| plurality(&votes[c])).collect();
        for c in 1..=nm {
            let p = model.topology.parent(c);
            if p == 0 {
                continue;
            }
            match (frame[p - 1], frame[c - 1]) {
                (Some(gp), Some(gc)) if related(&gt.topology, gp, gc) => {}
                _ => pc += 1,
            }
        }
        corr.push(frame);
    }
    let mut switches = 0;
    for w in corr.windows(2) {
        switches += (0..nm).filter(|&c| w[0][c] != w[1][c]).count();
    }
    let n_children = (1..=nm).filter(|&c| !model.topology.is_root(c)).count();
    let opportunities = nm * t + n_children * t + nm * t.saturating_sub(1);
    let errors = geo + pc + switches;
    let score = if opportunities == 0 {
        1.0
    } else {
        (1.0 - errors as f64 / opportunities as f64).clamp(0.0, 1.0)
    };
    Ok(TscReport {
        score,
        geometric_inconsistencies: geo,
        parent_child_inconsistencies: pc,
        identity_switches: switches,
        opportunities,
        correspondence: corr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    /// `None` when nothing matched.
    pub rms_mm: Option<f64>,
    pub iou: f64,
    pub matched: usize,
    pub n_model: usize,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub frames: Vec<FrameScore>,
    pub tsc: TscReport,
}

impl Evaluation {
    /// RMS over all matched pairs of all frames.
    pub fn pooled_rms(&self) -> Option<f64> {
        let (mut se, mut n) = (0.0, 0usize);
        for f in &self.frames {
            if let Some(r) = f.rms_mm {
                se += r * r * f.matched as f64;
                n += f.matched;
            }
        }
        (n > 0).then(|| (se / n as f64).sqrt())
    }

    pub fn mean_iou(&self) -> f64 {
        self.frames.iter().map(|f| f.iou).sum::<f64>() / self.frames.len().max(1) as f64
    }
}

/// Per-frame matching scores plus the TSC-variant report.
pub fn evaluate(model: &TreeSequence, gt: &TreeSequence, threshold: f64, step: f64, exec: Execution) -> Result<Evaluation> {
    check_time_axes(model, gt)?;
    let frames = par::map_indexed(exec, model.times.len(), |i| -> Result<FrameScore> {
        let (mp, _) = labelled_points(model, i, step);
        let (gp, _) = labelled_points(gt, i, step);
        let m = match_points(&mp, &gp, threshold);
        Ok(FrameScore {
            frame: i,
            rms_mm: rms_accuracy(&m).ok(),
            iou: iou(&m, mp.len(), gp.len())?,
            matched: m.pairs.len(),
            n_model: mp.len(),
            n_gt: gp.len(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        frames,
        tsc: tsc(model, gt, threshold, step)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve_tree::{IndexSet, PointIndex};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(model: &[Vector3<f64>], gt: &[Vector3<f64>], thr: f64) -> (usize, f64) {
        fn rec(i: usize, model: &[Vector3<f64>], gt: &[Vector3<f64>], thr: f64, used: &mut Vec<bool>, k: usize, s: f64, best: &mut (usize, f64)) {
            if i == model.len() {
                if k > best.0 || (k == best.0 && s < best.1) {
                    *best = (k, s);
                }
                return;
            }
            rec(i + 1, model, gt, thr, used, k, s, best);
            for j in 0..gt.len() {
                let d = (model[i] - gt[j]).norm();
                if !used[j] && d <= thr {
                    used[j] = true;
                    rec(i + 1, model, gt, thr, used, k + 1, s + d, best);
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        rec(0, model, gt, thr, &mut vec![false; gt.len()], 0, 0.0, &mut best);
        best
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(0.0..5.0)))
            .collect()
    }

    #[test]
    fn matching_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (n, m) = (rng.random_range(0..=8), rng.random_range(0..=8));
            let a = cloud(&mut rng, n);
            let b = cloud(&mut rng, m);
            let got = match_points(&a, &b, 10.0);
            let (k, s) = brute_force(&a, &b, 10.0);
            assert_eq!(got.pairs.len(), k);
            assert!((got.total_distance() - s).abs() < 1e-9);
            assert!(got.pairs.iter().all(|p| p.2 <= 10.0));
            assert_eq!(got.pairs.len() + got.unmatched_model.len(), n);
            assert_eq!(got.pairs.len() + got.unmatched_gt.len(), m);
        }
    }

    #[test]
    fn matching_examples() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0)];
        let m = match_points(&a, &a, 10.0);
        assert_eq!(m.pairs.len(), 2);
        assert_eq!(m.total_distance(), 0.0);

        // both model points near one gt point
        let m = match_points(&a, &[Vector3::new(2.0, 0.0, 0.0)], 10.0);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].0, 0);

        // greedy would pair a0-g0 (distance 1) and leave a1 unmatched
        let model = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(-9.5, 0.0, 0.0)];
        let gt = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
        let m = match_points(&model, &gt, 10.0);
        assert_eq!(m.pairs.len(), 2);
        assert_eq!(m.pairs, vec![(0, 0, 1.0), (1, 1, 8.5)]);

        assert!(match_points(&[], &gt, 10.0).pairs.is_empty());
    }

    #[test]
    fn rms_and_iou_examples() {
        let m = Matching {
            pairs: vec![(0, 0, 3.0), (1, 1, 4.0)],
            ..Matching::default()
        };
        assert!((rms_accuracy(&m).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rms_accuracy(&Matching::default()).is_err());

        let eight = Matching {
            pairs: (0..8).map(|k| (k, k, 0.0)).collect(),
            ..Matching::default()
        };
        assert!((iou(&eight, 10, 10).unwrap() - 8.0 / 12.0).abs() < 1e-12);
        assert_eq!(iou(&eight, 8, 8).unwrap(), 1.0);
        assert_eq!(iou(&Matching::default(), 3, 4).unwrap(), 0.0);
        assert!(iou(&Matching::default(), 0, 0).is_err());
    }

    #[test]
    fn resampling_spacing() {
        let poly = vec![Vector3::zeros(), Vector3::new(2.5, 0.0, 0.0), Vector3::new(2.5, 2.0, 0.0)];
        let pts = resample_polyline(&poly, 1.0, false);
        assert_eq!(pts.len(), 5);
        assert!((pts[3] - Vector3::new(2.5, 0.5, 0.0)).norm() < 1e-12);
        assert_eq!(resample_polyline(&poly, 1.0, true).len(), 4);
    }

    fn two_curve_sequence(frames: usize, swap_from: usize) -> (TreeSequence, TreeSequence) {
        let topo = Topology::new(vec![10.0, 10.0], vec![0, 0], vec![0.0, 0.0]).unwrap();
        let sites = IndexSet::uniform(&topo, 1.0).unwrap();
        let place = |p: &PointIndex, c: usize| match c {
            1 => Vector3::new(0.0, 0.0, p.t),
            _ => Vector3::new(50.0, 0.0, p.t),
        };
        let times: Vec<f64> = (0..frames).map(|i| i as f64).collect();
        let gt_pts: Vec<Vec<Vector3<f64>>> = (0..frames)
            .map(|_| sites.iter().map(|p| place(p, p.curve)).collect())
            .collect();
        let model_pts: Vec<Vec<Vector3<f64>>> = (0..frames)
            .map(|i| {
                sites
                    .iter()
                    .map(|p| {
                        let c = if i >= swap_from { 3 - p.curve } else { p.curve };
                        place(p, c)
                    })
                    .collect()
            })
            .collect();
        (
            TreeSequence::new(topo.clone(), sites.clone(), times.clone(), model_pts).unwrap(),
            TreeSequence::new(topo, sites, times, gt_pts).unwrap(),
        )
    }

    #[test]
    fn tsc_perfect_and_identity_swap() {
        let (model, gt) = two_curve_sequence(5, usize::MAX);
        let r = tsc(&model, &gt, 10.0, 1.0).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.geometric_inconsistencies + r.parent_child_inconsistencies + r.identity_switches, 0);
        let e = evaluate(&model, &gt, 10.0, 1.0, Execution::Sequential).unwrap();
        assert_eq!(e.pooled_rms(), Some(0.0));
        assert_eq!(e.mean_iou(), 1.0);

        let (model, gt) = two_curve_sequence(5, 2);
        let r = tsc(&model, &gt, 10.0, 1.0).unwrap();
        assert_eq!(r.identity_switches, 2);
        assert_eq!(r.opportunities, 18);
        assert!((r.score - (1.0 - 2.0 / 18.0)).abs() < 1e-12);
    }

    #[test]
    fn tsc_counts_oversegmentation_once() {
        // one gt curve traced as two model curves end to end
        let gt_topo = Topology::single(20.0).unwrap();
        let gt_sites = IndexSet::uniform(&gt_topo, 1.0).unwrap();
        let gt_pts = vec![gt_sites.iter().map(|p| Vector3::new(0.0, 0.0, p.t)).collect()];
        let gt = TreeSequence::new(gt_topo, gt_sites, vec![0.0], gt_pts).unwrap();
        let m_topo = Topology::new(vec![10.0, 10.0], vec![0, 0], vec![0.0, 0.0]).unwrap();
        let m_sites = IndexSet::uniform(&m_topo, 1.0).unwrap();
        let m_pts = vec![m_sites
            .iter()
            .map(|p| Vector3::new(0.0, 0.0, p.t + if p.curve == 2 { 10.5 } else { 0.0 }))
            .collect()];
        let model = TreeSequence::new(m_topo, m_sites, vec![0.0], m_pts).unwrap();
        let r = tsc(&model, &gt, 0.6, 1.0).unwrap();
        assert_eq!(r.geometric_inconsistencies, 1);
        assert_eq!(r.opportunities, 2);
        // the same split seen from the other side
        let back = tsc(&gt, &model, 0.6, 1.0).unwrap();
        assert_eq!(back.geometric_inconsistencies, 1);
    }

    #[test]
    fn tsc_parent_child_consistency() {
        let topo = Topology::new(vec![10.0, 5.0], vec![0, 1], vec![0.0, 10.0]).unwrap();
        let sites = IndexSet::uniform(&topo, 1.0).unwrap();
        let pts: Vec<Vector3<f64>> = sites
            .iter()
            .map(|p| if p.curve == 1 { Vector3::new(0.0, 0.0, p.t) } else { Vector3::new(p.t, 0.0, 10.0) })
            .collect();
        let seq = TreeSequence::new(topo, sites, vec![0.0, 1.0], vec![pts.clone(), pts]).unwrap();
        let r = tsc(&seq, &seq, 0.5, 1.0).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.opportunities, 2 * 2 + 2 + 2);
    }

    #[test]
    fn tsc_rejects_mismatched_axes() {
        let (model, _) = two_curve_sequence(5, usize::MAX);
        let (_, gt) = two_curve_sequence(4, usize::MAX);
        assert!(tsc(&model, &gt, 10.0, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn scores_in_range_and_iou_symmetric(seed in 0u64..10_000, n in 0usize..12, m in 0usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n);
            let b = cloud(&mut rng, m);
            let ab = match_points(&a, &b, 5.0);
            let ba = match_points(&b, &a, 5.0);
            prop_assert_eq!(ab.pairs.len(), ba.pairs.len());
            prop_assert!((ab.total_distance() - ba.total_distance()).abs() < 1e-9);
            if n + m > 0 {
                let x = iou(&ab, n, m).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert!((x - iou(&ba, m, n).unwrap()).abs() < 1e-15);
            }
            if let Ok(r) = rms_accuracy(&ab) {
                prop_assert!(r >= 0.0);
            }
        }
    }
}
