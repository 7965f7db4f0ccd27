//! Curve-tree sequences: a topology, its sites, and 3-D site positions per frame.

use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::curve_tree::{IndexSet, Topology, TopologyFile};
use crate::error::{Error, Result};
use crate::gp_core::TrainingSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct TreeSequence {
    pub topology: Topology,
    pub sites: IndexSet,
    pub times: Vec<f64>,
    /// `points[i][j]` is site `j` at time `i`, in mm.
    pub points: Vec<Vec<Vector3<f64>>>,
}

impl TreeSequence {
    pub fn new(
        topology: Topology,
        sites: IndexSet,
        times: Vec<f64>,
        points: Vec<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        if points.len() != times.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} frames of points for {} times",
                points.len(),
                times.len()
            )));
        }
        if let Some(bad) = points.iter().position(|f| f.len() != sites.len()) {
            return Err(Error::DimensionMismatch(format!(
                "frame {bad} has {} points for {} sites",
                points[bad].len(),
                sites.len()
            )));
        }
        Ok(TreeSequence {
            topology,
            sites,
            times,
            points,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.times.len()
    }

    /// Per-curve polylines of frame `i`.
    pub fn polylines(&self, i: usize) -> Vec<Vec<Vector3<f64>>> {
        tree_polylines(&self.topology, &self.sites, &self.points[i])
    }

    /// Stacked coordinates ordered time, site, xyz.
    pub fn observations(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.sites.len() * self.times.len(),
            self.points.iter().flat_map(|f| f.iter().flat_map(|p| p.iter().cloned())),
        )
    }

    pub fn to_training(&self) -> TrainingSequence {
        TrainingSequence {
            topology: Arc::new(self.topology.clone()),
            sites: self.sites.clone(),
            times: self.times.clone(),
            observations: self.observations(),
        }
    }
}

/// Per-curve polylines from site positions. Child curves start at their
/// branch point, found by linear interpolation along the parent's polyline.
pub fn tree_polylines(topo: &Topology, sites: &IndexSet, positions: &[Vector3<f64>]) -> Vec<Vec<Vector3<f64>>> {
    let n = topo.n_curves();
    let mut param: Vec<Vec<(f64, Vector3<f64>)>> = vec![Vec::new(); n + 1];
    for c in topo.root_first_order() {
        let mut pts: Vec<(f64, Vector3<f64>)> = sites
            .curve_sites(c)
            .into_iter()
            .map(|j| (sites.entries()[j].t, positions[j]))
            .collect();
        if !topo.is_root(c) {
            let has_start = pts.first().is_some_and(|p| p.0 == 0.0);
            if !has_start {
                if let Some(bp) = interpolate(&param[topo.parent(c)], topo.branch_t[c - 1]) {
                    pts.insert(0, (0.0, bp));
                }
            }
        }
        param[c] = pts;
    }
    param
        .into_iter()
        .skip(1)
        .map(|p| p.into_iter().map(|(_, x)| x).collect())
        .collect()
}

/// Position at parameter `t` along a `(t, x)` polyline; clamps at the ends.
pub fn interpolate(poly: &[(f64, Vector3<f64>)], t: f64) -> Option<Vector3<f64>> {
    let first = poly.first()?;
    if t <= first.0 {
        return Some(first.1);
    }
    for w in poly.windows(2) {
        let (t0, x0) = w[0];
        let (t1, x1) = w[1];
        if t <= t1 {
            let s = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return Some(x0 + (x1 - x0) * s);
        }
    }
    Some(poly.last()?.1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceFile {
    pub topology: TopologyFile,
    pub times: Vec<f64>,
    pub points: Vec<Vec<[f64; 3]>>,
}

impl SequenceFile {
    pub fn from_sequence(seq: &TreeSequence) -> Self {
        SequenceFile {
            topology: TopologyFile::from_parts(&seq.topology, Some(&seq.sites)),
            times: seq.times.clone(),
            points: seq
                .points
                .iter()
                .map(|f| f.iter().map(|p| [p.x, p.y, p.z]).collect())
                .collect(),
        }
    }

    pub fn into_sequence(self) -> Result<TreeSequence> {
        let (topo, sites) = self.topology.into_parts()?;
        let sites = sites.ok_or_else(|| Error::Format("sequence file has no sites".into()))?;
        let points = self
            .points
            .into_iter()
            .map(|f| f.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect())
            .collect();
        TreeSequence::new(topo, sites, self.times, points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve_tree::PointIndex;

    fn fixture() -> TreeSequence {
        let topo = Topology::new(vec![4.0, 2.0], vec![0, 1], vec![0.0, 3.0]).unwrap();
        let sites = IndexSet::uniform(&topo, 2.0).unwrap();
        // root along z, child along x from (0,0,3)
        let pos: Vec<Vector3<f64>> = sites
            .iter()
            .map(|p| match p.curve {
                1 => Vector3::new(0.0, 0.0, p.t),
                _ => Vector3::new(p.t, 0.0, 3.0),
            })
            .collect();
        TreeSequence::new(topo, sites, vec![0.0, 1.0], vec![pos.clone(), pos]).unwrap()
    }

    #[test]
    fn child_polyline_starts_at_branch_point() {
        let seq = fixture();
        let polys = seq.polylines(0);
        assert_eq!(polys.len(), 2);
        assert_eq!(polys[0].len(), 3);
        assert!((polys[1][0] - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((polys[1][1] - Vector3::new(2.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn observation_order() {
        let seq = fixture();
        let obs = seq.observations();
        assert_eq!(obs.len(), 3 * seq.sites.len() * 2);
        let j = seq.sites.iter().position(|p| *p == PointIndex::new(1, 4.0)).unwrap();
        assert_eq!(obs[3 * j + 2], 4.0);
    }

    #[test]
    fn file_round_trip() {
        let seq = fixture();
        let json = serde_json::to_string(&SequenceFile::from_sequence(&seq)).unwrap();
        let back: SequenceFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_sequence().unwrap(), seq);
    }

    #[test]
    fn interpolate_clamps() {
        let poly = vec![(0.0, Vector3::zeros()), (2.0, Vector3::new(2.0, 0.0, 0.0))];
        assert_eq!(interpolate(&poly, -1.0).unwrap(), Vector3::zeros());
        assert_eq!(interpolate(&poly, 1.0).unwrap(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(interpolate(&poly, 5.0).unwrap(), Vector3::new(2.0, 0.0, 0.0));
        assert!(interpolate(&[], 1.0).is_none());
    }
}
