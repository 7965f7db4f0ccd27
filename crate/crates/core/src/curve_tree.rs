//! Curve-tree index space.
//!
//! Curves are numbered from 1; curve 0 is the "no point" sentinel. A point
//! index `(c, t)` names the point at arc length `t` along curve `c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a point in a curve tree. `curve == 0` is the sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointIndex {
    pub curve: usize,
    pub t: f64,
}

impl PointIndex {
    pub const NONE: PointIndex = PointIndex { curve: 0, t: 0.0 };

    /// Builds an index, canonicalising the sentinel to `(0, 0)`.
    pub fn new(curve: usize, t: f64) -> Self {
        if curve == 0 {
            Self::NONE
        } else {
            PointIndex { curve, t }
        }
    }

    pub fn is_none(&self) -> bool {
        self.curve == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    Empty,
    LengthMismatch,
    NonPositiveLength { curve: usize },
    ParentOutOfRange { curve: usize, parent: usize },
    SelfParent { curve: usize },
    Cycle { curve: usize },
    RootWithBranchT { curve: usize },
    BranchOutOfRange { curve: usize, branch_t: f64, parent_length: f64 },
}

/// Branch structure of a curve tree.
///
/// Arrays are indexed by `curve - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub lengths: Vec<f64>,
    pub parent_curve: Vec<usize>,
    pub branch_t: Vec<f64>,
}

/// Returns every invariant violation of a candidate topology.
pub fn validate_topology(topo: &Topology) -> Vec<Violation> {
    let n = topo.lengths.len();
    let mut out = Vec::new();
    if n == 0 {
        out.push(Violation::Empty);
    }
    if topo.parent_curve.len() != n || topo.branch_t.len() != n {
        out.push(Violation::LengthMismatch);
        return out;
    }
    for c in 1..=n {
        let len = topo.lengths[c - 1];
        if !(len > 0.0 && len.is_finite()) {
            out.push(Violation::NonPositiveLength { curve: c });
        }
        let p = topo.parent_curve[c - 1];
        let bt = topo.branch_t[c - 1];
        if p > n {
            out.push(Violation::ParentOutOfRange { curve: c, parent: p });
            continue;
        }
        if p == c {
            out.push(Violation::SelfParent { curve: c });
            continue;
        }
        if p == 0 {
            if bt != 0.0 {
                out.push(Violation::RootWithBranchT { curve: c });
            }
        } else {
            let plen = topo.lengths[p - 1];
            if !(bt >= 0.0 && bt <= plen) {
                out.push(Violation::BranchOutOfRange {
                    curve: c,
                    branch_t: bt,
                    parent_length: plen,
                });
            }
        }
    }
    // Cycle check: walking parents from any curve must reach 0 in <= n steps.
    for c in 1..=n {
        let mut cur = c;
        let mut steps = 0;
        while cur != 0 && steps <= n {
            let p = topo.parent_curve[cur - 1];
            if p > n || p == cur {
                break;
            }
            cur = p;
            steps += 1;
        }
        if cur != 0 && steps > n {
            out.push(Violation::Cycle { curve: c });
        }
    }
    out
}

impl Topology {
    /// Builds a validated topology.
    pub fn new(lengths: Vec<f64>, parent_curve: Vec<usize>, branch_t: Vec<f64>) -> Result<Self> {
        let topo = Topology {
            lengths,
            parent_curve,
            branch_t,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// A single root curve.
    pub fn single(length: f64) -> Result<Self> {
        Topology::new(vec![length], vec![0], vec![0.0])
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_topology(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTopology(v))
        }
    }

    pub fn n_curves(&self) -> usize {
        self.lengths.len()
    }

    pub fn length(&self, curve: usize) -> f64 {
        self.lengths[curve - 1]
    }

    pub fn parent(&self, curve: usize) -> usize {
        self.parent_curve[curve - 1]
    }

    pub fn is_root(&self, curve: usize) -> bool {
        self.parent(curve) == 0
    }

    pub fn children(&self, curve: usize) -> Vec<usize> {
        (1..=self.n_curves())
            .filter(|&c| self.parent(c) == curve)
            .collect()
    }

    pub fn contains(&self, idx: &PointIndex) -> bool {
        idx.is_none()
            || (idx.curve <= self.n_curves()
                && idx.t >= 0.0
                && idx.t <= self.length(idx.curve))
    }

    pub fn check(&self, idx: &PointIndex) -> Result<()> {
        if self.contains(idx) {
            Ok(())
        } else {
            Err(Error::InvalidIndex {
                curve: idx.curve,
                t: idx.t,
            })
        }
    }

    /// Branch function: the parent-side point a curve attaches to.
    pub fn branch_of(&self, idx: &PointIndex) -> Result<PointIndex> {
        self.check(idx)?;
        Ok(self.branch_of_unchecked(idx.curve))
    }

    #[inline]
    pub(crate) fn branch_of_unchecked(&self, curve: usize) -> PointIndex {
        if curve == 0 {
            return PointIndex::NONE;
        }
        let p = self.parent_curve[curve - 1];
        if p == 0 {
            PointIndex::NONE
        } else {
            PointIndex {
                curve: p,
                t: self.branch_t[curve - 1],
            }
        }
    }

    /// Number of branch hops from `idx` to the sentinel.
    pub fn depth(&self, idx: &PointIndex) -> usize {
        self.curve_depth(idx.curve)
    }

    #[inline]
    pub(crate) fn curve_depth(&self, curve: usize) -> usize {
        let mut d = 0;
        let mut c = curve;
        while c != 0 {
            d += 1;
            c = self.parent_curve[c - 1];
        }
        d
    }

    /// One `(child initial point, branch point)` pair per non-root curve.
    pub fn attachment_pairs(&self) -> Vec<(PointIndex, PointIndex)> {
        (1..=self.n_curves())
            .filter(|&c| !self.is_root(c))
            .map(|c| (PointIndex::new(c, 0.0), self.branch_of_unchecked(c)))
            .collect()
    }

    /// Curves ordered so every parent precedes its children.
    pub fn root_first_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (1..=self.n_curves()).collect();
        order.sort_by_key(|&c| (self.curve_depth(c), c));
        order
    }
}

/// The discrete inference sites of a curve tree.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSet {
    entries: Vec<PointIndex>,
}

impl IndexSet {
    pub fn new(topo: &Topology, entries: Vec<PointIndex>) -> Result<Self> {
        for e in &entries {
            if e.is_none() {
                return Err(Error::InvalidIndexSet("sentinel in site list".into()));
            }
            topo.check(e)?;
        }
        for (i, a) in entries.iter().enumerate() {
            if entries[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidIndexSet(format!(
                    "duplicate site ({}, {})",
                    a.curve, a.t
                )));
            }
        }
        // Root-first: the first entry of each curve must come after some entry
        // of its parent, when the parent has sites at all.
        let mut first_pos = vec![usize::MAX; topo.n_curves() + 1];
        for (i, e) in entries.iter().enumerate() {
            if first_pos[e.curve] == usize::MAX {
                first_pos[e.curve] = i;
            }
        }
        for c in 1..=topo.n_curves() {
            let p = topo.parent(c);
            if p != 0 && first_pos[c] != usize::MAX && first_pos[p] != usize::MAX && first_pos[p] > first_pos[c] {
                return Err(Error::InvalidIndexSet(format!(
                    "curve {c} listed before its parent {p}"
                )));
            }
        }
        Ok(IndexSet { entries })
    }

    /// Evenly spaced sites: per curve, `round(L / stride)` (at least 1)
    /// intervals. Root curves include `t = 0`; child curves skip it because it
    /// coincides with the branch point.
    pub fn uniform(topo: &Topology, stride: f64) -> Result<Self> {
        let mut entries = Vec::new();
        for c in topo.root_first_order() {
            let len = topo.length(c);
            let n = ((len / stride).round() as usize).max(1);
            let start = if topo.is_root(c) { 0 } else { 1 };
            for k in start..=n {
                entries.push(PointIndex::new(c, (len * k as f64 / n as f64).min(len)));
            }
        }
        IndexSet::new(topo, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PointIndex] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PointIndex> {
        self.entries.iter()
    }

    /// Site positions (in list order) that belong to `curve`, sorted by `t`.
    pub fn curve_sites(&self, curve: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len())
            .filter(|&j| self.entries[j].curve == curve)
            .collect();
        idx.sort_by(|&a, &b| self.entries[a].t.total_cmp(&self.entries[b].t));
        idx
    }
}

/// On-disk form of a topology, with optional sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub n_curves: usize,
    pub lengths: Vec<f64>,
    pub parent_curve: Vec<usize>,
    pub branch_t: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<(usize, f64)>>,
}

impl TopologyFile {
    pub fn from_parts(topo: &Topology, sites: Option<&IndexSet>) -> Self {
        TopologyFile {
            n_curves: topo.n_curves(),
            lengths: topo.lengths.clone(),
            parent_curve: topo.parent_curve.clone(),
            branch_t: topo.branch_t.clone(),
            sites: sites.map(|s| s.iter().map(|p| (p.curve, p.t)).collect()),
        }
    }

    pub fn into_parts(self) -> Result<(Topology, Option<IndexSet>)> {
        if self.n_curves != self.lengths.len() {
            return Err(Error::Format(format!(
                "n_curves = {} but {} lengths",
                self.n_curves,
                self.lengths.len()
            )));
        }
        let topo = Topology::new(self.lengths, self.parent_curve, self.branch_t)?;
        let sites = match self.sites {
            Some(s) => Some(IndexSet::new(
                &topo,
                s.into_iter().map(|(c, t)| PointIndex::new(c, t)).collect(),
            )?),
            None => None,
        };
        Ok((topo, sites))
    }
}
