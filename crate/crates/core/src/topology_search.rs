//! Structure search: bootstrapping a 3-D tree from one view, the
//! marginal-likelihood estimate, and the prune and birth moves.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curve_tree::{IndexSet, PointIndex, Topology};
use crate::ep_infer::{continue_ep, propagate, sweep_views, EpConfig, PassDiagnostics, PointLikelihood, PointSite, PosteriorApprox, SiteApprox};
use crate::error::{Error, Result};
use crate::gp_core::plant_kernel;
use crate::kernels::Hyperparams;
use crate::lds::{build_lds, ChainPosterior, LdsModel};
use crate::par::{self, Execution};
use crate::rng::{stream_rng, stream_seed};
use crate::scene::{Camera, LikelihoodMaps, Mask, Scene};
use crate::sequence::{interpolate, tree_polylines, TreeSequence};

pub type Pixel = (i64, i64);

const OFFSETS8: [(i64, i64); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Arc-length spacing of sites, mm.
    pub stride_mm: f64,
    /// Gray-level distance from the per-pixel background median.
    pub fg_threshold: f64,
    /// Reprojection standard deviation of bootstrap sites, px.
    pub bootstrap_sigma_px: f64,
    /// Skeleton branches shorter than this many pixels are treated as spurs.
    pub min_curve_px: usize,
    /// Smallest unexplained component that can seed a birth, px.
    pub min_birth_px: usize,
    pub birth_dilation_px: usize,
    /// Start every EP stage from the bootstrap and birth sites instead of
    /// the previous stage's sites.
    pub restart_ep: bool,
    /// Before the regular passes, sweep outward from the anchored views one
    /// view distance at a time.
    pub view_sweep: bool,
    /// Hold the bootstrap and birth sites fixed on the first EP pass.
    pub freeze_first_pass: bool,
    pub ep: EpConfig,
    pub seed: u64,
    pub record_timing: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            stride_mm: 2.0,
            fg_threshold: 25.0,
            bootstrap_sigma_px: 1.0,
            min_curve_px: 6,
            min_birth_px: 10,
            birth_dilation_px: 1,
            restart_ep: true,
            view_sweep: false,
            freeze_first_pass: true,
            ep: EpConfig::default(),
            seed: 0,
            record_timing: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Masks

fn neighbours(w: usize, h: usize, u: usize, v: usize) -> impl Iterator<Item = (usize, usize)> {
    OFFSETS8.iter().filter_map(move |&(du, dv)| {
        let (a, b) = (u as i64 + du, v as i64 + dv);
        (a >= 0 && b >= 0 && (a as usize) < w && (b as usize) < h).then_some((a as usize, b as usize))
    })
}

/// 8-connected components in row-major discovery order.
pub fn components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if !mask.get(u, v) || seen[v * w + u] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(u, v)]);
            seen[v * w + u] = true;
            while let Some((a, b)) = queue.pop_front() {
                comp.push((a, b));
                for (x, y) in neighbours(w, h, a, b) {
                    if mask.get(x, y) && !seen[y * w + x] {
                        seen[y * w + x] = true;
                        queue.push_back((x, y));
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

fn mask_from(w: usize, h: usize, pixels: &[(usize, usize)]) -> Mask {
    let mut m = Mask::new(w, h);
    for &(u, v) in pixels {
        m.set(u, v, true);
    }
    m
}

/// Largest 8-connected component; the first found wins ties.
pub fn largest_component(mask: &Mask) -> Result<Mask> {
    let comps = components(mask);
    let best = comps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .ok_or(Error::EmptyMask)?;
    Ok(mask_from(mask.width, mask.height, best.1))
}

/// Square dilation by `r` pixels.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    let mut out = mask.clone();
    let r = r as i64;
    for (u, v) in mask.on_pixels() {
        for dv in -r..=r {
            for du in -r..=r {
                let (a, b) = (u as i64 + du, v as i64 + dv);
                if a >= 0 && b >= 0 && (a as usize) < mask.width && (b as usize) < mask.height {
                    out.set(a as usize, b as usize, true);
                }
            }
        }
    }
    out
}

/// Foreground pixels of `view`: the per-pixel likelihood ratio favours
/// foreground and the value differs from the median of the views that see
/// background there. Restricted to the largest component.
pub fn foreground_mask(maps: &LikelihoodMaps, view: usize, threshold: f64) -> Result<Mask> {
    let n = maps.views.len();
    if n < 2 {
        return Err(Error::InvalidParameter("foreground mask needs at least 2 views".into()));
    }
    if view >= n {
        return Err(Error::InvalidParameter(format!("view {view} of {n}")));
    }
    let vm = &maps.views[view];
    let (w, h) = (vm.width(), vm.height());
    let is_fg = |k: usize, d: u8| maps.views[k].log_fg[d as usize] > maps.views[k].log_bg[d as usize];
    let mut mask = Mask::new(w, h);
    let mut bg = Vec::with_capacity(n);
    for v in 0..h {
        for u in 0..w {
            let d = vm.d.get(u, v);
            if !is_fg(view, d) {
                continue;
            }
            bg.clear();
            for k in 0..n {
                let dk = maps.views[k].d.get(u, v);
                if !is_fg(k, dk) {
                    bg.push(dk as f64);
                }
            }
            let differs = if bg.is_empty() {
                true
            } else {
                bg.sort_by(f64::total_cmp);
                let m = bg.len();
                let med = if m % 2 == 1 { bg[m / 2] } else { 0.5 * (bg[m / 2 - 1] + bg[m / 2]) };
                (d as f64 - med).abs() > threshold
            };
            if differs {
                mask.set(u, v, true);
            }
        }
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    largest_component(&mask)
}

// ---------------------------------------------------------------------------
// Skeletons

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton2D {
    pub pixels: Vec<Pixel>,
    pub adjacency: Vec<Vec<usize>>,
}

impl Skeleton2D {
    pub fn from_mask(mask: &Mask) -> Self {
        let pixels: Vec<Pixel> = mask.on_pixels().map(|(u, v)| (u as i64, v as i64)).collect();
        let index = |p: Pixel| pixels.binary_search_by(|q| (q.1, q.0).cmp(&(p.1, p.0))).ok();
        let adjacency = pixels
            .iter()
            .map(|&(u, v)| {
                let mut a: Vec<usize> = OFFSETS8.iter().filter_map(|&(du, dv)| index((u + du, v + dv))).collect();
                a.sort_unstable();
                a
            })
            .collect();
        Skeleton2D { pixels, adjacency }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn n_components(&self) -> usize {
        let mut seen = vec![false; self.len()];
        let mut n = 0;
        for s in 0..self.len() {
            if seen[s] {
                continue;
            }
            n += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(a) = stack.pop() {
                for &b in &self.adjacency[a] {
                    if !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
        n
    }
}

/// Zhang–Suen thinning. Deletions within a sub-iteration are applied one at
/// a time and re-checked, so no component disappears or splits.
pub fn skeletonize(mask: &Mask) -> Skeleton2D {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut img = mask.clone();
    let at = |m: &Mask, u: i64, v: i64| u >= 0 && v >= 0 && u < w && v < h && m.get(u as usize, v as usize);
    let ring = |m: &Mask, u: i64, v: i64| -> [bool; 8] {
        let mut p = [false; 8];
        for (k, &(du, dv)) in OFFSETS8.iter().enumerate() {
            p[k] = at(m, u + du, v + dv);
        }
        p
    };
    let counts = |p: &[bool; 8]| {
        let b = p.iter().filter(|&&x| x).count();
        let a = (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count();
        (a, b)
    };
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut candidates = Vec::new();
            for (u, v) in img.on_pixels() {
                let (u, v) = (u as i64, v as i64);
                let p = ring(&img, u, v);
                let (a, b) = counts(&p);
                // p[0]=N p[2]=E p[4]=S p[6]=W
                let ok = if step == 0 {
                    !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                } else {
                    !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                };
                if (2..=6).contains(&b) && a == 1 && ok {
                    candidates.push((u, v));
                }
            }
            for (u, v) in candidates {
                let (a, b) = counts(&ring(&img, u, v));
                if (2..=6).contains(&b) && a == 1 {
                    img.set(u as usize, v as usize, false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Skeleton2D::from_mask(&img)
}

// ---------------------------------------------------------------------------
// 2-D curve trees

/// Curves of pixels. A child starts at the pixel after its branch point; the
/// branch point is pixel `branch_pixel[c]` of the parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree2D {
    pub curves: Vec<Vec<Pixel>>,
    /// 1-based parent curve, 0 for roots.
    pub parent: Vec<usize>,
    pub branch_pixel: Vec<usize>,
    /// Arc length in pixels.
    pub topology: Topology,
}

fn pixel_dist(a: Pixel, b: Pixel) -> f64 {
    (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Minimum spanning tree over 8-neighbour edges, ties broken by pixel order.
fn spanning_tree(skel: &Skeleton2D) -> Vec<Vec<usize>> {
    let mut edges: Vec<(f64, Pixel, Pixel, usize, usize)> = Vec::new();
    for a in 0..skel.len() {
        for &b in &skel.adjacency[a] {
            if a < b {
                let (pa, pb) = (skel.pixels[a], skel.pixels[b]);
                let (lo, hi) = if pa <= pb { (pa, pb) } else { (pb, pa) };
                edges.push((pixel_dist(pa, pb), lo, hi, a, b));
            }
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut uf: Vec<usize> = (0..skel.len()).collect();
    let mut adj = vec![Vec::new(); skel.len()];
    for (_, _, _, a, b) in edges {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra != rb {
            uf[ra] = rb;
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for a in adj.iter_mut() {
        a.sort_by_key(|&k| skel.pixels[k]);
    }
    adj
}

/// Removes leaf branches shorter than `min_px` until none remain.
fn remove_spurs(adj: &mut [Vec<usize>], alive: &mut [bool], min_px: usize) {
    loop {
        let mut removed = false;
        let leaves: Vec<usize> = (0..adj.len()).filter(|&k| alive[k] && adj[k].len() == 1).collect();
        for leaf in leaves {
            if !alive[leaf] || adj[leaf].len() != 1 {
                continue;
            }
            let mut path = vec![leaf];
            let mut prev = leaf;
            let mut cur = adj[leaf][0];
            while adj[cur].len() == 2 && path.len() < min_px {
                path.push(cur);
                let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
                prev = cur;
                cur = next;
            }
            if adj[cur].len() >= 3 && path.len() < min_px {
                for &k in &path {
                    alive[k] = false;
                    for n in std::mem::take(&mut adj[k]) {
                        adj[n].retain(|&x| x != k);
                    }
                }
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
}

/// 2-D curve tree rooted at the lowest endpoint (largest v, then smallest
/// u) of the spur-free spanning tree.
pub fn extract_2d_tree(skel: &Skeleton2D, min_curve_px: usize) -> Result<Tree2D> {
    if skel.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut adj = spanning_tree(skel);
    let mut alive = vec![true; skel.len()];
    remove_spurs(&mut adj, &mut alive, min_curve_px);
    let lowest = |cands: &mut dyn Iterator<Item = usize>| {
        cands.max_by(|&a, &b| {
            let (pa, pb) = (skel.pixels[a], skel.pixels[b]);
            pa.1.cmp(&pb.1).then(pb.0.cmp(&pa.0))
        })
    };
    let root = lowest(&mut (0..skel.len()).filter(|&k| alive[k] && adj[k].len() <= 1))
        .or_else(|| lowest(&mut (0..skel.len())))
        .ok_or(Error::EmptyMask)?;
    extract_2d_tree_from(skel, skel.pixels[root], min_curve_px)
}

/// 2-D curve tree rooted at the skeleton pixel `root`.
pub fn extract_2d_tree_from(skel: &Skeleton2D, root: Pixel, min_curve_px: usize) -> Result<Tree2D> {
    if skel.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n_comp = skel.n_components();
    if n_comp != 1 {
        return Err(Error::DisconnectedSkeleton(n_comp));
    }
    let mut adj = spanning_tree(skel);
    let mut alive = vec![true; skel.len()];
    remove_spurs(&mut adj, &mut alive, min_curve_px);
    let root = skel
        .pixels
        .iter()
        .position(|&p| p == root)
        .filter(|&k| alive[k])
        .or_else(|| {
            (0..skel.len())
                .filter(|&k| alive[k])
                .min_by(|&a, &b| pixel_dist(skel.pixels[a], root).total_cmp(&pixel_dist(skel.pixels[b], root)))
        })
        .ok_or(Error::EmptyMask)?;

    // walk from the root, starting a curve after every branch vertex
    let mut curves: Vec<Vec<usize>> = Vec::new();
    let mut parent = Vec::new();
    let mut branch_pixel = Vec::new();
    // (first vertex, previous vertex, parent curve, branch index)
    let mut stack: Vec<(usize, usize, usize, usize)> = vec![(root, usize::MAX, 0, 0)];
    while let Some((start, from, pc, bp)) = stack.pop() {
        let mut curve = vec![start];
        let mut prev = from;
        let mut cur = start;
        loop {
            let next: Vec<usize> = adj[cur].iter().copied().filter(|&k| k != prev).collect();
            if curves.is_empty() && curve.len() == 1 && next.len() >= 2 {
                // a root inside a curve: follow one arm, the rest branch at t = 0
                for &k in next[1..].iter().rev() {
                    stack.push((k, cur, 1, 0));
                }
                prev = cur;
                cur = next[0];
                curve.push(cur);
                continue;
            }
            if next.len() == 1 {
                prev = cur;
                cur = next[0];
                curve.push(cur);
                continue;
            }
            let id = curves.len() + 1;
            let end = curve.len() - 1;
            for &k in next.iter().rev() {
                stack.push((k, cur, id, end));
            }
            break;
        }
        curves.push(curve);
        parent.push(pc);
        branch_pixel.push(bp);
    }

    let pix = |c: &[usize]| -> Vec<Pixel> { c.iter().map(|&k| skel.pixels[k]).collect() };
    let curves: Vec<Vec<Pixel>> = curves.iter().map(|c| pix(c)).collect();
    let lengths: Vec<f64> = curves
        .iter()
        .enumerate()
        .map(|(c, px)| {
            let start = if parent[c] == 0 {
                0.0
            } else {
                pixel_dist(curves[parent[c] - 1][branch_pixel[c]], px[0])
            };
            start + px.windows(2).map(|w| pixel_dist(w[0], w[1])).sum::<f64>()
        })
        .collect();
    if lengths[0] <= 0.0 {
        return Err(Error::Structure("skeleton is a single pixel".into()));
    }
    let branch_t: Vec<f64> = (0..curves.len())
        .map(|c| {
            if parent[c] == 0 {
                0.0
            } else {
                let p = &curves[parent[c] - 1];
                p[..=branch_pixel[c]].windows(2).map(|w| pixel_dist(w[0], w[1])).sum()
            }
        })
        .collect();
    let topology = Topology::new(lengths, parent.clone(), branch_t)?;
    Ok(Tree2D {
        curves,
        parent,
        branch_pixel,
        topology,
    })
}

// ---------------------------------------------------------------------------
// Model state

#[derive(Clone, Debug)]
pub struct ModelState {
    pub topology: Topology,
    pub sites: IndexSet,
    pub posterior: PosteriorApprox,
    pub log_marginal: f64,
    /// Reprojection sites placed by bootstrap and birth; EP stages restart
    /// from these.
    pub anchors: SiteApprox,
}

impl ModelState {
    pub fn ep_sites(&self) -> &SiteApprox {
        &self.posterior.sites
    }

    pub fn n_curves(&self) -> usize {
        self.topology.n_curves()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn mean_positions(&self, i: usize) -> Vec<Vector3<f64>> {
        self.posterior.mean_positions(i)
    }

    pub fn polylines(&self, i: usize) -> Vec<Vec<Vector3<f64>>> {
        tree_polylines(&self.topology, &self.sites, &self.mean_positions(i))
    }

    /// State with the given sites after one filter and smoother pass.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sites<L: PointLikelihood + ?Sized>(
        hyper: &Hyperparams,
        topology: Topology,
        sites: IndexSet,
        ep_sites: SiteApprox,
        anchors: SiteApprox,
        times: &[f64],
        lik: &L,
        exec: Execution,
    ) -> Result<ModelState> {
        Ok(assemble(hyper, topology, sites, ep_sites, anchors, times, lik, exec)?.0)
    }

    /// Posterior means as a tree sequence.
    pub fn to_sequence(&self, times: &[f64]) -> Result<TreeSequence> {
        TreeSequence::new(
            self.topology.clone(),
            self.sites.clone(),
            times.to_vec(),
            (0..times.len()).map(|i| self.mean_positions(i)).collect(),
        )
    }
}

pub fn build_model(hyper: &Hyperparams, topo: &Topology, sites: &IndexSet, times: &[f64], exec: Execution) -> Result<LdsModel> {
    let kernel = plant_kernel(hyper, Arc::new(topo.clone()))?;
    build_lds(&kernel, sites, times, exec)
}

/// Log marginal likelihood estimate with every view evaluated at `z[i]`.
pub fn estimate_log_marginal_at<L: PointLikelihood + ?Sized>(
    topo: &Topology,
    sites: &IndexSet,
    chain: &ChainPosterior,
    lik: &L,
    z: &[DVector<f64>],
    exec: Execution,
) -> Result<f64> {
    let n = chain.filtered.len();
    if z.len() != n || lik.n_views() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} evaluation points, {} views, {n} frames",
            z.len(),
            lik.n_views()
        )));
    }
    let terms = par::map_indexed(exec, n, |i| -> Result<f64> {
        let zi = &z[i];
        let positions: Vec<Vector3<f64>> = (0..zi.len() / 3)
            .map(|j| Vector3::new(zi[3 * j], zi[3 * j + 1], zi[3 * j + 2]))
            .collect();
        let ll = lik.view_log_likelihood(i, topo, sites, &positions)?;
        let pred = chain.predictive[i].log_pdf(zi)?;
        let filt = chain.filtered[i].log_pdf(zi)?;
        Ok(ll + pred - filt)
    });
    terms.into_iter().sum()
}

/// Log marginal likelihood estimate at the smoothed posterior means.
pub fn estimate_log_marginal<L: PointLikelihood + ?Sized>(
    topo: &Topology,
    sites: &IndexSet,
    post: &PosteriorApprox,
    lik: &L,
    exec: Execution,
) -> Result<f64> {
    let z: Vec<DVector<f64>> = post.chain.smoothed.iter().map(|g| g.mean.clone()).collect();
    estimate_log_marginal_at(topo, sites, &post.chain, lik, &z, exec)
}

fn assemble<L: PointLikelihood + ?Sized>(
    hyper: &Hyperparams,
    topo: Topology,
    sites: IndexSet,
    ep_sites: SiteApprox,
    anchors: SiteApprox,
    times: &[f64],
    lik: &L,
    exec: Execution,
) -> Result<(ModelState, LdsModel)> {
    let model = build_model(hyper, &topo, &sites, times, exec)?;
    let posterior = propagate(&model, ep_sites)?;
    let log_marginal = estimate_log_marginal(&topo, &sites, &posterior, lik, exec)?;
    Ok((
        ModelState {
            topology: topo,
            sites,
            posterior,
            log_marginal,
            anchors,
        },
        model,
    ))
}

// ---------------------------------------------------------------------------
// Bootstrap

/// A 3-D tree traced from pixels: per-curve `(t, x)` polylines.
#[derive(Clone, Debug)]
pub struct Tree3D {
    pub topology: Topology,
    pub polylines: Vec<Vec<(f64, Vector3<f64>)>>,
    /// Source pixel of each polyline vertex; `None` for a copied branch point.
    pub sources: Vec<Vec<Option<Pixel>>>,
}

/// Backprojects a 2-D tree with `place(pixel)` and re-parameterizes by 3-D
/// arc length. `attach` supplies the branch point of root curves that
/// should hang off existing structure.
fn lift_tree(
    tree: &Tree2D,
    place: &dyn Fn(Pixel) -> Result<Vector3<f64>>,
    attach: Option<Vector3<f64>>,
) -> Result<Tree3D> {
    let n = tree.curves.len();
    let mut polylines: Vec<Vec<(f64, Vector3<f64>)>> = vec![Vec::new(); n];
    let mut sources: Vec<Vec<Option<Pixel>>> = vec![Vec::new(); n];
    let mut lengths = vec![0.0; n];
    let mut branch_t = vec![0.0; n];
    // parents precede children in extraction order
    for c in 0..n {
        let mut pts: Vec<(Option<Pixel>, Vector3<f64>)> = Vec::new();
        if tree.parent[c] != 0 {
            let p = tree.parent[c] - 1;
            let (bt, bx) = polylines[p]
                .iter()
                .zip(&sources[p])
                .rev()
                .find(|(_, s)| **s == Some(tree.curves[p][tree.branch_pixel[c]]))
                .map(|(q, _)| *q)
                .ok_or_else(|| Error::Structure("branch pixel missing from parent".into()))?;
            branch_t[c] = bt;
            pts.push((None, bx));
        } else if let Some(a) = attach {
            pts.push((None, a));
        }
        for &px in &tree.curves[c] {
            pts.push((Some(px), place(px)?));
        }
        let mut t = 0.0;
        for k in 0..pts.len() {
            if k > 0 {
                t += (pts[k].1 - pts[k - 1].1).norm();
            }
            polylines[c].push((t, pts[k].1));
            sources[c].push(pts[k].0);
        }
        lengths[c] = t;
    }
    let parent = tree.parent.clone();
    let topology = Topology::new(lengths, parent, branch_t)?;
    Ok(Tree3D {
        topology,
        polylines,
        sources,
    })
}

/// Rank-2 site saying "projects to where `x` projects" with `sigma_px` noise.
pub fn reprojection_site(cam: &Camera, x: &Vector3<f64>, sigma_px: f64) -> Result<PointSite> {
    let h = cam.projection_jacobian(x)?;
    let lam: Matrix3<f64> = h.transpose() * h / (sigma_px * sigma_px);
    let lam = (lam + lam.transpose()) * 0.5;
    Ok(PointSite {
        shift: lam * x,
        precision: lam,
    })
}

/// Sites of `tree3d` at arc-length stride, with their 3-D positions.
fn sample_sites(tree: &Tree3D, stride: f64, curve_offset: usize) -> Result<Vec<(PointIndex, Vector3<f64>)>> {
    let sites = IndexSet::uniform(&tree.topology, stride)?;
    sites
        .iter()
        .map(|p| {
            let x = interpolate(&tree.polylines[p.curve - 1], p.t)
                .ok_or_else(|| Error::Structure("empty curve".into()))?;
            Ok((PointIndex::new(p.curve + curve_offset, p.t), x))
        })
        .collect()
}

/// Traces the foreground of `view` and lifts it to 3-D on the rays' points
/// nearest the origin.
pub fn bootstrap_tree(scene: &Scene, view: usize, cfg: &SearchConfig) -> Result<Tree3D> {
    let mask = foreground_mask(&scene.maps, view, cfg.fg_threshold)?;
    let skel = skeletonize(&mask);
    let tree = extract_2d_tree(&skel, cfg.min_curve_px)?;
    let cam = &scene.cameras[view];
    lift_tree(
        &tree,
        &|p| cam.backproject_to_nearest_origin(&Vector2::new(p.0 as f64, p.1 as f64)),
        None,
    )
}

/// Initial state from one view: reprojection sites in `view`, none elsewhere,
/// followed by one filter and smoother pass.
pub fn bootstrap(scene: &Scene, view: usize, hyper: &Hyperparams, cfg: &SearchConfig) -> Result<ModelState> {
    let tree = bootstrap_tree(scene, view, cfg)?;
    let placed = sample_sites(&tree, cfg.stride_mm, 0)?;
    let sites = IndexSet::new(&tree.topology, placed.iter().map(|p| p.0).collect())?;
    let t = scene.n_views();
    let mut ep_sites = SiteApprox::zeros(t, sites.len());
    for (j, (_, x)) in placed.iter().enumerate() {
        ep_sites.set(view, j, reprojection_site(&scene.cameras[view], x, cfg.bootstrap_sigma_px)?);
    }
    let anchors = ep_sites.clone();
    let (state, _) = assemble(hyper, tree.topology, sites, ep_sites, anchors, &scene.times, scene, cfg.ep.exec)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Pruning

/// A topology edit with the surviving sites.
#[derive(Clone, Debug)]
pub struct CurveEdit {
    pub topology: Topology,
    pub sites: IndexSet,
    /// Old site index of each new site.
    pub source: Vec<usize>,
    /// New label of each old curve (`None` when removed or merged away).
    pub curve_map: Vec<Option<usize>>,
}

/// Removes `curve`. Its children become roots; if it is one of exactly two
/// arms at the end of its parent, the other arm is joined onto the parent.
pub fn remove_curve(topo: &Topology, sites: &IndexSet, curve: usize) -> Result<CurveEdit> {
    let n = topo.n_curves();
    if curve == 0 || curve > n {
        return Err(Error::InvalidParameter(format!("curve {curve} of {n}")));
    }
    if n == 1 {
        return Err(Error::Structure("cannot remove the only curve".into()));
    }
    let p = topo.parent(curve);
    let joined = if p != 0 && topo.branch_t[curve - 1] == topo.length(p) {
        let arms: Vec<usize> = topo
            .children(p)
            .into_iter()
            .filter(|&s| s != curve && topo.branch_t[s - 1] == topo.length(p))
            .collect();
        (arms.len() == 1).then(|| arms[0])
    } else {
        None
    };
    let mut curve_map = vec![None; n + 1];
    let mut next = 1;
    for c in 1..=n {
        if c != curve && Some(c) != joined {
            curve_map[c] = Some(next);
            next += 1;
        }
    }
    let new_n = next - 1;
    let mut lengths = vec![0.0; new_n];
    let mut parents = vec![0; new_n];
    let mut branch = vec![0.0; new_n];
    let plen = if p != 0 { topo.length(p) } else { 0.0 };
    for c in 1..=n {
        let Some(nc) = curve_map[c] else { continue };
        lengths[nc - 1] = topo.length(c);
        if let Some(s) = joined.filter(|_| c == p) {
            lengths[nc - 1] += topo.length(s);
        }
        let old_p = topo.parent(c);
        if old_p == curve || old_p == 0 {
            continue;
        }
        if Some(old_p) == joined {
            parents[nc - 1] = curve_map[p].unwrap();
            branch[nc - 1] = topo.branch_t[c - 1] + plen;
        } else {
            parents[nc - 1] = curve_map[old_p].unwrap();
            branch[nc - 1] = topo.branch_t[c - 1];
        }
    }
    let topology = Topology::new(lengths, parents, branch)?;
    let mut entries = Vec::new();
    let mut source = Vec::new();
    for (j, e) in sites.iter().enumerate() {
        if e.curve == curve {
            continue;
        }
        let ne = if Some(e.curve) == joined {
            PointIndex::new(curve_map[p].unwrap(), e.t + plen)
        } else {
            PointIndex::new(curve_map[e.curve].unwrap(), e.t)
        };
        entries.push(ne);
        source.push(j);
    }
    let sites = IndexSet::new(&topology, entries)?;
    if let Some(s) = joined {
        curve_map[s] = curve_map[p];
    }
    Ok(CurveEdit {
        topology,
        sites,
        source,
        curve_map,
    })
}

/// Joins `curve` onto its parent when it continues one of the parent's ends:
/// either the parent has no sites or other children beyond the branch
/// point, or the parent is a root with nothing before it (the merged root
/// then starts at the child's far end). Returns `None` when neither holds.
pub fn merge_into_parent(topo: &Topology, sites: &IndexSet, curve: usize) -> Result<Option<CurveEdit>> {
    let n = topo.n_curves();
    if curve == 0 || curve > n {
        return Err(Error::InvalidParameter(format!("curve {curve} of {n}")));
    }
    let p = topo.parent(curve);
    if p == 0 {
        return Ok(None);
    }
    let b = topo.branch_t[curve - 1];
    let lc = topo.length(curve);
    let others: Vec<f64> = topo
        .children(p)
        .into_iter()
        .filter(|&s| s != curve)
        .map(|s| topo.branch_t[s - 1])
        .collect();
    let p_sites: Vec<f64> = sites.iter().filter(|e| e.curve == p).map(|e| e.t).collect();
    let at_tip = p_sites.iter().all(|&t| t <= b) && others.iter().all(|&t| t < b);
    let at_start = topo.is_root(p) && p_sites.iter().all(|&t| t >= b) && others.iter().all(|&t| t > b);
    let (new_len, map): (f64, Box<dyn Fn(usize, f64) -> (usize, f64)>) = if at_tip {
        (b + lc, Box::new(move |c, t| if c == curve { (p, b + t) } else { (c, t) }))
    } else if at_start {
        (
            lc + topo.length(p) - b,
            Box::new(move |c, t| match c {
                _ if c == curve => (p, lc - t),
                _ if c == p => (p, lc + t - b),
                _ => (c, t),
            }),
        )
    } else {
        return Ok(None);
    };

    let mut curve_map = vec![None; n + 1];
    let mut next = 1;
    for c in (1..=n).filter(|&c| c != curve) {
        curve_map[c] = Some(next);
        next += 1;
    }
    let mut lengths = Vec::with_capacity(n - 1);
    let mut parents = Vec::with_capacity(n - 1);
    let mut branch = Vec::with_capacity(n - 1);
    for c in (1..=n).filter(|&c| c != curve) {
        lengths.push(if c == p { new_len } else { topo.length(c) });
        let q = topo.parent(c);
        if q == 0 {
            parents.push(0);
            branch.push(0.0);
        } else {
            let (nq, nt) = map(q, topo.branch_t[c - 1]);
            parents.push(curve_map[nq].unwrap());
            branch.push(nt);
        }
    }
    let topology = Topology::new(lengths, parents, branch)?;
    curve_map[curve] = curve_map[p];

    let rank: Vec<usize> = {
        let mut r = vec![0; topology.n_curves() + 1];
        for (k, c) in topology.root_first_order().into_iter().enumerate() {
            r[c] = k;
        }
        r
    };
    let mut moved: Vec<(PointIndex, usize)> = Vec::with_capacity(sites.len());
    for (j, e) in sites.iter().enumerate() {
        let (nc, nt) = map(e.curve, e.t);
        let ne = PointIndex::new(curve_map[nc].unwrap(), nt.clamp(0.0, topology.length(curve_map[nc].unwrap())));
        if e.curve == curve && moved.iter().any(|(m, _)| *m == ne) {
            continue;
        }
        moved.push((ne, j));
    }
    moved.sort_by(|a, b| rank[a.0.curve].cmp(&rank[b.0.curve]).then(a.0.t.total_cmp(&b.0.t)));
    let (entries, source): (Vec<PointIndex>, Vec<usize>) = moved.into_iter().unzip();
    let sites = IndexSet::new(&topology, entries)?;
    Ok(Some(CurveEdit {
        topology,
        sites,
        source,
        curve_map,
    }))
}

/// Repeatedly applies [`merge_into_parent`] until no curve continues its
/// parent. `source` maps into the input sites.
pub fn merge_extensions(topo: &Topology, sites: &IndexSet) -> Result<CurveEdit> {
    let mut cur = CurveEdit {
        topology: topo.clone(),
        sites: sites.clone(),
        source: (0..sites.len()).collect(),
        curve_map: (0..=topo.n_curves()).map(Some).collect(),
    };
    'outer: loop {
        for c in 1..=cur.topology.n_curves() {
            if let Some(e) = merge_into_parent(&cur.topology, &cur.sites, c)? {
                cur = CurveEdit {
                    source: e.source.iter().map(|&j| cur.source[j]).collect(),
                    curve_map: cur.curve_map.iter().map(|m| m.and_then(|x| e.curve_map[x])).collect(),
                    topology: e.topology,
                    sites: e.sites,
                };
                continue 'outer;
            }
        }
        return Ok(cur);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// Curve label in the state the decision was made on.
    pub curve: usize,
    pub candidate_log_marginal: f64,
    pub accepted: bool,
    /// Log marginal of the state after the decision.
    pub log_marginal: f64,
    pub n_curves: usize,
    pub n_sites: usize,
}

/// Curves in a label-independent order: by the centroid of their posterior
/// means at the first frame.
fn canonical_curve_order(state: &ModelState) -> Vec<usize> {
    let pos = state.mean_positions(0);
    let mut keyed: Vec<(usize, Vector3<f64>)> = (1..=state.n_curves())
        .map(|c| {
            let idx = state.sites.curve_sites(c);
            let sum = idx.iter().fold(Vector3::zeros(), |a, &j| a + pos[j]);
            (c, if idx.is_empty() { sum } else { sum / idx.len() as f64 })
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.1.x
            .total_cmp(&b.1.x)
            .then(a.1.y.total_cmp(&b.1.y))
            .then(a.1.z.total_cmp(&b.1.z))
            .then(a.0.cmp(&b.0))
    });
    keyed.into_iter().map(|k| k.0).collect()
}

/// Visits every curve once in seeded random order and deletes it when that
/// raises the estimated log marginal likelihood. EP is not re-run on
/// candidates.
pub fn prune<L: PointLikelihood + ?Sized>(
    state: &ModelState,
    hyper: &Hyperparams,
    times: &[f64],
    lik: &L,
    seed: u64,
    exec: Execution,
) -> Result<(ModelState, Vec<PruneDecision>)> {
    let mut order = canonical_curve_order(state);
    order.shuffle(&mut stream_rng(seed, &[0x7072_756e]));
    // label of each original curve in the current state
    let mut label: Vec<Option<usize>> = (0..=state.n_curves()).map(Some).collect();
    let mut cur = state.clone();
    let mut decisions = Vec::new();
    for orig in order {
        let Some(c) = label[orig] else { continue };
        if cur.n_curves() == 1 {
            break;
        }
        let edit = remove_curve(&cur.topology, &cur.sites, c)?;
        let ep_sites = cur.posterior.sites.select_points(&edit.source);
        let anchors = cur.anchors.select_points(&edit.source);
        let (cand, _) = assemble(hyper, edit.topology, edit.sites, ep_sites, anchors, times, lik, exec)?;
        let accepted = cand.log_marginal > cur.log_marginal;
        let candidate_log_marginal = cand.log_marginal;
        if accepted {
            for l in label.iter_mut() {
                *l = l.and_then(|x| edit.curve_map[x]);
            }
            cur = cand;
        }
        decisions.push(PruneDecision {
            curve: c,
            candidate_log_marginal,
            accepted,
            log_marginal: cur.log_marginal,
            n_curves: cur.n_curves(),
            n_sites: cur.n_sites(),
        });
    }
    Ok((cur, decisions))
}

// ---------------------------------------------------------------------------
// Birth

fn ray_distance(origin: &Vector3<f64>, dir: &Vector3<f64>, x: &Vector3<f64>) -> f64 {
    let d = x - origin;
    (d - dir * d.dot(dir)).norm()
}

/// Adds subtrees for foreground in `ref_view` that the current posterior
/// mean does not explain, attached to the nearest existing point, with
/// reprojection sites in `ref_view`. Runs one filter and smoother pass.
pub fn birth(
    state: &ModelState,
    scene: &Scene,
    ref_view: usize,
    hyper: &Hyperparams,
    cfg: &SearchConfig,
) -> Result<ModelState> {
    let cam = &scene.cameras[ref_view];
    let mask = match foreground_mask(&scene.maps, ref_view, cfg.fg_threshold) {
        Ok(m) => m,
        Err(Error::EmptyMask) => return Ok(state.clone()),
        Err(e) => return Err(e),
    };
    let positions = state.mean_positions(ref_view);
    let explained = dilate(&scene.render(ref_view, &state.polylines(ref_view))?, cfg.birth_dilation_px);
    let leftover = mask.and_not(&explained);
    let projected: Vec<Vector2<f64>> = positions.iter().map(|x| cam.project(x)).collect::<Result<_>>()?;

    let mut topo = state.topology.clone();
    let mut entries: Vec<PointIndex> = state.sites.entries().to_vec();
    let mut new_sites: Vec<(usize, PointSite)> = Vec::new();
    for comp in components(&leftover) {
        if comp.len() < cfg.min_birth_px {
            continue;
        }
        let skel = skeletonize(&mask_from(mask.width, mask.height, &comp));
        let near_existing = |p: &Pixel| {
            projected
                .iter()
                .map(|q| (q - Vector2::new(p.0 as f64, p.1 as f64)).norm())
                .fold(f64::INFINITY, f64::min)
        };
        let Some(&root) = skel
            .pixels
            .iter()
            .min_by(|a, b| near_existing(a).total_cmp(&near_existing(b)).then(a.cmp(b)))
        else {
            continue;
        };
        let tree2 = match extract_2d_tree_from(&skel, root, cfg.min_curve_px) {
            Ok(t) => t,
            Err(Error::Structure(_)) | Err(Error::InvalidTopology(_)) | Err(Error::EmptyMask) => continue,
            Err(e) => return Err(e),
        };
        let (c0, d0) = cam.ray(&Vector2::new(root.0 as f64, root.1 as f64))?;
        let anchor = (0..positions.len())
            .min_by(|&a, &b| {
                ray_distance(&c0, &d0, &positions[a])
                    .total_cmp(&ray_distance(&c0, &d0, &positions[b]))
                    .then(a.cmp(&b))
            })
            .ok_or(Error::EmptyMask)?;
        let ax = positions[anchor];
        let tree3 = match lift_tree(
            &tree2,
            &|p| cam.backproject_nearest(&Vector2::new(p.0 as f64, p.1 as f64), &ax),
            Some(ax),
        ) {
            Ok(t) => t,
            Err(Error::Structure(_)) | Err(Error::InvalidTopology(_)) => continue,
            Err(e) => return Err(e),
        };
        let offset = topo.n_curves();
        let host = state.sites.entries()[anchor];
        for c in 0..tree3.topology.n_curves() {
            topo.lengths.push(tree3.topology.lengths[c]);
            if tree3.topology.parent_curve[c] == 0 {
                topo.parent_curve.push(host.curve);
                topo.branch_t.push(host.t);
            } else {
                topo.parent_curve.push(tree3.topology.parent_curve[c] + offset);
                topo.branch_t.push(tree3.topology.branch_t[c]);
            }
        }
        // new roots hang off existing structure, so none keeps a t = 0 site
        for (p, x) in sample_sites(&tree3, cfg.stride_mm, offset)? {
            if p.t == 0.0 {
                continue;
            }
            new_sites.push((entries.len(), reprojection_site(cam, &x, cfg.bootstrap_sigma_px)?));
            entries.push(p);
        }
    }
    if new_sites.is_empty() {
        return Ok(state.clone());
    }
    topo.validate()?;
    let sites = IndexSet::new(&topo, entries)?;
    let t = scene.n_views();
    let extend = |old: &SiteApprox| {
        let mut out = SiteApprox::zeros(t, sites.len());
        for i in 0..t {
            for j in 0..old.n_points {
                out.set(i, j, *old.get(i, j));
            }
        }
        for (j, s) in &new_sites {
            out.set(ref_view, *j, *s);
        }
        out
    };
    let merged = merge_extensions(&topo, &sites)?;
    let ep_sites = extend(&state.posterior.sites).select_points(&merged.source);
    let anchors = extend(&state.anchors).select_points(&merged.source);
    let (out, _) = assemble(
        hyper,
        merged.topology,
        merged.sites,
        ep_sites,
        anchors,
        &scene.times,
        scene,
        cfg.ep.exec,
    )?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub action: String,
    pub log_marginal: f64,
    pub n_curves: usize,
    pub n_sites: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub name: String,
    pub state: ModelState,
    pub ep: Vec<PassDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: ModelState,
    pub stages: Vec<StageRecord>,
    pub trace: Vec<TraceRow>,
}

/// Views at which births are attempted: every fourth view after the first.
pub fn birth_views(n_views: usize) -> Vec<usize> {
    (4..n_views).step_by(4).collect()
}

struct Tracer {
    rows: Vec<TraceRow>,
    start: Instant,
    timing: bool,
}

impl Tracer {
    fn push(&mut self, stage: &str, action: String, state: &ModelState) {
        self.rows.push(TraceRow {
            stage: stage.to_string(),
            action,
            log_marginal: state.log_marginal,
            n_curves: state.n_curves(),
            n_sites: state.n_sites(),
            wall_ms: if self.timing { self.start.elapsed().as_millis() as u64 } else { 0 },
        });
    }
}

fn ep_stage(
    state: ModelState,
    scene: &Scene,
    hyper: &Hyperparams,
    cfg: &SearchConfig,
    stage: u64,
) -> Result<ModelState> {
    let model = build_model(hyper, &state.topology, &state.sites, &scene.times, cfg.ep.exec)?;
    let ep_cfg = EpConfig {
        seed: stream_seed(cfg.ep.seed, &[stage]),
        ..cfg.ep.clone()
    };
    let (init, mut frozen) = if cfg.restart_ep {
        (state.anchors.clone(), anchored_views(&state.anchors))
    } else {
        (state.posterior.sites.clone(), if stage == 0 { vec![0] } else { Vec::new() })
    };
    if !cfg.freeze_first_pass {
        frozen.clear();
    }
    let mut post = propagate(&model, init)?;
    if cfg.view_sweep && ep_cfg.n_iterations > 0 {
        let anchors = &state.anchors;
        let steps = sweep_steps(&anchored_views(anchors), scene.n_views());
        post = sweep_views(&model, scene, post, &ep_cfg, &steps, &|i, j| !anchors.get(i, j).is_zero())?;
    }
    let posterior = continue_ep(&model, scene, post, &ep_cfg, &frozen)?;
    let log_marginal = estimate_log_marginal(&state.topology, &state.sites, &posterior, scene, cfg.ep.exec)?;
    Ok(ModelState {
        posterior,
        log_marginal,
        ..state
    })
}

fn anchored_views(anchors: &SiteApprox) -> Vec<usize> {
    (0..anchors.n_times)
        .filter(|&i| (0..anchors.n_points).any(|j| !anchors.get(i, j).is_zero()))
        .collect()
}

/// Views grouped by index distance from the nearest anchored view, nearest
/// first; the anchored views themselves form the first group.
pub fn sweep_steps(anchored: &[usize], n_views: usize) -> Vec<Vec<usize>> {
    if anchored.is_empty() {
        return vec![(0..n_views).collect()];
    }
    let dist = |i: usize| anchored.iter().map(|&a| a.abs_diff(i)).min().unwrap_or(0);
    let max = (0..n_views).map(dist).max().unwrap_or(0);
    (0..=max)
        .map(|d| (0..n_views).filter(|&i| dist(i) == d).collect())
        .collect()
}

/// Bootstrap on the first view, EP, prune; then birth, EP and prune at
/// every fourth view.
pub fn fit_full(scene: &Scene, hyper: &Hyperparams, cfg: &SearchConfig) -> Result<FitResult> {
    cfg.ep.validate()?;
    let mut tr = Tracer {
        rows: Vec::new(),
        start: Instant::now(),
        timing: cfg.record_timing,
    };
    let mut stages = Vec::new();
    let record = |name: String, st: &ModelState| StageRecord {
        name,
        ep: st.posterior.diagnostics.clone(),
        state: st.clone(),
    };

    let state = bootstrap(scene, 0, hyper, cfg).map_err(|e| e.in_stage("bootstrap"))?;
    tr.push("bootstrap", "init".into(), &state);
    stages.push(record("bootstrap".into(), &state));

    let mut state = ep_stage(state, scene, hyper, cfg, 0).map_err(|e| e.in_stage("ep"))?;
    tr.push("ep", "converged".into(), &state);
    stages.push(record("ep".into(), &state));

    let prune_stage = |state: ModelState, name: &str, k: u64, tr: &mut Tracer| -> Result<ModelState> {
        let (out, decisions) = prune(&state, hyper, &scene.times, scene, stream_seed(cfg.seed, &[k]), cfg.ep.exec)
            .map_err(|e| e.in_stage("prune"))?;
        for d in &decisions {
            let verb = if d.accepted { "remove" } else { "keep" };
            tr.rows.push(TraceRow {
                stage: name.to_string(),
                action: format!("{verb} curve {}", d.curve),
                log_marginal: d.log_marginal,
                n_curves: d.n_curves,
                n_sites: d.n_sites,
                wall_ms: if tr.timing { tr.start.elapsed().as_millis() as u64 } else { 0 },
            });
        }
        Ok(out)
    };

    state = prune_stage(state, "prune", 0, &mut tr)?;
    stages.push(record("prune".into(), &state));

    for (k, view) in birth_views(scene.n_views()).into_iter().enumerate() {
        let k = k as u64 + 1;
        let name = format!("birth@{view}");
        state = birth(&state, scene, view, hyper, cfg).map_err(|e| e.in_stage("birth"))?;
        tr.push(&name, "birth".into(), &state);
        stages.push(record(name.clone(), &state));
        state = ep_stage(state, scene, hyper, cfg, k).map_err(|e| e.in_stage("ep"))?;
        tr.push(&format!("ep@{view}"), "converged".into(), &state);
        stages.push(record(format!("ep@{view}"), &state));
        state = prune_stage(state, &format!("prune@{view}"), k, &mut tr)?;
        stages.push(record(format!("prune@{view}"), &state));
    }
    Ok(FitResult {
        state,
        stages,
        trace: tr.rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ep_infer::GaussianStub;
    use crate::kernels::TemporalKernel;
    use crate::lds::{build_lds_from_grams, kalman_filter};
    use crate::scene::{synth_scene, GrayImage, SynthConfig, SynthScene};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_of(w: usize, h: usize, px: &[Pixel]) -> Mask {
        let mut m = Mask::new(w, h);
        for &(u, v) in px {
            m.set(u as usize, v as usize, true);
        }
        m
    }

    fn maps_of(masks: &[Mask]) -> LikelihoodMaps {
        let imgs = masks
            .iter()
            .map(|m| GrayImage {
                width: m.width,
                height: m.height,
                data: m.data.iter().map(|&on| if on { 230 } else { 20 }).collect(),
            })
            .collect();
        let fg: Vec<f64> = (0..256).map(|d| if d >= 128 { -0.01 } else { -8.0 }).collect();
        let bg: Vec<f64> = (0..256).map(|d| if d >= 128 { -8.0 } else { -0.01 }).collect();
        LikelihoodMaps::from_tables(imgs, &fg, &bg).unwrap()
    }

    fn easy(seed: u64) -> (SynthScene, Scene) {
        let topo = Topology::single(30.0).unwrap();
        let sites = IndexSet::uniform(&topo, 1.0).unwrap();
        let syn = synth_scene(&Hyperparams::default(), &topo, &sites, &SynthConfig::default().noiseless(), seed).unwrap();
        let scene = syn.scene().unwrap();
        (syn, scene)
    }

    fn line(u0: i64, v0: i64, du: i64, dv: i64, n: usize) -> Vec<Pixel> {
        (0..n as i64).map(|k| (u0 + k * du, v0 + k * dv)).collect()
    }

    #[test]
    fn foreground_mask_is_the_silhouette() {
        let stroke = line(5, 5, 1, 0, 20);
        let m0 = mask_of(40, 40, &stroke);
        let m1 = mask_of(40, 40, &line(5, 30, 1, 0, 20));
        let m2 = mask_of(40, 40, &line(30, 2, 0, 1, 30));
        let maps = maps_of(&[m0.clone(), m1, m2]);
        assert_eq!(foreground_mask(&maps, 0, 40.0).unwrap(), m0);

        let mut speckled = m0.clone();
        speckled.set(35, 35, true);
        let maps = maps_of(&[speckled, Mask::new(40, 40), Mask::new(40, 40)]);
        assert_eq!(foreground_mask(&maps, 0, 40.0).unwrap(), m0);

        let empty = maps_of(&[Mask::new(40, 40), Mask::new(40, 40)]);
        assert!(matches!(foreground_mask(&empty, 0, 40.0), Err(Error::EmptyMask)));
        assert!(foreground_mask(&maps_of(&[m0]), 0, 40.0).is_err());
    }

    #[test]
    fn foreground_shared_by_all_views_is_kept() {
        let m = mask_of(20, 20, &line(2, 10, 1, 0, 15));
        let maps = maps_of(&[m.clone(), m.clone(), m.clone()]);
        assert_eq!(foreground_mask(&maps, 1, 40.0).unwrap(), m);
    }

    #[test]
    fn thin_line_is_unchanged() {
        let px = line(3, 3, 1, 1, 12);
        let m = mask_of(20, 20, &px);
        assert_eq!(skeletonize(&m), Skeleton2D::from_mask(&m));
    }

    #[test]
    fn rectangle_thins_to_horizontal_chain() {
        let px: Vec<Pixel> = (2..11).flat_map(|u| (5..8).map(move |v| (u, v))).collect();
        let skel = skeletonize(&mask_of(14, 12, &px));
        assert!(skel.len() >= 5);
        assert!(skel.pixels.iter().all(|p| p.1 == 6 && (2..11).contains(&p.0)));
        assert_eq!(skel.n_components(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn thinning_preserves_components(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (40usize, 40usize);
            let mut m = Mask::new(w, h);
            for _ in 0..rng.random_range(1..6) {
                let (u0, v0) = (rng.random_range(0..w - 2), rng.random_range(0..h - 2));
                let (rw, rh) = (rng.random_range(1..12), rng.random_range(1..12));
                for u in u0..(u0 + rw).min(w) {
                    for v in v0..(v0 + rh).min(h) {
                        m.set(u, v, true);
                    }
                }
            }
            let skel = skeletonize(&m);
            prop_assert_eq!(skel.n_components(), components(&m).len());
            prop_assert!(skel.pixels.iter().all(|&(u, v)| m.get(u as usize, v as usize)));
        }
    }

    #[test]
    fn straight_chain_is_one_curve() {
        let skel = Skeleton2D::from_mask(&mask_of(20, 20, &line(2, 5, 1, 0, 10)));
        let t = extract_2d_tree(&skel, 6).unwrap();
        assert_eq!(t.topology.n_curves(), 1);
        assert_relative_eq!(t.topology.length(1), 9.0);
    }

    #[test]
    fn y_shape_has_root_below_junction() {
        let mut px = line(10, 10, 0, 1, 11);
        px.extend(line(9, 9, -1, -1, 7));
        px.extend(line(11, 9, 1, -1, 7));
        let skel = Skeleton2D::from_mask(&mask_of(24, 24, &px));
        let t = extract_2d_tree(&skel, 6).unwrap();
        assert_eq!(t.topology.n_curves(), 3);
        assert_eq!(t.curves[0][0], (10, 20));
        assert_eq!(*t.curves[0].last().unwrap(), (10, 10));
        assert_eq!(t.parent, vec![0, 1, 1]);
        assert_relative_eq!(t.topology.branch_t[1], 10.0);
        assert_relative_eq!(t.topology.branch_t[2], 10.0);
        assert_relative_eq!(t.topology.length(2), 7.0 * 2f64.sqrt());
    }

    #[test]
    fn t_shape_is_deterministic() {
        let mut px = line(3, 5, 1, 0, 15);
        px.extend(line(10, 6, 0, 1, 10));
        let skel = Skeleton2D::from_mask(&mask_of(20, 20, &px));
        let a = extract_2d_tree(&skel, 6).unwrap();
        let b = extract_2d_tree(&skel.clone(), 6).unwrap();
        assert_eq!(a, b);
        assert!(a.topology.n_curves() >= 2);
        assert_eq!(a.curves[0][0], (10, 15));
    }

    #[test]
    fn u_shape_is_one_curve() {
        let mut px = line(3, 3, 0, 1, 10);
        px.extend(line(4, 12, 1, 0, 8));
        px.extend(line(12, 12, 0, -1, 10));
        let skel = Skeleton2D::from_mask(&mask_of(20, 20, &px));
        let t = extract_2d_tree(&skel, 6).unwrap();
        assert_eq!(t.topology.n_curves(), 1);
        assert_eq!(t.curves[0].len(), px.len());
    }

    #[test]
    fn disconnected_skeleton_is_rejected() {
        let mut px = line(1, 1, 1, 0, 8);
        px.extend(line(1, 10, 1, 0, 8));
        let skel = Skeleton2D::from_mask(&mask_of(20, 20, &px));
        assert!(matches!(extract_2d_tree(&skel, 6), Err(Error::DisconnectedSkeleton(2))));
    }

    #[test]
    fn bootstrap_points_reproject_onto_their_pixels() {
        let (_, scene) = easy(1);
        let cfg = SearchConfig::default();
        let tree = bootstrap_tree(&scene, 0, &cfg).unwrap();
        let cam = &scene.cameras[0];
        let mut n = 0;
        for (poly, src) in tree.polylines.iter().zip(&tree.sources) {
            for ((_, x), s) in poly.iter().zip(src) {
                if let Some(p) = s {
                    let q = cam.project(x).unwrap();
                    assert!((q - Vector2::new(p.0 as f64, p.1 as f64)).norm() < 0.5);
                    n += 1;
                }
            }
        }
        assert!(n > 10);
    }

    #[test]
    fn reprojection_site_is_rank_two_along_the_ray() {
        let (_, scene) = easy(2);
        let cfg = SearchConfig::default();
        let state = bootstrap(&scene, 0, &Hyperparams::default(), &cfg).unwrap();
        let cam = &scene.cameras[0];
        let centre = cam.center().unwrap();
        for j in 0..state.n_sites() {
            let s = state.anchors.get(0, j);
            let x = s.precision.pseudo_inverse(1e-12).unwrap() * s.shift;
            let eig = SymmetricEigen::new(s.precision);
            let (k, &min) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            let max = eig.eigenvalues.max();
            assert!(min.abs() <= 1e-9 * max);
            let null = eig.eigenvectors.column(k).into_owned();
            let ray = (x - centre).normalize();
            assert!(1.0 - null.dot(&ray).abs() < 1e-6);
            for i in 1..scene.n_views() {
                assert!(state.anchors.get(i, j).is_zero());
            }
        }
    }

    #[test]
    fn noiseless_single_curve_bootstraps_to_one_curve() {
        let (_, scene) = easy(1);
        let state = bootstrap(&scene, 0, &Hyperparams::default(), &SearchConfig::default()).unwrap();
        assert_eq!(state.n_curves(), 1);
    }

    fn one_point_chain() -> (LdsModel, GaussianStub) {
        let model = build_lds_from_grams(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::zeros(1, 1),
            &TemporalKernel::OrnsteinUhlenbeck { length: 1.0 },
            &[0.0],
        )
        .unwrap();
        let stub = GaussianStub::new(
            1,
            1,
            vec![PointSite {
                precision: Matrix3::identity(),
                shift: Vector3::repeat(1.0),
            }],
        )
        .unwrap();
        (model, stub)
    }

    #[test]
    fn estimate_matches_closed_form_evidence() {
        let (model, stub) = one_point_chain();
        let topo = Topology::single(1.0).unwrap();
        let sites = IndexSet::new(&topo, vec![PointIndex::new(1, 1.0)]).unwrap();
        let post = propagate(&model, stub_sites(&stub, 1, 1)).unwrap();
        let want = 3.0 * (-0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25);
        assert_relative_eq!(want, 3.0 * -1.515512, epsilon = 1e-6);
        let at = |z: f64| {
            estimate_log_marginal_at(&topo, &sites, &post.chain, &stub, &[DVector::repeat(3, z)], Execution::Sequential)
                .unwrap()
        };
        assert!((at(0.5) - want).abs() < 1e-6);
        for z in [-3.0, 0.0, 0.25, 2.0, 7.5] {
            assert!((at(z) - at(0.5)).abs() < 1e-8);
        }
        let est = estimate_log_marginal(&topo, &sites, &post, &stub, Execution::Sequential).unwrap();
        assert!((est - want).abs() < 1e-6);
    }

    fn stub_sites(stub: &GaussianStub, t: usize, m: usize) -> SiteApprox {
        let mut s = SiteApprox::zeros(t, m);
        for i in 0..t {
            for j in 0..m {
                s.set(i, j, stub.entries[i * m + j]);
            }
        }
        s
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose() + DMatrix::identity(n, n) * 0.2) * scale
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn estimate_matches_gaussian_evidence(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, t) = (3usize, 4usize);
            let times: Vec<f64> = (0..t).map(|i| i as f64).collect();
            let model = build_lds_from_grams(
                &random_spd(&mut rng, m, 2.0),
                &random_spd(&mut rng, m, 0.5),
                &TemporalKernel::OrnsteinUhlenbeck { length: 2.0 },
                &times,
            )
            .unwrap();
            let entries: Vec<PointSite> = (0..t * m)
                .map(|_| {
                    let p = random_spd(&mut rng, 3, 1.0);
                    let lam = Matrix3::from_fn(|r, c| p[(r, c)]);
                    PointSite { precision: lam, shift: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)) }
                })
                .collect();
            let stub = GaussianStub::new(t, m, entries).unwrap();
            let post = propagate(&model, stub_sites(&stub, t, m)).unwrap();
            let exact = kalman_filter(&model, &post.sites.time_sites()).unwrap().log_evidence_gaussian.unwrap();
            let topo = Topology::single(4.0).unwrap();
            let sites = IndexSet::uniform(&topo, 2.0).unwrap();
            let est = estimate_log_marginal(&topo, &sites, &post, &stub, Execution::Sequential).unwrap();
            prop_assert!((est - exact).abs() <= 1e-6 * exact.abs().max(1.0));
            let z: Vec<DVector<f64>> = (0..t).map(|_| DVector::from_fn(3 * m, |_, _| rng.random_range(-3.0..3.0))).collect();
            let at_z = estimate_log_marginal_at(&topo, &sites, &post.chain, &stub, &z, Execution::Sequential).unwrap();
            prop_assert!((at_z - est).abs() <= 1e-8 * est.abs().max(1.0));
        }
    }

    #[test]
    fn birth_visits_every_fourth_view() {
        assert_eq!(birth_views(9), vec![4, 8]);
        assert_eq!(birth_views(13), vec![4, 8, 12]);
        assert!(birth_views(4).is_empty());
    }

    #[test]
    fn sweep_groups_views_by_distance() {
        assert_eq!(sweep_steps(&[0], 4), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(sweep_steps(&[0, 4], 6), vec![vec![0, 4], vec![1, 3, 5], vec![2]]);
        assert_eq!(sweep_steps(&[], 3), vec![vec![0, 1, 2]]);
    }

    fn sites_on(topo: &Topology, pts: &[(usize, f64)]) -> IndexSet {
        IndexSet::new(topo, pts.iter().map(|&(c, t)| PointIndex::new(c, t)).collect()).unwrap()
    }

    #[test]
    fn remove_root_frees_children() {
        let topo = Topology::new(vec![10.0, 4.0, 3.0], vec![0, 1, 2], vec![0.0, 5.0, 2.0]).unwrap();
        let sites = sites_on(&topo, &[(1, 0.0), (1, 10.0), (2, 2.0), (2, 4.0), (3, 3.0)]);
        let e = remove_curve(&topo, &sites, 2).unwrap();
        assert_eq!(e.topology.parent_curve, vec![0, 0]);
        assert_eq!(e.source, vec![0, 1, 4]);
        assert_eq!(e.curve_map, vec![None, Some(1), None, Some(2)]);
        assert!(remove_curve(&Topology::single(1.0).unwrap(), &sites_on(&Topology::single(1.0).unwrap(), &[(1, 0.0)]), 1).is_err());
    }

    #[test]
    fn removing_one_of_two_end_arms_joins_the_other() {
        let topo = Topology::new(vec![10.0, 4.0, 6.0], vec![0, 1, 1], vec![0.0, 10.0, 10.0]).unwrap();
        let sites = sites_on(&topo, &[(1, 0.0), (1, 10.0), (2, 4.0), (3, 3.0), (3, 6.0)]);
        let e = remove_curve(&topo, &sites, 2).unwrap();
        assert_eq!(e.topology.n_curves(), 1);
        assert_relative_eq!(e.topology.length(1), 16.0);
        let ts: Vec<f64> = e.sites.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![0.0, 10.0, 13.0, 16.0]);
        assert_eq!(e.curve_map, vec![None, Some(1), None, Some(1)]);
    }

    #[test]
    fn merge_at_parent_tip() {
        let topo = Topology::new(vec![10.0, 5.0, 3.0], vec![0, 1, 1], vec![0.0, 10.0, 4.0]).unwrap();
        let sites = sites_on(&topo, &[(1, 0.0), (1, 10.0), (3, 3.0), (2, 5.0)]);
        let e = merge_into_parent(&topo, &sites, 2).unwrap().unwrap();
        assert_eq!(e.topology.n_curves(), 2);
        assert_relative_eq!(e.topology.length(1), 15.0);
        assert_eq!(e.topology.parent_curve, vec![0, 1]);
        assert_relative_eq!(e.topology.branch_t[1], 4.0);
        let got: Vec<(usize, f64)> = e.sites.iter().map(|p| (p.curve, p.t)).collect();
        assert_eq!(got, vec![(1, 0.0), (1, 10.0), (1, 15.0), (2, 3.0)]);
        assert_eq!(e.source, vec![0, 1, 3, 2]);
        // a middle branch does not continue an end
        assert!(merge_into_parent(&topo, &sites, 3).unwrap().is_none());
    }

    #[test]
    fn merge_at_root_start() {
        let topo = Topology::new(vec![10.0, 4.0], vec![0, 1], vec![0.0, 2.0]).unwrap();
        let sites = sites_on(&topo, &[(1, 2.0), (1, 10.0), (2, 2.0), (2, 4.0)]);
        let e = merge_into_parent(&topo, &sites, 2).unwrap().unwrap();
        assert_eq!(e.topology.n_curves(), 1);
        assert_relative_eq!(e.topology.length(1), 12.0);
        let got: Vec<f64> = e.sites.iter().map(|p| p.t).collect();
        assert_eq!(got, vec![0.0, 2.0, 4.0, 12.0]);
        assert_eq!(e.source, vec![3, 2, 0, 1]);
    }

    #[test]
    fn merge_extensions_composes() {
        let topo = Topology::new(vec![10.0, 4.0, 3.0], vec![0, 1, 2], vec![0.0, 10.0, 4.0]).unwrap();
        let sites = sites_on(&topo, &[(1, 0.0), (1, 10.0), (2, 4.0), (3, 3.0)]);
        let e = merge_extensions(&topo, &sites).unwrap();
        assert_eq!(e.topology.n_curves(), 1);
        assert_relative_eq!(e.topology.length(1), 17.0);
        assert_eq!(e.curve_map, vec![None, Some(1), Some(1), Some(1)]);
        assert_eq!(e.source, vec![0, 1, 2, 3]);
    }

    /// The true plant of `syn` with a spurious side branch at t = 20, both
    /// pinned in every view. `spurious_first` gives the branch label 1.
    fn with_spurious(syn: &SynthScene, scene: &Scene, spurious_first: bool) -> ModelState {
        let truth = &syn.truth;
        let at = truth.sites.iter().position(|p| p.t == 20.0).unwrap();
        let side = Vector3::new(-40f64.to_radians().sin(), 40f64.to_radians().cos(), 0.0);
        let (sp, pl) = if spurious_first { (1, 2) } else { (2, 1) };
        let mut lengths = vec![0.0; 2];
        let mut parents = vec![0; 2];
        let mut branch = vec![0.0; 2];
        lengths[sp - 1] = 8.0;
        lengths[pl - 1] = truth.topology.length(1);
        parents[sp - 1] = pl;
        branch[sp - 1] = 20.0;
        let topo = Topology::new(lengths, parents, branch).unwrap();
        let keep: Vec<usize> = (0..truth.sites.len()).step_by(2).collect();
        let mut entries: Vec<PointIndex> = keep.iter().map(|&j| PointIndex::new(pl, truth.sites.entries()[j].t)).collect();
        entries.extend((1..=4).map(|k| PointIndex::new(sp, 2.0 * k as f64)));
        let t = scene.n_views();
        let mut anchors = SiteApprox::zeros(t, entries.len());
        for i in 0..t {
            for (j, e) in entries.iter().enumerate() {
                let x = if e.curve == pl {
                    truth.points[i][keep[j]]
                } else {
                    truth.points[i][at] + side * e.t
                };
                anchors.set(i, j, reprojection_site(&scene.cameras[i], &x, 1.0).unwrap());
            }
        }
        let sites = IndexSet::new(&topo, entries).unwrap();
        ModelState::from_sites(
            &Hyperparams::default(),
            topo,
            sites,
            anchors.clone(),
            anchors,
            &scene.times,
            scene,
            Execution::Parallel,
        )
        .unwrap()
    }

    #[test]
    fn spurious_curve_is_pruned() {
        let (syn, scene) = easy(1);
        let state = with_spurious(&syn, &scene, false);
        let (out, decisions) = prune(&state, &Hyperparams::default(), &scene.times, &scene, 3, Execution::Parallel).unwrap();
        assert_eq!(out.n_curves(), 1);
        assert_eq!(out.n_sites(), state.n_sites() - 4);
        assert!(decisions.iter().any(|d| d.accepted && d.curve == 2));
        let mut last = state.log_marginal;
        for d in &decisions {
            assert!(d.log_marginal >= last);
            last = d.log_marginal;
        }
        for w in out.topology.lengths.iter().zip(&state.topology.lengths) {
            assert_eq!(w.0, w.1);
        }
    }

    #[test]
    fn pruning_ignores_labels() {
        let (syn, scene) = easy(1);
        let a = with_spurious(&syn, &scene, false);
        let b = with_spurious(&syn, &scene, true);
        assert_relative_eq!(a.log_marginal, b.log_marginal, max_relative = 1e-9);
        let h = Hyperparams::default();
        let (pa, da) = prune(&a, &h, &scene.times, &scene, 11, Execution::Parallel).unwrap();
        let (pb, db) = prune(&b, &h, &scene.times, &scene, 11, Execution::Parallel).unwrap();
        assert_eq!(pa.topology, pb.topology);
        assert_eq!(pa.sites, pb.sites);
        assert_eq!(da.len(), db.len());
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.accepted, y.accepted);
        }
        for i in 0..scene.n_views() {
            for (p, q) in pa.mean_positions(i).iter().zip(pb.mean_positions(i)) {
                assert!((p - q).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn lone_curve_is_never_pruned() {
        let (_, scene) = easy(1);
        let state = bootstrap(&scene, 0, &Hyperparams::default(), &SearchConfig::default()).unwrap();
        let (out, decisions) = prune(&state, &Hyperparams::default(), &scene.times, &scene, 0, Execution::Parallel).unwrap();
        assert!(decisions.is_empty());
        assert_eq!(out.topology, state.topology);
    }

    #[test]
    fn birth_with_nothing_unexplained_is_identity() {
        let (syn, scene) = easy(1);
        let state = bootstrap(&scene, 0, &Hyperparams::default(), &SearchConfig::default()).unwrap();
        // maps of view 4 showing only background
        let mut blank = scene.clone();
        let bgd = syn.maps.views[4].d.data.iter().map(|_| 20u8).collect();
        blank.maps.views[4].d.data = bgd;
        let out = birth(&state, &blank, 4, &Hyperparams::default(), &SearchConfig::default()).unwrap();
        assert_eq!(out.topology, state.topology);
        assert_eq!(out.sites, state.sites);
    }

    #[test]
    fn fit_is_deterministic_across_execution_modes() {
        let (_, scene) = easy(3);
        let h = Hyperparams::default();
        let par = SearchConfig { seed: 5, ..SearchConfig::default() };
        let mut seq = par.clone();
        seq.ep.exec = Execution::Sequential;
        let a = fit_full(&scene, &h, &par).unwrap();
        let b = fit_full(&scene, &h, &par).unwrap();
        let c = fit_full(&scene, &h, &seq).unwrap();
        for other in [&b, &c] {
            assert_eq!(a.state.topology, other.state.topology);
            assert_eq!(a.state.sites, other.state.sites);
            assert_eq!(a.state.log_marginal.to_bits(), other.state.log_marginal.to_bits());
            assert_eq!(a.trace, other.trace);
        }
    }
}
