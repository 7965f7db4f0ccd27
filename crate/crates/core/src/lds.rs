//! Markov factorization of the plant prior over time, with a Kalman filter
//! and Rauch–Tung–Striebel smoother.
//!
//! Sites are applied in information form through a square-root factor
//! `Λ = B Bᵀ`, so rank-deficient and zero-precision sites go through the
//! same code path as proper ones.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::curve_tree::IndexSet;
use crate::error::{Error, Result};
use crate::gp_core::{
    chol_psd, kron3_lift, ln_2pi, space_time_points, symmetrize, GaussianDensity,
    InformationGaussian, JitterPolicy,
};
use crate::kernels::{gram_sym, plant_spatial_grams, CompositePlantKernel, TemporalKernel};
use crate::par::Execution;

/// State-space form of the plant prior. The state stacks one block per
/// prior component (the time-constant part and the OU perturbation), each of
/// size `3M`; the tree at time `i` is the sum of the blocks.
#[derive(Clone, Debug)]
pub struct LdsModel {
    pub times: Vec<f64>,
    pub site_count: usize,
    /// Number of stacked `3M` blocks in the state.
    pub components: usize,
    pub initial: GaussianDensity,
    /// `(F_i, Q_i)` for steps `2..=T`, over the stacked state.
    pub transitions: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl LdsModel {
    pub fn dim(&self) -> usize {
        3 * self.site_count
    }

    pub fn state_dim(&self) -> usize {
        self.components * self.dim()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Marginal of the tree points from a state density.
    pub fn observe(&self, state: &GaussianDensity) -> GaussianDensity {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for a in 0..self.components {
            mean += state.mean.rows(a * d, d);
            for b in 0..self.components {
                cov += state.cov.view((a * d, b * d), (d, d));
            }
        }
        GaussianDensity {
            mean,
            cov: symmetrize(&cov),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ChainPosterior {
    pub filtered: Vec<GaussianDensity>,
    pub smoothed: Vec<GaussianDensity>,
    pub predictive: Vec<GaussianDensity>,
    /// Present only when every site is a proper Gaussian.
    pub log_evidence_gaussian: Option<f64>,
    state_filtered: Vec<GaussianDensity>,
    state_predictive: Vec<GaussianDensity>,
}

impl ChainPosterior {
    /// Smoothed marginal of site `j` at time `i`, falling back to the
    /// filtered marginal before smoothing.
    pub fn point_marginal(&self, i: usize, j: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let g = if self.smoothed.is_empty() {
            &self.filtered[i]
        } else {
            &self.smoothed[i]
        };
        point_block(g, j)
    }
}

pub(crate) fn point_block(g: &GaussianDensity, j: usize) -> (Vector3<f64>, Matrix3<f64>) {
    let m = Vector3::new(g.mean[3 * j], g.mean[3 * j + 1], g.mean[3 * j + 2]);
    let c = g.cov.fixed_view::<3, 3>(3 * j, 3 * j).into_owned();
    (m, c)
}

/// Builds the state-space form from unlifted spatial Grams: `static_gram`
/// (including any constant offset) is shared across all times, `perturb_gram`
/// is scaled by the temporal kernel. A component whose Gram is identically
/// zero is left out of the state.
pub fn build_lds_from_grams(
    static_gram: &DMatrix<f64>,
    perturb_gram: &DMatrix<f64>,
    temporal: &TemporalKernel,
    times: &[f64],
) -> Result<LdsModel> {
    if !temporal.is_markov() {
        return Err(Error::InvalidParameter("temporal kernel is not Markovian".into()));
    }
    if times.is_empty() {
        return Err(Error::InvalidParameter("no time steps".into()));
    }
    let m = static_gram.nrows();
    if perturb_gram.nrows() != m || static_gram.ncols() != m || perturb_gram.ncols() != m {
        return Err(Error::DimensionMismatch("spatial Gram shapes differ".into()));
    }
    let has_static = static_gram.iter().any(|&v| v != 0.0);
    let has_perturb = perturb_gram.iter().any(|&v| v != 0.0);
    // (gram, is_temporal)
    let mut parts: Vec<(&DMatrix<f64>, bool)> = Vec::new();
    if has_static || !has_perturb {
        parts.push((static_gram, false));
    }
    if has_perturb {
        parts.push((perturb_gram, true));
    }
    let d = 3 * m;
    let n = d * parts.len();
    let mut init = DMatrix::zeros(n, n);
    for (a, (g, _)) in parts.iter().enumerate() {
        init.view_mut((a * d, a * d), (d, d)).copy_from(&kron3_lift(g));
    }
    let mut transitions = Vec::with_capacity(times.len().saturating_sub(1));
    for w in times.windows(2) {
        let mut f = DMatrix::zeros(n, n);
        let mut q = DMatrix::zeros(n, n);
        for (a, (g, temporal_part)) in parts.iter().enumerate() {
            // per component, K* = c K, so F = c I and Q = (1 - c²) K
            let c = if *temporal_part {
                temporal.eval(w[0], w[1]) / temporal.eval(w[0], w[0])
            } else {
                1.0
            };
            f.view_mut((a * d, a * d), (d, d)).fill_diagonal(c);
            if c != 1.0 {
                q.view_mut((a * d, a * d), (d, d))
                    .copy_from(&(kron3_lift(g) * (1.0 - c * c)));
            }
        }
        transitions.push((f, q));
    }
    Ok(LdsModel {
        times: times.to_vec(),
        site_count: m,
        components: parts.len(),
        initial: GaussianDensity::zero_mean(init),
        transitions,
    })
}

pub fn build_lds(
    kernel: &CompositePlantKernel,
    sites: &IndexSet,
    times: &[f64],
    exec: Execution,
) -> Result<LdsModel> {
    let (s, p) = plant_spatial_grams(kernel, sites.entries(), exec)?;
    let s = s.add_scalar(kernel.offset);
    build_lds_from_grams(&s, &p, &kernel.temporal, times)
}

/// Square-root factor of a site precision.
struct SiteFactor {
    b: DMatrix<f64>,
    /// `B⁻¹ h` restricted to the kept directions.
    w: DVector<f64>,
    log_det: f64,
    proper: bool,
}

fn factor_block(
    block: &DMatrix<f64>,
    h: &DVector<f64>,
    offset: usize,
    cols: &mut Vec<(usize, DVector<f64>, f64)>,
    proper: &mut bool,
    log_det: &mut f64,
) -> Result<()> {
    let n = block.nrows();
    let e = SymmetricEigen::new(symmetrize(block));
    let hi = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    for (k, &lam) in e.eigenvalues.iter().enumerate() {
        if lam < -1e-8 * hi.max(1e-300) {
            return Err(Error::NotPositiveDefinite { jitter: 0.0 });
        }
        if lam <= 1e-14 * hi || lam <= 0.0 {
            *proper = false;
            continue;
        }
        let u = e.eigenvectors.column(k).into_owned();
        let s = lam.sqrt();
        let w = u.dot(&h.rows(offset, n)) / s;
        cols.push((offset, u * s, w));
        *log_det += lam.ln();
    }
    Ok(())
}

fn factor_site(site: &InformationGaussian) -> Result<SiteFactor> {
    let n = site.dim();
    let lam = &site.precision;
    let block_diag = n % 3 == 0
        && (0..n).all(|r| (0..n).all(|c| r / 3 == c / 3 || lam[(r, c)] == 0.0));
    let mut cols = Vec::new();
    let mut proper = true;
    let mut log_det = 0.0;
    if block_diag {
        for j in 0..n / 3 {
            let blk = lam.view((3 * j, 3 * j), (3, 3)).into_owned();
            if blk.iter().all(|&v| v == 0.0) {
                proper = false;
                continue;
            }
            factor_block(&blk, &site.shift, 3 * j, &mut cols, &mut proper, &mut log_det)?;
        }
    } else {
        factor_block(lam, &site.shift, 0, &mut cols, &mut proper, &mut log_det)?;
    }
    let mut b = DMatrix::zeros(n, cols.len());
    let mut w = DVector::zeros(cols.len());
    for (k, (off, u, wk)) in cols.into_iter().enumerate() {
        b.view_mut((off, k), (u.len(), 1)).copy_from(&u);
        w[k] = wk;
    }
    Ok(SiteFactor {
        b,
        w,
        log_det,
        proper: proper && n > 0,
    })
}

/// Conjugate update of `N(m, P)` with an information-form site. Returns the
/// posterior and, for a proper site, `log N(Λ⁻¹h; m, P + Λ⁻¹)`.
pub fn information_update(
    prior: &GaussianDensity,
    site: &InformationGaussian,
) -> Result<(GaussianDensity, Option<f64>)> {
    stacked_update(prior, site, 1)
}

/// Update of a state made of `copies` stacked blocks whose sum the site
/// observes.
fn stacked_update(
    prior: &GaussianDensity,
    site: &InformationGaussian,
    copies: usize,
) -> Result<(GaussianDensity, Option<f64>)> {
    let d = site.dim();
    if d * copies != prior.dim() {
        return Err(Error::DimensionMismatch(format!(
            "site {} vs state {}",
            d,
            prior.dim()
        )));
    }
    let sf = factor_site(site)?;
    let r = sf.b.ncols();
    if r == 0 {
        let ev = if sf.proper { Some(0.0) } else { None };
        return Ok((prior.clone(), ev));
    }
    let mut b = DMatrix::zeros(d * copies, r);
    for a in 0..copies {
        b.view_mut((a * d, 0), (d, r)).copy_from(&sf.b);
    }
    let mut h = DVector::zeros(d * copies);
    for a in 0..copies {
        h.rows_mut(a * d, d).copy_from(&site.shift);
    }
    let pb = &prior.cov * &b;
    let mut s = b.transpose() * &pb;
    for k in 0..r {
        s[(k, k)] += 1.0;
    }
    let cs = chol_psd(&s, &JitterPolicy::default())?;
    let cov = symmetrize(&(&prior.cov - &pb * cs.solve_mat(&pb.transpose())));
    let bt_m = b.transpose() * &prior.mean;
    let mean = &prior.mean + &cov * (h - &b * &bt_m);
    let evidence = if sf.proper {
        let resid = &sf.w - bt_m;
        let quad = resid.dot(&cs.solve_vec(&resid));
        Some(-0.5 * (r as f64 * ln_2pi() + cs.log_det() - sf.log_det + quad))
    } else {
        None
    };
    Ok((GaussianDensity { mean, cov }, evidence))
}

fn diagonal_of(f: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = f.nrows();
    for c in 0..n {
        for r in 0..n {
            if r != c && f[(r, c)] != 0.0 {
                return None;
            }
        }
    }
    Some(f.diagonal())
}

/// `F P Fᵀ + Q` and `F m`.
fn predict(prev: &GaussianDensity, f: &DMatrix<f64>, q: &DMatrix<f64>) -> GaussianDensity {
    match diagonal_of(f) {
        Some(fd) => {
            let mean = prev.mean.component_mul(&fd);
            let n = fd.len();
            let cov = DMatrix::from_fn(n, n, |r, c| fd[r] * prev.cov[(r, c)] * fd[c] + q[(r, c)]);
            GaussianDensity {
                mean,
                cov: symmetrize(&cov),
            }
        }
        None => GaussianDensity {
            mean: f * &prev.mean,
            cov: symmetrize(&(f * &prev.cov * f.transpose() + q)),
        },
    }
}

pub fn kalman_filter(model: &LdsModel, sites: &[InformationGaussian]) -> Result<ChainPosterior> {
    let t = model.n_times();
    if sites.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "{} site groups for {} time steps",
            sites.len(),
            t
        )));
    }
    let mut out = ChainPosterior {
        log_evidence_gaussian: Some(0.0),
        ..Default::default()
    };
    for i in 0..t {
        let pred = if i == 0 {
            model.initial.clone()
        } else {
            let (f, q) = &model.transitions[i - 1];
            predict(&out.state_filtered[i - 1], f, q)
        };
        let (filt, ev) = stacked_update(&pred, &sites[i], model.components)?;
        out.log_evidence_gaussian = match (out.log_evidence_gaussian, ev) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        out.predictive.push(model.observe(&pred));
        out.filtered.push(model.observe(&filt));
        out.state_predictive.push(pred);
        out.state_filtered.push(filt);
    }
    Ok(out)
}

pub fn rts_smooth(model: &LdsModel, mut post: ChainPosterior) -> Result<ChainPosterior> {
    let t = post.state_filtered.len();
    if t == 0 {
        post.smoothed = post.filtered.clone();
        return Ok(post);
    }
    let filtered = std::mem::take(&mut post.state_filtered);
    let predictive = std::mem::take(&mut post.state_predictive);
    let mut next = filtered[t - 1].clone();
    let mut smoothed = vec![GaussianDensity::zero_mean(DMatrix::zeros(0, 0)); t];
    smoothed[t - 1] = model.observe(&next);
    for i in (0..t - 1).rev() {
        let filt = &filtered[i];
        let pred = &predictive[i + 1];
        let (f, _) = &model.transitions[i];
        let chol = chol_psd(&pred.cov, &JitterPolicy::default())?;
        // G = P_f Fᵀ P_pred⁻¹
        let fp = match diagonal_of(f) {
            Some(fd) => DMatrix::from_fn(fd.len(), fd.len(), |r, c| fd[r] * filt.cov[(r, c)]),
            None => f * &filt.cov,
        };
        let g = chol.solve_mat(&fp).transpose();
        let mean = &filt.mean + &g * (&next.mean - &pred.mean);
        let cov = symmetrize(&(&filt.cov + &g * (&next.cov - &pred.cov) * g.transpose()));
        next = GaussianDensity { mean, cov };
        smoothed[i] = model.observe(&next);
    }
    post.smoothed = smoothed;
    Ok(post)
}

/// Filter followed by smoother.
pub fn filter_smooth(model: &LdsModel, sites: &[InformationGaussian]) -> Result<ChainPosterior> {
    rts_smooth(model, kalman_filter(model, sites)?)
}

/// Dense joint-Gram posterior marginals per time; the reference for the
/// state-space path on small problems.
pub fn batch_equivalent_posterior(
    kernel: &CompositePlantKernel,
    sites: &IndexSet,
    times: &[f64],
    gaussian_sites: &[InformationGaussian],
) -> Result<Vec<GaussianDensity>> {
    let joint = batch_joint(kernel, sites, times, gaussian_sites)?.0;
    let d = 3 * sites.len();
    Ok((0..times.len()).map(|i| joint.block(i * d, d)).collect())
}

/// Dense joint posterior and the Gaussian evidence, if all sites are proper.
pub fn batch_joint(
    kernel: &CompositePlantKernel,
    sites: &IndexSet,
    times: &[f64],
    gaussian_sites: &[InformationGaussian],
) -> Result<(GaussianDensity, Option<f64>)> {
    if gaussian_sites.len() != times.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} site groups for {} time steps",
            gaussian_sites.len(),
            times.len()
        )));
    }
    let pts = space_time_points(sites.entries(), times);
    let k = kron3_lift(&gram_sym(kernel, &pts, Execution::Sequential)?);
    let d = 3 * sites.len();
    let n = d * times.len();
    let mut lam = DMatrix::zeros(n, n);
    let mut h = DVector::zeros(n);
    for (i, s) in gaussian_sites.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::DimensionMismatch(format!("site {} vs state {}", s.dim(), d)));
        }
        lam.view_mut((i * d, i * d), (d, d)).copy_from(&s.precision);
        h.rows_mut(i * d, d).copy_from(&s.shift);
    }
    information_update(
        &GaussianDensity::zero_mean(k),
        &InformationGaussian {
            precision: lam,
            shift: h,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve_tree::Topology;
    use crate::kernels::Hyperparams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn ou(l: f64) -> TemporalKernel {
        TemporalKernel::OrnsteinUhlenbeck { length: l }
    }

    fn one() -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    #[test]
    fn ou_transition_closed_form() {
        let m = build_lds_from_grams(&DMatrix::zeros(1, 1), &one(), &ou(2.0), &[0.0, 2.0]).unwrap();
        let (f, q) = &m.transitions[0];
        let e1 = (-1.0f64).exp();
        assert!((f - DMatrix::identity(3, 3) * e1).norm() < 1e-12);
        assert!((q - DMatrix::identity(3, 3) * (1.0 - e1 * e1)).norm() < 1e-12);
        assert_relative_eq!(f[(0, 0)], 0.367879, epsilon = 1e-6);
        assert_relative_eq!(q[(0, 0)], 0.864665, epsilon = 1e-6);
    }

    #[test]
    fn zero_time_step_is_identity() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]);
        let m = build_lds_from_grams(&s, &p, &ou(1.0), &[3.0, 3.0]).unwrap();
        let (f, q) = &m.transitions[0];
        assert_eq!(f.nrows(), m.state_dim());
        assert!((f - DMatrix::identity(m.state_dim(), m.state_dim())).norm() < 1e-10);
        assert!(q.norm() < 1e-10);
    }

    #[test]
    fn static_only_is_constant() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = build_lds_from_grams(&s, &DMatrix::zeros(2, 2), &ou(1.0), &[0.0, 1.0, 5.0]).unwrap();
        for (f, q) in &m.transitions {
            assert!((f - DMatrix::identity(6, 6)).norm() < 1e-10);
            assert!(q.norm() < 1e-10);
        }
    }

    fn single_model() -> LdsModel {
        build_lds_from_grams(&DMatrix::zeros(1, 1), &one(), &ou(1.0), &[0.0]).unwrap()
    }

    #[test]
    fn filter_conjugate_update() {
        let site = InformationGaussian {
            precision: DMatrix::identity(3, 3),
            shift: DVector::from_element(3, 1.0),
        };
        let post = kalman_filter(&single_model(), &[site]).unwrap();
        assert!((&post.filtered[0].mean - DVector::from_element(3, 0.5)).norm() < 1e-12);
        assert!((&post.filtered[0].cov - DMatrix::identity(3, 3) * 0.5).norm() < 1e-12);
        // N(1; 0, 2) per coordinate
        let want = 3.0 * (-0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 0.25);
        assert_relative_eq!(post.log_evidence_gaussian.unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn improper_sites_leave_prior() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]);
        let m = build_lds_from_grams(&s, &p, &ou(1.0), &[0.0, 0.5, 2.0]).unwrap();
        let sites = vec![InformationGaussian::improper(6); 3];
        let post = filter_smooth(&m, &sites).unwrap();
        assert!(post.log_evidence_gaussian.is_none());
        for i in 0..3 {
            assert_eq!(post.filtered[i], post.predictive[i]);
            assert!((&post.smoothed[i].cov - m.observe(&m.initial).cov).norm() < 1e-10);
        }
    }

    #[test]
    fn rank_one_site_shrinks_one_coordinate() {
        let site = InformationGaussian {
            precision: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0])),
            shift: DVector::zeros(3),
        };
        let post = kalman_filter(&single_model(), &[site]).unwrap();
        let c = &post.filtered[0].cov;
        assert_relative_eq!(c[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[(1, 1)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c[(2, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_psd_site_rejected() {
        let site = InformationGaussian {
            precision: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 0.0])),
            shift: DVector::zeros(3),
        };
        assert!(kalman_filter(&single_model(), &[site]).is_err());
    }

    #[test]
    fn smoother_single_step_and_constant_chain() {
        let site = InformationGaussian {
            precision: DMatrix::identity(3, 3),
            shift: DVector::from_element(3, 1.0),
        };
        let post = filter_smooth(&single_model(), &[site.clone()]).unwrap();
        assert_eq!(post.smoothed[0], post.filtered[0]);

        let m = build_lds_from_grams(&one(), &DMatrix::zeros(1, 1), &ou(1.0), &[0.0, 1.0, 2.0]).unwrap();
        let sites = vec![site.clone(), InformationGaussian::improper(3), site];
        let post = filter_smooth(&m, &sites).unwrap();
        for i in 1..3 {
            assert!((&post.smoothed[i].mean - &post.smoothed[0].mean).norm() < 1e-10);
            assert!((&post.smoothed[i].cov - &post.smoothed[0].cov).norm() < 1e-10);
        }
    }

    #[test]
    fn single_site_influence_decays() {
        // two times, spatial variance 1, OU only
        let m = build_lds_from_grams(&DMatrix::zeros(1, 1), &one(), &ou(1.0), &[0.0, 1.0, 3.0]).unwrap();
        let site = InformationGaussian {
            precision: DMatrix::identity(3, 3) * 4.0,
            shift: DVector::from_element(3, 4.0),
        };
        let sites = vec![site, InformationGaussian::improper(3), InformationGaussian::improper(3)];
        let post = filter_smooth(&m, &sites).unwrap();
        // y = 1 observed with noise 1/4 at τ=0: mean at τ is e^{-τ} · 1/(1 + 1/4)
        let m0 = 1.0 / 1.25;
        for (i, tau) in [0.0, 1.0, 3.0f64].iter().enumerate() {
            assert_relative_eq!(post.smoothed[i].mean[0], m0 * (-tau).exp(), epsilon = 1e-10);
            let v = 1.0 - (-2.0 * tau).exp() / 1.25;
            assert_relative_eq!(post.smoothed[i].cov[(0, 0)], v, epsilon = 1e-10);
        }
    }

    fn random_site(d: usize, rng: &mut ChaCha8Rng, rank_deficient: bool) -> InformationGaussian {
        let mut lam = DMatrix::zeros(d, d);
        for j in 0..d / 3 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let mut blk = &a * a.transpose();
            if rank_deficient && j % 2 == 0 {
                let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                blk = &v * v.transpose();
            }
            lam.view_mut((3 * j, 3 * j), (3, 3)).copy_from(&blk);
        }
        let mu = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        InformationGaussian {
            shift: &lam * mu,
            precision: lam,
        }
    }

    fn random_problem(seed: u64) -> (CompositePlantKernel, IndexSet, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = Arc::new(
            Topology::new(vec![6.0, 4.0, 3.0], vec![0, 1, 1], vec![0.0, 2.5, 5.0]).unwrap(),
        );
        let h = Hyperparams {
            sigma0_sq: rng.random_range(0.5..2.0),
            sigma_l_sq: rng.random_range(0.1..1.0),
            sigma_s_sq: rng.random_range(0.01..0.1),
            sigma_l_perturb_sq: rng.random_range(0.01..0.2),
            sigma_s_perturb_sq: rng.random_range(0.001..0.02),
            ell_tau: rng.random_range(0.5..4.0),
        };
        let k = CompositePlantKernel::plant(&h, topo.clone()).unwrap();
        let stride = rng.random_range(1.5..3.0);
        let sites = IndexSet::uniform(&topo, stride).unwrap();
        let nt = rng.random_range(1..=6);
        let mut t = 0.0;
        let times = (0..nt)
            .map(|_| {
                t += rng.random_range(0.0..2.0);
                t
            })
            .collect();
        (k, sites, times)
    }

    #[test]
    fn lds_matches_batch_on_random_instances() {
        for seed in 0..50 {
            let (k, sites, times) = random_problem(seed);
            assert!(sites.len() <= 10);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let d = 3 * sites.len();
            let gs: Vec<_> = times.iter().map(|_| random_site(d, &mut rng, seed % 2 == 0)).collect();
            let model = build_lds(&k, &sites, &times, Execution::Sequential).unwrap();
            let post = filter_smooth(&model, &gs).unwrap();
            let batch = batch_equivalent_posterior(&k, &sites, &times, &gs).unwrap();
            for (s, b) in post.smoothed.iter().zip(&batch) {
                let em = (&s.mean - &b.mean).norm() / b.mean.norm().max(1e-12);
                let ec = (&s.cov - &b.cov).norm() / b.cov.norm();
                assert!(em < 1e-6, "seed {seed}: mean rel err {em}");
                assert!(ec < 1e-6, "seed {seed}: cov rel err {ec}");
            }
        }
    }

    #[test]
    fn gaussian_evidence_matches_dense() {
        for seed in 0..10 {
            let (k, sites, times) = random_problem(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(7 + seed);
            let d = 3 * sites.len();
            let gs: Vec<_> = times.iter().map(|_| random_site(d, &mut rng, false)).collect();
            let model = build_lds(&k, &sites, &times, Execution::Sequential).unwrap();
            let ev = kalman_filter(&model, &gs).unwrap().log_evidence_gaussian.unwrap();

            // log N(y; 0, K + R) with y = Λ⁻¹h, R = Λ⁻¹, all dense
            let pts = space_time_points(sites.entries(), &times);
            let kk = kron3_lift(&gram_sym(&k, &pts, Execution::Sequential).unwrap());
            let n = kk.nrows();
            let mut r = DMatrix::zeros(n, n);
            let mut y = DVector::zeros(n);
            for (i, s) in gs.iter().enumerate() {
                let inv = s.precision.clone().try_inverse().unwrap();
                y.rows_mut(i * d, d).copy_from(&(&inv * &s.shift));
                r.view_mut((i * d, i * d), (d, d)).copy_from(&inv);
            }
            let want = GaussianDensity::zero_mean(kk + r).log_pdf(&y).unwrap();
            assert!((ev - want).abs() < 1e-6 * want.abs().max(1.0), "{ev} vs {want}");
        }
    }

    #[test]
    fn batch_without_evidence_is_prior() {
        let (k, sites, times) = random_problem(3);
        let d = 3 * sites.len();
        let gs = vec![InformationGaussian::improper(d); times.len()];
        let b = batch_equivalent_posterior(&k, &sites, &times, &gs).unwrap();
        let pts: Vec<_> = sites.iter().map(|p| (*p, 0.0)).collect();
        let k0 = kron3_lift(&gram_sym(&k, &pts, Execution::Sequential).unwrap());
        for g in b {
            assert!((g.cov - &k0).norm() < 1e-12 * k0.norm());
        }
    }

    #[test]
    fn point_marginal_reads_block() {
        let (k, sites, times) = random_problem(5);
        let model = build_lds(&k, &sites, &times, Execution::Sequential).unwrap();
        let post = filter_smooth(&model, &vec![InformationGaussian::improper(model.dim()); times.len()]).unwrap();
        let (_, c) = post.point_marginal(0, 1);
        let want = k.eval(&sites.entries()[1], 0.0, &sites.entries()[1], 0.0).unwrap();
        assert_relative_eq!(c[(0, 0)], want, epsilon = 1e-10);
        assert_eq!(c[(0, 1)], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn splitting_sites_is_invariant(seed in 0u64..1000, frac in 0.05f64..0.95) {
            let (k, sites, times) = random_problem(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let d = 3 * sites.len();
            let gs: Vec<_> = times.iter().map(|_| random_site(d, &mut rng, true)).collect();
            let model = build_lds(&k, &sites, &times, Execution::Sequential).unwrap();
            let whole = kalman_filter(&model, &gs).unwrap();
            // apply two halves in sequence at each step through a zero-length extra step
            for (i, g) in gs.iter().enumerate() {
                let a = InformationGaussian { precision: &g.precision * frac, shift: &g.shift * frac };
                let b = InformationGaussian { precision: &g.precision * (1.0 - frac), shift: &g.shift * (1.0 - frac) };
                let (p1, _) = information_update(&whole.predictive[i], &a).unwrap();
                let (p2, _) = information_update(&p1, &b).unwrap();
                let f = &whole.filtered[i];
                prop_assert!((&p2.mean - &f.mean).norm() <= 1e-7 * f.mean.norm().max(1.0));
                prop_assert!((&p2.cov - &f.cov).norm() <= 1e-7 * f.cov.norm());
            }
        }

        #[test]
        fn filtered_below_predictive(seed in 0u64..1000) {
            let (k, sites, times) = random_problem(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3 * sites.len();
            let gs: Vec<_> = times.iter().map(|_| random_site(d, &mut rng, true)).collect();
            let model = build_lds(&k, &sites, &times, Execution::Sequential).unwrap();
            let post = filter_smooth(&model, &gs).unwrap();
            for i in 0..times.len() {
                let diff = &post.predictive[i].cov - &post.filtered[i].cov;
                let scale = post.predictive[i].cov.norm();
                prop_assert!(crate::gp_core::eig_range(&diff).0 >= -1e-9 * scale);
                let diff = &post.filtered[i].cov - &post.smoothed[i].cov;
                prop_assert!(crate::gp_core::eig_range(&diff).0 >= -1e-9 * scale);
            }
        }
    }
}
