//! Expectation propagation over per-point, per-view sites.
//!
//! Each pass updates every site independently from the current marginals,
//! then one Kalman filter and smoother pass rebuilds the marginals.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curve_tree::{IndexSet, Topology};
use crate::error::{Error, Result};
use crate::gp_core::{GaussianDensity, InformationGaussian};
use crate::lds::{filter_smooth, point_block, ChainPosterior, LdsModel};
use crate::par::{self, Execution};
use crate::rng::stream_rng;
use crate::scene::Scene;
use crate::sequence::tree_polylines;

const LN_2PI: f64 = 1.8378770664093453;

/// Likelihood of the observations in each view as a function of tree points.
pub trait PointLikelihood: Sync {
    fn n_views(&self) -> usize;

    /// Log-likelihood contribution of site `point` placed at `x` in `view`.
    fn point_log_likelihood(&self, view: usize, point: usize, x: &Vector3<f64>) -> Result<f64>;

    /// Natural parameters `(Λ, h)` when the point likelihood is exactly Gaussian.
    fn gaussian_form(&self, _view: usize, _point: usize) -> Option<(Matrix3<f64>, Vector3<f64>)> {
        None
    }

    /// Log-likelihood of a whole tree in one view.
    fn view_log_likelihood(
        &self,
        view: usize,
        topo: &Topology,
        sites: &IndexSet,
        positions: &[Vector3<f64>],
    ) -> Result<f64>;
}

impl PointLikelihood for Scene {
    fn n_views(&self) -> usize {
        Scene::n_views(self)
    }

    fn point_log_likelihood(&self, view: usize, _point: usize, x: &Vector3<f64>) -> Result<f64> {
        self.point_delta(view, x)
    }

    fn view_log_likelihood(
        &self,
        view: usize,
        topo: &Topology,
        sites: &IndexSet,
        positions: &[Vector3<f64>],
    ) -> Result<f64> {
        Scene::view_log_likelihood(self, view, &tree_polylines(topo, sites, positions))
    }
}

/// Per-point Gaussian likelihoods `N(y; z, Λ⁻¹)` given in natural form.
/// Rank-deficient entries are unnormalized.
#[derive(Clone, Debug)]
pub struct GaussianStub {
    pub n_points: usize,
    /// View-major, `entries[view * n_points + point]`.
    pub entries: Vec<PointSite>,
}

impl GaussianStub {
    pub fn new(n_views: usize, n_points: usize, entries: Vec<PointSite>) -> Result<Self> {
        if entries.len() != n_views * n_points {
            return Err(Error::DimensionMismatch(format!(
                "{} stub entries for {n_views} views x {n_points} points",
                entries.len()
            )));
        }
        Ok(GaussianStub { n_points, entries })
    }

    fn entry(&self, view: usize, point: usize) -> &PointSite {
        &self.entries[view * self.n_points + point]
    }
}

impl PointLikelihood for GaussianStub {
    fn n_views(&self) -> usize {
        self.entries.len() / self.n_points.max(1)
    }

    fn point_log_likelihood(&self, view: usize, point: usize, x: &Vector3<f64>) -> Result<f64> {
        let s = self.entry(view, point);
        let mut v = -0.5 * x.dot(&(s.precision * x)) + s.shift.dot(x);
        if let Some(c) = s.precision.cholesky() {
            let y = c.solve(&s.shift);
            let log_det = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            v += -0.5 * s.shift.dot(&y) + 0.5 * log_det - 1.5 * LN_2PI;
        }
        Ok(v)
    }

    fn gaussian_form(&self, view: usize, point: usize) -> Option<(Matrix3<f64>, Vector3<f64>)> {
        let s = self.entry(view, point);
        Some((s.precision, s.shift))
    }

    fn view_log_likelihood(&self, view: usize, _: &Topology, _: &IndexSet, positions: &[Vector3<f64>]) -> Result<f64> {
        positions
            .iter()
            .enumerate()
            .map(|(j, x)| self.point_log_likelihood(view, j, x))
            .sum()
    }
}

/// One 3-D site in natural parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSite {
    pub precision: Matrix3<f64>,
    pub shift: Vector3<f64>,
}

impl PointSite {
    pub fn zero() -> Self {
        PointSite {
            precision: Matrix3::zeros(),
            shift: Vector3::zeros(),
        }
    }

    pub fn from_moments(mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<Self> {
        let precision = cov
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?
            .inverse();
        let precision = sym3(&precision);
        Ok(PointSite {
            shift: precision * mean,
            precision,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.precision.iter().all(|&v| v == 0.0) && self.shift.iter().all(|&v| v == 0.0)
    }
}

fn sym3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// All sites of a model, indexed by time and point.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteApprox {
    pub n_times: usize,
    pub n_points: usize,
    entries: Vec<PointSite>,
}

impl SiteApprox {
    pub fn zeros(n_times: usize, n_points: usize) -> Self {
        SiteApprox {
            n_times,
            n_points,
            entries: vec![PointSite::zero(); n_times * n_points],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> &PointSite {
        &self.entries[i * self.n_points + j]
    }

    pub fn set(&mut self, i: usize, j: usize, site: PointSite) {
        self.entries[i * self.n_points + j] = site;
    }

    /// Keeps the listed points, in the given order.
    pub fn select_points(&self, keep: &[usize]) -> SiteApprox {
        let mut out = SiteApprox::zeros(self.n_times, keep.len());
        for i in 0..self.n_times {
            for (k, &j) in keep.iter().enumerate() {
                out.set(i, k, *self.get(i, j));
            }
        }
        out
    }

    /// Block-diagonal site per time step.
    pub fn time_sites(&self) -> Vec<InformationGaussian> {
        let d = 3 * self.n_points;
        (0..self.n_times)
            .map(|i| {
                let mut lam = DMatrix::zeros(d, d);
                let mut h = DVector::zeros(d);
                for j in 0..self.n_points {
                    let s = self.get(i, j);
                    lam.fixed_view_mut::<3, 3>(3 * j, 3 * j).copy_from(&s.precision);
                    h.fixed_rows_mut::<3>(3 * j).copy_from(&s.shift);
                }
                InformationGaussian { precision: lam, shift: h }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMethod {
    /// Closed form when the likelihood is Gaussian, importance sampling otherwise.
    Auto,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    pub n_samples: usize,
    pub damping: f64,
    pub min_ess: f64,
    pub n_iterations: usize,
    pub variance_cap_factor: f64,
    /// Sampling tolerance, in standard errors, below which a tilted variance
    /// does not count as narrower than the cavity.
    pub noise_floor: f64,
    pub seed: u64,
    /// Early stop when the largest relative site change falls below this.
    pub tolerance: f64,
    /// Proposal refits after the cavity proposal.
    pub max_refits: usize,
    /// Covariance inflation of refitted proposals.
    pub proposal_inflation: f64,
    pub moments: MomentMethod,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            n_samples: 512,
            damping: 0.8,
            min_ess: 32.0,
            n_iterations: 3,
            variance_cap_factor: 25.0,
            noise_floor: 2.0,
            seed: 0,
            tolerance: 1e-4,
            max_refits: 8,
            proposal_inflation: 1.2,
            moments: MomentMethod::Auto,
            exec: Execution::Parallel,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need n_samples > 0 and damping in (0, 1], got {} and {}",
                self.n_samples, self.damping
            )));
        }
        if !(self.min_ess > 0.0) || !(self.variance_cap_factor > 0.0) || !(self.proposal_inflation > 0.0) {
            return Err(Error::InvalidParameter("EP settings must be positive".into()));
        }
        Ok(())
    }
}

/// Cavity in natural parameters plus a proper moment form for sampling.
#[derive(Clone, Debug)]
pub struct Cavity {
    pub site: PointSite,
    /// Moments used as the sampling base; regularized if the cavity is
    /// rank-deficient.
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub regularized: bool,
}

/// `q / site` in natural parameters. `prior_cov` regularizes null directions
/// of a rank-deficient cavity for sampling.
pub fn cavity(q_mean: &Vector3<f64>, q_cov: &Matrix3<f64>, site: &PointSite, prior_cov: &Matrix3<f64>) -> Result<Cavity> {
    let q = PointSite::from_moments(q_mean, q_cov)?;
    let lam = sym3(&(q.precision - site.precision));
    let h = q.shift - site.shift;
    let e = SymmetricEigen::new(lam);
    let hi = e.eigenvalues.max().max(0.0);
    if e.eigenvalues.min() < -1e-8 * hi.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let null: Vec<usize> = (0..3).filter(|&k| e.eigenvalues[k] <= 1e-10 * hi).collect();
    let (lam_s, h_s) = if null.is_empty() {
        (lam, h)
    } else {
        let prior = PointSite::from_moments(&Vector3::zeros(), prior_cov)?;
        let mut p = Matrix3::zeros();
        for &k in &null {
            let u = e.eigenvectors.column(k);
            p += u * u.transpose();
        }
        let mut lam_s = Matrix3::zeros();
        for k in 0..3 {
            let u = e.eigenvectors.column(k);
            lam_s += u * u.transpose() * e.eigenvalues[k].max(0.0);
        }
        (sym3(&(lam_s + p * prior.precision * p)), h)
    };
    let c = lam_s.cholesky().ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let cov = sym3(&c.inverse());
    Ok(Cavity {
        site: PointSite { precision: lam, shift: h },
        mean: cov * h_s,
        cov,
        regularized: !null.is_empty(),
    })
}

#[derive(Clone, Debug)]
pub struct Tilted {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub ess: f64,
    /// Proposal refits used.
    pub refits: usize,
}

fn log_normal3(x: &Vector3<f64>, mean: &Vector3<f64>, chol_l: &Matrix3<f64>) -> f64 {
    let r = chol_l.solve_lower_triangular(&(x - mean)).unwrap_or_else(Vector3::zeros);
    let log_det: f64 = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (3.0 * LN_2PI + log_det + r.norm_squared())
}

fn weighted_moments(xs: &[Vector3<f64>], logw: &[f64]) -> Option<(Vector3<f64>, Matrix3<f64>, f64)> {
    let m = logw.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let w: Vec<f64> = logw.iter().map(|&v| if v.is_finite() { (v - m).exp() } else { 0.0 }).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let mean = xs.iter().zip(&w).fold(Vector3::zeros(), |a, (x, wk)| a + x * *wk) / sw;
    let cov = xs.iter().zip(&w).fold(Matrix3::zeros(), |a, (x, wk)| {
        let d = x - mean;
        a + d * d.transpose() * *wk
    }) / sw;
    Some((mean, sym3(&cov), sw * sw / sw2))
}

/// Moments of `cavity(x) · exp(loglik(x))` by importance sampling. Starts from
/// the cavity and refits an inflated Gaussian proposal while the effective
/// sample size stays below `cfg.min_ess`.
pub fn tilted_moments<R: Rng, F: Fn(&Vector3<f64>) -> Result<f64>>(
    cav_mean: &Vector3<f64>,
    cav_cov: &Matrix3<f64>,
    loglik: F,
    cfg: &EpConfig,
    rng: &mut R,
) -> Result<Tilted> {
    let cav_l = cav_cov
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?
        .l();
    let mut prop_mean = *cav_mean;
    let mut prop_l = cav_l;
    let mut last = None;
    for round in 0..=cfg.max_refits {
        let mut xs = Vec::with_capacity(cfg.n_samples);
        let mut logw = Vec::with_capacity(cfg.n_samples);
        for _ in 0..cfg.n_samples {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let x = prop_mean + prop_l * z;
            let mut lw = loglik(&x)?;
            if round > 0 {
                lw += log_normal3(&x, cav_mean, &cav_l) - log_normal3(&x, &prop_mean, &prop_l);
            }
            xs.push(x);
            logw.push(lw);
        }
        if round == 0 && logw.iter().all(|&v| v == logw[0] && v.is_finite()) {
            // constant likelihood: the tilted distribution is the cavity
            return Ok(Tilted {
                mean: *cav_mean,
                cov: *cav_cov,
                ess: cfg.n_samples as f64,
                refits: 0,
            });
        }
        let (mean, cov, ess) = weighted_moments(&xs, &logw)
            .ok_or_else(|| Error::Sampling("all importance weights vanish".into()))?;
        let t = Tilted {
            mean,
            cov,
            ess,
            refits: round,
        };
        if ess >= cfg.min_ess || round == cfg.max_refits {
            last = Some(t);
            break;
        }
        // refit on tempered weights so the fit is supported by many samples
        let n = xs.len() as f64;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let beta = 0.5 * (lo + hi);
            let tempered: Vec<f64> = logw.iter().map(|v| v * beta).collect();
            match weighted_moments(&xs, &tempered) {
                Some((_, _, e)) if e >= (0.1 * n).max(cfg.min_ess) => lo = beta,
                _ => hi = beta,
            }
        }
        let tempered: Vec<f64> = logw.iter().map(|v| v * lo).collect();
        let (tm, tc, _) = weighted_moments(&xs, &tempered).unwrap_or((mean, cov, ess));
        let next = tc * cfg.proposal_inflation + cav_cov * 1e-6;
        prop_mean = tm;
        prop_l = match next.cholesky() {
            Some(c) => c.l(),
            None => cav_l * 0.1,
        };
        last = Some(t);
    }
    let t = last.expect("at least one round");
    if t.ess < cfg.min_ess {
        return Err(Error::Sampling(format!(
            "effective sample size {:.1} below {} after {} refits",
            t.ess, cfg.min_ess, t.refits
        )));
    }
    Ok(t)
}

/// Damped site step toward `tilted / cavity`, computed in cavity-whitened
/// coordinates. Directions where the tilted variance is not below the
/// cavity's by more than the sampling tolerance for `ess` carry no site
/// information. Returns the new site and whether any direction was dropped.
pub fn site_update(
    cav: &Cavity,
    tilted_mean: &Vector3<f64>,
    tilted_cov: &Matrix3<f64>,
    ess: f64,
    old: &PointSite,
    cfg: &EpConfig,
) -> Result<(PointSite, bool)> {
    let l = cav
        .cov
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?
        .l();
    let linv = l.try_inverse().ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let w = sym3(&(linv * tilted_cov * linv.transpose()));
    let delta = linv * (tilted_mean - cav.mean);
    let tol = if ess.is_finite() { cfg.noise_floor * (2.0 / ess).sqrt() } else { 0.0 };
    let e = SymmetricEigen::new(w);
    let mut lam_w = Matrix3::zeros();
    let mut h_w = Vector3::zeros();
    let mut dropped = false;
    for k in 0..3 {
        let u = e.eigenvectors.column(k).into_owned();
        let v = e.eigenvalues[k].clamp(1e-10, cfg.variance_cap_factor);
        if v < 1.0 - tol {
            lam_w += u * u.transpose() * (1.0 / v - 1.0);
            h_w += u * (u.dot(&delta) / v);
        } else {
            dropped = true;
        }
    }
    let step_lam = sym3(&(linv.transpose() * lam_w * linv));
    let step_h = step_lam * cav.mean + linv.transpose() * h_w;

    let a = cfg.damping;
    let lam = sym3(&((1.0 - a) * old.precision + a * step_lam));
    let h = (1.0 - a) * old.shift + a * step_h;
    let (site, projected) = project_site(&PointSite { precision: lam, shift: h });
    Ok((site, dropped || projected))
}

/// Clamps negative precision eigenvalues to zero and removes the shift
/// along the clamped directions.
pub fn project_site(site: &PointSite) -> (PointSite, bool) {
    let e = SymmetricEigen::new(sym3(&site.precision));
    if e.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (*site, false);
    }
    let mut lam = Matrix3::zeros();
    let mut h = site.shift;
    for k in 0..3 {
        let u = e.eigenvectors.column(k).into_owned();
        if e.eigenvalues[k] < 0.0 {
            h -= u * u.dot(&h);
        } else {
            lam += u * u.transpose() * e.eigenvalues[k];
        }
    }
    (PointSite { precision: sym3(&lam), shift: h }, true)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PassDiagnostics {
    pub pass: usize,
    pub max_change: f64,
    pub updated: usize,
    pub skipped: usize,
    pub projected: usize,
    pub refitted: usize,
}

#[derive(Clone, Debug)]
pub struct PosteriorApprox {
    pub chain: ChainPosterior,
    pub sites: SiteApprox,
    pub diagnostics: Vec<PassDiagnostics>,
    /// Relative change of each site on the last pass, time-major.
    pub update_norms: Vec<f64>,
}

impl PosteriorApprox {
    pub fn n_times(&self) -> usize {
        self.chain.smoothed.len()
    }

    pub fn marginal(&self, i: usize) -> &GaussianDensity {
        &self.chain.smoothed[i]
    }

    pub fn point(&self, i: usize, j: usize) -> (Vector3<f64>, Matrix3<f64>) {
        point_block(&self.chain.smoothed[i], j)
    }

    pub fn mean_positions(&self, i: usize) -> Vec<Vector3<f64>> {
        let m = &self.chain.smoothed[i].mean;
        (0..m.len() / 3)
            .map(|j| Vector3::new(m[3 * j], m[3 * j + 1], m[3 * j + 2]))
            .collect()
    }
}

/// Kalman filter and smoother under the given sites.
pub fn propagate(model: &LdsModel, sites: SiteApprox) -> Result<PosteriorApprox> {
    let chain = filter_smooth(model, &sites.time_sites())?;
    Ok(PosteriorApprox {
        chain,
        sites,
        diagnostics: Vec::new(),
        update_norms: Vec::new(),
    })
}

/// Prior 3×3 covariance of site `j` at any time.
pub fn prior_point_cov(model: &LdsModel, j: usize) -> Matrix3<f64> {
    let d = model.dim();
    let mut c = Matrix3::zeros();
    for a in 0..model.components {
        for b in 0..model.components {
            c += model.initial.cov.fixed_view::<3, 3>(a * d + 3 * j, b * d + 3 * j);
        }
    }
    c
}

fn relative_change(old: &PointSite, new: &PointSite) -> f64 {
    let rel = |d: f64, a: f64, b: f64| {
        let s = a.max(b);
        if s == 0.0 {
            0.0
        } else {
            d / s
        }
    };
    let lc = rel(
        (new.precision - old.precision).norm(),
        new.precision.norm(),
        old.precision.norm(),
    );
    let hc = rel((new.shift - old.shift).norm(), new.shift.norm(), old.shift.norm());
    lc.max(hc)
}

enum SiteOutcome {
    Frozen,
    Updated { site: PointSite, projected: bool, refits: usize },
    Skipped,
}

fn update_one<L: PointLikelihood + ?Sized>(
    lik: &L,
    post: &PosteriorApprox,
    prior_cov: &Matrix3<f64>,
    i: usize,
    j: usize,
    cfg: &EpConfig,
    pass: usize,
) -> Result<(PointSite, bool, usize)> {
    let (qm, qc) = post.point(i, j);
    let old = post.sites.get(i, j);
    let cav = cavity(&qm, &qc, old, prior_cov)?;
    let exact = match cfg.moments {
        MomentMethod::Auto => lik.gaussian_form(i, j),
        MomentMethod::MonteCarlo => None,
    };
    let (tm, tc, ess, refits) = match exact {
        Some((lam, h)) => {
            let base = PointSite::from_moments(&cav.mean, &cav.cov)?;
            let t = PointSite {
                precision: base.precision + lam,
                shift: base.shift + h,
            };
            let c = t
                .precision
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
            let cov = sym3(&c.inverse());
            (cov * t.shift, cov, f64::INFINITY, 0)
        }
        None => {
            let mut rng = stream_rng(cfg.seed, &[i as u64, j as u64, pass as u64]);
            let t = tilted_moments(&cav.mean, &cav.cov, |x| lik.point_log_likelihood(i, j, x), cfg, &mut rng)?;
            (t.mean, t.cov, t.ess, t.refits)
        }
    };
    let (site, projected) = site_update(&cav, &tm, &tc, ess, old, cfg)?;
    Ok((site, projected, refits))
}

/// One parallel EP pass over all non-frozen sites followed by a Kalman
/// filter and smoother pass.
pub fn ep_pass<L: PointLikelihood + ?Sized>(
    model: &LdsModel,
    lik: &L,
    post: &PosteriorApprox,
    cfg: &EpConfig,
    frozen: &(dyn Fn(usize, usize) -> bool + Sync),
    pass: usize,
) -> Result<PosteriorApprox> {
    let t = post.sites.n_times;
    let m = post.sites.n_points;
    if t != model.n_times() || m != model.site_count || lik.n_views() != t {
        return Err(Error::DimensionMismatch(format!(
            "sites {t}x{m}, model {}x{}, likelihood {} views",
            model.n_times(),
            model.site_count,
            lik.n_views()
        )));
    }
    let prior_covs: Vec<Matrix3<f64>> = (0..m).map(|j| prior_point_cov(model, j)).collect();
    let outcomes = par::map_indexed(cfg.exec, t * m, |k| {
        let (i, j) = (k / m, k % m);
        if frozen(i, j) {
            return SiteOutcome::Frozen;
        }
        match update_one(lik, post, &prior_covs[j], i, j, cfg, pass) {
            Ok((site, projected, refits)) => SiteOutcome::Updated {
                site,
                projected,
                refits,
            },
            Err(_) => SiteOutcome::Skipped,
        }
    });
    let mut sites = post.sites.clone();
    let mut diag = PassDiagnostics {
        pass,
        ..Default::default()
    };
    let mut norms = vec![0.0; t * m];
    for (k, o) in outcomes.into_iter().enumerate() {
        let (i, j) = (k / m, k % m);
        match o {
            SiteOutcome::Frozen => {}
            SiteOutcome::Skipped => diag.skipped += 1,
            SiteOutcome::Updated {
                site,
                projected,
                refits,
            } => {
                norms[k] = relative_change(post.sites.get(i, j), &site);
                diag.max_change = diag.max_change.max(norms[k]);
                diag.updated += 1;
                diag.projected += projected as usize;
                diag.refitted += (refits > 0) as usize;
                sites.set(i, j, site);
            }
        }
    }
    let mut out = propagate(model, sites)?;
    out.diagnostics = post.diagnostics.clone();
    out.diagnostics.push(diag);
    out.update_norms = norms;
    Ok(out)
}

/// Runs up to `cfg.n_iterations` passes from `init_sites`, stopping early
/// once the largest relative site change is below `cfg.tolerance`. Sites of
/// `frozen_first_pass` views are held fixed on the first pass.
pub fn run_ep<L: PointLikelihood + ?Sized>(
    model: &LdsModel,
    lik: &L,
    init_sites: SiteApprox,
    cfg: &EpConfig,
    frozen_first_pass: &[usize],
) -> Result<PosteriorApprox> {
    cfg.validate()?;
    let post = propagate(model, init_sites)?;
    continue_ep(model, lik, post, cfg, frozen_first_pass)
}

/// [`run_ep`] starting from an existing posterior.
pub fn continue_ep<L: PointLikelihood + ?Sized>(
    model: &LdsModel,
    lik: &L,
    mut post: PosteriorApprox,
    cfg: &EpConfig,
    frozen_first_pass: &[usize],
) -> Result<PosteriorApprox> {
    cfg.validate()?;
    for pass in 0..cfg.n_iterations {
        let frozen = |i: usize, _: usize| pass == 0 && frozen_first_pass.contains(&i);
        post = ep_pass(model, lik, &post, cfg, &frozen, pass)?;
        if post.diagnostics.last().is_some_and(|d| d.max_change < cfg.tolerance) {
            break;
        }
    }
    Ok(post)
}

/// Pass index offset for sweep steps, keeping their random streams apart
/// from those of regular passes.
pub const SWEEP_PASS_OFFSET: usize = 1 << 20;

/// One EP pass per entry of `steps`, each updating only the listed views
/// (minus the sites `hold` keeps), with a filter and smoother pass between
/// steps.
pub fn sweep_views<L: PointLikelihood + ?Sized>(
    model: &LdsModel,
    lik: &L,
    mut post: PosteriorApprox,
    cfg: &EpConfig,
    steps: &[Vec<usize>],
    hold: &(dyn Fn(usize, usize) -> bool + Sync),
) -> Result<PosteriorApprox> {
    cfg.validate()?;
    for (k, views) in steps.iter().enumerate() {
        let frozen = |i: usize, j: usize| !views.contains(&i) || hold(i, j);
        post = ep_pass(model, lik, &post, cfg, &frozen, SWEEP_PASS_OFFSET + k)?;
    }
    Ok(post)
}
