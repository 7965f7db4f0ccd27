//! Dense Gaussian machinery shared by the rest of the crate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::curve_tree::{IndexSet, PointIndex, Topology};
use crate::error::{Error, Result};
pub use crate::kernels::Hyperparams;
use crate::kernels::{CompositePlantKernel, CurveKernel, BgpKernel, SpaceTimeKernel};
use crate::par::{self, Execution};

const LN_2PI: f64 = 1.8378770664093453;

/// Relative jitter levels tried in order, as multiples of `trace / dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterPolicy {
    pub levels: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            levels: vec![0.0, 1e-12, 1e-10, 1e-8],
        }
    }
}

impl JitterPolicy {
    pub fn none() -> Self {
        JitterPolicy { levels: vec![0.0] }
    }
}

/// Lower Cholesky factor of `m + jitter·I`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero diagonal");
        self.l.tr_solve_lower_triangular(&y).expect("nonzero diagonal")
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero diagonal");
        self.l.tr_solve_lower_triangular(&y).expect("nonzero diagonal")
    }

    /// `L⁻¹ b`
    pub fn half_solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(b).expect("nonzero diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.solve_mat(&DMatrix::identity(self.dim(), self.dim())))
    }
}

/// Cholesky with an escalating diagonal jitter.
pub fn chol_psd(m: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholFactor> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{}x{} not square", n, m.ncols())));
    }
    if n == 0 {
        return Ok(CholFactor {
            l: DMatrix::zeros(0, 0),
            jitter: 0.0,
        });
    }
    let scale = m.trace() / n as f64;
    let mut last = 0.0;
    for &lvl in &policy.levels {
        let eps = lvl * scale.max(0.0);
        if lvl > 0.0 && eps == 0.0 {
            continue;
        }
        last = eps;
        let mut a = symmetrize(m);
        for i in 0..n {
            a[(i, i)] += eps;
        }
        if let Some(c) = a.cholesky() {
            return Ok(CholFactor {
                l: c.unpack(),
                jitter: eps,
            });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of the symmetric part.
pub fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let e = SymmetricEigen::new(symmetrize(m));
    let lo = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// PSD up to `tol` relative to the largest eigenvalue.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let (lo, hi) = eig_range(m);
    lo >= -tol * hi.abs().max(f64::MIN_POSITIVE)
}

/// Clamps negative eigenvalues of the symmetric part to zero.
pub fn project_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let e = SymmetricEigen::new(symmetrize(m));
    if e.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (symmetrize(m), false);
    }
    let lam = e.eigenvalues.map(|v| v.max(0.0));
    let out = &e.eigenvectors * DMatrix::from_diagonal(&lam) * e.eigenvectors.transpose();
    (symmetrize(&out), true)
}

/// `m ⊗ I₃`, point-major.
pub fn kron3_lift(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let c = m.ncols();
    let mut out = DMatrix::zeros(3 * n, 3 * c);
    for j in 0..n {
        for k in 0..c {
            let v = m[(j, k)];
            for d in 0..3 {
                out[(3 * j + d, 3 * k + d)] = v;
            }
        }
    }
    out
}

/// Moment-form Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if mean.len() != cov.nrows() || cov.nrows() != cov.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "mean {} vs cov {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianDensity { mean, cov })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Self {
        GaussianDensity {
            mean: DVector::zeros(cov.nrows()),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let c = chol_psd(&self.cov, &JitterPolicy::default())?;
        let r = c.half_solve_vec(&(x - &self.mean));
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + c.log_det() + r.norm_squared()))
    }

    /// Sub-block over the index range `start..start+len`.
    pub fn block(&self, start: usize, len: usize) -> GaussianDensity {
        GaussianDensity {
            mean: self.mean.rows(start, len).into_owned(),
            cov: self.cov.view((start, start), (len, len)).into_owned(),
        }
    }

    pub fn to_information(&self) -> Result<InformationGaussian> {
        let c = chol_psd(&self.cov, &JitterPolicy::default())?;
        let precision = c.inverse();
        let shift = &precision * &self.mean;
        Ok(InformationGaussian { precision, shift })
    }
}

/// Natural-parameter Gaussian; the precision may be singular, and a zero
/// precision carries no information.
#[derive(Clone, Debug, PartialEq)]
pub struct InformationGaussian {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl InformationGaussian {
    pub fn improper(dim: usize) -> Self {
        InformationGaussian {
            precision: DMatrix::zeros(dim, dim),
            shift: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn is_psd(&self) -> bool {
        is_psd(&self.precision, 1e-8)
    }

    pub fn is_zero(&self) -> bool {
        self.precision.iter().all(|&v| v == 0.0) && self.shift.iter().all(|&v| v == 0.0)
    }

    pub fn to_moments(&self) -> Result<GaussianDensity> {
        let c = chol_psd(&self.precision, &JitterPolicy::none())?;
        Ok(GaussianDensity {
            mean: c.solve_vec(&self.shift),
            cov: c.inverse(),
        })
    }

    pub fn add(&self, other: &InformationGaussian) -> InformationGaussian {
        InformationGaussian {
            precision: &self.precision + &other.precision,
            shift: &self.shift + &other.shift,
        }
    }

    pub fn sub(&self, other: &InformationGaussian) -> InformationGaussian {
        InformationGaussian {
            precision: &self.precision - &other.precision,
            shift: &self.shift - &other.shift,
        }
    }
}

/// Matrix square root `S` with `S Sᵀ = cov`, for drawing samples.
/// Uses a plain Cholesky when possible and a clamped eigendecomposition for
/// singular PSD input.
pub fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Ok(c) = chol_psd(cov, &JitterPolicy::none()) {
        return Ok(c.l);
    }
    let e = SymmetricEigen::new(symmetrize(cov));
    let hi = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lo = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo < -1e-8 * hi.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s))
}

/// `n_draws` zero-mean Gaussian draws with covariance `cov`, as columns.
pub fn sample(cov: &DMatrix<f64>, n_draws: usize, seed: u64) -> Result<DMatrix<f64>> {
    let factor = sampling_factor(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cov.nrows();
    let z = DMatrix::from_fn(dim, n_draws, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(factor * z)
}

/// Conditions a joint Gaussian over `[A; B]` (A first, `n_a` dims) on `B = observed`.
pub fn condition(joint: &GaussianDensity, n_a: usize, observed_b: &DVector<f64>) -> Result<GaussianDensity> {
    let n = joint.dim();
    let n_b = n - n_a;
    if observed_b.len() != n_b {
        return Err(Error::DimensionMismatch(format!(
            "observed {} vs block {}",
            observed_b.len(),
            n_b
        )));
    }
    let k_aa = joint.cov.view((0, 0), (n_a, n_a));
    let k_ab = joint.cov.view((0, n_a), (n_a, n_b)).into_owned();
    let k_bb = joint.cov.view((n_a, n_a), (n_b, n_b)).into_owned();
    let c = chol_psd(&k_bb, &JitterPolicy::default())?;
    let resid = observed_b - joint.mean.rows(n_a, n_b);
    let mean = joint.mean.rows(0, n_a) + &k_ab * c.solve_vec(&resid);
    let cov = k_aa - &k_ab * c.solve_mat(&k_ab.transpose());
    Ok(GaussianDensity {
        mean,
        cov: symmetrize(&cov),
    })
}

/// `(site, time)` pairs in time-major order.
pub fn space_time_points(sites: &[PointIndex], times: &[f64]) -> Vec<(PointIndex, f64)> {
    times
        .iter()
        .flat_map(|&tau| sites.iter().map(move |s| (*s, tau)))
        .collect()
}

/// `log N(obs; 0, (K ⊗ I₃) + σ²I)`; observations ordered time, site, xyz.
pub fn log_marginal_likelihood<K: SpaceTimeKernel + ?Sized>(
    kernel: &K,
    sites: &[PointIndex],
    times: &[f64],
    observations: &DVector<f64>,
    obs_noise_sq: f64,
) -> Result<f64> {
    let pts = space_time_points(sites, times);
    let k = crate::kernels::gram_sym(kernel, &pts, Execution::Sequential)?;
    lml_from_gram(&k, observations, obs_noise_sq)
}

/// Same as [`log_marginal_likelihood`] from a precomputed unlifted Gram.
pub fn lml_from_gram(k: &DMatrix<f64>, observations: &DVector<f64>, obs_noise_sq: f64) -> Result<f64> {
    let n = k.nrows();
    if observations.len() != 3 * n {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for {} space-time points",
            observations.len(),
            n
        )));
    }
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += obs_noise_sq;
    }
    let c = chol_psd(&a, &JitterPolicy::default())?;
    // three i.i.d. coordinate columns
    let y = DMatrix::from_fn(n, 3, |i, d| observations[3 * i + d]);
    let r = c.l.solve_lower_triangular(&y).expect("nonzero diagonal");
    let quad = r.norm_squared();
    Ok(-0.5 * (quad + 3.0 * c.log_det() + 3.0 * n as f64 * LN_2PI))
}

/// One observed tree sequence for training.
#[derive(Clone, Debug)]
pub struct TrainingSequence {
    pub topology: Arc<Topology>,
    pub sites: IndexSet,
    pub times: Vec<f64>,
    /// `3 · |sites| · |times|` values, ordered time, site, xyz.
    pub observations: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub n_restarts: usize,
    pub seed: u64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_evals: usize,
    /// Half-width (log10 units) of the uniform spread of restart points.
    pub restart_spread: f64,
    /// Observation noise as a fraction of the data variance.
    pub noise_fraction: f64,
    /// Parameters that the search may move, in [`Hyperparams::NAMES`] order.
    pub free: [bool; 6],
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_restarts: 5,
            seed: 0,
            initial_step: 0.5,
            min_step: 1e-3,
            max_evals: 500,
            restart_spread: 1.0,
            noise_fraction: 1e-6,
            free: [true; 6],
            exec: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub hyper: Hyperparams,
    pub objective: f64,
    /// `(start, end, objective at end)` per restart.
    pub restarts: Vec<(Hyperparams, Hyperparams, f64)>,
}

/// Unit-variance spatial Grams of one sequence; the plant kernel is linear in
/// the four variance parameters, so training only rescales these.
struct SequenceGrams {
    dot: DMatrix<f64>,
    cubic: DMatrix<f64>,
    times: Vec<f64>,
    obs: DVector<f64>,
}

impl SequenceGrams {
    fn new(seq: &TrainingSequence) -> Result<Self> {
        let m = seq.sites.len();
        if seq.observations.len() != 3 * m * seq.times.len() {
            return Err(Error::DimensionMismatch(format!(
                "sequence has {} observations, expected {}",
                seq.observations.len(),
                3 * m * seq.times.len()
            )));
        }
        let pts: Vec<(PointIndex, f64)> = seq.sites.iter().map(|p| (*p, 0.0)).collect();
        let dot = crate::kernels::gram_sym(
            &BgpKernel::new(CurveKernel::DotProduct { variance: 1.0 }, seq.topology.clone())?,
            &pts,
            Execution::Sequential,
        )?;
        let cubic = crate::kernels::gram_sym(
            &BgpKernel::new(CurveKernel::CubicSpline { variance: 1.0 }, seq.topology.clone())?,
            &pts,
            Execution::Sequential,
        )?;
        Ok(SequenceGrams {
            dot,
            cubic,
            times: seq.times.clone(),
            obs: seq.observations.clone(),
        })
    }

    fn gram(&self, h: &Hyperparams) -> DMatrix<f64> {
        let m = self.dot.nrows();
        let t = self.times.len();
        let stat = &self.dot * h.sigma_l_sq + &self.cubic * h.sigma_s_sq;
        let pert = &self.dot * h.sigma_l_perturb_sq + &self.cubic * h.sigma_s_perturb_sq;
        let mut k = DMatrix::zeros(m * t, m * t);
        for a in 0..t {
            for b in 0..t {
                let kt = (-(self.times[a] - self.times[b]).abs() / h.ell_tau).exp();
                let mut blk = k.view_mut((a * m, b * m), (m, m));
                blk.copy_from(&(&stat + &pert * kt));
                blk.add_scalar_mut(h.sigma0_sq);
            }
        }
        k
    }
}

fn log10_params(h: &Hyperparams) -> [f64; 6] {
    h.to_array().map(f64::log10)
}

fn from_log10(x: &[f64; 6]) -> Hyperparams {
    Hyperparams::from_array(x.map(|v| 10f64.powf(v)))
}

/// Maximises the summed log marginal likelihood by coordinate pattern search
/// in log10-parameter space, with seeded restarts.
pub fn train_hyperparams(
    sequences: &[TrainingSequence],
    init: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if sequences.is_empty() {
        return Err(Error::Optimisation("no training sequences".into()));
    }
    init.validate()?;
    let grams: Vec<SequenceGrams> = sequences.iter().map(SequenceGrams::new).collect::<Result<_>>()?;
    let all: Vec<f64> = grams.iter().flat_map(|g| g.obs.iter().cloned()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let noise = cfg.noise_fraction * var.max(f64::MIN_POSITIVE);

    let objective = |x: &[f64; 6]| -> f64 {
        let h = from_log10(x);
        let mut total = 0.0;
        for g in &grams {
            match lml_from_gram(&g.gram(&h), &g.obs, noise) {
                Ok(v) if v.is_finite() => total += v,
                _ => return f64::NEG_INFINITY,
            }
        }
        total
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = log10_params(init);
    let starts: Vec<[f64; 6]> = (0..cfg.n_restarts.max(1))
        .map(|r| {
            let mut x = x0;
            if r > 0 {
                for (i, xi) in x.iter_mut().enumerate() {
                    if cfg.free[i] {
                        *xi += rng.random_range(-cfg.restart_spread..=cfg.restart_spread);
                    }
                }
            }
            x
        })
        .collect();

    let runs = par::map_slice(cfg.exec, &starts, |x| pattern_search(&objective, *x, cfg));
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, f)) in runs.iter().enumerate() {
        if f.is_finite() && best.is_none_or(|(_, bf)| *f > bf) {
            best = Some((i, *f));
        }
    }
    let (bi, bf) = best.ok_or_else(|| Error::Optimisation("every evaluation failed".into()))?;
    Ok(TrainResult {
        hyper: from_log10(&runs[bi].0),
        objective: bf,
        restarts: starts
            .iter()
            .zip(&runs)
            .map(|(s, (e, f))| (from_log10(s), from_log10(e), *f))
            .collect(),
    })
}

fn pattern_search<F: Fn(&[f64; 6]) -> f64>(f: &F, x0: [f64; 6], cfg: &TrainConfig) -> ([f64; 6], f64) {
    let mut x = x0;
    let mut fx = f(&x);
    let mut evals = 1;
    let mut step = cfg.initial_step;
    while step >= cfg.min_step && evals < cfg.max_evals {
        let mut best: Option<([f64; 6], f64)> = None;
        'coords: for i in 0..6 {
            if !cfg.free[i] {
                continue;
            }
            for dir in [1.0, -1.0] {
                if evals >= cfg.max_evals {
                    break 'coords;
                }
                let mut y = x;
                y[i] += dir * step;
                let fy = f(&y);
                evals += 1;
                if fy > best.map_or(fx, |b| b.1) {
                    best = Some((y, fy));
                }
            }
        }
        match best {
            Some((y, fy)) => {
                x = y;
                fx = fy;
            }
            None => step *= 0.5,
        }
    }
    (x, fx)
}

pub(crate) fn ln_2pi() -> f64 {
    LN_2PI
}

/// Builds the composite plant kernel for a topology.
pub fn plant_kernel(hyper: &Hyperparams, topology: Arc<Topology>) -> Result<CompositePlantKernel> {
    CompositePlantKernel::plant(hyper, topology)
}
