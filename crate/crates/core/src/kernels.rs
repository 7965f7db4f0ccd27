//! Covariance functions over curve trees.
//!
//! [`CurveKernel`] covers the within-curve kernels, [`BgpKernel`] lifts a
//! rooted curve kernel to the whole tree by walking branch points, and
//! [`CompositePlantKernel`] is the spatiotemporal plant prior: a static tree,
//! an OU-perturbed tree and a constant offset.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curve_tree::{PointIndex, Topology};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveKernel {
    /// `σ² t t'`
    DotProduct { variance: f64 },
    /// `σ² (|t - t'| min² / 2 + min³ / 3)`
    CubicSpline { variance: f64 },
    /// `min(t, t')`
    Wiener,
    /// `exp(-|t - t'| / ℓ)`
    OrnsteinUhlenbeck { length: f64 },
    /// `exp(-(t - t')² / 2ℓ²)`
    SquaredExponential { length: f64 },
    /// Constant `σ²`; not rooted.
    Constant { variance: f64 },
    /// Base kernel conditioned on its value at `t = 0`.
    Rooted { base: Box<CurveKernel> },
    Sum { terms: Vec<CurveKernel> },
    Scaled { variance: f64, base: Box<CurveKernel> },
}

impl CurveKernel {
    /// The plant curve covariance: dot product plus cubic spline.
    pub fn plant(sigma_l_sq: f64, sigma_s_sq: f64) -> Self {
        CurveKernel::Sum {
            terms: vec![
                CurveKernel::DotProduct {
                    variance: sigma_l_sq,
                },
                CurveKernel::CubicSpline {
                    variance: sigma_s_sq,
                },
            ],
        }
    }

    /// True when `k(0, t) = k(t, 0) = 0` holds by construction.
    pub fn is_rooted(&self) -> bool {
        match self {
            CurveKernel::DotProduct { .. }
            | CurveKernel::CubicSpline { .. }
            | CurveKernel::Wiener
            | CurveKernel::Rooted { .. } => true,
            CurveKernel::OrnsteinUhlenbeck { .. }
            | CurveKernel::SquaredExponential { .. }
            | CurveKernel::Constant { .. } => false,
            CurveKernel::Sum { terms } => terms.iter().all(|k| k.is_rooted()),
            CurveKernel::Scaled { base, .. } => base.is_rooted(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!(
                "{what} must be positive, got {v}"
            )))
        };
        match self {
            CurveKernel::DotProduct { variance }
            | CurveKernel::CubicSpline { variance }
            | CurveKernel::Constant { variance } => {
                if !(*variance > 0.0) {
                    return bad("variance", *variance);
                }
            }
            CurveKernel::OrnsteinUhlenbeck { length } | CurveKernel::SquaredExponential { length } => {
                if !(*length > 0.0) {
                    return bad("length scale", *length);
                }
            }
            CurveKernel::Wiener => {}
            CurveKernel::Rooted { base } => base.validate()?,
            CurveKernel::Sum { terms } => {
                for k in terms {
                    k.validate()?;
                }
            }
            CurveKernel::Scaled { variance, base } => {
                if !(*variance > 0.0) {
                    return bad("variance", *variance);
                }
                base.validate()?;
            }
        }
        Ok(())
    }

    /// Evaluates the kernel. Rooted variants reject negative inputs.
    pub fn eval(&self, t: f64, t2: f64) -> Result<f64> {
        if self.is_rooted() && (t < 0.0 || t2 < 0.0) {
            return Err(Error::NegativeInput(t, t2));
        }
        self.eval_raw(t, t2)
    }

    fn eval_raw(&self, t: f64, t2: f64) -> Result<f64> {
        Ok(match self {
            CurveKernel::DotProduct { variance } => variance * t * t2,
            CurveKernel::CubicSpline { variance } => {
                let m = t.min(t2);
                variance * ((t - t2).abs() * m * m / 2.0 + m * m * m / 3.0)
            }
            CurveKernel::Wiener => t.min(t2),
            CurveKernel::OrnsteinUhlenbeck { length } => (-(t - t2).abs() / length).exp(),
            CurveKernel::SquaredExponential { length } => {
                let d = t - t2;
                (-d * d / (2.0 * length * length)).exp()
            }
            CurveKernel::Constant { variance } => *variance,
            CurveKernel::Rooted { base } => root_transform_eval(base, t, t2)?,
            CurveKernel::Sum { terms } => {
                let mut s = 0.0;
                for k in terms {
                    s += k.eval_raw(t, t2)?;
                }
                s
            }
            CurveKernel::Scaled { variance, base } => variance * base.eval_raw(t, t2)?,
        })
    }
}

/// `base(t,t') - base(t,0) base(0,0)⁻¹ base(0,t')`.
pub fn root_transform_eval(base: &CurveKernel, t: f64, t2: f64) -> Result<f64> {
    let k00 = base.eval_raw(0.0, 0.0)?;
    if !(k00 > 0.0) {
        return Err(Error::DegenerateKernel(k00));
    }
    Ok(base.eval_raw(t, t2)? - base.eval_raw(t, 0.0)? * base.eval_raw(0.0, t2)? / k00)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemporalKernel {
    /// `exp(-|τ - τ'| / ℓ_τ)`
    OrnsteinUhlenbeck { length: f64 },
}

impl TemporalKernel {
    pub fn eval(&self, tau: f64, tau2: f64) -> f64 {
        match self {
            TemporalKernel::OrnsteinUhlenbeck { length } => (-(tau - tau2).abs() / length).exp(),
        }
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, TemporalKernel::OrnsteinUhlenbeck { .. })
    }
}

/// Rooted recursive branching kernel.
#[derive(Clone, Debug)]
pub struct BgpKernel {
    curve_kernel: CurveKernel,
    topology: Arc<Topology>,
}

impl BgpKernel {
    pub fn new(curve_kernel: CurveKernel, topology: Arc<Topology>) -> Result<Self> {
        curve_kernel.validate()?;
        if !curve_kernel.is_rooted() {
            return Err(Error::InvalidParameter(
                "branching kernels need a rooted curve kernel".into(),
            ));
        }
        topology.validate()?;
        Ok(BgpKernel {
            curve_kernel,
            topology,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn curve_kernel(&self) -> &CurveKernel {
        &self.curve_kernel
    }

    pub fn eval(&self, a: &PointIndex, b: &PointIndex) -> Result<f64> {
        self.topology.check(a)?;
        self.topology.check(b)?;
        let mut acc = 0.0;
        walk_common(&self.topology, *a, *b, |t, t2| {
            acc += self.curve_kernel.eval_raw(t, t2)?;
            Ok(())
        })?;
        Ok(acc)
    }
}

/// Walks the kernel recursion from `(a, b)` down to the sentinel, calling
/// `visit(t, t')` for every same-curve term. The deeper argument is always
/// the one replaced by its branch point; ties descend on the first argument.
#[inline]
fn walk_common<F>(topo: &Topology, a: PointIndex, b: PointIndex, mut visit: F) -> Result<()>
where
    F: FnMut(f64, f64) -> Result<()>,
{
    let (mut a, mut b) = (a, b);
    let mut da = topo.curve_depth(a.curve);
    let mut db = topo.curve_depth(b.curve);
    while a.curve != 0 && b.curve != 0 {
        if da < db {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut da, &mut db);
        }
        if a.curve == b.curve {
            visit(a.t, b.t)?;
        }
        a = topo.branch_of_unchecked(a.curve);
        da -= 1;
    }
    Ok(())
}

/// Temporal BGP: `k_τ(τ, τ') · k_BGP(a, b)`.
pub fn temporal_bgp_eval(
    spatial: &BgpKernel,
    temporal: &TemporalKernel,
    a: &PointIndex,
    tau_a: f64,
    b: &PointIndex,
    tau_b: f64,
) -> Result<f64> {
    Ok(temporal.eval(tau_a, tau_b) * spatial.eval(a, b)?)
}

/// Kernel hyperparameters of the plant prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma0_sq: f64,
    #[serde(rename = "sigmaL_sq")]
    pub sigma_l_sq: f64,
    #[serde(rename = "sigmaS_sq")]
    pub sigma_s_sq: f64,
    #[serde(rename = "sigmaL_perturb_sq")]
    pub sigma_l_perturb_sq: f64,
    #[serde(rename = "sigmaS_perturb_sq")]
    pub sigma_s_perturb_sq: f64,
    pub ell_tau: f64,
}

impl Default for Hyperparams {
    /// Placeholder values at synthetic-scene scale (millimetres, view index
    /// as time). Retrain with `train` for real data.
    fn default() -> Self {
        Hyperparams {
            sigma0_sq: 4.0,
            sigma_l_sq: 0.33,
            sigma_s_sq: 5e-4,
            sigma_l_perturb_sq: 5e-4,
            sigma_s_perturb_sq: 5e-6,
            ell_tau: 4.0,
        }
    }
}

impl Hyperparams {
    pub const NAMES: [&'static str; 6] = [
        "sigma0_sq",
        "sigmaL_sq",
        "sigmaS_sq",
        "sigmaL_perturb_sq",
        "sigmaS_perturb_sq",
        "ell_tau",
    ];

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.sigma0_sq,
            self.sigma_l_sq,
            self.sigma_s_sq,
            self.sigma_l_perturb_sq,
            self.sigma_s_perturb_sq,
            self.ell_tau,
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Hyperparams {
            sigma0_sq: v[0],
            sigma_l_sq: v[1],
            sigma_s_sq: v[2],
            sigma_l_perturb_sq: v[3],
            sigma_s_perturb_sq: v[4],
            ell_tau: v[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// `static(a,b) + k_τ(τa,τb) · perturb(a,b) + σ0²`.
#[derive(Clone, Debug)]
pub struct CompositePlantKernel {
    pub static_bgp: BgpKernel,
    pub perturb_bgp: BgpKernel,
    pub temporal: TemporalKernel,
    pub offset: f64,
}

impl CompositePlantKernel {
    pub fn new(
        static_bgp: BgpKernel,
        perturb_bgp: BgpKernel,
        temporal: TemporalKernel,
        offset: f64,
    ) -> Result<Self> {
        if static_bgp.topology() != perturb_bgp.topology() {
            return Err(Error::InvalidParameter(
                "static and perturbation kernels must share a topology".into(),
            ));
        }
        if !(offset >= 0.0) {
            return Err(Error::InvalidParameter(format!("offset = {offset}")));
        }
        Ok(CompositePlantKernel {
            static_bgp,
            perturb_bgp,
            temporal,
            offset,
        })
    }

    /// The plant prior for a topology.
    pub fn plant(hyper: &Hyperparams, topology: Arc<Topology>) -> Result<Self> {
        hyper.validate()?;
        let s = BgpKernel::new(
            CurveKernel::plant(hyper.sigma_l_sq, hyper.sigma_s_sq),
            topology.clone(),
        )?;
        let p = BgpKernel::new(
            CurveKernel::plant(hyper.sigma_l_perturb_sq, hyper.sigma_s_perturb_sq),
            topology,
        )?;
        CompositePlantKernel::new(
            s,
            p,
            TemporalKernel::OrnsteinUhlenbeck {
                length: hyper.ell_tau,
            },
            hyper.sigma0_sq,
        )
    }

    pub fn topology(&self) -> &Arc<Topology> {
        self.static_bgp.topology()
    }

    /// Spatial parts `(static, perturb)` at one index pair, sharing one walk.
    pub fn spatial_parts(&self, a: &PointIndex, b: &PointIndex) -> Result<(f64, f64)> {
        let topo = self.topology();
        topo.check(a)?;
        topo.check(b)?;
        let (mut s, mut p) = (0.0, 0.0);
        walk_common(topo, *a, *b, |t, t2| {
            s += self.static_bgp.curve_kernel.eval_raw(t, t2)?;
            p += self.perturb_bgp.curve_kernel.eval_raw(t, t2)?;
            Ok(())
        })?;
        Ok((s, p))
    }

    pub fn eval(&self, a: &PointIndex, tau_a: f64, b: &PointIndex, tau_b: f64) -> Result<f64> {
        let (s, p) = self.spatial_parts(a, b)?;
        Ok(s + self.temporal.eval(tau_a, tau_b) * p + self.offset)
    }
}

/// A covariance over `(point index, time)` inputs.
pub trait SpaceTimeKernel: Sync {
    fn eval_st(&self, a: &PointIndex, tau_a: f64, b: &PointIndex, tau_b: f64) -> Result<f64>;
}

impl SpaceTimeKernel for BgpKernel {
    fn eval_st(&self, a: &PointIndex, _: f64, b: &PointIndex, _: f64) -> Result<f64> {
        self.eval(a, b)
    }
}

impl SpaceTimeKernel for CompositePlantKernel {
    fn eval_st(&self, a: &PointIndex, tau_a: f64, b: &PointIndex, tau_b: f64) -> Result<f64> {
        self.eval(a, tau_a, b, tau_b)
    }
}

/// Spatial BGP combined with a temporal factor.
#[derive(Clone, Debug)]
pub struct TemporalBgpKernel {
    pub spatial: BgpKernel,
    pub temporal: TemporalKernel,
}

impl SpaceTimeKernel for TemporalBgpKernel {
    fn eval_st(&self, a: &PointIndex, tau_a: f64, b: &PointIndex, tau_b: f64) -> Result<f64> {
        temporal_bgp_eval(&self.spatial, &self.temporal, a, tau_a, b, tau_b)
    }
}

/// Dense Gram matrix `K[j,k] = kernel(rows[j], cols[k])`, assembled row-parallel.
pub fn gram<K: SpaceTimeKernel + ?Sized>(
    kernel: &K,
    rows: &[(PointIndex, f64)],
    cols: &[(PointIndex, f64)],
    exec: Execution,
) -> Result<DMatrix<f64>> {
    let row_vals: Vec<Result<Vec<f64>>> = par::map_slice(exec, rows, |(a, ta)| {
        cols.iter()
            .map(|(b, tb)| kernel.eval_st(a, *ta, b, *tb))
            .collect()
    });
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    for (j, r) in row_vals.into_iter().enumerate() {
        for (k, v) in r?.into_iter().enumerate() {
            m[(j, k)] = v;
        }
    }
    Ok(m)
}

/// Symmetric Gram over one list; evaluates the upper triangle only.
pub fn gram_sym<K: SpaceTimeKernel + ?Sized>(
    kernel: &K,
    points: &[(PointIndex, f64)],
    exec: Execution,
) -> Result<DMatrix<f64>> {
    let n = points.len();
    let row_vals: Vec<Result<Vec<f64>>> = par::map_indexed(exec, n, |j| {
        let (a, ta) = &points[j];
        points[j..]
            .iter()
            .map(|(b, tb)| kernel.eval_st(a, *ta, b, *tb))
            .collect()
    });
    let mut m = DMatrix::zeros(n, n);
    for (j, r) in row_vals.into_iter().enumerate() {
        for (off, v) in r?.into_iter().enumerate() {
            m[(j, j + off)] = v;
            m[(j + off, j)] = v;
        }
    }
    Ok(m)
}

/// Spatial Gram pieces `(static, perturb)` for one list of sites.
pub(crate) fn plant_spatial_grams(
    kernel: &CompositePlantKernel,
    sites: &[PointIndex],
    exec: Execution,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sites.len();
    let rows: Vec<Result<Vec<(f64, f64)>>> = par::map_indexed(exec, n, |j| {
        sites[j..]
            .iter()
            .map(|b| kernel.spatial_parts(&sites[j], b))
            .collect()
    });
    let mut s = DMatrix::zeros(n, n);
    let mut p = DMatrix::zeros(n, n);
    for (j, r) in rows.into_iter().enumerate() {
        for (off, (vs, vp)) in r?.into_iter().enumerate() {
            let k = j + off;
            s[(j, k)] = vs;
            s[(k, j)] = vs;
            p[(j, k)] = vp;
            p[(k, j)] = vp;
        }
    }
    Ok((s, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn wiener_fixture() -> BgpKernel {
        let topo = Topology::new(vec![2.0, 1.0], vec![0, 1], vec![0.0, 1.0]).unwrap();
        BgpKernel::new(CurveKernel::Wiener, Arc::new(topo)).unwrap()
    }

    #[test]
    fn curve_kernel_examples() {
        assert_eq!(CurveKernel::Wiener.eval(1.5, 2.0).unwrap(), 1.5);
        let dp = CurveKernel::DotProduct { variance: 1.0 };
        assert_eq!(dp.eval(2.0, 3.0).unwrap(), 6.0);
        let plant = CurveKernel::plant(1.0, 1.0);
        assert_relative_eq!(plant.eval(1.0, 1.0).unwrap(), 4.0 / 3.0, epsilon = 1e-15);
        assert!(CurveKernel::Wiener.eval(-1.0, 1.0).is_err());
        // non-rooted kernels accept any real input
        let ou = CurveKernel::OrnsteinUhlenbeck { length: 2.0 };
        assert_relative_eq!(ou.eval(-1.0, 1.0).unwrap(), (-1.0f64).exp());
    }

    #[test]
    fn root_transform_examples() {
        let c = CurveKernel::Constant { variance: 2.5 };
        assert_eq!(root_transform_eval(&c, 0.3, 4.0).unwrap(), 0.0);
        let se = CurveKernel::SquaredExponential { length: 1.0 };
        assert_relative_eq!(
            root_transform_eval(&se, 1.0, 1.0).unwrap(),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            root_transform_eval(&CurveKernel::OrnsteinUhlenbeck { length: 0.7 }, 0.0, 5.0).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert!(matches!(
            root_transform_eval(&CurveKernel::Wiener, 1.0, 1.0),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn bgp_hand_expansion() {
        let k = wiener_fixture();
        let v = k.eval(&PointIndex::new(2, 0.5), &PointIndex::new(2, 0.5)).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        let v0 = k.eval(&PointIndex::new(2, 0.0), &PointIndex::new(2, 0.0)).unwrap();
        assert!((v0 - 1.0).abs() < 1e-12);
        let vb = k.eval(&PointIndex::new(1, 1.0), &PointIndex::new(1, 1.0)).unwrap();
        assert_eq!(v0, vb);
        assert_eq!(k.eval(&PointIndex::NONE, &PointIndex::new(2, 0.5)).unwrap(), 0.0);
        assert!(k.eval(&PointIndex::new(2, 3.0), &PointIndex::NONE).is_err());
    }

    #[test]
    fn bgp_rejects_unrooted_curve_kernel() {
        let topo = Arc::new(Topology::single(1.0).unwrap());
        assert!(BgpKernel::new(CurveKernel::SquaredExponential { length: 1.0 }, topo.clone()).is_err());
        let rooted = CurveKernel::Rooted {
            base: Box::new(CurveKernel::SquaredExponential { length: 1.0 }),
        };
        assert!(BgpKernel::new(rooted, topo).is_ok());
    }

    #[test]
    fn temporal_examples() {
        let k = wiener_fixture();
        let ou = TemporalKernel::OrnsteinUhlenbeck { length: 2.0 };
        let a = PointIndex::new(2, 0.5);
        let b = PointIndex::new(1, 1.5);
        let base = k.eval(&a, &b).unwrap();
        assert_eq!(temporal_bgp_eval(&k, &ou, &a, 3.0, &b, 3.0).unwrap(), base);
        assert_relative_eq!(
            temporal_bgp_eval(&k, &ou, &a, 1.0, &b, 3.0).unwrap(),
            0.36787944117144233 * base,
            epsilon = 1e-15
        );
        assert_eq!(temporal_bgp_eval(&k, &ou, &PointIndex::NONE, 0.0, &b, 9.0).unwrap(), 0.0);
    }

    #[test]
    fn composite_examples() {
        let topo = Arc::new(Topology::new(vec![3.0, 2.0], vec![0, 1], vec![0.0, 2.0]).unwrap());
        let h = Hyperparams {
            sigma0_sq: 0.5,
            sigma_l_sq: 1.0,
            sigma_s_sq: 0.2,
            sigma_l_perturb_sq: 0.3,
            sigma_s_perturb_sq: 0.1,
            ell_tau: 2.0,
        };
        let k = CompositePlantKernel::plant(&h, topo).unwrap();
        let root = PointIndex::new(1, 0.0);
        assert_eq!(k.eval(&root, 4.0, &root, 4.0).unwrap(), 0.5);
        let a = PointIndex::new(2, 1.0);
        let b = PointIndex::new(1, 2.5);
        let (s, p) = k.spatial_parts(&a, &b).unwrap();
        let tau = (-1.0f64 / 2.0).exp();
        assert_relative_eq!(k.eval(&a, 0.0, &b, 1.0).unwrap(), s + tau * p + 0.5, epsilon = 1e-14);
        let far = k.eval(&a, 0.0, &b, 1e4).unwrap();
        assert_relative_eq!(far, s + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gram_examples() {
        let topo = Arc::new(Topology::single(2.0).unwrap());
        let k = BgpKernel::new(CurveKernel::Wiener, topo).unwrap();
        let one = [(PointIndex::new(1, 1.0), 0.0)];
        let g = gram(&k, &one, &one, Execution::Sequential).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        let pts: Vec<_> = [0.2, 0.9, 1.7]
            .iter()
            .map(|&t| (PointIndex::new(1, t), 0.0))
            .collect();
        let g = gram(&k, &pts, &pts, Execution::Parallel).unwrap();
        assert_eq!(g, g.transpose());
        assert_eq!(g, gram_sym(&k, &pts, Execution::Sequential).unwrap());
    }
}
