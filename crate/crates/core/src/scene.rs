//! Cameras, silhouette rasterization and the calibrated pixel likelihood.
//!
//! Pixel `(u, v)` has its center at integer coordinates `(u, v)`; images are
//! stored row-major.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curve_tree::{IndexSet, Topology};
use crate::error::{Error, Result};
use crate::gp_core::{sample, space_time_points};
use crate::kernels::{gram_sym, CompositePlantKernel, Hyperparams};
use crate::par::Execution;
use crate::rng::{stream_rng, stream_seed};
use crate::sequence::TreeSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub p: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(p: Matrix3x4<f64>, width: usize, height: usize) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("camera matrix has non-finite entries".into()));
        }
        let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
        let scale = m.norm().max(f64::MIN_POSITIVE);
        if m.determinant().abs() <= 1e-12 * scale * scale * scale {
            return Err(Error::InvalidParameter("camera matrix has a singular 3x3 block".into()));
        }
        Ok(Camera { p, width, height })
    }

    /// `[I | 0]`
    pub fn canonical(width: usize, height: usize) -> Self {
        Camera {
            p: Matrix3x4::identity(),
            width,
            height,
        }
    }

    /// Pinhole camera at `center` looking at `target`, image `y` pointing
    /// away from `up`.
    pub fn look_at(
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal_px: f64,
        principal: Vector2<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("camera center equals target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("viewing direction parallel to up".into()))?;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let k = Matrix3::new(focal_px, 0.0, principal.x, 0.0, focal_px, principal.y, 0.0, 0.0, 1.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.set_column(3, &(-r * center));
        Camera::new(k * rt, width, height)
    }

    fn m(&self) -> Matrix3<f64> {
        self.p.fixed_view::<3, 3>(0, 0).into_owned()
    }

    fn m_inv(&self) -> Result<Matrix3<f64>> {
        self.m().try_inverse().ok_or(Error::DegenerateRay)
    }

    pub fn center(&self) -> Result<Vector3<f64>> {
        Ok(-self.m_inv()? * self.p.column(3))
    }

    fn homogeneous(&self, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        let h = self.p * Vector4::new(x.x, x.y, x.z, 1.0);
        let scale = self.p.row(2).norm() * (1.0 + x.norm());
        if h.z.abs() <= 1e-12 * scale {
            return Err(Error::DegenerateProjection(h.z));
        }
        Ok(h)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        let h = self.homogeneous(x)?;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Derivative of [`Camera::project`] at `x`.
    pub fn projection_jacobian(&self, x: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        let h = self.homogeneous(x)?;
        let (u, v, w) = (h.x / h.z, h.y / h.z, h.z);
        let mut j = Matrix2x3::zeros();
        for k in 0..3 {
            j[(0, k)] = (self.p[(0, k)] - u * self.p[(2, k)]) / w;
            j[(1, k)] = (self.p[(1, k)] - v * self.p[(2, k)]) / w;
        }
        Ok(j)
    }

    /// Camera center and unit direction of the viewing ray through `pixel`.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let minv = self.m_inv()?;
        let d = minv * Vector3::new(pixel.x, pixel.y, 1.0);
        let d = d.try_normalize(1e-300).ok_or(Error::DegenerateRay)?;
        Ok((-minv * self.p.column(3), d))
    }

    /// Point on the ray through `pixel` closest to `target`.
    pub fn backproject_nearest(&self, pixel: &Vector2<f64>, target: &Vector3<f64>) -> Result<Vector3<f64>> {
        let (c, d) = self.ray(pixel)?;
        Ok(c + d * (target - c).dot(&d))
    }

    pub fn backproject_to_nearest_origin(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>> {
        self.backproject_nearest(pixel, &Vector3::zeros())
    }

    /// Image radius of a sphere of the given diameter centered at `x`.
    pub fn projected_radius(&self, x: &Vector3<f64>, shape: &ShapeParams) -> Result<f64> {
        Ok(0.5 * shape.stem_diameter * self.projection_jacobian(x)?.norm() / std::f64::consts::SQRT_2)
    }

    /// Same camera with the image shifted by `(du, dv)` pixels.
    pub fn shifted(&self, du: f64, dv: f64) -> Camera {
        let t = Matrix3::new(1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0);
        Camera {
            p: t * self.p,
            width: self.width,
            height: self.height,
        }
    }

    pub fn contains_pixel(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub stem_diameter: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams { stem_diameter: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.data[v * self.width + u]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.data[v * self.width + u] = on;
    }

    /// Out-of-range reads are off.
    pub fn get_i(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height && self.get(u as usize, v as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn on_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect(),
        }
    }
}

/// Calls `f(u, v)` for every pixel center within `radius` of `center`,
/// including pixels outside any image.
pub fn for_each_disc_pixel(center: &Vector2<f64>, radius: f64, mut f: impl FnMut(i64, i64)) {
    if !(radius >= 0.0) || !center.x.is_finite() || !center.y.is_finite() {
        return;
    }
    let r2 = radius * radius;
    let v0 = (center.y - radius).ceil() as i64;
    let v1 = (center.y + radius).floor() as i64;
    for v in v0..=v1 {
        let dv = v as f64 - center.y;
        let rem = r2 - dv * dv;
        if rem < 0.0 {
            continue;
        }
        let half = rem.sqrt();
        let u0 = (center.x - half).ceil() as i64;
        let u1 = (center.x + half).floor() as i64;
        for u in u0..=u1 {
            let du = u as f64 - center.x;
            if du * du + dv * dv <= r2 {
                f(u, v);
            }
        }
    }
}

fn paint_capsule(mask: &mut Mask, a: &Vector2<f64>, ra: f64, b: &Vector2<f64>, rb: f64) {
    let rmax = ra.max(rb);
    let u0 = ((a.x.min(b.x) - rmax).ceil().max(0.0)) as i64;
    let v0 = ((a.y.min(b.y) - rmax).ceil().max(0.0)) as i64;
    let u1 = (a.x.max(b.x) + rmax).floor().min(mask.width as f64 - 1.0) as i64;
    let v1 = (a.y.max(b.y) + rmax).floor().min(mask.height as f64 - 1.0) as i64;
    let ab = b - a;
    let len2 = ab.norm_squared();
    for v in v0..=v1 {
        for u in u0..=u1 {
            let p = Vector2::new(u as f64, v as f64);
            let s = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let r = ra + s * (rb - ra);
            if (p - (a + ab * s)).norm_squared() <= r * r {
                mask.set(u as usize, v as usize, true);
            }
        }
    }
}

/// Adds the silhouette of a polyline tree to `mask`.
pub fn rasterize_into(
    mask: &mut Mask,
    cam: &Camera,
    polylines: &[Vec<Vector3<f64>>],
    shape: &ShapeParams,
) -> Result<()> {
    for curve in polylines {
        let proj: Vec<(Vector2<f64>, f64)> = curve
            .iter()
            .map(|x| Ok((cam.project(x)?, cam.projected_radius(x, shape)?)))
            .collect::<Result<_>>()?;
        match proj.len() {
            0 => {}
            1 => paint_capsule(mask, &proj[0].0, proj[0].1, &proj[0].0, proj[0].1),
            _ => {
                for w in proj.windows(2) {
                    paint_capsule(mask, &w[0].0, w[0].1, &w[1].0, w[1].1);
                }
            }
        }
    }
    Ok(())
}

/// Binary silhouette of a polyline tree: union of capsules between
/// consecutive points of each curve.
pub fn rasterize_tree(cam: &Camera, polylines: &[Vec<Vector3<f64>>], shape: &ShapeParams) -> Result<Mask> {
    let mut mask = Mask::new(cam.width, cam.height);
    rasterize_into(&mut mask, cam, polylines, shape)?;
    Ok(mask)
}

fn smoothed_log_table(hist: &[f64; 256]) -> Vec<f64> {
    let total: f64 = hist.iter().sum();
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-4..=4).map(|i| (-0.5 * (i * i) as f64).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let mut out = vec![0.0; 256];
    for (b, o) in out.iter_mut().enumerate() {
        for (k, w) in kernel.iter().enumerate() {
            let src = b as i64 + k as i64 - 4;
            if (0..256).contains(&src) {
                *o += w * hist[src as usize] / total;
            }
        }
    }
    for o in out.iter_mut() {
        *o = o.max(1e-12);
    }
    let s: f64 = out.iter().sum();
    out.into_iter().map(|v| (v / s).ln()).collect()
}

/// Foreground and background log-probability tables of the map values.
pub fn calibrate_histograms(d: &GrayImage, truth: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    if d.width != truth.width || d.height != truth.height {
        return Err(Error::DimensionMismatch(format!(
            "map {}x{} vs mask {}x{}",
            d.width, d.height, truth.width, truth.height
        )));
    }
    let mut fg = [0.0; 256];
    let mut bg = [0.0; 256];
    for (&v, &on) in d.data.iter().zip(&truth.data) {
        if on {
            fg[v as usize] += 1.0;
        } else {
            bg[v as usize] += 1.0;
        }
    }
    if fg.iter().sum::<f64>() == 0.0 {
        return Err(Error::EmptyClass("foreground"));
    }
    if bg.iter().sum::<f64>() == 0.0 {
        return Err(Error::EmptyClass("background"));
    }
    Ok((smoothed_log_table(&fg), smoothed_log_table(&bg)))
}

/// One view's classifier map with its precomputed likelihood images.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    pub d: GrayImage,
    pub log_fg: Vec<f64>,
    pub log_bg: Vec<f64>,
    pub log_ratio_image: Vec<f64>,
    pub log_all_bg: f64,
    /// Log-ratio charged per disc pixel that falls outside the image.
    pub off_image_log_ratio: f64,
}

pub const DEFAULT_OFF_IMAGE_LOG_RATIO: f64 = -6.907_755_278_982_137;

impl ViewMaps {
    pub fn new(d: GrayImage, log_fg: Vec<f64>, log_bg: Vec<f64>) -> Result<Self> {
        if log_fg.len() != 256 || log_bg.len() != 256 {
            return Err(Error::DimensionMismatch("likelihood tables need 256 entries".into()));
        }
        let log_ratio_image = d
            .data
            .iter()
            .map(|&v| log_fg[v as usize] - log_bg[v as usize])
            .collect();
        let log_all_bg = d.data.iter().map(|&v| log_bg[v as usize]).sum();
        Ok(ViewMaps {
            d,
            log_fg,
            log_bg,
            log_ratio_image,
            log_all_bg,
            off_image_log_ratio: DEFAULT_OFF_IMAGE_LOG_RATIO,
        })
    }

    pub fn width(&self) -> usize {
        self.d.width
    }

    pub fn height(&self) -> usize {
        self.d.height
    }

    pub fn log_ratio(&self, u: usize, v: usize) -> f64 {
        self.log_ratio_image[v * self.d.width + u]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMaps {
    pub views: Vec<ViewMaps>,
}

impl LikelihoodMaps {
    /// Builds per-view maps sharing one pair of calibrated tables.
    pub fn from_tables(maps: Vec<GrayImage>, log_fg: &[f64], log_bg: &[f64]) -> Result<Self> {
        let views = maps
            .into_iter()
            .map(|d| ViewMaps::new(d, log_fg.to_vec(), log_bg.to_vec()))
            .collect::<Result<_>>()?;
        Ok(LikelihoodMaps { views })
    }

    pub fn set_off_image_log_ratio(&mut self, value: f64) {
        for v in &mut self.views {
            v.off_image_log_ratio = value;
        }
    }
}

/// `log p(D | silhouette)` for one view.
pub fn image_log_likelihood(mask: &Mask, view: &ViewMaps) -> Result<f64> {
    if mask.width != view.width() || mask.height != view.height() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs map {}x{}",
            mask.width,
            mask.height,
            view.width(),
            view.height()
        )));
    }
    let mut acc = view.log_all_bg;
    for (i, &on) in mask.data.iter().enumerate() {
        if on {
            acc += view.log_ratio_image[i];
        }
    }
    Ok(acc)
}

/// Change in the view log-likelihood from adding one sphere at `x` to an
/// empty silhouette.
pub fn point_log_likelihood_delta(
    cam: &Camera,
    view: &ViewMaps,
    x: &Vector3<f64>,
    shape: &ShapeParams,
) -> Result<f64> {
    let c = cam.project(x)?;
    let r = cam.projected_radius(x, shape)?;
    if !(r >= 0.0) || !c.x.is_finite() || !c.y.is_finite() {
        return Ok(0.0);
    }
    let (w, h) = (cam.width as i64, cam.height as i64);
    let r2 = r * r;
    let mut acc = 0.0;
    let mut inside = 0.0;
    let v0 = (c.y - r).ceil();
    let v1 = (c.y + r).floor();
    for v in (v0.max(0.0) as i64)..=(v1.min(h as f64 - 1.0) as i64) {
        let dv = v as f64 - c.y;
        let rem = r2 - dv * dv;
        if rem < 0.0 {
            continue;
        }
        let half = rem.sqrt();
        let u0 = (c.x - half).ceil().max(0.0) as i64;
        let u1 = (c.x + half).floor().min(w as f64 - 1.0) as i64;
        for u in u0..=u1 {
            let du = u as f64 - c.x;
            if du * du + dv * dv <= r2 {
                acc += view.log_ratio(u as usize, v as usize);
                inside += 1.0;
            }
        }
    }
    Ok(acc + (disc_pixel_count(&c, r) - inside) * view.off_image_log_ratio)
}

/// Number of pixel centers within `radius` of `center`; the disc area when
/// the disc spans more than a million rows.
fn disc_pixel_count(center: &Vector2<f64>, radius: f64) -> f64 {
    let v0 = (center.y - radius).ceil();
    let v1 = (center.y + radius).floor();
    if v1 - v0 > 1e6 {
        return std::f64::consts::PI * radius * radius;
    }
    let r2 = radius * radius;
    let mut n = 0.0;
    for v in (v0 as i64)..=(v1 as i64) {
        let dv = v as f64 - center.y;
        let rem = r2 - dv * dv;
        if rem >= 0.0 {
            let half = rem.sqrt();
            n += ((center.x + half).floor() - (center.x - half).ceil() + 1.0).max(0.0);
        }
    }
    n
}

/// Calibrated multi-view observations of one tree sequence.
#[derive(Clone, Debug)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub maps: LikelihoodMaps,
    pub times: Vec<f64>,
    pub shape: ShapeParams,
}

impl Scene {
    pub fn new(cameras: Vec<Camera>, maps: LikelihoodMaps, times: Vec<f64>, shape: ShapeParams) -> Result<Self> {
        if cameras.len() != maps.views.len() || cameras.len() != times.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} cameras, {} maps, {} times",
                cameras.len(),
                maps.views.len(),
                times.len()
            )));
        }
        for (c, m) in cameras.iter().zip(&maps.views) {
            if c.width != m.width() || c.height != m.height() {
                return Err(Error::DimensionMismatch("camera and map sizes differ".into()));
            }
        }
        Ok(Scene {
            cameras,
            maps,
            times,
            shape,
        })
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn point_delta(&self, view: usize, x: &Vector3<f64>) -> Result<f64> {
        point_log_likelihood_delta(&self.cameras[view], &self.maps.views[view], x, &self.shape)
    }

    pub fn render(&self, view: usize, polylines: &[Vec<Vector3<f64>>]) -> Result<Mask> {
        rasterize_tree(&self.cameras[view], polylines, &self.shape)
    }

    pub fn view_log_likelihood(&self, view: usize, polylines: &[Vec<Vector3<f64>>]) -> Result<f64> {
        image_log_likelihood(&self.render(view, polylines)?, &self.maps.views[view])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_views: usize,
    pub yaw_step_deg: f64,
    pub turntable_radius: f64,
    pub elevation_deg: f64,
    pub image_size: usize,
    /// Image scale at the look-at point; reduced if the tree would not fit.
    pub px_per_mm: f64,
    pub camera_jitter_px: f64,
    pub fg_level: u8,
    pub bg_level: u8,
    pub noise_amplitude: u8,
    pub flip_rate: f64,
    pub calibration_view: usize,
    pub shape: ShapeParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_views: 9,
            yaw_step_deg: 10.0,
            turntable_radius: 300.0,
            elevation_deg: 15.0,
            image_size: 400,
            px_per_mm: 4.0,
            camera_jitter_px: 0.0,
            fg_level: 230,
            bg_level: 20,
            noise_amplitude: 30,
            flip_rate: 0.005,
            calibration_view: 0,
            shape: ShapeParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise_amplitude = 0;
        self.flip_rate = 0.0;
        self
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub truth: TreeSequence,
    /// Cameras handed to the fitter, including any jitter.
    pub cameras: Vec<Camera>,
    pub true_cameras: Vec<Camera>,
    pub maps: LikelihoodMaps,
    pub truth_masks: Vec<Mask>,
    pub times: Vec<f64>,
    pub shape: ShapeParams,
}

impl SynthScene {
    pub fn scene(&self) -> Result<Scene> {
        Scene::new(self.cameras.clone(), self.maps.clone(), self.times.clone(), self.shape)
    }
}

/// Turntable cameras circling the vertical axis through `target`.
pub fn turntable_cameras(cfg: &SynthConfig, target: &Vector3<f64>, px_per_mm: f64) -> Result<Vec<Camera>> {
    let r = cfg.turntable_radius;
    let el = cfg.elevation_deg.to_radians();
    let c = (cfg.image_size as f64 - 1.0) / 2.0;
    (0..cfg.n_views)
        .map(|i| {
            let yaw = (i as f64 * cfg.yaw_step_deg).to_radians();
            let center = target + Vector3::new(r * el.cos() * yaw.cos(), r * el.cos() * yaw.sin(), r * el.sin());
            Camera::look_at(
                center,
                *target,
                Vector3::z(),
                px_per_mm * r,
                Vector2::new(c, c),
                cfg.image_size,
                cfg.image_size,
            )
        })
        .collect()
}

/// Samples a tree sequence from the plant prior, one frame per view.
pub fn sample_sequence(hyper: &Hyperparams, topo: &Topology, sites: &IndexSet, times: &[f64], seed: u64) -> Result<TreeSequence> {
    let kernel = CompositePlantKernel::plant(hyper, std::sync::Arc::new(topo.clone()))?;
    let pts = space_time_points(sites.entries(), times);
    let k = gram_sym(&kernel, &pts, Execution::Parallel)?;
    let draws = sample(&k, 3, stream_seed(seed, &[1]))?;
    let m = sites.len();
    let points = (0..times.len())
        .map(|i| {
            (0..m)
                .map(|j| {
                    let row = i * m + j;
                    Vector3::new(draws[(row, 0)], draws[(row, 1)], draws[(row, 2)])
                })
                .collect()
        })
        .collect();
    TreeSequence::new(topo.clone(), sites.clone(), times.to_vec(), points)
}

pub fn synth_scene(
    hyper: &Hyperparams,
    topo: &Topology,
    sites: &IndexSet,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SynthScene> {
    let times: Vec<f64> = (0..cfg.n_views).map(|i| i as f64).collect();
    let truth = sample_sequence(hyper, topo, sites, &times, seed)?;
    synth_from_truth(truth, cfg, seed)
}

/// Named synthetic test scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One curve of parameter length 30, noiseless maps, exact cameras.
    Easy,
    /// Three curves of parameter lengths 50, 35 and 30, noisy maps and 2 px
    /// camera jitter.
    Hard,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Preset> {
        match name {
            "easy" => Some(Preset::Easy),
            "hard" => Some(Preset::Hard),
            _ => None,
        }
    }

    pub fn topology(self) -> Topology {
        match self {
            Preset::Easy => Topology::single(30.0),
            Preset::Hard => Topology::new(vec![50.0, 35.0, 30.0], vec![0, 1, 1], vec![0.0, 20.0, 40.0]),
        }
        .expect("preset topology is valid")
    }

    pub fn config(self) -> SynthConfig {
        match self {
            Preset::Easy => SynthConfig::default().noiseless(),
            Preset::Hard => SynthConfig {
                camera_jitter_px: 2.0,
                ..SynthConfig::default()
            },
        }
    }

    /// Ground truth sampled from the default prior at 1 mm spacing.
    pub fn synth(self, seed: u64) -> Result<SynthScene> {
        let topo = self.topology();
        let sites = IndexSet::uniform(&topo, 1.0)?;
        synth_scene(&Hyperparams::default(), &topo, &sites, &self.config(), seed)
    }
}

/// Renders classifier maps of a given ground-truth sequence.
pub fn synth_from_truth(truth: TreeSequence, cfg: &SynthConfig, seed: u64) -> Result<SynthScene> {
    if truth.n_frames() != cfg.n_views {
        return Err(Error::DimensionMismatch(format!(
            "{} frames for {} views",
            truth.n_frames(),
            cfg.n_views
        )));
    }
    if cfg.calibration_view >= cfg.n_views {
        return Err(Error::InvalidParameter("calibration view out of range".into()));
    }
    let all: Vec<Vector3<f64>> = truth.points.iter().flatten().cloned().collect();
    let (lo, hi) = all.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let target = if all.is_empty() { Vector3::zeros() } else { (lo + hi) / 2.0 };
    let extent = all.iter().map(|p| (p - target).norm()).fold(0.0, f64::max) + cfg.shape.stem_diameter;
    let r = cfg.turntable_radius;
    if extent >= 0.9 * r {
        return Err(Error::InvalidParameter(format!(
            "tree extent {extent:.1} mm does not fit inside the turntable radius {r} mm"
        )));
    }
    let fit = 0.45 * cfg.image_size as f64 * (r - extent) / (r * extent);
    let px_per_mm = cfg.px_per_mm.min(fit);
    let true_cameras = turntable_cameras(cfg, &target, px_per_mm)?;

    let mut jitter_rng = stream_rng(seed, &[2]);
    let cameras = true_cameras
        .iter()
        .map(|c| {
            if cfg.camera_jitter_px > 0.0 {
                let du: f64 = jitter_rng.sample::<f64, _>(rand_distr::StandardNormal) * cfg.camera_jitter_px;
                let dv: f64 = jitter_rng.sample::<f64, _>(rand_distr::StandardNormal) * cfg.camera_jitter_px;
                c.shifted(du, dv)
            } else {
                c.clone()
            }
        })
        .collect();

    let mut truth_masks = Vec::with_capacity(cfg.n_views);
    let mut maps = Vec::with_capacity(cfg.n_views);
    for (i, cam) in true_cameras.iter().enumerate() {
        let mask = rasterize_tree(cam, &truth.polylines(i), &cfg.shape)?;
        let mut rng = stream_rng(seed, &[3, i as u64]);
        let amp = cfg.noise_amplitude as i32;
        let data = mask
            .data
            .iter()
            .map(|&on| {
                let flip = cfg.flip_rate > 0.0 && rng.random::<f64>() < cfg.flip_rate;
                let level = if on != flip { cfg.fg_level } else { cfg.bg_level } as i32;
                let noise = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
                (level + noise).clamp(0, 255) as u8
            })
            .collect();
        maps.push(GrayImage {
            width: mask.width,
            height: mask.height,
            data,
        });
        truth_masks.push(mask);
    }
    let cv = cfg.calibration_view;
    let (log_fg, log_bg) = calibrate_histograms(&maps[cv], &truth_masks[cv])?;
    let maps = LikelihoodMaps::from_tables(maps, &log_fg, &log_bg)?;
    Ok(SynthScene {
        times: truth.times.clone(),
        truth,
        cameras,
        true_cameras,
        maps,
        truth_masks,
        shape: cfg.shape,
    })
}
