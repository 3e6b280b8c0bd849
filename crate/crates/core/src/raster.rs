//! Tile-based forward rasterizer for RGB, feature, alpha and depth maps.
//!
//! Every output channel is accumulated from the same per-splat compositing
//! weight
//!
//! ```text
//! w_i(x) = a_i(x) · Π_{j in front of i} (1 − a_j(x)),   a_i(x) = min(α_i·G_i(x), 0.999)
//! ```
//!
//! so features and colours are rendered with identical weights. A splat
//! contributes to a pixel only inside its 3σ ellipse and only when
//! `a_i(x) ≥ 1/255`; compositing stops before the transmittance would drop
//! below 1e-4.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project, Camera, GaussianField, Splat2D};

pub const TILE_SIZE: usize = 16;
pub const ALPHA_CLAMP: f64 = 0.999;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Pixels whose total weight is at or below this are uncovered.
pub const COVERAGE_EPS: f64 = 1e-4;
/// Squared Mahalanobis radius of a splat's support.
pub const SUPPORT_POWER: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Which per-pixel weights define responsibilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// Transmittance-inclusive compositing weights (what `render` uses).
    #[default]
    Compositing,
    /// Raw mixture weights `α_i·N(x; μ_i, Σ_i)` over all splats in support.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    /// Render at this `(width, height)` instead of the camera's resolution.
    pub size: Option<(usize, usize)>,
    pub precision: Precision,
    pub weight_mode: WeightMode,
    /// Disable to render tiles on the calling thread only.
    pub parallel: bool,
}

impl RenderOptions {
    pub fn new() -> Self {
        Self {
            parallel: true,
            ..Default::default()
        }
    }

    pub fn single_threaded(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn with_weight_mode(mut self, m: WeightMode) -> Self {
        self.weight_mode = m;
        self
    }

    fn camera(&self, cam: &Camera) -> Camera {
        match self.size {
            Some((w, h)) if (w, h) != (cam.width, cam.height) => cam.resized(w, h),
            _ => cam.clone(),
        }
    }
}

/// H×W×D grid of feature vectors, row-major with the feature axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub frame_id: usize,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize, frame_id: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
            frame_id,
        }
    }

    pub fn from_data(width: usize, height: usize, dim: usize, data: Vec<f64>, frame_id: usize) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::dim("feature map data length", width * height * dim, data.len()));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
            frame_id,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn pixel_index(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H×W×3.
    pub rgb: Vec<f64>,
    pub features: FeatureMap,
    /// Accumulated opacity, H×W.
    pub alpha: Vec<f64>,
    /// Expected camera-space depth, 0 where alpha is 0.
    pub depth: Vec<f64>,
}

impl RenderOutput {
    /// RGB as a three-channel feature map, for I/O and metrics.
    pub fn rgb_map(&self, frame_id: usize) -> FeatureMap {
        FeatureMap {
            width: self.width,
            height: self.height,
            dim: 3,
            data: self.rgb.clone(),
            frame_id,
        }
    }
}

/// Raw per-pixel contribution weights in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    /// `offsets[p]..offsets[p+1]` indexes `entries` for pixel `p`.
    pub offsets: Vec<usize>,
    /// `(gaussian_index, weight)` in compositing order.
    pub entries: Vec<(usize, f64)>,
}

impl WeightMap {
    pub fn pixel(&self, p: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Sum of weights at pixel `p`.
    pub fn coverage(&self, p: usize) -> f64 {
        self.pixel(p).iter().map(|&(_, w)| w).sum()
    }

    /// `Σ_i w_i f_i` at every pixel, accumulated in compositing order.
    pub fn apply(&self, features: &[f64], dim: usize, frame_id: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.width, self.height, dim, frame_id);
        for p in 0..self.num_pixels() {
            let acc = &mut out.data[p * dim..(p + 1) * dim];
            for &(i, w) in self.pixel(p) {
                for (a, f) in acc.iter_mut().zip(&features[i * dim..(i + 1) * dim]) {
                    *a += w * f;
                }
            }
        }
        out
    }
}

/// Per-pixel normalised contributions `R_i(t, x)` for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMap {
    pub frame_id: usize,
    pub width: usize,
    pub height: usize,
    pub offsets: Vec<usize>,
    pub entries: Vec<(usize, f64)>,
    /// Total weight per pixel before normalisation.
    pub coverage: Vec<f64>,
}

impl ResponsibilityMap {
    pub fn pixel(&self, p: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn from_weights(weights: &WeightMap, frame_id: usize) -> Self {
        let n = weights.num_pixels();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut entries = Vec::new();
        let mut coverage = Vec::with_capacity(n);
        offsets.push(0);
        for p in 0..n {
            let px = weights.pixel(p);
            let total: f64 = px.iter().map(|&(_, w)| w).sum();
            coverage.push(total);
            if total > COVERAGE_EPS {
                entries.extend(px.iter().map(|&(i, w)| (i, w / total)));
            }
            offsets.push(entries.len());
        }
        Self {
            frame_id,
            width: weights.width,
            height: weights.height,
            offsets,
            entries,
            coverage,
        }
    }
}

/// Scalar type for compositing accumulation.
trait Real: Copy + Send + Sync + PartialOrd + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn min(self, o: Self) -> Self;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn min(self, o: Self) -> Self {
        f64::min(self, o)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn min(self, o: Self) -> Self {
        f32::min(self, o)
    }
}

/// Splat parameters converted to the accumulation type.
#[derive(Clone, Copy)]
struct Prepared<T> {
    mx: T,
    my: T,
    ca: T,
    cb: T,
    cc: T,
    opacity: T,
}

impl<T: Real> Prepared<T> {
    fn new(s: &Splat2D) -> Self {
        Self {
            mx: T::from_f64(s.mean2d.x),
            my: T::from_f64(s.mean2d.y),
            ca: T::from_f64(s.conic[(0, 0)]),
            cb: T::from_f64(s.conic[(0, 1)]),
            cc: T::from_f64(s.conic[(1, 1)]),
            opacity: T::from_f64(s.opacity),
        }
    }
}

/// Front-to-back compositing of one pixel over `order` (indices into
/// `prepared`, depth-sorted). Calls `visit(slot, weight)` per contribution.
fn composite_pixel<T: Real>(
    x: T,
    y: T,
    order: &[usize],
    prepared: &[Prepared<T>],
    mut visit: impl FnMut(usize, T),
) {
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    let support = T::from_f64(SUPPORT_POWER);
    let clamp = T::from_f64(ALPHA_CLAMP);
    let min_alpha = T::from_f64(MIN_ALPHA);
    let min_t = T::from_f64(MIN_TRANSMITTANCE);
    let mut transmittance = T::ONE;
    for &slot in order {
        let s = &prepared[slot];
        let dx = x - s.mx;
        let dy = y - s.my;
        let power = s.ca * dx * dx + two * s.cb * dx * dy + s.cc * dy * dy;
        if power > support {
            continue;
        }
        let a = (s.opacity * (T::ZERO - half * power).exp()).min(clamp);
        if a < min_alpha {
            continue;
        }
        let next = transmittance * (T::ONE - a);
        if next < min_t {
            break;
        }
        visit(slot, a * transmittance);
        transmittance = next;
    }
}

/// Mixture weights `α_i·N(x; μ_i, Σ_i)` for one pixel.
fn mixture_pixel(x: f64, y: f64, order: &[usize], splats: &[Splat2D], mut visit: impl FnMut(usize, f64)) {
    for &slot in order {
        let s = &splats[slot];
        let power = s.power(x, y);
        if power > SUPPORT_POWER {
            continue;
        }
        let norm = 1.0 / (2.0 * std::f64::consts::PI * s.cov2d.determinant().sqrt());
        visit(slot, s.opacity * norm * (-0.5 * power).exp());
    }
}

/// Projected splats sorted by `(depth, source_index)` with their tile lists.
struct Binned {
    splats: Vec<Splat2D>,
    tiles_x: usize,
    tiles_y: usize,
    /// Per tile, slots into `splats` in depth order.
    tiles: Vec<Vec<usize>>,
}

fn project_sorted(field: &GaussianField, cam: &Camera, parallel: bool) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = if parallel {
        field
            .gaussians
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| project(g, i, cam))
            .collect()
    } else {
        field
            .gaussians
            .iter()
            .enumerate()
            .filter_map(|(i, g)| project(g, i, cam))
            .collect()
    };
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    splats
}

fn bin(field: &GaussianField, cam: &Camera, parallel: bool) -> Binned {
    let splats = project_sorted(field, cam, parallel);
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let tile_range = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let last = (n * TILE_SIZE - 1) as f64;
        if hi < 0.0 || lo > last {
            return None;
        }
        let a = (lo.max(0.0).ceil() as usize) / TILE_SIZE;
        let b = ((hi.min(last).floor()) as usize) / TILE_SIZE;
        Some((a, b.min(n - 1)))
    };
    for (slot, s) in splats.iter().enumerate() {
        let Some((tx0, tx1)) = tile_range(s.mean2d.x - s.radius, s.mean2d.x + s.radius, tiles_x) else {
            continue;
        };
        let Some((ty0, ty1)) = tile_range(s.mean2d.y - s.radius, s.mean2d.y + s.radius, tiles_y) else {
            continue;
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(slot);
            }
        }
    }
    Binned {
        splats,
        tiles_x,
        tiles_y,
        tiles,
    }
}

fn check_inputs(field: &GaussianField, cam: &Camera) -> Result<()> {
    field.ensure_valid()?;
    cam.validate()
}

fn for_each_tile<R: Send>(binned: &Binned, parallel: bool, f: impl Fn(usize, usize, &[usize]) -> R + Sync) -> Vec<R> {
    let run = |t: usize| f(t % binned.tiles_x, t / binned.tiles_x, &binned.tiles[t]);
    let n = binned.tiles_x * binned.tiles_y;
    if parallel {
        (0..n).into_par_iter().map(run).collect()
    } else {
        (0..n).map(run).collect()
    }
}

fn tile_pixels(cam: &Camera, tx: usize, ty: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
    let (x1, y1) = ((x0 + TILE_SIZE).min(cam.width), (y0 + TILE_SIZE).min(cam.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders RGB, features, alpha and expected depth for one view.
pub fn render(field: &GaussianField, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let cam = opts.camera(cam);
    check_inputs(field, &cam)?;
    let binned = bin(field, &cam, opts.parallel);
    match opts.precision {
        Precision::F64 => Ok(render_binned::<f64>(field, &cam, &binned, opts.parallel)),
        Precision::F32 => Ok(render_binned::<f32>(field, &cam, &binned, opts.parallel)),
    }
}

struct TilePixel {
    x: usize,
    y: usize,
    rgb: [f64; 3],
    alpha: f64,
    depth: f64,
    features: Vec<f64>,
}

fn render_binned<T: Real>(field: &GaussianField, cam: &Camera, binned: &Binned, parallel: bool) -> RenderOutput {
    let dim = field.feature_dim;
    let prepared: Vec<Prepared<T>> = binned.splats.iter().map(Prepared::new).collect();
    let colors: Vec<[T; 3]> = binned
        .splats
        .iter()
        .map(|s| {
            let c = field.gaussians[s.source_index].color;
            [T::from_f64(c.x), T::from_f64(c.y), T::from_f64(c.z)]
        })
        .collect();
    let feats: Vec<Vec<T>> = binned
        .splats
        .iter()
        .map(|s| field.gaussians[s.source_index].feature.iter().map(|&v| T::from_f64(v)).collect())
        .collect();
    let depths: Vec<T> = binned.splats.iter().map(|s| T::from_f64(s.depth)).collect();

    let tiles = for_each_tile(binned, parallel, |tx, ty, order| {
        tile_pixels(cam, tx, ty)
            .map(|(x, y)| {
                let mut rgb = [T::ZERO; 3];
                let mut feat = vec![T::ZERO; dim];
                let mut alpha = T::ZERO;
                let mut depth = T::ZERO;
                composite_pixel(T::from_f64(x as f64), T::from_f64(y as f64), order, &prepared, |slot, w| {
                    for c in 0..3 {
                        rgb[c] += w * colors[slot][c];
                    }
                    for (a, f) in feat.iter_mut().zip(&feats[slot]) {
                        *a += w * *f;
                    }
                    alpha += w;
                    depth += w * depths[slot];
                });
                let alpha = alpha.to_f64();
                TilePixel {
                    x,
                    y,
                    rgb: rgb.map(Real::to_f64),
                    alpha,
                    depth: if alpha > 0.0 { depth.to_f64() / alpha } else { 0.0 },
                    features: feat.into_iter().map(Real::to_f64).collect(),
                }
            })
            .collect::<Vec<_>>()
    });
    assemble(cam, dim, tiles.into_iter().flatten())
}

fn assemble(cam: &Camera, dim: usize, pixels: impl Iterator<Item = TilePixel>) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: vec![0.0; w * h * 3],
        features: FeatureMap::zeros(w, h, dim, 0),
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
    };
    for px in pixels {
        let p = px.y * w + px.x;
        out.rgb[p * 3..p * 3 + 3].copy_from_slice(&px.rgb);
        out.features.data[p * dim..(p + 1) * dim].copy_from_slice(&px.features);
        out.alpha[p] = px.alpha;
        out.depth[p] = px.depth;
    }
    out
}

/// Reference renderer: per-pixel loop over every projected splat in global
/// depth order, no tiling, always double precision. Intended for small
/// fields.
pub fn render_brute_force(field: &GaussianField, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let cam = opts.camera(cam);
    check_inputs(field, &cam)?;
    let dim = field.feature_dim;
    let splats = project_sorted(field, &cam, false);
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: vec![0.0; w * h * 3],
        features: FeatureMap::zeros(w, h, dim, 0),
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut t = 1.0f64;
            let mut depth = 0.0;
            for s in &splats {
                let power = s.power(x as f64, y as f64);
                if power > SUPPORT_POWER {
                    continue;
                }
                let a = (s.opacity * (-0.5 * power).exp()).min(ALPHA_CLAMP);
                if a < MIN_ALPHA {
                    continue;
                }
                if t * (1.0 - a) < MIN_TRANSMITTANCE {
                    break;
                }
                let wgt = a * t;
                let g = &field.gaussians[s.source_index];
                for c in 0..3 {
                    out.rgb[p * 3 + c] += wgt * g.color[c];
                }
                for (d, f) in g.feature.iter().enumerate() {
                    out.features.data[p * dim + d] += wgt * f;
                }
                out.alpha[p] += wgt;
                depth += wgt * s.depth;
                t *= 1.0 - a;
            }
            if out.alpha[p] > 0.0 {
                out.depth[p] = depth / out.alpha[p];
            }
        }
    }
    Ok(out)
}

/// Raw per-pixel weights for one view under `opts.weight_mode`.
pub fn contributions(field: &GaussianField, cam: &Camera, opts: &RenderOptions) -> Result<WeightMap> {
    let cam = opts.camera(cam);
    check_inputs(field, &cam)?;
    let binned = bin(field, &cam, opts.parallel);
    let tiles = match (opts.weight_mode, opts.precision) {
        (WeightMode::Mixture, _) => tile_weights(&cam, &binned, opts.parallel, |x, y, order, visit| {
            mixture_pixel(x as f64, y as f64, order, &binned.splats, visit)
        }),
        (WeightMode::Compositing, Precision::F64) => {
            let prepared: Vec<Prepared<f64>> = binned.splats.iter().map(Prepared::new).collect();
            tile_weights(&cam, &binned, opts.parallel, |x, y, order, visit| {
                composite_pixel(x as f64, y as f64, order, &prepared, visit)
            })
        }
        (WeightMode::Compositing, Precision::F32) => {
            let prepared: Vec<Prepared<f32>> = binned.splats.iter().map(Prepared::new).collect();
            tile_weights(&cam, &binned, opts.parallel, |x, y, order, visit| {
                composite_pixel(x as f32, y as f32, order, &prepared, |s, w| visit(s, w as f64))
            })
        }
    };

    let n = cam.width * cam.height;
    let mut per_pixel: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (p, list) in tiles.into_iter().flatten() {
        per_pixel[p] = list;
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut entries = Vec::new();
    for list in per_pixel {
        entries.extend(list);
        offsets.push(entries.len());
    }
    Ok(WeightMap {
        width: cam.width,
        height: cam.height,
        offsets,
        entries,
    })
}

type PixelWeights = Vec<(usize, Vec<(usize, f64)>)>;

fn tile_weights<K>(cam: &Camera, binned: &Binned, parallel: bool, kernel: K) -> Vec<PixelWeights>
where
    K: Fn(usize, usize, &[usize], &mut dyn FnMut(usize, f64)) + Sync,
{
    for_each_tile(binned, parallel, |tx, ty, order| {
        tile_pixels(cam, tx, ty)
            .map(|(x, y)| {
                let mut list = Vec::new();
                kernel(x, y, order, &mut |slot, w| list.push((binned.splats[slot].source_index, w)));
                (y * cam.width + x, list)
            })
            .collect()
    })
}

/// Normalised responsibilities `R_i(t, x) = w_i / Σ_j w_j` for one view.
pub fn responsibilities(field: &GaussianField, cam: &Camera, opts: &RenderOptions) -> Result<ResponsibilityMap> {
    Ok(ResponsibilityMap::from_weights(&contributions(field, cam, opts)?, 0))
}
