//! Synthetic scenes with planted features, depth back-projection, and the
//! on-disk formats for fields, tensors and cameras.

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Gaussian, GaussianField, Intrinsics};
use crate::io::{atomic_write, read_file, Decoder, Encoder};
use crate::raster::{render, FeatureMap, RenderOptions};

pub const FIELD_MAGIC: [u8; 4] = *b"FSGF";
pub const FIELD_VERSION: u32 = 1;
pub const TENSOR_MAGIC: [u8; 4] = *b"FSPT";
pub const TENSOR_VERSION: u32 = 1;

const SYNTH_OPACITY: f64 = 0.9;
const MAX_PROTOTYPE_COSINE: f64 = 0.5;
const PROTOTYPE_ATTEMPTS: usize = 100_000;
const CENTRE_CANDIDATES: usize = 64;
/// Cluster centres are kept at least this many Gaussian scales apart.
const CLUSTER_SEPARATION: f64 = 8.0;

fn default_fov() -> f64 {
    60.0
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_gaussians: usize,
    pub n_prototypes: usize,
    pub feature_dim: usize,
    /// Half-sizes of the box the clusters live in, centred on the origin.
    pub extent: [f64; 3],
    pub n_views: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Small default scene; callers override what they need.
    pub fn new(n_gaussians: usize, n_prototypes: usize, feature_dim: usize, n_views: usize, size: usize, seed: u64) -> Self {
        Self {
            n_gaussians,
            n_prototypes,
            feature_dim,
            extent: [1.0, 1.0, 1.0],
            n_views,
            orbit_radius: 4.0,
            orbit_height: 1.5,
            width: size,
            height: size,
            fov_deg: default_fov(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_gaussians == 0 || self.n_prototypes == 0 || self.feature_dim == 0 || self.n_views == 0 {
            return bad("scene counts must all be at least 1".into());
        }
        if self.n_prototypes > self.n_gaussians {
            return bad(format!(
                "n_prototypes ({}) exceeds n_gaussians ({})",
                self.n_prototypes, self.n_gaussians
            ));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be at least 1x1".into());
        }
        if !self.extent.iter().all(|e| *e > 0.0 && e.is_finite()) {
            return bad(format!("extent must be positive in every axis, got {:?}", self.extent));
        }
        if !(self.orbit_radius > 0.0 && self.orbit_radius.is_finite() && self.orbit_height.is_finite()) {
            return bad("orbit radius must be positive".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("field of view must lie in (0, 180), got {}", self.fov_deg));
        }
        if self.feature_dim == 1 && self.n_prototypes > 1 {
            return bad("distinct unit prototypes need feature_dim >= 2".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let fx = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

/// A synthetic scene together with its planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub field: GaussianField,
    pub cameras: Vec<Camera>,
    pub gt_feature_maps: Vec<FeatureMap>,
    /// Three-channel maps.
    pub gt_rgb: Vec<FeatureMap>,
    /// One unit-norm vector per prototype.
    pub prototypes: Vec<Vec<f64>>,
    /// Prototype index of every Gaussian.
    pub assignment: Vec<usize>,
    /// Isotropic scale shared by all Gaussians.
    pub sigma: f64,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn prototypes(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::InvalidArgument(format!(
                "could not place {n} prototypes in {dim} dimensions with pairwise cosine < {MAX_PROTOTYPE_COSINE}"
            )));
        }
        let v = unit_vector(dim, rng);
        let ok = out
            .iter()
            .all(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < MAX_PROTOTYPE_COSINE);
        if ok {
            out.push(v);
        }
    }
    Ok(out)
}

fn in_box(extent: &[f64; 3], shrink: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|i, _| rng.gen_range(-1.0..=1.0) * extent[i] * shrink)
}

/// Best-candidate sampling: each centre is the candidate farthest from the
/// centres already placed.
fn cluster_centres(n: usize, extent: &[f64; 3], rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = (f64::NEG_INFINITY, Vector3::zeros());
        for _ in 0..CENTRE_CANDIDATES {
            let c = in_box(extent, 0.8, rng);
            let d = out.iter().map(|o| (o - c).norm()).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, c);
            }
        }
        out.push(best.1);
    }
    out
}

fn min_pairwise(points: &[Vector3<f64>]) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d = d.min((points[i] - points[j]).norm());
        }
    }
    d
}

/// Cameras evenly spaced on a horizontal orbit, all looking at the origin
/// with +z up.
pub fn orbit_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    (0..spec.n_views)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / spec.n_views as f64;
            let eye = Vector3::new(spec.orbit_radius * a.cos(), spec.orbit_radius * a.sin(), spec.orbit_height);
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), spec.intrinsics(), spec.width, spec.height)
        })
        .collect()
}

/// Builds a planted scene and renders its ground-truth maps with `opts`.
///
/// Gaussian `i` belongs to cluster `i mod n_prototypes`. Members are spread
/// within one scale of their cluster centre. The shared scale is
/// `mean(extent)/√n`, reduced when needed so that cluster centres stay at
/// least eight scales apart.
pub fn synth_scene(spec: &SceneSpec, opts: &RenderOptions) -> Result<SceneBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(spec.n_prototypes, spec.feature_dim, &mut rng)?;
    let colors: Vec<Vector3<f64>> = (0..spec.n_prototypes)
        .map(|_| Vector3::from_fn(|_, _| rng.gen_range(0.1..0.9)))
        .collect();
    let centres = cluster_centres(spec.n_prototypes, &spec.extent, &mut rng);
    let mean_extent = spec.extent.iter().sum::<f64>() / 3.0;
    let sigma = (mean_extent / (spec.n_gaussians as f64).sqrt()).min(min_pairwise(&centres) / CLUSTER_SEPARATION);

    let mut gaussians = Vec::with_capacity(spec.n_gaussians);
    let mut assignment = Vec::with_capacity(spec.n_gaussians);
    for i in 0..spec.n_gaussians {
        let c = i % spec.n_prototypes;
        let offset = loop {
            let v = Vector3::from_fn(|_, _| rng.gen_range(-1.0..=1.0));
            if v.norm_squared() <= 1.0 {
                break v * sigma;
            }
        };
        gaussians.push(Gaussian {
            mean: centres[c] + offset,
            scale: Vector3::repeat(sigma),
            rotation: Quaternion::identity(),
            opacity: SYNTH_OPACITY,
            color: colors[c],
            feature: protos[c].clone(),
        });
        assignment.push(c);
    }
    let field = GaussianField::new(gaussians, spec.feature_dim);
    field.ensure_valid()?;

    let cameras = orbit_cameras(spec)?;
    let mut gt_feature_maps = Vec::with_capacity(cameras.len());
    let mut gt_rgb = Vec::with_capacity(cameras.len());
    for (t, cam) in cameras.iter().enumerate() {
        let out = render(&field, cam, opts)?;
        let mut f = out.features.clone();
        f.frame_id = t;
        gt_rgb.push(out.rgb_map(t));
        gt_feature_maps.push(f);
    }
    Ok(SceneBundle {
        spec: spec.clone(),
        field,
        cameras,
        gt_feature_maps,
        gt_rgb,
        prototypes: protos,
        assignment,
        sigma,
    })
}

/// World-space points behind every `stride`-th pixel (in both axes) with a
/// finite positive depth. Depth maps are single-channel.
pub fn backproject(depth_maps: &[FeatureMap], cameras: &[Camera], stride: usize) -> Result<Vec<Vector3<f64>>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if depth_maps.len() != cameras.len() {
        return Err(Error::dim("depth maps vs cameras", cameras.len(), depth_maps.len()));
    }
    let mut out = Vec::new();
    for (map, cam) in depth_maps.iter().zip(cameras) {
        if map.dim != 1 {
            return Err(Error::dim("depth map channels", 1, map.dim));
        }
        if map.width != cam.width || map.height != cam.height {
            return Err(Error::InvalidArgument(format!(
                "depth map {}x{} does not match camera {}x{}",
                map.width, map.height, cam.width, cam.height
            )));
        }
        for y in (0..map.height).step_by(stride) {
            for x in (0..map.width).step_by(stride) {
                let z = map.pixel(x, y)[0];
                if z.is_finite() && z > 0.0 {
                    out.push(cam.camera_to_world(&cam.unproject(x as f64, y as f64, z)));
                }
            }
        }
    }
    Ok(out)
}

// ---- Gaussian field (.gsf) ----

pub fn encode_field(field: &GaussianField) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(&FIELD_MAGIC);
    e.u32(FIELD_VERSION);
    e.u64(field.len() as u64);
    e.u32(field.feature_dim as u32);
    for g in &field.gaussians {
        g.mean.iter().chain(g.scale.iter()).for_each(|v| e.f64(*v));
        let q = &g.rotation;
        [q.w, q.i, q.j, q.k].into_iter().for_each(|v| e.f64(v));
        e.f64(g.opacity);
        g.color.iter().for_each(|v| e.f64(*v));
        g.feature.iter().for_each(|v| e.f64(*v));
    }
    e.buf
}

pub fn decode_field(path: &Path, bytes: &[u8]) -> Result<GaussianField> {
    let mut d = Decoder::new(path, bytes);
    d.header(FIELD_MAGIC, FIELD_VERSION)?;
    let n = d.u64("gaussian count")?;
    let dim = d.u32("feature dim")? as usize;
    let n = d.count(n, 8 * (14 + dim), "gaussian records")?;
    let mut gs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v3 = |what: &str| -> Result<Vector3<f64>> { Ok(Vector3::new(d.f64(what)?, d.f64(what)?, d.f64(what)?)) };
        let mean = v3("mean")?;
        let scale = v3("scale")?;
        let (w, i, j, k) = (d.f64("rotation")?, d.f64("rotation")?, d.f64("rotation")?, d.f64("rotation")?);
        let opacity = d.f64("opacity")?;
        let color = Vector3::new(d.f64("color")?, d.f64("color")?, d.f64("color")?);
        let feature = (0..dim).map(|_| d.f64("feature")).collect::<Result<Vec<_>>>()?;
        gs.push(Gaussian {
            mean,
            scale,
            rotation: Quaternion::new(w, i, j, k),
            opacity,
            color,
            feature,
        });
    }
    d.finish()?;
    let field = GaussianField::new(gs, dim);
    field.ensure_valid()?;
    Ok(field)
}

pub fn save_field(path: &Path, field: &GaussianField) -> Result<()> {
    field.ensure_valid()?;
    atomic_write(path, &encode_field(field))
}

pub fn load_field(path: &Path) -> Result<GaussianField> {
    decode_field(path, &read_file(path)?)
}

// ---- Tensors (.fmt) ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

/// Dense row-major tensor, held as f64 whatever the stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor element count", n, data.len()));
        }
        Ok(Self { dims, data })
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(&TENSOR_MAGIC);
    e.u32(TENSOR_VERSION);
    e.u32(t.dims.len() as u32);
    t.dims.iter().for_each(|d| e.u32(*d as u32));
    e.u8(dtype.code());
    for v in &t.data {
        match dtype {
            DType::F64 => e.f64(*v),
            DType::F32 => e.f32(*v as f32),
        }
    }
    e.buf
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut d = Decoder::new(path, bytes);
    d.header(TENSOR_MAGIC, TENSOR_VERSION)?;
    let rank = d.u32("rank")? as u64;
    let rank = d.count(rank, 4, "dims")?;
    let dims = (0..rank)
        .map(|_| d.u32("dim").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let dtype = match d.u8("dtype")? {
        0 => DType::F64,
        1 => DType::F32,
        c => return Err(d.malformed(format!("unknown dtype code {c}"))),
    };
    let n = dims
        .iter()
        .try_fold(1u64, |a, &b| a.checked_mul(b as u64))
        .ok_or_else(|| d.malformed("tensor size overflows"))?;
    let n = d.count(n, dtype.size(), "tensor payload")?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(match dtype {
            DType::F64 => d.f64("tensor payload")?,
            DType::F32 => d.f32("tensor payload")? as f64,
        });
    }
    d.finish()?;
    Ok(Tensor { dims, data })
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    atomic_write(path, &encode_tensor(t, dtype))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(path, &read_file(path)?)
}

/// Stacks maps of one shape into a `[T, H, W, D]` tensor.
pub fn maps_to_tensor(maps: &[FeatureMap]) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Tensor::new(vec![0, 0, 0, 0], Vec::new());
    };
    let (w, h, dim) = (first.width, first.height, first.dim);
    let mut data = Vec::with_capacity(maps.len() * w * h * dim);
    for m in maps {
        if (m.width, m.height, m.dim) != (w, h, dim) {
            return Err(Error::InvalidArgument(format!(
                "map stack needs one shape: {}x{}x{} vs {}x{}x{}",
                h, w, dim, m.height, m.width, m.dim
            )));
        }
        data.extend_from_slice(&m.data);
    }
    Tensor::new(vec![maps.len(), h, w, dim], data)
}

/// Splits a `[T, H, W, D]` tensor into maps with frame ids `0..T`.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<FeatureMap>> {
    let &[n, h, w, dim] = t.dims.as_slice() else {
        return Err(Error::InvalidArgument(format!("map stack must have rank 4, got {}", t.dims.len())));
    };
    let per = h * w * dim;
    (0..n)
        .map(|i| FeatureMap::from_data(w, h, dim, t.data[i * per..(i + 1) * per].to_vec(), i))
        .collect()
}

/// Feature or image maps, written losslessly as f64.
pub fn save_maps(path: &Path, maps: &[FeatureMap]) -> Result<()> {
    save_tensor(path, &maps_to_tensor(maps)?, DType::F64)
}

pub fn load_maps(path: &Path) -> Result<Vec<FeatureMap>> {
    let bytes = read_file(path)?;
    let t = decode_tensor(path, &bytes)?;
    tensor_to_maps(&t).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

// ---- Cameras (.cam, TOML) ----

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world→camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    near: f64,
    far: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    #[serde(default)]
    camera: Vec<CameraRecord>,
}

pub fn cameras_to_toml(cams: &[Camera]) -> String {
    let file = CameraFile {
        camera: cams
            .iter()
            .map(|c| CameraRecord {
                width: c.width,
                height: c.height,
                fx: c.intrinsics.fx,
                fy: c.intrinsics.fy,
                cx: c.intrinsics.cx,
                cy: c.intrinsics.cy,
                rotation: [0, 1, 2].map(|r| [0, 1, 2].map(|k| c.rotation[(r, k)])),
                translation: [c.translation.x, c.translation.y, c.translation.z],
                near: c.near,
                far: c.far,
            })
            .collect(),
    };
    toml::to_string(&file).expect("camera records serialise")
}

pub fn cameras_from_toml(path: &Path, text: &str) -> Result<Vec<Camera>> {
    let file: CameraFile = toml::from_str(text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    file.camera
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let cam = Camera {
                intrinsics: Intrinsics {
                    fx: r.fx,
                    fy: r.fy,
                    cx: r.cx,
                    cy: r.cy,
                },
                width: r.width,
                height: r.height,
                rotation: Matrix3::from_fn(|a, b| r.rotation[a][b]),
                translation: Vector3::from(r.translation),
                near: r.near,
                far: r.far,
            };
            cam.validate().map_err(|e| match e {
                Error::InvalidCamera(m) => Error::InvalidCamera(format!("{}: camera {i}: {m}", path.display())),
                other => other,
            })?;
            Ok(cam)
        })
        .collect()
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    atomic_write(path, cameras_to_toml(cams).as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Malformed {
        path: path.to_path_buf(),
        detail: "camera file is not UTF-8".into(),
    })?;
    cameras_from_toml(path, &text)
}
