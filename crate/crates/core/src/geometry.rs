//! Gaussian and camera types plus the projection math shared by the
//! renderer, the lifter and the samplers.
//!
//! Pixel coordinates follow the integer-centre convention: pixel `(u, v)`
//! is sampled at exactly `(u, v)` in image space, so a point on the optical
//! axis lands at `(cx, cy)`. Camera space is x right, y down, z forward.

use std::fmt;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal regularisation added to every projected 2D covariance, in px².
pub const COV2D_EPS: f64 = 0.3;
/// Culling radius in standard deviations of the major 2D axis.
pub const CULL_SIGMA: f64 = 3.0;

const QUAT_NORM_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviation, strictly positive.
    pub scale: Vector3<f64>,
    /// Unit quaternion.
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub feature: Vec<f64>,
}

impl Gaussian {
    /// Isotropic, unrotated Gaussian.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, feature: Vec<f64>) -> Self {
        Self {
            mean,
            scale: Vector3::repeat(sigma),
            rotation: Quaternion::identity(),
            opacity,
            color: Vector3::repeat(0.5),
            feature,
        }
    }
}

/// An ordered collection of Gaussians sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub gaussians: Vec<Gaussian>,
    pub feature_dim: usize,
}

impl GaussianField {
    pub fn new(gaussians: Vec<Gaussian>, feature_dim: usize) -> Self {
        Self {
            gaussians,
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Axis-aligned bounds of the Gaussian means, `None` for an empty field.
    pub fn bbox(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.mean;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.mean), hi.sup(&g.mean))
        }))
    }

    /// Row-major N×D copy of all features.
    pub fn feature_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.feature_dim);
        for g in &self.gaussians {
            out.extend_from_slice(&g.feature);
        }
        out
    }

    /// Copy of the field with features replaced from a row-major N×D' matrix.
    pub fn with_features(&self, features: &[f64], dim: usize) -> Result<GaussianField> {
        if features.len() != self.len() * dim {
            return Err(Error::dim("feature matrix length", self.len() * dim, features.len()));
        }
        let gaussians = self
            .gaussians
            .iter()
            .zip(features.chunks(dim.max(1)))
            .map(|(g, f)| Gaussian {
                feature: f.to_vec(),
                ..g.clone()
            })
            .collect();
        Ok(GaussianField::new(gaussians, dim))
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = validate_field(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidField(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptyField,
    NonPositiveScale,
    RotationNotUnit,
    OpacityOutOfRange,
    ColorOutOfRange,
    FeatureDimMismatch { expected: usize, actual: usize },
    NonFinite,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::EmptyField => write!(f, "field has no gaussians"),
            Rule::NonPositiveScale => write!(f, "scale components must be > 0"),
            Rule::RotationNotUnit => write!(f, "rotation quaternion must have unit norm"),
            Rule::OpacityOutOfRange => write!(f, "opacity must lie in [0, 1]"),
            Rule::ColorOutOfRange => write!(f, "color must lie in [0, 1]"),
            Rule::FeatureDimMismatch { expected, actual } => {
                write!(f, "feature has dimension {actual}, field expects {expected}")
            }
            Rule::NonFinite => write!(f, "attribute is not finite"),
        }
    }
}

/// One broken invariant. `index` is `None` for field-level rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "gaussian {i}: {}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

/// Checks every Gaussian against its invariants. An empty result means the
/// field is well formed.
pub fn validate_field(field: &GaussianField) -> Vec<Violation> {
    let mut out = Vec::new();
    if field.gaussians.is_empty() {
        out.push(Violation {
            index: None,
            rule: Rule::EmptyField,
        });
    }
    for (i, g) in field.gaussians.iter().enumerate() {
        let mut push = |rule| {
            out.push(Violation {
                index: Some(i),
                rule,
            })
        };
        let finite = g.mean.iter().all(|x| x.is_finite())
            && g.scale.iter().all(|x| x.is_finite())
            && g.rotation.coords.iter().all(|x| x.is_finite())
            && g.opacity.is_finite()
            && g.color.iter().all(|x| x.is_finite())
            && g.feature.iter().all(|x| x.is_finite());
        if !finite {
            push(Rule::NonFinite);
            continue;
        }
        if g.scale.iter().any(|&s| s <= 0.0) {
            push(Rule::NonPositiveScale);
        }
        if (g.rotation.norm() - 1.0).abs() > QUAT_NORM_TOL {
            push(Rule::RotationNotUnit);
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            push(Rule::OpacityOutOfRange);
        }
        if g.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            push(Rule::ColorOutOfRange);
        }
        if g.feature.len() != field.feature_dim {
            push(Rule::FeatureDimMismatch {
                expected: field.feature_dim,
                actual: g.feature.len(),
            });
        }
    }
    out
}

/// World-space covariance `R(q)·diag(s²)·R(q)ᵀ`.
pub fn covariance_of(g: &Gaussian) -> Matrix3<f64> {
    let r = UnitQuaternion::new_unchecked(g.rotation)
        .to_rotation_matrix()
        .into_inner();
    let m = r * Matrix3::from_diagonal(&g.scale);
    m * m.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera with a world→camera pose `x_cam = R·x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with world `up` mapped to image
    /// up (negative camera y).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let cam = Camera {
            intrinsics,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
            near: 0.01,
            far: 1000.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let bad = |m: String| Err(Error::InvalidCamera(m));
        if ![k.fx, k.fy, k.cx, k.cy, self.near, self.far]
            .iter()
            .all(|x| x.is_finite())
            || !self.rotation.iter().all(|x| x.is_finite())
            || !self.translation.iter().all(|x| x.is_finite())
        {
            return bad("non-finite parameter".into());
        }
        if k.fx <= 0.0 || k.fy <= 0.0 {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", k.fx, k.fy));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad(format!("need 0 < near < far (near={}, far={})", self.near, self.far));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("resolution must be at least 1x1 ({}x{})", self.width, self.height));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if err > ROTATION_TOL {
            return bad(format!("rotation is not orthonormal (|R·Rᵀ − I| = {err:e})"));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pinhole projection of a camera-space point.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
    }

    /// Camera-space point at depth `z` behind pixel coordinate `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let k = &self.intrinsics;
        Camera {
            intrinsics: Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: (k.cx + 0.5) * sx - 0.5,
                cy: (k.cy + 0.5) * sy - 0.5,
            },
            width,
            height,
            ..self.clone()
        }
    }
}

/// A Gaussian projected into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Culling radius in pixels.
    pub radius: f64,
    /// Camera-space z.
    pub depth: f64,
    pub opacity: f64,
    pub source_index: usize,
}

impl Splat2D {
    /// Squared Mahalanobis distance of pixel `(x, y)` from the splat centre.
    pub fn power(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy
    }
}

/// EWA projection of `g` into `cam`. Returns `None` when the centre lies
/// outside the depth range or the 3σ footprint misses the image.
pub fn project(g: &Gaussian, index: usize, cam: &Camera) -> Option<Splat2D> {
    let p = cam.world_to_camera(&g.mean);
    let z = p.z;
    if !(z > cam.near && z < cam.far) {
        return None;
    }
    let k = &cam.intrinsics;
    let jac = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * p.x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * p.y / (z * z),
    );
    let t = jac * cam.rotation;
    let mut cov2d = t * covariance_of(g) * t.transpose();
    // symmetrise before regularising so conic is exactly symmetric
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += COV2D_EPS;
    cov2d[(1, 1)] += COV2D_EPS;

    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if det <= 0.0 {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = CULL_SIGMA * lambda_max.sqrt();

    let mean2d = cam.project_camera_point(&p);
    let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    if mean2d.x + radius < 0.0 || mean2d.x - radius > w || mean2d.y + radius < 0.0 || mean2d.y - radius > h {
        return None;
    }
    let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);
    Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        radius,
        depth: z,
        opacity: g.opacity,
        source_index: index,
    })
}
