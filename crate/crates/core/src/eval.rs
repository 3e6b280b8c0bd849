//! Image and feature-map comparison metrics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lift::cosine;
use crate::raster::{FeatureMap, COVERAGE_EPS};

/// Metrics for one view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewEval {
    pub view: usize,
    /// `None` when no RGB was compared; infinite for identical images.
    #[serde(serialize_with = "psnr_ser")]
    pub psnr: Option<f64>,
    pub feature_mse: f64,
    pub mean_cosine: f64,
    pub coverage_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "psnr_ser")]
    pub psnr: Option<f64>,
    pub feature_mse: f64,
    pub mean_cosine: f64,
    pub coverage_fraction: f64,
    pub per_view: Vec<ViewEval>,
}

fn psnr_ser<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(p) if p.is_infinite() => s.serialize_str("exact"),
        Some(p) => s.serialize_f64(*p),
        None => s.serialize_none(),
    }
}

/// PSNR in dB for values in [0, 1]; infinite when `mse` is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn format_psnr(p: Option<f64>) -> String {
    match p {
        None => "-".into(),
        Some(p) if p.is_infinite() => "exact".into(),
        Some(p) => format!("{p:.3}"),
    }
}

fn same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if (a.width, a.height, a.dim) != (b.width, b.height, b.dim) {
        return Err(Error::InvalidArgument(format!(
            "{what} shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.dim, b.height, b.width, b.dim
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Sums {
    sq_feat: f64,
    n_feat: usize,
    sq_rgb: f64,
    n_rgb: usize,
    cos: f64,
    n_cos: usize,
    covered: usize,
    pixels: usize,
}

/// Compares rendered feature maps (and optionally RGB) against ground
/// truth. A pixel counts as covered when its alpha exceeds the coverage
/// threshold, or, without alpha maps, when its rendered feature is
/// non-zero. Cosine is averaged over pixels where both vectors are
/// non-zero.
pub fn evaluate(
    features: &[FeatureMap],
    gt_features: &[FeatureMap],
    rgb: Option<(&[FeatureMap], &[FeatureMap])>,
    alpha: Option<&[FeatureMap]>,
) -> Result<EvalReport> {
    if features.len() != gt_features.len() {
        return Err(Error::dim("rendered vs ground-truth view count", gt_features.len(), features.len()));
    }
    if let Some((r, g)) = rgb {
        if r.len() != features.len() || g.len() != features.len() {
            return Err(Error::dim("rgb view count", features.len(), r.len().min(g.len())));
        }
    }
    if let Some(a) = alpha {
        if a.len() != features.len() {
            return Err(Error::dim("alpha view count", features.len(), a.len()));
        }
    }
    let mut total = Sums::default();
    let mut per_view = Vec::with_capacity(features.len());
    for t in 0..features.len() {
        let (f, g) = (&features[t], &gt_features[t]);
        same_shape(f, g, "feature map")?;
        if let Some(al) = alpha {
            if al[t].data.len() != f.num_pixels() {
                return Err(Error::dim("alpha map pixels", f.num_pixels(), al[t].data.len()));
            }
        }
        let mut s = Sums::default();
        for p in 0..f.num_pixels() {
            let (a, b) = (f.pixel_index(p), g.pixel_index(p));
            s.sq_feat += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            s.n_feat += a.len();
            if let Some(c) = cosine(a, b) {
                s.cos += c;
                s.n_cos += 1;
            }
            let covered = match alpha {
                Some(al) => al[t].data[p] > COVERAGE_EPS,
                None => a.iter().any(|v| *v != 0.0),
            };
            s.covered += covered as usize;
            s.pixels += 1;
        }
        let psnr = match rgb {
            Some((r, gr)) => {
                same_shape(&r[t], &gr[t], "rgb map")?;
                s.sq_rgb = r[t].data.iter().zip(&gr[t].data).map(|(x, y)| (x - y) * (x - y)).sum();
                s.n_rgb = r[t].data.len();
                Some(psnr_from_mse(s.sq_rgb / s.n_rgb.max(1) as f64))
            }
            None => None,
        };
        per_view.push(ViewEval {
            view: t,
            psnr,
            feature_mse: s.sq_feat / s.n_feat.max(1) as f64,
            mean_cosine: if s.n_cos == 0 { 0.0 } else { s.cos / s.n_cos as f64 },
            coverage_fraction: s.covered as f64 / s.pixels.max(1) as f64,
        });
        total.sq_feat += s.sq_feat;
        total.n_feat += s.n_feat;
        total.sq_rgb += s.sq_rgb;
        total.n_rgb += s.n_rgb;
        total.cos += s.cos;
        total.n_cos += s.n_cos;
        total.covered += s.covered;
        total.pixels += s.pixels;
    }
    Ok(EvalReport {
        psnr: rgb.map(|_| psnr_from_mse(total.sq_rgb / total.n_rgb.max(1) as f64)),
        feature_mse: total.sq_feat / total.n_feat.max(1) as f64,
        mean_cosine: if total.n_cos == 0 { 0.0 } else { (total.cos / total.n_cos as f64).clamp(-1.0, 1.0) },
        coverage_fraction: total.covered as f64 / total.pixels.max(1) as f64,
        per_view,
    })
}

impl EvalReport {
    /// Plain-text table: one line per view, then the totals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>6} {:>10} {:>14} {:>12} {:>10}", "view", "psnr", "feature_mse", "mean_cos", "coverage").unwrap();
        for v in &self.per_view {
            writeln!(
                s,
                "{:>6} {:>10} {:>14.6e} {:>12.6} {:>10.4}",
                v.view,
                format_psnr(v.psnr),
                v.feature_mse,
                v.mean_cosine,
                v.coverage_fraction
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:>6} {:>10} {:>14.6e} {:>12.6} {:>10.4}",
            "all",
            format_psnr(self.psnr),
            self.feature_mse,
            self.mean_cosine,
            self.coverage_fraction
        )
        .unwrap();
        s
    }
}
