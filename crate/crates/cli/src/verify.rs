//! The oracle suite behind `featsplat verify`. Every check runs in-process,
//! is seeded, and reports a measured value against a fixed tolerance.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, ensure, Result};
use nalgebra::{DMatrix, Matrix3, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use featsplat::autoenc::{self, encode_checkpoint, AEConfig, AEModel};
use featsplat::lift::{
    auto_lr, em_lift, gd_lift, objective_gradient, GdOptions, LiftOptions, LiftProblem, LiftResult, View,
};
use featsplat::raster::{render, render_brute_force, responsibilities, FeatureMap, RenderOptions};
use featsplat::sample::{
    self, budget, decode_tokens, encode_tokens, export_tokens, feature_entropy, sample_fps, SampleRequest, Strategy,
    TokenSet,
};
use featsplat::scene::{
    cameras_from_toml, cameras_to_toml, decode_field, decode_tensor, encode_field, encode_tensor, synth_scene, DType,
    SceneBundle, SceneSpec, Tensor,
};
use featsplat::{Camera, Error, Gaussian, GaussianField, Intrinsics};

pub const RENDER_TOL: f64 = 1e-5;
pub const RESP_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-6;
pub const CYCLE_TOL: f64 = 1e-10;
pub const GD_EM_TOL: f64 = 1e-4;
pub const GD_GRAD_TOL: f64 = 1e-8;
pub const MASS_FLOOR: f64 = 1e-3;
pub const RECOVERY_COS: f64 = 0.99;
pub const UNIT_NORM_TOL: f64 = 1e-6;
pub const AE_GRAD_TOL: f64 = 1e-4;
pub const OVERFIT_LOSS: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    /// Wall-clock limit, when the check has one.
    pub limit_seconds: Option<f64>,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<4} {} ({:.2} s{}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.limit_seconds.map(|l| format!(" / {l:.0} s")).unwrap_or_default(),
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s: String = self.checks.iter().map(|c| c.line() + "\n").collect();
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("{} checks, {} failed\n", self.checks.len(), failed));
        s
    }
}

/// A check yields `(passed, detail)`; errors and panics count as failures.
type CheckFn = fn(&RenderOptions) -> Result<(bool, String)>;

pub struct Check {
    pub id: &'static str,
    pub name: &'static str,
    pub limit_seconds: Option<f64>,
    pub run: CheckFn,
}

pub fn checks() -> Vec<Check> {
    let c = |id, name, limit_seconds, run| Check { id, name, limit_seconds, run };
    vec![
        c("1", "tiled render matches brute force", Some(30.0), check_render_equivalence as CheckFn),
        c("2", "responsibilities sum to one", None, check_responsibilities),
        c("3", "EM result is a fixed point", None, check_em_fixed_point),
        c("4", "gradient descent agrees with EM", None, check_gd_matches_em),
        c("5", "planted prototypes recovered", Some(10.0), check_planted_recovery),
        c("6a", "encoder output is unit norm", None, check_unit_norm),
        c("6b", "autoencoder gradients match finite differences", None, check_ae_gradients),
        c("6c", "autoencoder overfits the fixture", None, check_ae_overfit),
        c("7a", "entropy of a constant vector is ln D", None, check_constant_entropy),
        c("7b", "farthest-point sampling is greedy", None, check_fps_greedy),
        c("7c", "sampling is deterministic and duplicate-free", None, check_sampling_determinism),
        c("8", "token budgets", None, check_budgets),
        c("9", "file round-trips and malformed inputs", None, check_io),
        c("10", "pipeline reruns are bit-identical", None, check_pipeline_determinism),
    ]
}

/// Runs the checks whose id is in `only` (all when empty). Criterion 6's
/// runtime limit covers 6a–6c together.
pub fn run_checks(only: &[String], opts: &RenderOptions) -> VerifyReport {
    let mut results = Vec::new();
    for c in checks() {
        let group = c.id.trim_end_matches(char::is_alphabetic);
        if !only.is_empty() && !only.iter().any(|o| o == c.id || o == group) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(opts)));
        let seconds = start.elapsed().as_secs_f64();
        let (mut passed, mut detail) = match outcome {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(p) => (false, format!("panic: {}", panic_message(&p))),
        };
        if let Some(limit) = c.limit_seconds {
            if seconds > limit {
                passed = false;
                detail.push_str(&format!("; exceeded {limit} s"));
            }
        }
        log::info!("check {} {}: {}", c.id, if passed { "passed" } else { "FAILED" }, detail);
        results.push(CheckResult {
            id: c.id.into(),
            name: c.name.into(),
            passed,
            detail,
            seconds,
            limit_seconds: c.limit_seconds,
        });
    }
    let ae: Vec<&CheckResult> = results.iter().filter(|r| r.id.starts_with('6')).collect();
    if ae.len() == 3 {
        let total: f64 = ae.iter().map(|r| r.seconds).sum();
        results.push(CheckResult {
            id: "6".into(),
            name: "autoencoder checks within 60 s".into(),
            passed: total < 60.0,
            detail: format!("6a-6c took {total:.2} s"),
            seconds: total,
            limit_seconds: Some(60.0),
        });
    }
    VerifyReport { checks: results }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- fixtures ----

fn random_unit_quaternion(rng: &mut impl Rng) -> Quaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n < 1.0 {
            return q / n;
        }
    }
}

/// Up to `max_n` anisotropic, rotated Gaussians in a unit box, with a
/// camera looking at the box from a random direction.
pub fn random_scene(seed: u64, max_n: usize, dim: usize, size: usize) -> (GaussianField, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_n);
    let gaussians = (0..n)
        .map(|_| Gaussian {
            mean: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
            scale: Vector3::from_fn(|_, _| rng.gen_range(0.02..0.3)),
            rotation: random_unit_quaternion(&mut rng),
            opacity: rng.gen_range(0.05..0.99),
            color: Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
            feature: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let dir = loop {
        let v = Vector3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        if v.norm() > 0.2 && v.norm() <= 1.0 && v.z.abs() < 0.9 * v.norm() {
            break v.normalize();
        }
    };
    let f = 0.5 * size as f64 / (30f64.to_radians()).tan();
    let c = (size as f64 - 1.0) / 2.0;
    let cam = Camera::look_at(
        dir * 4.0,
        Vector3::zeros(),
        Vector3::z(),
        Intrinsics { fx: f, fy: f, cx: c, cy: c },
        size,
        size,
    )
    .expect("random direction is never parallel to up");
    (GaussianField::new(gaussians, dim), cam)
}

fn bundle_problem(b: &SceneBundle, targets: Vec<FeatureMap>, opts: &RenderOptions, iters: usize) -> LiftProblem {
    let d = b.field.feature_dim;
    let field = b.field.with_features(&vec![0.0; b.field.len() * d], d).expect("zero features are valid");
    let views = b.cameras.iter().cloned().zip(targets).map(|(camera, target)| View { camera, target }).collect();
    LiftProblem::new(
        field,
        views,
        LiftOptions {
            iters,
            render: *opts,
            ..Default::default()
        },
    )
}

/// Synthetic scene whose targets carry seeded Gaussian-ish noise, so the
/// lifting problem has no zero-residual solution.
fn noisy_problem(seed: u64, opts: &RenderOptions, iters: usize) -> Result<(LiftProblem, SceneBundle)> {
    let b = synth_scene(&SceneSpec::new(40, 4, 8, 6, 32, seed), opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let targets = b
        .gt_feature_maps
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.data.iter_mut().for_each(|v| *v += 0.1 * (rng.gen::<f64>() - 0.5));
            m
        })
        .collect();
    Ok((bundle_problem(&b, targets, opts, iters), b))
}

fn max_row_norm(grad: &[f64], d: usize, rows: impl Iterator<Item = usize>) -> (f64, usize) {
    rows.map(|i| (grad[i * d..(i + 1) * d].iter().map(|g| g * g).sum::<f64>().sqrt(), i))
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

// ---- 1-4: rendering and lifting ----

fn check_render_equivalence(opts: &RenderOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (field, cam) = random_scene(seed, 200, 16, 32);
        let a = render(&field, &cam, opts)?;
        let b = render_brute_force(&field, &cam, opts)?;
        worst = worst.max(max_abs_diff(&a.rgb, &b.rgb)).max(max_abs_diff(&a.features.data, &b.features.data));
    }
    Ok((worst < RENDER_TOL, format!("max |tiled - brute| = {worst:.3e} over 20 scenes (tol {RENDER_TOL:e})")))
}

fn check_responsibilities(opts: &RenderOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut covered = 0usize;
    let mut cams: Vec<(GaussianField, Camera)> = (0..20).map(|s| random_scene(s, 200, 16, 32)).collect();
    for seed in 0..5 {
        let b = synth_scene(&SceneSpec::new(40, 4, 8, 6, 32, seed), opts)?;
        cams.extend(b.cameras.into_iter().map(|c| (b.field.clone(), c)));
    }
    for (field, cam) in &cams {
        let r = responsibilities(field, cam, opts)?;
        for p in 0..r.coverage.len() {
            if r.coverage[p] > featsplat::raster::COVERAGE_EPS {
                covered += 1;
                let s: f64 = r.pixel(p).iter().map(|&(_, v)| v).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    Ok((
        worst < RESP_TOL && covered > 0,
        format!("max |sum R - 1| = {worst:.3e} on {covered} covered pixels (tol {RESP_TOL:e})"),
    ))
}

fn check_em_fixed_point(opts: &RenderOptions) -> Result<(bool, String)> {
    let (mut worst_grad, mut worst_delta, mut worst_all) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5 {
        let (p, _) = noisy_problem(seed, opts, 2)?;
        let r = em_lift(&p)?;
        let d = r.dim;
        let grad = objective_gradient(&p, &r.features)?;
        let mut active = vec![true; p.field.len()];
        r.uncovered.iter().for_each(|&i| active[i] = false);
        let (g, _) = max_row_norm(&grad, d, (0..p.field.len()).filter(|&i| active[i]));
        let (ga, _) = max_row_norm(&grad, d, 0..p.field.len());
        worst_grad = worst_grad.max(g);
        worst_all = worst_all.max(ga);
        worst_delta = worst_delta.max(r.cycle_deltas.iter().copied().fold(0.0, f64::max));
    }
    Ok((
        worst_grad < GRAD_TOL && worst_delta < CYCLE_TOL,
        format!(
            "max gradient norm {worst_grad:.3e} (all Gaussians incl. uncovered {worst_all:.3e}, tol {GRAD_TOL:e}); \
             second-cycle change {worst_delta:.3e} (tol {CYCLE_TOL:e}) over 5 noisy scenes"
        ),
    ))
}

/// Lifts one noisy scene both ways; returns the max difference on Gaussians
/// with mass above the floor, and the GD step count.
pub fn gd_vs_em(seed: u64, opts: &RenderOptions) -> Result<(f64, usize)> {
    let (p, _) = noisy_problem(seed, opts, 1)?;
    let em = em_lift(&p)?;
    let gd = gd_lift(
        &p,
        &GdOptions {
            lr: auto_lr(&p)?,
            max_steps: 500_000,
            grad_tol: GD_GRAD_TOL,
        },
    )?;
    Ok((heavy_diff(&em, &gd), gd.loss_history.len()))
}

fn heavy_diff(a: &LiftResult, b: &LiftResult) -> f64 {
    (0..a.mass.len())
        .filter(|&i| a.mass[i] > MASS_FLOOR)
        .map(|i| max_abs_diff(a.feature(i), b.feature(i)))
        .fold(0.0, f64::max)
}

fn check_gd_matches_em(opts: &RenderOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut steps = 0;
    for seed in 0..10 {
        let (d, s) = gd_vs_em(100 + seed, opts)?;
        worst = worst.max(d);
        steps = steps.max(s);
    }
    Ok((
        worst < GD_EM_TOL,
        format!("max |gd - em| = {worst:.3e} on mass > {MASS_FLOOR:e} over 10 scenes, at most {steps} GD steps (tol {GD_EM_TOL:e})"),
    ))
}

// ---- 5: planted recovery ----

/// Worst cosine between a lifted feature and its planted prototype over
/// Gaussians with mass above the floor.
pub fn planted_worst_cosine(seed: u64, opts: &RenderOptions) -> Result<(f64, usize)> {
    let b = synth_scene(&SceneSpec::new(20, 4, 16, 8, 64, seed), opts)?;
    let p = bundle_problem(&b, b.gt_feature_maps.clone(), opts, 1);
    let r = em_lift(&p)?;
    let mut worst = 1.0f64;
    let mut counted = 0;
    for i in 0..b.field.len() {
        if r.mass[i] <= MASS_FLOOR {
            continue;
        }
        counted += 1;
        let c = featsplat::lift::cosine(r.feature(i), &b.prototypes[b.assignment[i]]).unwrap_or(-1.0);
        worst = worst.min(c);
    }
    Ok((worst, counted))
}

fn check_planted_recovery(opts: &RenderOptions) -> Result<(bool, String)> {
    let mut worst = 1.0f64;
    let mut counted = 0;
    for seed in 1..=5 {
        let (c, n) = planted_worst_cosine(seed, opts)?;
        worst = worst.min(c);
        counted += n;
    }
    Ok((
        worst > RECOVERY_COS && counted > 0,
        format!("min cosine {worst:.12} over {counted} covered Gaussians in 5 scenes (need > {RECOVERY_COS})"),
    ))
}

// ---- 6: autoencoder ----

fn random_rows(rng: &mut impl Rng, m: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, d, |_, _| rng.gen_range(-1.0..1.0))
}

fn check_unit_norm(_: &RenderOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut rows = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..10u64 {
        let mut cfg = AEConfig::desk_scale();
        cfg.seed = seed;
        let mut model = AEModel::new(&cfg)?;
        let x = random_rows(&mut rng, 32, cfg.encoder_dims[0]) * 10.0;
        // exercise trained running statistics as well as the initial ones
        if seed % 2 == 1 {
            cfg.epochs = 2;
            autoenc::train_model(&mut model, &cfg, &x)?;
        }
        let z = model.encode(&x)?;
        for r in 0..z.nrows() {
            worst = worst.max((z.row(r).norm() - 1.0).abs());
            rows += 1;
        }
    }
    Ok((worst < UNIT_NORM_TOL, format!("max | |z| - 1 | = {worst:.3e} over {rows} codes (tol {UNIT_NORM_TOL:e})")))
}

/// A small random architecture: 1-2 hidden layers, optional BN.
pub fn tiny_model(seed: u64) -> Result<(AEModel, DMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.gen_range(3..=7);
    let latent = rng.gen_range(2..=3);
    let hidden = rng.gen_range(3..=6);
    let mut cfg = AEConfig::desk_scale();
    cfg.encoder_dims = if rng.gen_bool(0.5) { vec![input, hidden, latent] } else { vec![input, latent] };
    cfg.decoder_dims = if rng.gen_bool(0.5) { vec![latent, hidden, input] } else { vec![latent, input] };
    cfg.batch_norm = rng.gen_bool(0.5);
    cfg.seed = seed;
    let model = AEModel::new(&cfg)?;
    let m = rng.gen_range(3..=6);
    let x = random_rows(&mut rng, m, input);
    Ok((model, x))
}

fn check_ae_gradients(_: &RenderOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (model, x) = tiny_model(seed)?;
        worst = worst.max(autoenc::grad_check(&model, &x, 1e-5)?);
    }
    Ok((worst < AE_GRAD_TOL, format!("max relative error {worst:.3e} over 100 models (tol {AE_GRAD_TOL:e})")))
}

/// Trains the overfit fixture; returns (final full-set loss in inference
/// mode, last epoch's mean training-mode loss, optimiser steps).
pub fn overfit_run(seed: u64) -> Result<(f64, f64, usize)> {
    let (cfg, data) = autoenc::overfit_fixture(seed);
    let (model, history) = autoenc::train(&cfg, &data)?;
    let steps = cfg.epochs * (data.nrows() / cfg.batch_size);
    Ok((model.loss(&data)?, *history.last().expect("at least one epoch"), steps))
}

fn check_ae_overfit(_: &RenderOptions) -> Result<(bool, String)> {
    let (loss, epoch_loss, steps) = overfit_run(0)?;
    Ok((
        loss < OVERFIT_LOSS && steps <= 2000,
        format!("loss {loss:.3e} after {steps} AdamW steps at lr 1e-4 (last epoch training-mode mean {epoch_loss:.3e}; need < {OVERFIT_LOSS:e})"),
    ))
}

// ---- 7-8: sampling ----

fn check_constant_entropy(_: &RenderOptions) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [2usize, 16, 256] {
        for c in [0.0, 1.5, -3.25] {
            let h = feature_entropy(&vec![c; d])?;
            ok &= h == (d as f64).ln();
        }
        parts.push(format!("D={d}: {:.17}", feature_entropy(&vec![0.0; d])?));
    }
    Ok((ok, parts.join(", ")))
}

fn random_field(rng: &mut impl Rng, n: usize, d: usize) -> GaussianField {
    let gaussians = (0..n)
        .map(|_| {
            Gaussian::isotropic(
                Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                0.05,
                0.5,
                (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
        })
        .collect();
    GaussianField::new(gaussians, d)
}

fn check_fps_greedy(_: &RenderOptions) -> Result<(bool, String)> {
    let mut violations = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let n = rng.gen_range(2..=200);
        let field = random_field(&mut rng, n, 2);
        let k = rng.gen_range(1..=n);
        let picked = sample_fps(&field, k, seed)?;
        let pts: Vec<_> = field.gaussians.iter().map(|g| g.mean).collect();
        for step in 1..picked.len() {
            let chosen = &picked[..step];
            let score = |j: usize| chosen.iter().map(|&s| (pts[j] - pts[s]).norm()).fold(f64::INFINITY, f64::min);
            // first index reaching the maximum among the unselected
            let best = (0..n).filter(|j| !chosen.contains(j)).fold(None, |b: Option<(usize, f64)>, j| match b {
                Some((_, bs)) if bs >= score(j) => b,
                _ => Some((j, score(j))),
            });
            if best.map(|b| b.0) != Some(picked[step]) {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} non-greedy picks over 20 seeded fields")))
}

fn check_sampling_determinism(_: &RenderOptions) -> Result<(bool, String)> {
    let mut problems = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let n = rng.gen_range(10..=200);
        let field = random_field(&mut rng, n, 8);
        let k = rng.gen_range(1..=n);
        for s in Strategy::ALL {
            let mut req = SampleRequest::new(s, k, seed);
            req.density_radius = 0.4;
            let a = sample::sample(&field, &req)?;
            let b = sample::sample(&field, &req)?;
            let mut sorted = a.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if a != b {
                problems.push(format!("{s} seed {seed} not deterministic"));
            }
            if sorted.len() != a.len() || a.len() != k || a.iter().any(|&i| i >= n) {
                problems.push(format!("{s} seed {seed} returned duplicates or a bad count"));
            }
        }
    }
    Ok((problems.is_empty(), if problems.is_empty() { "4 strategies x 5 fields".into() } else { problems.join("; ") }))
}

fn check_budgets(_: &RenderOptions) -> Result<(bool, String)> {
    let (a, b) = (budget(44, 729), budget(1, 729));
    Ok((a == 32_076 && b == 729, format!("budget(44, 729) = {a}, budget(1, 729) = {b}")))
}

// ---- 9: I/O ----

/// Feeds every truncation and a set of single-byte corruptions of `bytes`
/// to `decode`; each must return (error or value) without panicking, and
/// truncations must be rejected.
fn fuzz_decoder<T>(name: &str, bytes: &[u8], decode: impl Fn(&[u8]) -> featsplat::Result<T>) -> Result<()> {
    for cut in 0..bytes.len() {
        match catch_unwind(AssertUnwindSafe(|| decode(&bytes[..cut]))) {
            Ok(Ok(_)) => return Err(anyhow!("{name}: truncation to {cut} bytes was accepted")),
            Ok(Err(_)) => {}
            Err(_) => return Err(anyhow!("{name}: panic on truncation to {cut} bytes")),
        }
    }
    let mut trailing = bytes.to_vec();
    trailing.push(0);
    ensure!(decode(&trailing).is_err(), "{name}: trailing byte was accepted");
    let mut rng = ChaCha8Rng::seed_from_u64(bytes.len() as u64);
    for _ in 0..200 {
        let mut b = bytes.to_vec();
        let at = rng.gen_range(0..b.len());
        b[at] ^= 1 << rng.gen_range(0..8);
        if catch_unwind(AssertUnwindSafe(|| decode(&b))).is_err() {
            return Err(anyhow!("{name}: panic on corrupted byte {at}"));
        }
    }
    Ok(())
}

fn random_tensor(rng: &mut impl Rng, f32_exact: bool) -> Tensor {
    let dims: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=5)).collect();
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1e3..1e3);
            if f32_exact {
                v as f32 as f64
            } else {
                v
            }
        })
        .collect();
    Tensor::new(dims, data).expect("dims match data")
}

fn random_cameras(rng: &mut impl Rng) -> Vec<Camera> {
    (0..rng.gen_range(1..=4))
        .map(|_| {
            let eye = Vector3::new(rng.gen_range(2.0..5.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            let (w, h) = (rng.gen_range(1..=80), rng.gen_range(1..=80));
            let mut c = Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::z(),
                Intrinsics {
                    fx: rng.gen_range(10.0..100.0),
                    fy: rng.gen_range(10.0..100.0),
                    cx: rng.gen_range(0.0..w as f64),
                    cy: rng.gen_range(0.0..h as f64),
                },
                w,
                h,
            )
            .expect("eye is off the up axis");
            c.near = rng.gen_range(0.001..0.5);
            c.far = rng.gen_range(10.0..1e4);
            c
        })
        .collect()
}

fn random_tokens(rng: &mut impl Rng) -> TokenSet {
    let dim = rng.gen_range(1..=12);
    let n = rng.gen_range(0..=20);
    TokenSet {
        dim,
        tokens: (0..n * dim).map(|_| rng.gen_range(-5.0f32..5.0)).collect(),
        source_indices: (0..n as u64).map(|i| i * 3 + 1).collect(),
        positions: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        strategy: if rng.gen_bool(0.5) { Some(Strategy::ALL[rng.gen_range(0..4)]) } else { None },
        seed: rng.gen(),
    }
}

fn check_io(_: &RenderOptions) -> Result<(bool, String)> {
    let p = Path::new("fixture");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for round in 0..10 {
        // fields: every f64 stored verbatim
        let (mut field, _) = random_scene(round, 30, rng.gen_range(1..=8), 8);
        field.gaussians.iter_mut().for_each(|g| g.color = Vector3::from_fn(|_, _| rng.gen()));
        let bytes = encode_field(&field);
        let back = decode_field(p, &bytes)?;
        ensure!(back == field && encode_field(&back) == bytes, ".gsf round {round} not bit-exact");

        let t = random_tensor(&mut rng, false);
        let bytes = encode_tensor(&t, DType::F64);
        ensure!(decode_tensor(p, &bytes)? == t, ".fmt f64 round {round} not bit-exact");
        let t32 = random_tensor(&mut rng, true);
        ensure!(decode_tensor(p, &encode_tensor(&t32, DType::F32))? == t32, ".fmt f32 round {round} not exact");

        let tok = random_tokens(&mut rng);
        let bytes = encode_tokens(&tok);
        let back = decode_tokens(p, &bytes)?;
        ensure!(back == tok && encode_tokens(&back) == bytes, ".tok round {round} not bit-exact");

        let cams = random_cameras(&mut rng);
        let text = cameras_to_toml(&cams);
        ensure!(cameras_from_toml(p, &text)? == cams, ".cam round {round} not value-exact");
    }

    let (field, _) = random_scene(3, 5, 3, 8);
    fuzz_decoder(".gsf", &encode_field(&field), |b| decode_field(p, b))?;
    fuzz_decoder(".fmt", &encode_tensor(&random_tensor(&mut rng, false), DType::F64), |b| decode_tensor(p, b))?;
    let mut tok = random_tokens(&mut rng);
    if tok.is_empty() {
        tok = TokenSet { dim: 1, tokens: vec![1.0], source_indices: vec![0], positions: vec![[0.0; 3]], ..tok };
    }
    fuzz_decoder(".tok", &encode_tokens(&tok), |b| decode_tokens(p, b))?;
    let mut cfg = AEConfig::desk_scale();
    cfg.encoder_dims = vec![4, 3, 2];
    cfg.decoder_dims = vec![2, 4];
    fuzz_decoder(".fsae", &encode_checkpoint(&AEModel::new(&cfg)?), |b| autoenc::decode_checkpoint(p, b))?;

    // malformed camera files name the camera and rule
    let cams = random_cameras(&mut rng);
    let text = cameras_to_toml(&cams).replacen("width = ", "width = -", 1);
    ensure!(matches!(cameras_from_toml(p, &text), Err(Error::Malformed { .. })), "negative width not rejected");
    let mut bad = cams.clone();
    bad[0].rotation = Matrix3::identity() * 2.0;
    ensure!(
        matches!(cameras_from_toml(p, &cameras_to_toml(&bad)), Err(Error::InvalidCamera(_))),
        "non-orthonormal rotation not rejected"
    );
    for junk in ["", "[[camera]]", "not toml at all ["] {
        ensure!(catch_unwind(|| cameras_from_toml(p, junk)).is_ok(), "panic on camera text {junk:?}");
    }
    Ok((true, "10 randomized rounds per format bit/value exact; truncations and bit flips rejected without panics".into()))
}

// ---- 10: pipeline ----

/// Bytes produced by an in-process synth → lift → sample → export run.
pub fn pipeline_bytes(seed: u64) -> Result<Vec<Vec<u8>>> {
    let opts = RenderOptions::new().single_threaded();
    let b = synth_scene(&SceneSpec::new(200, 4, 16, 8, 64, seed), &opts)?;
    let p = bundle_problem(&b, b.gt_feature_maps.clone(), &opts, 1);
    let lifted = em_lift(&p)?.apply_to(&p.field)?;
    let picked = sample::sample(&lifted, &SampleRequest::new(Strategy::Entropy, 100, seed))?;
    let mut cfg = AEConfig::desk_scale();
    cfg.encoder_dims = vec![64, 32, 16];
    cfg.decoder_dims = vec![16, 32, 64];
    cfg.epochs = 3;
    cfg.seed = seed;
    let (_, data) = autoenc::overfit_fixture(seed);
    let (model, _) = autoenc::train(&cfg, &data)?;
    let tokens = export_tokens(&lifted, &model, &picked, Some(Strategy::Entropy), seed)?;
    let maps: Vec<f64> = b.gt_feature_maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    Ok(vec![
        encode_field(&b.field),
        encode_tensor(&Tensor::new(vec![maps.len()], maps)?, DType::F64),
        encode_field(&lifted),
        picked.iter().flat_map(|i| (*i as u64).to_le_bytes()).collect(),
        encode_checkpoint(&model),
        encode_tokens(&tokens),
    ])
}

fn check_pipeline_determinism(_: &RenderOptions) -> Result<(bool, String)> {
    let a = pipeline_bytes(5)?;
    let b = pipeline_bytes(5)?;
    let total: usize = a.iter().map(Vec::len).sum();
    Ok((a == b, format!("{} artifacts, {total} bytes compared", a.len())))
}
