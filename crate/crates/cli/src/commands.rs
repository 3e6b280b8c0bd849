//! Subcommand implementations. Each writes its outputs atomically into the
//! output directory and echoes the resolved configuration next to them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use featsplat::autoenc::{self, load_checkpoint, save_checkpoint, AEConfig};
use featsplat::eval::{evaluate, EvalReport};
use featsplat::io::atomic_write;
use featsplat::lift::{
    auto_lr, em_lift, gd_lift, objective, objective_gradient, GdOptions, LiftOptions, LiftProblem, LiftResult, MStep,
    Solver, View,
};
use featsplat::raster::{render, FeatureMap, Precision, RenderOptions};
use featsplat::sample::{export_tokens, sample, save_tokens, SampleRequest, Strategy};
use featsplat::scene::{
    load_cameras, load_field, load_maps, load_tensor, save_cameras, save_field, save_maps, save_tensor, synth_scene,
    DType, SceneSpec, Tensor,
};
use featsplat::GaussianField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Accumulation precision of the rasterizer.
    #[arg(long, global = true, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    /// Worker threads: a count or "auto".
    #[arg(long, global = true, default_value = "auto", value_parser = parse_threads)]
    pub threads: String,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    #[serde(skip)]
    pub quiet: bool,
}

fn parse_threads(s: &str) -> std::result::Result<String, String> {
    if s == "auto" || s.parse::<usize>().is_ok_and(|n| n > 0) {
        Ok(s.to_string())
    } else {
        Err(format!("expected a positive count or \"auto\", got {s:?}"))
    }
}

impl Global {
    pub fn thread_count(&self) -> Option<usize> {
        self.threads.parse().ok()
    }

    pub fn render_options(&self) -> RenderOptions {
        let mut o = RenderOptions::new().with_precision(match self.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        });
        if self.thread_count() == Some(1) {
            o = o.single_threaded();
        }
        o
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'a str,
    global: &'a Global,
    args: &'a A,
}

/// Creates the output directory and records the resolved configuration.
pub fn prepare_out<A: Serialize>(command: &str, g: &Global, args: &A) -> Result<()> {
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    let text = toml::to_string(&RunConfig { command, global: g, args }).context("serialising run config")?;
    atomic_write(&g.path("run_config.toml"), text.as_bytes())?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(atomic_write(path, text.as_bytes())?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

// ---- synth ----

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Scene description (TOML); flags below are ignored when given.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_gaussians: usize,
    #[arg(long, default_value_t = 4)]
    pub prototypes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Half-size of the scene box.
    #[arg(long, default_value_t = 1.0)]
    pub extent: f64,
    #[arg(long, default_value_t = 4.0)]
    pub orbit_radius: f64,
    #[arg(long, default_value_t = 1.5)]
    pub orbit_height: f64,
    #[arg(long, default_value_t = 60.0)]
    pub fov: f64,
}

impl SynthArgs {
    pub fn scene_spec(&self, seed: u64) -> Result<SceneSpec> {
        if let Some(p) = &self.spec {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            return toml::from_str(&text).with_context(|| format!("{}: invalid scene spec", p.display()));
        }
        Ok(SceneSpec {
            n_gaussians: self.n_gaussians,
            n_prototypes: self.prototypes,
            feature_dim: self.dim,
            extent: [self.extent; 3],
            n_views: self.views,
            orbit_radius: self.orbit_radius,
            orbit_height: self.orbit_height,
            width: self.size,
            height: self.size,
            fov_deg: self.fov,
            seed,
        })
    }
}

pub fn cmd_synth(g: &Global, args: &SynthArgs) -> Result<()> {
    let spec = args.scene_spec(g.seed)?;
    prepare_out("synth", g, args)?;
    let b = synth_scene(&spec, &g.render_options())?;
    save_field(&g.path("field.gsf"), &b.field)?;
    save_cameras(&g.path("cameras.cam"), &b.cameras)?;
    save_maps(&g.path("features.fmt"), &b.gt_feature_maps)?;
    save_maps(&g.path("rgb.fmt"), &b.gt_rgb)?;
    let protos = Tensor::new(vec![b.prototypes.len(), spec.feature_dim], b.prototypes.concat())?;
    save_tensor(&g.path("prototypes.fmt"), &protos, DType::F64)?;
    let assign = Tensor::new(vec![b.assignment.len()], b.assignment.iter().map(|&a| a as f64).collect())?;
    save_tensor(&g.path("assignment.fmt"), &assign, DType::F64)?;
    write_text(&g.path("scene.toml"), &toml::to_string(&spec)?)?;
    log::info!(
        "synthesised {} gaussians in {} clusters, {} views at {}x{} (scale {:.4})",
        b.field.len(),
        spec.n_prototypes,
        spec.n_views,
        spec.width,
        spec.height,
        b.sigma
    );
    Ok(())
}

// ---- render ----

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Ground-truth feature maps to evaluate against.
    #[arg(long)]
    pub gt_features: Option<PathBuf>,
    /// Ground-truth RGB maps to evaluate against.
    #[arg(long)]
    pub gt_rgb: Option<PathBuf>,
}

pub fn cmd_render(g: &Global, args: &RenderArgs) -> Result<Option<EvalReport>> {
    let field = load_field(&args.field)?;
    let cams = load_cameras(&args.cameras)?;
    let gt_f = args.gt_features.as_deref().map(load_maps).transpose()?;
    let gt_rgb = args.gt_rgb.as_deref().map(load_maps).transpose()?;
    prepare_out("render", g, args)?;
    let opts = g.render_options();
    let (mut feats, mut rgb, mut alpha, mut depth) = (vec![], vec![], vec![], vec![]);
    for (t, cam) in cams.iter().enumerate() {
        let out = render(&field, cam, &opts)?;
        rgb.push(out.rgb_map(t));
        alpha.push(FeatureMap::from_data(out.width, out.height, 1, out.alpha.clone(), t)?);
        depth.push(FeatureMap::from_data(out.width, out.height, 1, out.depth.clone(), t)?);
        let mut f = out.features;
        f.frame_id = t;
        feats.push(f);
    }
    save_maps(&g.path("features.fmt"), &feats)?;
    save_maps(&g.path("rgb.fmt"), &rgb)?;
    save_maps(&g.path("alpha.fmt"), &alpha)?;
    save_maps(&g.path("depth.fmt"), &depth)?;
    let Some(gt_f) = gt_f else {
        return Ok(None);
    };
    let report = evaluate(&feats, &gt_f, gt_rgb.as_deref().map(|r| (rgb.as_slice(), r)), Some(&alpha))?;
    write_json(&g.path("eval.json"), &report)?;
    write_text(&g.path("eval.txt"), &report.to_table())?;
    Ok(Some(report))
}

// ---- lift ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftMode {
    Em,
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MStepArg {
    LeastSquares,
    ResponsibilityMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverArg {
    Auto,
    Dense,
    Cg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LiftArgs {
    /// Field supplying the geometry; its features are ignored.
    #[arg(long)]
    pub field: PathBuf,
    /// Target feature maps, one per camera.
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long, value_enum, default_value = "em")]
    pub mode: LiftMode,
    /// E/M cycles (em mode).
    #[arg(long, default_value_t = 1)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "least-squares")]
    pub m_step: MStepArg,
    #[arg(long, value_enum, default_value = "auto")]
    pub solver: SolverArg,
    /// Step size for gd mode: a number or "auto".
    #[arg(long, default_value = "auto")]
    pub lr: String,
    #[arg(long, default_value_t = 200_000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub grad_tol: f64,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "lifted.gsf")]
    pub output: String,
}

#[derive(Debug, Serialize)]
pub struct LiftReport {
    pub mode: LiftMode,
    pub gaussians: usize,
    pub feature_dim: usize,
    pub views: usize,
    pub covered: usize,
    pub uncovered: Vec<usize>,
    pub objective: f64,
    /// Largest per-Gaussian L2 norm of the objective gradient.
    pub max_gradient_norm: f64,
    pub loss_history_len: usize,
    pub first_loss: f64,
    pub cycle_deltas: Vec<f64>,
    pub lr: Option<f64>,
}

pub fn lift_problem(field: GaussianField, maps: Vec<FeatureMap>, cams: Vec<featsplat::Camera>, options: LiftOptions) -> Result<LiftProblem> {
    if maps.len() != cams.len() {
        bail!("{} feature maps for {} cameras", maps.len(), cams.len());
    }
    let views = cams.into_iter().zip(maps).map(|(camera, target)| View { camera, target }).collect();
    Ok(LiftProblem::new(field, views, options))
}

/// Largest per-Gaussian L2 norm of a row-major gradient.
pub fn max_row_norm(grad: &[f64], dim: usize) -> f64 {
    grad.chunks(dim.max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

pub fn cmd_lift(g: &Global, args: &LiftArgs) -> Result<(LiftResult, LiftReport)> {
    let field = load_field(&args.field)?;
    let maps = load_maps(&args.maps)?;
    let cams = load_cameras(&args.cameras)?;
    let options = LiftOptions {
        iters: args.iters,
        lambda_reg: args.lambda,
        m_step: match args.m_step {
            MStepArg::LeastSquares => MStep::LeastSquares,
            MStepArg::ResponsibilityMean => MStep::ResponsibilityMean,
        },
        solver: match args.solver {
            SolverArg::Auto => Solver::Auto,
            SolverArg::Dense => Solver::Dense,
            SolverArg::Cg => Solver::ConjugateGradient,
        },
        render: g.render_options(),
    };
    let problem = lift_problem(field, maps, cams, options)?;
    problem.validate()?;
    let lr = match args.mode {
        LiftMode::Em => None,
        LiftMode::Gd if args.lr == "auto" => Some(auto_lr(&problem)?),
        LiftMode::Gd => Some(args.lr.parse::<f64>().with_context(|| format!("--lr: expected a number or \"auto\", got {:?}", args.lr))?),
    };
    prepare_out("lift", g, args)?;
    let result = match args.mode {
        LiftMode::Em => em_lift(&problem)?,
        LiftMode::Gd => gd_lift(
            &problem,
            &GdOptions {
                lr: lr.expect("gd has a step size"),
                max_steps: args.max_steps,
                grad_tol: args.grad_tol,
            },
        )?,
    };
    let lifted = result.apply_to(&problem.field)?;
    save_field(&g.path(&args.output), &lifted)?;
    let grad = objective_gradient(&problem, &result.features)?;
    let report = LiftReport {
        mode: args.mode,
        gaussians: lifted.len(),
        feature_dim: lifted.feature_dim,
        views: problem.views.len(),
        covered: lifted.len() - result.uncovered.len(),
        uncovered: result.uncovered.clone(),
        objective: objective(&problem, &result.features)?,
        max_gradient_norm: max_row_norm(&grad, result.dim),
        loss_history_len: result.loss_history.len(),
        first_loss: result.loss_history.first().copied().unwrap_or(0.0),
        cycle_deltas: result.cycle_deltas.clone(),
        lr,
    };
    write_json(&g.path("lift_report.json"), &report)?;
    log::info!(
        "{:?} lift: objective {:.6e}, max gradient norm {:.3e}, {} uncovered",
        args.mode,
        report.objective,
        report.max_gradient_norm,
        report.uncovered.len()
    );
    Ok((result, report))
}

// ---- train-ae ----

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainAeArgs {
    /// Training rows: a rank-2 tensor [M, D] or a map stack [T, H, W, D].
    #[arg(long, conflicts_with = "fixture")]
    pub data: Option<PathBuf>,
    /// Train on the built-in planted low-rank fixture (64 → 16).
    #[arg(long)]
    pub fixture: bool,
    /// Model and optimiser settings (TOML); replaces the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder widths, e.g. 64,256,16.
    #[arg(long, value_delimiter = ',')]
    pub encoder_dims: Option<Vec<usize>>,
    /// Decoder widths, e.g. 16,256,64.
    #[arg(long, value_delimiter = ',')]
    pub decoder_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

fn training_rows(t: &Tensor) -> Result<DMatrix<f64>> {
    match t.dims.as_slice() {
        [m, d] => Ok(DMatrix::from_row_slice(*m, *d, &t.data)),
        [n, h, w, d] => Ok(DMatrix::from_row_slice(n * h * w, *d, &t.data)),
        other => bail!("training data must have rank 2 or 4, got dims {other:?}"),
    }
}

pub fn cmd_train_ae(g: &Global, args: &TrainAeArgs) -> Result<Vec<f64>> {
    let (mut config, data) = match (&args.data, args.fixture) {
        (_, true) => autoenc::overfit_fixture(g.seed),
        (Some(p), false) => (AEConfig::desk_scale(), training_rows(&load_tensor(p)?)?),
        (None, false) => bail!("train-ae needs --data FILE or --fixture"),
    };
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        config = toml::from_str(&text).with_context(|| format!("{}: invalid autoencoder config", p.display()))?;
    } else {
        config.seed = g.seed;
        if let Some(v) = &args.encoder_dims {
            config.encoder_dims = v.clone();
        }
        if let Some(v) = &args.decoder_dims {
            config.decoder_dims = v.clone();
        }
        config.lr = args.lr.unwrap_or(config.lr);
        config.epochs = args.epochs.unwrap_or(config.epochs);
        config.batch_size = args.batch_size.unwrap_or(config.batch_size);
        config.weight_decay = args.weight_decay.unwrap_or(config.weight_decay);
    }
    config.validate()?;
    prepare_out("train-ae", g, args)?;
    write_text(&g.path("ae_config.toml"), &toml::to_string(&config)?)?;
    let (model, history) = autoenc::train(&config, &data)?;
    save_checkpoint(&model, &g.path("ae.fsae"))?;
    let mut table = String::from("epoch loss\n");
    for (e, l) in history.iter().enumerate() {
        table.push_str(&format!("{} {:.9e}\n", e + 1, l));
    }
    write_text(&g.path("loss.txt"), &table)?;
    log::info!(
        "trained {} parameters for {} epochs: loss {:.4e} -> {:.4e}, final full-set loss {:.4e}",
        model.param_count(),
        history.len(),
        history[0],
        history[history.len() - 1],
        model.loss(&data)?
    );
    Ok(history)
}

// ---- sample ----

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, default_value = "entropy", value_parser = parse_strategy)]
    #[serde(serialize_with = "ser_display")]
    pub strategy: Strategy,
    /// Token budget.
    #[arg(short, long)]
    pub k: usize,
    /// Neighbourhood radius for the density strategy.
    #[arg(long, default_value_t = 0.5)]
    pub radius: f64,
    #[arg(long, default_value = "indices.txt")]
    pub output: String,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: featsplat::Error| e.to_string())
}

fn ser_display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn ser_display_opt<S: serde::Serializer, T: std::fmt::Display>(v: &Option<T>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_str(v),
        None => s.serialize_none(),
    }
}

pub fn write_indices(path: &Path, indices: &[usize], strategy: Strategy, seed: u64) -> Result<()> {
    let mut s = format!("# strategy={strategy} seed={seed} count={}\n", indices.len());
    for i in indices {
        s.push_str(&format!("{i}\n"));
    }
    write_text(path, &s)
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(n, l)| (n, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, l)| l.parse::<usize>().with_context(|| format!("{}:{}: not an index: {l:?}", path.display(), n + 1)))
        .collect()
}

pub fn cmd_sample(g: &Global, args: &SampleArgs) -> Result<Vec<usize>> {
    let field = load_field(&args.field)?;
    prepare_out("sample", g, args)?;
    let req = SampleRequest {
        k: args.k,
        strategy: args.strategy,
        seed: g.seed,
        density_radius: args.radius,
    };
    let picked = sample(&field, &req)?;
    write_indices(&g.path(&args.output), &picked, args.strategy, g.seed)?;
    log::info!("selected {} of {} gaussians by {}", picked.len(), field.len(), args.strategy);
    Ok(picked)
}

// ---- export-tokens ----

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// Autoencoder checkpoint whose decoder maps features back up.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index list written by `sample`.
    #[arg(long, conflicts_with = "strategy")]
    pub indices: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy, requires = "k")]
    #[serde(serialize_with = "ser_display_opt")]
    pub strategy: Option<Strategy>,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub radius: f64,
    #[arg(long, default_value = "tokens.tok")]
    pub output: String,
}

pub fn cmd_export_tokens(g: &Global, args: &ExportArgs) -> Result<usize> {
    let field = load_field(&args.field)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let (indices, strategy) = match (&args.indices, args.strategy) {
        (Some(p), _) => (read_indices(p)?, None),
        (None, Some(s)) => {
            let req = SampleRequest {
                k: args.k.expect("clap requires k"),
                strategy: s,
                seed: g.seed,
                density_radius: args.radius,
            };
            (sample(&field, &req)?, Some(s))
        }
        (None, None) => bail!("export-tokens needs --indices FILE or --strategy with -k"),
    };
    prepare_out("export-tokens", g, args)?;
    let set = export_tokens(&field, &model, &indices, strategy, g.seed)?;
    save_tokens(&g.path(&args.output), &set)?;
    log::info!("exported {} tokens of width {}", set.len(), set.dim);
    Ok(set.len())
}

// ---- eval ----

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Rendered feature maps.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub gt_features: PathBuf,
    #[arg(long, requires = "gt_rgb")]
    pub rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    pub gt_rgb: Option<PathBuf>,
    /// Rendered alpha maps, for coverage.
    #[arg(long)]
    pub alpha: Option<PathBuf>,
}

pub fn cmd_eval(g: &Global, args: &EvalArgs) -> Result<EvalReport> {
    let f = load_maps(&args.features)?;
    let gt = load_maps(&args.gt_features)?;
    let rgb = match (&args.rgb, &args.gt_rgb) {
        (Some(a), Some(b)) => Some((load_maps(a)?, load_maps(b)?)),
        _ => None,
    };
    let alpha = args.alpha.as_deref().map(load_maps).transpose()?;
    prepare_out("eval", g, args)?;
    let report = evaluate(&f, &gt, rgb.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())), alpha.as_deref())?;
    write_json(&g.path("eval.json"), &report)?;
    write_text(&g.path("eval.txt"), &report.to_table())?;
    Ok(report)
}
