//! Lifting posed 2D feature maps onto per-Gaussian features.
//!
//! Geometry and opacity stay fixed, so the per-pixel rendering weights
//! `w_i(t, x)` do not depend on the features and the rendered feature map is
//! linear in them. The objective
//!
//! ```text
//! L(f) = Σ_t Σ_x ‖Σ_i w_i(t,x)·f_i − F_t(x)‖² + λ Σ_i ‖f_i‖²
//! ```
//!
//! is therefore a strictly convex quadratic. [`em_lift`] alternates an
//! E-step (render the views to obtain weights and responsibilities) with an
//! M-step that minimises `L` in closed form; [`gd_lift`] descends the same
//! objective by plain gradient steps and serves as its oracle.
//!
//! Gaussians whose total responsibility mass is at most `λ` are reported as
//! uncovered and pinned to the zero vector by both solvers.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianField};
use crate::raster::{contributions, render, FeatureMap, RenderOptions, ResponsibilityMap, WeightMap};

/// Active-set size above which the least-squares M-step switches from a
/// dense Cholesky factorisation to preconditioned conjugate gradients.
pub const DENSE_SOLVE_LIMIT: usize = 2048;

/// A later E/M cycle may move a feature by at most this much.
pub const STATIONARITY_TOL: f64 = 1e-10;

/// How the M-step turns accumulated statistics into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MStep {
    /// Exact minimiser of the rendered-feature objective: solves
    /// `(Σ wwᵀ + λI)·f = Σ w·F` over the covered Gaussians.
    #[default]
    LeastSquares,
    /// Responsibility-weighted mean `Σ R_i·F / (Σ R_i + λ)`, the per-Gaussian
    /// update written directly in terms of normalised responsibilities.
    ResponsibilityMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Auto,
    Dense,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftOptions {
    /// Number of E/M cycles, at least 1.
    pub iters: usize,
    pub lambda_reg: f64,
    pub m_step: MStep,
    pub solver: Solver,
    pub render: RenderOptions,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            iters: 1,
            lambda_reg: 1e-6,
            m_step: MStep::default(),
            solver: Solver::default(),
            render: RenderOptions::new(),
        }
    }
}

/// One posed pseudo-ground-truth feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub target: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct LiftProblem {
    pub field: GaussianField,
    pub views: Vec<View>,
    pub options: LiftOptions,
}

impl LiftProblem {
    pub fn new(field: GaussianField, views: Vec<View>, options: LiftOptions) -> Self {
        Self { field, views, options }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.ensure_valid()?;
        if self.views.is_empty() {
            return Err(Error::InvalidArgument("lifting needs at least one view".into()));
        }
        if self.options.iters == 0 {
            return Err(Error::InvalidArgument("iters must be at least 1".into()));
        }
        if !(self.options.lambda_reg >= 0.0 && self.options.lambda_reg.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_reg must be finite and >= 0, got {}", self.options.lambda_reg)));
        }
        for (t, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            if v.target.dim != self.field.feature_dim {
                return Err(Error::dim(format!("feature dim of view {t}"), self.field.feature_dim, v.target.dim));
            }
            let (w, h) = self.options.render.size.unwrap_or((v.camera.width, v.camera.height));
            if (v.target.width, v.target.height) != (w, h) {
                return Err(Error::dim(format!("pixel count of view {t}"), w * h, v.target.width * v.target.height));
            }
        }
        Ok(())
    }

    fn weights(&self, t: usize) -> Result<WeightMap> {
        contributions(&self.field, &self.views[t].camera, &self.options.render)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftResult {
    /// Row-major N×D.
    pub features: Vec<f64>,
    pub dim: usize,
    /// `Σ_{t,x} R_i(t, x)` per Gaussian.
    pub mass: Vec<f64>,
    /// Objective value after each M-step (EM) or before each step (GD).
    pub loss_history: Vec<f64>,
    pub uncovered: Vec<usize>,
    /// Largest per-component feature change of each E/M cycle after the
    /// first (empty for GD).
    pub cycle_deltas: Vec<f64>,
}

impl LiftResult {
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn apply_to(&self, field: &GaussianField) -> Result<GaussianField> {
        field.with_features(&self.features, self.dim)
    }
}

/// Per-view sufficient statistics, merged across views.
#[derive(Debug, Clone)]
struct Stats {
    mass: Vec<f64>,
    /// LS: `Σ w_i F`; responsibility mean: `Σ R_i F`.
    rhs: Vec<f64>,
    /// Upper-triangular `Σ w_i w_j`, LS only.
    gram: HashMap<(usize, usize), f64>,
}

impl Stats {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            mass: vec![0.0; n],
            rhs: vec![0.0; n * d],
            gram: HashMap::new(),
        }
    }

    fn merge(mut self, other: Stats) -> Stats {
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.rhs.iter_mut().zip(&other.rhs) {
            *a += b;
        }
        for (k, v) in other.gram {
            *self.gram.entry(k).or_insert(0.0) += v;
        }
        self
    }
}

/// Deterministic pairwise reduction, independent of thread scheduling.
fn pairwise_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

fn map_views<T: Send>(problem: &LiftProblem, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let t = problem.views.len();
    if problem.options.render.parallel {
        (0..t).into_par_iter().map(f).collect()
    } else {
        (0..t).map(f).collect()
    }
}

fn view_stats(problem: &LiftProblem, t: usize) -> Result<Stats> {
    let n = problem.field.len();
    let d = problem.field.feature_dim;
    let weights = problem.weights(t)?;
    let resp = ResponsibilityMap::from_weights(&weights, t);
    let target = &problem.views[t].target;
    let mut s = Stats::zeros(n, d);
    let ls = problem.options.m_step == MStep::LeastSquares;
    for p in 0..weights.num_pixels() {
        let fx = target.pixel_index(p);
        for &(i, r) in resp.pixel(p) {
            s.mass[i] += r;
            if !ls {
                for (a, v) in s.rhs[i * d..(i + 1) * d].iter_mut().zip(fx) {
                    *a += r * v;
                }
            }
        }
        if ls {
            let px = weights.pixel(p);
            for (a, &(i, wi)) in px.iter().enumerate() {
                for (acc, v) in s.rhs[i * d..(i + 1) * d].iter_mut().zip(fx) {
                    *acc += wi * v;
                }
                for &(j, wj) in &px[a..] {
                    let key = if i <= j { (i, j) } else { (j, i) };
                    *s.gram.entry(key).or_insert(0.0) += wi * wj;
                }
            }
        }
    }
    Ok(s)
}

fn e_step(problem: &LiftProblem) -> Result<Stats> {
    let per_view = map_views(problem, |t| view_stats(problem, t))?;
    Ok(pairwise_reduce(per_view, Stats::merge).expect("at least one view"))
}

fn m_step(problem: &LiftProblem, stats: &Stats, active: &[usize]) -> Result<Vec<f64>> {
    let n = problem.field.len();
    let d = problem.field.feature_dim;
    let lambda = problem.options.lambda_reg;
    let mut features = vec![0.0; n * d];
    match problem.options.m_step {
        MStep::ResponsibilityMean => {
            for &i in active {
                let den = stats.mass[i] + lambda;
                for k in 0..d {
                    features[i * d + k] = stats.rhs[i * d + k] / den;
                }
            }
        }
        MStep::LeastSquares => {
            let solved = solve_normal_equations(problem.options.solver, stats, active, d, lambda)?;
            for (a, &i) in active.iter().enumerate() {
                features[i * d..(i + 1) * d].copy_from_slice(&solved[a * d..(a + 1) * d]);
            }
        }
    }
    Ok(features)
}

/// Solves `(G_AA + λI)·X = B_A` for the active set; returns row-major
/// `|A|×d`.
fn solve_normal_equations(solver: Solver, stats: &Stats, active: &[usize], d: usize, lambda: f64) -> Result<Vec<f64>> {
    let m = active.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = stats.mass.len();
    let mut local = vec![usize::MAX; n];
    for (a, &i) in active.iter().enumerate() {
        local[i] = a;
    }
    let mut entries: Vec<(usize, usize, f64)> = stats
        .gram
        .iter()
        .filter_map(|(&(i, j), &v)| {
            let (a, b) = (local[i], local[j]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b, v))
        })
        .collect();
    entries.sort_by_key(|x| (x.0, x.1));
    let rhs = DMatrix::from_fn(m, d, |a, k| stats.rhs[active[a] * d + k]);

    let dense = match solver {
        Solver::Dense => true,
        Solver::ConjugateGradient => false,
        Solver::Auto => m <= DENSE_SOLVE_LIMIT,
    };
    let x = if dense {
        let mut g = DMatrix::from_diagonal_element(m, m, lambda);
        for &(a, b, v) in &entries {
            g[(a, b)] += v;
            if a != b {
                g[(b, a)] += v;
            }
        }
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("normal equations are not positive definite; increase lambda_reg".into()))?;
        chol.solve(&rhs)
    } else {
        let sym = SymSparse::new(m, &entries, lambda);
        let mut x = DMatrix::zeros(m, d);
        for k in 0..d {
            let col = sym.pcg(&rhs.column(k).iter().copied().collect::<Vec<_>>(), 1e-14, 20 * m + 100);
            x.set_column(k, &nalgebra::DVector::from_vec(col));
        }
        x
    };
    Ok((0..m).flat_map(|a| (0..d).map(move |k| (a, k))).map(|(a, k)| x[(a, k)]).collect())
}

/// Symmetric sparse matrix in CSR form (both triangles stored) plus `λI`.
struct SymSparse {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl SymSparse {
    fn new(m: usize, upper: &[(usize, usize, f64)], lambda: f64) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        let mut diag = vec![lambda; m];
        for &(a, b, v) in upper {
            if a == b {
                diag[a] += v;
            } else {
                rows[a].push((b, v));
                rows[b].push((a, v));
            }
        }
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            offsets.push(cols.len());
        }
        Self { offsets, cols, vals, diag }
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.diag[r] * x[r];
            for e in self.offsets[r]..self.offsets[r + 1] {
                acc += self.vals[e] * x[self.cols[e]];
            }
            *o = acc;
        }
    }

    /// Jacobi-preconditioned conjugate gradients from zero.
    fn pcg(&self, b: &[f64], rel_tol: f64, max_iter: usize) -> Vec<f64> {
        let m = b.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut x = vec![0.0; m];
        let mut r = b.to_vec();
        let b_norm = dot(b, b).sqrt();
        if b_norm == 0.0 {
            return x;
        }
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; m];
        for _ in 0..max_iter {
            self.mul(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..m {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            if dot(&r, &r).sqrt() <= rel_tol * b_norm {
                break;
            }
            for k in 0..m {
                z[k] = r[k] / self.diag[k];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..m {
                p[k] = z[k] + beta * p[k];
            }
        }
        x
    }
}

fn split_active(mass: &[f64], lambda: f64) -> (Vec<usize>, Vec<usize>) {
    (0..mass.len()).partition(|&i| mass[i] > lambda)
}

/// Objective value `Σ‖F̂ − F‖² + λΣ‖f‖²` for the given features.
pub fn objective(problem: &LiftProblem, features: &[f64]) -> Result<f64> {
    let d = problem.field.feature_dim;
    let per_view = map_views(problem, |t| {
        let w = problem.weights(t)?;
        let pred = w.apply(features, d, t);
        Ok(sq_dist(&pred.data, &problem.views[t].target.data))
    })?;
    let data = pairwise_reduce(per_view, |a, b| a + b).unwrap_or(0.0);
    Ok(data + problem.options.lambda_reg * features.iter().map(|f| f * f).sum::<f64>())
}

/// Gradient of [`objective`] with respect to every feature, row-major N×D.
pub fn objective_gradient(problem: &LiftProblem, features: &[f64]) -> Result<Vec<f64>> {
    let n = problem.field.len();
    let d = problem.field.feature_dim;
    let per_view = map_views(problem, |t| {
        let w = problem.weights(t)?;
        Ok(data_gradient(&w, &problem.views[t].target, features, n, d))
    })?;
    let mut g = pairwise_reduce(per_view, |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    })
    .unwrap_or_else(|| vec![0.0; n * d]);
    let lambda = problem.options.lambda_reg;
    g.iter_mut().zip(features).for_each(|(g, f)| *g += 2.0 * lambda * f);
    Ok(g)
}

/// `2·Σ_x w_i(x)·(F̂(x) − F(x))` for one view.
fn data_gradient(w: &WeightMap, target: &FeatureMap, features: &[f64], n: usize, d: usize) -> Vec<f64> {
    let pred = w.apply(features, d, 0);
    let mut g = vec![0.0; n * d];
    let mut resid = vec![0.0; d];
    for p in 0..w.num_pixels() {
        for ((r, a), b) in resid.iter_mut().zip(pred.pixel_index(p)).zip(target.pixel_index(p)) {
            *r = a - b;
        }
        for &(i, wi) in w.pixel(p) {
            for (gk, rk) in g[i * d..(i + 1) * d].iter_mut().zip(&resid) {
                *gk += 2.0 * wi * rk;
            }
        }
    }
    g
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closed-form EM lifting. Each cycle re-renders every view (E-step) and
/// re-solves for the features (M-step). Weights do not depend on features,
/// so the first cycle already lands on the optimum; later cycles must
/// reproduce it to within [`STATIONARITY_TOL`] or the call fails.
pub fn em_lift(problem: &LiftProblem) -> Result<LiftResult> {
    problem.validate()?;
    let d = problem.field.feature_dim;
    let lambda = problem.options.lambda_reg;
    let mut features: Option<Vec<f64>> = None;
    let mut mass = Vec::new();
    let mut uncovered = Vec::new();
    let mut loss_history = Vec::new();
    let mut cycle_deltas = Vec::new();
    for cycle in 0..problem.options.iters {
        let stats = e_step(problem)?;
        let (active, inactive) = split_active(&stats.mass, lambda);
        let next = m_step(problem, &stats, &active)?;
        if let Some(prev) = &features {
            let delta = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            cycle_deltas.push(delta);
            if delta > STATIONARITY_TOL {
                return Err(Error::NotStationary { cycle, delta });
            }
        }
        loss_history.push(objective(problem, &next)?);
        mass = stats.mass;
        uncovered = inactive;
        features = Some(next);
    }
    Ok(LiftResult {
        features: features.expect("iters >= 1"),
        dim: d,
        mass,
        loss_history,
        uncovered,
        cycle_deltas,
    })
}

/// Responsibility mass per Gaussian, summed over all views.
pub fn responsibility_mass(problem: &LiftProblem) -> Result<Vec<f64>> {
    let n = problem.field.len();
    let per_view = map_views(problem, |t| {
        let resp = ResponsibilityMap::from_weights(&problem.weights(t)?, t);
        let mut m = vec![0.0; n];
        for &(i, r) in &resp.entries {
            m[i] += r;
        }
        Ok(m)
    })?;
    Ok(pairwise_reduce(per_view, |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    })
    .unwrap_or_else(|| vec![0.0; n]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdOptions {
    pub lr: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
}

/// Step size `1 / (2·(ρ + λ))` where `ρ = max_i Σ_j (WᵀW)_ij` bounds the
/// largest eigenvalue of the Gram matrix (weights are non-negative).
pub fn auto_lr(problem: &LiftProblem) -> Result<f64> {
    problem.validate()?;
    let n = problem.field.len();
    let rows = map_views(problem, |t| {
        let w = problem.weights(t)?;
        let mut row = vec![0.0; n];
        for p in 0..w.num_pixels() {
            let cov = w.coverage(p);
            for &(i, wi) in w.pixel(p) {
                row[i] += wi * cov;
            }
        }
        Ok(row)
    })?;
    let row = pairwise_reduce(rows, |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    })
    .unwrap_or_default();
    let rho = row.iter().copied().fold(0.0, f64::max);
    Ok(0.5 / (rho + problem.options.lambda_reg).max(f64::MIN_POSITIVE))
}

/// Full-batch gradient descent on the lifting objective from zero features.
/// Weights are rendered once per view and reused, since they do not change
/// with the features. Uncovered Gaussians keep their zero initialisation.
pub fn gd_lift(problem: &LiftProblem, opts: &GdOptions) -> Result<LiftResult> {
    problem.validate()?;
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", opts.lr)));
    }
    let n = problem.field.len();
    let d = problem.field.feature_dim;
    let lambda = problem.options.lambda_reg;
    let weights = map_views(problem, |t| problem.weights(t))?;
    let mass = responsibility_mass(problem)?;
    let (active, uncovered) = split_active(&mass, lambda);
    let mut frozen = vec![true; n];
    for &i in &active {
        frozen[i] = false;
    }

    let mut features = vec![0.0; n * d];
    let mut loss_history = Vec::new();
    for _ in 0..=opts.max_steps {
        let (loss, grad) = gd_eval(problem, &weights, &features, &frozen)?;
        loss_history.push(loss);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < opts.grad_tol || loss_history.len() > opts.max_steps {
            break;
        }
        for (f, g) in features.iter_mut().zip(&grad) {
            *f -= opts.lr * g;
        }
    }
    Ok(LiftResult {
        features,
        dim: d,
        mass,
        loss_history,
        uncovered,
        cycle_deltas: Vec::new(),
    })
}

fn gd_eval(problem: &LiftProblem, weights: &[WeightMap], features: &[f64], frozen: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = problem.field.len();
    let d = problem.field.feature_dim;
    let lambda = problem.options.lambda_reg;
    let per_view = map_views(problem, |t| {
        let w = &weights[t];
        let target = &problem.views[t].target;
        let loss = sq_dist(&w.apply(features, d, t).data, &target.data);
        Ok((loss, data_gradient(w, target, features, n, d)))
    })?;
    let (data, mut grad) = pairwise_reduce(per_view, |(la, mut ga), (lb, gb)| {
        ga.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
        (la + lb, ga)
    })
    .expect("at least one view");
    for i in 0..n {
        for k in 0..d {
            let g = &mut grad[i * d + k];
            *g = if frozen[i] { 0.0 } else { *g + 2.0 * lambda * features[i * d + k] };
        }
    }
    Ok((data + lambda * features.iter().map(|f| f * f).sum::<f64>(), grad))
}

/// Semantic loss terms over covered pixels: squared error and cosine
/// distance, each summed, plus the covered pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SemanticLoss {
    pub mse_sum: f64,
    pub cosine_sum: f64,
    pub covered: usize,
}

impl SemanticLoss {
    /// `(Σ‖F̂ − F‖² + Σ(1 − cos)) / covered`, 0 with no covered pixels.
    pub fn value(&self) -> f64 {
        if self.covered == 0 {
            0.0
        } else {
            (self.mse_sum + self.cosine_sum) / self.covered as f64
        }
    }

    fn add(self, o: SemanticLoss) -> SemanticLoss {
        SemanticLoss {
            mse_sum: self.mse_sum + o.mse_sum,
            cosine_sum: self.cosine_sum + o.cosine_sum,
            covered: self.covered + o.covered,
        }
    }
}

const COSINE_NORM_EPS: f64 = 1e-12;

/// Cosine similarity, `None` when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_NORM_EPS || nb < COSINE_NORM_EPS {
        return None;
    }
    Some((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// Loss terms between a predicted and a target map on pixels where
/// `covered[p]` holds.
pub fn semantic_loss(pred: &FeatureMap, target: &FeatureMap, covered: &[bool]) -> Result<SemanticLoss> {
    if pred.dim != target.dim {
        return Err(Error::dim("feature dim", target.dim, pred.dim));
    }
    if pred.data.len() != target.data.len() || covered.len() != pred.num_pixels() {
        return Err(Error::dim("pixel count", target.num_pixels(), pred.num_pixels()));
    }
    let mut out = SemanticLoss::default();
    for (p, _) in covered.iter().enumerate().filter(|(_, &c)| c) {
        let (a, b) = (pred.pixel_index(p), target.pixel_index(p));
        out.mse_sum += sq_dist(a, b);
        if let Some(c) = cosine(a, b) {
            out.cosine_sum += 1.0 - c;
        }
        out.covered += 1;
    }
    Ok(out)
}

/// Renders the field in every view and evaluates [`semantic_loss`] against
/// the targets, with coverage taken from the rendered alpha.
pub fn feature_loss(field: &GaussianField, views: &[View], opts: &RenderOptions) -> Result<f64> {
    let mut total = SemanticLoss::default();
    for v in views {
        if v.target.dim != field.feature_dim {
            return Err(Error::dim("target feature dim", field.feature_dim, v.target.dim));
        }
        let out = render(field, &v.camera, opts)?;
        let covered: Vec<bool> = out.alpha.iter().map(|&a| a > crate::raster::COVERAGE_EPS).collect();
        total = total.add(semantic_loss(&out.features, &v.target, &covered)?);
    }
    Ok(total.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Gaussian, Intrinsics};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};

    fn camera(w: usize, h: usize) -> Camera {
        Camera {
            intrinsics: Intrinsics {
                fx: 20.0,
                fy: 20.0,
                cx: (w / 2) as f64,
                cy: (h / 2) as f64,
            },
            width: w,
            height: h,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            near: 0.01,
            far: 100.0,
        }
    }

    /// One Gaussian whose splat covers exactly one pixel of a 1×1 view.
    fn one_pixel_problem(v: Vec<f64>, m_step: MStep) -> LiftProblem {
        let d = v.len();
        let field = GaussianField::new(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 1e-6, 0.8, vec![0.0; d])], d);
        let mut cam = camera(1, 1);
        cam.intrinsics.cx = 0.0;
        cam.intrinsics.cy = 0.0;
        let target = FeatureMap::from_data(1, 1, d, v, 0).unwrap();
        LiftProblem::new(
            field,
            vec![View { camera: cam, target }],
            LiftOptions {
                lambda_reg: 0.0,
                m_step,
                ..Default::default()
            },
        )
    }

    #[test]
    fn responsibility_mean_single_sample() {
        let v = vec![0.3, -1.0, 2.0];
        let r = em_lift(&one_pixel_problem(v.clone(), MStep::ResponsibilityMean)).unwrap();
        assert_eq!(r.feature(0), &v[..]);
        assert_eq!(r.mass, vec![1.0]);
        assert!(r.uncovered.is_empty());
    }

    #[test]
    fn least_squares_single_sample_undoes_opacity() {
        // rendered feature is 0.8·f, so the optimum is f = v / 0.8
        let v = vec![0.3, -1.0, 2.0];
        let r = em_lift(&one_pixel_problem(v.clone(), MStep::LeastSquares)).unwrap();
        for (a, b) in r.feature(0).iter().zip(&v) {
            assert_relative_eq!(*a, b / 0.8, epsilon = 1e-12);
        }
        assert!(r.loss_history[0] < 1e-20);
    }

    #[test]
    fn equal_weight_mean_over_two_views() {
        let mut p = one_pixel_problem(vec![1.0, 0.0], MStep::ResponsibilityMean);
        let mut second = p.views[0].clone();
        second.target = FeatureMap::from_data(1, 1, 2, vec![0.0, 3.0], 1).unwrap();
        p.views.push(second);
        let r = em_lift(&p).unwrap();
        assert_eq!(r.feature(0), &[0.5, 1.5]);
        // least squares agrees up to the opacity factor
        p.options.m_step = MStep::LeastSquares;
        let r = em_lift(&p).unwrap();
        assert_relative_eq!(r.feature(0)[0], 0.5 / 0.8, epsilon = 1e-12);
        assert_relative_eq!(r.feature(0)[1], 1.5 / 0.8, epsilon = 1e-12);
    }

    fn overlapping_problem(lambda: f64) -> LiftProblem {
        let d = 3;
        let gs = vec![
            Gaussian::isotropic(Vector3::new(0.05, 0.0, 2.0), 0.12, 0.7, vec![0.0; d]),
            Gaussian::isotropic(Vector3::new(-0.08, 0.03, 2.4), 0.15, 0.6, vec![0.0; d]),
            Gaussian::isotropic(Vector3::new(0.0, -0.1, 2.2), 0.1, 0.9, vec![0.0; d]),
            // behind the camera in every view: never covered
            Gaussian::isotropic(Vector3::new(0.0, 0.0, -5.0), 0.1, 0.9, vec![0.0; d]),
        ];
        let field = GaussianField::new(gs, d);
        let views = (0..3)
            .map(|t| {
                let mut cam = camera(16, 16);
                cam.translation = Vector3::new(0.04 * t as f64, -0.03 * t as f64, 0.0);
                let data = (0..16 * 16 * d).map(|k| ((k * 7 + t * 13) % 11) as f64 / 11.0 - 0.3).collect();
                View {
                    camera: cam,
                    target: FeatureMap::from_data(16, 16, d, data, t).unwrap(),
                }
            })
            .collect();
        LiftProblem::new(
            field,
            views,
            LiftOptions {
                lambda_reg: lambda,
                ..Default::default()
            },
        )
    }

    #[test]
    fn least_squares_is_stationary_and_idempotent() {
        let mut p = overlapping_problem(1e-6);
        p.options.iters = 3;
        let r = em_lift(&p).unwrap();
        assert_eq!(r.uncovered, vec![3]);
        assert_eq!(r.feature(3), &[0.0, 0.0, 0.0]);
        assert_eq!(r.cycle_deltas.len(), 2);
        assert!(r.cycle_deltas.iter().all(|&d| d <= 1e-10));
        assert!(r.loss_history.windows(2).all(|w| w[1] <= w[0]));
        let g = objective_gradient(&p, &r.features).unwrap();
        let gmax = g[..9].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gmax < 1e-9, "gradient {gmax}");
    }

    #[test]
    fn dense_and_cg_solvers_agree() {
        let mut p = overlapping_problem(1e-6);
        p.options.solver = Solver::Dense;
        let a = em_lift(&p).unwrap();
        p.options.solver = Solver::ConjugateGradient;
        let b = em_lift(&p).unwrap();
        for (x, y) in a.features.iter().zip(&b.features) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn gd_matches_em_and_decreases() {
        let p = overlapping_problem(1e-6);
        let em = em_lift(&p).unwrap();
        let lr = auto_lr(&p).unwrap();
        let gd = gd_lift(&p, &GdOptions { lr, max_steps: 200_000, grad_tol: 1e-10 }).unwrap();
        let last = *gd.loss_history.last().unwrap();
        for w in gd.loss_history.windows(2) {
            // once at float resolution the loss only jitters in its last bits
            assert!(w[1] <= w[0] * (1.0 + 1e-14));
            if w[0] - last > 1e-12 * last {
                assert!(w[1] < w[0]);
            }
        }
        assert!(*gd.loss_history.last().unwrap() >= em.loss_history[0] - 1e-8);
        for (x, y) in em.features.iter().zip(&gd.features) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert_eq!(gd.feature(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn responsibility_mean_stays_in_convex_hull() {
        let mut p = overlapping_problem(0.0);
        p.options.m_step = MStep::ResponsibilityMean;
        let r = em_lift(&p).unwrap();
        for k in 0..3 {
            let vals = p.views.iter().flat_map(|v| v.target.data.iter().skip(k).step_by(3).copied());
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            for i in 0..3 {
                let f = r.feature(i)[k];
                assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let mut p = overlapping_problem(1e-6);
        p.views.clear();
        assert!(matches!(em_lift(&p), Err(Error::InvalidArgument(_))));
        let mut p = overlapping_problem(1e-6);
        p.views[1].target = FeatureMap::zeros(16, 16, 4, 1);
        assert!(matches!(em_lift(&p), Err(Error::DimensionMismatch { .. })));
        let p = overlapping_problem(1e-6);
        assert!(gd_lift(&p, &GdOptions { lr: 0.0, max_steps: 1, grad_tol: 1e-8 }).is_err());
    }

    #[test]
    fn gd_single_pixel_converges_and_uncovered_stays_zero() {
        let p = one_pixel_problem(vec![0.5, -0.25], MStep::LeastSquares);
        let gd = gd_lift(&p, &GdOptions { lr: auto_lr(&p).unwrap(), max_steps: 1000, grad_tol: 1e-12 }).unwrap();
        assert_relative_eq!(gd.feature(0)[0], 0.5 / 0.8, epsilon = 1e-10);
        let p = overlapping_problem(1e-6);
        let gd = gd_lift(&p, &GdOptions { lr: auto_lr(&p).unwrap(), max_steps: 50, grad_tol: 1e-8 }).unwrap();
        assert_eq!(gd.feature(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn semantic_loss_hand_cases() {
        let t = FeatureMap::from_data(1, 1, 2, vec![0.6, 0.8], 0).unwrap();
        assert_eq!(semantic_loss(&t, &t, &[true]).unwrap().value(), 0.0);
        let doubled = FeatureMap::from_data(1, 1, 2, vec![1.2, 1.6], 0).unwrap();
        let l = semantic_loss(&doubled, &t, &[true]).unwrap();
        assert_relative_eq!(l.mse_sum, 1.0, epsilon = 1e-12);
        assert_relative_eq!(l.cosine_sum, 0.0, epsilon = 1e-12);
        let ortho = FeatureMap::from_data(1, 1, 2, vec![-0.8, 0.6], 0).unwrap();
        assert_relative_eq!(semantic_loss(&ortho, &t, &[true]).unwrap().cosine_sum, 1.0, epsilon = 1e-12);
        let zero = FeatureMap::zeros(1, 1, 2, 0);
        assert_eq!(semantic_loss(&zero, &t, &[true]).unwrap().cosine_sum, 0.0);
        assert!(semantic_loss(&FeatureMap::zeros(1, 1, 3, 0), &t, &[true]).is_err());
    }

    #[test]
    fn feature_loss_zero_for_self_render() {
        let p = overlapping_problem(1e-6);
        let mut field = p.field.clone();
        for (i, g) in field.gaussians.iter_mut().enumerate() {
            g.feature = vec![i as f64 + 1.0, 0.5, -0.5];
        }
        let views: Vec<View> = p
            .views
            .iter()
            .map(|v| View {
                camera: v.camera.clone(),
                target: render(&field, &v.camera, &RenderOptions::new()).unwrap().features,
            })
            .collect();
        assert!(feature_loss(&field, &views, &RenderOptions::new()).unwrap() < 1e-12);
    }

    #[test]
    fn pairwise_reduce_orders_deterministically() {
        let v: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        assert_eq!(pairwise_reduce(v, |a, b| format!("({a}{b})")).unwrap(), "(((01)(23))4)");
    }
}
