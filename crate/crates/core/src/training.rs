//! Bi-level meta-training: adapt on each task's support set, score the adapted
//! model on its query set, and update the meta-parameters with Adam using the
//! exact gradient of the mean query loss.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    anil_head, cavia_context, fuse, head_point_posteriors, lava_context, lava_head, AdaptationResult,
    PointPosterior,
};
use crate::autodiff::{Eval, Graph, Tape, Var};
use crate::linalg::condition_number;
use crate::model::{context_forward, features, head, AdaptMode, Architecture, MetaParams, ParamNodes};
use crate::seed::SeedTree;
use crate::tasks::{TaskBatch, TaskError, TaskSource};
use crate::tensor::{LinalgError, Tensor};

/// Adaptation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LavaLastLayer,
    LavaContext,
    AnilBaseline,
    CaviaBaseline,
}

impl Method {
    pub const NAMES: [&'static str; 4] = ["lava-last-layer", "lava-context", "anil-baseline", "cavia-baseline"];

    pub fn adapt_mode(self) -> AdaptMode {
        match self {
            Method::LavaLastLayer | Method::AnilBaseline => AdaptMode::LastLayer,
            Method::LavaContext | Method::CaviaBaseline => AdaptMode::Context,
        }
    }

    pub fn is_lava(self) -> bool {
        matches!(self, Method::LavaLastLayer | Method::LavaContext)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = match self {
            Method::LavaLastLayer => 0,
            Method::LavaContext => 1,
            Method::AnilBaseline => 2,
            Method::CaviaBaseline => 3,
        };
        f.write_str(Self::NAMES[i])
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lava-last-layer" => Ok(Method::LavaLastLayer),
            "lava-context" => Ok(Method::LavaContext),
            "anil-baseline" => Ok(Method::AnilBaseline),
            "cavia-baseline" => Ok(Method::CaviaBaseline),
            other => Err(format!(
                "unknown mode `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            )),
        }
    }
}

/// Outer learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `outer_lr` down to zero at the last iteration.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, iteration: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = iteration as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    /// Inner step size `α`.
    pub alpha: f64,
    /// Outer (Adam) learning rate `η`.
    pub outer_lr: f64,
    /// Hessian regulariser `ε`.
    pub eps: f64,
    pub support: usize,
    pub query: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    /// Meta-batches per epoch.
    pub tasks_per_epoch: usize,
    pub seed: u64,
    pub mode: Method,
    /// Inner steps for the baselines; LAVA always takes one.
    pub inner_steps: usize,
    pub hidden: Vec<usize>,
    /// Context width for the context-adapting modes.
    pub context_dim: usize,
    /// Global-norm gradient clip; off when absent.
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub workers: usize,
    /// Support resamples for the per-epoch adapted-parameter variance; 0 disables it.
    pub variance_resamples: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            outer_lr: 1e-3,
            eps: 0.1,
            support: 10,
            query: 25,
            meta_batch: 10,
            epochs: 100,
            tasks_per_epoch: 100,
            seed: 0,
            mode: Method::LavaLastLayer,
            inner_steps: 1,
            hidden: crate::model::DEFAULT_HIDDEN.to_vec(),
            context_dim: 2,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            workers: 1,
            variance_resamples: 100,
        }
    }
}

impl HyperConfig {
    /// Field-level validation; the message names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("alpha", self.alpha), ("outer_lr", self.outer_lr), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        for (name, v) in [
            ("support", self.support),
            ("query", self.query),
            ("meta_batch", self.meta_batch),
            ("inner_steps", self.inner_steps),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.variance_resamples == 1 {
            return Err("variance_resamples must be 0 (off) or >= 2".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.hidden.contains(&0) {
            return Err("hidden widths must be >= 1".into());
        }
        if self.mode.adapt_mode() == AdaptMode::Context && !(1..=16).contains(&self.context_dim) {
            return Err(format!(
                "context_dim must be in 1..=16 for {}, got {}",
                self.mode, self.context_dim
            ));
        }
        Ok(())
    }

    /// Inner steps actually taken.
    pub fn effective_inner_steps(&self) -> usize {
        if self.mode.is_lava() {
            1
        } else {
            self.inner_steps
        }
    }

    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Architecture {
        let arch = Architecture::new(input_dim, output_dim).with_hidden(&self.hidden);
        match self.mode.adapt_mode() {
            AdaptMode::Context => arch.with_context(self.context_dim),
            AdaptMode::LastLayer => arch,
        }
    }

    fn check_mode(&self, meta: &MetaParams) -> Result<(), LinalgError> {
        if meta.mode != self.mode.adapt_mode() {
            return Err(LinalgError::Contract(format!(
                "{} needs {:?} parameters, got {:?}",
                self.mode,
                self.mode.adapt_mode(),
                meta.mode
            )));
        }
        Ok(())
    }
}

/// Adam state: per-tensor first and second moments and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
}

impl AdamState {
    pub fn new(params: &MetaParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            delta: 1e-8,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &MetaParams, grads: &[Tensor], lr: f64) -> Result<MetaParams, LinalgError> {
        if grads.len() != self.first.len() {
            return Err(LinalgError::Contract(format!(
                "expected {} gradient tensors, got {}",
                self.first.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, delta) = (self.beta1, self.beta2, self.delta);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut updated = Vec::with_capacity(grads.len());
        for (i, (p, g)) in params.tensors().into_iter().zip(grads).enumerate() {
            if g.shape() != p.shape() {
                return Err(LinalgError::Dimension {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let n = p.len();
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            let mut data = Vec::with_capacity(n);
            for j in 0..n {
                let gj = g.data()[j];
                let mj = b1 * self.first[i].data()[j] + (1.0 - b1) * gj;
                let vj = b2 * self.second[i].data()[j] + (1.0 - b2) * gj * gj;
                m.push(mj);
                v.push(vj);
                data.push(p.data()[j] - lr * (mj / c1) / ((vj / c2).sqrt() + delta));
            }
            self.first[i] = Tensor::new(p.rows(), p.cols(), m)?;
            self.second[i] = Tensor::new(p.rows(), p.cols(), v)?;
            updated.push(Tensor::new(p.rows(), p.cols(), data)?);
        }
        MetaParams::from_tensors(&params.arch, params.mode, updated)
    }
}

/// Adapts on a support set with plain values.
pub fn adapt(meta: &MetaParams, support_x: &Tensor, support_y: &Tensor, cfg: &HyperConfig) -> Result<AdaptationResult, LinalgError> {
    cfg.check_mode(meta)?;
    let mut g = Eval;
    let p = meta.constants(&mut g);
    match cfg.mode {
        Method::LavaLastLayer => {
            let z = meta.features(support_x)?;
            fuse(head_point_posteriors(&meta.head, &z, support_y, cfg.alpha, cfg.eps)?)
        }
        Method::LavaContext => {
            let cf = lava_context(&mut g, &p, support_x, support_y, cfg.alpha, cfg.eps)?;
            let total = cf
                .posteriors
                .iter()
                .skip(1)
                .try_fold(cf.posteriors[0].precision.clone(), |acc, q| acc.add(&q.precision))?;
            Ok(AdaptationResult {
                fused: cf.phi,
                condition: condition_number(&total)?,
                posteriors: cf.posteriors,
            })
        }
        Method::AnilBaseline => {
            let z = meta.features(support_x)?;
            let fused = anil_head(&mut g, &meta.head, &z, support_y, cfg.alpha, cfg.effective_inner_steps())?;
            let points = head_point_posteriors(&meta.head, &z, support_y, cfg.alpha, cfg.eps)?;
            Ok(uniform_result(fused, points))
        }
        Method::CaviaBaseline => {
            let fused = cavia_context(&mut g, &p, support_x, support_y, cfg.alpha, cfg.effective_inner_steps())?;
            let phi0 = meta.context.as_ref().expect("context mode");
            let (_, grads) = crate::model::context_point_gradients(&mut g, &p, phi0, support_x, support_y)?;
            let points = (0..grads.rows())
                .map(|i| {
                    let adapted = crate::adaptation::inner_step(phi0, &grads.row(i), cfg.alpha)?;
                    let eye = Tensor::eye(phi0.cols());
                    Ok(PointPosterior {
                        adapted,
                        precision: eye.clone(),
                        raw_precision: eye,
                    })
                })
                .collect::<Result<Vec<_>, LinalgError>>()?;
            Ok(uniform_result(fused, points))
        }
    }
}

/// Baseline result: per-point first steps with identical unit precisions.
fn uniform_result(fused: Tensor, points: Vec<PointPosterior>) -> AdaptationResult {
    let m = points[0].adapted.cols();
    let posteriors = points
        .into_iter()
        .map(|p| PointPosterior {
            adapted: p.adapted,
            precision: Tensor::eye(m),
            raw_precision: Tensor::eye(m),
        })
        .collect();
    AdaptationResult {
        fused,
        posteriors,
        condition: 1.0,
    }
}

/// Predictions of the model adapted to `fused` on inputs `x`.
pub fn predict_adapted(meta: &MetaParams, fused: &Tensor, x: &Tensor) -> Result<Tensor, LinalgError> {
    match meta.mode {
        AdaptMode::LastLayer => meta.features(x)?.matmul_t(fused),
        AdaptMode::Context => meta.predict(x, Some(fused)),
    }
}

/// Adapt on the support set, then mean squared error on the query set.
pub fn task_query_mse(meta: &MetaParams, batch: &TaskBatch, cfg: &HyperConfig) -> Result<f64, LinalgError> {
    let res = adapt(meta, &batch.support_x, &batch.support_y, cfg)?;
    predict_adapted(meta, &res.fused, &batch.query_x)?.mse(&batch.query_y)
}

/// Records one task's adapt-then-query loss on `g`, returning the loss node
/// and, for LAVA modes, `κ` of the regularised precision sum.
pub fn task_objective<G: Graph>(
    g: &mut G,
    p: &ParamNodes<G::Node>,
    batch: &TaskBatch,
    cfg: &HyperConfig,
) -> Result<(G::Node, Option<f64>), LinalgError> {
    let ys = g.constant(batch.support_y.clone());
    let yq = g.constant(batch.query_y.clone());
    let steps = cfg.effective_inner_steps();
    let (pred, condition) = match cfg.mode {
        Method::LavaLastLayer | Method::AnilBaseline => {
            let n = batch.support_size();
            let both = g.constant(batch.support_x.concat_rows(&batch.query_x)?);
            let z_all = features(g, p, &both)?;
            let total = g.value(&z_all).rows();
            let pick = |from: usize, len: usize| {
                Tensor::from_fn(len, total, move |r, c| if c == from + r { 1.0 } else { 0.0 })
            };
            let zs = g.const_matmul(pick(0, n), &z_all)?;
            let zq = g.const_matmul(pick(n, total - n), &z_all)?;
            if cfg.mode == Method::LavaLastLayer {
                let hf = lava_head(g, &p.head, &zs, &ys, cfg.alpha, cfg.eps)?;
                let k = head_precision_condition(g.value(&zs), cfg.eps)?;
                (head(g, &hf.theta, &zq)?, Some(k))
            } else {
                let theta = anil_head(g, &p.head, &zs, &ys, cfg.alpha, steps)?;
                (head(g, &theta, &zq)?, None)
            }
        }
        Method::LavaContext => {
            let xs = g.constant(batch.support_x.clone());
            let xq = g.constant(batch.query_x.clone());
            let cf = lava_context(g, p, &xs, &ys, cfg.alpha, cfg.eps)?;
            let mut total = cf.posteriors[0].precision.clone();
            for q in &cf.posteriors[1..] {
                total = total.add(&q.precision)?;
            }
            (context_forward(g, p, &cf.phi, &xq)?, Some(condition_number(&total)?))
        }
        Method::CaviaBaseline => {
            let xs = g.constant(batch.support_x.clone());
            let xq = g.constant(batch.query_x.clone());
            let phi = cavia_context(g, p, &xs, &ys, cfg.alpha, steps)?;
            (context_forward(g, p, &phi, &xq)?, None)
        }
    };
    Ok((g.mse(&pred, &yq)?, condition))
}

/// `κ((2ZᵀZ + NεI)/(1+ε))` for `N × m` features `Z`.
///
/// The nonzero spectrum of `ZᵀZ` is that of the smaller `ZZᵀ`, so for `N < m`
/// only an `N × N` eigenproblem is solved and the smallest eigenvalue is `Nε`.
pub fn head_precision_condition(z: &Tensor, eps: f64) -> Result<f64, LinalgError> {
    let (n, m) = z.shape();
    if n >= m {
        let reg = z.t_matmul(z)?.scale(2.0)?.add(&Tensor::eye(m).scale(n as f64 * eps)?)?;
        return condition_number(&reg);
    }
    let eig = crate::linalg::symmetric_eigenvalues(&z.matmul_t(z)?.symmetrized()?)?;
    let shift = n as f64 * eps;
    let max = 2.0 * eig.last().copied().unwrap_or(0.0).max(0.0) + shift;
    Ok(max / shift)
}

/// Per-task outcome of a gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub query_mse: f64,
    pub condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterGradient {
    /// Gradient tensors in [`MetaParams::tensors`] order.
    pub grads: Vec<Tensor>,
    /// Mean query MSE over the batch.
    pub loss: f64,
    pub tasks: Vec<TaskStats>,
}

#[derive(Debug, Error)]
#[error("task {task} of the meta-batch{}: {source}", loss.map(|l| format!(" (query loss {l})")).unwrap_or_default())]
pub struct StepError {
    pub task: usize,
    pub loss: Option<f64>,
    #[source]
    pub source: LinalgError,
}

fn single_task_gradient(meta: &MetaParams, batch: &TaskBatch, cfg: &HyperConfig) -> Result<(Vec<Tensor>, TaskStats), (Option<f64>, LinalgError)> {
    let mut tape = Tape::new();
    let p = meta.leaves(&mut tape);
    let (loss, condition) = task_objective(&mut tape, &p, batch, cfg).map_err(|e| (None, e))?;
    let value = tape.value(&loss).item();
    if !value.is_finite() {
        return Err((Some(value), LinalgError::NonFinite { op: "query-loss" }));
    }
    let grads = tape.backward(loss).map_err(|e| (Some(value), e))?;
    let order: Vec<Var> = p.in_order();
    let out = order
        .iter()
        .zip(meta.tensors())
        .map(|(&v, like)| grads.wrt(v, like))
        .collect::<Vec<_>>();
    if out.iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
        return Err((Some(value), LinalgError::NonFinite { op: "outer-gradient" }));
    }
    Ok((out, TaskStats { query_mse: value, condition }))
}

/// Gradient of the mean query MSE over `batches` with respect to every
/// meta-parameter. Tasks may be spread over `cfg.workers` threads; the
/// reduction always runs in task order.
pub fn outer_gradient(meta: &MetaParams, batches: &[TaskBatch], cfg: &HyperConfig) -> Result<OuterGradient, StepError> {
    cfg.check_mode(meta).map_err(|source| StepError {
        task: 0,
        loss: None,
        source,
    })?;
    if batches.is_empty() {
        return Err(StepError {
            task: 0,
            loss: None,
            source: LinalgError::Contract("empty meta-batch".into()),
        });
    }
    let workers = cfg.workers.clamp(1, batches.len());
    let results: Vec<_> = if workers == 1 {
        batches.iter().map(|b| single_task_gradient(meta, b, cfg)).collect()
    } else {
        let chunk = batches.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|b| single_task_gradient(meta, b, cfg)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let scale = 1.0 / batches.len() as f64;
    let mut sum: Vec<Tensor> = meta.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    let mut tasks = Vec::with_capacity(batches.len());
    let mut loss = 0.0;
    for (task, r) in results.into_iter().enumerate() {
        let (grads, stats) = r.map_err(|(loss, source)| StepError { task, loss, source })?;
        for (acc, gr) in sum.iter_mut().zip(&grads) {
            acc.add_scaled_assign(gr, scale);
        }
        loss += stats.query_mse * scale;
        tasks.push(stats);
    }
    Ok(OuterGradient { grads: sum, loss, tasks })
}

/// Rescales `grads` so their joint Frobenius norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.frobenius_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s).expect("finite gradient");
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_query_mse: f64,
    pub std_query_mse: f64,
    /// `log₁₀ tr Cov(adapted)` on a fixed probe task; NaN when disabled.
    pub mean_log_var_adapted: f64,
    /// Mean `κ(Σ H̃ᵢ)`; NaN for the baselines.
    pub mean_condition_number: f64,
    pub wall_time_s: f64,
}

impl EpochLog {
    pub const HEADER: &'static str =
        "epoch,mean_query_mse,std_query_mse,mean_log_var_adapted,mean_condition_number,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.mean_query_mse,
            self.std_query_mse,
            self.mean_log_var_adapted,
            self.mean_condition_number,
            self.wall_time_s
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("numeric failure at epoch {epoch}, meta-iteration {iteration}: {source}")]
    Numeric {
        epoch: usize,
        iteration: usize,
        #[source]
        source: StepError,
        /// Parameters before the failing update.
        last_good: Box<MetaParams>,
    },
    #[error("variance probe: {0}")]
    Probe(#[source] LinalgError),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MetaParams,
    pub log: Vec<EpochLog>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Initial meta-parameters for `cfg` on `source`.
pub fn init_params(cfg: &HyperConfig, source: &TaskSource) -> Result<MetaParams, TrainError> {
    let arch = cfg.architecture(source.input_dim(), source.output_dim());
    MetaParams::init(SeedTree::new(cfg.seed).child("init"), &arch, cfg.mode.adapt_mode())
        .map_err(|e| TrainError::Config(e.to_string()))
}

/// Task batches for meta-iteration `iteration` (0-based, counted across epochs).
pub fn training_batches(cfg: &HyperConfig, source: &TaskSource, iteration: u64) -> Result<Vec<TaskBatch>, TaskError> {
    let stream = SeedTree::new(cfg.seed).child("train");
    let first = iteration * cfg.meta_batch as u64;
    (0..cfg.meta_batch as u64)
        .map(|b| source.batch(stream, first + b, cfg.support, cfg.query))
        .collect()
}

/// Runs `cfg.epochs` epochs from freshly initialised parameters.
pub fn meta_train(cfg: &HyperConfig, source: &TaskSource) -> Result<TrainOutcome, TrainError> {
    let init = init_params(cfg, source)?;
    meta_train_from(cfg, source, init, |_, _| {})
}

/// Runs `cfg.epochs` epochs starting from `params`, calling `on_epoch` after
/// each epoch with its log row and the current parameters.
pub fn meta_train_from(
    cfg: &HyperConfig,
    source: &TaskSource,
    params: MetaParams,
    mut on_epoch: impl FnMut(&EpochLog, &MetaParams),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    cfg.check_mode(&params).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut params = params;
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let root = SeedTree::new(cfg.seed);
    let probe = if cfg.variance_resamples >= 2 {
        let mut rng = root.child("probe").rng();
        Some(source.sample_task(cfg.support + cfg.query, &mut rng)?)
    } else {
        None
    };
    for epoch in 1..=cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.tasks_per_epoch * cfg.meta_batch);
        let mut conditions = Vec::new();
        for it in 0..cfg.tasks_per_epoch {
            let iteration = (epoch - 1) * cfg.tasks_per_epoch + it;
            let batches = training_batches(cfg, source, iteration as u64)?;
            let mut og = outer_gradient(&params, &batches, cfg).map_err(|source| TrainError::Numeric {
                epoch,
                iteration,
                source,
                last_good: Box::new(params.clone()),
            })?;
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut og.grads, c);
            }
            let lr = cfg.lr_schedule.rate(cfg.outer_lr, iteration, cfg.epochs * cfg.tasks_per_epoch);
            let next = adam.step(&params, &og.grads, lr).map_err(|e| TrainError::Numeric {
                epoch,
                iteration,
                source: StepError {
                    task: 0,
                    loss: Some(og.loss),
                    source: e,
                },
                last_good: Box::new(params.clone()),
            })?;
            params = next;
            for t in og.tasks {
                losses.push(t.query_mse);
                if let Some(k) = t.condition {
                    conditions.push(k);
                }
            }
        }
        let (mean, std) = mean_std(&losses);
        let log_var = match &probe {
            Some(task) => {
                let mut rng = root.child("probe-supports").rng();
                crate::harness::estimate_adaptation_variance(&params, task, cfg.variance_resamples, cfg.support, cfg, &mut rng)
                    .map_err(TrainError::Probe)?
                    .log_variance
            }
            None => f64::NAN,
        };
        let row = EpochLog {
            epoch,
            mean_query_mse: mean,
            std_query_mse: std,
            mean_log_var_adapted: log_var,
            mean_condition_number: if conditions.is_empty() {
                f64::NAN
            } else {
                mean_std(&conditions).0
            },
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row, &params);
        log.push(row);
    }
    Ok(TrainOutcome { params, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub per_task: Vec<f64>,
}

/// Adapts on each task's support set and scores its query set.
pub fn evaluate(meta: &MetaParams, tasks: &[TaskBatch], cfg: &HyperConfig) -> Result<EvalSummary, LinalgError> {
    if tasks.is_empty() {
        return Err(LinalgError::Contract("evaluation needs at least one task".into()));
    }
    let per_task = tasks
        .iter()
        .map(|b| task_query_mse(meta, b, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let (mean, std) = mean_std(&per_task);
    Ok(EvalSummary { mean, std, per_task })
}

/// Freshly sampled evaluation tasks for one evaluation seed.
pub fn evaluation_tasks(source: &TaskSource, seed: u64, n_tasks: usize, support: usize, query: usize) -> Result<Vec<TaskBatch>, TaskError> {
    let stream = SeedTree::new(seed).child("eval");
    (0..n_tasks as u64)
        .map(|i| source.batch(stream, i, support, query))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalSummary>,
    /// Mean and std of the per-seed means.
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Numeric(#[from] LinalgError),
}

/// [`evaluate`] on `n_tasks` fresh tasks for each evaluation seed.
pub fn evaluate_seeds(
    meta: &MetaParams,
    source: &TaskSource,
    n_tasks: usize,
    seeds: &[u64],
    cfg: &HyperConfig,
) -> Result<SeedSummary, EvalError> {
    let per_seed = seeds
        .iter()
        .map(|&s| {
            let tasks = evaluation_tasks(source, s, n_tasks, cfg.support, cfg.query)?;
            Ok(evaluate(meta, &tasks, cfg)?)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let means: Vec<f64> = per_seed.iter().map(|s| s.mean).collect();
    let (mean, std) = mean_std(&means);
    Ok(SeedSummary {
        seeds: seeds.to_vec(),
        per_seed,
        mean,
        std,
    })
}
