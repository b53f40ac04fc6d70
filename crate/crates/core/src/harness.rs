//! Diagnostic experiments: spread of adapted parameters, per-point loss
//! landscapes of a 2-D context, conditioning of the summed precisions, label
//! noise sensitivity and per-iteration cost. Results are plain rows ready for
//! CSV emission.

use std::io::Write;
use std::time::Instant;

use rand::Rng;

use crate::adaptation::AdaptationResult;
use crate::linalg::condition_number;
use crate::model::{AdaptMode, MetaParams};
use crate::seed::SeedTree;
use crate::tasks::{Task, TaskSource};
use crate::tensor::{LinalgError, Result, Tensor};
use crate::training::{
    adapt, evaluate, evaluation_tasks, init_params, mean_std, outer_gradient, predict_adapted, training_batches,
    AdamState, EvalError, HyperConfig, Method,
};

/// Empirical spread of the adapted parameters over resampled supports.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// One flattened `1 × P` row per resample.
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
    /// Unbiased `P × P` sample covariance.
    pub covariance: Tensor,
    /// `log₁₀ tr(covariance)`.
    pub log_variance: f64,
}

/// Resamples `resamples` supports of size `support` from `task`, adapts on
/// each and reports the spread of the adapted parameters.
pub fn estimate_adaptation_variance(
    meta: &MetaParams,
    task: &Task,
    resamples: usize,
    support: usize,
    cfg: &HyperConfig,
    rng: &mut impl Rng,
) -> Result<VarianceReport> {
    if resamples < 2 {
        return Err(LinalgError::Contract(format!("need at least 2 resamples, got {resamples}")));
    }
    let samples = (0..resamples)
        .map(|_| {
            let (x, y) = task.sample_points(support, rng);
            let fused = adapt(meta, &x, &y, cfg)?.fused;
            let n = fused.len();
            fused.reshape(1, n)
        })
        .collect::<Result<Vec<_>>>()?;
    let p = samples[0].cols();
    let shifted = samples
        .iter()
        .map(|s| s.sub(&samples[0]))
        .collect::<Result<Vec<_>>>()?;
    let mut shift_mean = Tensor::zeros(1, p);
    for d in &shifted {
        shift_mean.add_assign(d);
    }
    let shift_mean = shift_mean.scale(1.0 / resamples as f64)?;
    let mut covariance = Tensor::zeros(p, p);
    for d in &shifted {
        let c = d.sub(&shift_mean)?;
        covariance.add_assign(&c.t_matmul(&c)?);
    }
    let covariance = covariance.scale(1.0 / (resamples - 1) as f64)?;
    let mean = samples[0].add(&shift_mean)?;
    let log_variance = covariance.trace().log10();
    Ok(VarianceReport {
        samples,
        mean,
        covariance,
        log_variance,
    })
}

/// Grid over a rectangle of 2-D context values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-2.0, 2.0),
            y_range: (-2.0, 2.0),
            width: 101,
            height: 101,
        }
    }
}

impl GridSpec {
    fn coords(&self) -> Vec<(f64, f64)> {
        let lerp = |(lo, hi): (f64, f64), i: usize, n: usize| {
            if n == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.width * self.height);
        for j in 0..self.height {
            for i in 0..self.width {
                out.push((lerp(self.x_range, i, self.width), lerp(self.y_range, j, self.height)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeCell {
    pub point_idx: usize,
    pub cx: f64,
    pub cy: f64,
    pub log_mse: f64,
}

/// Precision `H̃ᵢ` of one support point centred at its adapted context.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipse {
    pub point_idx: usize,
    pub h11: f64,
    pub h12: f64,
    pub h22: f64,
    pub mean_x: f64,
    pub mean_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub prior: [f64; 2],
    pub fused: [f64; 2],
    pub ellipses: Vec<Ellipse>,
    /// Effective fusion weights `Wᵢ`, which sum to the identity.
    pub weights: Vec<Tensor>,
    /// `width × height × N` cells, point-major.
    pub cells: Vec<LandscapeCell>,
}

/// `log₁₀` of each support point's squared error over a grid of context
/// values, with the prior, per-point and fused contexts and the per-point
/// precisions.
pub fn loss_landscape_grid(
    meta: &MetaParams,
    support_x: &Tensor,
    support_y: &Tensor,
    grid: &GridSpec,
    cfg: &HyperConfig,
) -> Result<Landscape> {
    if meta.mode != AdaptMode::Context || meta.arch.context_dim != 2 {
        return Err(LinalgError::Contract(format!(
            "landscape needs a context model with 2 context dimensions, got {:?} with {}",
            meta.mode, meta.arch.context_dim
        )));
    }
    if grid.width == 0 || grid.height == 0 {
        return Err(LinalgError::Contract("grid must have at least one cell per axis".into()));
    }
    let lava = HyperConfig {
        mode: Method::LavaContext,
        ..cfg.clone()
    };
    let res = adapt(meta, support_x, support_y, &lava)?;
    let prior = meta.context.as_ref().expect("context mode");
    let coords = grid.coords();
    let probes = Tensor::from_fn(coords.len(), 2, |r, c| if c == 0 { coords[r].0 } else { coords[r].1 });
    let mut cells = Vec::with_capacity(coords.len() * support_x.rows());
    for i in 0..support_x.rows() {
        let xi = Tensor::ones(coords.len(), 1).matmul(&support_x.row(i))?;
        let yi = support_y.row(i);
        let out = context_rows(meta, &xi, &probes)?;
        for (r, &(cx, cy)) in coords.iter().enumerate() {
            let se: f64 = out
                .row_slice(r)
                .iter()
                .zip(yi.row_slice(0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cells.push(LandscapeCell {
                point_idx: i,
                cx,
                cy,
                log_mse: se.max(f64::MIN_POSITIVE).log10(),
            });
        }
    }
    let ellipses = res
        .posteriors
        .iter()
        .enumerate()
        .map(|(i, p)| Ellipse {
            point_idx: i,
            h11: p.precision[(0, 0)],
            h12: p.precision[(0, 1)],
            h22: p.precision[(1, 1)],
            mean_x: p.adapted[(0, 0)],
            mean_y: p.adapted[(0, 1)],
        })
        .collect();
    Ok(Landscape {
        prior: [prior[(0, 0)], prior[(0, 1)]],
        fused: [res.fused[(0, 0)], res.fused[(0, 1)]],
        weights: res.effective_weights()?,
        ellipses,
        cells,
    })
}

/// Network output for input rows `x` each paired with its own context row.
fn context_rows(meta: &MetaParams, x: &Tensor, phis: &Tensor) -> Result<Tensor> {
    let mut h = x.concat_cols(phis)?;
    for l in &meta.hidden {
        h = h.matmul(&l.weight)?.add(&Tensor::ones(h.rows(), 1).matmul(&l.bias)?)?.relu();
    }
    h.append_ones().matmul_t(&meta.head)
}

/// `(κ(Σ Hᵢ), κ(Σ H̃ᵢ))`, with `∞` for a numerically singular sum.
pub fn condition_numbers(result: &AdaptationResult) -> Result<(f64, f64)> {
    Ok((
        condition_number(&result.raw_precision_sum())?,
        condition_number(&result.precision_sum())?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub task: usize,
    pub raw: f64,
    pub regularized: f64,
}

/// Condition numbers of LAVA's precision sums on fresh tasks.
pub fn condition_survey(
    meta: &MetaParams,
    source: &TaskSource,
    n_tasks: usize,
    seed: u64,
    cfg: &HyperConfig,
) -> std::result::Result<Vec<ConditionRow>, EvalError> {
    let lava = HyperConfig {
        mode: match meta.mode {
            AdaptMode::LastLayer => Method::LavaLastLayer,
            AdaptMode::Context => Method::LavaContext,
        },
        ..cfg.clone()
    };
    let tasks = evaluation_tasks(source, seed, n_tasks, cfg.support, cfg.query)?;
    tasks
        .iter()
        .enumerate()
        .map(|(task, b)| {
            let res = adapt(meta, &b.support_x, &b.support_y, &lava)?;
            let (raw, regularized) = condition_numbers(&res)?;
            Ok(ConditionRow { task, raw, regularized })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub sigma: f64,
    pub support: usize,
    pub clean_mse: f64,
    pub noisy_mse: f64,
    /// `noisy_mse − clean_mse`.
    pub delta: f64,
}

/// Query-MSE change from adding `N(0, σ²)` to the support labels, for every
/// `(σ, N)` pair, averaged over `n_tasks` tasks. Clean and noisy runs share
/// tasks, supports and queries.
pub fn noise_robustness(
    meta: &MetaParams,
    source: &TaskSource,
    sigmas: &[f64],
    supports: &[usize],
    n_tasks: usize,
    seed: u64,
    cfg: &HyperConfig,
) -> std::result::Result<Vec<NoiseRow>, EvalError> {
    let root = SeedTree::new(seed);
    let mut rows = Vec::new();
    for &support in supports {
        let tasks = evaluation_tasks(source, seed, n_tasks, support, cfg.query)?;
        let cfg_n = HyperConfig {
            support,
            ..cfg.clone()
        };
        let clean = evaluate(meta, &tasks, &cfg_n)?.mean;
        for (si, &sigma) in sigmas.iter().enumerate() {
            let mut noisy_tasks = Vec::with_capacity(tasks.len());
            for (ti, b) in tasks.iter().enumerate() {
                let mut rng = root.child("noise").index(si as u64).index(ti as u64).rng();
                noisy_tasks.push(crate::tasks::add_label_noise(b, sigma, &mut rng)?);
            }
            let noisy = evaluate(meta, &noisy_tasks, &cfg_n)?.mean;
            rows.push(NoiseRow {
                sigma,
                support,
                clean_mse: clean,
                noisy_mse: noisy,
                delta: noisy - clean,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingCase {
    pub mode: Method,
    pub steps: usize,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub mode: Method,
    pub steps: usize,
    pub support: usize,
    /// Mean wall time of one meta-iteration (task sampling, gradient, Adam).
    pub s_per_iter: f64,
    /// Evaluation MSE after the timed iterations.
    pub mse: f64,
}

/// Mean seconds per meta-iteration over `iterations` timed steps after
/// `warmup` untimed ones, and the parameters reached.
pub fn time_iterations(
    cfg: &HyperConfig,
    source: &TaskSource,
    warmup: usize,
    iterations: usize,
) -> std::result::Result<(f64, MetaParams), crate::training::TrainError> {
    use crate::training::TrainError;
    cfg.validate().map_err(TrainError::Config)?;
    let mut params = init_params(cfg, source)?;
    let mut adam = AdamState::new(&params);
    let mut elapsed = 0.0;
    for it in 0..warmup + iterations {
        let t0 = Instant::now();
        let batches = training_batches(cfg, source, it as u64)?;
        let og = outer_gradient(&params, &batches, cfg).map_err(|source| TrainError::Numeric {
            epoch: 0,
            iteration: it,
            source,
            last_good: Box::new(params.clone()),
        })?;
        params = adam
            .step(&params, &og.grads, cfg.outer_lr)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if it >= warmup {
            elapsed += t0.elapsed().as_secs_f64();
        }
    }
    Ok((elapsed / iterations.max(1) as f64, params))
}

/// Per-iteration cost and reached MSE for each case under a shared budget.
pub fn timing_benchmark(
    cases: &[TimingCase],
    source: &TaskSource,
    base: &HyperConfig,
    warmup: usize,
    iterations: usize,
    eval_tasks: usize,
) -> std::result::Result<Vec<TimingRow>, crate::training::TrainError> {
    cases
        .iter()
        .map(|case| {
            let cfg = HyperConfig {
                mode: case.mode,
                inner_steps: case.steps,
                support: case.support,
                ..base.clone()
            };
            let (s_per_iter, params) = time_iterations(&cfg, source, warmup, iterations)?;
            let tasks = evaluation_tasks(source, base.seed, eval_tasks.max(1), cfg.support, cfg.query)?;
            let mse = evaluate(&params, &tasks, &cfg)
                .map_err(|e| crate::training::TrainError::Config(e.to_string()))?
                .mean;
            Ok(TimingRow {
                mode: case.mode,
                steps: cfg.effective_inner_steps(),
                support: case.support,
                s_per_iter,
                mse,
            })
        })
        .collect()
}

/// Relative difference of two timings of the same configuration.
pub fn timing_spread(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.min(b)
}

/// Timing gate: repeated measurements differ by less than 20%.
pub const TIMING_STABILITY: f64 = 0.2;

/// Writes a header and rows as CSV.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

pub const VARIANCE_HEADER: [&str; 3] = ["epoch", "mode", "log_var"];
pub const LANDSCAPE_HEADER: [&str; 4] = ["point_idx", "cx", "cy", "log_mse"];
pub const ELLIPSE_HEADER: [&str; 6] = ["point_idx", "h11", "h12", "h22", "mean_x", "mean_y"];
pub const TIMING_HEADER: [&str; 5] = ["mode", "steps", "support", "s_per_iter", "mse"];
pub const CONDITION_HEADER: [&str; 3] = ["task", "kappa_raw", "kappa_regularized"];
pub const NOISE_HEADER: [&str; 5] = ["sigma", "support", "clean_mse", "noisy_mse", "delta"];

impl LandscapeCell {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.point_idx.to_string(),
            self.cx.to_string(),
            self.cy.to_string(),
            self.log_mse.to_string(),
        ]
    }
}

impl Ellipse {
    pub fn record(&self) -> Vec<String> {
        [self.h11, self.h12, self.h22, self.mean_x, self.mean_y]
            .iter()
            .fold(vec![self.point_idx.to_string()], |mut v, x| {
                v.push(x.to_string());
                v
            })
    }
}

impl TimingRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.mode.to_string(),
            self.steps.to_string(),
            self.support.to_string(),
            self.s_per_iter.to_string(),
            self.mse.to_string(),
        ]
    }
}

impl ConditionRow {
    pub fn record(&self) -> Vec<String> {
        vec![self.task.to_string(), self.raw.to_string(), self.regularized.to_string()]
    }
}

impl NoiseRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.sigma.to_string(),
            self.support.to_string(),
            self.clean_mse.to_string(),
            self.noisy_mse.to_string(),
            self.delta.to_string(),
        ]
    }
}

/// Mean and standard error of `values`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let (mean, std) = mean_std(values);
    (mean, std * (n / (n - 1.0)).sqrt() / n.sqrt())
}

/// Predictions after adapting on a support set; convenience for experiments.
pub fn adapted_predictions(meta: &MetaParams, support_x: &Tensor, support_y: &Tensor, x: &Tensor, cfg: &HyperConfig) -> Result<Tensor> {
    let res = adapt(meta, support_x, support_y, cfg)?;
    predict_adapted(meta, &res.fused, x)
}
