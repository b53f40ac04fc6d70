//! Task distributions: sine waves, ODE vector fields, cartpole inverse
//! dynamics, and contiguous windows of a CSV time series.

use std::f64::consts::PI;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::SeedTree;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task family `{0}` (expected sine, fitzhugh-nagumo, mass-spring, pendulum, van-der-pol or cartpole)")]
    UnknownFamily(String),
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        line: u64,
        column: String,
        value: String,
    },
    #[error("window of {window} rows exceeds series length {rows}")]
    WindowTooLarge { window: usize, rows: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeSystem {
    FitzHughNagumo,
    MassSpring,
    Pendulum,
    VanDerPol,
    Cartpole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    Sine,
    Ode(OdeSystem),
}

impl TaskFamily {
    pub const NAMES: [&'static str; 6] = [
        "sine",
        "fitzhugh-nagumo",
        "mass-spring",
        "pendulum",
        "van-der-pol",
        "cartpole",
    ];

    pub fn input_dim(self) -> usize {
        match self {
            TaskFamily::Sine => 1,
            TaskFamily::Ode(OdeSystem::Cartpole) => 6,
            TaskFamily::Ode(_) => 2,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            TaskFamily::Sine | TaskFamily::Ode(OdeSystem::Cartpole) => 1,
            TaskFamily::Ode(_) => 2,
        }
    }

    pub fn sample_task(self, rng: &mut impl Rng) -> Task {
        match self {
            TaskFamily::Sine => sample_sine_task(rng),
            TaskFamily::Ode(sys) => sample_ode_task(sys, rng),
        }
    }

    /// The `index`-th task batch of a seeded stream; identical for identical arguments.
    pub fn batch(self, seed: SeedTree, index: u64, support: usize, query: usize) -> Result<TaskBatch, TaskError> {
        let mut rng = seed.index(index).rng();
        let task = self.sample_task(&mut rng);
        sample_support_query(&task, support, query, &mut rng)
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskFamily::Sine => "sine",
            TaskFamily::Ode(OdeSystem::FitzHughNagumo) => "fitzhugh-nagumo",
            TaskFamily::Ode(OdeSystem::MassSpring) => "mass-spring",
            TaskFamily::Ode(OdeSystem::Pendulum) => "pendulum",
            TaskFamily::Ode(OdeSystem::VanDerPol) => "van-der-pol",
            TaskFamily::Ode(OdeSystem::Cartpole) => "cartpole",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskFamily {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "sine" => TaskFamily::Sine,
            "fitzhugh-nagumo" | "fhn" => TaskFamily::Ode(OdeSystem::FitzHughNagumo),
            "mass-spring" => TaskFamily::Ode(OdeSystem::MassSpring),
            "pendulum" => TaskFamily::Ode(OdeSystem::Pendulum),
            "van-der-pol" | "vdp" => TaskFamily::Ode(OdeSystem::VanDerPol),
            "cartpole" => TaskFamily::Ode(OdeSystem::Cartpole),
            other => return Err(TaskError::UnknownFamily(other.to_string())),
        })
    }
}

/// The parameters that identify one task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskDescriptor {
    Sine { amplitude: f64, phase: f64 },
    FitzHughNagumo { a: f64, b: f64, c: f64 },
    MassSpring { mass: f64, stiffness: f64 },
    Pendulum { mass: f64, length: f64, gravity: f64 },
    VanDerPol { mu: f64 },
    Cartpole(CartpoleParams),
    Series { start_row: usize },
}

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_PHASE: (f64, f64) = (0.0, PI);
pub const SINE_INPUT: (f64, f64) = (-5.0, 5.0);

impl TaskDescriptor {
    /// Target for input row `x`, for families with a closed-form relation.
    pub fn evaluate(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(match *self {
            TaskDescriptor::Sine { amplitude, phase } => vec![amplitude * (x[0] + phase).sin()],
            TaskDescriptor::FitzHughNagumo { a, b, c } => {
                let (u, v) = (x[0], x[1]);
                vec![c * (u - u * u * u / 3.0 + v), -(u - a + b * v) / c]
            }
            TaskDescriptor::MassSpring { mass, stiffness } => {
                let (pos, vel) = (x[0], x[1]);
                vec![-vel / mass, -stiffness * pos]
            }
            TaskDescriptor::Pendulum {
                mass,
                length,
                gravity,
            } => {
                let (th, om) = (x[0], x[1]);
                vec![om / (mass * length * length), -mass * gravity * length * th.sin()]
            }
            TaskDescriptor::VanDerPol { mu } => {
                let (p, q) = (x[0], x[1]);
                vec![q, mu * (1.0 - p * p) * q - p]
            }
            TaskDescriptor::Cartpole(ref c) => vec![c.inverse_dynamics(x)],
            TaskDescriptor::Series { .. } => return None,
        })
    }

    /// Whether every parameter lies in its documented sampling range.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        match *self {
            TaskDescriptor::Sine { amplitude, phase } => {
                within(amplitude, SINE_AMPLITUDE) && within(phase, SINE_PHASE)
            }
            TaskDescriptor::FitzHughNagumo { a, b, c } => {
                [a, b, c].iter().all(|&v| within(v, (0.1, 2.0)))
            }
            TaskDescriptor::MassSpring { mass, stiffness } => {
                within(mass, (0.5, 1.5)) && within(stiffness, (0.5, 1.5))
            }
            TaskDescriptor::Pendulum {
                mass,
                length,
                gravity,
            } => [mass, length, gravity].iter().all(|&v| within(v, (0.5, 1.5))),
            TaskDescriptor::VanDerPol { mu } => within(mu, (0.1, 5.0)),
            TaskDescriptor::Cartpole(ref c) => within(c.cart_mass, (0.5, 1.5)),
            TaskDescriptor::Series { .. } => true,
        }
    }
}

/// Actuated cartpole, pole angle measured from upright.
///
/// `M(q)q̈ + C(q,q̇)q̇ + g(q) = Bu` with `q = (x, θ)`, `B = (1, 0)ᵀ` and
///
/// ```text
/// M = [[M_c + m, m l cosθ], [m l cosθ, m l²]]
/// C q̇ = (−m l θ̇² sinθ, 0)
/// g = (0, −m g l sinθ)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
}

impl CartpoleParams {
    /// Control `u` for input row `(x, θ, ẋ, θ̇, ẍ, θ̈)`.
    pub fn inverse_dynamics(&self, s: &[f64]) -> f64 {
        let (th, om, xdd, thdd) = (s[1], s[3], s[4], s[5]);
        let (m, l) = (self.pole_mass, self.pole_length);
        (self.cart_mass + m) * xdd + m * l * th.cos() * thdd - m * l * om * om * th.sin()
    }

    /// `(ẍ, θ̈)` from state `(x, θ, ẋ, θ̇)` under control `u`.
    pub fn forward_dynamics(&self, s: &[f64; 4], u: f64) -> (f64, f64) {
        let (th, om) = (s[1], s[3]);
        let (m, l, g) = (self.pole_mass, self.pole_length, self.gravity);
        let (sin, cos) = th.sin_cos();
        let m11 = self.cart_mass + m;
        let m12 = m * l * cos;
        let m22 = m * l * l;
        let r1 = u + m * l * om * om * sin;
        let r2 = m * g * l * sin;
        let det = m11 * m22 - m12 * m12;
        ((m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det)
    }
}

/// Trajectory generation settings for cartpole tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartpoleSpec {
    pub steps: usize,
    pub dt: f64,
}

impl Default for CartpoleSpec {
    fn default() -> Self {
        Self { steps: 200, dt: 0.02 }
    }
}

/// A sampled task: its descriptor plus, where needed, the data points it owns.
#[derive(Debug, Clone)]
pub struct Task {
    pub descriptor: TaskDescriptor,
    input_dim: usize,
    output_dim: usize,
    pool: Option<(Tensor, Tensor)>,
}

impl Task {
    pub fn analytic(descriptor: TaskDescriptor, input_dim: usize, output_dim: usize) -> Self {
        Self {
            descriptor,
            input_dim,
            output_dim,
            pool: None,
        }
    }

    /// A task whose points are drawn from a fixed pool of `(input, target)` rows.
    pub fn from_pool(descriptor: TaskDescriptor, inputs: Tensor, targets: Tensor) -> Self {
        Self {
            descriptor,
            input_dim: inputs.cols(),
            output_dim: targets.cols(),
            pool: Some((inputs, targets)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn pool(&self) -> Option<(&Tensor, &Tensor)> {
        self.pool.as_ref().map(|(x, y)| (x, y))
    }

    fn sample_input(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.descriptor {
            TaskDescriptor::Sine { .. } => vec![rng.random_range(SINE_INPUT.0..SINE_INPUT.1)],
            TaskDescriptor::FitzHughNagumo { .. } => {
                (0..2).map(|_| rng.random_range(-2.5..2.5)).collect()
            }
            TaskDescriptor::MassSpring { .. } => (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            TaskDescriptor::Pendulum { .. } => vec![
                rng.random_range(-PI / 2.0..PI / 2.0),
                rng.random_range(-1.0..1.0),
            ],
            TaskDescriptor::VanDerPol { .. } => (0..2).map(|_| rng.random_range(-3.0..3.0)).collect(),
            TaskDescriptor::Cartpole(_) | TaskDescriptor::Series { .. } => {
                unreachable!("pool-backed task")
            }
        }
    }

    /// `n` i.i.d. `(input, target)` pairs.
    pub fn sample_points(&self, n: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
        match &self.pool {
            Some((xs, ys)) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..xs.rows())).collect();
                (xs.select_rows(&idx), ys.select_rows(&idx))
            }
            None => {
                let mut xd = Vec::with_capacity(n * self.input_dim);
                let mut yd = Vec::with_capacity(n * self.output_dim);
                for _ in 0..n {
                    let x = self.sample_input(rng);
                    yd.extend(self.descriptor.evaluate(&x).expect("analytic task"));
                    xd.extend(x);
                }
                (
                    Tensor::new(n, self.input_dim, xd).expect("finite inputs"),
                    Tensor::new(n, self.output_dim, yd).expect("finite targets"),
                )
            }
        }
    }
}

/// `y = A sin(x + φ)` with `A ~ U[0.1, 5]`, `φ ~ U[0, π]`.
pub fn sample_sine_task(rng: &mut impl Rng) -> Task {
    let amplitude = rng.random_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1);
    let phase = rng.random_range(SINE_PHASE.0..=SINE_PHASE.1);
    Task::analytic(TaskDescriptor::Sine { amplitude, phase }, 1, 1)
}

pub fn sample_ode_task(system: OdeSystem, rng: &mut impl Rng) -> Task {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    let descriptor = match system {
        OdeSystem::FitzHughNagumo => TaskDescriptor::FitzHughNagumo {
            a: u(0.1, 2.0),
            b: u(0.1, 2.0),
            c: u(0.1, 2.0),
        },
        OdeSystem::MassSpring => TaskDescriptor::MassSpring {
            mass: u(0.5, 1.5),
            stiffness: u(0.5, 1.5),
        },
        OdeSystem::Pendulum => TaskDescriptor::Pendulum {
            mass: u(0.5, 1.5),
            length: u(0.5, 1.5),
            gravity: u(0.5, 1.5),
        },
        OdeSystem::VanDerPol => TaskDescriptor::VanDerPol { mu: u(0.1, 5.0) },
        OdeSystem::Cartpole => return sample_cartpole_task(CartpoleSpec::default(), rng),
    };
    Task::analytic(descriptor, 2, 2)
}

/// Rolls out an actuated cartpole with random cart mass and a random
/// multi-sine control signal (fixed-step RK4), and returns the
/// `(x, θ, ẋ, θ̇, ẍ, θ̈) → u` pairs along the trajectory.
pub fn sample_cartpole_task(spec: CartpoleSpec, rng: &mut impl Rng) -> Task {
    let params = CartpoleParams {
        cart_mass: rng.random_range(0.5..=1.5),
        pole_mass: 0.1,
        pole_length: 0.5,
        gravity: 9.81,
    };
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let control = |t: f64| -> f64 { waves.iter().map(|&(a, w, p)| a * (w * t + p).sin()).sum() };
    let mut s = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    let deriv = |s: &[f64; 4], t: f64| -> [f64; 4] {
        let (xdd, thdd) = params.forward_dynamics(s, control(t));
        [s[2], s[3], xdd, thdd]
    };
    let h = spec.dt;
    let mut xs = Vec::with_capacity(spec.steps * 6);
    let mut us = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let t = step as f64 * h;
        let u_t = control(t);
        let (xdd, thdd) = params.forward_dynamics(&s, u_t);
        xs.extend_from_slice(&[s[0], s[1], s[2], s[3], xdd, thdd]);
        us.push(u_t);

        let k1 = deriv(&s, t);
        let shifted = |k: &[f64; 4], c: f64| -> [f64; 4] {
            [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2], s[3] + c * k[3]]
        };
        let k2 = deriv(&shifted(&k1, h / 2.0), t + h / 2.0);
        let k3 = deriv(&shifted(&k2, h / 2.0), t + h / 2.0);
        let k4 = deriv(&shifted(&k3, h), t + h);
        for i in 0..4 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let inputs = Tensor::new(spec.steps, 6, xs).expect("finite rollout");
    let targets = Tensor::new(spec.steps, 1, us).expect("finite controls");
    Task::from_pool(TaskDescriptor::Cartpole(params), inputs, targets)
}

/// One task's support and query sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
    pub descriptor: TaskDescriptor,
}

impl TaskBatch {
    pub fn support_size(&self) -> usize {
        self.support_x.rows()
    }

    pub fn query_size(&self) -> usize {
        self.query_x.rows()
    }
}

/// Independent draws of `n` support and `m` query points.
pub fn sample_support_query(task: &Task, n: usize, m: usize, rng: &mut impl Rng) -> Result<TaskBatch, TaskError> {
    if n == 0 || m == 0 {
        return Err(TaskError::Invalid(format!(
            "support and query sizes must be >= 1 (got {n}, {m})"
        )));
    }
    let (support_x, support_y) = task.sample_points(n, rng);
    let (query_x, query_y) = task.sample_points(m, rng);
    Ok(TaskBatch {
        support_x,
        support_y,
        query_x,
        query_y,
        descriptor: task.descriptor.clone(),
    })
}

/// Adds `N(0, σ²)` to every support target; queries are untouched.
pub fn add_label_noise(batch: &TaskBatch, sigma: f64, rng: &mut impl Rng) -> Result<TaskBatch, TaskError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(TaskError::Invalid(format!("noise level must be >= 0, got {sigma}")));
    }
    let mut out = batch.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    out.support_y = batch
        .support_y
        .map("label-noise", |v| v + normal.sample(rng))
        .map_err(|e| TaskError::Invalid(e.to_string()))?;
    Ok(out)
}

/// A numeric time series loaded from CSV.
#[derive(Debug, Clone)]
pub struct Series {
    pub times: Vec<f64>,
    /// One row per record, one column per value column.
    pub values: Tensor,
    pub value_columns: Vec<String>,
}

impl Series {
    /// Parses a headed CSV, keeping `time_column` and `value_columns`.
    pub fn from_reader<R: Read>(reader: R, time_column: &str, value_columns: &[&str]) -> Result<Self, TaskError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| TaskError::MissingColumn(name.to_string()))
        };
        let time_idx = find(time_column)?;
        let value_idx = value_columns
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<_>, _>>()?;
        if value_idx.is_empty() {
            return Err(TaskError::Invalid("no value columns configured".into()));
        }
        let mut times = Vec::new();
        let mut data = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i as u64 + 2, |p| p.line());
            let parse = |idx: usize, name: &str| -> Result<f64, TaskError> {
                let raw = rec.get(idx).unwrap_or("");
                raw.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| TaskError::Parse {
                        line,
                        column: name.to_string(),
                        value: raw.to_string(),
                    })
            };
            times.push(parse(time_idx, time_column)?);
            for (&idx, name) in value_idx.iter().zip(value_columns) {
                data.push(parse(idx, name)?);
            }
        }
        let rows = times.len();
        Ok(Self {
            times,
            values: Tensor::new(rows, value_idx.len(), data).expect("finite, sized"),
            value_columns: value_columns.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn from_path(path: &Path, time_column: &str, value_columns: &[&str]) -> Result<Self, TaskError> {
        let file = std::fs::File::open(path).map_err(|source| TaskError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(std::io::BufReader::new(file), time_column, value_columns)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// A contiguous window of `n_support + n_query` rows at a random offset,
    /// randomly split into support and query. Inputs are the window's time
    /// positions rescaled to `[0, 1]`.
    pub fn sample_window(&self, n_support: usize, n_query: usize, rng: &mut impl Rng) -> Result<TaskBatch, TaskError> {
        let window = n_support + n_query;
        if n_support == 0 || n_query == 0 {
            return Err(TaskError::Invalid("support and query sizes must be >= 1".into()));
        }
        if window > self.len() {
            return Err(TaskError::WindowTooLarge {
                window,
                rows: self.len(),
            });
        }
        let start = rng.random_range(0..=self.len() - window);
        let t0 = self.times[start];
        let t1 = self.times[start + window - 1];
        let span = t1 - t0;
        let position = |j: usize| -> f64 {
            if span.abs() > 0.0 {
                ((self.times[start + j] - t0) / span).clamp(0.0, 1.0)
            } else if window > 1 {
                j as f64 / (window - 1) as f64
            } else {
                0.0
            }
        };
        let order = sample_indices(rng, window, window).into_vec();
        let (sup, qry) = order.split_at(n_support);
        let build = |idx: &[usize]| -> (Tensor, Tensor) {
            let x = Tensor::from_fn(idx.len(), 1, |r, _| position(idx[r]));
            let rows: Vec<usize> = idx.iter().map(|&j| start + j).collect();
            (x, self.values.select_rows(&rows))
        };
        let (support_x, support_y) = build(sup);
        let (query_x, query_y) = build(qry);
        Ok(TaskBatch {
            support_x,
            support_y,
            query_x,
            query_y,
            descriptor: TaskDescriptor::Series { start_row: start },
        })
    }

    /// An endless stream of windows.
    pub fn windows<'a, R: Rng>(
        &'a self,
        n_support: usize,
        n_query: usize,
        rng: &'a mut R,
    ) -> impl Iterator<Item = Result<TaskBatch, TaskError>> + 'a {
        std::iter::repeat_with(move || self.sample_window(n_support, n_query, rng))
    }
}

/// Where training and evaluation tasks come from.
#[derive(Debug, Clone)]
pub enum TaskSource {
    Family(TaskFamily),
    Series(Series),
}

impl TaskSource {
    pub fn input_dim(&self) -> usize {
        match self {
            TaskSource::Family(f) => f.input_dim(),
            TaskSource::Series(_) => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TaskSource::Family(f) => f.output_dim(),
            TaskSource::Series(s) => s.values.cols(),
        }
    }

    /// The `index`-th batch below `seed`.
    pub fn batch(&self, seed: SeedTree, index: u64, support: usize, query: usize) -> Result<TaskBatch, TaskError> {
        match self {
            TaskSource::Family(f) => f.batch(seed, index, support, query),
            TaskSource::Series(s) => s.sample_window(support, query, &mut seed.index(index).rng()),
        }
    }

    /// One fixed task to resample supports from. For a series this is a
    /// window of `window` rows used as a point pool.
    pub fn sample_task(&self, window: usize, rng: &mut impl Rng) -> Result<Task, TaskError> {
        match self {
            TaskSource::Family(f) => Ok(f.sample_task(rng)),
            TaskSource::Series(s) => {
                let b = s.sample_window(window.max(2) - 1, 1, rng)?;
                let x = b.support_x.concat_rows(&b.query_x).expect("same width");
                let y = b.support_y.concat_rows(&b.query_y).expect("same width");
                Ok(Task::from_pool(b.descriptor, x, y))
            }
        }
    }
}

/// Loads a CSV series and returns its window stream parameters checked.
pub fn load_csv_series(
    path: &Path,
    time_column: &str,
    value_columns: &[&str],
    n_support: usize,
    n_query: usize,
) -> Result<Series, TaskError> {
    let series = Series::from_path(path, time_column, value_columns)?;
    if n_support + n_query > series.len() {
        return Err(TaskError::WindowTooLarge {
            window: n_support + n_query,
            rows: series.len(),
        });
    }
    Ok(series)
}
