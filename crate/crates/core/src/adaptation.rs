//! Per-point Laplace posteriors and their minimum-variance fusion.
//!
//! Each support point `(xᵢ, yᵢ)` yields an adapted parameter `θ̂ᵢ` from one
//! gradient step on its own loss, and a precision `Hᵢ`, the curvature of that
//! loss. Regularised precisions `H̃ᵢ = (Hᵢ + εI)/(1+ε)` are combined into the
//! mean of the product of Gaussians,
//!
//! ```text
//! θ̂ = (Σ H̃ᵢ)⁻¹ Σ H̃ᵢ θ̂ᵢ
//! ```
//!
//! For the linear head the per-point Hessian is `2 I_k ⊗ zᵢᵀzᵢ`, so the system
//! decouples per output row and only the `(d+1)×(d+1)` factor is ever formed.
//!
//! The functions taking a [`Graph`] compute the same quantities in vectorised
//! form so that outer-loop gradients can flow through the fusion solve.

use crate::autodiff::Graph;
use crate::linalg::{condition_number, spd_inverse, spd_solve, SYMMETRY_TOL};
use crate::model::{context_point_gradients, ParamNodes};
use crate::tensor::{LinalgError, Result, Tensor};

/// One support point's Laplace posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPosterior {
    /// `k × m` adapted parameters (`1 × c` in context mode).
    pub adapted: Tensor,
    /// Regularised `m × m` precision factor.
    pub precision: Tensor,
    /// The unregularised curvature the precision was built from.
    pub raw_precision: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationResult {
    /// Fused parameters, same shape as each `adapted`.
    pub fused: Tensor,
    pub posteriors: Vec<PointPosterior>,
    /// `κ(Σ H̃ᵢ)`.
    pub condition: f64,
}

impl AdaptationResult {
    pub fn precision_sum(&self) -> Tensor {
        sum_tensors(self.posteriors.iter().map(|p| &p.precision))
    }

    pub fn raw_precision_sum(&self) -> Tensor {
        sum_tensors(self.posteriors.iter().map(|p| &p.raw_precision))
    }

    /// Effective fusion weights `Wᵢ = (Σ H̃ⱼ)⁻¹ H̃ᵢ`.
    pub fn effective_weights(&self) -> Result<Vec<Tensor>> {
        let total = self.precision_sum();
        self.posteriors
            .iter()
            .map(|p| spd_solve(&total, &p.precision))
            .collect()
    }
}

fn sum_tensors<'a>(mut it: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut acc = it.next().expect("non-empty").clone();
    for t in it {
        acc.add_assign(t);
    }
    acc
}

/// `prior − α·gradient`.
pub fn inner_step(prior: &Tensor, gradient: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(LinalgError::Contract(format!("step size must be positive, got {alpha}")));
    }
    prior.sub(&gradient.scale(alpha)?)
}

/// Gradient of `‖θ·zᵀ − y‖²` in `θ` (`k × (d+1)`), for one feature row `z` and target row `y`.
pub fn head_point_gradient(theta: &Tensor, z: &Tensor, y: &Tensor) -> Result<Tensor> {
    let resid = theta.matmul_t(z)?.sub(&y.transpose())?;
    resid.matmul(z)?.scale(2.0)
}

/// Kronecker factor `G = 2·zᵀz` of the head Hessian `2 I_k ⊗ zᵀz`.
pub fn head_point_hessian(z: &Tensor) -> Result<Tensor> {
    if z.rows() != 1 {
        return Err(LinalgError::Dimension {
            op: "head-point-hessian",
            lhs: z.shape(),
            rhs: (1, z.cols()),
        });
    }
    z.t_matmul(z)?.scale(2.0)
}

/// Default probe step for finite-difference context Hessians.
pub const FD_HESSIAN_STEP: f64 = 1e-4;

/// Central finite-difference Hessian of `loss` at `phi` (`1 × c`), symmetrised.
pub fn context_point_hessian(
    mut loss: impl FnMut(&Tensor) -> Result<f64>,
    phi: &Tensor,
    step: f64,
) -> Result<Tensor> {
    fd_hessian_batched(
        |probes| {
            (0..probes.rows())
                .map(|r| loss(&probes.row(r)))
                .collect::<Result<Vec<_>>>()
        },
        phi,
        step,
    )
}

/// As [`context_point_hessian`], but the loss is evaluated on all probe
/// points at once (one probe per row).
pub fn fd_hessian_batched(
    mut loss: impl FnMut(&Tensor) -> Result<Vec<f64>>,
    phi: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let c = phi.cols();
    if phi.rows() != 1 || c == 0 || c > 16 {
        return Err(LinalgError::Contract(format!(
            "context Hessian needs a 1×c point with 1 <= c <= 16, got {:?}",
            phi.shape()
        )));
    }
    // probe 0: centre; then ±h·e_j; then the four mixed corners per pair j<l.
    let base = phi.row_slice(0);
    let mut probes: Vec<Vec<f64>> = vec![base.to_vec()];
    for j in 0..c {
        for s in [1.0, -1.0] {
            let mut p = base.to_vec();
            p[j] += s * step;
            probes.push(p);
        }
    }
    for j in 0..c {
        for l in (j + 1)..c {
            for (sj, sl) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut p = base.to_vec();
                p[j] += sj * step;
                p[l] += sl * step;
                probes.push(p);
            }
        }
    }
    let flat: Vec<f64> = probes.iter().flatten().copied().collect();
    let probe_t = Tensor::new(probes.len(), c, flat)?;
    let values = loss(&probe_t)?;
    if values.len() != probes.len() {
        return Err(LinalgError::Contract("loss returned wrong number of values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            op: "context-point-hessian",
        });
    }
    let h2 = step * step;
    let mut h = Tensor::zeros(c, c);
    let centre = values[0];
    for j in 0..c {
        h[(j, j)] = (values[1 + 2 * j] - 2.0 * centre + values[2 + 2 * j]) / h2;
    }
    let mut k = 1 + 2 * c;
    for j in 0..c {
        for l in (j + 1)..c {
            let v = (values[k] - values[k + 1] - values[k + 2] + values[k + 3]) / (4.0 * h2);
            h[(j, l)] = v;
            h[(l, j)] = v;
            k += 4;
        }
    }
    h.map("context-point-hessian", |v| v)
}

/// `(H + εI)/(1+ε)`.
pub fn regularize(h: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(LinalgError::Contract(format!(
            "regulariser must be positive, got {eps}"
        )));
    }
    let asym = h.asymmetry();
    if asym > SYMMETRY_TOL * h.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    let n = h.rows();
    let inv = 1.0 / (1.0 + eps);
    Ok(Tensor::from_fn(n, n, |i, j| {
        let v = h[(i, j)] + if i == j { eps } else { 0.0 };
        v * inv
    }))
}

/// Mean of the product of the per-point Gaussians.
///
/// Solves `(Σ H̃ᵢ) Θ̂ᵀ = Σ H̃ᵢ Θ̂ᵢᵀ`; each row of `Θ̂` shares the same system.
pub fn fuse(posteriors: Vec<PointPosterior>) -> Result<AdaptationResult> {
    let first = posteriors
        .first()
        .ok_or_else(|| LinalgError::Contract("fuse needs at least one posterior".into()))?;
    let shape = first.adapted.shape();
    let m = first.precision.rows();
    if shape.1 != m {
        return Err(LinalgError::Dimension {
            op: "fuse",
            lhs: shape,
            rhs: first.precision.shape(),
        });
    }
    for p in &posteriors {
        if p.adapted.shape() != shape || p.precision.shape() != (m, m) {
            return Err(LinalgError::Dimension {
                op: "fuse",
                lhs: p.adapted.shape(),
                rhs: p.precision.shape(),
            });
        }
    }
    let mut total = Tensor::zeros(m, m);
    let mut rhs = Tensor::zeros(m, shape.0);
    for p in &posteriors {
        total.add_assign(&p.precision);
        rhs.add_assign(&p.precision.matmul_t(&p.adapted)?);
    }
    let fused = spd_solve(&total, &rhs)?.transpose();
    let condition = condition_number(&total)?;
    Ok(AdaptationResult {
        fused,
        posteriors,
        condition,
    })
}

/// One gradient step on the mean support loss: `θ₀ − α·mean(∇ᵢ)`.
pub fn average_adapt(prior: &Tensor, gradients: &[Tensor], alpha: f64) -> Result<Tensor> {
    if gradients.is_empty() {
        return Err(LinalgError::Contract("average_adapt needs at least one gradient".into()));
    }
    let mut mean = Tensor::zeros(prior.rows(), prior.cols());
    for g in gradients {
        if g.shape() != prior.shape() {
            return Err(LinalgError::Dimension {
                op: "average-adapt",
                lhs: prior.shape(),
                rhs: g.shape(),
            });
        }
        mean.add_assign(g);
    }
    inner_step(prior, &mean.scale(1.0 / gradients.len() as f64)?, alpha)
}

/// Minimum-variance combination weights `Wᵢ = (Σⱼ Σⱼ⁻¹)⁻¹ Σᵢ⁻¹`.
pub fn min_variance_weights(covariances: &[Tensor]) -> Result<Vec<Tensor>> {
    if covariances.is_empty() {
        return Err(LinalgError::Contract("no covariances".into()));
    }
    let inverses = covariances
        .iter()
        .map(spd_inverse)
        .collect::<Result<Vec<_>>>()?;
    let total = sum_tensors(inverses.iter()).symmetrized()?;
    inverses.iter().map(|inv| spd_solve(&total, inv)).collect()
}

/// `tr Σᵢ Wᵢ Σᵢ Wᵢᵀ`, the total variance of `Σᵢ Wᵢ θᵢ` for independent `θᵢ`.
pub fn weighted_variance_trace(weights: &[Tensor], covariances: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for (w, s) in weights.iter().zip(covariances) {
        total += w.matmul(s)?.matmul_t(w)?.trace();
    }
    Ok(total)
}

/// Per-point head posteriors for features `z` (`N × (d+1)`) and targets `y` (`N × k`).
pub fn head_point_posteriors(
    theta0: &Tensor,
    z: &Tensor,
    y: &Tensor,
    alpha: f64,
    eps: f64,
) -> Result<Vec<PointPosterior>> {
    (0..z.rows())
        .map(|i| {
            let zi = z.row(i);
            let yi = y.row(i);
            let adapted = inner_step(theta0, &head_point_gradient(theta0, &zi, &yi)?, alpha)?;
            let raw = head_point_hessian(&zi)?;
            Ok(PointPosterior {
                adapted,
                precision: regularize(&raw, eps)?,
                raw_precision: raw,
            })
        })
        .collect()
}

/// Fused head from the graph route, plus the summed precisions as plain values.
#[derive(Debug, Clone)]
pub struct HeadFusion<N> {
    /// `k × (d+1)` fused head.
    pub theta: N,
    pub precision_sum: Tensor,
    pub raw_precision_sum: Tensor,
}

/// Vectorised last-layer fusion on a graph.
///
/// With residuals `R = Zθ₀ᵀ − Y` and row norms `sᵢ = ‖zᵢ‖²`,
///
/// ```text
/// Σ H̃ᵢ        = (2 ZᵀZ + NεI)/(1+ε)
/// Σ H̃ᵢ Θ̂ᵢᵀ   = [(2 ZᵀZ + NεI) θ₀ᵀ − 4α Zᵀ(s∘R) − 2αε ZᵀR]/(1+ε)
/// ```
///
/// which equals the per-point construction in [`head_point_posteriors`] + [`fuse`].
pub fn lava_head<G: Graph>(
    g: &mut G,
    theta0: &G::Node,
    z: &G::Node,
    y: &G::Node,
    alpha: f64,
    eps: f64,
) -> Result<HeadFusion<G::Node>> {
    if !(alpha > 0.0) || !(eps > 0.0) {
        return Err(LinalgError::Contract(format!(
            "need alpha > 0 and eps > 0, got {alpha}, {eps}"
        )));
    }
    let (n, m) = g.value(z).shape();
    let k = g.value(theta0).rows();
    let inv = 1.0 / (1.0 + eps);

    let zt = g.transpose(z)?;
    let gram = g.matmul(&zt, z)?;
    let gram2 = g.scale(&gram, 2.0)?;
    let raw_sum = g.value(&gram2).clone();
    let reg = g.add_const(&gram2, Tensor::eye(m).scale(n as f64 * eps)?)?;
    let precision = g.scale(&reg, inv)?;

    let theta_t = g.transpose(theta0)?;
    let pred = g.matmul(z, &theta_t)?;
    let resid = g.sub(&pred, y)?;
    let zz = g.mul(z, z)?;
    let norms = g.matmul_const(&zz, Tensor::ones(m, 1))?;
    let norms_k = g.matmul_const(&norms, Tensor::ones(1, k))?;
    let scaled_resid = g.mul(&norms_k, &resid)?;

    let prior_term = g.matmul(&reg, &theta_t)?;
    let curv_term = g.matmul(&zt, &scaled_resid)?;
    let curv_term = g.scale(&curv_term, 4.0 * alpha)?;
    let iso_term = g.matmul(&zt, &resid)?;
    let iso_term = g.scale(&iso_term, 2.0 * alpha * eps)?;
    let rhs = g.sub(&prior_term, &curv_term)?;
    let rhs = g.sub(&rhs, &iso_term)?;
    let rhs = g.scale(&rhs, inv)?;

    let fused_t = g.spd_solve(&precision, &rhs)?;
    let theta = g.transpose(&fused_t)?;
    Ok(HeadFusion {
        theta,
        precision_sum: g.value(&precision).clone(),
        raw_precision_sum: raw_sum,
    })
}

/// `steps` gradient steps of the head on the mean support loss.
pub fn anil_head<G: Graph>(
    g: &mut G,
    theta0: &G::Node,
    z: &G::Node,
    y: &G::Node,
    alpha: f64,
    steps: usize,
) -> Result<G::Node> {
    let n = g.value(z).rows() as f64;
    let mut theta = theta0.clone();
    for _ in 0..steps {
        let tt = g.transpose(&theta)?;
        let pred = g.matmul(z, &tt)?;
        let resid = g.sub(&pred, y)?;
        let rt = g.transpose(&resid)?;
        let grad = g.matmul(&rt, z)?;
        let step = g.scale(&grad, 2.0 * alpha / n)?;
        theta = g.sub(&theta, &step)?;
    }
    Ok(theta)
}

/// `steps` gradient steps of the context on the mean support loss.
pub fn cavia_context<G: Graph>(
    g: &mut G,
    p: &ParamNodes<G::Node>,
    x: &G::Node,
    y: &G::Node,
    alpha: f64,
    steps: usize,
) -> Result<G::Node> {
    let mut phi = p
        .context
        .clone()
        .ok_or_else(|| LinalgError::Contract("context mode without context prior".into()))?;
    let n = g.value(x).rows();
    for _ in 0..steps {
        let (_, grads) = context_point_gradients(g, p, &phi, x, y)?;
        let mean = g.const_matmul(Tensor::filled(1, n, 1.0 / n as f64), &grads)?;
        let step = g.scale(&mean, alpha)?;
        phi = g.sub(&phi, &step)?;
    }
    Ok(phi)
}

/// Context-mode fusion on a graph.
#[derive(Debug, Clone)]
pub struct ContextFusion<N> {
    /// `1 × c` fused context.
    pub phi: N,
    pub posteriors: Vec<PointPosterior>,
}

/// Per-point context steps, finite-difference precisions and their fusion.
///
/// Precisions are evaluated on values and enter the graph as constants, so
/// outer gradients flow through the per-point steps and the solve's right-hand
/// side but not through the curvature itself.
pub fn lava_context<G: Graph>(
    g: &mut G,
    p: &ParamNodes<G::Node>,
    x: &G::Node,
    y: &G::Node,
    alpha: f64,
    eps: f64,
) -> Result<ContextFusion<G::Node>> {
    let phi0 = p
        .context
        .clone()
        .ok_or_else(|| LinalgError::Contract("context mode without context prior".into()))?;
    let (n, _) = g.value(x).shape();
    let (_, grads) = context_point_gradients(g, p, &phi0, x, y)?;
    let rep = g.repeat_rows(&phi0, n)?;
    let step = g.scale(&grads, alpha)?;
    let adapted = g.sub(&rep, &step)?;

    let net = FrozenContextNet::from_nodes(g, p);
    let xv = g.value(x).clone();
    let yv = g.value(y).clone();
    let adapted_v = g.value(&adapted).clone();

    let mut posteriors = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let phi_i = adapted_v.row(i);
        let raw = net.point_hessian(&xv.row(i), &yv.row(i), &phi_i, FD_HESSIAN_STEP)?;
        rows.push(g.const_matmul(unit_row(n, i), &adapted)?);
        posteriors.push(PointPosterior {
            adapted: phi_i,
            precision: regularize(&raw, eps)?,
            raw_precision: raw,
        });
    }
    let precisions: Vec<Tensor> = posteriors.iter().map(|p| p.precision.clone()).collect();
    let phi = fuse_nodes(g, &rows, &precisions)?;
    Ok(ContextFusion { phi, posteriors })
}

fn unit_row(n: usize, i: usize) -> Tensor {
    Tensor::from_fn(1, n, |_, c| if c == i { 1.0 } else { 0.0 })
}

/// Per-point one-step heads `θ₀ − α∇ᵢ`, one `k × (d+1)` node per support row.
pub fn head_point_steps<G: Graph>(
    g: &mut G,
    theta0: &G::Node,
    z: &G::Node,
    y: &G::Node,
    alpha: f64,
) -> Result<Vec<G::Node>> {
    let n = g.value(z).rows();
    (0..n)
        .map(|i| {
            let zi = g.const_matmul(unit_row(n, i), z)?;
            let yi = g.const_matmul(unit_row(n, i), y)?;
            let tt = g.transpose(theta0)?;
            let pred = g.matmul(&zi, &tt)?;
            let resid = g.sub(&pred, &yi)?;
            let rt = g.transpose(&resid)?;
            let grad = g.matmul(&rt, &zi)?;
            let step = g.scale(&grad, 2.0 * alpha)?;
            g.sub(theta0, &step)
        })
        .collect()
}

/// Graph-level fusion of per-point parameters (`k × m` each) under fixed precisions.
pub fn fuse_nodes<G: Graph>(g: &mut G, adapted: &[G::Node], precisions: &[Tensor]) -> Result<G::Node> {
    if adapted.is_empty() || adapted.len() != precisions.len() {
        return Err(LinalgError::Contract(format!(
            "fuse needs matching non-empty inputs, got {} parameters and {} precisions",
            adapted.len(),
            precisions.len()
        )));
    }
    let m = precisions[0].rows();
    let mut total = Tensor::zeros(m, m);
    let mut rhs: Option<G::Node> = None;
    for (a, prec) in adapted.iter().zip(precisions) {
        if prec.shape() != (m, m) {
            return Err(LinalgError::Dimension {
                op: "fuse",
                lhs: (m, m),
                rhs: prec.shape(),
            });
        }
        total.add_assign(prec);
        let at = g.transpose(a)?;
        let term = g.const_matmul(prec.clone(), &at)?;
        rhs = Some(match rhs {
            None => term,
            Some(acc) => g.add(&acc, &term)?,
        });
    }
    let total = g.constant(total);
    let fused_t = g.spd_solve(&total, &rhs.expect("non-empty"))?;
    g.transpose(&fused_t)
}

/// Value-level context network whose ReLU pattern can be frozen at a point.
///
/// Freezing the activation pattern at `φ̂ᵢ` makes the per-point loss an exact
/// quadratic in `φ`, so its finite-difference Hessian is insensitive to ReLU
/// kinks that would otherwise fall inside the probe stencil. Where no kink lies
/// within the stencil it coincides with the unfrozen finite-difference Hessian.
pub struct FrozenContextNet {
    hidden: Vec<(Tensor, Tensor)>,
    head: Tensor,
}

impl FrozenContextNet {
    pub fn from_nodes<G: Graph>(g: &G, p: &ParamNodes<G::Node>) -> Self {
        Self {
            hidden: p
                .hidden
                .iter()
                .map(|(w, b)| (g.value(w).clone(), g.value(b).clone()))
                .collect(),
            head: g.value(&p.head).clone(),
        }
    }

    fn masks_at(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = input.clone();
        let mut masks = Vec::with_capacity(self.hidden.len());
        for (w, b) in &self.hidden {
            let pre = h.matmul(w)?.add(b)?;
            masks.push(pre.map("relu-mask", |v| if v > 0.0 { 1.0 } else { 0.0 })?);
            h = pre.relu();
        }
        Ok(masks)
    }

    /// Per-row loss `‖f([x | φ_r]) − y‖²` for every probe row `φ_r`, with the
    /// activation pattern fixed by `masks`.
    fn frozen_losses(&self, x: &Tensor, y: &Tensor, probes: &Tensor, masks: &[Tensor]) -> Result<Vec<f64>> {
        let rows = probes.rows();
        let input = Tensor::ones(rows, 1).matmul(x)?.concat_cols(probes)?;
        let mut h = input;
        for ((w, b), mask) in self.hidden.iter().zip(masks) {
            let pre = h.matmul(w)?.add(&Tensor::ones(rows, 1).matmul(b)?)?;
            h = pre.hadamard(&Tensor::ones(rows, 1).matmul(mask)?)?;
        }
        let out = h.append_ones().matmul_t(&self.head)?;
        Ok((0..rows)
            .map(|r| {
                out.row_slice(r)
                    .iter()
                    .zip(y.row_slice(0))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect())
    }

    /// Finite-difference Hessian of one point's loss at `phi`.
    pub fn point_hessian(&self, x: &Tensor, y: &Tensor, phi: &Tensor, step: f64) -> Result<Tensor> {
        let masks = self.masks_at(&x.concat_cols(phi)?)?;
        fd_hessian_batched(|probes| self.frozen_losses(x, y, probes, &masks), phi, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eval, Tape};
    use crate::model::{AdaptMode, Architecture, MetaParams};
    use crate::seed::SeedTree;
    use rand::Rng as _;

    fn rand_tensor(rng: &mut crate::seed::Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn inner_step_examples() {
        let prior = Tensor::row_vector(&[1.0, 1.0]);
        assert_eq!(inner_step(&prior, &Tensor::zeros(1, 2), 0.1).unwrap(), prior);
        let out = inner_step(&prior, &Tensor::row_vector(&[2.0, -2.0]), 0.1).unwrap();
        assert!(out.max_abs_diff(&Tensor::row_vector(&[0.8, 1.2])) < 1e-15);
        assert!(inner_step(&prior, &prior, 0.0).is_err());
    }

    #[test]
    fn zero_residual_point_keeps_prior() {
        let theta = Tensor::row_vector(&[0.5, -1.0, 2.0]);
        let z = Tensor::row_vector(&[1.0, 2.0, 1.0]);
        let y = theta.matmul_t(&z).unwrap();
        let g = head_point_gradient(&theta, &z, &y).unwrap();
        assert_eq!(inner_step(&theta, &g, 0.1).unwrap(), theta);
    }

    #[test]
    fn head_hessian_structure() {
        let d = 4;
        let mut pad = vec![0.0; d + 1];
        pad[d] = 1.0;
        let g = head_point_hessian(&Tensor::row_vector(&pad)).unwrap();
        let mut expected = Tensor::zeros(d + 1, d + 1);
        expected[(d, d)] = 2.0;
        assert_eq!(g, expected);

        let z = Tensor::row_vector(&[0.3, -1.2, 2.0, 1.0]);
        let g = head_point_hessian(&z).unwrap();
        assert!((g.trace() - 2.0 * z.frobenius_sq()).abs() < 1e-12);
        let ev = crate::linalg::symmetric_eigenvalues(&g).unwrap();
        assert_eq!(ev.iter().filter(|v| v.abs() > 1e-12).count(), 1);
    }

    #[test]
    fn regularize_examples() {
        assert!(regularize(&Tensor::eye(3), 0.37).unwrap().max_abs_diff(&Tensor::eye(3)) < 1e-15);
        let r = regularize(&Tensor::diag(&[3.0, 1.0]), 0.1).unwrap();
        assert!(r.max_abs_diff(&Tensor::diag(&[3.1 / 1.1, 1.0])) < 1e-15);
        assert!((r[(0, 0)] - 2.8182).abs() < 1e-4);
        let z = regularize(&Tensor::zeros(2, 2), 0.1).unwrap();
        assert!(z.max_abs_diff(&Tensor::eye(2).scale(0.1 / 1.1).unwrap()) < 1e-15);
        assert!(regularize(&Tensor::eye(2), 0.0).is_err());
        assert!(regularize(&Tensor::eye(2), -1.0).is_err());
    }

    #[test]
    fn context_hessian_of_quadratics() {
        let phi = Tensor::row_vector(&[0.3, -0.7, 1.1]);
        let h = context_point_hessian(|p| Ok(p.frobenius_sq()), &phi, FD_HESSIAN_STEP).unwrap();
        assert!(h.max_abs_diff(&Tensor::eye(3).scale(2.0).unwrap()) < 1e-6);

        let a = Tensor::from_rows(&[&[2.0, 0.5, -0.3], &[0.5, 1.0, 0.2], &[-0.3, 0.2, 3.0]]);
        let h = context_point_hessian(
            |p| Ok(p.matmul(&a)?.matmul_t(p)?.item()),
            &phi,
            FD_HESSIAN_STEP,
        )
        .unwrap();
        assert!(h.max_abs_diff(&a.scale(2.0).unwrap()) < 1e-6);
    }

    #[test]
    fn context_hessian_rejects_non_finite_loss() {
        let phi = Tensor::row_vector(&[0.0, 0.0]);
        let r = context_point_hessian(|_| Ok(f64::NAN), &phi, 1e-4);
        assert!(matches!(r, Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn fuse_single_and_equal_precisions() {
        let mut rng = SeedTree::new(4).rng();
        let one = PointPosterior {
            adapted: rand_tensor(&mut rng, 2, 3),
            precision: regularize(&Tensor::diag(&[1.0, 5.0, 0.0]), 0.1).unwrap(),
            raw_precision: Tensor::diag(&[1.0, 5.0, 0.0]),
        };
        let r = fuse(vec![one.clone()]).unwrap();
        assert!(r.fused.max_abs_diff(&one.adapted) < 1e-14);

        let prec = Tensor::from_rows(&[&[2.0, 0.3, 0.0], &[0.3, 1.0, 0.1], &[0.0, 0.1, 0.5]]);
        let posts: Vec<_> = (0..4)
            .map(|_| PointPosterior {
                adapted: rand_tensor(&mut rng, 2, 3),
                precision: prec.clone(),
                raw_precision: prec.clone(),
            })
            .collect();
        let mut mean = Tensor::zeros(2, 3);
        for p in &posts {
            mean.add_assign(&p.adapted);
        }
        let mean = mean.scale(0.25).unwrap();
        let r = fuse(posts).unwrap();
        assert!(r.fused.max_abs_diff(&mean) < 1e-13);
    }

    #[test]
    fn fusion_is_stationary_and_weights_partition_identity() {
        let mut rng = SeedTree::new(8).rng();
        let posts: Vec<_> = (0..5)
            .map(|_| {
                let z = rand_tensor(&mut rng, 1, 4);
                let raw = head_point_hessian(&z).unwrap();
                PointPosterior {
                    adapted: rand_tensor(&mut rng, 2, 4),
                    precision: regularize(&raw, 0.1).unwrap(),
                    raw_precision: raw,
                }
            })
            .collect();
        let r = fuse(posts).unwrap();
        // ∇ Σ (θ − θᵢ) H̃ᵢ (θ − θᵢ)ᵀ per row
        let mut grad = Tensor::zeros(2, 4);
        for p in &r.posteriors {
            grad.add_assign(&r.fused.sub(&p.adapted).unwrap().matmul(&p.precision).unwrap());
        }
        assert!(grad.max_abs() < 1e-8);
        let w = r.effective_weights().unwrap();
        let mut total = Tensor::zeros(4, 4);
        for wi in &w {
            total.add_assign(wi);
        }
        assert!(total.max_abs_diff(&Tensor::eye(4)) < 1e-9);
        for p in &r.posteriors {
            let ev = crate::linalg::symmetric_eigenvalues(&p.precision).unwrap();
            assert!(ev[0] >= 0.1 / 1.1 - 1e-9);
            assert!(p.precision.asymmetry() <= 1e-9);
        }
    }

    #[test]
    fn average_adapt_is_mean_of_point_steps() {
        let mut rng = SeedTree::new(2).rng();
        let prior = rand_tensor(&mut rng, 1, 5);
        let grads: Vec<_> = (0..6).map(|_| rand_tensor(&mut rng, 1, 5)).collect();
        let avg = average_adapt(&prior, &grads, 0.1).unwrap();
        let mut mean = Tensor::zeros(1, 5);
        for g in &grads {
            mean.add_assign(&inner_step(&prior, g, 0.1).unwrap());
        }
        assert!(avg.max_abs_diff(&mean.scale(1.0 / 6.0).unwrap()) < 1e-12);
        assert_eq!(
            average_adapt(&prior, &[Tensor::zeros(1, 5)], 0.1).unwrap(),
            prior
        );
        assert_eq!(
            average_adapt(&prior, &grads[..1], 0.1).unwrap(),
            inner_step(&prior, &grads[0], 0.1).unwrap()
        );
    }

    #[test]
    fn min_variance_weight_examples() {
        let s = Tensor::from_rows(&[&[2.0, 0.4], &[0.4, 1.0]]);
        let w = min_variance_weights(&[s.clone(), s.clone(), s]).unwrap();
        for wi in &w {
            assert!(wi.max_abs_diff(&Tensor::eye(2).scale(1.0 / 3.0).unwrap()) < 1e-12);
        }
        let w = min_variance_weights(&[Tensor::scalar(1.0), Tensor::scalar(4.0)]).unwrap();
        assert!((w[0].item() - 0.8).abs() < 1e-12);
        assert!((w[1].item() - 0.2).abs() < 1e-12);
        assert!(matches!(
            min_variance_weights(&[Tensor::diag(&[1.0, -1.0])]),
            Err(LinalgError::Singular { .. })
        ));
    }

    #[test]
    fn vectorised_head_fusion_matches_point_route() {
        let mut rng = SeedTree::new(21).rng();
        for k in 1..=3 {
            let n = 7;
            let m = 6;
            let z = rand_tensor(&mut rng, n, m);
            let y = rand_tensor(&mut rng, n, k);
            let theta0 = rand_tensor(&mut rng, k, m);
            let mut g = Eval;
            let fused = lava_head(&mut g, &theta0, &z, &y, 0.1, 0.1).unwrap();
            let route = fuse(head_point_posteriors(&theta0, &z, &y, 0.1, 0.1).unwrap()).unwrap();
            assert!(fused.theta.max_abs_diff(&route.fused) < 1e-10, "k={k}");
            assert!(fused.precision_sum.max_abs_diff(&route.precision_sum()) < 1e-12);
        }
    }

    #[test]
    fn anil_single_step_is_mean_of_point_steps() {
        let mut rng = SeedTree::new(5).rng();
        let z = rand_tensor(&mut rng, 4, 3);
        let y = rand_tensor(&mut rng, 4, 2);
        let theta0 = rand_tensor(&mut rng, 2, 3);
        let mut g = Eval;
        let stepped = anil_head(&mut g, &theta0, &z, &y, 0.1, 1).unwrap();
        let grads: Vec<_> = (0..4)
            .map(|i| head_point_gradient(&theta0, &z.row(i), &y.row(i)).unwrap())
            .collect();
        let avg = average_adapt(&theta0, &grads, 0.1).unwrap();
        assert!(stepped.max_abs_diff(&avg) < 1e-12);
    }

    #[test]
    fn context_gradients_match_tape() {
        let arch = Architecture::new(1, 1).with_hidden(&[8, 8]).with_context(2);
        let mut params = MetaParams::init(SeedTree::new(3), &arch, AdaptMode::Context).unwrap();
        params.context = Some(Tensor::row_vector(&[0.4, -0.2]));
        let mut rng = SeedTree::new(4).rng();
        let x = rand_tensor(&mut rng, 5, 1);
        let y = rand_tensor(&mut rng, 5, 1);
        let mut g = Eval;
        let nodes = params.constants(&mut g);
        let (_, grads) =
            context_point_gradients(&mut g, &nodes, params.context.as_ref().unwrap(), &x, &y).unwrap();
        for i in 0..5 {
            let mut tape = Tape::new();
            let p = params.constants(&mut tape);
            let phi = tape.leaf(params.context.clone().unwrap());
            let xi = tape.constant(x.row(i));
            let yi = tape.constant(y.row(i));
            let out = crate::model::context_forward(&mut tape, &p, &phi, &xi).unwrap();
            let loss = tape.mse(&out, &yi).unwrap();
            let gr = tape.backward(loss).unwrap();
            assert!(gr.get(phi).unwrap().max_abs_diff(&grads.row(i)) < 1e-12);
        }
    }

    #[test]
    fn frozen_hessian_matches_plain_fd_away_from_kinks() {
        let arch = Architecture::new(1, 1).with_hidden(&[16, 16]).with_context(2);
        let params = MetaParams::init(SeedTree::new(13), &arch, AdaptMode::Context).unwrap();
        let mut g = Eval;
        let nodes = params.constants(&mut g);
        let net = FrozenContextNet::from_nodes(&g, &nodes);
        let x = Tensor::scalar(0.7);
        let y = Tensor::scalar(-0.4);
        let phi = Tensor::row_vector(&[0.2, 0.5]);
        let frozen = net.point_hessian(&x, &y, &phi, FD_HESSIAN_STEP).unwrap();
        let plain = context_point_hessian(
            |p| {
                let out = params.predict(&x, Some(p))?;
                out.mse(&y)
            },
            &phi,
            FD_HESSIAN_STEP,
        )
        .unwrap();
        assert!(frozen.max_abs_diff(&plain) < 1e-5 * plain.max_abs().max(1.0));
        let half = net.point_hessian(&x, &y, &phi, FD_HESSIAN_STEP / 2.0).unwrap();
        assert!(frozen.max_abs_diff(&half) <= 1e-4 * frozen.max_abs().max(1e-12));
    }
}
