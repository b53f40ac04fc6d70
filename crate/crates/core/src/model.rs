//! Function approximators: an MLP feature extractor with a linear head, used
//! either with an adaptable head or with an adaptable input context vector.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tape, Var};
use crate::seed::SeedTree;
use crate::tensor::{LinalgError, Result, Tensor};

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];
pub const SUPPORTED_CONTEXT_DIMS: [usize; 4] = [2, 4, 8, 16];

/// Which parameters the inner loop adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// The head `θ = [W, b]` is adapted; features are shared.
    LastLayer,
    /// A context vector concatenated to the input is adapted.
    Context,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub context_dim: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: DEFAULT_HIDDEN.to_vec(),
            context_dim: 0,
        }
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn with_context(mut self, context_dim: usize) -> Self {
        self.context_dim = context_dim;
        self
    }

    /// Width `d` of the penultimate activations (before the ones padding).
    pub fn feature_dim(&self) -> usize {
        self.hidden
            .last()
            .copied()
            .unwrap_or(self.input_dim + self.context_dim)
    }

    pub fn network_input_dim(&self) -> usize {
        self.input_dim + self.context_dim
    }

    pub fn validate(&self, mode: AdaptMode) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(LinalgError::Contract(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        match mode {
            AdaptMode::Context if self.context_dim == 0 || self.context_dim > 16 => {
                Err(LinalgError::Contract(format!(
                    "context mode needs 1 <= context_dim <= 16, got {}",
                    self.context_dim
                )))
            }
            AdaptMode::LastLayer if self.context_dim != 0 => Err(LinalgError::Contract(
                "last-layer mode takes no context vector".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    /// `1 × fan_out`.
    pub bias: Tensor,
}

/// Meta-learned parameters. Immutable snapshot; updates build a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub arch: Architecture,
    pub mode: AdaptMode,
    pub hidden: Vec<Layer>,
    /// `k × (d+1)`: last-layer weights with the bias as trailing column.
    pub head: Tensor,
    /// `1 × c` context prior, present in context mode only.
    pub context: Option<Tensor>,
}

impl MetaParams {
    /// Weights and biases uniform in `±1/√fan_in`, zero context.
    pub fn init(seed: SeedTree, arch: &Architecture, mode: AdaptMode) -> Result<Self> {
        arch.validate(mode)?;
        let mut rng = seed.rng();
        let mut hidden = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.network_input_dim();
        for &width in &arch.hidden {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Tensor::from_fn(fan_in, width, |_, _| rng.random_range(-bound..bound));
            let bias = Tensor::from_fn(1, width, |_, _| rng.random_range(-bound..bound));
            hidden.push(Layer { weight, bias });
            fan_in = width;
        }
        let d = arch.feature_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let head = Tensor::from_fn(arch.output_dim, d + 1, |_, _| rng.random_range(-bound..bound));
        let context = (mode == AdaptMode::Context).then(|| Tensor::zeros(1, arch.context_dim));
        Ok(Self {
            arch: arch.clone(),
            mode,
            hidden,
            head,
            context,
        })
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 2);
        for l in &self.hidden {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.head);
        if let Some(c) = &self.context {
            out.push(c);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        Self::names_for(self.hidden.len(), self.context.is_some())
    }

    pub(crate) fn names_for(n_hidden: usize, context: bool) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..n_hidden {
            out.push(format!("hidden.{i}.weight"));
            out.push(format!("hidden.{i}.bias"));
        }
        out.push("head".into());
        if context {
            out.push("context".into());
        }
        out
    }

    /// Expected `(rows, cols)` of each tensor for an architecture and mode.
    pub fn expected_shapes(arch: &Architecture, mode: AdaptMode) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut fan_in = arch.network_input_dim();
        for &w in &arch.hidden {
            out.push((fan_in, w));
            out.push((1, w));
            fan_in = w;
        }
        out.push((arch.output_dim, arch.feature_dim() + 1));
        if mode == AdaptMode::Context {
            out.push((1, arch.context_dim));
        }
        out
    }

    /// Rebuilds parameters from tensors in declaration order.
    pub fn from_tensors(arch: &Architecture, mode: AdaptMode, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate(mode)?;
        let shapes = Self::expected_shapes(arch, mode);
        if shapes.len() != tensors.len() {
            return Err(LinalgError::Contract(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors
            .iter()
            .zip(&shapes)
            .zip(Self::names_for(arch.hidden.len(), mode == AdaptMode::Context))
        {
            if t.shape() != *s {
                return Err(LinalgError::Contract(format!(
                    "tensor {name}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let hidden = arch
            .hidden
            .iter()
            .map(|_| Layer {
                weight: it.next().expect("counted"),
                bias: it.next().expect("counted"),
            })
            .collect();
        let head = it.next().expect("counted");
        let context = it.next();
        Ok(Self {
            arch: arch.clone(),
            mode,
            hidden,
            head,
            context,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every tensor as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamNodes<Var> {
        self.nodes_with(|t| tape.leaf(t.clone()))
    }

    /// Introduces every tensor as a constant of `g`.
    pub fn constants<G: Graph>(&self, g: &mut G) -> ParamNodes<G::Node> {
        self.nodes_with(|t| g.constant(t.clone()))
    }

    fn nodes_with<N>(&self, mut f: impl FnMut(&Tensor) -> N) -> ParamNodes<N> {
        ParamNodes {
            hidden: self
                .hidden
                .iter()
                .map(|l| (f(&l.weight), f(&l.bias)))
                .collect(),
            head: f(&self.head),
            context: self.context.as_ref().map(f),
        }
    }

    /// Padded penultimate features `[f_ψ(x) | 1]` for network input `x`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = crate::autodiff::Eval;
        let p = self.constants(&mut g);
        features(&mut g, &p, x)
    }

    /// Full network output on `x`; in context mode `phi` (default: the prior) is appended.
    pub fn predict(&self, x: &Tensor, phi: Option<&Tensor>) -> Result<Tensor> {
        let mut g = crate::autodiff::Eval;
        let p = self.constants(&mut g);
        match self.mode {
            AdaptMode::LastLayer => {
                let z = features(&mut g, &p, x)?;
                head(&mut g, &p.head, &z)
            }
            AdaptMode::Context => {
                let phi = phi.or(self.context.as_ref()).expect("context params");
                context_forward(&mut g, &p, phi, x)
            }
        }
    }

    /// Applies `f(param, grad)` tensor-wise, producing a new snapshot.
    pub fn zip_map(
        &self,
        grads: &[Tensor],
        mut f: impl FnMut(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        let tensors = self
            .tensors()
            .into_iter()
            .zip(grads)
            .map(|(p, g)| f(p, g))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(&self.arch, self.mode, tensors)
    }
}

/// Graph nodes for each parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamNodes<N> {
    pub hidden: Vec<(N, N)>,
    pub head: N,
    pub context: Option<N>,
}

impl<N: Clone> ParamNodes<N> {
    pub fn in_order(&self) -> Vec<N> {
        let mut out = Vec::new();
        for (w, b) in &self.hidden {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.head.clone());
        if let Some(c) = &self.context {
            out.push(c.clone());
        }
        out
    }
}

fn hidden_stack<G: Graph>(
    g: &mut G,
    p: &ParamNodes<G::Node>,
    x: &G::Node,
    mut record_pre: impl FnMut(&Tensor),
) -> Result<G::Node> {
    let batch = g.value(x).rows();
    let mut h = x.clone();
    for (w, b) in &p.hidden {
        let lin = g.matmul(&h, w)?;
        let bias = g.repeat_rows(b, batch)?;
        let pre = g.add(&lin, &bias)?;
        record_pre(g.value(&pre));
        h = g.relu(&pre)?;
    }
    Ok(h)
}

/// `z = [f_ψ(x) | 1]`, one row per input row.
pub fn features<G: Graph>(g: &mut G, p: &ParamNodes<G::Node>, x: &G::Node) -> Result<G::Node> {
    let h = hidden_stack(g, p, x, |_| {})?;
    g.append_ones(&h)
}

/// `z · θᵀ`: one output row per feature row.
pub fn head<G: Graph>(g: &mut G, theta: &G::Node, z: &G::Node) -> Result<G::Node> {
    let tt = g.transpose(theta)?;
    g.matmul(z, &tt)
}

/// `[x | φ]` with `φ` repeated on every row.
pub fn context_input<G: Graph>(g: &mut G, x: &G::Node, phi: &G::Node) -> Result<G::Node> {
    let rows = g.value(x).rows();
    let rep = g.repeat_rows(phi, rows)?;
    g.concat_cols(x, &rep)
}

/// Network output on `[x | φ]`.
pub fn context_forward<G: Graph>(
    g: &mut G,
    p: &ParamNodes<G::Node>,
    phi: &G::Node,
    x: &G::Node,
) -> Result<G::Node> {
    let input = context_input(g, x, phi)?;
    let z = features(g, p, &input)?;
    head(g, &p.head, &z)
}

/// Forward pass on `[x | φ]` together with the gradient of each point's loss
/// `‖f([xᵢ | φ]) − yᵢ‖²` with respect to `φ`, returned as an `N × c` matrix.
///
/// The backward pass is expressed with graph primitives so that, on a tape,
/// the result stays differentiable with respect to the network weights and `φ`.
/// ReLU derivatives enter as constant masks.
pub fn context_point_gradients<G: Graph>(
    g: &mut G,
    p: &ParamNodes<G::Node>,
    phi: &G::Node,
    x: &G::Node,
    y: &G::Node,
) -> Result<(G::Node, G::Node)> {
    let d_in = g.value(x).cols();
    let c = g.value(phi).cols();
    let input = context_input(g, x, phi)?;
    let mut masks = Vec::with_capacity(p.hidden.len());
    let h = hidden_stack(g, p, &input, |pre| {
        masks.push(pre.map("relu-mask", |v| if v > 0.0 { 1.0 } else { 0.0 }).expect("finite"));
    })?;
    let z = g.append_ones(&h)?;
    let out = head(g, &p.head, &z)?;

    let resid = g.sub(&out, y)?;
    let delta = g.scale(&resid, 2.0)?;
    let dz = g.matmul(&delta, &p.head)?;
    let d = g.value(&h).cols();
    let drop_pad = Tensor::from_fn(d + 1, d, |r, col| if r == col { 1.0 } else { 0.0 });
    let mut da = g.matmul_const(&dz, drop_pad)?;
    for ((w, _), mask) in p.hidden.iter().zip(masks).rev() {
        let m = g.constant(mask);
        let dpre = g.mul(&da, &m)?;
        let wt = g.transpose(w)?;
        da = g.matmul(&dpre, &wt)?;
    }
    let pick_ctx = Tensor::from_fn(d_in + c, c, |r, col| if r == d_in + col { 1.0 } else { 0.0 });
    let grads = g.matmul_const(&da, pick_ctx)?;
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;

    fn zero_params(arch: &Architecture, mode: AdaptMode) -> MetaParams {
        let shapes = MetaParams::expected_shapes(arch, mode);
        MetaParams::from_tensors(
            arch,
            mode,
            shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_network_features_are_padding_only() {
        let arch = Architecture::new(1, 1);
        let p = zero_params(&arch, AdaptMode::LastLayer);
        let x = Tensor::col_vector(&[-3.0, 0.5, 4.0]);
        let z = p.features(&x).unwrap();
        assert_eq!(z.shape(), (3, 65));
        for r in 0..3 {
            for c in 0..64 {
                assert_eq!(z[(r, c)], 0.0);
            }
            assert_eq!(z[(r, 64)], 1.0);
        }
    }

    #[test]
    fn default_feature_shape_and_padding() {
        let arch = Architecture::new(1, 1);
        let p = MetaParams::init(SeedTree::new(3), &arch, AdaptMode::LastLayer).unwrap();
        let x = Tensor::from_fn(10, 1, |r, _| r as f64 - 4.5);
        let z = p.features(&x).unwrap();
        assert_eq!(z.shape(), (10, 65));
        assert!((0..10).all(|r| z[(r, 64)] == 1.0));
    }

    #[test]
    fn head_examples() {
        let mut g = Eval;
        let theta = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]);
        let z = Tensor::from_rows(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(head(&mut g, &theta, &z).unwrap(), Tensor::scalar(6.0));

        let sel = Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let z = Tensor::from_rows(&[&[7.0, -2.0, 5.0, 1.0]]);
        assert_eq!(head(&mut g, &sel, &z).unwrap(), Tensor::from_rows(&[&[7.0, -2.0]]));

        let zero = Tensor::zeros(2, 4);
        assert_eq!(head(&mut g, &zero, &z).unwrap(), Tensor::zeros(1, 2));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let arch = Architecture::new(1, 1).with_context(2);
        let a = MetaParams::init(SeedTree::new(11), &arch, AdaptMode::Context).unwrap();
        let b = MetaParams::init(SeedTree::new(11), &arch, AdaptMode::Context).unwrap();
        let c = MetaParams::init(SeedTree::new(12), &arch, AdaptMode::Context).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.context.as_ref().unwrap(), &Tensor::zeros(1, 2));
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.hidden[0].weight.max_abs() <= bound);
        assert!(a.hidden[0].bias.max_abs() <= bound);
        assert!(a.hidden[0].bias.max_abs() > 0.0);
    }

    #[test]
    fn context_forward_shapes_and_sensitivity() {
        let arch = Architecture::new(1, 1).with_context(2);
        let p = MetaParams::init(SeedTree::new(5), &arch, AdaptMode::Context).unwrap();
        let x = Tensor::from_fn(7, 1, |r, _| r as f64 * 0.7 - 2.0);
        let out0 = p.predict(&x, Some(&Tensor::row_vector(&[0.0, 0.0]))).unwrap();
        assert_eq!(out0.shape(), (7, 1));
        let out1 = p.predict(&x, Some(&Tensor::row_vector(&[1.5, -0.5]))).unwrap();
        assert!(out0.max_abs_diff(&out1) > 0.0);
    }

    #[test]
    fn empty_context_is_plain_mlp() {
        let arch = Architecture::new(2, 1);
        let p = MetaParams::init(SeedTree::new(9), &arch, AdaptMode::LastLayer).unwrap();
        let x = Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 0.1]]);
        let mut g = Eval;
        let nodes = p.constants(&mut g);
        let empty = Tensor::zeros(1, 0);
        let via_ctx = context_forward(&mut g, &nodes, &empty, &x).unwrap();
        assert_eq!(via_ctx, p.predict(&x, None).unwrap());
    }

    #[test]
    fn mode_validation() {
        let arch = Architecture::new(1, 1);
        assert!(MetaParams::init(SeedTree::new(0), &arch, AdaptMode::Context).is_err());
        let arch = Architecture::new(1, 1).with_context(17);
        assert!(arch.validate(AdaptMode::Context).is_err());
    }
}
