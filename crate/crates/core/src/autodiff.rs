//! Define-by-run reverse-mode differentiation.
//!
//! Model and adaptation code is written once against [`Graph`]. Running it
//! with [`Eval`] computes plain values; running it with a [`Tape`] records
//! every primitive so [`Tape::backward`] can return exact gradients.

use crate::linalg::Cholesky;
use crate::tensor::{LinalgError, Primitive, Result, Tensor};

/// Something that can evaluate [`Primitive`]s.
pub trait Graph {
    type Node: Clone;

    /// Introduces a value that is never differentiated.
    fn constant(&mut self, value: Tensor) -> Self::Node;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    /// Evaluates `prim` on `inputs` and, when recording, appends a node.
    fn apply(&mut self, prim: Primitive, inputs: &[&Self::Node]) -> Result<Self::Node>;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Multiply, &[a, b])
    }

    fn scale(&mut self, a: &Self::Node, s: f64) -> Result<Self::Node> {
        self.apply(Primitive::Scale(s), &[a])
    }

    fn transpose(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Transpose, &[a])
    }

    fn relu(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Relu, &[a])
    }

    fn concat_cols(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::ConcatColumns, &[a, b])
    }

    fn append_ones(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::AppendOnes, &[a])
    }

    fn sum(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Sum, &[a])
    }

    fn mse(&mut self, prediction: &Self::Node, target: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::MeanSquaredError, &[prediction, target])
    }

    fn outer(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::Outer, &[a, b])
    }

    fn spd_solve(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Primitive::SpdSolve, &[a, b])
    }

    /// `a + c` for a constant `c`.
    fn add_const(&mut self, a: &Self::Node, c: Tensor) -> Result<Self::Node> {
        let c = self.constant(c);
        self.add(a, &c)
    }

    /// `a · c` for a constant `c`.
    fn matmul_const(&mut self, a: &Self::Node, c: Tensor) -> Result<Self::Node> {
        let c = self.constant(c);
        self.matmul(a, &c)
    }

    /// `c · a` for a constant `c`.
    fn const_matmul(&mut self, c: Tensor, a: &Self::Node) -> Result<Self::Node> {
        let c = self.constant(c);
        self.matmul(&c, a)
    }

    /// Stacks `a` (`1×n`) into `rows×n` by a product with a ones column.
    fn repeat_rows(&mut self, a: &Self::Node, rows: usize) -> Result<Self::Node> {
        self.const_matmul(Tensor::ones(rows, 1), a)
    }
}

/// Unrecorded evaluation: nodes are tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type Node = Tensor;

    fn constant(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn value<'a>(&'a self, node: &'a Tensor) -> &'a Tensor {
        node
    }

    fn apply(&mut self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        prim.forward(inputs)
    }
}

/// Handle to a node on a [`Tape`]. Ids increase with creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    op: Option<Primitive>,
    inputs: [usize; 2],
    value: Tensor,
    requires_grad: bool,
    factor: Option<Cholesky>,
}

impl TapeNode {
    pub fn op(&self) -> Option<Primitive> {
        self.op
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn inputs(&self) -> &[usize] {
        match self.op {
            None => &[],
            Some(p) => &self.inputs[..p.arity()],
        }
    }
}

/// A recorded computation. Confined to one thread; build a fresh tape per evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op: None,
            inputs: [0; 2],
            value,
            requires_grad,
            factor: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every node that depends on a leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.shape() != (1, 1) {
            return Err(LinalgError::Contract(format!(
                "backward requires a 1x1 root, got {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let [ia, ib] = node.inputs;
            let a = &self.nodes[ia].value;
            match op {
                Primitive::Matmul => {
                    let b = &self.nodes[ib].value;
                    if self.nodes[ia].requires_grad {
                        self.accumulate(&mut adj, ia, g.matmul_t(b)?);
                    }
                    if self.nodes[ib].requires_grad {
                        self.accumulate(&mut adj, ib, a.t_matmul(&g)?);
                    }
                }
                Primitive::Add => {
                    self.accumulate(&mut adj, ia, g.clone());
                    self.accumulate(&mut adj, ib, g.clone());
                }
                Primitive::Subtract => {
                    self.accumulate(&mut adj, ia, g.clone());
                    if self.nodes[ib].requires_grad {
                        self.accumulate(&mut adj, ib, g.scale(-1.0)?);
                    }
                }
                Primitive::Multiply => {
                    let b = &self.nodes[ib].value;
                    if self.nodes[ia].requires_grad {
                        self.accumulate(&mut adj, ia, g.hadamard(b)?);
                    }
                    if self.nodes[ib].requires_grad {
                        self.accumulate(&mut adj, ib, g.hadamard(a)?);
                    }
                }
                Primitive::Scale(s) => self.accumulate(&mut adj, ia, g.scale(s)?),
                Primitive::Transpose => self.accumulate(&mut adj, ia, g.transpose()),
                Primitive::Relu => {
                    let masked = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                        if a[(r, c)] > 0.0 {
                            g[(r, c)]
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut adj, ia, masked);
                }
                Primitive::ConcatColumns => {
                    let ca = a.cols();
                    let cb = self.nodes[ib].value.cols();
                    if self.nodes[ia].requires_grad {
                        self.accumulate(&mut adj, ia, Tensor::from_fn(g.rows(), ca, |r, c| g[(r, c)]));
                    }
                    if self.nodes[ib].requires_grad {
                        self.accumulate(
                            &mut adj,
                            ib,
                            Tensor::from_fn(g.rows(), cb, |r, c| g[(r, ca + c)]),
                        );
                    }
                }
                Primitive::AppendOnes => {
                    let ca = a.cols();
                    self.accumulate(&mut adj, ia, Tensor::from_fn(g.rows(), ca, |r, c| g[(r, c)]));
                }
                Primitive::Sum => {
                    self.accumulate(&mut adj, ia, Tensor::filled(a.rows(), a.cols(), g.item()));
                }
                Primitive::MeanSquaredError => {
                    let y = &self.nodes[ib].value;
                    let r = a.sub(y)?.scale(2.0 * g.item() / a.rows() as f64)?;
                    if self.nodes[ib].requires_grad {
                        self.accumulate(&mut adj, ib, r.scale(-1.0)?);
                    }
                    self.accumulate(&mut adj, ia, r);
                }
                Primitive::Outer => {
                    let b = &self.nodes[ib].value;
                    if self.nodes[ia].requires_grad {
                        let bv = b.reshape(b.len(), 1)?;
                        let ga = g.matmul(&bv)?.reshape(a.rows(), a.cols())?;
                        self.accumulate(&mut adj, ia, ga);
                    }
                    if self.nodes[ib].requires_grad {
                        let av = a.reshape(a.len(), 1)?;
                        let gb = g.t_matmul(&av)?.reshape(b.rows(), b.cols())?;
                        self.accumulate(&mut adj, ib, gb);
                    }
                }
                Primitive::SpdSolve => {
                    let factor = node.factor.as_ref().expect("solve nodes cache their factor");
                    let x = &node.value;
                    let s = factor.solve(&g)?;
                    if self.nodes[ia].requires_grad {
                        let sxt = s.matmul_t(x)?;
                        let ga = sxt.symmetrized()?.scale(-1.0)?;
                        self.accumulate(&mut adj, ia, ga);
                    }
                    if self.nodes[ib].requires_grad {
                        self.accumulate(&mut adj, ib, s);
                    }
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut adj[idx] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        &self.nodes[node.0].value
    }

    fn apply(&mut self, prim: Primitive, inputs: &[&Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(LinalgError::Contract(format!(
                "{} expects {} inputs, got {}",
                prim.name(),
                prim.arity(),
                inputs.len()
            )));
        }
        let mut idx = [0usize; 2];
        for (slot, v) in idx.iter_mut().zip(inputs) {
            *slot = v.0;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, factor) = if prim == Primitive::SpdSolve {
            let factor = Cholesky::factor(&self.nodes[idx[0]].value)?;
            let x = factor.solve(&self.nodes[idx[1]].value)?;
            (x, Some(factor))
        } else {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            (prim.forward(&vals)?, None)
        };
        self.nodes.push(TapeNode {
            op: Some(prim),
            inputs: idx,
            value,
            requires_grad,
            factor,
        });
        Ok(Var(self.nodes.len() - 1))
    }
}

/// Adjoints indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` does not reach the root.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 4.0]]));
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(2, 2));
        assert_eq!(g.get(s).unwrap(), &Tensor::scalar(1.0));
    }

    #[test]
    fn quadratic_head_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::row_vector(&[0.5, -1.0, 2.0]));
        let z = tape.constant(Tensor::row_vector(&[1.0, 3.0, 1.0]));
        let y = tape.constant(Tensor::scalar(0.25));
        let pred = tape.apply(Primitive::Matmul, &[&z, &theta]);
        assert!(pred.is_err(), "1x3 · 1x3 must not conform");
        let zt = tape.transpose(&z).unwrap();
        let pred = tape.matmul(&theta, &zt).unwrap();
        let loss = tape.mse(&pred, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        let resid = 0.5 - 3.0 + 2.0 - 0.25;
        let expected = Tensor::row_vector(&[2.0 * resid, 6.0 * resid, 2.0 * resid]);
        assert!(g.get(theta).unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(2, 1));
        assert!(matches!(tape.backward(x), Err(LinalgError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(1, 2));
        let c = tape.constant(Tensor::ones(1, 2));
        let p = tape.mul(&x, &c).unwrap();
        let s = tape.sum(&p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(c, &Tensor::ones(1, 2)), Tensor::zeros(1, 2));
    }

    #[test]
    fn eval_and_tape_agree() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let t = tape.transpose(&va).unwrap();
        let m = tape.matmul(&va, &t).unwrap();
        let mut ev = Eval;
        let m2 = {
            let t = ev.transpose(&a).unwrap();
            ev.matmul(&a, &t).unwrap()
        };
        assert_eq!(tape.value(&m), &m2);
        assert_eq!(tape.node(m).inputs(), &[va.id(), t.id()]);
    }
}
