//! A small tape-based reverse-mode differentiator over the tensor op suite.
//!
//! It records every forward op with its operands and replays the chain rule
//! mechanically, so it shares no derivation with the hand-written per-block
//! backward passes. The runtime uses it as the monolithic reference.

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F: Element> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Silu(Var),
    RmsNorm(Var, Var, F),
    Rope(Var, f64),
    CausalSoftmax(Var),
    Embedding(Var, Vec<usize>),
    Xent(Var, Vec<usize>),
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records values; every value stays alive until the tape is dropped.
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul(a, b), &[a, b]))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatmulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let y = ops::scale(self.value(a), s)?;
        Ok(self.push(y, Op::Scale(a, s), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_cols(self.value(a), start, len)?;
        Ok(self.push(y, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_cols(&vals)?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let y = ops::silu(self.value(a))?;
        Ok(self.push(y, Op::Silu(a), &[a]))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let y = ops::rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(y, Op::RmsNorm(x, gain, eps), &[x, gain]))
    }

    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var> {
        let y = ops::rope(self.value(a), base)?;
        Ok(self.push(y, Op::Rope(a, base), &[a]))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let y = ops::causal_softmax(self.value(a))?;
        Ok(self.push(y, Op::CausalSoftmax(a), &[a]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let y = ops::embedding(self.value(table), ids)?;
        Ok(self.push(y, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// Mean cross-entropy as a `[1]` tensor.
    pub fn xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = ops::xent_loss(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Xent(logits, targets.to_vec()),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar output. Returns a gradient for every node
    /// that depends on a parameter (`None` elsewhere).
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(&[1], F::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut contribs: Vec<(Var, Tensor<F>)> = Vec::new();
            let need = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Matmul(a, b) => {
                    if need(*a) {
                        contribs.push((*a, ops::matmul_nt(&dy, self.value(*b))?));
                    }
                    if need(*b) {
                        contribs.push((*b, ops::matmul_tn(self.value(*a), &dy)?));
                    }
                }
                Op::MatmulNt(a, b) => {
                    if need(*a) {
                        contribs.push((*a, ops::matmul(&dy, self.value(*b))?));
                    }
                    if need(*b) {
                        contribs.push((*b, ops::matmul_tn(&dy, self.value(*a))?));
                    }
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        contribs.push((*a, dy.clone()));
                    }
                    if need(*b) {
                        contribs.push((*b, dy.clone()));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        contribs.push((*a, ops::mul(&dy, self.value(*b))?));
                    }
                    if need(*b) {
                        contribs.push((*b, ops::mul(&dy, self.value(*a))?));
                    }
                }
                Op::Scale(a, s) => contribs.push((*a, ops::scale(&dy, *s)?)),
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let (m, n, w) = (src.rows(), src.cols(), dy.cols());
                    let mut g = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        g.data_mut()[r * n + start..r * n + start + w].copy_from_slice(dy.row(r));
                    }
                    contribs.push((*a, g));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if need(*p) {
                            contribs.push((*p, ops::slice_cols(&dy, start, w)?));
                        }
                        start += w;
                    }
                }
                Op::Silu(a) => contribs.push((*a, ops::silu_backward(self.value(*a), &dy)?)),
                Op::RmsNorm(x, gain, eps) => {
                    let (dx, dgain) =
                        ops::rmsnorm_backward(self.value(*x), self.value(*gain), *eps, &dy)?;
                    if need(*x) {
                        contribs.push((*x, dx));
                    }
                    if need(*gain) {
                        contribs.push((*gain, dgain));
                    }
                }
                Op::Rope(a, base) => contribs.push((*a, ops::rope_backward(&dy, *base)?)),
                Op::CausalSoftmax(a) => {
                    contribs.push((*a, ops::causal_softmax_backward(&node.value, &dy)?))
                }
                Op::Embedding(table, ids) => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut g = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in g.data_mut()[id * d..(id + 1) * d].iter_mut().zip(dy.row(r))
                        {
                            *o += v;
                        }
                    }
                    contribs.push((*table, g));
                }
                Op::Xent(logits, targets) => {
                    let (_, dl) = ops::softmax_xent(self.value(*logits), targets)?;
                    contribs.push((*logits, ops::scale(&dl, dy.data()[0])?));
                }
            }
            for (v, g) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => ops::axpy(acc, F::one(), &g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of a parameter leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{relative_error, Rng};

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed, 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f64).collect()).unwrap()
    }

    /// A graph touching every op, as a function of two parameter tensors.
    fn build(tape: &mut Tape<f64>, a: Tensor<f64>, b: Tensor<f64>) -> (Var, Var, Var) {
        let a = tape.param(a);
        let b = tape.param(b);
        let gain = tape.param(rand_t(&[4], 3));
        let table = tape.constant(rand_t(&[5, 4], 4));
        let e = tape.embedding(table, &[1, 3, 0]).unwrap();
        let x = tape.matmul_nt(e, a).unwrap();
        let x = tape.rmsnorm(x, gain, 1e-5).unwrap();
        let s0 = tape.slice_cols(x, 0, 2).unwrap();
        let s1 = tape.slice_cols(x, 2, 2).unwrap();
        let r = tape.rope(s0, 10_000.0).unwrap();
        let c = tape.concat_cols(&[r, s1]).unwrap();
        let sc = tape.matmul_nt(c, c).unwrap();
        let p = tape.causal_softmax(sc).unwrap();
        let h = tape.matmul(p, c).unwrap();
        let g = tape.silu(h).unwrap();
        let m = tape.mul(g, c).unwrap();
        let m = tape.scale(m, 0.5).unwrap();
        let m = tape.add(m, x).unwrap();
        let logits = tape.matmul(m, b).unwrap();
        let loss = tape.xent(logits, &[2, 0, 1]).unwrap();
        (a, b, loss)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a0 = rand_t(&[4, 4], 1);
        let b0 = rand_t(&[4, 3], 2);
        let mut tape = Tape::new();
        let (a, b, loss) = build(&mut tape, a0.clone(), b0.clone());
        let g = tape.backward(loss).unwrap();
        let eval = |a: Tensor<f64>, b: Tensor<f64>| {
            let mut t = Tape::new();
            let (_, _, l) = build(&mut t, a, b);
            t.value(l).data()[0]
        };
        for (var, base) in [(a, &a0), (b, &b0)] {
            let mut fd = Vec::new();
            for i in 0..base.len() {
                let mut p = base.clone();
                p.data_mut()[i] += 1e-5;
                let mut m = base.clone();
                m.data_mut()[i] -= 1e-5;
                let (lp, lm) = if var == a {
                    (eval(p, b0.clone()), eval(m, b0.clone()))
                } else {
                    (eval(a0.clone(), p), eval(a0.clone(), m))
                };
                fd.push((lp - lm) / 2e-5);
            }
            let err = relative_error(g.get(var).unwrap().data(), &fd);
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(rand_t(&[2, 2], 1));
        let p = tape.param(rand_t(&[2, 2], 2));
        let y = tape.matmul(c, p).unwrap();
        let l = tape.xent(y, &[0, 1]).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(rand_t(&[2, 2], 2));
        assert!(tape.backward(p).is_err());
    }
}
