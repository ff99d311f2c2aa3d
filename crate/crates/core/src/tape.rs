//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every forward primitive appends a node holding its output value, so a
//! single backward sweep can hand back a gradient for every recorded value,
//! inputs included. The backward rule for ReLU is selectable: `Classical`
//! passes the incoming gradient wherever the forward input was positive,
//! `Guided` additionally zeroes negative incoming gradients. All other
//! primitives differentiate by exact calculus rules in both modes.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{check_same_shape, Scalar, Tensor};

/// Which backward rule ReLU nodes apply. Forward values never depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ReluMode {
    Classical,
    Guided,
}

/// Handle to a value recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded primitive with references to its input values.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        pad: usize,
    },
    AvgPool2x2(ValueId),
    Tanh(ValueId),
    Relu(ValueId),
    EmbeddingLookup {
        table: ValueId,
        indices: Vec<usize>,
    },
    SumAxis {
        input: ValueId,
        axis: usize,
    },
    Softmax(ValueId),
    CrossEntropy {
        probs: ValueId,
        label: usize,
    },
    Pick {
        input: ValueId,
        index: usize,
    },
    Reshape(ValueId),
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// Recorded computation graph. Nodes are in topological order by
/// construction: an operation can only reference already-recorded values.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    relu_mode: ReluMode,
}

/// Standalone ReLU backward rule.
///
/// Classical: `g_in = 1[h > 0] * g_out`.
/// Guided:    `g_in = 1[h > 0] * 1[g_out > 0] * g_out`.
///
/// `h` is the forward *input* of the ReLU; the indicator is strict, so an
/// input of exactly zero passes no gradient in either mode.
pub fn relu_backward<T: Scalar>(h: &Tensor<T>, g_out: &Tensor<T>, mode: ReluMode) -> Result<Tensor<T>> {
    check_same_shape("relu_backward", h, g_out)?;
    let data = relu_backward_slice(h.data(), g_out.data(), mode);
    Tensor::new(h.shape().to_vec(), data)
}

fn relu_backward_slice<T: Scalar>(h: &[T], g_out: &[T], mode: ReluMode) -> Vec<T> {
    let zero = T::zero();
    h.iter()
        .zip(g_out.iter())
        .map(|(&hv, &gv)| {
            let open = hv > zero;
            match mode {
                ReluMode::Classical => {
                    if open {
                        gv
                    } else {
                        zero
                    }
                }
                ReluMode::Guided => {
                    if open && gv > zero {
                        gv
                    } else {
                        zero
                    }
                }
            }
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new(relu_mode: ReluMode) -> Self {
        Tape {
            nodes: Vec::new(),
            relu_mode,
        }
    }

    pub fn relu_mode(&self) -> ReluMode {
        self.relu_mode
    }

    /// The mode only matters during [`Tape::backward`]; switching it never
    /// touches recorded forward values.
    pub fn set_relu_mode(&mut self, mode: ReluMode) {
        self.relu_mode = mode;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: ValueId) -> &Op {
        &self.nodes[id.0].op
    }

    /// (input, output) id pairs of every ReLU node, in recording order.
    pub fn relu_nodes(&self) -> Vec<(ValueId, ValueId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Relu(input) => Some((input, ValueId(i))),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record an input value (model parameter, image, embedding table, ...).
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        check_same_shape("multiply", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// `[m,k] @ [k,n] -> [m,n]` or `[m,k] @ [k] -> [m]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[0], ash[1]);
        let value = match bsh.len() {
            2 => {
                if bsh[0] != k {
                    return Err(mismatch());
                }
                let n = bsh[1];
                let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
                Tensor::new(vec![m, n], data)?
            }
            1 => {
                if bsh[0] != k {
                    return Err(mismatch());
                }
                let data = kernels::matvec(self.value(a).data(), self.value(b).data(), m, k);
                Tensor::new(vec![m], data)?
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Stride-1 zero-padded convolution: input [ci,h,w], weight [co,ci,kh,kw].
    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        pad: usize,
    ) -> Result<ValueId> {
        let ish = self.value(input).shape().to_vec();
        let wsh = self.value(weight).shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: ish.clone(),
            rhs: wsh.clone(),
        };
        if ish.len() != 3 || wsh.len() != 4 || wsh[1] != ish[0] {
            return Err(mismatch());
        }
        let (ci, h, w) = (ish[0], ish[1], ish[2]);
        let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            let bsh = self.value(b).shape();
            if bsh != [co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: bsh.to_vec(),
                });
            }
        }
        let data = kernels::conv2d(
            self.value(input).data(),
            ci,
            h,
            w,
            self.value(weight).data(),
            co,
            kh,
            kw,
            bias.map(|b| self.value(b).data().to_vec()).as_deref(),
            pad,
        );
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        let value = Tensor::new(vec![co, oh, ow], data)?;
        Ok(self.push(Op::Conv2d { input, weight, bias, pad }, value))
    }

    pub fn avg_pool2x2(&mut self, input: ValueId) -> Result<ValueId> {
        let ish = self.value(input).shape().to_vec();
        if ish.len() != 3 || ish[1] % 2 != 0 || ish[2] % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "avg_pool2x2",
                reason: format!("needs [c, even h, even w], got {ish:?}"),
            });
        }
        let (c, h, w) = (ish[0], ish[1], ish[2]);
        let data = kernels::avg_pool2x2(self.value(input).data(), c, h, w);
        let value = Tensor::new(vec![c, h / 2, w / 2], data)?;
        Ok(self.push(Op::AvgPool2x2(input), value))
    }

    pub fn tanh(&mut self, input: ValueId) -> Result<ValueId> {
        let data = self.value(input).data().iter().map(|&x| x.tanh()).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), data)?;
        Ok(self.push(Op::Tanh(input), value))
    }

    /// `relu(h) = max(h, 0)` elementwise.
    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        let zero = T::zero();
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&x| if x > zero { x } else { zero })
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), data)?;
        Ok(self.push(Op::Relu(input), value))
    }

    /// Gather rows of `table` [v,d] at `indices` -> [len(indices), d].
    pub fn embedding_lookup(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        let tsh = self.value(table).shape().to_vec();
        if tsh.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "embedding_lookup",
                reason: format!("table must be rank 2, got {tsh:?}"),
            });
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument {
                op: "embedding_lookup",
                reason: "empty index sequence".into(),
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument {
                op: "embedding_lookup",
                reason: format!("index {bad} out of range for table with {v} rows"),
            });
        }
        let tdata = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tdata[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// Sum over one axis, dropping it from the shape.
    pub fn sum_over_axis(&mut self, input: ValueId, axis: usize) -> Result<ValueId> {
        let ish = self.value(input).shape().to_vec();
        if axis >= ish.len() {
            return Err(Error::InvalidArgument {
                op: "sum_over_axis",
                reason: format!("axis {axis} out of range for shape {ish:?}"),
            });
        }
        let outer: usize = ish[..axis].iter().product();
        let axis_len = ish[axis];
        let inner: usize = ish[axis + 1..].iter().product();
        let idata = self.value(input).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..axis_len {
                let src = &idata[(o * axis_len + t) * inner..(o * axis_len + t + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += s;
                }
            }
        }
        let mut osh: Vec<usize> = ish[..axis].to_vec();
        osh.extend_from_slice(&ish[axis + 1..]);
        let value = Tensor::new(osh, data)?;
        Ok(self.push(Op::SumAxis { input, axis }, value))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: ValueId) -> Result<ValueId> {
        let ish = self.value(input).shape().to_vec();
        if ish.is_empty() {
            return Err(Error::InvalidArgument {
                op: "softmax",
                reason: "needs rank >= 1".into(),
            });
        }
        let cols = *ish.last().unwrap();
        let rows = self.value(input).len() / cols;
        let data = kernels::softmax_rows(self.value(input).data(), rows, cols);
        let value = Tensor::new(ish, data)?;
        Ok(self.push(Op::Softmax(input), value))
    }

    /// `-ln(p[label])` for a probability vector `p`.
    pub fn cross_entropy(&mut self, probs: ValueId, label: usize) -> Result<ValueId> {
        let psh = self.value(probs).shape().to_vec();
        if psh.len() != 1 || label >= psh[0] {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                reason: format!("label {label} with probabilities of shape {psh:?}"),
            });
        }
        let p = self.value(probs).data()[label];
        let value = Tensor::scalar(-(p.ln()));
        Ok(self.push(Op::CrossEntropy { probs, label }, value))
    }

    /// Extract one element as a scalar (used to seed backward on a single
    /// probability).
    pub fn pick(&mut self, input: ValueId, index: usize) -> Result<ValueId> {
        let len = self.value(input).len();
        if index >= len {
            return Err(Error::InvalidArgument {
                op: "pick",
                reason: format!("index {index} out of range for {len} elements"),
            });
        }
        let value = Tensor::scalar(self.value(input).data()[index]);
        Ok(self.push(Op::Pick { input, index }, value))
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(input).shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, self.value(input).data().to_vec())?;
        Ok(self.push(Op::Reshape(input), value))
    }

    /// Reverse sweep from a scalar seed (gradient 1.0). Returns one
    /// accumulated gradient per recorded value.
    pub fn backward(&self, seed: ValueId) -> Result<Gradients<T>> {
        if seed.0 >= self.nodes.len() {
            return Err(Error::SeedNotOnTape {
                id: seed.0,
                len: self.nodes.len(),
            });
        }
        if !self.value(seed).is_scalar() {
            return Err(Error::SeedNotScalar {
                id: seed.0,
                shape: self.value(seed).shape().to_vec(),
            });
        }
        let mut grads: Vec<Vec<T>> = self.nodes.iter().map(|n| vec![T::zero(); n.value.len()]).collect();
        grads[seed.0][0] = T::one();

        for id in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut grads[id]);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a.0][i] += gv * bv[i];
                    }
                    for (i, &gv) in g.iter().enumerate() {
                        grads[b.0][i] += gv * av[i];
                    }
                }
                Op::MatMul(a, b) => {
                    let ash = self.nodes[a.0].value.shape();
                    let (m, k) = (ash[0], ash[1]);
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    if self.nodes[b.0].value.rank() == 2 {
                        let n = self.nodes[b.0].value.shape()[1];
                        // gA += g @ B^T ; gB += A^T @ g
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = T::zero();
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[p * n + j];
                                }
                                grads[a.0][i * k + p] += acc;
                            }
                        }
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = T::zero();
                                for i in 0..m {
                                    acc += av[i * k + p] * g[i * n + j];
                                }
                                grads[b.0][p * n + j] += acc;
                            }
                        }
                    } else {
                        // y[m] = A[m,k] x[k]: gA[i,p] += g[i] x[p]; gx[p] += A[i,p] g[i]
                        for i in 0..m {
                            let gi = g[i];
                            let garow = &mut grads[a.0][i * k..(i + 1) * k];
                            for (p, ga) in garow.iter_mut().enumerate() {
                                *ga += gi * bv[p];
                            }
                        }
                        for p in 0..k {
                            let mut acc = T::zero();
                            for i in 0..m {
                                acc += av[i * k + p] * g[i];
                            }
                            grads[b.0][p] += acc;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let ish = self.nodes[input.0].value.shape();
                    let wsh = self.nodes[weight.0].value.shape();
                    let (ci, h, w) = (ish[0], ish[1], ish[2]);
                    let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
                    let (g_in, g_w, g_b) = kernels::conv2d_backward(
                        &g,
                        self.nodes[input.0].value.data(),
                        ci,
                        h,
                        w,
                        self.nodes[weight.0].value.data(),
                        co,
                        kh,
                        kw,
                        *pad,
                    );
                    accumulate(&mut grads[input.0], &g_in);
                    accumulate(&mut grads[weight.0], &g_w);
                    if let Some(b) = bias {
                        accumulate(&mut grads[b.0], &g_b);
                    }
                }
                Op::AvgPool2x2(input) => {
                    let ish = self.nodes[input.0].value.shape();
                    let g_in = kernels::avg_pool2x2_backward(&g, ish[0], ish[1], ish[2]);
                    accumulate(&mut grads[input.0], &g_in);
                }
                Op::Tanh(input) => {
                    let y = self.nodes[id].value.data();
                    for (i, &gv) in g.iter().enumerate() {
                        grads[input.0][i] += gv * (T::one() - y[i] * y[i]);
                    }
                }
                Op::Relu(input) => {
                    let h = self.nodes[input.0].value.data();
                    let g_in = relu_backward_slice(h, &g, self.relu_mode);
                    accumulate(&mut grads[input.0], &g_in);
                }
                Op::EmbeddingLookup { table, indices } => {
                    let d = self.nodes[id].value.shape()[1];
                    for (row, &idx) in indices.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut grads[table.0][idx * d..(idx + 1) * d];
                        for (dv, &sv) in dst.iter_mut().zip(src.iter()) {
                            *dv += sv;
                        }
                    }
                }
                Op::SumAxis { input, axis } => {
                    let ish = self.nodes[input.0].value.shape();
                    let outer: usize = ish[..*axis].iter().product();
                    let axis_len = ish[*axis];
                    let inner: usize = ish[*axis + 1..].iter().product();
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for t in 0..axis_len {
                            let dst =
                                &mut grads[input.0][(o * axis_len + t) * inner..(o * axis_len + t + 1) * inner];
                            for (dv, &sv) in dst.iter_mut().zip(src.iter()) {
                                *dv += sv;
                            }
                        }
                    }
                }
                Op::Softmax(input) => {
                    let y = self.nodes[id].value.data();
                    let cols = *self.nodes[id].value.shape().last().unwrap();
                    let rows = y.len() / cols;
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for (yv, gv) in yr.iter().zip(gr.iter()) {
                            dot += *yv * *gv;
                        }
                        let dst = &mut grads[input.0][r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            dst[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
                Op::CrossEntropy { probs, label } => {
                    let p = self.nodes[probs.0].value.data()[*label];
                    grads[probs.0][*label] += -(g[0] / p);
                }
                Op::Pick { input, index } => {
                    grads[input.0][*index] += g[0];
                }
                Op::Reshape(input) => {
                    accumulate(&mut grads[input.0], &g);
                }
            }
            grads[id] = g;
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("gradient shape")
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// One gradient tensor per recorded value, in tape order.
pub struct Gradients<T = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: ValueId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32]) -> Tensor<f32> {
        Tensor::vector(data)
    }

    #[test]
    fn relu_forward_definition() {
        let mut tape = Tape::new(ReluMode::Classical);
        let x = tape.leaf(t(&[-1.0, 0.0, 2.5]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new(ReluMode::Classical);
        let x = tape.leaf(t(&[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv2d_all_ones_grid() {
        let mut tape = Tape::new(ReluMode::Classical);
        let img = tape.leaf(Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap());
        let kern = tape.leaf(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let out = tape.conv2d(img, kern, None, 1).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 3, 3]);
        assert_eq!(tape.value(out).data()[4], 9.0);
    }

    #[test]
    fn relu_backward_rules() {
        let h = t(&[2.0]);
        let g = t(&[-3.0]);
        assert_eq!(
            relu_backward(&h, &g, ReluMode::Classical).unwrap().data(),
            &[-3.0]
        );
        assert_eq!(relu_backward(&h, &g, ReluMode::Guided).unwrap().data(), &[0.0]);
        let h = t(&[-1.0]);
        let g = t(&[5.0]);
        assert_eq!(relu_backward(&h, &g, ReluMode::Guided).unwrap().data(), &[0.0]);
        assert_eq!(
            relu_backward(&h, &g, ReluMode::Classical).unwrap().data(),
            &[0.0]
        );
        // Strict indicator: an input of exactly zero gates both modes.
        let h = t(&[0.0]);
        let g = t(&[5.0]);
        assert_eq!(
            relu_backward(&h, &g, ReluMode::Classical).unwrap().data(),
            &[0.0]
        );
        assert_eq!(relu_backward(&h, &g, ReluMode::Guided).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_backward_shape_mismatch() {
        let h = t(&[1.0, 2.0]);
        let g = t(&[1.0]);
        assert!(relu_backward(&h, &g, ReluMode::Classical).is_err());
    }

    #[test]
    fn square_derivative_both_modes() {
        for mode in [ReluMode::Classical, ReluMode::Guided] {
            let mut tape = Tape::new(mode);
            let x = tape.leaf(Tensor::scalar(3.0f32));
            let y = tape.mul(x, x).unwrap();
            let grads = tape.backward(y).unwrap();
            assert_eq!(grads.wrt(x).data(), &[6.0]);
        }
    }

    #[test]
    fn backward_rejects_bad_seeds() {
        let mut tape = Tape::<f32>::new(ReluMode::Classical);
        let x = tape.leaf(t(&[1.0, 2.0]));
        assert!(matches!(
            tape.backward(ValueId(7)),
            Err(Error::SeedNotOnTape { .. })
        ));
        assert!(matches!(tape.backward(x), Err(Error::SeedNotScalar { .. })));
    }

    #[test]
    fn add_shape_mismatch_names_primitive() {
        let mut tape = Tape::new(ReluMode::Classical);
        let a = tape.leaf(t(&[1.0, 2.0]));
        let b = tape.leaf(t(&[1.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    /// Builds a ReLU-free graph touching most primitives: embeddings summed
    /// into a vector, an affine map, tanh, a softmax head and a picked
    /// probability.
    fn relu_free_graph(tape: &mut Tape<f32>) -> (Vec<ValueId>, ValueId) {
        let table = tape.leaf(
            Tensor::new(vec![4, 3], vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.6, 0.2, 0.1, -0.3, 0.4, 0.8])
                .unwrap(),
        );
        let w = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.5, -0.6, 0.2, 0.9, 0.3, -0.1]).unwrap(),
        );
        let b = tape.leaf(t(&[0.05, -0.2]));
        let rows = tape.embedding_lookup(table, &[1, 3, 1]).unwrap();
        let summed = tape.sum_over_axis(rows, 0).unwrap();
        let affine = tape.matmul(w, summed).unwrap();
        let shifted = tape.add(affine, b).unwrap();
        let squashed = tape.tanh(shifted).unwrap();
        let probs = tape.softmax(squashed).unwrap();
        let p = tape.pick(probs, 0).unwrap();
        (vec![table, w, b], p)
    }

    #[test]
    fn modes_agree_without_relu_bit_for_bit() {
        let mut classical = Tape::new(ReluMode::Classical);
        let (leaves_c, out_c) = relu_free_graph(&mut classical);
        let g_c = classical.backward(out_c).unwrap();

        let mut guided = Tape::new(ReluMode::Guided);
        let (leaves_g, out_g) = relu_free_graph(&mut guided);
        let g_g = guided.backward(out_g).unwrap();

        for (a, b) in leaves_c.iter().zip(leaves_g.iter()) {
            assert!(g_c.wrt(*a).bits_eq(g_g.wrt(*b)));
        }
    }

    #[test]
    fn mode_switch_never_changes_forward() {
        let build = |mode| {
            let mut tape = Tape::new(mode);
            let x = tape.leaf(t(&[-0.5, 0.3, 1.7]));
            let r = tape.relu(x).unwrap();
            let y = tape.tanh(r).unwrap();
            tape.value(y).clone()
        };
        assert!(build(ReluMode::Classical).bits_eq(&build(ReluMode::Guided)));
    }

    /// Central finite differences on an f64 tape.
    fn finite_diff_check(
        build: &dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Vec<ValueId>, ValueId),
        inputs: &[Tensor<f64>],
    ) {
        let mut tape = Tape::new(ReluMode::Classical);
        let (leaf_ids, out) = build(&mut tape, inputs);
        let grads = tape.backward(out).unwrap();

        let eval = |inputs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new(ReluMode::Classical);
            let (_, out) = build(&mut tape, inputs);
            tape.value(out).item()
        };

        let step = 1e-3;
        for (li, leaf) in leaf_ids.iter().enumerate() {
            for c in 0..inputs[li].len() {
                let mut plus = inputs.to_vec();
                plus[li].data_mut()[c] += step;
                let mut minus = inputs.to_vec();
                minus[li].data_mut()[c] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let ad = grads.wrt(*leaf).data()[c];
                let tol = 1e-5_f64.max(1e-2 * ad.abs().max(fd.abs()));
                assert!(
                    (ad - fd).abs() <= tol,
                    "leaf {li} coord {c}: ad={ad} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn finite_differences_convolutional_chain() {
        let build = |tape: &mut Tape<f64>, inputs: &[Tensor<f64>]| {
            let img = tape.leaf(inputs[0].clone());
            let kern = tape.leaf(inputs[1].clone());
            let bias = tape.leaf(inputs[2].clone());
            let conv = tape.conv2d(img, kern, Some(bias), 1).unwrap();
            let act = tape.relu(conv).unwrap();
            let pooled = tape.avg_pool2x2(act).unwrap();
            let flat = tape.reshape(pooled, vec![8]).unwrap();
            let w = tape.leaf(inputs[3].clone());
            let logits = tape.matmul(w, flat).unwrap();
            let probs = tape.softmax(logits).unwrap();
            let loss = tape.cross_entropy(probs, 1).unwrap();
            (vec![img, kern, bias, w], loss)
        };
        // Values chosen to keep every ReLU input far from its kink.
        let img = Tensor::new(
            vec![1, 4, 4],
            vec![
                0.9, 0.4, 0.7, 0.3, 0.2, 0.8, 0.5, 0.6, 0.4, 0.9, 0.3, 0.7, 0.6, 0.2, 0.8, 0.5,
            ],
        )
        .unwrap();
        let kern = Tensor::new(
            vec![2, 1, 3, 3],
            vec![
                0.4, -0.2, 0.3, 0.1, 0.5, -0.3, 0.2, 0.4, -0.1, -0.3, 0.2, 0.1, 0.4, -0.5, 0.3,
                -0.2, 0.1, 0.2,
            ],
        )
        .unwrap();
        let bias = Tensor::vector(&[0.8f64, -0.9]);
        let w = Tensor::new(
            vec![3, 8],
            (0..24).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect(),
        )
        .unwrap();
        finite_diff_check(&build, &[img, kern, bias, w]);
    }

    #[test]
    fn finite_differences_embedding_chain() {
        let build = |tape: &mut Tape<f64>, inputs: &[Tensor<f64>]| {
            let table = tape.leaf(inputs[0].clone());
            let w = tape.leaf(inputs[1].clone());
            let rows = tape.embedding_lookup(table, &[0, 2, 2, 1]).unwrap();
            let summed = tape.sum_over_axis(rows, 0).unwrap();
            let h = tape.matmul(w, summed).unwrap();
            let act = tape.tanh(h).unwrap();
            let probs = tape.softmax(act).unwrap();
            let p = tape.pick(probs, 2).unwrap();
            (vec![table, w], p)
        };
        let table = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| ((i as f64) * 0.61).cos() * 0.7).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| ((i as f64) * 0.23).sin() * 0.6).collect(),
        )
        .unwrap();
        finite_diff_check(&build, &[table, w]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn guided_relu_backward_is_nonnegative(
                h in proptest::collection::vec(-10.0f32..10.0, 1..32),
                g in proptest::collection::vec(-10.0f32..10.0, 1..32),
            ) {
                let n = h.len().min(g.len());
                let ht = Tensor::vector(&h[..n]);
                let gt = Tensor::vector(&g[..n]);
                let out = relu_backward(&ht, &gt, ReluMode::Guided).unwrap();
                prop_assert!(out.data().iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn modes_agree_on_relu_free_elementwise_graphs(
                xs in proptest::collection::vec(-2.0f32..2.0, 4),
                ys in proptest::collection::vec(-2.0f32..2.0, 4),
            ) {
                let run = |mode| {
                    let mut tape = Tape::new(mode);
                    let x = tape.leaf(Tensor::vector(&xs));
                    let y = tape.leaf(Tensor::vector(&ys));
                    let prod = tape.mul(x, y).unwrap();
                    let s = tape.add(prod, x).unwrap();
                    let sq = tape.tanh(s).unwrap();
                    let m = tape.reshape(sq, vec![1, 4]).unwrap();
                    let col = tape.reshape(y, vec![4]).unwrap();
                    let out = tape.matmul(m, col).unwrap();
                    let scalar = tape.pick(out, 0).unwrap();
                    let grads = tape.backward(scalar).unwrap();
                    (grads.wrt(x).clone(), grads.wrt(y).clone())
                };
                let (gxc, gyc) = run(ReluMode::Classical);
                let (gxg, gyg) = run(ReluMode::Guided);
                prop_assert!(gxc.bits_eq(&gxg));
                prop_assert!(gyc.bits_eq(&gyg));
            }
        }
    }
}
