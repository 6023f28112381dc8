//! Forward kernels and adjoints for every primitive.
//!
//! Kernels are shared between gradient-bearing and no-grad evaluation, so
//! values never depend on whether a graph is being recorded. Matmul is backed
//! by `matrixmultiply::dgemm`; everything else is straightforward loops.

use super::{Node, Op, Result, Tape, TensorError, TensorId};
use std::rc::Rc;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// [outer, axis_dim, inner] factorization used by concat/slice.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Rotation angle for rotary position encoding: pair `j` of `half` at `pos`.
fn rope_angle(pos: usize, j: usize, half: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-(j as f64) / half as f64)
}

impl Tape {
    fn binary_elementwise(
        &self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a], &nodes[b]);
            if na.shape != nb.shape {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let data: Vec<f64> =
                na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
            (data, na.shape.clone(), na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(data, shape, rg, make_op(a, b)))
    }

    fn binary_broadcast(
        &self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a], &nodes[b]);
            let suffix_ok = na.shape.len() >= nb.shape.len()
                && na.shape[na.shape.len() - nb.shape.len()..] == nb.shape[..];
            if !suffix_ok || nb.data.is_empty() {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let rlen = nb.data.len();
            let data: Vec<f64> = na
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, nb.data[i % rlen]))
                .collect();
            (data, na.shape.clone(), na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(data, shape, rg, make_op(a, b)))
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (e.g. bias add).
    pub fn add_broadcast(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast("add_broadcast", a, b, |x, y| x + y, Op::AddBroadcast)
    }

    /// Elementwise product; shapes must match.
    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s (e.g. norm gain).
    pub fn mul_broadcast(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast("mul_broadcast", a, b, |x, y| x * y, Op::MulBroadcast)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, a: TensorId, s: f64) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            (na.data.iter().map(|&x| x * s).collect(), na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Scale(a, s)))
    }

    /// `a - b` as a composite of scale and add.
    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a], &nodes[b]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            (matmul_raw(&na.data, &nb.data, m, k, n), vec![m, n], na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Matmul(a, b)))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, a: TensorId) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("requires rank 2, got {:?}", na.shape),
                });
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            (transpose_raw(&na.data, r, c), vec![c, r], na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Transpose(a)))
    }

    /// Reinterpret the layout; element count must be preserved.
    pub fn reshape(&self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let (data, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.data.len() != new_shape.iter().product::<usize>() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: na.shape.clone(),
                    rhs: new_shape.to_vec(),
                });
            }
            (na.data.clone(), na.requires_grad)
        };
        Ok(self.push(data, new_shape.to_vec(), rg, Op::Reshape(a)))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "empty input list".into() });
        }
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0]];
            let rank = first.shape.len();
            if axis >= rank {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            let mut axis_total = 0;
            let mut rg = false;
            for &p in parts {
                let np = &nodes[p];
                let compatible = np.shape.len() == rank
                    && np.shape.iter().enumerate().all(|(i, &d)| i == axis || d == first.shape[i]);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: np.shape.clone(),
                    });
                }
                axis_total += np.shape[axis];
                rg |= np.requires_grad;
            }
            let mut shape = first.shape.clone();
            shape[axis] = axis_total;
            let (outer, _, inner) = split_at_axis(&shape, axis);
            let mut data = vec![0.0; outer * axis_total * inner];
            let mut offset = 0;
            for &p in parts {
                let np = &nodes[p];
                let d = np.shape[axis];
                for o in 0..outer {
                    let src = &np.data[o * d * inner..(o + 1) * d * inner];
                    let dst_start = (o * axis_total + offset) * inner;
                    data[dst_start..dst_start + d * inner].copy_from_slice(src);
                }
                offset += d;
            }
            (data, shape, rg)
        };
        Ok(self.push(data, shape, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if axis >= na.shape.len() || start + len > na.shape[axis] {
                return Err(TensorError::Invalid {
                    op: "slice",
                    msg: format!(
                        "range {start}..{} out of bounds for axis {axis} of {:?}",
                        start + len,
                        na.shape
                    ),
                });
            }
            let (outer, d, inner) = split_at_axis(&na.shape, axis);
            let mut shape = na.shape.clone();
            shape[axis] = len;
            let mut data = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src_start = (o * d + start) * inner;
                data[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&na.data[src_start..src_start + len * inner]);
            }
            (data, shape, na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Slice { src: a, axis, start, len }))
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_last(&self, a: TensorId) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.shape.is_empty() {
                return Err(TensorError::Invalid { op: "softmax", msg: "scalar input".into() });
            }
            let last = *na.shape.last().unwrap();
            let mut data = na.data.clone();
            for row in data.chunks_mut(last) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            (data, na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::SoftmaxLast(a)))
    }

    /// Root-mean-square normalization over the last axis (no gain).
    pub fn rms_norm_last(&self, a: TensorId, eps: f64) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.shape.is_empty() {
                return Err(TensorError::Invalid { op: "rms_norm", msg: "scalar input".into() });
            }
            let last = *na.shape.last().unwrap();
            let mut data = na.data.clone();
            for row in data.chunks_mut(last) {
                let ms = row.iter().map(|x| x * x).sum::<f64>() / last as f64;
                let s = 1.0 / (ms + eps).sqrt();
                for x in row.iter_mut() {
                    *x *= s;
                }
            }
            (data, na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::RmsNormLast { src: a, eps }))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&self, a: TensorId) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            let data = na.data.iter().map(|&x| x * sigmoid(x)).collect();
            (data, na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Silu(a)))
    }

    pub fn exp(&self, a: TensorId) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            (na.data.iter().map(|&x| x.exp()).collect(), na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Exp(a)))
    }

    pub fn log(&self, a: TensorId) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            (na.data.iter().map(|&x| x.ln()).collect(), na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::Log(a)))
    }

    /// Gather rows of `table` ([V, H]) by index: output is [ids.len(), H].
    pub fn embed_lookup(&self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let nt = &nodes[table];
            if nt.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "embed_lookup",
                    msg: format!("table must be rank 2, got {:?}", nt.shape),
                });
            }
            let (v, h) = (nt.shape[0], nt.shape[1]);
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(TensorError::Invalid {
                    op: "embed_lookup",
                    msg: format!("id {bad} out of range for table with {v} rows"),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * h);
            for &i in ids {
                data.extend_from_slice(&nt.data[i * h..(i + 1) * h]);
            }
            (data, vec![ids.len(), h], nt.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::EmbedLookup { table, ids: Rc::new(ids.to_vec()) }))
    }

    /// Keep entries where `mask` is true, replace the rest with `value`.
    /// Replaced entries carry zero gradient and never see the source value.
    pub fn masked_fill(&self, a: TensorId, mask: Rc<Vec<bool>>, value: f64) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.data.len() != mask.len() {
                return Err(TensorError::Invalid {
                    op: "masked_fill",
                    msg: format!("mask length {} != tensor size {}", mask.len(), na.data.len()),
                });
            }
            let data = na
                .data
                .iter()
                .zip(mask.iter())
                .map(|(&x, &keep)| if keep { x } else { value })
                .collect();
            (data, na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(data, shape, rg, Op::MaskedFill { src: a, mask }))
    }

    /// Mean over all elements, yielding a scalar.
    pub fn mean(&self, a: TensorId) -> Result<TensorId> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.data.is_empty() {
                return Err(TensorError::Invalid { op: "mean", msg: "empty tensor".into() });
            }
            (na.data.iter().sum::<f64>() / na.data.len() as f64, na.requires_grad)
        };
        Ok(self.push(vec![value], vec![], rg, Op::Mean(a)))
    }

    /// Sum over all elements, yielding a scalar.
    pub fn sum(&self, a: TensorId) -> Result<TensorId> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            (na.data.iter().sum::<f64>(), na.requires_grad)
        };
        Ok(self.push(vec![value], vec![], rg, Op::Sum(a)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` ([N, V]). Log-sum-exp stabilized.
    pub fn cross_entropy(&self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let nl = &nodes[logits];
            if nl.shape.len() != 2 || nl.shape[0] != targets.len() {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("logits {:?} vs {} targets", nl.shape, targets.len()),
                });
            }
            let (n, v) = (nl.shape[0], nl.shape[1]);
            if n == 0 {
                return Err(TensorError::Invalid { op: "cross_entropy", msg: "no rows".into() });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("target {bad} out of range for {v} classes"),
                });
            }
            let mut probs = vec![0.0; n * v];
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &nl.data[r * v..(r + 1) * v];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - m).exp();
                    probs[r * v + j] = e;
                    sum += e;
                }
                for p in &mut probs[r * v..(r + 1) * v] {
                    *p /= sum;
                }
                total += m + sum.ln() - row[t];
            }
            (total / n as f64, probs, nl.requires_grad)
        };
        Ok(self.push(
            vec![value],
            vec![],
            rg,
            Op::CrossEntropy { logits, targets: Rc::new(targets.to_vec()), probs: Rc::new(probs) },
        ))
    }

    /// Elementwise squared difference `(a - b)^2`.
    pub fn squared_error(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("squared_error", a, b, |x, y| (x - y) * (x - y), Op::SquaredError)
    }

    /// Rotary position encoding on a [T, D] tensor (D even): consecutive
    /// pairs are rotated by an angle that depends on the token's position id
    /// and the pair index. The adjoint is the inverse rotation, so gradients
    /// are exact.
    pub fn rope(&self, a: TensorId, positions: &[usize], base: f64) -> Result<TensorId> {
        let half = {
            let nodes = self.nodes.borrow();
            let shape = &nodes[a].shape;
            if shape.len() != 2 {
                return Err(TensorError::Invalid { op: "rope", msg: format!("{shape:?}") });
            }
            shape[1] / 2
        };
        self.rope_scheduled(a, positions, base, half)
    }

    /// Rotary encoding with an explicit frequency schedule: pair `j` turns
    /// by `pos * base^(-j/freq_half)` regardless of the tensor's own width.
    /// Lets a tensor holding only the first heads of a wider projection
    /// rotate in lockstep with that projection.
    pub fn rope_scheduled(
        &self,
        a: TensorId,
        positions: &[usize],
        base: f64,
        freq_half: usize,
    ) -> Result<TensorId> {
        let (data, shape, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a];
            if na.shape.len() != 2
                || na.shape[1] % 2 != 0
                || na.shape[0] != positions.len()
                || freq_half < na.shape[1] / 2
            {
                return Err(TensorError::Invalid {
                    op: "rope",
                    msg: format!(
                        "{:?} with {} positions, schedule half {freq_half}",
                        na.shape,
                        positions.len()
                    ),
                });
            }
            let (t, d) = (na.shape[0], na.shape[1]);
            let mut data = na.data.clone();
            for (r, &pos) in positions.iter().enumerate().take(t) {
                for j in 0..d / 2 {
                    let theta = rope_angle(pos, j, freq_half, base);
                    let (sin, cos) = theta.sin_cos();
                    let i0 = r * d + 2 * j;
                    let (x0, x1) = (data[i0], data[i0 + 1]);
                    data[i0] = x0 * cos - x1 * sin;
                    data[i0 + 1] = x0 * sin + x1 * cos;
                }
            }
            (data, na.shape.clone(), na.requires_grad)
        };
        Ok(self.push(
            data,
            shape,
            rg,
            Op::Rope { src: a, positions: Rc::new(positions.to_vec()), base, freq_half },
        ))
    }
}

/// Accumulate `contribution` into `grads[target]` if that node participates
/// in differentiation.
fn accum(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: TensorId, contribution: &[f64]) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut grads[target] {
        Some(g) => {
            for (gi, &c) in g.iter_mut().zip(contribution) {
                *gi += c;
            }
        }
        None => grads[target] = Some(contribution.to_vec()),
    }
}

/// Run the adjoint of node `id`, scattering into its inputs' gradients.
pub(super) fn backward_step(
    nodes: &[Node],
    id: TensorId,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, g);
            accum(nodes, grads, *b, g);
        }
        Op::AddBroadcast(a, b) => {
            accum(nodes, grads, *a, g);
            if nodes[*b].requires_grad {
                let rlen = nodes[*b].data.len();
                let mut gb = vec![0.0; rlen];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % rlen] += gi;
                }
                accum(nodes, grads, *b, &gb);
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = g.iter().zip(&nodes[*b].data).map(|(&gi, &y)| gi * y).collect();
                accum(nodes, grads, *a, &ga);
            }
            if nodes[*b].requires_grad {
                let gb: Vec<f64> = g.iter().zip(&nodes[*a].data).map(|(&gi, &x)| gi * x).collect();
                accum(nodes, grads, *b, &gb);
            }
        }
        Op::MulBroadcast(a, b) => {
            let rlen = nodes[*b].data.len();
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * nodes[*b].data[i % rlen])
                    .collect();
                accum(nodes, grads, *a, &ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; rlen];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % rlen] += gi * nodes[*a].data[i];
                }
                accum(nodes, grads, *b, &gb);
            }
        }
        Op::Scale(a, s) => {
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                // dA = dC * B^T
                let bt = transpose_raw(&nodes[*b].data, k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                accum(nodes, grads, *a, &ga);
            }
            if nodes[*b].requires_grad {
                // dB = A^T * dC
                let at = transpose_raw(&nodes[*a].data, m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                accum(nodes, grads, *b, &gb);
            }
        }
        Op::Transpose(a) => {
            if nodes[*a].requires_grad {
                let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
                let ga = transpose_raw(g, r, c);
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::Reshape(a) => accum(nodes, grads, *a, g),
        Op::Concat(parts, axis) => {
            let shape = &nodes[id].shape;
            let (outer, total, inner) = split_at_axis(shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let d = nodes[p].shape[*axis];
                if nodes[p].requires_grad {
                    let mut gp = vec![0.0; outer * d * inner];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        gp[o * d * inner..(o + 1) * d * inner]
                            .copy_from_slice(&g[src_start..src_start + d * inner]);
                    }
                    accum(nodes, grads, p, &gp);
                }
                offset += d;
            }
        }
        Op::Slice { src, axis, start, len } => {
            if nodes[*src].requires_grad {
                let (outer, d, inner) = split_at_axis(&nodes[*src].shape, *axis);
                let mut gs = vec![0.0; nodes[*src].data.len()];
                for o in 0..outer {
                    let dst_start = (o * d + start) * inner;
                    gs[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accum(nodes, grads, *src, &gs);
            }
        }
        Op::SoftmaxLast(a) => {
            if nodes[*a].requires_grad {
                let y = &nodes[id].data;
                let last = *nodes[id].shape.last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / last {
                    let (ys, gs) = (&y[r * last..(r + 1) * last], &g[r * last..(r + 1) * last]);
                    let dot: f64 = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..last {
                        ga[r * last + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::RmsNormLast { src, eps } => {
            if nodes[*src].requires_grad {
                let x = &nodes[*src].data;
                let last = *nodes[*src].shape.last().unwrap();
                let n = last as f64;
                let mut ga = vec![0.0; x.len()];
                for r in 0..x.len() / last {
                    let xs = &x[r * last..(r + 1) * last];
                    let gs = &g[r * last..(r + 1) * last];
                    let ms = xs.iter().map(|v| v * v).sum::<f64>() / n;
                    let s = 1.0 / (ms + eps).sqrt();
                    let dot: f64 = xs.iter().zip(gs).map(|(&xi, &gi)| xi * gi).sum();
                    let s3n = s * s * s / n;
                    for j in 0..last {
                        ga[r * last + j] = s * gs[j] - s3n * xs[j] * dot;
                    }
                }
                accum(nodes, grads, *src, &ga);
            }
        }
        Op::Silu(a) => {
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = nodes[*a]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::Exp(a) => {
            if nodes[*a].requires_grad {
                let ga: Vec<f64> =
                    nodes[id].data.iter().zip(g).map(|(&y, &gi)| gi * y).collect();
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::Log(a) => {
            if nodes[*a].requires_grad {
                let ga: Vec<f64> =
                    nodes[*a].data.iter().zip(g).map(|(&x, &gi)| gi / x).collect();
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::EmbedLookup { table, ids } => {
            if nodes[*table].requires_grad {
                let h = nodes[*table].shape[1];
                let mut gt = vec![0.0; nodes[*table].data.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..h {
                        gt[i * h + j] += g[r * h + j];
                    }
                }
                accum(nodes, grads, *table, &gt);
            }
        }
        Op::MaskedFill { src, mask } => {
            if nodes[*src].requires_grad {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gi, &keep)| if keep { gi } else { 0.0 })
                    .collect();
                accum(nodes, grads, *src, &ga);
            }
        }
        Op::Mean(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].data.len() as f64;
                let ga = vec![g[0] / n; nodes[*a].data.len()];
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::Sum(a) => {
            if nodes[*a].requires_grad {
                let ga = vec![g[0]; nodes[*a].data.len()];
                accum(nodes, grads, *a, &ga);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if nodes[*logits].requires_grad {
                let v = nodes[*logits].shape[1];
                let n = targets.len() as f64;
                let mut gl = probs.as_ref().clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= 1.0;
                }
                for x in &mut gl {
                    *x *= g[0] / n;
                }
                accum(nodes, grads, *logits, &gl);
            }
        }
        Op::SquaredError(a, b) => {
            let diff: Vec<f64> = nodes[*a]
                .data
                .iter()
                .zip(&nodes[*b].data)
                .zip(g)
                .map(|((&x, &y), &gi)| 2.0 * (x - y) * gi)
                .collect();
            if nodes[*a].requires_grad {
                accum(nodes, grads, *a, &diff);
            }
            if nodes[*b].requires_grad {
                let neg: Vec<f64> = diff.iter().map(|&d| -d).collect();
                accum(nodes, grads, *b, &neg);
            }
        }
        Op::Rope { src, positions, base, freq_half } => {
            if nodes[*src].requires_grad {
                let d = nodes[id].shape[1];
                let mut ga = g.to_vec();
                for (r, &pos) in positions.iter().enumerate() {
                    for j in 0..d / 2 {
                        let theta = rope_angle(pos, j, *freq_half, *base);
                        let (sin, cos) = theta.sin_cos();
                        let i0 = r * d + 2 * j;
                        let (g0, g1) = (ga[i0], ga[i0 + 1]);
                        // Inverse rotation: transpose of the forward 2x2 block.
                        ga[i0] = g0 * cos + g1 * sin;
                        ga[i0 + 1] = -g0 * sin + g1 * cos;
                    }
                }
                accum(nodes, grads, *src, &ga);
            }
        }
    }
}
