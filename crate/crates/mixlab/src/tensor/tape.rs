// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<E: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, E),
    /// Broadcast-add a shape-[1] tensor to every element.
    AddScalar(TensorId, TensorId),
    /// Add a constant buffer (no gradient to the buffer).
    AddBuf(TensorId),
    /// Elementwise multiply by a constant buffer.
    MulBuf(TensorId, Vec<E>),
    Matmul {
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows {
        a: TensorId,
        causal: bool,
    },
    Sigmoid(TensorId),
    /// Numerically stable log-sigmoid.
    LnSigmoid(TensorId),
    Silu(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    RmsNorm {
        x: TensorId,
        gain: TensorId,
        inv_rms: Vec<E>,
    },
    Embed {
        table: TensorId,
        ids: Vec<usize>,
    },
    CrossEntropyMean {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<E>,
    },
    Sum(TensorId),
    /// vector v (len T) -> matrix M[i][j] = v[i] - v[j].
    OuterDiff(TensorId),
}

struct Node<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Wengert tape. One tape records one forward pass; [`Tape::backward`] may
/// then be called once, after which gradients are readable via
/// [`Tape::grad`]. Reuse policy: tapes are single-use — build a fresh tape
/// per forward pass and extract gradients before dropping it.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Vec<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major 2-D strides for a (possibly transposed) view of `(r, c)`.
fn view_strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if the node did
    /// not require a gradient or was unreachable from the loss.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(id.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "leaf: shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if numel(self.shape(b)) != 1 {
            return Err(Error::Shape(format!(
                "add_scalar: rhs must have one element, got {:?}",
                self.shape(b)
            )));
        }
        let s = self.data(b)[0];
        let data: Vec<E> = self.data(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::AddScalar(a, b)))
    }

    pub fn add_buf(&mut self, a: TensorId, buf: Vec<E>) -> Result<TensorId> {
        if buf.len() != self.data(a).len() {
            return Err(Error::Shape("add_buf: buffer length mismatch".into()));
        }
        let data: Vec<E> = self.data(a).iter().zip(&buf).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::AddBuf(a)))
    }

    pub fn mul_buf(&mut self, a: TensorId, buf: Vec<E>) -> Result<TensorId> {
        if buf.len() != self.data(a).len() {
            return Err(Error::Shape("mul_buf: buffer length mismatch".into()));
        }
        let data: Vec<E> = self.data(a).iter().zip(&buf).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::MulBuf(a, buf)))
    }

    /// `op_a(a) · op_b(b)` where `ta`/`tb` select a transposed view.
    pub fn matmul(&mut self, a: TensorId, b: TensorId, ta: bool, tb: bool) -> Result<TensorId> {
        let (ar, ac) = self.dims2(a, "matmul lhs")?;
        let (br, bc) = self.dims2(b, "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {kb} (lhs {:?} ta={ta}, rhs {:?} tb={tb})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![E::ZERO; m * n];
        let (rsa, csa) = view_strides(ac, ta);
        let (rsb, csb) = view_strides(bc, tb);
        unsafe {
            E::gemm(
                m,
                k,
                n,
                E::ONE,
                self.data(a).as_ptr(),
                rsa,
                csa,
                self.data(b).as_ptr(),
                rsb,
                csb,
                E::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b, ta, tb }))
    }

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((*n, 1)),
            _ => Err(Error::Shape(format!("{what}: expected 2-D, got {s:?}"))),
        }
    }

    /// Row-wise softmax, numerically stabilized by row-max subtraction.
    /// With `causal`, entries above the diagonal are excluded (exact zeros).
    pub fn softmax_rows(&mut self, a: TensorId, causal: bool) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let out = softmax_rows(self.data(a), r, c, causal)?;
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], out, rg, Op::SoftmaxRows { a, causal }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| E::ONE / (E::ONE + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Sigmoid(a)))
    }

    /// `ln(sigmoid(x))` computed as `min(x,0) - ln(1+exp(-|x|))`; finite for
    /// all finite inputs, which keeps log-space gate cumsums well defined.
    pub fn ln_sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|&x| ln_sigmoid_stable(x)).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::LnSigmoid(a)))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| x / (E::ONE + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Silu(a)))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Exp(a)))
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Ln(a)))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "rms_norm input")?;
        if self.shape(gain) != [c] {
            return Err(Error::Shape(format!(
                "rms_norm: gain {:?} vs {c} columns",
                self.shape(gain)
            )));
        }
        let eps = E::from_f64(1e-6);
        let mut out = vec![E::ZERO; r * c];
        let mut inv_rms = vec![E::ZERO; r];
        {
            let xd = self.data(x);
            let g = self.data(gain);
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let ms: E = row.iter().map(|&v| v * v).sum();
                let inv = E::ONE / (ms / E::from_f64(c as f64) + eps).sqrt();
                inv_rms[i] = inv;
                for j in 0..c {
                    out[i * c + j] = row[j] * inv * g[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(vec![r, c], out, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Gather rows of `table` by id. Also used for learned positional
    /// embeddings (ids = 0..T).
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.dims2(table, "embed table")?;
        for &id in ids {
            if id >= v {
                return Err(Error::Invalid(format!("embed: id {id} out of range {v}")));
            }
        }
        let t = ids.len();
        let mut out = vec![E::ZERO; t * d];
        {
            let tab = self.data(table);
            for (i, &id) in ids.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&tab[id * d..(id + 1) * d]);
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![t, d],
            out,
            rg,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean next-token cross-entropy over all positions.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (t, v) = self.dims2(logits, "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "cross_entropy: {t} rows vs {} targets",
                targets.len()
            )));
        }
        for &y in targets {
            if y >= v {
                return Err(Error::Invalid(format!("cross_entropy: target {y} out of range {v}")));
            }
        }
        let probs = softmax_rows(self.data(logits), t, v, false)?;
        let mut loss = E::ZERO;
        for (i, &y) in targets.iter().enumerate() {
            loss -= probs[i * v + y].ln();
        }
        loss = loss / E::from_f64(t as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: E = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![s], rg, Op::Sum(a)))
    }

    /// `M[i][j] = v[i] - v[j]` for a length-T vector.
    pub fn outer_diff(&mut self, a: TensorId) -> Result<TensorId> {
        let (t, c) = self.dims2(a, "outer_diff")?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "outer_diff: expected a vector, got {:?}",
                self.shape(a)
            )));
        }
        let v = self.data(a);
        let mut out = vec![E::ZERO; t * t];
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = v[i] - v[j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![t, t], out, rg, Op::OuterDiff(a)))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// requires-grad node reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<E>> = vec![Vec::new(); n];
        grads[loss.0] = vec![E::ONE];

        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            // Take the output grad to avoid aliasing with input grads.
            let g = std::mem::take(&mut grads[i]);
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn ensure<'a>(grads: &'a mut [Vec<E>], id: TensorId, len: usize) -> &'a mut [E] {
        if grads[id.0].is_empty() {
            grads[id.0] = vec![E::ZERO; len];
        }
        &mut grads[id.0]
    }

    fn accumulate_inputs(&self, i: usize, g: &[E], grads: &mut [Vec<E>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(*b) {
                    let gb = Self::ensure(grads, *b, g.len());
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(*b) {
                    let gb = Self::ensure(grads, *b, g.len());
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = &self.nodes[b.0].data;
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += y * bv;
                    }
                }
                if self.rg(*b) {
                    let ad = &self.nodes[a.0].data;
                    let gb = Self::ensure(grads, *b, g.len());
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += y * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *c;
                    }
                }
            }
            Op::AddScalar(a, b) => {
                if self.rg(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(*b) {
                    let total: E = g.iter().copied().sum();
                    let gb = Self::ensure(grads, *b, 1);
                    gb[0] += total;
                }
            }
            Op::AddBuf(a) => {
                if self.rg(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::MulBuf(a, buf) => {
                if self.rg(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &y), &m) in ga.iter_mut().zip(g).zip(buf) {
                        *x += y * m;
                    }
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                self.backward_matmul(*a, *b, *ta, *tb, &node.shape, g, grads);
            }
            Op::SoftmaxRows { a, causal } => {
                if self.rg(*a) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let y = &node.data;
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..r {
                        let limit = if *causal { (i + 1).min(c) } else { c };
                        let mut dot = E::ZERO;
                        for j in 0..limit {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for j in 0..limit {
                            ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = &node.data;
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &dy), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += dy * yv * (E::ONE - yv);
                    }
                }
            }
            Op::LnSigmoid(a) => {
                if self.rg(*a) {
                    let ad = &self.nodes[a.0].data;
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &dy), &av) in ga.iter_mut().zip(g).zip(ad) {
                        // d/dx ln(sigmoid(x)) = sigmoid(-x)
                        *x += dy / (E::ONE + av.exp());
                    }
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let ad = &self.nodes[a.0].data;
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &dy), &av) in ga.iter_mut().zip(g).zip(ad) {
                        let s = E::ONE / (E::ONE + (-av).exp());
                        *x += dy * s * (E::ONE + av * (E::ONE - s));
                    }
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let y = &node.data;
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &dy), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += dy * yv;
                    }
                }
            }
            Op::Ln(a) => {
                if self.rg(*a) {
                    let ad = &self.nodes[a.0].data;
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((x, &dy), &av) in ga.iter_mut().zip(g).zip(ad) {
                        *x += dy / av;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gain.0].data;
                if self.rg(*gain) {
                    let gg = Self::ensure(grads, *gain, c);
                    for i in 0..r {
                        let inv = inv_rms[i];
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xd[i * c + j] * inv;
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = Self::ensure(grads, *x, r * c);
                    let nn = E::from_f64(c as f64);
                    for i in 0..r {
                        let inv = inv_rms[i];
                        let mut dot = E::ZERO;
                        for j in 0..c {
                            dot += g[i * c + j] * gd[j] * xd[i * c + j];
                        }
                        let coef = dot * inv * inv * inv / nn;
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] * gd[j] * inv - xd[i * c + j] * coef;
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if self.rg(*table) {
                    let d = node.shape[1];
                    let len = self.nodes[table.0].data.len();
                    let gt = Self::ensure(grads, *table, len);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let t = targets.len();
                    let v = probs.len() / t;
                    let scale = g[0] / E::from_f64(t as f64);
                    let gl = Self::ensure(grads, *logits, t * v);
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..v {
                            let delta = if j == y { E::ONE } else { E::ZERO };
                            gl[i * v + j] += scale * (probs[i * v + j] - delta);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let len = self.nodes[a.0].data.len();
                    let ga = Self::ensure(grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::OuterDiff(a) => {
                if self.rg(*a) {
                    let t = node.shape[0];
                    let ga = Self::ensure(grads, *a, t);
                    for i in 0..t {
                        for j in 0..t {
                            ga[i] += g[i * t + j];
                            ga[j] -= g[i * t + j];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_matmul(
        &self,
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
        out_shape: &[usize],
        g: &[E],
        grads: &mut [Vec<E>],
    ) {
        let (m, n) = (out_shape[0], out_shape[1]);
        let a_shape = self.nodes[a.0].shape.clone();
        let b_shape = self.nodes[b.0].shape.clone();
        let (ar, ac) = two(&a_shape);
        let (br, bc) = two(&b_shape);
        let k = if ta { ar } else { ac };

        if self.rg(a) {
            let ga = Self::ensure(grads, a, ar * ac);
            let bd = &self.nodes[b.0].data;
            if !ta {
                // dA(m,k) += dC(m,n) · B'^T(n,k)
                let (rsb, csb) = view_strides(bc, !tb);
                unsafe {
                    E::gemm(
                        m, n, k,
                        E::ONE,
                        g.as_ptr(), n as isize, 1,
                        bd.as_ptr(), rsb, csb,
                        E::ONE,
                        ga.as_mut_ptr(), ac as isize, 1,
                    );
                }
            } else {
                // A stored as (k,m): dA(k,m) += B'(k,n) · dC^T(n,m)
                let (rsb, csb) = view_strides(bc, tb);
                unsafe {
                    E::gemm(
                        k, n, m,
                        E::ONE,
                        bd.as_ptr(), rsb, csb,
                        g.as_ptr(), 1, n as isize,
                        E::ONE,
                        ga.as_mut_ptr(), ac as isize, 1,
                    );
                }
            }
        }
        if self.rg(b) {
            let gb = Self::ensure(grads, b, br * bc);
            let ad = &self.nodes[a.0].data;
            if !tb {
                // dB(k,n) += A'^T(k,m) · dC(m,n)
                let (rsa, csa) = view_strides(ac, !ta);
                unsafe {
                    E::gemm(
                        k, m, n,
                        E::ONE,
                        ad.as_ptr(), rsa, csa,
                        g.as_ptr(), n as isize, 1,
                        E::ONE,
                        gb.as_mut_ptr(), bc as isize, 1,
                    );
                }
            } else {
                // B stored as (n,k): dB(n,k) += dC^T(n,m) · A'(m,k)
                let (rsa, csa) = view_strides(ac, ta);
                unsafe {
                    E::gemm(
                        n, m, k,
                        E::ONE,
                        g.as_ptr(), 1, n as isize,
                        ad.as_ptr(), rsa, csa,
                        E::ONE,
                        gb.as_mut_ptr(), bc as isize, 1,
                    );
                }
            }
        }
    }
}

/// Stable `ln(sigmoid(x)) = min(x, 0) - ln(1 + exp(-|x|))`.
pub(crate) fn ln_sigmoid_stable<E: Scalar>(x: E) -> E {
    let zero = E::ZERO;
    let neg_abs = if x > zero { -x } else { x };
    let base = if x > zero { zero } else { x };
    base - (E::ONE + neg_abs.exp()).ln()
}

fn two(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [n] => (*n, 1),
        _ => unreachable!("matmul operands validated 2-D"),
    }
}

/// Standalone row-wise softmax over a row-major `rows × cols` buffer.
/// Stabilized by row-max subtraction; with `causal`, entries above the
/// diagonal are excluded from normalization and come back as exact zeros.
pub fn softmax_rows<E: Scalar>(data: &[E], rows: usize, cols: usize, causal: bool) -> Result<Vec<E>> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "softmax_rows: buffer {} vs {rows}x{cols}",
            data.len()
        )));
    }
    let mut out = vec![E::ZERO; rows * cols];
    for i in 0..rows {
        let limit = if causal { (i + 1).min(cols) } else { cols };
        if limit == 0 {
            return Err(Error::Invalid(format!("softmax_rows: row {i} empty after masking")));
        }
        let row = &data[i * cols..i * cols + limit];
        let mut mx = row[0];
        for &v in row {
            if !v.is_finite() {
                return Err(Error::NonFinite("softmax_rows"));
            }
            mx = mx.maximum(v);
        }
        let mut denom = E::ZERO;
        for j in 0..limit {
            let e = (row[j] - mx).exp();
            out[i * cols + j] = e;
            denom += e;
        }
        for j in 0..limit {
            out[i * cols + j] = out[i * cols + j] / denom;
        }
    }
    Ok(out)
}
