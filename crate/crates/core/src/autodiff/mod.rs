//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node whose parents precede it,
//! so the node list is already a topological order. [`Graph::backward`]
//! walks it once in reverse and returns a gradient per node.
//!
//! ```
//! use gaitlab::autodiff::Graph;
//! use gaitlab::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let y = g.square(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod kernels;
mod lstm;

pub use lstm::{LstmCell, LstmState};

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch norm, used by the caller
/// to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        /// Unfolded input `[C*k*k, N*Ho*Wo]`, kept when the kernel needs a
        /// gradient.
        cols: Option<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows(Var),
    CrossEntropyRows {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` did not need one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{op}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert!(
            parents.iter().all(|p| p.0 < self.nodes.len()),
            "parent must precede child"
        );
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ---- element-wise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o -= y;
        }
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel()));
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x >= T::ZERO { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---- structural ---------------------------------------------------

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::contract(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    /// Columns `start..start + len` of a `[N, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::contract(format!(
                "slice_cols: {start}+{len} outside {d} columns"
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for row in src.chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(&[n, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.matrix_dims(a, "concat_cols")?;
        let (nb, db) = self.matrix_dims(b, "concat_cols")?;
        if na != nb {
            return Err(Error::contract(format!(
                "concat_cols: {na} rows vs {nb} rows"
            )));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (da + db));
        for (ra, rb) in av.chunks(da).zip(bv.chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let out = Tensor::new(&[na, da + db], out)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Leading-axis slice `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if len == 0 || start + len > v.rows() {
            return Err(Error::contract(format!(
                "slice_rows: {start}+{len} outside {} rows",
                v.rows()
            )));
        }
        let rl = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, v.data()[start * rl..(start + len) * rl].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Leading-axis gather; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if index.is_empty() {
            return Err(Error::contract("gather_rows: empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::contract(format!(
                "gather_rows: row {bad} outside {} rows",
                v.rows()
            )));
        }
        let rl = v.row_len();
        let mut out = Vec::with_capacity(index.len() * rl);
        for &i in index {
            out.extend_from_slice(&v.data()[i * rl..(i + 1) * rl]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over the leading axis; result has a leading extent of 1.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let rl = v.row_len();
        let inv = T::ONE / T::from_usize(v.rows());
        let mut acc = vec![T::ZERO; rl];
        for row in v.data().chunks(rl) {
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::new(&shape, acc).expect("mean_rows shape");
        self.push(out, Op::MeanRows(x), &[x])
    }

    // ---- layers -------------------------------------------------------

    /// `x [N, D] · w [D, K] + b [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "linear")?;
        let (dw, k) = self.matrix_dims(w, "linear weight")?;
        if d != dw || self.shape(b) != [k] {
            return Err(Error::contract(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        T::gemm(
            n,
            d,
            k,
            self.value(x).data(),
            (d as isize, 1),
            self.value(w).data(),
            (k as isize, 1),
            &mut out,
            (k as isize, 1),
            T::ONE,
        );
        let out = Tensor::new(&[n, k], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Cross-correlation with zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::contract(format!("conv2d: input {s:?} is not NCHW"))),
        };
        let (f, kc, k) = match *self.shape(w) {
            [f, kc, k1, k2] if k1 == k2 => (f, kc, k1),
            ref s => return Err(Error::contract(format!("conv2d: kernel {s:?} not [F,C,k,k]"))),
        };
        if kc != c {
            return Err(Error::contract(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if self.shape(b) != [f] {
            return Err(Error::contract(format!("conv2d: bias {:?}", self.shape(b))));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::contract(format!("conv2d: kernel {k} stride {stride} on {h}x{wd}")))?;
        let (pl, pos) = (geom.patch_len(), geom.out_positions());
        let np = n * pos;
        let kernel = self.value(w).data();
        let input = self.value(x).data();
        // One GEMM over the whole batch: cols [pl, n*pos], out [f, n*pos].
        let mut cols = vec![T::ZERO; pl * np];
        for s in 0..n {
            kernels::im2col(&geom, &input[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols[s * pos..], np);
        }
        let mut cm = vec![T::ZERO; f * np];
        T::gemm(f, pl, np, kernel, (pl as isize, 1), &cols, (np as isize, 1), &mut cm, (np as isize, 1), T::ZERO);
        let bias = self.value(b).data();
        let mut out = vec![T::ZERO; n * f * pos];
        for block in out.chunks_mut(f * pos) {
            for (fi, chunk) in block.chunks_mut(pos).enumerate() {
                chunk.fill(bias[fi]);
            }
        }
        kernels::add_from_channel_major(&cm, &mut out, n, f, pos);
        let cols = self.wants(w).then_some(cols);
        let out = Tensor::new(&[n, f, geom.out_height, geom.out_width], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// `stride`/`pad`. `out_pad` extra rows/columns at the bottom/right pick
    /// which of the possible output sizes is produced.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (n, f, h, wd) = match *self.shape(x) {
            [n, f, h, w] => (n, f, h, w),
            ref s => return Err(Error::contract(format!("conv2d_transpose: input {s:?} is not NCHW"))),
        };
        let (kf, c, k) = match *self.shape(w) {
            [kf, c, k1, k2] if k1 == k2 => (kf, c, k1),
            ref s => {
                return Err(Error::contract(format!(
                    "conv2d_transpose: kernel {s:?} not [F,C,k,k]"
                )))
            }
        };
        if kf != f {
            return Err(Error::contract(format!(
                "conv2d_transpose: input has {f} channels, kernel expects {kf}"
            )));
        }
        if self.shape(b) != [c] {
            return Err(Error::contract(format!(
                "conv2d_transpose: bias {:?}",
                self.shape(b)
            )));
        }
        if stride == 0 || out_pad >= stride {
            return Err(Error::contract("conv2d_transpose: out_pad must be < stride"));
        }
        let big = |small: usize| ((small - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (ho, wo) = match (big(h), big(wd)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::contract("conv2d_transpose: empty output")),
        };
        let geom = ConvGeom::new(c, ho, wo, k, stride, pad)
            .filter(|g| g.out_height == h && g.out_width == wd)
            .ok_or_else(|| Error::contract("conv2d_transpose: inconsistent geometry"))?;
        let (pl, pos) = (geom.patch_len(), geom.out_positions());
        let np = n * pos;
        let kernel = self.value(w).data();
        let bias = self.value(b).data();
        let xcm = kernels::to_channel_major(self.value(x).data(), n, f, pos);
        // cols [pl, n*pos] = W^T [pl, f] · x [f, n*pos]
        let mut cols = vec![T::ZERO; pl * np];
        T::gemm(pl, f, np, kernel, (1, pl as isize), &xcm, (np as isize, 1), &mut cols, (np as isize, 1), T::ZERO);
        let mut out = vec![T::ZERO; n * geom.in_len()];
        let plane = ho * wo;
        for (s, dst) in out.chunks_mut(geom.in_len()).enumerate() {
            for (ci, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias[ci]);
            }
            kernels::col2im(&geom, &cols[s * pos..], dst, np);
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b]))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::contract(format!("batch_norm: input {shape:?} needs [N, C, ...]")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial = shape[2..].iter().product::<usize>();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::contract(format!(
                "batch_norm: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((n, c, spatial))
    }

    /// Train-mode batch norm over the batch and spatial axes.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, sp) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let input = self.value(x).data();
        let count = T::from_usize(n * sp);
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for s in 0..n {
            for ch in 0..c {
                let block = &input[(s * c + ch) * sp..(s * c + ch + 1) * sp];
                mean[ch] += block.iter().copied().sum::<T>();
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for s in 0..n {
            for ch in 0..c {
                let block = &input[(s * c + ch) * sp..(s * c + ch + 1) * sp];
                var[ch] += block.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v / count + eps).sqrt()).collect();
        let unbiased: Vec<T> = var.iter().map(|&v| v / (count - T::ONE)).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; input.len()];
        let mut out = vec![T::ZERO; input.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * sp..(s * c + ch + 1) * sp;
                for i in r {
                    let xh = (input[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&shape, out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, sp) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::contract("batch_norm: running stats length"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let input = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; input.len()];
        let mut out = vec![T::ZERO; input.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in (s * c + ch) * sp..(s * c + ch + 1) * sp {
                    let xh = (input[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-row `-log softmax(logits)[label]`, shape `[N]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::contract(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} outside {k} classes"
            )));
        }
        let raw = self.value(logits).data();
        let mut probs = raw.to_vec();
        kernels::softmax_rows(&mut probs, k);
        let mut out = Vec::with_capacity(n);
        for (row, &l) in raw.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.push(lse - row[l]);
        }
        let out = Tensor::new(&[n], out)?;
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch mean of [`Graph::cross_entropy_rows`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, labels)?;
        Ok(self.mean(rows))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Each node is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(go).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(go).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gout.map(|g| g * *c)),
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = T::from_f64(2.0);
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(go).zip(av) {
                        *d += two * g * x;
                    }
                });
            }
            Op::Sum(a) => {
                let g = go[0];
                self.accumulate_with(grads, *a, |d| d.iter_mut().for_each(|d| *d += g));
            }
            Op::Mean(a) => {
                let g = go[0] / T::from_usize(self.value(*a).numel());
                self.accumulate_with(grads, *a, |d| d.iter_mut().for_each(|d| *d += g));
            }
            Op::Reshape(a) => {
                let g = gout.clone().reshape(self.shape(*a)).expect("reshape grad");
                self.accumulate(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(go).zip(av) {
                        *d += if x >= T::ZERO { g } else { g * *slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(go).zip(yv) {
                        *d += g * y * (T::ONE - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(go).zip(yv) {
                        *d += g * (T::ONE - y * y);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                // dx = g · W^T
                self.accumulate_with(grads, *x, |dx| {
                    T::gemm(n, k, d, go, (k as isize, 1), wv, (1, k as isize), dx, (d as isize, 1), T::ONE);
                });
                // dW = x^T · g
                self.accumulate_with(grads, *w, |dw| {
                    T::gemm(d, n, k, xv, (1, d as isize), go, (k as isize, 1), dw, (k as isize, 1), T::ONE);
                });
                self.accumulate_with(grads, *b, |db| {
                    for row in go.chunks(k) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => self.conv_backward(*x, *w, *b, geom, cols.as_deref(), go, grads),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose_backward(*x, *w, *b, geom, go, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![T::ZERO; c];
                let mut sum_dy_xhat = vec![T::ZERO; c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * sp..(s * c + ch + 1) * sp {
                            sum_dy[ch] += go[i];
                            sum_dy_xhat[ch] += go[i] * xhat[i];
                        }
                    }
                }
                self.accumulate_with(grads, *gamma, |d| {
                    for (d, &v) in d.iter_mut().zip(&sum_dy_xhat) {
                        *d += v;
                    }
                });
                self.accumulate_with(grads, *beta, |d| {
                    for (d, &v) in d.iter_mut().zip(&sum_dy) {
                        *d += v;
                    }
                });
                let count = T::from_usize(n * sp);
                self.accumulate_with(grads, *x, |dx| {
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for i in (s * c + ch) * sp..(s * c + ch + 1) * sp {
                                dx[i] += if *train {
                                    scale
                                        * (go[i]
                                            - sum_dy[ch] / count
                                            - xhat[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * go[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let len = node.value.shape()[1];
                self.accumulate_with(grads, *x, |dx| {
                    for (drow, grow) in dx.chunks_mut(d).zip(go.chunks(len)) {
                        for (a, &g) in drow[*start..*start + len].iter_mut().zip(grow) {
                            *a += g;
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let da = self.shape(*a)[1];
                let db = self.shape(*b)[1];
                self.accumulate_with(grads, *a, |d| {
                    for (drow, grow) in d.chunks_mut(da).zip(go.chunks(da + db)) {
                        for (x, &g) in drow.iter_mut().zip(&grow[..da]) {
                            *x += g;
                        }
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for (drow, grow) in d.chunks_mut(db).zip(go.chunks(da + db)) {
                        for (x, &g) in drow.iter_mut().zip(&grow[da..]) {
                            *x += g;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let rl = self.value(*x).row_len();
                self.accumulate_with(grads, *x, |dx| {
                    for (a, &g) in dx[start * rl..start * rl + go.len()].iter_mut().zip(go) {
                        *a += g;
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let rl = self.value(*x).row_len();
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, grow) in index.iter().zip(go.chunks(rl)) {
                        for (a, &g) in dx[i * rl..(i + 1) * rl].iter_mut().zip(grow) {
                            *a += g;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let inv = T::ONE / T::from_usize(self.value(*x).rows());
                self.accumulate_with(grads, *x, |dx| {
                    for drow in dx.chunks_mut(go.len()) {
                        for (a, &g) in drow.iter_mut().zip(go) {
                            *a += g * inv;
                        }
                    }
                });
            }
            Op::CrossEntropyRows {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                self.accumulate_with(grads, *logits, |d| {
                    for (r, ((drow, prow), &l)) in
                        d.chunks_mut(k).zip(probs.chunks(k)).zip(labels).enumerate()
                    {
                        for (j, (a, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == l { T::ONE } else { T::ZERO };
                            *a += go[r] * (p - target);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        cols: Option<&[T]>,
        go: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let n = self.shape(x)[0];
        let f = self.shape(w)[0];
        let (pl, pos) = (geom.patch_len(), geom.out_positions());
        let np = n * pos;
        let wv = self.value(w).data();
        let gcm = kernels::to_channel_major(go, n, f, pos);
        self.accumulate_with(grads, b, |db| {
            for (d, row) in db.iter_mut().zip(gcm.chunks(np)) {
                *d += row.iter().copied().sum::<T>();
            }
        });
        if let Some(cols) = cols {
            // dW [f, pl] += g [f, n*pos] · cols^T [n*pos, pl]
            self.accumulate_with(grads, w, |dw| {
                T::gemm(f, np, pl, &gcm, (np as isize, 1), cols, (1, np as isize), dw, (pl as isize, 1), T::ONE);
            });
        }
        if self.wants(x) {
            // dcols [pl, n*pos] = W^T [pl, f] · g [f, n*pos]
            let mut dcols = vec![T::ZERO; pl * np];
            T::gemm(pl, f, np, wv, (1, pl as isize), &gcm, (np as isize, 1), &mut dcols, (np as isize, 1), T::ZERO);
            self.accumulate_with(grads, x, |dx| {
                for (s, dst) in dx.chunks_mut(geom.in_len()).enumerate() {
                    kernels::col2im(geom, &dcols[s * pos..], dst, np);
                }
            });
        }
    }

    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        go: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let n = self.shape(x)[0];
        let f = self.shape(x)[1];
        let c = geom.channels;
        let (pl, pos) = (geom.patch_len(), geom.out_positions());
        let np = n * pos;
        let plane = geom.height * geom.width;
        let wv = self.value(w).data();
        self.accumulate_with(grads, b, |db| {
            for block in go.chunks(geom.in_len()) {
                for (ci, chunk) in block.chunks(plane).enumerate().take(c) {
                    db[ci] += chunk.iter().copied().sum::<T>();
                }
            }
        });
        if !self.wants(x) && !self.wants(w) {
            return;
        }
        // Unfold the output gradient once; both dx and dW consume it.
        let mut cols = vec![T::ZERO; pl * np];
        for (s, block) in go.chunks(geom.in_len()).enumerate() {
            kernels::im2col(geom, block, &mut cols[s * pos..], np);
        }
        self.accumulate_with(grads, x, |dx| {
            // dx [f, n*pos] = W [f, pl] · cols [pl, n*pos]
            let mut dcm = vec![T::ZERO; f * np];
            T::gemm(f, pl, np, wv, (pl as isize, 1), &cols, (np as isize, 1), &mut dcm, (np as isize, 1), T::ZERO);
            kernels::add_from_channel_major(&dcm, dx, n, f, pos);
        });
        if self.wants(w) {
            let xcm = kernels::to_channel_major(self.value(x).data(), n, f, pos);
            self.accumulate_with(grads, w, |dw| {
                // dW [f, pl] += x [f, n*pos] · cols^T [n*pos, pl]
                T::gemm(f, np, pl, &xcm, (np as isize, 1), &cols, (1, np as isize), dw, (pl as isize, 1), T::ONE);
            });
        }
    }
}

#[cfg(test)]
mod tests;
