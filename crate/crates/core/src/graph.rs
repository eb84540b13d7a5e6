//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Each operation evaluates eagerly and records enough to run the backward
//! pass. Graphs are short-lived: a training step builds a tape, calls
//! [`Tape::backward`], harvests parameter gradients and drops the tape.
//! Everything is single-threaded and iteration order is fixed, so a given
//! seed reproduces training bit-for-bit.
//!
//! The op set is the minimum needed here: dense affine layers, 3×3
//! convolutions, pooling, row normalization, log-softmax and the clipped
//! perturbation application. Softmax-style ops are log-sum-exp stabilized and
//! tolerate logits up to ±1e4 and beyond.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Elementwise multiply by a one-element tensor node (trainable scalar).
    MulScalarVar(Var, Var),
    Exp(Var),
    Tanh(Var),
    MatMul(Var, Var),
    /// `a @ b.T` without materializing the transpose.
    MatMulNT(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool2 {
        x: Var,
        k: usize,
    },
    MeanHW(Var),
    MeanAxis0(Var),
    MeanAll(Var),
    SumAll(Var),
    Reshape(Var),
    NormalizeRows(Var),
    LogSoftmaxRows(Var),
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    RowNorms(Var),
    ClipApply {
        gen: Var,
        clean: Tensor,
        sigma: f64,
    },
}

pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.vals.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.vals.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input; [`Tape::grad`] is available after `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|x| c * x).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|x| c + x).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.vals[s.0].numel(),
            1,
            "mul_scalar_var: scalar node expected"
        );
        let c = self.vals[s.0].item();
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|x| c * x).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a) || self.needs(s);
        self.push(t, Op::MulScalarVar(a, s), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|&x| math::exp(x)).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::Exp(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|&x| libm::tanh(x)).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::Tanh(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::Relu(a), needs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape().len(), 2);
        assert_eq!(tb.shape().len(), 2);
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, m) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let t = matmul_raw(ta.data(), tb.data(), n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[n, m], t), Op::MatMul(a, b), needs)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape().len(), 2);
        assert_eq!(tb.shape().len(), 2);
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let (m, k2) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &ta.data()[i * k..(i + 1) * k];
            for j in 0..m {
                let br = &tb.data()[j * k..(j + 1) * k];
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMulNT(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.shape().len(), 2);
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = ta.data()[i * m + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&[m, n], out), Op::Transpose(a), needs)
    }

    /// Broadcast-add a length-M vector to every row of an N×M matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape().len(), 2);
        let m = ta.shape()[1];
        assert_eq!(tb.numel(), m, "add_row: width mismatch");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::AddRow(a, b), needs)
    }

    // ---- convolution and pooling ----

    #[allow(clippy::needless_range_loop)] // index loops mirror the kernel math
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw, tb) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        assert_eq!(tx.shape().len(), 4, "conv2d expects N,C,H,W input");
        assert_eq!(tw.shape().len(), 4, "conv2d expects O,C,kh,kw weight");
        let (n, c, h, wid) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, c2, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        assert_eq!(c, c2, "conv2d: channel mismatch");
        assert_eq!(tb.numel(), o, "conv2d: bias length");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        let xd = tx.data();
        let wd = tw.data();
        let bd = tb.data();
        for ni in 0..n {
            for oi in 0..o {
                let base_o = ((ni * o) + oi) * oh * ow;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = bd[oi];
                        for ci in 0..c {
                            let base_x = ((ni * c) + ci) * h * wid;
                            let base_w = ((oi * c) + ci) * kh * kw;
                            for khi in 0..kh {
                                let ih = (ohi * stride + khi) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let row_x = base_x + ih as usize * wid;
                                let row_w = base_w + khi * kw;
                                for kwi in 0..kw {
                                    let iw = (owi * stride + kwi) as isize - pad as isize;
                                    if iw < 0 || iw >= wid as isize {
                                        continue;
                                    }
                                    acc += xd[row_x + iw as usize] * wd[row_w + kwi];
                                }
                            }
                        }
                        out[base_o + ohi * ow + owi] = acc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[n, o, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn avg_pool2(&mut self, x: Var, k: usize) -> Var {
        let tx = &self.vals[x.0];
        assert_eq!(tx.shape().len(), 4);
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        assert!(h % k == 0 && w % k == 0, "avg_pool2: size not divisible");
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for nc in 0..n * c {
            let src = &tx.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0;
                    for dh in 0..k {
                        for dw in 0..k {
                            acc += src[(ohi * k + dh) * w + owi * k + dw];
                        }
                    }
                    dst[ohi * ow + owi] = acc * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::AvgPool2 { x, k },
            needs,
        )
    }

    /// Global average over the spatial dims: N,C,H,W → N,C.
    #[allow(clippy::needless_range_loop)]
    pub fn mean_hw(&mut self, x: Var) -> Var {
        let tx = &self.vals[x.0];
        assert_eq!(tx.shape().len(), 4);
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for nc in 0..n * c {
            out[nc] = tx.data()[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() * inv;
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c], out), Op::MeanHW(x), needs)
    }

    // ---- reductions and reshapes ----

    /// Column means of an S×D matrix: S,D → D.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.shape().len(), 2);
        let (s, d) = (ta.shape()[0], ta.shape()[1]);
        let inv = 1.0 / s as f64;
        let mut out = vec![0.0; d];
        for row in ta.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&[d], out), Op::MeanAxis0(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let v = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::MeanAll(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let v = ta.data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::SumAll(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.vals[a.0].clone().reshape(shape);
        let needs = self.needs(a);
        self.push(t, Op::Reshape(a), needs)
    }

    /// L2-normalize each row. Rows with near-zero norm are left scaled by
    /// 1/eps rather than dividing by zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.shape().len(), 2);
        let d = ta.shape()[1];
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            let norm = math::sqrt(row.iter().map(|v| v * v).sum()).max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::NormalizeRows(a), needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.shape().len(), 2);
        let m = ta.shape()[1];
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a);
        self.push(t, Op::LogSoftmaxRows(a), needs)
    }

    /// out[i] = a[i, idx[i]].
    pub fn pick_per_row(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.shape().len(), 2);
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        assert_eq!(idx.len(), n, "pick_per_row: index count");
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < m, "pick_per_row: index {j} out of range {m}");
                ta.data()[i * m + j]
            })
            .collect();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(&[n], out),
            Op::PickPerRow { x: a, idx },
            needs,
        )
    }

    /// Vertically concatenate 2-d blocks of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.vals[parts[0].0].shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.vals[p.0];
            assert_eq!(tp.shape().len(), 2);
            assert_eq!(tp.shape()[1], cols, "concat_rows: width mismatch");
            rows += tp.shape()[0];
            data.extend_from_slice(tp.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(&[rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    /// Embedding lookup: rows of `table` selected by token index.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let tt = &self.vals[table.0];
        assert_eq!(tt.shape().len(), 2);
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < v, "gather_rows: row {i} out of range {v}");
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let n = idx.len();
        let needs = self.needs(table);
        self.push(
            Tensor::from_vec(&[n, d], data),
            Op::GatherRows { table, idx },
            needs,
        )
    }

    /// Per-row euclidean norms of an N×D matrix.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.shape().len(), 2);
        let d = ta.shape()[1];
        let out: Vec<f64> = ta
            .data()
            .chunks(d)
            .map(|row| math::sqrt(row.iter().map(|v| v * v).sum()))
            .collect();
        let needs = self.needs(a);
        let n = out.len();
        self.push(Tensor::from_vec(&[n], out), Op::RowNorms(a), needs)
    }

    /// Project the generator output into the σ-ball around `clean`, then clamp
    /// to the valid pixel range: `clamp(min(x+σ, max(g, x−σ)), 0, 1)`.
    /// `clean` is a constant; gradients flow to `gen` with the usual clamp
    /// subgradient (zero outside the active region).
    pub fn clip_apply(&mut self, gen: Var, clean: &Tensor, sigma: f64) -> Var {
        let tg = &self.vals[gen.0];
        assert_eq!(tg.shape(), clean.shape(), "clip_apply: shape mismatch");
        let data: Vec<f64> = tg
            .data()
            .iter()
            .zip(clean.data())
            .map(|(&g, &x)| (x + sigma).min(g.max(x - sigma)).clamp(0.0, 1.0))
            .collect();
        let t = Tensor::from_vec(tg.shape(), data);
        let needs = self.needs(gen);
        self.push(
            t,
            Op::ClipApply {
                gen,
                clean: clean.clone(),
                sigma,
            },
            needs,
        )
    }

    // ---- backward ----

    /// Backpropagate from a scalar node. Gradients of all `param` nodes on
    /// the path become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.vals[loss.0].numel(),
            1,
            "backward: loss must be scalar"
        );
        let n = self.vals.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    #[allow(clippy::needless_range_loop)] // index loops mirror the kernel math
    fn accumulate_parents(&self, node: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_scaled(&contrib, 1.0),
            slot @ None => *slot = Some(contrib),
        };
        match &self.ops[node] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let mut neg = g.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    add_to(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = &self.vals[b.0];
                    let data = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    add_to(grads, *a, Tensor::from_vec(g.shape(), data));
                }
                if self.needs(*b) {
                    let ta = &self.vals[a.0];
                    let data = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_to(grads, *b, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let data = g.data().iter().map(|x| c * x).collect();
                    add_to(grads, *a, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
            }
            Op::MulScalarVar(a, s) => {
                let c = self.vals[s.0].item();
                if self.needs(*a) {
                    let data = g.data().iter().map(|x| c * x).collect();
                    add_to(grads, *a, Tensor::from_vec(g.shape(), data));
                }
                if self.needs(*s) {
                    let ta = &self.vals[a.0];
                    let dot: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    add_to(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let y = &self.vals[node];
                    let data = g.data().iter().zip(y.data()).map(|(x, y)| x * y).collect();
                    add_to(grads, *a, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &self.vals[node];
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    add_to(grads, *a, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if self.needs(*a) {
                    // dA = G @ B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &tb.data()[j..];
                            for kk in 0..k {
                                da[i * k + kk] += gij * brow[kk * m];
                            }
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(&[n, k], da));
                }
                if self.needs(*b) {
                    // dB = A^T @ G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let arow = &ta.data()[i * k..(i + 1) * k];
                        let grow = &g.data()[i * m..(i + 1) * m];
                        for (kk, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut db[kk * m..(kk + 1) * m];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    add_to(grads, *b, Tensor::from_vec(&[k, m], db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                if self.needs(*a) {
                    // dA = G @ B
                    let da = matmul_raw(g.data(), tb.data(), n, m, k);
                    add_to(grads, *a, Tensor::from_vec(&[n, k], da));
                }
                if self.needs(*b) {
                    // dB = G^T @ A
                    let mut db = vec![0.0; m * k];
                    for i in 0..n {
                        let arow = &ta.data()[i * k..(i + 1) * k];
                        let grow = &g.data()[i * m..(i + 1) * m];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let dst = &mut db[j * k..(j + 1) * k];
                            for (d, &av) in dst.iter_mut().zip(arow) {
                                *d += gv * av;
                            }
                        }
                    }
                    add_to(grads, *b, Tensor::from_vec(&[m, k], db));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g.data()[i * n + j];
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(&[n, m], da));
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let m = self.vals[b.0].numel();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_to(grads, *b, Tensor::from_vec(&[m], db));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let ta = &self.vals[a.0];
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_to(grads, *a, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
                let (n, c, h, wid) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (o, _, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let needs_x = self.needs(*x);
                let needs_w = self.needs(*w);
                let needs_b = self.needs(*b);
                let mut dx = if needs_x {
                    vec![0.0; tx.numel()]
                } else {
                    Vec::new()
                };
                let mut dw = if needs_w {
                    vec![0.0; tw.numel()]
                } else {
                    Vec::new()
                };
                let mut db = if needs_b { vec![0.0; o] } else { Vec::new() };
                let xd = tx.data();
                let wd = tw.data();
                for ni in 0..n {
                    for oi in 0..o {
                        let base_g = ((ni * o) + oi) * oh * ow;
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let gv = g.data()[base_g + ohi * ow + owi];
                                if gv == 0.0 {
                                    continue;
                                }
                                if needs_b {
                                    db[oi] += gv;
                                }
                                for ci in 0..c {
                                    let base_x = ((ni * c) + ci) * h * wid;
                                    let base_w = ((oi * c) + ci) * kh * kw;
                                    for khi in 0..kh {
                                        let ih = (ohi * stride + khi) as isize - *pad as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let row_x = base_x + ih as usize * wid;
                                        let row_w = base_w + khi * kw;
                                        for kwi in 0..kw {
                                            let iw = (owi * stride + kwi) as isize - *pad as isize;
                                            if iw < 0 || iw >= wid as isize {
                                                continue;
                                            }
                                            if needs_x {
                                                dx[row_x + iw as usize] += gv * wd[row_w + kwi];
                                            }
                                            if needs_w {
                                                dw[row_w + kwi] += gv * xd[row_x + iw as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if needs_x {
                    add_to(grads, *x, Tensor::from_vec(tx.shape(), dx));
                }
                if needs_w {
                    add_to(grads, *w, Tensor::from_vec(tw.shape(), dw));
                }
                if needs_b {
                    add_to(grads, *b, Tensor::from_vec(&[o], db));
                }
            }
            Op::AvgPool2 { x, k } => {
                if self.needs(*x) {
                    let tx = &self.vals[x.0];
                    let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let mut dx = vec![0.0; tx.numel()];
                    for nc in 0..n * c {
                        let gsl = &g.data()[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let gv = gsl[ohi * ow + owi] * inv;
                                for dh in 0..*k {
                                    for dw in 0..*k {
                                        dst[(ohi * k + dh) * w + owi * k + dw] += gv;
                                    }
                                }
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(tx.shape(), dx));
                }
            }
            Op::MeanHW(x) => {
                if self.needs(*x) {
                    let tx = &self.vals[x.0];
                    let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = vec![0.0; tx.numel()];
                    for nc in 0..n * c {
                        let gv = g.data()[nc] * inv;
                        for v in dx[nc * h * w..(nc + 1) * h * w].iter_mut() {
                            *v = gv;
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(tx.shape(), dx));
                }
            }
            Op::MeanAxis0(a) => {
                if self.needs(*a) {
                    let ta = &self.vals[a.0];
                    let (s, d) = (ta.shape()[0], ta.shape()[1]);
                    let inv = 1.0 / s as f64;
                    let mut da = vec![0.0; s * d];
                    for row in da.chunks_mut(d) {
                        for (x, gv) in row.iter_mut().zip(g.data()) {
                            *x = gv * inv;
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(&[s, d], da));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let ta = &self.vals[a.0];
                    let gv = g.item() / ta.numel() as f64;
                    add_to(grads, *a, Tensor::full(ta.shape(), gv));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let ta = &self.vals[a.0];
                    add_to(grads, *a, Tensor::full(ta.shape(), g.item()));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let shape = self.vals[a.0].shape().to_vec();
                    add_to(grads, *a, g.clone().reshape(&shape));
                }
            }
            Op::NormalizeRows(a) => {
                if self.needs(*a) {
                    let ta = &self.vals[a.0];
                    let y = &self.vals[node];
                    let d = ta.shape()[1];
                    let mut da = vec![0.0; ta.numel()];
                    for (r, xrow) in ta.data().chunks(d).enumerate() {
                        let norm = math::sqrt(xrow.iter().map(|v| v * v).sum()).max(1e-12);
                        let yrow = &y.data()[r * d..(r + 1) * d];
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            da[r * d + i] = (grow[i] - dot * yrow[i]) / norm;
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(ta.shape(), da));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &self.vals[node];
                    let m = y.shape()[1];
                    let mut da = vec![0.0; y.numel()];
                    for (r, yrow) in y.data().chunks(m).enumerate() {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let gsum: f64 = grow.iter().sum();
                        for i in 0..m {
                            da[r * m + i] = grow[i] - math::exp(yrow[i]) * gsum;
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(y.shape(), da));
                }
            }
            Op::PickPerRow { x, idx } => {
                if self.needs(*x) {
                    let tx = &self.vals[x.0];
                    let m = tx.shape()[1];
                    let mut dx = vec![0.0; tx.numel()];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * m + j] += g.data()[i];
                    }
                    add_to(grads, *x, Tensor::from_vec(tx.shape(), dx));
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = self.vals[p.0].shape()[0];
                    if self.needs(p) {
                        let slice = &g.data()[offset * cols..(offset + rows) * cols];
                        add_to(grads, p, Tensor::from_vec(&[rows, cols], slice.to_vec()));
                    }
                    offset += rows;
                }
            }
            Op::GatherRows { table, idx } => {
                if self.needs(*table) {
                    let tt = &self.vals[table.0];
                    let d = tt.shape()[1];
                    let mut dt = vec![0.0; tt.numel()];
                    for (s, &i) in idx.iter().enumerate() {
                        let src = &g.data()[s * d..(s + 1) * d];
                        let dst = &mut dt[i * d..(i + 1) * d];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    add_to(grads, *table, Tensor::from_vec(tt.shape(), dt));
                }
            }
            Op::RowNorms(a) => {
                if self.needs(*a) {
                    let ta = &self.vals[a.0];
                    let d = ta.shape()[1];
                    let mut da = vec![0.0; ta.numel()];
                    for (r, xrow) in ta.data().chunks(d).enumerate() {
                        let norm = math::sqrt(xrow.iter().map(|v| v * v).sum());
                        if norm <= 1e-12 {
                            continue;
                        }
                        let gv = g.data()[r] / norm;
                        for i in 0..d {
                            da[r * d + i] = gv * xrow[i];
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(ta.shape(), da));
                }
            }
            Op::ClipApply { gen, clean, sigma } => {
                if self.needs(*gen) {
                    let tg = &self.vals[gen.0];
                    let data: Vec<f64> = tg
                        .data()
                        .iter()
                        .zip(clean.data())
                        .zip(g.data())
                        .map(|((&gv, &x), &up)| {
                            let lo = x - sigma;
                            let hi = x + sigma;
                            let m = gv.max(lo);
                            let v = m.min(hi);
                            if gv > lo && m < hi && v > 0.0 && v < 1.0 {
                                up
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_to(grads, *gen, Tensor::from_vec(tg.shape(), data));
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
