//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] is built fresh for every forward pass: leaves hold parameter
//! and input tensors, each operation records its parents, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! The op set is closed and every backward rule is verified against central
//! finite differences in the test suite.

use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Relu(Var),
    Clamp(Var, F, F),
    /// `[B,I] x [I,O] -> [B,O]`
    Matmul(Var, Var),
    /// `[B,D] + [D]` broadcast over rows
    AddRow(Var, Var),
    /// `[B,C,H,W] (+) [C]` broadcast per channel
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    /// Per-sample normalization over all of C*H*W with per-channel affine.
    MapNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: F,
    },
    AdaptiveAvgPool {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Reshape(Var),
    /// Columns `[a, b)` of a `[B,D]` matrix.
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MeanTensors(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// `out[b,:] = sum_k weights[b,k] * scales[k][b,:]`
    WeightedSumScales {
        scales: Vec<Var>,
        weights: Var,
    },
    /// Subtract the batch mean of the input itself.
    CenterRows(Var),
    /// Subtract a constant row (running statistics at evaluation).
    SubRow(Var),
    /// Rows scaled to unit length with an additive guard in the denominator.
    NormalizeRows {
        x: Var,
        eps: F,
    },
    /// Mean over row groups; `seg[r]` names the output row for input row `r`.
    SegmentMean {
        x: Var,
        seg: Vec<usize>,
        n_segments: usize,
    },
    /// `out[r,n] = (a_r . b_n) / (|a_r| |b_n| + eps)`
    CosineScores {
        a: Var,
        b: Var,
        eps: F,
    },
    /// `-(1/R) sum_r logp[r, labels[r]]`
    NllLoss {
        logp: Var,
        labels: Vec<usize>,
    },
    /// Mean over rows of the squared L2 difference.
    MseLoss(Var, Var),
    /// Diagonal-Gaussian-to-standard-normal divergence, mean over rows.
    KlLoss {
        mu: Var,
        log_var: Var,
    },
    /// Elementwise product with a constant (noise in reparameterization).
    MulConst(Var, Tensor<F>),
    /// Sum of all elements to a scalar.
    SumAll(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Per-backward-pass gradient table, indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of a node that is known to require one.
    pub fn expect(&self, var: Var) -> &Tensor<F> {
        self.grads[var.0].as_ref().expect("gradient not computed")
    }
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

// Samples per parallel chunk in convolution backward; fixed so results do
// not depend on thread count.
const CONV_CHUNK: usize = 8;

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that gradients flow into (a parameter).
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x * c);
        let needs = self.ng(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let needs = self.ng(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let needs = self.ng(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let needs = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), needs)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, i) = (xv.rows(), xv.cols());
        let (wi, o) = (wv.rows(), wv.cols());
        assert_eq!(i, wi, "matmul inner dims {} vs {}", i, wi);
        let mut out = vec![F::zero(); b * o];
        let xd = xv.data();
        let wd = wv.data();
        for r in 0..b {
            let orow = &mut out[r * o..(r + 1) * o];
            for k in 0..i {
                let xv_rk = xd[r * i + k];
                if xv_rk == F::zero() {
                    continue;
                }
                let wrow = &wd[k * o..(k + 1) * o];
                for (oc, &wkc) in orow.iter_mut().zip(wrow) {
                    *oc = *oc + xv_rk * wkc;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w);
        self.push(Tensor::from_vec(&[b, o], out), Op::Matmul(x, w), needs)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        let (b, d) = (xv.rows(), xv.cols());
        assert_eq!(rv.shape(), &[d], "add_row bias shape");
        let mut out = xv.data().to_vec();
        for r in 0..b {
            for (o, &bias) in out[r * d..(r + 1) * d].iter_mut().zip(rv.data()) {
                *o = *o + bias;
            }
        }
        let needs = self.ng(x) || self.ng(row);
        self.push(Tensor::from_vec(&[b, d], out), Op::AddRow(x, row), needs)
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 4, "add_channel_bias expects [B,C,H,W]");
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let bv = self.value(bias);
        assert_eq!(bv.shape(), &[c]);
        let bd = bv.data().to_vec();
        let mut out = xv.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *o = *o + bd[ch];
        }
        let needs = self.ng(x) || self.ng(bias);
        self.push(Tensor::from_vec(&shape, out), Op::AddChannelBias(x, bias), needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, ci, h, wdt) = dims4(xv.shape());
        let (co, wci, kh, kw) = dims4(wv.shape());
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![F::zero(); b * co * oh * ow];
        let per_sample_out = co * oh * ow;
        let per_sample_in = ci * h * wdt;
        out.par_chunks_mut(per_sample_out)
            .enumerate()
            .for_each(|(bi, ob)| {
                let xs = &xd[bi * per_sample_in..(bi + 1) * per_sample_in];
                conv_forward_sample(xs, wd, ob, ci, h, wdt, co, kh, kw, stride, pad, oh, ow);
            });
        let needs = self.ng(x) || self.ng(w);
        self.push(
            Tensor::from_vec(&[b, co, oh, ow], out),
            Op::Conv2d { x, w, stride, pad },
            needs,
        )
    }

    pub fn map_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (b, c, h, w) = dims4(&shape);
        assert_eq!(self.value(gain).shape(), &[c]);
        assert_eq!(self.value(bias).shape(), &[c]);
        let m = c * h * w;
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        let xd = xv.data();
        let mut out = vec![F::zero(); b * m];
        let inv_m = F::one() / F::from_f64(m as f64);
        for s in 0..b {
            let xs = &xd[s * m..(s + 1) * m];
            let mean = xs.iter().copied().sum::<F>() * inv_m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
            let inv_std = F::one() / (var + eps).sqrt();
            for (i, o) in out[s * m..(s + 1) * m].iter_mut().enumerate() {
                let ch = i / (h * w);
                *o = gd[ch] * (xs[i] - mean) * inv_std + bd[ch];
            }
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::MapNorm { x, gain, bias, eps },
            needs,
        )
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv.shape());
        assert!(out_h <= h && out_w <= w, "pool grid {}x{} larger than map {}x{}", out_h, out_w, h, w);
        let xd = xv.data();
        let mut out = vec![F::zero(); b * c * out_h * out_w];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                for i in 0..out_h {
                    let (h0, h1) = pool_window(i, h, out_h);
                    for j in 0..out_w {
                        let (w0, w1) = pool_window(j, w, out_w);
                        let mut acc = F::zero();
                        for r in h0..h1 {
                            for cc in w0..w1 {
                                acc = acc + xd[base + r * w + cc];
                            }
                        }
                        let count = F::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                        out[((s * c + ch) * out_h + i) * out_w + j] = acc / count;
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[b, c, out_h, out_w], out),
            Op::AdaptiveAvgPool { x, out_h, out_w },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        let needs = self.ng(x);
        self.push(v, Op::Reshape(x), needs)
    }

    pub fn slice_cols(&mut self, x: Var, a: usize, b: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(a < b && b <= cols, "slice_cols [{},{}) of {}", a, b, cols);
        let mut out = Vec::with_capacity(rows * (b - a));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[a..b]);
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[rows, b - a], out),
            Op::SliceCols(x, a, b),
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(&[rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            out.extend_from_slice(xv.row(r));
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[indices.len(), cols], out),
            Op::SelectRows(x, indices.to_vec()),
            needs,
        )
    }

    pub fn mean_tensors(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let shape = self.value(parts[0]).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &p in parts {
            assert_eq!(self.value(p).shape(), &shape[..]);
            acc.axpy(F::one(), self.value(p));
        }
        acc.scale_in_place(F::one() / F::from_f64(parts.len() as f64));
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(acc, Op::MeanTensors(parts.to_vec()), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows_value(self.value(x));
        let needs = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, k) = (xv.rows(), xv.cols());
        let mut out = vec![F::zero(); b * k];
        for r in 0..b {
            let row = xv.row(r);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<F>().ln() + m;
            for (o, &x) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::from_vec(&[b, k], out), Op::LogSoftmaxRows(x), needs)
    }

    pub fn weighted_sum_scales(&mut self, scales: &[Var], weights: Var) -> Var {
        let k = scales.len();
        assert!(k >= 1);
        let wv = self.value(weights);
        let (b, wk) = (wv.rows(), wv.cols());
        assert_eq!(wk, k, "weight columns {} vs {} scales", wk, k);
        let d = self.value(scales[0]).cols();
        let mut out = vec![F::zero(); b * d];
        for (ki, &sv) in scales.iter().enumerate() {
            let s = self.value(sv);
            assert_eq!(s.shape(), &[b, d]);
            let sd = s.data();
            let wd = wv.data();
            for r in 0..b {
                let wrk = wd[r * k + ki];
                for c in 0..d {
                    out[r * d + c] = out[r * d + c] + wrk * sd[r * d + c];
                }
            }
        }
        let needs = scales.iter().any(|&s| self.ng(s)) || self.ng(weights);
        self.push(
            Tensor::from_vec(&[b, d], out),
            Op::WeightedSumScales {
                scales: scales.to_vec(),
                weights,
            },
            needs,
        )
    }

    pub fn center_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, d) = (xv.rows(), xv.cols());
        let mean = column_mean(xv);
        let mut out = xv.data().to_vec();
        for r in 0..b {
            for c in 0..d {
                out[r * d + c] = out[r * d + c] - mean[c];
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::from_vec(&[b, d], out), Op::CenterRows(x), needs)
    }

    pub fn sub_row(&mut self, x: Var, row: Tensor<F>) -> Var {
        let xv = self.value(x);
        let (b, d) = (xv.rows(), xv.cols());
        assert_eq!(row.shape(), &[d]);
        let mut out = xv.data().to_vec();
        for r in 0..b {
            for c in 0..d {
                out[r * d + c] = out[r * d + c] - row.data()[c];
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::from_vec(&[b, d], out), Op::SubRow(x), needs)
    }

    pub fn normalize_rows(&mut self, x: Var, eps: F) -> Var {
        let xv = self.value(x);
        let (b, d) = (xv.rows(), xv.cols());
        let mut out = vec![F::zero(); b * d];
        for r in 0..b {
            let row = xv.row(r);
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let denom = n + eps;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / denom;
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[b, d], out),
            Op::NormalizeRows { x, eps },
            needs,
        )
    }

    pub fn segment_mean(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        assert_eq!(seg.len(), rows, "one segment id per row");
        let mut counts = vec![0usize; n_segments];
        let mut out = vec![F::zero(); n_segments * d];
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < n_segments);
            counts[s] += 1;
            let row = xv.row(r);
            for c in 0..d {
                out[s * d + c] = out[s * d + c] + row[c];
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            assert!(cnt > 0, "segment {} has no rows", s);
            let inv = F::one() / F::from_f64(cnt as f64);
            for c in 0..d {
                out[s * d + c] = out[s * d + c] * inv;
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[n_segments, d], out),
            Op::SegmentMean {
                x,
                seg: seg.to_vec(),
                n_segments,
            },
            needs,
        )
    }

    pub fn cosine_scores(&mut self, a: Var, b: Var, eps: F) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, d) = (av.rows(), av.cols());
        let (n, bd) = (bv.rows(), bv.cols());
        assert_eq!(d, bd, "cosine dimension mismatch");
        let mut out = vec![F::zero(); r * n];
        for ri in 0..r {
            let ar = av.row(ri);
            let na = ar.iter().map(|&v| v * v).sum::<F>().sqrt();
            for ni in 0..n {
                let bn = bv.row(ni);
                let nb = bn.iter().map(|&v| v * v).sum::<F>().sqrt();
                let dot = ar.iter().zip(bn).map(|(&x, &y)| x * y).sum::<F>();
                out[ri * n + ni] = dot / (na * nb + eps);
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_vec(&[r, n], out),
            Op::CosineScores { a, b, eps },
            needs,
        )
    }

    pub fn nll_loss(&mut self, logp: Var, labels: &[usize]) -> Var {
        let lv = self.value(logp);
        let (r, c) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), r, "one label per row");
        let mut acc = F::zero();
        for (ri, &y) in labels.iter().enumerate() {
            assert!(y < c, "label {} out of range {}", y, c);
            acc = acc + lv.row(ri)[y];
        }
        let loss = -acc / F::from_f64(r as f64);
        let needs = self.ng(logp);
        self.push(
            Tensor::scalar(loss),
            Op::NllLoss {
                logp,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let rows = F::from_f64(av.rows() as f64);
        let ss: F = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(ss / rows), Op::MseLoss(a, b), needs)
    }

    pub fn kl_loss(&mut self, mu: Var, log_var: Var) -> Var {
        let mv = self.value(mu);
        let lv = self.value(log_var);
        assert_eq!(mv.shape(), lv.shape());
        let b = F::from_f64(mv.rows() as f64);
        let half = F::from_f64(0.5);
        let total: F = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| half * (m * m + l.exp() - F::one() - l))
            .sum();
        let needs = self.ng(mu) || self.ng(log_var);
        self.push(Tensor::scalar(total / b), Op::KlLoss { mu, log_var }, needs)
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor<F>) -> Var {
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        let needs = self.ng(x);
        self.push(v, Op::MulConst(x, c), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.ng(x);
        self.push(v, Op::SumAll(x), needs)
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient slot per node;
    /// only nodes on a `needs_grad` path are populated.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(
            self.value(loss).shape(),
            vec![F::one()],
        ));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let add_to = |grads: &mut [Option<Tensor<F>>], var: Var, delta: Tensor<F>| {
            match &mut grads[var.0] {
                Some(acc) => acc.axpy(F::one(), &delta),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    add_to(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    add_to(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    add_to(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    add_to(grads, *a, g.map(|x| x * *c));
                }
            }
            Op::Exp(a) => {
                if self.ng(*a) {
                    add_to(grads, *a, g.zip_map(&self.nodes[id].value, |gv, y| gv * y));
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    add_to(
                        grads,
                        *a,
                        g.zip_map(self.value(*a), |gv, x| if x > F::zero() { gv } else { F::zero() }),
                    );
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.ng(*a) {
                    add_to(
                        grads,
                        *a,
                        g.zip_map(self.value(*a), |gv, x| {
                            if x > *lo && x < *hi {
                                gv
                            } else {
                                F::zero()
                            }
                        }),
                    );
                }
            }
            Op::Matmul(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (b, i) = (xv.rows(), xv.cols());
                let o = wv.cols();
                if self.ng(*x) {
                    let mut gx = vec![F::zero(); b * i];
                    for r in 0..b {
                        for k in 0..i {
                            let grow = g.row(r);
                            let wrow = wv.row(k);
                            gx[r * i + k] =
                                grow.iter().zip(wrow).map(|(&gg, &ww)| gg * ww).sum::<F>();
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[b, i], gx));
                }
                if self.ng(*w) {
                    let mut gw = vec![F::zero(); i * o];
                    for r in 0..b {
                        let xrow = xv.row(r);
                        let grow = g.row(r);
                        for k in 0..i {
                            let xrk = xrow[k];
                            if xrk == F::zero() {
                                continue;
                            }
                            for c in 0..o {
                                gw[k * o + c] = gw[k * o + c] + xrk * grow[c];
                            }
                        }
                    }
                    add_to(grads, *w, Tensor::from_vec(&[i, o], gw));
                }
            }
            Op::AddRow(x, row) => {
                if self.ng(*x) {
                    add_to(grads, *x, g.clone());
                }
                if self.ng(*row) {
                    let d = g.cols();
                    let mut gr = vec![F::zero(); d];
                    for r in 0..g.rows() {
                        for (acc, &gv) in gr.iter_mut().zip(g.row(r)) {
                            *acc = *acc + gv;
                        }
                    }
                    add_to(grads, *row, Tensor::from_vec(&[d], gr));
                }
            }
            Op::AddChannelBias(x, bias) => {
                if self.ng(*x) {
                    add_to(grads, *x, g.clone());
                }
                if self.ng(*bias) {
                    let (_, c, h, w) = dims4(g.shape());
                    let hw = h * w;
                    let mut gb = vec![F::zero(); c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        gb[(i / hw) % c] = gb[(i / hw) % c] + gv;
                    }
                    add_to(grads, *bias, Tensor::from_vec(&[c], gb));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                self.conv2d_backward(*x, *w, *stride, *pad, g, grads, &add_to);
            }
            Op::MapNorm { x, gain, bias, eps } => {
                self.map_norm_backward(*x, *gain, *bias, *eps, g, grads, &add_to);
            }
            Op::AdaptiveAvgPool { x, out_h, out_w } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (b, c, h, w) = dims4(xv.shape());
                    let mut gx = vec![F::zero(); xv.numel()];
                    let gd = g.data();
                    for s in 0..b {
                        for ch in 0..c {
                            let base = (s * c + ch) * h * w;
                            for i in 0..*out_h {
                                let (h0, h1) = pool_window(i, h, *out_h);
                                for j in 0..*out_w {
                                    let (w0, w1) = pool_window(j, w, *out_w);
                                    let count =
                                        F::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                                    let gv = gd[((s * c + ch) * out_h + i) * out_w + j] / count;
                                    for r in h0..h1 {
                                        for cc in w0..w1 {
                                            gx[base + r * w + cc] = gx[base + r * w + cc] + gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(xv.shape(), gx));
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    add_to(grads, *x, g.clone().reshaped(&shape));
                }
            }
            Op::SliceCols(x, a, b) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut gx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        for (c, &gv) in (*a..*b).zip(g.row(r)) {
                            gx[r * cols + c] = gv;
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[rows, cols], gx));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let cols = g.cols();
                        let slice =
                            g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        add_to(grads, p, Tensor::from_vec(&[rows, cols], slice));
                    }
                    offset += rows;
                }
            }
            Op::SelectRows(x, indices) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut gx = vec![F::zero(); rows * cols];
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for (c, &gv) in g.row(out_r).iter().enumerate() {
                            gx[src_r * cols + c] = gx[src_r * cols + c] + gv;
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[rows, cols], gx));
                }
            }
            Op::MeanTensors(parts) => {
                let inv = F::one() / F::from_f64(parts.len() as f64);
                for &p in parts {
                    if self.ng(p) {
                        add_to(grads, p, g.map(|x| x * inv));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.ng(*x) {
                    let y = &self.nodes[id].value;
                    let (b, k) = (y.rows(), y.cols());
                    let mut gx = vec![F::zero(); b * k];
                    for r in 0..b {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..k {
                            gx[r * k + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[b, k], gx));
                }
            }
            Op::LogSoftmaxRows(x) => {
                if self.ng(*x) {
                    let y = &self.nodes[id].value;
                    let (b, k) = (y.rows(), y.cols());
                    let mut gx = vec![F::zero(); b * k];
                    for r in 0..b {
                        let gr = g.row(r);
                        let gsum: F = gr.iter().copied().sum();
                        let yr = y.row(r);
                        for c in 0..k {
                            gx[r * k + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[b, k], gx));
                }
            }
            Op::WeightedSumScales { scales, weights } => {
                let wv = self.value(*weights);
                let (b, k) = (wv.rows(), wv.cols());
                let d = g.cols();
                for (ki, &sv) in scales.iter().enumerate() {
                    if self.ng(sv) {
                        let mut gs = vec![F::zero(); b * d];
                        for r in 0..b {
                            let wrk = wv.row(r)[ki];
                            for (c, &gv) in g.row(r).iter().enumerate() {
                                gs[r * d + c] = wrk * gv;
                            }
                        }
                        add_to(grads, sv, Tensor::from_vec(&[b, d], gs));
                    }
                }
                if self.ng(*weights) {
                    let mut gw = vec![F::zero(); b * k];
                    for (ki, &sv) in scales.iter().enumerate() {
                        let s = self.value(sv);
                        for r in 0..b {
                            let dot: F = s
                                .row(r)
                                .iter()
                                .zip(g.row(r))
                                .map(|(&a, &b)| a * b)
                                .sum();
                            gw[r * k + ki] = dot;
                        }
                    }
                    add_to(grads, *weights, Tensor::from_vec(&[b, k], gw));
                }
            }
            Op::CenterRows(x) => {
                if self.ng(*x) {
                    let (b, d) = (g.rows(), g.cols());
                    let gmean = column_mean(g);
                    let mut gx = g.data().to_vec();
                    for r in 0..b {
                        for c in 0..d {
                            gx[r * d + c] = gx[r * d + c] - gmean[c];
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[b, d], gx));
                }
            }
            Op::SubRow(x) => {
                if self.ng(*x) {
                    add_to(grads, *x, g.clone());
                }
            }
            Op::NormalizeRows { x, eps } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (b, d) = (xv.rows(), xv.cols());
                    let mut gx = vec![F::zero(); b * d];
                    for r in 0..b {
                        let row = xv.row(r);
                        let gr = g.row(r);
                        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                        let denom = n + *eps;
                        if n == F::zero() {
                            for c in 0..d {
                                gx[r * d + c] = gr[c] / denom;
                            }
                        } else {
                            let gdotx: F =
                                gr.iter().zip(row).map(|(&gv, &xv)| gv * xv).sum();
                            let coef = gdotx / (n * denom * denom);
                            for c in 0..d {
                                gx[r * d + c] = gr[c] / denom - coef * row[c];
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[b, d], gx));
                }
            }
            Op::SegmentMean { x, seg, n_segments } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (rows, d) = (xv.rows(), xv.cols());
                    let mut counts = vec![0usize; *n_segments];
                    for &s in seg {
                        counts[s] += 1;
                    }
                    let mut gx = vec![F::zero(); rows * d];
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = F::one() / F::from_f64(counts[s] as f64);
                        for (c, &gv) in g.row(s).iter().enumerate() {
                            gx[r * d + c] = gv * inv;
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[rows, d], gx));
                }
            }
            Op::CosineScores { a, b, eps } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (r, d) = (av.rows(), av.cols());
                let n = bv.rows();
                let tiny = F::from_f64(1e-300);
                let na: Vec<F> = (0..r)
                    .map(|i| av.row(i).iter().map(|&v| v * v).sum::<F>().sqrt())
                    .collect();
                let nb: Vec<F> = (0..n)
                    .map(|i| bv.row(i).iter().map(|&v| v * v).sum::<F>().sqrt())
                    .collect();
                if self.ng(*a) {
                    let mut ga = vec![F::zero(); r * d];
                    for ri in 0..r {
                        let ar = av.row(ri);
                        for ni in 0..n {
                            let gv = g.row(ri)[ni];
                            if gv == F::zero() {
                                continue;
                            }
                            let bn = bv.row(ni);
                            let den = na[ri] * nb[ni] + *eps;
                            let dot: F = ar.iter().zip(bn).map(|(&x, &y)| x * y).sum();
                            let coef = dot * nb[ni] / (na[ri].max(tiny) * den * den);
                            for c in 0..d {
                                ga[ri * d + c] =
                                    ga[ri * d + c] + gv * (bn[c] / den - coef * ar[c]);
                            }
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(&[r, d], ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![F::zero(); n * d];
                    for ri in 0..r {
                        let ar = av.row(ri);
                        for ni in 0..n {
                            let gv = g.row(ri)[ni];
                            if gv == F::zero() {
                                continue;
                            }
                            let bn = bv.row(ni);
                            let den = na[ri] * nb[ni] + *eps;
                            let dot: F = ar.iter().zip(bn).map(|(&x, &y)| x * y).sum();
                            let coef = dot * na[ri] / (nb[ni].max(tiny) * den * den);
                            for c in 0..d {
                                gb[ni * d + c] =
                                    gb[ni * d + c] + gv * (ar[c] / den - coef * bn[c]);
                            }
                        }
                    }
                    add_to(grads, *b, Tensor::from_vec(&[n, d], gb));
                }
            }
            Op::NllLoss { logp, labels } => {
                if self.ng(*logp) {
                    let lv = self.value(*logp);
                    let (r, c) = (lv.rows(), lv.cols());
                    let gs = g.item();
                    let scale = gs / F::from_f64(r as f64);
                    let mut gx = vec![F::zero(); r * c];
                    for (ri, &y) in labels.iter().enumerate() {
                        gx[ri * c + y] = -scale;
                    }
                    add_to(grads, *logp, Tensor::from_vec(&[r, c], gx));
                }
            }
            Op::MseLoss(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let gs = g.item();
                let two = F::from_f64(2.0);
                let scale = gs * two / F::from_f64(av.rows() as f64);
                if self.ng(*a) {
                    add_to(grads, *a, av.zip_map(bv, |x, y| scale * (x - y)));
                }
                if self.ng(*b) {
                    add_to(grads, *b, av.zip_map(bv, |x, y| -scale * (x - y)));
                }
            }
            Op::KlLoss { mu, log_var } => {
                let gs = g.item();
                let mv = self.value(*mu);
                let lv = self.value(*log_var);
                let inv_b = F::one() / F::from_f64(mv.rows() as f64);
                let half = F::from_f64(0.5);
                if self.ng(*mu) {
                    add_to(grads, *mu, mv.map(|m| gs * m * inv_b));
                }
                if self.ng(*log_var) {
                    add_to(
                        grads,
                        *log_var,
                        lv.map(|l| gs * half * (l.exp() - F::one()) * inv_b),
                    );
                }
            }
            Op::MulConst(x, c) => {
                if self.ng(*x) {
                    add_to(grads, *x, g.zip_map(c, |gv, cv| gv * cv));
                }
            }
            Op::SumAll(x) => {
                if self.ng(*x) {
                    let gs = g.item();
                    add_to(grads, *x, Tensor::filled(self.value(*x).shape(), gs));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        add_to: &impl Fn(&mut [Option<Tensor<F>>], Var, Tensor<F>),
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, ci, h, wdt) = dims4(xv.shape());
        let (co, _, kh, kw) = dims4(wv.shape());
        let (_, _, oh, ow) = dims4(g.shape());
        let xd = xv.data();
        let wd = wv.data();
        let gd = g.data();
        let in_stride = ci * h * wdt;
        let out_stride = co * oh * ow;

        if self.ng(x) {
            let mut gx = vec![F::zero(); xd.len()];
            gx.par_chunks_mut(in_stride).enumerate().for_each(|(bi, gxs)| {
                let gs = &gd[bi * out_stride..(bi + 1) * out_stride];
                for c_out in 0..co {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gs[(c_out * oh + i) * ow + j];
                            if gv == F::zero() {
                                continue;
                            }
                            for c_in in 0..ci {
                                for r in 0..kh {
                                    let ih = (i * stride + r) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for cc in 0..kw {
                                        let iw = (j * stride + cc) as isize - pad as isize;
                                        if iw < 0 || iw >= wdt as isize {
                                            continue;
                                        }
                                        let xi = (c_in * h + ih as usize) * wdt + iw as usize;
                                        let wi = ((c_out * ci + c_in) * kh + r) * kw + cc;
                                        gxs[xi] = gxs[xi] + gv * wd[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            add_to(grads, x, Tensor::from_vec(xv.shape(), gx));
        }

        if self.ng(w) {
            // Partial kernel gradients per fixed-size sample chunk, summed in
            // chunk order so the result is independent of scheduling.
            let chunks: Vec<Vec<F>> = (0..b)
                .collect::<Vec<_>>()
                .par_chunks(CONV_CHUNK)
                .map(|samples| {
                    let mut gw = vec![F::zero(); wd.len()];
                    for &bi in samples {
                        let xs = &xd[bi * in_stride..(bi + 1) * in_stride];
                        let gs = &gd[bi * out_stride..(bi + 1) * out_stride];
                        for c_out in 0..co {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = gs[(c_out * oh + i) * ow + j];
                                    if gv == F::zero() {
                                        continue;
                                    }
                                    for c_in in 0..ci {
                                        for r in 0..kh {
                                            let ih = (i * stride + r) as isize - pad as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            for cc in 0..kw {
                                                let iw =
                                                    (j * stride + cc) as isize - pad as isize;
                                                if iw < 0 || iw >= wdt as isize {
                                                    continue;
                                                }
                                                let xi = (c_in * h + ih as usize) * wdt
                                                    + iw as usize;
                                                let wi =
                                                    ((c_out * ci + c_in) * kh + r) * kw + cc;
                                                gw[wi] = gw[wi] + gv * xs[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gw
                })
                .collect();
            let mut gw = vec![F::zero(); wd.len()];
            for chunk in chunks {
                for (acc, v) in gw.iter_mut().zip(chunk) {
                    *acc = *acc + v;
                }
            }
            add_to(grads, w, Tensor::from_vec(wv.shape(), gw));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn map_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: F,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        add_to: &impl Fn(&mut [Option<Tensor<F>>], Var, Tensor<F>),
    ) {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv.shape());
        let m = c * h * w;
        let hw = h * w;
        let inv_m = F::one() / F::from_f64(m as f64);
        let gd = self.value(gain).data().to_vec();
        let xd = xv.data();
        let gu = g.data();

        let mut gx = vec![F::zero(); xd.len()];
        let mut ggain = vec![F::zero(); c];
        let mut gbias = vec![F::zero(); c];
        for s in 0..b {
            let xs = &xd[s * m..(s + 1) * m];
            let gs = &gu[s * m..(s + 1) * m];
            let mean = xs.iter().copied().sum::<F>() * inv_m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
            let inv_std = F::one() / (var + eps).sqrt();
            // u = gain (x) g per element; means of u and u*xhat over the map
            let mut mean_u = F::zero();
            let mut mean_ux = F::zero();
            for i in 0..m {
                let ch = i / hw;
                let xhat = (xs[i] - mean) * inv_std;
                let u = gd[ch] * gs[i];
                mean_u = mean_u + u;
                mean_ux = mean_ux + u * xhat;
                ggain[ch] = ggain[ch] + gs[i] * xhat;
                gbias[ch] = gbias[ch] + gs[i];
            }
            mean_u = mean_u * inv_m;
            mean_ux = mean_ux * inv_m;
            let gxs = &mut gx[s * m..(s + 1) * m];
            for i in 0..m {
                let ch = i / hw;
                let xhat = (xs[i] - mean) * inv_std;
                let u = gd[ch] * gs[i];
                gxs[i] = (u - mean_u - xhat * mean_ux) * inv_std;
            }
        }
        if self.ng(x) {
            add_to(grads, x, Tensor::from_vec(xv.shape(), gx));
        }
        if self.ng(gain) {
            add_to(grads, gain, Tensor::from_vec(&[c], ggain));
        }
        if self.ng(bias) {
            add_to(grads, bias, Tensor::from_vec(&[c], gbias));
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected rank-4 shape, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

/// Window `[start, end)` for adaptive pooling cell `i` of `out` over `size`.
pub fn pool_window(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

pub(crate) fn column_mean<F: Scalar>(x: &Tensor<F>) -> Vec<F> {
    let (b, d) = (x.rows(), x.cols());
    let mut mean = vec![F::zero(); d];
    for r in 0..b {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m = *m + v;
        }
    }
    let inv = F::one() / F::from_f64(b as f64);
    for m in mean.iter_mut() {
        *m = *m * inv;
    }
    mean
}

/// Numerically stable row softmax on a plain tensor.
pub fn softmax_rows_value<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (b, k) = (x.rows(), x.cols());
    let mut out = vec![F::zero(); b * k];
    for r in 0..b {
        let row = x.row(r);
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum = sum + *o;
        }
        for o in out[r * k..(r + 1) * k].iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::from_vec(&[b, k], out)
}

#[allow(dead_code)]
fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data)
    }

    /// Central-difference check of every input gradient of a scalar-valued
    /// graph. The closure rebuilds the graph from raw inputs so perturbed
    /// forward passes share no state with the analytic pass.
    fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let h = 1e-6;
        let tol = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);

        let eval = |inputs: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let loss = build(&mut g, &vars);
            g.value(loss).item()
        };

        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[pi])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for ci in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[ci] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[ci] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[ci];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    ((a - numeric) / denom).abs() < tol,
                    "input {} coord {}: analytic {} vs numeric {}",
                    pi,
                    ci,
                    a,
                    numeric
                );
            }
        }
    }

    /// Collapse any output to a scalar through a fixed weighting so FD
    /// exercises every output coordinate.
    fn spread(g: &mut Graph<f64>, v: Var) -> Var {
        let n = g.value(v).numel();
        let shape = g.value(v).shape().to_vec();
        let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0).collect();
        let w = Tensor::from_vec(&shape, weights);
        let prod = g.mul_const(v, w);
        g.sum_all(prod)
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = stream(1, Concern::GradCheck, 0);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let sc = g.scale(m, 1.7);
            spread(g, sc)
        });
        fd_check(&[a], |g, v| {
            let e = g.exp(v[0]);
            spread(g, e)
        });
    }

    #[test]
    fn relu_and_clamp_grads() {
        // keep coordinates away from the kinks
        let x = Tensor::from_vec(&[2, 3], vec![-0.9, 0.8, -0.4, 0.3, 1.2, -1.5]);
        fd_check(&[x.clone()], |g, v| {
            let r = g.relu(v[0]);
            spread(g, r)
        });
        fd_check(&[x], |g, v| {
            let c = g.clamp(v[0], -1.0, 1.0);
            spread(g, c)
        });
    }

    #[test]
    fn matmul_and_bias_grads() {
        let mut rng = stream(2, Concern::GradCheck, 0);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[4, 2], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        fd_check(&[x, w, b], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_row(y, v[2]);
            spread(g, y)
        });
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = stream(3, Concern::GradCheck, 0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            fd_check(&[x, w, b], move |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad);
                let y = g.add_channel_bias(y, v[2]);
                spread(g, y)
            });
        }
    }

    #[test]
    fn map_norm_grads() {
        let mut rng = stream(4, Concern::GradCheck, 0);
        let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let gain = rand_tensor(&[3], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        fd_check(&[x, gain, bias], |g, v| {
            let y = g.map_norm(v[0], v[1], v[2], 1e-5);
            spread(g, y)
        });
    }

    #[test]
    fn adaptive_pool_grads_and_values() {
        let mut rng = stream(5, Concern::GradCheck, 0);
        let x = rand_tensor(&[1, 2, 5, 7], &mut rng);
        fd_check(&[x], |g, v| {
            let y = g.adaptive_avg_pool(v[0], 2, 3);
            spread(g, y)
        });

        // constant map pools to the constant
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::filled(&[1, 1, 4, 4], 3.0));
        let y = g.adaptive_avg_pool(c, 2, 2);
        assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));

        // 1x1 grid equals the global mean
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.adaptive_avg_pool(c, 1, 1);
        assert!((g.value(y).item() - 2.5).abs() < 1e-12);

        // hand window-average oracle: rows carry their index, pool to 2x1
        let mut g = Graph::<f64>::new();
        let rows: Vec<f64> = (0..4).flat_map(|r| std::iter::repeat(r as f64).take(4)).collect();
        let c = g.constant(Tensor::from_vec(&[1, 1, 4, 4], rows));
        let y = g.adaptive_avg_pool(c, 2, 1);
        assert_eq!(g.value(y).data(), &[0.5, 2.5]);
    }

    #[test]
    fn reshape_slice_concat_select_grads() {
        let mut rng = stream(6, Concern::GradCheck, 0);
        let x = rand_tensor(&[2, 6], &mut rng);
        fd_check(&[x.clone()], |g, v| {
            let r = g.reshape(v[0], &[3, 4]);
            let s = g.slice_cols(r, 1, 3);
            spread(g, s)
        });
        // concat with a repeated var accumulates gradient twice
        fd_check(&[x.clone()], |g, v| {
            let c = g.concat_rows(&[v[0], v[0]]);
            spread(g, c)
        });
        // repeated row selection accumulates
        fd_check(&[x], |g, v| {
            let s = g.select_rows(v[0], &[1, 0, 1]);
            spread(g, s)
        });
    }

    #[test]
    fn mean_softmax_grads() {
        let mut rng = stream(7, Concern::GradCheck, 0);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        fd_check(&[a.clone(), b], |g, v| {
            let m = g.mean_tensors(&[v[0], v[1], v[0]]);
            spread(g, m)
        });
        fd_check(&[a.clone()], |g, v| {
            let s = g.softmax_rows(v[0]);
            spread(g, s)
        });
        fd_check(&[a], |g, v| {
            let s = g.log_softmax_rows(v[0]);
            spread(g, s)
        });
    }

    #[test]
    fn fusion_center_normalize_grads() {
        let mut rng = stream(8, Concern::GradCheck, 0);
        let s0 = rand_tensor(&[3, 4], &mut rng);
        let s1 = rand_tensor(&[3, 4], &mut rng);
        let w = {
            let logits = rand_tensor(&[3, 2], &mut rng);
            softmax_rows_value(&logits)
        };
        fd_check(&[s0.clone(), s1.clone(), w], |g, v| {
            let f = g.weighted_sum_scales(&[v[0], v[1]], v[2]);
            let c = g.center_rows(f);
            let n = g.normalize_rows(c, 1e-8);
            spread(g, n)
        });
        let row = Tensor::vector(&[0.3, -0.2, 0.5, 0.1]);
        fd_check(&[s0], move |g, v| {
            let c = g.sub_row(v[0], row.clone());
            let n = g.normalize_rows(c, 1e-8);
            spread(g, n)
        });
    }

    #[test]
    fn segment_mean_and_cosine_grads() {
        let mut rng = stream(9, Concern::GradCheck, 0);
        let x = rand_tensor(&[6, 3], &mut rng);
        fd_check(&[x], |g, v| {
            let m = g.segment_mean(v[0], &[0, 0, 1, 1, 1, 0], 2);
            spread(g, m)
        });
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[2, 4], &mut rng);
        fd_check(&[a, b], |g, v| {
            let s = g.cosine_scores(v[0], v[1], 1e-12);
            spread(g, s)
        });
    }

    #[test]
    fn loss_grads() {
        let mut rng = stream(10, Concern::GradCheck, 0);
        let logits = rand_tensor(&[3, 4], &mut rng);
        fd_check(&[logits], |g, v| {
            let lp = g.log_softmax_rows(v[0]);
            g.nll_loss(lp, &[2, 0, 3])
        });
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        fd_check(&[a, b], |g, v| g.mse_loss(v[0], v[1]));
        let mu = rand_tensor(&[2, 3], &mut rng);
        let lv = rand_tensor(&[2, 3], &mut rng);
        fd_check(&[mu, lv], |g, v| g.kl_loss(v[0], v[1]));
    }

    #[test]
    fn constants_block_gradients() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::vector(&[1.0, 2.0]).reshaped(&[1, 2]));
        let p = g.param(Tensor::vector(&[3.0, 4.0]).reshaped(&[1, 2]));
        let s = g.add(c, p);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.expect(p).data(), &[1.0, 1.0]);
    }

    #[test]
    fn normalize_rows_zero_vector_is_safe() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::zeros(&[1, 3]));
        let n = g.normalize_rows(p, 1e-8);
        assert!(g.value(n).data().iter().all(|&v| v == 0.0));
        let loss = g.sum_all(n);
        let grads = g.backward(loss);
        assert!(grads.expect(p).is_finite());
    }

    #[test]
    fn reparameterization_gradient_is_exact() {
        // z = mu + exp(lv/2) * eps; dz/dmu = I, dz/dlv = sigma*eps/2
        let mu = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]);
        let lv = Tensor::from_vec(&[1, 2], vec![0.2, -0.1]);
        let eps = Tensor::from_vec(&[1, 2], vec![0.9, -1.3]);
        let mut g = Graph::<f64>::new();
        let vmu = g.param(mu.clone());
        let vlv = g.param(lv.clone());
        let half = g.scale(vlv, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul_const(sigma, eps.clone());
        let z = g.add(vmu, noise);
        let loss = g.sum_all(z);
        let grads = g.backward(loss);
        assert_eq!(grads.expect(vmu).data(), &[1.0, 1.0]);
        for i in 0..2 {
            let sigma = (lv.data()[i] / 2.0).exp();
            let expected = 0.5 * sigma * eps.data()[i];
            assert!((grads.expect(vlv).data()[i] - expected).abs() < 1e-12);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_sample<F: Scalar>(
    x: &[F],
    w: &[F],
    out: &mut [F],
    ci: usize,
    h: usize,
    wdt: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c_out in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = F::zero();
                for c_in in 0..ci {
                    for r in 0..kh {
                        let ih = (i * stride + r) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for cc in 0..kw {
                            let iw = (j * stride + cc) as isize - pad as isize;
                            if iw < 0 || iw >= wdt as isize {
                                continue;
                            }
                            let xi = (c_in * h + ih as usize) * wdt + iw as usize;
                            let wi = ((c_out * ci + c_in) * kh + r) * kw + cc;
                            acc = acc + x[xi] * w[wi];
                        }
                    }
                }
                out[(c_out * oh + i) * ow + j] = acc;
            }
        }
    }
}
