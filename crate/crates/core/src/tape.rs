//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! depends on a parameter. Graphs are cheap, single-use and owned by the
//! caller; parameters live outside the graph in [`Param`] values.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kan::SplineBasis;

/// Index marking an output slot that `take` fills with zero.
pub const ZERO_SLOT: usize = usize::MAX;

/// A named, trainable matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(name: impl Into<String>, rows: usize, cols: usize, value: f64) -> Self {
        Param {
            name: name.into(),
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal<R: Rng>(name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Param {
            name: name.into(),
            rows,
            cols,
            data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn identity(name: impl Into<String>, n: usize) -> Self {
        let mut p = Param::zeros(name, n, n);
        for i in 0..n {
            p.data[i * n + i] = 1.0;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Anything that owns parameters in a fixed, deterministic order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Take {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    TokenConv {
        x: Var,
        weight: Var,
        bias: Var,
        neighbors: Arc<Vec<usize>>,
        taps: usize,
    },
    Kan {
        x: Var,
        inner_coef: Var,
        inner_w: Var,
        outer_coef: Var,
        outer_w: Var,
        basis: SplineBasis,
        u: Vec<f64>,
    },
    Clamp01(Var),
    Mse(Var, Var),
    KlSoftmax {
        student: Var,
        log_p: Vec<f64>,
        log_q: Vec<f64>,
        row_kl: Vec<f64>,
        tau: f64,
    },
    SumSq(Var),
    RsqrtScaled(Var),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    ComplexScale(Var, Complex64),
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant data length");
        self.push(data, rows, cols, Op::Leaf, false)
    }

    /// Registers a trainable parameter; its gradient is reported by name.
    pub fn param(&mut self, p: &Param) -> Var {
        let v = self.push(p.data.clone(), p.rows, p.cols, Op::Leaf, true);
        self.params.push((v, p.name.clone()));
        v
    }

    /// Parameter used as a constant: no gradient is recorded for it.
    pub fn frozen(&mut self, p: &Param) -> Var {
        self.constant(p.rows, p.cols, p.data.clone())
    }

    /// [`Graph::param`] when `trainable`, otherwise [`Graph::frozen`].
    pub fn bind(&mut self, p: &Param, trainable: bool) -> Var {
        if trainable {
            self.param(p)
        } else {
            self.frozen(p)
        }
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape size");
        let value = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(value, rows, cols, Op::Reshape(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, m, n, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dimension");
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, m, n, Op::MatMulT(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape");
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, r, c, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(a);
        self.push(out, r, c, Op::Scale(a, k), ng)
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row bias shape");
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        self.push(out, r, c, Op::AddRow(a, row), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let ng = self.ng(a);
        self.push(out, r, c, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, r, c, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with learnable `1×cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let xv = self.value(x);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let out = xhat.iter().enumerate().map(|(i, &h)| h * g[i % c] + b[i % c]).collect();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Output element `i` is `src[idx[i]]`, or zero when `idx[i] == ZERO_SLOT`.
    pub fn take(&mut self, src: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "take index length");
        let s = self.value(src);
        let out = idx.iter().map(|&i| if i == ZERO_SLOT { 0.0 } else { s[i] }).collect();
        let ng = self.ng(src);
        self.push(out, rows, cols, Op::Take { src, idx }, ng)
    }

    /// Selects whole rows of `src` (rows may repeat).
    pub fn take_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let (_, c) = self.shape(src);
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
        self.take(src, Arc::new(idx), rows.len(), c)
    }

    /// Selects a contiguous column range of `src`.
    pub fn take_cols(&mut self, src: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.shape(src);
        assert!(start + width <= c);
        let idx: Vec<usize> = (0..r)
            .flat_map(|i| (start..start + width).map(move |j| i * c + j))
            .collect();
        self.take(src, Arc::new(idx), r, width)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column count");
            out.extend_from_slice(self.value(p));
            rows += r;
            ng |= self.ng(p);
        }
        self.push(out, rows, c, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, r, "concat_cols row count");
                self.shape(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        let mut ng = false;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
            ng |= self.ng(p);
        }
        self.push(out, r, total, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Per-channel local filter over tokens: `out[t][c] = b[c] + Σ_k w[c][k]·x[nbr[t][k]][c]`.
    ///
    /// `neighbors` holds `taps` token indices per output token, `ZERO_SLOT`
    /// for positions outside the grid.
    pub fn token_conv(&mut self, x: Var, weight: Var, bias: Var, neighbors: Arc<Vec<usize>>, taps: usize) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(weight), (c, taps), "token_conv weight shape");
        assert_eq!(self.shape(bias), (1, c), "token_conv bias shape");
        assert_eq!(neighbors.len(), n * taps, "token_conv neighbor table");
        let xv = self.value(x);
        let w = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            let o = &mut out[t * c..(t + 1) * c];
            o.copy_from_slice(b);
            for k in 0..taps {
                let src = neighbors[t * taps + k];
                if src == ZERO_SLOT {
                    continue;
                }
                for ch in 0..c {
                    o[ch] += w[ch * taps + k] * xv[src * c + ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(weight) || self.ng(bias);
        self.push(
            out,
            n,
            c,
            Op::TokenConv {
                x,
                weight,
                bias,
                neighbors,
                taps,
            },
            ng,
        )
    }

    /// One KAN layer applied to each row of `x` (see [`crate::kan`]).
    pub fn kan(
        &mut self,
        x: Var,
        inner_coef: Var,
        inner_w: Var,
        outer_coef: Var,
        outer_w: Var,
        basis: SplineBasis,
    ) -> Var {
        let (rows, n_in) = self.shape(x);
        let (n_out, iw_cols) = self.shape(inner_w);
        assert_eq!(iw_cols, n_in, "kan inner weight width");
        assert_eq!(
            self.shape(inner_coef),
            (n_out, n_in * basis.size),
            "kan inner coef shape"
        );
        assert_eq!(self.shape(outer_coef), (n_out, basis.size), "kan outer coef shape");
        assert_eq!(self.shape(outer_w), (1, n_out), "kan outer weight shape");
        let xv = self.value(x);
        let ic = self.value(inner_coef);
        let iw = self.value(inner_w);
        let oc = self.value(outer_coef);
        let ow = self.value(outer_w);
        let mut u = vec![0.0; rows * n_out];
        let mut out = vec![0.0; rows * n_out];
        let nb = basis.size;
        for r in 0..rows {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            let active: Vec<_> = xr.iter().map(|&t| basis.active(t)).collect();
            for q in 0..n_out {
                let coef_row = &ic[q * n_in * nb..(q + 1) * n_in * nb];
                let w_row = &iw[q * n_in..(q + 1) * n_in];
                let mut acc = 0.0;
                for p in 0..n_in {
                    acc += w_row[p] * xr[p];
                    let a = &active[p];
                    let base = p * nb + a.start;
                    for k in 0..a.count {
                        acc += coef_row[base + k] * a.values[k];
                    }
                }
                u[r * n_out + q] = acc;
                let a = basis.active(acc);
                let mut y = ow[q] * acc;
                for k in 0..a.count {
                    y += oc[q * nb + a.start + k] * a.values[k];
                }
                out[r * n_out + q] = y;
            }
        }
        let ng = [x, inner_coef, inner_w, outer_coef, outer_w]
            .iter()
            .any(|&v| self.ng(v));
        self.push(
            out,
            rows,
            n_out,
            Op::Kan {
                x,
                inner_coef,
                inner_w,
                outer_coef,
                outer_w,
                basis,
                u,
            },
            ng,
        )
    }

    /// Clamps to `[0, 1]`; gradient passes only where the input is inside.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.clamp(0.0, 1.0)).collect();
        let ng = self.ng(a);
        self.push(out, r, c, Op::Clamp01(a), ng)
    }

    /// Mean squared error between equally shaped nodes, as a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape");
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![s / n], 1, 1, Op::Mse(a, b), ng)
    }

    /// `KL(softmax(student/τ) ‖ softmax(target/τ))` per row, averaged over rows.
    /// The target is a constant.
    pub fn kl_softmax(&mut self, student: Var, target: &[f64], tau: f64) -> Var {
        let (r, c) = self.shape(student);
        assert_eq!(target.len(), r * c, "kl target shape");
        let mut log_p = vec![0.0; r * c];
        let mut log_q = vec![0.0; r * c];
        let mut row_kl = vec![0.0; r];
        let sv = self.value(student);
        for i in 0..r {
            log_softmax_scaled(&sv[i * c..(i + 1) * c], tau, &mut log_p[i * c..(i + 1) * c]);
            log_softmax_scaled(&target[i * c..(i + 1) * c], tau, &mut log_q[i * c..(i + 1) * c]);
            row_kl[i] = (0..c)
                .map(|j| {
                    let lp = log_p[i * c + j];
                    lp.exp() * (lp - log_q[i * c + j])
                })
                .sum::<f64>()
                .max(0.0);
        }
        let mean = row_kl.iter().sum::<f64>() / r as f64;
        let ng = self.ng(student);
        self.push(
            vec![mean],
            1,
            1,
            Op::KlSoftmax {
                student,
                log_p,
                log_q,
                row_kl,
                tau,
            },
            ng,
        )
    }

    /// Sum of squares as a 1×1 node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(vec![s], 1, 1, Op::SumSq(a), ng)
    }

    /// `sqrt(k / a)` for a 1×1 node; zero when `a == 0`.
    pub fn rsqrt_scaled(&mut self, a: Var, k: f64) -> Var {
        let x = self.scalar(a);
        let y = if x > 0.0 { (k / x).sqrt() } else { 0.0 };
        let ng = self.ng(a);
        self.push(vec![y], 1, 1, Op::RsqrtScaled(a), ng)
    }

    /// Multiplies every element by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(a) || self.ng(s);
        self.push(out, r, c, Op::ScaleBy(a, s), ng)
    }

    /// Divides every element by the 1×1 node `s`; zero output when `s == 0`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let (r, c) = self.shape(a);
        let out = if k == 0.0 {
            vec![0.0; r * c]
        } else {
            self.value(a).iter().map(|x| x / k).collect()
        };
        let ng = self.ng(a) || self.ng(s);
        self.push(out, r, c, Op::DivBy(a, s), ng)
    }

    /// Treats consecutive element pairs as `re, im` and multiplies by `h`.
    pub fn complex_scale(&mut self, a: Var, h: Complex64) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r * c) % 2, 0, "complex_scale needs interleaved pairs");
        let mut out = self.value(a).to_vec();
        for pair in out.chunks_mut(2) {
            let z = Complex64::new(pair[0], pair[1]) * h;
            pair[0] = z.re;
            pair[1] = z.im;
        }
        let ng = self.ng(a);
        self.push(out, r, c, Op::ComplexScale(a, h), ng)
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient of every registered parameter, keyed by name (zeros if unused).
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::new();
        for (v, name) in &self.params {
            let g = grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
            match out.get_mut(name) {
                Some(acc) => add_into(acc, &g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(a) => self.acc(grads, *a, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b), &mut da, m, n, k);
                    self.acc_owned(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a), g, &mut db, m, k, n);
                    self.acc_owned(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, self.value(*b), &mut da, m, n, k);
                    self.acc_owned(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, self.value(*a), &mut db, m, n, k);
                    self.acc_owned(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.ng(*b) {
                    self.acc_owned(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    self.acc_owned(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    self.acc_owned(grads, *b, d);
                }
            }
            Op::Scale(a, k) => {
                if self.ng(*a) {
                    self.acc_owned(grads, *a, g.iter().map(|x| x * k).collect());
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g);
                if self.ng(*row) {
                    let c = node.cols;
                    let mut d = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        add_into(&mut d, chunk);
                    }
                    self.acc_owned(grads, *row, d);
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let d = g.iter().zip(self.value(*a)).map(|(gi, &x)| gi * gelu(x).1).collect();
                    self.acc_owned(grads, *a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let c = node.cols;
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc_owned(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.cols;
                let gv = self.value(*gain);
                if self.ng(*gain) {
                    let mut d = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                    self.acc_owned(grads, *gain, d);
                }
                if self.ng(*bias) {
                    let mut d = vec![0.0; c];
                    for gr in g.chunks(c) {
                        add_into(&mut d, gr);
                    }
                    self.acc_owned(grads, *bias, d);
                }
                if self.ng(*x) {
                    let mut d = vec![0.0; g.len()];
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    self.acc_owned(grads, *x, d);
                }
            }
            Op::Take { src, idx } => {
                if self.ng(*src) {
                    let mut d = vec![0.0; self.value(*src).len()];
                    for (&i, &gi) in idx.iter().zip(g) {
                        if i != ZERO_SLOT {
                            d[i] += gi;
                        }
                    }
                    self.acc_owned(grads, *src, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let r = node.rows;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let mut d = vec![0.0; r * w];
                        for i in 0..r {
                            d[i * w..(i + 1) * w].copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.acc_owned(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::TokenConv {
                x,
                weight,
                bias,
                neighbors,
                taps,
            } => {
                let (n, c) = self.shape(*x);
                let taps = *taps;
                let xv = self.value(*x);
                let w = self.value(*weight);
                if self.ng(*bias) {
                    let mut d = vec![0.0; c];
                    for gr in g.chunks(c) {
                        add_into(&mut d, gr);
                    }
                    self.acc_owned(grads, *bias, d);
                }
                let want_w = self.ng(*weight);
                let want_x = self.ng(*x);
                let mut dw = vec![0.0; if want_w { c * taps } else { 0 }];
                let mut dx = vec![0.0; if want_x { n * c } else { 0 }];
                for t in 0..n {
                    let gr = &g[t * c..(t + 1) * c];
                    for k in 0..taps {
                        let src = neighbors[t * taps + k];
                        if src == ZERO_SLOT {
                            continue;
                        }
                        for ch in 0..c {
                            if want_w {
                                dw[ch * taps + k] += gr[ch] * xv[src * c + ch];
                            }
                            if want_x {
                                dx[src * c + ch] += gr[ch] * w[ch * taps + k];
                            }
                        }
                    }
                }
                if want_w {
                    self.acc_owned(grads, *weight, dw);
                }
                if want_x {
                    self.acc_owned(grads, *x, dx);
                }
            }
            Op::Kan {
                x,
                inner_coef,
                inner_w,
                outer_coef,
                outer_w,
                basis,
                u,
            } => self.kan_backward(
                node,
                g,
                grads,
                *x,
                *inner_coef,
                *inner_w,
                *outer_coef,
                *outer_w,
                basis,
                u,
            ),
            Op::Clamp01(a) => {
                if self.ng(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(gi, &x)| if (0.0..=1.0).contains(&x) { *gi } else { 0.0 })
                        .collect();
                    self.acc_owned(grads, *a, d);
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let k = 2.0 * g[0] / n;
                let diff: Vec<f64> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| k * (x - y))
                    .collect();
                if self.ng(*b) {
                    self.acc_owned(grads, *b, diff.iter().map(|d| -d).collect());
                }
                if self.ng(*a) {
                    self.acc_owned(grads, *a, diff);
                }
            }
            Op::KlSoftmax {
                student,
                log_p,
                log_q,
                row_kl,
                tau,
            } => {
                if self.ng(*student) {
                    let (r, c) = self.shape(*student);
                    let k = g[0] / (r as f64 * tau);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let lp = log_p[i * c + j];
                            d[i * c + j] = k * lp.exp() * (lp - log_q[i * c + j] - row_kl[i]);
                        }
                    }
                    self.acc_owned(grads, *student, d);
                }
            }
            Op::SumSq(a) => {
                if self.ng(*a) {
                    let d = self.value(*a).iter().map(|x| 2.0 * x * g[0]).collect();
                    self.acc_owned(grads, *a, d);
                }
            }
            Op::RsqrtScaled(a) => {
                if self.ng(*a) {
                    let x = self.scalar(*a);
                    let y = node.value[0];
                    // d/dx sqrt(k/x) = -y / (2x)
                    let d = if x > 0.0 { -y / (2.0 * x) * g[0] } else { 0.0 };
                    self.acc_owned(grads, *a, vec![d]);
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                if self.ng(*a) {
                    self.acc_owned(grads, *a, g.iter().map(|x| x * k).collect());
                }
                if self.ng(*s) {
                    let d: f64 = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).sum();
                    self.acc_owned(grads, *s, vec![d]);
                }
            }
            Op::DivBy(a, s) => {
                let k = self.scalar(*s);
                if k == 0.0 {
                    return;
                }
                if self.ng(*a) {
                    self.acc_owned(grads, *a, g.iter().map(|x| x / k).collect());
                }
                if self.ng(*s) {
                    let d: f64 = g.iter().zip(&node.value).map(|(x, y)| x * y).sum::<f64>() / -k;
                    self.acc_owned(grads, *s, vec![d]);
                }
            }
            Op::ComplexScale(a, h) => {
                if self.ng(*a) {
                    let hc = h.conj();
                    let mut d = g.to_vec();
                    for pair in d.chunks_mut(2) {
                        let z = Complex64::new(pair[0], pair[1]) * hc;
                        pair[0] = z.re;
                        pair[1] = z.im;
                    }
                    self.acc_owned(grads, *a, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn kan_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        inner_coef: Var,
        inner_w: Var,
        outer_coef: Var,
        outer_w: Var,
        basis: &SplineBasis,
        u: &[f64],
    ) {
        let (rows, n_in) = self.shape(x);
        let n_out = node.cols;
        let nb = basis.size;
        let xv = self.value(x);
        let ic = self.value(inner_coef);
        let iw = self.value(inner_w);
        let oc = self.value(outer_coef);
        let ow = self.value(outer_w);
        let mut d_ic = vec![0.0; ic.len()];
        let mut d_iw = vec![0.0; iw.len()];
        let mut d_oc = vec![0.0; oc.len()];
        let mut d_ow = vec![0.0; ow.len()];
        let mut d_x = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            let active: Vec<_> = xr.iter().map(|&t| basis.active(t)).collect();
            for q in 0..n_out {
                let gq = g[r * n_out + q];
                if gq == 0.0 {
                    continue;
                }
                let uq = u[r * n_out + q];
                let a = basis.active(uq);
                // outer φ_q
                d_ow[q] += gq * uq;
                let mut dphi = ow[q];
                for k in 0..a.count {
                    d_oc[q * nb + a.start + k] += gq * a.values[k];
                    dphi += oc[q * nb + a.start + k] * a.derivs[k];
                }
                let gu = gq * dphi;
                // inner ψ_qp
                let coef_row = &ic[q * n_in * nb..(q + 1) * n_in * nb];
                for p in 0..n_in {
                    d_iw[q * n_in + p] += gu * xr[p];
                    let ap = &active[p];
                    let base = p * nb + ap.start;
                    let mut dpsi = iw[q * n_in + p];
                    for k in 0..ap.count {
                        d_ic[q * n_in * nb + base + k] += gu * ap.values[k];
                        dpsi += coef_row[base + k] * ap.derivs[k];
                    }
                    d_x[r * n_in + p] += gu * dpsi;
                }
            }
        }
        if self.ng(inner_coef) {
            self.acc_owned(grads, inner_coef, d_ic);
        }
        if self.ng(inner_w) {
            self.acc_owned(grads, inner_w, d_iw);
        }
        if self.ng(outer_coef) {
            self.acc_owned(grads, outer_coef, d_oc);
        }
        if self.ng(outer_w) {
            self.acc_owned(grads, outer_w, d_ow);
        }
        if self.ng(x) {
            self.acc_owned(grads, x, d_x);
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn acc_owned(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Returns `(gelu(x), gelu'(x))` for the tanh approximation.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_scaled(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = z.iter().map(|v| (v / tau - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(z) {
        *o = v / tau - lse;
    }
}

/// `out += a(m×k) · b(k×n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// `out += a(m×k) · b(n×k)ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a(m×k)ᵀ · b(m×n)`, giving a k×n result.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}
