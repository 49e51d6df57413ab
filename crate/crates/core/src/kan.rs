//! Kolmogorov–Arnold layers built from learnable univariate functions.
//!
//! Every edge function is a cubic B-spline expansion on a fixed uniform grid
//! plus a residual linear term:
//!
//! ```text
//! f(t) = Σ_j c_j · B_j(t) + w · t
//! ```
//!
//! The grid places `size` cubic B-splines so that every support lies inside
//! `[lo, hi]`; outside that interval only the linear term contributes. A layer
//! with `n_in` inputs and `n_out` outputs computes, for each output `q`,
//! `u_q = Σ_p ψ_qp(x_p)` followed by `y_q = φ_q(u_q)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bra::SemanticRepresentation;
use crate::error::{Error, Result};
use crate::tape::{Graph, Param, Parameterized, Var};

/// Fixed uniform cubic B-spline grid shared by every edge function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub lo: f64,
    pub hi: f64,
    pub size: usize,
}

impl Default for SplineBasis {
    fn default() -> Self {
        SplineBasis {
            lo: -3.0,
            hi: 3.0,
            size: 8,
        }
    }
}

/// The (at most four) basis functions that are non-zero at a point.
#[derive(Debug, Clone, Copy, Default)]
pub struct ActiveBasis {
    pub start: usize,
    pub count: usize,
    pub values: [f64; 4],
    pub derivs: [f64; 4],
}

impl SplineBasis {
    /// Knot spacing; `size + 3` intervals span `[lo, hi]`.
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.size + 3) as f64
    }

    /// Knot `i`, for `i` in `0..=size + 3`.
    pub fn knot(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    pub fn active(&self, t: f64) -> ActiveBasis {
        let mut out = ActiveBasis::default();
        if !(t >= self.lo && t < self.hi) {
            return out;
        }
        let h = self.spacing();
        let pos = (t - self.lo) / h;
        let interval = (pos.floor() as usize).min(self.size + 2);
        let first = interval.saturating_sub(3);
        let last = interval.min(self.size - 1);
        out.start = first;
        for j in first..=last {
            let (v, d) = cubic_bspline(pos - j as f64);
            out.values[out.count] = v;
            out.derivs[out.count] = d / h;
            out.count += 1;
        }
        out
    }

    /// Value of basis function `j` at `t`.
    pub fn eval(&self, j: usize, t: f64) -> f64 {
        let a = self.active(t);
        if j >= a.start && j < a.start + a.count {
            a.values[j - a.start]
        } else {
            0.0
        }
    }
}

/// Cardinal cubic B-spline on `[0, 4)` and its derivative.
fn cubic_bspline(u: f64) -> (f64, f64) {
    if !(0.0..4.0).contains(&u) {
        (0.0, 0.0)
    } else if u < 1.0 {
        (u * u * u / 6.0, u * u / 2.0)
    } else if u < 2.0 {
        (
            (-3.0 * u * u * u + 12.0 * u * u - 12.0 * u + 4.0) / 6.0,
            (-3.0 * u * u + 8.0 * u - 4.0) / 2.0,
        )
    } else if u < 3.0 {
        (
            (3.0 * u * u * u - 24.0 * u * u + 60.0 * u - 44.0) / 6.0,
            (3.0 * u * u - 16.0 * u + 20.0) / 2.0,
        )
    } else {
        let v = 4.0 - u;
        (v * v * v / 6.0, -v * v / 2.0)
    }
}

/// Parameters of one learnable univariate function.
#[derive(Debug, Clone, Copy)]
pub struct UnivariateFn<'a> {
    pub coef: &'a [f64],
    pub residual: f64,
}

pub fn univariate_eval(f: UnivariateFn<'_>, basis: &SplineBasis, t: f64) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::NonFinite("univariate input"));
    }
    if f.coef.len() != basis.size {
        return Err(Error::shape("univariate coefficients", basis.size, f.coef.len()));
    }
    let a = basis.active(t);
    let mut y = f.residual * t;
    for k in 0..a.count {
        y += f.coef[a.start + k] * a.values[k];
    }
    Ok(y)
}

/// One KAN layer.
///
/// Layout: `inner_coef` is `n_out × (n_in·size)`, `inner_w` is `n_out × n_in`,
/// `outer_coef` is `n_out × size`, `outer_w` is `1 × n_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub basis: SplineBasis,
    pub inner_coef: Param,
    pub inner_w: Param,
    pub outer_coef: Param,
    pub outer_w: Param,
}

impl KanLayer {
    pub fn new<R: Rng>(prefix: &str, n_in: usize, n_out: usize, basis: SplineBasis, rng: &mut R) -> Self {
        let scale = 1.0 / (n_in as f64).sqrt();
        KanLayer {
            n_in,
            n_out,
            basis,
            inner_coef: Param::normal(
                format!("{prefix}.inner_coef"),
                n_out,
                n_in * basis.size,
                0.1 * scale,
                rng,
            ),
            inner_w: Param::normal(format!("{prefix}.inner_w"), n_out, n_in, scale, rng),
            outer_coef: Param::normal(format!("{prefix}.outer_coef"), n_out, basis.size, 0.01, rng),
            outer_w: Param::filled(format!("{prefix}.outer_w"), 1, n_out, 1.0),
        }
    }

    /// All edge functions zero.
    pub fn zeros(prefix: &str, n_in: usize, n_out: usize, basis: SplineBasis) -> Self {
        KanLayer {
            n_in,
            n_out,
            basis,
            inner_coef: Param::zeros(format!("{prefix}.inner_coef"), n_out, n_in * basis.size),
            inner_w: Param::zeros(format!("{prefix}.inner_w"), n_out, n_in),
            outer_coef: Param::zeros(format!("{prefix}.outer_coef"), n_out, basis.size),
            outer_w: Param::zeros(format!("{prefix}.outer_w"), 1, n_out),
        }
    }

    /// Every ψ and φ is the identity, so the layer sums its inputs into each output.
    pub fn identity(prefix: &str, n_in: usize, n_out: usize, basis: SplineBasis) -> Self {
        let mut layer = Self::zeros(prefix, n_in, n_out, basis);
        layer.inner_w.data.fill(1.0);
        layer.outer_w.data.fill(1.0);
        layer
    }

    pub fn inner_fn(&self, q: usize, p: usize) -> UnivariateFn<'_> {
        let nb = self.basis.size;
        let start = (q * self.n_in + p) * nb;
        UnivariateFn {
            coef: &self.inner_coef.data[start..start + nb],
            residual: self.inner_w.data[q * self.n_in + p],
        }
    }

    pub fn outer_fn(&self, q: usize) -> UnivariateFn<'_> {
        let nb = self.basis.size;
        UnivariateFn {
            coef: &self.outer_coef.data[q * nb..(q + 1) * nb],
            residual: self.outer_w.data[q],
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Var {
        let ic = g.param(&self.inner_coef);
        let iw = g.param(&self.inner_w);
        let oc = g.param(&self.outer_coef);
        let ow = g.param(&self.outer_w);
        g.kan(x, ic, iw, oc, ow, self.basis)
    }

    fn check_finite(&self) -> Result<()> {
        if self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite())) {
            Ok(())
        } else {
            Err(Error::NonFinite("kan coefficients"))
        }
    }
}

impl Parameterized for KanLayer {
    fn params(&self) -> Vec<&Param> {
        vec![&self.inner_coef, &self.inner_w, &self.outer_coef, &self.outer_w]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.inner_coef,
            &mut self.inner_w,
            &mut self.outer_coef,
            &mut self.outer_w,
        ]
    }
}

/// Evaluates one layer on a single input vector.
pub fn kan_forward(x: &[f64], layer: &KanLayer) -> Result<Vec<f64>> {
    if x.len() != layer.n_in {
        return Err(Error::shape("kan_forward input", layer.n_in, x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kan_forward input"));
    }
    layer.check_finite()?;
    let basis = &layer.basis;
    let active: Vec<_> = x.iter().map(|&t| basis.active(t)).collect();
    let mut out = Vec::with_capacity(layer.n_out);
    for q in 0..layer.n_out {
        let mut u = 0.0;
        for (p, a) in active.iter().enumerate() {
            let f = layer.inner_fn(q, p);
            u += f.residual * x[p];
            for k in 0..a.count {
                u += f.coef[a.start + k] * a.values[k];
            }
        }
        out.push(univariate_eval(layer.outer_fn(q), basis, u)?);
    }
    Ok(out)
}

/// A stack of KAN layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    /// Layers with widths `n_in → hidden[0] → … → n_out`.
    pub fn new<R: Rng>(
        prefix: &str,
        n_in: usize,
        hidden: &[usize],
        n_out: usize,
        basis: SplineBasis,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| KanLayer::new(&format!("{prefix}.{i}"), w[0], w[1], basis, rng))
            .collect();
        KanStack { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = kan_forward(&h, layer)?;
        }
        Ok(h)
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward_graph(g, h))
    }
}

impl Parameterized for KanStack {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Compression class of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CrClass {
    /// Static frame, short encoding.
    StaticHighCr,
    /// Dynamic frame, long encoding.
    DynamicLowCr,
}

impl CrClass {
    /// Binary compression flag: 1 for compressed (static) frames.
    pub fn flag(self) -> u8 {
        match self {
            CrClass::StaticHighCr => 1,
            CrClass::DynamicLowCr => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CrClass::StaticHighCr => "STATIC_HIGH_CR",
            CrClass::DynamicLowCr => "DYNAMIC_LOW_CR",
        }
    }
}

/// Encoding length per compression class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrLengths {
    pub static_high: usize,
    pub dynamic_low: usize,
}

impl Default for CrLengths {
    fn default() -> Self {
        CrLengths {
            static_high: 16,
            dynamic_low: 256,
        }
    }
}

impl CrLengths {
    pub fn length(&self, cr: CrClass) -> usize {
        match cr {
            CrClass::StaticHighCr => self.static_high,
            CrClass::DynamicLowCr => self.dynamic_low,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.static_high == 0 || self.static_high >= self.dynamic_low {
            return Err(Error::Config(format!(
                "encoding lengths must satisfy 0 < static ({}) < dynamic ({})",
                self.static_high, self.dynamic_low
            )));
        }
        Ok(())
    }
}

/// Real-valued semantic codeword of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEncoding {
    pub values: Vec<f64>,
    pub cr: CrClass,
    pub frame_index: usize,
}

/// Flattens `s` and maps it through `encoder`, whose width must equal the class length.
pub fn encode_semantics(
    s: &SemanticRepresentation,
    cr: CrClass,
    lengths: &CrLengths,
    encoder: &KanStack,
) -> Result<SemanticEncoding> {
    let want = lengths.length(cr);
    if encoder.n_out() != want {
        return Err(Error::Missing(format!(
            "no encoder for {} (length {want}); got width {}",
            cr.as_str(),
            encoder.n_out()
        )));
    }
    if encoder.n_in() != s.data.len() {
        return Err(Error::shape("encode_semantics input", encoder.n_in(), s.data.len()));
    }
    let values = encoder.forward(&s.data)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("semantic encoding"));
    }
    Ok(SemanticEncoding {
        values,
        cr,
        frame_index: s.frame_index,
    })
}

/// Receiver-side expansion of a (received) encoding back to a token grid.
pub fn expand_semantics(
    e_hat: &SemanticEncoding,
    expander: &KanStack,
    tokens: usize,
    dim: usize,
) -> Result<SemanticRepresentation> {
    if e_hat.values.len() != expander.n_in() {
        return Err(Error::shape(
            "expand_semantics input",
            expander.n_in(),
            e_hat.values.len(),
        ));
    }
    if expander.n_out() != tokens * dim {
        return Err(Error::shape("expand_semantics output", tokens * dim, expander.n_out()));
    }
    let data = expander.forward(&e_hat.values)?;
    Ok(SemanticRepresentation {
        tokens,
        dim,
        data,
        frame_index: e_hat.frame_index,
    })
}
