//! Semantic extraction with bi-level routing attention.
//!
//! A frame is cut into `patch × patch` tokens, the token grid is split into
//! regions, and every region attends only to the tokens of its `k` most
//! related regions. Tokens are stored region-major: all tokens of region 0,
//! then region 1, and so on.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::tape::{Graph, Param, Parameterized, Var, ZERO_SLOT};

/// Side of the square local-context filter.
pub const LCE_KERNEL: usize = 5;

/// Token grid split into a grid of equally sized regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub regions_y: usize,
    pub regions_x: usize,
}

impl TokenLayout {
    pub fn new(grid_h: usize, grid_w: usize, regions_y: usize, regions_x: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || regions_y == 0 || regions_x == 0 {
            return Err(Error::InvalidInput("token layout dimensions must be positive".into()));
        }
        if !grid_h.is_multiple_of(regions_y) || !grid_w.is_multiple_of(regions_x) {
            return Err(Error::InvalidInput(format!(
                "token grid {grid_h}x{grid_w} not divisible into {regions_y}x{regions_x} regions"
            )));
        }
        Ok(TokenLayout {
            grid_h,
            grid_w,
            regions_y,
            regions_x,
        })
    }

    /// Layout for an `height × width` frame with `patch`-pixel tokens.
    pub fn for_frame(height: usize, width: usize, patch: usize, regions_y: usize, regions_x: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::InvalidInput(format!(
                "frame {height}x{width} not divisible by patch {patch}"
            )));
        }
        Self::new(height / patch, width / patch, regions_y, regions_x)
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_regions(&self) -> usize {
        self.regions_y * self.regions_x
    }

    pub fn region_h(&self) -> usize {
        self.grid_h / self.regions_y
    }

    pub fn region_w(&self) -> usize {
        self.grid_w / self.regions_x
    }

    pub fn tokens_per_region(&self) -> usize {
        self.region_h() * self.region_w()
    }

    /// Grid `(row, col)` of region-major token `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        let tpr = self.tokens_per_region();
        let (r, l) = (t / tpr, t % tpr);
        let (ry, rx) = (r / self.regions_x, r % self.regions_x);
        let (ly, lx) = (l / self.region_w(), l % self.region_w());
        (ry * self.region_h() + ly, rx * self.region_w() + lx)
    }

    /// Region-major index of the token at grid `(row, col)`.
    pub fn token_at(&self, row: usize, col: usize) -> usize {
        let (ry, ly) = (row / self.region_h(), row % self.region_h());
        let (rx, lx) = (col / self.region_w(), col % self.region_w());
        (ry * self.regions_x + rx) * self.tokens_per_region() + ly * self.region_w() + lx
    }

    /// Token indices of region `r`.
    pub fn region_tokens(&self, r: usize) -> std::ops::Range<usize> {
        let tpr = self.tokens_per_region();
        r * tpr..(r + 1) * tpr
    }

    /// `kernel²` neighbor slots per token, row-major over offsets, `ZERO_SLOT`
    /// outside the grid.
    pub fn neighbor_table(&self, kernel: usize) -> Vec<usize> {
        let half = (kernel / 2) as isize;
        let mut out = Vec::with_capacity(self.n_tokens() * kernel * kernel);
        for t in 0..self.n_tokens() {
            let (row, col) = self.position(t);
            for dy in -half..=half {
                for dx in -half..=half {
                    let (y, x) = (row as isize + dy, col as isize + dx);
                    if y < 0 || x < 0 || y >= self.grid_h as isize || x >= self.grid_w as isize {
                        out.push(ZERO_SLOT);
                    } else {
                        out.push(self.token_at(y as usize, x as usize));
                    }
                }
            }
        }
        out
    }
}

/// Index tables tying a frame shape to its token layout.
#[derive(Debug, Clone)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub layout: TokenLayout,
    /// For each `(token, offset)` slot, the flat pixel index.
    pub gather: Arc<Vec<usize>>,
    /// For each flat pixel, its `(token, offset)` slot.
    pub scatter: Arc<Vec<usize>>,
    pub neighbors: Arc<Vec<usize>>,
}

impl PatchGeometry {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        regions_y: usize,
        regions_x: usize,
    ) -> Result<Self> {
        let layout = TokenLayout::for_frame(height, width, patch, regions_y, regions_x)?;
        let p = patch * patch * channels;
        let mut gather = vec![0; layout.n_tokens() * p];
        let mut scatter = vec![0; height * width * channels];
        for t in 0..layout.n_tokens() {
            let (row, col) = layout.position(t);
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..channels {
                        let pix = ((row * patch + dy) * width + col * patch + dx) * channels + c;
                        let slot = t * p + (dy * patch + dx) * channels + c;
                        gather[slot] = pix;
                        scatter[pix] = slot;
                    }
                }
            }
        }
        Ok(PatchGeometry {
            height,
            width,
            channels,
            patch,
            layout,
            gather: Arc::new(gather),
            scatter: Arc::new(scatter),
            neighbors: Arc::new(layout.neighbor_table(LCE_KERNEL)),
        })
    }

    /// Flattened pixels per patch.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.shape() != (self.height, self.width, self.channels) {
            return Err(Error::shape(
                "frame",
                format!("{}x{}x{}", self.height, self.width, self.channels),
                format!("{}x{}x{}", frame.height, frame.width, frame.channels),
            ));
        }
        Ok(())
    }
}

/// Region-major token features, `n_tokens × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTokens {
    pub layout: TokenLayout,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl RegionTokens {
    pub fn new(layout: TokenLayout, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.n_tokens() * dim {
            return Err(Error::shape("region tokens", layout.n_tokens() * dim, data.len()));
        }
        Ok(RegionTokens { layout, dim, data })
    }

    /// Features of every token in region `r`, row-major.
    pub fn region(&self, r: usize) -> &[f64] {
        let range = self.layout.region_tokens(r);
        &self.data[range.start * self.dim..range.end * self.dim]
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Per-region token mean, `n_regions × dim`.
    pub fn region_means(&self) -> Vec<f64> {
        let tpr = self.layout.tokens_per_region() as f64;
        let mut out = vec![0.0; self.layout.n_regions() * self.dim];
        for r in 0..self.layout.n_regions() {
            for tok in self.region(r).chunks(self.dim) {
                for (o, v) in out[r * self.dim..(r + 1) * self.dim].iter_mut().zip(tok) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= tpr);
        out
    }
}

/// Token grid handed from the extractor to the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRepresentation {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub frame_index: usize,
}

/// Regions retained per region, most related first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingIndex {
    pub k: usize,
    pub rows: Vec<Vec<usize>>,
}

impl RoutingIndex {
    pub fn validate(&self, n_regions: usize) -> Result<()> {
        if self.rows.len() != n_regions {
            return Err(Error::shape("routing rows", n_regions, self.rows.len()));
        }
        for row in &self.rows {
            if row.len() != self.k {
                return Err(Error::shape("routing row", self.k, row.len()));
            }
            if let Some(&bad) = row.iter().find(|&&i| i >= n_regions) {
                return Err(Error::InvalidInput(format!(
                    "region index {bad} out of range {n_regions}"
                )));
            }
            let mut seen = row.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != row.len() {
                return Err(Error::InvalidInput("routing row repeats a region".into()));
            }
        }
        Ok(())
    }
}

/// Learned linear patch embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbed {
    /// `patch_len × dim`.
    pub weight: Param,
    /// `1 × dim`.
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkvProjection {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
}

/// Per-channel local filter over the value grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LceParams {
    /// `dim × kernel²`.
    pub weight: Param,
    /// `1 × dim`.
    pub bias: Param,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BraConfig {
    pub patch: usize,
    pub regions_y: usize,
    pub regions_x: usize,
    pub dim: usize,
    pub top_k: usize,
    pub heads: usize,
    pub lce: bool,
}

impl Default for BraConfig {
    fn default() -> Self {
        BraConfig {
            patch: 8,
            regions_y: 4,
            regions_x: 4,
            dim: 64,
            top_k: 4,
            heads: 1,
            lce: true,
        }
    }
}

impl BraConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.regions_y * self.regions_x;
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::InvalidInput(format!("top_k {} outside [1, {n}]", self.top_k)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn geometry(&self, height: usize, width: usize, channels: usize) -> Result<PatchGeometry> {
        PatchGeometry::new(height, width, channels, self.patch, self.regions_y, self.regions_x)
    }
}

/// Parameters of the full extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BraParams {
    pub config: BraConfig,
    pub embed: PatchEmbed,
    pub qkv: QkvProjection,
    pub lce: Option<LceParams>,
    pub proj_w: Param,
    pub proj_b: Param,
}

impl BraParams {
    pub fn new<R: Rng>(prefix: &str, config: BraConfig, channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p = config.patch * config.patch * channels;
        let sd = 1.0 / (d as f64).sqrt();
        let taps = LCE_KERNEL * LCE_KERNEL;
        Ok(BraParams {
            config,
            embed: PatchEmbed {
                weight: Param::normal(format!("{prefix}.embed.w"), p, d, 1.0 / (p as f64).sqrt(), rng),
                bias: Param::zeros(format!("{prefix}.embed.b"), 1, d),
            },
            qkv: QkvProjection {
                w_q: Param::normal(format!("{prefix}.w_q"), d, d, sd, rng),
                w_k: Param::normal(format!("{prefix}.w_k"), d, d, sd, rng),
                w_v: Param::normal(format!("{prefix}.w_v"), d, d, sd, rng),
            },
            lce: config.lce.then(|| LceParams {
                weight: Param::normal(format!("{prefix}.lce.w"), d, taps, 0.02, rng),
                bias: Param::zeros(format!("{prefix}.lce.b"), 1, d),
            }),
            proj_w: Param::normal(format!("{prefix}.proj.w"), d, d, sd, rng),
            proj_b: Param::zeros(format!("{prefix}.proj.b"), 1, d),
        })
    }

    /// Records the extractor on `g` for the pixel row `x` (`1 × pixels`).
    ///
    /// Routing is computed from the forward values unless `routing` is given;
    /// either way it is a constant of the pass.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        geom: &PatchGeometry,
        routing: Option<&RoutingIndex>,
        trainable: bool,
    ) -> Result<BraForward> {
        let cfg = &self.config;
        let layout = geom.layout;
        if geom.patch_len() != self.embed.weight.rows {
            return Err(Error::shape(
                "patch embedding",
                self.embed.weight.rows,
                geom.patch_len(),
            ));
        }
        let n = layout.n_tokens();
        let patches = g.take(x, geom.gather.clone(), n, geom.patch_len());
        let we = g.bind(&self.embed.weight, trainable);
        let be = g.bind(&self.embed.bias, trainable);
        let emb = g.matmul(patches, we);
        let tokens = g.add_row(emb, be);

        let wq = g.bind(&self.qkv.w_q, trainable);
        let wk = g.bind(&self.qkv.w_k, trainable);
        let wv = g.bind(&self.qkv.w_v, trainable);
        let q = g.matmul(tokens, wq);
        let k = g.matmul(tokens, wk);
        let v = g.matmul(tokens, wv);

        let routing = match routing {
            Some(r) => {
                r.validate(layout.n_regions())?;
                r.clone()
            }
            None => {
                let qt = RegionTokens::new(layout, cfg.dim, g.value(q).to_vec())?;
                let kt = RegionTokens::new(layout, cfg.dim, g.value(k).to_vec())?;
                region_routing(&qt, &kt, cfg.top_k)?
            }
        };

        let mut outs = Vec::with_capacity(layout.n_regions());
        for r in 0..layout.n_regions() {
            let own: Vec<usize> = layout.region_tokens(r).collect();
            let routed: Vec<usize> = routing.rows[r].iter().flat_map(|&j| layout.region_tokens(j)).collect();
            let qr = g.take_rows(q, &own);
            let kg = g.take_rows(k, &routed);
            let vg = g.take_rows(v, &routed);
            outs.push(attend(g, qr, kg, vg, cfg.heads));
        }
        let mut o = g.concat_rows(&outs);
        if let Some(lce) = &self.lce {
            let lw = g.bind(&lce.weight, trainable);
            let lb = g.bind(&lce.bias, trainable);
            let local = g.token_conv(v, lw, lb, geom.neighbors.clone(), LCE_KERNEL * LCE_KERNEL);
            o = g.add(o, local);
        }
        let pw = g.bind(&self.proj_w, trainable);
        let pb = g.bind(&self.proj_b, trainable);
        let projected = g.matmul(o, pw);
        let s = g.add_row(projected, pb);
        Ok(BraForward { s, q, k, v, routing })
    }
}

impl Parameterized for BraParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![
            &self.embed.weight,
            &self.embed.bias,
            &self.qkv.w_q,
            &self.qkv.w_k,
            &self.qkv.w_v,
        ];
        if let Some(l) = &self.lce {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.proj_w);
        v.push(&self.proj_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![
            &mut self.embed.weight,
            &mut self.embed.bias,
            &mut self.qkv.w_q,
            &mut self.qkv.w_k,
            &mut self.qkv.w_v,
        ];
        if let Some(l) = &mut self.lce {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.proj_w);
        v.push(&mut self.proj_b);
        v
    }
}

/// Nodes of one extractor pass.
#[derive(Debug, Clone)]
pub struct BraForward {
    /// `n_tokens × dim` semantic tokens.
    pub s: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub routing: RoutingIndex,
}

/// Scaled dot-product attention of `q` over `k`/`v`, split into `heads`.
pub(crate) fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let parts: Vec<Var> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.take_cols(q, h * dh, dh),
                    g.take_cols(k, h * dh, dh),
                    g.take_cols(v, h * dh, dh),
                )
            };
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits);
            g.matmul(a, vh)
        })
        .collect();
    if heads == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}

/// Embeds every patch of `frame` with a learned linear map.
pub fn embed_patches(frame: &Frame, embed: &PatchEmbed, geom: &PatchGeometry) -> Result<RegionTokens> {
    geom.check_frame(frame)?;
    if embed.weight.rows != geom.patch_len() {
        return Err(Error::shape("patch embedding", embed.weight.rows, geom.patch_len()));
    }
    let mut g = Graph::new();
    let x = g.constant(1, geom.pixels(), frame.to_f64());
    let patches = g.take(x, geom.gather.clone(), geom.layout.n_tokens(), geom.patch_len());
    let w = g.frozen(&embed.weight);
    let b = g.frozen(&embed.bias);
    let t = g.matmul(patches, w);
    let t = g.add_row(t, b);
    RegionTokens::new(geom.layout, embed.weight.cols, g.value(t).to_vec())
}

/// Token-wise `Q = T·W_q`, `K = T·W_k`, `V = T·W_v`.
pub fn project_qkv(tokens: &RegionTokens, proj: &QkvProjection) -> Result<(RegionTokens, RegionTokens, RegionTokens)> {
    let d = tokens.dim;
    for w in [&proj.w_q, &proj.w_k, &proj.w_v] {
        if (w.rows, w.cols) != (d, d) {
            return Err(Error::shape(
                "qkv weight",
                format!("{d}x{d}"),
                format!("{}x{}", w.rows, w.cols),
            ));
        }
    }
    let mut g = Graph::new();
    let t = g.constant(tokens.layout.n_tokens(), d, tokens.data.clone());
    let [q, k, v] = [&proj.w_q, &proj.w_k, &proj.w_v].map(|w| {
        let w = g.frozen(w);
        g.matmul(t, w)
    });
    let mk = |v: Var| RegionTokens::new(tokens.layout, d, g.value(v).to_vec());
    Ok((mk(q)?, mk(k)?, mk(v)?))
}

/// Row-wise top-`k` of an `n × n` adjacency, descending, ties to the lower index.
pub fn top_k_routing(adjacency: &[f64], n: usize, k: usize) -> Result<RoutingIndex> {
    if adjacency.len() != n * n {
        return Err(Error::shape("region adjacency", n * n, adjacency.len()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("top-k {k} outside [1, {n}]")));
    }
    let rows = adjacency
        .chunks(n)
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect();
    Ok(RoutingIndex { k, rows })
}

/// Region-level routing from mean queries and keys.
pub fn region_routing(q: &RegionTokens, k: &RegionTokens, top_k: usize) -> Result<RoutingIndex> {
    if q.layout != k.layout || q.dim != k.dim {
        return Err(Error::InvalidInput("query and key token shapes differ".into()));
    }
    let n = q.layout.n_regions();
    let (qr, kr) = (q.region_means(), k.region_means());
    let mut a = vec![0.0; n * n];
    crate::tape::gemm_nt(&qr, &kr, &mut a, n, q.dim, n);
    top_k_routing(&a, n, top_k)
}

/// Keys and values gathered per region, `n_regions × (k·tokens_per_region) × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredKv {
    pub n_regions: usize,
    pub per_region: usize,
    pub dim: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl GatheredKv {
    pub fn region_keys(&self, r: usize) -> &[f64] {
        let w = self.per_region * self.dim;
        &self.keys[r * w..(r + 1) * w]
    }

    pub fn region_values(&self, r: usize) -> &[f64] {
        let w = self.per_region * self.dim;
        &self.values[r * w..(r + 1) * w]
    }
}

/// Concatenates, for each region, the tokens of its routed regions in routing order.
pub fn gather_kv(k: &RegionTokens, v: &RegionTokens, routing: &RoutingIndex) -> Result<GatheredKv> {
    if k.layout != v.layout || k.dim != v.dim {
        return Err(Error::InvalidInput("key and value token shapes differ".into()));
    }
    let n = k.layout.n_regions();
    routing.validate(n)?;
    let mut keys = Vec::with_capacity(n * routing.k * k.layout.tokens_per_region() * k.dim);
    let mut values = Vec::with_capacity(keys.capacity());
    for row in &routing.rows {
        for &j in row {
            keys.extend_from_slice(k.region(j));
            values.extend_from_slice(v.region(j));
        }
    }
    Ok(GatheredKv {
        n_regions: n,
        per_region: routing.k * k.layout.tokens_per_region(),
        dim: k.dim,
        keys,
        values,
    })
}

/// `softmax(Q·K_gᵀ/√d)·V_g` per region, plus the local-context term on `V`.
pub fn token_attention(
    q: &RegionTokens,
    gathered: &GatheredKv,
    v: &RegionTokens,
    lce: Option<&LceParams>,
    heads: usize,
) -> Result<RegionTokens> {
    let layout = q.layout;
    let d = q.dim;
    if gathered.n_regions != layout.n_regions() || gathered.dim != d || v.layout != layout || v.dim != d {
        return Err(Error::InvalidInput("gathered tensors inconsistent with queries".into()));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidInput(format!("dim {d} not divisible by {heads} heads")));
    }
    let finite = |s: &[f64]| s.iter().all(|x| x.is_finite());
    if !finite(&q.data) || !finite(&gathered.keys) || !finite(&gathered.values) || !finite(&v.data) {
        return Err(Error::NonFinite("token attention input"));
    }
    let mut g = Graph::new();
    let tpr = layout.tokens_per_region();
    let outs: Vec<Var> = (0..layout.n_regions())
        .map(|r| {
            let qr = g.constant(tpr, d, q.region(r).to_vec());
            let kg = g.constant(gathered.per_region, d, gathered.region_keys(r).to_vec());
            let vg = g.constant(gathered.per_region, d, gathered.region_values(r).to_vec());
            attend(&mut g, qr, kg, vg, heads)
        })
        .collect();
    let mut o = g.concat_rows(&outs);
    if let Some(l) = lce {
        if (l.weight.rows, l.weight.cols) != (d, LCE_KERNEL * LCE_KERNEL) {
            return Err(Error::shape("lce weight", d * LCE_KERNEL * LCE_KERNEL, l.weight.len()));
        }
        let vv = g.constant(layout.n_tokens(), d, v.data.clone());
        let w = g.frozen(&l.weight);
        let b = g.frozen(&l.bias);
        let nb = Arc::new(layout.neighbor_table(LCE_KERNEL));
        let local = g.token_conv(vv, w, b, nb, LCE_KERNEL * LCE_KERNEL);
        o = g.add(o, local);
    }
    RegionTokens::new(layout, d, g.value(o).to_vec())
}

/// Full extraction chain for one frame.
pub fn extract_semantics(frame: &Frame, params: &BraParams, geom: &PatchGeometry) -> Result<SemanticRepresentation> {
    geom.check_frame(frame)?;
    let mut g = Graph::new();
    let x = g.constant(1, geom.pixels(), frame.to_f64());
    let out = params.forward_graph(&mut g, x, geom, None, false)?;
    let data = g.value(out.s).to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("semantic representation"));
    }
    Ok(SemanticRepresentation {
        tokens: geom.layout.n_tokens(),
        dim: params.config.dim,
        data,
        frame_index: frame.index,
    })
}
