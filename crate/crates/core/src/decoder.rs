//! Attention decoder from a token grid back to pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bra::{attend, PatchGeometry, SemanticRepresentation};
use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::tape::{Graph, Param, Parameterized, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 4,
            dim: 64,
            mlp_hidden: 128,
            heads: 1,
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub ln1_g: Param,
    pub ln1_b: Param,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
    pub ln2_g: Param,
    pub ln2_b: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl DecoderBlock {
    fn new<R: Rng>(prefix: &str, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_hidden;
        let sd = 1.0 / (d as f64).sqrt();
        // Residual branches start small so the stack begins near identity.
        let out_sd = sd / (2.0 * cfg.depth.max(1) as f64).sqrt();
        DecoderBlock {
            ln1_g: Param::filled(format!("{prefix}.ln1.g"), 1, d, 1.0),
            ln1_b: Param::zeros(format!("{prefix}.ln1.b"), 1, d),
            w_q: Param::normal(format!("{prefix}.w_q"), d, d, sd, rng),
            w_k: Param::normal(format!("{prefix}.w_k"), d, d, sd, rng),
            w_v: Param::normal(format!("{prefix}.w_v"), d, d, sd, rng),
            w_o: Param::normal(format!("{prefix}.w_o"), d, d, out_sd, rng),
            ln2_g: Param::filled(format!("{prefix}.ln2.g"), 1, d, 1.0),
            ln2_b: Param::zeros(format!("{prefix}.ln2.b"), 1, d),
            w1: Param::normal(format!("{prefix}.mlp.w1"), d, h, sd, rng),
            b1: Param::zeros(format!("{prefix}.mlp.b1"), 1, h),
            w2: Param::normal(
                format!("{prefix}.mlp.w2"),
                h,
                d,
                out_sd * (d as f64 / h as f64).sqrt(),
                rng,
            ),
            b2: Param::zeros(format!("{prefix}.mlp.b2"), 1, d),
        }
    }

    fn forward_graph(&self, g: &mut Graph, x: Var, heads: usize) -> Var {
        let g1 = g.param(&self.ln1_g);
        let b1 = g.param(&self.ln1_b);
        let a = g.layer_norm(x, g1, b1);
        let wq = g.param(&self.w_q);
        let wk = g.param(&self.w_k);
        let wv = g.param(&self.w_v);
        let q = g.matmul(a, wq);
        let k = g.matmul(a, wk);
        let v = g.matmul(a, wv);
        let att = attend(g, q, k, v, heads);
        let wo = g.param(&self.w_o);
        let att = g.matmul(att, wo);
        let x = g.add(x, att);

        let g2 = g.param(&self.ln2_g);
        let b2n = g.param(&self.ln2_b);
        let m = g.layer_norm(x, g2, b2n);
        let w1 = g.param(&self.w1);
        let bb1 = g.param(&self.b1);
        let h = g.matmul(m, w1);
        let h = g.add_row(h, bb1);
        let h = g.gelu(h);
        let w2 = g.param(&self.w2);
        let bb2 = g.param(&self.b2);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, bb2);
        g.add(x, h)
    }

    fn params(&self) -> Vec<&Param> {
        vec![
            &self.ln1_g,
            &self.ln1_b,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Transformer blocks followed by a per-token linear pixel head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub blocks: Vec<DecoderBlock>,
    /// `dim × patch_len`.
    pub head_w: Param,
    /// `1 × patch_len`.
    pub head_b: Param,
}

impl DecoderParams {
    pub fn new<R: Rng>(prefix: &str, config: DecoderConfig, patch_len: usize, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::InvalidInput(format!(
                "decoder dim {} not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        let blocks = (0..config.depth)
            .map(|i| DecoderBlock::new(&format!("{prefix}.block{i}"), &config, rng))
            .collect();
        Ok(DecoderParams {
            config,
            blocks,
            head_w: Param::normal(
                format!("{prefix}.head.w"),
                config.dim,
                patch_len,
                0.1 / (config.dim as f64).sqrt(),
                rng,
            ),
            head_b: Param::filled(format!("{prefix}.head.b"), 1, patch_len, 0.5),
        })
    }

    /// Maps `s_hat` (`n_tokens × dim`) to a clamped pixel row (`1 × pixels`).
    pub fn forward_graph(&self, g: &mut Graph, s_hat: Var, geom: &PatchGeometry) -> Result<Var> {
        let (n, d) = g.shape(s_hat);
        if n != geom.layout.n_tokens() || d != self.config.dim {
            return Err(Error::shape(
                "decoder input",
                format!("{}x{}", geom.layout.n_tokens(), self.config.dim),
                format!("{n}x{d}"),
            ));
        }
        if self.head_w.cols != geom.patch_len() {
            return Err(Error::shape("decoder head", geom.patch_len(), self.head_w.cols));
        }
        let mut h = s_hat;
        for block in &self.blocks {
            h = block.forward_graph(g, h, self.config.heads);
        }
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        let pix = g.matmul(h, w);
        let pix = g.add_row(pix, b);
        let flat = g.take(pix, geom.scatter.clone(), 1, geom.pixels());
        Ok(g.clamp01(flat))
    }
}

impl Parameterized for DecoderParams {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }
}

/// Reconstructs a frame from a received token grid.
pub fn decode_frame(s_hat: &SemanticRepresentation, params: &DecoderParams, geom: &PatchGeometry) -> Result<Frame> {
    if s_hat.data.len() != s_hat.tokens * s_hat.dim {
        return Err(Error::shape("token grid", s_hat.tokens * s_hat.dim, s_hat.data.len()));
    }
    let mut g = Graph::new();
    let s = g.constant(s_hat.tokens, s_hat.dim, s_hat.data.clone());
    let x = params.forward_graph(&mut g, s, geom)?;
    Frame::from_f64(geom.height, geom.width, geom.channels, s_hat.frame_index, g.value(x))
}
