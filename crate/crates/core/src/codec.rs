//! End-to-end semantic codec: extractor, KAN encoder, channel, KAN expander, decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bra::{extract_semantics, BraConfig, BraParams, PatchGeometry, RoutingIndex, SemanticRepresentation};
use crate::channel::{equalize_demodulate, modulate, transmit, ChannelConfig, ChannelRealization, ComplexSymbolVector};
use crate::decoder::{decode_frame, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::kan::{encode_semantics, expand_semantics, CrClass, CrLengths, KanStack, SemanticEncoding, SplineBasis};
use crate::tape::{Graph, Param, Parameterized, Var};

/// Shapes of every model component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub regions_per_side: usize,
    pub dim: usize,
    pub top_k: usize,
    pub heads: usize,
    pub lce: bool,
    pub encoder_hidden: Vec<usize>,
    pub expander_hidden: Vec<usize>,
    pub decoder_depth: usize,
    pub decoder_mlp: usize,
    pub spline: SplineBasis,
    pub lengths: CrLengths,
    /// Student reuses the mentor's extractor (frozen) instead of its own.
    pub shared_extractor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            channels: 3,
            patch: 8,
            regions_per_side: 4,
            dim: 64,
            top_k: 4,
            heads: 1,
            lce: true,
            encoder_hidden: Vec::new(),
            expander_hidden: Vec::new(),
            decoder_depth: 4,
            decoder_mlp: 128,
            spline: SplineBasis::default(),
            lengths: CrLengths::default(),
            shared_extractor: false,
        }
    }
}

impl ModelConfig {
    /// A 16×16 RGB preset small enough to train in seconds on a CPU.
    pub fn toy() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            regions_per_side: 2,
            dim: 8,
            top_k: 2,
            heads: 1,
            lce: true,
            encoder_hidden: Vec::new(),
            expander_hidden: Vec::new(),
            decoder_depth: 1,
            decoder_mlp: 16,
            spline: SplineBasis::default(),
            lengths: CrLengths {
                static_high: 4,
                dynamic_low: 64,
            },
            shared_extractor: true,
        }
    }

    pub fn bra(&self) -> BraConfig {
        BraConfig {
            patch: self.patch,
            regions_y: self.regions_per_side,
            regions_x: self.regions_per_side,
            dim: self.dim,
            top_k: self.top_k,
            heads: self.heads,
            lce: self.lce,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            depth: self.decoder_depth,
            dim: self.dim,
            mlp_hidden: self.decoder_mlp,
            heads: self.heads,
        }
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        self.bra().geometry(self.height, self.width, self.channels)
    }

    pub fn n_tokens(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    /// Flattened semantic width `N_tok · C'`.
    pub fn semantic_width(&self) -> usize {
        self.n_tokens() * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("frame shape must be positive".into()));
        }
        if self.spline.size < 4 || !(self.spline.lo < self.spline.hi) {
            return Err(Error::Config("spline grid needs size >= 4 and lo < hi".into()));
        }
        self.lengths.validate()?;
        self.bra().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.geometry().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// One complete codec at a fixed encoding length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCodec {
    pub cr: CrClass,
    pub extractor: BraParams,
    pub encoder: KanStack,
    pub expander: KanStack,
    pub decoder: DecoderParams,
}

/// Nodes of one end-to-end pass.
#[derive(Debug, Clone)]
pub struct CodecForward {
    pub s: Var,
    pub e: Var,
    pub e_hat: Var,
    /// Receiver-side token grid, `n_tokens × dim`.
    pub s_hat: Var,
    /// Clamped reconstruction, `1 × pixels`.
    pub x_hat: Var,
    pub routing: RoutingIndex,
}

/// Optional overrides for [`SemanticCodec::forward_graph`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Frozen extractor used instead of the codec's own.
    pub shared: Option<&'a BraParams>,
    /// Fixed routing instead of the one computed in the pass.
    pub routing: Option<&'a RoutingIndex>,
}

/// Output of one inference pass over the simulated channel.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub x_hat: Frame,
    pub s: SemanticRepresentation,
    pub s_hat: SemanticRepresentation,
    pub encoding: SemanticEncoding,
    pub received: ComplexSymbolVector,
    pub realization: ChannelRealization,
}

impl SemanticCodec {
    pub fn new<R: Rng>(cfg: &ModelConfig, cr: CrClass, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let geom = cfg.geometry()?;
        let n = cfg.semantic_width();
        let l = cfg.lengths.length(cr);
        Ok(SemanticCodec {
            cr,
            extractor: BraParams::new("extractor", cfg.bra(), cfg.channels, rng)?,
            encoder: KanStack::new("encoder", n, &cfg.encoder_hidden, l, cfg.spline, rng),
            expander: KanStack::new("expander", l, &cfg.expander_hidden, n, cfg.spline, rng),
            decoder: DecoderParams::new("decoder", cfg.decoder(), geom.patch_len(), rng)?,
        })
    }

    pub fn length(&self) -> usize {
        self.encoder.n_out()
    }

    /// Records the whole chain on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        frame: &Frame,
        geom: &PatchGeometry,
        real: &ChannelRealization,
        opts: ForwardOptions<'_>,
    ) -> Result<CodecForward> {
        geom.check_frame(frame)?;
        let x = g.constant(1, geom.pixels(), frame.to_f64());
        let (extractor, trainable) = match opts.shared {
            Some(p) => (p, false),
            None => (&self.extractor, true),
        };
        let bra = extractor.forward_graph(g, x, geom, opts.routing, trainable)?;
        self.forward_from_semantics(g, bra.s, geom, real, bra.routing)
    }

    /// The chain after extraction, starting from `s` (`n_tokens × dim`).
    pub fn forward_from_semantics(
        &self,
        g: &mut Graph,
        s: Var,
        geom: &PatchGeometry,
        real: &ChannelRealization,
        routing: RoutingIndex,
    ) -> Result<CodecForward> {
        let (n, d) = g.shape(s);
        let flat = g.reshape(s, 1, n * d);
        if self.encoder.n_in() != n * d {
            return Err(Error::shape("encoder input", self.encoder.n_in(), n * d));
        }
        let e = self.encoder.forward_graph(g, flat);
        let e_hat = crate::channel::channel_graph(g, e, real)?;
        let expanded = self.expander.forward_graph(g, e_hat);
        let s_hat = g.reshape(expanded, n, d);
        let x_hat = self.decoder.forward_graph(g, s_hat, geom)?;
        Ok(CodecForward {
            s,
            e,
            e_hat,
            s_hat,
            x_hat,
            routing,
        })
    }

    /// Inference over the channel: extract, encode, modulate, transmit,
    /// equalize, expand, decode.
    pub fn transmit_frame<R: Rng>(
        &self,
        frame: &Frame,
        geom: &PatchGeometry,
        lengths: &CrLengths,
        channel: &ChannelConfig,
        rng: &mut R,
        shared: Option<&BraParams>,
    ) -> Result<Transmission> {
        let extractor = shared.unwrap_or(&self.extractor);
        let s = extract_semantics(frame, extractor, geom)?;
        let encoding = encode_semantics(&s, self.cr, lengths, &self.encoder)?;
        let modulated = modulate(&encoding);
        let (received, realization) = transmit(&modulated.symbols, channel, rng)?;
        let values = equalize_demodulate(&received, &realization, modulated.scale, modulated.len)?;
        let e_hat = SemanticEncoding {
            values,
            cr: self.cr,
            frame_index: frame.index,
        };
        let s_hat = expand_semantics(&e_hat, &self.expander, s.tokens, s.dim)?;
        let x_hat = decode_frame(&s_hat, &self.decoder, geom)?;
        Ok(Transmission {
            x_hat,
            s,
            s_hat,
            encoding,
            received,
            realization,
        })
    }
}

impl Parameterized for SemanticCodec {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.extractor.params();
        v.extend(self.encoder.params());
        v.extend(self.expander.params());
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.extractor.params_mut();
        v.extend(self.encoder.params_mut());
        v.extend(self.expander.params_mut());
        v.extend(self.decoder.params_mut());
        v
    }
}

/// Mentor (long encoding) and student (short encoding) codecs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub config: ModelConfig,
    pub mentor: SemanticCodec,
    pub student: SemanticCodec,
    /// Control student trained without distillation.
    pub student_no_kd: Option<SemanticCodec>,
}

impl ModelPair {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mentor = SemanticCodec::new(&config, CrClass::DynamicLowCr, rng)?;
        let student = SemanticCodec::new(&config, CrClass::StaticHighCr, rng)?;
        Ok(ModelPair {
            config,
            mentor,
            student,
            student_no_kd: None,
        })
    }

    pub fn codec(&self, cr: CrClass) -> &SemanticCodec {
        match cr {
            CrClass::DynamicLowCr => &self.mentor,
            CrClass::StaticHighCr => &self.student,
        }
    }

    /// The extractor the student should use in place of its own, if shared.
    pub fn shared_extractor(&self, cr: CrClass) -> Option<&BraParams> {
        (self.config.shared_extractor && cr == CrClass::StaticHighCr).then_some(&self.mentor.extractor)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let lengths = &self.config.lengths;
        if self.mentor.length() != lengths.dynamic_low || self.student.length() != lengths.static_high {
            return Err(Error::Config(format!(
                "model lengths {}/{} do not match configured {}/{}",
                self.student.length(),
                self.mentor.length(),
                lengths.static_high,
                lengths.dynamic_low
            )));
        }
        if self.mentor.expander.n_out() != self.student.expander.n_out() {
            return Err(Error::Config("mentor and student token grids differ".into()));
        }
        Ok(())
    }
}
