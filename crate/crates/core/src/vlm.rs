// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy LLaVA-style vision-language model.
//!
//! Pipeline: patch features → bidirectional encoder (CLS at position 0, patches
//! in row-major grid order) → connector applied to the final patch states →
//! causal decoder over `prompt tokens ++ image positions`. Every block is
//! pre-norm and takes an optional [`AllowMask`] per layer. The decoder has no
//! positional embedding; order enters only through the causal mask.
//!
//! Layer indices in intervention maps are 0-based block indices. State lists
//! contain one more entry than there are blocks: entry 0 is the block input.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::interchange::{Bundle, BundleKind, DType, Tensor};
use crate::nn::{Activation, AllowMask, AttentionParams, Block, LayerNormParams, Linear, Matrix, Mlp};

/// Per-layer masks keyed by block index.
pub type LayerMasks = BTreeMap<usize, AllowMask>;

/// Patch grid of the vision encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major patch index of grid cell `(r, c)`.
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }
}

/// Connector between encoder and decoder widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConnectorKind {
    #[default]
    Linear,
    Mlp {
        hidden: usize,
    },
}

fn default_eps() -> f64 {
    1e-5
}

/// Geometry and hyper-parameters of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub patch_grid: GridGeometry,
    /// Width of each input patch feature vector.
    pub patch_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_encoder: usize,
    pub d_decoder: usize,
    pub heads_enc: usize,
    pub heads_dec: usize,
    pub mlp_encoder: usize,
    pub mlp_decoder: usize,
    pub vocab_size: usize,
    /// CLIP-style embedding width of the projected CLS token.
    pub embed_dim: usize,
    pub prompt_token_ids: Vec<usize>,
    #[serde(default)]
    pub connector: ConnectorKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl VlmConfig {
    /// Small configuration used by fixtures and examples.
    pub fn toy() -> Self {
        Self {
            patch_grid: GridGeometry::new(2, 2),
            patch_dim: 6,
            encoder_layers: 2,
            decoder_layers: 2,
            d_encoder: 8,
            d_decoder: 8,
            heads_enc: 2,
            heads_dec: 2,
            mlp_encoder: 16,
            mlp_decoder: 16,
            vocab_size: 16,
            embed_dim: 4,
            prompt_token_ids: vec![1, 2, 3],
            connector: ConnectorKind::Linear,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.num_patches()
    }

    /// Encoder sequence length (CLS plus patches).
    pub fn encoder_positions(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            prompt_len: self.prompt_token_ids.len(),
            num_patches: self.num_patches(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_grid.rows", self.patch_grid.rows),
            ("patch_grid.cols", self.patch_grid.cols),
            ("patch_dim", self.patch_dim),
            ("d_encoder", self.d_encoder),
            ("d_decoder", self.d_decoder),
            ("heads_enc", self.heads_enc),
            ("heads_dec", self.heads_dec),
            ("mlp_encoder", self.mlp_encoder),
            ("mlp_decoder", self.mlp_decoder),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ProbeError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_encoder.is_multiple_of(self.heads_enc) || !self.d_decoder.is_multiple_of(self.heads_dec) {
            return Err(ProbeError::Config("widths must be divisible by head counts".into()));
        }
        if self.vocab_size < 2 {
            return Err(ProbeError::Config("vocab_size must be >= 2".into()));
        }
        if let Some(&t) = self.prompt_token_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(ProbeError::Config(format!("prompt token {t} outside vocabulary")));
        }
        if let ConnectorKind::Mlp { hidden: 0 } = self.connector {
            return Err(ProbeError::Config("connector hidden width must be >= 1".into()));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(ProbeError::Config("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Decoder sequence layout: prompt positions, then one position per patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub prompt_len: usize,
    pub num_patches: usize,
}

impl SequenceLayout {
    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.num_patches
    }

    /// Sequence position of patch `patch`.
    pub fn image_position(&self, patch: usize) -> usize {
        self.prompt_len + patch
    }

    pub fn is_image_position(&self, pos: usize) -> bool {
        pos >= self.prompt_len && pos < self.seq_len()
    }
}

/// Vision encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub patch_embed: Linear,
    pub cls: Vec<f64>,
    /// `(1 + num_patches) × d_encoder`.
    pub position: Matrix,
    pub blocks: Vec<Block>,
    /// Norm applied to the CLS state before the embedding projection.
    pub post_norm: LayerNormParams,
    /// `d_encoder × embed_dim`.
    pub projection: Matrix,
}

/// Encoder-to-decoder projection.
#[derive(Debug, Clone, PartialEq)]
pub enum Connector {
    Linear(Linear),
    Mlp(Mlp),
}

impl Connector {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Connector::Linear(l) => l.forward(x),
            Connector::Mlp(m) => m.forward(x),
        }
    }
}

/// Language decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `vocab_size × d_decoder`.
    pub token_embed: Matrix,
    pub blocks: Vec<Block>,
    pub lens: Arc<LensAssets>,
}

/// Final norm and unembedding, everything logit lens needs from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LensAssets {
    pub final_norm: LayerNormParams,
    /// `|V| × d_decoder`.
    pub unembedding: Matrix,
}

impl LensAssets {
    pub fn vocab_size(&self) -> usize {
        self.unembedding.rows()
    }

    pub fn width(&self) -> usize {
        self.unembedding.cols()
    }

    /// `U · LayerNorm(h)` for one hidden state.
    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.width() {
            return Err(ProbeError::Shape(format!(
                "hidden state of width {} for unembedding of width {}",
                h.len(),
                self.width()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite("hidden state".into()));
        }
        let normed = self.final_norm.apply(h)?;
        Ok((0..self.vocab_size())
            .map(|t| crate::nn::dot(self.unembedding.row(t), &normed))
            .collect())
    }
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub connector: Connector,
    pub decoder: DecoderWeights,
}

/// Hidden states of every encoder layer, each `(1 + num_patches) × d_encoder`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub layers: Vec<Matrix>,
}

impl EncoderStates {
    pub fn last(&self) -> &Matrix {
        self.layers
            .last()
            .expect("encoder states always contain the embedding layer")
    }

    /// Patch rows (CLS dropped) of layer `layer`.
    pub fn patches(&self, layer: usize) -> Matrix {
        let m = &self.layers[layer];
        let idx: Vec<usize> = (1..m.rows()).collect();
        m.select_rows(&idx)
    }

    pub fn cls(&self, layer: usize) -> &[f64] {
        self.layers[layer].row(0)
    }
}

/// Per-layer decoder states at image positions, plus the lens assets.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    pub layout: SequenceLayout,
    /// `decoder_layers + 1` matrices of shape `num_patches × d_decoder`.
    pub hidden: Vec<Matrix>,
    pub lens: Arc<LensAssets>,
    /// Logits the model (or the exporting runtime) produced at image positions.
    pub output_logits: Option<Matrix>,
}

impl DecoderTrace {
    /// Number of decoder blocks (captured layers minus one).
    pub fn num_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.lens.vocab_size()
    }

    /// Hidden state of `patch` after `layer` blocks.
    pub fn state(&self, layer: usize, patch: usize) -> Result<&[f64]> {
        let m = self
            .hidden
            .get(layer)
            .ok_or_else(|| ProbeError::Range(format!("layer {layer} not in trace")))?;
        if patch >= m.rows() {
            return Err(ProbeError::Range(format!("patch {patch} not in trace")));
        }
        Ok(m.row(patch))
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(ProbeError::Empty("trace has no layers".into()));
        }
        for (l, m) in self.hidden.iter().enumerate() {
            if m.shape() != (self.layout.num_patches, self.lens.width()) {
                return Err(ProbeError::Shape(format!(
                    "trace layer {l} is {:?}, want ({}, {})",
                    m.shape(),
                    self.layout.num_patches,
                    self.lens.width()
                )));
            }
        }
        if self.lens.final_norm.width() != self.lens.width() {
            return Err(ProbeError::Shape("final norm width differs from unembedding".into()));
        }
        if let Some(o) = &self.output_logits {
            if o.shape() != (self.layout.num_patches, self.vocab_size()) {
                return Err(ProbeError::Shape(format!("output logits are {:?}", o.shape())));
            }
        }
        Ok(())
    }

    /// Write as a `trace` bundle.
    pub fn save(&self, dir: &Path, dtype: DType, metadata: serde_json::Value) -> Result<()> {
        let mut b = Bundle::new(BundleKind::Trace);
        b.config = serde_json::json!({
            "prompt_len": self.layout.prompt_len,
            "num_patches": self.layout.num_patches,
            "decoder_layers": self.num_layers(),
            "d_decoder": self.lens.width(),
            "vocab_size": self.vocab_size(),
            "layer_norm_eps": self.lens.final_norm.epsilon,
        });
        b.metadata = metadata;
        for (l, m) in self.hidden.iter().enumerate() {
            b.insert(format!("hidden.{l}"), "decoder_hidden", Tensor::from_matrix(m));
        }
        b.insert(
            "final_norm.gain",
            "final_norm",
            Tensor::vector(&self.lens.final_norm.gain),
        );
        b.insert(
            "final_norm.bias",
            "final_norm",
            Tensor::vector(&self.lens.final_norm.bias),
        );
        b.insert(
            "unembedding",
            "unembedding",
            Tensor::from_matrix(&self.lens.unembedding),
        );
        if let Some(o) = &self.output_logits {
            b.insert("output_logits", "output_logits", Tensor::from_matrix(o));
        }
        b.save(dir, dtype)?;
        Ok(())
    }

    /// Read a `trace` bundle; the encoder states are returned when present.
    pub fn load(dir: &Path) -> Result<(Self, Option<EncoderStates>)> {
        let b = Bundle::load_kind(dir, BundleKind::Trace)?;
        let cfg = &b.config;
        let field = |name: &str| -> Result<usize> {
            cfg.get(name)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| ProbeError::interchange(dir, format!("trace config lacks `{name}`")))
        };
        let layout = SequenceLayout {
            prompt_len: field("prompt_len")?,
            num_patches: field("num_patches")?,
        };
        let layers = field("decoder_layers")?;
        let width = field("d_decoder")?;
        let vocab = field("vocab_size")?;
        let eps = cfg
            .get("layer_norm_eps")
            .and_then(serde_json::Value::as_f64)
            .unwrap_or_else(default_eps);
        let unembedding = b.require("unembedding")?.to_matrix("unembedding", vocab, width)?;
        let gain = b.require("final_norm.gain")?.to_vector("final_norm.gain", width)?;
        let bias = b.require("final_norm.bias")?.to_vector("final_norm.bias", width)?;
        let lens = Arc::new(LensAssets {
            final_norm: LayerNormParams {
                gain,
                bias,
                epsilon: eps,
            },
            unembedding,
        });
        let hidden = (0..=layers)
            .map(|l| {
                let name = format!("hidden.{l}");
                b.require(&name)?.to_matrix(&name, layout.num_patches, width)
            })
            .collect::<Result<Vec<_>>>()?;
        let output_logits = b
            .get("output_logits")
            .map(|t| t.to_matrix("output_logits", layout.num_patches, vocab))
            .transpose()?;
        let trace = DecoderTrace {
            layout,
            hidden,
            lens,
            output_logits,
        };
        trace.validate()?;

        let enc_layers: Vec<&str> = b.names().filter(|n| n.starts_with("encoder.hidden.")).collect();
        let encoder = if enc_layers.is_empty() {
            None
        } else {
            let layers = (0..enc_layers.len())
                .map(|l| {
                    let name = format!("encoder.hidden.{l}");
                    b.require(&name)?.as_matrix(&name)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(EncoderStates { layers })
        };
        Ok((trace, encoder))
    }
}

/// A toy model: immutable configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Vlm {
    pub config: VlmConfig,
    pub weights: ModelWeights,
    /// Seed the weights were generated from, if any.
    pub seed: Option<u64>,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoder: EncoderStates,
    pub trace: DecoderTrace,
}

struct WeightRng(ChaCha8Rng);

impl WeightRng {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut self.0)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_vec(rows, cols, self.normal(rows * cols, std)).expect("sized")
    }

    // N(0, 1/fan_in) weights, zero bias.
    fn linear(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.matrix(d_in, d_out, 1.0 / (d_in as f64).sqrt()),
            bias: vec![0.0; d_out],
        }
    }

    fn block(&mut self, d: usize, ff: usize, act: Activation, eps: f64) -> Block {
        let s = 1.0 / (d as f64).sqrt();
        Block {
            ln1: LayerNormParams::unit(d, eps),
            attn: AttentionParams {
                wq: self.matrix(d, d, s),
                wk: self.matrix(d, d, s),
                wv: self.matrix(d, d, s),
                wo: self.matrix(d, d, s),
            },
            ln2: LayerNormParams::unit(d, eps),
            mlp: Mlp {
                up: self.linear(d, ff),
                down: self.linear(ff, d),
                activation: act,
            },
        }
    }
}

impl Vlm {
    pub fn new(config: VlmConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            weights,
            seed: None,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Seeded random weights.
    ///
    /// Draw order (one ChaCha8 stream): patch embedding, CLS (N(0,1)),
    /// position table (N(0,1)), encoder blocks in order (wq, wk, wv, wo, mlp up,
    /// mlp down), projection, connector, token embeddings (N(0,1)), decoder
    /// blocks, unembedding. Matrices are N(0, 1/fan_in); norms start at gain 1,
    /// bias 0; linear biases start at 0.
    pub fn random(config: VlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let eps = c.layer_norm_eps;
        let mut rng = WeightRng(ChaCha8Rng::seed_from_u64(seed));
        let patch_embed = rng.linear(c.patch_dim, c.d_encoder);
        let cls = rng.normal(c.d_encoder, 1.0);
        let position = rng.matrix(c.encoder_positions(), c.d_encoder, 1.0);
        let enc_blocks = (0..c.encoder_layers)
            .map(|_| rng.block(c.d_encoder, c.mlp_encoder, c.activation, eps))
            .collect();
        let projection = rng.matrix(c.d_encoder, c.embed_dim, 1.0 / (c.d_encoder as f64).sqrt());
        let connector = match c.connector {
            ConnectorKind::Linear => Connector::Linear(rng.linear(c.d_encoder, c.d_decoder)),
            ConnectorKind::Mlp { hidden } => Connector::Mlp(Mlp {
                up: rng.linear(c.d_encoder, hidden),
                down: rng.linear(hidden, c.d_decoder),
                activation: c.activation,
            }),
        };
        let token_embed = rng.matrix(c.vocab_size, c.d_decoder, 1.0);
        let dec_blocks = (0..c.decoder_layers)
            .map(|_| rng.block(c.d_decoder, c.mlp_decoder, c.activation, eps))
            .collect();
        let unembedding = rng.matrix(c.vocab_size, c.d_decoder, 1.0 / (c.d_decoder as f64).sqrt());
        let weights = ModelWeights {
            encoder: EncoderWeights {
                patch_embed,
                cls,
                position,
                blocks: enc_blocks,
                post_norm: LayerNormParams::unit(c.d_encoder, eps),
                projection,
            },
            connector,
            decoder: DecoderWeights {
                token_embed,
                blocks: dec_blocks,
                lens: Arc::new(LensAssets {
                    final_norm: LayerNormParams::unit(c.d_decoder, eps),
                    unembedding,
                }),
            },
        };
        let mut model = Self::new(config, weights)?;
        model.seed = Some(seed);
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let e = &self.weights.encoder;
        let d = &self.weights.decoder;
        let expect = |what: &str, got: (usize, usize), want: (usize, usize)| -> Result<()> {
            if got != want {
                Err(ProbeError::Shape(format!("{what} is {got:?}, want {want:?}")))
            } else {
                Ok(())
            }
        };
        expect(
            "patch embedding",
            e.patch_embed.weight.shape(),
            (c.patch_dim, c.d_encoder),
        )?;
        expect("patch embedding bias", (1, e.patch_embed.bias.len()), (1, c.d_encoder))?;
        expect("cls", (1, e.cls.len()), (1, c.d_encoder))?;
        expect(
            "position table",
            e.position.shape(),
            (c.encoder_positions(), c.d_encoder),
        )?;
        expect("projection", e.projection.shape(), (c.d_encoder, c.embed_dim))?;
        expect("encoder post norm", (1, e.post_norm.width()), (1, c.d_encoder))?;
        if e.blocks.len() != c.encoder_layers || d.blocks.len() != c.decoder_layers {
            return Err(ProbeError::Shape("block count differs from config".into()));
        }
        for b in &e.blocks {
            check_block(b, c.d_encoder, c.mlp_encoder)?;
        }
        for b in &d.blocks {
            check_block(b, c.d_decoder, c.mlp_decoder)?;
        }
        match &self.weights.connector {
            Connector::Linear(l) => {
                if c.connector != ConnectorKind::Linear {
                    return Err(ProbeError::Shape("linear connector for an MLP config".into()));
                }
                expect("connector", l.weight.shape(), (c.d_encoder, c.d_decoder))?;
            }
            Connector::Mlp(m) => {
                let hidden = match c.connector {
                    ConnectorKind::Mlp { hidden } => hidden,
                    ConnectorKind::Linear => return Err(ProbeError::Shape("MLP connector for a linear config".into())),
                };
                expect("connector up", m.up.weight.shape(), (c.d_encoder, hidden))?;
                expect("connector down", m.down.weight.shape(), (hidden, c.d_decoder))?;
            }
        }
        expect("token embedding", d.token_embed.shape(), (c.vocab_size, c.d_decoder))?;
        expect("unembedding", d.lens.unembedding.shape(), (c.vocab_size, c.d_decoder))?;
        expect("final norm", (1, d.lens.final_norm.width()), (1, c.d_decoder))?;
        Ok(())
    }

    /// Run the vision encoder with optional per-layer masks of size
    /// `1 + num_patches`.
    pub fn encode_image(&self, patch_features: &Matrix, interventions: &LayerMasks) -> Result<EncoderStates> {
        let c = &self.config;
        if patch_features.shape() != (c.num_patches(), c.patch_dim) {
            return Err(ProbeError::Shape(format!(
                "patch features are {:?}, want ({}, {})",
                patch_features.shape(),
                c.num_patches(),
                c.patch_dim
            )));
        }
        check_masks(interventions, c.encoder_layers, c.encoder_positions(), "encoder")?;
        let e = &self.weights.encoder;
        let patches = e.patch_embed.forward(patch_features)?;
        let cls = Matrix::from_vec(1, c.d_encoder, e.cls.clone())?;
        let mut x = cls.vstack(&patches)?;
        x.add_assign(&e.position)?;
        let mut layers = Vec::with_capacity(c.encoder_layers + 1);
        layers.push(x);
        for (l, block) in e.blocks.iter().enumerate() {
            let prev = layers.last().expect("non-empty");
            let next = block.forward(prev, c.heads_enc, interventions.get(&l))?;
            layers.push(next);
        }
        Ok(EncoderStates { layers })
    }

    /// Project final encoder patch states to decoder width.
    pub fn connect(&self, encoder: &EncoderStates) -> Result<Matrix> {
        self.weights
            .connector
            .forward(&encoder.patches(encoder.layers.len() - 1))
    }

    /// Run the causal decoder over `prompt ++ image_embeds`.
    ///
    /// Intervention masks are intersected with the causal mask, so a mask can
    /// only remove past edges; permitting a future edge has no effect.
    pub fn decode(&self, image_embeds: &Matrix, interventions: &LayerMasks) -> Result<DecoderTrace> {
        let c = &self.config;
        let layout = c.layout();
        if image_embeds.shape() != (c.num_patches(), c.d_decoder) {
            return Err(ProbeError::Shape(format!(
                "image embeddings are {:?}, want ({}, {})",
                image_embeds.shape(),
                c.num_patches(),
                c.d_decoder
            )));
        }
        let n = layout.seq_len();
        check_masks(interventions, c.decoder_layers, n, "decoder")?;
        let d = &self.weights.decoder;
        let prompt = d.token_embed.select_rows(&c.prompt_token_ids);
        let mut x = prompt.vstack(image_embeds)?;
        let causal = AllowMask::causal(n);
        let image_rows: Vec<usize> = (0..layout.num_patches).map(|p| layout.image_position(p)).collect();
        let mut hidden = Vec::with_capacity(c.decoder_layers + 1);
        hidden.push(x.select_rows(&image_rows));
        for (l, block) in d.blocks.iter().enumerate() {
            let mask = match interventions.get(&l) {
                Some(m) => causal.intersect(m)?,
                None => causal.clone(),
            };
            x = block.forward(&x, c.heads_dec, Some(&mask))?;
            hidden.push(x.select_rows(&image_rows));
        }
        let last = hidden.last().expect("non-empty");
        let mut logits = Matrix::zeros(layout.num_patches, c.vocab_size);
        for p in 0..layout.num_patches {
            logits.row_mut(p).copy_from_slice(&d.lens.logits(last.row(p))?);
        }
        Ok(DecoderTrace {
            layout,
            hidden,
            lens: Arc::clone(&d.lens),
            output_logits: Some(logits),
        })
    }

    /// Encoder, connector and decoder in one pass.
    pub fn forward(
        &self,
        patch_features: &Matrix,
        encoder_masks: &LayerMasks,
        decoder_masks: &LayerMasks,
    ) -> Result<ForwardOutput> {
        let encoder = self.encode_image(patch_features, encoder_masks)?;
        let embeds = self.connect(&encoder)?;
        let trace = self.decode(&embeds, decoder_masks)?;
        Ok(ForwardOutput { encoder, trace })
    }

    /// Unit-normalized CLIP-style image embedding from a CLS state.
    pub fn embed_cls(&self, cls: &[f64]) -> Result<Vec<f64>> {
        let e = &self.weights.encoder;
        let normed = e.post_norm.apply(cls)?;
        let row = Matrix::from_vec(1, normed.len(), normed)?;
        let mut v = row.matmul(&e.projection)?.into_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ProbeError::Range("image embedding has zero norm".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    /// Write a `model` bundle. The seed, when known, is recorded.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut b = Bundle::new(BundleKind::Model);
        b.seed = self.seed;
        b.config = serde_json::to_value(&self.config).map_err(|e| ProbeError::json("config", e))?;
        let e = &self.weights.encoder;
        put_linear(&mut b, "encoder.patch_embed", &e.patch_embed);
        b.insert("encoder.cls", "cls", Tensor::vector(&e.cls));
        b.insert("encoder.position", "position", Tensor::from_matrix(&e.position));
        for (i, blk) in e.blocks.iter().enumerate() {
            put_block(&mut b, &format!("encoder.blocks.{i}"), blk);
        }
        put_norm(&mut b, "encoder.post_norm", &e.post_norm);
        b.insert("encoder.projection", "projection", Tensor::from_matrix(&e.projection));
        match &self.weights.connector {
            Connector::Linear(l) => put_linear(&mut b, "connector", l),
            Connector::Mlp(m) => {
                put_linear(&mut b, "connector.up", &m.up);
                put_linear(&mut b, "connector.down", &m.down);
            }
        }
        let d = &self.weights.decoder;
        b.insert(
            "decoder.token_embed",
            "token_embedding",
            Tensor::from_matrix(&d.token_embed),
        );
        for (i, blk) in d.blocks.iter().enumerate() {
            put_block(&mut b, &format!("decoder.blocks.{i}"), blk);
        }
        put_norm(&mut b, "decoder.final_norm", &d.lens.final_norm);
        b.insert("unembedding", "unembedding", Tensor::from_matrix(&d.lens.unembedding));
        b.save(dir, DType::F64)?;
        Ok(())
    }

    /// Read a `model` bundle, validating every shape against its config.
    pub fn load(dir: &Path) -> Result<Self> {
        let b = Bundle::load_kind(dir, BundleKind::Model)?;
        let config: VlmConfig = serde_json::from_value(b.config.clone())
            .map_err(|e| ProbeError::json(format!("{} config", dir.display()), e))?;
        config.validate()?;
        let c = &config;
        let eps = c.layer_norm_eps;
        let encoder = EncoderWeights {
            patch_embed: get_linear(&b, "encoder.patch_embed", c.patch_dim, c.d_encoder)?,
            cls: b.require("encoder.cls")?.to_vector("encoder.cls", c.d_encoder)?,
            position: b.require("encoder.position")?.to_matrix(
                "encoder.position",
                c.encoder_positions(),
                c.d_encoder,
            )?,
            blocks: (0..c.encoder_layers)
                .map(|i| {
                    get_block(
                        &b,
                        &format!("encoder.blocks.{i}"),
                        c.d_encoder,
                        c.mlp_encoder,
                        c.activation,
                        eps,
                    )
                })
                .collect::<Result<_>>()?,
            post_norm: get_norm(&b, "encoder.post_norm", c.d_encoder, eps)?,
            projection: b
                .require("encoder.projection")?
                .to_matrix("encoder.projection", c.d_encoder, c.embed_dim)?,
        };
        let connector = match c.connector {
            ConnectorKind::Linear => Connector::Linear(get_linear(&b, "connector", c.d_encoder, c.d_decoder)?),
            ConnectorKind::Mlp { hidden } => Connector::Mlp(Mlp {
                up: get_linear(&b, "connector.up", c.d_encoder, hidden)?,
                down: get_linear(&b, "connector.down", hidden, c.d_decoder)?,
                activation: c.activation,
            }),
        };
        let decoder = DecoderWeights {
            token_embed: b.require("decoder.token_embed")?.to_matrix(
                "decoder.token_embed",
                c.vocab_size,
                c.d_decoder,
            )?,
            blocks: (0..c.decoder_layers)
                .map(|i| {
                    get_block(
                        &b,
                        &format!("decoder.blocks.{i}"),
                        c.d_decoder,
                        c.mlp_decoder,
                        c.activation,
                        eps,
                    )
                })
                .collect::<Result<_>>()?,
            lens: Arc::new(LensAssets {
                final_norm: get_norm(&b, "decoder.final_norm", c.d_decoder, eps)?,
                unembedding: b
                    .require("unembedding")?
                    .to_matrix("unembedding", c.vocab_size, c.d_decoder)?,
            }),
        };
        let mut model = Self::new(
            config,
            ModelWeights {
                encoder,
                connector,
                decoder,
            },
        )?;
        model.seed = b.seed;
        Ok(model)
    }
}

fn check_block(b: &Block, d: usize, ff: usize) -> Result<()> {
    let shapes = [
        ("wq", b.attn.wq.shape(), (d, d)),
        ("wk", b.attn.wk.shape(), (d, d)),
        ("wv", b.attn.wv.shape(), (d, d)),
        ("wo", b.attn.wo.shape(), (d, d)),
        ("mlp up", b.mlp.up.weight.shape(), (d, ff)),
        ("mlp down", b.mlp.down.weight.shape(), (ff, d)),
        ("ln1", (1, b.ln1.width()), (1, d)),
        ("ln2", (1, b.ln2.width()), (1, d)),
    ];
    for (name, got, want) in shapes {
        if got != want {
            return Err(ProbeError::Shape(format!("block {name} is {got:?}, want {want:?}")));
        }
    }
    Ok(())
}

fn check_masks(masks: &LayerMasks, layers: usize, n: usize, side: &str) -> Result<()> {
    for (&l, m) in masks {
        if l >= layers {
            return Err(ProbeError::Plan(format!(
                "{side} mask for layer {l}, model has {layers}"
            )));
        }
        if m.len() != n {
            return Err(ProbeError::Mask(format!(
                "{side} layer {l} mask has size {}, sequence has {n}",
                m.len()
            )));
        }
    }
    Ok(())
}

fn put_linear(b: &mut Bundle, prefix: &str, l: &Linear) {
    b.insert(format!("{prefix}.weight"), "weight", Tensor::from_matrix(&l.weight));
    b.insert(format!("{prefix}.bias"), "bias", Tensor::vector(&l.bias));
}

fn put_norm(b: &mut Bundle, prefix: &str, n: &LayerNormParams) {
    b.insert(format!("{prefix}.gain"), "norm_gain", Tensor::vector(&n.gain));
    b.insert(format!("{prefix}.bias"), "norm_bias", Tensor::vector(&n.bias));
}

fn put_block(b: &mut Bundle, prefix: &str, blk: &Block) {
    put_norm(b, &format!("{prefix}.ln1"), &blk.ln1);
    b.insert(format!("{prefix}.attn.wq"), "attn_q", Tensor::from_matrix(&blk.attn.wq));
    b.insert(format!("{prefix}.attn.wk"), "attn_k", Tensor::from_matrix(&blk.attn.wk));
    b.insert(format!("{prefix}.attn.wv"), "attn_v", Tensor::from_matrix(&blk.attn.wv));
    b.insert(format!("{prefix}.attn.wo"), "attn_o", Tensor::from_matrix(&blk.attn.wo));
    put_norm(b, &format!("{prefix}.ln2"), &blk.ln2);
    put_linear(b, &format!("{prefix}.mlp.up"), &blk.mlp.up);
    put_linear(b, &format!("{prefix}.mlp.down"), &blk.mlp.down);
}

fn get_linear(b: &Bundle, prefix: &str, d_in: usize, d_out: usize) -> Result<Linear> {
    let w = format!("{prefix}.weight");
    let bias = format!("{prefix}.bias");
    Ok(Linear {
        weight: b.require(&w)?.to_matrix(&w, d_in, d_out)?,
        bias: b.require(&bias)?.to_vector(&bias, d_out)?,
    })
}

fn get_norm(b: &Bundle, prefix: &str, d: usize, eps: f64) -> Result<LayerNormParams> {
    let g = format!("{prefix}.gain");
    let bias = format!("{prefix}.bias");
    Ok(LayerNormParams {
        gain: b.require(&g)?.to_vector(&g, d)?,
        bias: b.require(&bias)?.to_vector(&bias, d)?,
        epsilon: eps,
    })
}

fn get_block(b: &Bundle, prefix: &str, d: usize, ff: usize, act: Activation, eps: f64) -> Result<Block> {
    let m = |name: &str| -> Result<Matrix> {
        let full = format!("{prefix}.attn.{name}");
        b.require(&full)?.to_matrix(&full, d, d)
    };
    Ok(Block {
        ln1: get_norm(b, &format!("{prefix}.ln1"), d, eps)?,
        attn: AttentionParams {
            wq: m("wq")?,
            wk: m("wk")?,
            wv: m("wv")?,
            wo: m("wo")?,
        },
        ln2: get_norm(b, &format!("{prefix}.ln2"), d, eps)?,
        mlp: Mlp {
            up: get_linear(b, &format!("{prefix}.mlp.up"), d, ff)?,
            down: get_linear(b, &format!("{prefix}.mlp.down"), ff, d)?,
            activation: act,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::masked_attention;
    use rand::Rng;

    fn features(model: &Vlm, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &model.config;
        Matrix::from_vec(
            c.num_patches(),
            c.patch_dim,
            (0..c.num_patches() * c.patch_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn minimal_config() -> VlmConfig {
        VlmConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            ..VlmConfig::toy()
        }
    }

    #[test]
    fn minimal_model_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = Vlm::random(minimal_config(), 42).unwrap();
        m.save(dir.path()).unwrap();
        let back = Vlm::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.seed, Some(42));
    }

    #[test]
    fn mlp_connector_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = VlmConfig {
            connector: ConnectorKind::Mlp { hidden: 5 },
            ..VlmConfig::toy()
        };
        let m = Vlm::random(cfg, 1).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(Vlm::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn wrong_unembedding_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Vlm::random(minimal_config(), 1).unwrap();
        m.save(dir.path()).unwrap();
        let mut b = Bundle::load(dir.path()).unwrap();
        let d = m.config.d_decoder;
        b.insert(
            "unembedding",
            "unembedding",
            Tensor::new(vec![3, d], vec![0.0; 3 * d]).unwrap(),
        );
        b.save(dir.path(), DType::F64).unwrap();
        assert!(matches!(Vlm::load(dir.path()), Err(ProbeError::Shape(_))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Vlm::load(dir.path()), Err(ProbeError::Io { .. })));
    }

    #[test]
    fn zero_layer_pipelines_are_identity() {
        let cfg = VlmConfig {
            encoder_layers: 0,
            decoder_layers: 0,
            ..VlmConfig::toy()
        };
        let m = Vlm::random(cfg, 5).unwrap();
        let f = features(&m, 1);
        let enc = m.encode_image(&f, &LayerMasks::new()).unwrap();
        assert_eq!(enc.layers.len(), 1);
        let mut want = Matrix::from_vec(1, 8, m.weights.encoder.cls.clone())
            .unwrap()
            .vstack(&m.weights.encoder.patch_embed.forward(&f).unwrap())
            .unwrap();
        want.add_assign(&m.weights.encoder.position).unwrap();
        assert_eq!(enc.layers[0], want);

        let embeds = m.connect(&enc).unwrap();
        let trace = m.decode(&embeds, &LayerMasks::new()).unwrap();
        assert_eq!(trace.hidden.len(), 1);
        assert_eq!(trace.hidden[0], embeds);
    }

    #[test]
    fn all_true_masks_are_bitwise_noops() {
        let m = Vlm::random(VlmConfig::toy(), 8).unwrap();
        let f = features(&m, 2);
        let base = m.forward(&f, &LayerMasks::new(), &LayerMasks::new()).unwrap();
        let enc_masks: LayerMasks = (0..2).map(|l| (l, AllowMask::all(5))).collect();
        let dec_masks: LayerMasks = (0..2).map(|l| (l, AllowMask::all(7))).collect();
        let masked = m.forward(&f, &enc_masks, &dec_masks).unwrap();
        assert_eq!(base.encoder, masked.encoder);
        assert_eq!(base.trace, masked.trace);
    }

    #[test]
    fn mask_size_mismatch_rejected() {
        let m = Vlm::random(VlmConfig::toy(), 8).unwrap();
        let f = features(&m, 2);
        let masks: LayerMasks = [(0, AllowMask::all(4))].into_iter().collect();
        assert!(matches!(m.encode_image(&f, &masks), Err(ProbeError::Mask(_))));
        let masks: LayerMasks = [(5, AllowMask::all(5))].into_iter().collect();
        assert!(matches!(m.encode_image(&f, &masks), Err(ProbeError::Plan(_))));
    }

    #[test]
    fn blocked_patch_matches_enumeration() {
        // 2x2 grid, one encoder layer, patch 3 (position 4) isolated from all.
        let cfg = VlmConfig {
            encoder_layers: 1,
            ..VlmConfig::toy()
        };
        let m = Vlm::random(cfg, 13).unwrap();
        let f = features(&m, 3);
        let mask = AllowMask::from_fn(5, |q, k| (q == 4) == (k == 4));
        let masks: LayerMasks = [(0, mask.clone())].into_iter().collect();
        let enc = m.encode_image(&f, &masks).unwrap();

        let x0 = &enc.layers[0];
        let blk = &m.weights.encoder.blocks[0];
        // Position 4 attends only itself: its attention output is v·Wo of its own row.
        let normed = blk.ln1.apply_rows(&x0.select_rows(&[4])).unwrap();
        let self_only = normed.matmul(&blk.attn.wv).unwrap().matmul(&blk.attn.wo).unwrap();
        let mut h = x0.select_rows(&[4]);
        h.add_assign(&self_only).unwrap();
        let n2 = blk.ln2.apply_rows(&h).unwrap();
        h.add_assign(&blk.mlp.forward(&n2).unwrap()).unwrap();
        for (a, b) in enc.layers[1].row(4).iter().zip(h.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        // Rows 0..4 see exactly keys 0..4 (a 4x4 problem).
        let sub = x0.select_rows(&[0, 1, 2, 3]);
        let n1 = blk.ln1.apply_rows(&sub).unwrap();
        let attn = masked_attention(&n1, &blk.attn, m.config.heads_enc, None).unwrap();
        let mut h = sub.clone();
        h.add_assign(&attn).unwrap();
        let n2 = blk.ln2.apply_rows(&h).unwrap();
        h.add_assign(&blk.mlp.forward(&n2).unwrap()).unwrap();
        for r in 0..4 {
            for (a, b) in enc.layers[1].row(r).iter().zip(h.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_self_only_position_matches_hand_rolled() {
        let cfg = VlmConfig {
            decoder_layers: 1,
            patch_grid: GridGeometry::new(2, 2),
            prompt_token_ids: vec![1, 2, 3],
            ..VlmConfig::toy()
        };
        let m = Vlm::random(cfg, 21).unwrap();
        let f = features(&m, 4);
        let enc = m.encode_image(&f, &LayerMasks::new()).unwrap();
        let embeds = m.connect(&enc).unwrap();
        // Image patch 2 sits at position 5; block everything in its past.
        let mask = AllowMask::from_fn(7, |q, _| q != 5);
        let masks: LayerMasks = [(0, mask)].into_iter().collect();
        let trace = m.decode(&embeds, &masks).unwrap();

        let blk = &m.weights.decoder.blocks[0];
        let x = embeds.select_rows(&[2]);
        let normed = blk.ln1.apply_rows(&x).unwrap();
        let mut h = x.clone();
        h.add_assign(&normed.matmul(&blk.attn.wv).unwrap().matmul(&blk.attn.wo).unwrap())
            .unwrap();
        let n2 = blk.ln2.apply_rows(&h).unwrap();
        h.add_assign(&blk.mlp.forward(&n2).unwrap()).unwrap();
        for (a, b) in trace.hidden[1].row(2).iter().zip(h.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = Vlm::random(VlmConfig::toy(), 31).unwrap();
        let f = features(&m, 5);
        let enc = m.encode_image(&f, &LayerMasks::new()).unwrap();
        let embeds = m.connect(&enc).unwrap();
        let base = m.decode(&embeds, &LayerMasks::new()).unwrap();
        for j in 0..4 {
            let mut bumped = embeds.clone();
            bumped.row_mut(j)[0] += 0.5;
            let t = m.decode(&bumped, &LayerMasks::new()).unwrap();
            for l in 0..t.hidden.len() {
                for p in 0..j {
                    assert_eq!(t.hidden[l].row(p), base.hidden[l].row(p));
                }
                assert_ne!(t.hidden[l].row(j), base.hidden[l].row(j));
            }
        }
    }

    #[test]
    fn future_permitting_mask_cannot_break_causality() {
        let m = Vlm::random(VlmConfig::toy(), 32).unwrap();
        let f = features(&m, 6);
        let enc = m.encode_image(&f, &LayerMasks::new()).unwrap();
        let embeds = m.connect(&enc).unwrap();
        let masks: LayerMasks = (0..2).map(|l| (l, AllowMask::all(7))).collect();
        let a = m.decode(&embeds, &masks).unwrap();
        let b = m.decode(&embeds, &LayerMasks::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = Vlm::random(VlmConfig::toy(), 4).unwrap();
        let out = m
            .forward(&features(&m, 7), &LayerMasks::new(), &LayerMasks::new())
            .unwrap();
        out.trace
            .save(dir.path(), DType::F64, serde_json::json!({"source": "toy"}))
            .unwrap();
        let (back, enc) = DecoderTrace::load(dir.path()).unwrap();
        assert_eq!(back, out.trace);
        assert!(enc.is_none());
    }

    #[test]
    fn trace_without_unembedding_names_the_asset() {
        let dir = tempfile::tempdir().unwrap();
        let m = Vlm::random(VlmConfig::toy(), 4).unwrap();
        let out = m
            .forward(&features(&m, 7), &LayerMasks::new(), &LayerMasks::new())
            .unwrap();
        out.trace.save(dir.path(), DType::F32, serde_json::Value::Null).unwrap();
        let mut manifest = crate::interchange::read_manifest(dir.path()).unwrap();
        manifest.tensors.retain(|t| t.name != "unembedding");
        std::fs::write(
            dir.path().join(crate::interchange::MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        match DecoderTrace::load(dir.path()) {
            Err(ProbeError::MissingAsset(name)) => assert_eq!(name, "unembedding"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
