use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::{patch_matrix, patchify, ImageRgb};
use crate::lla::{
    compress_queries, multi_head_attention, AttentionOutput, AttentionParams, Compressor, LlaConfig, LN_EPS,
};
use crate::numerics::{Activation, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sppp::{prepare, sppp_forward, SpppLayout, SpppParams, PE_HIDDEN};

/// Layer-norm gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{prefix}.gain"), &[d], 1.0),
            bias: store.add_filled(format!("{prefix}.bias"), &[d], 0.0),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// How raw images become encoder tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Frontend {
    /// Patch projection plus one learned position per grid cell and the class slot.
    Grid { embed: ParamId, positions: ParamId },
    Sppp(SpppParams),
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfBlock {
    pub norm1: Norm,
    pub attention: AttentionParams,
    pub norm2: Norm,
    pub ffn: Mlp,
}

/// Latent block: the latent stream cross-attends to the normalized input
/// tokens. Only the first block owns a query compressor; later blocks
/// normalize the latent stream instead.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub input_norm: Norm,
    pub compressor: Option<Compressor>,
    pub latent_norm: Option<Norm>,
    pub attention: AttentionParams,
    pub norm2: Norm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    SelfAttention(Vec<SelfBlock>),
    Latent(Vec<LatentBlock>),
}

/// Parameter handles of a built model.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub frontend: Frontend,
    pub class_token: ParamId,
    pub encoder: Encoder,
    pub final_norm: Norm,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Parameter-independent preprocessing of one image.
#[derive(Debug, Clone)]
pub enum Prepared {
    /// `N x P^2*3` flattened patches.
    Grid(Tensor),
    Sppp(Box<SpppLayout>),
}

impl Prepared {
    /// Tokens entering the encoder, class token included.
    pub fn sequence_len(&self) -> usize {
        match self {
            Prepared::Grid(p) => p.rows() + 1,
            Prepared::Sppp(l) => l.tokens() + 1,
        }
    }
}

/// Tape handles of one forward pass, kept for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `B x C`
    pub logits: Var,
    /// Per item, the token sequence entering block 1.
    pub tokens: Vec<Var>,
    /// Per item, per layer.
    pub attention: Vec<Vec<AttentionOutput>>,
}

/// Configuration plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    /// Deterministic initialization: scaled-uniform projections, zero biases.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        // standard deviation 0.02 for tokens, positions and the head
        let token_bound = 0.02 * 3f64.sqrt();

        let frontend = if cfg.variant.uses_sppp() {
            let bound = (6.0 / (cfg.patch_dim() + d) as f64).sqrt();
            let embed = store.add_uniform("embed", &[cfg.patch_dim(), d], bound, &mut rng);
            let pe = Mlp::new(&mut store, "centroid_pe", &[2, PE_HIDDEN, d], Activation::Gelu, &mut rng);
            Frontend::Sppp(SpppParams { embed, pe })
        } else {
            let bound = (6.0 / (cfg.patch_dim() + d) as f64).sqrt();
            let embed = store.add_uniform("embed", &[cfg.patch_dim(), d], bound, &mut rng);
            let positions = store.add_uniform("positions", &[cfg.patches() + 1, d], token_bound, &mut rng);
            Frontend::Grid { embed, positions }
        };
        let class_token = store.add_uniform("class_token", &[1, d], token_bound, &mut rng);

        let ffn = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            Mlp::new(store, prefix, &[d, cfg.ffn, d], Activation::Gelu, rng)
        };
        let encoder = if cfg.variant.uses_lla() {
            let lla = lla_config(cfg);
            Encoder::Latent(
                (0..cfg.layers)
                    .map(|l| {
                        let p = format!("block{l}");
                        let first = l == 0;
                        LatentBlock {
                            input_norm: Norm::new(&mut store, &format!("{p}.input_norm"), d),
                            compressor: first.then(|| Compressor::new(&mut store, &format!("{p}.compress"), &lla, &mut rng)),
                            latent_norm: (!first).then(|| Norm::new(&mut store, &format!("{p}.latent_norm"), d)),
                            attention: AttentionParams::new(&mut store, &format!("{p}.attn"), d, &mut rng),
                            norm2: Norm::new(&mut store, &format!("{p}.norm2"), d),
                            ffn: ffn(&mut store, &format!("{p}.ffn"), &mut rng),
                        }
                    })
                    .collect(),
            )
        } else {
            Encoder::SelfAttention(
                (0..cfg.layers)
                    .map(|l| {
                        let p = format!("block{l}");
                        SelfBlock {
                            norm1: Norm::new(&mut store, &format!("{p}.norm1"), d),
                            attention: AttentionParams::new(&mut store, &format!("{p}.attn"), d, &mut rng),
                            norm2: Norm::new(&mut store, &format!("{p}.norm2"), d),
                            ffn: ffn(&mut store, &format!("{p}.ffn"), &mut rng),
                        }
                    })
                    .collect(),
            )
        };
        let final_norm = Norm::new(&mut store, "final_norm", d);
        let head_weight = store.add_uniform("head.weight", &[d, cfg.classes], token_bound, &mut rng);
        let head_bias = store.add_filled("head.bias", &[cfg.classes], 0.0);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net: Network {
                frontend,
                class_token,
                encoder,
                final_norm,
                head_weight,
                head_bias,
            },
        })
    }

    /// Everything that does not depend on parameters: patches, and for the
    /// superpixel variants the segmentation and pooling layout.
    pub fn prepare(&self, img: &ImageRgb) -> Result<Prepared> {
        if img.height() != self.cfg.image_height || img.width() != self.cfg.image_width {
            return Err(Error::Config(format!(
                "image is {}x{}, model expects {}x{}",
                img.height(),
                img.width(),
                self.cfg.image_height,
                self.cfg.image_width
            )));
        }
        if self.cfg.variant.uses_sppp() {
            let layout = prepare(img, &self.cfg.sppp())?;
            if self.cfg.variant.uses_lla() && layout.tokens() + 1 < self.cfg.latents {
                return Err(Error::Config(format!(
                    "image yields {} tokens, fewer than L={} latents",
                    layout.tokens() + 1,
                    self.cfg.latents
                )));
            }
            Ok(Prepared::Sppp(Box::new(layout)))
        } else {
            let grid = patchify(img, self.cfg.patch)?;
            Ok(Prepared::Grid(patch_matrix(&grid, img)?))
        }
    }

    /// Token sequence `[cls; tokens]` entering the encoder.
    pub fn tokens(&self, tape: &mut Tape, store: &ParamStore, input: &Prepared) -> Result<Var> {
        let cls = tape.param(store, self.net.class_token);
        match (&self.net.frontend, input) {
            (Frontend::Grid { embed, positions }, Prepared::Grid(patches)) => {
                tape.set_stage("embed");
                let x = tape.constant(patches.clone())?;
                let e = tape.param(store, *embed);
                let emb = tape.matmul(x, e)?;
                let seq = tape.concat_rows(&[cls, emb])?;
                let pos = tape.param(store, *positions);
                tape.add(seq, pos)
            }
            (Frontend::Sppp(params), Prepared::Sppp(layout)) => {
                let pooled = sppp_forward(tape, store, layout, params)?;
                tape.concat_rows(&[cls, pooled])
            }
            _ => Err(Error::Config("prepared input does not match the model front end".into())),
        }
    }

    /// Runs the encoder on one token sequence and returns the `1 x D`
    /// normalized class representation.
    fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, attn: &mut Vec<AttentionOutput>) -> Result<Var> {
        let heads = self.cfg.heads;
        let out = match &self.net.encoder {
            Encoder::SelfAttention(blocks) => {
                let mut z = tokens;
                for b in blocks {
                    tape.set_stage("block.attention");
                    let n = b.norm1.apply(tape, store, z)?;
                    let a = multi_head_attention(tape, store, n, n, heads, &b.attention)?;
                    z = tape.add(z, a.output)?;
                    attn.push(a);
                    z = ffn_residual(tape, store, z, &b.norm2, &b.ffn)?;
                }
                z
            }
            Encoder::Latent(blocks) => {
                let lla = lla_config(&self.cfg);
                let mut z = None;
                for b in blocks {
                    tape.set_stage("block.latent");
                    let h = b.input_norm.apply(tape, store, tokens)?;
                    let (stream, q) = match (z, &b.compressor, &b.latent_norm) {
                        (None, Some(c), _) => {
                            let latent = compress_queries(tape, store, h, &lla, c)?;
                            (latent.queries, latent.queries)
                        }
                        (Some(z), _, Some(norm)) => (z, norm.apply(tape, store, z)?),
                        _ => return Err(Error::Config("latent block wiring is inconsistent".into())),
                    };
                    let a = multi_head_attention(tape, store, q, h, heads, &b.attention)?;
                    let next = tape.add(stream, a.output)?;
                    attn.push(a);
                    z = Some(ffn_residual(tape, store, next, &b.norm2, &b.ffn)?);
                }
                z.expect("at least one layer")
            }
        };
        tape.set_stage("head");
        let n = self.net.final_norm.apply(tape, store, out)?;
        tape.slice_rows(n, 0, 1)
    }

    /// Records a batched forward pass on `tape`.
    pub fn forward_trace(&self, tape: &mut Tape, batch: &[&Prepared]) -> Result<ForwardTrace> {
        self.forward_trace_with(tape, &self.store, batch)
    }

    /// [`Model::forward_trace`] reading parameters from `store` instead of
    /// the model's own.
    pub fn forward_trace_with(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Prepared]) -> Result<ForwardTrace> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tokens = Vec::with_capacity(batch.len());
        let mut attention = Vec::with_capacity(batch.len());
        let mut classes = Vec::with_capacity(batch.len());
        for item in batch {
            let t = self.tokens(tape, store, item)?;
            let mut attn = Vec::with_capacity(self.cfg.layers);
            classes.push(self.encode(tape, store, t, &mut attn)?);
            tokens.push(t);
            attention.push(attn);
        }
        tape.set_stage("head");
        let rows = if classes.len() == 1 { classes[0] } else { tape.concat_rows(&classes)? };
        let w = tape.param(store, self.net.head_weight);
        let b = tape.param(store, self.net.head_bias);
        let logits = tape.matmul(rows, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(ForwardTrace {
            logits,
            tokens,
            attention,
        })
    }

    /// `B x C` logits for prepared inputs.
    pub fn forward_prepared(&self, batch: &[&Prepared]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward_trace(&mut tape, batch)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// `B x C` logits for raw images.
    pub fn forward(&self, images: &[ImageRgb]) -> Result<Tensor> {
        let prepared = images.iter().map(|img| self.prepare(img)).collect::<Result<Vec<_>>>()?;
        self.forward_prepared(&prepared.iter().collect::<Vec<_>>())
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }
}

fn ffn_residual(tape: &mut Tape, store: &ParamStore, z: Var, norm: &Norm, ffn: &Mlp) -> Result<Var> {
    tape.set_stage("block.ffn");
    let n = norm.apply(tape, store, z)?;
    let f = ffn.forward(tape, store, n)?;
    tape.add(z, f)
}

/// Latent attention settings implied by a model configuration.
pub fn lla_config(cfg: &ModelConfig) -> LlaConfig {
    LlaConfig {
        d_model: cfg.d_model,
        heads: cfg.heads,
        latents: cfg.latents,
        max_seq: cfg.max_tokens(),
        queries: cfg.queries,
        class_latent: true,
    }
}

/// Closed-form parameter count of the baseline encoder.
pub fn baseline_parameter_count(cfg: &ModelConfig) -> usize {
    let (d, f, c, n) = (cfg.d_model, cfg.ffn, cfg.classes, cfg.patches());
    let per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
    cfg.patch_dim() * d + d + (n + 1) * d + cfg.layers * per_layer + 2 * d + d * c + c
}
