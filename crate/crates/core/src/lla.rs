//! Latent cross-attention.
//!
//! A fixed number `L` of latent queries is derived from the `X` input tokens,
//! and only those latents attend to the inputs, so each head scores an
//! `L x X` matrix instead of `X x X`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Where the latent queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuerySource {
    /// Learned token mixing over the normalized inputs.
    #[default]
    Mixing,
    /// Input-independent learned latent tokens.
    FreeLatents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LlaConfig {
    pub d_model: usize,
    pub heads: usize,
    /// `L`
    pub latents: usize,
    /// Largest accepted `X`; sizes the mixing matrix.
    pub max_seq: usize,
    pub queries: QuerySource,
    /// Latent row 0 is the normalized first input row (the class token).
    pub class_latent: bool,
}

impl LlaConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model width {}",
                self.heads, self.d_model
            )));
        }
        if self.latents == 0 || self.latents >= self.max_seq {
            return Err(Error::Config(format!(
                "latent count {} must lie in [1, {})",
                self.latents, self.max_seq
            )));
        }
        Ok(())
    }

    /// Latent rows produced by the compressor itself.
    fn compressed_rows(&self) -> usize {
        self.latents - usize::from(self.class_latent)
    }
}

/// Learned state of the query compressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compressor {
    pub source: QuerySource,
    /// `L' x max_seq` mixing weights or `L' x D` free latents; `None` when
    /// the class latent is the only row.
    pub param: Option<ParamId>,
}

impl Compressor {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LlaConfig, rng: &mut impl Rng) -> Self {
        let rows = cfg.compressed_rows();
        let param = (rows > 0).then(|| match cfg.queries {
            QuerySource::Mixing => store.add_range(format!("{prefix}.mixing"), &[rows, cfg.max_seq], 0.5, 1.5, rng),
            QuerySource::FreeLatents => {
                let bound = (6.0 / (rows + cfg.d_model) as f64).sqrt();
                store.add_uniform(format!("{prefix}.latents"), &[rows, cfg.d_model], bound, rng)
            }
        });
        Self {
            source: cfg.queries,
            param,
        }
    }
}

/// The latent queries `c^Q` on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentState {
    /// `L x D`
    pub queries: Var,
    pub rows: usize,
}

/// Builds the `L x D` latent queries from normalized inputs `h` (`X x D`).
///
/// Mixing weights are sliced to the first `X` columns and each row is divided
/// by its absolute sum, so the result does not scale with `X`.
pub fn compress_queries(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    cfg: &LlaConfig,
    compressor: &Compressor,
) -> Result<LatentState> {
    let x = tape.value(h).rows();
    let d = tape.value(h).cols();
    if x > cfg.max_seq {
        return Err(Error::Config(format!(
            "sequence length {x} exceeds the configured maximum {}",
            cfg.max_seq
        )));
    }
    if x < cfg.latents {
        return Err(Error::Config(format!("sequence length {x} is shorter than {} latents", cfg.latents)));
    }
    if d != cfg.d_model {
        return Err(Error::Dimension {
            op: "compress_queries",
            lhs: tape.value(h).shape().to_vec(),
            rhs: vec![cfg.max_seq, cfg.d_model],
        });
    }
    tape.set_stage("lla.compress");
    let mut parts = Vec::with_capacity(2);
    if cfg.class_latent {
        parts.push(tape.slice_rows(h, 0, 1)?);
    }
    if let Some(id) = compressor.param {
        let p = tape.param(store, id);
        let rows = match compressor.source {
            QuerySource::Mixing => {
                let m = tape.slice_cols(p, 0, x)?;
                let m = tape.row_normalize_l1(m)?;
                tape.matmul(m, h)?
            }
            QuerySource::FreeLatents => p,
        };
        parts.push(rows);
    }
    let queries = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    Ok(LatentState {
        queries,
        rows: cfg.latents,
    })
}

/// `D x D` projections of one attention layer; none carries a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / d as f64).sqrt();
        let mut mk = |name: &str| store.add_uniform(format!("{prefix}.{name}"), &[d, d], bound, rng);
        Self {
            wq: mk("wq"),
            wk: mk("wk"),
            wv: mk("wv"),
            wo: mk("wo"),
        }
    }
}

/// Intermediate values of one multi-head attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionOutput {
    /// Per head, `rows x d`.
    pub queries: Vec<Var>,
    /// Per head, `X x d`.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Per head, `rows x X`; every row sums to one.
    pub weights: Vec<Var>,
    /// Per head, `rows x d`.
    pub head_outputs: Vec<Var>,
    /// Heads side by side, `rows x D`.
    pub concat: Var,
    /// `concat * W_O`
    pub output: Var,
}

impl AttentionOutput {
    pub fn trace(&self, tape: &Tape) -> AttentionTrace {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        AttentionTrace {
            queries: get(&self.queries),
            keys: get(&self.keys),
            values: get(&self.values),
            weights: get(&self.weights),
            head_outputs: get(&self.head_outputs),
            concat: tape.value(self.concat).clone(),
            output: tape.value(self.output).clone(),
        }
    }
}

/// Detached copy of an [`AttentionOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub queries: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub weights: Vec<Tensor>,
    pub head_outputs: Vec<Tensor>,
    pub concat: Tensor,
    pub output: Tensor,
}

/// Scaled dot-product attention of `queries` (`rows x D`) over
/// `keys_values` (`X x D`), split into `heads` heads.
///
/// Self-attention is the case `queries == keys_values`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    queries: Var,
    keys_values: Var,
    heads: usize,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let d_model = tape.value(queries).cols();
    if heads == 0 || d_model % heads != 0 || tape.value(keys_values).cols() != d_model {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: tape.value(queries).shape().to_vec(),
            rhs: tape.value(keys_values).shape().to_vec(),
        });
    }
    let d = d_model / heads;
    let rows = tape.value(queries).rows();
    let x = tape.value(keys_values).rows();
    let scale = 1.0 / (d as f64).sqrt();

    tape.set_stage("attention.project");
    let wq = tape.param(store, params.wq);
    let wk = tape.param(store, params.wk);
    let wv = tape.param(store, params.wv);
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys_values, wk)?;
    let v = tape.matmul(keys_values, wv)?;

    let mut out = AttentionOutput {
        queries: Vec::with_capacity(heads),
        keys: Vec::with_capacity(heads),
        values: Vec::with_capacity(heads),
        weights: Vec::with_capacity(heads),
        head_outputs: Vec::with_capacity(heads),
        concat: q,
        output: q,
    };
    tape.set_stage("attention.scores");
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        tape.record_scores(rows, x);
        let scores = tape.scale(scores, scale)?;
        let a = tape.softmax_rows(scores)?;
        let o = tape.matmul(a, vh)?;
        out.queries.push(qh);
        out.keys.push(kh);
        out.values.push(vh);
        out.weights.push(a);
        out.head_outputs.push(o);
    }
    tape.set_stage("attention.output");
    out.concat = if heads == 1 {
        out.head_outputs[0]
    } else {
        tape.concat_cols(&out.head_outputs)?
    };
    let wo = tape.param(store, params.wo);
    out.output = tape.matmul(out.concat, wo)?;
    Ok(out)
}

/// Input normalization, query compressor and projections of one latent
/// attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LlaParams {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub compressor: Compressor,
    pub attention: AttentionParams,
}

impl LlaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LlaConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            norm_gain: store.add_filled(format!("{prefix}.norm.gain"), &[d], 1.0),
            norm_bias: store.add_filled(format!("{prefix}.norm.bias"), &[d], 0.0),
            compressor: Compressor::new(store, &format!("{prefix}.compress"), cfg, rng),
            attention: AttentionParams::new(store, &format!("{prefix}.attn"), d, rng),
        }
    }
}

/// Normalizes `h`, compresses it to latent queries and lets them attend to
/// the normalized tokens. Returns the latents and the attention result.
pub fn lla_attention(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    cfg: &LlaConfig,
    params: &LlaParams,
) -> Result<(LatentState, AttentionOutput)> {
    tape.set_stage("lla.norm");
    let g = tape.param(store, params.norm_gain);
    let b = tape.param(store, params.norm_bias);
    let h_norm = tape.layer_norm(h, g, b, LN_EPS)?;
    let latent = compress_queries(tape, store, h_norm, cfg, &params.compressor)?;
    let attn = multi_head_attention(tape, store, latent.queries, h_norm, cfg.heads, &params.attention)?;
    Ok((latent, attn))
}

/// Runs [`lla_attention`] on each `X x D` item of a batch, one tape per item.
pub fn lla_forward(store: &ParamStore, batch: &[Tensor], cfg: &LlaConfig, params: &LlaParams) -> Result<Vec<AttentionTrace>> {
    cfg.validate()?;
    batch
        .iter()
        .map(|item| {
            let mut tape = Tape::new();
            let h = tape.constant(item.clone())?;
            let (_, attn) = lla_attention(&mut tape, store, h, cfg, params)?;
            Ok(attn.trace(&tape))
        })
        .collect()
}
