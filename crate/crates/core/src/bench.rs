//! Cost accounting: attention score entries, multiply-accumulates, peak tape
//! bytes and wall time, each checked against a closed-form model.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::lla::{multi_head_attention, AttentionParams, QuerySource};
use crate::model::{Model, ModelConfig, Prepared, Variant};
use crate::numerics::{ParamStore, Tape};
use crate::sppp::{self, PE_HIDDEN};

/// Closed-form counts for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyticCost {
    /// Attention score entries in one layer, all heads.
    pub scores_per_layer: u64,
    pub score_entries: u64,
    pub macs: u64,
}

/// Encoder queries per layer and keys per layer for a sequence of `x` tokens.
fn attention_shape(cfg: &ModelConfig, x: u64) -> (u64, u64) {
    if cfg.variant.uses_lla() {
        (cfg.latents as u64, x)
    } else {
        (x, x)
    }
}

/// Counts for a forward pass over one image whose encoder sequence has `x`
/// tokens (class token included).
pub fn analytic_cost(cfg: &ModelConfig, x: usize) -> AnalyticCost {
    let (d, f, c) = (cfg.d_model as u64, cfg.ffn as u64, cfg.classes as u64);
    let (n, pd, layers, heads) = (cfg.patches() as u64, cfg.patch_dim() as u64, cfg.layers as u64, cfg.heads as u64);
    let x = x as u64;
    let (q, kv) = attention_shape(cfg, x);
    let scores_per_layer = heads * q * kv;

    let mut macs = n * pd * d;
    if cfg.variant.uses_sppp() {
        let s = x - 1;
        let hidden = PE_HIDDEN as u64;
        macs += s * n * d + s * 2 * hidden + s * hidden * d;
    }
    // projections, scores, weighted values, output projection, feed-forward
    let per_layer = q * d * d + 2 * kv * d * d + 2 * q * kv * d + q * d * d + 2 * q * d * f;
    macs += layers * per_layer;
    if cfg.variant.uses_lla() && cfg.queries == QuerySource::Mixing {
        macs += (q - 1) * x * d;
    }
    macs += d * c;
    AnalyticCost {
        scores_per_layer,
        score_entries: layers * scores_per_layer,
        macs,
    }
}

/// Instrumented counters of a single-image forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measured {
    pub score_entries: u64,
    pub max_score_matrix: u64,
    pub macs: u64,
    pub elem_ops: u64,
    pub peak_bytes: u64,
}

pub fn measure(model: &Model, input: &Prepared) -> Result<Measured> {
    let mut tape = Tape::new();
    model.forward_trace(&mut tape, &[input])?;
    let c = tape.counters();
    Ok(Measured {
        score_entries: c.score_entries,
        max_score_matrix: c.max_score_matrix,
        macs: c.macs,
        elem_ops: c.elem_ops,
        peak_bytes: tape.live_bytes() as u64,
    })
}

/// Closed-form score entries for `input`, verified against one instrumented
/// forward pass.
pub fn count_attention_entries(model: &Model, input: &Prepared) -> Result<u64> {
    let analytic = analytic_cost(&model.cfg, input.sequence_len());
    let measured = measure(model, input)?;
    check("score entries", analytic.score_entries, measured.score_entries)?;
    check("multiply-accumulates", analytic.macs, measured.macs)?;
    Ok(analytic.score_entries)
}

fn check(what: &'static str, analytic: u64, instrumented: u64) -> Result<()> {
    if analytic != instrumented {
        return Err(Error::Accounting {
            what,
            analytic,
            instrumented,
        });
    }
    Ok(())
}

/// One row of a benchmark report.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    /// Grid patches `N`.
    pub n: usize,
    /// Tokens after the front end, class token excluded.
    pub s: usize,
    /// Latents, 0 without latent attention.
    pub l: usize,
    pub layers: usize,
    pub heads: usize,
    pub scores_per_layer: u64,
    pub score_entries: u64,
    pub macs: u64,
    pub elem_ops: u64,
    pub peak_bytes: u64,
    /// Median wall time per image, preprocessing included.
    pub secs_per_image: f64,
    pub runs: usize,
}

const KEYS: [&str; 13] = [
    "variant",
    "n",
    "s",
    "l",
    "layers",
    "heads",
    "scores_per_layer",
    "score_entries",
    "macs",
    "elem_ops",
    "peak_bytes",
    "secs_per_image",
    "runs",
];

impl CostReport {
    fn values(&self) -> [String; 13] {
        [
            self.variant.to_string(),
            self.n.to_string(),
            self.s.to_string(),
            self.l.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.scores_per_layer.to_string(),
            self.score_entries.to_string(),
            self.macs.to_string(),
            self.elem_ops.to_string(),
            self.peak_bytes.to_string(),
            self.secs_per_image.to_string(),
            self.runs.to_string(),
        ]
    }

    /// Space-separated `key=value` pairs in fixed order.
    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_kv(line: &str) -> Result<Self> {
        let fields: Vec<(&str, &str)> = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got `{kv}`"))))
            .collect::<Result<_>>()?;
        let keys: Vec<&str> = fields.iter().map(|f| f.0).collect();
        if keys != KEYS {
            return Err(Error::Format(format!("report keys {keys:?} differ from {KEYS:?}")));
        }
        let v = |i: usize| fields[i].1;
        fn num<T: std::str::FromStr>(key: &str, s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Format(format!("bad {key} value `{s}`")))
        }
        Ok(Self {
            variant: v(0).parse().map_err(|_| Error::Format(format!("bad variant `{}`", v(0))))?,
            n: num(KEYS[1], v(1))?,
            s: num(KEYS[2], v(2))?,
            l: num(KEYS[3], v(3))?,
            layers: num(KEYS[4], v(4))?,
            heads: num(KEYS[5], v(5))?,
            scores_per_layer: num(KEYS[6], v(6))?,
            score_entries: num(KEYS[7], v(7))?,
            macs: num(KEYS[8], v(8))?,
            elem_ops: num(KEYS[9], v(9))?,
            peak_bytes: num(KEYS[10], v(10))?,
            secs_per_image: num(KEYS[11], v(11))?,
            runs: num(KEYS[12], v(12))?,
        })
    }
}

/// Aligned table followed by one `key=value` line per row and the exact
/// score-entry ratio of every row against the first.
pub fn render_report(rows: &[CostReport]) -> String {
    let header: Vec<String> = KEYS.iter().map(|k| k.to_string()).collect();
    let body: Vec<[String; 13]> = rows.iter().map(CostReport::values).collect();
    let widths: Vec<usize> = (0..KEYS.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header, &mut out);
    for r in &body {
        line(r, &mut out);
    }
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_kv());
    }
    if let Some(first) = rows.first() {
        for r in &rows[1..] {
            let (a, b) = reduced_ratio(first.score_entries, r.score_entries);
            let _ = writeln!(
                out,
                "score_ratio {}/{} = {a}/{b} = {}",
                first.variant,
                r.variant,
                first.score_entries as f64 / r.score_entries as f64
            );
        }
    }
    out
}

/// Rows recovered from the `key=value` lines of [`render_report`].
pub fn parse_report(text: &str) -> Result<Vec<CostReport>> {
    text.lines()
        .filter(|l| l.starts_with("variant="))
        .map(CostReport::from_kv)
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `a / b` in lowest terms.
pub fn reduced_ratio(a: u64, b: u64) -> (u64, u64) {
    let g = gcd(a, b).max(1);
    (a / g, b / g)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 1,
            runs: 5,
            seed: 0,
        }
    }
}

/// Benchmarks every config on `images`.
///
/// Counts describe the first image and are verified against the closed form
/// for every image; the time is the median over `runs` passes of the mean
/// per-image time, segmentation included.
pub fn benchmark_run(cfgs: &[ModelConfig], images: &[ImageRgb], opts: BenchOptions) -> Result<Vec<CostReport>> {
    if images.is_empty() {
        return Err(Error::Config("benchmark needs at least one image".into()));
    }
    if opts.warmup == 0 || opts.runs < 5 {
        return Err(Error::Config("benchmark needs at least 1 warmup pass and 5 timed runs".into()));
    }
    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let model = Model::build(cfg, opts.seed)?;
        let prepared = images.iter().map(|i| model.prepare(i)).collect::<Result<Vec<_>>>()?;
        for p in &prepared {
            count_attention_entries(&model, p)?;
        }
        let first = &prepared[0];
        let analytic = analytic_cost(cfg, first.sequence_len());
        let measured = measure(&model, first)?;

        let pass = || -> Result<f64> {
            let t = Instant::now();
            for img in images {
                let p = model.prepare(img)?;
                std::hint::black_box(model.forward_prepared(&[&p])?);
            }
            Ok(t.elapsed().as_secs_f64() / images.len() as f64)
        };
        for _ in 0..opts.warmup {
            pass()?;
        }
        let times = (0..opts.runs).map(|_| pass()).collect::<Result<Vec<_>>>()?;
        rows.push(CostReport {
            variant: cfg.variant,
            n: cfg.patches(),
            s: first.sequence_len() - 1,
            l: if cfg.variant.uses_lla() { cfg.latents } else { 0 },
            layers: cfg.layers,
            heads: cfg.heads,
            scores_per_layer: analytic.scores_per_layer,
            score_entries: analytic.score_entries,
            macs: analytic.macs,
            elem_ops: measured.elem_ops,
            peak_bytes: measured.peak_bytes,
            secs_per_image: median(times),
            runs: opts.runs,
        });
    }
    Ok(rows)
}

/// Self-attention over the raw grid tokens versus the pooled superpixel
/// tokens of one image, class token excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenReduction {
    pub n: usize,
    pub s: usize,
    /// Instrumented single-head score entries over the `N` patch tokens.
    pub grid_entries: u64,
    /// Instrumented single-head score entries over the `S` pooled tokens.
    pub pooled_entries: u64,
}

impl TokenReduction {
    pub fn ratio(&self) -> (u64, u64) {
        reduced_ratio(self.grid_entries, self.pooled_entries)
    }
}

/// Runs one self-attention layer over each token set of `img` and reads the
/// score counters.
pub fn token_reduction(img: &ImageRgb, cfg: &ModelConfig, seed: u64) -> Result<TokenReduction> {
    let layout = sppp::prepare(img, &cfg.sppp())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let embed = store.add_uniform("embed", &[cfg.patch_dim(), d], (6.0 / (cfg.patch_dim() + d) as f64).sqrt(), &mut rng);
    let attn = AttentionParams::new(&mut store, "attn", d, &mut rng);

    let count = |pooled: bool| -> Result<u64> {
        let mut tape = Tape::new();
        let x = tape.constant(layout.patches.clone())?;
        let e = tape.param(&store, embed);
        let mut tokens = tape.matmul(x, e)?;
        if pooled {
            let w = tape.constant(layout.pooling.clone())?;
            tokens = tape.matmul(w, tokens)?;
        }
        let before = tape.counters().score_entries;
        multi_head_attention(&mut tape, &store, tokens, tokens, 1, &attn)?;
        Ok(tape.counters().score_entries - before)
    };
    let reduction = TokenReduction {
        n: layout.grid.len(),
        s: layout.tokens(),
        grid_entries: count(false)?,
        pooled_entries: count(true)?,
    };
    check("grid self-attention entries", (reduction.n * reduction.n) as u64, reduction.grid_entries)?;
    check("pooled self-attention entries", (reduction.s * reduction.s) as u64, reduction.pooled_entries)?;
    Ok(reduction)
}
