use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lla::QuerySource;
use crate::slic::{Compactness, SlicConfig};
use crate::sppp::{AssignMode, PoolMode, SpppConfig};

/// Which token front end and which attention the encoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Fixed-grid patches, learned grid positions, self-attention.
    Baseline,
    /// Superpixel-pooled tokens, self-attention.
    SpppOnly,
    /// Fixed-grid patches, latent cross-attention.
    LlaOnly,
    /// Superpixel-pooled tokens, latent cross-attention.
    SpppLla,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::SpppOnly, Variant::LlaOnly, Variant::SpppLla];

    pub fn uses_sppp(self) -> bool {
        matches!(self, Variant::SpppOnly | Variant::SpppLla)
    }

    pub fn uses_lla(self) -> bool {
        matches!(self, Variant::LlaOnly | Variant::SpppLla)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SpppOnly => "sppp",
            Variant::LlaOnly => "lla",
            Variant::SpppLla => "sppp+lla",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "vit" => Ok(Variant::Baseline),
            "sppp" | "sppp-only" => Ok(Variant::SpppOnly),
            "lla" | "lla-only" => Ok(Variant::LlaOnly),
            "sppp+lla" | "focused" => Ok(Variant::SpppLla),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected baseline, sppp, lla or sppp+lla)"
            ))),
        }
    }
}

/// Named hyperparameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small enough for gradient checks and CPU smoke training.
    Desk,
    /// Full-width encoder: D=768, 12 layers, 12 heads, FFN 768.
    Full,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub variant: Variant,
    /// SLIC target `K`.
    pub superpixels: usize,
    /// `L`
    pub latents: usize,
    pub classes: usize,
    pub compactness: Compactness,
    pub slic_iters: usize,
    pub merge_orphans: bool,
    pub assign: AssignMode,
    pub pool: PoolMode,
    pub queries: QuerySource,
}

impl ModelConfig {
    pub fn preset(preset: Preset, variant: Variant) -> Self {
        let base = Self {
            image_height: 32,
            image_width: 32,
            patch: 4,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn: 64,
            variant,
            superpixels: 16,
            latents: 8,
            classes: 10,
            compactness: Compactness::Normalized { alpha: 0.1 },
            slic_iters: 10,
            merge_orphans: false,
            assign: AssignMode::Majority,
            pool: PoolMode::Mean,
            queries: QuerySource::Mixing,
        };
        match preset {
            Preset::Desk => base,
            Preset::Full => Self {
                d_model: 768,
                layers: 12,
                heads: 12,
                ffn: 768,
                ..base
            },
        }
    }

    pub fn desk(variant: Variant) -> Self {
        Self::preset(Preset::Desk, variant)
    }

    /// Patch count `N`.
    pub fn patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Longest token sequence the encoder can receive, class token included.
    pub fn max_tokens(&self) -> usize {
        if self.variant.uses_sppp() {
            self.superpixels.min(self.patches()) + 1
        } else {
            self.patches() + 1
        }
    }

    pub fn slic(&self) -> SlicConfig {
        SlicConfig {
            k: self.superpixels,
            compactness: self.compactness,
            max_iter: self.slic_iters,
            seed: 0,
            merge_orphans: self.merge_orphans,
        }
    }

    pub fn sppp(&self) -> SpppConfig {
        SpppConfig {
            patch: self.patch,
            slic: self.slic(),
            assign: self.assign,
            pool: self.pool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(Error::Geometry {
                height: self.image_height,
                width: self.image_width,
                patch: self.patch,
            });
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model={}",
                self.heads, self.d_model
            )));
        }
        if self.variant.uses_sppp() {
            self.slic().validate(self.image_height * self.image_width)?;
            if let AssignMode::Threshold { tau } = self.assign {
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(Error::Config(format!("threshold tau={tau} must lie in (0, 1]")));
                }
            }
        }
        if self.variant.uses_lla() {
            let x = self.max_tokens();
            if self.latents == 0 || self.latents >= x {
                return Err(Error::Config(format!(
                    "variant {} needs 1 <= L < {x}, got L={}",
                    self.variant, self.latents
                )));
            }
        }
        Ok(())
    }

    /// `key=value` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (compactness_kind, compactness) = match self.compactness {
            Compactness::Classic { m } => ("classic", m),
            Compactness::Normalized { alpha } => ("normalized", alpha),
        };
        vec![
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("patch", self.patch.to_string()),
            ("d_model", self.d_model.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("variant", self.variant.to_string()),
            ("superpixels", self.superpixels.to_string()),
            ("latents", self.latents.to_string()),
            ("classes", self.classes.to_string()),
            ("compactness_kind", compactness_kind.to_string()),
            ("compactness", compactness.to_string()),
            ("slic_iters", self.slic_iters.to_string()),
            ("merge_orphans", self.merge_orphans.to_string()),
            (
                "assign",
                match self.assign {
                    AssignMode::Majority => "majority".to_string(),
                    AssignMode::Threshold { tau } => format!("threshold:{tau}"),
                },
            ),
            (
                "pool",
                match self.pool {
                    PoolMode::Mean => "mean",
                    PoolMode::OverlapWeighted => "weighted",
                }
                .to_string(),
            ),
            (
                "queries",
                match self.queries {
                    QuerySource::Mixing => "mixing",
                    QuerySource::FreeLatents => "free",
                }
                .to_string(),
            ),
        ]
    }

    /// Whether `key` names a model field.
    pub fn has_key(key: &str) -> bool {
        Self::desk(Variant::Baseline).entries().iter().any(|(k, _)| *k == key)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
        }
        match key {
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn" => self.ffn = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "superpixels" => self.superpixels = num(key, value)?,
            "latents" => self.latents = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "compactness_kind" => {
                let w = match self.compactness {
                    Compactness::Classic { m } => m,
                    Compactness::Normalized { alpha } => alpha,
                };
                self.compactness = match value {
                    "classic" => Compactness::Classic { m: w },
                    "normalized" => Compactness::Normalized { alpha: w },
                    _ => return Err(Error::Config(format!("invalid value `{value}` for {key}"))),
                };
            }
            "compactness" => {
                let w: f64 = num(key, value)?;
                self.compactness = match self.compactness {
                    Compactness::Classic { .. } => Compactness::Classic { m: w },
                    Compactness::Normalized { .. } => Compactness::Normalized { alpha: w },
                };
            }
            "slic_iters" => self.slic_iters = num(key, value)?,
            "merge_orphans" => self.merge_orphans = num(key, value)?,
            "assign" => {
                self.assign = match value.split_once(':') {
                    None if value == "majority" => AssignMode::Majority,
                    None if value == "threshold" => AssignMode::Threshold { tau: 0.5 },
                    Some(("threshold", tau)) => AssignMode::Threshold { tau: num(key, tau)? },
                    _ => return Err(Error::Config(format!("invalid value `{value}` for {key}"))),
                }
            }
            "pool" => {
                self.pool = match value {
                    "mean" => PoolMode::Mean,
                    "weighted" => PoolMode::OverlapWeighted,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for {key}"))),
                }
            }
            "queries" => {
                self.queries = match value {
                    "mixing" => QuerySource::Mixing,
                    "free" => QuerySource::FreeLatents,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for {key}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text used for checkpoint digests.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
