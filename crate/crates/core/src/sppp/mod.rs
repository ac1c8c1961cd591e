//! Superpixel-based patch pooling.
//!
//! Patch embeddings from the regular grid are grouped by the superpixels
//! they overlap and each group is averaged into a single token. Every token
//! then receives a positional encoding computed from its region's centroid.
//!
//! The segmentation side ([`prepare`]) depends only on the image, so it is
//! computed once and reused; only [`sppp_forward`] touches parameters.

mod assign;
mod overlap;
mod pool;
mod position;

pub use assign::{assign_patches, assign_patches_majority, assign_patches_threshold, AssignMode, PatchAssignment, UnionFind};
pub use overlap::{compute_overlap, OverlapMatrix};
pub use pool::{pool_embeddings, pool_tokens, pooling_matrix, PoolMode, TokenSequence};
pub use position::{centroid_pe, group_centroids, normalize_centroids};

use crate::error::Result;
use crate::imaging::{patch_matrix, patchify, rgb_to_lab, ImageRgb, PatchGrid};
use crate::numerics::{Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::slic::{slic_segment, SlicConfig, SuperpixelMap};

/// Hidden width of the centroid encoder MLP.
pub const PE_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SpppConfig {
    pub patch: usize,
    pub slic: SlicConfig,
    pub assign: AssignMode,
    pub pool: PoolMode,
}

impl Default for SpppConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            slic: SlicConfig::default(),
            assign: AssignMode::Majority,
            pool: PoolMode::Mean,
        }
    }
}

/// Parameter-independent part of the pipeline for one image.
#[derive(Debug, Clone)]
pub struct SpppLayout {
    pub grid: PatchGrid,
    /// `N x P^2*3` flattened patches.
    pub patches: Tensor,
    pub map: SuperpixelMap,
    pub overlap: OverlapMatrix,
    pub assignment: PatchAssignment,
    /// `G x N` convex pooling weights.
    pub pooling: Tensor,
    /// Centroids in pixels, one per group.
    pub centroids: Vec<(f64, f64)>,
    /// Centroids divided by `(W, H)`.
    pub normalized: Vec<(f64, f64)>,
}

impl SpppLayout {
    /// Token count `S`.
    pub fn tokens(&self) -> usize {
        self.assignment.group_count()
    }
}

/// Patchify, segment, overlap, group and locate.
pub fn prepare(img: &ImageRgb, cfg: &SpppConfig) -> Result<SpppLayout> {
    let grid = patchify(img, cfg.patch)?;
    let patches = patch_matrix(&grid, img)?;
    let map = slic_segment(&rgb_to_lab(img), &cfg.slic)?;
    let overlap = compute_overlap(&map, &grid)?;
    let assignment = assign_patches(&overlap, cfg.assign)?;
    let pooling = pooling_matrix(&assignment, &overlap, cfg.pool)?;
    let centroids = group_centroids(&map, &grid, &assignment)?;
    let normalized = normalize_centroids(&centroids, img.width(), img.height());
    Ok(SpppLayout {
        grid,
        patches,
        map,
        overlap,
        assignment,
        pooling,
        centroids,
        normalized,
    })
}

/// Learned pieces: the patch projection `E` and the centroid encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SpppParams {
    pub embed: ParamId,
    pub pe: Mlp,
}

/// Embeds, pools and adds centroid encodings; returns `S x D` tokens.
pub fn sppp_forward(tape: &mut Tape, store: &ParamStore, layout: &SpppLayout, params: &SpppParams) -> Result<Var> {
    tape.set_stage("sppp.embed");
    let patches = tape.constant(layout.patches.clone())?;
    let e = tape.param(store, params.embed);
    let embedded = tape.matmul(patches, e)?;
    tape.set_stage("sppp.pool");
    let weights = tape.constant(layout.pooling.clone())?;
    let pooled = tape.matmul(weights, embedded)?;
    tape.set_stage("sppp.position");
    let pe = centroid_pe(tape, store, &params.pe, &layout.normalized)?;
    tape.add(pooled, pe)
}

/// Full pipeline from an image to a [`TokenSequence`].
pub fn sppp_tokens(img: &ImageRgb, cfg: &SpppConfig, store: &ParamStore, params: &SpppParams) -> Result<TokenSequence> {
    let layout = prepare(img, cfg)?;
    let mut tape = Tape::new();
    let tokens = sppp_forward(&mut tape, store, &layout, params)?;
    Ok(TokenSequence {
        tokens: tape.value(tokens).clone(),
        groups: (0..layout.tokens()).collect(),
    })
}
