use super::{OverlapMatrix, PatchAssignment};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Reduction applied to the patch embeddings of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// Plain average.
    #[default]
    Mean,
    /// Average weighted by each patch's overlap with the group's superpixel.
    OverlapWeighted,
}

/// Pooled tokens and the group each one came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `S x D`
    pub tokens: Tensor,
    pub groups: Vec<usize>,
}

impl TokenSequence {
    /// `S`
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// `G x N` matrix whose rows hold the convex pooling weights of each group.
pub fn pooling_matrix(assignment: &PatchAssignment, overlap: &OverlapMatrix, mode: PoolMode) -> Result<Tensor> {
    let (g, n) = (assignment.group_count(), assignment.groups.len());
    if n != overlap.patches() {
        return Err(Error::Dimension {
            op: "pooling_matrix",
            lhs: vec![n],
            rhs: vec![overlap.regions(), overlap.patches()],
        });
    }
    let mut weights = vec![0.0; g * n];
    for (j, &gj) in assignment.groups.iter().enumerate() {
        weights[gj * n + j] = match mode {
            PoolMode::Mean => 1.0,
            PoolMode::OverlapWeighted => overlap.get(assignment.anchors[gj], j),
        };
    }
    for row in weights.chunks_mut(n) {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Format("pooling group with zero total weight".into()));
        }
        row.iter_mut().for_each(|w| *w /= total);
    }
    Tensor::matrix(g, n, weights)
}

/// Pools `N x D` patch embeddings into `G x D` tokens on the tape.
pub fn pool_tokens(
    tape: &mut Tape,
    embeddings: Var,
    assignment: &PatchAssignment,
    overlap: &OverlapMatrix,
    mode: PoolMode,
) -> Result<Var> {
    let rows = tape.value(embeddings).rows();
    if rows != assignment.groups.len() {
        return Err(Error::Dimension {
            op: "pool_tokens",
            lhs: tape.value(embeddings).shape().to_vec(),
            rhs: vec![assignment.groups.len()],
        });
    }
    let weights = tape.constant(pooling_matrix(assignment, overlap, mode)?)?;
    tape.matmul(weights, embeddings)
}

/// Value-level pooling without gradient tracking.
pub fn pool_embeddings(
    embeddings: &Tensor,
    assignment: &PatchAssignment,
    overlap: &OverlapMatrix,
    mode: PoolMode,
) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone())?;
    let pooled = pool_tokens(&mut tape, e, assignment, overlap, mode)?;
    Ok(TokenSequence {
        tokens: tape.value(pooled).clone(),
        groups: (0..assignment.group_count()).collect(),
    })
}
