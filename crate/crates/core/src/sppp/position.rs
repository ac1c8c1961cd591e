use super::{AssignMode, PatchAssignment};
use crate::error::{Error, Result};
use crate::imaging::PatchGrid;
use crate::numerics::{Mlp, ParamStore, Tape, Tensor, Var};
use crate::slic::SuperpixelMap;

/// Mean pixel coordinate `(c_x, c_y)` of every group's region.
///
/// Majority groups own their superpixel's pixels; threshold groups own the
/// union of their patches' pixels.
pub fn group_centroids(map: &SuperpixelMap, grid: &PatchGrid, assignment: &PatchAssignment) -> Result<Vec<(f64, f64)>> {
    let g = assignment.group_count();
    let mut sums = vec![(0.0, 0.0, 0usize); g];
    match assignment.mode {
        AssignMode::Majority => {
            let mut group_of_region = vec![usize::MAX; map.regions()];
            for (gi, &r) in assignment.anchors.iter().enumerate() {
                group_of_region[r] = gi;
            }
            for (p, &label) in map.labels.iter().enumerate() {
                let gi = group_of_region[label];
                if gi != usize::MAX {
                    let s = &mut sums[gi];
                    s.0 += (p % map.width) as f64;
                    s.1 += (p / map.width) as f64;
                    s.2 += 1;
                }
            }
        }
        AssignMode::Threshold { .. } => {
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let s = &mut sums[assignment.groups[grid.patch_of(y, x)]];
                    s.0 += x as f64;
                    s.1 += y as f64;
                    s.2 += 1;
                }
            }
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(gi, (sx, sy, n))| {
            if n == 0 {
                Err(Error::Format(format!("group {gi} owns no pixels")))
            } else {
                Ok((sx / n as f64, sy / n as f64))
            }
        })
        .collect()
}

/// Centroids divided by `(W, H)`.
pub fn normalize_centroids(centroids: &[(f64, f64)], width: usize, height: usize) -> Vec<(f64, f64)> {
    centroids
        .iter()
        .map(|&(x, y)| (x / width as f64, y / height as f64))
        .collect()
}

/// `PE_g = MLP(c_x / W, c_y / H)` for every group, as a `G x D` matrix.
pub fn centroid_pe(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, normalized: &[(f64, f64)]) -> Result<Var> {
    let coords = Tensor::matrix(
        normalized.len(),
        2,
        normalized.iter().flat_map(|&(x, y)| [x, y]).collect(),
    )?;
    let input = tape.constant(coords)?;
    mlp.forward(tape, store, input)
}
