use crate::error::{Error, Result};
use crate::imaging::PatchGrid;
use crate::slic::SuperpixelMap;

/// Fraction of each patch's pixels that fall inside each superpixel.
///
/// Stored as integer pixel counts so column sums are exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapMatrix {
    regions: usize,
    patches: usize,
    area: usize,
    counts: Vec<u32>,
}

impl OverlapMatrix {
    /// Builds directly from an `R x N` count table.
    pub fn from_counts(regions: usize, patches: usize, area: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != regions * patches {
            return Err(Error::Dimension {
                op: "overlap",
                lhs: vec![regions, patches],
                rhs: vec![counts.len()],
            });
        }
        let m = Self {
            regions,
            patches,
            area,
            counts,
        };
        for j in 0..patches {
            if m.column_count(j) != area {
                return Err(Error::Format(format!("patch {j} counts do not sum to {area}")));
            }
        }
        Ok(m)
    }

    /// `R`
    pub fn regions(&self) -> usize {
        self.regions
    }

    /// `N`
    pub fn patches(&self) -> usize {
        self.patches
    }

    /// Pixels per patch, `P^2`.
    pub fn area(&self) -> usize {
        self.area
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.patches + j]
    }

    /// `O[i, j] = |S_i ∩ P_j| / P^2`
    pub fn get(&self, i: usize, j: usize) -> f64 {
        f64::from(self.count(i, j)) / self.area as f64
    }

    pub fn column_count(&self, j: usize) -> usize {
        (0..self.regions).map(|i| self.count(i, j) as usize).sum()
    }

    /// Superpixel with the most pixels in patch `j`; ties go to the lower index.
    pub fn argmax_region(&self, j: usize) -> usize {
        let mut best = 0;
        for i in 1..self.regions {
            if self.count(i, j) > self.count(best, j) {
                best = i;
            }
        }
        best
    }
}

pub fn compute_overlap(map: &SuperpixelMap, grid: &PatchGrid) -> Result<OverlapMatrix> {
    if map.height != grid.height || map.width != grid.width {
        return Err(Error::Dimension {
            op: "compute_overlap",
            lhs: vec![map.height, map.width],
            rhs: vec![grid.height, grid.width],
        });
    }
    let (r, n) = (map.regions(), grid.len());
    let mut counts = vec![0u32; r * n];
    for (p, &label) in map.labels.iter().enumerate() {
        let j = grid.patch_of(p / map.width, p % map.width);
        counts[label * n + j] += 1;
    }
    Ok(OverlapMatrix {
        regions: r,
        patches: n,
        area: grid.patch * grid.patch,
        counts,
    })
}
