use super::OverlapMatrix;
use crate::error::{Error, Result};

/// How patches are grouped into tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignMode {
    /// Each patch joins the superpixel holding most of its pixels.
    Majority,
    /// Patches `j, k` are linked when some superpixel covers more than `tau`
    /// of both; groups are the connected components.
    Threshold { tau: f64 },
}

impl Default for AssignMode {
    fn default() -> Self {
        AssignMode::Majority
    }
}

/// Total map from patches to dense group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAssignment {
    /// Group id per patch, each in `[0, G)`.
    pub groups: Vec<usize>,
    /// Superpixel that represents each group.
    pub anchors: Vec<usize>,
    pub mode: AssignMode,
}

impl PatchAssignment {
    /// `G`
    pub fn group_count(&self) -> usize {
        self.anchors.len()
    }

    /// Patch indices of group `g`, ascending.
    pub fn members(&self, g: usize) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(j, &gj)| (gj == g).then_some(j))
            .collect()
    }
}

pub fn assign_patches_majority(overlap: &OverlapMatrix) -> PatchAssignment {
    let winners: Vec<usize> = (0..overlap.patches()).map(|j| overlap.argmax_region(j)).collect();
    // dense ids in ascending superpixel order
    let mut dense = vec![usize::MAX; overlap.regions()];
    let mut anchors = Vec::new();
    for i in 0..overlap.regions() {
        if winners.contains(&i) {
            dense[i] = anchors.len();
            anchors.push(i);
        }
    }
    PatchAssignment {
        groups: winners.iter().map(|&i| dense[i]).collect(),
        anchors,
        mode: AssignMode::Majority,
    }
}

pub fn assign_patches_threshold(overlap: &OverlapMatrix, tau: f64) -> Result<PatchAssignment> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("threshold tau={tau} must lie in (0, 1]")));
    }
    let n = overlap.patches();
    let mut sets = UnionFind::new(n);
    for i in 0..overlap.regions() {
        let mut first: Option<usize> = None;
        for j in 0..n {
            if overlap.get(i, j) > tau {
                match first {
                    Some(f) => sets.union(f, j),
                    None => first = Some(j),
                }
            }
        }
    }
    // dense ids ordered by each component's lowest patch index
    let mut dense = vec![usize::MAX; n];
    let mut groups = Vec::with_capacity(n);
    let mut count = 0;
    for j in 0..n {
        let root = sets.find(j);
        if dense[root] == usize::MAX {
            dense[root] = count;
            count += 1;
        }
        groups.push(dense[root]);
    }
    let mut totals = vec![vec![0u64; overlap.regions()]; count];
    for (j, &g) in groups.iter().enumerate() {
        for (i, t) in totals[g].iter_mut().enumerate() {
            *t += u64::from(overlap.count(i, j));
        }
    }
    let anchors = totals
        .iter()
        .map(|t| {
            let mut best = 0;
            for i in 1..t.len() {
                if t[i] > t[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(PatchAssignment {
        groups,
        anchors,
        mode: AssignMode::Threshold { tau },
    })
}

pub fn assign_patches(overlap: &OverlapMatrix, mode: AssignMode) -> Result<PatchAssignment> {
    match mode {
        AssignMode::Majority => Ok(assign_patches_majority(overlap)),
        AssignMode::Threshold { tau } => assign_patches_threshold(overlap, tau),
    }
}

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}
