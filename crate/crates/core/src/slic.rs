//! SLIC superpixels: k-means in joint (L*, a*, b*, x, y) space with each
//! center searching only a `2S x 2S` window.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imaging::ImageLab;

/// How color and spatial distance are blended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compactness {
    /// `D = sqrt(d_c^2 + (d_s / S)^2 m^2)`
    Classic { m: f64 },
    /// `D = sqrt((d_c / max_c)^2 + (d_s / (alpha S))^2)`, where `max_c` is the
    /// largest color distance seen in the previous iteration (1 on the first).
    Normalized { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicConfig {
    /// Target superpixel count.
    pub k: usize,
    pub compactness: Compactness,
    pub max_iter: usize,
    /// Carried for reproducibility records; grid initialization is deterministic.
    pub seed: u64,
    /// Reassign disconnected fragments to a neighbouring region.
    pub merge_orphans: bool,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k: 16,
            compactness: Compactness::Normalized { alpha: 0.1 },
            max_iter: 10,
            seed: 0,
            merge_orphans: false,
        }
    }
}

impl SlicConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.k == 0 || self.k > pixels {
            return Err(Error::Config(format!(
                "superpixel count K={} must be in [1, {pixels}]",
                self.k
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        let ok = match self.compactness {
            Compactness::Classic { m } => m.is_finite() && m >= 0.0,
            Compactness::Normalized { alpha } => alpha.is_finite() && alpha > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid compactness {:?}", self.compactness)));
        }
        Ok(())
    }
}

/// Label field plus per-region statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major region id per pixel, each in `[0, R)`.
    pub labels: Vec<usize>,
    /// `(L*, a*, b*, x, y)` per region.
    pub centers: Vec<[f64; 5]>,
    pub sizes: Vec<usize>,
    /// Grid spacing `S = sqrt(HW / K)`.
    pub spacing: f64,
    /// Labels changed in each iteration that ran.
    pub changes: Vec<usize>,
}

impl SuperpixelMap {
    /// Realized region count `R`.
    pub fn regions(&self) -> usize {
        self.sizes.len()
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// Wraps an externally produced label field; ids are compacted to `[0, R)`
    /// in order of first appearance. Centers carry zero color.
    pub fn from_labels(height: usize, width: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::Dimension {
                op: "label field",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            });
        }
        let mut remap = std::collections::HashMap::new();
        let compact: Vec<usize> = labels
            .iter()
            .map(|&l| {
                let next = remap.len();
                *remap.entry(l).or_insert(next)
            })
            .collect();
        let r = remap.len();
        let mut sums = vec![[0.0; 5]; r];
        let mut sizes = vec![0; r];
        for (p, &l) in compact.iter().enumerate() {
            sizes[l] += 1;
            sums[l][3] += (p % width) as f64;
            sums[l][4] += (p / width) as f64;
        }
        let centers = sums
            .iter()
            .zip(&sizes)
            .map(|(s, &n)| [0.0, 0.0, 0.0, s[3] / n as f64, s[4] / n as f64])
            .collect();
        Ok(Self {
            height,
            width,
            labels: compact,
            centers,
            sizes,
            spacing: ((height * width) as f64 / r as f64).sqrt(),
            changes: Vec::new(),
        })
    }

    /// Flat row-major label grid, one line per pixel row.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.regions());
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Size and bounding box of one region (inclusive bounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionStats {
    pub size: usize,
    pub y_min: usize,
    pub y_max: usize,
    pub x_min: usize,
    pub x_max: usize,
}

pub fn region_stats(map: &SuperpixelMap) -> Vec<RegionStats> {
    let mut stats = vec![
        RegionStats {
            size: 0,
            y_min: usize::MAX,
            y_max: 0,
            x_min: usize::MAX,
            x_max: 0,
        };
        map.regions()
    ];
    for (p, &l) in map.labels.iter().enumerate() {
        let (y, x) = (p / map.width, p % map.width);
        let s = &mut stats[l];
        s.size += 1;
        s.y_min = s.y_min.min(y);
        s.y_max = s.y_max.max(y);
        s.x_min = s.x_min.min(x);
        s.x_max = s.x_max.max(x);
    }
    stats
}

/// Rows and columns of the initial center grid.
///
/// Picks the layout with the most centers (at most `k`) whose cells fit in
/// the `2S x 2S` window, preferring square cells, then more columns.
pub fn grid_layout(height: usize, width: usize, k: usize) -> (usize, usize) {
    let s = ((height * width) as f64 / k as f64).sqrt();
    let mut best: Option<((bool, usize, f64, usize), (usize, usize))> = None;
    for ny in 1..=k.min(height) {
        for nx in 1..=(k / ny).min(width) {
            let (ch, cw) = (height as f64 / ny as f64, width as f64 / nx as f64);
            let fits = ch / 2.0 <= s + 1e-9 && cw / 2.0 <= s + 1e-9;
            let squareness = (cw / ch).ln().abs();
            let key = (fits, ny * nx, squareness, nx);
            let better = match &best {
                None => true,
                Some((b, _)) => {
                    (key.0, key.1) > (b.0, b.1)
                        || ((key.0, key.1) == (b.0, b.1)
                            && (key.2 < b.2 - 1e-12 || ((key.2 - b.2).abs() <= 1e-12 && key.3 > b.3)))
                }
            };
            if better {
                best = Some((key, (ny, nx)));
            }
        }
    }
    best.map(|(_, l)| l).unwrap_or((1, 1))
}

pub fn slic_segment(img: &ImageLab, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(Error::Config(format!("SLIC needs at least 2x2 pixels, got {h}x{w}")));
    }
    cfg.validate(h * w)?;

    let s = ((h * w) as f64 / cfg.k as f64).sqrt();
    let (ny, nx) = grid_layout(h, w, cfg.k);
    let (cell_h, cell_w) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let reach = s.max(cell_h / 2.0).max(cell_w / 2.0);

    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(ny * nx);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f64 + 0.5) * cell_w - 0.5;
            let cy = (j as f64 + 0.5) * cell_h - 0.5;
            let px = (cx.round() as usize).min(w - 1);
            let py = (cy.round() as usize).min(h - 1);
            let [l, a, b] = img.pixel(py, px);
            centers.push([l, a, b, cx, cy]);
        }
    }

    let mut labels = vec![usize::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    let mut max_c = 1.0;
    let mut changes = Vec::new();

    for iter in 0..cfg.max_iter {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        let mut next = labels.clone();
        let mut observed_max: f64 = 0.0;

        for (ci, c) in centers.iter().enumerate() {
            let y_lo = (c[4] - reach).ceil().max(0.0) as usize;
            let y_hi = ((c[4] + reach).floor().max(0.0) as usize).min(h - 1);
            let x_lo = (c[3] - reach).ceil().max(0.0) as usize;
            let x_hi = ((c[3] + reach).floor().max(0.0) as usize).min(w - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let p = img.pixel(y, x);
                    let dc2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    let ds2 = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    observed_max = observed_max.max(dc2);
                    let d = match cfg.compactness {
                        Compactness::Classic { m } => dc2 + ds2 / (s * s) * m * m,
                        Compactness::Normalized { alpha } => dc2 / (max_c * max_c) + ds2 / (alpha * s).powi(2),
                    };
                    let idx = y * w + x;
                    // strict: ties stay with the lower center index
                    if d < dist[idx] {
                        dist[idx] = d;
                        next[idx] = ci;
                    }
                }
            }
        }
        if iter == 0 {
            assert!(
                next.iter().all(|&l| l != usize::MAX),
                "initial grid windows must cover every pixel"
            );
        }

        let changed = next.iter().zip(&labels).filter(|(a, b)| a != b).count();
        changes.push(changed);
        labels = next;

        let mut sums = vec![[0.0; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            let (y, x) = (idx / w, idx % w);
            let p = img.pixel(y, x);
            let acc = &mut sums[l];
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
            acc[3] += x as f64;
            acc[4] += y as f64;
            counts[l] += 1;
        }
        for ((c, sum), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = sum.map(|v| v / n as f64);
            }
        }
        let observed = observed_max.sqrt();
        max_c = if observed > 0.0 { observed } else { 1.0 };

        if changed == 0 {
            break;
        }
    }

    if cfg.merge_orphans {
        merge_orphans(&mut labels, h, w);
    }
    Ok(compact(img, labels, s, changes))
}

/// Keeps the largest 4-connected piece of every label and hands the other
/// pieces to the label of an adjacent pixel.
fn merge_orphans(labels: &mut [usize], h: usize, w: usize) {
    let mut component = vec![usize::MAX; h * w];
    let mut pieces: Vec<(usize, Vec<usize>)> = Vec::new();
    for start in 0..h * w {
        if component[start] != usize::MAX {
            continue;
        }
        let id = pieces.len();
        let label = labels[start];
        let mut members = vec![start];
        component[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for q in neighbours(p, h, w) {
                if component[q] == usize::MAX && labels[q] == label {
                    component[q] = id;
                    members.push(q);
                    queue.push_back(q);
                }
            }
        }
        pieces.push((label, members));
    }
    let mut largest: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (i, (label, members)) in pieces.iter().enumerate() {
        let entry = largest.entry(*label).or_insert(i);
        if pieces[*entry].1.len() < members.len() {
            *entry = i;
        }
    }
    for (i, (label, members)) in pieces.iter().enumerate() {
        if largest[label] == i {
            continue;
        }
        let target = members
            .iter()
            .flat_map(|&p| neighbours(p, h, w))
            .find(|&q| component[q] != i)
            .map(|q| labels[q]);
        if let Some(t) = target {
            for &p in members {
                labels[p] = t;
            }
        }
    }
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    let mut out = [usize::MAX; 4];
    if y > 0 {
        out[0] = p - w;
    }
    if y + 1 < h {
        out[1] = p + w;
    }
    if x > 0 {
        out[2] = p - 1;
    }
    if x + 1 < w {
        out[3] = p + 1;
    }
    out.into_iter().filter(|&q| q != usize::MAX)
}

/// Relabels to `[0, R)` in ascending center order and recomputes statistics.
fn compact(img: &ImageLab, labels: Vec<usize>, spacing: f64, changes: Vec<usize>) -> SuperpixelMap {
    let (h, w) = (img.height(), img.width());
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut used = vec![false; max_label + 1];
    labels.iter().for_each(|&l| used[l] = true);
    let mut remap = vec![usize::MAX; max_label + 1];
    let mut r = 0;
    for (old, &u) in used.iter().enumerate() {
        if u {
            remap[old] = r;
            r += 1;
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
    let mut sums = vec![[0.0; 5]; r];
    let mut sizes = vec![0usize; r];
    for (idx, &l) in labels.iter().enumerate() {
        let (y, x) = (idx / w, idx % w);
        let p = img.pixel(y, x);
        let acc = &mut sums[l];
        acc[0] += p[0];
        acc[1] += p[1];
        acc[2] += p[2];
        acc[3] += x as f64;
        acc[4] += y as f64;
        sizes[l] += 1;
    }
    let centers = sums
        .iter()
        .zip(&sizes)
        .map(|(s, &n)| s.map(|v| v / n as f64))
        .collect();
    SuperpixelMap {
        height: h,
        width: w,
        labels,
        centers,
        sizes,
        spacing,
        changes,
    }
}
