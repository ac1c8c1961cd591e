//! RGB/CIELAB images, the fixed patch grid and linear patch embedding.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Channels per pixel.
pub const CHANNELS: usize = 3;

/// RGB image with channel values in `[0, 1]`, stored `H x W x 3` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Dimension {
                op: "image",
                lhs: vec![height, width, CHANNELS],
                rhs: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// From interleaved 8-bit RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Builds an image by evaluating `f(y, x)` for every pixel.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Nearest-neighbour resample to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        Self::from_fn(height, width, |y, x| {
            let sy = (y * self.height / height).min(self.height - 1);
            let sx = (x * self.width / width).min(self.width - 1);
            self.pixel(sy, sx)
        })
    }

    /// Places the image in the centre of a black `height x width` canvas.
    pub fn center_embed(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::Config(format!(
                "canvas {height}x{width} smaller than image {}x{}",
                self.height, self.width
            )));
        }
        let (oy, ox) = ((height - self.height) / 2, (width - self.width) / 2);
        Self::from_fn(height, width, |y, x| {
            if y >= oy && y < oy + self.height && x >= ox && x < ox + self.width {
                self.pixel(y - oy, x - ox)
            } else {
                [0.0; 3]
            }
        })
    }
}

/// CIELAB image (D65 white point), same layout as [`ImageRgb`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLab {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageLab {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB triple to `(L*, a*, b*)`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| SRGB_TO_XYZ[r][c] * lin[c]).sum());
    let [fx, fy, fz] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE_D65[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB -> linear -> XYZ (D65) -> CIELAB.
pub fn rgb_to_lab(img: &ImageRgb) -> ImageLab {
    let data = img
        .data
        .chunks(CHANNELS)
        .flat_map(|p| srgb_pixel_to_lab([p[0], p[1], p[2]]))
        .collect();
    ImageLab {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Pixel rectangle of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

/// Regular grid of non-overlapping `P x P` patches, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    /// Patch count `N = HW / P^2`.
    pub fn len(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened patch width `P^2 * 3`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn rect(&self, j: usize) -> Result<PatchRect> {
        if j >= self.len() {
            return Err(Error::Index { index: j, len: self.len() });
        }
        Ok(PatchRect {
            y0: (j / self.grid_cols()) * self.patch,
            x0: (j % self.grid_cols()) * self.patch,
            size: self.patch,
        })
    }

    /// Index of the patch containing pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize) -> usize {
        (y / self.patch) * self.grid_cols() + x / self.patch
    }
}

pub fn patchify(img: &ImageRgb, patch: usize) -> Result<PatchGrid> {
    patch_grid(img.height, img.width, patch)
}

/// Grid for `height x width` extents; both must be multiples of `patch`.
pub fn patch_grid(height: usize, width: usize, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || height < patch || width < patch || height % patch != 0 || width % patch != 0 {
        return Err(Error::Geometry { height, width, patch });
    }
    Ok(PatchGrid { patch, height, width })
}

/// Patch `j` as a vector: pixels row-major, channels innermost.
pub fn flatten_patch(grid: &PatchGrid, img: &ImageRgb, j: usize) -> Result<Vec<f64>> {
    if img.height != grid.height || img.width != grid.width {
        return Err(Error::Dimension {
            op: "flatten_patch",
            lhs: vec![grid.height, grid.width],
            rhs: vec![img.height, img.width],
        });
    }
    let r = grid.rect(j)?;
    let mut out = Vec::with_capacity(grid.patch_dim());
    for y in r.y0..r.y0 + r.size {
        let start = (y * img.width + r.x0) * CHANNELS;
        out.extend_from_slice(&img.data[start..start + r.size * CHANNELS]);
    }
    Ok(out)
}

/// All flattened patches stacked into an `N x P^2*3` matrix.
pub fn patch_matrix(grid: &PatchGrid, img: &ImageRgb) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grid.len() * grid.patch_dim());
    for j in 0..grid.len() {
        data.extend(flatten_patch(grid, img, j)?);
    }
    Tensor::matrix(grid.len(), grid.patch_dim(), data)
}

/// Inverse of [`patch_matrix`].
pub fn reassemble(grid: &PatchGrid, patches: &Tensor) -> Result<ImageRgb> {
    if patches.rows() != grid.len() || patches.cols() != grid.patch_dim() {
        return Err(Error::Dimension {
            op: "reassemble",
            lhs: vec![grid.len(), grid.patch_dim()],
            rhs: patches.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; grid.height * grid.width * CHANNELS];
    let row_len = grid.patch * CHANNELS;
    for j in 0..grid.len() {
        let r = grid.rect(j)?;
        for (dy, chunk) in patches.row(j).chunks(row_len).enumerate() {
            let start = ((r.y0 + dy) * grid.width + r.x0) * CHANNELS;
            data[start..start + row_len].copy_from_slice(chunk);
        }
    }
    ImageRgb::new(grid.height, grid.width, data)
}

/// `z = x E` for one flattened patch.
pub fn patch_embed(x: &[f64], embedding: &Tensor) -> Result<Vec<f64>> {
    if x.len() != embedding.rows() {
        return Err(Error::Dimension {
            op: "patch_embed",
            lhs: vec![x.len()],
            rhs: embedding.shape().to_vec(),
        });
    }
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(row.matmul(embedding)?.into_data())
}

/// Recorded version of [`patch_embed`] over a stacked `N x P^2*3` matrix.
pub fn embed_patches(tape: &mut Tape, patches: Var, embedding: Var) -> Result<Var> {
    tape.matmul(patches, embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(h: usize, w: usize) -> ImageRgb {
        ImageRgb::from_fn(h, w, |y, x| {
            [
                ((y * 7 + x * 3) % 256) as f64 / 255.0,
                ((y * 11 + x * 5) % 256) as f64 / 255.0,
                ((y + x * 13) % 256) as f64 / 255.0,
            ]
        })
        .unwrap()
    }

    #[test]
    fn patch_counts() {
        let img = ImageRgb::filled(224, 224, [0.5; 3]).unwrap();
        assert_eq!(patchify(&img, 16).unwrap().len(), 196);
        assert_eq!(patchify(&img, 4).unwrap().len(), 3136);
        let small = ImageRgb::filled(8, 8, [0.1; 3]).unwrap();
        let grid = patchify(&small, 8).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(flatten_patch(&grid, &small, 0).unwrap().len(), 192);
    }

    #[test]
    fn non_divisible_is_geometry_error() {
        let img = ImageRgb::filled(30, 32, [0.0; 3]).unwrap();
        let err = patchify(&img, 4).unwrap_err();
        assert_eq!(
            err,
            Error::Geometry {
                height: 30,
                width: 32,
                patch: 4
            }
        );
        assert!(err.to_string().contains("H=30 W=32"));
        assert!(patch_grid(2, 2, 4).is_err());
    }

    #[test]
    fn flatten_lengths_and_layout() {
        let img = test_image(32, 32);
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(flatten_patch(&grid, &img, 3).unwrap().len(), 768);
        assert!(flatten_patch(&grid, &img, 4).is_err());

        let red = ImageRgb::filled(1, 1, [1.0, 0.0, 0.0]).unwrap();
        let g1 = patchify(&red, 1).unwrap();
        assert_eq!(flatten_patch(&g1, &red, 0).unwrap(), vec![1.0, 0.0, 0.0]);

        // 4x4 image, P=2: patch 1 is the top-right block
        let colors = |y: usize, x: usize| [(y * 4 + x) as f64 / 16.0, 0.5, 1.0 - (y * 4 + x) as f64 / 16.0];
        let img = ImageRgb::from_fn(4, 4, colors).unwrap();
        let grid = patchify(&img, 2).unwrap();
        let expected: Vec<f64> = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .flat_map(|&(y, x)| colors(y, x))
            .collect();
        assert_eq!(flatten_patch(&grid, &img, 1).unwrap(), expected);
    }

    #[test]
    fn embed_cases() {
        let e = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(patch_embed(&[0.0; 3], &e).unwrap(), vec![0.0, 0.0]);
        let x = [0.2, 0.4, 0.6];
        assert_eq!(patch_embed(&x, &Tensor::identity(3)).unwrap(), x.to_vec());
        let z = patch_embed(&x, &e).unwrap();
        for j in 0..2 {
            let oracle: f64 = (0..3).map(|i| x[i] * e.at(i, j)).sum();
            assert!((z[j] - oracle).abs() < 1e-12);
        }
        assert!(patch_embed(&[1.0; 4], &e).is_err());
    }

    #[test]
    fn lab_reference_points() {
        let black = srgb_pixel_to_lab([0.0; 3]);
        assert!(black.iter().all(|v| v.abs() < 1e-9));
        let white = srgb_pixel_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 0.01);
        assert!(white[1].abs() < 0.01 && white[2].abs() < 0.01);

        // gray: Y equals the linearized channel, so L* follows from Y alone
        let lin = ((0.5f64 + 0.055) / 1.055).powf(2.4);
        let oracle = 116.0 * lin.powf(1.0 / 3.0) - 16.0;
        let gray = srgb_pixel_to_lab([0.5; 3]);
        assert!((gray[0] - oracle).abs() < 0.05);
        assert!((gray[0] - 53.39).abs() < 0.05);

        let img = test_image(4, 4);
        let lab = rgb_to_lab(&img);
        assert_eq!(lab.pixel(2, 3), srgb_pixel_to_lab(img.pixel(2, 3)));
    }

    #[test]
    fn resize_and_embed() {
        let img = test_image(28, 28);
        let big = img.resize_nearest(56, 56).unwrap();
        assert_eq!(big.pixel(3, 5), img.pixel(1, 2));
        let framed = img.center_embed(32, 32).unwrap();
        assert_eq!(framed.pixel(2, 2), img.pixel(0, 0));
        assert_eq!(framed.pixel(0, 0), [0.0; 3]);
        assert!(img.center_embed(16, 16).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageRgb::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn patchify_reassemble_is_exact(gr in 1usize..5, gc in 1usize..5, p in 1usize..5, seed in 0u64..1000) {
            let (h, w) = (gr * p, gc * p);
            let img = ImageRgb::from_fn(h, w, |y, x| {
                let v = ((y * 31 + x * 17 + seed as usize) % 97) as f64 / 96.0;
                [v, 1.0 - v, (v * 0.5).fract()]
            }).unwrap();
            let grid = patchify(&img, p).unwrap();
            let mut covered = vec![0usize; h * w];
            for j in 0..grid.len() {
                let r = grid.rect(j).unwrap();
                for y in r.y0..r.y0 + p {
                    for x in r.x0..r.x0 + p {
                        covered[y * w + x] += 1;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
            let m = patch_matrix(&grid, &img).unwrap();
            prop_assert_eq!(reassemble(&grid, &m).unwrap(), img);
        }

        #[test]
        fn patch_embed_is_linear(x in proptest::collection::vec(-1.0f64..1.0, 6), y in proptest::collection::vec(-1.0f64..1.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let e = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = patch_embed(&mix, &e).unwrap();
            let ex = patch_embed(&x, &e).unwrap();
            let ey = patch_embed(&y, &e).unwrap();
            for k in 0..4 {
                prop_assert!((lhs[k] - (a * ex[k] + b * ey[k])).abs() < 1e-9);
            }
        }
    }
}
