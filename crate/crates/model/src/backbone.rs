//! Visual encoder boundary, ROIAlign pooling and the concatenated
//! human/object feature.

use hoi_autograd::Tensor;
use hoi_core::BBox;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{Init, ParamSet};

/// A grid of `d`-dimensional vectors; cell `(r, c)` covers pixels
/// `[c*stride, (c+1)*stride) x [r*stride, (r+1)*stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    width: u32,
    height: u32,
    /// `grid_h * grid_w` rows, row-major over the grid.
    cells: Tensor,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, stride: usize, width: u32, height: u32, cells: Tensor) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || cells.cols() == 0 || stride == 0 {
            return Err(ModelError::Shape("feature map needs a non-empty grid and d >= 1".into()));
        }
        if cells.rows() != grid_h * grid_w {
            return Err(ModelError::Shape(format!(
                "{} cell vectors for a {grid_h}x{grid_w} grid",
                cells.rows()
            )));
        }
        if (grid_w * stride) < width as usize || (grid_h * stride) < height as usize {
            return Err(ModelError::Shape("grid does not cover the image".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            stride,
            width,
            height,
            cells,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn dim(&self) -> usize {
        self.cells.cols()
    }

    pub fn cells(&self) -> &Tensor {
        &self.cells
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        self.cells.row(r * self.grid_w + c)
    }

    /// Bilinear sample at continuous grid coordinates, where cell centers sit
    /// at integer positions. Points more than one cell outside contribute 0.
    fn bilinear(&self, y: f64, x: f64, out: &mut [f64], weight: f64) {
        let (h, w) = (self.grid_h as f64, self.grid_w as f64);
        if y < -1.0 || y > h || x < -1.0 || x > w {
            return;
        }
        let (y, x) = (y.max(0.0), x.max(0.0));
        let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1);
        let (mut y, mut x) = (y, x);
        if y0 >= self.grid_h - 1 {
            y0 = self.grid_h - 1;
            y1 = y0;
            y = y0 as f64;
        } else {
            y1 = y0 + 1;
        }
        if x0 >= self.grid_w - 1 {
            x0 = self.grid_w - 1;
            x1 = x0;
            x = x0 as f64;
        } else {
            x1 = x0 + 1;
        }
        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        let taps = [(y0, x0, hy * hx), (y0, x1, hy * lx), (y1, x0, ly * hx), (y1, x1, ly * lx)];
        for (r, c, wt) in taps {
            if wt == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(r, c)) {
                *o += weight * wt * v;
            }
        }
    }
}

/// Frozen image encoder. Implementations must be deterministic.
pub trait VisualEncoder: Send + Sync {
    fn stride(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, image: &RgbImage) -> Result<FeatureMap>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stride: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            dim: 64,
            seed: 0,
        }
    }
}

const PATCH_GAIN: f64 = 0.1;

/// Non-overlapping patch projection: each `stride x stride` RGB patch,
/// scaled to `[-0.5, 0.5]`, is multiplied by a fixed random matrix.
///
/// The matrix is small (std `0.1 / sqrt(fan_in)`) so that pooled appearance
/// does not drown the spatial pathway of a freshly initialized SAP.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: EncoderConfig,
    params: ParamSet,
}

impl ToyEncoder {
    pub const PARAM: &'static str = "patch_proj";

    pub fn new(config: EncoderConfig) -> Self {
        let fan_in = 3 * config.stride * config.stride;
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(config.seed));
        let mut params = ParamSet::new();
        params.insert(Self::PARAM, init.trunc_normal(fan_in, config.dim, PATCH_GAIN / (fan_in as f64).sqrt()));
        params.round_to_f32();
        Self { config, params }
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        let fan_in = 3 * config.stride * config.stride;
        match params.get(Self::PARAM) {
            Some(t) if t.shape() == (fan_in, config.dim) => Ok(Self { config, params }),
            _ => Err(ModelError::Shape(format!(
                "encoder expects {} of shape {fan_in}x{}",
                Self::PARAM,
                config.dim
            ))),
        }
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl VisualEncoder for ToyEncoder {
    fn stride(&self) -> usize {
        self.config.stride
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, image: &RgbImage) -> Result<FeatureMap> {
        let s = self.config.stride;
        let (w, h) = image.dimensions();
        if (w as usize) < s || (h as usize) < s {
            return Err(ModelError::InvalidInput(format!(
                "image {w}x{h} is smaller than one {s}px stride"
            )));
        }
        let (gw, gh) = ((w as usize).div_ceil(s), (h as usize).div_ceil(s));
        let mut patches = Tensor::zeros(gh * gw, 3 * s * s);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = patches.row_mut(gy * gw + gx);
                for py in 0..s {
                    for px in 0..s {
                        let (x, y) = ((gx * s + px) as u32, (gy * s + py) as u32);
                        if x >= w || y >= h {
                            continue;
                        }
                        let p = image.get_pixel(x, y).0;
                        let base = 3 * (py * s + px);
                        for ch in 0..3 {
                            row[base + ch] = p[ch] as f64 / 255.0 - 0.5;
                        }
                    }
                }
            }
        }
        let cells = patches.matmul(self.params.tensor(Self::PARAM));
        FeatureMap::new(gh, gw, s, w, h, cells)
    }
}

/// Sample points per output bin along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Fixed(usize),
    /// `ceil(bin size in cells)`, at least one.
    Adaptive,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Fixed(2)
    }
}

/// ROIAlign of `bbox` (pixel coordinates) into a `p x p` grid; returns
/// `p*p` rows of `d` values, row-major over the output grid.
pub fn roi_align(fmap: &FeatureMap, bbox: &BBox, p: usize, sampling: Sampling) -> Result<Tensor> {
    if p == 0 {
        return Err(ModelError::InvalidInput("ROIAlign output size must be at least 1".into()));
    }
    let (w, h) = (fmap.width as f64, fmap.height as f64);
    if bbox.x2() <= 0.0 || bbox.y2() <= 0.0 || bbox.x1() >= w || bbox.y1() >= h {
        return Err(ModelError::OutOfBounds(format!("{:?} vs {w}x{h}", bbox.corners())));
    }
    let s = fmap.stride as f64;
    let (x0, y0) = (bbox.x1() / s - 0.5, bbox.y1() / s - 0.5);
    let (bin_w, bin_h) = (bbox.w() / s / p as f64, bbox.h() / s / p as f64);
    let (nx, ny) = match sampling {
        Sampling::Fixed(n) => (n.max(1), n.max(1)),
        Sampling::Adaptive => (bin_w.ceil().max(1.0) as usize, bin_h.ceil().max(1.0) as usize),
    };
    let weight = 1.0 / (nx * ny) as f64;
    let mut out = Tensor::zeros(p * p, fmap.dim());
    for ph in 0..p {
        for pw in 0..p {
            let row = out.row_mut(ph * p + pw);
            for iy in 0..ny {
                let y = y0 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / ny as f64;
                for ix in 0..nx {
                    let x = x0 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / nx as f64;
                    fmap.bilinear(y, x, row, weight);
                }
            }
        }
    }
    Ok(out)
}

/// Human cells (row-major) followed by object cells.
pub fn build_interaction_feature(f_h: &Tensor, f_o: &Tensor) -> Result<Tensor> {
    if f_h.cols() != f_o.cols() {
        return Err(ModelError::Shape(format!(
            "human feature dim {} vs object feature dim {}",
            f_h.cols(),
            f_o.cols()
        )));
    }
    Ok(Tensor::vstack(&[f_h, f_o]))
}

/// The whole map average-pooled to `p x p` cells, for short image prompts.
pub fn pooled_grid(fmap: &FeatureMap, p: usize) -> Result<Tensor> {
    let (w, h) = fmap.image_size();
    let full = BBox::from_corners(0.0, 0.0, w as f64, h as f64)?;
    roi_align(fmap, &full, p, Sampling::Adaptive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(grid_h: usize, grid_w: usize, stride: usize, values: &[f64]) -> FeatureMap {
        let cells = Tensor::from_vec(grid_h * grid_w, 1, values.to_vec());
        FeatureMap::new(
            grid_h,
            grid_w,
            stride,
            (grid_w * stride) as u32,
            (grid_h * stride) as u32,
            cells,
        )
        .unwrap()
    }

    #[test]
    fn constant_image_gives_equal_cells() {
        let enc = ToyEncoder::new(EncoderConfig::default());
        let img = RgbImage::from_pixel(32, 32, image::Rgb([90, 30, 200]));
        let f = enc.encode(&img).unwrap();
        assert_eq!(f.grid(), (4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(f.cell(r, c), f.cell(0, 0));
            }
        }
        assert_eq!(enc.encode(&img).unwrap(), f);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let enc = ToyEncoder::new(EncoderConfig::default());
        assert!(enc.encode(&RgbImage::new(4, 40)).is_err());
        assert!(enc.encode(&RgbImage::new(0, 0)).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = map_from(3, 3, 8, &[2.5; 9]);
        let b = BBox::from_corners(1.3, 2.2, 19.7, 23.1).unwrap();
        let pooled = roi_align(&f, &b, 2, Sampling::default()).unwrap();
        for v in pooled.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_box_recovers_its_cell() {
        let values: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let f = map_from(3, 3, 8, &values);
        let b = BBox::from_corners(8.0, 16.0, 16.0, 24.0).unwrap();
        let pooled = roi_align(&f, &b, 1, Sampling::Adaptive).unwrap();
        assert_eq!(pooled.data(), &[7.0]);
    }

    #[test]
    fn centered_box_matches_bilinear_oracle() {
        // 2x2 map, box of one stride centered at the shared corner.
        let values = [1.0, 2.0, 3.0, 5.0];
        let f = map_from(2, 2, 8, &values);
        let b = BBox::from_center(8.0, 8.0, 8.0, 8.0).unwrap();
        let pooled = roi_align(&f, &b, 1, Sampling::Fixed(2)).unwrap();
        // Sample points at grid coords {0.25, 0.75}^2.
        let lerp = |y: f64, x: f64| {
            values[0] * (1.0 - y) * (1.0 - x) + values[1] * (1.0 - y) * x + values[2] * y * (1.0 - x) + values[3] * y * x
        };
        let pts = [0.25, 0.75];
        let mut expected = 0.0;
        for y in pts {
            for x in pts {
                expected += lerp(y, x) / 4.0;
            }
        }
        assert!((pooled.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn outside_box_errors() {
        let f = map_from(2, 2, 8, &[0.0; 4]);
        let b = BBox::from_corners(20.0, 0.0, 30.0, 5.0).unwrap();
        assert!(matches!(roi_align(&f, &b, 2, Sampling::default()), Err(ModelError::OutOfBounds(_))));
    }

    #[test]
    fn interaction_feature_order() {
        let fh = Tensor::from_vec(4, 2, (0..8).map(|v| v as f64).collect());
        let fo = Tensor::from_vec(4, 2, (8..16).map(|v| v as f64).collect());
        let cat = build_interaction_feature(&fh, &fo).unwrap();
        assert_eq!(cat.rows(), 8);
        for i in 0..4 {
            assert_eq!(cat.row(i), fh.row(i));
            assert_eq!(cat.row(i + 4), fo.row(i));
        }
        assert!(build_interaction_feature(&fh, &Tensor::zeros(4, 3)).is_err());
    }
}
