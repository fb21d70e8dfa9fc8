//! Resizing, patch extraction and the two image mask planners.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Image};
use crate::text::mask_count;
use crate::{Error, Result};

/// Bilinear resize with half-pixel centers; output clamped to [0, 1].
pub fn resize(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::Usage(format!("resize target {height}×{width}")));
    }
    if height == image.height && width == image.width {
        return Ok(image.clone());
    }
    let source_coord = |dst: usize, dst_len: usize, src_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Image::filled(height, width, [0.0; 3]);
    for y in 0..height {
        let (y0, y1, fy) = source_coord(y, height, image.height);
        for x in 0..width {
            let (x0, x1, fx) = source_coord(x, width, image.width);
            let (a, b, c, d) = (
                image.pixel(y0, x0),
                image.pixel(y0, x1),
                image.pixel(y1, x0),
                image.pixel(y1, x1),
            );
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
                rgb[ch] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
            out.set_pixel(y, x, rgb);
        }
    }
    Ok(out)
}

/// Non-overlapping `p×p` patches in row-major order, each flattened as
/// (row, column, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patches: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn patch(&self, index: usize) -> &[f64] {
        let d = self.patch_dim();
        &self.patches[index * d..(index + 1) * d]
    }

    /// Pixel rectangle `(top, left)` of patch `index`.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        (
            (index / self.cols) * self.patch_size,
            (index % self.cols) * self.patch_size,
        )
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    let p = patch_size;
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::Config(format!(
            "image {}×{} (H×W) is not divisible into {p}×{p} patches",
            image.height, image.width
        )));
    }
    let (rows, cols) = (image.height / p, image.width / p);
    let mut patches = Vec::with_capacity(image.data.len());
    for r in 0..rows {
        for c in 0..cols {
            for y in r * p..(r + 1) * p {
                let start = (y * image.width + c * p) * 3;
                patches.extend_from_slice(&image.data[start..start + p * 3]);
            }
        }
    }
    Ok(PatchGrid {
        patches,
        rows,
        cols,
        patch_size: p,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let p = grid.patch_size;
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut data = vec![0.0; h * w * 3];
    for idx in 0..grid.len() {
        let (top, left) = grid.origin(idx);
        let patch = grid.patch(idx);
        for dy in 0..p {
            let dst = ((top + dy) * w + left) * 3;
            data[dst..dst + p * 3].copy_from_slice(&patch[dy * p * 3..(dy + 1) * p * 3]);
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Region,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "region" => Ok(Self::Region),
            other => Err(Error::Config(format!(
                "unknown masking strategy {other:?} (expected random or region)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMaskPlan {
    /// Ascending patch indices.
    pub positions: Vec<usize>,
    /// Original pixels of the masked patches, concatenated in `positions` order.
    pub targets: Vec<f64>,
    pub strategy: MaskStrategy,
    /// Set when region masking found no candidate patch (degenerate bbox).
    pub degenerate: bool,
}

impl ImageMaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn from_positions(grid: &PatchGrid, mut positions: Vec<usize>, strategy: MaskStrategy) -> Self {
        positions.sort_unstable();
        let targets = positions.iter().flat_map(|&i| grid.patch(i).to_vec()).collect();
        Self {
            positions,
            targets,
            strategy,
            degenerate: false,
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("masking ratio {ratio} outside (0, 1)")))
    }
}

/// `floor(ratio · m)` distinct indices in `[0, m)`, uniformly without replacement.
pub fn random_mask_positions(m: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    let mut v = sample(rng, m, mask_count(ratio, m)).into_vec();
    v.sort_unstable();
    Ok(v)
}

pub fn random_mask_plan(grid: &PatchGrid, ratio: f64, rng: &mut impl Rng) -> Result<ImageMaskPlan> {
    let positions = random_mask_positions(grid.len(), ratio, rng)?;
    Ok(ImageMaskPlan::from_positions(grid, positions, MaskStrategy::Random))
}

/// Patches whose pixel footprint overlaps `bbox` by at least half the patch area.
pub fn region_candidates(grid: &PatchGrid, bbox: &BBox) -> Vec<usize> {
    let p = grid.patch_size;
    (0..grid.len())
        .filter(|&i| {
            let (top, left) = grid.origin(i);
            2 * bbox.overlap(top, left, p, p) >= p * p
        })
        .collect()
}

/// Pedestrian-region masking: the same target count as random masking, drawn
/// only from bbox patches. With too few candidates every candidate is masked
/// and the plan comes out short; background is never masked.
pub fn region_mask_plan(
    grid: &PatchGrid,
    bbox: &BBox,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<ImageMaskPlan> {
    check_ratio(ratio)?;
    let (h, w) = (grid.rows * grid.patch_size, grid.cols * grid.patch_size);
    if !bbox.fits(h, w) {
        return Err(Error::Usage(format!("bbox {bbox:?} outside {h}×{w} image")));
    }
    let candidates = region_candidates(grid, bbox);
    let target = mask_count(ratio, grid.len()).min(candidates.len());
    let positions = sample(rng, candidates.len(), target)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let mut plan = ImageMaskPlan::from_positions(grid, positions, MaskStrategy::Region);
    plan.degenerate = candidates.is_empty();
    Ok(plan)
}

pub fn mask_plan(
    strategy: MaskStrategy,
    grid: &PatchGrid,
    bbox: &BBox,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<ImageMaskPlan> {
    match strategy {
        MaskStrategy::Random => random_mask_plan(grid, ratio, rng),
        MaskStrategy::Region => region_mask_plan(grid, bbox, ratio, rng),
    }
}
