//! Grad-CAM over the image encoder's patch states, with PGM, PPM-overlay and
//! CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Image};
use crate::encoders::{encode_images, encode_texts, fuse, linear, ModelConfig};
use crate::image::{region_candidates, resize, unpatchify, ImageMaskPlan, PatchGrid};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;
use crate::text::empty_sequence;
use crate::training::PreparedSample;
use crate::{Error, Result};

/// Nonnegative relevance per patch, normalized so the maximum is 1 unless
/// every value is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// `relu(A · mean_rows(G))` per patch, divided by its maximum.
/// `a` and `g` are `[m, d]` row-major.
pub fn cam_from_activations(a: &[f64], g: &[f64], rows: usize, cols: usize) -> Result<Heatmap> {
    let m = rows * cols;
    if m == 0 || a.len() != g.len() || a.len() % m != 0 {
        return Err(Error::Usage(format!(
            "activations ({}) and gradients ({}) do not form {m} rows",
            a.len(),
            g.len()
        )));
    }
    let d = a.len() / m;
    let mut weights = vec![0.0; d];
    for row in g.chunks(d) {
        for (w, v) in weights.iter_mut().zip(row) {
            *w += v / m as f64;
        }
    }
    let mut values: Vec<f64> = a
        .chunks(d)
        .map(|row| row.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>().max(0.0))
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap { rows, cols, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamCaption {
    /// The sample's own caption goes through the fusion encoder.
    Own,
    /// Only `[CLS_T]`, as at image-only inference.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCamOptions {
    /// Image block whose output is the feature map; 0 is the embedded input.
    /// Defaults to the last block.
    pub layer: Option<usize>,
    pub caption: CamCaption,
    /// Multiplies the target logit before differentiation.
    pub logit_scale: f64,
}

impl Default for GradCamOptions {
    fn default() -> Self {
        Self {
            layer: None,
            caption: CamCaption::Own,
            logit_scale: 1.0,
        }
    }
}

/// Heatmap for identity class `class` of the classifier on `[CLS_M]`.
pub fn grad_cam(
    params: &ParamStore,
    model: &ModelConfig,
    sample: &PreparedSample,
    class: usize,
    opts: &GradCamOptions,
) -> Result<Heatmap> {
    let classes = params.get("head.id.b")?.numel();
    if class >= classes {
        return Err(Error::Usage(format!("class {class} outside [0, {classes})")));
    }
    let layer = opts.layer.unwrap_or(model.image.depth);
    if layer > model.image.depth {
        return Err(Error::Usage(format!(
            "layer {layer} beyond image depth {}",
            model.image.depth
        )));
    }
    let tokens = match opts.caption {
        CamCaption::Own => sample.tokens.clone(),
        CamCaption::Empty => empty_sequence(sample.tokens.len())?,
    };
    let graph = Graph::new();
    let (a, g) = {
        let p = params.bind(&graph, true);
        let grids: Vec<&PatchGrid> = vec![&sample.grid];
        let none: Vec<Option<&ImageMaskPlan>> = vec![None];
        let img = encode_images(&p, model, &grids, &none)?;
        let txt = encode_texts(&p, model, &[&tokens])?;
        let fused = fuse(&p, model, &img, &txt, &[&tokens.attention], &[(0, 0)])?;
        let logits = linear(&p, "head.id", fused.cls()?)?;
        let mut pick = vec![0.0; classes];
        pick[class] = opts.logit_scale;
        let target = logits.mul(graph.constant(Tensor::new(&[1, classes], pick)?)?)?.sum()?;
        let feature = img.layers[layer];
        let grads = graph.backward(target)?;
        let m = sample.grid.len();
        let a = feature.to_vec();
        let d = a.len() / (m + 1);
        let g = grads
            .get(feature)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; a.len()]);
        // drop the CLS_I row
        (a[d..].to_vec(), g[d..].to_vec())
    };
    cam_from_activations(&a, &g, sample.grid.rows, sample.grid.cols)
}

impl Heatmap {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Bilinear upsampling to `height×width`.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let grey = Image::new(
            self.rows,
            self.cols,
            self.values.iter().flat_map(|&v| [v, v, v]).collect(),
        )?;
        let big = resize(&grey, height, width)?;
        Ok(big.data.chunks(3).map(|px| px[0]).collect())
    }

    /// Binary PGM (P5, 8-bit) at `height×width`.
    pub fn to_pgm(&self, height: usize, width: usize) -> Result<Vec<u8>> {
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(self.upsample(height, width)?.iter().map(|v| (v * 255.0).round() as u8));
        Ok(out)
    }

    /// `image` blended half and half with a black-red-yellow-white ramp of the
    /// upsampled heatmap.
    pub fn overlay(&self, image: &Image) -> Result<Image> {
        let heat = self.upsample(image.height, image.width)?;
        let mut out = image.clone();
        for (i, &v) in heat.iter().enumerate() {
            let ramp = [
                (3.0 * v).min(1.0),
                (3.0 * v - 1.0).clamp(0.0, 1.0),
                (3.0 * v - 2.0).clamp(0.0, 1.0),
            ];
            for c in 0..3 {
                let px = &mut out.data[3 * i + c];
                *px = 0.5 * *px + 0.5 * ramp[c];
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| format!("{}", self.value(r, c))).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Mean heat over patches at least half inside `bbox`, and over the rest.
    /// `None` when either group is empty.
    pub fn region_means(&self, grid: &PatchGrid, bbox: &BBox) -> Option<(f64, f64)> {
        let inside = region_candidates(grid, bbox);
        let mut is_inside = vec![false; self.values.len()];
        inside.iter().for_each(|&i| is_inside[i] = true);
        let mean = |want: bool| -> Option<f64> {
            let vals: Vec<f64> = self
                .values
                .iter()
                .zip(&is_inside)
                .filter(|(_, &b)| b == want)
                .map(|(v, _)| *v)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some((mean(true)?, mean(false)?))
    }
}

/// Writes `{stem}.pgm`, `{stem}_overlay.ppm` and `{stem}.csv` into `dir`.
pub fn export_heatmap(dir: &Path, stem: &str, heatmap: &Heatmap, grid: &PatchGrid) -> Result<()> {
    let image = unpatchify(grid);
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, heatmap.to_pgm(image.height, image.width)?).map_err(|e| Error::io(&pgm, e))?;
    crate::data::write_ppm(&dir.join(format!("{stem}_overlay.ppm")), &heatmap.overlay(&image)?)?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, heatmap.to_csv()).map_err(|e| Error::io(&csv, e))
}
