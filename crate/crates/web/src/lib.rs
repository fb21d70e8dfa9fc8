//! Browser bindings. Each export wraps a plain function so the same code runs
//! under native tests.

use std::collections::BTreeMap;

use mmet_core::data::{generate_dataset, Image, Sample};
use mmet_core::encoders::{init_params, EncoderConfig, ModelConfig};
use mmet_core::image::{mask_plan, patchify, MaskStrategy};
use mmet_core::pipeline::caption_vocabulary;
use mmet_core::rng::stream;
use mmet_core::training::{
    lr_at, prepare_samples, FeatureSource, Optimizer, PreparedSample, TrainConfig, TrainState, Trainer,
};
use mmet_core::viz::{grad_cam, GradCamOptions};
use mmet_core::{Error, Result};
use wasm_bindgen::prelude::*;

const IDENTITIES: usize = 6;
const PER_IDENTITY: usize = 4;
const CAMERAS: usize = 2;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn sample_at(seed: u64, index: usize) -> Result<Sample> {
    let mut samples = generate_dataset(IDENTITIES, PER_IDENTITY, CAMERAS, seed)?;
    if index >= samples.len() {
        return Err(Error::Usage(format!("sample {index} outside [0, {})", samples.len())));
    }
    Ok(samples.swap_remove(index))
}

/// Row-major RGBA bytes.
pub fn rgba(image: &Image) -> Vec<u8> {
    image
        .data
        .chunks(3)
        .flat_map(|px| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(px[0]), q(px[1]), q(px[2]), 255]
        })
        .collect()
}

/// The sample with its masked patches greyed out and its bbox outlined.
/// Returns the image and the masked patch indices.
pub fn masked_view(seed: u64, index: usize, region: bool, ratio: f64, patch: usize, mask_seed: u64) -> Result<(Image, Vec<usize>)> {
    let sample = sample_at(seed, index)?;
    let grid = patchify(&sample.image, patch)?;
    let strategy = if region { MaskStrategy::Region } else { MaskStrategy::Random };
    let plan = mask_plan(strategy, &grid, &sample.bbox, ratio, &mut stream(mask_seed, &[index as u64]))?;
    let mut img = sample.image.clone();
    for &i in &plan.positions {
        let (top, left) = grid.origin(i);
        for y in top..top + patch {
            for x in left..left + patch {
                img.set_pixel(y, x, [0.5, 0.5, 0.5]);
            }
        }
    }
    let b = sample.bbox;
    for y in b.top..b.top + b.height {
        for x in b.left..b.left + b.width {
            if y == b.top || x == b.left || y + 1 == b.top + b.height || x + 1 == b.left + b.width {
                img.set_pixel(y, x, [0.1, 0.9, 0.2]);
            }
        }
    }
    Ok((img, plan.positions))
}

pub fn lr_schedule(lr: f64, warmup: usize, total: usize) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        lr,
        warmup_steps: warmup,
        total_steps: total,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok((0..=total).map(|s| lr_at(s, &cfg)).collect())
}

#[wasm_bindgen]
pub fn sample_count() -> usize {
    IDENTITIES * PER_IDENTITY
}

#[wasm_bindgen]
pub fn image_height() -> usize {
    ModelConfig::default().image_height
}

#[wasm_bindgen]
pub fn image_width() -> usize {
    ModelConfig::default().image_width
}

#[wasm_bindgen]
pub fn sample_caption(seed: u32, index: usize) -> std::result::Result<String, JsError> {
    sample_at(seed.into(), index).map(|s| s.caption).map_err(js)
}

#[wasm_bindgen]
pub fn render_masked(
    seed: u32,
    index: usize,
    region: bool,
    ratio: f64,
    patch: usize,
    mask_seed: u32,
) -> std::result::Result<Vec<u8>, JsError> {
    masked_view(seed.into(), index, region, ratio, patch, mask_seed.into()).map(|(img, _)| rgba(&img)).map_err(js)
}

#[wasm_bindgen]
pub fn lr_curve(lr: f64, warmup: usize, total: usize) -> std::result::Result<Vec<f64>, JsError> {
    lr_schedule(lr, warmup, total).map_err(js)
}

/// A tiny re-identification model finetuned in the page, step by step.
#[wasm_bindgen]
pub struct CamDemo {
    model: ModelConfig,
    cfg: TrainConfig,
    samples: Vec<Sample>,
    data: Vec<PreparedSample>,
    labels: BTreeMap<usize, usize>,
    state: TrainState,
}

impl CamDemo {
    pub fn build(seed: u64) -> Result<Self> {
        let vocab = caption_vocabulary()?;
        let enc = EncoderConfig {
            depth: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            max_positions: 64,
        };
        let model = ModelConfig {
            image: enc,
            text: enc,
            fusion: enc,
            patch_size: 8,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            optimizer: Optimizer::Adam,
            triplet_feature: FeatureSource::ClsI,
            caption_dropout: 0.5,
            total_steps: 400,
            batch_size: 8,
            p: 4,
            k: 2,
            seed,
            ..TrainConfig::default()
        };
        let samples = generate_dataset(IDENTITIES, PER_IDENTITY, CAMERAS, seed)?;
        let data = prepare_samples(&samples, &vocab, &model)?;
        let trainer = Trainer::finetune(model.clone(), cfg.clone(), &data, init_params(&model, seed)?)?;
        let labels = trainer.labels().clone();
        let state = trainer.state;
        Ok(Self {
            model,
            cfg,
            samples,
            data,
            labels,
            state,
        })
    }

    /// Runs up to `n` more steps and returns the latest total loss.
    pub fn advance(&mut self, n: usize) -> Result<f64> {
        let mut t = Trainer::finetune(self.model.clone(), self.cfg.clone(), &self.data, self.state.params.clone())?
            .resume(self.state.clone())?;
        t.run(Some(n))?;
        self.state = t.state;
        Ok(self.state.history.last().map_or(f64::NAN, |r| r.report.total))
    }

    /// Grad-CAM of the sample's own identity, blended over the image.
    pub fn overlay(&self, index: usize) -> Result<Image> {
        let (sample, prepared) = self
            .samples
            .get(index)
            .zip(self.data.get(index))
            .ok_or_else(|| Error::Usage(format!("sample {index} outside [0, {})", self.data.len())))?;
        let class = self.labels[&prepared.identity];
        let heat = grad_cam(&self.state.params, &self.model, prepared, class, &GradCamOptions::default())?;
        heat.overlay(&sample.image)
    }
}

#[wasm_bindgen]
impl CamDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<CamDemo, JsError> {
        Self::build(seed.into()).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> std::result::Result<f64, JsError> {
        self.advance(steps).map_err(js)
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn heatmap(&self, index: usize) -> std::result::Result<Vec<u8>, JsError> {
        self.overlay(index).map(|img| rgba(&img)).map_err(js)
    }
}
