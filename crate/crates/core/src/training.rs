//! Optimization loop: warmup plus cosine schedule, SGD with momentum (or Adam),
//! round-robin pretraining over modalities, and identity finetuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, PkBatch, PkSampler, Sample};
use crate::encoders::{encode_images, encode_texts, fuse, init_id_head, linear, ModelConfig};
use crate::image::{mask_plan, patchify, resize, ImageMaskPlan, MaskStrategy, PatchGrid};
use crate::numerics::{Graph, Tensor, Var};
use crate::objectives::{
    id_loss, itm_loss, itm_negatives, mim_loss, mlm_loss, mmm_loss, total_finetune_loss, triplet_loss,
    LossAccumulator, LossReport, LossWeights, TripletMining, DEFAULT_MARGIN,
};
use crate::params::{Checkpoint, GradMap, ParamStore};
use crate::rng::stream;
use crate::text::{empty_sequence, encode, mask_tokens, TextMaskPlan, TokenSequence, Vocabulary};
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Which summary token feeds the triplet loss (finetuning) or retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    ClsM,
    ClsI,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ImageOnly,
    TextOnly,
    Paired,
}

impl Modality {
    /// Round-robin schedule of pretraining steps.
    pub fn for_step(step: usize) -> Self {
        [Self::ImageOnly, Self::TextOnly, Self::Paired][step % 3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Pretraining batch size; finetuning batches hold `p · k` samples.
    pub batch_size: usize,
    pub p: usize,
    pub k: usize,
    pub image_mask_ratio: f64,
    pub text_mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub margin: f64,
    pub mining: TripletMining,
    pub triplet_feature: FeatureSource,
    /// Also apply MIM and MLM on paired pretraining batches.
    pub unimodal_on_paired: bool,
    /// Probability that a finetuning sample is fused with an empty caption.
    pub caption_dropout: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Finetune,
            optimizer: Optimizer::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.1,
            warmup_steps: 10,
            total_steps: 200,
            batch_size: 32,
            p: 8,
            k: 4,
            image_mask_ratio: 0.15,
            text_mask_ratio: 0.15,
            mask_strategy: MaskStrategy::Region,
            margin: DEFAULT_MARGIN,
            mining: TripletMining::BatchHard,
            triplet_feature: FeatureSource::ClsM,
            unimodal_on_paired: false,
            caption_dropout: 0.0,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if self.total_steps == 0 {
            out.push("total_steps must be at least 1".into());
        }
        if self.warmup_steps > self.total_steps {
            out.push(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        for (name, r) in [("image_mask_ratio", self.image_mask_ratio), ("text_mask_ratio", self.text_mask_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                out.push(format!("{name} {r} outside (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            out.push(format!("caption_dropout {} outside [0, 1]", self.caption_dropout));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            out.push(format!("margin {} must be nonnegative", self.margin));
        }
        match self.mode {
            Mode::Finetune => {
                if self.p < 2 || self.k < 2 {
                    out.push(format!("P={} and K={} must both be at least 2", self.p, self.k));
                }
                if self.batch_size != self.p * self.k {
                    out.push(format!(
                        "batch_size {} differs from P·K = {}",
                        self.batch_size,
                        self.p * self.k
                    ));
                }
            }
            Mode::Pretrain => {
                if self.batch_size < 2 {
                    out.push("pretraining batch_size must be at least 2".into());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Linear warmup to `lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    let warm = cfg.warmup_steps;
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    let span = cfg.total_steps - warm;
    if span == 0 {
        return cfg.lr;
    }
    let t = (step - warm) as f64 / span as f64;
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
}

fn gradient_for<'a>(grads: &'a GradMap, name: &str) -> Result<&'a [f64]> {
    grads
        .get(name)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Integrity(format!("no gradient for trainable parameter {name}")))
}

/// Decoupled weight decay, then `v = μ·v + g` and `param −= lr·v`, for every
/// name in `trainable`.
pub fn sgd_step(
    params: &mut ParamStore,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    grads: &GradMap,
    trainable: &[String],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for name in trainable {
        gradient_for(grads, name)?;
    }
    for name in trainable {
        let g = &grads[name];
        let param = params.get_mut(name)?;
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        if v.len() != g.len() || param.numel() != g.len() {
            return Err(Error::Integrity(format!("gradient size mismatch for {name}")));
        }
        for ((w, vi), gi) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *w -= lr * weight_decay * *w;
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay; `t` is the 1-based update count.
pub fn adam_step(
    params: &mut ParamStore,
    first: &mut BTreeMap<String, Vec<f64>>,
    second: &mut BTreeMap<String, Vec<f64>>,
    grads: &GradMap,
    trainable: &[String],
    lr: f64,
    weight_decay: f64,
    t: usize,
) -> Result<()> {
    for name in trainable {
        gradient_for(grads, name)?;
    }
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for name in trainable {
        let g = &grads[name];
        let param = params.get_mut(name)?;
        if param.numel() != g.len() {
            return Err(Error::Integrity(format!("gradient size mismatch for {name}")));
        }
        let m = first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, mi), vi), gi) in param.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *w -= lr * weight_decay * *w;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// A sample converted to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub grid: PatchGrid,
    pub tokens: TokenSequence,
    /// In model-input pixel coordinates.
    pub bbox: BBox,
    pub identity: usize,
    pub camera: usize,
}

/// Resizes images to the model's input size (scaling boxes to match), cuts
/// patches and encodes captions.
pub fn prepare_samples(samples: &[Sample], vocab: &Vocabulary, model: &ModelConfig) -> Result<Vec<PreparedSample>> {
    let (h, w) = (model.image_height, model.image_width);
    samples
        .iter()
        .map(|s| {
            let (image, bbox) = if s.image.height == h && s.image.width == w {
                (s.image.clone(), s.bbox)
            } else {
                let sy = h as f64 / s.image.height as f64;
                let sx = w as f64 / s.image.width as f64;
                let top = ((s.bbox.top as f64 * sy).round() as usize).min(h - 1);
                let left = ((s.bbox.left as f64 * sx).round() as usize).min(w - 1);
                let bbox = BBox {
                    top,
                    left,
                    height: ((s.bbox.height as f64 * sy).round() as usize).clamp(1, h - top),
                    width: ((s.bbox.width as f64 * sx).round() as usize).clamp(1, w - left),
                };
                (resize(&s.image, h, w)?, bbox)
            };
            Ok(PreparedSample {
                grid: patchify(&image, model.patch_size)?,
                tokens: encode(&s.caption, vocab, model.text_len)?,
                bbox,
                identity: s.identity,
                camera: s.camera,
            })
        })
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = LossReport::csv_header();
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.report.csv_row(r.step, r.lr));
    }
    out
}

/// Everything needed to continue training bit-exactly. Per-step randomness is
/// derived from `(seed, step)`, so the step counter is the random-stream state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamStore,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub history: Vec<LogRow>,
}

const FIRST_PREFIX: &str = "optimizer.first.";
const SECOND_PREFIX: &str = "optimizer.second.";

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        Self {
            step: 0,
            params,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    /// Parameters, optimizer buffers and log in one checkpoint; `extra` is
    /// merged into the metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut blocks = self.params.clone();
        for (prefix, buffers) in [(FIRST_PREFIX, &self.first_moment), (SECOND_PREFIX, &self.second_moment)] {
            for (name, buf) in buffers {
                let shape = self.params.get(name)?.shape().to_vec();
                blocks.insert(format!("{prefix}{name}"), Tensor::new(&shape, buf.clone())?);
            }
        }
        let mut metadata = serde_json::json!({
            "step": self.step,
            "history": self.history,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (metadata.as_object_mut(), extra) {
            m.extend(e);
        }
        Ok(Checkpoint { metadata, blocks })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let step = ckpt.metadata.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let history: Vec<LogRow> = match ckpt.metadata.get("history") {
            Some(h) => serde_json::from_value(h.clone())
                .map_err(|e| Error::Data(format!("checkpoint history: {e}")))?,
            None => Vec::new(),
        };
        let mut state = Self::new(ParamStore::new());
        state.step = step;
        state.history = history;
        for (name, t) in ckpt.blocks.iter() {
            if let Some(n) = name.strip_prefix(FIRST_PREFIX) {
                state.first_moment.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix(SECOND_PREFIX) {
                state.second_moment.insert(n.to_string(), t.data().to_vec());
            } else {
                state.params.insert(name, t.clone());
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Parameters the step changed, i.e. those the loss reached.
    pub updated: Vec<String>,
}

fn empty_image_plan(strategy: MaskStrategy) -> ImageMaskPlan {
    ImageMaskPlan {
        positions: vec![],
        targets: vec![],
        strategy,
        degenerate: false,
    }
}

fn empty_text_plan() -> TextMaskPlan {
    TextMaskPlan {
        positions: vec![],
        original_ids: vec![],
        corruption: vec![],
    }
}

fn apply_update(
    state: &mut TrainState,
    cfg: &TrainConfig,
    grads: &GradMap,
    trainable: &[String],
    lr: f64,
) -> Result<()> {
    match cfg.optimizer {
        Optimizer::Sgd => sgd_step(
            &mut state.params,
            &mut state.first_moment,
            grads,
            trainable,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        ),
        Optimizer::Adam => adam_step(
            &mut state.params,
            &mut state.first_moment,
            &mut state.second_moment,
            grads,
            trainable,
            lr,
            cfg.weight_decay,
            state.step + 1,
        ),
    }
}

/// Runs the loss, backpropagates and updates every parameter the forward pass
/// used. A used parameter without a gradient is an integrity failure unless it
/// is listed in `unreachable`.
fn optimize<F>(state: &mut TrainState, cfg: &TrainConfig, unreachable: &[&str], forward: F) -> Result<StepOutcome>
where
    F: for<'g> FnOnce(&crate::params::Bound<'g>) -> Result<(Var<'g>, LossReport)>,
{
    let graph = Graph::new();
    let (grads, report, used) = {
        let bound = state.params.bind(&graph, true);
        let (loss, report) = forward(&bound)?;
        let g = graph.backward(loss)?;
        (bound.gradients(&g), report, bound.used())
    };
    let trainable: Vec<String> = used.into_iter().filter(|n| !unreachable.contains(&n.as_str())).collect();
    let lr = lr_at(state.step, cfg);
    apply_update(state, cfg, &grads, &trainable, lr)?;
    state.history.push(LogRow {
        step: state.step,
        lr,
        report: report.clone(),
    });
    state.step += 1;
    Ok(StepOutcome { report, updated: trainable })
}

/// Batch of `n` distinct sample indices for pretraining step `step`.
pub fn pretrain_batch(num_samples: usize, n: usize, seed: u64, step: usize) -> Result<Vec<usize>> {
    if n > num_samples {
        return Err(Error::Config(format!(
            "pretraining batch of {n} exceeds the {num_samples} available samples"
        )));
    }
    let mut rng = stream(seed, &[step as u64, 0x9e7]);
    let mut idx = sample(&mut rng, num_samples, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// One pretraining step on `batch` (indices into `data`) of the declared modality.
pub fn pretrain_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[PreparedSample],
    batch: &[usize],
    modality: Modality,
) -> Result<StepOutcome> {
    if cfg.mode != Mode::Pretrain {
        return Err(Error::Usage("pretrain_step called with a finetuning config".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Usage(format!("batch index {bad} outside {} samples", data.len())));
    }
    if batch.is_empty() {
        return Err(Error::Usage("empty pretraining batch".into()));
    }
    let items: Vec<&PreparedSample> = batch.iter().map(|&i| &data[i]).collect();
    let step = state.step as u64;
    let mut rng = stream(cfg.seed, &[step, 0x3a5c]);
    let image_plans = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<ImageMaskPlan>> {
        items
            .iter()
            .map(|s| mask_plan(cfg.mask_strategy, &s.grid, &s.bbox, cfg.image_mask_ratio, rng))
            .collect()
    };
    let text_plans = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<(TokenSequence, TextMaskPlan)>> {
        items
            .iter()
            .map(|s| mask_tokens(&s.tokens, cfg.text_mask_ratio, model.vocab_size, rng))
            .collect()
    };
    let w = cfg.weights;
    let grids: Vec<&PatchGrid> = items.iter().map(|s| &s.grid).collect();
    match modality {
        Modality::ImageOnly => {
            let plans = image_plans(&mut rng)?;
            optimize(state, cfg, &[], |p| {
                let refs: Vec<&ImageMaskPlan> = plans.iter().collect();
                let opt: Vec<Option<&ImageMaskPlan>> = refs.iter().map(|&r| Some(r)).collect();
                let img = encode_images(p, model, &grids, &opt)?;
                let mut acc = LossAccumulator::default();
                acc.add_optional("mim", mim_loss(p, &img, &refs)?, w.mim)?;
                acc.finish()
            })
        }
        Modality::TextOnly => {
            let corrupted = text_plans(&mut rng)?;
            optimize(state, cfg, &[], |p| {
                let seqs: Vec<&TokenSequence> = corrupted.iter().map(|c| &c.0).collect();
                let plans: Vec<&TextMaskPlan> = corrupted.iter().map(|c| &c.1).collect();
                let txt = encode_texts(p, model, &seqs)?;
                let mut acc = LossAccumulator::default();
                acc.add_optional("mlm", mlm_loss(p, &txt, &plans)?, w.mlm)?;
                acc.finish()
            })
        }
        Modality::Paired => {
            let iplans = image_plans(&mut rng)?;
            let corrupted = text_plans(&mut rng)?;
            let identities: Vec<usize> = items.iter().map(|s| s.identity).collect();
            let negatives = itm_negatives(&identities, &mut rng)?;
            let n = items.len();
            let empty_i = empty_image_plan(cfg.mask_strategy);
            let empty_t = empty_text_plan();
            // The CLS_I row never feeds the fusion encoder, so with a zero-depth
            // image encoder nothing reaches its embedding.
            let unreachable: &[&str] = if model.image.depth == 0 && !cfg.unimodal_on_paired {
                &["image.cls"]
            } else {
                &[]
            };
            optimize(state, cfg, unreachable, |p| {
                let irefs: Vec<&ImageMaskPlan> = iplans.iter().collect();
                let opt: Vec<Option<&ImageMaskPlan>> = irefs.iter().map(|&r| Some(r)).collect();
                let seqs: Vec<&TokenSequence> = corrupted.iter().map(|c| &c.0).collect();
                let tplans: Vec<&TextMaskPlan> = corrupted.iter().map(|c| &c.1).collect();
                let masks: Vec<&[bool]> = seqs.iter().map(|s| s.attention.as_slice()).collect();
                let img = encode_images(p, model, &grids, &opt)?;
                let txt = encode_texts(p, model, &seqs)?;
                let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
                pairs.extend(negatives.iter().enumerate().map(|(i, &j)| (i, j)));
                let fused = fuse(p, model, &img, &txt, &masks, &pairs)?;
                // masked prediction is scored on the matched half only
                let mut fi = irefs.clone();
                fi.extend(std::iter::repeat(&empty_i).take(n));
                let mut ft = tplans.clone();
                ft.extend(std::iter::repeat(&empty_t).take(n));
                let (mmm_i, mmm_t) = mmm_loss(p, &fused, &fi, &ft)?;
                let mut labels = vec![1; n];
                labels.extend(vec![0; n]);
                let mut acc = LossAccumulator::default();
                if cfg.unimodal_on_paired {
                    acc.add_optional("mim", mim_loss(p, &img, &irefs)?, w.mim)?;
                    acc.add_optional("mlm", mlm_loss(p, &txt, &tplans)?, w.mlm)?;
                }
                acc.add_optional("mmm_image", mmm_i, w.mmm_image)?;
                acc.add_optional("mmm_text", mmm_t, w.mmm_text)?;
                acc.add("itm", itm_loss(p, &fused, &labels)?, w.itm, 2 * n)?;
                acc.finish()
            })
        }
    }
}

/// Identity-to-class mapping for the classifier head: training identities in
/// ascending order.
pub fn label_map(data: &[PreparedSample]) -> BTreeMap<usize, usize> {
    let ids: std::collections::BTreeSet<usize> = data.iter().map(|s| s.identity).collect();
    ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
}

/// Image encoding of `items` and their fusion with `captions[i]`.
pub fn encode_paired<'g>(
    p: &crate::params::Bound<'g>,
    model: &ModelConfig,
    items: &[&PreparedSample],
    captions: &[&TokenSequence],
) -> Result<(crate::encoders::ImageEncoding<'g>, crate::encoders::MultimodalEncoding<'g>)> {
    if captions.len() != items.len() {
        return Err(Error::Usage("one caption per image required".into()));
    }
    let grids: Vec<&PatchGrid> = items.iter().map(|s| &s.grid).collect();
    let none: Vec<Option<&ImageMaskPlan>> = vec![None; items.len()];
    let seqs = captions;
    let masks: Vec<&[bool]> = seqs.iter().map(|s| s.attention.as_slice()).collect();
    let img = encode_images(p, model, &grids, &none)?;
    let txt = encode_texts(p, model, seqs)?;
    let pairs: Vec<(usize, usize)> = (0..items.len()).map(|i| (i, i)).collect();
    let fused = fuse(p, model, &img, &txt, &masks, &pairs)?;
    Ok((img, fused))
}

/// One finetuning step: ID head and triplet features on `[CLS_M]`, summed.
pub fn finetune_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[PreparedSample],
    labels: &BTreeMap<usize, usize>,
    batch: &PkBatch,
) -> Result<StepOutcome> {
    if cfg.mode != Mode::Finetune {
        return Err(Error::Usage("finetune_step called with a pretraining config".into()));
    }
    if let Some(&bad) = batch.indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Usage(format!("batch index {bad} outside {} samples", data.len())));
    }
    let items: Vec<&PreparedSample> = batch.indices.iter().map(|&i| &data[i]).collect();
    let y: Vec<usize> = items
        .iter()
        .map(|s| {
            labels
                .get(&s.identity)
                .copied()
                .ok_or_else(|| Error::Usage(format!("identity {} has no class", s.identity)))
        })
        .collect::<Result<_>>()?;
    if !state.params.contains("head.id.w") {
        return Err(Error::Usage("finetuning needs an identity head".into()));
    }
    let mut rng = stream(cfg.seed, &[state.step as u64, 0x7121]);
    let empty = empty_sequence(model.text_len)?;
    let captions: Vec<&TokenSequence> = items
        .iter()
        .map(|s| {
            if cfg.caption_dropout > 0.0 && rng.gen::<f64>() < cfg.caption_dropout {
                &empty
            } else {
                &s.tokens
            }
        })
        .collect();
    let unreachable: &[&str] = if model.image.depth == 0 && cfg.triplet_feature == FeatureSource::ClsM {
        &["image.cls"]
    } else {
        &[]
    };
    let (margin, mining, feature) = (cfg.margin, cfg.mining, cfg.triplet_feature);
    optimize(state, cfg, unreachable, |p| {
        let (img, fused) = encode_paired(p, model, &items, &captions)?;
        let cls_m = fused.cls()?;
        let logits = linear(p, "head.id", cls_m)?;
        let features = match feature {
            FeatureSource::ClsM => cls_m,
            FeatureSource::ClsI => img.cls()?,
        };
        let id = id_loss(logits, &y)?;
        let tri = triplet_loss(features, &y, margin, mining, &mut rng)?;
        let total = total_finetune_loss(id, tri)?;
        let mut report = LossReport::default();
        for (name, v) in [("id", id), ("triplet", tri)] {
            report.components.insert(name.into(), v.item());
            report.counts.insert(name.into(), y.len());
        }
        report.total = total.item();
        Ok((total, report))
    })
}

/// Owns the state and data of one training run.
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub state: TrainState,
    data: &'a [PreparedSample],
    sampler: Option<PkSampler>,
    labels: BTreeMap<usize, usize>,
}

fn pk_sampler(data: &[PreparedSample], p: usize, k: usize) -> Result<PkSampler> {
    PkSampler::from_identities(data.iter().map(|s| s.identity), p, k)
}

impl<'a> Trainer<'a> {
    /// Finetuning from `params`, adding an identity head sized to the training
    /// identities when none of the right size exists.
    pub fn finetune(model: ModelConfig, cfg: TrainConfig, data: &'a [PreparedSample], mut params: ParamStore) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if cfg.mode != Mode::Finetune {
            return Err(Error::Config("finetuning needs mode = finetune".into()));
        }
        let labels = label_map(data);
        let sampler = pk_sampler(data, cfg.p, cfg.k)?;
        let fits = params
            .get("head.id.b")
            .map(|t| t.numel() == labels.len())
            .unwrap_or(false);
        if !fits {
            init_id_head(&mut params, &model, labels.len(), cfg.seed);
        }
        Ok(Self {
            model,
            cfg,
            state: TrainState::new(params),
            data,
            sampler: Some(sampler),
            labels,
        })
    }

    pub fn pretrain(model: ModelConfig, cfg: TrainConfig, data: &'a [PreparedSample], params: ParamStore) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if cfg.mode != Mode::Pretrain {
            return Err(Error::Config("pretraining needs mode = pretrain".into()));
        }
        if data.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "pretraining batch_size {} exceeds the {} available samples",
                cfg.batch_size,
                data.len()
            )));
        }
        Ok(Self {
            model,
            cfg,
            state: TrainState::new(params),
            data,
            sampler: None,
            labels: BTreeMap::new(),
        })
    }

    /// Continues from a saved state; the data and configs must be the ones the
    /// state was trained with.
    pub fn resume(mut self, state: TrainState) -> Result<Self> {
        for name in self.state.params.names() {
            let want = self.state.params.get(name)?.shape();
            match state.params.get(name) {
                Ok(t) if t.shape() == want => {}
                Ok(t) => {
                    return Err(Error::Data(format!(
                        "checkpoint block {name} has shape {:?}, expected {want:?}",
                        t.shape()
                    )))
                }
                Err(_) => return Err(Error::Data(format!("checkpoint lacks block {name}"))),
            }
        }
        self.state = state;
        Ok(self)
    }

    pub fn labels(&self) -> &BTreeMap<usize, usize> {
        &self.labels
    }

    pub fn data(&self) -> &'a [PreparedSample] {
        self.data
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let step = self.state.step;
        match self.cfg.mode {
            Mode::Finetune => {
                let batch = self.sampler.as_ref().expect("finetune sampler").batch_at(self.cfg.seed, step);
                finetune_step(&mut self.state, &self.model, &self.cfg, self.data, &self.labels, &batch)
            }
            Mode::Pretrain => {
                let batch = pretrain_batch(self.data.len(), self.cfg.batch_size, self.cfg.seed, step)?;
                pretrain_step(
                    &mut self.state,
                    &self.model,
                    &self.cfg,
                    self.data,
                    &batch,
                    Modality::for_step(step),
                )
            }
        }
    }

    /// Steps until `total_steps` (or `limit` more steps, whichever is first).
    pub fn run(&mut self, limit: Option<usize>) -> Result<()> {
        let end = match limit {
            Some(n) => (self.state.step + n).min(self.cfg.total_steps),
            None => self.cfg.total_steps,
        };
        while self.state.step < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        log_csv(&self.state.history)
    }
}
