//! Whole runs driven by one declarative [`RunConfig`]: synthesis, pretraining,
//! finetuning, evaluation, Grad-CAM export and the masking ablation. Every
//! command validates the full config before touching data and writes only
//! under the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{read_dataset, split_for_retrieval, write_dataset, AttributeRecord, Sample, SynthConfig};
use crate::encoders::{init_params, ModelConfig};
use crate::eval::{distance_matrix, evaluate, extract_features, EvalResult};
use crate::image::MaskStrategy;
use crate::numerics::Graph;
use crate::params::ParamStore;
use crate::text::Vocabulary;
use crate::training::{
    encode_paired, prepare_samples, FeatureSource, Mode, Optimizer, PreparedSample, TrainConfig, TrainState, Trainer,
};
use crate::viz::{export_heatmap, grad_cam, GradCamOptions};
use crate::{Error, Result};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";

/// How the target corpus is split and scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Identities below this train; the rest form query and gallery.
    pub train_identities: usize,
    pub max_rank: usize,
    pub feature: FeatureSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_identities: 20,
            max_rank: 10,
            feature: FeatureSource::ClsI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Target corpus: finetuning identities plus held-out retrieval identities.
    pub synth: SynthConfig,
    /// Source-domain corpus for pretraining.
    pub pretrain_synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub gradcam: GradCamOptions,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let finetune = TrainConfig {
            optimizer: Optimizer::Adam,
            triplet_feature: FeatureSource::ClsI,
            caption_dropout: 0.5,
            ..TrainConfig::default()
        };
        Self {
            synth: SynthConfig {
                num_identities: 40,
                images_per_identity: 8,
                ..SynthConfig::default()
            },
            pretrain_synth: SynthConfig {
                num_identities: 300,
                images_per_identity: 2,
                seed: 1000,
                domain: 1,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                vocab_size: caption_vocabulary().map(|v| v.len()).unwrap_or(32),
                ..ModelConfig::default()
            },
            pretrain: TrainConfig {
                mode: Mode::Pretrain,
                lr: 2e-3,
                total_steps: 300,
                unimodal_on_paired: true,
                ..finetune.clone()
            },
            finetune,
            eval: EvalConfig::default(),
            gradcam: GradCamOptions::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Vocabulary covering every caption the synthetic generator can emit, so
/// that pretraining and finetuning corpora share token ids.
pub fn caption_vocabulary() -> Result<Vocabulary> {
    Vocabulary::build(&AttributeRecord::all_captions())
}

/// Sets `path` (dot-separated) in `doc` to `raw`, parsed as JSON when possible
/// and as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = at
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {} is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*key) {
                return Err(Error::Config(format!("unknown config field {path}")));
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        at = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown config section {}", keys[..=i].join("."))))?;
    }
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults, then the JSON document `file` (if any), then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, patch);
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every violated constraint across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, s) in [("synth", &self.synth), ("pretrain_synth", &self.pretrain_synth)] {
            if let Err(e) = s.validate() {
                out.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.model.validate() {
            out.push(format!("model: {e}"));
        }
        match caption_vocabulary() {
            Ok(v) if v.len() != self.model.vocab_size => out.push(format!(
                "model.vocab_size is {}, but the caption vocabulary has {} tokens",
                self.model.vocab_size,
                v.len()
            )),
            Ok(_) => {}
            Err(e) => out.push(e.to_string()),
        }
        for (name, cfg, mode) in [
            ("pretrain", &self.pretrain, Mode::Pretrain),
            ("finetune", &self.finetune, Mode::Finetune),
        ] {
            out.extend(cfg.problems().into_iter().map(|p| format!("{name}: {p}")));
            if cfg.mode != mode {
                out.push(format!("{name}.mode must be {mode:?}").to_lowercase());
            }
        }
        let held_out = self.synth.num_identities.saturating_sub(self.eval.train_identities);
        if self.eval.train_identities < self.finetune.p {
            out.push(format!(
                "eval.train_identities {} is fewer than finetune.p {}",
                self.eval.train_identities, self.finetune.p
            ));
        }
        if held_out == 0 {
            out.push("eval.train_identities leaves no held-out identity".into());
        }
        if self.synth.images_per_identity < self.finetune.k {
            out.push(format!(
                "synth.images_per_identity {} is below finetune.k {}",
                self.synth.images_per_identity, self.finetune.k
            ));
        }
        if self.pretrain.batch_size > self.pretrain_synth.num_identities * self.pretrain_synth.images_per_identity {
            out.push("pretrain.batch_size exceeds the pretraining corpus".into());
        }
        if self.eval.max_rank == 0 {
            out.push("eval.max_rank must be at least 1".into());
        }
        if !(self.gradcam.logit_scale.is_finite() && self.gradcam.logit_scale > 0.0) {
            out.push("gradcam.logit_scale must be positive".into());
        }
        if self.gradcam.layer.is_some_and(|l| l > self.model.image.depth) {
            out.push("gradcam.layer exceeds the image encoder depth".into());
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

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Eval(_) => 3,
        Error::Tensor(_) | Error::Integrity(_) => 4,
    }
}

/// Owns the validated config of one command and its output directory.
pub struct Run {
    pub cfg: RunConfig,
    vocab: Vocabulary,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn check_finite(state: &TrainState) -> Result<()> {
    for (_, t) in state.params.iter() {
        if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(crate::numerics::TensorError::NonFinite {
                op: "parameter update",
                index,
            }
            .into());
        }
    }
    Ok(())
}

/// What one finetuning run produced.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub state: TrainState,
    pub eval: Option<EvalResult>,
}

impl Run {
    /// Validates `cfg` and echoes it as `{command}_config.json` in the run directory.
    pub fn start(cfg: RunConfig, command: &str) -> Result<Self> {
        cfg.validate()?;
        let vocab = caption_vocabulary()?;
        let run = Self { cfg, vocab };
        write(&run.path(&format!("{command}_config.json")), run.cfg.to_json())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    pub fn default_data_dir(&self) -> PathBuf {
        self.path("data")
    }

    pub fn default_pretrain_data_dir(&self) -> PathBuf {
        self.path("pretrain_data")
    }

    /// Target corpus under `data/`, source corpus under `pretrain_data/`.
    pub fn synth(&self) -> Result<(usize, usize)> {
        let target = self.cfg.synth.generate()?;
        let source = self.cfg.pretrain_synth.generate()?;
        write_dataset(&self.default_data_dir(), &target)?;
        write_dataset(&self.default_pretrain_data_dir(), &source)?;
        Ok((target.len(), source.len()))
    }

    fn load(&self, dir: &Path) -> Result<(Vec<Sample>, Vec<PreparedSample>)> {
        if !dir.join("manifest.json").exists() {
            return Err(Error::Data(format!("no dataset at {}", dir.display())));
        }
        let samples = read_dataset(dir)?;
        let prepared = prepare_samples(&samples, &self.vocab, &self.cfg.model)?;
        Ok((samples, prepared))
    }

    fn checkpoint_meta(&self, mode: Mode, labels: Option<&std::collections::BTreeMap<usize, usize>>) -> Value {
        serde_json::json!({
            "mode": mode,
            "model": self.cfg.model,
            "labels": labels.map(|l| l.iter().map(|(a, b)| [*a, *b]).collect::<Vec<_>>()),
        })
    }

    /// Parameters of a saved run, checked against this run's model.
    pub fn load_params(&self, path: &Path) -> Result<ParamStore> {
        let ckpt = crate::params::Checkpoint::load(path)?;
        if let Some(model) = ckpt.metadata.get("model") {
            let saved: ModelConfig =
                serde_json::from_value(model.clone()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if saved != self.cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model config",
                    path.display()
                )));
            }
        }
        Ok(TrainState::from_checkpoint(&ckpt)?.params)
    }

    fn fresh_params(&self, seed: u64) -> Result<ParamStore> {
        init_params(&self.cfg.model, seed)
    }

    /// Pretraining on `data_dir`, continuing from `resume` when given and
    /// stopping after `limit` steps if set.
    pub fn pretrain(
        &self,
        data_dir: &Path,
        resume: Option<&Path>,
        limit: Option<usize>,
        prefix: &str,
    ) -> Result<TrainState> {
        let (_, data) = self.load(data_dir)?;
        let cfg = self.cfg.pretrain.clone();
        let mut trainer = Trainer::pretrain(self.cfg.model.clone(), cfg.clone(), &data, self.fresh_params(cfg.seed)?)?;
        if let Some(path) = resume {
            trainer = trainer.resume(TrainState::load(path)?)?;
        }
        trainer.run(limit)?;
        check_finite(&trainer.state)?;
        trainer
            .state
            .save(&self.path(&format!("{prefix}{PRETRAIN_CHECKPOINT}")), self.checkpoint_meta(Mode::Pretrain, None))?;
        write(&self.path(&format!("{prefix}pretrain_log.csv")), trainer.log_csv())?;
        self.write_final_report(&trainer.state, &format!("{prefix}pretrain_report.json"))?;
        Ok(trainer.state)
    }

    fn write_final_report(&self, state: &TrainState, name: &str) -> Result<()> {
        let last = state.history.last().map(|r| &r.report);
        let json = serde_json::to_string_pretty(&last).expect("report serializes");
        write(&self.path(name), json + "\n")
    }

    /// Finetuning on the training identities of `data_dir`, from `init`
    /// (a pretraining checkpoint) or from scratch.
    pub fn finetune(
        &self,
        data_dir: &Path,
        init: Option<&Path>,
        eval_after: bool,
        prefix: &str,
    ) -> Result<FinetuneOutput> {
        let (samples, data) = self.load(data_dir)?;
        let split = split_for_retrieval(&samples, self.cfg.eval.train_identities);
        let train: Vec<PreparedSample> = split.train.iter().map(|&i| data[i].clone()).collect();
        let params = match init {
            Some(path) => self.load_params(path)?,
            None => self.fresh_params(self.cfg.finetune.seed)?,
        };
        let mut trainer = Trainer::finetune(self.cfg.model.clone(), self.cfg.finetune.clone(), &train, params)?;
        trainer.run(None)?;
        check_finite(&trainer.state)?;
        let meta = self.checkpoint_meta(Mode::Finetune, Some(trainer.labels()));
        trainer.state.save(&self.path(&format!("{prefix}{FINETUNE_CHECKPOINT}")), meta)?;
        write(&self.path(&format!("{prefix}finetune_log.csv")), trainer.log_csv())?;
        self.write_final_report(&trainer.state, &format!("{prefix}finetune_report.json"))?;
        let eval = if eval_after {
            Some(self.evaluate_params(&trainer.state.params, &samples, &data, prefix)?)
        } else {
            None
        };
        Ok(FinetuneOutput {
            state: trainer.state,
            eval,
        })
    }

    fn evaluate_params(
        &self,
        params: &ParamStore,
        samples: &[Sample],
        data: &[PreparedSample],
        prefix: &str,
    ) -> Result<EvalResult> {
        let split = split_for_retrieval(samples, self.cfg.eval.train_identities);
        let pick = |idx: &[usize]| -> Vec<PreparedSample> { idx.iter().map(|&i| data[i].clone()).collect() };
        let q = extract_features(params, &self.cfg.model, &pick(&split.query), self.cfg.eval.feature)?;
        let g = extract_features(params, &self.cfg.model, &pick(&split.gallery), self.cfg.eval.feature)?;
        let result = evaluate(&distance_matrix(&q, &g)?, &q.meta, &g.meta, self.cfg.eval.max_rank)?;
        write(&self.path(&format!("{prefix}eval.json")), result.to_json() + "\n")?;
        write(&self.path(&format!("{prefix}eval_per_query.csv")), result.per_query_csv())?;
        Ok(result)
    }

    /// Retrieval metrics of `checkpoint` on the held-out identities of `data_dir`.
    pub fn eval(&self, checkpoint: &Path, data_dir: &Path) -> Result<EvalResult> {
        let params = self.load_params(checkpoint)?;
        let (samples, data) = self.load(data_dir)?;
        self.evaluate_params(&params, &samples, &data, "")
    }

    /// Heatmaps for sample indices `ids` of `data_dir` under `gradcam/`. The
    /// target is the ground-truth class for training identities and the
    /// predicted class otherwise, unless `class` is given.
    pub fn gradcam(&self, checkpoint: &Path, data_dir: &Path, ids: &[usize], class: Option<usize>) -> Result<Vec<PathBuf>> {
        let ckpt = crate::params::Checkpoint::load(checkpoint)?;
        let params = self.load_params(checkpoint)?;
        if !params.contains("head.id.w") {
            return Err(Error::Usage(format!("{} has no identity head", checkpoint.display())));
        }
        let labels: std::collections::BTreeMap<usize, usize> = ckpt
            .metadata
            .get("labels")
            .and_then(|l| serde_json::from_value::<Vec<[usize; 2]>>(l.clone()).ok())
            .map(|pairs| pairs.into_iter().map(|[a, b]| (a, b)).collect())
            .unwrap_or_default();
        let (_, data) = self.load(data_dir)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
            return Err(Error::Usage(format!("sample {bad} outside {} samples", data.len())));
        }
        let dir = self.path("gradcam");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = Vec::new();
        let mut summary = String::from("sample,identity,class,inside_mean,outside_mean\n");
        for &i in ids {
            let s = &data[i];
            let target = match class.or_else(|| labels.get(&s.identity).copied()) {
                Some(c) => c,
                None => predicted_class(&params, &self.cfg.model, s, self.cfg.gradcam.caption)?,
            };
            let heat = grad_cam(&params, &self.cfg.model, s, target, &self.cfg.gradcam)?;
            let stem = format!("sample_{i:06}");
            export_heatmap(&dir, &stem, &heat, &s.grid)?;
            let (inside, outside) = heat
                .region_means(&s.grid, &s.bbox)
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .unwrap_or_default();
            let _ = writeln!(summary, "{i},{},{target},{inside},{outside}", s.identity);
            written.push(dir.join(format!("{stem}.pgm")));
        }
        write(&dir.join("summary.csv"), summary)?;
        Ok(written)
    }

    /// Baseline, random-mask and region-mask pretraining, each finetuned and
    /// evaluated; writes `ablation.csv`.
    pub fn ablate(&self, data_dir: &Path, pretrain_dir: &Path) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for (variant, strategy) in [
            ("baseline", None),
            ("random_mask", Some(MaskStrategy::Random)),
            ("region_mask", Some(MaskStrategy::Region)),
        ] {
            let prefix = format!("ablation/{variant}/");
            let dir = self.path(&prefix);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let init = match strategy {
                Some(st) => {
                    let mut cfg = self.cfg.clone();
                    cfg.pretrain.mask_strategy = st;
                    let sub = Run {
                        cfg,
                        vocab: self.vocab.clone(),
                    };
                    sub.pretrain(pretrain_dir, None, None, &prefix)?;
                    Some(self.path(&format!("{prefix}{PRETRAIN_CHECKPOINT}")))
                }
                None => None,
            };
            let out = self.finetune(data_dir, init.as_deref(), true, &prefix)?;
            let eval = out.eval.expect("evaluated");
            rows.push(AblationRow {
                variant: variant.to_string(),
                map: eval.map,
                rank1: eval.rank(1),
                rank5: eval.rank(5),
            });
        }
        let mut csv = String::from("variant,mAP,rank1,rank5\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.variant, r.map, r.rank1, r.rank5);
        }
        write(&self.path("ablation.csv"), csv)?;
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
}

/// Most likely identity class of `sample` under the classifier on `[CLS_M]`.
pub fn predicted_class(
    params: &ParamStore,
    model: &ModelConfig,
    sample: &PreparedSample,
    caption: crate::viz::CamCaption,
) -> Result<usize> {
    let tokens = match caption {
        crate::viz::CamCaption::Own => sample.tokens.clone(),
        crate::viz::CamCaption::Empty => crate::text::empty_sequence(sample.tokens.len())?,
    };
    let graph = Graph::new();
    let p = params.bind(&graph, false);
    let (_, fused) = encode_paired(&p, model, &[sample], &[&tokens])?;
    let logits = crate::encoders::linear(&p, "head.id", fused.cls()?)?.to_vec();
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}
