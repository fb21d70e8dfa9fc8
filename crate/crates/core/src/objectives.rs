//! Finetuning losses (identity cross-entropy, batch-hard triplet, their sum)
//! and the pretraining losses (MIM, MLM, MMM, ITM).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{linear, Encoding, ImageEncoding, MultimodalEncoding, TextEncoding};
use crate::image::ImageMaskPlan;
use crate::numerics::Var;
use crate::params::Bound;
use crate::text::TextMaskPlan;
use crate::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.3;
/// Keeps the distance square root differentiable at coincident points.
const DISTANCE_EPS: f64 = 1e-12;

/// Mean cross-entropy of identity logits `[B×N]`.
pub fn id_loss<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let n = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Usage(format!("identity label {bad} outside [0, {n})")));
    }
    Ok(logits.cross_entropy(labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    BatchHard,
    Random,
}

/// Squared-distance-free Euclidean distance matrix of feature rows.
fn pairwise_distances(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|a| {
            rows.iter()
                .map(|b| a.iter().zip(*b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// `(anchor, positive, negative)` index triples, one per anchor.
pub fn mine_triplets(
    features: &[&[f64]],
    labels: &[usize],
    mining: TripletMining,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&label, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Usage(format!(
            "triplet loss: label {label} appears once, so it has no positive"
        )));
    }
    if counts.len() < 2 {
        let label = labels.first().copied().unwrap_or_default();
        return Err(Error::Usage(format!(
            "triplet loss: every sample carries label {label}, so there is no negative"
        )));
    }
    let dist = pairwise_distances(features);
    let mut triples = Vec::with_capacity(labels.len());
    for a in 0..labels.len() {
        let positives = (0..labels.len()).filter(|&j| j != a && labels[j] == labels[a]);
        let negatives = (0..labels.len()).filter(|&j| labels[j] != labels[a]);
        let (p, n) = match mining {
            TripletMining::BatchHard => {
                // ties resolve to the lowest index
                let p = positives
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(b) if dist[a][b] >= dist[a][j] => Some(b),
                        _ => Some(j),
                    })
                    .expect("positive exists");
                let n = negatives
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(b) if dist[a][b] <= dist[a][j] => Some(b),
                        _ => Some(j),
                    })
                    .expect("negative exists");
                (p, n)
            }
            TripletMining::Random => {
                let ps: Vec<usize> = positives.collect();
                let ns: Vec<usize> = negatives.collect();
                (*ps.choose(rng).expect("positive"), *ns.choose(rng).expect("negative"))
            }
        };
        triples.push((a, p, n));
    }
    Ok(triples)
}

/// Mean over anchors of `(d_ap − d_an + margin)₊` with Euclidean distances.
pub fn triplet_loss<'g>(
    features: Var<'g>,
    labels: &[usize],
    margin: f64,
    mining: TripletMining,
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    if labels.len() != features.rows() {
        return Err(Error::Usage(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let triples = {
        let value = features.value();
        let rows: Vec<&[f64]> = (0..value.rows()).map(|i| value.row(i)).collect();
        mine_triplets(&rows, labels, mining, rng)?
    };
    let pick = |f: fn(&(usize, usize, usize)) -> usize| -> Vec<usize> { triples.iter().map(f).collect() };
    let fa = features.gather_rows(&pick(|t| t.0))?;
    let fp = features.gather_rows(&pick(|t| t.1))?;
    let fne = features.gather_rows(&pick(|t| t.2))?;
    let dist = |other: Var<'g>| -> Result<Var<'g>> {
        let diff = fa.sub(other)?;
        Ok(diff.mul(diff)?.row_sums()?.add_scalar(DISTANCE_EPS)?.sqrt()?)
    };
    let hinge = dist(fp)?.sub(dist(fne)?)?.add_scalar(margin)?.relu()?;
    Ok(hinge.mean()?)
}

/// Unweighted sum of the identity and triplet terms.
pub fn total_finetune_loss<'g>(id: Var<'g>, triplet: Var<'g>) -> Result<Var<'g>> {
    Ok(id.add(triplet)?)
}

/// Pixel regression on masked patches from image-encoder states. `None` when
/// no sample has a masked patch.
pub fn mim_loss<'g>(
    p: &Bound<'g>,
    img: &ImageEncoding<'g>,
    plans: &[&ImageMaskPlan],
) -> Result<Option<(Var<'g>, usize)>> {
    masked_patch_regression(p, "head.mim", img, plans, |b, pos| (b, 1 + pos))
}

fn masked_patch_regression<'g>(
    p: &Bound<'g>,
    head: &str,
    enc: &Encoding<'g>,
    plans: &[&ImageMaskPlan],
    row_of: impl Fn(usize, usize) -> (usize, usize),
) -> Result<Option<(Var<'g>, usize)>> {
    if plans.len() != enc.batch {
        return Err(Error::Usage("one image mask plan per sequence required".into()));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        for &pos in &plan.positions {
            rows.push(row_of(b, pos));
        }
        targets.extend_from_slice(&plan.targets);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let pred = linear(p, head, enc.rows(&rows)?)?;
    Ok(Some((pred.mse(&targets)?, rows.len())))
}

fn masked_token_prediction<'g>(
    p: &Bound<'g>,
    head: &str,
    enc: &Encoding<'g>,
    plans: &[&TextMaskPlan],
    row_of: impl Fn(usize, usize) -> (usize, usize),
) -> Result<Option<(Var<'g>, usize)>> {
    if plans.len() != enc.batch {
        return Err(Error::Usage("one text mask plan per sequence required".into()));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        for (&pos, &id) in plan.positions.iter().zip(&plan.original_ids) {
            rows.push(row_of(b, pos));
            labels.push(id);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let logits = linear(p, head, enc.rows(&rows)?)?;
    Ok(Some((logits.cross_entropy(&labels)?, rows.len())))
}

/// Vocabulary cross-entropy at masked text positions from text-encoder states.
pub fn mlm_loss<'g>(
    p: &Bound<'g>,
    txt: &TextEncoding<'g>,
    plans: &[&TextMaskPlan],
) -> Result<Option<(Var<'g>, usize)>> {
    masked_token_prediction(p, "head.mlm", txt, plans, |b, pos| (b, pos))
}

/// Image and text parts of masked multimodal modeling, read from the fused
/// states. `image_plans[j]` and `text_plans[j]` belong to fused sequence `j`.
pub type MmmParts<'g> = (Option<(Var<'g>, usize)>, Option<(Var<'g>, usize)>);

pub fn mmm_loss<'g>(
    p: &Bound<'g>,
    fused: &MultimodalEncoding<'g>,
    image_plans: &[&ImageMaskPlan],
    text_plans: &[&TextMaskPlan],
) -> Result<MmmParts<'g>> {
    let m = fused.num_patches;
    let image = masked_patch_regression(p, "head.mmm_image", &fused.encoding, image_plans, |j, pos| {
        (j, 1 + pos)
    })?;
    let text = masked_token_prediction(p, "head.mmm_text", &fused.encoding, text_plans, |j, pos| {
        (j, 1 + m + pos)
    })?;
    Ok((image, text))
}

/// Two-way match classifier on `[CLS_M]`; label 1 means the pair matches.
pub fn itm_loss<'g>(p: &Bound<'g>, fused: &MultimodalEncoding<'g>, labels: &[usize]) -> Result<Var<'g>> {
    if labels.len() != fused.encoding.batch {
        return Err(Error::Usage("one match label per fused pair required".into()));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Usage("ITM batch needs both matched and mismatched pairs".into()));
    }
    let logits = linear(p, "head.itm", fused.cls()?)?;
    Ok(logits.cross_entropy(labels)?)
}

/// For every sample, a caption donor from the batch whose identity differs.
/// A derangement is tried first; if none is found, donors are drawn independently.
pub fn itm_negatives(identities: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = identities.len();
    if n < 2 {
        return Err(Error::Usage("ITM negatives need at least two samples".into()));
    }
    for i in 0..n {
        if identities.iter().all(|&id| id == identities[i]) {
            return Err(Error::Usage(format!(
                "ITM negatives impossible: all {n} samples share identity {}",
                identities[i]
            )));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..64 {
        perm.shuffle(rng);
        if (0..n).all(|i| identities[perm[i]] != identities[i]) {
            return Ok(perm);
        }
    }
    Ok((0..n)
        .map(|i| {
            let donors: Vec<usize> = (0..n).filter(|&j| identities[j] != identities[i]).collect();
            *donors.choose(rng).expect("donor exists")
        })
        .collect())
}

/// Relative weights of the pretraining terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mim: f64,
    pub mlm: f64,
    pub mmm_image: f64,
    pub mmm_text: f64,
    pub itm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mim: 1.0,
            mlm: 1.0,
            mmm_image: 1.0,
            mmm_text: 1.0,
            itm: 1.0,
        }
    }
}

pub const LOSS_NAMES: [&str; 7] = ["id", "triplet", "mim", "mlm", "mmm_image", "mmm_text", "itm"];

/// Scalar values of the components present in one step; absent terms stay
/// absent rather than being reported as zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn has(&self, name: &str) -> bool {
        self.components.contains_key(name)
    }

    pub fn present(&self) -> Vec<&str> {
        LOSS_NAMES.iter().copied().filter(|n| self.has(n)).collect()
    }

    pub fn csv_header() -> String {
        let mut h = String::from("step,lr");
        for n in LOSS_NAMES {
            let _ = write!(h, ",{n}");
        }
        h.push_str(",total");
        h
    }

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        let mut row = format!("{step},{lr:e}");
        for n in LOSS_NAMES {
            match self.get(n) {
                Some(v) => {
                    let _ = write!(row, ",{v:e}");
                }
                None => row.push(','),
            }
        }
        let _ = write!(row, ",{:e}", self.total);
        row
    }
}

/// Accumulates weighted loss terms into one graph scalar and a report.
pub struct LossAccumulator<'g> {
    total: Option<Var<'g>>,
    report: LossReport,
}

impl<'g> Default for LossAccumulator<'g> {
    fn default() -> Self {
        Self {
            total: None,
            report: LossReport::default(),
        }
    }
}

impl<'g> LossAccumulator<'g> {
    pub fn add(&mut self, name: &str, term: Var<'g>, weight: f64, count: usize) -> Result<()> {
        self.report.components.insert(name.to_string(), term.item());
        self.report.counts.insert(name.to_string(), count);
        let weighted = if weight == 1.0 { term } else { term.scale(weight)? };
        self.total = Some(match self.total {
            Some(t) => t.add(weighted)?,
            None => weighted,
        });
        Ok(())
    }

    pub fn add_optional(&mut self, name: &str, term: Option<(Var<'g>, usize)>, weight: f64) -> Result<()> {
        match term {
            Some((v, count)) => self.add(name, v, weight, count),
            None => Ok(()),
        }
    }

    pub fn finish(mut self) -> Result<(Var<'g>, LossReport)> {
        let total = self
            .total
            .ok_or_else(|| Error::Usage("step produced no loss terms".into()))?;
        self.report.total = total.item();
        Ok((total, self.report))
    }
}
