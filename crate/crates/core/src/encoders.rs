//! Image encoder, text encoder and the fusion encoder with `[CLS_M]`.
//!
//! All three are stacks of pre-norm transformer blocks. Encoders run over a
//! batch at once: hidden states are `[batch · seq, width]` with each sample's
//! sequence stored contiguously and its summary token in the first row.

use serde::{Deserialize, Serialize};

use crate::image::{ImageMaskPlan, PatchGrid};
use crate::numerics::{concat_rows, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::text::TokenSequence;
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Patch pixels are standardized with these before the patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            max_positions: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.max_positions == 0 {
            return Err(Error::Config(format!("{name} encoder: counts must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{name} encoder: width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Shapes of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    pub fusion: EncoderConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub text_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: EncoderConfig::default(),
            text: EncoderConfig::default(),
            fusion: EncoderConfig::default(),
            image_height: 64,
            image_width: 32,
            patch_size: 16,
            text_len: 16,
            vocab_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn fused_len(&self) -> usize {
        1 + self.num_patches() + self.text_len
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate("image")?;
        self.text.validate("text")?;
        self.fusion.validate("fusion")?;
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "image {}×{} (H×W) is not divisible into {p}×{p} patches",
                self.image_height, self.image_width
            )));
        }
        if 1 + self.num_patches() > self.image.max_positions {
            return Err(Error::Config(format!(
                "image sequence of {} exceeds {} positions",
                1 + self.num_patches(),
                self.image.max_positions
            )));
        }
        if self.text_len < 2 || self.text_len > self.text.max_positions {
            return Err(Error::Config(format!(
                "text length {} outside [2, {}]",
                self.text_len, self.text.max_positions
            )));
        }
        if self.fused_len() > self.fusion.max_positions {
            return Err(Error::Config(format!(
                "fused sequence of {} exceeds {} positions",
                self.fused_len(),
                self.fusion.max_positions
            )));
        }
        if self.vocab_size <= crate::text::RESERVED.len() {
            return Err(Error::Config("vocabulary has no words".into()));
        }
        Ok(())
    }
}

fn init_linear(store: &mut ParamStore, seed: u64, name: &str, input: usize, output: usize) {
    store.init_normal(seed, &format!("{name}.w"), &[input, output], INIT_STD);
    store.init_const(&format!("{name}.b"), &[output], 0.0);
}

fn init_blocks(store: &mut ParamStore, seed: u64, prefix: &str, cfg: &EncoderConfig) {
    let d = cfg.width;
    for i in 0..cfg.depth {
        let b = format!("{prefix}.blocks.{i}");
        for ln in ["ln1", "ln2"] {
            store.init_const(&format!("{b}.{ln}.g"), &[d], 1.0);
            store.init_const(&format!("{b}.{ln}.b"), &[d], 0.0);
        }
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, seed, &format!("{b}.attn.{proj}"), d, d);
        }
        init_linear(store, seed, &format!("{b}.mlp.fc1"), d, d * cfg.mlp_ratio);
        init_linear(store, seed, &format!("{b}.mlp.fc2"), d * cfg.mlp_ratio, d);
    }
}

/// Parameters of the three encoders plus the pretraining heads.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let (di, dt, dm) = (cfg.image.width, cfg.text.width, cfg.fusion.width);

    init_linear(&mut s, seed, "image.patch", cfg.patch_dim(), di);
    s.init_normal(seed, "image.cls", &[1, di], INIT_STD);
    s.init_normal(seed, "image.mask", &[1, di], INIT_STD);
    s.init_normal(seed, "image.pos", &[cfg.image.max_positions, di], INIT_STD);
    init_blocks(&mut s, seed, "image", &cfg.image);

    s.init_normal(seed, "text.tok", &[cfg.vocab_size, dt], INIT_STD);
    s.init_normal(seed, "text.pos", &[cfg.text.max_positions, dt], INIT_STD);
    init_blocks(&mut s, seed, "text", &cfg.text);

    init_linear(&mut s, seed, "fusion.proj_image", di, dm);
    init_linear(&mut s, seed, "fusion.proj_text", dt, dm);
    s.init_normal(seed, "fusion.cls", &[1, dm], INIT_STD);
    init_blocks(&mut s, seed, "fusion", &cfg.fusion);

    init_linear(&mut s, seed, "head.mim", di, cfg.patch_dim());
    init_linear(&mut s, seed, "head.mlm", dt, cfg.vocab_size);
    init_linear(&mut s, seed, "head.mmm_image", dm, cfg.patch_dim());
    init_linear(&mut s, seed, "head.mmm_text", dm, cfg.vocab_size);
    init_linear(&mut s, seed, "head.itm", dm, 2);
    Ok(s)
}

/// Adds (or replaces) the identity classifier on `[CLS_M]`.
pub fn init_id_head(store: &mut ParamStore, cfg: &ModelConfig, num_classes: usize, seed: u64) {
    init_linear(store, seed, "head.id", cfg.fusion.width, num_classes);
}

pub fn linear<'g>(p: &Bound<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    Ok(x.linear(p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)?)
}

fn block<'g>(
    p: &Bound<'g>,
    name: &str,
    x: Var<'g>,
    cfg: &EncoderConfig,
    seq: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var<'g>> {
    let ln = |x: Var<'g>, which: &str| -> Result<Var<'g>> {
        let g = p.get(&format!("{name}.{which}.g"))?;
        let b = p.get(&format!("{name}.{which}.b"))?;
        Ok(x.layer_norm(g, b, LN_EPS)?)
    };
    let h = ln(x, "ln1")?;
    let q = linear(p, &format!("{name}.attn.q"), h)?;
    let k = linear(p, &format!("{name}.attn.k"), h)?;
    let v = linear(p, &format!("{name}.attn.v"), h)?;
    let a = q.attention(k, v, cfg.heads, seq, key_mask)?;
    let x = x.add(linear(p, &format!("{name}.attn.o"), a)?)?;
    let h = ln(x, "ln2")?;
    let h = linear(p, &format!("{name}.mlp.fc1"), h)?.gelu()?;
    Ok(x.add(linear(p, &format!("{name}.mlp.fc2"), h)?)?)
}

/// Runs the block stack, returning the output of every block (input first).
fn run_stack<'g>(
    p: &Bound<'g>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var<'g>,
    seq: usize,
    key_mask: Option<&[bool]>,
) -> Result<Vec<Var<'g>>> {
    let mut layers = vec![x];
    for i in 0..cfg.depth {
        let prev = *layers.last().expect("non-empty");
        layers.push(block(p, &format!("{prefix}.blocks.{i}"), prev, cfg, seq, key_mask)?);
    }
    Ok(layers)
}

/// Row order that interleaves one summary row (row 0 of the source) in front
/// of each consecutive group of `group` rows starting at source row 1.
fn prepend_summary_order(batch: usize, group: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (group + 1));
    for b in 0..batch {
        idx.push(0);
        idx.extend((0..group).map(|j| 1 + b * group + j));
    }
    idx
}

fn tiled_positions(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..seq).collect()
}

/// Hidden states of a batch of sequences with a summary token at position 0.
#[derive(Debug, Clone)]
pub struct Encoding<'g> {
    /// `[batch · seq, width]`, the output of the last block.
    pub hidden: Var<'g>,
    /// Output of each block, `layers[0]` being the embedded input.
    pub layers: Vec<Var<'g>>,
    pub batch: usize,
    pub seq: usize,
}

impl<'g> Encoding<'g> {
    /// Summary token of every sequence, `[batch, width]`.
    pub fn cls(&self) -> Result<Var<'g>> {
        let idx: Vec<usize> = (0..self.batch).map(|b| b * self.seq).collect();
        Ok(self.hidden.gather_rows(&idx)?)
    }

    /// Rows `(sample, position)` of the last block, in the given order.
    pub fn rows(&self, at: &[(usize, usize)]) -> Result<Var<'g>> {
        let idx: Vec<usize> = at.iter().map(|&(b, i)| b * self.seq + i).collect();
        Ok(self.hidden.gather_rows(&idx)?)
    }
}

/// `h_I` occupies positions `1..=M` of each sequence; `h_CLS_I` is position 0.
pub type ImageEncoding<'g> = Encoding<'g>;
/// `h_T` is the whole sequence, whose position 0 is `h_CLS_T`.
pub type TextEncoding<'g> = Encoding<'g>;

pub fn encode_images<'g>(
    p: &Bound<'g>,
    cfg: &ModelConfig,
    grids: &[&PatchGrid],
    plans: &[Option<&ImageMaskPlan>],
) -> Result<ImageEncoding<'g>> {
    let batch = grids.len();
    if batch == 0 || plans.len() != batch {
        return Err(Error::Usage("image batch and plan list must be nonempty and aligned".into()));
    }
    let m = grids[0].len();
    if 1 + m > cfg.image.max_positions {
        return Err(Error::Config(format!(
            "image sequence of {} exceeds {} positions",
            1 + m,
            cfg.image.max_positions
        )));
    }
    let mut pixels = Vec::with_capacity(batch * m * cfg.patch_dim());
    for g in grids {
        if g.len() != m || g.patch_dim() != cfg.patch_dim() {
            return Err(Error::Usage("patch grids in a batch must share geometry".into()));
        }
        pixels.extend(g.patches.iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
    }
    let graph = p.graph();
    let x = graph.constant(Tensor::new(&[batch * m, cfg.patch_dim()], pixels)?)?;
    let mut tokens = linear(p, "image.patch", x)?;

    for plan in plans.iter().flatten() {
        if let Some(&bad) = plan.positions.iter().find(|&&i| i >= m) {
            return Err(Error::Usage(format!("mask position {bad} outside {m} patches")));
        }
    }
    let masked: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, plan)| {
            plan.map(|pl| pl.positions.iter().map(move |&i| b * m + i).collect::<Vec<_>>())
                .unwrap_or_default()
        })
        .collect();
    if !masked.is_empty() {
        tokens = tokens.replace_rows(&masked, p.get("image.mask")?)?;
    }

    let seq = 1 + m;
    let with_cls = concat_rows(&[p.get("image.cls")?, tokens])?
        .gather_rows(&prepend_summary_order(batch, m))?;
    let pos = p.get("image.pos")?.gather_rows(&tiled_positions(batch, seq))?;
    let input = with_cls.add(pos)?;
    let layers = run_stack(p, "image", &cfg.image, input, seq, None)?;
    Ok(Encoding {
        hidden: *layers.last().expect("non-empty"),
        layers,
        batch,
        seq,
    })
}

pub fn encode_texts<'g>(
    p: &Bound<'g>,
    cfg: &ModelConfig,
    seqs: &[&TokenSequence],
) -> Result<TextEncoding<'g>> {
    let batch = seqs.len();
    if batch == 0 {
        return Err(Error::Usage("empty text batch".into()));
    }
    let len = seqs[0].len();
    if len > cfg.text.max_positions {
        return Err(Error::Config(format!(
            "text sequence of {len} exceeds {} positions",
            cfg.text.max_positions
        )));
    }
    if seqs.iter().any(|s| s.len() != len) {
        return Err(Error::Usage("token sequences in a batch must share a length".into()));
    }
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let mask: Vec<bool> = seqs.iter().flat_map(|s| s.attention.iter().copied()).collect();
    let tok = p.get("text.tok")?.embedding(&ids)?;
    let pos = p.get("text.pos")?.gather_rows(&tiled_positions(batch, len))?;
    let layers = run_stack(p, "text", &cfg.text, tok.add(pos)?, len, Some(&mask))?;
    Ok(Encoding {
        hidden: *layers.last().expect("non-empty"),
        layers,
        batch,
        seq: len,
    })
}

/// Where a fused row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusedSource {
    Cls,
    /// Patch index into `h_I`.
    Image(usize),
    /// Token position into `h_T`.
    Text(usize),
}

#[derive(Debug, Clone)]
pub struct MultimodalEncoding<'g> {
    pub encoding: Encoding<'g>,
    pub num_patches: usize,
    pub text_len: usize,
    /// `(image sample, text sample)` behind each fused sequence.
    pub pairs: Vec<(usize, usize)>,
}

impl<'g> MultimodalEncoding<'g> {
    pub fn image_span(&self) -> std::ops::Range<usize> {
        1..1 + self.num_patches
    }

    pub fn text_span(&self) -> std::ops::Range<usize> {
        1 + self.num_patches..1 + self.num_patches + self.text_len
    }

    pub fn source(&self, position: usize) -> FusedSource {
        match position {
            0 => FusedSource::Cls,
            p if p <= self.num_patches => FusedSource::Image(p - 1),
            p => FusedSource::Text(p - 1 - self.num_patches),
        }
    }

    pub fn cls(&self) -> Result<Var<'g>> {
        self.encoding.cls()
    }
}

/// Projects each modality to the fusion width, forms `[CLS_M; h_I; h_T]` for
/// every `(image, text)` pair, and runs the fusion stack with text padding
/// excluded from attention.
pub fn fuse<'g>(
    p: &Bound<'g>,
    cfg: &ModelConfig,
    img: &ImageEncoding<'g>,
    txt: &TextEncoding<'g>,
    text_masks: &[&[bool]],
    pairs: &[(usize, usize)],
) -> Result<MultimodalEncoding<'g>> {
    let (m, l, n) = (img.seq - 1, txt.seq, pairs.len());
    if n == 0 {
        return Err(Error::Usage("fusion needs at least one pair".into()));
    }
    if text_masks.len() != txt.batch {
        return Err(Error::Usage("one attention mask per text sequence required".into()));
    }
    if pairs.iter().any(|&(i, t)| i >= img.batch || t >= txt.batch) {
        return Err(Error::Usage("pair index outside the encoded batches".into()));
    }
    let seq = 1 + m + l;
    if seq > cfg.fusion.max_positions {
        return Err(Error::Config(format!(
            "fused sequence of {seq} exceeds {} positions",
            cfg.fusion.max_positions
        )));
    }
    let image_rows: Vec<(usize, usize)> =
        pairs.iter().flat_map(|&(i, _)| (1..=m).map(move |j| (i, j))).collect();
    let text_rows: Vec<(usize, usize)> =
        pairs.iter().flat_map(|&(_, t)| (0..l).map(move |j| (t, j))).collect();
    let pi = linear(p, "fusion.proj_image", img.rows(&image_rows)?)?;
    let pt = linear(p, "fusion.proj_text", txt.rows(&text_rows)?)?;
    let all = concat_rows(&[p.get("fusion.cls")?, pi, pt])?;
    let mut order = Vec::with_capacity(n * seq);
    let mut mask = Vec::with_capacity(n * seq);
    for (j, &(_, t)) in pairs.iter().enumerate() {
        order.push(0);
        order.extend((0..m).map(|r| 1 + j * m + r));
        order.extend((0..l).map(|r| 1 + n * m + j * l + r));
        mask.extend(std::iter::repeat(true).take(1 + m));
        mask.extend_from_slice(text_masks[t]);
    }
    let input = all.gather_rows(&order)?;
    let layers = run_stack(p, "fusion", &cfg.fusion, input, seq, Some(&mask))?;
    Ok(MultimodalEncoding {
        encoding: Encoding {
            hidden: *layers.last().expect("non-empty"),
            layers,
            batch: n,
            seq,
        },
        num_patches: m,
        text_len: l,
        pairs: pairs.to_vec(),
    })
}
