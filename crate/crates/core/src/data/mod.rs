//! Procedural paired person images and captions, PK batch sampling, and the
//! dataset directory format.

mod io;
mod pk;

pub use io::{read_dataset, read_ppm, write_dataset, write_ppm, Manifest, ManifestEntry};
pub use pk::{pk_batches, PkBatch, PkSampler};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::{Error, Result};

/// Named garment colors; the names appear verbatim in captions.
pub const GARMENT_COLORS: [(&str, [f64; 3]); 10] = [
    ("red", [0.85, 0.15, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("green", [0.15, 0.65, 0.20]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.92, 0.92, 0.92]),
    ("gray", [0.50, 0.50, 0.50]),
    ("orange", [0.95, 0.55, 0.10]),
    ("purple", [0.55, 0.20, 0.70]),
    ("brown", [0.50, 0.30, 0.15]),
];

pub const BACKGROUND_COLORS: [[f64; 3]; 4] = [
    [0.35, 0.40, 0.35],
    [0.45, 0.42, 0.38],
    [0.30, 0.35, 0.45],
    [0.55, 0.55, 0.50],
];

/// Build name and bbox width as a fraction of bbox height.
pub const BUILDS: [(&str, f64); 3] = [("slim", 0.38), ("average", 0.48), ("broad", 0.58)];

const SKIN: [f64; 3] = [0.87, 0.70, 0.58];
const NOISE_AMPLITUDE: f64 = 0.05;
const COLOR_JITTER: f64 = 0.03;
pub const MIN_BBOX_FRACTION: f64 = 0.2;
pub const MAX_BBOX_FRACTION: f64 = 0.8;

/// H×W×3 image, row-major with interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Usage(format!(
                "image {height}×{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Pedestrian region in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.top + self.height <= height
            && self.left + self.width <= width
    }

    /// Overlap area with the rectangle `[top, top+h) × [left, left+w)`.
    pub fn overlap(&self, top: usize, left: usize, h: usize, w: usize) -> usize {
        let y0 = self.top.max(top);
        let y1 = (self.top + self.height).min(top + h);
        let x0 = self.left.max(left);
        let x1 = (self.left + self.width).min(left + w);
        y1.saturating_sub(y0) * x1.saturating_sub(x0)
    }
}

/// Fixed per-identity appearance; every field indexes one of the palettes above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub shirt: usize,
    pub pants: usize,
    pub background: usize,
    pub build: usize,
}

impl AttributeRecord {
    pub fn caption(&self) -> String {
        format!(
            "a {} person wearing a {} shirt and {} pants",
            BUILDS[self.build].0, GARMENT_COLORS[self.shirt].0, GARMENT_COLORS[self.pants].0
        )
    }

    /// Every distinct caption the generator can produce.
    pub fn all_captions() -> Vec<String> {
        let mut out: Vec<String> = Self::combinations().iter().map(Self::caption).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn combinations() -> Vec<AttributeRecord> {
        let mut all = Vec::new();
        for shirt in 0..GARMENT_COLORS.len() {
            for pants in 0..GARMENT_COLORS.len() {
                for build in 0..BUILDS.len() {
                    for background in 0..BACKGROUND_COLORS.len() {
                        all.push(AttributeRecord {
                            shirt,
                            pants,
                            background,
                            build,
                        });
                    }
                }
            }
        }
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub caption: String,
    pub identity: usize,
    pub camera: usize,
    pub bbox: BBox,
    pub domain: usize,
    pub attributes: AttributeRecord,
}

/// Parameters of one generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub num_cameras: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domain: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            images_per_identity: 8,
            num_cameras: 4,
            seed: 0,
            height: 64,
            width: 32,
            domain: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("images_per_identity", self.images_per_identity),
            ("num_cameras", self.num_cameras),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Usage(format!("{name} must be at least 1")));
            }
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::Config(format!(
                "image size {}×{} is too small",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Appearance of each identity: distinct records while the combination space lasts.
    pub fn attribute_records(&self) -> Vec<AttributeRecord> {
        let mut combos = AttributeRecord::combinations();
        combos.shuffle(&mut stream(self.seed, &[0xa77]));
        (0..self.num_identities)
            .map(|i| combos[i % combos.len()])
            .collect()
    }

    pub fn generate(&self) -> Result<Vec<Sample>> {
        self.validate()?;
        let records = self.attribute_records();
        let mut samples = Vec::with_capacity(self.num_identities * self.images_per_identity);
        for (identity, record) in records.iter().enumerate() {
            let offset = stream(self.seed, &[0xca3, identity as u64]).gen_range(0..self.num_cameras);
            for index in 0..self.images_per_identity {
                let camera = (offset + index) % self.num_cameras;
                samples.push(self.render(identity, index, camera, *record));
            }
        }
        Ok(samples)
    }

    fn render(&self, identity: usize, index: usize, camera: usize, record: AttributeRecord) -> Sample {
        let mut rng = stream(self.seed, &[identity as u64, index as u64]);
        let (h, w) = (self.height, self.width);
        let bbox = sample_bbox(&mut rng, h, w, BUILDS[record.build].1);

        let gain = if self.num_cameras > 1 {
            0.9 + 0.2 * camera as f64 / (self.num_cameras - 1) as f64
        } else {
            1.0
        };
        let mut jitter = |rgb: [f64; 3]| -> [f64; 3] {
            rgb.map(|c| c * gain + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER))
        };
        let background = jitter(BACKGROUND_COLORS[record.background]);
        let shirt = jitter(GARMENT_COLORS[record.shirt].1);
        let pants = jitter(GARMENT_COLORS[record.pants].1);
        let skin = jitter(SKIN);

        let mut image = Image::filled(h, w, background);
        let head_end = bbox.top + (bbox.height as f64 * 0.18).round() as usize;
        let torso_end = bbox.top + (bbox.height as f64 * 0.55).round() as usize;
        let head_margin = (bbox.width as f64 * 0.3).round() as usize;
        for y in bbox.top..bbox.top + bbox.height {
            for x in bbox.left..bbox.left + bbox.width {
                let rgb = if y < head_end {
                    let inner = x >= bbox.left + head_margin
                        && x < bbox.left + bbox.width - head_margin;
                    if !inner {
                        continue;
                    }
                    skin
                } else if y < torso_end {
                    shirt
                } else {
                    pants
                };
                image.set_pixel(y, x, rgb);
            }
        }
        for v in image.data.iter_mut() {
            let noisy = *v + rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
            *v = quantize(noisy);
        }

        Sample {
            image,
            caption: record.caption(),
            identity,
            camera,
            bbox,
            domain: self.domain,
            attributes: record,
        }
    }
}

/// Clamps to [0, 1] and snaps to the 8-bit grid so PPM export is lossless.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample_bbox(rng: &mut impl Rng, h: usize, w: usize, aspect: f64) -> BBox {
    let total = (h * w) as f64;
    for _ in 0..256 {
        let bh = ((h as f64) * rng.gen_range(0.55..0.95)).round() as usize;
        let bw = ((bh as f64 * aspect).round() as usize).clamp(1, w);
        let frac = (bh * bw) as f64 / total;
        if bh == 0 || bh > h || !(MIN_BBOX_FRACTION..=MAX_BBOX_FRACTION).contains(&frac) {
            continue;
        }
        let top = rng.gen_range(0..=h - bh);
        let left = rng.gen_range(0..=w - bw);
        return BBox {
            top,
            left,
            height: bh,
            width: bw,
        };
    }
    // half the area, centered
    let bh = (h * 3) / 4;
    let bw = ((total * 0.5) / bh as f64).round() as usize;
    BBox {
        top: (h - bh) / 2,
        left: (w - bw.min(w)) / 2,
        height: bh,
        width: bw.min(w),
    }
}

/// `generate_dataset` with the default 64×32 image size and domain 0.
pub fn generate_dataset(
    num_identities: usize,
    images_per_identity: usize,
    num_cameras: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    SynthConfig {
        num_identities,
        images_per_identity,
        num_cameras,
        seed,
        ..SynthConfig::default()
    }
    .generate()
}

/// Sample indices of a retrieval protocol split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSplit {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Identities below `num_train_identities` train; the remaining identities are
/// held out, with the first image of each (identity, camera) pair as a query
/// and every other held-out image in the gallery.
pub fn split_for_retrieval(samples: &[Sample], num_train_identities: usize) -> RetrievalSplit {
    let mut split = RetrievalSplit {
        train: vec![],
        query: vec![],
        gallery: vec![],
    };
    let mut seen = std::collections::BTreeSet::new();
    for (i, s) in samples.iter().enumerate() {
        if s.identity < num_train_identities {
            split.train.push(i);
        } else if seen.insert((s.identity, s.camera)) {
            split.query.push(i);
        } else {
            split.gallery.push(i);
        }
    }
    split
}
