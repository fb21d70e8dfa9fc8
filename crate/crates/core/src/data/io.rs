use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributeRecord, BBox, Image, Sample};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub caption: String,
    pub identity: usize,
    pub camera: usize,
    /// `[top, left, height, width]`
    pub bbox: [usize; 4],
    pub domain: usize,
    pub attributes: AttributeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Binary P6, 8-bit. Values must already lie on the 8-bit grid to round-trip exactly.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    // Header: magic, width, height, maxval separated by whitespace, then one whitespace byte.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let body = bytes.get(pos..pos + width * height * 3).ok_or_else(|| bad("truncated pixel data"))?;
    Image::new(height, width, body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes `images/NNNNNN.ppm` files plus `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("cannot export an empty dataset".into()))?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("images/{i:06}.ppm");
        write_ppm(&dir.join(&file), &s.image)?;
        entries.push(ManifestEntry {
            file,
            caption: s.caption.clone(),
            identity: s.identity,
            camera: s.camera,
            bbox: [s.bbox.top, s.bbox.left, s.bbox.height, s.bbox.width],
            domain: s.domain,
            attributes: s.attributes,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        height: first.image.height,
        width: first.image.width,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    manifest
        .samples
        .into_iter()
        .map(|e| {
            let image = read_ppm(&dir.join(&e.file))?;
            if image.height != manifest.height || image.width != manifest.width {
                return Err(Error::Data(format!("{} has unexpected size", e.file)));
            }
            let [top, left, height, width] = e.bbox;
            let bbox = BBox {
                top,
                left,
                height,
                width,
            };
            if !bbox.fits(image.height, image.width) {
                return Err(Error::Data(format!("{}: bbox outside image", e.file)));
            }
            Ok(Sample {
                image,
                caption: e.caption,
                identity: e.identity,
                camera: e.camera,
                bbox,
                domain: e.domain,
                attributes: e.attributes,
            })
        })
        .collect()
}
