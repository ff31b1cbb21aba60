//! On-disk formats: PNG images and masks, and the heatmap container.
//!
//! # Heatmap container
//!
//! All integers are little-endian `u32`, values are little-endian IEEE-754
//! `f32`, row-major.
//!
//! ```text
//! magic      b"GAHM"
//! version    u32 (= 1)
//! count      u32
//! count x {
//!     id_len     u32
//!     id         id_len bytes of UTF-8
//!     height     u32
//!     width      u32
//!     source_h   u32
//!     source_w   u32
//!     values     height * width f32
//! }
//! ```
//!
//! Entries are written sorted by sample id.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{load_manifest, BinaryMask, DatasetManifest, Heatmap, Image, Split};

pub const HEATMAP_MAGIC: &[u8; 4] = b"GAHM";
pub const HEATMAP_VERSION: u32 = 1;

/// Heatmaps keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeatmapStore {
    entries: BTreeMap<String, Heatmap>,
}

impl HeatmapStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, heatmap: Heatmap) {
        self.entries.insert(id.into(), heatmap);
    }

    pub fn get(&self, id: &str) -> Option<&Heatmap> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Heatmap)> {
        self.entries.iter()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(HEATMAP_MAGIC)?;
        w.write_all(&HEATMAP_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (id, hm) in &self.entries {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            let (h, wd) = hm.shape();
            let (sh, sw) = hm.source_size();
            for v in [h, wd, sh, sw] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
            for &v in hm.values().iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != HEATMAP_MAGIC {
            return Err(Error::Container("bad heatmap magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != HEATMAP_VERSION {
            return Err(Error::Container(format!(
                "unsupported heatmap container version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = HeatmapStore::new();
        for _ in 0..count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            read_exact(&mut r, &mut id)?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::Container("sample id is not UTF-8".into()))?;
            let h = read_u32(&mut r)? as usize;
            let w = read_u32(&mut r)? as usize;
            let sh = read_u32(&mut r)? as usize;
            let sw = read_u32(&mut r)? as usize;
            let mut values = Vec::with_capacity(h * w);
            let mut buf = [0u8; 4];
            for _ in 0..h * w {
                read_exact(&mut r, &mut buf)?;
                values.push(f64::from(f32::from_le_bytes(buf)));
            }
            let values = Array2::from_shape_vec((h, w), values)
                .map_err(|e| Error::Container(e.to_string()))?;
            store.insert(id, Heatmap::new(values, (sh, sw))?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

impl FromIterator<(String, Heatmap)> for HeatmapStore {
    fn from_iter<I: IntoIterator<Item = (String, Heatmap)>>(iter: I) -> Self {
        HeatmapStore {
            entries: iter.into_iter().collect(),
        }
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Container(format!("truncated container: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB (3 channels) or grayscale (1 channel) 8-bit PNG.
pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w, c) = image.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::invalid(format!("cannot write {c}-channel image as PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    let data: Vec<u8> = image.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err(path, "indexed PNG not expanded")),
    };
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, channels, buf))
}

/// Reads a PNG as an image with values in `[0, 1]`. Alpha channels are dropped.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let (h, w, c, buf) = decode_png(path)?;
    let out_c = match c {
        1 | 2 => 1,
        _ => 3,
    };
    let mut img = Array3::zeros((h, w, out_c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..out_c {
                img[[y, x, ch]] = f64::from(buf[(y * w + x) * c + ch]) / 255.0;
            }
        }
    }
    Ok(img)
}

/// Writes a mask as a 1-bit grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    let stride = w.div_ceil(8);
    let mut data = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                data[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Reads a mask PNG of any bit depth; a pixel is set when its first channel
/// is at least half intensity.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    if info.color_type == png::ColorType::Grayscale && info.bit_depth == png::BitDepth::One {
        let stride = info.line_size;
        return Ok(BinaryMask::from_fn((h, w), |(y, x)| {
            buf[y * stride + x / 8] & (0x80 >> (x % 8)) != 0
        }));
    }
    drop(reader);
    let (h, w, c, buf) = decode_png(path)?;
    Ok(BinaryMask::from_fn((h, w), |(y, x)| buf[(y * w + x) * c] >= 128))
}

/// `<mask_root>/<feature_name>/<sample_id>.png`
pub fn mask_path(mask_root: &Path, feature_name: &str, sample_id: &str) -> PathBuf {
    mask_root.join(feature_name).join(format!("{sample_id}.png"))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A manifest together with its decoded images, in record order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if images.len() != manifest.records.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images for {} records",
                images.len(),
                manifest.records.len()
            )));
        }
        Ok(Dataset { manifest, images })
    }

    /// Loads the manifest and decodes every referenced PNG.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let images = manifest
            .records
            .iter()
            .map(|r| read_image_png(&manifest.image_path(r)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(manifest, images)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split_indices(split)
    }

    pub fn images_at(&self, indices: &[usize]) -> Vec<&Image> {
        indices.iter().map(|&i| &self.images[i]).collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.manifest.records[i].label).collect()
    }

    pub fn ids_at(&self, indices: &[usize]) -> Vec<&str> {
        indices.iter().map(|&i| self.manifest.records[i].id.as_str()).collect()
    }
}
