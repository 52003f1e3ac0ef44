//! Image ingestion, normalization and one-class splits.

mod idx;
mod split;

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use idx::{encode_idx, parse_idx, read_idx, IdxArray};
pub use split::{make_one_class_split, LabeledSample, OneClassSplit, Protocol, SplitFile};

/// Maps an 8-bit intensity onto `[-1, 1]`.
#[inline]
pub fn normalize(p: u8) -> f32 {
    2.0 * p as f32 / 255.0 - 1.0
}

/// Inverse of [`normalize`], clamping and rounding to the nearest level.
#[inline]
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// One normalized image with its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: u32,
    /// `C × H × W`, values in `[-1, 1]`.
    pub pixels: Array3<f32>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, label: u32, pixels: Array3<f32>) -> Result<Self> {
        let id = id.into();
        let c = pixels.shape()[0];
        if c != 1 && c != 3 {
            return Err(Error::Sample {
                id,
                reason: format!("channel count {c} not in {{1, 3}}"),
            });
        }
        if pixels.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Sample {
                id,
                reason: "pixel values outside [-1, 1]".into(),
            });
        }
        Ok(Self { id, label, pixels })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }

    /// Builds a sample from 8-bit interleaved pixels (`H × W × C`).
    pub fn from_u8(id: impl Into<String>, label: u32, h: usize, w: usize, c: usize, raw: &[u8]) -> Result<Self> {
        let id = id.into();
        if raw.len() != h * w * c {
            return Err(Error::Sample {
                id,
                reason: format!("expected {} bytes, got {}", h * w * c, raw.len()),
            });
        }
        let pixels = Array3::from_shape_fn((c, h, w), |(ch, y, x)| normalize(raw[(y * w + x) * c + ch]));
        Self::new(id, label, pixels)
    }

    /// Interleaved 8-bit view (`H × W × C`).
    pub fn to_u8(&self) -> Vec<u8> {
        let (c, h, w) = self.pixels.dim();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(denormalize(self.pixels[[ch, y, x]]));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetFormat {
    /// PNG files listed in a CSV manifest with columns `id,relpath,label`.
    ImageDir {
        csv: PathBuf,
        #[serde(default)]
        test_csv: Option<PathBuf>,
    },
    /// MNIST-style images/labels pair, optionally gzip-compressed.
    IdxPair {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub format: DatasetFormat,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_image_size() -> usize {
    32
}

fn default_channels() -> usize {
    1
}

impl DatasetManifest {
    /// Reads a TOML manifest; a relative `root` is resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if manifest.root.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.root = dir.join(&manifest.root);
            }
        }
        Ok(manifest)
    }

    /// Parses and validates manifest text without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let manifest: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// One row of a CSV image manifest.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct ManifestRow {
    pub id: String,
    pub relpath: String,
    pub label: u32,
}

/// Parses `id,relpath,label` CSV text. The header row is mandatory.
pub fn parse_manifest_csv(text: &str) -> std::result::Result<Vec<ManifestRow>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "relpath", "label"] {
        return Err(format!("expected header id,relpath,label, found {:?}", headers));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = rec.map_err(|e| format!("row {}: {e}", line + 2))?;
        if row.id.is_empty() {
            return Err(format!("row {}: empty id", line + 2));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the training pool described by the manifest, sorted by id.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<ImageSample>> {
    manifest.validate()?;
    match &manifest.format {
        DatasetFormat::ImageDir { csv, .. } => load_image_dir(manifest, csv),
        DatasetFormat::IdxPair { images, labels, .. } => load_idx_pair(manifest, images, labels, "train"),
    }
}

/// Loads the separate test pool, or an empty list when the manifest declares none.
pub fn load_test_set(manifest: &DatasetManifest) -> Result<Vec<ImageSample>> {
    manifest.validate()?;
    match &manifest.format {
        DatasetFormat::ImageDir { test_csv: Some(csv), .. } => load_image_dir(manifest, csv),
        DatasetFormat::IdxPair {
            test_images: Some(images),
            test_labels: Some(labels),
            ..
        } => load_idx_pair(manifest, images, labels, "test"),
        _ => Ok(Vec::new()),
    }
}

fn load_image_dir(manifest: &DatasetManifest, csv: &Path) -> Result<Vec<ImageSample>> {
    let csv_path = manifest.root.join(csv);
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::Ingest {
        path: csv_path.clone(),
        reason: e.to_string(),
    })?;
    let rows = parse_manifest_csv(&text).map_err(|reason| Error::Ingest {
        path: csv_path.clone(),
        reason,
    })?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let path = manifest.root.join(&row.relpath);
        if !path.exists() {
            return Err(Error::Ingest {
                path,
                reason: "file not found".into(),
            });
        }
        let img = image::open(&path).map_err(|e| Error::Sample {
            id: row.id.clone(),
            reason: format!("cannot decode {}: {e}", path.display()),
        })?;
        out.push(from_dynamic(row.id, row.label, img, manifest)?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Ingest {
            path: csv_path,
            reason: format!("duplicate id {}", w[0].id),
        });
    }
    Ok(out)
}

fn from_dynamic(id: String, label: u32, img: DynamicImage, m: &DatasetManifest) -> Result<ImageSample> {
    let s = m.image_size as u32;
    if m.channels == 1 {
        let mut g = img.to_luma8();
        if g.dimensions() != (s, s) {
            g = imageops::resize(&g, s, s, FilterType::Triangle);
        }
        ImageSample::from_u8(id, label, s as usize, s as usize, 1, g.as_raw())
    } else {
        let mut rgb = img.to_rgb8();
        if rgb.dimensions() != (s, s) {
            rgb = imageops::resize(&rgb, s, s, FilterType::Triangle);
        }
        ImageSample::from_u8(id, label, s as usize, s as usize, 3, rgb.as_raw())
    }
}

fn load_idx_pair(manifest: &DatasetManifest, images: &Path, labels: &Path, prefix: &str) -> Result<Vec<ImageSample>> {
    let img_path = manifest.root.join(images);
    let lbl_path = manifest.root.join(labels);
    let imgs = read_idx(&img_path)?;
    let lbls = read_idx(&lbl_path)?;
    if imgs.dims.len() != 3 {
        return Err(Error::Ingest {
            path: img_path,
            reason: format!("expected 3 dimensions, got {:?}", imgs.dims),
        });
    }
    if lbls.dims.len() != 1 || lbls.len() != imgs.len() {
        return Err(Error::Ingest {
            path: lbl_path,
            reason: format!("{} labels for {} images", lbls.len(), imgs.len()),
        });
    }
    let (h, w) = (imgs.dims[1] as u32, imgs.dims[2] as u32);
    let width = (imgs.len().max(1) - 1).to_string().len().max(5);
    (0..imgs.len())
        .map(|i| {
            let id = format!("{prefix}-{i:0width$}");
            let gray = GrayImage::from_raw(w, h, imgs.record(i).to_vec()).ok_or_else(|| Error::Sample {
                id: id.clone(),
                reason: "bad image buffer".into(),
            })?;
            let img = if manifest.channels == 3 {
                DynamicImage::ImageRgb8(DynamicImage::ImageLuma8(gray).to_rgb8())
            } else {
                DynamicImage::ImageLuma8(gray)
            };
            from_dynamic(id, lbls.data[i] as u32, img, manifest)
        })
        .collect()
}

/// Stacks equally shaped samples into an `(N, C, H, W)` batch.
pub fn stack<'a, F: Real>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Array4<F> {
    let samples: Vec<&ImageSample> = samples.into_iter().collect();
    let (c, h, w) = samples.first().map_or((0, 0, 0), |x| x.pixels.dim());
    let mut out = Array4::<F>::zeros((samples.len(), c, h, w));
    for (i, x) in samples.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).zip_mut_with(&x.pixels, |d, &v| *d = F::lit(v as f64));
    }
    out
}

/// Writes a sample as an 8-bit PNG.
pub fn save_png(sample: &ImageSample, path: &Path) -> Result<()> {
    let (h, w) = sample.size();
    let raw = sample.to_u8();
    let res = if sample.channels() == 1 {
        GrayImage::from_raw(w as u32, h as u32, raw).map(|g| g.save(path))
    } else {
        RgbImage::from_raw(w as u32, h as u32, raw).map(|g| g.save(path))
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
        None => Err(Error::Sample {
            id: sample.id.clone(),
            reason: "bad image buffer".into(),
        }),
    }
}

/// Decodes a single image file into a sample shaped like the manifest declares.
pub fn load_image(path: &Path, image_size: usize, channels: usize) -> Result<ImageSample> {
    if !path.exists() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        });
    }
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let m = DatasetManifest {
        root: PathBuf::new(),
        format: DatasetFormat::ImageDir {
            csv: PathBuf::new(),
            test_csv: None,
        },
        class_names: Vec::new(),
        image_size,
        channels,
    };
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    from_dynamic(id, 0, img, &m)
}
