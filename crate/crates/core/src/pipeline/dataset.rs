//! Labelled image sets on disk.
//!
//! A dataset is a TOML manifest listing the class count, an RGB palette and
//! image/label path pairs (relative to the manifest). Images are 8-bit PNG
//! or PGM/PPM, grey or RGB; labels are 8-bit single-channel images whose
//! pixel value is the class index, with 255 marking ignored pixels.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar};
use crate::training::{Architecture, Prepared, IGNORE_LABEL};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// 1 or 3 channels with values in `[0, 1]`.
    pub image: FeatureMap<f64>,
    /// Row-major `height × width`.
    pub labels: Vec<u8>,
}

impl LabeledSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn prepare<T: Scalar>(&self, arch: &Architecture) -> Result<Prepared<T>> {
        Prepared::new(self.id.clone(), self.image.cast(), self.labels.clone(), arch)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
    /// RGB colour of each class.
    pub palette: Vec<[u8; 3]>,
    pub pairs: Vec<Pair>,
}

impl DatasetManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset { path: path.to_path_buf(), msg });
        if !(1..=255).contains(&self.classes) {
            return bad(format!("classes = {} outside 1..=255", self.classes));
        }
        if self.palette.len() != self.classes {
            return bad(format!(
                "palette has {} entries for {} classes",
                self.palette.len(),
                self.classes
            ));
        }
        let unique: HashSet<[u8; 3]> = self.palette.iter().copied().collect();
        if unique.len() != self.palette.len() {
            return bad("palette colours must be distinct".into());
        }
        if !self.names.is_empty() && self.names.len() != self.classes {
            return bad(format!(
                "{} class names for {} classes",
                self.names.len(),
                self.classes
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        m.validate(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            msg: "file not found".into(),
        });
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decode an image into `[0, 1]`; colour images give 3 channels, grey ones 1.
pub fn read_image(path: &Path) -> Result<FeatureMap<f64>> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        FeatureMap::new(h, w, 3, data)
    } else {
        let g = img.to_luma8();
        let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        FeatureMap::new(h, w, 1, data)
    }
}

/// Read a label map and check every value against `classes`.
pub fn read_labels(path: &Path, classes: usize) -> Result<(usize, usize, Vec<u8>)> {
    let img = open_image(path)?;
    let g = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                msg: format!("labels must be 8-bit single-channel, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (g.width() as usize, g.height() as usize);
    let labels = g.into_raw();
    if let Some(i) = labels
        .iter()
        .position(|&v| v != IGNORE_LABEL && v as usize >= classes)
    {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            msg: format!(
                "label {} at row {}, column {} is not below {classes} (or {IGNORE_LABEL})",
                labels[i],
                i / w,
                i % w
            ),
        });
    }
    Ok((h, w, labels))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a 1- or 3-channel map in `[0, 1]` as an 8-bit image; the format
/// follows the file extension.
pub fn write_image(path: &Path, image: &FeatureMap<f64>) -> Result<()> {
    let (h, w, c) = image.dims();
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let res = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).map(|i| i.save(path)),
        _ => {
            return Err(Error::Format(format!(
                "cannot write a {c}-channel image to {}",
                path.display()
            )))
        }
    };
    res.expect("buffer size matches dims")
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_gray(path: &Path, height: usize, width: usize, values: Vec<u8>) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, values).ok_or_else(|| {
            Error::Format(format!("{}: buffer does not match {height}x{width}", path.display()))
        })?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rgb(path: &Path, height: usize, width: usize, values: Vec<u8>) -> Result<()> {
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, values).ok_or_else(|| {
            Error::Format(format!("{}: buffer does not match {height}x{width}", path.display()))
        })?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load and validate every pair listed in a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<LabeledSample>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.pairs.len());
    let mut channels = None;
    for pair in &manifest.pairs {
        let ipath = base.join(&pair.image);
        let lpath = base.join(&pair.label);
        let image = read_image(&ipath)?;
        let (h, w, labels) = read_labels(&lpath, manifest.classes)?;
        if (h, w) != (image.height(), image.width()) {
            return Err(Error::Dataset {
                path: lpath,
                msg: format!(
                    "label map is {h}x{w} but image {} is {}x{}",
                    ipath.display(),
                    image.height(),
                    image.width()
                ),
            });
        }
        match channels {
            None => channels = Some(image.channels()),
            Some(c) if c != image.channels() => {
                return Err(Error::Dataset {
                    path: ipath,
                    msg: format!("has {} channels, earlier images have {c}", image.channels()),
                })
            }
            _ => {}
        }
        let id = pair
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}", samples.len()));
        samples.push(LabeledSample { id, image, labels });
    }
    Ok((manifest, samples))
}

/// Write `samples` as `images/<id>.png` and `labels/<id>.png` under `dir`
/// plus `manifest.toml`; returns the manifest path.
pub fn save_dataset(
    dir: &Path,
    classes: usize,
    names: Vec<String>,
    palette: Vec<[u8; 3]>,
    samples: &[LabeledSample],
) -> Result<PathBuf> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let label = PathBuf::from("labels").join(format!("{}.png", s.id));
        write_image(&dir.join(&image), &s.image)?;
        write_gray(&dir.join(&label), s.height(), s.width(), s.labels.clone())?;
        pairs.push(Pair { image, label });
    }
    let manifest = DatasetManifest {
        classes,
        names,
        palette,
        pairs,
    };
    let path = dir.join("manifest.toml");
    manifest.validate(&path)?;
    manifest.save(&path)?;
    Ok(path)
}
