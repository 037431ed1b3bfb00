//! PNG patches and masks, and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use stainseg_core::datamodel::{DatasetSplit, Domain, Example, ImagePatch, LabelMask};

use crate::error::{CliError, CliResult};

pub const DATASET_FORMAT: &str = "stainseg-dataset";
pub const FORMAT_VERSION: u32 = 1;

pub fn read_patch(path: &Path, id: &str, domain: Domain) -> CliResult<ImagePatch> {
    let img = image::open(path).map_err(|source| CliError::Image { path: path.into(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Ok(ImagePatch::new(id, domain, h as usize, w as usize, pixels)?)
}

pub fn write_patch(path: &Path, patch: &ImagePatch) -> CliResult<()> {
    let raw = patch.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(patch.width as u32, patch.height as u32, raw).expect("pixel count matches dimensions");
    img.save(path).map_err(|source| CliError::Image { path: path.into(), source })
}

/// Masks are single-channel 8-bit images holding the labels directly.
pub fn read_mask(path: &Path, domain: Domain) -> CliResult<LabelMask> {
    let img = image::open(path).map_err(|source| CliError::Image { path: path.into(), source })?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(CliError::format(path, "mask must be an 8-bit single-channel image"));
    };
    let (w, h) = gray.dimensions();
    Ok(LabelMask::new(domain, h as usize, w as usize, gray.into_raw())?)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> CliResult<()> {
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.labels.clone())
        .expect("label count matches dimensions");
    img.save(path).map_err(|source| CliError::Image { path: path.into(), source })
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    toml::from_str(&text).map_err(|e| CliError::format(path, e.to_string().lines().next().unwrap_or("invalid TOML")))
}

/// `*.png` files of a directory sorted by name, or the single file given.
pub fn png_inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(CliError::io(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    TrainA,
    TrainB,
    Test,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub domain: Domain,
    pub split: SplitName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn splits(data: &DatasetSplit) -> [(SplitName, &[Example]); 4] {
    [
        (SplitName::TrainA, &data.train_a),
        (SplitName::TrainB, &data.train_b),
        (SplitName::Test, &data.test),
        (SplitName::Validation, &data.validation),
    ]
}

/// Write `images/<id>.png`, `masks/<id>.png` and the manifest.
pub fn write_dataset(dir: &Path, data: &DatasetSplit) -> CliResult<DatasetManifest> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut entries = Vec::new();
    for (split, examples) in splits(data) {
        for (patch, mask) in examples {
            let image = format!("images/{}.png", patch.id);
            let mask_path = format!("masks/{}.png", patch.id);
            write_patch(&dir.join(&image), patch)?;
            write_mask(&dir.join(&mask_path), mask)?;
            entries.push(ManifestEntry { id: patch.id.clone(), image, mask: mask_path, domain: patch.domain, split });
        }
    }
    let manifest = DatasetManifest { format: DATASET_FORMAT.into(), version: FORMAT_VERSION, entries };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> CliResult<DatasetSplit> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.format != DATASET_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(CliError::format(
            &path,
            format!("unsupported dataset format {} v{}", manifest.format, manifest.version),
        ));
    }
    let mut data = DatasetSplit::default();
    for e in &manifest.entries {
        let example = (read_patch(&dir.join(&e.image), &e.id, e.domain)?, read_mask(&dir.join(&e.mask), e.domain)?);
        match e.split {
            SplitName::TrainA => data.train_a.push(example),
            SplitName::TrainB => data.train_b.push(example),
            SplitName::Test => data.test.push(example),
            SplitName::Validation => data.validation.push(example),
        }
    }
    data.validate()?;
    Ok(data)
}
