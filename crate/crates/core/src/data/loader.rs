//! On-disk layout: `root/{A,B,label}/<name>.png` plus optional
//! `root/list/{train,val,test}.txt` with one sample name per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb};

use super::grid::{Mask, RgbImage};
use super::BitemporalPair;
use crate::error::{Error, Result};

pub const DIRS: [&str; 3] = ["A", "B", "label"];
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub root: PathBuf,
    /// Restricts loading to the names in `list/<split>.txt`.
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSummary {
    /// Sample name to file extension, common to the three directories.
    pub files: BTreeMap<String, String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl LayoutSummary {
    pub fn split_sizes(&self) -> BTreeMap<String, usize> {
        self.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }
}

fn list_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if !EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), ext);
        }
    }
    Ok(out)
}

/// Pairs up files across `A`, `B` and `label` and reads split lists.
pub fn scan_layout(root: &Path) -> Result<LayoutSummary> {
    let mut per_dir = Vec::new();
    for d in DIRS {
        let dir = root.join(d);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
        per_dir.push(list_dir(&dir)?);
    }
    let all: BTreeSet<&String> = per_dir.iter().flat_map(|m| m.keys()).collect();
    for name in &all {
        for (d, files) in DIRS.iter().zip(&per_dir) {
            if !files.contains_key(*name) {
                let (have_dir, have) = DIRS
                    .iter()
                    .zip(&per_dir)
                    .find_map(|(od, of)| of.get(*name).map(|ext| (od, ext)))
                    .expect("name comes from some directory");
                return Err(Error::Dataset(format!(
                    "orphan file {have_dir}/{name}.{have}: no counterpart in {d}/"
                )));
            }
        }
    }
    let files: BTreeMap<String, String> = per_dir[0].clone();

    let mut splits = BTreeMap::new();
    for s in SPLITS {
        let path = root.join("list").join(format!("{s}.txt"));
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| Path::new(l).file_stem().and_then(|s| s.to_str()).unwrap_or(l).to_string())
            .collect();
        for n in &names {
            if !files.contains_key(n) {
                return Err(Error::Dataset(format!(
                    "{} lists {n}, which has no image files",
                    path.display()
                )));
            }
        }
        splits.insert(s.to_string(), names);
    }
    Ok(LayoutSummary { files, splits })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbImage::new(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, f32::from(px[c]) / 255.0);
        }
    }
    Ok(out)
}

/// Reads a label raster, thresholding at 128. Values other than 0 and 255
/// are accepted with a warning.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut odd = 0usize;
    let data = img
        .as_raw()
        .iter()
        .map(|&v| {
            if v != 0 && v != 255 {
                odd += 1;
            }
            u8::from(v >= 128)
        })
        .collect();
    if odd > 0 {
        log::warn!("{}: {odd} label pixels are neither 0 nor 255; thresholded at 128", path.display());
    }
    Mask::from_vec(1, h, w, data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels)));
    }
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Grayscale PNG from values in `[0, 1]`.
pub fn write_gray(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!("{} values for {height}x{width}", values.len())));
    }
    let raw = values.iter().map(|&v| to_u8(v)).collect();
    let buf = GrayImage::from_raw(width as u32, height as u32, raw).expect("sized buffer");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let v: Vec<f32> = mask.data.iter().map(|&m| f32::from(m)).collect();
    write_gray(path, &v, mask.height, mask.width)
}

fn load_pair(root: &Path, name: &str, ext: &str) -> Result<BitemporalPair> {
    let file = format!("{name}.{ext}");
    let pair = BitemporalPair {
        name: name.to_string(),
        image_a: read_rgb(&root.join("A").join(&file))?,
        image_b: read_rgb(&root.join("B").join(&file))?,
        label: read_mask(&root.join("label").join(&file))?,
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads pairs sorted by name.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<BitemporalPair>> {
    let layout = scan_layout(&spec.root)?;
    let mut names: Vec<String> = match &spec.split {
        None => layout.files.keys().cloned().collect(),
        Some(s) => layout
            .splits
            .get(s)
            .ok_or_else(|| Error::Dataset(format!("no list/{s}.txt under {}", spec.root.display())))?
            .clone(),
    };
    names.sort();
    names.dedup();
    names
        .iter()
        .map(|n| load_pair(&spec.root, n, &layout.files[n]))
        .collect()
}

/// Writes pairs in the directory layout, with one list file per split.
pub fn write_dataset(root: &Path, splits: &[(&str, &[BitemporalPair])]) -> Result<()> {
    for d in DIRS.iter().copied().chain(["list"]) {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (split, pairs) in splits {
        let mut list = String::new();
        for p in pairs.iter() {
            p.validate()?;
            let file = format!("{}.png", p.name);
            write_rgb(&root.join("A").join(&file), &p.image_a)?;
            write_rgb(&root.join("B").join(&file), &p.image_b)?;
            write_mask(&root.join("label").join(&file), &p.label)?;
            list.push_str(&p.name);
            list.push('\n');
        }
        let path = root.join("list").join(format!("{split}.txt"));
        fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            size: 32,
            n_train: 3,
            n_val: 1,
            n_test: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_labels_and_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(&small()).unwrap();
        write_dataset(dir.path(), &s.named()).unwrap();
        let layout = scan_layout(dir.path()).unwrap();
        assert_eq!(layout.split_sizes()["train"], 3);
        let test = load_dataset(&DatasetSpec {
            root: dir.path().into(),
            split: Some("test".into()),
        })
        .unwrap();
        assert_eq!(test.len(), 2);
        for (got, want) in test.iter().zip(&s.test) {
            assert_eq!(got.name, want.name);
            assert_eq!(got.label, want.label);
            for (a, b) in got.image_a.data.iter().zip(&want.image_a.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        let all = load_dataset(&DatasetSpec {
            root: dir.path().into(),
            split: None,
        })
        .unwrap();
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].name < w[1].name));
    }

    #[test]
    fn orphan_file_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(&small()).unwrap();
        write_dataset(dir.path(), &s.named()).unwrap();
        fs::remove_file(dir.path().join("B").join("val_00000.png")).unwrap();
        let err = scan_layout(dir.path()).unwrap_err().to_string();
        assert!(err.contains("val_00000"), "{err}");
        assert!(err.contains("B/"), "{err}");
    }

    #[test]
    fn grey_label_values_are_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let raw = vec![0u8, 127, 128, 255];
        GrayImage::from_raw(2, 2, raw).unwrap().save(&p).unwrap();
        assert_eq!(read_mask(&p).unwrap().data, vec![0, 0, 1, 1]);
    }
}
