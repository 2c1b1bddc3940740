//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.png   8-bit grayscale image
//! <root>/masks/<id>.png    8-bit, pixel value = class label
//! <root>/classes.txt       one `label<TAB>name` line per class, label 0 = background
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::types::{Dataset, Image, LabelMap, Sample};
use crate::error::{Error, Result};

/// Class name → label value.
pub type ClassMap = BTreeMap<String, u8>;

pub fn read_class_map(root: &Path) -> Result<ClassMap> {
    let path = root.join("classes.txt");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DatasetNotFound(path.clone()),
        _ => Error::Io(e),
    })?;
    let mut map = ClassMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (label, name) = line.split_once('\t').ok_or_else(|| {
            Error::MalformedDataset(format!("{}:{}: expected `label<TAB>name`", path.display(), lineno + 1))
        })?;
        let label: u8 = label.trim().parse().map_err(|_| {
            Error::MalformedDataset(format!("{}:{}: bad label {label:?}", path.display(), lineno + 1))
        })?;
        if map.insert(name.to_string(), label).is_some() {
            return Err(Error::MalformedDataset(format!("duplicate class name {name:?}")));
        }
    }
    Ok(map)
}

fn class_names(class_map: &ClassMap) -> Result<Vec<String>> {
    let mut by_label: Vec<(u8, &String)> = class_map.iter().map(|(n, &l)| (l, n)).collect();
    by_label.sort();
    for (expected, (label, _)) in by_label.iter().enumerate() {
        if *label as usize != expected {
            return Err(Error::MalformedDataset(format!(
                "class labels must be 0..{} without gaps",
                class_map.len()
            )));
        }
    }
    Ok(by_label.into_iter().map(|(_, n)| n.clone()).collect())
}

fn png_ids(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.to_path_buf()));
    }
    let mut ids = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(ids)
}

/// Loads every image/mask pair under `root`, validating labels against
/// `class_map`. Samples are ordered by id.
pub fn ingest_dataset(root: &Path, class_map: &ClassMap) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let names = class_names(class_map)?;
    let images = png_ids(&root.join("images"))?;
    let masks = png_ids(&root.join("masks"))?;
    if let Some(id) = images.keys().find(|id| !masks.contains_key(*id)) {
        return Err(Error::UnpairedSample(format!("image {id} has no mask")));
    }
    if let Some(id) = masks.keys().find(|id| !images.contains_key(*id)) {
        return Err(Error::UnpairedSample(format!("mask {id} has no image")));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let img = image::open(image_path)?.to_luma8();
        let mask = image::open(&masks[id])?.to_luma8();
        if img.dimensions() != mask.dimensions() {
            let (iw, ih) = img.dimensions();
            let (mw, mh) = mask.dimensions();
            return Err(Error::shape(
                "ingest_dataset",
                &[ih as usize, iw as usize],
                &[mh as usize, mw as usize],
            ));
        }
        if let Some(bad) = mask.as_raw().iter().find(|&&l| l as usize >= names.len()) {
            return Err(Error::UnknownLabel {
                label: *bad,
                source_name: masks[id].display().to_string(),
            });
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        samples.push(Sample {
            id: id.clone(),
            image: Image::new(h, w, pixels)?,
            labels: LabelMap::new(h, w, mask.into_raw())?,
        });
    }
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Dataset::new(name, samples, names)
}

/// Reads `classes.txt` and ingests the directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let class_map = read_class_map(root)?;
    ingest_dataset(root, &class_map)
}

/// Writes a dataset in the layout read by [`ingest_dataset`].
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let classes: String = dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(label, name)| format!("{label}\t{name}\n"))
        .collect();
    fs::write(root.join("classes.txt"), classes)?;
    for sample in &dataset.samples {
        sample
            .image
            .to_luma8()
            .save(root.join("images").join(format!("{}.png", sample.id)))?;
        sample
            .labels
            .to_luma8()
            .save(root.join("masks").join(format!("{}.png", sample.id)))?;
    }
    Ok(())
}
