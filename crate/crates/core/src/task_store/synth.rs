//! Procedural stand-in for a corpus of medical-style segmentation datasets.
//!
//! Each modality becomes one dataset; every image of a modality carries one
//! instance of every shape class, so each (modality, class) pair is a
//! binarizable task. Modalities differ in background texture, which gives a
//! measurable domain shift between datasets. Labels are exact: a pixel's
//! label is the last class whose shape contains the pixel centre.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{Dataset, Image, LabelMap, Sample, MIN_SIDE};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Linear illumination ramp in a random direction.
    Gradient,
    /// Smooth blotches plus strong pixel noise.
    Speckle,
    /// Sinusoidal bands with random orientation and phase.
    Banded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    /// A single bright rotated ellipse (an "organ").
    Ellipse,
    /// A set of parallel mid-intensity bands (the "ribs").
    Stripes,
    /// A dark cluster of overlapping discs (a "mass").
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeClassSpec {
    pub name: String,
    pub shape: ShapeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub modalities: Vec<ModalitySpec>,
    pub classes: Vec<ShapeClassSpec>,
    pub images_per_dataset: usize,
    pub side: usize,
    /// Relative jitter of shape size and position.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let modality = |name: &str, texture| ModalitySpec {
            name: name.into(),
            texture,
        };
        let class = |name: &str, shape| ShapeClassSpec {
            name: name.into(),
            shape,
        };
        Self {
            modalities: vec![
                modality("gradient", Texture::Gradient),
                modality("speckle", Texture::Speckle),
                modality("banded", Texture::Banded),
            ],
            classes: vec![class("ribs", ShapeKind::Stripes), class("organ", ShapeKind::Ellipse)],
            images_per_dataset: 40,
            side: 128,
            jitter: 0.15,
            noise: 0.03,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one modality".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one shape class".into()));
        }
        if self.images_per_dataset == 0 {
            return Err(Error::Config("images_per_dataset must be positive".into()));
        }
        if self.side < MIN_SIDE {
            return Err(Error::Config(format!("synthetic side must be at least {MIN_SIDE}")));
        }
        if !(0.0..0.5).contains(&self.jitter) || !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config("jitter and noise must lie in [0, 0.5)".into()));
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.extend(self.classes.iter().map(|c| c.name.as_str()));
        for name in &names {
            if name.is_empty() || name.contains(['/', '\\']) || *name == "background" {
                return Err(Error::Config(format!("invalid synthetic name {name:?}")));
            }
        }
        let mut modalities: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        modalities.sort_unstable();
        modalities.dedup();
        let mut classes: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        if modalities.len() != self.modalities.len() || classes.len() != self.classes.len() {
            return Err(Error::Config("synthetic names must be unique".into()));
        }
        Ok(())
    }
}

/// Geometry of one painted shape, in pixel units with pixel centres at
/// `(row + 0.5, col + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeInstance {
    Ellipse {
        center_row: f64,
        center_col: f64,
        radius_row: f64,
        radius_col: f64,
        angle: f64,
    },
    Stripes {
        center_row: f64,
        center_col: f64,
        angle: f64,
        offsets: Vec<f64>,
        half_thickness: f64,
        half_length: f64,
    },
    Blob {
        discs: Vec<(f64, f64, f64)>,
    },
}

impl ShapeInstance {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        match self {
            ShapeInstance::Ellipse {
                center_row,
                center_col,
                radius_row,
                radius_col,
                angle,
            } => {
                let (dy, dx) = (y - center_row, x - center_col);
                let (s, c) = angle.sin_cos();
                let u = (dx * c + dy * s) / radius_col;
                let v = (-dx * s + dy * c) / radius_row;
                u * u + v * v <= 1.0
            }
            ShapeInstance::Stripes {
                center_row,
                center_col,
                angle,
                offsets,
                half_thickness,
                half_length,
            } => {
                let (dy, dx) = (y - center_row, x - center_col);
                let (s, c) = angle.sin_cos();
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= *half_length
                    && offsets.iter().any(|o| (across - o).abs() <= *half_thickness)
            }
            ShapeInstance::Blob { discs } => discs
                .iter()
                .any(|&(r, c, rad)| (y - r).powi(2) + (x - c).powi(2) <= rad * rad),
        }
    }

    fn intensity(&self) -> f64 {
        match self {
            ShapeInstance::Ellipse { .. } => 0.72,
            ShapeInstance::Stripes { .. } => 0.55,
            ShapeInstance::Blob { .. } => 0.12,
        }
    }
}

/// A generated dataset together with the shapes painted into each sample
/// (outer index: sample, inner index: class order of the spec).
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub geometry: Vec<Vec<ShapeInstance>>,
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<Dataset>> {
    Ok(synth_generate_detailed(spec, seed)?
        .into_iter()
        .map(|d| d.dataset)
        .collect())
}

pub fn synth_generate_detailed(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthDataset>> {
    spec.validate()?;
    let mut class_names = vec!["background".to_string()];
    class_names.extend(spec.classes.iter().map(|c| c.name.clone()));
    spec.modalities
        .iter()
        .map(|modality| {
            let mut samples = Vec::with_capacity(spec.images_per_dataset);
            let mut geometry = Vec::with_capacity(spec.images_per_dataset);
            for i in 0..spec.images_per_dataset {
                let id = format!("{i:04}");
                let mut rng = seed::rng_for(seed, &["synth", &modality.name, &id]);
                let (sample, shapes) = render(spec, modality.texture, id, &mut rng)?;
                samples.push(sample);
                geometry.push(shapes);
            }
            Ok(SynthDataset {
                dataset: Dataset::new(modality.name.clone(), samples, class_names.clone())?,
                geometry,
            })
        })
        .collect()
}

fn jittered(rng: &mut ChaCha8Rng, value: f64, jitter: f64) -> f64 {
    value * (1.0 + rng.random_range(-jitter..=jitter))
}

fn sample_shape(kind: ShapeKind, side: f64, jitter: f64, rng: &mut ChaCha8Rng) -> ShapeInstance {
    let shift = |rng: &mut ChaCha8Rng| side * rng.random_range(-jitter..=jitter) * 0.5;
    match kind {
        ShapeKind::Ellipse => ShapeInstance::Ellipse {
            center_row: side * 0.5 + shift(rng),
            center_col: side * 0.5 + shift(rng),
            radius_row: jittered(rng, side * 0.2, jitter),
            radius_col: jittered(rng, side * 0.26, jitter),
            angle: rng.random_range(-0.5..=0.5),
        },
        ShapeKind::Stripes => {
            let spacing = jittered(rng, side * 0.16, jitter);
            let count = 5;
            let first = -spacing * (count as f64 - 1.0) / 2.0;
            ShapeInstance::Stripes {
                center_row: side * 0.5 + shift(rng),
                center_col: side * 0.5 + shift(rng),
                angle: rng.random_range(-0.35..=0.35),
                offsets: (0..count).map(|k| first + k as f64 * spacing).collect(),
                half_thickness: jittered(rng, side * 0.03, jitter).max(0.75),
                half_length: jittered(rng, side * 0.42, jitter),
            }
        }
        ShapeKind::Blob => {
            let (r0, c0) = (
                side * rng.random_range(0.25..0.75),
                side * rng.random_range(0.25..0.75),
            );
            let discs = (0..3)
                .map(|_| {
                    (
                        r0 + side * rng.random_range(-0.06..0.06),
                        c0 + side * rng.random_range(-0.06..0.06),
                        jittered(rng, side * 0.07, jitter),
                    )
                })
                .collect();
            ShapeInstance::Blob { discs }
        }
    }
}

/// Smooth random field in roughly `[-1, 1]`: a coarse lattice of uniform
/// values, bilinearly interpolated.
fn smooth_field(side: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let fy = (r as f64 + 0.5) / side as f64 * cells as f64;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for c in 0..side {
            let fx = (c as f64 + 0.5) / side as f64 * cells as f64;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |y: usize, x: usize| lattice[y * n + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn texture_field(texture: Texture, side: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let s = side as f64;
    match texture {
        Texture::Gradient => {
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (sn, cs) = phi.sin_cos();
            let field = (0..side * side)
                .map(|i| {
                    let (r, c) = ((i / side) as f64 / s - 0.5, (i % side) as f64 / s - 0.5);
                    0.3 * (c * cs + r * sn)
                })
                .collect();
            (field, 1.0)
        }
        Texture::Speckle => {
            let field = smooth_field(side, 6, rng).into_iter().map(|v| 0.1 * v).collect();
            (field, 2.5)
        }
        Texture::Banded => {
            let phi = rng.random_range(0.0..std::f64::consts::PI);
            let period = s * rng.random_range(0.12..0.2);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (sn, cs) = phi.sin_cos();
            let field = (0..side * side)
                .map(|i| {
                    let (r, c) = ((i / side) as f64, (i % side) as f64);
                    0.12 * ((c * cs + r * sn) / period * std::f64::consts::TAU + phase).sin()
                })
                .collect();
            (field, 1.0)
        }
    }
}

fn render(
    spec: &SynthSpec,
    texture: Texture,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<(Sample, Vec<ShapeInstance>)> {
    const BACKGROUND: f64 = 0.32;
    let side = spec.side;
    let shapes: Vec<ShapeInstance> = spec
        .classes
        .iter()
        .map(|c| sample_shape(c.shape, side as f64, spec.jitter, rng))
        .collect();
    let (field, noise_gain) = texture_field(texture, side, rng);
    let noise = Normal::new(0.0, spec.noise * noise_gain).expect("noise is finite and non-negative");
    let mut pixels = Vec::with_capacity(side * side);
    let mut labels = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let mut label = 0u8;
            let mut base = BACKGROUND;
            for (k, shape) in shapes.iter().enumerate() {
                if shape.contains(r, c) {
                    label = k as u8 + 1;
                    base = shape.intensity();
                }
            }
            let v = base + field[r * side + c] + noise.sample(rng);
            pixels.push(v.clamp(0.0, 1.0));
            labels.push(label);
        }
    }
    let sample = Sample {
        id,
        image: Image::new(side, side, pixels)?,
        labels: LabelMap::new(side, side, labels)?,
    };
    Ok((sample, shapes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            images_per_dataset: 6,
            side: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn three_modalities_two_classes_give_six_tasks() {
        let spec = SynthSpec {
            images_per_dataset: 40,
            side: 32,
            ..SynthSpec::default()
        };
        let datasets = synth_generate(&spec, 1).unwrap();
        assert_eq!(datasets.len(), 3);
        let tasks: usize = datasets.iter().map(|d| d.foreground_classes().len()).sum();
        assert_eq!(tasks, 6);
        for d in &datasets {
            assert_eq!(d.len(), 40);
            for label in 1..=2u8 {
                assert!(d.samples.iter().all(|s| s.labels.labels().contains(&label)));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small_spec(), 5).unwrap();
        let b = synth_generate(&small_spec(), 5).unwrap();
        let c = synth_generate(&small_spec(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ellipse_label_count_matches_inequality() {
        let spec = SynthSpec {
            classes: vec![
                ShapeClassSpec { name: "ribs".into(), shape: ShapeKind::Stripes },
                ShapeClassSpec { name: "organ".into(), shape: ShapeKind::Ellipse },
            ],
            ..small_spec()
        };
        for ds in synth_generate_detailed(&spec, 11).unwrap() {
            for (sample, shapes) in ds.dataset.samples.iter().zip(&ds.geometry) {
                let ShapeInstance::Ellipse { center_row, center_col, radius_row, radius_col, angle } = shapes[1]
                else {
                    panic!("second class is the ellipse")
                };
                // independent count: pixel centres satisfying the rotated
                // ellipse inequality
                let mut expected = 0;
                for r in 0..spec.side {
                    for c in 0..spec.side {
                        let dx = c as f64 + 0.5 - center_col;
                        let dy = r as f64 + 0.5 - center_row;
                        let u = dx * angle.cos() + dy * angle.sin();
                        let v = -dx * angle.sin() + dy * angle.cos();
                        if (u / radius_col).powi(2) + (v / radius_row).powi(2) <= 1.0 {
                            expected += 1;
                        }
                    }
                }
                let got = sample.labels.labels().iter().filter(|&&l| l == 2).count();
                assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn rejects_empty_specs() {
        let no_mod = SynthSpec { modalities: vec![], ..SynthSpec::default() };
        assert!(matches!(synth_generate(&no_mod, 0), Err(Error::Config(_))));
        let no_class = SynthSpec { classes: vec![], ..SynthSpec::default() };
        assert!(matches!(synth_generate(&no_class, 0), Err(Error::Config(_))));
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        for ds in synth_generate(&small_spec(), 2).unwrap() {
            for s in &ds.samples {
                assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
