//! Simulated sparse annotations.
//!
//! Two annotator models are provided: `points` labels `n` random foreground
//! and `n` random background pixels; `grid` labels every pixel of a lattice
//! with spacing `s` and a random offset. Labeled pixels always carry their
//! true class.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::seed;
use crate::task_store::DenseMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PixelLabel {
    Background = 0,
    Foreground = 1,
    Unknown = 255,
}

impl PixelLabel {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Background),
            1 => Some(Self::Foreground),
            255 => Some(Self::Unknown),
            _ => None,
        }
    }

    fn from_dense(foreground: bool) -> Self {
        if foreground {
            Self::Foreground
        } else {
            Self::Background
        }
    }
}

/// Annotation modality and its density parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SparsitySpec {
    Points(usize),
    Grid(usize),
    Dense,
}

impl SparsitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsitySpec::Points(0) => Err(Error::InvalidArgument("points needs n ≥ 1".into())),
            SparsitySpec::Grid(s) if s < 2 => Err(Error::InvalidArgument("grid needs s ≥ 2".into())),
            _ => Ok(()),
        }
    }

    /// `points`, `grid` or `dense`.
    pub fn family(&self) -> &'static str {
        match self {
            SparsitySpec::Points(_) => "points",
            SparsitySpec::Grid(_) => "grid",
            SparsitySpec::Dense => "dense",
        }
    }
}

impl fmt::Display for SparsitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsitySpec::Points(n) => write!(f, "points:{n}"),
            SparsitySpec::Grid(s) => write!(f, "grid:{s}"),
            SparsitySpec::Dense => write!(f, "dense"),
        }
    }
}

impl FromStr for SparsitySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad sparsity {s:?}; use points:<n>, grid:<s> or dense"));
        let spec = match s.split_once(':') {
            None if s == "dense" => SparsitySpec::Dense,
            Some(("points", n)) => SparsitySpec::Points(n.parse().map_err(|_| bad())?),
            Some(("grid", n)) => SparsitySpec::Grid(n.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for SparsitySpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SparsitySpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ternary label grid. `origin` records which simulator produced it, so
/// consumers can assert where their labels came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseMask {
    height: usize,
    width: usize,
    labels: Vec<PixelLabel>,
    origin: SparsitySpec,
}

impl SparseMask {
    pub fn new(height: usize, width: usize, labels: Vec<PixelLabel>, origin: SparsitySpec) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("SparseMask::new", &[height * width], &[labels.len()]));
        }
        Ok(Self {
            height,
            width,
            labels,
            origin,
        })
    }

    /// A mask with no labeled pixel at all.
    pub fn all_unknown(height: usize, width: usize, origin: SparsitySpec) -> Self {
        Self {
            height,
            width,
            labels: vec![PixelLabel::Unknown; height * width],
            origin,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[PixelLabel] {
        &self.labels
    }

    pub fn origin(&self) -> SparsitySpec {
        self.origin
    }

    pub fn get(&self, row: usize, col: usize) -> PixelLabel {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: PixelLabel) {
        self.labels[row * self.width + col] = label;
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != PixelLabel::Unknown).count()
    }

    /// True when no pixel is labeled.
    pub fn is_empty(&self) -> bool {
        self.labeled_count() == 0
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.labels[y as usize * self.width + x as usize] as u8])
        })
    }

    /// Reads the `{0, 1, 255}` PNG encoding.
    pub fn from_luma8(img: &image::GrayImage, origin: SparsitySpec) -> Result<Self> {
        let labels = img
            .as_raw()
            .iter()
            .map(|&code| {
                PixelLabel::from_code(code).ok_or(Error::UnknownLabel {
                    label: code,
                    source_name: "sparse mask".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(img.height() as usize, img.width() as usize, labels, origin)
    }
}

/// Labels `min(n, |fg|)` foreground and `min(n, |bg|)` background pixels,
/// drawn uniformly without replacement.
pub fn points(dense: &DenseMask, n: usize, seed: u64) -> Result<SparseMask> {
    SparsitySpec::Points(n).validate()?;
    let (h, w) = dense.dims();
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..h * w).partition(|&i| dense.labels()[i] == 1);
    let mut rng = seed::rng(seed);
    let mut mask = SparseMask::all_unknown(h, w, SparsitySpec::Points(n));
    for (pool, label) in [(&fg, PixelLabel::Foreground), (&bg, PixelLabel::Background)] {
        let take = n.min(pool.len());
        for i in index::sample(&mut rng, pool.len(), take) {
            mask.labels[pool[i]] = label;
        }
    }
    Ok(mask)
}

/// Lattice annotation with spacing `s`; per-axis offsets are drawn uniformly
/// from `0..s` with `seed`.
pub fn grid(dense: &DenseMask, s: usize, seed: u64) -> Result<SparseMask> {
    SparsitySpec::Grid(s).validate()?;
    let mut rng = seed::rng(seed);
    let offsets = (rng.random_range(0..s), rng.random_range(0..s));
    grid_with_offsets(dense, s, offsets)
}

pub fn grid_with_offsets(dense: &DenseMask, s: usize, offsets: (usize, usize)) -> Result<SparseMask> {
    SparsitySpec::Grid(s).validate()?;
    let (h, w) = dense.dims();
    if s > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "grid spacing {s} exceeds image side {}",
            h.min(w)
        )));
    }
    if offsets.0 >= s || offsets.1 >= s {
        return Err(Error::InvalidArgument(format!("grid offsets {offsets:?} must be below {s}")));
    }
    let mut mask = SparseMask::all_unknown(h, w, SparsitySpec::Grid(s));
    for r in (offsets.0..h).step_by(s) {
        for c in (offsets.1..w).step_by(s) {
            mask.set(r, c, PixelLabel::from_dense(dense.is_foreground(r, c)));
        }
    }
    Ok(mask)
}

/// Every pixel labeled with its true class.
pub fn densify_passthrough(dense: &DenseMask) -> SparseMask {
    let (h, w) = dense.dims();
    SparseMask {
        height: h,
        width: w,
        labels: dense.labels().iter().map(|&l| PixelLabel::from_dense(l == 1)).collect(),
        origin: SparsitySpec::Dense,
    }
}

pub fn sparsify(dense: &DenseMask, spec: SparsitySpec, seed: u64) -> Result<SparseMask> {
    match spec {
        SparsitySpec::Points(n) => points(dense, n, seed),
        SparsitySpec::Grid(s) => grid(dense, s, seed),
        SparsitySpec::Dense => Ok(densify_passthrough(dense)),
    }
}

/// Number of user inputs: each positively labeled pixel counts as one.
pub fn count_inputs(sparse: &SparseMask) -> usize {
    sparse.labels.iter().filter(|&&l| l == PixelLabel::Foreground).count()
}

/// Fraction of pixels that carry a label.
pub fn labeled_fraction(sparse: &SparseMask) -> f64 {
    if sparse.labels.is_empty() {
        return 0.0;
    }
    sparse.labeled_count() as f64 / sparse.labels.len() as f64
}
