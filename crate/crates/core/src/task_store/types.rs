use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image sides must be at least {MIN_SIDE}, got {height}×{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape("Image::new", &[height * width], &[pixels.len()]));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize);
            image::Luma([(v * 255.0).round() as u8])
        })
    }
}

/// Binary ground truth: 0 = background, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DenseMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl DenseMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("DenseMask::new", &[height * width], &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("dense mask value {bad} is not binary")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, foreground: bool) -> Self {
        Self {
            height,
            width,
            labels: vec![u8::from(foreground); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let labels = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Self {
            height,
            width,
            labels,
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

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.labels[row * self.width + col] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.labels[y as usize * self.width + x as usize]])
        })
    }
}

/// Multi-class label grid; each value indexes the dataset's class list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("LabelMap::new", &[height * width], &[labels.len()]));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
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

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.labels[y as usize * self.width + x as usize]])
        })
    }
}

/// One image of a dataset with its multi-class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

/// A named collection of samples sharing one class vocabulary. Label value
/// `i` means `class_names[i]`; label 0 is the background.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::MalformedDataset(format!("dataset {name:?} has no samples")));
        }
        if class_names.len() < 2 {
            return Err(Error::MalformedDataset(format!(
                "dataset {name:?} needs a background and at least one foreground class"
            )));
        }
        for sample in &samples {
            if sample.image.dims() != sample.labels.dims() {
                let (ih, iw) = sample.image.dims();
                let (mh, mw) = sample.labels.dims();
                return Err(Error::shape("Dataset::new", &[ih, iw], &[mh, mw]));
            }
            if let Some(&label) = sample.labels.labels().iter().find(|&&l| l as usize >= class_names.len()) {
                return Err(Error::UnknownLabel {
                    label,
                    source_name: format!("{name}/{}", sample.id),
                });
            }
        }
        Ok(Self {
            name,
            samples,
            class_names,
        })
    }

    pub fn class_label(&self, class: &str) -> Result<u8> {
        self.class_names
            .iter()
            .position(|c| c == class)
            .map(|i| i as u8)
            .ok_or_else(|| Error::UnknownClass(format!("{class} (dataset {})", self.name)))
    }

    /// Foreground class names, i.e. every class except the background.
    pub fn foreground_classes(&self) -> &[String] {
        &self.class_names[1..]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Identifier of a (dataset, foreground class) pair, written `dataset/class`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId {
    pub dataset: String,
    pub class: String,
}

impl TaskId {
    pub fn new(dataset: impl Into<String>, class: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            class: class.into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((d, c)) if !d.is_empty() && !c.is_empty() && !c.contains('/') => Ok(Self::new(d, c)),
            _ => Err(Error::InvalidArgument(format!(
                "task id {s:?} must look like <dataset>/<class>"
            ))),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.dataset, self.class)
    }
}

/// An image with binary ground truth for one task. `key` identifies the
/// underlying image (`dataset/sample`) independently of the target class.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub key: String,
    pub image: Image,
    pub mask: DenseMask,
}
