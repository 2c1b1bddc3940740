//! The miniUNet segmentation network.
//!
//! Parameters live outside the network in [`ModelParams`]; a [`Network`] only
//! knows their shapes and how to wire them into a [`Graph`]. This keeps the
//! forward map a pure function of `(params, images)`, which is what the
//! meta-gradient needs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::task_store::{DenseMask, Image};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 3],
    pub center_channels: usize,
    pub class_count: usize,
    pub input_side: usize,
    /// Per encoder level, shallowest first. A disabled skip feeds zeros in
    /// place of the encoder features, so parameter shapes do not change.
    pub skip_connections: [bool; 3],
    /// Per-channel normalization over the batch after every 3×3 convolution.
    pub normalization: bool,
    /// Shift and scale each input image to zero mean and unit variance.
    pub standardize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32, 64],
            center_channels: 128,
            class_count: 2,
            input_side: 128,
            skip_connections: [true; 3],
            normalization: false,
            standardize_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.encoder_channels;
        if a == 0 || !(a < b && b < c) {
            return Err(Error::Config(format!(
                "encoder_channels {:?} must be positive and strictly increasing",
                self.encoder_channels
            )));
        }
        if self.center_channels == 0 {
            return Err(Error::Config("center_channels must be positive".into()));
        }
        if self.class_count != 2 {
            return Err(Error::Config(format!(
                "class_count must be 2 (binary tasks), got {}",
                self.class_count
            )));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "input_side {} must be a positive multiple of 8",
                self.input_side
            )));
        }
        Ok(())
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// A differentiable map from `[n, 1, h, w]` images to `[n, 2, h, w]` scores.
pub trait Network: Send + Sync {
    fn param_specs(&self) -> Vec<ParamSpec>;

    /// Side length the network expects, if fixed.
    fn input_side(&self) -> Option<usize>;
    fn standardizes_input(&self) -> bool {
        false
    }

    /// `params` are in [`Network::param_specs`] order.
    fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Var<'g>;
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::shape("ModelParams::new", &[names.len()], &[tensors.len()]));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape("ModelParams::set_flat", &[self.numel()], &[flat.len()]));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `self += c · other`, tensor by tensor.
    pub fn axpy(&mut self, c: f64, other: &[Tensor]) {
        for (t, o) in self.tensors.iter_mut().zip(other) {
            t.axpy(c, o);
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.sub(b).max_abs())
            .fold(0.0, f64::max)
    }

    /// Registers every tensor as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.len() != specs.len() {
            return Err(Error::shape("parameter count", &[specs.len()], &[self.len()]));
        }
        for ((name, t), spec) in self.names.iter().zip(&self.tensors).zip(specs) {
            if name != &spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: every tensor draws from its own stream
/// derived from `(seed, name)`.
pub fn init_network_params(net: &dyn Network, seed: u64) -> ModelParams {
    let (names, tensors) = net
        .param_specs()
        .into_iter()
        .map(|spec| {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let mut rng = seed::rng_for(seed, &["init", &spec.name]);
                    Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng))
                }
            };
            (spec.name, tensor)
        })
        .unzip();
    ModelParams { names, tensors }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    Ok(init_network_params(&MiniUNet::new(config.clone())?, seed))
}

fn conv_specs(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize, norm: bool) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![c_out, c_in, k, k],
        init: Init::HeNormal { fan_in: c_in * k * k },
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![c_out],
        init: Init::Zeros,
    });
    if norm {
        specs.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![c_out],
            init: Init::Ones,
        });
        specs.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![c_out],
            init: Init::Zeros,
        });
    }
}

/// Per-channel standardization over batch and space, then affine.
fn normalize<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
    let shape = x.shape();
    let count = (shape[0] * shape[2] * shape[3]) as f64;
    let mean = x.channel_sum().scale(1.0 / count);
    let centered = x - mean.broadcast_channel(&shape);
    let var = (centered * centered).channel_sum().scale(1.0 / count);
    let inv_std = (var + var.graph().constant(Tensor::full(&[shape[1]], NORM_EPS))).powf(-0.5);
    (centered * (inv_std * gamma).broadcast_channel(&shape)).add_bias(beta)
}

/// Walks a parameter slice in order.
struct Cursor<'a, 'g> {
    params: &'a [Var<'g>],
    next: usize,
}

impl<'g> Cursor<'_, 'g> {
    fn take(&mut self) -> Var<'g> {
        let v = self.params[self.next];
        self.next += 1;
        v
    }

    fn conv(&mut self, x: Var<'g>, k: usize, norm: bool) -> Var<'g> {
        let (w, b) = (self.take(), self.take());
        let y = x.conv2d(w, ConvGeometry::same(k)).add_bias(b);
        if norm {
            let (gamma, beta) = (self.take(), self.take());
            normalize(y, gamma, beta)
        } else {
            y
        }
    }

    fn double_conv(&mut self, x: Var<'g>, norm: bool) -> Var<'g> {
        let y = self.conv(x, 3, norm).relu();
        self.conv(y, 3, norm).relu()
    }
}

/// Three encoder blocks (two 3×3 convolutions with rectifiers, then 2×2 max
/// pooling), a center block, three decoder blocks (bilinear 2× upsampling,
/// skip concatenation, two convolutions) and a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct MiniUNet {
    config: ModelConfig,
}

impl MiniUNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl Network for MiniUNet {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let norm = c.normalization;
        let mut specs = Vec::new();
        let mut c_in = 1;
        for (i, &ch) in c.encoder_channels.iter().enumerate() {
            conv_specs(&mut specs, &format!("enc{}.conv1", i + 1), c_in, ch, 3, norm);
            conv_specs(&mut specs, &format!("enc{}.conv2", i + 1), ch, ch, 3, norm);
            c_in = ch;
        }
        conv_specs(&mut specs, "center.conv1", c_in, c.center_channels, 3, norm);
        conv_specs(&mut specs, "center.conv2", c.center_channels, c.center_channels, 3, norm);
        let mut below = c.center_channels;
        for i in (0..3).rev() {
            let ch = c.encoder_channels[i];
            conv_specs(&mut specs, &format!("dec{}.conv1", i + 1), below + ch, ch, 3, norm);
            conv_specs(&mut specs, &format!("dec{}.conv2", i + 1), ch, ch, 3, norm);
            below = ch;
        }
        conv_specs(&mut specs, "head", below, c.class_count, 1, false);
        specs
    }

    fn input_side(&self) -> Option<usize> {
        Some(self.config.input_side)
    }

    fn standardizes_input(&self) -> bool {
        self.config.standardize_input
    }

    fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let norm = self.config.normalization;
        let mut cur = Cursor { params, next: 0 };
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for _ in 0..3 {
            let e = cur.double_conv(h, norm);
            skips.push(e);
            h = e.max_pool2();
        }
        h = cur.double_conv(h, norm);
        for i in (0..3).rev() {
            let up = h.upsample2();
            let skip = if self.config.skip_connections[i] {
                skips[i]
            } else {
                x.graph().constant(Tensor::zeros(&skips[i].shape()))
            };
            h = cur.double_conv(up.concat_channels(skip), norm);
        }
        let out = cur.conv(h, 1, false);
        debug_assert_eq!(cur.next, params.len());
        out
    }
}

/// A 47-parameter U-shaped network for 4×4 inputs: one encoder convolution,
/// one pooled convolution, upsampling, a skip concatenation and a 1×1 head.
#[derive(Clone, Copy, Debug, Default)]
pub struct TinyUNet;

impl Network for TinyUNet {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        conv_specs(&mut specs, "enc", 1, 2, 3, false);
        conv_specs(&mut specs, "center", 2, 1, 3, false);
        conv_specs(&mut specs, "head", 3, 2, 1, false);
        specs
    }

    fn input_side(&self) -> Option<usize> {
        None
    }

    fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let mut cur = Cursor { params, next: 0 };
        let e = cur.conv(x, 3, false).relu();
        let c = cur.conv(e.max_pool2(), 3, false).relu();
        cur.conv(c.upsample2().concat_channels(e), 1, false)
    }
}

/// Stacks images into a `[n, 1, h, w]` tensor.
pub fn images_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape("image batch", &[h, w], &[img.height(), img.width()]));
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data))
}

/// The network's input tensor for `images`, standardized per image when the
/// network asks for it.
pub fn network_input(net: &dyn Network, images: &[&Image]) -> Result<Tensor> {
    let mut x = images_tensor(images)?;
    if net.standardizes_input() {
        let plane = x.shape()[2] * x.shape()[3];
        for img in x.data_mut().chunks_mut(plane) {
            let mean = img.iter().sum::<f64>() / plane as f64;
            let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            let scale = 1.0 / (var + NORM_EPS).sqrt();
            img.iter_mut().for_each(|v| *v = (*v - mean) * scale);
        }
    }
    Ok(x)
}

fn check_side(net: &dyn Network, images: &[&Image]) -> Result<()> {
    if let Some(side) = net.input_side() {
        if let Some(img) = images.iter().find(|i| i.dims() != (side, side)) {
            return Err(Error::shape("network input", &[side, side], &[img.height(), img.width()]));
        }
    }
    Ok(())
}

/// Graph-building forward pass for training code.
pub fn forward_graph<'g>(net: &dyn Network, params: &[Var<'g>], images: &[&Image]) -> Result<Var<'g>> {
    check_side(net, images)?;
    let graph = params
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parameters".into()))?
        .graph();
    let x = graph.constant(network_input(net, images)?);
    Ok(net.forward(params, x))
}

/// Scores `[n, 2, h, w]` for a batch, without recording gradients.
pub fn forward(net: &dyn Network, params: &ModelParams, images: &[&Image]) -> Result<Tensor> {
    params.check_against(&net.param_specs())?;
    let graph = Graph::new();
    graph.no_grad(|| {
        let vars = params.bind(&graph);
        let out = forward_graph(net, &vars, images)?;
        Ok(Tensor::clone(&out.value()))
    })
}

/// Foreground wherever its score is strictly larger; ties go to background.
pub fn argmax_masks(scores: &Tensor) -> Vec<DenseMask> {
    let (n, c, h, w) = scores.dims4();
    assert_eq!(c, 2, "binary scores expected");
    let data = scores.data();
    (0..n)
        .map(|i| {
            let bg = &data[(2 * i) * h * w..(2 * i + 1) * h * w];
            let fg = &data[(2 * i + 1) * h * w..(2 * i + 2) * h * w];
            let labels = bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect();
            DenseMask::new(h, w, labels).expect("binary")
        })
        .collect()
}

/// Per-image predictions. Images are run one at a time so that batch
/// statistics (when normalization is on) never mix images.
pub fn predict(net: &dyn Network, params: &ModelParams, images: &[&Image]) -> Result<Vec<DenseMask>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        out.extend(argmax_masks(&forward(net, params, &[img])?));
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"WSLCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Parameters bundled with the configuration that produced them.
///
/// On disk: the magic `WSLCKPT1`, a little-endian `u32` header length, a JSON
/// header, then every tensor as little-endian `f64` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        params.check_against(&MiniUNet::new(config.clone())?.param_specs())?;
        Ok(Self {
            config,
            params,
            provenance: BTreeMap::new(),
        })
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.to_string(), value.to_string());
        self
    }

    pub fn network(&self) -> Result<MiniUNet> {
        MiniUNet::new(self.config.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(12 + header.len() + 8 * self.params.numel());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for t in &self.params.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?
            .read_to_end(&mut bytes)?;
        let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?)?;
        let mut data = bytes[12 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = data.by_ref().take(n).collect();
            if values.len() != n {
                return Err(bad("truncated data"));
            }
            names.push(name);
            tensors.push(Tensor::new(&shape, values));
        }
        if data.next().is_some() {
            return Err(bad("trailing data"));
        }
        let mut ckpt = Checkpoint::new(header.config, ModelParams { names, tensors })?;
        ckpt.provenance = header.provenance;
        Ok(ckpt)
    }
}
