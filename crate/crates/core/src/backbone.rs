//! Feature trunks: architecture descriptions, the `DPSW` weight container,
//! and multi-layer feature extraction.
//!
//! Architectures are data, not code. Each trunk is a flat list of layers in
//! `specs/*.toml`; a layer reads the previous layer's output unless it names
//! another source (`from` on convs, `inputs` on concats), which is enough to
//! spell out SqueezeNet's fire modules with primitive ops.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::tensor::{
    concat_channels, conv2d, conv_output_len, maxpool2d_with, normalize_input, pool_output_len,
    relu, Kernels, PoolRounding, Tensor3, TensorError,
};

/// Smallest square input for which every tap of every trunk is non-empty.
pub const MIN_INPUT_SIZE: usize = 32;

pub const CONTAINER_MAGIC: [u8; 4] = *b"DPSW";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneId {
    SqueezeNet,
    AlexNet,
    Vgg16,
}

impl BackboneId {
    pub const ALL: [BackboneId; 3] = [
        BackboneId::SqueezeNet,
        BackboneId::AlexNet,
        BackboneId::Vgg16,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::SqueezeNet => "squeezenet",
            BackboneId::AlexNet => "alexnet",
            BackboneId::Vgg16 => "vgg16",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = BackboneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "squeezenet" => Ok(BackboneId::SqueezeNet),
            "alexnet" => Ok(BackboneId::AlexNet),
            "vgg16" | "vgg-16" => Ok(BackboneId::Vgg16),
            _ => Err(BackboneError::UnknownBackbone(s.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("invalid architecture description: {0}")]
    InvalidSpec(String),
    #[error("bad magic {0:?}, expected \"DPSW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("container has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("container is for `{found}`, expected `{expected}`")]
    BackboneMismatch { expected: String, found: String },
    #[error("layer `{layer}` is missing record `{record}`")]
    MissingRecord { layer: String, record: String },
    #[error("record `{record}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        record: String,
        expected: Vec<u32>,
        found: Vec<u32>,
    },
    #[error("record `{0}` appears more than once")]
    DuplicateRecord(String),
    #[error("record `{0}` does not belong to any layer")]
    UnexpectedRecord(String),
    #[error("record `{name}` has {values} values for shape {dims:?}")]
    RecordLength {
        name: String,
        dims: Vec<u32>,
        values: usize,
    },
    #[error("name `{0}` is too long for the container format")]
    NameTooLong(String),
    #[error("input {width}x{height} is smaller than the {min}x{min} minimum")]
    InputTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: TensorError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Source layer index; the previous layer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<usize>,
}

impl ConvLayer {
    pub fn weight_record(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_record(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_dims(&self) -> Vec<u32> {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
        .map(|d| d as u32)
        .to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        rounding: PoolRounding,
    },
    Concat {
        inputs: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub layer: usize,
    pub name: String,
}

/// A trunk architecture and the layers whose outputs feed the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    pub taps: Vec<Tap>,
    pub layers: Vec<Layer>,
}

static SPECS: OnceLock<[BackboneSpec; 3]> = OnceLock::new();

impl BackboneSpec {
    /// The shipped description of one of the three trunks.
    pub fn builtin(id: BackboneId) -> &'static BackboneSpec {
        let specs = SPECS.get_or_init(|| {
            [
                include_str!("../specs/squeezenet.toml"),
                include_str!("../specs/alexnet.toml"),
                include_str!("../specs/vgg16.toml"),
            ]
            .map(|src| BackboneSpec::from_toml(src).expect("shipped architecture is valid"))
        });
        specs
            .iter()
            .find(|s| s.id == id)
            .expect("every id has a shipped spec")
    }

    pub fn from_toml(src: &str) -> Result<Self, BackboneError> {
        let spec: BackboneSpec =
            toml::from_str(src).map_err(|e| BackboneError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Source layer indices read by layer `i`; `None` in the list means the image.
    fn sources(&self, i: usize) -> Vec<Option<usize>> {
        let prev = i.checked_sub(1);
        match &self.layers[i] {
            Layer::Conv(c) => vec![c.from.or(prev)],
            Layer::Relu | Layer::MaxPool { .. } => vec![prev],
            Layer::Concat { inputs } => inputs.iter().map(|&j| Some(j)).collect(),
        }
    }

    fn is_activation(&self, i: usize) -> bool {
        match &self.layers[i] {
            Layer::Relu => true,
            Layer::Concat { inputs } => inputs.iter().all(|&j| self.is_activation(j)),
            _ => false,
        }
    }

    /// Checks tap placement, source references, and the channel chain.
    pub fn validate(&self) -> Result<(), BackboneError> {
        let invalid = |msg: String| Err(BackboneError::InvalidSpec(msg));
        if self.layers.is_empty() {
            return invalid("no layers".into());
        }
        let mut channels: Vec<usize> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let mut inputs = Vec::new();
            for src in self.sources(i) {
                match src {
                    None => inputs.push(3),
                    Some(j) if j < i => inputs.push(channels[j]),
                    Some(j) => {
                        return invalid(format!("layer {i} reads layer {j}, which is not earlier"))
                    }
                }
            }
            let out = match &self.layers[i] {
                Layer::Conv(c) => {
                    if c.in_channels != inputs[0] {
                        return invalid(format!(
                            "conv `{}` expects {} input channels but receives {}",
                            c.name, c.in_channels, inputs[0]
                        ));
                    }
                    if c.stride == 0 || c.kernel == 0 || c.out_channels == 0 {
                        return invalid(format!("conv `{}` has a zero-sized parameter", c.name));
                    }
                    c.out_channels
                }
                Layer::Relu => inputs[0],
                Layer::MaxPool { kernel, stride, .. } => {
                    if *kernel == 0 || *stride == 0 {
                        return invalid(format!("maxpool at {i} has a zero-sized parameter"));
                    }
                    inputs[0]
                }
                Layer::Concat { inputs: srcs } => {
                    if srcs.is_empty() {
                        return invalid(format!("concat at {i} has no inputs"));
                    }
                    inputs.iter().sum()
                }
            };
            channels.push(out);
        }
        let mut names = std::collections::HashSet::new();
        for c in self.conv_layers() {
            if !names.insert(c.name.as_str()) {
                return invalid(format!("duplicate conv name `{}`", c.name));
            }
        }
        if self.taps.is_empty() {
            return invalid("no taps".into());
        }
        for (k, tap) in self.taps.iter().enumerate() {
            if tap.layer >= self.layers.len() {
                return invalid(format!("tap `{}` points past the last layer", tap.name));
            }
            if k > 0 && tap.layer <= self.taps[k - 1].layer {
                return invalid("taps must be strictly increasing".into());
            }
            if !self.is_activation(tap.layer) {
                return invalid(format!("tap `{}` is not a ReLU output", tap.name));
            }
        }
        Ok(())
    }

    /// Output shape `(C, H, W)` of every layer for an `height x width` input.
    pub fn shape_chain(&self, height: usize, width: usize) -> Option<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let ins: Vec<_> = self
                .sources(i)
                .into_iter()
                .map(|s| s.map_or((3, height, width), |j| shapes[j]))
                .collect();
            let (c, h, w) = ins[0];
            let out = match &self.layers[i] {
                Layer::Conv(cv) => (
                    cv.out_channels,
                    conv_output_len(h, cv.kernel, cv.stride, cv.padding)?,
                    conv_output_len(w, cv.kernel, cv.stride, cv.padding)?,
                ),
                Layer::Relu => (c, h, w),
                Layer::MaxPool {
                    kernel,
                    stride,
                    rounding,
                } => (
                    c,
                    pool_output_len(h, *kernel, *stride, *rounding)?,
                    pool_output_len(w, *kernel, *stride, *rounding)?,
                ),
                Layer::Concat { .. } => {
                    if ins.iter().any(|s| (s.1, s.2) != (h, w)) {
                        return None;
                    }
                    (ins.iter().map(|s| s.0).sum(), h, w)
                }
            };
            shapes.push(out);
        }
        Some(shapes)
    }

    pub fn tap_shapes(&self, height: usize, width: usize) -> Option<Vec<(usize, usize, usize)>> {
        let chain = self.shape_chain(height, width)?;
        Some(self.taps.iter().map(|t| chain[t.layer]).collect())
    }

    fn last_needed_layer(&self) -> usize {
        self.taps.last().map_or(0, |t| t.layer)
    }
}

/// One named tensor of raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

/// In-memory form of a `DPSW` weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightContainer {
    pub version: u16,
    pub backbone: String,
    /// Per-channel input shift (RGB).
    pub shift: [f32; 3],
    /// Per-channel input scale (RGB).
    pub scale: [f32; 3],
    pub records: Vec<WeightRecord>,
}

impl WeightContainer {
    pub fn new(
        backbone: BackboneId,
        shift: [f32; 3],
        scale: [f32; 3],
        records: Vec<WeightRecord>,
    ) -> Self {
        Self {
            version: CONTAINER_VERSION,
            backbone: backbone.to_string(),
            shift,
            scale,
            records,
        }
    }

    /// Randomly initialised weights for tests and demos. Not a trained model.
    ///
    /// Kernels are drawn uniformly with He-style bounds `sqrt(6 / fan_in)`;
    /// biases are zero and input scaling is the identity.
    pub fn synthetic(spec: &BackboneSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for c in spec.conv_layers() {
            let fan_in = (c.in_channels * c.kernel * c.kernel) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let n = c.out_channels * c.in_channels * c.kernel * c.kernel;
            let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            records.push(WeightRecord {
                name: c.weight_record(),
                dims: c.weight_dims(),
                values,
            });
            records.push(WeightRecord {
                name: c.bias_record(),
                dims: vec![c.out_channels as u32],
                values: vec![0.0; c.out_channels],
            });
        }
        Self::new(spec.id, [0.0; 3], [1.0; 3], records)
    }

    pub fn record(&self, name: &str) -> Option<&WeightRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Serialises to the little-endian `DPSW` layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, BackboneError> {
        let mut out = Vec::new();
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let id = self.backbone.as_bytes();
        let id_len = u8::try_from(id.len())
            .map_err(|_| BackboneError::NameTooLong(self.backbone.clone()))?;
        out.push(id_len);
        out.extend_from_slice(id);
        for v in self.shift.iter().chain(&self.scale) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| BackboneError::NameTooLong(r.name.clone()))?;
            let expected: usize = r.dims.iter().map(|&d| d as usize).product();
            if expected != r.values.len() {
                return Err(BackboneError::RecordLength {
                    name: r.name.clone(),
                    dims: r.dims.clone(),
                    values: r.values.len(),
                });
            }
            let rank = u8::try_from(r.dims.len())
                .map_err(|_| BackboneError::NameTooLong(r.name.clone()))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the byte layout without checking records against an architecture.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = rd.take(4)?.try_into().expect("4 bytes");
        if magic != CONTAINER_MAGIC {
            return Err(BackboneError::BadMagic(magic));
        }
        let version = rd.u16()?;
        if version != CONTAINER_VERSION {
            return Err(BackboneError::UnsupportedVersion(version));
        }
        let id_len = rd.u8()? as usize;
        let backbone = std::str::from_utf8(rd.take(id_len)?)
            .map_err(|_| BackboneError::InvalidUtf8("backbone id"))?
            .to_string();
        let mut consts = [0.0f32; 6];
        for c in &mut consts {
            *c = rd.f32()?;
        }
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = rd.u16()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| BackboneError::InvalidUtf8("record name"))?
                .to_string();
            let rank = rd.u8()? as usize;
            let dims = (0..rank).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or(BackboneError::Truncated {
                    offset: rd.pos,
                    needed: usize::MAX,
                })?;
            let needed = n.checked_mul(4).ok_or(BackboneError::Truncated {
                offset: rd.pos,
                needed: usize::MAX,
            })?;
            let values = rd
                .take(needed)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            records.push(WeightRecord { name, dims, values });
        }
        if rd.pos != bytes.len() {
            return Err(BackboneError::TrailingBytes(bytes.len() - rd.pos));
        }
        Ok(Self {
            version,
            backbone,
            shift: [consts[0], consts[1], consts[2]],
            scale: [consts[3], consts[4], consts[5]],
            records,
        })
    }

    /// Every conv layer has exactly one weight and one bias record of the
    /// right shape, and nothing else is present.
    pub fn validate(&self, spec: &BackboneSpec) -> Result<(), BackboneError> {
        if self.backbone != spec.id.as_str() {
            return Err(BackboneError::BackboneMismatch {
                expected: spec.id.to_string(),
                found: self.backbone.clone(),
            });
        }
        let mut by_name: HashMap<&str, &WeightRecord> = HashMap::new();
        for r in &self.records {
            if by_name.insert(r.name.as_str(), r).is_some() {
                return Err(BackboneError::DuplicateRecord(r.name.clone()));
            }
        }
        let mut used = 0;
        for c in spec.conv_layers() {
            for (record, expected) in [
                (c.weight_record(), c.weight_dims()),
                (c.bias_record(), vec![c.out_channels as u32]),
            ] {
                let r =
                    by_name
                        .get(record.as_str())
                        .ok_or_else(|| BackboneError::MissingRecord {
                            layer: c.name.clone(),
                            record: record.clone(),
                        })?;
                if r.dims != expected {
                    return Err(BackboneError::ShapeMismatch {
                        record,
                        expected,
                        found: r.dims.clone(),
                    });
                }
                used += 1;
            }
        }
        if used != self.records.len() {
            let known: std::collections::HashSet<String> = spec
                .conv_layers()
                .flat_map(|c| [c.weight_record(), c.bias_record()])
                .collect();
            let extra = self
                .records
                .iter()
                .find(|r| !known.contains(&r.name))
                .expect("an unused record exists");
            return Err(BackboneError::UnexpectedRecord(extra.name.clone()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackboneError> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(BackboneError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BackboneError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BackboneError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, BackboneError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32, BackboneError> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn store_weights(
    container: &WeightContainer,
    path: impl AsRef<Path>,
) -> Result<(), BackboneError> {
    let path = path.as_ref();
    let bytes = container.to_bytes()?;
    fs::write(path, bytes).map_err(|source| BackboneError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a container and validates it against the trunk it names.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightContainer, BackboneError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| BackboneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let container = WeightContainer::from_bytes(&bytes)?;
    let id: BackboneId = container.backbone.parse()?;
    container.validate(BackboneSpec::builtin(id))?;
    Ok(container)
}

/// Activations at each tap, in tap order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    entries: Vec<(String, Tensor3)>,
}

impl FeatureStack {
    pub fn new(entries: Vec<(String, Tensor3)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor3)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor3> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, i: usize) -> Option<&Tensor3> {
        self.entries.get(i).map(|(_, t)| t)
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.tensors().map(Tensor3::shape).collect()
    }

    pub fn map_tensors(&self, f: impl Fn(&Tensor3) -> Tensor3) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), f(t)))
                .collect(),
        }
    }
}

/// A trunk bound to validated weights, ready to run.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    shift: [f32; 3],
    scale: [f32; 3],
    params: Vec<Option<(Kernels, Vec<f32>)>>,
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, weights: &WeightContainer) -> Result<Self, BackboneError> {
        weights.validate(spec)?;
        let params = spec
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => {
                    let w = weights.record(&c.weight_record()).expect("validated");
                    let b = weights.record(&c.bias_record()).expect("validated");
                    let k = Kernels::new(
                        c.out_channels,
                        c.in_channels,
                        c.kernel,
                        c.kernel,
                        w.values.clone(),
                    )
                    .expect("validated shape");
                    Some((k, b.values.clone()))
                }
                _ => None,
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            shift: weights.shift,
            scale: weights.scale,
            params,
        })
    }

    /// Builtin architecture for `weights.backbone`.
    pub fn from_weights(weights: &WeightContainer) -> Result<Self, BackboneError> {
        let id: BackboneId = weights.backbone.parse()?;
        Self::new(BackboneSpec::builtin(id), weights)
    }

    pub fn id(&self) -> BackboneId {
        self.spec.id
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureStack, BackboneError> {
        if image.width() < MIN_INPUT_SIZE || image.height() < MIN_INPUT_SIZE {
            return Err(BackboneError::InputTooSmall {
                width: image.width(),
                height: image.height(),
                min: MIN_INPUT_SIZE,
            });
        }
        let input = normalize_input(image, self.shift, self.scale);
        let last = self.spec.last_needed_layer();

        // index of the last layer reading each output, so buffers can be dropped early
        let mut last_read = vec![0usize; last + 1];
        for i in 0..=last {
            for j in self.spec.sources(i).into_iter().flatten() {
                last_read[j] = last_read[j].max(i);
            }
        }
        for t in &self.spec.taps {
            last_read[t.layer] = usize::MAX;
        }

        let mut outputs: Vec<Option<Tensor3>> = vec![None; last + 1];
        let mut entries = Vec::with_capacity(self.spec.taps.len());
        let mut taps = self.spec.taps.iter().peekable();
        for i in 0..=last {
            let read = |src: Option<usize>| -> &Tensor3 {
                match src {
                    None => &input,
                    Some(j) => outputs[j].as_ref().expect("source still alive"),
                }
            };
            let srcs = self.spec.sources(i);
            let wrap = |source| BackboneError::Layer { layer: i, source };
            let out = match &self.spec.layers[i] {
                Layer::Conv(c) => {
                    let (k, b) = self.params[i].as_ref().expect("conv params");
                    conv2d(read(srcs[0]), k, b, c.stride, c.padding).map_err(wrap)?
                }
                Layer::Relu => relu(read(srcs[0])),
                Layer::MaxPool {
                    kernel,
                    stride,
                    rounding,
                } => maxpool2d_with(read(srcs[0]), *kernel, *stride, *rounding).map_err(wrap)?,
                Layer::Concat { .. } => {
                    let parts: Vec<Tensor3> = srcs.iter().map(|&s| read(s).clone()).collect();
                    concat_channels(&parts).map_err(wrap)?
                }
            };
            if taps.peek().is_some_and(|t| t.layer == i) {
                let tap = taps.next().expect("peeked");
                entries.push((tap.name.clone(), out.clone()));
            }
            outputs[i] = Some(out);
            for j in srcs.into_iter().flatten() {
                if last_read[j] == i {
                    outputs[j] = None;
                }
            }
        }
        Ok(FeatureStack::new(entries))
    }
}

/// One-shot extraction; prefer [`Backbone`] when running many images.
pub fn extract_features(
    image: &Image,
    spec: &BackboneSpec,
    weights: &WeightContainer,
) -> Result<FeatureStack, BackboneError> {
    Backbone::new(spec, weights)?.extract(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_container() -> WeightContainer {
        WeightContainer::new(
            BackboneId::AlexNet,
            [0.1, 0.2, 0.3],
            [1.0, 2.0, 3.0],
            vec![
                WeightRecord {
                    name: "a.weight".into(),
                    dims: vec![2, 1, 1, 1],
                    values: vec![1.5, -2.0],
                },
                WeightRecord {
                    name: "a.bias".into(),
                    dims: vec![2],
                    values: vec![0.0, 0.25],
                },
            ],
        )
    }

    #[test]
    fn byte_layout_is_exact() {
        let bytes = tiny_container().to_bytes().unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"DPSW");
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(7);
        want.extend_from_slice(b"alexnet");
        for v in [0.1f32, 0.2, 0.3, 1.0, 2.0, 3.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&8u16.to_le_bytes());
        want.extend_from_slice(b"a.weight");
        want.push(4);
        for d in [2u32, 1, 1, 1] {
            want.extend_from_slice(&d.to_le_bytes());
        }
        for v in [1.5f32, -2.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&6u16.to_le_bytes());
        want.extend_from_slice(b"a.bias");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        for v in [0.0f32, 0.25] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, want);
        assert_eq!(
            WeightContainer::from_bytes(&bytes).unwrap(),
            tiny_container()
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = tiny_container().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            WeightContainer::from_bytes(&bytes),
            Err(BackboneError::BadMagic(m)) if &m == b"XXXX"
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = tiny_container().to_bytes().unwrap();
        bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(
            WeightContainer::from_bytes(&bytes),
            Err(BackboneError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncated_anywhere() {
        let bytes = tiny_container().to_bytes().unwrap();
        for cut in [2, 5, 10, 20, 40, bytes.len() - 1] {
            assert!(
                matches!(
                    WeightContainer::from_bytes(&bytes[..cut]),
                    Err(BackboneError::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            WeightContainer::from_bytes(&longer),
            Err(BackboneError::TrailingBytes(1))
        ));
    }

    #[test]
    fn missing_bias_names_the_layer() {
        let spec = BackboneSpec::builtin(BackboneId::AlexNet);
        let mut c = WeightContainer::synthetic(spec, 1);
        c.records.retain(|r| r.name != "features.6.bias");
        match c.validate(spec) {
            Err(BackboneError::MissingRecord { layer, record }) => {
                assert_eq!(layer, "features.6");
                assert_eq!(record, "features.6.bias");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_and_extra_records() {
        let spec = BackboneSpec::builtin(BackboneId::AlexNet);
        let mut c = WeightContainer::synthetic(spec, 1);
        c.records[1].dims = vec![63];
        c.records[1].values.pop();
        assert!(matches!(
            c.validate(spec),
            Err(BackboneError::ShapeMismatch { .. })
        ));

        let mut c = WeightContainer::synthetic(spec, 1);
        c.records.push(WeightRecord {
            name: "classifier.1.weight".into(),
            dims: vec![1],
            values: vec![0.0],
        });
        assert!(
            matches!(c.validate(spec), Err(BackboneError::UnexpectedRecord(n)) if n == "classifier.1.weight")
        );

        let mut c = WeightContainer::synthetic(spec, 1);
        let dup = c.records[0].clone();
        c.records.push(dup);
        assert!(matches!(
            c.validate(spec),
            Err(BackboneError::DuplicateRecord(_))
        ));
    }

    #[test]
    fn builtin_specs_validate() {
        for id in BackboneId::ALL {
            let spec = BackboneSpec::builtin(id);
            assert_eq!(spec.id, id);
            spec.validate().unwrap();
        }
        assert_eq!(BackboneSpec::builtin(BackboneId::AlexNet).taps.len(), 5);
        assert_eq!(BackboneSpec::builtin(BackboneId::Vgg16).taps.len(), 5);
        assert_eq!(BackboneSpec::builtin(BackboneId::SqueezeNet).taps.len(), 7);
    }

    #[test]
    fn spec_rejects_tap_on_conv() {
        let src = r#"
            id = "alexnet"
            [[taps]]
            layer = 0
            name = "c"
            [[layers]]
            op = "conv"
            name = "c"
            in_channels = 3
            out_channels = 4
            kernel = 1
            stride = 1
            padding = 0
        "#;
        assert!(matches!(
            BackboneSpec::from_toml(src),
            Err(BackboneError::InvalidSpec(_))
        ));
    }

    #[test]
    fn spec_rejects_channel_break() {
        let src = r#"
            id = "alexnet"
            [[taps]]
            layer = 1
            name = "r"
            [[layers]]
            op = "conv"
            name = "c"
            in_channels = 4
            out_channels = 4
            kernel = 1
            stride = 1
            padding = 0
            [[layers]]
            op = "relu"
        "#;
        let err = BackboneSpec::from_toml(src).unwrap_err();
        assert!(err.to_string().contains("expects 4 input channels"));
    }

    #[test]
    fn too_small_input() {
        let spec = BackboneSpec::builtin(BackboneId::AlexNet);
        let bb = Backbone::new(spec, &WeightContainer::synthetic(spec, 0)).unwrap();
        assert!(matches!(
            bb.extract(&Image::filled(31, 40, [0.5; 3])),
            Err(BackboneError::InputTooSmall { .. })
        ));
    }

    #[test]
    fn backbone_id_parses() {
        assert_eq!("VGG16".parse::<BackboneId>().unwrap(), BackboneId::Vgg16);
        assert!("resnet".parse::<BackboneId>().is_err());
    }
}
