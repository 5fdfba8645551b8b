//! Declarative network descriptions and build-time shape validation.

use serde::{Deserialize, Serialize};

use crate::layers::pooled_len;
use crate::tensor::Shape;
use crate::{NnetError, Result};

/// One layer of a stream or trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 square convolution.
    Conv {
        out_channels: usize,
        kernel: usize,
        pad: usize,
    },
    Relu,
    /// Ceil-mode max pooling.
    MaxPool { window: usize, stride: usize },
    Lrn {
        local_size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    Fc { out_units: usize },
    Dropout { rate: f64 },
}

impl LayerSpec {
    /// 3x3, pad 1, stride 1.
    pub fn conv3(out_channels: usize) -> Self {
        Self::Conv {
            out_channels,
            kernel: 3,
            pad: 1,
        }
    }

    pub fn conv1x1(out_channels: usize) -> Self {
        Self::Conv {
            out_channels,
            kernel: 1,
            pad: 0,
        }
    }

    pub fn pool3s2() -> Self {
        Self::MaxPool {
            window: 3,
            stride: 2,
        }
    }

    /// Cross-channel LRN with the AlexNet settings.
    pub fn lrn_default() -> Self {
        Self::Lrn {
            local_size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::Relu => "relu",
            Self::MaxPool { .. } => "pool",
            Self::Lrn { .. } => "lrn",
            Self::Fc { .. } => "fc",
            Self::Dropout { .. } => "dropout",
        }
    }

    /// Output shape, or an error when the layer cannot accept `input`.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let out = match *self {
            Self::Conv {
                out_channels,
                kernel,
                pad,
            } => {
                if kernel == 0 || input.h + 2 * pad < kernel || input.w + 2 * pad < kernel {
                    return Err(NnetError::InvalidSpec(format!(
                        "conv kernel {kernel} pad {pad} does not fit input {input}"
                    )));
                }
                Shape::new(
                    input.n,
                    input.h + 2 * pad + 1 - kernel,
                    input.w + 2 * pad + 1 - kernel,
                    out_channels,
                )
            }
            Self::Relu | Self::Dropout { .. } => input,
            Self::Lrn { local_size, .. } => {
                if local_size == 0 || local_size % 2 == 0 {
                    return Err(NnetError::InvalidSpec(format!(
                        "lrn local_size must be odd, got {local_size}"
                    )));
                }
                input
            }
            Self::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(NnetError::InvalidSpec("pool window/stride must be > 0".into()));
                }
                Shape::new(
                    input.n,
                    pooled_len(input.h, window, stride),
                    pooled_len(input.w, window, stride),
                    input.c,
                )
            }
            Self::Fc { out_units } => Shape::new(input.n, 1, 1, out_units),
        };
        if out.item_len() == 0 {
            return Err(NnetError::InvalidSpec(format!(
                "{} produces an empty output from {input}",
                self.kind()
            )));
        }
        if let Self::Dropout { rate } = *self {
            if !(0.0..1.0).contains(&rate) {
                return Err(NnetError::InvalidSpec(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        Ok(out)
    }

    /// Learnable parameter count given the input shape.
    pub fn param_count(&self, input: Shape) -> usize {
        match *self {
            Self::Conv {
                out_channels,
                kernel,
                ..
            } => kernel * kernel * input.c * out_channels + out_channels,
            Self::Fc { out_units } => input.item_len() * out_units + out_units,
            _ => 0,
        }
    }
}

/// An input branch: its patch shape and layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub name: String,
    /// `[height, width, channels]` of one input patch.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl StreamSpec {
    pub fn input_shape(&self) -> Shape {
        Shape::new(1, self.input[0], self.input[1], self.input[2])
    }
}

/// Weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with `std = sqrt(2 / fan_in)`.
    Msra,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self::Gaussian { std: 0.01 }
    }
}

/// A network with one or more input streams. With several streams their
/// outputs are concatenated along channels before the trunk. The trunk must
/// end in an `Fc` producing the class logits; softmax cross-entropy is applied
/// on top by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub streams: Vec<StreamSpec>,
    pub trunk: Vec<LayerSpec>,
    #[serde(default)]
    pub init: InitScheme,
    pub seed: u64,
}

/// Shape after each layer, in build order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub entries: Vec<(String, Shape)>,
}

impl ShapeTrace {
    /// Looks up the shape after the named layer.
    pub fn get(&self, label: &str) -> Option<Shape> {
        self.entries.iter().find(|(l, _)| l == label).map(|&(_, s)| s)
    }
}

impl NetworkSpec {
    /// Human-readable labels for every layer, e.g. `invasion.conv2` or
    /// `trunk.fc1`. Numbering is per kind within a stream.
    pub fn layer_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut label = |prefix: &str, layers: &[LayerSpec]| {
            let mut counts = std::collections::HashMap::new();
            for l in layers {
                let c = counts.entry(l.kind()).or_insert(0usize);
                *c += 1;
                out.push(format!("{prefix}.{}{}", l.kind(), c));
            }
        };
        for s in &self.streams {
            label(&s.name, &s.layers);
        }
        label("trunk", &self.trunk);
        out
    }

    /// Validates the layer chain and returns every intermediate shape.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        if self.streams.is_empty() {
            return Err(NnetError::InvalidSpec("network has no input stream".into()));
        }
        let labels = self.layer_labels();
        let mut li = labels.iter();
        let mut entries = Vec::new();
        let mut ends = Vec::new();
        for s in &self.streams {
            let mut shape = s.input_shape();
            if shape.item_len() == 0 {
                return Err(NnetError::InvalidSpec(format!("stream {} has empty input", s.name)));
            }
            entries.push((format!("{}.input", s.name), shape));
            for l in &s.layers {
                shape = l.output_shape(shape)?;
                entries.push((li.next().cloned().unwrap_or_default(), shape));
            }
            ends.push(shape);
        }
        let mut shape = if ends.len() == 1 {
            ends[0]
        } else {
            let (h, w) = (ends[0].h, ends[0].w);
            if ends.iter().any(|e| e.h != h || e.w != w) {
                return Err(NnetError::InvalidSpec(format!(
                    "cannot concatenate streams with spatial sizes {:?}",
                    ends.iter().map(|e| (e.h, e.w)).collect::<Vec<_>>()
                )));
            }
            let c = ends.iter().map(|e| e.c).sum();
            let cat = Shape::new(1, h, w, c);
            entries.push(("concat".to_string(), cat));
            cat
        };
        for l in &self.trunk {
            shape = l.output_shape(shape)?;
            entries.push((li.next().cloned().unwrap_or_default(), shape));
        }
        match self.trunk.last().or_else(|| self.streams[0].layers.last()) {
            Some(LayerSpec::Fc { .. }) => {}
            _ => {
                return Err(NnetError::InvalidSpec(
                    "network must end with an fc layer producing logits".into(),
                ))
            }
        }
        if self.streams.len() > 1 && self.trunk.is_empty() {
            return Err(NnetError::InvalidSpec("multi-stream network needs a trunk".into()));
        }
        Ok(ShapeTrace { entries })
    }

    /// Number of output classes.
    pub fn classes(&self) -> Result<usize> {
        Ok(self.shape_trace()?.entries.last().map(|e| e.1.c).unwrap_or(0))
    }

    pub fn param_count(&self) -> Result<usize> {
        self.shape_trace()?;
        let mut total = 0;
        let mut ends = Vec::new();
        for s in &self.streams {
            let mut shape = s.input_shape();
            for l in &s.layers {
                total += l.param_count(shape);
                shape = l.output_shape(shape)?;
            }
            ends.push(shape);
        }
        let mut shape = Shape::new(1, ends[0].h, ends[0].w, ends.iter().map(|e| e.c).sum());
        for l in &self.trunk {
            total += l.param_count(shape);
            shape = l.output_shape(shape)?;
        }
        Ok(total)
    }
}
