use std::fmt;

use crate::error::{Error, Result};

/// One layer of the fixed layer vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Weight and bias shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    /// Glorot fan-in and fan-out.
    pub(crate) fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv2d({in_channels}->{out_channels},k{kernel},s{stride},p{padding})"
            ),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs}->{outputs})"),
            other => f.write_str(other.kind()),
        }
    }
}

/// An ordered layer stack over a fixed `C x H x W` input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArchitecture {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    num_classes: usize,
    // per-layer output shape, excluding the batch axis
    shapes: Vec<Vec<usize>>,
    fingerprint: u64,
}

impl NetworkArchitecture {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        let shapes = infer_shapes(input_shape, &layers, num_classes)?;
        let fingerprint = fnv1a(canonical(input_shape, &layers, num_classes).as_bytes());
        Ok(NetworkArchitecture {
            input_shape,
            layers,
            num_classes,
            shapes,
            fingerprint,
        })
    }

    /// Three convolutions and two dense layers over a single-channel 28x28 input.
    pub fn reference() -> Self {
        Self::reference_for([1, 28, 28], 10)
    }

    /// The reference layer stack for an arbitrary input whose height and width are divisible by 4.
    pub fn reference_for(input_shape: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = input_shape;
        let flat = 64 * (h / 4) * (w / 4);
        Self::new(
            input_shape,
            vec![
                LayerSpec::conv(c, 32, 5, 2),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::conv(32, 64, 5, 2),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::conv(64, 64, 3, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(flat, 128),
                LayerSpec::Relu,
                LayerSpec::dense(128, num_classes),
                LayerSpec::Softmax,
            ],
            num_classes,
        )
        .expect("reference architecture is valid")
    }

    /// Same five-layer topology as [`reference`](Self::reference) with narrower channels.
    pub fn compact_for(input_shape: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = input_shape;
        let flat = 32 * (h / 4) * (w / 4);
        Self::new(
            input_shape,
            vec![
                LayerSpec::conv(c, 16, 5, 2),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::conv(16, 32, 5, 2),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::conv(32, 32, 3, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(flat, 64),
                LayerSpec::Relu,
                LayerSpec::dense(64, num_classes),
                LayerSpec::Softmax,
            ],
            num_classes,
        )
        .expect("compact architecture is valid")
    }

    /// One convolution and one dense layer on a 1x6x6 input, used for gradient checks.
    pub fn tiny() -> Self {
        Self::new(
            [1, 6, 6],
            vec![
                LayerSpec::conv(1, 2, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::dense(18, 3),
                LayerSpec::Softmax,
            ],
            3,
        )
        .expect("tiny architecture is valid")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Output shape of layer `i` (without the batch axis).
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Input shape of layer `i` (without the batch axis).
    pub fn layer_input_shape(&self, i: usize) -> Vec<usize> {
        if i == 0 {
            self.input_shape.to_vec()
        } else {
            self.shapes[i - 1].clone()
        }
    }

    /// Indices (into `layers`) of conv2d and dense layers, in order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.param_shapes())
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for NetworkArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&canonical(self.input_shape, &self.layers, self.num_classes))
    }
}

fn canonical(input_shape: [usize; 3], layers: &[LayerSpec], num_classes: usize) -> String {
    let [c, h, w] = input_shape;
    let body: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
    format!("in={c}x{h}x{w};{};classes={num_classes}", body.join(";"))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn infer_shapes(
    input_shape: [usize; 3],
    layers: &[LayerSpec],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    let bad = |layer: usize, reason: String| Error::InvalidArchitecture { layer, reason };
    if input_shape.contains(&0) {
        return Err(bad(0, format!("input shape {input_shape:?} has a zero dimension")));
    }
    if num_classes < 2 {
        return Err(bad(0, format!("need at least 2 classes, got {num_classes}")));
    }
    match layers.last() {
        Some(LayerSpec::Softmax) => {}
        _ => return Err(bad(layers.len(), "last layer must be softmax".into())),
    }
    let mut shape = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        shape = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(bad(i, format!("conv2d needs a CxHxW input, got {shape:?}")));
                }
                if shape[0] != in_channels {
                    return Err(bad(
                        i,
                        format!("conv2d expects {in_channels} input channels, got {}", shape[0]),
                    ));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(bad(i, "conv2d kernel, stride and channels must be nonzero".into()));
                }
                let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return Err(bad(i, format!("kernel {kernel} larger than padded input {h}x{w}")));
                }
                vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            LayerSpec::Relu => shape,
            LayerSpec::MaxPool2x2 => {
                if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                    return Err(bad(i, format!("maxpool2x2 needs CxHxW with H,W >= 2, got {shape:?}")));
                }
                vec![shape[0], shape[1] / 2, shape[2] / 2]
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Dense { inputs, outputs } => {
                if shape.len() != 1 {
                    return Err(bad(i, format!("dense needs a flat input, got {shape:?}")));
                }
                if shape[0] != inputs {
                    return Err(bad(i, format!("dense expects {inputs} inputs, got {}", shape[0])));
                }
                if outputs == 0 {
                    return Err(bad(i, "dense needs at least one output".into()));
                }
                vec![outputs]
            }
            LayerSpec::Softmax => {
                if i + 1 != layers.len() {
                    return Err(bad(i, "softmax must be the terminal layer".into()));
                }
                if shape.len() != 1 || shape[0] != num_classes {
                    return Err(bad(
                        i,
                        format!("softmax input {shape:?} does not match {num_classes} classes"),
                    ));
                }
                shape
            }
        };
        shapes.push(shape.clone());
    }
    Ok(shapes)
}
