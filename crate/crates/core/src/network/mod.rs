//! Quantized CNN description and end-to-end inference.
//!
//! Activations are laid out channel-major (`[c][y][x]`). Conv weights are
//! `[out][in][ky][kx]`, dense weights `[out][in]`; both lower to a matrix
//! with one row per input line and one column per output neuron, which is
//! the orientation programmed into crossbar tiles.

mod encode;
mod forward;
mod lowering;
mod mapping;

pub use encode::{pad_image, GrayImage, InputPipeline, LabeledImages, ThermometricEncoder};
pub use forward::{argmax, forward_hardware, forward_ideal, ideal_logits};
pub use lowering::{lower_conv_to_matmul, ConvLowering, LoweredMatrix};
pub use mapping::{map_network_to_tiles, MappedLayer, MappedNetwork, TilePlan};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::quant::{Precision, TernaryTensor, TernaryThreshold};

/// Activation function following a parametric layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Binary,
    /// Dead band in popcount units.
    Ternary(TernaryThreshold),
    /// Output layer: `sigmoid(scale * popcount)`.
    Sigmoid { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        /// `[out, in, kernel, kernel]`; `None` for an untrained architecture.
        weights: Option<TernaryTensor>,
    },
    MaxPool {
        size: usize,
    },
    Dense {
        out_units: usize,
        /// `[out, in]`; `None` for an untrained architecture.
        weights: Option<TernaryTensor>,
    },
    Activation(ActivationKind),
}

impl Layer {
    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }

    pub fn weights(&self) -> Option<&TernaryTensor> {
        match self {
            Layer::Conv2d { weights, .. } | Layer::Dense { weights, .. } => weights.as_ref(),
            _ => None,
        }
    }

    /// Shape of `weights` this layer expects for a given input shape.
    pub fn weight_shape(&self, input: [usize; 3]) -> Option<Vec<usize>> {
        match *self {
            Layer::Conv2d {
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, input[0], kernel, kernel]),
            Layer::Dense { out_units, .. } => Some(vec![out_units, input.iter().product()]),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match *self {
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                let l = lower_conv_to_matmul(out_channels, kernel, stride, input)?;
                Ok([out_channels, l.out_h, l.out_w])
            }
            Layer::MaxPool { size } => {
                if size == 0 || h < size || w < size {
                    return Err(shape_err!("max-pool {} does not fit a {}x{} map", size, h, w));
                }
                Ok([c, h / size, w / size])
            }
            Layer::Dense { out_units, .. } => {
                if out_units == 0 {
                    return Err(shape_err!("dense layer needs at least one unit"));
                }
                Ok([out_units, 1, 1])
            }
            Layer::Activation(_) => Ok(input),
        }
    }
}

/// A quantized network: layer list, precision and (optionally) trained weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDescription {
    /// `[channels, height, width]` of the encoded input.
    pub input_shape: [usize; 3],
    pub precision: Precision,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl NetworkDescription {
    pub const INPUT_SHAPE: [usize; 3] = [8, 32, 32];
    pub const CLASSES: usize = 10;

    /// LeNet-5 layout over thermometric input, without weights:
    /// conv 6@5x5, pool 2, conv 16@5x5, pool 2, dense 120, 84, 10.
    pub fn lenet(precision: Precision) -> Self {
        let hidden = match precision {
            Precision::Binary => ActivationKind::Binary,
            Precision::Ternary => ActivationKind::Ternary(TernaryThreshold::DEFAULT),
        };
        let conv = |out_channels| Layer::Conv2d {
            out_channels,
            kernel: 5,
            stride: 1,
            weights: None,
        };
        let dense = |out_units| Layer::Dense {
            out_units,
            weights: None,
        };
        NetworkDescription {
            input_shape: Self::INPUT_SHAPE,
            precision,
            num_classes: Self::CLASSES,
            layers: vec![
                conv(6),
                Layer::Activation(hidden),
                Layer::MaxPool { size: 2 },
                conv(16),
                Layer::Activation(hidden),
                Layer::MaxPool { size: 2 },
                dense(120),
                Layer::Activation(hidden),
                dense(84),
                Layer::Activation(hidden),
                dense(10),
                Layer::Activation(ActivationKind::Sigmoid { scale: 1.0 }),
            ],
        }
    }

    /// Input shape of every layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut s = self.input_shape;
        shapes.push(s);
        for layer in &self.layers {
            s = layer.output_shape(s)?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Structural checks; `require_weights` additionally demands trained weights.
    pub fn validate(&self, require_weights: bool) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(shape_err!("input shape {:?} has a zero dimension", self.input_shape));
        }
        let shapes = self.shapes()?;
        let n = self.layers.len();
        if n < 2 {
            return Err(config_err!("network needs at least one parametric layer and an output activation"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.layers.get(i + 1);
            let prev = if i > 0 { self.layers.get(i - 1) } else { None };
            match layer {
                Layer::Conv2d { .. } | Layer::Dense { .. } => {
                    if !matches!(next, Some(Layer::Activation(_))) {
                        return Err(config_err!("layer {}: a parametric layer must be followed by an activation", i));
                    }
                    let expect = layer.weight_shape(shapes[i]).unwrap();
                    match layer.weights() {
                        Some(w) => {
                            if w.shape() != expect.as_slice() {
                                return Err(shape_err!(
                                    "layer {}: weights have shape {:?}, expected {:?}",
                                    i,
                                    w.shape(),
                                    expect
                                ));
                            }
                            if w.precision() != self.precision
                                && w.data().iter().any(|v| !self.precision.admits(*v))
                            {
                                return Err(config_err!(
                                    "layer {}: weights are not valid {} trits",
                                    i,
                                    self.precision.name()
                                ));
                            }
                        }
                        None if require_weights => {
                            return Err(config_err!("layer {}: missing trained weights", i));
                        }
                        None => {}
                    }
                }
                Layer::Activation(kind) => {
                    if !prev.is_some_and(Layer::is_parametric) {
                        return Err(config_err!("layer {}: an activation must follow a conv or dense layer", i));
                    }
                    match kind {
                        ActivationKind::Sigmoid { scale } => {
                            if i != n - 1 {
                                return Err(config_err!("layer {}: sigmoid is only allowed as the output", i));
                            }
                            if !(scale.is_finite() && *scale > 0.0) {
                                return Err(config_err!("layer {}: sigmoid scale must be > 0", i));
                            }
                        }
                        ActivationKind::Ternary(_) if self.precision == Precision::Binary => {
                            return Err(config_err!("layer {}: ternary activation in a binary network", i));
                        }
                        _ => {}
                    }
                }
                Layer::MaxPool { .. } => {}
            }
        }
        if !matches!(self.layers[n - 1], Layer::Activation(ActivationKind::Sigmoid { .. })) {
            return Err(config_err!("the last layer must be the sigmoid output activation"));
        }
        let out = shapes[n];
        if out.iter().product::<usize>() != self.num_classes {
            return Err(shape_err!(
                "network produces {:?} outputs but declares {} classes",
                out,
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Total number of synaptic weights.
    pub fn weight_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weight_shape(shapes[i]))
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    /// Bytes the same weights would take as 32-bit floats.
    pub fn float32_bytes(&self) -> Result<usize> {
        Ok(self.weight_count()? * 4)
    }

    /// Indices of parametric layers in order.
    pub fn parametric_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parametric())
            .map(|(i, _)| i)
    }
}
