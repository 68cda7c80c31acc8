use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    Flatten,
    Activation {
        activation: Activation,
    },
}

/// Ordered layer specs over a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// Shape of one sample: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Per-sample input and output shapes of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerShapes {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

pub const MNIST_SHAPE: [usize; 3] = [1, 28, 28];
pub const MNIST_CLASSES: usize = 10;

impl Architecture {
    /// ReLU MLP with a scalar output, as used for synthetic regression.
    pub fn regression_mlp(input_dim: usize, hidden: &[usize]) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec::Dense { units, activation: Activation::Relu })
            .collect();
        layers.push(LayerSpec::Dense { units: 1, activation: Activation::Identity });
        Self {
            name: format!("regression-mlp-{}", hidden.len()),
            input_shape: vec![input_dim],
            layers,
        }
    }

    /// Three fully connected layers over flattened 28x28 images.
    pub fn mnist_mlp() -> Self {
        Self {
            name: "mlp".into(),
            input_shape: MNIST_SHAPE.to_vec(),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 512, activation: Activation::Relu },
                LayerSpec::Dense { units: 256, activation: Activation::Relu },
                LayerSpec::Dense { units: MNIST_CLASSES, activation: Activation::Identity },
            ],
        }
    }

    /// Three convolutions and one fully connected classifier, with the given
    /// channel counts. The first is 3x3; the other two are 4x4 with stride 2,
    /// which halves 28 -> 14 -> 7 exactly.
    pub fn mnist_cnn(name: &str, channels: [usize; 3]) -> Self {
        let conv = |filters, kernel, stride| LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding: 1,
            activation: Activation::Relu,
        };
        Self {
            name: name.into(),
            input_shape: MNIST_SHAPE.to_vec(),
            layers: vec![
                conv(channels[0], 3, 1),
                conv(channels[1], 4, 2),
                conv(channels[2], 4, 2),
                LayerSpec::Flatten,
                LayerSpec::Dense { units: MNIST_CLASSES, activation: Activation::Identity },
            ],
        }
    }

    /// Named classification presets: `mlp`, `base`, `mini`, `micro`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::mnist_mlp()),
            "base" => Ok(Self::mnist_cnn("base", [32, 64, 64])),
            "mini" => Ok(Self::mnist_cnn("mini", [16, 32, 32])),
            "micro" => Ok(Self::mnist_cnn("micro", [8, 16, 16])),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected mlp, base, mini or micro)"
            ))),
        }
    }

    /// Checks that consecutive layers compose and returns their shapes.
    pub(crate) fn layer_shapes(&self) -> Result<Vec<LayerShapes>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::dim(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::dim("architecture has no layers"));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                LayerSpec::Dense { units, .. } => {
                    if shape.len() != 1 {
                        return Err(Error::dim(format!(
                            "layer {i}: dense input must be flat, got {shape:?}"
                        )));
                    }
                    vec![*units]
                }
                LayerSpec::Conv2d { filters, kernel, stride, padding, .. } => {
                    let [_, h, w] = shape[..] else {
                        return Err(Error::dim(format!(
                            "layer {i}: conv2d input must be [C, H, W], got {shape:?}"
                        )));
                    };
                    let size = |n: usize| -> Result<usize> {
                        let padded = n + 2 * padding;
                        if *stride == 0 || padded < *kernel || (padded - kernel) % stride != 0 {
                            return Err(Error::dim(format!(
                                "layer {i}: conv2d output size is not a positive integer"
                            )));
                        }
                        Ok((padded - kernel) / stride + 1)
                    };
                    vec![*filters, size(h)?, size(w)?]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Activation { .. } => shape.clone(),
            };
            if next.contains(&0) {
                return Err(Error::dim(format!("layer {i} has an empty output")));
            }
            out.push(LayerShapes { input: shape, output: next.clone() });
            shape = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().expect("non-empty").output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_compose() {
        for name in ["mlp", "base", "mini", "micro"] {
            let a = Architecture::preset(name).unwrap();
            assert_eq!(a.output_shape().unwrap(), vec![10], "{name}");
        }
        let shapes = Architecture::preset("micro").unwrap().layer_shapes().unwrap();
        assert_eq!(shapes[0].output, vec![8, 28, 28]);
        assert_eq!(shapes[1].output, vec![16, 14, 14]);
        assert_eq!(shapes[2].output, vec![16, 7, 7]);
        assert!(Architecture::preset("resnet18").is_err());
        assert_eq!(Architecture::regression_mlp(10, &[50, 50]).output_shape().unwrap(), vec![1]);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let a = Architecture {
            name: "bad".into(),
            input_shape: vec![1, 28, 28],
            layers: vec![LayerSpec::Dense { units: 4, activation: Activation::Relu }],
        };
        assert!(matches!(a.layer_shapes(), Err(Error::Dimension(_))));
    }
}
