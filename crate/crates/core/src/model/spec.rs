use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::conv_out_extent;

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Square-kernel convolution. `tap` marks its post-ReLU output as a
    /// regularized feature map; a tapped conv must be followed by `Relu`.
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        tap: bool,
    },
    Relu,
    MaxPool {
        #[serde(default = "two")]
        size: usize,
    },
    GlobalAvgPool,
    /// Fully connected layer over the flattened input.
    Linear {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            tap: false,
        }
    }

    pub fn tapped(self) -> Self {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                tap: true,
            },
            other => other,
        }
    }
}

/// Input shape `(C, H, W)` and layer list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Three 3x3 conv blocks with two 2x2 pools, global average pooling and
    /// a linear classifier. Every conv except the first is tapped.
    pub fn reference(input: [usize; 3], widths: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            input,
            layers: vec![
                LayerSpec::conv(widths[0], 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(widths[1], 3, 1, 1).tapped(),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(widths[2], 3, 1, 1).tapped(),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { out_features: classes },
            ],
        }
    }

    /// Checks the shape chain. Returns the per-sample input shape of each
    /// layer followed by the output shape of the last one.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.contains(&0) {
            return Err(Error::config(format!(
                "input extents must be positive, got {:?}",
                self.input
            )));
        }
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features }) if *out_features >= 2 => {}
            Some(LayerSpec::Linear { .. }) => return Err(Error::config("classifier needs at least 2 outputs")),
            _ => return Err(Error::config("model must end in a linear classifier")),
        }
        let mut shapes = vec![self.input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty").clone();
            let spatial = |what: &str| -> Result<()> {
                if cur.len() != 3 {
                    return Err(Error::config(format!(
                        "layer {i} ({what}) needs a (C, H, W) input, got {cur:?}"
                    )));
                }
                Ok(())
            };
            let next = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    tap,
                } => {
                    spatial("conv")?;
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: conv needs positive channels and kernel"
                        )));
                    }
                    if tap && !matches!(self.layers.get(i + 1), Some(LayerSpec::Relu)) {
                        return Err(Error::config(format!(
                            "layer {i}: a tapped conv must be followed by relu"
                        )));
                    }
                    let h = conv_out_extent(cur[1], kernel, stride, padding)
                        .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
                    let w = conv_out_extent(cur[2], kernel, stride, padding)
                        .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
                    vec![out_channels, h, w]
                }
                LayerSpec::Relu => cur.clone(),
                LayerSpec::MaxPool { size } => {
                    spatial("max-pool")?;
                    if size == 0 || cur[1] < size || cur[2] < size {
                        return Err(Error::config(format!(
                            "layer {i}: pool window {size} does not fit {}x{}",
                            cur[1], cur[2]
                        )));
                    }
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                LayerSpec::GlobalAvgPool => {
                    spatial("global-avg-pool")?;
                    vec![cur[0]]
                }
                LayerSpec::Linear { out_features } => {
                    if out_features == 0 {
                        return Err(Error::config(format!("layer {i}: linear needs outputs")));
                    }
                    vec![out_features]
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }
}
