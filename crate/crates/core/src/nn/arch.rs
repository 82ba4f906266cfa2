use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::layer::MaskedLayer;
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supported topologies.
///
/// Textual ids: `mlp:64-32` (hidden widths, may be empty as `mlp:`) and
/// `cnn:4-8-32` (two 3×3 convolutions with the given channel counts, the
/// second with stride 2, then a hidden fully connected layer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
    },
    Cnn {
        conv1: usize,
        conv2: usize,
        fc: usize,
    },
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("architecture id '{s}' lacks ':'")))?;
        let widths: Vec<usize> = if rest.is_empty() {
            vec![]
        } else {
            rest.split('-')
                .map(|w| {
                    w.parse::<usize>()
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| Error::Config(format!("bad width '{w}' in '{s}'")))
                })
                .collect::<Result<_>>()?
        };
        match kind {
            "mlp" => Ok(Architecture::Mlp { hidden: widths }),
            "cnn" => match widths[..] {
                [conv1, conv2, fc] => Ok(Architecture::Cnn { conv1, conv2, fc }),
                _ => Err(Error::Config(format!(
                    "cnn id needs three widths (conv1-conv2-fc), got '{s}'"
                ))),
            },
            _ => Err(Error::Config(format!("unknown architecture kind '{kind}'"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { hidden } => {
                let w: Vec<String> = hidden.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", w.join("-"))
            }
            Architecture::Cnn { conv1, conv2, fc } => write!(f, "cnn:{conv1}-{conv2}-{fc}"),
        }
    }
}

impl Architecture {
    /// Builds a freshly initialized network: Kaiming-uniform weights
    /// (`U(±√(6/fan_in))`) and zero biases.
    pub fn build(
        &self,
        input_shape: &[usize],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Network> {
        let mut layers = Vec::new();
        match self {
            Architecture::Mlp { hidden } => {
                let mut width: usize = input_shape.iter().product();
                if input_shape.len() > 1 {
                    layers.push(MaskedLayer::flatten());
                }
                for &h in hidden {
                    layers.push(linear(width, h, rng)?);
                    layers.push(MaskedLayer::relu());
                    width = h;
                }
                layers.push(linear(width, classes, rng)?);
            }
            Architecture::Cnn { conv1, conv2, fc } => {
                let [c, h, w] = match input_shape {
                    [c, h, w] => [*c, *h, *w],
                    _ => {
                        return Err(Error::Config(format!(
                            "cnn needs c×h×w inputs, got {input_shape:?}"
                        )))
                    }
                };
                layers.push(conv(c, *conv1, 3, 1, 1, rng)?);
                layers.push(MaskedLayer::relu());
                layers.push(conv(*conv1, *conv2, 3, 2, 1, rng)?);
                layers.push(MaskedLayer::relu());
                layers.push(MaskedLayer::flatten());
                let (h2, w2) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
                layers.push(linear(conv2 * h2 * w2, *fc, rng)?);
                layers.push(MaskedLayer::relu());
                layers.push(linear(*fc, classes, rng)?);
            }
        }
        Network::new(input_shape, layers, classes)
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

fn linear(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Result<MaskedLayer> {
    MaskedLayer::linear(kaiming(&[n_in, n_out], n_in, rng)?, Tensor::zeros(&[n_out]))
}

fn conv(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Result<MaskedLayer> {
    let fan_in = c_in * k * k;
    MaskedLayer::conv2d(
        kaiming(&[c_out, fan_in], fan_in, rng)?,
        Tensor::zeros(&[c_out]),
        k,
        stride,
        pad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_round_trip() {
        for id in ["mlp:64-32", "mlp:", "cnn:4-8-32"] {
            assert_eq!(id.parse::<Architecture>().unwrap().to_string(), id);
        }
        assert!("cnn:4-8".parse::<Architecture>().is_err());
        assert!("rnn:4".parse::<Architecture>().is_err());
        assert!("mlp:0".parse::<Architecture>().is_err());
    }

    #[test]
    fn cnn_shapes_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Architecture::Cnn {
            conv1: 4,
            conv2: 8,
            fc: 16,
        }
        .build(&[1, 12, 12], 10, &mut rng)
        .unwrap();
        assert_eq!(net.param_indices().len(), 4);
        let x = Tensor::zeros(&[3, 1, 12, 12]);
        assert_eq!(net.logits(&x).unwrap().shape(), &[3, 10]);
    }

    #[test]
    fn odd_image_sizes_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch: Architecture = "cnn:2-3-5".parse().unwrap();
        let net = arch.build(&[2, 7, 5], 3, &mut rng).unwrap();
        assert_eq!(
            net.logits(&Tensor::zeros(&[1, 2, 7, 5])).unwrap().shape(),
            &[1, 3]
        );
    }
}
