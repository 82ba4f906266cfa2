use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// `z = Wᵀa + b` with `W` stored `in × out`.
    Linear,
    /// `Z = W·A + b` with `W` stored `c_out × (c_in·k²)` and `A` the im2col patches.
    Conv2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Flatten,
}

/// Weight, binary mask and bias of a parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub(crate) weight: Tensor,
    pub(crate) mask: Tensor,
    pub(crate) bias: Tensor,
}

/// One layer of a masked feed-forward network. Forward and backward passes
/// always see the effective weight `W ⊙ Z`; biases are never masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedLayer {
    pub kind: LayerKind,
    pub(crate) params: Option<Params>,
    pub prunable: bool,
}

impl MaskedLayer {
    /// Fully connected layer from an `in × out` weight and `out` bias.
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weight.matrix_dims("linear weight")?;
        if bias.len() != out {
            return Err(Error::dim(format!(
                "linear bias has {} entries, expected {out}",
                bias.len()
            )));
        }
        let bias = bias.reshape(&[out])?;
        Ok(Self::with_params(LayerKind::Linear, weight, bias))
    }

    /// Convolution from a `c_out × (c_in·k²)` weight and `c_out` bias.
    pub fn conv2d(
        weight: Tensor,
        bias: Tensor,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (c_out, patch) = weight.matrix_dims("conv weight")?;
        if kernel == 0 || stride == 0 || patch % (kernel * kernel) != 0 {
            return Err(Error::dim(format!(
                "conv weight width {patch} is not a multiple of kernel² = {}",
                kernel * kernel
            )));
        }
        if bias.len() != c_out {
            return Err(Error::dim(format!(
                "conv bias has {} entries, expected {c_out}",
                bias.len()
            )));
        }
        let bias = bias.reshape(&[c_out])?;
        Ok(Self::with_params(
            LayerKind::Conv2d {
                kernel,
                stride,
                pad,
            },
            weight,
            bias,
        ))
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            params: None,
            prunable: false,
        }
    }

    pub fn flatten() -> Self {
        Self {
            kind: LayerKind::Flatten,
            params: None,
            prunable: false,
        }
    }

    fn with_params(kind: LayerKind, weight: Tensor, bias: Tensor) -> Self {
        let mask = Tensor::ones(weight.shape());
        Self {
            kind,
            params: Some(Params { weight, mask, bias }),
            prunable: true,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        self.params.is_some()
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.params.as_ref().map(|p| &p.weight)
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.params.as_ref().map(|p| &p.mask)
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.params.as_ref().map(|p| &p.bias)
    }

    /// `W ⊙ Z`.
    pub fn effective_weight(&self) -> Option<Tensor> {
        self.params.as_ref().map(|p| {
            p.weight
                .hadamard(&p.mask)
                .expect("mask shape matches weight")
        })
    }

    pub(crate) fn params_mut(&mut self) -> Option<&mut Params> {
        self.params.as_mut()
    }

    pub(crate) fn set_weight(&mut self, w: Tensor) -> Result<()> {
        let p = self.require_params_mut()?;
        p.weight.check_same_shape(&w)?;
        p.weight = w;
        Ok(())
    }

    pub(crate) fn set_bias(&mut self, b: Tensor) -> Result<()> {
        let p = self.require_params_mut()?;
        p.bias.check_same_shape(&b)?;
        p.bias = b;
        Ok(())
    }

    pub(crate) fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        let p = self.require_params_mut()?;
        p.weight.check_same_shape(&mask)?;
        if mask.data().iter().any(|&z| z != 0.0 && z != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        p.mask = mask;
        Ok(())
    }

    fn require_params_mut(&mut self) -> Result<&mut Params> {
        self.params
            .as_mut()
            .ok_or_else(|| Error::invalid(format!("{:?} layer has no parameters", self.kind)))
    }

    /// Count of masked-out weights.
    pub fn pruned_count(&self) -> usize {
        self.mask()
            .map_or(0, |m| m.data().iter().filter(|&&z| z == 0.0).count())
    }
}
