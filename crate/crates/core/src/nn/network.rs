//! Masked feed-forward networks with hand-written reverse-mode gradients.
//!
//! A fully connected layer computes `z = Wᵀa + b` and receives
//! `∇_W L = a (∇_z L)ᵀ`, summed over the batch. A convolution lowers its input
//! to patches `A` with [`im2col`](crate::tensor::im2col), computes `Z = W·A + b`
//! and receives `∇_W L = Σ_i ∇_{Z_i} L · A_iᵀ` over spatial positions `i`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::layer::{LayerKind, MaskedLayer};
use super::loss::cross_entropy;
use crate::error::{Error, Result};
use crate::tensor::{
    col2im_add, im2col_into, matmul_into, matmul_nt_into, matmul_tn_into, ConvGeometry, Tensor,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<MaskedLayer>,
    input_shape: Vec<usize>,
    classes: usize,
    /// Per-sample input shape of every layer, plus the output shape last.
    shapes: Vec<Vec<usize>>,
    /// Bumped on every mutation; caches from an older generation are stale.
    #[serde(skip, default = "fresh_generation")]
    generation: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && self.classes == other.classes
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input `a` of each layer; for a ReLU this is the pre-activation `z`.
    inputs: Vec<Tensor>,
    /// im2col patches per sample, for convolution layers.
    patches: Vec<Option<Vec<f64>>>,
    effective: Vec<Option<Tensor>>,
}

impl ForwardCache {
    pub fn layer_input(&self, layer: usize) -> &Tensor {
        &self.inputs[layer]
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    /// `∂L/∂(W ⊙ Z)`, i.e. reported before the mask is applied.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer; `None` for parameter-free layers.
    pub layers: Vec<Option<ParamGrad>>,
    pub input: Tensor,
}

impl Gradients {
    /// Weight gradient gated by each layer's mask: `∂L/∂W = ∂L/∂W̃ ⊙ Z`.
    pub fn masked_weight(&self, net: &Network, layer: usize) -> Option<Tensor> {
        let g = self.layers[layer].as_ref()?;
        let z = net.layers[layer].mask()?;
        Some(g.weight.hadamard(z).expect("gradient shape matches mask"))
    }
}

impl Network {
    /// Assembles a network and checks that adjacent layer shapes compose.
    pub fn new(input_shape: &[usize], layers: Vec<MaskedLayer>, classes: usize) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        let mut cur = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            cur = output_shape(layer, &cur)
                .map_err(|e| Error::dim(format!("layer {i} ({:?}): {e}", layer.kind)))?;
            shapes.push(cur.clone());
        }
        if cur != [classes] {
            return Err(Error::dim(format!(
                "network output shape {cur:?} does not match {classes} classes"
            )));
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            classes,
            shapes,
            generation: fresh_generation(),
        })
    }

    pub fn layers(&self) -> &[MaskedLayer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Indices of layers that carry weights.
    pub fn param_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parameterized())
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weight())
            .map(Tensor::len)
            .sum()
    }

    /// Mutable access to a layer. Invalidates existing forward caches.
    pub fn layer_mut(&mut self, i: usize) -> &mut MaskedLayer {
        self.generation = fresh_generation();
        &mut self.layers[i]
    }

    pub fn set_weight(&mut self, i: usize, w: Tensor) -> Result<()> {
        self.layer_mut(i).set_weight(w)
    }

    pub fn set_bias(&mut self, i: usize, b: Tensor) -> Result<()> {
        self.layer_mut(i).set_bias(b)
    }

    pub fn set_mask(&mut self, i: usize, z: Tensor) -> Result<()> {
        self.layer_mut(i).set_mask(z)
    }

    /// Masks for every parameterized layer, in layer order.
    pub fn masks(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .filter_map(|l| l.mask().cloned())
            .collect()
    }

    /// Sets masks for the parameterized layers, in layer order.
    pub fn set_masks(&mut self, masks: &[Tensor]) -> Result<()> {
        let idx = self.param_indices();
        if idx.len() != masks.len() {
            return Err(Error::dim(format!(
                "{} masks for {} parameterized layers",
                masks.len(),
                idx.len()
            )));
        }
        for (i, z) in idx.into_iter().zip(masks) {
            self.set_mask(i, z.clone())?;
        }
        Ok(())
    }

    /// Overwrites masked-out raw weights with zero. Does not change the function.
    pub fn zero_masked_weights(&mut self) {
        self.generation = fresh_generation();
        for l in &mut self.layers {
            if let Some(p) = l.params_mut() {
                for (w, z) in p.weight.data_mut().iter_mut().zip(p.mask.data()) {
                    if *z == 0.0 {
                        *w = 0.0;
                    }
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "input shape {s:?} does not match [batch, {:?}]",
                self.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Logits for a batch `x[batch × input_shape]` without retaining activations.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run_forward(x, false)?.0)
    }

    /// Logits and the activation cache needed by [`Network::backward`].
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (logits, cache) = self.run_forward(x, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn run_forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        let batch = self.check_input(x)?;
        let mut inputs = Vec::new();
        let mut patches = Vec::new();
        let mut effective = Vec::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let w_eff = layer.effective_weight();
            let mut layer_patches = None;
            let next = match layer.kind {
                LayerKind::Linear => {
                    let w = w_eff.as_ref().unwrap();
                    let b = layer.bias().unwrap().data();
                    let (n_in, n_out) = (in_shape[0], out_shape[0]);
                    let mut out = Vec::with_capacity(batch * n_out);
                    for _ in 0..batch {
                        out.extend_from_slice(b);
                    }
                    matmul_into(cur.data(), w.data(), &mut out, batch, n_in, n_out);
                    Tensor::new(&[batch, n_out], out)?
                }
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    pad,
                } => {
                    let g = ConvGeometry::new(
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        kernel,
                        stride,
                        pad,
                    )?;
                    let w = w_eff.as_ref().unwrap();
                    let b = layer.bias().unwrap().data();
                    let (plen, pos, c_out) = (g.patch_len(), g.out_positions(), out_shape[0]);
                    let in_len = g.channels * g.height * g.width;
                    let mut all_cols = vec![0.0; batch * plen * pos];
                    let mut out = vec![0.0; batch * c_out * pos];
                    for s in 0..batch {
                        let cols = &mut all_cols[s * plen * pos..(s + 1) * plen * pos];
                        im2col_into(&cur.data()[s * in_len..(s + 1) * in_len], &g, cols);
                        let o = &mut out[s * c_out * pos..(s + 1) * c_out * pos];
                        for (co, bv) in b.iter().enumerate() {
                            o[co * pos..(co + 1) * pos].fill(*bv);
                        }
                        matmul_into(w.data(), cols, o, c_out, plen, pos);
                    }
                    if keep {
                        layer_patches = Some(all_cols);
                    }
                    let mut shape = vec![batch];
                    shape.extend_from_slice(out_shape);
                    Tensor::new(&shape, out)?
                }
                LayerKind::Relu => cur.map(|v| v.max(0.0)),
                LayerKind::Flatten => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(out_shape);
                    cur.clone().reshape(&shape)?
                }
            };
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
                patches.push(layer_patches);
                effective.push(w_eff);
            } else {
                cur = next;
            }
        }
        let cache = keep.then_some(ForwardCache {
            generation: self.generation,
            inputs,
            patches,
            effective,
        });
        Ok((cur, cache))
    }

    /// Reverse pass from `∂L/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
        self.run_backward(cache, grad_logits, true)
    }

    fn run_backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &Tensor,
        want_params: bool,
    ) -> Result<Gradients> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache does not belong to the current network state".into(),
            ));
        }
        let batch = cache.inputs[0].shape()[0];
        if grad_logits.shape() != [batch, self.classes] {
            return Err(Error::dim(format!(
                "gradient shape {:?} does not match logits [{batch}, {}]",
                grad_logits.shape(),
                self.classes
            )));
        }
        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let a = &cache.inputs[i];
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            g = match layer.kind {
                LayerKind::Linear => {
                    let w = cache.effective[i].as_ref().unwrap();
                    let (n_in, n_out) = (in_shape[0], out_shape[0]);
                    if want_params {
                        let mut dw = vec![0.0; n_in * n_out];
                        matmul_tn_into(a.data(), g.data(), &mut dw, batch, n_in, n_out);
                        let mut db = vec![0.0; n_out];
                        for s in 0..batch {
                            for (d, v) in db.iter_mut().zip(g.row(s)) {
                                *d += v;
                            }
                        }
                        grads[i] = Some(ParamGrad {
                            weight: Tensor::new(&[n_in, n_out], dw)?,
                            bias: Tensor::new(&[n_out], db)?,
                        });
                    }
                    let mut dx = vec![0.0; batch * n_in];
                    matmul_nt_into(g.data(), w.data(), &mut dx, batch, n_out, n_in);
                    Tensor::new(&[batch, n_in], dx)?
                }
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    pad,
                } => {
                    let geo = ConvGeometry::new(
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        kernel,
                        stride,
                        pad,
                    )?;
                    let w = cache.effective[i].as_ref().unwrap();
                    let cols = cache.patches[i].as_ref().unwrap();
                    let (plen, pos, c_out) = (geo.patch_len(), geo.out_positions(), out_shape[0]);
                    let in_len = geo.channels * geo.height * geo.width;
                    let mut dw = vec![0.0; c_out * plen];
                    let mut db = vec![0.0; c_out];
                    let mut dx = vec![0.0; batch * in_len];
                    let mut dcols = vec![0.0; plen * pos];
                    for s in 0..batch {
                        let dz = &g.data()[s * c_out * pos..(s + 1) * c_out * pos];
                        if want_params {
                            let a_s = &cols[s * plen * pos..(s + 1) * plen * pos];
                            matmul_nt_into(dz, a_s, &mut dw, c_out, pos, plen);
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += dz[co * pos..(co + 1) * pos].iter().sum::<f64>();
                            }
                        }
                        dcols.fill(0.0);
                        matmul_tn_into(w.data(), dz, &mut dcols, c_out, plen, pos);
                        col2im_add(&dcols, &geo, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                    if want_params {
                        grads[i] = Some(ParamGrad {
                            weight: Tensor::new(&[c_out, plen], dw)?,
                            bias: Tensor::new(&[c_out], db)?,
                        });
                    }
                    Tensor::new(a.shape(), dx)?
                }
                LayerKind::Relu => a.zip_map(&g, |z, d| if z > 0.0 { d } else { 0.0 })?,
                LayerKind::Flatten => g.reshape(a.shape())?,
            };
        }
        Ok(Gradients {
            layers: grads,
            input: g,
        })
    }

    /// `(∂logits/∂x)ᵀ · v` for an arbitrary upstream vector `v[batch × classes]`.
    pub fn input_vjp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (_, cache) = self.forward(x)?;
        Ok(self.run_backward(&cache, v, false)?.input)
    }

    /// `∂L_CE/∂x` for a labelled batch, skipping weight gradients.
    pub fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        Ok(self.loss_and_input_gradient(x, labels)?.1)
    }

    pub fn loss_and_input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let (logits, cache) = self.forward(x)?;
        let (loss, gl) = cross_entropy(&logits, labels)?;
        Ok((loss, self.run_backward(&cache, &gl, false)?.input))
    }

    /// Mean cross-entropy and all parameter gradients for a labelled batch.
    pub fn loss_and_gradients(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (logits, cache) = self.forward(x)?;
        let (loss, gl) = cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&cache, &gl)?))
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(cross_entropy(&self.logits(x)?, labels)?.0)
    }

    /// Rescales parameterized layer `param_layer` by `mu` and the next
    /// parameterized layer's weight by `1/mu`. With only ReLU/flatten layers in
    /// between this leaves the network function unchanged.
    pub fn apply_scaling(&self, param_layer: usize, mu: f64) -> Result<Network> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::invalid(format!(
                "scaling factor must be positive, got {mu}"
            )));
        }
        let idx = self.param_indices();
        if param_layer + 1 >= idx.len() {
            return Err(Error::invalid(format!(
                "parameterized layer {param_layer} has no successor ({} parameterized layers)",
                idx.len()
            )));
        }
        let (first, second) = (idx[param_layer], idx[param_layer + 1]);
        let between = &self.layers[first + 1..second];
        if !between.iter().any(|l| l.kind == LayerKind::Relu)
            || between
                .iter()
                .any(|l| !matches!(l.kind, LayerKind::Relu | LayerKind::Flatten))
        {
            return Err(Error::invalid(
                "scaled layers must be separated by a ReLU and nothing but ReLU/flatten",
            ));
        }
        let mut out = self.clone();
        out.generation = fresh_generation();
        {
            let p = out.layers[first].params_mut().unwrap();
            p.weight = p.weight.scale(mu);
            p.bias = p.bias.scale(mu);
        }
        {
            let p = out.layers[second].params_mut().unwrap();
            p.weight = p.weight.scale(1.0 / mu);
        }
        Ok(out)
    }
}

fn output_shape(layer: &MaskedLayer, input: &[usize]) -> Result<Vec<usize>> {
    match layer.kind {
        LayerKind::Linear => {
            let w = layer.weight().unwrap();
            if input.len() != 1 || input[0] != w.rows() {
                return Err(Error::dim(format!(
                    "linear weight {:?} cannot take input {input:?}",
                    w.shape()
                )));
            }
            Ok(vec![w.cols()])
        }
        LayerKind::Conv2d {
            kernel,
            stride,
            pad,
        } => {
            let w = layer.weight().unwrap();
            let [c, h, wd] = match input {
                [c, h, w] => [*c, *h, *w],
                _ => return Err(Error::dim(format!("conv needs c×h×w input, got {input:?}"))),
            };
            if w.cols() != c * kernel * kernel {
                return Err(Error::dim(format!(
                    "conv weight {:?} expects {} input channels, got {c}",
                    w.shape(),
                    w.cols() / (kernel * kernel)
                )));
            }
            let g = ConvGeometry::new(c, h, wd, kernel, stride, pad)?;
            Ok(vec![w.rows(), g.out_height(), g.out_width()])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}
