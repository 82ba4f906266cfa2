//! Adversarial Taylor saliency and mask selection.
//!
//! Removing weight `w` changes the loss by `ΔL ≈ (∂L/∂w)·Δw` with `Δw = −w`,
//! so the first-order saliency of a weight is `|g·w|`. Scores are averaged
//! over adversarial batches, then the lowest-scoring weights are masked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Score carried by weights whose mask is already zero. Below every real score,
/// so such weights stay masked and are never re-ranked against live ones.
pub const ALREADY_PRUNED: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    /// Index into `Network::layers`.
    pub layer: usize,
    /// Position among parameterized layers.
    pub ordinal: usize,
    pub prunable: bool,
    /// Same shape as the layer weight.
    pub scores: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub layers: Vec<LayerScores>,
    pub batch_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    Global,
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub sparsity: f64,
    #[serde(default = "default_scope")]
    pub scope: PruneScope,
    /// Parameterized-layer ordinals exempt from pruning.
    #[serde(default)]
    pub protected: Vec<usize>,
}

fn default_scope() -> PruneScope {
    PruneScope::Global
}

impl PruneSpec {
    pub fn global(sparsity: f64) -> Self {
        Self {
            sparsity,
            scope: PruneScope::Global,
            protected: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::invalid(format!(
                "sparsity must lie in [0, 1), got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// How weights are ranked before masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyKind {
    /// `|∂L_CE/∂w · w|` on adversarial batches.
    AdversarialTaylor,
    /// `|w|`; the classic magnitude-pruning baseline.
    Magnitude,
}

/// Mean `|g ⊙ w|` over labelled batches, using effective weights.
pub fn saliency<I>(net: &Network, batches: I) -> Result<SaliencyMap>
where
    I: IntoIterator<Item = (Tensor, Vec<usize>)>,
{
    let idx = net.param_indices();
    let mut acc: Vec<Tensor> = idx
        .iter()
        .map(|&i| Tensor::zeros(net.layers()[i].weight().unwrap().shape()))
        .collect();
    let effective: Vec<Tensor> = idx
        .iter()
        .map(|&i| net.layers()[i].effective_weight().unwrap())
        .collect();
    let mut count = 0;
    for (x, y) in batches {
        let (_, grads) = net.loss_and_gradients(&x, &y)?;
        for ((a, &i), w) in acc.iter_mut().zip(&idx).zip(&effective) {
            let g = &grads.layers[i].as_ref().unwrap().weight;
            for ((s, gv), wv) in a.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                *s += (gv * wv).abs();
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("saliency needs at least one batch"));
    }
    let inv = 1.0 / count as f64;
    Ok(build_map(
        net,
        acc.into_iter().map(|t| t.scale(inv)).collect(),
        count,
    ))
}

/// `|w|` for every effective weight.
pub fn magnitude_saliency(net: &Network) -> SaliencyMap {
    let scores = net
        .param_indices()
        .iter()
        .map(|&i| net.layers()[i].effective_weight().unwrap().map(f64::abs))
        .collect();
    build_map(net, scores, 0)
}

fn build_map(net: &Network, scores: Vec<Tensor>, batch_count: usize) -> SaliencyMap {
    let layers = net
        .param_indices()
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(ordinal, (layer, mut scores))| {
            let l = &net.layers()[layer];
            for (s, z) in scores.data_mut().iter_mut().zip(l.mask().unwrap().data()) {
                if *z == 0.0 {
                    *s = ALREADY_PRUNED;
                }
            }
            LayerScores {
                layer,
                ordinal,
                prunable: l.prunable,
                scores,
            }
        })
        .collect();
    SaliencyMap {
        layers,
        batch_count,
    }
}

fn prune_count(sparsity: f64, n: usize) -> usize {
    // The epsilon absorbs representation error in products like 0.9 · 10.
    ((sparsity * n as f64) + 1e-9).floor() as usize
}

/// Masks the `⌊p·N⌋` lowest-scoring weights; ties break by (layer, flat index).
///
/// Returns one mask per parameterized layer, in layer order. Weights already
/// marked [`ALREADY_PRUNED`] stay masked even beyond the requested count.
pub fn select_mask(s: &SaliencyMap, spec: &PruneSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let selectable = |l: &LayerScores| l.prunable && !spec.protected.contains(&l.ordinal);
    for l in &s.layers {
        if l.scores.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "layer {} has non-finite scores",
                l.layer
            )));
        }
    }
    let mut masks: Vec<Tensor> = s
        .layers
        .iter()
        .map(|l| {
            l.scores
                .map(|v| if v == ALREADY_PRUNED { 0.0 } else { 1.0 })
        })
        .collect();

    let groups: Vec<Vec<usize>> = match spec.scope {
        PruneScope::Global => vec![(0..s.layers.len())
            .filter(|&k| selectable(&s.layers[k]))
            .collect()],
        PruneScope::PerLayer => (0..s.layers.len())
            .filter(|&k| selectable(&s.layers[k]))
            .map(|k| vec![k])
            .collect(),
    };
    for group in groups {
        let mut entries: Vec<(f64, usize, usize)> = group
            .iter()
            .flat_map(|&k| {
                s.layers[k]
                    .scores
                    .data()
                    .iter()
                    .enumerate()
                    .map(move |(j, &v)| (v, k, j))
            })
            .collect();
        let n = entries.len();
        let k = prune_count(spec.sparsity, n);
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, layer, j) in &entries[..k] {
            masks[layer].data_mut()[j] = 0.0;
        }
    }
    Ok(masks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneRatio {
    pub layer: usize,
    pub pruned: usize,
    pub total: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerPruneRatio>,
    pub pruned: usize,
    pub total: usize,
    pub global_ratio: f64,
}

/// Fraction of masked weights per prunable layer and overall.
pub fn prune_report(net: &Network) -> PruneReport {
    let layers: Vec<LayerPruneRatio> = net
        .param_indices()
        .into_iter()
        .filter(|&i| net.layers()[i].prunable)
        .map(|i| {
            let l = &net.layers()[i];
            let total = l.weight().unwrap().len();
            let pruned = l.pruned_count();
            LayerPruneRatio {
                layer: i,
                pruned,
                total,
                ratio: pruned as f64 / total as f64,
            }
        })
        .collect();
    let pruned = layers.iter().map(|l| l.pruned).sum();
    let total: usize = layers.iter().map(|l| l.total).sum();
    PruneReport {
        layers,
        pruned,
        total,
        global_ratio: if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        },
    }
}

/// Independent Bernoulli masks: each entry of parameterized layer `j` is zero
/// with probability `alphas[j]`.
pub fn random_bernoulli_masks(net: &Network, alphas: &[f64], seed: u64) -> Result<Vec<Tensor>> {
    let idx = net.param_indices();
    if alphas.len() != idx.len() {
        return Err(Error::dim(format!(
            "{} drop rates for {} parameterized layers",
            alphas.len(),
            idx.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::invalid(format!(
            "drop rate must lie in [0, 1), got {a}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(idx
        .iter()
        .zip(alphas)
        .map(|(&i, &alpha)| {
            let w = net.layers()[i].weight().unwrap();
            let data = (0..w.len())
                .map(|_| {
                    if rng.random::<f64>() < alpha {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect();
            Tensor::new(w.shape(), data).unwrap()
        })
        .collect())
}
