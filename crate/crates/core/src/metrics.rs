//! Diagnostics: the log-Frobenius condition constraint, per-layer condition
//! numbers, sampled local Lipschitz constants and robustness radii, and
//! checks of the condition-number inequalities on live weights.
//!
//! Lipschitz values here are *lower bounds*: the maximum of sampled difference
//! quotients and the gradient norm at the center. Radii built from them are
//! diagnostics, not certificates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kappa_from_singular_values, svd, Kappa};
use crate::nn::{argmax_rows, LayerKind, Network};
use crate::tensor::{frobenius_norm_sq, Tensor};

/// Smoothing term inside the logarithm of the condition constraint.
pub const DEFAULT_TAU: f64 = 1e-4;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau must be positive, got {tau}")))
    }
}

/// `Σ_l log(τ + ‖W_l ⊙ Z_l‖_F²)` over parameterized layers.
pub fn condition_constraint_loss(net: &Network, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(net
        .layers()
        .iter()
        .filter_map(|l| l.effective_weight())
        .map(|w| (tau + frobenius_norm_sq(&w)).ln())
        .sum())
}

/// `∂/∂W_l = 2 W̃_l / (τ + ‖W̃_l‖_F²)`, zero on masked entries. One tensor per
/// parameterized layer, in layer order.
pub fn condition_constraint_grad(net: &Network, tau: f64) -> Result<Vec<Tensor>> {
    check_tau(tau)?;
    Ok(net
        .layers()
        .iter()
        .filter_map(|l| l.effective_weight())
        .map(|w| {
            let c = 2.0 / (tau + frobenius_norm_sq(&w));
            w.scale(c)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCondition {
    pub layer: usize,
    pub kappa: Kappa,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Singular values above the rank tolerance.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub layers: Vec<LayerCondition>,
    pub max_kappa: Kappa,
    pub epoch: Option<usize>,
}

pub fn layer_condition(layer: usize, w: &Tensor) -> Result<LayerCondition> {
    let s = svd(w, false)?.singular_values;
    let (rows, cols) = (w.rows(), w.cols());
    let tol = crate::linalg::rank_tolerance(rows, cols, s[0]);
    Ok(LayerCondition {
        layer,
        kappa: kappa_from_singular_values(&s, rows, cols),
        sigma_max: s[0],
        sigma_min: *s.last().unwrap(),
        rank: s.iter().filter(|&&v| v > tol && v > 0.0).count(),
    })
}

/// Condition numbers of every effective weight matrix (conv layers in their
/// `c_out × c_in·k²` layout).
pub fn condition_report(net: &Network) -> Result<ConditionReport> {
    let layers = net
        .param_indices()
        .into_iter()
        .map(|i| layer_condition(i, &net.layers()[i].effective_weight().unwrap()))
        .collect::<Result<Vec<_>>>()?;
    let max_kappa = layers
        .iter()
        .map(|l| l.kappa)
        .fold(Kappa::Finite(0.0), |a, b| if b > a { b } else { a });
    Ok(ConditionReport {
        layers,
        max_kappa,
        epoch: None,
    })
}

/// Norm index `q` of the Lipschitz constant; perturbations live in the dual
/// ball `B_p` with `1/p + 1/q = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LipschitzNorm {
    /// `q = 1`, perturbations in `B_∞`.
    L1,
    /// `q = 2`, perturbations in `B_2`.
    L2,
}

impl LipschitzNorm {
    /// `‖v‖_q`.
    pub fn norm(&self, v: &[f64]) -> f64 {
        match self {
            LipschitzNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            LipschitzNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// `‖v‖_p` for the dual exponent.
    pub fn dual_norm(&self, v: &[f64]) -> f64 {
        match self {
            LipschitzNorm::L1 => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            LipschitzNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// Uniform draw from the dual ball of radius `r`.
    pub fn sample_ball(&self, dim: usize, r: f64, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            LipschitzNorm::L1 => (0..dim).map(|_| rng.random_range(-r..=r)).collect(),
            LipschitzNorm::L2 => loop {
                let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    let rad = r * rng.random::<f64>().powf(1.0 / dim as f64);
                    break g.into_iter().map(|x| x * rad / n).collect();
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub norm: LipschitzNorm,
    pub samples: usize,
    pub radius: f64,
    /// The sample at which the estimate was taken.
    pub center: Vec<f64>,
    /// First class of the pair; the network's prediction for the unpaired estimate.
    pub predicted: usize,
    /// Second class of the pair.
    pub class: usize,
    /// `‖∇h(x)‖_q` at the center.
    pub gradient_norm: f64,
}

const EVAL_CHUNK: usize = 256;

fn single_sample(net: &Network, x: &Tensor) -> Result<Tensor> {
    let n = net.input_len();
    if x.len() != n {
        return Err(Error::dim(format!(
            "expected one sample of shape {:?}, got {:?}",
            net.input_shape(),
            x.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    x.clone().reshape(&shape)
}

/// Logits of `center + δ` for every δ in `deltas`.
fn perturbed_logits(net: &Network, center: &[f64], deltas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(deltas.len());
    for chunk in deltas.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * center.len());
        for d in chunk {
            data.extend(center.iter().zip(d).map(|(c, v)| c + v));
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(net.input_shape());
        let logits = net.logits(&Tensor::new(&shape, data)?)?;
        out.extend((0..chunk.len()).map(|i| logits.row(i).to_vec()));
    }
    Ok(out)
}

/// Sampled lower bound on the local Lipschitz constant of `h = g_ŷ − g_k` over
/// `B_p(x, r)`, where `ŷ` is the class predicted at `x`.
///
/// The estimate is the largest of `n` difference quotients
/// `|h(x+δ) − h(x)| / ‖δ‖_p` and the center gradient norm `‖∇h(x)‖_q`.
/// The δ draws come from a generator seeded with `seed`, so a larger `n`
/// extends the same sample sequence and never lowers the estimate.
pub fn local_lipschitz_estimate(
    net: &Network,
    x: &Tensor,
    k: usize,
    r: f64,
    q: LipschitzNorm,
    n: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let xs = single_sample(net, x)?;
    let yhat = argmax_rows(&net.logits(&xs)?)[0];
    if k == yhat {
        return Err(Error::invalid(format!(
            "class {k} is the predicted class; the margin function is identically zero"
        )));
    }
    pair_lipschitz_estimate(net, &xs, yhat, k, r, q, n, seed)
}

/// As [`local_lipschitz_estimate`] for `h = g_a − g_b` with a fixed class pair.
#[allow(clippy::too_many_arguments)]
pub fn pair_lipschitz_estimate(
    net: &Network,
    x: &Tensor,
    a: usize,
    b: usize,
    r: f64,
    q: LipschitzNorm,
    n: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("radius must be positive, got {r}")));
    }
    let c = net.classes();
    if a >= c || b >= c {
        return Err(Error::invalid(format!(
            "class pair ({a}, {b}) out of range for {c} classes"
        )));
    }
    let x = single_sample(net, x)?;
    let h = |row: &[f64]| row[a] - row[b];
    let h0 = h(net.logits(&x)?.row(0));

    let mut v = vec![0.0; c];
    v[a] += 1.0;
    v[b] -= 1.0;
    let grad = net.input_vjp(&x, &Tensor::new(&[1, c], v)?)?;
    let gradient_norm = q.norm(grad.data());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = net.input_len();
    let deltas: Vec<Vec<f64>> = (0..n).map(|_| q.sample_ball(dim, r, &mut rng)).collect();
    let outs = perturbed_logits(net, x.data(), &deltas)?;
    let mut best = gradient_norm;
    for (d, row) in deltas.iter().zip(&outs) {
        let dn = q.dual_norm(d);
        if dn > 0.0 {
            best = best.max((h(row) - h0).abs() / dn);
        }
    }
    Ok(LipschitzEstimate {
        value: best,
        norm: q,
        samples: n,
        radius: r,
        center: x.data().to_vec(),
        predicted: a,
        class: b,
        gradient_norm,
    })
}

/// `γ = min{ min_{k≠ŷ} (g_ŷ(x) − g_k(x)) / L̂ᵏ, r }` with sampled `L̂ᵏ`.
///
/// Because `L̂ᵏ` underestimates the true constant, `γ` may overestimate the
/// certified radius.
pub fn robustness_radius(
    net: &Network,
    x: &Tensor,
    r: f64,
    q: LipschitzNorm,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let xs = single_sample(net, x)?;
    let logits = net.logits(&xs)?;
    let yhat = argmax_rows(&logits)[0];
    let row = logits.row(0);
    let mut gamma = r;
    for k in (0..net.classes()).filter(|&k| k != yhat) {
        let margin = row[yhat] - row[k];
        if margin <= 0.0 {
            return Ok(0.0);
        }
        let est = local_lipschitz_estimate(net, &xs, k, r, q, n, seed)?;
        if est.value > 0.0 {
            gamma = gamma.min(margin / est.value);
        }
    }
    Ok(gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityBoundLayer {
    pub layer: usize,
    /// Induced 2-norm `σ_max(W)`.
    pub spectral_norm: f64,
    pub kappa: Kappa,
    /// `L / (2‖W‖)`.
    pub lhs: f64,
    pub holds: bool,
}

/// Evaluation of `½ · L / ‖W‖ ≤ κ(W)` on live weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityBoundReport {
    /// Sampled `L̂ᵏ` of the class-margin function.
    pub lipschitz: f64,
    /// Sampled ℓ2 Lipschitz constant of the whole logit map `x ↦ g(x)`
    /// (includes the Jacobian spectral norm at `x` as a candidate).
    pub output_lipschitz: f64,
    /// Per parameterized layer, with `L = lipschitz`.
    pub layers: Vec<SparsityBoundLayer>,
    /// For single-linear-layer networks: the map-level check with `L = output_lipschitz`.
    pub end_to_end: Option<SparsityBoundLayer>,
    /// `‖w_ŷ − w_k‖₁ · Π_j ‖W_j‖_{1,∞}` over the hidden layers.
    pub c1: f64,
    /// `‖w_ŷ − w_k‖₂ · Π_j ‖W_j‖_F` over the hidden layers.
    pub c2: f64,
    pub holds: bool,
}

fn bound_entry(layer: usize, w: &Tensor, lipschitz: f64) -> Result<SparsityBoundLayer> {
    let lc = layer_condition(layer, w)?;
    let lhs = if lc.sigma_max > 0.0 {
        lipschitz / (2.0 * lc.sigma_max)
    } else {
        f64::INFINITY
    };
    let holds = match lc.kappa {
        Kappa::Infinite => true,
        Kappa::Finite(k) => lhs <= k,
    };
    Ok(SparsityBoundLayer {
        layer,
        spectral_norm: lc.sigma_max,
        kappa: lc.kappa,
        lhs,
        holds,
    })
}

/// Jacobian of the logits at a single sample, `classes × input_len`.
pub fn logit_jacobian(net: &Network, x: &Tensor) -> Result<Tensor> {
    let xs = single_sample(net, x)?;
    let c = net.classes();
    let mut rows = Vec::with_capacity(c * net.input_len());
    for k in 0..c {
        let mut v = vec![0.0; c];
        v[k] = 1.0;
        rows.extend_from_slice(net.input_vjp(&xs, &Tensor::new(&[1, c], v)?)?.data());
    }
    Tensor::new(&[c, net.input_len()], rows)
}

/// Sampled ℓ2 Lipschitz constant of the logit map over `B_2(x, r)`.
pub fn output_lipschitz_estimate(
    net: &Network,
    x: &Tensor,
    r: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let xs = single_sample(net, x)?;
    let j = logit_jacobian(net, &xs)?;
    let mut best = svd(&j, false)?.singular_values[0];
    let base = net.logits(&xs)?.row(0).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deltas: Vec<Vec<f64>> = (0..n)
        .map(|_| LipschitzNorm::L2.sample_ball(net.input_len(), r, &mut rng))
        .collect();
    for (d, row) in deltas
        .iter()
        .zip(perturbed_logits(net, xs.data(), &deltas)?)
    {
        let dn = LipschitzNorm::L2.norm(d);
        if dn > 0.0 {
            let dy: Vec<f64> = row.iter().zip(&base).map(|(a, b)| a - b).collect();
            best = best.max(LipschitzNorm::L2.norm(&dy) / dn);
        }
    }
    Ok(best)
}

/// Checks `½ · L / ‖W‖ ≤ κ(W)` with `‖W‖` the spectral norm, per layer and,
/// for a single linear layer, for the map itself. Also reports the sparsity
/// constants `c₁`, `c₂` of the class pair `(ŷ, k)`.
pub fn check_sparsity_bound(
    net: &Network,
    x: &Tensor,
    k: usize,
    r: f64,
    q: LipschitzNorm,
    n: usize,
    seed: u64,
) -> Result<SparsityBoundReport> {
    let est = local_lipschitz_estimate(net, x, k, r, q, n, seed)?;
    let output_lipschitz = output_lipschitz_estimate(net, x, r, n, seed)?;
    let idx = net.param_indices();
    let layers = idx
        .iter()
        .map(|&i| bound_entry(i, &net.layers()[i].effective_weight().unwrap(), est.value))
        .collect::<Result<Vec<_>>>()?;
    let end_to_end = if idx.len() == 1 && net.layers()[idx[0]].kind == LayerKind::Linear {
        Some(bound_entry(
            idx[0],
            &net.layers()[idx[0]].effective_weight().unwrap(),
            output_lipschitz,
        )?)
    } else {
        None
    };
    let (c1, c2) = sparsity_constants(net, est.predicted, k);
    let holds = layers.iter().all(|l| l.holds) && end_to_end.as_ref().is_none_or(|l| l.holds);
    Ok(SparsityBoundReport {
        lipschitz: est.value,
        output_lipschitz,
        layers,
        end_to_end,
        c1,
        c2,
        holds,
    })
}

/// `(c₁, c₂)` for the class pair `(yhat, k)`. The last parameterized layer
/// supplies `w_ŷ − w_k`; all earlier ones contribute `‖W_j‖_{1,∞}` (the
/// ℓ∞-induced norm of the layer map, i.e. the largest ℓ1 norm of any unit's
/// incoming weights) and `‖W_j‖_F`, taken on the unmasked weights.
pub fn sparsity_constants(net: &Network, yhat: usize, k: usize) -> (f64, f64) {
    let idx = net.param_indices();
    let (last, hidden) = idx.split_last().expect("network has parameters");
    let lw = net.layers()[*last].effective_weight().unwrap();
    let diff: Vec<f64> = match net.layers()[*last].kind {
        LayerKind::Linear => (0..lw.rows())
            .map(|i| lw.get2(i, yhat) - lw.get2(i, k))
            .collect(),
        _ => lw
            .row(yhat)
            .iter()
            .zip(lw.row(k))
            .map(|(a, b)| a - b)
            .collect(),
    };
    let mut c1 = LipschitzNorm::L1.norm(&diff);
    let mut c2 = LipschitzNorm::L2.norm(&diff);
    for &i in hidden {
        let l = &net.layers()[i];
        let w = l.weight().unwrap();
        let inf_norm = match l.kind {
            LayerKind::Linear => (0..w.cols())
                .map(|j| (0..w.rows()).map(|r| w.get2(r, j).abs()).sum::<f64>())
                .fold(0.0, f64::max),
            _ => (0..w.rows())
                .map(|r| w.row(r).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
        };
        c1 *= inf_norm;
        c2 *= frobenius_norm_sq(w).sqrt();
    }
    (c1, c2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub probes: usize,
    pub violations: usize,
    pub kappa: Kappa,
}

/// Checks `(1/κ)(‖δx‖/‖x‖) ≤ ‖δy‖/‖y‖ ≤ κ(‖δx‖/‖x‖)` for `y = Wx`, `δy = Wδx`
/// on random probes. Wide matrices are probed through `Wᵀ`, which has the same
/// singular values and a trivial null space when `W` has full row rank.
/// Rank-deficient matrices have `κ = ∞` and are reported without probing.
pub fn sandwich_check(w: &Tensor, probes: usize, slack: f64, seed: u64) -> Result<SandwichReport> {
    let m = if w.rows() >= w.cols() {
        w.clone()
    } else {
        w.transpose()?
    };
    let s = svd(&m, false)?.singular_values;
    let kappa = kappa_from_singular_values(&s, m.rows(), m.cols());
    let Kappa::Finite(k) = kappa else {
        return Ok(SandwichReport {
            probes: 0,
            violations: 0,
            kappa,
        });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = m.cols();
    let l2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..m.rows())
            .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut violations = 0;
    for _ in 0..probes {
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let dx: Vec<f64> = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (nx, ndx) = (l2(&x), l2(&dx));
        let (ny, ndy) = (l2(&apply(&x)), l2(&apply(&dx)));
        if nx == 0.0 || ndx == 0.0 || ny == 0.0 {
            continue;
        }
        let rel_in = ndx / nx;
        let rel_out = ndy / ny;
        if rel_in / k > rel_out * (1.0 + slack) || rel_out > k * rel_in * (1.0 + slack) {
            violations += 1;
        }
    }
    Ok(SandwichReport {
        probes,
        violations,
        kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MaskedLayer;

    fn single_linear(w: Tensor) -> Network {
        let out = w.cols();
        let inp = w.rows();
        Network::new(
            &[inp],
            vec![MaskedLayer::linear(w, Tensor::zeros(&[out])).unwrap()],
            out,
        )
        .unwrap()
    }

    #[test]
    fn constraint_loss_examples() {
        let tau = DEFAULT_TAU;
        let zero = single_linear(Tensor::zeros(&[2, 2]));
        assert!((condition_constraint_loss(&zero, tau).unwrap() - (-9.21034)).abs() < 1e-5);
        assert_eq!(condition_constraint_loss(&zero, tau).unwrap(), 1e-4f64.ln());

        let unit = single_linear(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let v = condition_constraint_loss(&unit, tau).unwrap();
        assert!((v - 1.0001f64.ln()).abs() < 1e-15);
        assert!((v - 9.9995e-5).abs() < 1e-9);
        assert!(condition_constraint_loss(&unit, 0.0).is_err());
        assert!(condition_constraint_grad(&unit, -1.0).is_err());
    }

    #[test]
    fn constraint_grad_scalar() {
        let net = single_linear(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let g = condition_constraint_grad(&net, 1e-4).unwrap();
        assert!((g[0].data()[0] - 2.0 / 1.0001).abs() < 1e-15);
        assert!((g[0].data()[0] - 1.9998).abs() < 1e-4);
        let zero = single_linear(Tensor::zeros(&[2, 3]));
        assert!(condition_constraint_grad(&zero, 1e-4).unwrap()[0]
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn constraint_grad_is_masked() {
        let mut net = single_linear(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        net.set_mask(0, Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let g = condition_constraint_grad(&net, 1e-4).unwrap();
        assert_eq!(g[0].data()[1], 0.0);
        let want = condition_constraint_loss(&net, 1e-4).unwrap();
        assert!((want - (1e-4f64 + 1.0 + 9.0 + 16.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_and_masked_row_condition() {
        let net = single_linear(Tensor::eye(3));
        let r = condition_report(&net).unwrap();
        assert_eq!(r.layers[0].kappa, Kappa::Finite(1.0));
        assert_eq!(r.layers[0].rank, 3);

        let mut net = single_linear(Tensor::eye(3));
        let mut z = Tensor::ones(&[3, 3]);
        for j in 0..3 {
            z.set2(1, j, 0.0);
        }
        net.set_mask(0, z).unwrap();
        let r = condition_report(&net).unwrap();
        assert_eq!(r.layers[0].kappa, Kappa::Infinite);
        assert_eq!(r.max_kappa, Kappa::Infinite);
        assert_eq!(r.layers[0].rank, 2);
    }

    #[test]
    fn linear_model_lipschitz_is_exact() {
        let w = Tensor::new(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, -2.0, 0.0]).unwrap();
        let net = single_linear(w);
        let x = Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        // logits = [1, -1], ŷ = 0; w_0 − w_1 = [2, −1.5, −2].
        let e1 = local_lipschitz_estimate(&net, &x, 1, 0.1, LipschitzNorm::L1, 50, 1).unwrap();
        assert!((e1.value - 5.5).abs() < 1e-12);
        let e2 = local_lipschitz_estimate(&net, &x, 1, 0.1, LipschitzNorm::L2, 50, 1).unwrap();
        assert!((e2.value - (4.0f64 + 2.25 + 4.0).sqrt()).abs() < 1e-12);
        assert!(local_lipschitz_estimate(&net, &x, 0, 0.1, LipschitzNorm::L1, 5, 1).is_err());
        assert!(local_lipschitz_estimate(&net, &x, 1, 0.1, LipschitzNorm::L1, 0, 1).is_err());
    }

    #[test]
    fn constant_net_has_zero_lipschitz() {
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let net = Network::new(&[2], vec![MaskedLayer::linear(w, b).unwrap()], 2).unwrap();
        let x = Tensor::new(&[2], vec![0.3, 0.4]).unwrap();
        let e = local_lipschitz_estimate(&net, &x, 1, 0.5, LipschitzNorm::L2, 20, 0).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn linear_binary_radius_closed_form() {
        let w = Tensor::new(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        let net = single_linear(w);
        let x = Tensor::new(&[2], vec![0.4, 0.1]).unwrap();
        // logits = [0.6, -0.35], margin 0.95, ‖w₀ − w₁‖₁ = 2 + 1.5.
        let g = robustness_radius(&net, &x, 10.0, LipschitzNorm::L1, 10, 0).unwrap();
        assert!((g - 0.95 / 3.5).abs() < 1e-12);
        let g = robustness_radius(&net, &x, 0.01, LipschitzNorm::L1, 10, 0).unwrap();
        assert_eq!(g, 0.01);
    }

    #[test]
    fn boundary_point_has_zero_radius() {
        let w = Tensor::new(&[2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let net = single_linear(w);
        let x = Tensor::new(&[2], vec![0.0, 0.7]).unwrap();
        assert_eq!(
            robustness_radius(&net, &x, 1.0, LipschitzNorm::L2, 10, 0).unwrap(),
            0.0
        );
    }

    #[test]
    fn identity_sparsity_bound() {
        let net = single_linear(Tensor::eye(4));
        let x = Tensor::new(&[4], vec![0.9, 0.1, 0.2, 0.3]).unwrap();
        let r = check_sparsity_bound(&net, &x, 1, 0.1, LipschitzNorm::L2, 100, 0).unwrap();
        let e = r.end_to_end.as_ref().unwrap();
        assert!((e.lhs - 0.5).abs() < 1e-12);
        assert_eq!(e.kappa, Kappa::Finite(1.0));
        assert!(r.holds);
        assert!((r.c2 - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.c1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sandwich_on_diagonal() {
        let r = sandwich_check(&Tensor::diag(&[3.0, 1.0, 0.5]), 500, 1e-10, 9).unwrap();
        assert_eq!(r.kappa, Kappa::Finite(6.0));
        assert_eq!(r.violations, 0);
        let singular = sandwich_check(&Tensor::diag(&[1.0, 0.0]), 10, 1e-10, 9).unwrap();
        assert_eq!(singular.kappa, Kappa::Infinite);
        assert_eq!(singular.probes, 0);
    }
}
