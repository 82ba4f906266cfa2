//! Two-phase training: adversarial saliency pruning of a reference network,
//! then masked adversarial training of `L_E + λ·L_CC` with momentum SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, Attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Kappa;
use crate::metrics::{
    condition_constraint_grad, condition_constraint_loss, condition_report, LayerCondition,
};
use crate::nn::{argmax_rows, Architecture, Network};
use crate::pruning::{
    magnitude_saliency, prune_report, saliency, select_mask, PruneReport, PruneSpec, SaliencyKind,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Masked-training epochs after pruning.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs from which the learning rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub lambda: f64,
    pub tau: f64,
    pub train_attack: AttackSpec,
    pub eval_attacks: Vec<Attack>,
    pub prune: PruneSpec,
    pub saliency: SaliencyKind,
    /// Training batches scored for saliency; 0 uses the whole training set.
    pub saliency_batches: usize,
    /// Dense adversarial epochs that produce the reference network when none is given.
    pub warmup_epochs: usize,
    /// Test samples used for per-epoch evaluation; 0 uses all of them.
    pub eval_samples: usize,
    pub seed: u64,
    pub dataset: String,
    pub architecture: String,
    /// Reserved for a TRADES objective. Must be absent.
    pub trades_beta: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![30, 45],
            lr_factor: 0.1,
            lambda: 0.001,
            tau: 1e-4,
            train_attack: AttackSpec {
                random_start: true,
                ..AttackSpec::standard_linf()
            },
            eval_attacks: vec!["pgd:eps=8/255:alpha=2/255:steps=10".parse().unwrap()],
            prune: PruneSpec::global(0.9),
            saliency: SaliencyKind::AdversarialTaylor,
            saliency_batches: 8,
            warmup_epochs: 10,
            eval_samples: 0,
            seed: 0,
            dataset: "synth-glyphs".into(),
            architecture: "cnn:4-8-32".into(),
            trades_beta: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return fail(format!("lr_factor must be > 0, got {}", self.lr_factor));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if self.trades_beta.is_some() {
            return fail("trades_beta is reserved and not implemented".into());
        }
        let cfg = |e: Error| Error::Config(e.to_string());
        self.train_attack.validate().map_err(cfg)?;
        for a in &self.eval_attacks {
            a.spec.validate().map_err(cfg)?;
        }
        self.prune.validate().map_err(cfg)?;
        self.architecture.parse::<Architecture>().map_err(cfg)?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub clean_acc: f64,
    pub robust_acc: Vec<AttackAccuracy>,
    /// Mean adversarial cross-entropy over the epoch's batches.
    pub loss_e: f64,
    /// `L_CC` at the end of the epoch.
    pub loss_cc: f64,
    /// `loss_e + λ·loss_cc`.
    pub loss_total: f64,
    pub sparsity: f64,
    pub kappa_max: Kappa,
    pub layers: Vec<LayerCondition>,
}

/// Learning rate for a 0-based epoch: `lr · factor^(#milestones ≤ epoch)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    config.lr * config.lr_factor.powi(passed as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← m·v + g + wd·w; w ← w − lr·v`, then `w ← w ⊙ Z` when a mask is given.
pub fn sgd_step(
    w: &mut Tensor,
    g: &Tensor,
    v: &mut Tensor,
    mask: Option<&Tensor>,
    p: SgdParams,
) -> Result<()> {
    w.check_same_shape(g)?;
    w.check_same_shape(v)?;
    if let Some(z) = mask {
        w.check_same_shape(z)?;
    }
    for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *vi = p.momentum * *vi + gi + p.weight_decay * *wi;
        *wi -= p.lr * *vi;
    }
    if let Some(z) = mask {
        for (wi, zi) in w.data_mut().iter_mut().zip(z.data()) {
            if *zi == 0.0 {
                *wi = 0.0;
            }
        }
    }
    Ok(())
}

/// Momentum buffers for the weight and bias of every parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Option<(Tensor, Tensor)>>,
}

impl SgdState {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: net
                .layers()
                .iter()
                .map(|l| {
                    l.weight().map(|w| {
                        (
                            Tensor::zeros(w.shape()),
                            Tensor::zeros(l.bias().unwrap().shape()),
                        )
                    })
                })
                .collect(),
        }
    }

    /// One update of every parameterized layer. `grads[i]` is `(∂/∂W, ∂/∂b)`;
    /// weight decay applies to weights only.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &[Option<(Tensor, Tensor)>],
        p: SgdParams,
    ) -> Result<()> {
        if grads.len() != net.layers().len() || self.velocity.len() != grads.len() {
            return Err(Error::dim("gradient list does not match the network"));
        }
        for (i, (g, v)) in grads.iter().zip(&mut self.velocity).enumerate() {
            let (Some((gw, gb)), Some((vw, vb))) = (g, v) else {
                continue;
            };
            let params = net.layer_mut(i).params_mut().unwrap();
            sgd_step(&mut params.weight, gw, vw, Some(&params.mask), p)?;
            sgd_step(
                &mut params.bias,
                gb,
                vb,
                None,
                SgdParams {
                    weight_decay: 0.0,
                    ..p
                },
            )?;
        }
        Ok(())
    }
}

/// Accuracy counts of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clean_acc: f64,
    pub robust_acc: Vec<AttackAccuracy>,
}

const EVAL_CHUNK: usize = 100;

/// Clean and robust accuracy. A sample counts as robust only if it is
/// classified correctly both clean and under the attack. Randomness comes from
/// per-chunk generators derived from `seed`, so results do not depend on the
/// thread count.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    attacks: &[Attack],
    seed: u64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let counts = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, idx)| -> Result<Vec<usize>> {
            let (x, y) = data.batch(idx)?;
            let clean: Vec<bool> = argmax_rows(&net.logits(&x)?)
                .iter()
                .zip(&y)
                .map(|(p, t)| p == t)
                .collect();
            let mut out = vec![clean.iter().filter(|&&c| c).count()];
            for (ai, a) in attacks.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((ci * attacks.len().max(1) + ai) as u64);
                let adv = a.run(net, &x, &y, &mut rng)?;
                let robust = argmax_rows(&net.logits(&adv)?)
                    .iter()
                    .zip(&y)
                    .zip(&clean)
                    .filter(|((p, t), c)| **c && p == t)
                    .count();
                out.push(robust);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.len() as f64;
    let total = |k: usize| counts.iter().map(|c| c[k]).sum::<usize>() as f64 / n;
    Ok(Evaluation {
        clean_acc: total(0),
        robust_acc: attacks
            .iter()
            .enumerate()
            .map(|(i, a)| AttackAccuracy {
                attack: a.name.clone(),
                accuracy: total(i + 1),
            })
            .collect(),
    })
}

fn adversarial(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if spec.epsilon == 0.0 || spec.steps == 0 {
        Ok(x.clone())
    } else {
        pgd(net, x, y, spec, rng)
    }
}

/// One pass over `data` in shuffled batches, minimizing `L_CE(x_adv) + λ·L_CC`.
/// Returns the mean batch cross-entropy, measured before each step.
pub fn train_epoch(
    net: &mut Network,
    state: &mut SgdState,
    data: &Dataset,
    config: &TrainConfig,
    lr: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let p = SgdParams {
        lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut total = 0.0;
    let mut batches = 0;
    for idx in order.chunks(config.batch_size) {
        let (x, y) = data.batch(idx)?;
        let x_adv = adversarial(net, &x, &y, &config.train_attack, rng)?;
        let (loss, grads) = net.loss_and_gradients(&x_adv, &y)?;
        if !loss.is_finite() {
            return Ok(f64::NAN);
        }
        let cc = if lambda > 0.0 {
            Some(condition_constraint_grad(net, config.tau)?)
        } else {
            None
        };
        let mut ordinal = 0;
        let mut step_grads = Vec::with_capacity(grads.layers.len());
        for (i, g) in grads.layers.iter().enumerate() {
            step_grads.push(match g {
                None => None,
                Some(pg) => {
                    let mut gw = grads.masked_weight(net, i).unwrap();
                    if let Some(cc) = &cc {
                        gw.add_assign(&cc[ordinal].scale(lambda))?;
                    }
                    ordinal += 1;
                    Some((gw, pg.bias.clone()))
                }
            });
        }
        state.step(net, &step_grads, p)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn record(
    net: &Network,
    test: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
    loss_e: f64,
) -> Result<MetricsRecord> {
    let eval_set = if config.eval_samples > 0 {
        test.head(config.eval_samples)
    } else {
        test.clone()
    };
    let ev = evaluate(
        net,
        &eval_set,
        &config.eval_attacks,
        config.seed ^ epoch as u64,
    )?;
    let loss_cc = condition_constraint_loss(net, config.tau)?;
    let cond = condition_report(net)?;
    Ok(MetricsRecord {
        epoch,
        lr,
        clean_acc: ev.clean_acc,
        robust_acc: ev.robust_acc,
        loss_e,
        loss_cc,
        loss_total: loss_e + config.lambda * loss_cc,
        sparsity: prune_report(net).global_ratio,
        kappa_max: cond.max_kappa,
        layers: cond.layers,
    })
}

fn divergence_record(
    net: &Network,
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
    loss_e: f64,
) -> MetricsRecord {
    let loss_cc = condition_constraint_loss(net, config.tau).unwrap_or(f64::NAN);
    MetricsRecord {
        epoch,
        lr,
        clean_acc: 0.0,
        robust_acc: Vec::new(),
        loss_e,
        loss_cc,
        loss_total: loss_e + config.lambda * loss_cc,
        sparsity: prune_report(net).global_ratio,
        kappa_max: Kappa::Infinite,
        layers: Vec::new(),
    }
}

fn weights_finite(net: &Network) -> bool {
    net.layers()
        .iter()
        .filter_map(|l| l.weight().zip(l.bias()))
        .all(|(w, b)| w.is_finite() && b.is_finite())
}

/// Builds the untrained network named by the config.
pub fn build_network(
    config: &TrainConfig,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let arch: Architecture = config
        .architecture
        .parse()
        .map_err(|e: Error| Error::Config(e.to_string()))?;
    arch.build(data.sample_shape(), data.classes, rng)
}

/// Dense adversarial training of a fresh network for `warmup_epochs`.
pub fn train_reference(
    config: &TrainConfig,
    train: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let mut net = build_network(config, train, rng)?;
    let mut state = SgdState::new(&net);
    for epoch in 0..config.warmup_epochs {
        let loss = train_epoch(&mut net, &mut state, train, config, config.lr, 0.0, rng)?;
        if !loss.is_finite() || !weights_finite(&net) {
            return Err(Error::Divergence {
                epoch,
                message: "non-finite loss during warmup".into(),
                record: Box::new(divergence_record(&net, config, epoch, config.lr, loss)),
            });
        }
        log::debug!("warmup epoch {epoch}: loss {loss:.4}");
    }
    Ok(net)
}

/// Scores `net` and installs masks at the configured sparsity. Taylor saliency
/// is measured on PGD examples from the first `saliency_batches` batches of a
/// shuffled pass over `train`.
pub fn prune_network(
    net: &mut Network,
    config: &TrainConfig,
    train: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<PruneReport> {
    let map = match config.saliency {
        SaliencyKind::Magnitude => magnitude_saliency(net),
        SaliencyKind::AdversarialTaylor => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(rng);
            let limit = if config.saliency_batches == 0 {
                usize::MAX
            } else {
                config.saliency_batches
            };
            let mut batches = Vec::new();
            for idx in order.chunks(config.batch_size).take(limit) {
                let (x, y) = train.batch(idx)?;
                let adv = adversarial(net, &x, &y, &config.train_attack, rng)?;
                batches.push((adv, y));
            }
            saliency(net, batches)?
        }
    };
    let masks = select_mask(&map, &config.prune)?;
    net.set_masks(&masks)?;
    net.zero_masked_weights();
    Ok(prune_report(net))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub records: Vec<MetricsRecord>,
    pub state: SgdState,
    pub prune: PruneReport,
}

/// Phase 1 (reference network, saliency, masks) followed by phase 2 (masked
/// adversarial training with `λ·L_CC`), recording metrics after every epoch.
pub fn run_tscnc(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    reference: Option<Network>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("training and test sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = match reference {
        Some(n) => {
            if n.input_shape() != train.sample_shape() || n.classes() != train.classes {
                return Err(Error::dim("reference network does not fit the dataset"));
            }
            n
        }
        None => train_reference(config, train, &mut rng)?,
    };
    let prune = prune_network(&mut net, config, train, &mut rng)?;
    log::info!(
        "pruned {} of {} weights ({:.4})",
        prune.pruned,
        prune.total,
        prune.global_ratio
    );
    let mut state = SgdState::new(&net);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let loss_e = train_epoch(
            &mut net,
            &mut state,
            train,
            config,
            lr,
            config.lambda,
            &mut rng,
        )?;
        if !loss_e.is_finite() || !weights_finite(&net) {
            return Err(Error::Divergence {
                epoch,
                message: format!("loss became {loss_e}"),
                record: Box::new(divergence_record(&net, config, epoch, lr, loss_e)),
            });
        }
        let r = record(&net, test, config, epoch, lr, loss_e)?;
        log::info!(
            "epoch {epoch}: lr {lr} loss {:.4} clean {:.4} kappa_max {}",
            r.loss_total,
            r.clean_acc,
            r.kappa_max
        );
        records.push(r);
    }
    Ok(TrainOutcome {
        net,
        records,
        state,
        prune,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_milestones() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.1);
        assert_eq!(lr_at(29, &c), 0.1);
        assert!((lr_at(30, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(45, &c) - 0.001).abs() < 1e-15);
        assert!((lr_at(199, &c) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn vanilla_and_zero_steps() {
        let p = SgdParams {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut w = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        let g = Tensor::new(&[2], vec![0.25, 1.0]).unwrap();
        sgd_step(&mut w, &g, &mut v, None, p).unwrap();
        assert_eq!(w.data(), &[0.875, -2.5]);

        let mut w = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        let p = SgdParams { momentum: 0.9, ..p };
        sgd_step(&mut w, &Tensor::zeros(&[2]), &mut v, None, p).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert!(sgd_step(&mut w, &Tensor::zeros(&[3]), &mut v, None, p).is_err());
    }

    #[test]
    fn momentum_scalar_recurrence() {
        // w0 = 1, g = 0.5 both steps, lr 0.1, m 0.9, wd 0.01:
        // v1 = 0.5 + 0.01 = 0.51, w1 = 0.949
        // v2 = 0.459 + 0.5 + 0.00949 = 0.96849, w2 = 0.852151
        let p = SgdParams {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut w = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let g = Tensor::new(&[1], vec![0.5]).unwrap();
        sgd_step(&mut w, &g, &mut v, None, p).unwrap();
        assert!((v.data()[0] - 0.51).abs() < 1e-12);
        assert!((w.data()[0] - 0.949).abs() < 1e-12);
        sgd_step(&mut w, &g, &mut v, None, p).unwrap();
        assert!((v.data()[0] - 0.96849).abs() < 1e-12);
        assert!((w.data()[0] - 0.852151).abs() < 1e-12);
    }

    #[test]
    fn masked_step_keeps_zeros() {
        let p = SgdParams {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let mut w = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut v = Tensor::zeros(&[3]);
        let z = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        sgd_step(&mut w, &Tensor::ones(&[3]), &mut v, Some(&z), p).unwrap();
        assert_eq!(w.data()[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lambda: -1.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                trades_beta: Some(6.0),
                ..Default::default()
            },
            TrainConfig {
                architecture: "resnet".into(),
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert!(TrainConfig::from_json(r#"{"epochs": 3, "lamda": 0.1}"#).is_err());
        let c = TrainConfig::from_json(r#"{"epochs": 3, "lambda": 0.1}"#).unwrap();
        assert_eq!((c.epochs, c.lambda), (3, 0.1));
    }
}
