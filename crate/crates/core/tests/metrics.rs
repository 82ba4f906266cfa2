use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tscnc::attacks::{pgd, AttackSpec};
use tscnc::linalg::{condition_number, svd, Kappa};
use tscnc::metrics::{
    condition_constraint_grad, condition_constraint_loss, condition_report,
    pair_lipschitz_estimate, robustness_radius, LipschitzNorm, DEFAULT_TAU,
};
use tscnc::nn::{argmax_rows, Architecture, MaskedLayer, Network};
use tscnc::Tensor;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap()
}

/// Linear layers with ReLUs in between; `dims` lists every width.
fn mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> Network {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        if i > 0 {
            layers.push(MaskedLayer::relu());
        }
        let scale = (2.0 / w[0] as f64).sqrt();
        layers.push(
            MaskedLayer::linear(
                gaussian(rng, &[w[0], w[1]], scale),
                gaussian(rng, &[w[1]], 0.1),
            )
            .unwrap(),
        );
    }
    Network::new(&[dims[0]], layers, *dims.last().unwrap()).unwrap()
}

fn linear_chain(weights: Vec<Tensor>) -> Network {
    let input = weights[0].rows();
    let classes = weights.last().unwrap().cols();
    let mut layers = Vec::new();
    for (i, w) in weights.into_iter().enumerate() {
        if i > 0 {
            layers.push(MaskedLayer::relu());
        }
        let b = Tensor::zeros(&[w.cols()]);
        layers.push(MaskedLayer::linear(w, b).unwrap());
    }
    Network::new(&[input], layers, classes).unwrap()
}

#[test]
fn constraint_loss_sums_log_frobenius() {
    // Squared Frobenius norms 1, 4 and 9.
    let net = linear_chain(vec![
        Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        Tensor::new(&[2, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap(),
        Tensor::new(&[2, 2], vec![2.0, 2.0, 0.0, 1.0]).unwrap(),
    ]);
    let tau = DEFAULT_TAU;
    let want = (1.0 + tau).ln() + (4.0 + tau).ln() + (9.0 + tau).ln();
    let got = condition_constraint_loss(&net, tau).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((got - 36f64.ln()).abs() < 1e-3);
}

#[test]
fn constraint_grad_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = gaussian(&mut rng, &[3, 4], 1.0);
    let net = linear_chain(vec![w.clone()]);
    let g = condition_constraint_grad(&net, DEFAULT_TAU).unwrap();
    let h = 1e-7;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let fd = (condition_constraint_loss(&linear_chain(vec![plus]), DEFAULT_TAU).unwrap()
            - condition_constraint_loss(&linear_chain(vec![minus]), DEFAULT_TAU).unwrap())
            / (2.0 * h);
        let an = g[0].data()[i];
        assert!(
            (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
            "entry {i}: fd {fd} analytic {an}"
        );
    }
}

#[test]
fn constraint_loss_grows_with_scale_and_descends_along_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = mlp(&mut rng, &[5, 7, 3]);
    let base = condition_constraint_loss(&net, DEFAULT_TAU).unwrap();
    let mut prev = base;
    for c in [1.1, 1.5, 2.0, 4.0] {
        let mut scaled = net.clone();
        for i in scaled.param_indices() {
            let w = scaled.layers()[i].weight().unwrap().scale(c);
            scaled.set_weight(i, w).unwrap();
        }
        let v = condition_constraint_loss(&scaled, DEFAULT_TAU).unwrap();
        assert!(v > prev);
        prev = v;
    }
    let g = condition_constraint_grad(&net, DEFAULT_TAU).unwrap();
    let mut stepped = net.clone();
    for (gi, i) in g.iter().zip(net.param_indices()) {
        let w = net.layers()[i]
            .weight()
            .unwrap()
            .sub(&gi.scale(1e-3))
            .unwrap();
        stepped.set_weight(i, w).unwrap();
    }
    assert!(condition_constraint_loss(&stepped, DEFAULT_TAU).unwrap() < base);
}

#[test]
fn kappa_is_invariant_under_relu_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = mlp(&mut rng, &[4, 6, 5, 3]);
    let x = gaussian(&mut rng, &[8, 4], 1.0);
    for (layer, mu) in [(0, 3.0), (1, 0.25)] {
        let scaled = net.apply_scaling(layer, mu).unwrap();
        let a = condition_report(&net).unwrap();
        let b = condition_report(&scaled).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let (ka, kb) = (la.kappa.as_f64(), lb.kappa.as_f64());
            assert!((ka - kb).abs() <= 1e-9 * ka, "{ka} vs {kb}");
        }
        let ya = net.logits(&x).unwrap();
        let yb = scaled.logits(&x).unwrap();
        assert!(ya.sub(&yb).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn per_layer_kappa_matches_direct_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch: Architecture = "cnn:3-4-10".parse().unwrap();
    let mut net = arch.build(&[1, 8, 8], 4, &mut rng).unwrap();
    for i in net.param_indices() {
        let w = net.layers()[i].weight().unwrap();
        let z = Tensor::new(
            w.shape(),
            (0..w.len())
                .map(|_| f64::from(rng.random::<f64>() > 0.3))
                .collect(),
        )
        .unwrap();
        net.set_mask(i, z).unwrap();
    }
    let report = condition_report(&net).unwrap();
    assert_eq!(report.layers.len(), 4);
    let mut max = Kappa::Finite(0.0);
    for l in &report.layers {
        let w = net.layers()[l.layer].effective_weight().unwrap();
        let w = w
            .clone()
            .reshape(&[w.shape()[0], w.len() / w.shape()[0]])
            .unwrap();
        let s = svd(&w, false).unwrap();
        assert!((l.sigma_max - s.sigma_max()).abs() <= 1e-12 * s.sigma_max());
        assert_eq!(
            l.kappa.is_infinite(),
            condition_number(&w).unwrap().is_infinite()
        );
        if let (Some(a), Some(b)) = (l.kappa.finite(), condition_number(&w).unwrap().finite()) {
            assert!((a - b).abs() <= 1e-10 * b);
        }
        if l.kappa.as_f64() > max.as_f64() {
            max = l.kappa;
        }
    }
    assert_eq!(report.max_kappa.as_f64(), max.as_f64());
}

/// Exhaustive grid over the disk of radius `r` at pitch `r/200`.
fn grid_lipschitz(net: &Network, x0: [f64; 2], a: usize, b: usize, r: f64) -> f64 {
    let h = |x: &Tensor| -> Vec<f64> {
        let l = net.logits(x).unwrap();
        (0..x.rows()).map(|i| l.row(i)[a] - l.row(i)[b]).collect()
    };
    let h0 = h(&Tensor::new(&[1, 2], x0.to_vec()).unwrap())[0];
    let pitch = r / 200.0;
    let mut pts = Vec::new();
    let mut deltas = Vec::new();
    for i in -200i32..=200 {
        for j in -200i32..=200 {
            let d = [f64::from(i) * pitch, f64::from(j) * pitch];
            let n = d[0].hypot(d[1]);
            if n > 0.0 && n <= r {
                pts.extend_from_slice(&[x0[0] + d[0], x0[1] + d[1]]);
                deltas.push(n);
            }
        }
    }
    let hs = h(&Tensor::new(&[deltas.len(), 2], pts).unwrap());
    hs.iter()
        .zip(&deltas)
        .map(|(v, n)| (v - h0).abs() / n)
        .fold(0.0, f64::max)
}

#[test]
fn lipschitz_estimate_agrees_with_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = mlp(&mut rng, &[2, 16, 16, 3]);
    let r = 0.5;
    for trial in 0..4 {
        let x0 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let x = Tensor::new(&[2], x0.to_vec()).unwrap();
        let est =
            pair_lipschitz_estimate(&net, &x, 0, 1, r, LipschitzNorm::L2, 4000, trial).unwrap();
        let grid = grid_lipschitz(&net, x0, 0, 1, r);
        assert_eq!(est.center, x0.to_vec());
        assert!(
            (est.value - grid).abs() <= 0.05 * grid,
            "trial {trial}: estimate {} grid {grid}",
            est.value
        );
    }
}

#[test]
fn radius_rarely_exceeds_attack_flip_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = mlp(&mut rng, &[4, 16, 2]);
    let r = 0.5;
    let mut checked = 0;
    let mut ok = 0;
    for p in 0..40 {
        let x = gaussian(&mut rng, &[1, 4], 0.5);
        let y = argmax_rows(&net.logits(&x).unwrap());
        let gamma = robustness_radius(&net, &x, r, LipschitzNorm::L1, 500, p).unwrap();
        // Smallest ℓ∞ budget at which PGD flips the label, by bisection.
        let flips = |eps: f64| {
            let spec = AttackSpec {
                epsilon: eps,
                step_size: eps / 10.0,
                steps: 50,
                random_start: false,
                clamp_range: (-1e9, 1e9),
            };
            let adv = pgd(&net, &x, &y, &spec, &mut ChaCha8Rng::seed_from_u64(p)).unwrap();
            argmax_rows(&net.logits(&adv).unwrap()) != y
        };
        if !flips(r) {
            // The radius is capped at r, which is below the flip distance.
            checked += 1;
            ok += usize::from(gamma <= r);
            continue;
        }
        let (mut lo, mut hi) = (0.0, r);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if flips(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        checked += 1;
        ok += usize::from(gamma <= hi * (1.0 + 1e-6));
    }
    assert!(ok as f64 >= 0.95 * checked as f64, "{ok} of {checked}");
}
