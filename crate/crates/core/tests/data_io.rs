use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tscnc::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tscnc::data::{load_dataset, synth_blobs};
use tscnc::linalg::Kappa;
use tscnc::metrics::LayerCondition;
use tscnc::nn::{argmax_rows, cross_entropy, Architecture, MaskedLayer, Network};
use tscnc::report::{metrics_csv, parse_metrics_csv, write_metrics};
use tscnc::trainer::{AttackAccuracy, MetricsRecord, SgdState, TrainConfig};
use tscnc::{Error, Tensor};

#[test]
fn tight_blobs_are_linearly_separable() {
    let data = synth_blobs(3, 4, 100, 0.05, 11).unwrap();
    let w = Tensor::zeros(&[4, 3]);
    let mut net = Network::new(
        &[4],
        vec![MaskedLayer::linear(w, Tensor::zeros(&[3])).unwrap()],
        3,
    )
    .unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx).unwrap();
    for _ in 0..100 {
        let (_, g) = net.loss_and_gradients(&x, &y).unwrap();
        let p = g.layers[0].as_ref().unwrap();
        let w = net.layers()[0].weight().unwrap().sub(&p.weight).unwrap();
        let b = net.layers()[0].bias().unwrap().sub(&p.bias).unwrap();
        net.set_weight(0, w).unwrap();
        net.set_bias(0, b).unwrap();
    }
    let pred = argmax_rows(&net.logits(&x).unwrap());
    let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    assert!(acc >= 0.99, "accuracy {acc}");
    let (loss, _) = cross_entropy(&net.logits(&x).unwrap(), &y).unwrap();
    assert!(loss < 3f64.ln());
}

fn idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[test]
fn idx_directory_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("train-images-idx3-ubyte"),
        idx_images(3, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0]),
    )
    .unwrap();
    fs::write(d.join("train-labels-idx1-ubyte"), idx_labels(&[0, 2, 1])).unwrap();
    fs::write(
        d.join("t10k-images-idx3-ubyte"),
        idx_images(1, 2, 2, &[0, 0, 0, 255]),
    )
    .unwrap();
    fs::write(d.join("t10k-labels-idx1-ubyte"), idx_labels(&[4])).unwrap();
    let (train, test) = load_dataset(&format!("idx:{}", d.display()), 0).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train.sample_shape(), &[1, 2, 2]);
    assert_eq!(train.classes, 5);
    assert_eq!(test.classes, 5);
    assert_eq!(train.labels, vec![0, 2, 1]);
    assert_eq!(&train.images.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(test.images.data(), &[0.0, 0.0, 0.0, 1.0]);

    fs::write(d.join("t10k-labels-idx1-ubyte"), idx_labels(&[4, 4])).unwrap();
    assert!(load_dataset(&format!("idx:{}", d.display()), 0).is_err());
    fs::write(
        d.join("t10k-labels-idx1-ubyte"),
        &[0, 0, 8, 9, 0, 0, 0, 0][..],
    )
    .unwrap();
    assert!(matches!(
        load_dataset(&format!("idx:{}", d.display()), 0),
        Err(Error::Format { .. })
    ));
}

fn record(epoch: usize, rng: &mut ChaCha8Rng) -> MetricsRecord {
    let kappa = |rng: &mut ChaCha8Rng| Kappa::Finite(1.0 + rng.random::<f64>() * 1e3);
    let layers = vec![
        LayerCondition {
            layer: 0,
            kappa: kappa(rng),
            sigma_max: 2.0,
            sigma_min: 0.1,
            rank: 4,
        },
        LayerCondition {
            layer: 2,
            kappa: if epoch == 1 {
                Kappa::Infinite
            } else {
                kappa(rng)
            },
            sigma_max: 1.0,
            sigma_min: 0.0,
            rank: 2,
        },
    ];
    let loss_e: f64 = rng.random::<f64>() / 3.0;
    let loss_cc = -rng.random::<f64>() * 7.0;
    MetricsRecord {
        epoch,
        lr: 0.1 / 3.0,
        clean_acc: rng.random(),
        robust_acc: vec![AttackAccuracy {
            attack: "pgd".into(),
            accuracy: rng.random(),
        }],
        loss_e,
        loss_cc,
        loss_total: loss_e + 1e-3 * loss_cc,
        sparsity: 0.9,
        kappa_max: if epoch == 1 {
            Kappa::Infinite
        } else {
            layers[0].kappa
        },
        layers,
    }
}

#[test]
fn metrics_csv_round_trips_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let records: Vec<MetricsRecord> = (0..4).map(|e| record(e, &mut rng)).collect();
    let (header, rows) = parse_metrics_csv(&metrics_csv(&records).unwrap()).unwrap();
    assert_eq!(header.len(), 11);
    assert_eq!(header[3], "pgd_acc");
    assert_eq!(rows.len(), 4);
    for (r, row) in records.iter().zip(&rows) {
        let want = [
            r.epoch as f64,
            r.lr,
            r.clean_acc,
            r.robust_acc[0].accuracy,
            r.loss_e,
            r.loss_cc,
            r.loss_total,
            r.sparsity,
            r.kappa_max.as_f64(),
            r.layers[0].kappa.as_f64(),
            r.layers[1].kappa.as_f64(),
        ];
        for (a, b) in want.iter().zip(row) {
            if a.is_infinite() {
                assert!(b.is_infinite());
            } else {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = write_metrics(&records, dir.path().join("m")).unwrap();
    assert!(csv.ends_with("m.csv") && json.ends_with("m.json"));
    let back: Vec<MetricsRecord> =
        serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(back, records);
}

#[test]
fn checkpoint_file_round_trip_for_each_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dir = tempfile::tempdir().unwrap();
    for (arch, shape) in [
        ("mlp:", vec![5]),
        ("mlp:7", vec![5]),
        ("mlp:9-4-6", vec![1, 3, 3]),
        ("cnn:2-3-5", vec![1, 6, 6]),
        ("cnn:4-8-32", vec![1, 12, 12]),
    ] {
        let a: Architecture = arch.parse().unwrap();
        let mut net = a.build(&shape, 3, &mut rng).unwrap();
        for i in net.param_indices() {
            let w = net.layers()[i].weight().unwrap();
            let z = Tensor::new(
                w.shape(),
                (0..w.len())
                    .map(|_| f64::from(rng.random::<f64>() < 0.5))
                    .collect(),
            )
            .unwrap();
            net.set_mask(i, z).unwrap();
        }
        let ckpt = Checkpoint {
            architecture: arch.into(),
            state: Some(SgdState::new(&net)),
            net,
            config: Some(TrainConfig {
                architecture: arch.into(),
                ..TrainConfig::default()
            }),
            epoch: 2,
        };
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt, "{arch}");
        let mut xs = vec![4];
        xs.extend_from_slice(&shape);
        let n: usize = xs.iter().product();
        let x = Tensor::new(&xs, (0..n).map(|_| rng.random()).collect()).unwrap();
        let a = ckpt.net.logits(&x).unwrap();
        let b = back.net.logits(&x).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
