//! Masked feed-forward networks: layers, exact gradients, loss.

mod arch;
mod layer;
mod loss;
mod network;

pub use arch::Architecture;
pub use layer::{LayerKind, MaskedLayer};
pub use loss::{argmax_rows, cross_entropy, softmax};
pub use network::{ForwardCache, Gradients, Network, ParamGrad};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mlp_2layer() -> Network {
        let w1 = Tensor::new(&[3, 2], vec![0.5, -1.0, 0.25, 0.75, -0.5, 1.5]).unwrap();
        let b1 = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
        let w2 = Tensor::new(&[2, 2], vec![1.0, -0.5, 2.0, 0.3]).unwrap();
        let b2 = Tensor::new(&[2], vec![0.0, 0.05]).unwrap();
        Network::new(
            &[3],
            vec![
                MaskedLayer::linear(w1, b1).unwrap(),
                MaskedLayer::relu(),
                MaskedLayer::linear(w2, b2).unwrap(),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let net = Network::new(
            &[3],
            vec![MaskedLayer::linear(Tensor::eye(3), Tensor::zeros(&[3])).unwrap()],
            3,
        )
        .unwrap();
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.5]).unwrap();
        assert_eq!(net.logits(&x).unwrap(), x);
    }

    #[test]
    fn all_zero_masks_give_zero_logits() {
        let mut net = mlp_2layer();
        for i in net.param_indices() {
            let shape = net.layers()[i].weight().unwrap().shape().to_vec();
            net.set_mask(i, Tensor::zeros(&shape)).unwrap();
            net.set_bias(i, Tensor::zeros(&[shape[1]])).unwrap();
        }
        let x = Tensor::new(&[1, 3], vec![3.0, -1.0, 2.0]).unwrap();
        assert!(net.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_rolled_forward_matches() {
        let net = mlp_2layer();
        let x = [0.7, -0.3, 1.1];
        // h = relu(W1ᵀx + b1), out = W2ᵀh + b2, written out longhand.
        let h0 = (0.5 * 0.7 + 0.25 * -0.3 + -0.5 * 1.1 + 0.1_f64).max(0.0);
        let h1 = (-0.7 + 0.75 * -0.3 + 1.5 * 1.1 - 0.2_f64).max(0.0);
        let o0 = 1.0 * h0 + 2.0 * h1;
        let o1 = -0.5 * h0 + 0.3 * h1 + 0.05;
        let got = net
            .logits(&Tensor::new(&[1, 3], x.to_vec()).unwrap())
            .unwrap();
        assert!((got.data()[0] - o0).abs() < 1e-12);
        assert!((got.data()[1] - o1).abs() < 1e-12);
    }

    #[test]
    fn linear_weight_gradient_layout() {
        // L = sum(z) for one sample: ∂L/∂W[i][j] = a[i].
        let w = Tensor::new(&[3, 2], vec![0.0; 6]).unwrap();
        let net = Network::new(
            &[3],
            vec![MaskedLayer::linear(w, Tensor::zeros(&[2])).unwrap()],
            2,
        )
        .unwrap();
        let a = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (_, cache) = net.forward(&a).unwrap();
        let g = net.backward(&cache, &Tensor::ones(&[1, 2])).unwrap();
        let gw = &g.layers[0].as_ref().unwrap().weight;
        assert_eq!(gw.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(g.layers[0].as_ref().unwrap().bias.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_everywhere() {
        let net = mlp_2layer();
        let x = Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        for pg in g.layers.iter().flatten() {
            assert!(pg.weight.data().iter().all(|&v| v == 0.0));
            assert!(pg.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = mlp_2layer();
        let x = Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        net.set_bias(0, Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            net.backward(&cache, &Tensor::zeros(&[1, 2])),
            Err(crate::Error::State(_))
        ));
    }

    #[test]
    fn input_shape_mismatch_is_dimension_error() {
        let net = mlp_2layer();
        assert!(matches!(
            net.logits(&Tensor::zeros(&[1, 4])),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn unit_scaling_is_identity_and_invalid_mu_rejected() {
        let net = mlp_2layer();
        assert_eq!(net.apply_scaling(0, 1.0).unwrap(), net);
        assert!(net.apply_scaling(0, 0.0).is_err());
        assert!(net.apply_scaling(0, -2.0).is_err());
        assert!(net.apply_scaling(1, 2.0).is_err());
    }

    #[test]
    fn masked_weights_do_not_reach_logits() {
        let mut net = mlp_2layer();
        let z = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        net.set_mask(0, z).unwrap();
        let x = Tensor::new(&[2, 3], vec![0.3, -0.7, 1.0, 2.0, 0.1, -0.4]).unwrap();
        let before = net.logits(&x).unwrap();
        net.zero_masked_weights();
        assert_eq!(net.logits(&x).unwrap(), before);
        assert!(net.set_mask(0, Tensor::full(&[3, 2], 0.5)).is_err());
    }
}
