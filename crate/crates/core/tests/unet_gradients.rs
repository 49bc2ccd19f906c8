use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surdo_sep::tensor::{grad_check, GradCheckConfig, Tensor};
use surdo_sep::unet::{UNet, UNetArch};

fn tiny() -> UNetArch {
    UNetArch {
        encoder_channels: vec![2, 3, 4],
        patch_bins: 16,
        patch_frames: 8,
        dropout_stages: 2,
        dropout_p: 0.5,
        ..UNetArch::default()
    }
}

/// Loss `sum(w * mask)` through the whole network, gradient for every parameter.
#[test]
fn whole_network_matches_finite_differences() {
    let base = UNet::<f64>::new(tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::uniform(&[2, 1, 16, 8], 0.0, 1.0, &mut rng);
    let w = Tensor::<f64>::uniform(&[2, 1, 16, 8], -1.0, 1.0, &mut rng);
    let params: Vec<Tensor<f64>> = base
        .named_parameters()
        .iter()
        .map(|(_, t)| Tensor::new(t.shape(), t.data().to_vec()).unwrap())
        .collect();
    let cfg = GradCheckConfig {
        max_coords: 24,
        ..Default::default()
    };
    let report = grad_check(&params, &cfg, |ps| {
        let mut net = base.clone();
        for (dst, src) in net.parameters_mut().into_iter().zip(ps) {
            dst.data_mut().copy_from_slice(src.data());
        }
        // same dropout masks on every evaluation
        let mut drng = ChaCha8Rng::seed_from_u64(11);
        let cache = net.forward_train(&x, &mut drng).unwrap();
        let value = cache.mask().dot(&w);
        net.zero_grad();
        net.backward(&cache, &w).unwrap();
        let grads = net
            .named_parameters()
            .iter()
            .map(|(_, t)| t.grad().unwrap().to_vec())
            .collect();
        (value, grads)
    });
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}
