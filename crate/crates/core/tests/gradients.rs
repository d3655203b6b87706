use driftmask::nnkit::{Activation, Net, NetSpec};
use driftmask::rng;
use proptest::prelude::*;

const H: f64 = 1e-5;

/// `Σ ½‖y − t‖² + penalty`, evaluated with a fixed dropout stream.
fn loss(net: &Net, x: &[f64], t: &[f64], drop_seed: u64) -> f64 {
    let mut r = rng::stream(drop_seed, 0);
    let (y, _) = net.forward_batch(x, Some(&mut r)).unwrap();
    0.5 * y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + net.l2_penalty()
}

fn max_relative_error(net: &Net, x: &[f64], t: &[f64], drop_seed: u64) -> f64 {
    let mut r = rng::stream(drop_seed, 0);
    let (y, cache) = net.forward_batch(x, Some(&mut r)).unwrap();
    let out_grad: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
    let analytic = net.backward(&cache, &out_grad).unwrap().flatten();
    let params = net.params();
    assert_eq!(analytic.len(), params.len());
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + H;
        probe.set_params(&p).unwrap();
        let up = loss(&probe, x, t, drop_seed);
        p[i] = params[i] - H;
        probe.set_params(&p).unwrap();
        let down = loss(&probe, x, t, drop_seed);
        let fd = (up - down) / (2.0 * H);
        let scale = fd.abs().max(analytic[i].abs()).max(1e-7);
        worst = worst.max((fd - analytic[i]).abs() / scale);
    }
    worst
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        Just(Activation::Tanh),
        Just(Activation::Linear),
        Just(Activation::LeakyRelu)
    ]
}

prop_compose! {
    fn net_spec()(
        input_dim in 1usize..6,
        layers in prop::collection::vec((1usize..6, activation()), 1..4),
        use_bias in any::<bool>(),
        dropout in prop_oneof![Just(0.0), 0.0f64..0.5],
        l2 in prop_oneof![Just(0.0), 0.0f64..0.1],
        init_seed in any::<u64>(),
    ) -> NetSpec {
        NetSpec {
            input_dim,
            layer_sizes: layers.iter().map(|l| l.0).collect(),
            activations: layers.iter().map(|l| l.1).collect(),
            use_bias,
            dropout,
            l2,
            init_seed,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_parameter_gradient_matches_central_differences(
        spec in net_spec(),
        batch in 1usize..5,
        data_seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut net = Net::new(spec.clone()).unwrap();
        let mut r = rng::stream(data_seed, 1);
        // zero biases behind a dead unit sit exactly on a kink; move off it
        let p: Vec<f64> = net.params().iter().map(|v| v + r.random_range(-0.1..0.1)).collect();
        net.set_params(&p).unwrap();
        let x: Vec<f64> = (0..batch * spec.input_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..batch * net.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let err = max_relative_error(&net, &x, &t, data_seed);
        prop_assert!(err < 1e-4, "relative error {err} for {spec:?}");
    }
}

#[test]
fn penalty_gradient_alone() {
    let mut spec = NetSpec::mlp(3, &[2], Activation::Linear);
    spec.l2 = 0.5;
    let net = Net::new(spec).unwrap();
    let (y, cache) = net.forward_batch(&[0.0, 0.0, 0.0], None).unwrap();
    let g = net.backward(&cache, &vec![0.0; y.len()]).unwrap();
    for (gw, w) in g.w[0].iter().zip(&net.layers[0].w) {
        assert!((gw - 0.5 * w).abs() < 1e-15);
    }
    assert!(g.b[0].iter().all(|&b| b == 0.0));
}
