use calvingseg::model::{Network, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        depth: 2,
        base_channels: 2,
        ..NetworkSpec::default()
    }
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor<f64> {
    let data = (0..n * side * side)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    Tensor::from_vec(n, 1, side, side, data).unwrap()
}

/// Scalar objective `sum(c * p)` so that `dL/dp = c`.
fn objective(net: &mut Network<f64>, x: &Tensor<f64>, c: &[f64]) -> f64 {
    let p = net.forward(x, true).unwrap();
    p.data.iter().zip(c).map(|(a, b)| a * b).sum()
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut net = Network::<f64>::new(small_spec(), &mut rng).unwrap();
    let x = random_input(&mut rng, 2, 16);
    let c: Vec<f64> = (0..2 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    net.forward(&x, true).unwrap();
    let grads = net.backward(&c).unwrap();

    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[t]);
        let orig = net.params()[t].value[i];
        net.params_mut()[t].value[i] = orig + h;
        let up = objective(&mut net, &x, &c);
        net.params_mut()[t].value[i] = orig - h;
        let down = objective(&mut net, &x, &c);
        net.params_mut()[t].value[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.0[t][i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn backward_is_linear_in_the_upstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Network::<f64>::new(small_spec(), &mut rng).unwrap();
    let x = random_input(&mut rng, 2, 16);
    let c: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();

    net.forward(&x, true).unwrap();
    let zero = net.backward(&vec![0.0; 512]).unwrap();
    assert!(zero.0.iter().flatten().all(|&g| g == 0.0));

    net.forward(&x, true).unwrap();
    let g1 = net.backward(&c).unwrap();
    let doubled: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
    net.forward(&x, true).unwrap();
    let g2 = net.backward(&doubled).unwrap();
    for (a, b) in g1.0.iter().flatten().zip(g2.0.iter().flatten()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn backward_requires_a_training_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = Network::<f64>::new(small_spec(), &mut rng).unwrap();
    assert!(net.backward(&[0.0; 256]).is_err());
    let x = random_input(&mut rng, 1, 16);
    net.forward(&x, false).unwrap();
    assert!(net.backward(&[0.0; 256]).is_err());
    net.forward(&x, true).unwrap();
    assert!(net.backward(&[0.0; 7]).is_err());
}

#[test]
fn output_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Network::<f32>::new(NetworkSpec::default(), &mut rng).unwrap();
    let data = (0..3 * 32 * 48).map(|i| (i % 17) as f32 / 17.0).collect();
    let x = Tensor::from_vec(3, 1, 32, 48, data).unwrap();
    for train in [true, false] {
        let y = net.forward(&x, train).unwrap();
        assert_eq!((y.n, y.c, y.h, y.w), (3, 1, 32, 48));
        assert!(y.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let bad = Tensor::<f32>::zeros(1, 1, 30, 48);
    assert!(net.forward(&bad, false).is_err());
    let two_channels = Tensor::<f32>::zeros(1, 2, 32, 48);
    assert!(net.forward(&two_channels, false).is_err());
}

#[test]
fn zero_head_outputs_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Network::<f64>::new(small_spec(), &mut rng).unwrap();
    net.zero_head();
    let x = random_input(&mut rng, 2, 16);
    let y = net.forward(&x, false).unwrap();
    assert!(y.data.iter().all(|&p| p == 0.5));
}

#[test]
fn batch_norm_modes_agree_after_running_stats_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::<f64>::new(small_spec(), &mut rng).unwrap();
    let x = Tensor::from_vec(2, 1, 16, 16, vec![0.7; 512]).unwrap();
    // Momentum 0.1 leaves a 0.9^400 residue of the initial statistics.
    for _ in 0..400 {
        net.forward(&x, true).unwrap();
    }
    let train = net.forward(&x, true).unwrap();
    let infer = net.forward(&x, false).unwrap();
    let worst = train
        .data
        .iter()
        .zip(&infer.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "max difference {worst}");
}

#[test]
fn same_seed_gives_identical_networks() {
    let a = Network::<f32>::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = Network::<f32>::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c = Network::<f32>::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let values = |n: &Network<f32>| {
        n.params()
            .iter()
            .flat_map(|p| p.value.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}
