use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xsect_core::network::{decode_output, ForwardMode, NetworkConfig, NetworkParams};
use xsect_core::optimizer::{
    circular_huber, huber, loss_and_grad, train, write_log, Adam, AdamConfig, Example, TrainConfig,
    LOG_HEADER,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Brute force: smallest Huber value over pi-shifts of the difference.
fn circular_huber_oracle(a: f64, b: f64) -> f64 {
    (-10..=10)
        .map(|k| huber(a, b + k as f64 * PI, 1.0))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn wrap_example_matches_shift_oracle() {
    let (a, b) = (FRAC_PI_2 - 0.01, -FRAC_PI_2 + 0.01);
    assert!((circular_huber(a, b, 1.0) - 0.0002).abs() < 1e-12);
    assert!((circular_huber_oracle(a, b) - 0.0002).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn circular_huber_is_pi_periodic_and_symmetric(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let h = circular_huber(a, b, 1.0);
        prop_assert!((h - circular_huber(a + PI, b, 1.0)).abs() < 1e-12);
        prop_assert!((h - circular_huber(a, b - PI, 1.0)).abs() < 1e-12);
        prop_assert!((h - circular_huber(b, a, 1.0)).abs() < 1e-12);
        prop_assert!((h - circular_huber_oracle(a, b)).abs() < 1e-12);
    }
}

fn mini_batch(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<[f64; 3]>) {
    let mut r = rng(seed);
    let inputs = (0..n)
        .map(|_| (0..512).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let locs = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    (inputs, locs)
}

fn batch_loss<T: xsect_core::network::Scalar>(
    p: &NetworkParams<T>,
    inputs: &[Vec<T>],
    locs: &[[f64; 3]],
    targets: &[[f64; 2]],
    seed: u64,
) -> (f64, xsect_core::network::Gradients<T>) {
    let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
    let mut streams: Vec<ChaCha8Rng> = (0..inputs.len()).map(|i| rng(seed + i as u64)).collect();
    let mut rs: Vec<&mut ChaCha8Rng> = streams.iter_mut().collect();
    let (l, g, _) = loss_and_grad(p, &refs, locs, targets, 1.0, &mut rs).unwrap();
    (l.total, g)
}

/// Largest elementwise relative error of `analytic` against central
/// differences of the f64 loss at `base`.
fn max_fd_error(
    base: &NetworkParams<f64>,
    analytic: &xsect_core::network::Gradients<f64>,
    inputs: &[Vec<f64>],
    locs: &[[f64; 3]],
    targets: &[[f64; 2]],
) -> (f64, String) {
    let h = 1e-6;
    let names: Vec<String> = base.tensors().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0f64, String::new());
    for (ti, name) in names.iter().enumerate() {
        for k in 0..analytic.tensors[ti].len() {
            let mut plus = base.clone();
            plus.tensors_mut()[ti][k] += h;
            let mut minus = base.clone();
            minus.tensors_mut()[ti][k] -= h;
            let fd = (batch_loss(&plus, inputs, locs, targets, 500).0
                - batch_loss(&minus, inputs, locs, targets, 500).0)
                / (2.0 * h);
            let a = analytic.tensors[ti][k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {a:e} fd {fd:e}"));
            }
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = NetworkConfig::miniature();
    let p32 = NetworkParams::<f32>::init(&cfg, &mut rng(9)).unwrap();
    let base = p32.cast::<f64>();
    let (inputs, locs) = mini_batch(10, 3);
    let in32: Vec<Vec<f32>> = inputs
        .iter()
        .map(|v| v.iter().map(|&x| x as f32).collect())
        .collect();
    let in64: Vec<Vec<f64>> = in32
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    // residuals of one sign per angle, inside the quadratic branch and away
    // from the wrap, so binary32 rounding is not amplified by cancellation
    let refs: Vec<&[f64]> = in64.iter().map(|v| v.as_slice()).collect();
    let mut streams: Vec<ChaCha8Rng> = (0..3).map(|i| rng(500 + i)).collect();
    let mut rs: Vec<&mut ChaCha8Rng> = streams.iter_mut().collect();
    let out = base.train_forward(&refs, &locs, &mut rs).unwrap().outputs;
    let targets: Vec<[f64; 2]> = out
        .iter()
        .enumerate()
        .map(|(i, o)| {
            [
                o[0] * FRAC_PI_2 - 0.6 - 0.05 * i as f64,
                o[1] * FRAC_PI_2 + 0.7,
            ]
        })
        .collect();

    let (_, g64) = batch_loss(&base, &in64, &locs, &targets, 500);
    let (rel64, at64) = max_fd_error(&base, &g64, &in64, &locs, &targets);
    assert!(rel64 < 1e-5, "binary64: {rel64:e} at {at64}");

    let (_, g32) = batch_loss(&p32, &in32, &locs, &targets, 500);
    let g32 = xsect_core::network::Gradients {
        tensors: g32
            .tensors
            .iter()
            .map(|t| t.iter().map(|&v| v as f64).collect())
            .collect(),
    };
    let (rel32, at32) = max_fd_error(&base, &g32, &in64, &locs, &targets);
    assert!(rel32 < 1e-3, "binary32: {rel32:e} at {at32}");
}

#[test]
fn zero_loss_fixed_point_has_zero_gradient() {
    let cfg = NetworkConfig::miniature();
    let p = NetworkParams::<f64>::init(&cfg, &mut rng(3)).unwrap();
    let (inputs, locs) = mini_batch(4, 4);
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let mut streams: Vec<ChaCha8Rng> = (0..4).map(|i| rng(100 + i)).collect();
    let mut rs: Vec<&mut ChaCha8Rng> = streams.iter_mut().collect();
    let out = p.train_forward(&refs, &locs, &mut rs).unwrap().outputs;
    let targets: Vec<[f64; 2]> = out
        .iter()
        .map(|o| [o[0] * FRAC_PI_2, o[1] * FRAC_PI_2])
        .collect();
    let (l, g) = batch_loss(&p, &inputs, &locs, &targets, 100);
    assert!(l < 1e-20);
    let last_bias = g.tensors.last().unwrap();
    assert!(last_bias.iter().all(|v| v.abs() < 1e-12), "{last_bias:?}");
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let p0 = NetworkParams::<f32>::init(&NetworkConfig::miniature(), &mut rng(1)).unwrap();
    let mut p = p0.clone();
    let mut adam = Adam::new(AdamConfig::default(), &p);
    adam.step(&mut p, &p0.zero_grads());
    assert_eq!(p, p0);
}

fn toy_examples(seed: u64, n: usize) -> Vec<Example> {
    let (inputs, locs) = mini_batch(seed, n);
    let mut r = rng(seed ^ 0xff);
    inputs
        .into_iter()
        .zip(locs)
        .map(|(x, l)| Example {
            input: x.iter().map(|&v| v as f32).collect(),
            location: l,
            target: [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
        })
        .collect()
}

#[test]
fn overfits_eight_samples() {
    let cfg = NetworkConfig::miniature().without_dropout();
    let data = toy_examples(12, 8);
    let tc = TrainConfig {
        batch_size: 8,
        augmentation_radius_mm: 0.0,
        max_epochs: 500,
        patience: 500,
        min_delta: 0.0,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &tc, data.as_slice(), data.as_slice()).unwrap();
    let best = out
        .log
        .iter()
        .map(|e| e.train_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "best train loss {best}");
}

#[test]
fn training_is_deterministic_and_returns_best_epoch() {
    let cfg = NetworkConfig::miniature();
    let tr = toy_examples(20, 12);
    let va = toy_examples(21, 5);
    let tc = TrainConfig {
        batch_size: 4,
        max_epochs: 30,
        patience: 4,
        min_delta: 0.0,
        seed: 8,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &tc, tr.as_slice(), va.as_slice()).unwrap();
    let b = train(&cfg, &tc, tr.as_slice(), va.as_slice()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);

    let best = a
        .log
        .iter()
        .min_by(|x, y| x.val_loss.partial_cmp(&y.val_loss).unwrap())
        .unwrap();
    assert_eq!(a.best_epoch, best.epoch);
    // independent re-evaluation of the returned parameters
    let mut r = rng(0);
    let mut loss = 0.0;
    for ex in &va {
        let o = decode_output(
            a.params
                .forward(&ex.input, ex.location, ForwardMode::Deterministic, &mut r)
                .unwrap(),
        );
        loss +=
            circular_huber(o.theta, ex.target[0], 1.0) + circular_huber(o.phi, ex.target[1], 1.0);
    }
    loss /= 2.0 * va.len() as f64;
    assert!((loss - best.val_loss).abs() < 1e-12);
    if a.stopped_early {
        assert_eq!(a.log.len(), a.best_epoch + tc.patience);
    }

    let mut buf = Vec::new();
    write_log(&a.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(text.lines().count(), a.log.len() + 1);
}

#[test]
fn empty_split_is_rejected() {
    let tr = toy_examples(1, 2);
    let empty: Vec<Example> = Vec::new();
    let err = train(
        &NetworkConfig::miniature(),
        &TrainConfig::default(),
        tr.as_slice(),
        empty.as_slice(),
    )
    .unwrap_err();
    assert!(matches!(err, xsect_core::Error::InvalidArgument(_)));
}
