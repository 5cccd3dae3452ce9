use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xsect_core::network::{
    checkpoint, decode_output, dropblock_gamma, encode_target, expected_drop_fraction, ForwardMode,
    NetworkConfig, NetworkParams, SampleMask, OUTPUT_INIT_SCALE,
};
use xsect_core::PlaneOrientation;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input(side: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..side.pow(3)).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn small() -> NetworkConfig {
    NetworkConfig::with_widths([2, 3, 4, 5], [16, 16, 8])
}

#[test]
fn reference_feature_length() {
    let c = NetworkConfig::reference();
    assert_eq!(c.feature_len(), 256 * 27 + 3);
    assert_eq!(c.feature_len(), 6915);
    let sides: Vec<usize> = c.stage_shapes().iter().map(|s| s.1).collect();
    assert_eq!(sides, vec![64, 64, 16, 6, 3]);
    assert_eq!(
        (0..4).map(|i| c.conv_side(i)).collect::<Vec<_>>(),
        vec![64, 32, 8, 3]
    );
    c.validate().unwrap();
}

#[test]
fn init_is_deterministic() {
    let a = NetworkParams::<f32>::init(&small(), &mut rng(3)).unwrap();
    let b = NetworkParams::<f32>::init(&small(), &mut rng(3)).unwrap();
    assert_eq!(a, b);
    let c = NetworkParams::<f32>::init(&small(), &mut rng(4)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_weight_variance_matches_fan_in() {
    let cfg = NetworkConfig::reference();
    let p = NetworkParams::<f32>::init(&cfg, &mut rng(11)).unwrap();
    let check = |w: &[f32], want: f64| {
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        // four standard errors of a Gaussian sample variance, at least 10%
        let tol = (4.0 * (2.0 / n).sqrt()).max(0.10);
        assert!(
            (var / want - 1.0).abs() < tol,
            "var {var} want {want} (n={n})"
        );
    };
    for (g, c) in cfg.conv_geoms().iter().zip(&p.convs) {
        check(&c.weight, 2.0 / (g.cin * g.kernel.pow(3)) as f64);
        assert!(c.gamma.iter().all(|&v| v == 1.0) && c.beta.iter().all(|&v| v == 0.0));
    }
    let shapes = cfg.dense_shapes();
    for (i, (&(nin, _, _), d)) in shapes.iter().zip(&p.dense).enumerate() {
        let s = if i + 1 == shapes.len() {
            OUTPUT_INIT_SCALE
        } else {
            1.0
        };
        check(&d.weight, s * s * 2.0 / nin as f64);
        assert!(d.bias.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn reference_zero_input_is_finite() {
    let cfg = NetworkConfig::reference();
    let p = NetworkParams::<f32>::init(&cfg, &mut rng(1)).unwrap();
    let x = vec![0.0f32; 64 * 64 * 64];
    let out = p
        .forward(&x, [0.5; 3], ForwardMode::Deterministic, &mut rng(0))
        .unwrap();
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn deterministic_mode_is_pure() {
    let p = NetworkParams::<f32>::init(&small(), &mut rng(2)).unwrap();
    let x = random_input(64, 5);
    let a = p
        .forward(&x, [0.1, 0.2, 0.3], ForwardMode::Deterministic, &mut rng(0))
        .unwrap();
    let b = p
        .forward(
            &x,
            [0.1, 0.2, 0.3],
            ForwardMode::Deterministic,
            &mut rng(99),
        )
        .unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn shape_mismatch_is_rejected() {
    let p = NetworkParams::<f32>::init(&small(), &mut rng(2)).unwrap();
    assert!(p
        .forward(
            &[0.0; 10],
            [0.5; 3],
            ForwardMode::Deterministic,
            &mut rng(0)
        )
        .is_err());
    assert!(p
        .head(&[0.0; 3], [0.5; 3], ForwardMode::Deterministic, &mut rng(0))
        .is_err());
}

#[test]
fn cached_encoder_matches_full_forward() {
    let p = NetworkParams::<f32>::init(&small(), &mut rng(2)).unwrap();
    let x = random_input(64, 6);
    let loc = [0.3, 0.6, 0.9];
    let f = p
        .encoder_features(&x, ForwardMode::Deterministic, &mut rng(0))
        .unwrap();
    assert_eq!(f.len(), small().encoder_len());
    for s in 0..20 {
        let full = p
            .forward(&x, loc, ForwardMode::StochasticHead, &mut rng(s))
            .unwrap();
        let cached = p
            .head(&f, loc, ForwardMode::StochasticHead, &mut rng(s))
            .unwrap();
        assert_eq!(full, cached);
    }
    let g = p
        .encoder_features(&x, ForwardMode::StochasticHead, &mut rng(7))
        .unwrap();
    assert_eq!(f, g);
}

#[test]
fn stochastic_head_varies_across_streams() {
    let p = NetworkParams::<f32>::init(&small(), &mut rng(2)).unwrap();
    let x = random_input(64, 6);
    let f = p
        .encoder_features(&x, ForwardMode::Deterministic, &mut rng(0))
        .unwrap();
    let outs: Vec<[f32; 2]> = (0..100)
        .map(|s| {
            p.head(
                &f,
                [0.5; 3],
                ForwardMode::StochasticHead,
                &mut rng(1000 + s),
            )
            .unwrap()
        })
        .collect();
    let distinct = outs.windows(2).filter(|w| w[0] != w[1]).count();
    assert!(distinct >= 95, "{distinct}");
}

#[test]
fn stochastic_full_features_vary() {
    let p = NetworkParams::<f32>::init(&small(), &mut rng(2)).unwrap();
    let x = random_input(64, 8);
    let draws: Vec<Vec<f32>> = (0..20)
        .map(|s| {
            p.encoder_features(&x, ForwardMode::StochasticFull, &mut rng(s))
                .unwrap()
        })
        .collect();
    assert!(draws.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = small();
    let p = NetworkParams::<f32>::init(&cfg, &mut rng(21)).unwrap();
    let inputs: Vec<Vec<f32>> = (0..4).map(|i| random_input(64, 30 + i)).collect();
    let refs: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
    let locs = [
        [0.1, 0.2, 0.3],
        [0.4, 0.5, 0.6],
        [0.7, 0.8, 0.9],
        [0.2, 0.9, 0.5],
    ];
    let mut streams: Vec<ChaCha8Rng> = (0..4).map(|i| rng(50 + i)).collect();
    let mut rs: Vec<&mut ChaCha8Rng> = streams.iter_mut().collect();
    let tape = p.train_forward(&refs, &locs, &mut rs).unwrap();
    let d = vec![[1.0f32, -0.5]; 4];
    let g = p.backward(tape, &d).unwrap();
    assert!(g.is_finite());
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(&g.tensors) {
        assert!(
            t.iter().any(|&v| v != 0.0),
            "{name} has an all-zero gradient"
        );
    }
}

#[test]
fn output_decoding_round_trips() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let o = PlaneOrientation::new(r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5));
        let t = encode_target(o);
        let d = decode_output([t[0], t[1]]);
        assert!((d.theta - o.theta).abs() < 1e-12 && (d.phi - o.phi).abs() < 1e-12);
        // shifting a normalized output by 2 is a shift by pi
        let d2 = decode_output([t[0] + 2.0, t[1] - 2.0]);
        assert!((d2.theta - o.theta).abs() < 1e-12 && (d2.phi - o.phi).abs() < 1e-12);
    }
}

#[test]
fn dropblock_empirical_fraction() {
    let mut r = rng(77);
    let rate = 0.2;
    let (side, masks) = (16usize, 10_000usize);
    let mut dropped = 0usize;
    for _ in 0..masks {
        let m = SampleMask::sample(1, side, 3, rate, &mut r).unwrap();
        dropped += m.keep.iter().filter(|&&k| k == 0).count();
    }
    let frac = dropped as f64 / (masks * side.pow(3)) as f64;
    assert!((frac - rate).abs() <= 0.02, "{frac}");
}

/// Every zero lies inside some 3x3x3 block of zeros that fits in the map.
fn zeros_in_full_blocks(keep: &[u8], side: usize) -> bool {
    let at = |x: usize, y: usize, z: usize| keep[(z * side + y) * side + x];
    let block_zero = |cx: usize, cy: usize, cz: usize| {
        (cz - 1..=cz + 1)
            .all(|z| (cy - 1..=cy + 1).all(|y| (cx - 1..=cx + 1).all(|x| at(x, y, z) == 0)))
    };
    let centers = |c: usize| c.saturating_sub(1).max(1)..=(c + 1).min(side - 2);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                if at(x, y, z) == 0
                    && !centers(z)
                        .any(|cz| centers(y).any(|cy| centers(x).any(|cx| block_zero(cx, cy, cz))))
                {
                    return false;
                }
            }
        }
    }
    true
}

#[test]
fn dropblock_zeros_form_blocks() {
    let mut r = rng(78);
    for _ in 0..200 {
        let m = SampleMask::sample(2, 10, 3, 0.3, &mut r).unwrap();
        for ch in m.keep.chunks(1000) {
            assert!(zeros_in_full_blocks(ch, 10));
        }
    }
}

#[test]
fn dropblock_rescaling_preserves_expectation() {
    let mut r = rng(79);
    let side = 8;
    let x: Vec<f64> = (0..side * side * side)
        .map(|_| 1.0 + r.sample::<f64, _>(StandardNormal).abs())
        .collect();
    let mut acc = vec![0.0; x.len()];
    let n = 10_000;
    for _ in 0..n {
        let m = SampleMask::sample(1, side, 3, 0.15, &mut r).unwrap();
        let mut y = x.clone();
        m.apply(&mut y);
        acc.iter_mut().zip(&y).for_each(|(a, v)| *a += v);
    }
    let total_in: f64 = x.iter().sum();
    let total_out: f64 = acc.iter().sum::<f64>() / n as f64;
    assert!(
        (total_out / total_in - 1.0).abs() < 0.02,
        "{}",
        total_out / total_in
    );
}

#[test]
fn dropblock_gamma_is_exact_for_network_shapes() {
    for (side, rate) in [(64, 0.2), (32, 0.2), (16, 0.15), (6, 0.1), (3, 0.1)] {
        let g = dropblock_gamma([side; 3], 3, rate).unwrap();
        assert!((expected_drop_fraction([side; 3], 3, g) - rate).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let p = NetworkParams::<f32>::init(&small(), &mut rng(5)).unwrap();
    let meta = serde_json::json!({"seed": 5, "epoch": 3});
    let bytes = checkpoint::encode(&p, &meta).unwrap();
    let (q, m) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(p, q);
    assert_eq!(meta, m);
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(checkpoint::decode(&bad).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(checkpoint::decode(b"nope").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&p, &meta, &path).unwrap();
    let (r, _) = checkpoint::load(&path).unwrap();
    let x = random_input(64, 1);
    assert_eq!(
        p.forward(&x, [0.5; 3], ForwardMode::Deterministic, &mut rng(0))
            .unwrap(),
        r.forward(&x, [0.5; 3], ForwardMode::Deterministic, &mut rng(0))
            .unwrap()
    );
}

#[test]
fn miniature_config_is_valid() {
    let c = NetworkConfig::miniature();
    c.validate().unwrap();
    let p = NetworkParams::<f64>::init(&c, &mut rng(0)).unwrap();
    let out = p
        .forward(
            &vec![0.25; 512],
            [0.5; 3],
            ForwardMode::StochasticFull,
            &mut rng(1),
        )
        .unwrap();
    assert!(out.iter().all(|v| v.is_finite()));
}
