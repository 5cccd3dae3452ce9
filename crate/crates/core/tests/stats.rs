use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use xsect_core::phantom::Landmark;
use xsect_core::stats::{
    agreement_table, bland_altman, jones_loa, jones_loa_periodic, mae_table, position_loa,
    write_agreement_csv, Measurement, Method, LOA_FACTOR,
};
use xsect_core::{PlaneOrientation, Vec3};

fn grid_strategy(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-50.0f64..50.0, n), 2..40)
}

proptest! {
    #[test]
    fn location_invariance(g in grid_strategy(3), c in -1e3f64..1e3) {
        let a = jones_loa(&g).unwrap();
        let shifted: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
        let b = jones_loa(&shifted).unwrap();
        prop_assert!((a.sigma - b.sigma).abs() <= 1e-9 * (1.0 + a.sigma));
    }

    #[test]
    fn scale_equivariance(g in grid_strategy(4), c in 0.01f64..100.0) {
        let a = jones_loa(&g).unwrap();
        let scaled: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let b = jones_loa(&scaled).unwrap();
        prop_assert!((b.sigma - c * a.sigma).abs() <= 1e-9 * (1.0 + c * a.sigma));
    }
}

#[test]
fn two_operator_jones_equals_bland_altman() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let m = r.gen_range(2..60);
        let g: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let t: f64 = r.gen_range(-30.0..30.0);
                vec![t + r.gen_range(-3.0..3.0), t + 0.5 + r.gen_range(-2.0..2.0)]
            })
            .collect();
        let a: Vec<f64> = g.iter().map(|x| x[0]).collect();
        let b: Vec<f64> = g.iter().map(|x| x[1]).collect();
        let ba = bland_altman(&a, &b).unwrap();
        // the deviation of one operator from the pair mean is half the pair
        // difference, hence the factor sqrt(2) between the two sigmas
        let jones = jones_loa(&g).unwrap();
        let half_width = 0.5 * (ba.upper - ba.lower);
        let rel = (jones.loa * 2f64.sqrt() - half_width).abs() / half_width;
        assert!(rel < 1e-9, "{rel}");
        assert!((half_width - LOA_FACTOR * ba.sd).abs() < 1e-12 * half_width.max(1.0));
    }
}

#[test]
fn injected_noise_recovers_operator_loa() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let sigma = 21.39 / 1.96;
    let noise = Normal::new(0.0, sigma).unwrap();
    let g: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let t: f64 = r.gen_range(-60.0..60.0);
            (0..3).map(|_| t + noise.sample(&mut r)).collect()
        })
        .collect();
    let a = jones_loa_periodic(&g, 180.0).unwrap();
    assert!((a.loa / 21.39 - 1.0).abs() < 0.15, "{}", a.loa);
}

#[test]
fn periodic_unwrap_handles_wrap() {
    let g = vec![vec![89.0, -89.0], vec![10.0, 12.0], vec![-88.0, 88.0]];
    let a = jones_loa_periodic(&g, 180.0).unwrap();
    let b = jones_loa(&[vec![89.0, 91.0], vec![10.0, 12.0], vec![-88.0, -92.0]]).unwrap();
    assert!((a.sigma - b.sigma).abs() < 1e-9);
}

#[test]
fn position_loa_is_rms_of_coordinates() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let g: Vec<Vec<Vec3>> = (0..30)
        .map(|_| {
            (0..3)
                .map(|_| Vec3::new(r.gen(), 2.0 * r.gen::<f64>(), 3.0 * r.gen::<f64>()))
                .collect()
        })
        .collect();
    let per: Vec<f64> = (0..3)
        .map(|c| {
            let gc: Vec<Vec<f64>> = g
                .iter()
                .map(|row| row.iter().map(|p| p[c]).collect())
                .collect();
            jones_loa(&gc).unwrap().sigma
        })
        .collect();
    let rms = (per.iter().map(|s| s * s).sum::<f64>() / 3.0).sqrt();
    assert!((position_loa(&g).unwrap().sigma - rms).abs() < 1e-12);
}

fn measurements(noise: f64, skip_ann: bool, with_pivot: bool) -> Vec<Measurement> {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();
    for case in 0..5 {
        for lm in Landmark::ALL {
            if skip_ann && lm == Landmark::Ann {
                continue;
            }
            let base = (0.1 * lm.index() as f64, -0.05 * case as f64);
            for op in 0..3 {
                let e = |r: &mut ChaCha8Rng| noise * r.gen_range(-1.0..1.0);
                out.push(Measurement {
                    case: format!("c{case}"),
                    landmark: lm,
                    operator: op,
                    pivot: with_pivot
                        .then(|| Vec3::new(case as f64 + e(&mut r), e(&mut r), lm.index() as f64)),
                    orientation: PlaneOrientation::from_canonical(
                        base.0 + e(&mut r),
                        base.1 + e(&mut r),
                    ),
                });
            }
        }
    }
    out
}

#[test]
fn zero_noise_gives_zero_loa_block() {
    let rows = agreement_table(Method::Manual, &measurements(0.0, false, true));
    assert_eq!(rows.len(), 12);
    for r in rows {
        assert!(r.loa_pos_mm.unwrap().abs() < 1e-12);
        assert!(r.loa_theta_deg.unwrap().abs() < 1e-9 && r.loa_phi_deg.unwrap().abs() < 1e-9);
    }
}

#[test]
fn missing_landmark_is_na_and_excluded_from_all() {
    let ms = measurements(0.05, true, false);
    let rows = agreement_table(Method::Centerline, &ms);
    assert_eq!(rows[0].landmark, Some(Landmark::Ann));
    assert!(rows[0].loa_theta_deg.is_none() && rows[0].loa_phi_deg.is_none());
    assert!(rows.iter().all(|r| r.loa_pos_mm.is_none()));

    // pooled recomputation of the All row
    let mut pooled_t = Vec::new();
    let mut keys: Vec<(String, usize)> = ms
        .iter()
        .map(|m| (m.case.clone(), m.landmark.index()))
        .collect();
    keys.sort();
    keys.dedup();
    for (case, li) in &keys {
        let mut row: Vec<&Measurement> = ms
            .iter()
            .filter(|m| &m.case == case && m.landmark.index() == *li)
            .collect();
        row.sort_by_key(|m| m.operator);
        pooled_t.push(
            row.iter()
                .map(|m| m.orientation.theta)
                .collect::<Vec<f64>>(),
        );
    }
    let want = jones_loa_periodic(&pooled_t, std::f64::consts::PI)
        .unwrap()
        .loa
        .to_degrees();
    let all = rows.last().unwrap();
    assert!(all.landmark.is_none());
    assert!((all.loa_theta_deg.unwrap() - want).abs() < 1e-9);

    let mut buf = Vec::new();
    write_agreement_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("landmark,method,loa_pos_mm,loa_theta_deg,loa_phi_deg\n"));
    assert!(text.contains("Ann,centerline-baseline,N/A,N/A,N/A"));
    assert!(text.lines().last().unwrap().starts_with("All,"));
}

#[test]
fn mae_table_pools_all_rows() {
    let ms = measurements(0.05, false, false);
    let truth = |_: &str, lm: Landmark| {
        Some(PlaneOrientation::from_canonical(
            0.1 * lm.index() as f64,
            0.0,
        ))
    };
    let rows = mae_table(Method::NoUQ, &ms, truth);
    assert_eq!(rows.len(), 12);
    let per: f64 = rows[..11]
        .iter()
        .map(|r| r.theta_mae_deg.unwrap())
        .sum::<f64>()
        / 11.0;
    // equal counts per landmark, so the pooled mean is the mean of means
    assert!((rows[11].theta_mae_deg.unwrap() - per).abs() < 1e-9);
}
