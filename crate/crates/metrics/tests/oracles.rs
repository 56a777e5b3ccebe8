use medseg_data::{Domain, Mask};
use medseg_metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random blobs: a few filled discs, so boundaries are non-trivial.
fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> Mask {
    let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64), rng.random_range(1.0..8.0)))
        .collect();
    Mask::from_fn(size, size, |y, x| {
        discs.iter().any(|&(cy, cx, r)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
    })
}

fn oracle_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            let interior = (-1..=1).all(|dy| (-1..=1).all(|dx| on(y + dy, x + dx)));
            if !interior {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn oracle_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() as f64 - 1.0);
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

fn nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// All-pairs HD95 and the exact Hausdorff distance.
fn oracle_hd(a: &Mask, b: &Mask) -> Option<(f64, f64)> {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let (dab, dba) = (nearest(&ba, &bb), nearest(&bb, &ba));
    let hd = dab.iter().chain(&dba).copied().fold(0.0, f64::max);
    Some((oracle_percentile(dab, 0.95).max(oracle_percentile(dba, 0.95)), hd))
}

fn oracle_dice(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut pa, mut pb) = (0usize, 0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            pa += a.get(y, x) as usize;
            pb += b.get(y, x) as usize;
            inter += (a.get(y, x) && b.get(y, x)) as usize;
        }
    }
    if pa + pb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (pa + pb) as f64
    }
}

#[test]
fn hd95_and_dice_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let a = random_mask(&mut rng, 32);
        let b = random_mask(&mut rng, 32);
        assert_eq!(dice(&a, &b).unwrap(), oracle_dice(&a, &b));
        let (want, hd) = oracle_hd(&a, &b).unwrap();
        let got = hd95(&a, &b).unwrap().unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        assert!(got <= hd + 1e-12);
    }
}

fn oracle_pearson(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let num = n * sxy - sx * sy;
    let r = num / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    (r, num / (n * sxx - sx * sx))
}

#[test]
fn correlation_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [5usize, 5, 12, 40] {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (r, slope) = oracle_pearson(&xs, &ys);
        assert!((pearson_r(&xs, &ys).unwrap() - r).abs() <= 1e-12);
        assert!((ols_slope(&xs, &ys).unwrap() - slope).abs() <= 1e-12);
    }
}

fn record(i: usize, class: usize, dice: f64, hd95: Option<f64>, area: f64, overlap: f64, domain: u8) -> EvalRecord {
    EvalRecord {
        id: format!("{i:05}"),
        class,
        dice,
        hd95,
        area_fraction: area,
        overlap_rate: overlap,
        domain: Domain::new(domain).unwrap(),
    }
}

fn mixed_records() -> Vec<EvalRecord> {
    vec![
        record(0, 0, 0.90, Some(1.0), 0.01, 0.00, 0),
        record(0, 1, 0.80, Some(2.0), 0.06, 0.00, 0),
        record(1, 0, 0.70, Some(3.0), 0.03, 0.15, 1),
        record(1, 1, 0.60, None, 0.08, 0.15, 1),
        record(2, 0, 0.50, Some(5.0), 0.05, 0.55, 2),
        record(2, 1, 0.40, Some(4.0), 0.02, 0.55, 2),
        record(3, 0, 1.00, Some(0.0), 0.04, 1.00, 0),
        record(3, 1, 0.30, None, 0.09, 1.00, 0),
        record(4, 0, 0.20, Some(6.0), 0.049, 0.12, 3),
        record(4, 1, 0.10, Some(7.0), 0.051, 0.12, 3),
    ]
}

#[test]
fn stratify_mixed_set_matches_hand_sums() {
    let rs = mixed_records();
    let t = stratify(&rs, StratumKey::SmallObject).unwrap();
    // small: 0.90, 0.70, 0.40, 1.00, 0.20
    assert_eq!(t[0].count, 5);
    assert!((t[0].mean_dice.unwrap() - 3.2 / 5.0).abs() < 1e-12);
    assert!((t[0].mean_hd95.unwrap() - 14.0 / 5.0).abs() < 1e-12);
    assert_eq!(t[1].count, 5);
    assert_eq!(t[1].hd95_undefined, 2);
    assert!((t[1].mean_hd95.unwrap() - 14.0 / 3.0).abs() < 1e-12);

    let d = stratify(&rs, StratumKey::Domain).unwrap();
    assert_eq!(d.len(), 8);
    assert_eq!(d[0].count, 4);
    assert!((d[0].mean_dice.unwrap() - 3.0 / 4.0).abs() < 1e-12);
    assert_eq!(d[7].count, 0);
    assert_eq!(d[7].mean_dice, None);

    let o = stratify(&rs, StratumKey::OverlapBin).unwrap();
    assert_eq!(o.iter().map(|r| r.count).collect::<Vec<_>>(), vec![2, 4, 0, 0, 0, 2, 0, 0, 0, 2]);
    assert!((o[1].mean_dice.unwrap() - 1.6 / 4.0).abs() < 1e-12);
}

#[test]
fn all_small_records_form_one_stratum() {
    let rs: Vec<_> = (0..6).map(|i| record(i, 0, 0.5, Some(1.0), 0.01, 0.0, 0)).collect();
    let t = stratify(&rs, StratumKey::SmallObject).unwrap();
    assert_eq!((t[0].count, t[1].count), (6, 0));
    assert_eq!(t[1].mean_dice, None);
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let rs = mixed_records();
    let summary = write_reports(dir.path(), &rs).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 10);
    assert!(csv.contains("00001,1,0.6,nan,0.08,0.15,style1"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["records"], 10);
    assert_eq!(json["hd95_undefined"], 2);
    assert_eq!(json["domain"][7]["count"], 0);
    let fit = std::fs::read_to_string(dir.path().join("overlap_fit.csv")).unwrap();
    assert!(fit.starts_with(&format!("# r={}\n", summary.overlap_fit.r.unwrap())));
    assert_eq!(fit.lines().filter(|l| !l.starts_with('#')).count(), 11);
    assert!((summary.mdice - (0.66 + 0.44) / 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn symmetric_metrics(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, 24);
        let b = random_mask(&mut rng, 24);
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn slope_ignores_shift_and_r_is_bounded(
        xs in prop::collection::vec(-10.0f64..10.0, 3..20),
        shift in -5.0f64..5.0,
        noise_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = ys.iter().map(|y| y + shift).collect();
        if let (Ok(a), Ok(b)) = (ols_slope(&xs, &ys), ols_slope(&xs, &shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        if let Ok(r) = pearson_r(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
