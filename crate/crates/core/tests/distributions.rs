//! Sampling and closed forms against quadrature and frequency oracles.

mod common;

use common::tanh_sinh;
use gdc_core::masks::{sample_dropedge_mask, sample_dropout_mask, sample_gdc_masks, sample_node_mask, Concrete};
use gdc_core::model::{init_params, glorot_bound, GcnConfig};
use gdc_core::variational::{kl_kuma_beta, kuma_pdf, kuma_sample};
use gdc_core::PreparedGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ln q(x)` for Kumaraswamy(a, b), written in terms of `ln x`.
fn ln_kuma(x: f64, a: f64, b: f64) -> f64 {
    let lx = x.ln();
    let one_minus_xa = -(a * lx).exp_m1();
    let tail = if b == 1.0 { 0.0 } else { (b - 1.0) * one_minus_xa.ln() };
    a.ln() + b.ln() + (a - 1.0) * lx + tail
}

#[test]
fn kl_closed_form_matches_quadrature() {
    let start = std::time::Instant::now();
    for &(c, layers) in &[(2.0, 2usize), (2.0, 3), (1.0, 2)] {
        let alpha = c / layers as f64;
        for a in [0.5, 1.0, 2.0] {
            for b in [1.0, 2.0, 4.0] {
                // KL(Kuma(a, b) ‖ Beta(α, 1)), prior density α x^{α-1}.
                let kl = tanh_sinh(|x, _| {
                    let lq = ln_kuma(x, a, b);
                    let lp = alpha.ln() + (alpha - 1.0) * x.ln();
                    lq.exp() * (lq - lp)
                });
                let closed = kl_kuma_beta(a, b, c, layers).unwrap();
                assert!((closed - kl).abs() < 1e-6, "c {c} L {layers} a {a} b {b}: {closed} vs {kl}");
            }
        }
        assert_eq!(kl_kuma_beta(alpha, 1.0, c, layers).unwrap(), 0.0);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn pdf_integrates_to_one() {
    // The density is integrated on (0, 1 - δ), where every node is a
    // representable argument, and the rest comes from the CDF 1 - (1 - x^a)^b.
    let delta = 1e-6;
    for a in [0.5, 1.0, 2.0, 5.0] {
        for b in [0.5, 1.0, 2.0, 5.0] {
            let body = tanh_sinh(|t, _| (1.0 - delta) * kuma_pdf((1.0 - delta) * t, a, b).unwrap());
            let tail = (1.0 - (1.0 - delta).powf(a)).powf(b);
            let total = body + tail;
            assert!((total - 1.0).abs() < 1e-8, "a {a} b {b}: {total}");
        }
    }
    assert_eq!(kuma_pdf(0.3, 1.0, 1.0).unwrap(), 1.0);
    assert_eq!(kuma_pdf(0.5, 2.0, 1.0).unwrap(), 1.0);
    assert!(kuma_pdf(0.0, 1.0, 1.0).is_err());
    assert!(kuma_pdf(1.0, 1.0, 1.0).is_err());
}

#[test]
fn uniform_case_passes_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n).map(|_| kuma_sample(1.0, 1.0, rng.gen())).collect();
    xs.sort_by(f64::total_cmp);
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
        .fold(0.0, f64::max);
    assert!(d < 0.01, "KS statistic {d}");
    assert_eq!(kuma_sample(1.0, 1.0, 0.25), 0.75);
}

#[test]
fn sample_mean_matches_quadrature() {
    let (a, b) = (2.0, 3.0);
    let mean = tanh_sinh(|x, _| x * ln_kuma(x, a, b).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 1_000_000;
    let emp = (0..n).map(|_| kuma_sample(a, b, rng.gen())).sum::<f64>() / n as f64;
    assert!((emp - mean).abs() < 0.002, "{emp} vs {mean}");
}

/// Wilson–Hilferty approximation of the upper 1% point of χ²(k).
fn chi2_crit_99(k: f64) -> f64 {
    let z = 2.326_347_874;
    let v = 2.0 / (9.0 * k);
    k * (1.0 - v + z * v.sqrt()).powi(3)
}

#[test]
fn histograms_match_the_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 1_000_000usize;
    let bins = 40;
    for a in [0.5, 1.0, 2.0, 5.0] {
        for b in [0.5, 1.0, 2.0, 5.0] {
            let mut counts = vec![0usize; bins];
            for _ in 0..n {
                let x = kuma_sample(a, b, rng.gen());
                counts[((x * bins as f64) as usize).min(bins - 1)] += 1;
            }
            // Expected bin mass from the density, merged until every cell expects ≥ 5.
            let mass: Vec<f64> = (0..bins)
                .map(|k| {
                    let (lo, hi) = (k as f64 / bins as f64, (k + 1) as f64 / bins as f64);
                    tanh_sinh(|t, _| (hi - lo) * ln_kuma(lo + (hi - lo) * t, a, b).exp())
                })
                .collect();
            let (mut chi2, mut cells, mut e_acc, mut o_acc) = (0.0, 0usize, 0.0, 0usize);
            for k in 0..bins {
                e_acc += mass[k] * n as f64;
                o_acc += counts[k];
                if e_acc >= 5.0 || k == bins - 1 {
                    chi2 += (o_acc as f64 - e_acc).powi(2) / e_acc;
                    cells += 1;
                    e_acc = 0.0;
                    o_acc = 0;
                }
            }
            let crit = chi2_crit_99((cells - 1) as f64);
            assert!(chi2 < crit, "a {a} b {b}: χ² {chi2} over {cells} cells, critical {crit}");
        }
    }
}

fn within_4_sigma(freq: f64, p: f64, n: usize) -> bool {
    (freq - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn dropout_and_node_mask_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let z = sample_dropout_mask(1000, 1000, 0.7, &mut rng).unwrap();
    let mean = z.data().iter().sum::<f64>() / 1e6;
    assert!((mean - 0.7).abs() < 0.002);
    assert!(within_4_sigma(mean, 0.7, 1_000_000));
    assert!(z.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let m = sample_node_mask(200_000, 0.3, &mut rng).unwrap();
    assert!(within_4_sigma(m.iter().sum::<f64>() / 2e5, 0.3, 200_000));
    assert!(sample_dropout_mask(3, 4, 1.0, &mut rng).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(sample_dropout_mask(3, 4, 0.0, &mut rng).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(sample_dropout_mask(3, 4, 1.5, &mut rng).is_err());
}

#[test]
fn dropedge_frequency_over_many_edges() {
    // Ring lattice: every node linked to its next five neighbours, 10^5 edges.
    let n = 20_000;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (1..=5).map(move |k| (u, (u + k) % n))).collect();
    let g = PreparedGraph::from_pairs(&pairs, n, false).unwrap();
    let e = g.edges();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let m = sample_dropedge_mask(e, 0.8, true, &mut rng).unwrap();
    let block = m.block(0);
    let (mut kept, mut total) = (0.0, 0usize);
    for i in 0..e.len() {
        assert_eq!(block[i], block[e.reverse(i)]);
        if e.row(i) < e.col(i) {
            kept += block[i];
            total += 1;
        }
    }
    assert_eq!(total, 100_000);
    assert!((kept / total as f64 - 0.8).abs() < 0.01);
    let asym = sample_gdc_masks(e, 3, 0.4, false, &mut rng).unwrap();
    let entries = (3 * e.len()) as f64;
    let freq = asym.blocks().iter().flatten().sum::<f64>() / entries;
    assert!(within_4_sigma(freq, 0.4, entries as usize));
}

/// Fraction of concrete draws within 1e-3 of 0 or 1, exactly: the logistic
/// noise must push the pre-activation beyond ±ln 999.
fn analytic_near_binary(pi: f64, t: f64, standard: bool) -> f64 {
    let logistic_cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
    let edge = 999.0f64.ln();
    let lp = (pi / (1.0 - pi)).ln();
    // Pre-activation is lp/t + L (literal) or (lp + L)/t (standard), L ~ Logistic(0, 1).
    let (lo, hi) = if standard { (-edge * t - lp, edge * t - lp) } else { (-edge - lp / t, edge - lp / t) };
    1.0 - (logistic_cdf(hi) - logistic_cdf(lo))
}

#[test]
fn concrete_low_temperature_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let n = 100_000;
    for &pi in &[0.9, 0.5] {
        for standard in [false, true] {
            let c = Concrete::new(0.01, standard).unwrap();
            let near = (0..n)
                .filter(|_| {
                    let z = c.relax(pi, rng.gen());
                    !(1e-3..=1.0 - 1e-3).contains(&z)
                })
                .count() as f64
                / n as f64;
            let want = analytic_near_binary(pi, 0.01, standard);
            assert!(within_4_sigma(near, want, n) || (near - want).abs() < 1e-9, "π {pi} standard {standard}: {near} vs {want}");
        }
    }
    // With a balanced keep probability only the standard form sharpens.
    assert!(analytic_near_binary(0.5, 0.01, false) < 0.5);
    assert!(analytic_near_binary(0.5, 0.01, true) > 0.95);
}

#[test]
fn concrete_mean_at_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let c = Concrete::new(0.67, false).unwrap();
    let n = 100_000;
    let mean = (0..n).map(|_| c.relax(0.5, rng.gen())).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.005);
    assert!((c.relax(0.5, 0.3) - 0.3).abs() < 1e-15);
}

#[test]
fn glorot_weights_are_centred() {
    let config = GcnConfig::plain(vec![400, 250]);
    let p = init_params(&config, &mut ChaCha8Rng::seed_from_u64(28)).unwrap();
    let w = p[0].weight.data();
    let bound = glorot_bound(400, 250);
    assert!(w.iter().all(|v| v.abs() <= bound));
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let sigma = bound / 3f64.sqrt();
    assert!(mean.abs() < 3.0 * sigma / (w.len() as f64).sqrt());
    assert!((glorot_bound(128, 7) - (6.0f64 / 135.0).sqrt()).abs() < 1e-15);
}
