mod common;

use common::{ks_critical_001, ks_statistic};
use dpmld::gumbel::{hard_from_gumbel, sample_gumbel, soft_from_gumbel};
use dpmld::random::{stream, Stream};

#[test]
fn gumbel_sampler_passes_ks() {
    let n = 100_000;
    let g: Vec<f64> = sample_gumbel(n, &mut stream(10, Stream::Audit));
    let d = ks_statistic(&g, |x| (-(-x).exp()).exp());
    assert!(d < ks_critical_001(n), "D = {d}");
}

#[test]
fn gumbel_max_frequencies_match_probabilities() {
    let n = 100_000;
    for (i, &p) in [0.1, 0.35, 0.5, 0.8].iter().enumerate() {
        let mut rng = stream(20 + i as u64, Stream::Audit);
        let pi = [1.0 - p, p];
        let keep = (0..n)
            .filter(|_| {
                let g: Vec<f64> = sample_gumbel(2, &mut rng);
                hard_from_gumbel(pi, [g[0], g[1]]).argmax() == 1
            })
            .count();
        let freq = keep as f64 / n as f64;
        assert!((freq - p).abs() < 0.01, "p={p} freq={freq}");
    }
}

#[test]
fn low_temperature_soft_samples_agree_with_hard() {
    let mut rng = stream(30, Stream::Audit);
    for trial in 0..10_000 {
        let p = 0.05 + 0.9 * (trial as f64 / 10_000.0);
        let pi = [1.0 - p, p];
        let g: Vec<f64> = sample_gumbel(2, &mut rng);
        let g = [g[0], g[1]];
        assert_eq!(soft_from_gumbel(pi, g, 0.05).argmax(), hard_from_gumbel(pi, g).argmax());
    }
}

#[test]
fn soft_argmax_frequencies_at_tau_point_one() {
    let n = 100_000;
    let p = 0.3;
    let pi = [1.0 - p, p];
    let mut rng = stream(31, Stream::Audit);
    let keep = (0..n)
        .filter(|_| {
            let g: Vec<f64> = sample_gumbel(2, &mut rng);
            soft_from_gumbel(pi, [g[0], g[1]], 0.1).argmax() == 1
        })
        .count();
    let freq = keep as f64 / n as f64;
    // total variation of a two-point distribution is the gap in either mass
    assert!((freq - p).abs() < 0.02, "{freq}");
}

#[test]
fn soft_keep_component_has_logistic_form() {
    // keep = σ((g1 - g0 + ln p - ln(1-p)) / τ)
    let mut rng = stream(32, Stream::Audit);
    for _ in 0..1000 {
        let g: Vec<f64> = sample_gumbel(2, &mut rng);
        let (p, tau) = (0.27, 0.6);
        let v = soft_from_gumbel([1.0 - p, p], [g[0], g[1]], tau).values();
        let z = (g[1] - g[0] + p.ln() - (1.0 - p).ln()) / tau;
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((v[1] - expect).abs() < 1e-12);
    }
}
