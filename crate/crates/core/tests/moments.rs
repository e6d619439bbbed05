use graphuq::adf::{relu_moments, softmax_moments};
use graphuq::linalg::{std_normal_cdf, std_normal_pdf};
use graphuq::model::softmax_row;
use graphuq::oracle::relu_quadrature;
use graphuq::RngStream;

/// Composite Simpson rule with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[max(X,0)]` and `Var[max(X,0)]` for `X ~ N(mu, v)` by Simpson's rule.
fn relu_simpson(mu: f64, v: f64) -> (f64, f64) {
    let s = v.sqrt();
    let lo = (mu - 12.0 * s).max(0.0);
    let hi = mu + 12.0 * s;
    if hi <= 0.0 {
        return (0.0, 0.0);
    }
    let pdf = |x: f64| density((x - mu) / s) / s;
    let n = 20_000;
    let mean = simpson(|x| x * pdf(x), lo, hi, n);
    let mass_at_zero = 1.0 - simpson(pdf, lo, hi, n);
    let var = simpson(|x| (x - mean) * (x - mean) * pdf(x), lo, hi, n) + mean * mean * mass_at_zero;
    (mean, var)
}

#[test]
fn normal_cdf_matches_integrated_density() {
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let x = -8.0 + 16.0 * i as f64 / 999.0;
        let n = 2 * ((x.abs() * 400.0).ceil() as usize).max(1);
        let half = simpson(density, 0.0, x.abs(), n);
        let reference = if x >= 0.0 { 0.5 + half } else { 0.5 - half };
        worst = worst.max((std_normal_cdf(x) - reference).abs());
    }
    assert!(worst <= 1e-10, "max error {worst}");
}

#[test]
fn normal_cdf_and_density_reference_values() {
    assert_eq!(std_normal_cdf(0.0), 0.5);
    assert!((std_normal_cdf(1.96) - 0.975).abs() <= 1e-5);
    assert!(std_normal_cdf(-8.0) < 1e-14);
    assert!((std_normal_pdf(0.0) - 0.3989423).abs() <= 1e-7);
    assert_eq!(std_normal_pdf(3.0), std_normal_pdf(-3.0));
    assert!(std_normal_pdf(40.0) < 1e-300);
}

fn grid() -> Vec<(f64, f64)> {
    let mus = (0..=20).map(|i| -5.0 + 0.5 * i as f64);
    let vars = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0];
    mus.flat_map(|m| vars.iter().map(move |&v| (m, v)))
        .collect()
}

#[test]
fn relu_closed_form_matches_quadrature_on_grid() {
    let g = grid();
    assert!(g.len() >= 200);
    for (mu, v) in g {
        let (a, b) = relu_moments(mu, v).unwrap();
        let (qa, qb) = relu_quadrature(mu, v).unwrap();
        assert!(
            (a - qa).abs() <= 1e-6 && (b - qb).abs() <= 1e-6,
            "({mu}, {v}): {a},{b} vs {qa},{qb}"
        );
    }
}

#[test]
fn relu_quadrature_matches_simpson_oracle() {
    for (mu, v) in grid() {
        let (qa, qb) = relu_quadrature(mu, v).unwrap();
        let (sa, sb) = relu_simpson(mu, v);
        assert!(
            (qa - sa).abs() <= 1e-9 && (qb - sb).abs() <= 1e-9,
            "({mu}, {v}): {qa},{qb} vs {sa},{sb}"
        );
    }
}

#[test]
fn relu_quadrature_reference_values() {
    let (m, v) = relu_quadrature(0.0, 1.0).unwrap();
    let tau = 2.0 * std::f64::consts::PI;
    assert!((m - 1.0 / tau.sqrt()).abs() <= 1e-9);
    assert!((v - (0.5 - 1.0 / tau)).abs() <= 1e-9);
    let (m, v) = relu_quadrature(5.0, 1e-6).unwrap();
    assert!((m - 5.0).abs() <= 1e-9 && (v - 1e-6).abs() <= 1e-12);
    let (m, v) = relu_quadrature(-5.0, 1e-6).unwrap();
    assert!(m.abs() <= 1e-12 && v.abs() <= 1e-12);
    assert!(relu_quadrature(0.0, 0.0).is_err());
    assert!(relu_quadrature(0.0, -1.0).is_err());
}

#[test]
fn softmax_delta_method_within_factor_two_of_sampling() {
    let mut rng = RngStream::new(11, 0);
    let samples = 40_000;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..5).map(|_| 3.0 * rng.standard_normal()).collect();
        let v: Vec<f64> = (0..5).map(|_| 0.1 * rng.uniform()).collect();
        let (_, delta) = softmax_moments(&mu, &v).unwrap();
        let mut sum = [0.0; 5];
        let mut sum_sq = [0.0; 5];
        for _ in 0..samples {
            let z: Vec<f64> = mu
                .iter()
                .zip(&v)
                .map(|(m, s)| m + s.sqrt() * rng.standard_normal())
                .collect();
            for (c, p) in softmax_row(&z).into_iter().enumerate() {
                sum[c] += p;
                sum_sq[c] += p * p;
            }
        }
        for c in 0..5 {
            let m = sum[c] / samples as f64;
            let emp = sum_sq[c] / samples as f64 - m * m;
            if emp < 1e-10 {
                continue;
            }
            let ratio = delta[c] / emp;
            assert!(
                (0.5..=2.0).contains(&ratio),
                "class {c}: delta {} empirical {emp}",
                delta[c]
            );
        }
    }
}

#[test]
fn softmax_moments_edge_cases() {
    let (s, v) = softmax_moments(&[1.0, -2.0, 0.5], &[0.0; 3]).unwrap();
    assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    assert_eq!(v, vec![0.0; 3]);
    assert!(softmax_moments(&[0.0, 0.0], &[0.1]).is_err());
    assert!(softmax_moments(&[0.0, 0.0], &[0.1, -0.1]).is_err());
}
