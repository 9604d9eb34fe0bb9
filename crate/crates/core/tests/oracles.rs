//! Library results checked against independent computations: ODE
//! integration, Monte Carlo, brute-force histograms, finite differences and
//! a plain re-implementation of RAdam.

use flowmap::autodiff::{ParamVector, Tensor};
use flowmap::eval::{kl_checkerboard, kl_quadrature, sample_flow_map};
use flowmap::fields::{dx_dt, eulerian_jvp, eval_v, eval_x, AnalyticGaussianField, Field, Model};
use flowmap::gradcheck::random_model;
use flowmap::interpolants::{interpolate, DatasetSpec, Schedule};
use flowmap::objectives::{distill_residuals, Method, OffDiagBatch, StopgradPolicy};
use flowmap::rng::{stream, Stream};
use flowmap::training::{EmaState, RAdamState};
use rand::Rng as _;

fn rk4(f: impl Fn(f64, f64) -> f64, s: f64, t: f64, x: f64, n: usize) -> f64 {
    let h = (t - s) / n as f64;
    let mut x = x;
    for i in 0..n {
        let tau = s + i as f64 * h;
        let k1 = f(tau, x);
        let k2 = f(tau + h / 2.0, x + h / 2.0 * k1);
        let k3 = f(tau + h / 2.0, x + h / 2.0 * k2);
        let k4 = f(tau + h, x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

#[test]
fn gaussian_map_solves_the_probability_flow() {
    let field = AnalyticGaussianField::new(0.7, vec![1.5], 2.0);
    for (s, t, x) in [
        (0.0, 1.0, 0.3),
        (0.2, 0.9, -1.1),
        (0.8, 0.1, 2.5),
        (0.5, 0.5001, 0.0),
    ] {
        let ode = rk4(|tau, y| field.drift(tau, &[y])[0], s, t, x, 10_000);
        let map = field.map(s, t, &[x])[0];
        assert!(
            (ode - map).abs() < 1e-10,
            "({s}, {t}, {x}): rk4 {ode} vs map {map}"
        );
    }
}

#[test]
fn gaussian_drift_matches_monte_carlo_regression() {
    // b_t(x) = E[İ_t | I_t = x] is affine for Gaussian endpoints, so a
    // least-squares fit of İ on I recovers it.
    let (s0, m, sigma) = (1.0, 0.5, 2.0);
    let field = AnalyticGaussianField::new(s0, vec![m], sigma);
    let dataset = DatasetSpec::gaussian(vec![m], sigma).with_base_std(s0);
    let mut rng = stream(11, Stream::Data);
    for t in [0.1, 0.5, 0.9] {
        let n = 1_000_000;
        let (x0, x1) = dataset.sample_coupling(&mut rng, n);
        let (it, dit) = interpolate(Schedule::Linear, &x0, &x1, &Tensor::full(n, 1, t));
        let (a, b) = (it.data(), dit.data());
        let (ma, mb) = (
            a.iter().sum::<f64>() / n as f64,
            b.iter().sum::<f64>() / n as f64,
        );
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let var: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let slope = cov / var;
        let intercept = mb - slope * ma;
        for x in [-2.0, 0.0, 2.0] {
            let mc = intercept + slope * x;
            let exact = field.drift(t, &[x])[0];
            assert!((mc - exact).abs() < 0.02, "t {t} x {x}: MC {mc} vs {exact}");
        }
    }
}

#[test]
fn gaussian_velocity_is_the_map_secant() {
    let field = AnalyticGaussianField::new(1.0, vec![-0.3, 0.8], 1.7);
    for (s, t) in [(0.0, 1.0), (0.25, 0.75), (0.9, 0.2)] {
        let x = [0.4, -1.2];
        let map = field.map(s, t, &x);
        let v = field.velocity(s, t, &x);
        for d in 0..2 {
            assert!((x[d] + (t - s) * v[d] - map[d]).abs() < 1e-14);
        }
    }
}

#[test]
fn checkerboard_cell_masses_by_monte_carlo() {
    let dataset = DatasetSpec::checkerboard();
    let n = 1_000_000;
    let x = dataset.sample_target(&mut stream(12, Stream::Data), n);
    let mut cells = [0usize; 16];
    for r in x.iter_rows() {
        let i = (((r[0] + 1.0) * 2.0).floor() as usize).min(3);
        let j = (((r[1] + 1.0) * 2.0).floor() as usize).min(3);
        cells[i * 4 + j] += 1;
    }
    let sd = (0.125 * 0.875 / n as f64).sqrt();
    for i in 0..4 {
        for j in 0..4 {
            let p = cells[i * 4 + j] as f64 / n as f64;
            if (i + j) % 2 == 0 {
                assert!((p - 0.125).abs() < 5.0 * sd, "cell ({i}, {j}) mass {p}");
            } else {
                assert_eq!(
                    cells[i * 4 + j],
                    0,
                    "cell ({i}, {j}) is outside the support"
                );
            }
        }
    }
}

/// Probability of the `M x M` bin `(i, j)` under the checkerboard, by exact
/// overlap area with the selected cells.
fn exact_bin_mass(i: usize, j: usize, m: usize) -> f64 {
    let w = 2.0 / m as f64;
    let overlap = |a: f64, b: f64, c: f64, d: f64| (b.min(d) - a.max(c)).max(0.0);
    let (x0, y0) = (-1.0 + i as f64 * w, -1.0 + j as f64 * w);
    let mut mass = 0.0;
    for ci in 0..4 {
        for cj in 0..4 {
            if (ci + cj) % 2 == 1 {
                continue;
            }
            let (cx, cy) = (-1.0 + ci as f64 * 0.5, -1.0 + cj as f64 * 0.5);
            mass += 0.5 * overlap(x0, x0 + w, cx, cx + 0.5) * overlap(y0, y0 + w, cy, cy + 0.5);
        }
    }
    mass
}

#[test]
fn kl_of_exact_samples_matches_brute_force_floor() {
    let m = 50;
    let dataset = DatasetSpec::checkerboard();
    let cell = (2.0 / m as f64).powi(2);
    let centre = |k: usize| -1.0 + (2 * k + 1) as f64 / m as f64;
    let (mut rho, mut expected) = (Vec::new(), Vec::new());
    for i in 0..m {
        for j in 0..m {
            rho.push(dataset.density(&[centre(i), centre(j)]));
            expected.push(exact_bin_mass(i, j, m) / cell);
        }
    }
    let total: f64 = expected.iter().map(|d| d * cell).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let floor = kl_quadrature(&rho, &expected, cell);
    assert!(floor > 0.03 && floor < 0.1, "floor {floor}");

    let x = dataset.sample_target(&mut stream(13, Stream::Sampling), 1_000_000);
    let kl = kl_checkerboard(&x, &dataset, m, 0.5).unwrap();
    assert!(
        (kl - floor).abs() < 0.01,
        "sample KL {kl} vs exact-histogram KL {floor}"
    );
}

/// Per-element RAdam recursion written out directly.
fn reference_radam(
    theta: &mut [f64],
    grads: impl Fn(&[f64]) -> Vec<f64>,
    lr: f64,
    steps: usize,
) -> Vec<Vec<f64>> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let n = theta.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut trace = Vec::new();
    for step in 1..=steps {
        let g = grads(theta);
        let t = step as i32;
        let rho_t = rho_inf - 2.0 * step as f64 * b2.powi(t) / (1.0 - b2.powi(t));
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1.powi(t));
            if rho_t > 5.0 {
                let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt();
                theta[i] -= lr * m_hat * r * (1.0 - b2.powi(t)).sqrt() / (v[i].sqrt() + eps);
            } else {
                theta[i] -= lr * m_hat;
            }
        }
        trace.push(theta.to_vec());
    }
    trace
}

#[test]
fn radam_matches_reference_trace() {
    let a = [1.0, 3.0, 0.5];
    let c = [0.2, -1.0, 2.0];
    let grads = |th: &[f64]| {
        (0..3)
            .map(|i| 2.0 * a[i] * (th[i] - c[i]))
            .collect::<Vec<_>>()
    };
    let start = [1.0, 1.0, -1.0];

    let mut reference = start;
    let trace = reference_radam(&mut reference, grads, 0.1, 10);

    let mut theta = ParamVector::new();
    theta.push_segment("p", 1, 3, start.to_vec()).unwrap();
    let mut opt = RAdamState::new(&theta, 0.9, 0.999, 1e-8);
    for expected in trace {
        let g = theta.with_data(grads(theta.data())).unwrap();
        opt.step(&mut theta, &g, 0.1).unwrap();
        for (a, b) in theta.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
    assert_eq!(opt.step, 10);
}

#[test]
fn radam_constant_gradient_decreases_monotonically() {
    let mut theta = ParamVector::new();
    theta.push_segment("x", 1, 1, vec![0.0]).unwrap();
    let g = theta.with_data(vec![0.7]).unwrap();
    let mut opt = RAdamState::new(&theta, 0.9, 0.999, 1e-8);
    let mut prev = theta.data()[0];
    for _ in 0..200 {
        opt.step(&mut theta, &g, 1e-2).unwrap();
        assert!(theta.data()[0] < prev);
        prev = theta.data()[0];
    }
}

#[test]
fn ema_error_decays_geometrically() {
    let mut target = ParamVector::new();
    target.push_segment("x", 1, 2, vec![3.0, -1.0]).unwrap();
    let start = target.with_data(vec![0.0, 0.0]).unwrap();
    let delta: f64 = 0.9;
    let mut ema = EmaState::new(&start, delta);
    for k in 1..=50 {
        ema.update(&target);
        for (phi, (th, p0)) in ema
            .shadow
            .data()
            .iter()
            .zip(target.data().iter().zip(start.data()))
        {
            let expected = delta.powi(k) * (p0 - th).abs();
            assert!(
                ((phi - th).abs() - expected).abs() <= 1e-12 * (1.0 + expected),
                "k {k}"
            );
        }
    }
}

fn five_point(f: impl Fn(f64) -> Tensor, h: f64) -> Tensor {
    let near = f(h).zip_map(&f(-h), |a, b| a - b);
    let far = f(2.0 * h).zip_map(&f(-2.0 * h), |a, b| a - b);
    near.zip_map(&far, |n, f| (8.0 * n - f) / (12.0 * h))
}

#[test]
fn flow_map_derivatives_match_finite_differences() {
    let mut rng = stream(14, Stream::Init);
    for _ in 0..5 {
        let (model, theta) = random_model(&mut rng).unwrap();
        let n = 16;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let x = Tensor::new(
            n,
            2,
            (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let dir = Tensor::new(
            n,
            2,
            (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (sc, tc) = (Tensor::column(s.clone()), Tensor::column(t.clone()));
        let h = 1e-3;

        let (_, dt) = dx_dt(&model, &theta, &sc, &tc, &x).unwrap();
        let fd_t = five_point(
            |d| eval_x(&model, &theta, &sc, &tc.map(|v| v + d), &x).unwrap(),
            h,
        );
        assert!(dt.zip_map(&fd_t, |a, b| a - b).max_abs() < 1e-8);

        // ∂_s X + ∇X · dir, differentiated along (s, x) + ε (1, dir)
        let (_, total) = eulerian_jvp(&model, &theta, &sc, &tc, &x, &dir).unwrap();
        let fd = five_point(
            |d| {
                let xs = x.zip_map(&dir, |a, b| a + d * b);
                eval_x(&model, &theta, &sc.map(|v| v + d), &tc, &xs).unwrap()
            },
            h,
        );
        assert!(total.zip_map(&fd, |a, b| a - b).max_abs() < 1e-8);
    }
}

#[test]
fn esd_one_pass_and_two_pass_residuals_agree() {
    let mut rng = stream(15, Stream::Init);
    let (model, theta) = random_model(&mut rng).unwrap();
    let n = 32;
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
    let batch = OffDiagBatch {
        s: Tensor::column(s),
        t: Tensor::column(t),
        is: Tensor::new(
            n,
            2,
            (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap(),
        gamma: None,
    };
    let one = StopgradPolicy {
        detach_teacher: true,
        detach_time_derivative: false,
        detach_spatial_jvp: false,
    };
    let two = StopgradPolicy {
        detach_spatial_jvp: true,
        ..one
    };
    let a = distill_residuals(&model, &theta, Method::Esd, one, &batch).unwrap();
    let b = distill_residuals(&model, &theta, Method::Esd, two, &batch).unwrap();
    assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-12);
}

#[test]
fn oracle_sampling_is_step_count_invariant() {
    let model = Model::unweighted(Field::AnalyticGaussian(AnalyticGaussianField::new(
        1.0,
        vec![0.0],
        2.0,
    )));
    let empty = ParamVector::new();
    let x0 = DatasetSpec::gaussian(vec![0.0], 2.0)
        .with_base_std(1.0)
        .sample_base(&mut stream(16, Stream::Sampling), 1000);
    let one = sample_flow_map(&model, &empty, &x0, 1).unwrap().samples;
    // one jump from N(0, 1) to N(0, 4) doubles every draw
    assert!(one.zip_map(&x0, |a, b| a - 2.0 * b).max_abs() < 1e-12);
    for n in [2, 4, 16] {
        let many = sample_flow_map(&model, &empty, &x0, n).unwrap().samples;
        assert!(
            many.zip_map(&one, |a, b| a - b).max_abs() < 1e-12,
            "n = {n}"
        );
    }
    let v = eval_v(
        &model,
        &empty,
        &Tensor::full(3, 1, 0.5),
        &Tensor::full(3, 1, 0.5),
        &Tensor::column(vec![-1.0, 0.0, 1.0]),
    )
    .unwrap();
    assert!(v.is_finite());
}
