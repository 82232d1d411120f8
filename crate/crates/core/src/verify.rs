//! Numerical identity checks behind the `verify-math` command.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::flow::{cfm_target_general, rf_target};
use crate::latentseq::{decode, encode, reconstruction_metrics, ImageTensor};
use crate::positions::{rope_rotate, PositionTriplet, RopeConfig};
use crate::sampler::{euler, timestep_grid, SamplerConfig};
use crate::schedule::{
    chi_square_fit, interpolate, log_snr, logit, mu_from_alpha, sample_t, shift_timestep, shifted_log_snr, RFSchedule,
    TimestepDistribution,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub detail: String,
    pub passed: bool,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, detail, passed }
    }

    fn within(name: &'static str, err: f64, tol: f64) -> Self {
        Self::new(name, err <= tol, format!("max error {err:.3e} (tolerance {tol:.0e})"))
    }
}

pub fn render_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| format!("{:<width$}  {}  {}\n", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail))
        .collect()
}

fn grid(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| i as f64 / (n - 1) as f64)
}

/// Endpoint error of Euler integration of the exact velocity field for data
/// `N(m, s^2)` started from noise `eps`; the exact endpoint is `m + s eps`.
pub fn gaussian_euler_error(m: f64, s: f64, eps: f64, steps: usize) -> f64 {
    let v = |z: f64, t: f64| {
        let var = (1.0 - t).powi(2) * s * s + t * t;
        -m + (t - (1.0 - t) * s * s) / var * (z - (1.0 - t) * m)
    };
    let cfg = SamplerConfig { num_steps: steps, ..SamplerConfig::default() };
    let z = euler(Array2::from_elem((1, 1), eps), &timestep_grid(&cfg), |z, t, _| Ok(z.mapv(|x| v(x, t))))
        .expect("finite field");
    (z[[0, 0]] - (m + s * eps)).abs()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Runs every identity check. `samples` sets the logit-normal sample size.
pub fn verify_math(samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mu3 = mu_from_alpha(3.0).unwrap_or(f64::NAN);
    out.push(Check::within("mu_from_alpha(3) = 1.0986", (mu3 - 1.0986).abs(), 1e-4));

    let mut err: f64 = 0.0;
    for alpha in [0.25, 0.5, 2.0, 3.0, 7.5] {
        let dist = TimestepDistribution::from_alpha(alpha).expect("positive alpha");
        for t in grid(1001) {
            err = err.max((shift_timestep(t, &dist) - alpha * t / (1.0 + (alpha - 1.0) * t)).abs());
        }
    }
    out.push(Check::within("shift_timestep = a t / (1 + (a-1) t)", err, 1e-12));

    let mut err: f64 = 0.0;
    let mut monotone = true;
    for mu in [-1.5, -0.5, 0.0, 1.0986, 1.5] {
        for sigma in [0.5, 1.0, 1.5, 2.0] {
            let dist = TimestepDistribution::logit_normal(mu, sigma).expect("positive sigma");
            let mut prev = -1.0;
            for t in (10..=990).map(|i| i as f64 / 1000.0) {
                err = err.max((log_snr(shift_timestep(t, &dist)) - shifted_log_snr(t, &dist)).abs());
                let s = shift_timestep(t, &dist);
                monotone &= s > prev;
                prev = s;
            }
        }
    }
    out.push(Check::within("log_snr(shift(t)) = sigma log_snr(t) - 2 mu", err, 1e-10));
    out.push(Check::new("shift_timestep strictly increasing", monotone, "981 points on [0.01, 0.99]".into()));

    let snr_err = [
        log_snr(0.5).abs(),
        (log_snr(0.25) - 2.0 * 3f64.ln()).abs(),
        (log_snr(0.75) + 2.0 * 3f64.ln()).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let sentinels = log_snr(0.0) == f64::INFINITY && log_snr(1.0) == f64::NEG_INFINITY;
    out.push(Check::new(
        "log_snr closed forms and endpoint sentinels",
        snr_err < 1e-12 && sentinels,
        format!("max error {snr_err:.3e}, sentinels {}", if sentinels { "ok" } else { "wrong" }),
    ));

    let schedule = RFSchedule;
    let mut err: f64 = 0.0;
    for _ in 0..10_000 {
        let x = Array1::from_shape_simple_fn(8, || rng.random_range(-3.0..3.0));
        let e = Array1::from_shape_simple_fn(8, || rng.sample::<f64, _>(StandardNormal));
        let t = rng.random_range(1e-4..1.0 - 1e-4);
        let z = interpolate(&x, &e, t).expect("same shape").z_t;
        let general = cfm_target_general(&z, &e, t, &schedule).expect("interior t");
        let direct = rf_target(&x, &e).expect("same shape");
        err = err.max((&general - &direct).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    out.push(Check::within("general CFM target = eps - x", err, 1e-9));

    let dist = TimestepDistribution::from_alpha(3.0).expect("positive alpha");
    let ts = sample_t(&dist, &mut rng, samples);
    let mean = ts.iter().map(|&t| logit(t)).sum::<f64>() / ts.len() as f64;
    out.push(Check::within("mean logit(t) for mu = log 3", (mean - 1.0986).abs(), 0.01));
    let fit = chi_square_fit(&ts, &dist, 50);
    out.push(Check::new(
        "logit-normal chi-square, 50 bins",
        fit.p_value > 1e-3,
        format!("statistic {:.2}, dof {}, p {:.4}", fit.statistic, fit.dof, fit.p_value),
    ));

    out.push(rope_check(&mut rng));

    let steps = [8usize, 16, 32, 64, 128];
    let errs: Vec<f64> = steps.iter().map(|&n| gaussian_euler_error(1.5, 0.4, 0.8, n)).collect();
    let slope = log_log_slope(&steps.map(|n| n as f64), &errs);
    out.push(Check::new(
        "Euler endpoint error is O(1/steps)",
        (-1.3..=-0.7).contains(&slope),
        format!("fitted slope {slope:.3}"),
    ));

    let data: Vec<f32> = (0..3 * 8 * 12).map(|_| rng.random::<f32>()).collect();
    let img = ImageTensor::new(3, 8, 12, data).expect("finite");
    let exact = encode(&img, 4).and_then(|g| decode(&g, 4)).map(|d| d == img).unwrap_or(false);
    let m = reconstruction_metrics(&img, &img).expect("same shape");
    out.push(Check::new(
        "patch codec exact, identical-image metrics",
        exact && m.psnr == f64::INFINITY && m.ssim == 1.0,
        format!("round trip {}, psnr {}, ssim {}", if exact { "exact" } else { "lossy" }, m.psnr, m.ssim),
    ));
    out
}

fn rope_check(rng: &mut ChaCha8Rng) -> Check {
    let cfg = RopeConfig::for_head_dim(32).expect("valid head dim");
    let random = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((1, 32), || rng.sample::<f64, _>(StandardNormal));
    let pos = |t, h, w| vec![PositionTriplet::new(t, h, w)];
    let mut rel: f64 = 0.0;
    let mut norm: f64 = 0.0;
    let mut ident: f64 = 0.0;
    for _ in 0..200 {
        let (q, k) = (random(rng), random(rng));
        let u = [rng.random_range(0..4), rng.random_range(0..16), rng.random_range(0..16)];
        let v = [rng.random_range(0..4), rng.random_range(0..16), rng.random_range(0..16)];
        let dot = |du: [usize; 3]| {
            let a = rope_rotate(q.view(), &pos(u[0] + du[0], u[1] + du[1], u[2] + du[2]), &cfg).expect("dims");
            let b = rope_rotate(k.view(), &pos(v[0] + du[0], v[1] + du[1], v[2] + du[2]), &cfg).expect("dims");
            (&a * &b).sum()
        };
        let base = dot([0, 0, 0]);
        for axis in 0..3 {
            let mut d = [0; 3];
            d[axis] = rng.random_range(1..9);
            rel = rel.max((dot(d) - base).abs());
        }
        let r = rope_rotate(q.view(), &pos(u[0], u[1], u[2]), &cfg).expect("dims");
        norm = norm.max((r.mapv(|x| x * x).sum().sqrt() - q.mapv(|x| x * x).sum().sqrt()).abs());
        let z = rope_rotate(q.view(), &pos(0, 0, 0), &cfg).expect("dims");
        ident = ident.max((&z - &q).iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    Check::new(
        "RoPE relative invariance, isometry, identity at origin",
        rel < 1e-5 && norm < 1e-6 && ident == 0.0,
        format!("relative {rel:.2e}, norm {norm:.2e}, origin {ident:.1e}"),
    )
}
