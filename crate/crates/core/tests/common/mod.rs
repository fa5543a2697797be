//! Shared helpers for the integration tests.
#![allow(dead_code)]

use longilvm::kernels::{AdditiveKernel, KernelComponent};
use longilvm::linalg::Mat;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

pub fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Covariates (time, id, gender) for `sizes[p]` rows per patient, sorted by
/// patient; time points random and increasing.
pub fn random_covariates(sizes: &[usize], rng: &mut ChaCha8Rng) -> (Vec<String>, Mat) {
    let n: usize = sizes.iter().sum();
    let mut x = Mat::zeros(n, 3);
    let mut row = 0;
    for (p, &np) in sizes.iter().enumerate() {
        let g = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let mut t = rng.gen_range(-1.0..0.0);
        for _ in 0..np {
            t += rng.gen_range(0.2..0.8);
            x[(row, 0)] = t;
            x[(row, 1)] = p as f64;
            x[(row, 2)] = g;
            row += 1;
        }
    }
    (names(&["time", "id", "gender"]), x)
}

/// Longitudinal kernel with an id component and random hyperparameters.
pub fn random_kernel(rng: &mut ChaCha8Rng) -> AdditiveKernel {
    AdditiveKernel {
        components: vec![
            KernelComponent::categorical("id", rng.gen_range(0.2..1.0)),
            KernelComponent::se(&["time"], rng.gen_range(0.5..1.5), &[rng.gen_range(0.5..2.0)]),
            KernelComponent::product("id", &["time"], rng.gen_range(0.2..1.0), &[rng.gen_range(0.5..2.0)]),
            KernelComponent::product("gender", &["time"], rng.gen_range(0.2..1.0), &[rng.gen_range(0.5..2.0)]),
        ],
        noise_var: rng.gen_range(0.1..0.5),
    }
}

/// Gaussian KL oracle computed with nalgebra.
pub fn kl_oracle(mean: &[f64], var: &[f64], sigma: &Mat) -> f64 {
    let s = to_na(sigma);
    let n = mean.len();
    let ch = s.clone().cholesky().expect("oracle: not PD");
    let inv = ch.inverse();
    let mu = DVector::from_column_slice(mean);
    let tr: f64 = (0..n).map(|i| inv[(i, i)] * var[i]).sum();
    let quad = (mu.transpose() * &inv * &mu)[(0, 0)];
    let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let logw: f64 = var.iter().map(|v| v.ln()).sum();
    0.5 * (tr + quad - n as f64 + logdet - logw)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(m: &Mat) -> f64 {
    let e = to_na(m).symmetric_eigen();
    e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    // Split first so that narrow bumps are not missed by the coarse estimate.
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            rec(f, x0, x1, f0, fm, f1, h / 6.0 * (f0 + 4.0 * fm + f1), tol / pieces as f64, 40)
        })
        .sum()
}

/// Random lag-kernel integral configuration: parameters, two inducing
/// locations (`2 x D`), an interval and the event-time offsets.
pub struct LagConfig {
    pub lag: longilvm::kernels::LagKernelParams,
    pub s: Mat,
    pub lo: f64,
    pub hi: f64,
    pub offsets: Vec<Option<f64>>,
}

pub fn random_lag_config(rng: &mut ChaCha8Rng, max_depth: usize) -> LagConfig {
    let d = rng.gen_range(1..=max_depth);
    let lag = longilvm::kernels::LagKernelParams::new(
        (0..d).map(|_| rng.gen_range(0.1..2.0)).collect(),
        (0..d).map(|_| rng.gen_range(0.2..3.0)).collect(),
    )
    .unwrap();
    let lo = rng.gen_range(0.0..5.0);
    let hi = lo + rng.gen_range(0.05..5.0);
    let history = rng.gen_range(1..=d);
    let mut c = lo;
    let offsets = (0..d)
        .map(|k| {
            if k < history {
                c -= rng.gen_range(0.0..2.0);
                Some(c)
            } else {
                None
            }
        })
        .collect();
    let s = Mat::from_fn(2, d, |_, _| rng.gen_range(0.0..6.0));
    LagConfig { lag, s, lo, hi, offsets }
}

/// Lag vector at time `t` given the offsets.
pub fn lag_vector(t: f64, offsets: &[Option<f64>]) -> Mat {
    Mat::row(offsets.iter().map(|c| c.map_or(f64::INFINITY, |c| t - c)).collect())
}

/// Lower factor of a PSD covariance (eigenvalues clamped at zero).
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let e = cov.clone().symmetric_eigen();
    let mut v = e.eigenvectors.clone();
    for j in 0..v.ncols() {
        let s = e.eigenvalues[j].max(0.0).sqrt();
        for i in 0..v.nrows() {
            v[(i, j)] *= s;
        }
    }
    v
}

/// Central finite-difference check of `grads` against `f` at `params`.
/// Entries listed by `skip(tensor, index)` are not checked. Returns the worst
/// relative error `|fd - an| / max(|fd|, |an|, floor)`.
pub fn fd_check(
    f: &dyn Fn(&[Mat]) -> f64,
    params: &[Mat],
    grads: &[Mat],
    eps: f64,
    floor: f64,
    skip: &dyn Fn(usize, usize) -> bool,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (k, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            if skip(k, j) {
                continue;
            }
            let mut pp = params.to_vec();
            pp[k].data[j] += eps;
            let mut pm = params.to_vec();
            pm[k].data[j] -= eps;
            let fd = (f(&pp) - f(&pm)) / (2.0 * eps);
            let an = grads[k].data[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("tensor {k}[{j}]: fd {fd} vs analytic {an}"));
            }
        }
    }
    worst
}

pub fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Dataset with covariates (time, id, gender), `k` outputs, random values and
/// a random mask; the second row of the first patient is fully missing.
pub fn tiny_dataset(sizes: &[usize], k: usize, rng: &mut ChaCha8Rng) -> longilvm::data::LongitudinalDataset {
    use longilvm::data::{ColumnKind, ColumnSpec, CovariateSchema, LongitudinalDataset};
    let (_, x) = random_covariates(sizes, rng);
    let n = x.rows;
    let schema = CovariateSchema {
        columns: vec![
            ColumnSpec { name: "time".into(), kind: ColumnKind::Continuous },
            ColumnSpec { name: "id".into(), kind: ColumnKind::Categorical { levels: vec![] } },
            ColumnSpec { name: "gender".into(), kind: ColumnKind::Categorical { levels: names(&["F", "M"]) } },
        ],
    };
    let mut m = Mat::from_fn(n, k, |_, _| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
    if sizes[0] > 1 {
        m.row_slice_mut(1).iter_mut().for_each(|v| *v = 0.0);
    }
    let y = Mat::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
    let mut offsets = vec![0];
    for s in sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    let t = x.column(0);
    let windows = (0..sizes.len()).map(|p| (t[offsets[p]] - 0.3, t[offsets[p + 1] - 1] + 0.4)).collect();
    let ds = LongitudinalDataset {
        schema,
        y,
        m,
        x,
        t,
        patient_ids: (0..sizes.len()).map(|p| format!("p{p}")).collect(),
        patient_offsets: offsets,
        windows,
    };
    ds.validate().unwrap();
    ds
}

/// Small configuration over (time, id, gender) used by the model-level tests.
pub fn tiny_config(model: &str) -> longilvm::config::RunConfig {
    let intensity = if model == "llppsm" {
        r#", {"kind": "product", "inputs": ["gender", "intensity"], "lengthscales": [1.3]}"#
    } else {
        ""
    };
    let kernel = format!(
        r#"[{{"kind": "categorical", "inputs": ["id"], "variance": 0.7}},
            {{"kind": "se", "inputs": ["time"], "variance": 0.9, "lengthscales": [1.1]}},
            {{"kind": "product", "inputs": ["id", "time"], "variance": 0.5, "lengthscales": [0.8]}},
            {{"kind": "product", "inputs": ["gender", "time"], "variance": 0.4, "lengthscales": [1.5]}}{intensity}]"#
    );
    let json = format!(
        r#"{{"model": "{model}", "kernel_y": {kernel}, "kernel_m": {kernel}, "latent_y": 2, "latent_m": 2,
            "inducing": 4, "tpp_depth": 2, "tpp_inducing": 3, "encoder_hidden": [5], "decoder_hidden": [5],
            "latent_noise": 0.3, "epochs": 3, "pretrain_epochs": 2, "batch_patients": 2, "eval_every": 1,
            "eval_samples": 2, "seed": 11}}"#
    );
    longilvm::config::RunConfig::from_json(&json).unwrap()
}

/// Parameters with random (non-trivial) networks and inducing posteriors.
pub fn randomized(cfg: &longilvm::config::RunConfig, ds: &longilvm::data::LongitudinalDataset, seed: u64) -> longilvm::model::ModelParams {
    let mut r = rng(seed);
    let mut p = longilvm::model::ModelParams::init(cfg, ds, &mut r).unwrap();
    let ts: Vec<Mat> = p.nets.tensors().iter().map(|m| random_mat(m.rows, m.cols, 0.6, &mut r)).collect();
    p.nets.set_tensors(&ts).unwrap();
    for g in p.gp_y.iter_mut().chain(p.gp_m.iter_mut()) {
        if let Some(gv) = &mut g.gv {
            gv.m_h = random_mat(gv.m_h.rows, 1, 0.5, &mut r);
            let m = gv.h_factor.rows;
            gv.h_factor = Mat::from_fn(m, m, |i, j| {
                if i == j {
                    r.gen_range(0.2..0.8)
                } else if j < i {
                    r.gen_range(-0.1..0.1)
                } else {
                    0.0
                }
            });
        }
    }
    p.sigma_y2 = (0..p.sigma_y2.len()).map(|_| r.gen_range(0.3..1.5)).collect();
    p
}

/// Worst central finite-difference relative errors of the full ELBO
/// gradient: over every Adam tensor (with its location) and over `(m_H, H)`.
pub fn gradient_errors(model: &str, seed: u64) -> (f64, String, f64) {
    let cfg = tiny_config(model);
    let ds = tiny_dataset(&[3, 2], 2, &mut rng(seed));
    let p = randomized(&cfg, &ds, seed + 1);
    let batch = longilvm::model::Batch::full(&ds, &p).unwrap();
    let noise = longilvm::model::ElboNoise::draw(&mut rng(seed + 2), &p, batch.n());
    let (_, g) = longilvm::model::elbo_eval(&p, &batch, &noise, true).unwrap();
    let g = g.unwrap();
    let adam = p.adam_tensors().unwrap();
    let ind = p.inducing_tensors();
    let value = |pa: &[Mat], pi: &[Option<(Mat, Mat)>]| -> f64 {
        let mut q = p.clone();
        q.set_adam_tensors(pa).unwrap();
        let t = longilvm::tape::Tape::new();
        let pv: Vec<_> = pa.iter().map(|m| t.constant(m.clone())).collect();
        let iv: Vec<_> = pi.iter().map(|o| o.as_ref().map(|(a, b)| (t.constant(a.clone()), t.constant(b.clone())))).collect();
        t.item(longilvm::model::elbo_tape(&t, &q, &pv, &iv, &batch, &noise).unwrap().total)
    };
    let (adam_worst, at) = fd_check(&|pa| value(pa, &ind), &adam, &g.adam, 1e-5, 1e-3, &|_, _| false);

    // Inducing means directly, covariances along symmetric directions.
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (l, entry) in ind.iter().enumerate() {
        let Some((m_h, h)) = entry else { continue };
        let (gm, gh) = g.inducing[l].as_ref().unwrap();
        for i in 0..m_h.rows {
            let f = |d: f64| {
                let mut pi = ind.clone();
                pi[l].as_mut().unwrap().0[(i, 0)] += d;
                value(&adam, &pi)
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            worst = worst.max((fd - gm[(i, 0)]).abs() / fd.abs().max(gm[(i, 0)].abs()).max(1e-3));
        }
        for i in 0..h.rows {
            for j in 0..=i {
                let f = |d: f64| {
                    let mut pi = ind.clone();
                    let hh = &mut pi[l].as_mut().unwrap().1;
                    hh[(i, j)] += d;
                    if i != j {
                        hh[(j, i)] += d;
                    }
                    value(&adam, &pi)
                };
                let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                let an = if i == j { gh[(i, i)] } else { gh[(i, j)] + gh[(j, i)] };
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
        }
    }
    (adam_worst, at, worst)
}
