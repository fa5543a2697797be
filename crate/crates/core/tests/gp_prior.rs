mod common;

use common::*;
use longilvm::gp_prior::*;
use longilvm::kernels::{eval_additive, eval_shared, eval_split, CovView, KernelComponent, KernelVars, TapeCols, AdditiveKernel};
use longilvm::linalg::{cholesky, chol_solve, matmul_t, Mat};
use longilvm::tape::Tape;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_q(n: usize, rng: &mut ChaCha8Rng) -> DiagonalGaussianBatch {
    DiagonalGaussianBatch::new(
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        (0..n).map(|_| rng.gen_range(0.1..1.0)).collect(),
    )
    .unwrap()
}

/// Inducing locations at the shared-input rows of `x`.
fn shared_rows(kernel: &AdditiveKernel, names: &[String], x: &Mat) -> (Vec<String>, Mat) {
    let s_names = kernel.shared_inputs();
    let idx: Vec<usize> = s_names.iter().map(|n| names.iter().position(|m| m == n).unwrap()).collect();
    let s = Mat::from_fn(x.rows, idx.len(), |i, j| x[(i, idx[j])]);
    (s_names, s)
}

fn full_sigma(kernel: &AdditiveKernel, v: &CovView) -> Mat {
    eval_additive(kernel, v, v, true).unwrap()
}

fn random_gv(s_names: Vec<String>, s: Mat, rng: &mut ChaCha8Rng) -> GPVariational {
    let m = s.rows;
    let a = Mat::from_fn(m, m, |_, _| rng.gen_range(-0.5..0.5));
    let mut h = matmul_t(&a, false, &a, true);
    h.add_diag(0.05);
    let mh = Mat::col((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
    GPVariational::from_mean_cov(s, s_names, mh, &h).unwrap()
}

/// Value and gradients of the scalable bound with respect to `(m_H, H)`.
fn scalable_with_grads(
    q: &DiagonalGaussianBatch,
    kernel: &AdditiveKernel,
    x: &CovView,
    gv: &GPVariational,
    scale: BatchScale,
) -> (f64, Mat, Mat) {
    let t = Tape::new();
    let kv = KernelVars::constant(&t, kernel);
    let xc = TapeCols::constant(&t, x);
    let mean = t.constant(Mat::col(q.mean.clone()));
    let var = t.constant(Mat::col(q.var.clone()));
    let m = t.param(gv.m_h.clone());
    let h = t.param(gv.h());
    let iv = InducingVars { s: TapeCols::constant(&t, &gv.view()), m_h: m, h };
    let runs = longilvm::kernels::patient_runs(x).unwrap();
    let kl = scalable_kl_tape(&t, kernel, &kv, &xc, &runs, mean, var, Some(&iv), scale, DEFAULT_JITTER).unwrap();
    let g = t.backward(kl);
    (t.item(kl), g.wrt(m), g.wrt(h))
}

#[test]
fn exact_kl_examples() {
    let q = DiagonalGaussianBatch::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
    assert!(exact_kl(&q, &Mat::identity(3)).unwrap().abs() < 1e-15);
    let q = DiagonalGaussianBatch::new(vec![1.0], vec![1.0]).unwrap();
    assert!((exact_kl(&q, &Mat::identity(1)).unwrap() - 0.5).abs() < 1e-15);
    let bad = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
    let q = DiagonalGaussianBatch::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
    assert!(matches!(exact_kl(&q, &bad), Err(longilvm::Error::NotPositiveDefinite { .. })));
}

#[test]
fn exact_kl_matches_monte_carlo() {
    let mut r = rng(1);
    let (names, x) = random_covariates(&[2, 3], &mut r);
    let kernel = random_kernel(&mut r);
    let sigma = full_sigma(&kernel, &CovView::new(&names, &x));
    let q = random_q(5, &mut r);
    let kl = exact_kl(&q, &sigma).unwrap();
    // MC oracle: E_q[log q(z) - log p(z)] with nalgebra densities.
    let s = to_na(&sigma);
    let ch = s.cholesky().unwrap();
    let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut samples = Vec::with_capacity(1_000_000);
    for _ in 0..1_000_000 {
        let mut lq = 0.0;
        let mut z = DVector::zeros(5);
        for i in 0..5 {
            let e: f64 = StandardNormal.sample(&mut r);
            z[i] = q.mean[i] + q.var[i].sqrt() * e;
            lq += -0.5 * (e * e + q.var[i].ln());
        }
        let sol = ch.solve(&z);
        let lp = -0.5 * (z.dot(&sol) + logdet);
        samples.push(lq - lp);
    }
    let (m, se) = mean_se(&samples);
    assert!((m - kl).abs() < 3.0 * se, "MC {m} +- {se} vs {kl}");
}

#[test]
fn exact_kl_zero_iff_matched_on_diagonal_sigma() {
    let d = vec![0.5, 1.5, 2.0];
    let sigma = Mat::from_diag(&d);
    let q = DiagonalGaussianBatch::new(vec![0.0; 3], d.clone()).unwrap();
    assert!(exact_kl(&q, &sigma).unwrap().abs() < 1e-14);
    let q = DiagonalGaussianBatch::new(vec![0.0, 0.1, 0.0], d.clone()).unwrap();
    assert!(exact_kl(&q, &sigma).unwrap() > 1e-4);
    let q = DiagonalGaussianBatch::new(vec![0.0; 3], vec![0.5, 1.4, 2.0]).unwrap();
    assert!(exact_kl(&q, &sigma).unwrap() > 1e-5);
}

#[test]
fn exact_kl_agrees_with_oracle() {
    let mut r = rng(2);
    for _ in 0..10 {
        let (names, x) = random_covariates(&[3, 4, 2], &mut r);
        let kernel = random_kernel(&mut r);
        let sigma = full_sigma(&kernel, &CovView::new(&names, &x));
        let q = random_q(9, &mut r);
        let a = exact_kl(&q, &sigma).unwrap();
        let b = kl_oracle(&q.mean, &q.var, &sigma);
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
    }
}

#[test]
fn titsias_with_inducing_at_data_is_exact() {
    let mut r = rng(3);
    let (names, x) = random_covariates(&[3, 3], &mut r);
    let kernel = random_kernel(&mut r);
    let v = CovView::new(&names, &x);
    let q = random_q(6, &mut r);
    let exact = exact_kl(&q, &full_sigma(&kernel, &v)).unwrap();
    let tb = titsias_kl_upper(&q, &kernel, &v, &v, 0.0).unwrap();
    assert!((tb - exact).abs() < 1e-8, "{tb} vs {exact}");
}

#[test]
fn titsias_is_upper_and_monotone_in_inducing_set() {
    let mut r = rng(4);
    let (names, x) = random_covariates(&[4, 4, 3], &mut r);
    let kernel = random_kernel(&mut r);
    let v = CovView::new(&names, &x);
    let q = random_q(11, &mut r);
    let exact = exact_kl(&q, &full_sigma(&kernel, &v)).unwrap();
    let mut prev = f64::INFINITY;
    for m in 1..=x.rows {
        let s = x.slice(0, m, 0, x.cols);
        let b = titsias_kl_upper(&q, &kernel, &v, &CovView::new(&names, &s), 0.0).unwrap();
        assert!(b >= exact - 1e-8, "m={m}: {b} < {exact}");
        assert!(b <= prev + 1e-8, "m={m}: bound grew from {prev} to {b}");
        prev = b;
    }
}

#[test]
fn collapsed_bound_is_exact_with_inducing_at_shared_rows() {
    let mut r = rng(5);
    for _ in 0..5 {
        let (names, x) = random_covariates(&[3, 2, 4], &mut r);
        let kernel = random_kernel(&mut r);
        let v = CovView::new(&names, &x);
        let q = random_q(9, &mut r);
        let (sn, s) = shared_rows(&kernel, &names, &x);
        let exact = exact_kl(&q, &full_sigma(&kernel, &v)).unwrap();
        let c = collapsed_kl_upper(&q, &kernel, &v, &CovView::new(&sn, &s), 0.0).unwrap();
        assert!((c - exact).abs() < 1e-8, "{c} vs {exact}");
    }
}

#[test]
fn scalable_bound_is_an_upper_bound() {
    let mut r = rng(6);
    for _ in 0..30 {
        let sizes: Vec<usize> = (0..r.gen_range(1..5)).map(|_| r.gen_range(1..6)).collect();
        let (names, x) = random_covariates(&sizes, &mut r);
        let kernel = random_kernel(&mut r);
        let v = CovView::new(&names, &x);
        let q = random_q(x.rows, &mut r);
        let (sn, s) = shared_rows(&kernel, &names, &x);
        let m = r.gen_range(1..=x.rows);
        let gv = random_gv(sn, s.slice(0, m, 0, s.cols), &mut r);
        let exact = exact_kl(&q, &full_sigma(&kernel, &v)).unwrap();
        let b = scalable_kl_upper(&q, &kernel, &v, Some(&gv), BatchScale::full(sizes.len(), x.rows), DEFAULT_JITTER).unwrap();
        assert!(b >= exact - 1e-8, "{b} < {exact}");
    }
}

#[test]
fn scalable_bound_without_shared_part_is_exact() {
    let mut r = rng(7);
    let (names, x) = random_covariates(&[3, 4], &mut r);
    let kernel = AdditiveKernel {
        components: vec![KernelComponent::categorical("id", 0.7), KernelComponent::product("id", &["time"], 0.5, &[1.0])],
        noise_var: 0.2,
    };
    let v = CovView::new(&names, &x);
    let q = random_q(7, &mut r);
    let exact = exact_kl(&q, &full_sigma(&kernel, &v)).unwrap();
    let b = scalable_kl_upper(&q, &kernel, &v, None, BatchScale::full(2, 7), DEFAULT_JITTER).unwrap();
    assert!((b - exact).abs() < 1e-10);
}

#[test]
fn closed_form_optimum_is_stationary_and_reached_by_a_unit_natural_step() {
    let mut r = rng(8);
    let (names, x) = random_covariates(&[3, 4, 2], &mut r);
    let kernel = random_kernel(&mut r);
    let v = CovView::new(&names, &x);
    let q = random_q(9, &mut r);
    let (sn, s) = shared_rows(&kernel, &names, &x);
    let s = s.slice(0, 5, 0, s.cols);
    let scale = BatchScale::full(3, 9);
    let (mh, h) = optimal_variational(&q, &kernel, &v, &CovView::new(&sn, &s), scale, DEFAULT_JITTER).unwrap();
    let gv_opt = GPVariational::from_mean_cov(s.clone(), sn.clone(), mh.clone(), &h).unwrap();
    let (_, gm, gh) = scalable_with_grads(&q, &kernel, &v, &gv_opt, scale);
    assert!(gm.max_abs() < 1e-7 && gh.symmetrize().max_abs() < 1e-7, "gradient at optimum: {gm:?} {gh:?}");

    // From an arbitrary start, one natural step of size 1 lands on the optimum.
    let gv0 = random_gv(sn, s, &mut r);
    let (_, gm, gh) = scalable_with_grads(&q, &kernel, &v, &gv0, scale);
    let gv1 = natural_gradient_step(&gv0, &gm.scale(-1.0), &gh.scale(-1.0), 1.0).unwrap();
    assert!(gv1.m_h.sub(&mh).max_abs() < 1e-6 * (1.0 + mh.max_abs()));
    assert!(gv1.h().sub(&h).max_abs() < 1e-6 * (1.0 + h.max_abs()));
}

#[test]
fn natural_gradient_step_properties() {
    let mut r = rng(9);
    let (names, x) = random_covariates(&[3, 3], &mut r);
    let kernel = random_kernel(&mut r);
    let v = CovView::new(&names, &x);
    let q = random_q(6, &mut r);
    let (sn, s) = shared_rows(&kernel, &names, &x);
    let scale = BatchScale::full(2, 6);
    let gv = random_gv(sn, s, &mut r);

    // Zero gradient: unchanged.
    let z = natural_gradient_step(&gv, &Mat::zeros(6, 1), &Mat::zeros(6, 6), 0.1).unwrap();
    assert_eq!(z, gv);

    // A step strictly decreases the bound.
    let (b0, gm, gh) = scalable_with_grads(&q, &kernel, &v, &gv, scale);
    let gv1 = natural_gradient_step(&gv, &gm.scale(-1.0), &gh.scale(-1.0), 0.1).unwrap();
    let b1 = scalable_kl_upper(&q, &kernel, &v, Some(&gv1), scale, DEFAULT_JITTER).unwrap();
    assert!(b1 < b0, "{b1} !< {b0}");

    // Two half-steps agree with one full step to first order.
    let h = 1e-3;
    let full = natural_gradient_step(&gv, &gm.scale(-1.0), &gh.scale(-1.0), h).unwrap();
    let half = natural_gradient_step(&gv, &gm.scale(-1.0), &gh.scale(-1.0), h / 2.0).unwrap();
    let (_, gm2, gh2) = scalable_with_grads(&q, &kernel, &v, &half, scale);
    let two = natural_gradient_step(&half, &gm2.scale(-1.0), &gh2.scale(-1.0), h / 2.0).unwrap();
    let d_full = full.m_h.sub(&gv.m_h);
    let d_two = two.m_h.sub(&gv.m_h);
    let rel = d_full.sub(&d_two).max_abs() / d_full.max_abs();
    assert!(rel < 1e-3, "mean displacement rel err {rel}");
    let dh_full = full.h().sub(&gv.h());
    let dh_two = two.h().sub(&gv.h());
    let rel = dh_full.sub(&dh_two).max_abs() / dh_full.max_abs();
    assert!(rel < 1e-3, "covariance displacement rel err {rel}");
}

#[test]
fn natural_gradient_fails_after_ten_halvings() {
    let s = Mat::zeros(1, 1);
    let gv = GPVariational::from_mean_cov(s, vec!["time".into()], Mat::col(vec![0.0]), &Mat::identity(1)).unwrap();
    // A huge positive covariance gradient drives the precision negative at every step size tried.
    let e = natural_gradient_step(&gv, &Mat::zeros(1, 1), &Mat::scalar(1e9), 1.0);
    assert!(matches!(e, Err(longilvm::Error::NaturalGradient { .. })));
}

#[test]
fn minibatch_estimator_is_unbiased_by_enumeration() {
    let mut r = rng(10);
    let sizes = [2, 3, 2, 3];
    let (names, x) = random_covariates(&sizes, &mut r);
    let kernel = random_kernel(&mut r);
    let q = random_q(10, &mut r);
    let (sn, s) = shared_rows(&kernel, &names, &x);
    let gv = random_gv(sn, s.slice(0, 4, 0, s.cols), &mut r);
    let v = CovView::new(&names, &x);
    let full = scalable_kl_upper(&q, &kernel, &v, Some(&gv), BatchScale::full(4, 10), DEFAULT_JITTER).unwrap();
    let offs = [0, 2, 5, 7, 10];
    let mut vals = Vec::new();
    for a in 0..4 {
        for b in (a + 1)..4 {
            let rows: Vec<usize> = (offs[a]..offs[a + 1]).chain(offs[b]..offs[b + 1]).collect();
            let xb = x.select_rows(&rows);
            let qb = DiagonalGaussianBatch::new(
                rows.iter().map(|&i| q.mean[i]).collect(),
                rows.iter().map(|&i| q.var[i]).collect(),
            )
            .unwrap();
            let scale = BatchScale { p_total: 4, batch_patients: 2, n_total: 10 };
            vals.push(scalable_kl_upper(&qb, &kernel, &CovView::new(&names, &xb), Some(&gv), scale, DEFAULT_JITTER).unwrap());
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert_eq!(vals.len(), 6);
    assert!((mean - full).abs() < 1e-10, "{mean} vs {full}");
}

/// At the closed-form optimum the scalable bound exceeds the collapsed bound
/// by exactly `1/2 tr((Sigma_hat^-1 - Sigma_bar^-1) W)`, where
/// `Sigma_bar = Q_A + blockdiag(Sigma_hat)`.
#[test]
fn scalable_optimum_gap_is_the_variance_trace_term() {
    let mut r = rng(11);
    for _ in 0..5 {
        let (names, x) = random_covariates(&[3, 2, 3], &mut r);
        let kernel = random_kernel(&mut r);
        let v = CovView::new(&names, &x);
        let q = random_q(8, &mut r);
        let (sn, s) = shared_rows(&kernel, &names, &x);
        let sv = CovView::new(&sn, &s);
        let scale = BatchScale::full(3, 8);
        let jitter = 1e-10;
        let (mh, h) = optimal_variational(&q, &kernel, &v, &sv, scale, jitter).unwrap();
        let gv = GPVariational::from_mean_cov(s.clone(), sn.clone(), mh, &h).unwrap();
        let sc = scalable_kl_upper(&q, &kernel, &v, Some(&gv), scale, jitter).unwrap();
        let col = collapsed_kl_upper(&q, &kernel, &v, &sv, jitter).unwrap();

        // Oracle for the gap with nalgebra.
        let (_, blocks) = eval_split(&kernel, &v).unwrap();
        let kxs = to_na(&eval_shared(&kernel, &v, &sv).unwrap());
        let mut kss = to_na(&eval_shared(&kernel, &sv, &sv).unwrap());
        let jit = jitter * kss.diagonal().mean();
        for i in 0..kss.nrows() {
            kss[(i, i)] += jit;
        }
        let qa = &kxs * kss.clone().cholesky().unwrap().inverse() * kxs.transpose();
        let mut shat = DMatrix::zeros(8, 8);
        let mut off = 0;
        for b in &blocks {
            let bn = to_na(b);
            shat.view_mut((off, off), (b.rows, b.rows)).copy_from(&bn);
            off += b.rows;
        }
        let sbar = &qa + &shat;
        let d = shat.cholesky().unwrap().inverse() - sbar.cholesky().unwrap().inverse();
        let gap: f64 = 0.5 * (0..8).map(|i| d[(i, i)] * q.var[i]).sum::<f64>();
        assert!(gap > 0.0);
        assert!((sc - col - gap).abs() < 1e-6 * (1.0 + sc.abs()), "scalable {sc}, collapsed {col}, gap {gap}");
    }
}

#[test]
fn scalable_optimum_is_tighter_than_titsias() {
    let mut r = rng(12);
    for _ in 0..10 {
        let (names, x) = random_covariates(&[4, 3, 4], &mut r);
        let kernel = random_kernel(&mut r);
        let v = CovView::new(&names, &x);
        let q = random_q(11, &mut r);
        let (sn, s) = shared_rows(&kernel, &names, &x);
        let sv = CovView::new(&sn, &s);
        let scale = BatchScale::full(3, 11);
        let (mh, h) = optimal_variational(&q, &kernel, &v, &sv, scale, DEFAULT_JITTER).unwrap();
        let gv = GPVariational::from_mean_cov(s.clone(), sn.clone(), mh, &h).unwrap();
        let sc = scalable_kl_upper(&q, &kernel, &v, Some(&gv), scale, DEFAULT_JITTER).unwrap();
        // Same locations for the classical bound, with ids no data row shares.
        let st = Mat::from_fn(x.rows, 3, |i, j| match j {
            0 => x[(i, 0)],
            1 => 1000.0 + i as f64,
            _ => x[(i, 2)],
        });
        let ti = titsias_kl_upper(&q, &kernel, &v, &CovView::new(&names, &st), DEFAULT_JITTER).unwrap();
        assert!(sc <= ti, "scalable {sc} > titsias {ti}");
    }
}

#[test]
fn optimum_solves_the_normal_equations() {
    // Cross-check optimal_variational against a direct dense computation.
    let mut r = rng(13);
    let (names, x) = random_covariates(&[2, 3], &mut r);
    let kernel = random_kernel(&mut r);
    let v = CovView::new(&names, &x);
    let q = random_q(5, &mut r);
    let (sn, s) = shared_rows(&kernel, &names, &x);
    let s = s.slice(0, 3, 0, s.cols);
    let sv = CovView::new(&sn, &s);
    let (mh, h) = optimal_variational(&q, &kernel, &v, &sv, BatchScale::full(2, 5), 0.0).unwrap();
    let (_, blocks) = eval_split(&kernel, &v).unwrap();
    let kss = eval_shared(&kernel, &sv, &sv).unwrap();
    let kxs = eval_shared(&kernel, &v, &sv).unwrap();
    let lss = cholesky(&kss).unwrap();
    let a = chol_solve(&lss, &kxs.transpose()).transpose();
    let mut shat = Mat::zeros(5, 5);
    shat.set_slice(0, 0, &blocks[0]);
    shat.set_slice(2, 2, &blocks[1]);
    let si = to_na(&shat).try_inverse().unwrap();
    let an = to_na(&a);
    let prec = to_na(&kss).try_inverse().unwrap() + an.transpose() * &si * &an;
    let hn = prec.try_inverse().unwrap();
    let mn = &hn * an.transpose() * &si * DVector::from_column_slice(&q.mean);
    for i in 0..3 {
        assert!((mn[i] - mh[(i, 0)]).abs() < 1e-8 * (1.0 + mn[i].abs()));
        for j in 0..3 {
            assert!((hn[(i, j)] - h[(i, j)]).abs() < 1e-8 * (1.0 + hn[(i, j)].abs()));
        }
    }
}
