//! KL divergences between amortized diagonal posteriors and GP priors.
//!
//! For one latent dimension the encoder gives `q(z) = N(mu, diag(w))` over
//! the `N` rows of a dataset, and the prior is `N(0, Sigma)` with
//! `Sigma = K^A + blockdiag_p(Sigma_hat_p)`: `K^A` collects the kernel
//! components that do not involve the patient id, `Sigma_hat_p` the id
//! components of patient `p` plus the latent noise.
//!
//! Provided here:
//! * [`exact_kl`] — the `O(N^3)` reference;
//! * [`titsias_kl_upper`] — the classical inducing-point bound with noise
//!   `sigma_z^2 I`;
//! * [`collapsed_kl_upper`] — the bound obtained by optimizing out the
//!   inducing posterior when `K^A` alone is approximated;
//! * [`scalable_kl_upper`] / [`scalable_kl_tape`] — the uncollapsed bound with
//!   an explicit Gaussian `q(u) = N(m_H, H)` over `K^A`'s inducing values,
//!   which splits into per-patient terms and admits mini-batching.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{eval_additive, eval_shared, eval_split, patient_runs, sum_tape, AdditiveKernel, CovView, KernelVars, TapeCols};
use crate::linalg::{cholesky, chol_logdet, chol_solve, matmul_t, relative_jitter, solve_lower, spd_inverse, Mat};
use crate::tape::{Tape, Var};

/// Default relative jitter for noise-free kernel matrices.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Inducing points of `K^A` with a free-form Gaussian over their values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GPVariational {
    /// Inducing locations, `M x len(s_names)`.
    pub s: Mat,
    pub s_names: Vec<String>,
    /// `M x 1`.
    pub m_h: Mat,
    /// Lower Cholesky factor of `H`.
    pub h_factor: Mat,
}

impl GPVariational {
    pub fn num_inducing(&self) -> usize {
        self.s.rows
    }

    pub fn h(&self) -> Mat {
        matmul_t(&self.h_factor, false, &self.h_factor, true)
    }

    pub fn from_mean_cov(s: Mat, s_names: Vec<String>, m_h: Mat, h: &Mat) -> Result<Self> {
        Ok(GPVariational { s, s_names, m_h, h_factor: cholesky(h)? })
    }

    pub fn view(&self) -> CovView<'_> {
        CovView::new(&self.s_names, &self.s)
    }
}

/// Diagonal Gaussian over the rows of one latent dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussianBatch {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagonalGaussianBatch {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape("mean and variance lengths differ".into()));
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("variances must be strictly positive".into()));
        }
        Ok(DiagonalGaussianBatch { mean, var })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Mini-batch scaling: per-patient terms are multiplied by
/// `p_total / batch_patients`, and the constant `-N/2` uses the full `n_total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchScale {
    pub p_total: usize,
    pub batch_patients: usize,
    pub n_total: usize,
}

impl BatchScale {
    /// The batch is the whole dataset.
    pub fn full(p: usize, n: usize) -> Self {
        BatchScale { p_total: p, batch_patients: p, n_total: n }
    }

    pub fn factor(&self) -> f64 {
        self.p_total as f64 / self.batch_patients as f64
    }
}

/// `KL(N(mu, diag(w)) || N(0, sigma))` via a Cholesky factorization.
pub fn exact_kl(q: &DiagonalGaussianBatch, sigma: &Mat) -> Result<f64> {
    let l = cholesky(sigma)?;
    Ok(kl_with_factor(q, &l))
}

fn kl_with_factor(q: &DiagonalGaussianBatch, l: &Mat) -> f64 {
    let n = q.len();
    let mu = Mat::col(q.mean.clone());
    let a = solve_lower(l, &mu);
    let linv = solve_lower(l, &Mat::identity(n));
    // diag(Sigma^-1)_i = sum_k (L^-1)_{ki}^2
    let mut tr = 0.0;
    for i in 0..n {
        for kk in 0..n {
            tr += linv[(kk, i)] * linv[(kk, i)] * q.var[i];
        }
    }
    let logdet_w: f64 = q.var.iter().map(|v| v.ln()).sum();
    0.5 * (tr + a.data.iter().map(|v| v * v).sum::<f64>() - n as f64 + chol_logdet(l) - logdet_w)
}

/// Nyström term `K_xs K_ss^-1 K_sx` through a jittered factorization of `K_ss`.
fn nystrom(kxs: &Mat, kss: &Mat, jitter: f64) -> Result<Mat> {
    let mut k = kss.clone();
    k.add_diag(if jitter > 0.0 { relative_jitter(kss, jitter) } else { 0.0 });
    let l = cholesky(&k)?;
    let v = solve_lower(&l, &kxs.transpose());
    Ok(matmul_t(&v, true, &v, false))
}

/// Classical inducing-point bound with inducing locations `s` in the full
/// covariate space: `KL(q || N(0, Q + sigma_z^2 I)) + tr(K - Q) / (2 sigma_z^2)`.
pub fn titsias_kl_upper(q: &DiagonalGaussianBatch, kernel: &AdditiveKernel, x: &CovView, s: &CovView, jitter: f64) -> Result<f64> {
    if s.rows() == 0 {
        return Err(Error::InvalidArgument("at least one inducing point is required".into()));
    }
    let kxx = eval_additive(kernel, x, x, false)?;
    let kxs = eval_additive(kernel, x, s, false)?;
    let kss = eval_additive(kernel, s, s, false)?;
    let qm = nystrom(&kxs, &kss, jitter)?;
    let mut cov = qm.clone();
    cov.add_diag(kernel.noise_var);
    let kl = exact_kl(q, &cov)?;
    Ok(kl + (kxx.trace() - qm.trace()) / (2.0 * kernel.noise_var))
}

/// Bound with the inducing posterior optimized out:
/// `KL(q || N(0, Q_A + blockdiag Sigma_hat)) + 1/2 sum_p tr(Sigma_hat_p^-1 (K^A - Q_A)_pp)`.
/// `s` holds inducing locations over the shared (non-id) inputs.
pub fn collapsed_kl_upper(q: &DiagonalGaussianBatch, kernel: &AdditiveKernel, x: &CovView, s: &CovView, jitter: f64) -> Result<f64> {
    let runs = patient_runs(x)?;
    let (ka, blocks) = eval_split(kernel, x)?;
    let qa = if kernel.has_shared_part() {
        let kxs = eval_shared(kernel, x, s)?;
        let kss = eval_shared(kernel, s, s)?;
        nystrom(&kxs, &kss, jitter)?
    } else {
        Mat::zeros(x.rows(), x.rows())
    };
    let mut cov = qa.clone();
    let mut trace = 0.0;
    for (r, b) in runs.iter().zip(&blocks) {
        let mut sub = cov.slice(r.start, r.end, r.start, r.end);
        sub.add_assign(b);
        cov.set_slice(r.start, r.start, &sub);
        let resid = ka.slice(r.start, r.end, r.start, r.end).sub(&qa.slice(r.start, r.end, r.start, r.end));
        let l = cholesky(b)?;
        trace += chol_solve(&l, &resid).trace();
    }
    Ok(exact_kl(q, &cov)? + 0.5 * trace)
}

/// Tape inputs for the inducing part of the scalable bound.
#[derive(Clone, Debug)]
pub struct InducingVars {
    /// Inducing locations as named `M x 1` columns.
    pub s: TapeCols,
    /// `M x 1`.
    pub m_h: Var,
    /// Symmetric `M x M` covariance.
    pub h: Var,
}

/// Scalable bound on the tape. `x` holds the batch covariates (rows of whole
/// patients, contiguous), `mean`/`var` the `n x 1` encoder outputs; `runs`
/// the patient row ranges.
#[allow(clippy::too_many_arguments)]
pub fn scalable_kl_tape(
    t: &Tape,
    kernel: &AdditiveKernel,
    kv: &KernelVars,
    x: &TapeCols,
    runs: &[Range<usize>],
    mean: Var,
    var: Var,
    ind: Option<&InducingVars>,
    scale: BatchScale,
    jitter: f64,
) -> Result<Var> {
    struct Shared {
        lss: Var,
        v: Var,
        at: Var,
        alpha: Var,
        pred: Var,
        m: usize,
    }
    let shared = match ind {
        Some(iv) if kernel.has_shared_part() => {
            let kss = sum_tape(t, kernel, kv, &iv.s, &iv.s, |c| !c.uses_id())?.expect("shared part present");
            let m = iv.s.rows;
            let (kss, _) = t.add_relative_jitter(kss, jitter);
            let lss = t.cholesky(kss)?;
            let kxs = sum_tape(t, kernel, kv, x, &iv.s, |c| !c.uses_id())?.expect("shared part present");
            let v = t.tri_solve(lss, t.transpose(kxs), false);
            let alpha = t.tri_solve(lss, iv.m_h, false);
            let pred = t.matmul_t(v, true, alpha, false);
            let at = t.tri_solve(lss, v, true);
            Some(Shared { lss, v, at, alpha, pred, m })
        }
        _ => None,
    };

    let mut per_patient: Vec<Var> = Vec::new();
    let mut bsum: Option<Var> = None;
    for r in runs {
        let np = r.len();
        let xb = x.slice_rows(t, r.start, r.end);
        let kr = sum_tape(t, kernel, kv, &xb, &xb, |c| c.uses_id())?;
        let noise = t.mul_scalar(t.constant(Mat::identity(np)), kv.noise_var);
        let sig = match kr {
            Some(k) => t.add(k, noise),
            None => noise,
        };
        let lp = t.cholesky(sig)?;
        let mu_p = t.slice_rows(mean, r.start, r.end);
        let w_p = t.slice_rows(var, r.start, r.end);
        let resid = match &shared {
            Some(sh) => t.sub(t.slice_rows(sh.pred, r.start, r.end), mu_p),
            None => t.neg(mu_p),
        };
        let a = t.tri_solve(lp, resid, false);
        let quad = t.sum(t.square(a));
        let linv = t.tri_solve(lp, t.constant(Mat::identity(np)), false);
        let dinv = t.sum_rows(t.square(linv));
        let tr_w = t.sum(t.mul(dinv, t.transpose(w_p)));
        let logdet = t.chol_logdet(lp);
        let logw = t.sum(t.ln(w_p));
        let mut term = t.add(t.add(quad, tr_w), t.sub(logdet, logw));
        if let Some(sh) = &shared {
            let ka = sum_tape(t, kernel, kv, &xb, &xb, |c| !c.uses_id())?.expect("shared part present");
            let vp = t.slice_cols(sh.v, r.start, r.end);
            let ktil = t.sub(ka, t.matmul_t(vp, true, vp, false));
            let b = t.matmul(linv, ktil);
            term = t.add(term, t.sum(t.mul(b, linv)));
            let atp = t.slice_cols(sh.at, r.start, r.end);
            let g = t.matmul_t(linv, false, atp, true);
            let gg = t.matmul_t(g, true, g, false);
            bsum = Some(match bsum {
                Some(s) => t.add(s, gg),
                None => gg,
            });
        }
        per_patient.push(term);
    }
    let mut total = per_patient[0];
    for &p in &per_patient[1..] {
        total = t.add(total, p);
    }
    if let (Some(bs), Some(iv)) = (bsum, ind) {
        total = t.add(total, t.sum(t.mul(iv.h, bs)));
    }
    let mut kl = t.offset(t.scale(total, 0.5 * scale.factor()), -0.5 * scale.n_total as f64);
    if let (Some(sh), Some(iv)) = (&shared, ind) {
        let lh = t.cholesky(iv.h)?;
        let tr = t.sum(t.square(t.tri_solve(sh.lss, lh, false)));
        let quad = t.sum(t.square(sh.alpha));
        let ld = t.sub(t.chol_logdet(sh.lss), t.chol_logdet(lh));
        let klu = t.offset(t.add(t.add(tr, quad), ld), -(sh.m as f64));
        kl = t.add(kl, t.scale(klu, 0.5));
    }
    Ok(kl)
}

fn check_batch(q: &DiagonalGaussianBatch, x: &CovView, scale: &BatchScale, runs: &[Range<usize>]) -> Result<()> {
    if q.len() != x.rows() {
        return Err(Error::Shape(format!("{} posterior rows vs {} covariate rows", q.len(), x.rows())));
    }
    if runs.len() != scale.batch_patients {
        return Err(Error::InvalidArgument(format!(
            "batch holds {} patients but the scale says {}",
            runs.len(),
            scale.batch_patients
        )));
    }
    Ok(())
}

/// Plain evaluation of the scalable bound.
pub fn scalable_kl_upper(
    q: &DiagonalGaussianBatch,
    kernel: &AdditiveKernel,
    x: &CovView,
    gv: Option<&GPVariational>,
    scale: BatchScale,
    jitter: f64,
) -> Result<f64> {
    let runs = patient_runs(x)?;
    check_batch(q, x, &scale, &runs)?;
    if kernel.has_shared_part() && gv.is_none() {
        return Err(Error::InvalidArgument("kernel has a shared part but no inducing points were given".into()));
    }
    let t = Tape::new();
    let kv = KernelVars::constant(&t, kernel);
    let xc = TapeCols::constant(&t, x);
    let mean = t.constant(Mat::col(q.mean.clone()));
    let var = t.constant(Mat::col(q.var.clone()));
    let iv = gv.map(|g| InducingVars {
        s: TapeCols::constant(&t, &g.view()),
        m_h: t.constant(g.m_h.clone()),
        h: t.constant(g.h()),
    });
    let kl = scalable_kl_tape(&t, kernel, &kv, &xc, &runs, mean, var, iv.as_ref(), scale, jitter)?;
    Ok(t.item(kl))
}

/// Closed-form optimum `(m_H, H)` of the scalable bound for a fixed batch:
/// `H = (K_ss^-1 + c B)^-1`, `m_H = c H sum_p A_p^T Sigma_hat_p^-1 mu_p`
/// with `A_p = K_{x_p s} K_ss^-1`, `B = sum_p A_p^T Sigma_hat_p^-1 A_p` and
/// `c` the batch scale factor.
pub fn optimal_variational(
    q: &DiagonalGaussianBatch,
    kernel: &AdditiveKernel,
    x: &CovView,
    s: &CovView,
    scale: BatchScale,
    jitter: f64,
) -> Result<(Mat, Mat)> {
    let runs = patient_runs(x)?;
    let (_, blocks) = eval_split(kernel, x)?;
    let kss = eval_shared(kernel, s, s)?;
    let mut kssj = kss.clone();
    kssj.add_diag(relative_jitter(&kss, jitter));
    let lss = cholesky(&kssj)?;
    let kxs = eval_shared(kernel, x, s)?;
    let at = chol_solve(&lss, &kxs.transpose()); // M x N
    let m = s.rows();
    let mut b = Mat::zeros(m, m);
    let mut c = Mat::zeros(m, 1);
    for (r, blk) in runs.iter().zip(&blocks) {
        let lp = cholesky(blk)?;
        let atp = at.slice(0, m, r.start, r.end);
        let sinv_a = chol_solve(&lp, &atp.transpose()); // n_p x M
        b.add_assign(&matmul_t(&atp, false, &sinv_a, false));
        let mu = Mat::col(q.mean[r.clone()].to_vec());
        c.add_assign(&matmul_t(&sinv_a, true, &mu, false));
    }
    let f = scale.factor();
    let kinv = crate::linalg::chol_inverse(&lss);
    let prec = kinv.add(&b.scale(f)).symmetrize();
    let h = spd_inverse(&prec)?;
    let mh = h.matmul(&c.scale(f));
    Ok((mh, h))
}

/// Natural-gradient ascent step on `(m_H, H)`.
///
/// `grad_m`, `grad_h` are gradients of the objective being *maximized* with
/// respect to the mean and covariance. In natural coordinates
/// `eta1 = H^-1 m`, `eta2 = -1/2 H^-1` the natural gradient equals the plain
/// gradient with respect to the expectation parameters `(m, m m^T + H)`:
/// `(g_m - 2 G_H m, G_H)`. If the new `H` is not positive definite the step
/// is halved, at most ten times.
pub fn natural_gradient_step(gv: &GPVariational, grad_m: &Mat, grad_h: &Mat, step: f64) -> Result<GPVariational> {
    if step == 0.0 || (grad_m.max_abs() == 0.0 && grad_h.max_abs() == 0.0) {
        return Ok(gv.clone());
    }
    let gh = grad_h.symmetrize();
    let h = gv.h();
    let hinv = spd_inverse(&h)?;
    let eta1 = hinv.matmul(&gv.m_h);
    let eta2 = hinv.scale(-0.5);
    let d1 = grad_m.sub(&gh.matmul(&gv.m_h).scale(2.0));
    let mut rho = step;
    for halvings in 0..=10 {
        let e1 = eta1.add(&d1.scale(rho));
        let e2 = eta2.add(&gh.scale(rho));
        let prec = e2.scale(-2.0).symmetrize();
        if let Ok(lp) = cholesky(&prec) {
            let h_new = crate::linalg::chol_inverse(&lp);
            if let Ok(hf) = cholesky(&h_new) {
                let m_new = h_new.matmul(&e1);
                return Ok(GPVariational { s: gv.s.clone(), s_names: gv.s_names.clone(), m_h: m_new, h_factor: hf });
            }
        }
        if halvings == 10 {
            break;
        }
        rho *= 0.5;
    }
    Err(Error::NaturalGradient { halvings: 10 })
}
