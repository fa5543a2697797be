//! Posterior predictive: GP conditioning of the latents, imputation of
//! missing entries, prediction of future data and masks, and metrics.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{LongitudinalDataset, ID, INTENSITY};
use crate::error::{Error, Result};
use crate::gp_prior::DEFAULT_JITTER;
use crate::kernels::{eval_additive, AdditiveKernel, CovView};
use crate::linalg::{cholesky, cholesky_jitter, matmul_t, relative_jitter, solve_lower, Mat};
use crate::model::{LatentGp, ModelParams};
use crate::tpp;

/// Gaussian conditioning of one latent GP on fixed training inputs, factored
/// once and reused for every draw of the training latents.
#[derive(Clone, Debug)]
pub struct GpConditioner {
    /// Factor of `K_ww + sigma_z^2 I` (`0 x 0` without training inputs).
    l: Mat,
    /// `L^-1 K_{w w_*}`.
    a: Mat,
    /// Predictive variances at the targets.
    pub var: Vec<f64>,
}

impl GpConditioner {
    /// `K_ww + sigma_z^2 I` uses the kernel's own noise. `jitter` floors the
    /// predictive variances and is added (relative to the mean diagonal) when
    /// the plain factorization fails.
    pub fn new(kernel: &AdditiveKernel, w: &CovView, w_star: &CovView, jitter: f64) -> Result<Self> {
        let ns = w_star.rows();
        let prior: Vec<f64> = (0..ns)
            .map(|i| {
                let x = w_star.x.slice(i, i + 1, 0, w_star.x.cols);
                eval_additive(kernel, &CovView::new(w_star.names, &x), &CovView::new(w_star.names, &x), true).map(|k| k.item())
            })
            .collect::<Result<_>>()?;
        if w.rows() == 0 {
            return Ok(GpConditioner { l: Mat::zeros(0, 0), a: Mat::zeros(0, ns), var: prior.iter().map(|v| v.max(jitter)).collect() });
        }
        let k = eval_additive(kernel, w, w, true)?;
        let l = match cholesky(&k) {
            Ok(l) => l,
            Err(_) => cholesky_jitter(&k, relative_jitter(&k, jitter))?,
        };
        let a = solve_lower(&l, &eval_additive(kernel, w, w_star, false)?);
        let var = (0..ns)
            .map(|j| {
                let q: f64 = (0..a.rows).map(|i| a[(i, j)] * a[(i, j)]).sum();
                (prior[j] - q).max(jitter)
            })
            .collect();
        Ok(GpConditioner { l, a, var })
    }

    /// Predictive mean given latent values at the training inputs.
    pub fn mean(&self, z: &[f64]) -> Vec<f64> {
        if self.l.rows == 0 {
            return vec![0.0; self.a.cols];
        }
        let b = solve_lower(&self.l, &Mat::col(z.to_vec()));
        matmul_t(&self.a, true, &b, false).data
    }
}

/// Predictive mean and variance of a latent GP at `w_star` given values `z`
/// at `w`, with latent noise `sigma_z2` in place of the kernel's own.
pub fn gp_conditional(
    kernel: &AdditiveKernel,
    w: &CovView,
    z: &[f64],
    w_star: &CovView,
    sigma_z2: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != w.rows() {
        return Err(Error::Shape(format!("{} latent values for {} training inputs", z.len(), w.rows())));
    }
    if !(sigma_z2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("latent noise must be nonnegative, got {sigma_z2}")));
    }
    let kernel = AdditiveKernel { noise_var: sigma_z2, ..kernel.clone() };
    let c = GpConditioner::new(&kernel, w, w_star, DEFAULT_JITTER)?;
    Ok((c.mean(z), c.var.clone()))
}

fn zero_filled(ds: &LongitudinalDataset) -> Mat {
    ds.y.zip_map(&ds.m, |y, m| if m > 0.0 { y } else { 0.0 })
}

fn sample_gaussian<R: Rng>(mu: &Mat, var: &Mat, rng: &mut R) -> Mat {
    let mut out = mu.clone();
    for (o, v) in out.data.iter_mut().zip(&var.data) {
        *o += v.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Fill missing entries with the mean of `samples` decoder outputs at
/// encoder-posterior draws; observed entries are copied unchanged.
pub fn impute<R: Rng>(ds: &LongitudinalDataset, params: &ModelParams, samples: usize, rng: &mut R) -> Result<Mat> {
    if ds.k() != params.sigma_y2.len() {
        return Err(Error::Shape(format!("dataset has {} outputs, model {}", ds.k(), params.sigma_y2.len())));
    }
    let n = ds.n();
    let (mu_y, w_y) = params.nets.encode_y(&zero_filled(ds))?;
    let (mu_m, w_m) = params.nets.encode_m(&ds.m)?;
    let mut acc = Mat::zeros(n, ds.k());
    let samples = samples.max(1);
    for _ in 0..samples {
        let z_y = sample_gaussian(&mu_y, &w_y, rng);
        let z_m = sample_gaussian(&mu_m, &w_m, rng);
        let z_m = if params.mask_channel() { z_m } else { Mat::zeros(n, params.nets.latent_m) };
        acc.add_assign(&params.nets.decode_y(&z_y, Some(&z_m))?);
    }
    let mean = acc.scale(1.0 / samples as f64);
    Ok(Mat::from_fn(n, ds.k(), |i, k| if ds.m[(i, k)] > 0.0 { ds.y[(i, k)] } else { mean[(i, k)] }))
}

/// What to predict and from what.
#[derive(Clone, Debug)]
pub struct PredictionRequest {
    /// Observed rows the latents are conditioned on (training data and the
    /// known history of the target patients).
    pub conditioning: LongitudinalDataset,
    /// Target rows; only covariates and times are used.
    pub targets: LongitudinalDataset,
    pub samples: usize,
    /// Condition on encoder means instead of encoder samples.
    pub condition_on_mean: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_mean: Mat,
    pub m_prob: Mat,
}

/// Target `id` values expressed in the conditioning patient index.
fn target_id_index(cond: &LongitudinalDataset, targets: &LongitudinalDataset, id_needed: bool) -> Result<Vec<f64>> {
    let mut fresh = cond.num_patients();
    (0..targets.num_patients())
        .map(|p| {
            let name = &targets.patient_ids[p];
            match cond.patient_ids.iter().position(|c| c == name) {
                Some(i) => Ok(i as f64),
                None if id_needed => Err(Error::Data(format!("target patient {name} has no conditioning rows"))),
                None => {
                    fresh += 1;
                    Ok((fresh - 1) as f64)
                }
            }
        })
        .collect()
}

/// Standardized covariates (plus posterior mean intensity for the
/// point-process model) of the conditioning and target rows.
fn covariates(params: &ModelParams, cond: &LongitudinalDataset, targets: &LongitudinalDataset, target_ids: &[f64]) -> Result<(Vec<String>, Mat, Mat)> {
    let mut names = cond.schema.names();
    let mut xc = params.standardizer.apply(cond);
    let mut xt = params.standardizer.apply(targets);
    if let Some(j) = targets.schema.index_of(ID) {
        for p in 0..targets.num_patients() {
            for i in targets.patient_rows(p) {
                xt[(i, j)] = target_ids[p];
            }
        }
    }
    if let Some(st) = &params.tpp {
        let col = params.config.beta_group_column.as_deref();
        let (ev_c, _) = tpp::patient_events(cond, col)?;
        let (ev_t, _) = tpp::patient_events(targets, col)?;
        // History of a patient: every known timestamp, conditioning and target.
        let history = |name: &str| -> Vec<f64> {
            let mut h: Vec<f64> = Vec::new();
            for (ds, evs) in [(cond, &ev_c), (targets, &ev_t)] {
                if let Some(p) = ds.patient_ids.iter().position(|c| c == name) {
                    h.extend(&evs[p].times);
                }
            }
            h.sort_by(|a, b| a.total_cmp(b));
            h.dedup();
            h
        };
        let lam = |ds: &LongitudinalDataset, evs: &[tpp::PatientEvents]| -> Result<Mat> {
            let mut v = Vec::with_capacity(ds.n());
            for (p, ev) in evs.iter().enumerate() {
                v.extend(tpp::posterior_intensity(st, &history(&ds.patient_ids[p]), &ev.times, ev.group)?);
            }
            Ok(Mat::col(v))
        };
        xc = Mat::hcat(&[&xc, &lam(cond, &ev_c)?]);
        xt = Mat::hcat(&[&xt, &lam(targets, &ev_t)?]);
        names.push(INTENSITY.to_string());
    }
    Ok((names, xc, xt))
}

/// Monte Carlo predictive means of data and mask at the target rows.
pub fn predict_future<R: Rng>(req: &PredictionRequest, params: &ModelParams, rng: &mut R) -> Result<Prediction> {
    let (cond, targets) = (&req.conditioning, &req.targets);
    let k = params.sigma_y2.len();
    if cond.k() != k || targets.k() != k {
        return Err(Error::Shape(format!("datasets must have {k} outputs")));
    }
    if cond.schema != targets.schema {
        return Err(Error::Schema("conditioning and target schemas differ".into()));
    }
    let uses_id = params.gp_y.iter().chain(&params.gp_m).any(|g| g.kernel.components.iter().any(|c| c.uses_id()));
    let ids = target_id_index(cond, targets, uses_id && cond.n() > 0)?;
    let (names, xc, xt) = covariates(params, cond, targets, &ids)?;
    let (wc, wt) = (CovView::new(&names, &xc), CovView::new(&names, &xt));
    let jitter = params.config.jitter;
    let build = |gps: &[LatentGp]| -> Result<Vec<GpConditioner>> {
        gps.par_iter().map(|g| GpConditioner::new(&g.kernel, &wc, &wt, jitter)).collect()
    };
    let cy = build(&params.gp_y)?;
    let cm = build(&params.gp_m)?;

    let (mu_y, w_y) = params.nets.encode_y(&zero_filled(cond))?;
    let (mu_m, w_m) = params.nets.encode_m(&cond.m)?;
    let ns = targets.n();
    let draw = |c: &[GpConditioner], mu: &Mat, w: &Mat, latent: usize, rng: &mut R| -> Mat {
        let mut z = Mat::zeros(ns, latent);
        for (l, cl) in c.iter().enumerate() {
            let zc: Vec<f64> = (0..mu.rows)
                .map(|i| {
                    let e: f64 = rng.sample(StandardNormal);
                    if req.condition_on_mean {
                        mu[(i, l)]
                    } else {
                        mu[(i, l)] + w[(i, l)].sqrt() * e
                    }
                })
                .collect();
            let mean = cl.mean(&zc);
            for j in 0..ns {
                let e: f64 = rng.sample(StandardNormal);
                z[(j, l)] = mean[j] + cl.var[j].sqrt() * e;
            }
        }
        z
    };
    let samples = req.samples.max(1);
    let mut y_acc = Mat::zeros(ns, k);
    let mut m_acc = Mat::zeros(ns, k);
    for _ in 0..samples {
        let z_y = draw(&cy, &mu_y, &w_y, params.nets.latent_y, rng);
        let z_m = draw(&cm, &mu_m, &w_m, params.nets.latent_m, rng);
        y_acc.add_assign(&params.nets.decode_y(&z_y, Some(&z_m))?);
        if params.mask_channel() {
            m_acc.add_assign(&params.nets.decode_m(&z_y, &z_m)?);
        }
    }
    let c = 1.0 / samples as f64;
    let m_prob = if params.mask_channel() { m_acc.scale(c) } else { observation_rate(cond, ns) };
    Ok(Prediction { y_mean: y_acc.scale(c), m_prob })
}

/// Without a mask model every target row gets the per-output fraction of
/// observed conditioning entries (one half when there are none).
fn observation_rate(cond: &LongitudinalDataset, rows: usize) -> Mat {
    let rate: Vec<f64> = (0..cond.k())
        .map(|k| if cond.n() == 0 { 0.5 } else { cond.m.column(k).iter().sum::<f64>() / cond.n() as f64 })
        .collect();
    Mat::from_fn(rows, rate.len(), |_, k| rate[k])
}

/// Mean squared difference over the entries where `selector` is nonzero.
pub fn mse(pred: &Mat, truth: &Mat, selector: &Mat) -> Result<f64> {
    if pred.shape() != truth.shape() || pred.shape() != selector.shape() {
        return Err(Error::Shape("prediction, truth and selector disagree in shape".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), s) in pred.data.iter().zip(&truth.data).zip(&selector.data) {
        if *s != 0.0 {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty selector".into()));
    }
    Ok(sum / count as f64)
}
