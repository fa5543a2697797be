//! The two joint models, their evidence lower bounds and the training loop.
//!
//! Every latent dimension of `z^y` and `z^m` has an additive GP prior over
//! the covariates; the encoders give amortized diagonal posteriors and the
//! KL terms are replaced by the scalable upper bound of [`crate::gp_prior`].
//! The point-process model additionally fits a GP intensity over the
//! observation times and feeds sampled intensities to the latent kernels.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelKind, RunConfig};
use crate::data::{split_by_patient, LongitudinalDataset, Standardizer, INTENSITY};
use crate::error::{Error, Result};
use crate::gp_prior::{natural_gradient_step, scalable_kl_tape, BatchScale, GPVariational, InducingVars};
use crate::kernels::{eval_shared, AdditiveKernel, ComponentVars, CovView, KernelVars, TapeCols};
use crate::linalg::{relative_jitter, Mat};
use crate::nets::{NetVars, VaeNets};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tpp::{self, PatientEvents, TppState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Prior and inducing posterior of one latent dimension. `gv` is `None` when
/// the kernel has no component outside the patient id.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGp {
    pub kernel: AdditiveKernel,
    pub gv: Option<GPVariational>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: RunConfig,
    /// Covariate standardization fitted on the training split.
    pub standardizer: Standardizer,
    pub nets: VaeNets,
    pub gp_y: Vec<LatentGp>,
    /// Empty when the mask channel is disabled.
    pub gp_m: Vec<LatentGp>,
    /// Observation variance per output.
    pub sigma_y2: Vec<f64>,
    pub tpp: Option<TppState>,
}

/// `[ln variance, ln lengthscales..]` per component, then `ln noise`.
pub fn kernel_theta(k: &AdditiveKernel) -> Mat {
    let mut v = Vec::new();
    for c in &k.components {
        v.push(c.variance.max(f64::MIN_POSITIVE).ln());
        v.extend(c.lengthscales.iter().map(|l| l.ln()));
    }
    v.push(k.noise_var.ln());
    Mat::row(v)
}

pub fn set_kernel_theta(k: &mut AdditiveKernel, theta: &Mat) -> Result<()> {
    let want: usize = k.components.iter().map(|c| 1 + c.lengthscales.len()).sum::<usize>() + 1;
    if theta.len() != want {
        return Err(Error::Shape(format!("kernel parameter row has {} entries, expected {want}", theta.len())));
    }
    let mut it = theta.data.iter().map(|v| v.exp());
    for c in &mut k.components {
        c.variance = it.next().unwrap();
        for l in &mut c.lengthscales {
            *l = it.next().unwrap();
        }
    }
    k.noise_var = it.next().unwrap();
    Ok(())
}

/// Tape view of a kernel parameterized by its log-parameter row.
pub fn kernel_vars(t: &Tape, k: &AdditiveKernel, theta: Var) -> KernelVars {
    let mut i = 0;
    let mut next = || {
        let v = t.exp(t.slice(theta, 0, 1, i, i + 1));
        i += 1;
        v
    };
    let components = k
        .components
        .iter()
        .map(|c| {
            let variance = next();
            ComponentVars { variance, lengthscales: c.lengthscales.iter().map(|_| next()).collect() }
        })
        .collect();
    KernelVars { components, noise_var: next() }
}

fn uses_intensity(k: &AdditiveKernel) -> bool {
    k.components.iter().any(|c| c.inputs.iter().any(|i| i == INTENSITY))
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    pub fn mask_channel(&self) -> bool {
        !self.gp_m.is_empty()
    }

    fn latent_gps(&self) -> impl Iterator<Item = &LatentGp> {
        self.gp_y.iter().chain(&self.gp_m)
    }

    /// Tensors updated by Adam: network weights, kernel log-parameters per
    /// latent dimension, `ln sigma_y^2` and the point-process parameters.
    pub fn adam_tensors(&self) -> Result<Vec<Mat>> {
        let mut v = self.nets.tensors();
        v.extend(self.latent_gps().map(|g| kernel_theta(&g.kernel)));
        v.push(Mat::row(self.sigma_y2.iter().map(|s| s.ln()).collect()));
        if let Some(st) = &self.tpp {
            v.extend(tpp::trainable(st)?);
        }
        Ok(v)
    }

    pub fn set_adam_tensors(&mut self, p: &[Mat]) -> Result<()> {
        let nn = self.nets.tensors().len();
        let ng = self.gp_y.len() + self.gp_m.len();
        let want = nn + ng + 1 + if self.tpp.is_some() { 5 } else { 0 };
        if p.len() != want {
            return Err(Error::Shape(format!("{} parameter tensors, expected {want}", p.len())));
        }
        self.nets.set_tensors(&p[..nn])?;
        for (g, theta) in self.gp_y.iter_mut().chain(self.gp_m.iter_mut()).zip(&p[nn..nn + ng]) {
            set_kernel_theta(&mut g.kernel, theta)?;
        }
        self.sigma_y2 = p[nn + ng].data.iter().map(|v| v.exp()).collect();
        if let Some(st) = &mut self.tpp {
            tpp::set_trainable(st, &p[nn + ng + 1..])?;
        }
        Ok(())
    }

    /// `(m_H, H)` of every latent dimension that has inducing points, in
    /// `gp_y` then `gp_m` order.
    pub fn inducing_tensors(&self) -> Vec<Option<(Mat, Mat)>> {
        self.latent_gps().map(|g| g.gv.as_ref().map(|gv| (gv.m_h.clone(), gv.h()))).collect()
    }

    pub fn is_finite(&self) -> bool {
        let nets = self.nets.tensors().iter().all(|m| m.is_finite());
        let gps = self.latent_gps().all(|g| {
            kernel_theta(&g.kernel).data.iter().all(|v| !v.is_nan())
                && g.gv.as_ref().map_or(true, |gv| gv.m_h.is_finite() && gv.h_factor.is_finite())
        });
        let tpp = self.tpp.as_ref().map_or(true, |st| {
            st.m.is_finite() && st.s_factor.is_finite() && st.beta.iter().chain(&st.lag.gamma).chain(&st.lag.lengthscale).all(|v| v.is_finite())
        });
        nets && gps && tpp && self.sigma_y2.iter().all(|s| s.is_finite() && *s > 0.0)
    }

    /// Named tensors holding every model quantity as stored (no
    /// reparameterization), for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = self.nets.tensor_names().into_iter().zip(self.nets.tensors()).collect();
        for (group, gps) in [("gp_y", &self.gp_y), ("gp_m", &self.gp_m)] {
            for (l, g) in gps.iter().enumerate() {
                let mut kv = Vec::new();
                for c in &g.kernel.components {
                    kv.push(c.variance);
                    kv.extend(&c.lengthscales);
                }
                kv.push(g.kernel.noise_var);
                out.push((format!("{group}.{l}.kernel"), Mat::row(kv)));
                if let Some(gv) = &g.gv {
                    out.push((format!("{group}.{l}.s"), gv.s.clone()));
                    out.push((format!("{group}.{l}.m_h"), gv.m_h.clone()));
                    out.push((format!("{group}.{l}.h_factor"), gv.h_factor.clone()));
                }
            }
        }
        out.push(("sigma_y2".into(), Mat::row(self.sigma_y2.clone())));
        if let Some(st) = &self.tpp {
            out.push(("tpp.gamma".into(), Mat::row(st.lag.gamma.clone())));
            out.push(("tpp.lengthscale".into(), Mat::row(st.lag.lengthscale.clone())));
            out.push(("tpp.beta".into(), Mat::row(st.beta.clone())));
            out.push(("tpp.s".into(), st.s.clone()));
            out.push(("tpp.m".into(), st.m.clone()));
            out.push(("tpp.s_factor".into(), st.s_factor.clone()));
        }
        out
    }

    /// Inverse of [`ModelParams::named_tensors`] for `k` outputs.
    pub fn from_named_tensors(
        config: &RunConfig,
        standardizer: Standardizer,
        k: usize,
        get: &dyn Fn(&str) -> Result<Mat>,
    ) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.normalize()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nets = VaeNets::new(
            k,
            cfg.latent_y,
            cfg.latent_m,
            &cfg.encoder_hidden,
            &cfg.decoder_hidden,
            cfg.use_zm_in_decoder && cfg.mask_channel,
            &mut rng,
        )?;
        let ts = nets.tensor_names().iter().map(|n| get(n)).collect::<Result<Vec<_>>>()?;
        nets.set_tensors(&ts)?;
        let load_group = |group: &str, dims: usize, base: AdditiveKernel| -> Result<Vec<LatentGp>> {
            (0..dims)
                .map(|l| {
                    let mut kernel = base.clone();
                    let kv = get(&format!("{group}.{l}.kernel"))?;
                    let want: usize = kernel.components.iter().map(|c| 1 + c.lengthscales.len()).sum::<usize>() + 1;
                    if kv.len() != want {
                        return Err(Error::Checkpoint(format!("{group}.{l}.kernel has {} entries, expected {want}", kv.len())));
                    }
                    let mut it = kv.data.iter().copied();
                    for c in &mut kernel.components {
                        c.variance = it.next().unwrap();
                        for ls in &mut c.lengthscales {
                            *ls = it.next().unwrap();
                        }
                    }
                    kernel.noise_var = it.next().unwrap();
                    let gv = if kernel.has_shared_part() {
                        Some(GPVariational {
                            s: get(&format!("{group}.{l}.s"))?,
                            s_names: kernel.shared_inputs(),
                            m_h: get(&format!("{group}.{l}.m_h"))?,
                            h_factor: get(&format!("{group}.{l}.h_factor"))?,
                        })
                    } else {
                        None
                    };
                    Ok(LatentGp { kernel, gv })
                })
                .collect()
        };
        let gp_y = load_group("gp_y", cfg.latent_y, cfg.kernel_y())?;
        let gp_m = if cfg.mask_channel { load_group("gp_m", cfg.latent_m, cfg.kernel_m())? } else { Vec::new() };
        let sigma_y2 = get("sigma_y2")?.data;
        if sigma_y2.len() != k {
            return Err(Error::Checkpoint(format!("sigma_y2 has {} entries for {k} outputs", sigma_y2.len())));
        }
        let tpp = if cfg.model == ModelKind::Llppsm {
            let st = TppState {
                lag: tpp_lag(get("tpp.gamma")?.data, get("tpp.lengthscale")?.data),
                beta: get("tpp.beta")?.data,
                s: get("tpp.s")?,
                m: get("tpp.m")?,
                s_factor: get("tpp.s_factor")?,
                jitter: cfg.jitter,
            };
            st.validate()?;
            Some(st)
        } else {
            None
        };
        Ok(ModelParams { config: cfg, standardizer, nets, gp_y, gp_m, sigma_y2, tpp })
    }
}

fn tpp_lag(gamma: Vec<f64>, lengthscale: Vec<f64>) -> crate::kernels::LagKernelParams {
    // Field-wise construction keeps stored values bit-exact.
    crate::kernels::LagKernelParams { gamma, lengthscale }
}

// ---------------------------------------------------------------------------
// Batches and noise

/// Whole patients prepared for the bound.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Observations with missing entries set to zero, `N x K`.
    pub y: Mat,
    pub m: Mat,
    /// Standardized covariates, `N x Q`.
    pub x: Mat,
    pub names: Vec<String>,
    pub runs: Vec<Range<usize>>,
    /// Raw observation times per patient, for the point process.
    pub events: Vec<PatientEvents>,
    pub scale: BatchScale,
}

impl Batch {
    /// `p_total`/`n_total` describe the dataset the batch was drawn from.
    pub fn new(ds: &LongitudinalDataset, params: &ModelParams, p_total: usize, n_total: usize) -> Result<Self> {
        let beta_col = match params.kind() {
            ModelKind::Llppsm => params.config.beta_group_column.as_deref(),
            ModelKind::Llsm => None,
        };
        let (events, _) = tpp::patient_events(ds, beta_col)?;
        if let Some(st) = &params.tpp {
            if let Some(e) = events.iter().find(|e| e.group >= st.beta.len()) {
                return Err(Error::Data(format!("beta group {} unknown to the model", e.group)));
            }
        }
        Ok(Batch {
            y: ds.y.zip_map(&ds.m, |y, m| if m > 0.0 { y } else { 0.0 }),
            m: ds.m.clone(),
            x: params.standardizer.apply(ds),
            names: ds.schema.names(),
            runs: (0..ds.num_patients()).map(|p| ds.patient_rows(p)).collect(),
            events,
            scale: BatchScale { p_total, batch_patients: ds.num_patients(), n_total },
        })
    }

    /// The whole dataset as one batch.
    pub fn full(ds: &LongitudinalDataset, params: &ModelParams) -> Result<Self> {
        Batch::new(ds, params, ds.num_patients(), ds.n())
    }

    pub fn n(&self) -> usize {
        self.y.rows
    }

    fn group_onehot(&self, groups: usize) -> Mat {
        let mut oh = Mat::zeros(self.n(), groups);
        for (r, ev) in self.runs.iter().zip(&self.events) {
            for i in r.clone() {
                oh[(i, ev.group)] = 1.0;
            }
        }
        oh
    }
}

/// Standard normal draws behind one bound evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    pub eps_y: Mat,
    pub eps_m: Mat,
    /// One `N x 1` draw per intensity sample (empty for the plain model).
    pub eps_lambda: Vec<Mat>,
}

fn normal_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

impl ElboNoise {
    /// Draws in the order `eps_y`, `eps_m`, then the intensity samples.
    pub fn draw<R: Rng>(rng: &mut R, params: &ModelParams, n: usize) -> Self {
        let eps_y = normal_mat(rng, n, params.nets.latent_y);
        let eps_m = normal_mat(rng, n, params.nets.latent_m);
        let s = if params.tpp.is_some() { params.config.mc_samples_lambda } else { 0 };
        let eps_lambda = (0..s).map(|_| normal_mat(rng, n, 1)).collect();
        ElboNoise { eps_y, eps_m, eps_lambda }
    }
}

// ---------------------------------------------------------------------------
// Likelihoods

/// `sum_{m = 1} ln N(y | mean, sigma2_k)`.
pub fn masked_gaussian_loglik(y: &Mat, mean: &Mat, sigma2: &[f64], m: &Mat) -> Result<f64> {
    if y.shape() != mean.shape() || y.shape() != m.shape() || sigma2.len() != y.cols {
        return Err(Error::Shape("likelihood inputs disagree in shape".into()));
    }
    if let Some(s) = sigma2.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("observation variance must be positive, got {s}")));
    }
    let mut acc = 0.0;
    for i in 0..y.rows {
        for (k, &s2) in sigma2.iter().enumerate() {
            if m[(i, k)] > 0.0 {
                let r = y[(i, k)] - mean[(i, k)];
                acc += -0.5 * (LN_2PI + s2.ln() + r * r / s2);
            }
        }
    }
    Ok(acc)
}

/// `sum m ln p + (1 - m) ln(1 - p)` with `p` clamped to the decoder range.
pub fn bernoulli_loglik(m: &Mat, probs: &Mat) -> Result<f64> {
    if m.shape() != probs.shape() {
        return Err(Error::Shape("mask and probabilities disagree in shape".into()));
    }
    let eps = crate::nets::PROB_EPS;
    Ok(m.data
        .iter()
        .zip(&probs.data)
        .map(|(&mi, &p)| {
            let p = p.clamp(eps, 1.0 - eps);
            mi * p.ln() + (1.0 - mi) * (1.0 - p).ln()
        })
        .sum())
}

fn gaussian_tape(t: &Tape, y: Var, mean: Var, ln_s2: Var, m: Var) -> Var {
    let inv = t.exp(t.neg(ln_s2));
    let quad = t.mul_row(t.square(t.sub(y, mean)), inv);
    let per = t.add_row(quad, t.offset(ln_s2, LN_2PI));
    t.scale(t.sum(t.mul(per, m)), -0.5)
}

fn bernoulli_tape(t: &Tape, m: &Mat, p: Var) -> Var {
    let one_minus = t.offset(t.neg(p), 1.0);
    let a = t.mul(t.constant(m.clone()), t.ln(p));
    let b = t.mul(t.constant(m.map(|v| 1.0 - v)), t.ln(one_minus));
    t.sum(t.add(a, b))
}

fn reparam(t: &Tape, mu: Var, var: Var, eps: &Mat) -> Var {
    t.add(mu, t.mul(t.sqrt(var), t.constant(eps.clone())))
}

// ---------------------------------------------------------------------------
// The bound

/// Values of the bound and its terms. `elbo` equals
/// `recon_y + recon_m - kl_y - kl_m + l_t - kl_u` evaluated left to right.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub elbo: f64,
    pub recon_y: f64,
    pub recon_m: f64,
    pub kl_y: f64,
    pub kl_m: f64,
    /// Expected point-process log-likelihood (zero for the plain model).
    pub l_t: f64,
    /// `KL(q(u) || p(u))` of the point process.
    pub kl_u: f64,
}

impl Breakdown {
    pub fn sum_terms(&self) -> f64 {
        self.recon_y + self.recon_m - self.kl_y - self.kl_m + self.l_t - self.kl_u
    }

    fn scaled(&self, c: f64) -> Breakdown {
        Breakdown {
            elbo: self.elbo * c,
            recon_y: self.recon_y * c,
            recon_m: self.recon_m * c,
            kl_y: self.kl_y * c,
            kl_m: self.kl_m * c,
            l_t: self.l_t * c,
            kl_u: self.kl_u * c,
        }
    }

    fn plus(&self, o: &Breakdown) -> Breakdown {
        Breakdown {
            elbo: self.elbo + o.elbo,
            recon_y: self.recon_y + o.recon_y,
            recon_m: self.recon_m + o.recon_m,
            kl_y: self.kl_y + o.kl_y,
            kl_m: self.kl_m + o.kl_m,
            l_t: self.l_t + o.l_t,
            kl_u: self.kl_u + o.kl_u,
        }
    }
}

/// Tape nodes of the bound.
pub struct ElboVars {
    pub total: Var,
    pub recon_y: Var,
    pub recon_m: Var,
    pub kl_y: Var,
    pub kl_m: Var,
    pub l_t: Var,
    pub kl_u: Var,
}

impl ElboVars {
    pub fn values(&self, t: &Tape) -> Breakdown {
        Breakdown {
            elbo: t.item(self.total),
            recon_y: t.item(self.recon_y),
            recon_m: t.item(self.recon_m),
            kl_y: t.item(self.kl_y),
            kl_m: t.item(self.kl_m),
            l_t: t.item(self.l_t),
            kl_u: t.item(self.kl_u),
        }
    }
}

/// Build the bound on `t`. `pv` are nodes for [`ModelParams::adam_tensors`]
/// and `ind` nodes for [`ModelParams::inducing_tensors`] (`(m_H, H)`).
pub fn elbo_tape(
    t: &Tape,
    params: &ModelParams,
    pv: &[Var],
    ind: &[Option<(Var, Var)>],
    batch: &Batch,
    noise: &ElboNoise,
) -> Result<ElboVars> {
    let n = batch.n();
    if noise.eps_y.shape() != (n, params.nets.latent_y) || noise.eps_m.shape() != (n, params.nets.latent_m) {
        return Err(Error::Shape("noise does not match the batch".into()));
    }
    let nn = params.nets.tensors().len();
    let ng = params.gp_y.len() + params.gp_m.len();
    let nv: NetVars = params.nets.split_vars(&pv[..nn]);
    let thetas = &pv[nn..nn + ng];
    let ln_s2 = pv[nn + ng];
    let factor = batch.scale.factor();
    let zero = t.scalar_const(0.0);

    let y = t.constant(batch.y.clone());
    let m = t.constant(batch.m.clone());
    let (mu_y, w_y) = params.nets.encode_y_tape(t, &nv, y)?;
    let z_y = reparam(t, mu_y, w_y, &noise.eps_y);
    let mask = params.mask_channel();
    let (mu_m, w_m, z_m) = if mask {
        let (mu, w) = params.nets.encode_m_tape(t, &nv, m)?;
        (Some(mu), Some(w), reparam(t, mu, w, &noise.eps_m))
    } else {
        (None, None, t.constant(Mat::zeros(n, params.nets.latent_m)))
    };
    let mean_y = params.nets.decode_y_tape(t, &nv, z_y, z_m)?;
    let recon_y = t.scale(gaussian_tape(t, y, mean_y, ln_s2, m), factor);
    let recon_m = if mask {
        let p = params.nets.decode_m_tape(t, &nv, z_y, z_m)?;
        t.scale(bernoulli_tape(t, &batch.m, p), factor)
    } else {
        zero
    };

    // Covariate sets: one per intensity sample for the point-process model.
    let base = TapeCols::constant(t, &CovView::new(&batch.names, &batch.x));
    let (col_sets, l_t, kl_u) = match &params.tpp {
        None => (vec![base], zero, zero),
        Some(st) => {
            let v = tpp::vars_from_params(t, &pv[nn + ng + 1..nn + ng + 6]);
            let pr = tpp::tpp_prior(t, st, &v)?;
            let refs: Vec<&PatientEvents> = batch.events.iter().collect();
            let terms = tpp::tpp_terms_tape(t, st, &v, &pr, &refs)?;
            let l_t = t.scale(t.sub(terms.log_intensity, terms.integral), factor);
            let kl_u = tpp::kl_u_tape(t, &pr, &v);
            let beta_rows = t.matmul_t(t.constant(batch.group_onehot(st.beta.len())), false, v.beta, true);
            let sd = t.sqrt(terms.var);
            let sets = noise
                .eps_lambda
                .iter()
                .map(|eps| {
                    let z = t.add(terms.mean, t.mul(sd, t.constant(eps.clone())));
                    let lam = t.square(t.add(z, beta_rows));
                    let mut c = base.clone();
                    c.cols.insert(INTENSITY.to_string(), lam);
                    c
                })
                .collect::<Vec<_>>();
            if sets.is_empty() {
                return Err(Error::InvalidArgument("point-process model needs at least one intensity sample".into()));
            }
            (sets, l_t, kl_u)
        }
    };

    let kl_group = |gps: &[LatentGp], thetas: &[Var], ind: &[Option<(Var, Var)>], mu: Var, w: Var| -> Result<Var> {
        if gps.is_empty() {
            return Ok(zero);
        }
        let sets = if uses_intensity(&gps[0].kernel) { &col_sets[..] } else { &col_sets[..1] };
        let mut acc: Option<Var> = None;
        for cols in sets {
            for (l, g) in gps.iter().enumerate() {
                let kv = kernel_vars(t, &g.kernel, thetas[l]);
                let iv = match (&g.gv, ind[l]) {
                    (Some(gv), Some((m_h, h))) => Some(InducingVars { s: TapeCols::constant(t, &gv.view()), m_h, h }),
                    _ => None,
                };
                let mean = t.slice_cols(mu, l, l + 1);
                let var = t.slice_cols(w, l, l + 1);
                let kl = scalable_kl_tape(t, &g.kernel, &kv, cols, &batch.runs, mean, var, iv.as_ref(), batch.scale, params.config.jitter)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, kl),
                    None => kl,
                });
            }
        }
        let acc = acc.expect("at least one latent dimension");
        Ok(if sets.len() == 1 { acc } else { t.scale(acc, 1.0 / sets.len() as f64) })
    };
    let ny = params.gp_y.len();
    let kl_y = kl_group(&params.gp_y, &thetas[..ny], &ind[..ny], mu_y, w_y)?;
    let kl_m = match (mu_m, w_m) {
        (Some(mu), Some(w)) => kl_group(&params.gp_m, &thetas[ny..], &ind[ny..], mu, w)?,
        _ => zero,
    };

    let total = t.sub(t.add(t.sub(t.sub(t.add(recon_y, recon_m), kl_y), kl_m), l_t), kl_u);
    Ok(ElboVars { total, recon_y, recon_m, kl_y, kl_m, l_t, kl_u })
}

/// Gradients of the bound with respect to the Adam tensors and `(m_H, H)`.
pub struct ElboGrads {
    pub adam: Vec<Mat>,
    pub inducing: Vec<Option<(Mat, Mat)>>,
}

/// The bound for given noise, optionally with gradients.
pub fn elbo_eval(params: &ModelParams, batch: &Batch, noise: &ElboNoise, grads: bool) -> Result<(Breakdown, Option<ElboGrads>)> {
    let t = Tape::new();
    let adam = params.adam_tensors()?;
    let mk = |m: Mat| if grads { t.param(m) } else { t.constant(m) };
    let pv: Vec<Var> = adam.into_iter().map(mk).collect();
    let ind: Vec<Option<(Var, Var)>> = params.inducing_tensors().into_iter().map(|o| o.map(|(a, b)| (mk(a), mk(b)))).collect();
    let ev = elbo_tape(&t, params, &pv, &ind, batch, noise)?;
    let b = ev.values(&t);
    if !grads {
        return Ok((b, None));
    }
    let g = t.backward(ev.total);
    let out = ElboGrads {
        adam: pv.iter().map(|&p| g.wrt(p)).collect(),
        inducing: ind.iter().map(|o| o.map(|(a, b)| (g.wrt(a), g.wrt(b)))).collect(),
    };
    Ok((b, Some(out)))
}

fn check_kind(params: &ModelParams, want: ModelKind) -> Result<()> {
    if params.kind() != want {
        return Err(Error::InvalidArgument(format!("model is {:?}, not {want:?}", params.kind())));
    }
    Ok(())
}

/// Bound of the plain model with one reparameterized sample per latent.
pub fn elbo_llsm<R: Rng>(batch: &Batch, params: &ModelParams, rng: &mut R) -> Result<Breakdown> {
    check_kind(params, ModelKind::Llsm)?;
    let noise = ElboNoise::draw(rng, params, batch.n());
    Ok(elbo_eval(params, batch, &noise, false)?.0)
}

/// Bound of the point-process model; the KL bounds are averaged over
/// `mc_samples_lambda` intensity samples.
pub fn elbo_llppsm<R: Rng>(batch: &Batch, params: &ModelParams, rng: &mut R) -> Result<Breakdown> {
    check_kind(params, ModelKind::Llppsm)?;
    let noise = ElboNoise::draw(rng, params, batch.n());
    Ok(elbo_eval(params, batch, &noise, false)?.0)
}

/// Average of the bound over `samples` noise draws.
pub fn evaluate<R: Rng>(params: &ModelParams, batch: &Batch, samples: usize, rng: &mut R) -> Result<Breakdown> {
    let mut acc = Breakdown::default();
    for _ in 0..samples.max(1) {
        let noise = ElboNoise::draw(rng, params, batch.n());
        acc = acc.plus(&elbo_eval(params, batch, &noise, false)?.0);
    }
    Ok(acc.scaled(1.0 / samples.max(1) as f64))
}

/// Pretraining objective: reconstruction with a factorized standard normal
/// prior. Returns the value and gradients for the network tensors and
/// `ln sigma_y^2` (zero elsewhere).
fn pretrain_eval(params: &ModelParams, batch: &Batch, noise: &ElboNoise) -> Result<(f64, Vec<Mat>)> {
    let t = Tape::new();
    let adam = params.adam_tensors()?;
    let nn = params.nets.tensors().len();
    let ng = params.gp_y.len() + params.gp_m.len();
    let active = |i: usize| i < nn || i == nn + ng;
    let pv: Vec<Var> = adam.iter().enumerate().map(|(i, m)| if active(i) { t.param(m.clone()) } else { t.constant(m.clone()) }).collect();
    let nv = params.nets.split_vars(&pv[..nn]);
    let factor = batch.scale.factor();
    let std_kl = |mu: Var, w: Var| t.scale(t.sum(t.sub(t.offset(t.add(t.square(mu), w), -1.0), t.ln(w))), 0.5);
    let y = t.constant(batch.y.clone());
    let m = t.constant(batch.m.clone());
    let (mu_y, w_y) = params.nets.encode_y_tape(&t, &nv, y)?;
    let z_y = reparam(&t, mu_y, w_y, &noise.eps_y);
    let mut obj = t.neg(std_kl(mu_y, w_y));
    let z_m = if params.mask_channel() {
        let (mu_m, w_m) = params.nets.encode_m_tape(&t, &nv, m)?;
        obj = t.sub(obj, std_kl(mu_m, w_m));
        reparam(&t, mu_m, w_m, &noise.eps_m)
    } else {
        t.constant(Mat::zeros(batch.n(), params.nets.latent_m))
    };
    let mean_y = params.nets.decode_y_tape(&t, &nv, z_y, z_m)?;
    obj = t.add(obj, gaussian_tape(&t, y, mean_y, pv[nn + ng], m));
    if params.mask_channel() {
        let p = params.nets.decode_m_tape(&t, &nv, z_y, z_m)?;
        obj = t.add(obj, bernoulli_tape(&t, &batch.m, p));
    }
    let obj = t.scale(obj, factor);
    let g = t.backward(obj);
    Ok((t.item(obj), pv.iter().map(|&p| g.wrt(p)).collect()))
}

// ---------------------------------------------------------------------------
// Initialization

/// `m` distinct rows of `x` over `cols`, in random order.
fn pick_inducing<R: Rng>(x: &Mat, names: &[String], cols: &[String], m: usize, rng: &mut R) -> Result<Mat> {
    let idx = cols
        .iter()
        .map(|c| names.iter().position(|n| n == c).ok_or_else(|| Error::Config(format!("no covariate \"{c}\" for inducing points"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<usize> = (0..x.rows).collect();
    rows.shuffle(rng);
    let mut picked: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let v: Vec<f64> = idx.iter().map(|&j| x[(r, j)]).collect();
        if !picked.contains(&v) {
            picked.push(v);
            if picked.len() == m {
                break;
            }
        }
    }
    let mut s = Mat::zeros(picked.len(), idx.len());
    for (i, v) in picked.iter().enumerate() {
        s.row_slice_mut(i).copy_from_slice(v);
    }
    Ok(s)
}

impl ModelParams {
    /// Fresh parameters for training on `train`.
    pub fn init<R: Rng>(config: &RunConfig, train: &LongitudinalDataset, rng: &mut R) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.normalize()?;
        cfg.check_schema(&train.schema)?;
        train.validate()?;
        if train.num_patients() == 0 {
            return Err(Error::Data("no training patients".into()));
        }
        let standardizer = Standardizer::fit(train);
        let nets = VaeNets::new(
            train.k(),
            cfg.latent_y,
            cfg.latent_m,
            &cfg.encoder_hidden,
            &cfg.decoder_hidden,
            cfg.use_zm_in_decoder && cfg.mask_channel,
            rng,
        )?;
        let mut x = standardizer.apply(train);
        let mut names = train.schema.names();
        let tpp = match cfg.model {
            ModelKind::Llsm => None,
            ModelKind::Llppsm => {
                let (events, groups) = tpp::patient_events(train, cfg.beta_group_column.as_deref())?;
                let st = TppState::init(&events, groups, cfg.tpp_depth, cfg.tpp_inducing, cfg.jitter)?;
                let mut lam = Vec::with_capacity(train.n());
                for ev in &events {
                    lam.extend(tpp::posterior_intensity(&st, &ev.times, &ev.times, ev.group)?);
                }
                x = Mat::hcat(&[&x, &Mat::col(lam)]);
                names.push(INTENSITY.to_string());
                Some(st)
            }
        };
        let mut group = |kernel: AdditiveKernel, dims: usize| -> Result<Vec<LatentGp>> {
            let gv = if kernel.has_shared_part() {
                let s_names = kernel.shared_inputs();
                let s = pick_inducing(&x, &names, &s_names, cfg.inducing, rng)?;
                let view = CovView::new(&s_names, &s);
                let mut h = eval_shared(&kernel, &view, &view)?;
                h.add_diag(relative_jitter(&h, cfg.jitter.max(crate::gp_prior::DEFAULT_JITTER)));
                Some(GPVariational::from_mean_cov(s.clone(), s_names, Mat::zeros(s.rows, 1), &h)?)
            } else {
                None
            };
            Ok((0..dims).map(|_| LatentGp { kernel: kernel.clone(), gv: gv.clone() }).collect())
        };
        let gp_y = group(cfg.kernel_y(), cfg.latent_y)?;
        let gp_m = if cfg.mask_channel { group(cfg.kernel_m(), cfg.latent_m)? } else { Vec::new() };
        let sigma_y2 = vec![cfg.sigma_y2_init; train.k()];
        Ok(ModelParams { config: cfg, standardizer, nets, gp_y, gp_m, sigma_y2, tpp })
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    /// A non-finite bound or a failed factorization; the last good
    /// parameters are returned.
    NonFinite,
}

/// One main-loop epoch; the terms are means over the epoch's batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train: Breakdown,
    pub val_elbo: Option<f64>,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub stop: StopReason,
}

/// Random streams of one training run.
mod stream {
    pub const INIT: u64 = 0;
    pub const BATCHES: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const EVAL: u64 = 3;
}

/// Seeded generator on a numbered stream; distinct streams are independent.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NotPositiveDefinite { .. } | Error::NonFinite(..))
}

/// Pretrain the networks, then maximize the bound: Adam on everything except
/// the inducing posteriors, which take natural-gradient steps. Early stopping
/// watches the validation bound (the training bound without validation
/// patients). Deterministic given `config.seed`.
pub fn train(ds: &LongitudinalDataset, config: &RunConfig) -> Result<TrainOutput> {
    let mut cfg = config.clone();
    cfg.normalize()?;
    ds.validate()?;
    let (train, val) = if cfg.val_fraction > 0.0 && ds.num_patients() >= 2 {
        let (tr, va, _) = split_by_patient(ds, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.seed)?;
        (tr, Some(va))
    } else {
        (ds.clone(), None)
    };
    let mut params = ModelParams::init(&cfg, &train, &mut rng_for(cfg.seed, stream::INIT))?;
    let mut batch_rng = rng_for(cfg.seed, stream::BATCHES);
    let mut noise_rng = rng_for(cfg.seed, stream::NOISE);
    let mut eval_rng = rng_for(cfg.seed, stream::EVAL);
    let (p_total, n_total) = (train.num_patients(), train.n());
    let val_batch = match &val {
        Some(v) => Some(Batch::full(v, &params)?),
        None => None,
    };
    let epoch_batches = |rng: &mut ChaCha8Rng, params: &ModelParams| -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..p_total).collect();
        order.shuffle(rng);
        order
            .chunks(cfg.batch_patients)
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_unstable();
                Batch::new(&train.subset(&c), params, p_total, n_total)
            })
            .collect()
    };

    // Pretraining.
    if cfg.lr > 0.0 && cfg.pretrain_epochs > 0 {
        let mut tensors = params.adam_tensors()?;
        let mut opt = Adam::new(cfg.lr, &tensors);
        let nn = params.nets.tensors().len();
        let ng = params.gp_y.len() + params.gp_m.len();
        let active: Vec<bool> = (0..tensors.len()).map(|i| i < nn || i == nn + ng).collect();
        'pre: for _ in 0..cfg.pretrain_epochs {
            for b in epoch_batches(&mut batch_rng, &params)? {
                let noise = ElboNoise::draw(&mut noise_rng, &params, b.n());
                let (val, grads) = pretrain_eval(&params, &b, &noise)?;
                if !val.is_finite() {
                    log::warn!("non-finite pretraining objective; keeping the networks so far");
                    break 'pre;
                }
                let neg: Vec<Mat> = grads.iter().map(|g| g.scale(-1.0)).collect();
                let before = tensors.clone();
                opt.step(&mut tensors, &neg, Some(&active));
                if params.set_adam_tensors(&tensors).is_err() || !params.is_finite() {
                    params.set_adam_tensors(&before)?;
                    break 'pre;
                }
            }
        }
    }

    // Main loop.
    let mut tensors = params.adam_tensors()?;
    let mut opt = Adam::new(cfg.lr, &tensors);
    let nat_step = cfg.effective_natural_step();
    let mut log_rows = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut stop = StopReason::Completed;
    let mut last_good = params.clone();
    'epochs: for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&mut batch_rng, &params)?;
        let mut acc = Breakdown::default();
        for b in &batches {
            let noise = ElboNoise::draw(&mut noise_rng, &params, b.n());
            let res = elbo_eval(&params, b, &noise, true);
            let (val, grads) = match res {
                Ok((v, Some(g))) if v.elbo.is_finite() && g.adam.iter().all(|m| m.is_finite()) => (v, g),
                Ok(_) => {
                    stop = StopReason::NonFinite;
                    break 'epochs;
                }
                Err(e) if is_numeric_failure(&e) => {
                    log::warn!("stopping at epoch {epoch}: {e}");
                    stop = StopReason::NonFinite;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            acc = acc.plus(&val);
            if cfg.lr == 0.0 {
                continue;
            }
            let neg: Vec<Mat> = grads.adam.iter().map(|g| g.scale(-1.0)).collect();
            opt.step(&mut tensors, &neg, None);
            if let Err(e) = params.set_adam_tensors(&tensors) {
                if is_numeric_failure(&e) {
                    stop = StopReason::NonFinite;
                    break 'epochs;
                }
                return Err(e);
            }
            let gps = params.gp_y.iter_mut().chain(params.gp_m.iter_mut());
            for (g, gi) in gps.zip(&grads.inducing) {
                if let (Some(gv), Some((gm, gh))) = (&mut g.gv, gi) {
                    match natural_gradient_step(gv, gm, gh, nat_step) {
                        Ok(new) => *gv = new,
                        Err(Error::NaturalGradient { halvings }) => {
                            log::warn!("natural-gradient step skipped after {halvings} halvings")
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            if !params.is_finite() {
                stop = StopReason::NonFinite;
                break 'epochs;
            }
        }
        let train_b = acc.scaled(1.0 / batches.len().max(1) as f64);
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let mut val_elbo = None;
        if evaluate_now {
            let score = match &val_batch {
                Some(vb) => match evaluate(&params, vb, cfg.eval_samples, &mut eval_rng) {
                    Ok(b) => b.elbo,
                    Err(e) if is_numeric_failure(&e) => f64::NAN,
                    Err(e) => return Err(e),
                },
                None => train_b.elbo,
            };
            if val_batch.is_some() {
                val_elbo = Some(score);
            }
            if !score.is_finite() {
                log_rows.push(LogRow { epoch, train: train_b, val_elbo });
                stop = StopReason::NonFinite;
                break;
            }
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log_rows.push(LogRow { epoch, train: train_b, val_elbo });
        last_good = params.clone();
        if since_best >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    let params = match (stop, best) {
        (StopReason::NonFinite, _) => last_good,
        (_, Some((_, p))) => p,
        (_, None) => params,
    };
    Ok(TrainOutput { params, log: log_rows, stop })
}
