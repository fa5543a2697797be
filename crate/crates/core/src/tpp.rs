//! Gaussian-process temporal point process with a squared link.
//!
//! The latent `z(t)` is a GP over the lag vector `v(t) = (t - t_(1), ...,
//! t - t_(D))`, the elapsed times since the `D` most recent events, with the
//! lag kernel of [`crate::kernels::eval_lag_kernel`]. The intensity is
//! `lambda(t) = (z(t) + beta)^2`, `beta` a per-group offset. A sparse
//! variational posterior `q(u) = N(m, S)` over inducing lag-locations gives
//! Gaussian marginals at any time, and the point-process log-likelihood has
//! a closed-form expectation:
//!
//! * `E[ln lambda(t_n)]` via [`crate::special::expected_log_square`];
//! * `E[int lambda]` via the interval decomposition of the window: between
//!   consecutive events the lags are `t - c_d` for fixed event times `c_d`,
//!   so every kernel integral is a Gaussian integral with an erf closed form.

use std::f64::consts::SQRT_2;
use std::ops::{Add, Mul, Sub};
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, ID};
use crate::error::{Error, Result};
use crate::kernels::{eval_lag_kernel, lag_kernel_tape, lag_kernel_tape_finite, LagKernelParams};
use crate::linalg::{cholesky, relative_jitter, solve_lower, Mat};
use crate::optim::Adam;
use crate::special::expected_log_square;
use crate::tape::{CustomOp, Tape, Var};

pub const DEFAULT_DEPTH: usize = 15;
pub const DEFAULT_INDUCING: usize = 10;
/// Absolute floor on marginal variances, so that `ln lambda` stays finite.
pub const VAR_FLOOR: f64 = 1e-12;

/// Lags `t_i - t_{i-d}`, `d = 1..D`; infinite where the history is shorter.
pub fn build_lags(times: &[f64], depth: usize) -> Result<Mat> {
    if let Some(i) = (1..times.len()).find(|&i| !(times[i] > times[i - 1])) {
        return Err(Error::Data(format!("event times not strictly increasing at position {i}")));
    }
    Ok(Mat::from_fn(times.len(), depth, |i, d| if i > d { times[i] - times[i - d - 1] } else { f64::INFINITY }))
}

/// Lags at arbitrary query times; the history of a query is the events
/// strictly before it.
pub fn lags_at(history: &[f64], query: &[f64], depth: usize) -> Mat {
    Mat::from_fn(query.len(), depth, |i, d| {
        let q = query[i];
        let k = history.partition_point(|&h| h < q);
        if k > d {
            q - history[k - d - 1]
        } else {
            f64::INFINITY
        }
    })
}

/// Event times of one patient with its observation window and `beta` group.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientEvents {
    pub times: Vec<f64>,
    pub window: (f64, f64),
    pub group: usize,
}

/// Events of every patient in `ds`; groups are the levels of the static
/// categorical `beta_column` (one group when `None`). Returns the group count.
pub fn patient_events(ds: &LongitudinalDataset, beta_column: Option<&str>) -> Result<(Vec<PatientEvents>, usize)> {
    let groups = match beta_column {
        None => 1,
        Some(c) => {
            let j = ds.schema.index_of(c).ok_or_else(|| Error::Config(format!("beta_group_column: no column \"{c}\"")))?;
            match ds.schema.levels(j) {
                Some(l) if c != ID && !l.is_empty() => l.len(),
                _ => return Err(Error::Config(format!("beta_group_column: \"{c}\" is not a categorical covariate"))),
            }
        }
    };
    let mut out = Vec::with_capacity(ds.num_patients());
    for p in 0..ds.num_patients() {
        let group = match beta_column {
            None => 0,
            Some(c) => ds
                .static_value(p, c)
                .ok_or_else(|| Error::Config(format!("beta_group_column: \"{c}\" varies within patient {}", ds.patient_ids[p])))?
                as usize,
        };
        out.push(PatientEvents { times: ds.patient_times(p).to_vec(), window: ds.windows[p], group });
    }
    Ok((out, groups))
}

/// Point-process parameters and variational state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TppState {
    pub lag: LagKernelParams,
    /// Offset per group.
    pub beta: Vec<f64>,
    /// Inducing lag-locations, `M x D`.
    pub s: Mat,
    /// Inducing mean, `M x 1`.
    pub m: Mat,
    /// Lower-triangular factor of the inducing covariance `S`.
    pub s_factor: Mat,
    pub jitter: f64,
}

impl TppState {
    pub fn depth(&self) -> usize {
        self.lag.depth()
    }

    pub fn num_inducing(&self) -> usize {
        self.s.rows
    }

    pub fn covariance(&self) -> Mat {
        let l = self.s_factor.tril();
        crate::linalg::matmul_t(&l, false, &l, true)
    }

    pub fn validate(&self) -> Result<()> {
        self.lag.validate()?;
        let (m, d) = (self.s.rows, self.depth());
        if m == 0 || self.s.cols != d || self.m.shape() != (m, 1) || self.s_factor.shape() != (m, m) || self.beta.is_empty() {
            return Err(Error::Shape(format!("inconsistent point-process state (M = {m}, D = {d})")));
        }
        if self.s.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("inducing lag-locations must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Prior-matched state: `m = 0`, `S = K_ss` (plus jitter).
    pub fn prior_matched(lag: LagKernelParams, beta: Vec<f64>, s: Mat, jitter: f64) -> Result<Self> {
        let mut kss = eval_lag_kernel(&lag, &s, &s)?;
        kss.add_diag(relative_jitter(&kss, jitter));
        let m = s.rows;
        let st = TppState { lag, beta, s_factor: cholesky(&kss)?, m: Mat::zeros(m, 1), s, jitter };
        st.validate()?;
        Ok(st)
    }

    /// Data-driven initialization: `beta_g^2 + sum_d gamma_d` matches the
    /// empirical rate, `gamma` takes a fifth of it, lengthscales are the
    /// median observed lags and the inducing locations a uniform grid over
    /// the observed lag range of each dimension.
    pub fn init(events: &[PatientEvents], groups: usize, depth: usize, inducing: usize, jitter: f64) -> Result<Self> {
        if depth == 0 || inducing == 0 || groups == 0 {
            return Err(Error::Config("point process needs D >= 1, M >= 1 and one beta group".into()));
        }
        let mut count = vec![0.0; groups];
        let mut length = vec![0.0; groups];
        let mut lags: Vec<Vec<f64>> = vec![Vec::new(); depth];
        for ev in events {
            if ev.group >= groups {
                return Err(Error::InvalidArgument(format!("beta group {} out of range", ev.group)));
            }
            count[ev.group] += ev.times.len() as f64;
            length[ev.group] += ev.window.1 - ev.window.0;
            let v = build_lags(&ev.times, depth)?;
            for i in 0..v.rows {
                for (d, l) in lags.iter_mut().enumerate() {
                    if v[(i, d)].is_finite() {
                        l.push(v[(i, d)]);
                    }
                }
            }
        }
        let rate_all = count.iter().sum::<f64>() / length.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let rate_all = if rate_all > 0.0 { rate_all } else { 1e-3 };
        let beta: Vec<f64> = (0..groups)
            .map(|g| {
                let r = if length[g] > 0.0 && count[g] > 0.0 { count[g] / length[g] } else { rate_all };
                (0.8 * r).sqrt()
            })
            .collect();
        let gamma = vec![0.2 * rate_all / depth as f64; depth];
        let mut lengthscale = vec![1.0; depth];
        let mut s = Mat::zeros(inducing, depth);
        for (d, l) in lags.iter_mut().enumerate() {
            l.sort_by(|a, b| a.total_cmp(b));
            if l.is_empty() {
                continue;
            }
            let med = l[l.len() / 2];
            if med > 0.0 {
                lengthscale[d] = med;
            }
            let (lo, hi) = (l[0], l[l.len() - 1]);
            for i in 0..inducing {
                let f = if inducing == 1 { 0.5 } else { i as f64 / (inducing - 1) as f64 };
                s[(i, d)] = lo + f * (hi - lo);
            }
        }
        Self::prior_matched(LagKernelParams::new(gamma, lengthscale)?, beta, s, jitter)
    }
}

// ---------------------------------------------------------------------------
// Kernel integrals over the window

/// Piece of a window between consecutive events; `offsets[d]` is the time of
/// the `(d+1)`-th most recent event before `lo`, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub offsets: Vec<Option<f64>>,
}

/// `[w0, t_1], [t_1, t_2], ..., [t_n, w1]`, skipping empty pieces.
pub fn intervals(ev: &PatientEvents, depth: usize) -> Result<Vec<Interval>> {
    let (w0, w1) = ev.window;
    if let (Some(&f), Some(&l)) = (ev.times.first(), ev.times.last()) {
        if f < w0 || l > w1 {
            return Err(Error::InvalidArgument(format!("window [{w0}, {w1}] does not cover the events")));
        }
    }
    if w1 < w0 {
        return Err(Error::InvalidArgument(format!("invalid window [{w0}, {w1}]")));
    }
    build_lags(&ev.times, 1)?;
    let mut bounds = Vec::with_capacity(ev.times.len() + 2);
    bounds.push(w0);
    bounds.extend_from_slice(&ev.times);
    bounds.push(w1);
    let mut out = Vec::new();
    for j in 0..bounds.len() - 1 {
        let (lo, hi) = (bounds[j], bounds[j + 1]);
        if hi <= lo {
            continue;
        }
        // Events strictly before the interval: times[0..j].
        let offsets = (0..depth).map(|d| if j > d { Some(ev.times[j - 1 - d]) } else { None }).collect();
        out.push(Interval { lo, hi, offsets });
    }
    Ok(out)
}

/// `erf(hi) - erf(lo)`, through `erfc` in the tails to avoid cancellation.
fn erf_diff(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 && hi > 0.0 {
        libm::erfc(lo) - libm::erfc(hi)
    } else if lo < 0.0 && hi < 0.0 {
        libm::erfc(-hi) - libm::erfc(-lo)
    } else {
        libm::erf(hi) - libm::erf(lo)
    }
}

const SQRT_PI_2: f64 = 1.253_314_137_315_500_3; // sqrt(pi / 2)
const TWO_OVER_SQRT_PI: f64 = 1.128_379_167_095_512_6;

/// `int_lo^hi exp(-(t-p)^2 / (2 a^2)) dt` and its derivative in `a`.
fn gauss1(p: f64, a: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (x, y) = ((lo - p) / (SQRT_2 * a), (hi - p) / (SQRT_2 * a));
    let e = erf_diff(x, y);
    let v = a * SQRT_PI_2 * e;
    let d = SQRT_PI_2 * e - SQRT_2 * (y * (-y * y).exp() - x * (-x * x).exp());
    (v, d)
}

/// Value with partials in two variables.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    g: [f64; 2],
}

impl Dual {
    fn cst(v: f64) -> Dual {
        Dual { v, g: [0.0; 2] }
    }
    fn var(v: f64, i: usize) -> Dual {
        let mut g = [0.0; 2];
        g[i] = 1.0;
        Dual { v, g }
    }
    fn chain(self, v: f64, d: f64) -> Dual {
        Dual { v, g: [d * self.g[0], d * self.g[1]] }
    }
    fn exp(self) -> Dual {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sqrt(self) -> Dual {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn recip(self) -> Dual {
        self.chain(1.0 / self.v, -1.0 / (self.v * self.v))
    }
    fn scale(self, c: f64) -> Dual {
        self.chain(self.v * c, c)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, g: [self.g[0] + o.g[0], self.g[1] + o.g[1]] }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, g: [self.g[0] - o.g[0], self.g[1] - o.g[1]] }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, g: [self.g[0] * o.v + self.v * o.g[0], self.g[1] * o.v + self.v * o.g[1]] }
    }
}

fn erf_diff_dual(x: Dual, y: Dual) -> Dual {
    let v = erf_diff(x.v, y.v);
    let (ex, ey) = (TWO_OVER_SQRT_PI * (-x.v * x.v).exp(), TWO_OVER_SQRT_PI * (-y.v * y.v).exp());
    Dual { v, g: [ey * y.g[0] - ex * x.g[0], ey * y.g[1] - ex * x.g[1]] }
}

/// Exponent beyond which a product of two bumps is dropped (`e^-80`).
const NEGLIGIBLE: f64 = 80.0;

/// `int_lo^hi exp(-(t-p)^2/(2a^2) - (t-q)^2/(2b^2)) dt` with partials in
/// `(a, b)`; `None` when negligible.
fn gauss2(p: f64, q: f64, a: f64, b: f64, lo: f64, hi: f64) -> Option<Dual> {
    let (u, w) = (a * a, b * b);
    let sum = u + w;
    let expo = (p - q) * (p - q) / (2.0 * sum);
    if expo > NEGLIGIBLE {
        return None;
    }
    // Quick reject when the product bump lies far outside the interval.
    let mu = (p * w + q * u) / sum;
    let sig = (u * w / sum).sqrt();
    let (x, y) = ((lo - mu) / (SQRT_2 * sig), (hi - mu) / (SQRT_2 * sig));
    if (x > 27.0 && y > 27.0) || (x < -27.0 && y < -27.0) {
        return None;
    }
    let (ad, bd) = (Dual::var(a, 0), Dual::var(b, 1));
    let (u, w) = (ad * ad, bd * bd);
    let sum = u + w;
    let inv = sum.recip();
    let pre = ((Dual::cst(-(p - q) * (p - q) / 2.0)) * inv).exp();
    let mu = (w.scale(p) + u.scale(q)) * inv;
    let sig = (u * w * inv).sqrt();
    let k = (sig.scale(SQRT_2)).recip();
    let x = (Dual::cst(lo) - mu) * k;
    let y = (Dual::cst(hi) - mu) * k;
    Some(pre * sig.scale(SQRT_PI_2) * erf_diff_dual(x, y))
}

/// Accumulated kernel integrals over a set of intervals.
struct Integrals {
    /// `Phi`, `M x G`: one column per beta group.
    phi: Mat,
    /// `Psi`, `M x M`.
    psi: Mat,
    dphi_gamma: Vec<Mat>,
    dphi_l: Vec<Mat>,
    dpsi_gamma: Vec<Mat>,
    dpsi_l: Vec<Mat>,
    /// Total length over which lag `d` is finite.
    finite_len: Vec<f64>,
    /// Total window length per group.
    group_len: Vec<f64>,
}

impl Integrals {
    fn zeros(m: usize, d: usize, groups: usize) -> Self {
        Integrals {
            phi: Mat::zeros(m, groups),
            psi: Mat::zeros(m, m),
            dphi_gamma: vec![Mat::zeros(m, groups); d],
            dphi_l: vec![Mat::zeros(m, groups); d],
            dpsi_gamma: vec![Mat::zeros(m, m); d],
            dpsi_l: vec![Mat::zeros(m, m); d],
            finite_len: vec![0.0; d],
            group_len: vec![0.0; groups],
        }
    }

    fn add(&mut self, o: &Integrals) {
        self.phi.add_assign(&o.phi);
        self.psi.add_assign(&o.psi);
        for d in 0..self.finite_len.len() {
            self.dphi_gamma[d].add_assign(&o.dphi_gamma[d]);
            self.dphi_l[d].add_assign(&o.dphi_l[d]);
            self.dpsi_gamma[d].add_assign(&o.dpsi_gamma[d]);
            self.dpsi_l[d].add_assign(&o.dpsi_l[d]);
            self.finite_len[d] += o.finite_len[d];
        }
        for g in 0..self.group_len.len() {
            self.group_len[g] += o.group_len[g];
        }
    }

    /// Copy the upper triangle of the `Psi` tensors to the lower one.
    fn mirror(&mut self) {
        let m = self.psi.rows;
        let fill = |a: &mut Mat| {
            for i in 0..m {
                for j in 0..i {
                    a[(i, j)] = a[(j, i)];
                }
            }
        };
        fill(&mut self.psi);
        self.dpsi_gamma.iter_mut().for_each(fill);
        self.dpsi_l.iter_mut().for_each(fill);
    }

    fn accumulate(&mut self, lag: &LagKernelParams, s: &Mat, iv: &Interval, group: usize) {
        let (lo, hi) = (iv.lo, iv.hi);
        let len = hi - lo;
        self.group_len[group] += len;
        let fin: Vec<(usize, f64)> = iv.offsets.iter().enumerate().filter_map(|(d, c)| c.map(|c| (d, c))).collect();
        for &(d, _) in &fin {
            self.finite_len[d] += len;
        }
        if fin.is_empty() {
            return;
        }
        let (gam, ls) = (&lag.gamma, &lag.lengthscale);
        let m = s.rows;
        for i in 0..m {
            for &(d, c) in &fin {
                let (v, dv) = gauss1(c + s[(i, d)], ls[d], lo, hi);
                self.phi[(i, group)] += gam[d] * v;
                self.dphi_gamma[d][(i, group)] += v;
                self.dphi_l[d][(i, group)] += gam[d] * dv;
            }
            for j in i..m {
                for &(d, c) in &fin {
                    let p = c + s[(i, d)];
                    for &(e, ce) in &fin {
                        let q = ce + s[(j, e)];
                        let Some(r) = gauss2(p, q, ls[d], ls[e], lo, hi) else { continue };
                        let gg = gam[d] * gam[e];
                        self.psi[(i, j)] += gg * r.v;
                        self.dpsi_gamma[d][(i, j)] += gam[e] * r.v;
                        self.dpsi_gamma[e][(i, j)] += gam[d] * r.v;
                        self.dpsi_l[d][(i, j)] += gg * r.g[0];
                        self.dpsi_l[e][(i, j)] += gg * r.g[1];
                    }
                }
            }
        }
    }
}

fn integrals(lag: &LagKernelParams, s: &Mat, patients: &[&PatientEvents], groups: usize) -> Result<Integrals> {
    let (m, d) = (s.rows, lag.depth());
    let parts: Vec<Result<Integrals>> = patients
        .par_iter()
        .map(|ev| {
            let mut acc = Integrals::zeros(m, d, groups);
            for iv in intervals(ev, d)? {
                acc.accumulate(lag, s, &iv, ev.group);
            }
            Ok(acc)
        })
        .collect();
    // Sequential reduction keeps results bit-reproducible.
    let mut total = Integrals::zeros(m, d, groups);
    for p in parts {
        total.add(&p?);
    }
    total.mirror();
    Ok(total)
}

/// `Phi(s_i) = int_lo^hi K(s_i, v(t)) dt` for every row `s_i` of `s`.
pub fn phi_integral(lag: &LagKernelParams, s: &Mat, lo: f64, hi: f64, offsets: &[Option<f64>]) -> Result<Mat> {
    check_interval(lag, s, lo, hi, offsets)?;
    let mut acc = Integrals::zeros(s.rows, lag.depth(), 1);
    acc.accumulate(lag, s, &Interval { lo, hi, offsets: offsets.to_vec() }, 0);
    Ok(acc.phi)
}

/// `Psi(s_i, s_j) = int_lo^hi K(s_i, v(t)) K(v(t), s_j) dt`.
pub fn psi_integral(lag: &LagKernelParams, si: &[f64], sj: &[f64], lo: f64, hi: f64, offsets: &[Option<f64>]) -> Result<f64> {
    let iv = Interval { lo, hi, offsets: offsets.to_vec() };
    let one_way = |a: &[f64], b: &[f64]| -> Result<f64> {
        let s = Mat::from_vec(2, a.len(), a.iter().chain(b).copied().collect());
        check_interval(lag, &s, lo, hi, offsets)?;
        let mut acc = Integrals::zeros(2, lag.depth(), 1);
        acc.accumulate(lag, &s, &iv, 0);
        Ok(acc.psi[(0, 1)])
    };
    // Averaging both orders makes the result exactly symmetric.
    Ok(0.5 * (one_way(si, sj)? + one_way(sj, si)?))
}

fn check_interval(lag: &LagKernelParams, s: &Mat, lo: f64, hi: f64, offsets: &[Option<f64>]) -> Result<()> {
    lag.validate()?;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid interval [{lo}, {hi}]")));
    }
    if s.cols != lag.depth() || offsets.len() != lag.depth() {
        return Err(Error::Shape(format!("need {} lag dimensions", lag.depth())));
    }
    if offsets.iter().flatten().any(|&c| c > lo) {
        return Err(Error::InvalidArgument("lag offsets must precede the interval".into()));
    }
    Ok(())
}

/// Gradients of an integral tensor with respect to `(gamma, lengthscale)`.
struct IntegralOp {
    dgamma: Vec<Mat>,
    dl: Vec<Mat>,
}

impl CustomOp for IntegralOp {
    fn backward(&self, _inputs: &[Rc<Mat>], _output: &Mat, grad: &Mat, needs: &[bool]) -> Vec<Option<Mat>> {
        let contract = |ds: &[Mat]| Mat::row(ds.iter().map(|d| d.frob_dot(grad)).collect());
        vec![needs[0].then(|| contract(&self.dgamma)), needs[1].then(|| contract(&self.dl))]
    }
}

/// `sum_i E[ln (a_i + sqrt(v_i) e)^2]`.
struct LogSquareOp {
    d_mean: Vec<f64>,
    d_var: Vec<f64>,
}

impl CustomOp for LogSquareOp {
    fn backward(&self, _inputs: &[Rc<Mat>], _output: &Mat, grad: &Mat, needs: &[bool]) -> Vec<Option<Mat>> {
        let g = grad.item();
        vec![
            needs[0].then(|| Mat::col(self.d_mean.iter().map(|d| d * g).collect())),
            needs[1].then(|| Mat::col(self.d_var.iter().map(|d| d * g).collect())),
        ]
    }
}

/// Sum of expected log squares on the tape; `a`, `v` are `n x 1`.
pub fn expected_log_square_tape(t: &Tape, a: Var, v: Var) -> Var {
    let (av, vv) = (t.value(a), t.value(v));
    let mut total = 0.0;
    let (mut dm, mut dv) = (Vec::with_capacity(av.len()), Vec::with_capacity(av.len()));
    for (&ai, &vi) in av.data.iter().zip(&vv.data) {
        let r = expected_log_square(ai, vi);
        total += r.value;
        dm.push(r.d_mean);
        dv.push(r.d_var);
    }
    t.custom(Box::new(LogSquareOp { d_mean: dm, d_var: dv }), &[a, v], Mat::scalar(total))
}

// ---------------------------------------------------------------------------
// Tape assembly

/// Differentiable views of the state: `gamma`, `lengthscale` (`1 x D`),
/// `beta` (`1 x G`) and the whitened variational parameters `m_white`
/// (`M x 1`) and `s_white` (`M x M`, only its lower triangle is used).
///
/// With `K_ss = L L^T`, `m = L m_white` and the factor of `S` is `L s_white`.
#[derive(Clone, Copy, Debug)]
pub struct TppVars {
    pub gamma: Var,
    pub lengthscale: Var,
    pub beta: Var,
    pub m_white: Var,
    pub s_white: Var,
}

impl TppVars {
    pub fn constant(t: &Tape, st: &TppState) -> Result<Self> {
        let (mw, sw) = whiten(st)?;
        Ok(TppVars {
            gamma: t.constant(Mat::row(st.lag.gamma.clone())),
            lengthscale: t.constant(Mat::row(st.lag.lengthscale.clone())),
            beta: t.constant(Mat::row(st.beta.clone())),
            m_white: t.constant(mw),
            s_white: t.constant(sw),
        })
    }
}

/// Cholesky factor of the jittered inducing covariance of a state.
fn inducing_factor(st: &TppState) -> Result<Mat> {
    let mut kss = eval_lag_kernel(&st.lag, &st.s, &st.s)?;
    kss.add_diag(relative_jitter(&kss, st.jitter));
    cholesky(&kss)
}

/// Whitened `(m, factor)` of a state.
fn whiten(st: &TppState) -> Result<(Mat, Mat)> {
    let l = inducing_factor(st)?;
    Ok((solve_lower(&l, &st.m), solve_lower(&l, &st.s_factor).tril()))
}

/// Quantities shared by all marginal and integral computations.
pub struct TppPrior {
    lss: Var,
    /// `K_ss^-1 m`.
    alpha: Var,
    /// Masked whitened factor of `S`.
    sw: Var,
    /// Variance jitter added to the marginals (relative, zero for a zero kernel).
    var_jitter: Var,
    m: usize,
}

pub fn tpp_prior(t: &Tape, st: &TppState, v: &TppVars) -> Result<TppPrior> {
    let s = t.constant(st.s.clone());
    let m = st.num_inducing();
    let kss = lag_kernel_tape_finite(t, v.gamma, v.lengthscale, s, s);
    let positive = t.value(kss).mean_diag() > 0.0;
    let (kss, jit) = t.add_relative_jitter(kss, st.jitter);
    let lss = t.cholesky(kss)?;
    let alpha = t.tri_solve(lss, v.m_white, true);
    let mask = Mat::from_fn(m, m, |i, j| if j <= i { 1.0 } else { 0.0 });
    let sw = t.mul(v.s_white, t.constant(mask));
    let var_jitter = if positive { jit } else { t.scalar_const(0.0) };
    Ok(TppPrior { lss, alpha, sw, var_jitter, m })
}

/// Marginal mean and variance (`n x 1` each) of `q(z)` at lag rows `lags`.
pub fn q_marginal_tape(t: &Tape, st: &TppState, v: &TppVars, pr: &TppPrior, lags: &Mat) -> (Var, Var) {
    let n = lags.rows;
    if n == 0 {
        let z = t.constant(Mat::zeros(0, 1));
        return (z, z);
    }
    let s = t.constant(st.s.clone());
    let kvs = lag_kernel_tape(t, v.gamma, v.lengthscale, lags, s); // n x M
    let mu = t.matmul(kvs, pr.alpha);
    let a = t.tri_solve(pr.lss, t.transpose(kvs), false); // L^-1 K_sv
    let b = t.matmul_t(pr.sw, true, a, false);
    let finite = lags.map(|x| if x.is_finite() { 1.0 } else { 0.0 });
    let kvv = t.matmul_t(t.constant(finite), false, v.gamma, true);
    let var = t.add(t.sub(kvv, t.transpose(t.sum_rows(t.square(a)))), t.transpose(t.sum_rows(t.square(b))));
    let var = t.offset(t.add_scalar(var, pr.var_jitter), VAR_FLOOR);
    (mu, var)
}

/// Per-batch point-process terms (sums over the given patients, unscaled).
pub struct TppTerms {
    /// `sum_n E[ln lambda(t_n)]`.
    pub log_intensity: Var,
    /// `sum_p E[int_{T_p} lambda]`.
    pub integral: Var,
    /// Marginal mean / variance of `z` at every event, patients concatenated.
    pub mean: Var,
    pub var: Var,
}

/// One-hot `n x G` group indicator for the events of `patients`.
fn group_onehot(patients: &[&PatientEvents], groups: usize) -> Mat {
    let n: usize = patients.iter().map(|p| p.times.len()).sum();
    let mut oh = Mat::zeros(n, groups);
    let mut r = 0;
    for p in patients {
        for _ in &p.times {
            oh[(r, p.group)] = 1.0;
            r += 1;
        }
    }
    oh
}

pub fn tpp_terms_tape(t: &Tape, st: &TppState, v: &TppVars, pr: &TppPrior, patients: &[&PatientEvents]) -> Result<TppTerms> {
    let groups = st.beta.len();
    if let Some(p) = patients.iter().find(|p| p.group >= groups) {
        return Err(Error::InvalidArgument(format!("beta group {} out of range", p.group)));
    }
    let d = st.depth();
    let lag_rows = patients.iter().map(|p| build_lags(&p.times, d)).collect::<Result<Vec<_>>>()?;
    let lags = Mat::vcat(&lag_rows.iter().collect::<Vec<_>>());
    let lags = if lags.cols == d { lags } else { Mat::zeros(0, d) };
    let (mean, var) = q_marginal_tape(t, st, v, pr, &lags);
    let log_intensity = if lags.rows > 0 {
        let beta_rows = t.matmul_t(t.constant(group_onehot(patients, groups)), false, v.beta, true);
        expected_log_square_tape(t, t.add(mean, beta_rows), var)
    } else {
        t.scalar_const(0.0)
    };
    let integral = integral_tape(t, st, v, pr, patients)?;
    Ok(TppTerms { log_intensity, integral, mean, var })
}

/// `sum_p E[int lambda]`: `beta^2 T + 2 beta int mu + int mu^2 + int sigma^2`.
fn integral_tape(t: &Tape, st: &TppState, v: &TppVars, pr: &TppPrior, patients: &[&PatientEvents]) -> Result<Var> {
    let groups = st.beta.len();
    let ig = integrals(&st.lag, &st.s, patients, groups)?;
    let phi = t.custom(Box::new(IntegralOp { dgamma: ig.dphi_gamma, dl: ig.dphi_l }), &[v.gamma, v.lengthscale], ig.phi);
    let psi = t.custom(Box::new(IntegralOp { dgamma: ig.dpsi_gamma, dl: ig.dpsi_l }), &[v.gamma, v.lengthscale], ig.psi);
    let beta_sq = t.dot(t.square(v.beta), t.constant(Mat::row(ig.group_len)));
    let cross = t.scale(t.matmul(v.beta, t.matmul_t(phi, true, pr.alpha, false)), 2.0);
    let mean_sq = t.matmul_t(pr.alpha, true, t.matmul(psi, pr.alpha), false);
    let prior_var = t.dot(v.gamma, t.constant(Mat::row(ig.finite_len)));
    let eye = t.constant(Mat::identity(pr.m));
    let kinv = t.tri_solve(pr.lss, t.tri_solve(pr.lss, eye, false), true);
    let c = t.tri_solve(pr.lss, pr.sw, true);
    let corr = t.sum(t.mul(psi, t.sub(kinv, t.matmul_t(c, false, c, true))));
    let total = t.add(t.add(t.add(beta_sq, cross), t.add(mean_sq, prior_var)), t.neg(corr));
    Ok(total)
}

/// `KL(q(u) || p(u))`.
pub fn kl_u_tape(t: &Tape, pr: &TppPrior, v: &TppVars) -> Var {
    let tr = t.sum(t.square(pr.sw));
    let quad = t.sum(t.square(v.m_white));
    let logdet_s = t.sum(t.ln(t.square(t.diag(pr.sw))));
    t.scale(t.offset(t.sub(t.add(tr, quad), logdet_s), -(pr.m as f64)), 0.5)
}

// ---------------------------------------------------------------------------
// Plain wrappers

/// Marginal mean and variance of `q(z)` at each lag row.
pub fn q_marginal(st: &TppState, lags: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    st.validate()?;
    if lags.cols != st.depth() {
        return Err(Error::Shape(format!("lag matrix has {} columns, expected {}", lags.cols, st.depth())));
    }
    let t = Tape::new();
    let v = TppVars::constant(&t, st)?;
    let pr = tpp_prior(&t, st, &v)?;
    let (mu, var) = q_marginal_tape(&t, st, &v, &pr, lags);
    Ok((t.value(mu).data.clone(), t.value(var).data.clone()))
}

/// `E[ln (z + beta)^2]` for `z ~ N(mu, var)`.
pub fn expected_log_intensity(mu: f64, var: f64, beta: f64) -> f64 {
    expected_log_square(mu + beta, var.max(VAR_FLOOR)).value
}

/// `E[int lambda]` over the window of one patient.
pub fn expected_integral_term(st: &TppState, ev: &PatientEvents) -> Result<f64> {
    st.validate()?;
    let t = Tape::new();
    let v = TppVars::constant(&t, st)?;
    let pr = tpp_prior(&t, st, &v)?;
    Ok(t.item(integral_tape(&t, st, &v, &pr, &[ev])?))
}

/// Expected point-process log-likelihood `L_T` and `KL(q(u) || p(u))`.
pub fn tpp_elbo(st: &TppState, patients: &[PatientEvents]) -> Result<(f64, f64)> {
    st.validate()?;
    let t = Tape::new();
    let v = TppVars::constant(&t, st)?;
    let pr = tpp_prior(&t, st, &v)?;
    let refs: Vec<&PatientEvents> = patients.iter().collect();
    let terms = tpp_terms_tape(&t, st, &v, &pr, &refs)?;
    let kl = kl_u_tape(&t, &pr, &v);
    Ok((t.item(terms.log_intensity) - t.item(terms.integral), t.item(kl)))
}

/// Posterior mean intensity `(mu + beta)^2 + var` at query times.
pub fn posterior_intensity(st: &TppState, history: &[f64], query: &[f64], group: usize) -> Result<Vec<f64>> {
    let beta = *st.beta.get(group).ok_or_else(|| Error::InvalidArgument(format!("beta group {group} out of range")))?;
    if query.iter().any(|&q| !(q >= 0.0) && !(q.is_finite())) {
        return Err(Error::InvalidArgument("query times must be finite".into()));
    }
    let (mu, var) = q_marginal(st, &lags_at(history, query, st.depth()))?;
    Ok(mu.iter().zip(&var).map(|(m, v)| (m + beta) * (m + beta) + v).collect())
}

/// Settings for fitting the point process on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TppFitConfig {
    pub depth: usize,
    pub inducing: usize,
    pub iterations: usize,
    pub lr: f64,
    pub jitter: f64,
}

impl Default for TppFitConfig {
    fn default() -> Self {
        TppFitConfig { depth: DEFAULT_DEPTH, inducing: DEFAULT_INDUCING, iterations: 300, lr: 0.02, jitter: 1e-6 }
    }
}

/// Log-parameterized trainable tensors of a state, in the order
/// `[ln gamma, ln lengthscale, beta, m_white, s_white]`.
pub fn trainable(st: &TppState) -> Result<Vec<Mat>> {
    let (mw, sw) = whiten(st)?;
    Ok(vec![
        Mat::row(st.lag.gamma.iter().map(|g| g.max(1e-300).ln()).collect()),
        Mat::row(st.lag.lengthscale.iter().map(|l| l.ln()).collect()),
        Mat::row(st.beta.clone()),
        mw,
        sw,
    ])
}

/// Inverse of [`trainable`]: the whitened parameters are mapped back
/// through the factor of the updated kernel.
pub fn set_trainable(st: &mut TppState, p: &[Mat]) -> Result<()> {
    st.lag.gamma = p[0].data.iter().map(|x| x.exp()).collect();
    st.lag.lengthscale = p[1].data.iter().map(|x| x.exp()).collect();
    st.beta = p[2].data.clone();
    let l = inducing_factor(st)?;
    st.m = l.matmul(&p[3]);
    st.s_factor = l.matmul(&p[4].tril());
    Ok(())
}

/// Tape views of the trainable tensors from [`trainable`].
pub fn vars_from_params(t: &Tape, p: &[Var]) -> TppVars {
    TppVars { gamma: t.exp(p[0]), lengthscale: t.exp(p[1]), beta: p[2], m_white: p[3], s_white: p[4] }
}

/// Maximize `L_T - KL(q(u) || p(u))` over all point-process parameters with
/// full-batch Adam. Returns the fitted state and the objective trace.
pub fn fit_tpp(patients: &[PatientEvents], groups: usize, cfg: &TppFitConfig) -> Result<(TppState, Vec<f64>)> {
    let mut st = TppState::init(patients, groups, cfg.depth, cfg.inducing, cfg.jitter)?;
    let refs: Vec<&PatientEvents> = patients.iter().collect();
    let mut params = trainable(&st)?;
    let mut opt = Adam::new(cfg.lr, &params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let t = Tape::new();
        let pv = params.iter().map(|p| t.param(p.clone())).collect::<Vec<_>>();
        let v = vars_from_params(&t, &pv);
        let pr = tpp_prior(&t, &st, &v)?;
        let terms = tpp_terms_tape(&t, &st, &v, &pr, &refs)?;
        let kl = kl_u_tape(&t, &pr, &v);
        let obj = t.sub(t.sub(terms.log_intensity, terms.integral), kl);
        let val = t.item(obj);
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("point-process objective at iteration {it}")));
        }
        trace.push(val);
        let g = t.backward(t.neg(obj));
        let grads: Vec<Mat> = pv.iter().map(|&p| g.wrt(p)).collect();
        opt.step(&mut params, &grads, None);
        set_trainable(&mut st, &params)?;
    }
    Ok((st, trace))
}
