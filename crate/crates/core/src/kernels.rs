//! Additive longitudinal kernels and the lag-vector kernel of the point
//! process.
//!
//! Every kernel has two evaluators: a plain one over `f64` matrices (used for
//! large prediction-time matrices and as a reference) and a tape one whose
//! hyperparameters and continuous inputs are differentiable.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::ID;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    /// Squared exponential over one or more continuous inputs.
    Se,
    /// `variance * [x == x']` over one categorical input.
    Categorical,
    /// Categorical indicator times a squared exponential; the first input is
    /// the categorical one.
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelComponent {
    pub kind: ComponentKind,
    pub inputs: Vec<String>,
    #[serde(default = "one")]
    pub variance: f64,
    /// One lengthscale per continuous input; defaults to 1.
    #[serde(default, alias = "lengthscale", deserialize_with = "de_lengthscales")]
    pub lengthscales: Vec<f64>,
}

fn de_lengthscales<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

impl KernelComponent {
    pub fn se(inputs: &[&str], variance: f64, lengthscales: &[f64]) -> Self {
        KernelComponent {
            kind: ComponentKind::Se,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            variance,
            lengthscales: lengthscales.to_vec(),
        }
    }

    pub fn categorical(input: &str, variance: f64) -> Self {
        KernelComponent { kind: ComponentKind::Categorical, inputs: vec![input.to_string()], variance, lengthscales: vec![] }
    }

    pub fn product(categorical: &str, continuous: &[&str], variance: f64, lengthscales: &[f64]) -> Self {
        let mut inputs = vec![categorical.to_string()];
        inputs.extend(continuous.iter().map(|s| s.to_string()));
        KernelComponent { kind: ComponentKind::Product, inputs, variance, lengthscales: lengthscales.to_vec() }
    }

    pub fn categorical_input(&self) -> Option<&str> {
        match self.kind {
            ComponentKind::Se => None,
            ComponentKind::Categorical | ComponentKind::Product => Some(&self.inputs[0]),
        }
    }

    pub fn continuous_inputs(&self) -> &[String] {
        match self.kind {
            ComponentKind::Se => &self.inputs,
            ComponentKind::Categorical => &[],
            ComponentKind::Product => &self.inputs[1..],
        }
    }

    /// Whether this component involves the patient identifier.
    pub fn uses_id(&self) -> bool {
        self.categorical_input() == Some(ID)
    }

    /// Fill defaulted lengthscales and check arities and signs.
    pub fn normalize(&mut self) -> Result<()> {
        let nc = self.continuous_inputs().len();
        if self.lengthscales.is_empty() {
            self.lengthscales = vec![1.0; nc];
        } else if self.lengthscales.len() == 1 && nc > 1 {
            self.lengthscales = vec![self.lengthscales[0]; nc];
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let ok_arity = match self.kind {
            ComponentKind::Se => !self.inputs.is_empty(),
            ComponentKind::Categorical => self.inputs.len() == 1,
            ComponentKind::Product => self.inputs.len() >= 2,
        };
        if !ok_arity {
            return Err(Error::Kernel(format!("{:?} component has invalid inputs {:?}", self.kind, self.inputs)));
        }
        if !(self.variance >= 0.0) {
            return Err(Error::Kernel(format!("negative variance {} in component {:?}", self.variance, self.inputs)));
        }
        if self.lengthscales.len() != self.continuous_inputs().len() {
            return Err(Error::Kernel(format!(
                "component {:?} has {} lengthscales for {} continuous inputs",
                self.inputs,
                self.lengthscales.len(),
                self.continuous_inputs().len()
            )));
        }
        if self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Kernel(format!("non-positive lengthscale in component {:?}", self.inputs)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveKernel {
    pub components: Vec<KernelComponent>,
    /// Latent noise variance added on the diagonal.
    pub noise_var: f64,
}

impl AdditiveKernel {
    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            c.validate()?;
        }
        if !self.components.iter().any(|c| c.uses_id()) {
            return Err(Error::Kernel("additive kernel needs at least one component on \"id\"".into()));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Kernel(format!("noise variance must be positive, got {}", self.noise_var)));
        }
        Ok(())
    }

    /// Names of all continuous inputs of the non-id components, in order of
    /// first use. These span the inducing-point space.
    pub fn shared_inputs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.components.iter().filter(|c| !c.uses_id()) {
            for name in &c.inputs {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    pub fn has_shared_part(&self) -> bool {
        self.components.iter().any(|c| !c.uses_id())
    }
}

/// A covariate matrix together with its column names.
#[derive(Clone, Copy, Debug)]
pub struct CovView<'a> {
    pub names: &'a [String],
    pub x: &'a Mat,
}

impl<'a> CovView<'a> {
    pub fn new(names: &'a [String], x: &'a Mat) -> Self {
        assert_eq!(names.len(), x.cols, "column names do not match the matrix");
        CovView { names, x }
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Kernel(format!("covariate column \"{name}\" not present")))
    }

    pub fn rows(&self) -> usize {
        self.x.rows
    }
}

fn same_inputs(a: &CovView, b: &CovView) -> bool {
    std::ptr::eq(a.x, b.x) || (a.names == b.names && a.x == b.x)
}

/// One kernel component evaluated between two covariate sets.
pub fn eval_component(c: &KernelComponent, x1: &CovView, x2: &CovView) -> Result<Mat> {
    c.validate()?;
    let cat = match c.categorical_input() {
        Some(name) => Some((x1.col(name)?, x2.col(name)?)),
        None => None,
    };
    let cont: Vec<(usize, usize, f64)> = c
        .continuous_inputs()
        .iter()
        .zip(&c.lengthscales)
        .map(|(name, &l)| Ok((x1.col(name)?, x2.col(name)?, 1.0 / (2.0 * l * l))))
        .collect::<Result<_>>()?;
    let (n1, n2) = (x1.rows(), x2.rows());
    let mut out = Mat::zeros(n1, n2);
    for i in 0..n1 {
        let r1 = x1.x.row_slice(i);
        for j in 0..n2 {
            let r2 = x2.x.row_slice(j);
            if let Some((a, b)) = cat {
                if r1[a] != r2[b] {
                    continue;
                }
            }
            let mut e = 0.0;
            for &(a, b, w) in &cont {
                let d = r1[a] - r2[b];
                e += d * d * w;
            }
            out[(i, j)] = c.variance * (-e).exp();
        }
    }
    Ok(out)
}

/// Sum of the components selected by `keep`.
fn eval_sum(k: &AdditiveKernel, x1: &CovView, x2: &CovView, keep: impl Fn(&KernelComponent) -> bool) -> Result<Mat> {
    let mut out = Mat::zeros(x1.rows(), x2.rows());
    for c in k.components.iter().filter(|c| keep(c)) {
        out.add_assign(&eval_component(c, x1, x2)?);
    }
    Ok(out)
}

/// Sum of all components; `noise_var` is added on the diagonal when the two
/// input sets are identical and `add_noise` is set.
pub fn eval_additive(k: &AdditiveKernel, x1: &CovView, x2: &CovView, add_noise: bool) -> Result<Mat> {
    let mut out = eval_sum(k, x1, x2, |_| true)?;
    if add_noise && same_inputs(x1, x2) {
        out.add_diag(k.noise_var);
    }
    Ok(out)
}

/// Non-id part `K^A` only.
pub fn eval_shared(k: &AdditiveKernel, x1: &CovView, x2: &CovView) -> Result<Mat> {
    eval_sum(k, x1, x2, |c| !c.uses_id())
}

/// Contiguous row ranges of each patient, read off the `id` column. Fails if
/// a patient's rows are not contiguous.
pub fn patient_runs(x: &CovView) -> Result<Vec<std::ops::Range<usize>>> {
    let j = x.col(ID)?;
    let mut runs: Vec<std::ops::Range<usize>> = Vec::new();
    let mut seen: Vec<f64> = Vec::new();
    for i in 0..x.rows() {
        let id = x.x[(i, j)];
        match runs.last_mut() {
            Some(r) if x.x[(r.start, j)] == id => r.end = i + 1,
            _ => {
                if seen.contains(&id) {
                    return Err(Error::Kernel(format!("rows of patient {id} are not contiguous (row {i})")));
                }
                seen.push(id);
                runs.push(i..i + 1);
            }
        }
    }
    Ok(runs)
}

/// Split the covariance of `x` into the shared part `K^A` and the per-patient
/// blocks `K^R_pp + noise * I`.
pub fn eval_split(k: &AdditiveKernel, x: &CovView) -> Result<(Mat, Vec<Mat>)> {
    let runs = patient_runs(x)?;
    let ka = eval_shared(k, x, x)?;
    let mut blocks = Vec::with_capacity(runs.len());
    for r in runs {
        let xb = x.x.slice(r.start, r.end, 0, x.x.cols);
        let v = CovView::new(x.names, &xb);
        let mut b = eval_sum(k, &v, &v, |c| c.uses_id())?;
        b.add_diag(k.noise_var);
        blocks.push(b);
    }
    Ok((ka, blocks))
}

/// Lag-kernel hyperparameters: `gamma[d]`, `lengthscale[d]` for `d < D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagKernelParams {
    pub gamma: Vec<f64>,
    pub lengthscale: Vec<f64>,
}

impl LagKernelParams {
    pub fn new(gamma: Vec<f64>, lengthscale: Vec<f64>) -> Result<Self> {
        let p = LagKernelParams { gamma, lengthscale };
        p.validate()?;
        Ok(p)
    }

    pub fn depth(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_empty() || self.gamma.len() != self.lengthscale.len() {
            return Err(Error::Kernel("lag kernel needs D >= 1 matching gammas and lengthscales".into()));
        }
        if self.gamma.iter().any(|&g| !(g >= 0.0)) || self.lengthscale.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Kernel("lag kernel needs gamma >= 0 and lengthscale > 0".into()));
        }
        Ok(())
    }
}

fn check_lags(v: &Mat) -> Result<()> {
    if v.data.iter().any(|&x| x.is_finite() && x < 0.0 || x.is_nan()) {
        return Err(Error::Kernel("lag matrix contains negative or NaN lags".into()));
    }
    Ok(())
}

/// `sum_d 1(v_d) 1(v'_d) gamma_d exp(-(v_d - v'_d)^2 / (2 l_d^2))`; infinite
/// lags mark absent history.
pub fn eval_lag_kernel(p: &LagKernelParams, v1: &Mat, v2: &Mat) -> Result<Mat> {
    p.validate()?;
    let d = p.depth();
    if v1.cols != d || v2.cols != d {
        return Err(Error::Shape(format!("lag matrices need {d} columns")));
    }
    check_lags(v1)?;
    check_lags(v2)?;
    let w: Vec<f64> = p.lengthscale.iter().map(|l| 1.0 / (2.0 * l * l)).collect();
    Ok(Mat::from_fn(v1.rows, v2.rows, |i, j| {
        let (a, b) = (v1.row_slice(i), v2.row_slice(j));
        (0..d)
            .filter(|&k| a[k].is_finite() && b[k].is_finite())
            .map(|k| {
                let dd = a[k] - b[k];
                p.gamma[k] * (-dd * dd * w[k]).exp()
            })
            .sum()
    }))
}

// ---------------------------------------------------------------------------
// Tape evaluation

/// Differentiable hyperparameters of one component: variance and
/// lengthscales as 1x1 nodes.
#[derive(Clone, Debug)]
pub struct ComponentVars {
    pub variance: Var,
    pub lengthscales: Vec<Var>,
}

/// Differentiable hyperparameters of an [`AdditiveKernel`].
#[derive(Clone, Debug)]
pub struct KernelVars {
    pub components: Vec<ComponentVars>,
    pub noise_var: Var,
}

impl KernelVars {
    /// Constant nodes holding the values of `k`.
    pub fn constant(t: &Tape, k: &AdditiveKernel) -> Self {
        KernelVars {
            components: k
                .components
                .iter()
                .map(|c| ComponentVars {
                    variance: t.scalar_const(c.variance),
                    lengthscales: c.lengthscales.iter().map(|&l| t.scalar_const(l)).collect(),
                })
                .collect(),
            noise_var: t.scalar_const(k.noise_var),
        }
    }
}

/// Named column nodes (each `n x 1`) of a covariate set on the tape.
#[derive(Clone, Debug)]
pub struct TapeCols {
    pub cols: HashMap<String, Var>,
    pub rows: usize,
}

impl TapeCols {
    /// Constant columns taken from a plain covariate matrix.
    pub fn constant(t: &Tape, x: &CovView) -> Self {
        let cols = x.names.iter().enumerate().map(|(j, n)| (n.clone(), t.constant(Mat::col(x.x.column(j))))).collect();
        TapeCols { cols, rows: x.rows() }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.cols.get(name).copied().ok_or_else(|| Error::Kernel(format!("covariate column \"{name}\" not present")))
    }

    /// Rows `r0..r1` of every column.
    pub fn slice_rows(&self, t: &Tape, r0: usize, r1: usize) -> Self {
        TapeCols { cols: self.cols.iter().map(|(n, &v)| (n.clone(), t.slice_rows(v, r0, r1))).collect(), rows: r1 - r0 }
    }
}

/// Component `c` with hyperparameters `cv` between two column sets.
pub fn component_tape(t: &Tape, c: &KernelComponent, cv: &ComponentVars, x1: &TapeCols, x2: &TapeCols) -> Result<Var> {
    let (n1, n2) = (x1.rows, x2.rows);
    let mut expo: Option<Var> = None;
    for (name, &l) in c.continuous_inputs().iter().zip(&cv.lengthscales) {
        let d = t.sq_dist(x1.get(name)?, x2.get(name)?);
        let l2 = t.scale(t.square(l), 2.0);
        let term = t.mul_scalar(d, t.recip(l2));
        expo = Some(match expo {
            Some(e) => t.add(e, term),
            None => term,
        });
    }
    let mut k = match expo {
        Some(e) => t.exp(t.neg(e)),
        None => t.constant(Mat::filled(n1, n2, 1.0)),
    };
    if let Some(name) = c.categorical_input() {
        let (a, b) = (t.value(x1.get(name)?), t.value(x2.get(name)?));
        let ind = Mat::from_fn(n1, n2, |i, j| if a.data[i] == b.data[j] { 1.0 } else { 0.0 });
        k = t.mul(k, t.constant(ind));
    }
    Ok(t.mul_scalar(k, cv.variance))
}

/// Sum over the components selected by `keep`; `None` if none is selected.
pub fn sum_tape(
    t: &Tape,
    k: &AdditiveKernel,
    kv: &KernelVars,
    x1: &TapeCols,
    x2: &TapeCols,
    keep: impl Fn(&KernelComponent) -> bool,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (c, cv) in k.components.iter().zip(&kv.components) {
        if !keep(c) {
            continue;
        }
        let v = component_tape(t, c, cv, x1, x2)?;
        acc = Some(match acc {
            Some(a) => t.add(a, v),
            None => v,
        });
    }
    Ok(acc)
}

/// Differentiable lag kernel: `gamma` and `lengthscale` are `1 x D` nodes,
/// `v1` (`n x D`) holds lags with infinities, `v2` (`m x D`) is finite (the
/// inducing lag-locations) and may be a trainable node.
pub fn lag_kernel_tape(t: &Tape, gamma: Var, lengthscale: Var, v1: &Mat, v2: Var) -> Var {
    let d = v1.cols;
    let n = v1.rows;
    let mut acc: Option<Var> = None;
    for k in 0..d {
        // Zero out infinite lags and mask their rows afterwards.
        let finite: Vec<f64> = (0..n).map(|i| if v1[(i, k)].is_finite() { 1.0 } else { 0.0 }).collect();
        if finite.iter().all(|&f| f == 0.0) {
            continue;
        }
        let col = t.constant(Mat::col((0..n).map(|i| if finite[i] == 1.0 { v1[(i, k)] } else { 0.0 }).collect()));
        let s = t.slice_cols(v2, k, k + 1);
        let dist = t.sq_dist(col, s);
        let l = t.slice_cols(lengthscale, k, k + 1);
        let g = t.slice_cols(gamma, k, k + 1);
        let w = t.recip(t.scale(t.square(l), 2.0));
        let e = t.exp(t.neg(t.mul_scalar(dist, w)));
        let e = t.mul_col(e, t.constant(Mat::col(finite)));
        let term = t.mul_scalar(e, g);
        acc = Some(match acc {
            Some(a) => t.add(a, term),
            None => term,
        });
    }
    let m = t.shape(v2).0;
    acc.unwrap_or_else(|| t.constant(Mat::zeros(n, m)))
}

/// Lag kernel between two sets of finite lag-locations (both nodes).
pub fn lag_kernel_tape_finite(t: &Tape, gamma: Var, lengthscale: Var, s1: Var, s2: Var) -> Var {
    let d = t.shape(s1).1;
    let mut acc: Option<Var> = None;
    for k in 0..d {
        let a = t.slice_cols(s1, k, k + 1);
        let b = t.slice_cols(s2, k, k + 1);
        let dist = t.sq_dist(a, b);
        let l = t.slice_cols(lengthscale, k, k + 1);
        let g = t.slice_cols(gamma, k, k + 1);
        let w = t.recip(t.scale(t.square(l), 2.0));
        let e = t.exp(t.neg(t.mul_scalar(dist, w)));
        let term = t.mul_scalar(e, g);
        acc = Some(match acc {
            Some(x) => t.add(x, term),
            None => term,
        });
    }
    acc.expect("lag kernel needs D >= 1")
}
