//! Synthetic longitudinal image data: rotated/shifted digit glyphs with
//! intensity-dependent (MNAR) pixel dropout, disease-driven box masks, and
//! Poisson or Hawkes observation times.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, write_matrix_csv, ColumnKind, ColumnSpec, CovariateSchema, LongitudinalDataset, ID, TIME};
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const DEFAULT_SIDE: usize = 36;
/// Events allowed in one Hawkes path before the sampler gives up.
pub const MAX_EVENTS: usize = 1_000_000;
/// Attempts at drawing a non-empty event sequence for one patient.
pub const MAX_RESAMPLES: usize = 100;

pub const DISEASE_PRESENCE: &str = "diseasePresence";
pub const DISEASE_TIME: &str = "diseaseTime";
pub const GENDER: &str = "gender";

/// Homogeneous Poisson event times on `[0, t_end]` from exponential gaps.
pub fn sample_poisson<R: Rng>(rate: f64, t_end: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("Poisson rate must be positive, got {rate}")));
    }
    let gaps = Exp::new(rate).expect("positive rate");
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(rng);
        if t > t_end {
            return Ok(out);
        }
        out.push(t);
    }
}

/// Hawkes process with exponential triggering kernel `alpha * exp(-omega * tau)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HawkesConfig {
    pub mu: f64,
    pub alpha: f64,
    pub omega: f64,
    pub t_end: f64,
}

impl Default for HawkesConfig {
    fn default() -> Self {
        HawkesConfig { mu: 0.5, alpha: 0.2, omega: 1.0, t_end: 50.0 }
    }
}

impl HawkesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.alpha >= 0.0 && self.omega > 0.0 && self.t_end >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid Hawkes parameters {self:?}")));
        }
        if self.alpha / self.omega >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "Hawkes process is not stationary: alpha / omega = {} >= 1",
                self.alpha / self.omega
            )));
        }
        Ok(())
    }

    /// Long-run event rate `mu / (1 - alpha / omega)`.
    pub fn stationary_rate(&self) -> f64 {
        self.mu / (1.0 - self.alpha / self.omega)
    }
}

/// Event times by Ogata thinning, together with the conditional intensity
/// `lambda(t_i) = mu + sum_{t_j < t_i} alpha exp(-omega (t_i - t_j))` at each.
pub fn sample_hawkes<R: Rng>(hc: &HawkesConfig, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    hc.validate()?;
    let mut times = Vec::new();
    let mut lambdas = Vec::new();
    let mut t = 0.0;
    // Excitation at the current time; it only decays until the next event,
    // so mu + excitation bounds the intensity ahead.
    let mut excitation = 0.0;
    loop {
        let bound = hc.mu + excitation;
        let w = Exp::new(bound).expect("positive bound").sample(rng);
        t += w;
        if t > hc.t_end {
            return Ok((times, lambdas));
        }
        excitation *= (-hc.omega * w).exp();
        let lambda = hc.mu + excitation;
        if rng.gen::<f64>() * bound <= lambda {
            times.push(t);
            lambdas.push(lambda);
            if times.len() > MAX_EVENTS {
                return Err(Error::InvalidArgument(format!("Hawkes path exceeded {MAX_EVENTS} events")));
            }
            excitation += hc.alpha;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Digit {
    Three,
    Six,
}

/// Base glyphs for the two digits, `side x side` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitSource {
    pub three: Mat,
    pub six: Mat,
}

/// Points along a circular arc (angles in degrees, image y axis pointing down).
fn arc(cx: f64, cy: f64, r: f64, from: f64, to: f64) -> Vec<(f64, f64)> {
    let n = ((to - from).abs().to_radians() * r * 4.0).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| {
            let a = (from + (to - from) * i as f64 / n as f64).to_radians();
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn stroke(side: usize, points: &[(f64, f64)], half_width: f64) -> Mat {
    Mat::from_fn(side, side, |i, j| {
        let d = points
            .iter()
            .map(|&(x, y)| ((j as f64 - x).powi(2) + (i as f64 - y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        (half_width + 0.5 - d).clamp(0.0, 1.0)
    })
}

impl DigitSource {
    /// Procedural glyphs: "3" as two stacked right-facing arcs, "6" as a
    /// loop with a curved stem.
    pub fn builtin(side: usize) -> Result<Self> {
        if side < 8 {
            return Err(Error::InvalidArgument(format!("image side must be at least 8, got {side}")));
        }
        let s = side as f64 / 36.0;
        let w = 1.4 * s;
        let mut three = arc(17.0 * s, 12.5 * s, 5.0 * s, -160.0, 90.0);
        three.extend(arc(17.0 * s, 22.5 * s, 5.0 * s, -90.0, 160.0));
        let mut six = arc(17.0 * s, 22.0 * s, 5.0 * s, 0.0, 360.0);
        six.extend(arc(25.0 * s, 22.0 * s, 13.0 * s, 180.0, 245.0));
        Ok(DigitSource { three: stroke(side, &three, w), six: stroke(side, &six, w) })
    }

    /// Glyphs from a CSV file with two rows ("3" then "6") of `side^2`
    /// comma-separated pixel values in `[0, 1]`, row-major.
    pub fn from_csv(path: &Path, side: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 2 {
            return Err(Error::Data(format!("{}: expected 2 glyph rows, found {}", path.display(), rows.len())));
        }
        let parse = |line: &str| -> Result<Mat> {
            let v = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<f64>>>()?;
            if v.len() != side * side || v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Data(format!("{}: glyphs need {} values in [0, 1]", path.display(), side * side)));
            }
            Ok(Mat::from_vec(side, side, v))
        };
        Ok(DigitSource { three: parse(rows[0])?, six: parse(rows[1])? })
    }

    pub fn get(&self, d: Digit) -> &Mat {
        match d {
            Digit::Three => &self.three,
            Digit::Six => &self.six,
        }
    }

    fn side(&self) -> usize {
        self.three.rows
    }
}

fn bilinear(img: &Mat, r: f64, c: f64) -> f64 {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let px = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= img.rows as f64 || j >= img.cols as f64 {
            0.0
        } else {
            img[(i as usize, j as usize)]
        }
    };
    let mut v = (1.0 - fr) * (1.0 - fc) * px(r0, c0);
    if fc > 0.0 {
        v += (1.0 - fr) * fc * px(r0, c0 + 1.0);
    }
    if fr > 0.0 {
        v += fr * (1.0 - fc) * px(r0 + 1.0, c0);
        if fc > 0.0 {
            v += fr * fc * px(r0 + 1.0, c0 + 1.0);
        }
    }
    v
}

/// The glyph rotated by `rotation_deg` about the image centre, then moved
/// `shift` pixels to the right; bilinear resampling, zero outside.
pub fn render_digit(base: &Mat, shift: f64, rotation_deg: f64) -> Mat {
    let c = (base.rows as f64 - 1.0) / 2.0;
    let (s, co) = rotation_deg.to_radians().sin_cos();
    Mat::from_fn(base.rows, base.cols, |i, j| {
        let (x, y) = (j as f64 - shift - c, i as f64 - c);
        let (sx, sy) = (co * x + s * y, -s * x + co * y);
        bilinear(base, sy + c, sx + c).clamp(0.0, 1.0)
    })
}

/// Mask (1 = observed) with each pixel missing with probability
/// `p_max * pixel`. One uniform is drawn per pixel whatever `p_max` is, so
/// masks from the same stream are nested in `p_max`.
pub fn apply_mnar<R: Rng>(image: &Mat, p_max: f64, rng: &mut R) -> Mat {
    let mut mask = image.clone();
    for v in mask.data.iter_mut() {
        *v = if rng.gen::<f64>() < p_max * *v { 0.0 } else { 1.0 };
    }
    mask
}

/// Side length in pixels of the box for a given driver value.
pub fn box_side(driver: f64, growth: f64, side: usize) -> usize {
    (growth * driver).clamp(0.0, side as f64).round() as usize
}

/// `mask` with a centred square of side `growth * driver` (clamped to the
/// image) marked missing.
pub fn apply_mar_box(mask: &Mat, driver: f64, growth: f64) -> Mat {
    let n = box_side(driver, growth, mask.rows.min(mask.cols));
    let (r0, c0) = ((mask.rows - n) / 2, (mask.cols - n) / 2);
    let mut out = mask.clone();
    for i in r0..r0 + n {
        for j in c0..c0 + n {
            out[(i, j)] = 0.0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `n_p` equally spaced visits; disease onset at an integer visit.
    #[default]
    Regular,
    /// Poisson visits for healthy patients, Hawkes visits for diseased.
    Irregular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub variant: Variant,
    pub patients: usize,
    /// Visits per patient (regular variant).
    pub n_p: usize,
    /// Observation window length (irregular variant).
    pub window: f64,
    pub side: usize,
    /// Largest per-pixel missing probability (reached at intensity 1).
    pub p_max: f64,
    pub disease_fraction: f64,
    /// Degrees per unit of disease time (regular) or of relative intensity
    /// excess `lambda / mu - 1` (irregular).
    pub rotation_scale: f64,
    /// Largest rotation in the irregular variant.
    pub max_rotation: f64,
    /// Rightward shift in pixels per unit time; defaults to 0.3 (regular)
    /// and `6 / window` (irregular).
    pub shift_scale: Option<f64>,
    /// Box side in pixels per unit of driver; defaults to 2 (regular, driver
    /// = disease time) and 8 (irregular, driver = `lambda / mu`).
    pub box_growth: Option<f64>,
    /// Per-patient glyph tilt drawn uniformly from `[-max_tilt, max_tilt]`
    /// degrees, so that patients sharing a digit still differ.
    pub max_tilt: f64,
    /// Inclusive range of the onset visit index (regular variant).
    pub onset_range: (usize, usize),
    pub healthy_rate: f64,
    pub hawkes_mu: f64,
    pub hawkes_alpha: f64,
    pub hawkes_omega: f64,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            variant: Variant::Regular,
            patients: 100,
            n_p: 20,
            window: 50.0,
            side: DEFAULT_SIDE,
            p_max: 0.5,
            disease_fraction: 0.5,
            rotation_scale: 15.0,
            max_rotation: 90.0,
            shift_scale: None,
            box_growth: None,
            max_tilt: 8.0,
            onset_range: (5, 14),
            healthy_rate: 0.1,
            hawkes_mu: 0.5,
            hawkes_alpha: 0.2,
            hawkes_omega: 1.0,
            id_prefix: "p".into(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patients == 0 {
            return bad("patients must be positive".into());
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return bad(format!("p_max must lie in (0, 1], got {}", self.p_max));
        }
        if self.side < 8 {
            return bad(format!("side must be at least 8, got {}", self.side));
        }
        if !(0.0..=1.0).contains(&self.disease_fraction) {
            return bad(format!("disease_fraction must lie in [0, 1], got {}", self.disease_fraction));
        }
        if self.max_tilt < 0.0 || self.max_rotation < 0.0 || !self.rotation_scale.is_finite() {
            return bad("rotation settings must be finite and nonnegative".into());
        }
        if self.shift_scale.is_some_and(|s| !s.is_finite()) || self.box_growth.is_some_and(|g| !(g >= 0.0)) {
            return bad("shift_scale must be finite and box_growth nonnegative".into());
        }
        match self.variant {
            Variant::Regular => {
                if self.n_p == 0 {
                    return bad("n_p must be positive".into());
                }
                if self.onset_range.0 > self.onset_range.1 || self.onset_range.1 >= self.n_p {
                    return bad(format!("onset_range {:?} must be ordered and below n_p", self.onset_range));
                }
            }
            Variant::Irregular => {
                if !(self.window > 0.0) {
                    return bad(format!("window must be positive, got {}", self.window));
                }
                if !(self.healthy_rate > 0.0) {
                    return bad(format!("healthy_rate must be positive, got {}", self.healthy_rate));
                }
                self.hawkes().validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn hawkes(&self) -> HawkesConfig {
        HawkesConfig { mu: self.hawkes_mu, alpha: self.hawkes_alpha, omega: self.hawkes_omega, t_end: self.window }
    }

    fn shift(&self) -> f64 {
        self.shift_scale.unwrap_or(match self.variant {
            Variant::Regular => 0.3,
            Variant::Irregular => 6.0 / self.window,
        })
    }

    fn growth(&self) -> f64 {
        self.box_growth.unwrap_or(match self.variant {
            Variant::Regular => 2.0,
            Variant::Irregular => 8.0,
        })
    }

    pub fn schema(&self) -> CovariateSchema {
        let cat = |name: &str, levels: &[&str]| ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
        };
        let mut columns = vec![
            ColumnSpec { name: TIME.into(), kind: ColumnKind::Continuous },
            cat(ID, &[]),
            cat(DISEASE_PRESENCE, &["0", "1"]),
        ];
        if self.variant == Variant::Regular {
            columns.push(ColumnSpec { name: DISEASE_TIME.into(), kind: ColumnKind::Continuous });
        }
        columns.push(cat(GENDER, &["F", "M"]));
        CovariateSchema { columns }
    }
}

/// Simulated data: the complete images and the masked observations.
#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    /// All pixels observed.
    pub truth: LongitudinalDataset,
    /// Missing pixels are zero in `y` and zero in `m`.
    pub observed: LongitudinalDataset,
    /// Generating intensity at each row (irregular variant; the visit rate
    /// otherwise).
    pub intensity: Vec<f64>,
}

struct PatientSim {
    times: Vec<f64>,
    /// Covariate values besides time and id, in schema order.
    covs: Vec<Vec<f64>>,
    images: Vec<Mat>,
    masks: Vec<Mat>,
    intensity: Vec<f64>,
}

fn patient_rng(seed: u64, p: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(p as u64 + 1);
    r
}

fn simulate_patient(cfg: &SimConfig, digits: &DigitSource, p: usize, diseased: bool) -> Result<PatientSim> {
    let mut rng = patient_rng(cfg.seed, p);
    let male = rng.gen_bool(0.5);
    let base = digits.get(if male { Digit::Six } else { Digit::Three });
    let tilt = if cfg.max_tilt > 0.0 { rng.gen_range(-cfg.max_tilt..=cfg.max_tilt) } else { 0.0 };
    let (shift, growth) = (cfg.shift(), cfg.growth());
    let gender = if male { 1.0 } else { 0.0 };
    let presence = if diseased { 1.0 } else { 0.0 };

    let mut out = PatientSim { times: vec![], covs: vec![], images: vec![], masks: vec![], intensity: vec![] };
    match cfg.variant {
        Variant::Regular => {
            let onset = rng.gen_range(cfg.onset_range.0..=cfg.onset_range.1) as f64;
            for v in 0..cfg.n_p {
                let t = v as f64;
                // Signed time since onset for diseased patients, 0 for healthy.
                let disease_time = if diseased { t - onset } else { 0.0 };
                let elapsed = disease_time.max(0.0);
                let img = render_digit(base, shift * t, tilt + cfg.rotation_scale * elapsed);
                let mut mask = apply_mnar(&img, cfg.p_max, &mut rng);
                if elapsed > 0.0 {
                    mask = apply_mar_box(&mask, elapsed, growth);
                }
                out.times.push(t);
                out.covs.push(vec![presence, disease_time, gender]);
                out.images.push(img);
                out.masks.push(mask);
                out.intensity.push(1.0);
            }
        }
        Variant::Irregular => {
            let hc = cfg.hawkes();
            let mut attempt = 0;
            let (times, lambdas) = loop {
                let (times, lambdas) = if diseased {
                    sample_hawkes(&hc, &mut rng)?
                } else {
                    let ts = sample_poisson(cfg.healthy_rate, cfg.window, &mut rng)?;
                    let n = ts.len();
                    (ts, vec![cfg.healthy_rate; n])
                };
                if !times.is_empty() {
                    break (times, lambdas);
                }
                attempt += 1;
                if attempt >= MAX_RESAMPLES {
                    return Err(Error::Data(format!("patient {p}: no events after {MAX_RESAMPLES} attempts")));
                }
            };
            for (&t, &lam) in times.iter().zip(&lambdas) {
                let rel = lam / hc.mu;
                let rot = if diseased { (cfg.rotation_scale * (rel - 1.0)).clamp(0.0, cfg.max_rotation) } else { 0.0 };
                let img = render_digit(base, shift * t, tilt + rot);
                let mut mask = apply_mnar(&img, cfg.p_max, &mut rng);
                if diseased {
                    mask = apply_mar_box(&mask, rel, growth);
                }
                out.times.push(t);
                out.covs.push(vec![presence, gender]);
                out.images.push(img);
                out.masks.push(mask);
                out.intensity.push(lam);
            }
        }
    }
    Ok(out)
}

/// Simulate a dataset; patients are independent and each uses its own
/// random stream derived from `(seed, patient index)`.
pub fn simulate(cfg: &SimConfig, digits: &DigitSource) -> Result<SimOutput> {
    cfg.validate()?;
    if digits.side() != cfg.side || digits.six.shape() != (cfg.side, cfg.side) || digits.three.cols != cfg.side {
        return Err(Error::Shape(format!("glyphs must be {0}x{0}", cfg.side)));
    }
    let n_diseased = (cfg.disease_fraction * cfg.patients as f64).round() as usize;
    let mut diseased = vec![false; cfg.patients];
    let mut r = patient_rng(cfg.seed, usize::MAX - 1);
    for i in sample_indices(&mut r, cfg.patients, n_diseased) {
        diseased[i] = true;
    }
    let sims: Vec<PatientSim> =
        (0..cfg.patients).into_par_iter().map(|p| simulate_patient(cfg, digits, p, diseased[p])).collect::<Result<_>>()?;

    let schema = cfg.schema();
    let q = schema.columns.len();
    let k = cfg.side * cfg.side;
    let n: usize = sims.iter().map(|s| s.times.len()).sum();
    let (mut y, mut m, mut x) = (Mat::zeros(n, k), Mat::zeros(n, k), Mat::zeros(n, q));
    let (mut t, mut intensity) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut offsets = vec![0];
    let mut windows = Vec::with_capacity(cfg.patients);
    let mut row = 0;
    for (p, s) in sims.iter().enumerate() {
        for (i, &ti) in s.times.iter().enumerate() {
            y.row_slice_mut(row).copy_from_slice(&s.images[i].data);
            m.row_slice_mut(row).copy_from_slice(&s.masks[i].data);
            x[(row, 0)] = ti;
            x[(row, 1)] = p as f64;
            for (j, v) in s.covs[i].iter().enumerate() {
                x[(row, 2 + j)] = *v;
            }
            t.push(ti);
            intensity.push(s.intensity[i]);
            row += 1;
        }
        offsets.push(row);
        windows.push(match cfg.variant {
            Variant::Regular => (0.0, cfg.n_p as f64),
            Variant::Irregular => (0.0, cfg.window),
        });
    }
    let truth = LongitudinalDataset {
        schema,
        y: y.clone(),
        m: Mat::filled(n, k, 1.0),
        x,
        t,
        patient_ids: (0..cfg.patients).map(|p| format!("{}{p:04}", cfg.id_prefix)).collect(),
        patient_offsets: offsets,
        windows,
    };
    truth.validate()?;
    let observed = LongitudinalDataset { y: y.zip_map(&m, |v, o| if o > 0.0 { v } else { 0.0 }), m, ..truth.clone() };
    Ok(SimOutput { truth, observed, intensity })
}

/// Write the observed dataset (with `mask.csv`) plus `ground_truth.csv`.
pub fn emit_simulation(out: &SimOutput, dir: &Path) -> Result<()> {
    crate::data::emit_dataset(&out.observed, dir)?;
    write_matrix_csv(&dir.join("ground_truth.csv"), &out.truth, &out.truth.y, "y_", fmt_f64)
}
