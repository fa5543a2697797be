//! Dense encoder/decoder networks.
//!
//! Encoders map a (zero-filled) observation or mask row to a diagonal
//! Gaussian over `L` latent dimensions; decoders map latent rows to a Gaussian
//! mean (data) or Bernoulli probabilities (mask). Rows are samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tape::{sigmoid, softplus, Tape, Var};

/// Floor added to every encoder variance.
pub const VAR_EPS: f64 = 1e-6;
/// Decoded mask probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        NetSpec { input, hidden: hidden.to_vec(), output, activation: Activation::Relu }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::Config(format!("network widths must be positive, got {:?}", self.widths())));
        }
        Ok(())
    }
}

/// Multi-layer perceptron with rectifier hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: NetSpec,
    /// `in x out` per layer.
    pub weights: Vec<Mat>,
    /// `1 x out` per layer.
    pub biases: Vec<Mat>,
}

impl Mlp {
    /// He-uniform hidden layers, zero biases and an all-zero output layer.
    pub fn new<R: Rng>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let w = spec.widths();
        let layers = w.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (w[l], w[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let m = if l + 1 == layers {
                Mat::zeros(fan_in, fan_out)
            } else {
                Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
            };
            weights.push(m);
            biases.push(Mat::zeros(1, fan_out));
        }
        Ok(Mlp { spec, weights, biases })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Tensors in the order `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<Mat> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.num_layers()).flat_map(|l| [format!("{prefix}.w{l}"), format!("{prefix}.b{l}")]).collect()
    }

    pub fn set_tensors(&mut self, ts: &[Mat]) -> Result<()> {
        if ts.len() != 2 * self.num_layers() {
            return Err(Error::Shape(format!("{} tensors for a {}-layer network", ts.len(), self.num_layers())));
        }
        for l in 0..self.num_layers() {
            if ts[2 * l].shape() != self.weights[l].shape() || ts[2 * l + 1].shape() != self.biases[l].shape() {
                return Err(Error::Shape(format!("layer {l} tensor shape mismatch")));
            }
            self.weights[l] = ts[2 * l].clone();
            self.biases[l] = ts[2 * l + 1].clone();
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input {
            return Err(Error::Shape(format!("network expects {} inputs, got {cols}", self.spec.input)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x.cols)?;
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let mut z = h.matmul(&self.weights[l]);
            for i in 0..z.rows {
                for (v, b) in z.row_slice_mut(i).iter_mut().zip(&self.biases[l].data) {
                    *v += b;
                }
            }
            if l + 1 < self.num_layers() {
                z = z.map(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    /// Register all tensors as trainable leaves.
    pub fn params(&self, t: &Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|m| t.param(m)).collect()
    }

    /// Register all tensors as constants.
    pub fn constants(&self, t: &Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|m| t.constant(m)).collect()
    }

    /// Forward pass on the tape with tensors `vars` (as from [`Mlp::params`]).
    pub fn forward_tape(&self, t: &Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(t.shape(x).1)?;
        let mut h = x;
        for l in 0..self.num_layers() {
            let z = t.add_row(t.matmul(h, vars[2 * l]), vars[2 * l + 1]);
            h = if l + 1 < self.num_layers() { t.relu(z) } else { z };
        }
        Ok(h)
    }
}

/// Encoder head: split the `2L` outputs into mean and `softplus + VAR_EPS` variance.
pub fn encoder_head(out: &Mat) -> (Mat, Mat) {
    let l = out.cols / 2;
    let mu = out.slice(0, out.rows, 0, l);
    let var = out.slice(0, out.rows, l, 2 * l).map(|v| softplus(v) + VAR_EPS);
    (mu, var)
}

pub fn encoder_head_tape(t: &Tape, out: Var) -> (Var, Var) {
    let (n, c) = t.shape(out);
    let l = c / 2;
    let mu = t.slice(out, 0, n, 0, l);
    let var = t.offset(t.softplus(t.slice(out, 0, n, l, 2 * l)), VAR_EPS);
    (mu, var)
}

/// The four networks of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeNets {
    pub enc_y: Mlp,
    pub enc_m: Mlp,
    pub dec_y: Mlp,
    pub dec_m: Mlp,
    pub latent_y: usize,
    pub latent_m: usize,
    /// Whether the data decoder also sees `z^m`.
    pub use_zm: bool,
}

/// Tape handles for all network tensors, in [`VaeNets::tensors`] order.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub enc_y: Vec<Var>,
    pub enc_m: Vec<Var>,
    pub dec_y: Vec<Var>,
    pub dec_m: Vec<Var>,
}

impl VaeNets {
    pub fn new<R: Rng>(
        k: usize,
        latent_y: usize,
        latent_m: usize,
        enc_hidden: &[usize],
        dec_hidden: &[usize],
        use_zm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if latent_y == 0 || latent_m == 0 {
            return Err(Error::Config("latent dimensions must be positive".into()));
        }
        let dy_in = if use_zm { latent_y + latent_m } else { latent_y };
        Ok(VaeNets {
            enc_y: Mlp::new(NetSpec::new(k, enc_hidden, 2 * latent_y), rng)?,
            enc_m: Mlp::new(NetSpec::new(k, enc_hidden, 2 * latent_m), rng)?,
            dec_y: Mlp::new(NetSpec::new(dy_in, dec_hidden, k), rng)?,
            dec_m: Mlp::new(NetSpec::new(latent_y + latent_m, dec_hidden, k), rng)?,
            latent_y,
            latent_m,
            use_zm,
        })
    }

    fn parts(&self) -> [(&str, &Mlp); 4] {
        [("enc_y", &self.enc_y), ("enc_m", &self.enc_m), ("dec_y", &self.dec_y), ("dec_m", &self.dec_m)]
    }

    pub fn tensors(&self) -> Vec<Mat> {
        self.parts().iter().flat_map(|(_, n)| n.tensors()).collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.parts().iter().flat_map(|(p, n)| n.tensor_names(p)).collect()
    }

    pub fn set_tensors(&mut self, ts: &[Mat]) -> Result<()> {
        let sizes = [self.enc_y.num_layers(), self.enc_m.num_layers(), self.dec_y.num_layers(), self.dec_m.num_layers()];
        if ts.len() != 2 * sizes.iter().sum::<usize>() {
            return Err(Error::Shape("wrong number of network tensors".into()));
        }
        let mut off = 0;
        for (i, s) in sizes.iter().enumerate() {
            let chunk = &ts[off..off + 2 * s];
            match i {
                0 => self.enc_y.set_tensors(chunk)?,
                1 => self.enc_m.set_tensors(chunk)?,
                2 => self.dec_y.set_tensors(chunk)?,
                _ => self.dec_m.set_tensors(chunk)?,
            }
            off += 2 * s;
        }
        Ok(())
    }

    /// Split a flat list of tape handles into the four networks.
    pub fn split_vars(&self, vars: &[Var]) -> NetVars {
        let mut it = vars.iter().copied();
        let mut take = |n: usize| (0..2 * n).map(|_| it.next().expect("too few network vars")).collect::<Vec<_>>();
        NetVars {
            enc_y: take(self.enc_y.num_layers()),
            enc_m: take(self.enc_m.num_layers()),
            dec_y: take(self.dec_y.num_layers()),
            dec_m: take(self.dec_m.num_layers()),
        }
    }

    /// `q(z^y | y^o)` for zero-filled rows `y_filled`.
    pub fn encode_y(&self, y_filled: &Mat) -> Result<(Mat, Mat)> {
        Ok(encoder_head(&self.enc_y.forward(y_filled)?))
    }

    /// `q(z^m | m)`.
    pub fn encode_m(&self, m: &Mat) -> Result<(Mat, Mat)> {
        Ok(encoder_head(&self.enc_m.forward(m)?))
    }

    fn dec_y_input(&self, z_y: &Mat, z_m: Option<&Mat>) -> Result<Mat> {
        match (self.use_zm, z_m) {
            (true, Some(zm)) => Ok(Mat::hcat(&[z_y, zm])),
            (true, None) => Err(Error::Shape("data decoder needs z^m".into())),
            (false, _) => Ok(z_y.clone()),
        }
    }

    /// Gaussian mean of the data.
    pub fn decode_y(&self, z_y: &Mat, z_m: Option<&Mat>) -> Result<Mat> {
        self.dec_y.forward(&self.dec_y_input(z_y, z_m)?)
    }

    /// Bernoulli probabilities of the mask, clamped away from 0 and 1.
    pub fn decode_m(&self, z_y: &Mat, z_m: &Mat) -> Result<Mat> {
        let logits = self.dec_m.forward(&Mat::hcat(&[z_y, z_m]))?;
        Ok(logits.map(|v| sigmoid(v).clamp(PROB_EPS, 1.0 - PROB_EPS)))
    }

    pub fn encode_y_tape(&self, t: &Tape, v: &NetVars, y_filled: Var) -> Result<(Var, Var)> {
        Ok(encoder_head_tape(t, self.enc_y.forward_tape(t, &v.enc_y, y_filled)?))
    }

    pub fn encode_m_tape(&self, t: &Tape, v: &NetVars, m: Var) -> Result<(Var, Var)> {
        Ok(encoder_head_tape(t, self.enc_m.forward_tape(t, &v.enc_m, m)?))
    }

    pub fn decode_y_tape(&self, t: &Tape, v: &NetVars, z_y: Var, z_m: Var) -> Result<Var> {
        let input = if self.use_zm { t.concat_cols(&[z_y, z_m]) } else { z_y };
        self.dec_y.forward_tape(t, &v.dec_y, input)
    }

    pub fn decode_m_tape(&self, t: &Tape, v: &NetVars, z_y: Var, z_m: Var) -> Result<Var> {
        let logits = self.dec_m.forward_tape(t, &v.dec_m, t.concat_cols(&[z_y, z_m]))?;
        Ok(t.clamp(t.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS))
    }
}
