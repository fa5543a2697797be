//! Run configuration shared by training, prediction and the CLI.

use serde::{Deserialize, Serialize};

use crate::data::{CovariateSchema, ID, INTENSITY, TIME};
use crate::error::{Error, Result};
use crate::kernels::{AdditiveKernel, ComponentKind, KernelComponent};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Latent GPs for the data and the mask.
    #[default]
    Llsm,
    /// Additionally a GP point process over the observation times whose
    /// intensity enters the latent kernels.
    Llppsm,
}

/// `ca(id) + se(time) + ca x se(id x time)`, plus `ca x se(id x intensity)`
/// for the point-process model.
pub fn default_kernel(model: ModelKind) -> Vec<KernelComponent> {
    let mut k = vec![
        KernelComponent::categorical(ID, 1.0),
        KernelComponent::se(&[TIME], 1.0, &[1.0]),
        KernelComponent::product(ID, &[TIME], 1.0, &[1.0]),
    ];
    if model == ModelKind::Llppsm {
        k.push(KernelComponent::product(ID, &[INTENSITY], 1.0, &[1.0]));
    }
    k
}

/// Every field has a default; see [`RunConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Kernel components of every `z^y` dimension; `None` selects
    /// [`default_kernel`] on normalization.
    pub kernel_y: Option<Vec<KernelComponent>>,
    /// Kernel components of every `z^m` dimension.
    pub kernel_m: Option<Vec<KernelComponent>>,
    /// Initial latent noise variance `sigma_z^2`.
    pub latent_noise: f64,
    pub latent_y: usize,
    pub latent_m: usize,
    /// Inducing points of each latent GP.
    pub inducing: usize,
    /// Lag depth `D` of the point process.
    pub tpp_depth: usize,
    /// Inducing lag-locations of the point process.
    pub tpp_inducing: usize,
    pub lr: f64,
    /// Natural-gradient step on `(m_H, H)`; forced to zero when `lr == 0`.
    pub natural_step: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_patients: usize,
    /// Early-stopping patience, in evaluations.
    pub patience: usize,
    pub eval_every: usize,
    /// Fraction of training patients held out for early stopping.
    pub val_fraction: f64,
    /// Monte Carlo samples used for evaluation and prediction.
    pub eval_samples: usize,
    /// Point-process samples per step averaging the KL bounds.
    pub mc_samples_lambda: usize,
    pub seed: u64,
    pub use_zm_in_decoder: bool,
    /// `false` drops `z^m`, the mask likelihood and its KL (missing completely
    /// at random ablation).
    pub mask_channel: bool,
    /// Static categorical covariate selecting the point-process offset `beta`.
    pub beta_group_column: Option<String>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub jitter: f64,
    /// Initial observation variance of every output.
    pub sigma_y2_init: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Llsm,
            kernel_y: None,
            kernel_m: None,
            latent_noise: 1.0,
            latent_y: 32,
            latent_m: 32,
            inducing: 60,
            tpp_depth: 15,
            tpp_inducing: crate::tpp::DEFAULT_INDUCING,
            lr: 1e-3,
            natural_step: 0.1,
            epochs: 1000,
            pretrain_epochs: 50,
            batch_patients: 10,
            patience: 20,
            eval_every: 5,
            val_fraction: 0.1,
            eval_samples: 20,
            mc_samples_lambda: 1,
            seed: 0,
            use_zm_in_decoder: true,
            mask_channel: true,
            beta_group_column: None,
            encoder_hidden: vec![300, 30],
            decoder_hidden: vec![30, 30, 300],
            jitter: crate::gp_prior::DEFAULT_JITTER,
            sigma_y2_init: 1.0,
        }
    }
}

impl RunConfig {
    /// Parse JSON; errors name the offending field.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Config("top level must be an object".into()))?;
        let known = serde_json::to_value(RunConfig::default()).expect("serializable");
        let known = known.as_object().expect("object");
        for (k, val) in obj {
            if !known.contains_key(k) {
                return Err(Error::Config(format!("field `{k}`: unknown field")));
            }
            let single = serde_json::Value::Object([(k.clone(), val.clone())].into_iter().collect());
            if let Err(e) = serde_json::from_value::<RunConfig>(single) {
                return Err(Error::Config(format!("field `{k}`: {e}")));
            }
        }
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalize()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Fill defaulted kernels and lengthscales, then validate.
    pub fn normalize(&mut self) -> Result<()> {
        let model = self.model;
        for (name, comps) in [("kernel_y", &mut self.kernel_y), ("kernel_m", &mut self.kernel_m)] {
            let comps = comps.get_or_insert_with(|| default_kernel(model));
            for (i, c) in comps.iter_mut().enumerate() {
                c.normalize().map_err(|e| Error::Config(format!("field `{name}[{i}]`: {e}")))?;
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_y", self.latent_y),
            ("latent_m", self.latent_m),
            ("inducing", self.inducing),
            ("tpp_depth", self.tpp_depth),
            ("tpp_inducing", self.tpp_inducing),
            ("batch_patients", self.batch_patients),
            ("patience", self.patience),
            ("eval_every", self.eval_every),
            ("eval_samples", self.eval_samples),
            ("mc_samples_lambda", self.mc_samples_lambda),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("field `{name}` must be positive")));
            }
        }
        let reals = [
            ("lr", self.lr, false),
            ("natural_step", self.natural_step, false),
            ("latent_noise", self.latent_noise, true),
            ("jitter", self.jitter, false),
            ("sigma_y2_init", self.sigma_y2_init, true),
        ];
        for (name, v, strict) in reals {
            if !v.is_finite() || v < 0.0 || (strict && v == 0.0) {
                return Err(Error::Config(format!("field `{name}` must be {}, got {v}", if strict { "positive" } else { "non-negative" })));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("field `val_fraction` must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Config("field `encoder_hidden`/`decoder_hidden`: widths must be positive".into()));
        }
        for (name, comps) in self.kernels() {
            let k = AdditiveKernel { components: comps.to_vec(), noise_var: self.latent_noise };
            k.validate().map_err(|e| Error::Config(format!("field `{name}`: {e}")))?;
            let uses_intensity = comps.iter().any(|c| c.inputs.iter().any(|i| i == INTENSITY));
            if uses_intensity && self.model != ModelKind::Llppsm {
                return Err(Error::Config(format!("field `{name}`: \"{INTENSITY}\" is only available with model llppsm")));
            }
            if !uses_intensity && self.model == ModelKind::Llppsm && (name == "kernel_y" || self.mask_channel) {
                return Err(Error::Config(format!("field `{name}`: model llppsm needs a component on \"{INTENSITY}\"")));
            }
        }
        if self.model == ModelKind::Llppsm && self.beta_group_column.as_deref() == Some(ID) {
            return Err(Error::Config("field `beta_group_column` cannot be \"id\"".into()));
        }
        Ok(())
    }

    /// Check every kernel input against the covariates of a dataset.
    pub fn check_schema(&self, schema: &CovariateSchema) -> Result<()> {
        for (name, comps) in self.kernels() {
            for (i, c) in comps.iter().enumerate() {
                for (j, input) in c.inputs.iter().enumerate() {
                    if input == INTENSITY {
                        if j == 0 && c.kind != ComponentKind::Se {
                            return Err(Error::Config(format!("field `{name}[{i}]`: \"{INTENSITY}\" is continuous")));
                        }
                        continue;
                    }
                    let categorical_slot = c.kind != ComponentKind::Se && j == 0;
                    match schema.index_of(input) {
                        None => return Err(Error::Config(format!("field `{name}[{i}]`: unknown covariate \"{input}\""))),
                        Some(_) if schema.is_categorical(input) != categorical_slot => {
                            return Err(Error::Config(format!(
                                "field `{name}[{i}]`: covariate \"{input}\" is {} here",
                                if schema.is_categorical(input) { "categorical but used as continuous" } else { "continuous but used as categorical" }
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        if let Some(col) = &self.beta_group_column {
            if !schema.is_categorical(col) {
                return Err(Error::Config(format!("field `beta_group_column`: \"{col}\" is not a categorical covariate")));
            }
        }
        Ok(())
    }

    fn kernels(&self) -> [(&'static str, Vec<KernelComponent>); 2] {
        [("kernel_y", self.kernel_y_components()), ("kernel_m", self.kernel_m_components())]
    }

    pub fn kernel_y_components(&self) -> Vec<KernelComponent> {
        self.kernel_y.clone().unwrap_or_else(|| default_kernel(self.model))
    }

    pub fn kernel_m_components(&self) -> Vec<KernelComponent> {
        self.kernel_m.clone().unwrap_or_else(|| default_kernel(self.model))
    }

    pub fn kernel_y(&self) -> AdditiveKernel {
        AdditiveKernel { components: self.kernel_y_components(), noise_var: self.latent_noise }
    }

    pub fn kernel_m(&self) -> AdditiveKernel {
        AdditiveKernel { components: self.kernel_m_components(), noise_var: self.latent_noise }
    }

    /// Natural-gradient step actually taken: zero when `lr == 0`.
    pub fn effective_natural_step(&self) -> f64 {
        if self.lr == 0.0 {
            0.0
        } else {
            self.natural_step
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_errors_name_fields() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.kernel_y.as_ref().unwrap(), &default_kernel(ModelKind::Llsm));
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let e = RunConfig::from_json(r#"{"model": "lvae"}"#).unwrap_err();
        assert!(e.to_string().contains("`model`"), "{e}");
        let e = RunConfig::from_json(r#"{"latent_y": 0}"#).unwrap_err();
        assert!(e.to_string().contains("`latent_y`"), "{e}");
        let e = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("`bogus`"), "{e}");
    }
}
