//! Checkpoint directories: `manifest.json` describing named float64 tensors
//! stored little-endian in `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{CovariateSchema, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::ModelParams;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
const DTYPE: &str = "float64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub schema: CovariateSchema,
    /// Number of outputs `K`.
    pub outputs: usize,
    pub standardizer: Standardizer,
    pub tensors: Vec<TensorEntry>,
    pub params_sha256: String,
    pub config_sha256: String,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub schema: CovariateSchema,
}

/// SHA-256 of the canonical JSON of a configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("serializable");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

pub fn save(dir: &Path, params: &ModelParams, schema: &CovariateSchema) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut bytes: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in params.named_tensors() {
        entries.push(TensorEntry { name, shape: [m.rows, m.cols], offset: bytes.len(), dtype: DTYPE.into() });
        for v in &m.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        schema: schema.clone(),
        outputs: params.sigma_y2.len(),
        standardizer: params.standardizer.clone(),
        tensors: entries,
        params_sha256: hex::encode(Sha256::digest(&bytes)),
        config_sha256: config_hash(&params.config),
    };
    let pp = dir.join(PARAMS);
    fs::write(&pp, &bytes).map_err(io(&pp))?;
    let mp = dir.join(MANIFEST);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(io(&mp))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(io(&mp))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mp.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
    }
    if config_hash(&m.config) != m.config_sha256 {
        return Err(Error::Checkpoint("configuration does not match its recorded hash".into()));
    }
    Ok(m)
}

/// Error unless `cfg` is the configuration the checkpoint was trained with.
pub fn verify_config(m: &Manifest, cfg: &RunConfig) -> Result<()> {
    let mut c = cfg.clone();
    c.normalize()?;
    if config_hash(&c) != m.config_sha256 {
        return Err(Error::Checkpoint("configuration differs from the one recorded in the checkpoint".into()));
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let pp = dir.join(PARAMS);
    let bytes = fs::read(&pp).map_err(io(&pp))?;
    if hex::encode(Sha256::digest(&bytes)) != m.params_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its recorded hash", pp.display())));
    }
    let get = |name: &str| -> Result<Mat> {
        let e = m
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from the manifest")))?;
        if e.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("tensor {name} has dtype {}, expected {DTYPE}", e.dtype)));
        }
        let len = e.shape[0] * e.shape[1];
        let end = e.offset + 8 * len;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor {name} extends past the end of {PARAMS}")));
        }
        let data = bytes[e.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Mat::from_vec(e.shape[0], e.shape[1], data))
    };
    let params = ModelParams::from_named_tensors(&m.config, m.standardizer.clone(), m.outputs, &get)?;
    let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if expected.len() != m.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, the configuration implies {}",
            m.tensors.len(),
            expected.len()
        )));
    }
    Ok(Checkpoint { params, schema: m.schema })
}
