//! Run configuration: a TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ldaf_core::pacbayes::{CertifyConfig, PosteriorConfig};
use ldaf_core::pipeline::{FeatureKind, PriorConfig, SyntheticKind, SyntheticSpec};
use ldaf_core::quadrature::LossKind;

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub prior: PriorSection,
    pub posterior: PosteriorSection,
    pub certify: CertifySection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// `gaussian_blobs`, `ring`, or `file` (read from `path`).
    pub kind: String,
    pub path: Option<PathBuf>,
    pub m: usize,
    pub dim: usize,
    pub c: usize,
    pub seed: u64,
    pub separation: f64,
    /// Fraction of rows held out for certification; `min(25%, 10000)` rows
    /// when absent.
    pub val_fraction: Option<f64>,
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "gaussian_blobs".into(),
            path: None,
            m: 4000,
            dim: 8,
            c: 3,
            seed: 0,
            separation: 3.0,
            val_fraction: None,
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_nodes: usize,
    #[serde(rename = "T")]
    pub t: f64,
    /// `linear` or `identity`.
    pub feature: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { n_nodes: 10, t: 1.0, feature: "linear".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub train_covariance: bool,
    pub covariance_steps: usize,
}

impl Default for PriorSection {
    fn default() -> Self {
        let d = PriorConfig::default();
        PriorSection {
            steps: d.steps,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            seed: d.seed,
            batch_size: d.batch_size,
            train_covariance: d.train_covariance,
            covariance_steps: d.covariance_steps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorSection {
    pub alternations: usize,
    pub epochs: usize,
    pub lr: f64,
    pub n_points: usize,
    /// Confidence used in the training surrogate; the first certify ε when
    /// absent.
    pub epsilon: Option<f64>,
    pub lambda_tol: f64,
}

impl Default for PosteriorSection {
    fn default() -> Self {
        let d = PosteriorConfig::default();
        PosteriorSection {
            alternations: d.alternations,
            epochs: d.epochs,
            lr: d.lr,
            n_points: d.n_points,
            epsilon: None,
            lambda_tol: d.lambda_tol,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySection {
    pub epsilon: Vec<f64>,
    pub n_points: usize,
    pub padding: bool,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for CertifySection {
    fn default() -> Self {
        let d = CertifyConfig::default();
        CertifySection {
            epsilon: vec![0.01, 0.05],
            n_points: d.n_points,
            padding: d.padding,
            replicates: d.replicates,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub point_counts: Vec<usize>,
    pub mc_reference_points: usize,
    pub n_data: usize,
    pub seed: u64,
    /// `cross_entropy` or `01`.
    pub loss: String,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            point_counts: vec![512, 1024, 2048, 4096, 8192],
            mc_reference_points: 10_000_000,
            n_data: 100,
            seed: 0,
            loss: "cross_entropy".into(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::new("config", msg)
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| invalid(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key {key:?} must be section.key")));
    }
    let section = root
        .entry(parts[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| invalid(format!("{} is not a section", parts[0])))?;
    section.insert(parts[1].into(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new("io", format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| invalid(format!("{}: {}", p.display(), one_line(&e.to_string()))))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| invalid(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.kind == "file" {
            if d.path.is_none() {
                return Err(invalid("dataset.kind = \"file\" needs dataset.path"));
            }
        } else {
            SyntheticKind::parse(&d.kind).map_err(|e| invalid(e.to_string()))?;
            if d.m < d.c || d.c < 2 || d.dim == 0 || !(d.separation > 0.0) {
                return Err(invalid("dataset needs c ≥ 2, m ≥ c, dim ≥ 1 and separation > 0"));
            }
        }
        if let Some(f) = d.val_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid("dataset.val_fraction must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(invalid("dataset.test_fraction must lie in [0, 1)"));
        }
        if self.model.n_nodes < 1 || !(self.model.t > 0.0) || !self.model.t.is_finite() {
            return Err(invalid("model needs n_nodes ≥ 1 and T > 0"));
        }
        FeatureKind::parse(&self.model.feature).map_err(|e| invalid(e.to_string()))?;
        let p = &self.prior;
        if !(p.lr > 0.0) || !(0.0..1.0).contains(&p.momentum) || !(p.weight_decay >= 0.0) || p.batch_size == 0 {
            return Err(invalid("prior needs lr > 0, momentum in [0, 1), weight_decay ≥ 0, batch_size ≥ 1"));
        }
        let q = &self.posterior;
        if q.alternations == 0 || !(q.lr >= 0.0) || q.n_points == 0 || !(q.lambda_tol > 0.0) {
            return Err(invalid("posterior needs alternations ≥ 1, lr ≥ 0, n_points ≥ 1, lambda_tol > 0"));
        }
        if let Some(e) = q.epsilon {
            check_epsilon(e)?;
        }
        let c = &self.certify;
        if c.epsilon.is_empty() {
            return Err(invalid("certify.epsilon must list at least one value"));
        }
        for &e in &c.epsilon {
            check_epsilon(e)?;
        }
        if c.n_points == 0 {
            return Err(invalid("certify.n_points must be positive"));
        }
        let b = &self.bench;
        if b.point_counts.is_empty() || b.point_counts.contains(&0) || b.mc_reference_points == 0 || b.n_data == 0 {
            return Err(invalid("bench needs nonempty positive point_counts, mc_reference_points and n_data"));
        }
        LossKind::parse(&b.loss).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the resolved configuration, recorded as provenance.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let d = &self.dataset;
        Ok(SyntheticSpec {
            kind: SyntheticKind::parse(&d.kind).map_err(|e| invalid(e.to_string()))?,
            dim: d.dim,
            classes: d.c,
            separation: d.separation,
        })
    }

    pub fn prior_config(&self) -> PriorConfig {
        let p = &self.prior;
        PriorConfig {
            n_nodes: self.model.n_nodes,
            t: self.model.t,
            feature: FeatureKind::parse(&self.model.feature).expect("validated"),
            steps: p.steps,
            lr: p.lr,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            seed: p.seed,
            train_covariance: p.train_covariance,
            covariance_steps: p.covariance_steps,
        }
    }

    pub fn posterior_config(&self) -> PosteriorConfig {
        let q = &self.posterior;
        PosteriorConfig {
            alternations: q.alternations,
            epochs: q.epochs,
            lr: q.lr,
            n_points: q.n_points,
            epsilon: q.epsilon.unwrap_or(self.certify.epsilon[0]),
            lambda_tol: q.lambda_tol,
        }
    }

    pub fn certify_config(&self, epsilon: f64) -> CertifyConfig {
        let c = &self.certify;
        CertifyConfig { epsilon, n_points: c.n_points, replicates: c.replicates, padding: c.padding, seed: c.seed }
    }
}

fn check_epsilon(e: f64) -> Result<(), CliError> {
    if e > 0.0 && e < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("epsilon {e} must lie in (0, 1)")))
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
