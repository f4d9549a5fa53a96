//! Feature maps, the model bundle and its on-disk layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use super::dataset::{hex, Dataset};
use crate::error::{Error, Result};
use crate::flow::{solve_ldaf, FlowParams, FlowSolver};
use crate::manifold::{lift_raw, project_blocks, AssignmentState, GraphShape};
use crate::par;
use crate::pushforward::{ClassNodePropagator, LowRankCov};
use crate::quadrature::LossKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Identity,
    Linear,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Identity => "identity",
            FeatureKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FeatureKind::Identity),
            "linear" => Ok(FeatureKind::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown feature map {s:?}"))),
        }
    }
}

/// `F(x) = Π₀ x` (input dimension `N`) or `F(x) = Π₀(Wx + β)`.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    Identity { shape: GraphShape },
    Linear { shape: GraphShape, weight: DMatrix<f64>, bias: DVector<f64> },
}

impl FeatureMap {
    pub fn linear(shape: GraphShape, weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != shape.dim() || bias.len() != shape.dim() || weight.ncols() == 0 {
            return Err(Error::shape(
                format!("{} × d weights and bias of length {}", shape.dim(), shape.dim()),
                format!("{:?} and {}", weight.shape(), bias.len()),
            ));
        }
        Ok(FeatureMap::Linear { shape, weight, bias })
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureMap::Identity { .. } => FeatureKind::Identity,
            FeatureMap::Linear { .. } => FeatureKind::Linear,
        }
    }

    pub fn shape(&self) -> GraphShape {
        match self {
            FeatureMap::Identity { shape } | FeatureMap::Linear { shape, .. } => *shape,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { shape } => shape.dim(),
            FeatureMap::Linear { weight, .. } => weight.ncols(),
        }
    }

    /// Tangent vector `F(x) ∈ T₀`.
    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!("input of dimension {}", self.input_dim()), format!("{}", x.len())));
        }
        let shape = self.shape();
        let mut v = match self {
            FeatureMap::Identity { .. } => DVector::from_column_slice(x),
            FeatureMap::Linear { weight, bias, .. } => weight * DVector::from_column_slice(x) + bias,
        };
        project_blocks(v.as_mut_slice(), shape.classes());
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub shape: GraphShape,
    pub features: FeatureMap,
    pub flow: FlowParams,
    pub prior: LowRankCov,
    pub posterior: Option<LowRankCov>,
    pub t: f64,
    pub metadata: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape;
        if self.features.shape() != shape || self.flow.shape() != shape || self.prior.shape() != shape {
            return Err(Error::InvalidArgument("model components disagree on the graph shape".into()));
        }
        if let Some(p) = &self.posterior {
            if p.shape() != shape {
                return Err(Error::InvalidArgument("posterior shape differs from the model".into()));
            }
        }
        let omega = self.flow.omega();
        if (omega - omega.transpose()).amax() > 0.0 {
            return Err(Error::InvalidArgument("coupling matrix is not symmetric".into()));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::InvalidArgument(format!("integration time {} must be positive", self.t)));
        }
        Ok(())
    }

    /// Posterior if one has been trained, otherwise the prior.
    pub fn active_covariance(&self) -> &LowRankCov {
        self.posterior.as_ref().unwrap_or(&self.prior)
    }

    /// Initial state `s₀ = exp_{1_W}(F(x))` and the feature vector.
    pub fn initial_state(&self, x: &[f64]) -> Result<(AssignmentState, DVector<f64>)> {
        let v0 = self.features.apply(x)?;
        let s0 = lift_raw(&AssignmentState::barycenter(self.shape), &v0);
        Ok((s0, v0))
    }

    pub fn propagator(&self, x: &[f64], solver: &FlowSolver) -> Result<ClassNodePropagator> {
        let (s0, v0) = self.initial_state(x)?;
        let shift = v0.rows(0, self.shape.classes()).into_owned();
        ClassNodePropagator::new(&self.flow, &s0, self.t, shift, solver)
    }

    /// Propagators for the given rows of a dataset, in order.
    pub fn propagators(&self, data: &Dataset, rows: &[usize], solver: &FlowSolver) -> Result<Vec<ClassNodePropagator>> {
        if data.dim() != self.features.input_dim() {
            return Err(Error::shape(
                format!("features of dimension {}", self.features.input_dim()),
                format!("{}", data.dim()),
            ));
        }
        par::try_map(rows.len(), |k| self.propagator(data.row(rows[k]), solver))
    }
}

/// Logits `m(T)_I + F(x)_I` of the mean classifier and the predicted class
/// (first maximum).
pub fn forward_deterministic(model: &ModelBundle, x: &[f64], solver: &FlowSolver) -> Result<(DVector<f64>, usize)> {
    let (s0, v0) = model.initial_state(x)?;
    let v = solve_ldaf(&model.flow, &s0, model.t, solver)?;
    let c = model.shape.classes();
    let logits = DVector::from_fn(c, |i, _| v.as_vector()[i] + v0[i]);
    Ok((logits.clone(), argmax(logits.as_slice())))
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = i;
        }
    }
    best
}

/// Misclassification indicator consistent with the stochastic 01 loss
/// (ties count as errors).
pub fn is_error(logits: &[f64], label: usize) -> bool {
    LossKind::ZeroOne.eval(logits, label) > 0.5
}

const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "ldaf-model";

fn write_array(dir: &Path, name: &str, rows: usize, cols: usize, data: &[f64], lines: &mut Vec<String>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let file = format!("{name}.f64");
    fs::write(dir.join(&file), &bytes)?;
    lines.push(format!("array.{name} = {file} {rows}x{cols} sha256:{}", hex(&Sha256::digest(&bytes))));
    Ok(())
}

/// Writes `manifest.txt` and one raw little-endian `f64` file per array.
/// Matrices are stored column-major.
pub fn save_model(model: &ModelBundle, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let mut lines = vec![
        format!("format = {FORMAT}"),
        "version = 1".to_string(),
        format!("nodes = {}", model.shape.nodes()),
        format!("classes = {}", model.shape.classes()),
        format!("t = {}", model.t),
        format!("feature.kind = {}", model.features.kind().as_str()),
        format!("feature.input_dim = {}", model.features.input_dim()),
    ];
    let n = model.shape.dim();
    let k = model.shape.tangent_dim();
    write_array(dir, "omega", n, n, model.flow.omega().as_slice(), &mut lines)?;
    if let FeatureMap::Linear { weight, bias, .. } = &model.features {
        write_array(dir, "feature_weight", weight.nrows(), weight.ncols(), weight.as_slice(), &mut lines)?;
        write_array(dir, "feature_bias", n, 1, bias.as_slice(), &mut lines)?;
    }
    write_array(dir, "prior_d", k, 1, model.prior.d().as_slice(), &mut lines)?;
    write_array(dir, "prior_q", k, 1, model.prior.q().as_slice(), &mut lines)?;
    if let Some(p) = &model.posterior {
        write_array(dir, "posterior_d", k, 1, p.d().as_slice(), &mut lines)?;
        write_array(dir, "posterior_q", k, 1, p.q().as_slice(), &mut lines)?;
    }
    for (key, value) in &model.metadata {
        if key.contains(' ') || value.contains('\n') {
            return Err(Error::InvalidArgument(format!("metadata entry {key:?} cannot be stored")));
        }
        lines.push(format!("meta.{key} = {value}"));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    let digest = hex(&Sha256::digest(text.as_bytes()));
    text.push_str(&format!("manifest_sha256 = {digest}\n"));
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

struct Manifest {
    fields: BTreeMap<String, String>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let (body, last) =
            text.trim_end_matches('\n').rsplit_once('\n').ok_or_else(|| Error::Format("manifest too short".into()))?;
        let recorded = last
            .strip_prefix("manifest_sha256 = ")
            .ok_or_else(|| Error::Format("manifest lacks its hash line".into()))?;
        let body = format!("{body}\n");
        if hex(&Sha256::digest(body.as_bytes())) != recorded {
            return Err(Error::Checksum("manifest hash mismatch".into()));
        }
        let mut fields = BTreeMap::new();
        for line in body.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        Ok(Manifest { fields })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("manifest lacks {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| Error::Format(format!("manifest entry {key} is not a number")))
    }

    fn has_array(&self, name: &str) -> bool {
        self.fields.contains_key(&format!("array.{name}"))
    }

    fn array(&self, dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let spec = self.get(&format!("array.{name}"))?;
        let parts: Vec<&str> = spec.split(' ').collect();
        let [file, dims, hash] = parts[..] else {
            return Err(Error::Format(format!("bad array entry for {name}")));
        };
        if dims != format!("{rows}x{cols}") {
            return Err(Error::Format(format!("array {name} has dimensions {dims}, expected {rows}x{cols}")));
        }
        if file.contains('/') || file.contains('\\') {
            return Err(Error::Format(format!("array file name {file:?} is not local")));
        }
        let bytes = fs::read(dir.join(file))?;
        if bytes.len() != rows * cols * 8 {
            return Err(Error::Format(format!("array {name} has {} bytes, expected {}", bytes.len(), rows * cols * 8)));
        }
        if hash.strip_prefix("sha256:") != Some(hex(&Sha256::digest(&bytes)).as_str()) {
            return Err(Error::Checksum(format!("array {name} hash mismatch")));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_model(dir: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let man = Manifest::parse(&text)?;
    if man.get("format")? != FORMAT || man.get("version")? != "1" {
        return Err(Error::Format("unsupported model format".into()));
    }
    let shape = GraphShape::new(man.num("nodes")?, man.num("classes")?)?;
    let (n, k) = (shape.dim(), shape.tangent_dim());
    let t: f64 = man.num("t")?;
    let omega = DMatrix::from_vec(n, n, man.array(dir, "omega", n, n)?);
    let flow = FlowParams::new(shape, omega)?;
    let features = match FeatureKind::parse(man.get("feature.kind")?)? {
        FeatureKind::Identity => FeatureMap::Identity { shape },
        FeatureKind::Linear => {
            let d: usize = man.num("feature.input_dim")?;
            let w = DMatrix::from_vec(n, d, man.array(dir, "feature_weight", n, d)?);
            let b = DVector::from_vec(man.array(dir, "feature_bias", n, 1)?);
            FeatureMap::linear(shape, w, b)?
        }
    };
    let cov = |prefix: &str| -> Result<LowRankCov> {
        LowRankCov::new(
            shape,
            DVector::from_vec(man.array(dir, &format!("{prefix}_d"), k, 1)?),
            DVector::from_vec(man.array(dir, &format!("{prefix}_q"), k, 1)?),
        )
    };
    let prior = cov("prior")?;
    let posterior = if man.has_array("posterior_d") { Some(cov("posterior")?) } else { None };
    let metadata =
        man.fields.iter().filter_map(|(k, v)| k.strip_prefix("meta.").map(|m| (m.to_string(), v.clone()))).collect();
    let model = ModelBundle { shape, features, flow, prior, posterior, t, metadata };
    model.validate()?;
    Ok(model)
}
