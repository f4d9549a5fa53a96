//! Labelled feature datasets: synthetic generation, split tags and the
//! binary / CSV feature file formats.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LDAF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4;
const TRAILER_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    /// Row-major `rows × dim`.
    features: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl Dataset {
    /// All rows tagged [`Split::Train`] until [`Dataset::assign_splits`].
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!("need dim ≥ 1 and ≥ 2 classes, got {dim}, {classes}")));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::shape(format!("{} features", labels.len() * dim), format!("{}", features.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {classes} classes")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Dataset { dim, classes, features, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Rows of one split as a standalone dataset (all tagged with `split`).
    pub fn subset(&self, split: Split) -> Dataset {
        let idx = self.indices(split);
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: vec![split; idx.len()],
        }
    }

    /// Random partition: `val_fraction` of rows (capped at 10 000 when `None`
    /// defaults to 25%), `test_fraction` for test, the rest for training.
    pub fn assign_splits(&mut self, val_fraction: Option<f64>, test_fraction: f64, seed: u64) -> Result<()> {
        let m = self.len();
        let n_val = match val_fraction {
            Some(f) => fraction_count(f, m)?,
            None => (m / 4).min(10_000),
        };
        let n_test = fraction_count(test_fraction, m)?;
        if n_val + n_test >= m {
            return Err(Error::InvalidArgument(format!(
                "splits leave no training rows ({n_val} validation + {n_test} test of {m})"
            )));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_val {
                Split::Validation
            } else if rank < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    /// Encoded binary feature file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.features.len() * 8 + self.len() * 4 + TRAILER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for x in &self.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..TRAILER_LEN]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(Error::Format("feature file truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rows = usize::try_from(u64_at(8)).map_err(|_| Error::Format("row count too large".into()))?;
        let dim = usize::try_from(u64_at(16)).map_err(|_| Error::Format("dimension too large".into()))?;
        let classes = u32_at(24) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(rows.checked_mul(4)?))
            .and_then(|n| n.checked_add(HEADER_LEN + TRAILER_LEN))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!("feature file has {} bytes, header implies {expected}", bytes.len())));
        }
        let body = &bytes[..expected - TRAILER_LEN];
        if Sha256::digest(body)[..TRAILER_LEN] != bytes[expected - TRAILER_LEN..] {
            return Err(Error::Checksum("feature file checksum mismatch".into()));
        }
        let features = body[HEADER_LEN..HEADER_LEN + rows * dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels = body[HEADER_LEN + rows * dim * 8..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        Dataset::new(dim, classes, features, labels)
    }

    /// Hex SHA-256 of the binary encoding.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 1..=self.dim {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&self.labels[i].to_string());
            for x in self.row(i) {
                s.push(',');
                s.push_str(&x.to_string());
            }
            s.push('\n');
        }
        s
    }

    /// CSV with header `label,f1,…,fd`; the class count is `max label + 1`
    /// unless given.
    pub fn from_csv(text: &str, classes: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"label") || cols.len() < 2 {
            return Err(Error::Format("CSV header must start with `label` followed by feature columns".into()));
        }
        let dim = cols.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(Error::Format(format!(
                    "CSV row {} has {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    dim + 1
                )));
            }
            labels.push(
                fields[0].parse::<usize>().map_err(|_| Error::Format(format!("bad label on row {}", lineno + 2)))?,
            );
            for f in &fields[1..] {
                features.push(
                    f.parse::<f64>().map_err(|_| Error::Format(format!("bad number {f:?} on row {}", lineno + 2)))?,
                );
            }
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
        Dataset::new(dim, classes, features, labels)
    }
}

fn fraction_count(f: f64, m: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside [0,1)")));
    }
    Ok((f * m as f64).round() as usize)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary format when the file starts with the magic bytes, CSV otherwise.
pub fn load_features(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) || path.extension().is_some_and(|e| e != "csv") {
        Dataset::from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("CSV is not UTF-8".into()))?;
        Dataset::from_csv(&text, None)
    }
}

/// Binary format unless the path ends in `.csv`.
pub fn save_features(dataset: &Dataset, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        fs::write(path, dataset.to_csv())?;
    } else {
        fs::write(path, dataset.to_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    GaussianBlobs,
    Ring,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" | "blobs" => Ok(SyntheticKind::GaussianBlobs),
            "ring" => Ok(SyntheticKind::Ring),
            _ => Err(Error::InvalidArgument(format!("unknown dataset kind {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::GaussianBlobs => "gaussian_blobs",
            SyntheticKind::Ring => "ring",
        }
    }
}

/// A fixed data distribution; samples of any size can be drawn from it.
///
/// Blobs: unit-variance isotropic Gaussians whose centres are pairwise
/// `separation` apart (scaled axis directions when `dim ≥ c`, otherwise a
/// regular polygon in the first two coordinates). Ring: class `j` lies near
/// radius `(j + 1)·separation/2` in the first two coordinates with unit noise
/// in every coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || !(self.separation > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid synthetic spec {self:?}")));
        }
        if self.dim < 2 && (self.kind == SyntheticKind::Ring || self.classes > 2) {
            return Err(Error::InvalidArgument("this synthetic layout needs dim ≥ 2".into()));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        let (c, dim, s) = (self.classes, self.dim, self.separation);
        (0..c)
            .map(|j| {
                let mut x = vec![0.0; dim];
                if dim >= c {
                    x[j] = s / std::f64::consts::SQRT_2;
                } else if dim == 1 {
                    x[0] = j as f64 * s;
                } else {
                    let r = s / (2.0 * (std::f64::consts::PI / c as f64).sin());
                    let angle = 2.0 * std::f64::consts::PI * j as f64 / c as f64;
                    x[0] = r * angle.cos();
                    x[1] = r * angle.sin();
                }
                x
            })
            .collect()
    }

    /// `m` rows with labels `i mod c` in shuffled order.
    pub fn sample(&self, m: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if m < self.classes {
            return Err(Error::InvalidArgument(format!("need at least {} rows, got {m}", self.classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..m).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let centers = self.centers();
        let mut features = Vec::with_capacity(m * self.dim);
        for &y in &labels {
            match self.kind {
                SyntheticKind::GaussianBlobs => {
                    for c in &centers[y] {
                        features.push(c + rng.sample::<f64, _>(StandardNormal));
                    }
                }
                SyntheticKind::Ring => {
                    let radius = (y + 1) as f64 * self.separation / 2.0;
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    for k in 0..self.dim {
                        let base = match k {
                            0 => radius * angle.cos(),
                            1 => radius * angle.sin(),
                            _ => 0.0,
                        };
                        features.push(base + rng.sample::<f64, _>(StandardNormal));
                    }
                }
            }
        }
        Dataset::new(self.dim, self.classes, features, labels)
    }
}

/// Reproducible synthetic dataset with default separation 4.
pub fn gen_synthetic(kind: SyntheticKind, m: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec { kind, dim, classes, separation: 4.0 }.sample(m, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        gen_synthetic(SyntheticKind::GaussianBlobs, 30, 4, 3, 1).unwrap()
    }

    #[test]
    fn reproducible_and_balanced() {
        let a = gen_synthetic(SyntheticKind::GaussianBlobs, 301, 5, 3, 9).unwrap();
        let b = gen_synthetic(SyntheticKind::GaussianBlobs, 301, 5, 3, 9).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 3];
        a.labels().iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let r = gen_synthetic(SyntheticKind::Ring, 50, 3, 2, 1).unwrap();
        assert_eq!(r.len(), 50);
        assert!(gen_synthetic(SyntheticKind::GaussianBlobs, 2, 4, 3, 1).is_err());
    }

    #[test]
    fn well_separated_blobs_nearest_centroid() {
        let spec = SyntheticSpec { kind: SyntheticKind::GaussianBlobs, dim: 6, classes: 3, separation: 10.0 };
        let data = spec.sample(3000, 4).unwrap();
        // Centroids estimated from the data itself.
        let mut centroids = vec![vec![0.0; 6]; 3];
        let mut counts = [0.0; 3];
        for i in 0..data.len() {
            counts[data.label(i)] += 1.0;
            for (c, x) in centroids[data.label(i)].iter_mut().zip(data.row(i)) {
                *c += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|x| *x /= n);
        }
        let errors = (0..data.len())
            .filter(|&i| {
                let dist = |c: &Vec<f64>| c.iter().zip(data.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..3).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best != data.label(i)
            })
            .count();
        assert!(errors as f64 / data.len() as f64 <= 1e-3);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let d = small();
        let bytes = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Checksum(_))));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let d = small();
        let mut bytes = d.to_bytes();
        let label_start = HEADER_LEN + d.len() * d.dim() * 8;
        bytes[label_start] = 7;
        let body_len = bytes.len() - TRAILER_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest[..TRAILER_LEN]);
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_round_trip() {
        let d = small();
        let back = Dataset::from_csv(&d.to_csv(), Some(3)).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::from_csv("x,f1\n0,1\n", None).is_err());
        assert!(Dataset::from_csv("label,f1\n0,1,2\n", None).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        for name in ["data.bin", "data.csv"] {
            let p = dir.path().join(name);
            save_features(&d, &p).unwrap();
            assert_eq!(load_features(&p).unwrap(), d);
        }
    }

    #[test]
    fn splits_partition_rows() {
        let mut d = gen_synthetic(SyntheticKind::GaussianBlobs, 100, 2, 2, 3).unwrap();
        d.assign_splits(None, 0.2, 5).unwrap();
        let (tr, va, te) = (d.indices(Split::Train), d.indices(Split::Validation), d.indices(Split::Test));
        assert_eq!((tr.len(), va.len(), te.len()), (55, 25, 20));
        let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(d.subset(Split::Validation).len() == 25);
        assert!(d.assign_splits(Some(0.6), 0.5, 1).is_err());
    }
}
