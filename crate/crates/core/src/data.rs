//! Datasets with provenance tags, their on-disk formats, and the synthetic
//! cluster/outlier/duplicate generator.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{read_exact, read_u64};
use crate::error::{Error, Result};
use crate::linalg::{norm, random_orthogonal, sub};
use crate::rng::Rng;

/// Ordered input vectors with optional labels and provenance tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    labels: Option<Vec<i64>>,
    /// `-1` marks examples that belong to no duplicate group.
    duplicate_group: Option<Vec<i64>>,
    outlier_flag: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::DegenerateInput("dataset must contain at least one example".into()))?;
        if dim == 0 {
            return Err(Error::DegenerateInput("dataset vectors must be non-empty".into()));
        }
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::shape("Dataset::new", dim, bad.len()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(Self {
            dim,
            vectors,
            labels: None,
            duplicate_group: None,
            outlier_flag: None,
        })
    }

    fn check_len(&self, len: usize, what: &'static str) -> Result<()> {
        if len != self.vectors.len() {
            return Err(Error::shape(what, self.vectors.len(), len));
        }
        Ok(())
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        self.check_len(labels.len(), "labels")?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_duplicate_groups(mut self, groups: Vec<i64>) -> Result<Self> {
        self.check_len(groups.len(), "duplicate groups")?;
        self.duplicate_group = Some(groups);
        Ok(self)
    }

    pub fn with_outlier_flags(mut self, flags: Vec<bool>) -> Result<Self> {
        self.check_len(flags.len(), "outlier flags")?;
        self.outlier_flag = Some(flags);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn duplicate_groups(&self) -> Option<&[i64]> {
        self.duplicate_group.as_deref()
    }

    pub fn outlier_flags(&self) -> Option<&[bool]> {
        self.outlier_flag.as_deref()
    }

    /// Examples at `indices`, in the given order, tags carried along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::shape("Dataset::subset index", format!("< {}", self.len()), bad));
        }
        let pick = |i: &usize| self.vectors[*i].clone();
        let mut out = Self::new(indices.iter().map(pick).collect())?;
        out.labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        out.duplicate_group = self
            .duplicate_group
            .as_ref()
            .map(|g| indices.iter().map(|&i| g[i]).collect());
        out.outlier_flag = self.outlier_flag.as_ref().map(|f| indices.iter().map(|&i| f[i]).collect());
        Ok(out)
    }

    /// Number of distinct label values; 0 when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| {
            let mut seen: Vec<i64> = l.clone();
            seen.sort_unstable();
            seen.dedup();
            seen.len()
        })
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        let mut flags = 0u16;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.duplicate_group.is_some() {
            flags |= FLAG_DUPLICATES;
        }
        if self.outlier_flag.is_some() {
            flags |= FLAG_OUTLIERS;
        }
        w.write_all(&flags.to_le_bytes())?;
        for v in self.vectors.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in self.labels.iter().flatten() {
            w.write_all(&l.to_le_bytes())?;
        }
        for g in self.duplicate_group.iter().flatten() {
            w.write_all(&g.to_le_bytes())?;
        }
        for f in self.outlier_flag.iter().flatten() {
            w.write_all(&[u8::from(*f)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        read_exact(&mut r, &mut b2)?;
        let flags = u16::from_le_bytes(b2);
        if n == 0 || d == 0 {
            return Err(Error::Corrupt("empty dataset header".into()));
        }
        let mut b8 = [0u8; 8];
        let mut vectors = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                read_exact(&mut r, &mut b8)?;
                row.push(f64::from_le_bytes(b8));
            }
            vectors.push(row);
        }
        let mut read_i64s = |r: &mut BufReader<R>| -> Result<Vec<i64>> {
            (0..n)
                .map(|_| {
                    read_exact(r, &mut b8)?;
                    Ok(i64::from_le_bytes(b8))
                })
                .collect()
        };
        let labels = if flags & FLAG_LABELS != 0 { Some(read_i64s(&mut r)?) } else { None };
        let groups = if flags & FLAG_DUPLICATES != 0 { Some(read_i64s(&mut r)?) } else { None };
        let outliers = if flags & FLAG_OUTLIERS != 0 {
            let mut bytes = vec![0u8; n];
            read_exact(&mut r, &mut bytes)?;
            Some(bytes.into_iter().map(|b| b != 0).collect())
        } else {
            None
        };
        let mut ds = Self::new(vectors)?;
        ds.labels = labels;
        ds.duplicate_group = groups;
        ds.outlier_flag = outliers;
        Ok(ds)
    }

    /// CSV with a header row. Columns named `label`, `duplicate_group` and
    /// `outlier` are tags; every other column is a feature.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        if self.duplicate_group.is_some() {
            header.push("duplicate_group".into());
        }
        if self.outlier_flag.is_some() {
            header.push("outlier".into());
        }
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.vectors[i].iter().map(|v| format!("{v:?}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            if let Some(g) = &self.duplicate_group {
                rec.push(g[i].to_string());
            }
            if let Some(f) = &self.outlier_flag {
                rec.push(u8::from(f[i]).to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let mut feature_cols = Vec::new();
        let (mut label_col, mut dup_col, mut out_col) = (None, None, None);
        for (i, name) in header.iter().enumerate() {
            match name.trim() {
                "label" => label_col = Some(i),
                "duplicate_group" => dup_col = Some(i),
                "outlier" => out_col = Some(i),
                _ => feature_cols.push(i),
            }
        }
        let parse_err = |row: usize, col: usize| Error::Format(format!("row {row}, column {col}: not a number"));
        let (mut vectors, mut labels, mut groups, mut flags) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut v = Vec::with_capacity(feature_cols.len());
            for &c in &feature_cols {
                let field = rec.get(c).ok_or_else(|| parse_err(row, c))?;
                v.push(field.trim().parse::<f64>().map_err(|_| parse_err(row, c))?);
            }
            vectors.push(v);
            if let Some(c) = label_col {
                labels.push(rec.get(c).and_then(|s| s.trim().parse().ok()).ok_or_else(|| parse_err(row, c))?);
            }
            if let Some(c) = dup_col {
                groups.push(rec.get(c).and_then(|s| s.trim().parse().ok()).ok_or_else(|| parse_err(row, c))?);
            }
            if let Some(c) = out_col {
                let f: String = rec.get(c).unwrap_or("").trim().to_ascii_lowercase();
                flags.push(match f.as_str() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(parse_err(row, c)),
                });
            }
        }
        let mut ds = Self::new(vectors)?;
        if label_col.is_some() {
            ds = ds.with_labels(labels)?;
        }
        if dup_col.is_some() {
            ds = ds.with_duplicate_groups(groups)?;
        }
        if out_col.is_some() {
            ds = ds.with_outlier_flags(flags)?;
        }
        Ok(ds)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"SSLI";
const DATASET_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;
const FLAG_DUPLICATES: u16 = 2;
const FLAG_OUTLIERS: u16 = 4;

/// Reads a dataset, choosing CSV for `.csv` paths and the binary format otherwise.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Dataset::read_csv(file)
    } else {
        Dataset::read_binary(file)
    }
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        data.write_csv(file)
    } else {
        data.write_binary(file)
    }
}

fn default_clusters() -> usize {
    4
}
fn default_per_cluster() -> usize {
    100
}
fn default_radius() -> f64 {
    0.1
}
fn default_spread() -> f64 {
    0.3
}
fn default_dim() -> usize {
    16
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Examples per cluster; the dataset holds `clusters * per_cluster`
    /// examples in total, outliers and duplicate copies included.
    #[serde(default = "default_per_cluster")]
    pub per_cluster: usize,
    /// Root-mean-square distance of cluster points from their center.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Root-mean-square distance of outliers from their segment point.
    #[serde(default = "default_spread")]
    pub outlier_spread: f64,
    #[serde(default)]
    pub duplicate_pairs: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: default_clusters(),
            per_cluster: default_per_cluster(),
            radius: default_radius(),
            outlier_fraction: 0.0,
            outlier_spread: default_spread(),
            duplicate_pairs: 0,
            dim: default_dim(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn total(&self) -> usize {
        self.clusters * self.per_cluster
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_fraction * self.total() as f64).round() as usize
    }
}

/// Synthetic dataset plus the cluster centers it was drawn around.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub data: Dataset,
    pub centers: Vec<Vec<f64>>,
}

/// `K` Gaussian clusters around orthonormal centers, outliers scattered
/// along segments between pairs of centers, and exact duplicate pairs of
/// cluster points. Example order is shuffled; tags mark provenance.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    if spec.clusters < 2 {
        return Err(Error::Config("need at least two clusters".into()));
    }
    if spec.dim < spec.clusters {
        return Err(Error::shape(
            "make_synthetic",
            format!("dim >= clusters ({})", spec.clusters),
            format!("dim {}", spec.dim),
        ));
    }
    if !(spec.radius >= 0.0 && spec.radius < spec.outlier_spread) {
        return Err(Error::Config("need 0 <= radius < outlier_spread".into()));
    }
    if !(0.0..1.0).contains(&spec.outlier_fraction) {
        return Err(Error::Config("outlier_fraction must lie in [0, 1)".into()));
    }
    let total = spec.total();
    let n_out = spec.outlier_count();
    let n_dup = spec.duplicate_pairs;
    if n_out + 2 * n_dup > total {
        return Err(Error::Config("too many outliers and duplicates for the dataset size".into()));
    }
    let n_base = total - n_out - n_dup;

    let per_coord = 1.0 / (spec.dim as f64).sqrt();
    let (radius, spread) = (spec.radius * per_coord, spec.outlier_spread * per_coord);
    let mut rng = Rng::derive(spec.seed, 0x5E7);
    let basis = random_orthogonal(spec.dim, &mut rng);
    let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|k| basis.col(k)).collect();

    let mut vectors = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    let mut outlier = Vec::with_capacity(total);
    for i in 0..n_base {
        let k = i % spec.clusters;
        let v: Vec<f64> = centers[k].iter().map(|c| c + radius * rng.normal()).collect();
        vectors.push(v);
        labels.push(k as i64);
        groups.push(-1);
        outlier.push(false);
    }
    let mut base_order: Vec<usize> = (0..n_base).collect();
    rng.shuffle(&mut base_order);
    for (g, &src) in base_order.iter().take(n_dup).enumerate() {
        groups[src] = g as i64;
        vectors.push(vectors[src].clone());
        labels.push(labels[src]);
        groups.push(g as i64);
        outlier.push(false);
    }
    for _ in 0..n_out {
        let a = rng.below(spec.clusters);
        let b = (a + 1 + rng.below(spec.clusters - 1)) % spec.clusters;
        let t = rng.uniform_range(0.3, 0.7);
        let v: Vec<f64> = (0..spec.dim)
            .map(|j| (1.0 - t) * centers[a][j] + t * centers[b][j] + spread * rng.normal())
            .collect();
        vectors.push(v);
        labels.push(if t < 0.5 { a } else { b } as i64);
        groups.push(-1);
        outlier.push(true);
    }

    let mut perm: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut perm);
    let data = Dataset::new(perm.iter().map(|&i| vectors[i].clone()).collect())?
        .with_labels(perm.iter().map(|&i| labels[i]).collect())?
        .with_duplicate_groups(perm.iter().map(|&i| groups[i]).collect())?
        .with_outlier_flags(perm.iter().map(|&i| outlier[i]).collect())?;
    Ok(Synthetic { data, centers })
}

/// Distance from `x` to the closest of `centers`.
pub fn distance_to_nearest(x: &[f64], centers: &[Vec<f64>]) -> f64 {
    centers
        .iter()
        .map(|c| norm(&sub(x, c)))
        .fold(f64::INFINITY, f64::min)
}
