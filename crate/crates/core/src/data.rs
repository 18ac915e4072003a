//! Datasets: delimited-text ingestion, feature standardization and
//! synthetic problem generators.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward_unchecked, ParamVector, Tanh, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// `P` paired samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    n: usize,
    m: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    /// Per-input-column statistics recorded by [`standardize`].
    pub feature_stats: Option<Vec<ColumnStats>>,
    /// Generating network for teacher problems.
    pub teacher: Option<ParamVector>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, n: usize, m: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("input and target dimensions must be positive".into()));
        }
        if !inputs.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch { what: "input matrix", expected: n, got: inputs.len() % n });
        }
        let p = inputs.len() / n;
        if targets.len() != p * m {
            return Err(Error::DimensionMismatch { what: "target matrix", expected: p * m, got: targets.len() });
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains NaN or infinite values".into()));
        }
        Ok(Self { name: name.into(), n, m, inputs, targets, feature_stats: None, teacher: None })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.n
    }

    pub fn output_dim(&self) -> usize {
        self.m
    }

    pub fn input(&self, p: usize) -> &[f64] {
        &self.inputs[p * self.n..(p + 1) * self.n]
    }

    pub fn target(&self, p: usize) -> &[f64] {
        &self.targets[p * self.m..(p + 1) * self.m]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Samples `p` in `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = indices.iter().flat_map(|&p| self.input(p).to_vec()).collect();
        let targets = indices.iter().flat_map(|&p| self.target(p).to_vec()).collect();
        let mut d = Dataset::new(self.name.clone(), self.n, self.m, inputs, targets)?;
        d.feature_stats = self.feature_stats.clone();
        Ok(d)
    }
}

/// Which columns of a delimited file hold targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetColumns {
    /// Zero-based column indices.
    Indices(Vec<usize>),
    /// The last `k` columns.
    LastK(usize),
}

impl std::str::FromStr for TargetColumns {
    type Err = String;

    /// Accepts `last-k` (e.g. `last-1`) or a comma list of indices.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(k) = s.strip_prefix("last-") {
            return k.parse().map(TargetColumns::LastK).map_err(|_| format!("bad target spec `{s}`"));
        }
        s.split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(TargetColumns::Indices)
            .map_err(|_| format!("bad target spec `{s}`"))
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub has_header: bool,
    pub targets: TargetColumns,
    pub delimiter: u8,
    /// One-hot encode every target column, even numeric ones.
    pub force_one_hot: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { has_header: false, targets: TargetColumns::LastK(1), delimiter: b',', force_one_hot: false }
    }
}

/// Reads a delimited numeric table. Non-numeric target columns (or all of
/// them with `force_one_hot`) are one-hot encoded over their sorted distinct
/// labels; non-numeric features are a parse error.
pub fn load_delimited(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .delimiter(opts.delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);

    let mut rows: Vec<(u64, Vec<String>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse { path: path.to_path_buf(), line, message: e.to_string() }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    let Some((first_line, first)) = rows.first() else {
        return Err(Error::Parse { path: path.to_path_buf(), line: 0, message: "no data rows".into() });
    };
    let width = first.len();
    for (line, row) in &rows {
        if row.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("expected {width} fields, found {}", row.len()),
            });
        }
    }

    let target_cols: Vec<usize> = match &opts.targets {
        TargetColumns::LastK(k) if *k == 0 || *k >= width => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *first_line,
                message: format!("cannot take last {k} of {width} columns as targets"),
            })
        }
        TargetColumns::LastK(k) => (width - k..width).collect(),
        TargetColumns::Indices(ix) => {
            if ix.is_empty() || ix.iter().any(|&c| c >= width) || ix.len() >= width {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *first_line,
                    message: format!("target columns {ix:?} invalid for {width} columns"),
                });
            }
            ix.clone()
        }
    };
    let feature_cols: Vec<usize> = (0..width).filter(|c| !target_cols.contains(c)).collect();

    let mut inputs = Vec::with_capacity(rows.len() * feature_cols.len());
    for (line, row) in &rows {
        for &c in &feature_cols {
            let v = parse_number(&row[c]).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("column {c}: `{}` is not a finite number", row[c]),
            })?;
            inputs.push(v);
        }
    }

    // Per target column: either numeric values or a one-hot class list.
    enum Encoding {
        Numeric,
        OneHot(Vec<String>),
    }
    let encodings: Vec<Encoding> = target_cols
        .iter()
        .map(|&c| {
            let numeric = rows.iter().all(|(_, r)| parse_number(&r[c]).is_some());
            if numeric && !opts.force_one_hot {
                Encoding::Numeric
            } else {
                let classes: BTreeSet<&str> = rows.iter().map(|(_, r)| r[c].as_str()).collect();
                Encoding::OneHot(classes.into_iter().map(str::to_owned).collect())
            }
        })
        .collect();
    let m: usize = encodings
        .iter()
        .map(|e| match e {
            Encoding::Numeric => 1,
            Encoding::OneHot(classes) => classes.len(),
        })
        .sum();
    let mut targets = Vec::with_capacity(rows.len() * m);
    for (_, row) in &rows {
        for (&c, enc) in target_cols.iter().zip(&encodings) {
            match enc {
                Encoding::Numeric => targets.push(parse_number(&row[c]).expect("checked numeric")),
                Encoding::OneHot(classes) => {
                    targets.extend(classes.iter().map(|k| if *k == row[c] { 1.0 } else { 0.0 }))
                }
            }
        }
    }

    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, feature_cols.len(), m, inputs, targets)
}

fn parse_number(field: &str) -> Option<f64> {
    field.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Centers each input column and scales it to unit sample standard
/// deviation. Constant columns map to zero. Targets are untouched.
pub fn standardize(data: &Dataset) -> Dataset {
    let (n, p) = (data.n, data.len());
    let mut stats = Vec::with_capacity(n);
    let mut inputs = data.inputs.clone();
    for c in 0..n {
        let column = (0..p).map(|r| data.inputs[r * n + c]);
        let mean = column.clone().sum::<f64>() / p as f64;
        let var = if p > 1 {
            column.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1) as f64
        } else {
            0.0
        };
        let std = var.sqrt();
        for r in 0..p {
            let v = &mut inputs[r * n + c];
            *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
        }
        stats.push(ColumnStats { mean, std });
    }
    Dataset { inputs, feature_stats: Some(stats), ..data.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Targets produced by a random tanh network with this hidden width.
    TeacherNet { width: usize },
    /// Random quadratic polynomial per output.
    Polynomial,
    /// `y_r = sin(x_1 + ... + x_n + r)`.
    Sinusoid,
}

/// Reproducible synthetic regression problem. Inputs are uniform on
/// `[-2, 2]^n`; `noise` is the standard deviation of additive Gaussian noise.
pub fn make_synthetic(kind: SyntheticKind, n: usize, m: usize, samples: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if samples == 0 || n == 0 || m == 0 {
        return Err(Error::InvalidArgument("synthetic problems need n, m, P >= 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<f64> = (0..samples * n).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let mut teacher = None;
    let mut targets = Vec::with_capacity(samples * m);
    let name;
    match kind {
        SyntheticKind::TeacherNet { width } => {
            if width == 0 {
                return Err(Error::InvalidArgument("teacher width must be >= 1".into()));
            }
            let t = Topology::new(&[n, width, m])?;
            let flat = (0..t.param_count()).map(|_| rng.random_range(-1.5..=1.5)).collect();
            let net = ParamVector::from_flat(&t, flat)?;
            for p in 0..samples {
                let rec = forward_unchecked(&net, &inputs[p * n..(p + 1) * n], &Tanh);
                targets.extend_from_slice(rec.output());
            }
            teacher = Some(net);
            name = format!("teacher{width}");
        }
        SyntheticKind::Polynomial => {
            // c0 + sum_i b_i x_i + sum_{i<=k} q_ik x_i x_k, coefficients in [-1, 1]
            let terms = 1 + n + n * (n + 1) / 2;
            let coeffs: Vec<Vec<f64>> =
                (0..m).map(|_| (0..terms).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
            for p in 0..samples {
                let x = &inputs[p * n..(p + 1) * n];
                for c in &coeffs {
                    let mut y = c[0];
                    y += (0..n).map(|i| c[1 + i] * x[i]).sum::<f64>();
                    let mut k = 1 + n;
                    for i in 0..n {
                        for j in i..n {
                            y += c[k] * x[i] * x[j];
                            k += 1;
                        }
                    }
                    targets.push(y);
                }
            }
            name = "polynomial".to_owned();
        }
        SyntheticKind::Sinusoid => {
            for p in 0..samples {
                let s: f64 = inputs[p * n..(p + 1) * n].iter().sum();
                targets.extend((0..m).map(|r| (s + r as f64).sin()));
            }
            name = "sinusoid".to_owned();
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for y in &mut targets {
            *y += normal.sample(&mut rng);
        }
    }
    let mut d = Dataset::new(name, n, m, inputs, targets)?;
    d.teacher = teacher;
    Ok(d)
}

/// Four standardized synthetic regression problems of `samples` rows:
/// a width-8 teacher on 2 inputs, a quadratic on 3 inputs, a two-output
/// sinusoid on 2 inputs and a two-output width-6 teacher on 4 inputs.
pub fn synthetic_suite(samples: usize, noise: f64, seed: u64) -> Result<Vec<Dataset>> {
    let specs = [
        (SyntheticKind::TeacherNet { width: 8 }, 2, 1),
        (SyntheticKind::Polynomial, 3, 1),
        (SyntheticKind::Sinusoid, 2, 2),
        (SyntheticKind::TeacherNet { width: 6 }, 4, 2),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, &(kind, n, m))| {
            let mut d = standardize(&make_synthetic(kind, n, m, samples, noise, seed.wrapping_add(i as u64))?);
            d.name = format!("{}_{n}x{m}", d.name);
            Ok(d)
        })
        .collect()
}
