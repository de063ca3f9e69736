//! Unsupervised per-feature embeddings, computed from the training split.
//!
//! Every method returns a `D × M` matrix whose row `j` embeds feature `j`.

mod nmf;
mod svd;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use nmf::{
    frobenius_error, nmf_fit, NmfFactors, NmfOptions, DEFAULT_NMF_ITERATIONS, NMF_FLOOR,
};
pub use svd::{svd_feature_coordinates, thin_svd, Svd};

pub const DEFAULT_EMBEDDING_SIZE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMethod {
    Nmf,
    Svd,
    DotHistogram,
    FeatureValues,
}

impl EmbeddingMethod {
    pub const ALL: [EmbeddingMethod; 4] = [
        EmbeddingMethod::Nmf,
        EmbeddingMethod::Svd,
        EmbeddingMethod::DotHistogram,
        EmbeddingMethod::FeatureValues,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMethod::Nmf => "nmf",
            EmbeddingMethod::Svd => "svd",
            EmbeddingMethod::DotHistogram => "dot_histogram",
            EmbeddingMethod::FeatureValues => "feature_values",
        }
    }
}

impl fmt::Display for EmbeddingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        EmbeddingMethod::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                let valid: Vec<_> = EmbeddingMethod::ALL.iter().map(|m| m.name()).collect();
                Error::precondition(format!(
                    "unknown embedding method '{s}'; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Column transform applied to the training matrix before embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    MinMax,
    ZScore,
    Raw,
}

impl FromStr for Preprocessing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "minmax" | "min_max" => Ok(Preprocessing::MinMax),
            "zscore" | "z_score" => Ok(Preprocessing::ZScore),
            "raw" => Ok(Preprocessing::Raw),
            _ => Err(Error::precondition(format!(
                "unknown preprocessing '{s}'; valid: min_max, z_score, raw"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub method: EmbeddingMethod,
    /// Embedding size M (ignored by `feature_values`, whose size is N).
    pub size: usize,
    pub preprocessing: Preprocessing,
    /// Histogram bins for `dot_histogram`; defaults to `size`.
    pub bins: Option<usize>,
    pub nmf_iterations: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            method: EmbeddingMethod::Nmf,
            size: DEFAULT_EMBEDDING_SIZE,
            preprocessing: Preprocessing::MinMax,
            bins: None,
            nmf_iterations: DEFAULT_NMF_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub method: EmbeddingMethod,
    /// `D × M`
    pub matrix: Matrix,
}

impl EmbeddingMatrix {
    pub fn features(&self) -> usize {
        self.matrix.rows()
    }

    pub fn size(&self) -> usize {
        self.matrix.cols()
    }

    pub fn embedding(&self, feature: usize) -> &[f64] {
        self.matrix.row(feature)
    }

    /// Writes `feature,<method>_0,…,<method>_{M-1}` followed by one row per
    /// feature.
    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["feature".to_string()];
        header.extend((0..self.size()).map(|i| format!("{}_{i}", self.method)));
        w.write_record(&header)?;
        for j in 0..self.features() {
            let name = feature_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("f{j}"));
            let mut rec = vec![name];
            rec.extend(self.embedding(j).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-column `(x − min)/(max − min)`; constant columns become zeros.
pub fn minmax_scale(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    Matrix::from_fn(n, d, |i, j| {
        let range = hi[j] - lo[j];
        if range > 0.0 {
            (x[(i, j)] - lo[j]) / range
        } else {
            0.0
        }
    })
}

/// Per-column standardisation with population standard deviation;
/// constant columns become zeros.
pub fn zscore_columns(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let sd: Vec<f64> = var.iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
    Matrix::from_fn(n, d, |i, j| {
        if sd[j] > 0.0 {
            (x[(i, j)] - mean[j]) / sd[j]
        } else {
            0.0
        }
    })
}

pub fn preprocess(x: &Matrix, preprocessing: Preprocessing) -> Matrix {
    match preprocessing {
        Preprocessing::MinMax => minmax_scale(x),
        Preprocessing::ZScore => zscore_columns(x),
        Preprocessing::Raw => x.clone(),
    }
}

/// Histogram heights times bin centres over the min-max-scaled column.
///
/// Bins split `[0, 1]` into `bins` equal parts (the right edge belongs to
/// the last bin). Constant columns embed to zeros.
pub fn dot_histogram_embed(x: &Matrix, bins: usize) -> Result<EmbeddingMatrix> {
    if bins == 0 {
        return Err(Error::precondition("histogram needs at least one bin"));
    }
    let (n, d) = x.shape();
    let scaled = minmax_scale(x);
    let mut e = Matrix::zeros(d, bins);
    for j in 0..d {
        let col = x.column(j);
        let constant = col.iter().all(|&v| v == col[0]);
        if constant || n == 0 {
            continue;
        }
        let mut counts = vec![0usize; bins];
        for i in 0..n {
            let b = ((scaled[(i, j)] * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, &c) in counts.iter().enumerate() {
            let height = c as f64 / n as f64;
            let centre = (b as f64 + 0.5) / bins as f64;
            e[(j, b)] = height * centre;
        }
    }
    Ok(EmbeddingMatrix {
        method: EmbeddingMethod::DotHistogram,
        matrix: e,
    })
}

/// Row `j` is column `j` of `x`, so `M = N`.
pub fn feature_values_embed(x: &Matrix) -> EmbeddingMatrix {
    EmbeddingMatrix {
        method: EmbeddingMethod::FeatureValues,
        matrix: x.transpose(),
    }
}

pub fn svd_embed(x: &Matrix, k: usize) -> Result<EmbeddingMatrix> {
    Ok(EmbeddingMatrix {
        method: EmbeddingMethod::Svd,
        matrix: svd_feature_coordinates(x, k)?,
    })
}

/// Row `j` is column `j` of `H` from a rank-`k` NMF.
pub fn nmf_embed(
    x: &Matrix,
    k: usize,
    iterations: usize,
    rng: &mut Rng,
) -> Result<EmbeddingMatrix> {
    let options = NmfOptions {
        iterations,
        record_history: false,
    };
    let factors = nmf_fit(x, k, options, rng)?;
    Ok(EmbeddingMatrix {
        method: EmbeddingMethod::Nmf,
        matrix: factors.h.transpose(),
    })
}

/// Preprocesses the training matrix and embeds every feature.
///
/// Takes only training rows: nothing outside the training split can reach
/// the embedding.
pub fn compute_embedding(
    train_x: &Matrix,
    config: &EmbeddingConfig,
    rng: &mut Rng,
) -> Result<EmbeddingMatrix> {
    let x = preprocess(train_x, config.preprocessing);
    let out = match config.method {
        EmbeddingMethod::Nmf => nmf_embed(&x, config.size, config.nmf_iterations, rng)?,
        EmbeddingMethod::Svd => svd_embed(&x, config.size)?,
        EmbeddingMethod::DotHistogram => {
            dot_histogram_embed(&x, config.bins.unwrap_or(config.size))?
        }
        EmbeddingMethod::FeatureValues => feature_values_embed(&x),
    };
    if !out.matrix.is_finite() {
        return Err(Error::precondition("embedding produced non-finite values"));
    }
    Ok(out)
}
