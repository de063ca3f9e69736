use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × D`
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
    pub feature_names: Vec<String>,
    /// Original label strings, indexed by class.
    pub class_names: Vec<String>,
    /// Ground-truth informative features (synthetic data only).
    pub informative: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Vec<usize>,
        classes: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let class_names = (0..classes).map(|c| c.to_string()).collect();
        let ds = Dataset {
            x,
            y,
            classes,
            feature_names,
            class_names,
            informative: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.x.rows() {
            return Err(Error::Shape {
                op: "dataset labels",
                left: self.x.shape(),
                right: (self.y.len(), 1),
            });
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(Error::precondition(format!(
                "{} feature names for {} columns",
                self.feature_names.len(),
                self.x.cols()
            )));
        }
        if !self.x.is_finite() {
            return Err(Error::precondition("dataset contains non-finite values"));
        }
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::precondition(format!("class {c} has no samples")));
        }
        if let Some((i, &y)) = self.y.iter().enumerate().find(|(_, &y)| y >= self.classes) {
            return Err(Error::precondition(format!(
                "label {y} at row {i} is out of range"
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.y {
            if y < self.classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// SHA-256 over shape, labels, feature names and the raw value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.x.rows() as u64).to_le_bytes());
        h.update((self.x.cols() as u64).to_le_bytes());
        for v in self.x.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &y in &self.y {
            h.update((y as u64).to_le_bytes());
        }
        for name in self.feature_names.iter().chain(&self.class_names) {
            h.update(name.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    /// Reads a CSV with a header row. `label_column` names the label; all
    /// other columns must be numeric. Labels are mapped to class indices in
    /// order of first appearance.
    pub fn read_csv<R: Read>(input: R, label_column: &str, source: &Path) -> Result<Self> {
        let input_err = |message: String| Error::Input {
            path: source.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let headers = reader.headers()?.clone();
        let label_idx = headers
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| {
                input_err(format!("label column '{label_column}' not found in header"))
            })?;
        let feature_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label_idx)
            .map(|(_, h)| h.to_string())
            .collect();

        let mut values = Vec::new();
        let mut class_of: HashMap<String, usize> = HashMap::new();
        let mut class_names = Vec::new();
        let mut y = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let row = r + 2; // 1-based, after the header
            let record = record.map_err(|e| input_err(format!("row {row}: {e}")))?;
            if record.len() != headers.len() {
                return Err(input_err(format!(
                    "row {row}: expected {} fields, found {}",
                    headers.len(),
                    record.len()
                )));
            }
            for (c, field) in record.iter().enumerate() {
                if c == label_idx {
                    let label = field.trim().to_string();
                    if label.is_empty() {
                        return Err(input_err(format!(
                            "row {row}: missing label in column '{label_column}'"
                        )));
                    }
                    let next = class_of.len();
                    let idx = *class_of.entry(label.clone()).or_insert_with(|| {
                        class_names.push(label);
                        next
                    });
                    y.push(idx);
                } else {
                    let v: f64 = field.trim().parse().map_err(|_| {
                        input_err(format!(
                            "row {row}, column '{}': cannot parse '{field}' as a number",
                            &headers[c]
                        ))
                    })?;
                    if !v.is_finite() {
                        return Err(input_err(format!(
                            "row {row}, column '{}': non-finite value",
                            &headers[c]
                        )));
                    }
                    values.push(v);
                }
            }
        }
        if y.is_empty() {
            return Err(input_err("no data rows".into()));
        }
        let x = Matrix::from_vec(y.len(), feature_names.len(), values)?;
        let ds = Dataset {
            x,
            y,
            classes: class_names.len(),
            feature_names,
            class_names,
            informative: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load_csv(path: &Path, label_column: &str) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::read_csv(std::io::BufReader::new(file), label_column, path)
    }

    /// Writes features then a `label` column (class names).
    pub fn write_csv<W: Write>(&self, out: W, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.feature_names.clone();
        header.push(label_column.to_string());
        w.write_record(&header)?;
        for i in 0..self.samples() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:e}")).collect();
            rec.push(self.class_names[self.y[i]].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parameters of the synthetic Gaussian benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    pub features: usize,
    pub informative: usize,
    pub classes: usize,
    pub noise: f64,
}

impl SynthSpec {
    /// N=150, D=2000, 10 informative features, 2 classes, σ=1.
    pub const DEFAULT: SynthSpec = SynthSpec {
        samples: 150,
        features: 2000,
        informative: 10,
        classes: 2,
        noise: 1.0,
    };

    /// Spacing between adjacent class means on an informative feature.
    pub fn separation(&self) -> f64 {
        2.0 * self.noise.max(1.0)
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Class-conditional Gaussians.
///
/// Each informative feature places the class means on an evenly spaced
/// grid (spacing `2·max(σ, 1)`) in a per-feature random order, so every
/// pair of classes differs by at least that spacing on every informative
/// feature. All features get N(0, σ²) noise. Class sizes differ by at
/// most one and rows are shuffled.
pub fn synth_dataset(spec: SynthSpec, seed: u64) -> Result<Dataset> {
    let SynthSpec {
        samples: n,
        features: d,
        informative: m,
        classes: c,
        noise,
    } = spec;
    if c < 2 {
        return Err(Error::precondition(
            "synthetic data needs at least 2 classes",
        ));
    }
    if m > d || m == 0 {
        return Err(Error::precondition(format!(
            "informative count {m} must be in 1..={d}"
        )));
    }
    if n < 2 * c {
        return Err(Error::precondition(format!(
            "need at least {} samples for {c} classes",
            2 * c
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::precondition(
            "noise must be a finite non-negative number",
        ));
    }
    let mut rng = Rng::new(seed);

    let mut features: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut features);
    let mut informative = features[..m].to_vec();
    informative.sort_unstable();

    let sep = spec.separation();
    let centre = (c as f64 - 1.0) / 2.0;
    let mut means = vec![vec![0.0; d]; c];
    for &j in &informative {
        let mut levels: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut levels);
        for (class, &level) in levels.iter().enumerate() {
            means[class][j] = sep * (level as f64 - centre);
        }
    }

    let mut y: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.shuffle(&mut y);
    let x = Matrix::from_fn(n, d, |i, j| means[y[i]][j] + noise * rng.normal());

    let feature_names = (0..d).map(|j| format!("f{j}")).collect();
    let mut ds = Dataset::new(x, y, c, feature_names)?;
    ds.informative = Some(informative);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_string_labels() {
        let text = "a,label,b\n1.5,tumour,2\n3,normal,4\n5,tumour,6\n";
        let ds = Dataset::read_csv(text.as_bytes(), "label", Path::new("t.csv")).unwrap();
        assert_eq!(ds.y, vec![0, 1, 0]);
        assert_eq!(ds.class_names, vec!["tumour", "normal"]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.x.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn missing_label_column_is_named() {
        let err =
            Dataset::read_csv("a,b\n1,2\n".as_bytes(), "target", Path::new("t.csv")).unwrap_err();
        assert!(err.to_string().contains("'target'"), "{err}");
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let err =
            Dataset::read_csv("a,y\n1,0\nx,1\n".as_bytes(), "y", Path::new("t.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("'a'"), "{msg}");
    }

    #[test]
    fn synthetic_is_reproducible_and_labelled() {
        let spec = SynthSpec {
            samples: 30,
            features: 40,
            informative: 5,
            classes: 3,
            noise: 1.0,
        };
        let a = synth_dataset(spec, 7).unwrap();
        let b = synth_dataset(spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        assert_eq!(a.informative.as_ref().unwrap().len(), 5);
        assert_ne!(synth_dataset(spec, 8).unwrap().digest(), a.digest());
    }

    #[test]
    fn all_informative() {
        let spec = SynthSpec {
            samples: 8,
            features: 4,
            informative: 4,
            classes: 2,
            noise: 0.5,
        };
        let ds = synth_dataset(spec, 1).unwrap();
        assert_eq!(ds.informative.unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn noiseless_classes_are_separated() {
        let spec = SynthSpec {
            samples: 20,
            features: 10,
            informative: 3,
            classes: 2,
            noise: 0.0,
        };
        let ds = synth_dataset(spec, 3).unwrap();
        let inf = ds.informative.clone().unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let same = ds.y[i] == ds.y[j];
                let equal = inf.iter().all(|&f| ds.x[(i, f)] == ds.x[(j, f)]);
                assert_eq!(same, equal);
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        let base = SynthSpec::DEFAULT;
        assert!(synth_dataset(
            SynthSpec {
                informative: 2001,
                ..base
            },
            0
        )
        .is_err());
        assert!(synth_dataset(SynthSpec { samples: 3, ..base }, 0).is_err());
    }
}
