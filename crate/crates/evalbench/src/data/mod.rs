//! Datasets, synthetic generators, and IDX ingestion.

mod generators;
mod idx;

use std::io::Write;
use std::path::Path;

pub use generators::{
    blobs, toy_regression, toy_target, two_moons, unbalance_and_noise, TOY_BANDS, UNBALANCED_RATIOS,
};
pub use idx::{load_idx, normalize_features, write_idx_images, write_idx_labels};

use crate::error::{invalid, Error, Result};
use crate::numcore::{RngStream, Tensor};

/// Supervision attached to each row of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
    },
    Regression(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Regression(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Regression(v) => Targets::Regression(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// The target of row `i` as a float (class index for classification).
    pub fn value(&self, i: usize) -> f64 {
        match self {
            Targets::Classes { labels, .. } => labels[i] as f64,
            Targets::Regression(v) => v[i],
        }
    }
}

/// Feature matrix `(n, d)` plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    targets: Targets,
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: Tensor, targets: Targets, provenance: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(invalid(format!(
                "features must be a matrix, got shape {:?}",
                x.shape()
            )));
        }
        if x.rows() != targets.len() {
            return Err(Error::Dimension {
                context: "Dataset::new",
                expected: vec![x.rows()],
                actual: vec![targets.len()],
            });
        }
        if !x.is_all_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        match &targets {
            Targets::Classes { labels, n_classes } => {
                if let Some(&bad) = labels.iter().find(|&&y| y >= *n_classes) {
                    return Err(invalid(format!(
                        "label {bad} out of range for {n_classes} classes"
                    )));
                }
            }
            Targets::Regression(v) => {
                if v.iter().any(|y| !y.is_finite()) {
                    return Err(Error::NonFinite("regression targets".into()));
                }
            }
        }
        Ok(Self {
            x,
            targets,
            provenance: provenance.into(),
        })
    }

    pub fn classification(
        x: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        tag: &str,
    ) -> Result<Self> {
        Self::new(x, Targets::Classes { labels, n_classes }, tag)
    }

    pub fn regression(x: Tensor, y: Vec<f64>, tag: &str) -> Result<Self> {
        Self::new(x, Targets::Regression(y), tag)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Class labels, or `None` for regression data.
    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Regression(_) => None,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { n_classes, .. } => Some(*n_classes),
            Targets::Regression(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match &self.targets {
            Targets::Regression(v) => Some(v),
            Targets::Classes { .. } => None,
        }
    }

    /// Rows in the given order (duplicates allowed).
    pub fn subset(&self, idx: &[usize]) -> Self {
        let x = if idx.is_empty() {
            Tensor::from_parts(vec![0, self.dim()], Vec::new())
        } else {
            self.x.select_rows(idx)
        };
        Self {
            x,
            targets: self.targets.select(idx),
            provenance: self.provenance.clone(),
        }
    }

    /// Row-wise concatenation; all parts must agree on width and target kind.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("nothing to concatenate"))?;
        let d = first.dim();
        let mut x = Vec::new();
        let mut targets = match &first.targets {
            Targets::Classes { n_classes, .. } => Targets::Classes {
                labels: Vec::new(),
                n_classes: *n_classes,
            },
            Targets::Regression(_) => Targets::Regression(Vec::new()),
        };
        for p in parts {
            if p.dim() != d {
                return Err(Error::Dimension {
                    context: "Dataset::concat",
                    expected: vec![d],
                    actual: vec![p.dim()],
                });
            }
            x.extend_from_slice(p.x.data());
            match (&mut targets, &p.targets) {
                (
                    Targets::Classes { labels, n_classes },
                    Targets::Classes {
                        labels: l,
                        n_classes: c,
                    },
                ) => {
                    *n_classes = (*n_classes).max(*c);
                    labels.extend_from_slice(l);
                }
                (Targets::Regression(v), Targets::Regression(w)) => v.extend_from_slice(w),
                _ => return Err(invalid("cannot mix classification and regression rows")),
            }
        }
        let n = targets.len();
        Ok(Self {
            x: Tensor::from_parts(vec![n, d], x),
            targets,
            provenance: first.provenance.clone(),
        })
    }

    /// Copy with every feature row transformed.
    pub fn map_features(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.x.len());
        for i in 0..self.len() {
            let row = f(self.x.row(i));
            if row.len() != d {
                return Err(Error::Dimension {
                    context: "map_features",
                    expected: vec![d],
                    actual: vec![row.len()],
                });
            }
            data.extend(row);
        }
        Ok(Self {
            x: Tensor::from_parts(vec![self.len(), d], data),
            targets: self.targets.clone(),
            provenance: self.provenance.clone(),
        })
    }

    pub(crate) fn with_targets(&self, targets: Targets) -> Self {
        Self {
            x: self.x.clone(),
            targets,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes `index, x_0 .. x_{d-1}, y`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["index".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x_{j}")));
        header.push("y".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            rec.push(match &self.targets {
                Targets::Classes { labels, .. } => labels[i].to_string(),
                Targets::Regression(v) => v[i].to_string(),
            });
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Random disjoint split into `(train, val)` with `n_val` validation rows.
pub fn split_train_val(
    data: &Dataset,
    n_val: usize,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    if n_val >= data.len() {
        return Err(invalid(format!(
            "validation size {n_val} must be below dataset size {}",
            data.len()
        )));
    }
    let perm = rng.permutation(data.len());
    let (val, train) = perm.split_at(n_val);
    Ok((data.subset(train), data.subset(val)))
}

/// Index-level version of [`split_train_val`]: `(train, val)` indices.
pub fn split_indices(n: usize, n_val: usize, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let perm = rng.permutation(n);
    let (val, train) = perm.split_at(n_val.min(n));
    (train.to_vec(), val.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        Dataset::classification(x, vec![0, 1, 1], 2, "tiny").unwrap()
    }

    #[test]
    fn rejects_bad_labels_and_values() {
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(Dataset::classification(x.clone(), vec![2], 2, "t").is_err());
        assert!(Dataset::regression(x, vec![f64::NAN], "t").is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = tiny();
        let (tr, va) = split_train_val(&d, 0, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!((tr.len(), va.len()), (3, 0));
        let (a, b) = split_indices(50, 12, &mut RngStream::new(1, 0));
        assert_eq!(a.len() + b.len(), 50);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(
            (a.clone(), b.clone()),
            split_indices(50, 12, &mut RngStream::new(1, 0))
        );
        assert!(split_train_val(&d, 3, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let mut buf = Vec::new();
        tiny().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,x_0,x_1,y");
        assert_eq!(lines[2], "1,2,3,1");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn concat_and_subset() {
        let d = tiny();
        let c = Dataset::concat(&[&d, &d.subset(&[2])]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.x().row(3), &[4.0, 5.0]);
        assert_eq!(c.labels().unwrap(), &[0, 1, 1, 1]);
    }
}
