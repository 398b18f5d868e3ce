use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::numcore::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    Permuted,
    Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Classes that occur in this task.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<Task>,
    /// Feature permutation per task (permuted streams only).
    pub permutations: Vec<Vec<usize>>,
    /// Class groups per task (split streams only).
    pub class_groups: Vec<Vec<usize>>,
    pub n_classes: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn n_classes(d: &Dataset) -> Result<usize> {
    d.n_classes()
        .ok_or_else(|| invalid("task streams need class labels"))
}

/// Reorders the features of every row: new column `j` is old column `perm[j]`.
pub fn permute_features(data: &Dataset, perm: &[usize]) -> Result<Dataset> {
    if perm.len() != data.dim() {
        return Err(invalid(format!(
            "permutation of {} for {} features",
            perm.len(),
            data.dim()
        )));
    }
    data.map_features(|row| perm.iter().map(|&j| row[j]).collect())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Task 0 is the base data; later tasks each use a fresh feature
/// permutation shared by their train and test rows. Every task's rows are
/// shuffled independently.
pub fn make_permuted_stream(
    train: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    rng: &mut RngStream,
) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(invalid("a stream needs at least one task"));
    }
    let c = n_classes(train)?;
    let d = train.dim();
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut permutations = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let perm = if t == 0 {
            (0..d).collect()
        } else {
            rng.permutation(d)
        };
        let order = rng.permutation(train.len());
        tasks.push(Task {
            train: permute_features(&train.subset(&order), &perm)?,
            test: permute_features(test, &perm)?,
            classes: (0..c).collect(),
        });
        permutations.push(perm);
    }
    Ok(TaskStream {
        kind: StreamKind::Permuted,
        tasks,
        permutations,
        class_groups: Vec::new(),
        n_classes: c,
    })
}

/// One task per class group, holding exactly the rows of those classes.
/// Labels stay in the global class space.
pub fn make_split_stream(
    train: &Dataset,
    test: &Dataset,
    groups: &[Vec<usize>],
) -> Result<TaskStream> {
    let c = n_classes(train)?;
    if groups.is_empty() {
        return Err(invalid("a stream needs at least one task"));
    }
    let mut seen = vec![false; c];
    for g in groups {
        for &k in g {
            if k >= c {
                return Err(invalid(format!("class {k} is outside 0..{c}")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(invalid(format!("class {k} appears in two tasks")));
            }
        }
    }
    let pick = |d: &Dataset, g: &[usize]| -> Result<Dataset> {
        let labels = d
            .labels()
            .ok_or_else(|| invalid("task streams need class labels"))?;
        let idx: Vec<usize> = (0..d.len()).filter(|&i| g.contains(&labels[i])).collect();
        for &k in g {
            if !idx.iter().any(|&i| labels[i] == k) {
                return Err(invalid(format!("class {k} has no examples")));
            }
        }
        Ok(d.subset(&idx))
    };
    let tasks = groups
        .iter()
        .map(|g| {
            Ok(Task {
                train: pick(train, g)?,
                test: pick(test, g)?,
                classes: g.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream {
        kind: StreamKind::Split,
        tasks,
        permutations: Vec::new(),
        class_groups: groups.to_vec(),
        n_classes: c,
    })
}

/// `[[0, 1], [2, 3], ...]` over `n_tasks` pairs.
pub fn consecutive_pairs(n_tasks: usize) -> Vec<Vec<usize>> {
    (0..n_tasks).map(|t| vec![2 * t, 2 * t + 1]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::blobs;

    fn base(seed: u64) -> (Dataset, Dataset) {
        let mut rng = RngStream::new(seed, 0);
        (
            blobs(20, 10, 16, 5.0, &mut rng).unwrap(),
            blobs(5, 10, 16, 5.0, &mut rng).unwrap(),
        )
    }

    #[test]
    fn permuted_stream_basics() {
        let (tr, te) = base(0);
        let one = make_permuted_stream(&tr, &te, 1, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(one.tasks[0].test, te);
        assert_eq!(one.permutations[0], (0..16).collect::<Vec<_>>());

        let s = make_permuted_stream(&tr, &te, 3, &mut RngStream::new(1, 0)).unwrap();
        let again = make_permuted_stream(&tr, &te, 3, &mut RngStream::new(1, 0)).unwrap();
        let other = make_permuted_stream(&tr, &te, 3, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(s, again);
        assert_ne!(s.permutations[1], other.permutations[1]);
        let back =
            permute_features(&s.tasks[2].test, &inverse_permutation(&s.permutations[2])).unwrap();
        assert_eq!(back, te);
    }

    #[test]
    fn split_stream_counts() {
        let (tr, te) = base(3);
        let s = make_split_stream(&tr, &te, &consecutive_pairs(5)).unwrap();
        assert_eq!(s.len(), 5);
        let mut total = 0;
        for (t, task) in s.tasks.iter().enumerate() {
            let labels = task.train.labels().unwrap();
            assert_eq!(labels.len(), 40);
            assert!(labels.iter().all(|l| *l == 2 * t || *l == 2 * t + 1));
            assert_eq!(task.train.n_classes(), Some(10));
            total += labels.len();
        }
        assert_eq!(total, tr.len());
    }

    #[test]
    fn split_single_pair_is_base() {
        let mut rng = RngStream::new(4, 0);
        let tr = blobs(10, 2, 3, 4.0, &mut rng).unwrap();
        let s = make_split_stream(&tr, &tr, &[vec![0, 1]]).unwrap();
        assert_eq!(s.tasks[0].train, tr);
    }

    #[test]
    fn split_errors() {
        let (tr, te) = base(5);
        assert!(make_split_stream(&tr, &te, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(make_split_stream(&tr, &te, &[vec![10, 11]]).is_err());
    }
}
