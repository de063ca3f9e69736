use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub repeats: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Ordered by repeat, then fold.
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&self.folds).expect("folds serialise");
        hex::encode(Sha256::digest(&json))
    }
}

fn members_by_class(y: &[usize], indices: &[usize]) -> Vec<Vec<usize>> {
    let classes = indices.iter().map(|&i| y[i] + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); classes];
    for &i in indices {
        by_class[y[i]].push(i);
    }
    by_class
}

/// Repeated stratified k-fold with a stratified validation split carved
/// out of each fold's training portion.
///
/// Per repeat, each class is shuffled and dealt round-robin across folds,
/// starting from the currently smallest folds so remainders even out.
pub fn stratified_cv(
    y: &[usize],
    k: usize,
    repeats: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::precondition(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::precondition(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let all: Vec<usize> = (0..y.len()).collect();
    let by_class = members_by_class(y, &all);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::precondition(format!(
                "class {c} has {} samples, fewer than {k} folds",
                members.len()
            )));
        }
    }

    let root = Rng::new(seed);
    let mut folds = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let mut rng = root.fork(repeat as u64);
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by_key(|&f| (assignment[f].len(), f));
            for (t, &i) in members.iter().enumerate() {
                assignment[order[t % k]].push(i);
            }
        }
        for (fold, test) in assignment.iter().enumerate() {
            let mut test = test.clone();
            test.sort_unstable();
            let rest: Vec<usize> = all
                .iter()
                .copied()
                .filter(|i| test.binary_search(i).is_err())
                .collect();
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for mut members in members_by_class(y, &rest) {
                rng.shuffle(&mut members);
                let mut n_val = (val_fraction * members.len() as f64).round() as usize;
                if val_fraction > 0.0 && members.len() >= 2 {
                    n_val = n_val.clamp(1, members.len() - 1);
                }
                val.extend_from_slice(&members[..n_val]);
                train.extend_from_slice(&members[n_val..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            folds.push(Fold {
                repeat,
                fold,
                train,
                val,
                test,
            });
        }
    }
    Ok(FoldPlan {
        k,
        repeats,
        val_fraction,
        seed,
        folds,
    })
}
