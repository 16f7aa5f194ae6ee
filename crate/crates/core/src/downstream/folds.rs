use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fold assignment of every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub ids: Vec<String>,
    /// Fold of `ids[i]`.
    pub fold: Vec<usize>,
    /// Classes that had fewer than `k` members and were spread without
    /// stratification guarantees.
    pub unstratified_classes: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] == f).collect()
    }

    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] != f).collect()
    }
}

/// Seeded k-fold partition. With class labels, each class is shuffled and
/// dealt round-robin, continuing the dealer position across classes, so
/// per-class fold counts differ by at most one and fold sizes stay balanced.
pub fn kfold_split(ids: &[String], classes: Option<&[usize]>, k: usize, seed: u64) -> Result<FoldPlan> {
    let n = ids.len();
    if k < 2 || n < k {
        return Err(Error::invalid(format!("{n} samples cannot form {k} folds")));
    }
    if classes.is_some_and(|c| c.len() != n) {
        return Err(Error::invalid("one class label per id required"));
    }
    let mut rng = crate::rng::derive(seed, "kfold");
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    match classes {
        Some(c) => (0..n).for_each(|i| groups.entry(c[i]).or_default().push(i)),
        None => {
            groups.insert(0, (0..n).collect());
        }
    }
    let mut small = Vec::new();
    let mut fold = vec![0; n];
    let mut dealer = 0usize;
    let mut leftovers = Vec::new();
    for (&class, members) in groups.iter_mut() {
        members.shuffle(&mut rng);
        if classes.is_some() && members.len() < k {
            log::warn!("class {class} has {} members, fewer than {k} folds; not stratified", members.len());
            small.push(class);
            leftovers.extend_from_slice(members);
            continue;
        }
        for &i in members.iter() {
            fold[i] = dealer % k;
            dealer += 1;
        }
    }
    leftovers.shuffle(&mut rng);
    for i in leftovers {
        fold[i] = dealer % k;
        dealer += 1;
    }
    Ok(FoldPlan {
        k,
        ids: ids.to_vec(),
        fold,
        unstratified_classes: small,
    })
}
