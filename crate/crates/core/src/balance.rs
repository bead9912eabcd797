//! Stratified splits, oversampling without replacement and class weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledSet, Language, Provenance};
use crate::error::{Error, Result};
use crate::util::{stable_hash, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    Label,
    Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Parts 0 (train), 1 (validation), 2 (test).
    Fractions { train: f64, val: f64, test: f64 },
    KFold { k: usize },
}

impl SplitStrategy {
    pub fn parts(&self) -> usize {
        match self {
            SplitStrategy::Fractions { .. } => 3,
            SplitStrategy::KFold { k } => *k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub strata: Vec<StratumKey>,
    /// item id -> fold / part index
    pub assignments: BTreeMap<String, usize>,
}

impl SplitPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Items of `set` in the given fold, in set order.
    pub fn select(&self, set: &LabeledSet, fold: usize) -> LabeledSet {
        LabeledSet {
            subtask: set.subtask,
            items: set
                .items
                .iter()
                .filter(|i| self.fold_of(&i.key.to_string()) == Some(fold))
                .cloned()
                .collect(),
        }
    }

    /// Everything except the given fold.
    pub fn select_complement(&self, set: &LabeledSet, fold: usize) -> LabeledSet {
        LabeledSet {
            subtask: set.subtask,
            items: set
                .items
                .iter()
                .filter(|i| self.fold_of(&i.key.to_string()) != Some(fold))
                .cloned()
                .collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, fold) in &self.assignments {
            let _ = writeln!(s, "{id}\t{fold}");
        }
        s
    }
}

fn stratum_of(set: &LabeledSet, idx: usize, keys: &[StratumKey]) -> String {
    let item = &set.items[idx];
    keys.iter()
        .map(|k| match k {
            StratumKey::Label => format!("label={}", item.label.key()),
            StratumKey::Language => format!("lang={}", item.language()),
        })
        .collect::<Vec<_>>()
        .join("|")
}

/// Largest-remainder allocation of `n` items over `fractions`; ties go to
/// the earlier part.
fn allocate(n: usize, fractions: &[f64]) -> Vec<usize> {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn stratified_split(
    set: &LabeledSet,
    strata: &[StratumKey],
    strategy: SplitStrategy,
    seed: u64,
) -> Result<SplitPlan> {
    if set.is_empty() {
        return Err(Error::Validation("cannot split an empty set".into()));
    }
    match strategy {
        SplitStrategy::KFold { k } if k == 0 => {
            return Err(Error::Config("k-fold needs k >= 1".into()));
        }
        SplitStrategy::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(*f >= 0.0)) || train + val + test <= 0.0 {
                return Err(Error::Config("split fractions must be non-negative and not all zero".into()));
            }
        }
        _ => {}
    }
    let ids: Vec<String> = set.items.iter().map(|i| i.key.to_string()).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(Error::Validation("split input contains duplicate item ids".into()));
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for idx in 0..set.len() {
        groups.entry(stratum_of(set, idx, strata)).or_default().push(idx);
    }

    let mut assignments = BTreeMap::new();
    for (stratum, mut members) in groups {
        let mut rng = stream_rng(seed, &format!("split/{stratum}"));
        members.shuffle(&mut rng);
        match strategy {
            SplitStrategy::KFold { k } => {
                let offset = (stable_hash(&stratum) % k as u64) as usize;
                for (j, idx) in members.iter().enumerate() {
                    assignments.insert(ids[*idx].clone(), (offset + j) % k);
                }
            }
            SplitStrategy::Fractions { train, val, test } => {
                let counts = allocate(members.len(), &[train, val, test]);
                let mut it = members.iter();
                for (part, count) in counts.iter().enumerate() {
                    for idx in it.by_ref().take(*count) {
                        assignments.insert(ids[*idx].clone(), part);
                    }
                }
            }
        }
    }
    Ok(SplitPlan {
        strategy,
        strata: strata.to_vec(),
        assignments,
    })
}

/// Replays shuffled full passes over the (language, class) pool, then one
/// partial pass, until the class matches the language's majority count.
/// With `use_auxiliary_pool` the pool is the auxiliary-flagged items only.
pub fn oversample(
    set: &LabeledSet,
    language: &Language,
    target: &Label,
    seed: u64,
    use_auxiliary_pool: bool,
) -> Result<LabeledSet> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for item in set.items.iter().filter(|i| i.language() == language) {
        *counts.entry(item.label.key()).or_insert(0) += 1;
    }
    let want_provenance = if use_auxiliary_pool {
        Provenance::Auxiliary
    } else {
        Provenance::Original
    };
    let pool: Vec<usize> = set
        .items
        .iter()
        .enumerate()
        .filter(|(_, i)| i.language() == language && &i.label == target && i.provenance == want_provenance)
        .map(|(idx, _)| idx)
        .collect();
    if pool.is_empty() {
        return Err(Error::Validation(format!(
            "no {} items of class {} in language {language} to oversample",
            if use_auxiliary_pool { "auxiliary" } else { "original" },
            target.key()
        )));
    }
    let majority = counts.values().copied().max().unwrap_or(0);
    let current = counts.get(&target.key()).copied().unwrap_or(0);
    let mut need = majority.saturating_sub(current);

    let mut out = set.clone();
    let mut rng = stream_rng(seed, &format!("oversample/{language}/{}", target.key()));
    while need > 0 {
        let mut pass = pool.clone();
        pass.shuffle(&mut rng);
        for idx in pass.into_iter().take(need) {
            out.items.push(set.items[idx].clone());
            need -= 1;
        }
    }
    Ok(out)
}

/// Oversamples every non-majority class of every language. Pairs listed in
/// `auxiliary_pools` draw from their auxiliary items instead.
pub fn oversample_all(set: &LabeledSet, seed: u64, auxiliary_pools: &[(Language, Label)]) -> Result<LabeledSet> {
    let mut out = set.clone();
    for language in set.languages() {
        let labels: BTreeSet<(String, Label)> = set
            .items
            .iter()
            .filter(|i| i.language() == &language)
            .map(|i| (i.label.key(), i.label.clone()))
            .collect();
        for (_, label) in labels {
            let aux = auxiliary_pools.iter().any(|(l, c)| l == &language && c == &label)
                && out
                    .items
                    .iter()
                    .any(|i| i.language() == &language && i.label == label && i.provenance == Provenance::Auxiliary);
            out = oversample(&out, &language, &label, seed, aux)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    InverseFreq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

pub const DEFAULT_CLAMP: (f64, f64) = (0.1, 10.0);

/// `w_c = N / (C * n_c)`, clamped; classes with no positives get the upper
/// clamp.
pub fn class_weights(rows: &[Vec<bool>], scheme: WeightScheme, clamp: (f64, f64)) -> Result<ClassWeights> {
    let classes = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != classes) {
        return Err(Error::Contract("label rows have different widths".into()));
    }
    let mut positives = vec![0usize; classes];
    for row in rows {
        for (c, on) in row.iter().enumerate() {
            if *on {
                positives[c] += 1;
            }
        }
    }
    if positives.iter().all(|n| *n == 0) {
        return Err(Error::Validation("class weights need at least one positive example".into()));
    }
    let (lo, hi) = clamp;
    let n = rows.len() as f64;
    let weights = positives
        .iter()
        .map(|&nc| match scheme {
            WeightScheme::InverseFreq if nc == 0 => hi,
            WeightScheme::InverseFreq => (n / (classes as f64 * nc as f64)).clamp(lo, hi),
        })
        .collect();
    Ok(ClassWeights {
        weights,
        scheme,
        clamp_min: lo,
        clamp_max: hi,
    })
}
