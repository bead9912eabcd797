//! Prediction, ensemble voting and language routing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Language, Subtask};
use crate::error::{Error, Result};
use crate::model::{forward_classify, Model};
use crate::tensor::Tensor;
use crate::textprep::{encode, Vocab};
use crate::translate::{translate_text, TranslationBackend};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Turns one logit row into class indicators and per-class scores:
/// softmax + argmax for genre, sigmoid + threshold for multilabel tasks.
pub fn decode(task: Subtask, logits: &[f64], threshold: f64) -> (Vec<bool>, Vec<f64>) {
    if task.is_multilabel() {
        let scores: Vec<f64> = logits.iter().map(|&z| crate::tensor::sigmoid(z)).collect();
        let labels = scores.iter().map(|&p| p >= threshold).collect();
        (labels, scores)
    } else {
        let mut scores = logits.to_vec();
        crate::tensor::softmax_in_place(&mut scores);
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        let labels = (0..logits.len()).map(|i| i == best).collect();
        (labels, scores)
    }
}

/// Route taken for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan: String,
    pub model: String,
    pub source_language: String,
    pub model_language: String,
    /// Backend calls made while translating, 0 for direct plans.
    pub chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub language: String,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub subtask: Subtask,
    pub items: BTreeMap<String, Prediction>,
    /// Items that could not be predicted, with the reason.
    #[serde(default)]
    pub errors: BTreeMap<String, String>,
}

impl PredictionSet {
    pub fn new(subtask: Subtask) -> Self {
        PredictionSet {
            subtask,
            items: BTreeMap::new(),
            errors: BTreeMap::new(),
        }
    }

    pub fn labels(&self) -> BTreeMap<String, Vec<bool>> {
        self.items.iter().map(|(k, p)| (k.clone(), p.labels.clone())).collect()
    }

    pub fn languages(&self) -> BTreeMap<String, String> {
        self.items.iter().map(|(k, p)| (k.clone(), p.language.clone())).collect()
    }

    /// Tab-separated `key<TAB>labels` in the label-file format of the subtask.
    pub fn to_label_tsv(&self) -> String {
        let registry = self.subtask.registry();
        let mut out = String::new();
        for (k, p) in &self.items {
            let value = if self.subtask.is_multilabel() {
                registry.format_set(&p.labels)
            } else {
                p.labels
                    .iter()
                    .position(|&b| b)
                    .map(|i| registry.names()[i].clone())
                    .unwrap_or_default()
            };
            let _ = writeln!(out, "{k}\t{value}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One prepared input: cleaned and truncated text with its key and language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictInput {
    pub key: String,
    pub language: String,
    pub text: String,
}

/// Predicts with a checkpoint whose vocabulary hash is `vocab_hash`.
pub fn predict(model: &Model, vocab_hash: &str, vocab: &Vocab, task: Subtask, inputs: &[PredictInput], threshold: f64) -> Result<PredictionSet> {
    if vocab.hash() != vocab_hash {
        return Err(Error::Compatibility(format!(
            "vocabulary hash {} does not match checkpoint {vocab_hash}",
            vocab.hash()
        )));
    }
    let seqs: Vec<_> = inputs.iter().map(|i| encode(&i.text, vocab, model.config.max_len)).collect();
    let logits = forward_classify(model, task, &seqs)?;
    Ok(decode_batch(task, inputs, &logits, threshold))
}

pub fn decode_batch(task: Subtask, inputs: &[PredictInput], logits: &Tensor, threshold: f64) -> PredictionSet {
    let mut set = PredictionSet::new(task);
    for (r, input) in inputs.iter().enumerate() {
        let (labels, scores) = decode(task, logits.row(r), threshold);
        set.items.insert(
            input.key.clone(),
            Prediction {
                language: input.language.clone(),
                labels,
                scores,
                route: None,
            },
        );
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub name: String,
    pub validation_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    /// Index of the member with the highest validation score among
    /// `candidates` (first listed wins equal scores).
    fn best_of(&self, candidates: impl Iterator<Item = usize>) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in candidates {
            if best.map_or(true, |b| self.members[i].validation_score > self.members[b].validation_score) {
                best = Some(i);
            }
        }
        best
    }
}

/// Hard majority vote for one item. Genre takes the plurality label, and an
/// exact tie goes to the best-validated member among those voting for a
/// tied label. Multilabel classes are on with more than half the votes; at
/// exactly half the best-validated member decides.
pub fn vote(task: Subtask, votes: &[Vec<bool>], spec: &EnsembleSpec) -> Vec<bool> {
    let m = votes.len();
    let c = votes[0].len();
    let counts: Vec<usize> = (0..c).map(|k| votes.iter().filter(|v| v[k]).count()).collect();
    if task.is_multilabel() {
        let best = spec.best_of(0..m).expect("non-empty ensemble");
        (0..c)
            .map(|k| {
                let twice = 2 * counts[k];
                if twice > m {
                    true
                } else if twice == m {
                    votes[best][k]
                } else {
                    false
                }
            })
            .collect()
    } else {
        let top = *counts.iter().max().unwrap_or(&0);
        let tied: Vec<usize> = (0..c).filter(|&k| counts[k] == top).collect();
        let winner = if tied.len() == 1 {
            tied[0]
        } else {
            let voters = (0..m).filter(|&i| votes[i].iter().position(|&b| b).is_some_and(|k| tied.contains(&k)));
            let best = spec.best_of(voters).expect("tied labels have voters");
            votes[best].iter().position(|&b| b).expect("one-hot vote")
        };
        (0..c).map(|k| k == winner).collect()
    }
}

/// Combines member predictions over the same items. Scores of the result
/// are per-class vote fractions.
pub fn ensemble_vote(members: &[PredictionSet], spec: &EnsembleSpec, task: Subtask) -> Result<PredictionSet> {
    if members.len() < 2 || members.len() != spec.members.len() {
        return Err(Error::Contract(format!(
            "ensemble needs at least two members with validation scores, got {} predictions and {} scores",
            members.len(),
            spec.members.len()
        )));
    }
    let first = &members[0];
    for (i, m) in members.iter().enumerate() {
        if m.subtask != task {
            return Err(Error::Contract(format!("member {i} predicted {} instead of {task}", m.subtask)));
        }
        if m.items.len() != first.items.len() || m.items.keys().zip(first.items.keys()).any(|(a, b)| a != b) {
            return Err(Error::Contract(format!("member {i} covers a different item set")));
        }
    }
    let mut out = PredictionSet::new(task);
    for (key, p0) in &first.items {
        let votes: Vec<Vec<bool>> = members.iter().map(|m| m.items[key].labels.clone()).collect();
        let labels = vote(task, &votes, spec);
        let n = votes.len() as f64;
        let scores = (0..labels.len())
            .map(|k| votes.iter().filter(|v| v[k]).count() as f64 / n)
            .collect();
        out.items.insert(
            key.clone(),
            Prediction {
                language: p0.language.clone(),
                labels,
                scores,
                route: p0.route.clone(),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "snake_case")]
pub enum RoutePlan {
    Direct { model: String },
    TranslateTest { target: String, model: String },
}

impl RoutePlan {
    pub fn model(&self) -> &str {
        match self {
            RoutePlan::Direct { model } | RoutePlan::TranslateTest { model, .. } => model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoutingTable(pub BTreeMap<String, RoutePlan>);

impl RoutingTable {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn plan(&self, language: &str) -> Result<&RoutePlan> {
        self.0.get(language).ok_or_else(|| Error::Routing(language.to_string()))
    }
}

/// Checkpoints sharing one vocabulary, voted when there is more than one.
pub struct RoutedModel<'a> {
    pub members: Vec<&'a Model>,
    pub spec: Option<EnsembleSpec>,
    pub vocab: &'a Vocab,
    pub vocab_hash: String,
}

impl RoutedModel<'_> {
    fn predict(&self, task: Subtask, inputs: &[PredictInput], threshold: f64) -> Result<PredictionSet> {
        let sets = self
            .members
            .iter()
            .map(|m| predict(m, &self.vocab_hash, self.vocab, task, inputs, threshold))
            .collect::<Result<Vec<_>>>()?;
        match (sets.len(), &self.spec) {
            (1, _) => Ok(sets.into_iter().next().expect("one member")),
            (_, Some(spec)) => ensemble_vote(&sets, spec, task),
            (n, None) => Err(Error::Contract(format!("{n} members without an ensemble spec"))),
        }
    }
}

/// Predicts every input through the plan of its language. Translate-test
/// plans translate the text into the plan's target language first; a
/// translation failure is recorded for that item and the run continues.
pub fn route_and_predict(
    inputs: &[PredictInput],
    table: &RoutingTable,
    backend: &dyn TranslationBackend,
    models: &BTreeMap<String, RoutedModel<'_>>,
    task: Subtask,
    threshold: f64,
) -> Result<PredictionSet> {
    for input in inputs {
        let plan = table.plan(&input.language)?;
        if !models.contains_key(plan.model()) {
            return Err(Error::Routing(format!("{} (model {} not loaded)", input.language, plan.model())));
        }
    }
    // Group inputs per (model, model language) so each group runs once.
    let mut groups: BTreeMap<(String, String), Vec<(PredictInput, Provenance)>> = BTreeMap::new();
    let mut out = PredictionSet::new(task);
    for input in inputs {
        let plan = table.plan(&input.language)?;
        let (text, route) = match plan {
            RoutePlan::Direct { model } => (
                input.text.clone(),
                Provenance {
                    plan: "direct".into(),
                    model: model.clone(),
                    source_language: input.language.clone(),
                    model_language: input.language.clone(),
                    chunks: 0,
                },
            ),
            RoutePlan::TranslateTest { target, model } => {
                match translate_text(backend, &input.text, &Language::new(&input.language), &Language::new(target)) {
                    Ok(t) => (
                        t.text,
                        Provenance {
                            plan: "translate_test".into(),
                            model: model.clone(),
                            source_language: input.language.clone(),
                            model_language: target.clone(),
                            chunks: t.chunks,
                        },
                    ),
                    Err(e) => {
                        out.errors.insert(input.key.clone(), e.to_string());
                        continue;
                    }
                }
            }
        };
        groups
            .entry((route.model.clone(), route.model_language.clone()))
            .or_default()
            .push((
                PredictInput {
                    key: input.key.clone(),
                    language: input.language.clone(),
                    text,
                },
                route,
            ));
    }
    for ((model, _), items) in groups {
        let batch: Vec<PredictInput> = items.iter().map(|(i, _)| i.clone()).collect();
        let preds = models[&model].predict(task, &batch, threshold)?;
        for (input, route) in items {
            let mut p = preds.items[&input.key].clone();
            p.route = Some(route);
            out.items.insert(input.key, p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(scores: &[f64]) -> EnsembleSpec {
        EnsembleSpec {
            members: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| EnsembleMember {
                    name: format!("m{i}"),
                    validation_score: s,
                })
                .collect(),
        }
    }

    fn one_hot(k: usize) -> Vec<bool> {
        (0..3).map(|i| i == k).collect()
    }

    #[test]
    fn threshold_decoding() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let (labels, _) = decode(Subtask::Framing, &[logit(0.55), logit(0.35), logit(0.41)], 0.4);
        assert_eq!(labels, vec![true, false, true]);
        let (labels, _) = decode(Subtask::Framing, &[logit(0.1), logit(0.39)], 0.4);
        assert_eq!(labels, vec![false, false]);
        let (labels, scores) = decode(Subtask::Genre, &[2.0, 1.0, -1.0], 0.4);
        assert_eq!(labels, one_hot(0));
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn genre_plurality_and_tie() {
        let s = spec(&[0.6, 0.5, 0.9, 0.4]);
        // opinion=0, reporting=1, satire=2
        assert_eq!(vote(Subtask::Genre, &[one_hot(0), one_hot(0), one_hot(2), one_hot(1)], &s), one_hot(0));
        assert_eq!(vote(Subtask::Genre, &[one_hot(0), one_hot(0), one_hot(2), one_hot(2)], &s), one_hot(2));
    }

    #[test]
    fn multilabel_majority() {
        let s = spec(&[0.1, 0.2, 0.3]);
        let v = vec![vec![true, false, true], vec![true, true, false], vec![false, true, true]];
        assert_eq!(vote(Subtask::Framing, &v, &s), vec![true, true, true]);
        let s4 = spec(&[0.1, 0.9, 0.3, 0.2]);
        let v = vec![vec![true, true], vec![false, true], vec![true, false], vec![false, false]];
        // class 0: 2 of 4, best member (index 1) says off; class 1: 2 of 4, best says on
        assert_eq!(vote(Subtask::Framing, &v, &s4), vec![false, true]);
    }

    #[test]
    fn routing_table_json() {
        let t = RoutingTable::from_json(
            r#"{"de": {"plan":"direct","model":"multi"}, "es": {"plan":"translate_test","target":"en","model":"mono"}}"#,
        )
        .unwrap();
        assert_eq!(t.plan("de").unwrap(), &RoutePlan::Direct { model: "multi".into() });
        assert_eq!(
            t.plan("es").unwrap(),
            &RoutePlan::TranslateTest {
                target: "en".into(),
                model: "mono".into()
            }
        );
        assert!(matches!(t.plan("ka"), Err(Error::Routing(_))));
        assert_eq!(RoutingTable::from_json(&t.to_json().unwrap()).unwrap(), t);
    }

    #[test]
    fn coverage_mismatch() {
        let mut a = PredictionSet::new(Subtask::Genre);
        let p = Prediction {
            language: "en".into(),
            labels: one_hot(0),
            scores: vec![1.0, 0.0, 0.0],
            route: None,
        };
        a.items.insert("1".into(), p.clone());
        let mut b = a.clone();
        b.items.insert("2".into(), p);
        assert!(matches!(ensemble_vote(&[a, b], &spec(&[0.1, 0.2]), Subtask::Genre), Err(Error::Contract(_))));
    }
}
