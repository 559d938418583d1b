//! Frame-level F1 evaluation with "fake" as the positive class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelHandle;
use crate::datagen::{DomainDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::feature_store::forward_samples;
use crate::label::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[Label], labels: &[Label]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::EmptyInput("no predictions to score".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::BatchContract(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (p, l) in predictions.iter().zip(labels) {
            match (p, l) {
                (Label::Fake, Label::Fake) => c.tp += 1,
                (Label::Fake, Label::Real) => c.fp += 1,
                (Label::Real, Label::Real) => c.tn += 1,
                (Label::Real, Label::Fake) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }
}

pub fn f1_score(predictions: &[Label], labels: &[Label]) -> Result<f64> {
    Confusion::from_predictions(predictions, labels).map(|c| c.f1())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Score one majority-vote prediction per group instead of per frame.
    pub group_vote: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Parameter hash of the evaluated model.
    pub model_hash: String,
    pub domain: String,
    pub split: Split,
    pub group_vote: bool,
    pub confusion: Confusion,
    pub f1: f64,
    pub accuracy: f64,
}

/// Argmax predictions of `model` on `samples`, in order.
pub fn predict(model: &ModelHandle, samples: &[&Sample]) -> Result<Vec<Label>> {
    Ok(forward_samples(model, samples)?.iter().map(|o| o.predicted()).collect())
}

pub fn evaluate_samples(model: &ModelHandle, samples: &[&Sample], opts: EvalOptions) -> Result<Confusion> {
    let preds = predict(model, samples)?;
    if !opts.group_vote {
        let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
        return Confusion::from_predictions(&preds, &labels);
    }
    // ties vote real, matching the frame-level argmax rule
    let mut votes: BTreeMap<(&str, u32), (Label, usize, usize)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(&preds) {
        let e = votes.entry((&s.domain, s.group_id)).or_insert((s.label, 0, 0));
        match p {
            Label::Fake => e.1 += 1,
            Label::Real => e.2 += 1,
        }
    }
    let (preds, labels): (Vec<Label>, Vec<Label>) = votes
        .values()
        .map(|&(label, fake, real)| (if fake > real { Label::Fake } else { Label::Real }, label))
        .unzip();
    Confusion::from_predictions(&preds, &labels)
}

pub fn evaluate_model(model: &ModelHandle, dataset: &DomainDataset, split: Split) -> Result<EvalReport> {
    evaluate_with(model, dataset, split, EvalOptions::default())
}

pub fn evaluate_with(model: &ModelHandle, dataset: &DomainDataset, split: Split, opts: EvalOptions) -> Result<EvalReport> {
    let samples = dataset.require_split(split)?;
    let confusion = evaluate_samples(model, &samples, opts)?;
    Ok(EvalReport {
        model_hash: model.parameter_hash(),
        domain: dataset.domain.clone(),
        split,
        group_vote: opts.group_vote,
        f1: confusion.f1(),
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Teacher-by-domain test-split F1. Row `i` is the teacher trained on
/// `sources[i]`, column `j` the test split of `domains[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotMatrix {
    pub sources: Vec<String>,
    pub domains: Vec<String>,
    pub reports: Vec<Vec<EvalReport>>,
}

impl ZeroShotMatrix {
    pub fn f1(&self, row: usize, col: usize) -> f64 {
        self.reports[row][col].f1
    }

    pub fn f1_rows(&self) -> Vec<Vec<f64>> {
        self.reports.iter().map(|r| r.iter().map(|e| e.f1).collect()).collect()
    }

    pub fn entry_count(&self) -> usize {
        self.reports.iter().map(Vec::len).sum()
    }

    /// Column of the teacher's own source domain, if it is evaluated.
    pub fn diagonal_col(&self, row: usize) -> Option<usize> {
        self.domains.iter().position(|d| *d == self.sources[row])
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}", "teacher");
        for d in &self.domains {
            out.push_str(&format!(" {:>10}", d));
        }
        out.push('\n');
        for (src, row) in self.sources.iter().zip(&self.reports) {
            out.push_str(&format!("{:<12}", src));
            for e in row {
                out.push_str(&format!(" {:>10.4}", e.f1));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every teacher on every domain's test split exactly once.
pub fn zero_shot_matrix(teachers: &[(&str, &ModelHandle)], domains: &[&DomainDataset]) -> Result<ZeroShotMatrix> {
    let reports = teachers
        .iter()
        .map(|(_, model)| domains.iter().map(|d| evaluate_model(model, d, Split::Test)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(ZeroShotMatrix {
        sources: teachers.iter().map(|(s, _)| s.to_string()).collect(),
        domains: domains.iter().map(|d| d.domain.clone()).collect(),
        reports,
    })
}

/// Source / Target / Avg. row of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub method: String,
    pub source_domain: String,
    pub target_domain: String,
    pub seed: u64,
    pub source: EvalReport,
    pub target: EvalReport,
    pub source_f1: f64,
    pub target_f1: f64,
    pub avg_f1: f64,
}

impl AdaptationReport {
    pub fn new(method: impl Into<String>, seed: u64, source: EvalReport, target: EvalReport) -> Self {
        Self {
            method: method.into(),
            source_domain: source.domain.clone(),
            target_domain: target.domain.clone(),
            seed,
            source_f1: source.f1,
            target_f1: target.f1,
            avg_f1: (source.f1 + target.f1) / 2.0,
            source,
            target,
        }
    }
}
