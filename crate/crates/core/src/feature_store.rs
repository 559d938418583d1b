//! Confidence-binned, per-class feature storage.
//!
//! Samples are binned by classifier confidence (max softmax probability at
//! temperature 1) into `[lambda_a, lambda_b]` in steps of `step`, and stored
//! separately for real and fake ground truth. Each (bin, class) cell keeps a
//! running sum and count; its aggregate is the mean feature vector.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelHandle, ModelOutput};
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};

/// Tolerance when comparing a confidence against bin edges, so that
/// e.g. 0.6 lands in `[0.6, 0.7)` despite `0.5 + 0.1` rounding.
const EDGE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinSpec {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub step: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self { lambda_a: 0.5, lambda_b: 1.0, step: 0.1 }
    }
}

impl BinSpec {
    pub fn new(lambda_a: f64, lambda_b: f64, step: f64) -> Result<Self> {
        let spec = Self { lambda_a, lambda_b, step };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { lambda_a: a, lambda_b: b, step } = *self;
        if !(0.0..=1.0).contains(&a) || !(b > a && b <= 1.0) || !(step > 0.0) {
            return Err(Error::Config(format!(
                "bin spec needs 0 <= lambda_a < lambda_b <= 1 and step > 0, got ({a}, {b}, {step})"
            )));
        }
        let bins = (b - a) / step;
        if (bins - bins.round()).abs() > 1e-9 || bins.round() < 1.0 {
            return Err(Error::Config(format!("(lambda_b - lambda_a) / step = {bins} is not a positive integer")));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        ((self.lambda_b - self.lambda_a) / self.step).round() as usize
    }

    /// `num_bins + 1` edges; bins are `[e_k, e_{k+1})` except the last,
    /// which is closed at `lambda_b`.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.num_bins();
        (0..=n).map(|k| if k == n { self.lambda_b } else { self.lambda_a + k as f64 * self.step }).collect()
    }

    pub fn assign(&self, confidence: f64) -> Result<Option<usize>> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::NumericInput(format!("confidence {confidence} outside [0, 1]")));
        }
        let edges = self.edges();
        let n = self.num_bins();
        if confidence < edges[0] - EDGE_EPS || confidence > edges[n] + EDGE_EPS {
            return Ok(None);
        }
        let k = edges[..n].iter().rposition(|&e| confidence >= e - EDGE_EPS).unwrap_or(0);
        Ok(Some(k))
    }
}

/// Bin index of a confidence, or `None` when it falls outside the stored range.
pub fn assign_bin(confidence: f64, spec: &BinSpec) -> Result<Option<usize>> {
    spec.assign(confidence)
}

/// Whose confidence decides a student sample's bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreBinning {
    /// Each model bins by its own confidence.
    #[default]
    OwnConfidence,
    /// Student samples reuse the teacher's bins, fixing membership.
    TeacherConfidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    spec: BinSpec,
    dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl FeatureStore {
    pub fn new(spec: BinSpec, dim: usize) -> Self {
        let cells = spec.num_bins() * NUM_CLASSES;
        Self { spec, dim, sums: vec![vec![0.0; dim]; cells], counts: vec![0; cells] }
    }

    pub fn spec(&self) -> &BinSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn cell_index(bin: usize, label: Label) -> usize {
        bin * NUM_CLASSES + label.index()
    }

    pub fn cell_count(&self, cell: usize) -> usize {
        self.counts[cell]
    }

    pub fn count(&self, bin: usize, label: Label) -> usize {
        self.counts[Self::cell_index(bin, label)]
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn nonempty_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Mean feature of a cell, `None` if the cell is empty.
    pub fn aggregate_cell(&self, cell: usize) -> Option<Vec<f64>> {
        let n = self.counts[cell];
        (n > 0).then(|| self.sums[cell].iter().map(|s| s / n as f64).collect())
    }

    pub fn aggregate(&self, bin: usize, label: Label) -> Option<Vec<f64>> {
        self.aggregate_cell(Self::cell_index(bin, label))
    }

    /// Adds one sample; returns the cell it landed in, if any.
    pub fn accumulate(&mut self, features: &[f64], confidence: f64, label: Label) -> Result<Option<usize>> {
        if features.len() != self.dim {
            return Err(Error::StoreContract(format!(
                "feature dimension {} does not match store dimension {}",
                features.len(),
                self.dim
            )));
        }
        let Some(bin) = self.spec.assign(confidence)? else {
            return Ok(None);
        };
        let cell = Self::cell_index(bin, label);
        for (s, f) in self.sums[cell].iter_mut().zip(features) {
            *s += f;
        }
        self.counts[cell] += 1;
        Ok(Some(cell))
    }

    /// Adds one feature vector to an explicit cell, bypassing binning.
    pub fn add_to_cell(&mut self, cell: usize, features: &[f64]) -> Result<()> {
        if cell >= self.num_cells() || features.len() != self.dim {
            return Err(Error::StoreContract(format!(
                "cell {cell} / dimension {} outside a store of {} cells x {}",
                features.len(),
                self.num_cells(),
                self.dim
            )));
        }
        for (s, f) in self.sums[cell].iter_mut().zip(features) {
            *s += f;
        }
        self.counts[cell] += 1;
        Ok(())
    }

    pub fn check_compatible(&self, other: &FeatureStore) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::StoreContract(format!("bin specs differ: {:?} vs {:?}", self.spec, other.spec)));
        }
        if self.dim != other.dim {
            return Err(Error::StoreContract(format!("feature dimensions differ: {} vs {}", self.dim, other.dim)));
        }
        Ok(())
    }

    /// SHA-256 over spec, counts and the bit patterns of every sum.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.spec.lambda_a, self.spec.lambda_b, self.spec.step] {
            h.update(v.to_le_bytes());
        }
        for (sum, count) in self.sums.iter().zip(&self.counts) {
            h.update((*count as u64).to_le_bytes());
            for v in sum {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let edges = self.spec.edges();
        let mut cells = Vec::new();
        for bin in 0..self.spec.num_bins() {
            for label in Label::ALL {
                cells.push(CellSnapshot {
                    bin,
                    lower: edges[bin],
                    upper: edges[bin + 1],
                    label,
                    count: self.count(bin, label),
                    aggregate: self.aggregate(bin, label),
                });
            }
        }
        StoreSnapshot { spec: self.spec, dim: self.dim, hash: self.content_hash(), cells }
    }
}

/// Serializable view of a store for reports and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub spec: BinSpec,
    pub dim: usize,
    pub hash: String,
    pub cells: Vec<CellSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSnapshot {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub label: Label,
    pub count: usize,
    pub aggregate: Option<Vec<f64>>,
}

/// A store plus the cell each input sample was assigned to.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreBuild {
    pub store: FeatureStore,
    pub membership: Vec<Option<usize>>,
}

/// Builds a store from precomputed model outputs. `bin_confidences`
/// overrides each output's own confidence when given.
pub fn store_from_outputs(spec: BinSpec, outputs: &[ModelOutput], labels: &[Label], bin_confidences: Option<&[f64]>) -> Result<StoreBuild> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput("feature store needs at least one sample".into()));
    }
    if outputs.len() != labels.len() || bin_confidences.is_some_and(|c| c.len() != outputs.len()) {
        return Err(Error::BatchContract("outputs, labels and confidences differ in length".into()));
    }
    let mut store = FeatureStore::new(spec, outputs[0].features.len());
    let mut membership = Vec::with_capacity(outputs.len());
    for (i, (out, &label)) in outputs.iter().zip(labels).enumerate() {
        let conf = bin_confidences.map_or_else(|| out.confidence(), |c| c[i]);
        membership.push(store.accumulate(&out.features_f64(), conf, label)?);
    }
    Ok(StoreBuild { store, membership })
}

/// Samples per forward call when sweeping a dataset.
const SWEEP_BATCH: usize = 64;

/// Runs a model over samples in order.
pub fn forward_samples(model: &ModelHandle, samples: &[&Sample]) -> Result<Vec<ModelOutput>> {
    let mut outputs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SWEEP_BATCH) {
        let batch: Vec<_> = chunk.iter().map(|s| s.tensor()).collect();
        outputs.extend(model.forward(&batch)?);
    }
    Ok(outputs)
}

/// One forward pass over `samples`, binning by the model's own confidence
/// and separating cells by ground-truth label.
pub fn build_store(model: &ModelHandle, samples: &[&Sample], spec: BinSpec) -> Result<FeatureStore> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("feature store dataset is empty".into()));
    }
    let outputs = forward_samples(model, samples)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    Ok(store_from_outputs(spec, &outputs, &labels, None)?.store)
}

/// Rebuilds the student's store from its current parameters. Identical to
/// [`build_store`]; the teacher's store is built once and never refreshed.
pub fn refresh_student_store(student: &ModelHandle, samples: &[&Sample], spec: BinSpec) -> Result<FeatureStore> {
    build_store(student, samples, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn assign_bin_examples() {
        let spec = BinSpec::default();
        assert_eq!(spec.num_bins(), 5);
        assert_eq!(assign_bin(0.55, &spec).unwrap(), Some(0));
        assert_eq!(assign_bin(0.45, &spec).unwrap(), None);
        assert_eq!(assign_bin(1.0, &spec).unwrap(), Some(4));
        assert_eq!(assign_bin(0.5, &spec).unwrap(), Some(0));
        assert_eq!(assign_bin(0.6, &spec).unwrap(), Some(1));
        assert_eq!(assign_bin(0.7, &spec).unwrap(), Some(2));
        assert_eq!(assign_bin(0.8, &spec).unwrap(), Some(3));
        assert_eq!(assign_bin(0.9, &spec).unwrap(), Some(4));
        assert_eq!(assign_bin(0.6999999, &spec).unwrap(), Some(1));
        assert!(matches!(assign_bin(1.2, &spec), Err(Error::NumericInput(_))));
        assert!(matches!(assign_bin(-0.1, &spec), Err(Error::NumericInput(_))));
    }

    #[test]
    fn bin_spec_validation() {
        assert!(BinSpec::new(0.5, 1.0, 0.1).is_ok());
        assert!(BinSpec::new(0.5, 1.0, 0.3).is_err());
        assert!(BinSpec::new(0.7, 0.6, 0.1).is_err());
        assert!(BinSpec::new(0.5, 1.0, 0.0).is_err());
        assert_eq!(BinSpec::new(0.0, 1.0, 0.25).unwrap().num_bins(), 4);
    }

    #[test]
    fn accumulate_examples() {
        let mut s = FeatureStore::new(BinSpec::default(), 2);
        s.accumulate(&[1.0, 2.0], 0.95, Label::Fake).unwrap();
        assert_eq!(s.nonempty_cells(), 1);
        assert_eq!(s.count(4, Label::Fake), 1);

        let mut s = FeatureStore::new(BinSpec::default(), 2);
        s.accumulate(&[1.0, 2.0], 0.71, Label::Real).unwrap();
        s.accumulate(&[3.0, -2.0], 0.72, Label::Real).unwrap();
        assert_eq!(s.aggregate(2, Label::Real).unwrap(), vec![2.0, 0.0]);

        let mut s = FeatureStore::new(BinSpec::default(), 2);
        let before = s.clone();
        assert_eq!(s.accumulate(&[1.0, 2.0], 0.3, Label::Real).unwrap(), None);
        assert_eq!(s, before);

        assert!(matches!(s.accumulate(&[1.0], 0.8, Label::Real), Err(Error::StoreContract(_))));
    }

    #[test]
    fn empty_outputs_rejected() {
        assert!(matches!(store_from_outputs(BinSpec::default(), &[], &[], None), Err(Error::EmptyInput(_))));
    }

    fn output(features: Vec<f32>, margin: f32) -> ModelOutput {
        ModelOutput { features, logits: [0.0, margin] }
    }

    #[test]
    fn two_confidence_levels_give_two_cells() {
        // logit margin m gives confidence sigmoid(m): 4.6 -> 0.990, 0.2 -> 0.550
        let outs = vec![output(vec![1.0], 4.6), output(vec![2.0], -0.2), output(vec![3.0], 4.6), output(vec![0.0], -0.2)];
        let labels = [Label::Fake, Label::Real, Label::Fake, Label::Real];
        let b = store_from_outputs(BinSpec::default(), &outs, &labels, None).unwrap();
        assert_eq!(b.store.nonempty_cells(), 2);
        assert_eq!(b.store.aggregate(4, Label::Fake).unwrap(), vec![2.0]);
        assert_eq!(b.store.aggregate(0, Label::Real).unwrap(), vec![1.0]);
    }

    proptest! {
        #[test]
        fn partition_property(confs in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            let spec = BinSpec::default();
            let mut s = FeatureStore::new(spec, 1);
            let mut excluded = 0;
            for c in &confs {
                if s.accumulate(&[1.0], *c, Label::Real).unwrap().is_none() {
                    excluded += 1;
                    prop_assert!(*c < spec.lambda_a);
                }
            }
            prop_assert_eq!(s.total_count() + excluded, confs.len());
        }

        #[test]
        fn aggregate_within_hull(feats in proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), 1..30)) {
            let mut s = FeatureStore::new(BinSpec::default(), 3);
            for f in &feats {
                s.accumulate(f, 0.93, Label::Fake).unwrap();
            }
            let agg = s.aggregate(4, Label::Fake).unwrap();
            for d in 0..3 {
                let lo = feats.iter().map(|f| f[d]).fold(f64::INFINITY, f64::min);
                let hi = feats.iter().map(|f| f[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(agg[d] >= lo - 1e-12 && agg[d] <= hi + 1e-12);
            }
        }

        #[test]
        fn label_permutation_swaps_cells(entries in proptest::collection::vec((proptest::array::uniform2(-3.0f64..3.0), 0.5f64..=1.0, proptest::bool::ANY), 1..40)) {
            let spec = BinSpec::default();
            let mut a = FeatureStore::new(spec, 2);
            let mut b = FeatureStore::new(spec, 2);
            for (f, c, fake) in &entries {
                let l = if *fake { Label::Fake } else { Label::Real };
                a.accumulate(f, *c, l).unwrap();
                b.accumulate(f, *c, l.flipped()).unwrap();
            }
            for bin in 0..spec.num_bins() {
                for l in Label::ALL {
                    prop_assert_eq!(a.count(bin, l), b.count(bin, l.flipped()));
                    prop_assert_eq!(a.aggregate(bin, l), b.aggregate(bin, l.flipped()));
                }
            }
        }
    }
}
