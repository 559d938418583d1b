//! Temperature softmax, distillation and cross-entropy losses, the
//! feature-store square loss, and their weighted combination.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the student's logits (or features, for the square loss).
//! Batch losses are means over the batch; the square loss is a plain sum
//! over store cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the feature-store square loss.
    pub fsl_weight: f64,
    /// Weight of the distillation loss.
    pub kd_weight: f64,
    /// Weight of the cross-entropy loss.
    pub ce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 20.0, fsl_weight: 1.0, kd_weight: 1.0, ce_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn kd_only(temperature: f64) -> Self {
        Self { temperature, fsl_weight: 0.0, kd_weight: 1.0, ce_weight: 0.0 }
    }

    pub fn ce_only() -> Self {
        Self { temperature: 1.0, fsl_weight: 0.0, kd_weight: 0.0, ce_weight: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        for (name, w) in [("fsl_weight", self.fsl_weight), ("kd_weight", self.kd_weight), ("ce_weight", self.ce_weight)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-term loss values. Terms a method does not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fsl: Option<f64>,
    pub kd: Option<f64>,
    pub ce: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = fsl_weight * fsl + kd_weight * kd + ce_weight * ce`, summed
    /// left to right over the present terms.
    pub fn combine(cfg: &LossConfig, fsl: Option<f64>, kd: Option<f64>, ce: Option<f64>) -> Self {
        let mut total = 0.0;
        if let Some(v) = fsl {
            total += cfg.fsl_weight * v;
        }
        if let Some(v) = kd {
            total += cfg.kd_weight * v;
        }
        if let Some(v) = ce {
            total += cfg.ce_weight * v;
        }
        Self { fsl, kd, ce, total }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("temperature must be a finite positive number, got {t}")));
    }
    Ok(())
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logit vector".into()));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericInput(format!("logit {v}")));
    }
    Ok(())
}

/// Softmax of `logits / temperature`, with max-subtraction.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_logits(logits)?;
    Ok(softmax_unchecked(logits, temperature))
}

fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `log softmax(logits / temperature)` without forming the probabilities.
fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&x| (x - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - lse).collect()
}

/// Vector-Jacobian product of [`softmax_t`]: given `p = softmax_t(x)` and an
/// upstream gradient `u = dL/dp`, returns `dL/dx`.
pub fn softmax_t_vjp(probs: &[f64], upstream: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(upstream).map(|(p, u)| p * u).sum();
    probs.iter().zip(upstream).map(|(p, u)| p * (u - dot) / temperature).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// A scalar loss value and its gradient with respect to each sample's
/// student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

fn check_batch<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B], what: &str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyInput(format!("{what} batch")));
    }
    if a.len() != b.len() {
        return Err(Error::BatchContract(format!("{what}: batch lengths {} and {}", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.as_ref().len() != y.as_ref().len() {
            return Err(Error::BatchContract(format!(
                "{what}: sample {i} has widths {} and {}",
                x.as_ref().len(),
                y.as_ref().len()
            )));
        }
        check_logits(x.as_ref())?;
        check_logits(y.as_ref())?;
    }
    Ok(())
}

/// Distillation loss: batch mean of `-sum_i softmax_t(teacher)_i * log softmax_t(student)_i`.
///
/// Teacher logits are constants; the gradient covers the student only.
/// The minimum over students is the entropy of the teacher distribution.
pub fn kd_loss_grad<T: AsRef<[f64]>, S: AsRef<[f64]>>(teacher_logits: &[T], student_logits: &[S], temperature: f64) -> Result<LogitLoss> {
    check_temperature(temperature)?;
    check_batch(teacher_logits, student_logits, "kd_loss")?;
    let n = teacher_logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(teacher_logits.len());
    for (t, s) in teacher_logits.iter().zip(student_logits) {
        let q = softmax_unchecked(t.as_ref(), temperature);
        let log_p = log_softmax(s.as_ref(), temperature);
        value -= q.iter().zip(&log_p).map(|(q, lp)| q * lp).sum::<f64>();
        grad.push(q.iter().zip(&log_p).map(|(q, lp)| (lp.exp() - q) / (temperature * n)).collect());
    }
    Ok(LogitLoss { value: value / n, grad })
}

pub fn kd_loss<T: AsRef<[f64]>, S: AsRef<[f64]>>(teacher_logits: &[T], student_logits: &[S], temperature: f64) -> Result<f64> {
    kd_loss_grad(teacher_logits, student_logits, temperature).map(|l| l.value)
}

/// Cross-entropy at temperature 1 against target distributions (one-hot or
/// soft, e.g. from CutMix). Batch mean.
pub fn soft_ce_loss_grad<S: AsRef<[f64]>, T: AsRef<[f64]>>(student_logits: &[S], targets: &[T]) -> Result<LogitLoss> {
    check_batch(student_logits, targets, "ce_loss")?;
    let n = student_logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student_logits.len());
    for (s, y) in student_logits.iter().zip(targets) {
        let y = y.as_ref();
        if y.iter().any(|v| *v < 0.0) {
            return Err(Error::NumericInput("negative target probability".into()));
        }
        let mass: f64 = y.iter().sum();
        let log_p = log_softmax(s.as_ref(), 1.0);
        value -= y.iter().zip(&log_p).map(|(y, lp)| y * lp).sum::<f64>();
        grad.push(y.iter().zip(&log_p).map(|(y, lp)| (mass * lp.exp() - y) / n).collect());
    }
    Ok(LogitLoss { value: value / n, grad })
}

/// Cross-entropy with hard labels (class indices 0 = real, 1 = fake).
pub fn ce_loss_grad<S: AsRef<[f64]>>(student_logits: &[S], labels: &[usize]) -> Result<LogitLoss> {
    if student_logits.is_empty() {
        return Err(Error::EmptyInput("ce_loss batch".into()));
    }
    if student_logits.len() != labels.len() {
        return Err(Error::BatchContract(format!(
            "ce_loss: {} logit rows for {} labels",
            student_logits.len(),
            labels.len()
        )));
    }
    let targets = student_logits
        .iter()
        .zip(labels)
        .map(|(s, &l)| {
            if l > 1 {
                return Err(Error::Label(l));
            }
            let mut t = vec![0.0; s.as_ref().len()];
            if l >= t.len() {
                return Err(Error::Label(l));
            }
            t[l] = 1.0;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    soft_ce_loss_grad(student_logits, &targets)
}

pub fn ce_loss<S: AsRef<[f64]>>(student_logits: &[S], labels: &[usize]) -> Result<f64> {
    ce_loss_grad(student_logits, labels).map(|l| l.value)
}

/// Feature-store square loss: sum over (bin, class) cells of the squared
/// Euclidean distance between student and teacher aggregates. Cells empty
/// in either store contribute zero.
pub fn fsl_loss(student: &FeatureStore, teacher: &FeatureStore) -> Result<f64> {
    student.check_compatible(teacher)?;
    let mut total = 0.0;
    for cell in 0..student.num_cells() {
        if let (Some(s), Some(t)) = (student.aggregate_cell(cell), teacher.aggregate_cell(cell)) {
            total += s.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total)
}

/// Gradient of [`fsl_loss`] with respect to each cell's student aggregate,
/// `2 (student - teacher)`, or `None` for cells that do not contribute.
/// A member feature of cell `c` receives this divided by the cell count.
pub fn fsl_cell_gradients(student: &FeatureStore, teacher: &FeatureStore) -> Result<Vec<Option<Vec<f64>>>> {
    student.check_compatible(teacher)?;
    Ok((0..student.num_cells())
        .map(|cell| match (student.aggregate_cell(cell), teacher.aggregate_cell(cell)) {
            (Some(s), Some(t)) => {
                let n = student.cell_count(cell) as f64;
                Some(s.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / n).collect())
            }
            _ => None,
        })
        .collect())
}

/// Logit-space inputs of the combined objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    /// Teacher logits on the un-augmented batch.
    pub teacher_logits: &'a [[f64; 2]],
    /// Student logits on the un-augmented batch (distillation term).
    pub student_logits: &'a [[f64; 2]],
    /// Student logits on the (possibly augmented) batch (cross-entropy term).
    pub ce_logits: &'a [[f64; 2]],
    /// Target distributions for the cross-entropy term.
    pub ce_targets: &'a [[f64; 2]],
}

/// Loss value and gradients of the combined objective for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub breakdown: LossBreakdown,
    /// d total / d student logits of the un-augmented batch.
    pub d_student_logits: Vec<[f64; 2]>,
    /// d total / d student logits of the cross-entropy batch.
    pub d_ce_logits: Vec<[f64; 2]>,
}

/// Combined objective over logits: `fsl_weight * fsl + kd_weight * kd +
/// ce_weight * ce`. `fsl` is supplied precomputed because its gradient
/// flows through features, see [`fsl_cell_gradients`].
pub fn objective(cfg: &LossConfig, inputs: ObjectiveInputs<'_>, fsl: Option<f64>, use_kd: bool, use_ce: bool) -> Result<ObjectiveGrad> {
    cfg.validate()?;
    let kd = if use_kd {
        Some(kd_loss_grad(inputs.teacher_logits, inputs.student_logits, cfg.temperature)?)
    } else {
        None
    };
    let ce = if use_ce { Some(soft_ce_loss_grad(inputs.ce_logits, inputs.ce_targets)?) } else { None };
    let breakdown = LossBreakdown::combine(cfg, fsl, kd.as_ref().map(|l| l.value), ce.as_ref().map(|l| l.value));
    let scale = |grad: Option<&LogitLoss>, w: f64, n: usize| -> Vec<[f64; 2]> {
        match grad {
            Some(l) => l.grad.iter().map(|g| [w * g[0], w * g[1]]).collect(),
            None => vec![[0.0; 2]; n],
        }
    };
    Ok(ObjectiveGrad {
        breakdown,
        d_student_logits: scale(kd.as_ref(), cfg.kd_weight, inputs.student_logits.len()),
        d_ce_logits: scale(ce.as_ref(), cfg.ce_weight, inputs.ce_logits.len()),
    })
}

/// Inputs of the full combined objective at the logit/feature level, with
/// the student store rebuilt from `student_features` under fixed cell
/// membership `cells`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureObjectiveInputs<'a> {
    pub teacher_logits: &'a [[f64; 2]],
    pub student_logits: &'a [[f64; 2]],
    pub targets: &'a [[f64; 2]],
    pub student_features: &'a [Vec<f64>],
    pub cells: &'a [Option<usize>],
    pub teacher_store: &'a FeatureStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureObjectiveGrad {
    pub breakdown: LossBreakdown,
    pub d_logits: Vec<[f64; 2]>,
    pub d_features: Vec<Vec<f64>>,
}

/// All three terms on one set of student outputs; gradients flow to the
/// logits through distillation and cross-entropy and to the features
/// through the square loss.
pub fn fretal_objective(cfg: &LossConfig, inputs: FeatureObjectiveInputs<'_>) -> Result<FeatureObjectiveGrad> {
    let n = inputs.student_logits.len();
    if inputs.student_features.len() != n || inputs.cells.len() != n {
        return Err(Error::BatchContract("features, cells and logits differ in length".into()));
    }
    let dim = inputs.teacher_store.dim();
    let mut student = FeatureStore::new(*inputs.teacher_store.spec(), dim);
    for (f, cell) in inputs.student_features.iter().zip(inputs.cells) {
        if let Some(c) = cell {
            student.add_to_cell(*c, f)?;
        }
    }
    let fsl = fsl_loss(&student, inputs.teacher_store)?;
    let cell_grads = fsl_cell_gradients(&student, inputs.teacher_store)?;
    let logit_inputs = ObjectiveInputs {
        teacher_logits: inputs.teacher_logits,
        student_logits: inputs.student_logits,
        ce_logits: inputs.student_logits,
        ce_targets: inputs.targets,
    };
    let g = objective(cfg, logit_inputs, Some(fsl), true, true)?;
    let d_logits = g.d_student_logits.iter().zip(&g.d_ce_logits).map(|(a, b)| [a[0] + b[0], a[1] + b[1]]).collect();
    let d_features = inputs
        .cells
        .iter()
        .map(|cell| match cell.and_then(|c| cell_grads[c].as_ref()) {
            Some(g) => g.iter().map(|v| cfg.fsl_weight * v).collect(),
            None => vec![0.0; dim],
        })
        .collect();
    Ok(FeatureObjectiveGrad { breakdown: g.breakdown, d_logits, d_features })
}
