//! Patience-based early stopping on a validation score history.

/// A score counts as an improvement only when it beats the best so far by
/// more than this margin.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// Index of the best entry; later entries must beat it by
/// [`MIN_IMPROVEMENT`] to replace it, so ties keep the earliest.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in history.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b + MIN_IMPROVEMENT => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// True once `patience` consecutive entries have passed without improving
/// on the best score.
pub fn early_stopper(history: &[f64], patience: usize) -> bool {
    match best_index(history) {
        Some(best) => history.len() - 1 - best >= patience,
        None => false,
    }
}
