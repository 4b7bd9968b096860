use demandmap_core::labeling::{BinAssignment, Closeness};

use crate::CnnError;

pub const DEFAULT_LOSS_ALPHA: f64 = 0.7;

fn check(o: &[f64], l: usize, alpha: f64) -> Result<(), CnnError> {
    if let Some(v) = o.iter().find(|v| !v.is_finite()) {
        return Err(CnnError::Numeric(format!("non-finite logit {v}")));
    }
    if l >= o.len() {
        return Err(CnnError::Argument(format!("label {l} out of range for {} logits", o.len())));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CnnError::Argument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Numerically stable `log softmax(o)`.
pub fn log_softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + o.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    o.iter().map(|v| v - lse).collect()
}

pub fn cross_entropy(o: &[f64], l: usize) -> Result<f64, CnnError> {
    check(o, l, 1.0)?;
    Ok(-log_softmax(o)[l])
}

/// Cross-entropy against the true bin blended with cross-entropy against the
/// adjacent bin the value sits close to. Without a neighbor, or at
/// `alpha = 1`, this is plain cross-entropy.
pub fn boundary_aware_loss(o: &[f64], assignment: &BinAssignment, alpha: f64) -> Result<f64, CnnError> {
    let l = assignment.bin;
    check(o, l, alpha)?;
    let ls = log_softmax(o);
    match neighbor(assignment, o.len()) {
        Some(nb) if alpha < 1.0 => Ok(-(alpha * ls[l] + (1.0 - alpha) * ls[nb])),
        _ => Ok(-ls[l]),
    }
}

fn neighbor(a: &BinAssignment, classes: usize) -> Option<usize> {
    if a.closeness == Closeness::None {
        return None;
    }
    a.neighbor().filter(|&n| n < classes)
}

/// Loss and its gradient with respect to the logits:
/// `softmax(o) − (α·e_l + (1−α)·e_N)`.
pub fn loss_and_gradient(o: &[f64], assignment: &BinAssignment, alpha: f64) -> Result<(f64, Vec<f64>), CnnError> {
    let loss = boundary_aware_loss(o, assignment, alpha)?;
    let mut g: Vec<f64> = log_softmax(o).iter().map(|v| v.exp()).collect();
    match neighbor(assignment, o.len()) {
        Some(nb) if alpha < 1.0 => {
            g[assignment.bin] -= alpha;
            g[nb] -= 1.0 - alpha;
        }
        _ => g[assignment.bin] -= 1.0,
    }
    Ok((loss, g))
}

/// Mean loss over a batch of logit rows, with per-row gradients scaled by
/// `1 / batch`.
pub fn batch_loss_and_gradient(
    logits: &[Vec<f64>],
    assignments: &[&BinAssignment],
    alpha: f64,
) -> Result<(f64, Vec<Vec<f64>>), CnnError> {
    if logits.len() != assignments.len() || logits.is_empty() {
        return Err(CnnError::Argument(format!(
            "{} logit rows for {} assignments",
            logits.len(),
            assignments.len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (o, a) in logits.iter().zip(assignments) {
        let (l, mut g) = loss_and_gradient(o, a, alpha)?;
        total += l;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}
