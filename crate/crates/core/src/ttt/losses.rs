use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `max(1, floor(ρ·N))`.
pub fn selection_size(num_views: usize, cutoff: f64) -> usize {
    ((cutoff * num_views as f64).floor() as usize).clamp(1, num_views.max(1))
}

/// Indices of the `max(1, floor(ρ·N))` lowest-entropy rows of a flat
/// `N×K` probability matrix, ordered by entropy, ties by index.
pub fn select_confident<F: Float>(probs: &[F], num_classes: usize, cutoff: f64) -> Vec<usize> {
    if num_classes == 0 || probs.is_empty() {
        return Vec::new();
    }
    let n = probs.len() / num_classes;
    let ent: Vec<f64> = probs
        .chunks(num_classes)
        .map(|row| entropy(&row.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ent[a].total_cmp(&ent[b]).then(a.cmp(&b)));
    order.truncate(selection_size(n, cutoff));
    order
}

/// Entropy of the mean of `[k, K]` probability rows, as a `[1]` variable.
pub fn mem_loss<F: Float>(tape: &mut Tape<F>, selected_probs: Var) -> Result<Var> {
    if tape.shape(selected_probs).len() != 2 {
        return Err(Error::shape("mem_loss", tape.shape(selected_probs), &[0, 0]));
    }
    let mean = tape.mean_rows(selected_probs)?;
    Ok(tape.entropy(mean))
}

/// Plain-number form of [`mem_loss`].
pub fn mem_loss_value(rows: &[&[f64]]) -> Result<f64> {
    let k = rows.first().ok_or_else(|| Error::invalid("empty selection"))?.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("probability rows differ in length"));
    }
    let mut mean = vec![0.0; k];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, &p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    Ok(entropy(&mean))
}

/// Mean squared error between the unmasked-pass `target` and the masked
/// pass, optionally with the target branch cut from the graph.
pub fn mae_loss<F: Float>(tape: &mut Tape<F>, target: Var, masked: Var, detach_target: bool) -> Result<Var> {
    let target = if detach_target { tape.detach(target) } else { target };
    tape.mse(masked, target)
}

/// `λ1·L_MEM + λ2·L_MAE`.
pub fn total_loss(mem: f64, mae: f64, lambda_mem: f64, lambda_mae: f64) -> f64 {
    lambda_mem * mem + lambda_mae * mae
}
