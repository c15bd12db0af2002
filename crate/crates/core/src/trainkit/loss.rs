use crate::error::{domain, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Label-smoothed targets: `1 - eps` on the true class, `eps / (K - 1)`
/// on each other class. With a single class all mass stays on it.
pub fn smoothed_targets(targets: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(domain(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    let off = if classes > 1 { eps / (classes - 1) as f64 } else { 0.0 };
    let on = if classes > 1 { 1.0 - eps } else { 1.0 };
    let mut q = vec![off; targets.len() * classes];
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index { index: t, extent: classes });
        }
        q[r * classes + t] = on;
    }
    Tensor::new(vec![targets.len(), classes], q)
}

/// Mean over rows of `-sum_c q[c] * log_softmax(logits)[c]`.
pub fn smoothed_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
        return Err(Error::Dimension {
            op: "smoothed_cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let q = smoothed_targets(targets, shape[1], eps)?;
    let q = tape.constant(q);
    let lp = tape.log_softmax_rows(logits)?;
    let prod = tape.mul(lp, q)?;
    let total = tape.sum_all(prod)?;
    Ok(tape.scale(total, -1.0 / targets.len() as f64))
}

/// Row-wise argmax with ties to the lower index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
