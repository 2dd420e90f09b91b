use qrw_tensor::{Tape, TensorError, Var};

use crate::model::PAD;

use super::Result;

/// Per-position weights `-1/rows` at non-pad targets, where `rows` counts
/// target rows with at least one non-pad token.
fn position_weights(targets: &[usize], t: usize) -> Vec<f64> {
    let rows = targets.chunks(t).filter(|r| r.iter().any(|&x| x != PAD)).count();
    let w = if rows == 0 { 0.0 } else { -1.0 / rows as f64 };
    targets.iter().map(|&x| if x == PAD { 0.0 } else { w }).collect()
}

fn check(t: &Tape, logits: Var, targets: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape(logits);
    if s.len() != 3 || s[0] * s[1] != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![targets.len()],
        }
        .into());
    }
    Ok((s[0], s[1], s[2]))
}

/// Token negative log-likelihood of `targets` (`[batch * T]`, PAD masked)
/// under `logits` (`[batch, T, |V|]`): summed over positions, averaged over
/// rows that have at least one target.
pub fn nll_loss(t: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (b, len, _) = check(t, logits, targets, "nll_loss")?;
    let lp = t.log_softmax(logits, 2)?;
    let picked = t.gather_last(lp, targets)?;
    let w = t.constant(&[b, len], position_weights(targets, len))?;
    let weighted = t.mul(picked, w)?;
    Ok(t.sum_all(weighted))
}

/// Cross-entropy of the model against teacher distributions
/// `teacher` (`[batch, T, |V|]` flattened), with the same masking and
/// normalization as [`nll_loss`].
pub fn kd_loss(t: &mut Tape, logits: Var, teacher: &[f64], targets: &[usize]) -> Result<Var> {
    let (b, len, v) = check(t, logits, targets, "kd_loss")?;
    if teacher.len() != b * len * v {
        return Err(TensorError::DataLength {
            len: teacher.len(),
            shape: vec![b, len, v],
        }
        .into());
    }
    let lp = t.log_softmax(logits, 2)?;
    let pw = position_weights(targets, len);
    let w: Vec<f64> = teacher
        .iter()
        .enumerate()
        .map(|(i, &p)| p * pw[i / v])
        .collect();
    let w = t.constant(&[b, len, v], w)?;
    let weighted = t.mul(lp, w)?;
    Ok(t.sum_all(weighted))
}

/// `(1 - gamma) * KD + gamma * NLL`.
pub fn distill_loss(t: &mut Tape, logits: Var, teacher: &[f64], targets: &[usize], gamma: f64) -> Result<Var> {
    let kd = kd_loss(t, logits, teacher, targets)?;
    let nll = nll_loss(t, logits, targets)?;
    let kd = t.scale(kd, 1.0 - gamma);
    let nll = t.scale(nll, gamma);
    Ok(t.add(kd, nll)?)
}

/// Row-wise softmax of a flat `[rows, v]` buffer.
pub fn softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(v) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
