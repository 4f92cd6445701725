//! Loss terms recorded on a tape. Every function returns a scalar `Var`.

use super::{FisherState, PrototypeBank};
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var, KL_Q_FLOOR};

fn zero<S: Scalar>(tape: &mut Tape<S>) -> Var {
    tape.constant(Tensor::scalar(S::zero()))
}

/// Mean over the batch of `−log softmax(logits)[label]`, over every head column.
pub fn loss_ce<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let width = tape.value(logits).matrix_dims().1;
    if let Some(&bad) = labels.iter().find(|&&y| y >= width) {
        return Err(Error::Parameter(format!("label {bad} outside a head of {width} classes")));
    }
    let ls = tape.log_softmax(logits, S::one())?;
    let picked = tape.pick(ls, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -S::one())
}

// Row `row` of `logits`, truncated to its first `width` columns.
fn row_prefix<S: Scalar>(tape: &mut Tape<S>, logits: Var, row: usize, width: usize) -> Result<Var> {
    let r = tape.slice_rows(logits, row, 1)?;
    let cols = tape.value(r).matrix_dims().1;
    if width == 0 || width > cols {
        return Err(Error::InternalState(format!(
            "stored logit width {width} does not fit a head of {cols}"
        )));
    }
    if width == cols {
        Ok(r)
    } else {
        tape.slice_cols(r, 0, width)
    }
}

/// Mean over `rows` of the per-row mean squared error against `targets`,
/// each compared over its own length (the width it was recorded at).
pub fn loss_logit_mse<S: Scalar>(tape: &mut Tape<S>, logits: Var, rows: &[usize], targets: &[Vec<S>]) -> Result<Var> {
    if rows.len() != targets.len() {
        return Err(Error::Usage("one target per replay row".into()));
    }
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let mut acc: Option<Var> = None;
    for (&r, t) in rows.iter().zip(targets) {
        let cur = row_prefix(tape, logits, r, t.len())?;
        let tgt = tape.constant(Tensor::new(vec![1, t.len()], t.clone())?);
        let d = tape.sub(cur, tgt)?;
        let sq = tape.square(d)?;
        let m = tape.mean(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    tape.scale(acc.expect("rows is non-empty"), S::one() / S::lit(rows.len() as f64))
}

/// Batch mean of `KL(softmax(z/T) ‖ softmax(z_old/T))`, `z` restricted to
/// the stored width. Only the current logits receive gradient.
pub fn loss_distill<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    rows: &[usize],
    stored: &[Vec<S>],
    temperature: S,
) -> Result<Var> {
    if rows.len() != stored.len() {
        return Err(Error::Usage("one stored logit vector per replay row".into()));
    }
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let floor = S::lit(KL_Q_FLOOR);
    let mut acc: Option<Var> = None;
    for (&r, old) in rows.iter().zip(stored) {
        let cur = row_prefix(tape, logits, r, old.len())?;
        let log_p = tape.log_softmax(cur, temperature)?;
        let p = tape.exp(log_p)?;
        let q = crate::numcore::softmax_t(old, temperature)?;
        let log_q: Vec<S> = q.iter().map(|v| v.max(floor).ln()).collect();
        let log_q = tape.constant(Tensor::new(vec![1, old.len()], log_q)?);
        let diff = tape.sub(log_p, log_q)?;
        let terms = tape.mul(p, diff)?;
        let kl = tape.sum(terms)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    tape.scale(acc.expect("rows is non-empty"), S::one() / S::lit(rows.len() as f64))
}

/// `(1/N) Σ ‖f_i − p_{y_i}‖²` with the centroids held constant.
pub fn loss_attraction<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    labels: &[usize],
    bank: &PrototypeBank<S>,
) -> Result<Var> {
    let (n, d) = tape.value(features).matrix_dims();
    if n != labels.len() {
        return Err(Error::Usage("one label per feature row".into()));
    }
    let mut target = Vec::with_capacity(n * d);
    for &y in labels {
        let c = bank
            .centroid(y)
            .ok_or_else(|| Error::InternalState(format!("no prototype for class {y}")))?;
        if c.len() != d {
            return Err(Error::Dimension {
                op: "loss_attraction",
                left: vec![d],
                right: vec![c.len()],
            });
        }
        target.extend_from_slice(c);
    }
    let target = tape.constant(Tensor::new(vec![n, d], target)?);
    let diff = tape.sub(features, target)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, S::one() / S::lit(n as f64))
}

/// Ordered-pair mean of `exp(−‖p_i − p_j‖)` over the `classes` given. A
/// class present in the batch is represented by the mean of its feature
/// rows; an absent one by its bank centroid (constant).
pub fn loss_repulsion<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    labels: &[usize],
    classes: &[usize],
    bank: &PrototypeBank<S>,
) -> Result<Var> {
    let c = classes.len();
    if c < 2 {
        return Ok(zero(tape));
    }
    let mut protos = Vec::with_capacity(c);
    for &k in classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        let p = if rows.is_empty() {
            let centroid = bank
                .centroid(k)
                .ok_or_else(|| Error::InternalState(format!("no prototype for class {k}")))?;
            tape.constant(Tensor::vector(centroid.to_vec())?)
        } else {
            tape.mean_rows(features, &rows)?
        };
        protos.push(p);
    }
    let stacked = tape.stack_rows(&protos)?;
    let dist = tape.pairwise_dist(stacked)?;
    let neg = tape.scale(dist, -S::one())?;
    let sim = tape.exp(neg)?;
    let mask: Vec<S> = (0..c * c)
        .map(|k| if k / c == k % c { S::zero() } else { S::one() })
        .collect();
    let off = tape.mul_const(sim, mask)?;
    let s = tape.sum(off)?;
    tape.scale(s, S::one() / S::lit((c * (c - 1)) as f64))
}

/// `(λ/2) Σ_tasks Σ_i F_i (θ_i − θ*_i)²` over the parameter prefixes each
/// anchor was taken at.
pub fn loss_ewc<S: Scalar>(tape: &mut Tape<S>, params: &[Var], states: &[FisherState<S>], lambda: S) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let half = lambda * S::lit(0.5);
    for st in states {
        if st.importance.len() != params.len() {
            return Err(Error::InternalState("anchor does not match the parameter list".into()));
        }
        for ((&p, f), a) in params.iter().zip(&st.importance).zip(&st.anchor) {
            if f.is_empty() {
                continue;
            }
            let w: Vec<S> = f.iter().map(|v| *v * half).collect();
            let term = tape.anchored_quadratic(p, a.clone(), w)?;
            acc = Some(match acc {
                Some(x) => tape.add(x, term)?,
                None => term,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| zero(tape)))
}

/// Weighted pieces of one ProDER step, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct ProderTerms {
    pub total: Var,
    pub ce: Var,
    pub distill: Var,
    pub attraction: Var,
    pub repulsion: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ProderWeights<S> {
    pub alpha: S,
    pub beta: S,
    pub gamma: S,
    pub temperature: S,
}

/// `CE(all rows) + α·distill(replay rows) + β·attraction + γ·repulsion`.
#[allow(clippy::too_many_arguments)]
pub fn proder_step_loss<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    logits: Var,
    labels: &[usize],
    replay_rows: &[usize],
    stored: &[Vec<S>],
    seen_classes: &[usize],
    bank: &PrototypeBank<S>,
    w: ProderWeights<S>,
) -> Result<ProderTerms> {
    let ce = loss_ce(tape, logits, labels)?;
    let distill = loss_distill(tape, logits, replay_rows, stored, w.temperature)?;
    let attraction = loss_attraction(tape, features, labels, bank)?;
    let repulsion = loss_repulsion(tape, features, labels, seen_classes, bank)?;
    let a = tape.scale(distill, w.alpha)?;
    let b = tape.scale(attraction, w.beta)?;
    let g = tape.scale(repulsion, w.gamma)?;
    let t = tape.add(ce, a)?;
    let t = tape.add(t, b)?;
    let total = tape.add(t, g)?;
    Ok(ProderTerms {
        total,
        ce,
        distill,
        attraction,
        repulsion,
    })
}

/// `CE(task rows) + α·MSE(replay logits, stored) + β·CE(replay rows)`.
pub fn derpp_step_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    labels: &[usize],
    replay_rows: &[usize],
    stored: &[Vec<S>],
    alpha: S,
    beta: S,
) -> Result<Var> {
    let n = labels.len();
    let task_rows: Vec<usize> = (0..n).filter(|r| !replay_rows.contains(r)).collect();
    let task_logits = tape.gather_rows(logits, &task_rows)?;
    let task_labels: Vec<usize> = task_rows.iter().map(|&r| labels[r]).collect();
    let mut total = loss_ce(tape, task_logits, &task_labels)?;
    if !replay_rows.is_empty() {
        let mse = loss_logit_mse(tape, logits, replay_rows, stored)?;
        let mse = tape.scale(mse, alpha)?;
        let rep_logits = tape.gather_rows(logits, replay_rows)?;
        let rep_labels: Vec<usize> = replay_rows.iter().map(|&r| labels[r]).collect();
        let rce = loss_ce(tape, rep_logits, &rep_labels)?;
        let rce = tape.scale(rce, beta)?;
        total = tape.add(total, mse)?;
        total = tape.add(total, rce)?;
    }
    Ok(total)
}
