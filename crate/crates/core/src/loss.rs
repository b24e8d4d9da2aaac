//! Training losses as fused tape operations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{log_softmax_rows, sigmoid};
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance on `Σ_k p_ik = 1` accepted by [`Tape::lovasz_softmax`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

/// Per-row class targets with a keep mask (`false` rows are ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub classes: Arc<Vec<usize>>,
    pub keep: Arc<Vec<bool>>,
}

impl Targets {
    pub fn new(classes: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        if classes.len() != keep.len() {
            return Err(Error::shape(format!(
                "targets: {} classes with {} mask entries",
                classes.len(),
                keep.len()
            )));
        }
        Ok(Self {
            classes: Arc::new(classes),
            keep: Arc::new(keep),
        })
    }

    /// Every row kept.
    pub fn all(classes: Vec<usize>) -> Self {
        let n = classes.len();
        Self::new(classes, vec![true; n]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    fn check(&self, op: &str, rows: usize, k: usize) -> Result<()> {
        if self.len() != rows {
            return Err(Error::shape(format!("{op}: {rows} rows, {} targets", self.len())));
        }
        if let Some(&c) = self
            .classes
            .iter()
            .zip(self.keep.iter())
            .find(|(&c, &keep)| keep && c >= k)
            .map(|(c, _)| c)
        {
            return Err(Error::invalid(format!("{op}: target class {c} with {k} classes")));
        }
        Ok(())
    }
}

fn rows_cols<T: Real>(tape: &Tape<T>, op: &str, x: Var) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [m, k] => Ok((m, k)),
        ref s => Err(Error::shape(format!("{op}: expected M×K, got {s:?}"))),
    }
}

/// Jaccard-extension weights of one class: `errors` sorted descending
/// (ties by row index), `g[j] = J(j) − J(j−1)` where `J(j)` is the Jaccard
/// loss of the top-`j+1` prefix.
fn lovasz_weights<T: Real>(errors: &[T], fg: &[bool]) -> (Vec<usize>, Vec<T>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let gts = fg.iter().filter(|&&f| f).count();
    let mut weights = Vec::with_capacity(order.len());
    let (mut cum_fg, mut cum_bg) = (0usize, 0usize);
    let mut prev = T::zero();
    for &i in &order {
        if fg[i] {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let inter = T::from_usize(gts - cum_fg).unwrap();
        let union = T::from_usize(gts + cum_bg).unwrap();
        let jac = T::one() - inter / union;
        weights.push(jac - prev);
        prev = jac;
    }
    (order, weights)
}

impl<T: Real> Tape<T> {
    /// Mean of `−log softmax(logits)[target]` over kept rows; 0 if none.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Targets) -> Result<Var> {
        let (m, k) = rows_cols(self, "cross_entropy", logits)?;
        targets.check("cross_entropy", m, k)?;
        let n = targets.kept();
        let logp = log_softmax_rows(self.value(logits).data(), k);
        let mut total = T::zero();
        for (r, (&c, &keep)) in targets.classes.iter().zip(targets.keep.iter()).enumerate() {
            if keep {
                total -= logp[r * k + c];
            }
        }
        let inv = if n > 0 { T::one() / T::from_usize(n).unwrap() } else { T::zero() };
        let t = targets.clone();
        Ok(self.record("cross_entropy", Tensor::scalar(total * inv), &[logits], move |ctx| {
            let scale = ctx.grad.item() * inv;
            let mut d = vec![T::zero(); m * k];
            for (r, (&c, &keep)) in t.classes.iter().zip(t.keep.iter()).enumerate() {
                if !keep {
                    continue;
                }
                for j in 0..k {
                    let p = logp[r * k + j].exp();
                    d[r * k + j] = scale * (p - if j == c { T::one() } else { T::zero() });
                }
            }
            vec![Some(Tensor::new(vec![m, k], d).unwrap())]
        }))
    }

    /// Mean over kept entries of the stable binary cross-entropy
    /// `max(z, 0) − z·t + ln(1 + e^{−|z|})`. `logits` may have any shape;
    /// targets are given in its row-major order.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[bool], keep: &[bool]) -> Result<Var> {
        let m = self.value(logits).len();
        if targets.len() != m || keep.len() != m {
            return Err(Error::shape(format!(
                "bce_with_logits: {m} logits, {} targets, {} mask entries",
                targets.len(),
                keep.len()
            )));
        }
        let z = self.value(logits).data();
        let n = keep.iter().filter(|&&k| k).count();
        let inv = if n > 0 { T::one() / T::from_usize(n).unwrap() } else { T::zero() };
        let mut total = T::zero();
        for i in 0..m {
            if keep[i] {
                let t = if targets[i] { T::one() } else { T::zero() };
                total += z[i].max(T::zero()) - z[i] * t + (-z[i].abs()).exp().ln_1p();
            }
        }
        let (targets, keep) = (targets.to_vec(), keep.to_vec());
        let shape = self.shape(logits).to_vec();
        Ok(self.record("bce_with_logits", Tensor::scalar(total * inv), &[logits], move |ctx| {
            let z = ctx.inputs[0].data();
            let scale = ctx.grad.item() * inv;
            let d = (0..m)
                .map(|i| {
                    if keep[i] {
                        let t = if targets[i] { T::one() } else { T::zero() };
                        scale * (sigmoid(z[i]) - t)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        }))
    }

    /// Lovász-softmax over kept rows of `probs: M×K`, averaged over the
    /// classes present among the kept targets; 0 if none.
    pub fn lovasz_softmax(&mut self, probs: Var, targets: &Targets) -> Result<Var> {
        let (m, k) = rows_cols(self, "lovasz_softmax", probs)?;
        targets.check("lovasz_softmax", m, k)?;
        let p = self.value(probs).data();
        let rows: Vec<usize> = (0..m).filter(|&r| targets.keep[r]).collect();
        for &r in &rows {
            let s: T = p[r * k..(r + 1) * k].iter().copied().sum();
            if (s.to_f64_lossy() - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "lovasz_softmax: row {r} sums to {s}, expected probabilities"
                )));
            }
        }
        let mut present = vec![false; k];
        for &r in &rows {
            present[targets.classes[r]] = true;
        }
        let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
        let mut total = T::zero();
        // Per class: rows in sorted order and their weights.
        let mut plans = Vec::with_capacity(classes.len());
        for &c in &classes {
            let fg: Vec<bool> = rows.iter().map(|&r| targets.classes[r] == c).collect();
            let errors: Vec<T> = rows
                .iter()
                .zip(&fg)
                .map(|(&r, &f)| {
                    let v = p[r * k + c];
                    if f {
                        T::one() - v
                    } else {
                        v
                    }
                })
                .collect();
            let (order, weights) = lovasz_weights(&errors, &fg);
            for (&i, &w) in order.iter().zip(&weights) {
                total += errors[i] * w;
            }
            plans.push((c, order, weights, fg));
        }
        let inv = if classes.is_empty() {
            T::zero()
        } else {
            T::one() / T::from_usize(classes.len()).unwrap()
        };
        Ok(self.record("lovasz_softmax", Tensor::scalar(total * inv), &[probs], move |ctx| {
            let scale = ctx.grad.item() * inv;
            let mut d = vec![T::zero(); m * k];
            for (c, order, weights, fg) in &plans {
                for (&i, &w) in order.iter().zip(weights) {
                    let r = rows[i];
                    // error = 1 − p for the class's own rows, p otherwise
                    d[r * k + c] += if fg[i] { -scale * w } else { scale * w };
                }
            }
            vec![Some(Tensor::new(vec![m, k], d).unwrap())]
        }))
    }

    /// `[1 − σ(z), σ(z)]` rows from occupancy logits of any shape.
    pub fn binary_probs(&mut self, logits: Var) -> Result<Var> {
        let n = self.value(logits).len();
        let z = self.reshape(logits, &[n, 1])?;
        let p = self.sigmoid(z);
        let q = self.affine(p, -T::one(), T::one());
        self.concat(&[q, p], 1)
    }
}

/// Scalar loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_bev: f64,
    pub l_s: f64,
    pub l_s_stages: [f64; 3],
    pub l_c: f64,
    pub l_c_stages: [f64; 3],
    pub l_total: f64,
}

/// `lovász(softmax) + CE` of one semantic stage.
pub fn semantic_stage_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &Targets) -> Result<Var> {
    let probs = tape.softmax(logits)?;
    let lov = tape.lovasz_softmax(probs, targets)?;
    let ce = tape.cross_entropy(logits, targets)?;
    tape.add(lov, ce)
}

/// `lovász(2-class) + BCE` of one completion stage.
pub fn completion_stage_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    occupied: &[bool],
    keep: &[bool],
) -> Result<Var> {
    let probs = tape.binary_probs(logits)?;
    let targets = Targets::new(occupied.iter().map(|&o| o as usize).collect(), keep.to_vec())?;
    let lov = tape.lovasz_softmax(probs, &targets)?;
    let bce = tape.bce_with_logits(logits, occupied, keep)?;
    tape.add(lov, bce)
}

/// Sum of the three semantic stage losses; also returns the stage terms.
pub fn semantic_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], targets: &[Targets]) -> Result<(Var, Vec<Var>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid("semantic_loss: one target set per stage"));
    }
    let stages = logits
        .iter()
        .zip(targets)
        .map(|(&l, t)| semantic_stage_loss(tape, l, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.add_n(&stages)?, stages))
}

/// Per-stage occupancy targets for [`completion_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTargets {
    pub occupied: Vec<bool>,
    pub keep: Vec<bool>,
}

pub fn completion_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    targets: &[OccupancyTargets],
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid("completion_loss: one target set per stage"));
    }
    let stages = logits
        .iter()
        .zip(targets)
        .map(|(&l, t)| completion_stage_loss(tape, l, &t.occupied, &t.keep))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.add_n(&stages)?, stages))
}

/// Full-resolution loss on `logits: B×K×Z×X×Y`; `targets` enumerate voxels
/// in `(b, z, x, y)` order.
pub fn bev_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &Targets) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("bev_loss: expected B×K×Z×X×Y, got {s:?}")));
    }
    let k = s[1];
    let rows = tape.permute(logits, &[0, 2, 3, 4, 1])?;
    let rows = tape.reshape(rows, &[s[0] * s[2] * s[3] * s[4], k])?;
    semantic_stage_loss(tape, rows, targets)
}

/// `w_bev·l_bev + l_s + l_c`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, bev: Var, sem: Var, com: Var, bev_weight: f64) -> Result<Var> {
    let b = tape.scalar_mul(bev, T::from_f64_lossy(bev_weight));
    tape.add_n(&[b, sem, com])
}
