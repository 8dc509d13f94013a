//! Triplet correspondence loss with per-scene hard-negative mining, the
//! grasp classification/regression loss, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GraspRect;
use crate::head::{MAX_ANGLE_DEG, RECT_WIDTH};
use crate::tape::{Tape, Var, NORM_FLOOR};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// Weight of the rectangle regression term.
    pub beta: f64,
    /// Weight of the correspondence loss in the total.
    pub lambda_c: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.4,
            lambda_c: 0.8,
            smooth_l1_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda_c >= 0.0) {
            return Err(Error::Config(format!("lambda_c must be >= 0, got {}", self.lambda_c)));
        }
        if !(self.smooth_l1_delta > 0.0) {
            return Err(Error::Config(format!(
                "smooth_l1_delta must be > 0, got {}",
                self.smooth_l1_delta
            )));
        }
        Ok(())
    }
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_FLOOR {
        row.to_vec()
    } else {
        row.iter().map(|x| x / n).collect()
    }
}

/// Inner product of the L2-normalized rows.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    normalized(a).iter().zip(normalized(b)).map(|(x, y)| x * y).sum()
}

/// `S[a][b] = s(z_vis_a, z_seg_b)`.
pub fn similarity_matrix(z_vis: &Tensor, z_seg: &Tensor) -> Result<Tensor> {
    if z_vis.shape() != z_seg.shape() {
        return Err(Error::Shape {
            op: "similarity_matrix",
            left: z_vis.shape(),
            right: z_seg.shape(),
        });
    }
    let nv: Vec<Vec<f64>> = (0..z_vis.rows()).map(|r| normalized(z_vis.row(r))).collect();
    let ns: Vec<Vec<f64>> = (0..z_seg.rows()).map(|r| normalized(z_seg.row(r))).collect();
    Ok(Tensor::from_fn(nv.len(), ns.len(), |a, b| {
        nv[a].iter().zip(&ns[b]).map(|(x, y)| x * y).sum()
    }))
}

/// Hard negatives from a square similarity matrix `S[vis][seg]`:
/// `i[m] = argmax_{i≠m} S[m][i]`, `j[m] = argmax_{j≠m} S[j][m]`, ties to the
/// lowest index.
pub fn mine_from_similarity(sim: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let m = sim.rows();
    if m < 2 || sim.cols() != m {
        return Err(Error::contract(format!(
            "hard-negative mining needs a square similarity matrix with m >= 2, got {:?}",
            sim.shape()
        )));
    }
    let pick = |get: &dyn Fn(usize) -> f64, anchor: usize| {
        let mut best = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for k in (0..m).filter(|&k| k != anchor) {
            let v = get(k);
            if best == usize::MAX || v > best_val {
                best = k;
                best_val = v;
            }
        }
        best
    };
    let i = (0..m).map(|a| pick(&|k| sim.get(a, k), a)).collect();
    let j = (0..m).map(|a| pick(&|k| sim.get(k, a), a)).collect();
    Ok((i, j))
}

pub fn mine_hard_negatives(z_vis: &Tensor, z_seg: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    mine_from_similarity(&similarity_matrix(z_vis, z_seg)?)
}

/// Triplet correspondence loss on the tape. Mined indices are constants.
pub fn correspondence_loss(tape: &mut Tape, z_vis: Var, z_seg: Var, cfg: &LossConfig) -> Result<Var> {
    let (m, _) = tape.shape(z_vis);
    if tape.shape(z_vis) != tape.shape(z_seg) {
        return Err(Error::Shape {
            op: "correspondence_loss",
            left: tape.shape(z_vis),
            right: tape.shape(z_seg),
        });
    }
    if m < 2 {
        return Err(Error::contract("correspondence loss needs at least two proposals"));
    }
    let nv = tape.l2_normalize_rows(z_vis);
    let ns = tape.l2_normalize_rows(z_seg);
    let nst = tape.transpose(ns);
    let sim = tape.matmul(nv, nst)?;
    let (hard_i, hard_j) = mine_from_similarity(tape.value(sim))?;

    let diag = tape.constant(Tensor::eye(m));
    let mask_i = tape.constant(Tensor::from_fn(m, m, |r, c| (c == hard_i[r]) as u8 as f64));
    // j[m] indexes the vis row for seg column m
    let mask_j = tape.constant(Tensor::from_fn(m, m, |r, c| (r == hard_j[c]) as u8 as f64));
    let ones_col = tape.constant(Tensor::ones(m, 1));
    let ones_row = tape.constant(Tensor::ones(1, m));

    let pos = tape.mul(sim, diag)?;
    let pos = tape.matmul(pos, ones_col)?;
    let neg_i = tape.mul(sim, mask_i)?;
    let neg_i = tape.matmul(neg_i, ones_col)?;
    let neg_j = tape.mul(sim, mask_j)?;
    let neg_j = tape.matmul(ones_row, neg_j)?;
    let neg_j = tape.transpose(neg_j);

    let mut total: Option<Var> = None;
    for neg in [neg_i, neg_j] {
        let gap = tape.sub(neg, pos)?;
        let gap = tape.add_scalar(gap, cfg.alpha);
        let hinge = tape.relu(gap);
        let s = tape.sum(hinge);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Detached value of [`correspondence_loss`].
pub fn correspondence_loss_value(z_vis: &Tensor, z_seg: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(z_vis.clone());
    let s = tape.constant(z_seg.clone());
    let loss = correspondence_loss(&mut tape, v, s, cfg)?;
    Ok(tape.value(loss).item())
}

/// Rectangle in the units the regression is trained in: x, y, w, h as-is,
/// angle divided by 90° into `[-1, 1)`.
pub fn normalized_rect(r: &GraspRect) -> [f64; RECT_WIDTH] {
    [r.x, r.y, r.w, r.h, r.theta / MAX_ANGLE_DEG]
}

/// Grasp loss on the tape: cross-entropy over all proposals plus
/// `beta`-weighted smooth-L1 regression over positives.
pub fn grasp_loss(
    tape: &mut Tape,
    logits: Var,
    rect_raw: Var,
    labels: &[bool],
    gt_rects: &[GraspRect],
    cfg: &LossConfig,
) -> Result<Var> {
    let m = labels.len();
    if m == 0 {
        return Err(Error::contract("grasp loss needs at least one proposal"));
    }
    if tape.shape(logits) != (m, 2) || tape.shape(rect_raw) != (m, RECT_WIDTH) || gt_rects.len() != m {
        return Err(Error::contract(format!(
            "grasp loss shapes disagree: {} labels, logits {:?}, rects {:?}, {} ground truths",
            m,
            tape.shape(logits),
            tape.shape(rect_raw),
            gt_rects.len()
        )));
    }

    let probs = tape.row_softmax(logits);
    let probs = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let logp = tape.log(probs);
    let class_mask = tape.constant(Tensor::from_fn(m, 2, |r, c| {
        ((c == 0) == labels[r]) as u8 as f64
    }));
    let picked = tape.mul(logp, class_mask)?;
    let picked = tape.sum(picked);
    let cls = tape.scale(picked, -1.0);

    let positives: Vec<usize> = (0..m).filter(|&r| labels[r]).collect();
    if positives.is_empty() {
        return Ok(cls);
    }
    let n = positives.len();
    let select = tape.constant(Tensor::from_fn(n, m, |r, c| (c == positives[r]) as u8 as f64));
    let raw_pos = tape.matmul(select, rect_raw)?;
    let xywh = tape.slice_cols(raw_pos, 0, 4)?;
    let angle = tape.slice_cols(raw_pos, 4, 5)?;
    let angle = tape.tanh(angle);
    let pred = tape.concat_cols(xywh, angle)?;
    let target = tape.constant(Tensor::from_fn(n, RECT_WIDTH, |r, c| {
        normalized_rect(&gt_rects[positives[r]])[c]
    }));
    let diff = tape.sub(pred, target)?;
    let reg = tape.smooth_l1(diff, cfg.smooth_l1_delta);
    let reg = tape.sum(reg);
    let reg = tape.scale(reg, cfg.beta);
    tape.add(cls, reg)
}

/// Detached value of [`grasp_loss`].
pub fn grasp_loss_value(
    logits: &Tensor,
    rect_raw: &Tensor,
    labels: &[bool],
    gt_rects: &[GraspRect],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let r = tape.constant(rect_raw.clone());
    let loss = grasp_loss(&mut tape, l, r, labels, gt_rects, cfg)?;
    Ok(tape.value(loss).item())
}

/// `L_grasp + lambda_c · L_cor`.
pub fn total_loss(tape: &mut Tape, l_grasp: Var, l_cor: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = tape.scale(l_cor, cfg.lambda_c);
    tape.add(l_grasp, weighted)
}

pub fn total_loss_value(l_grasp: f64, l_cor: f64, cfg: &LossConfig) -> f64 {
    l_grasp + cfg.lambda_c * l_cor
}
