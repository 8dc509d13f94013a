//! Grasp head: fuses pooled text with each proposal, scores proposals as
//! graspable/ungraspable, and regresses one rectangle per proposal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GraspRect;
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// Logit columns: 0 = graspable, 1 = ungraspable.
pub const SCORE_WIDTH: usize = 2;
/// Regression columns: x, y, w, h, raw angle.
pub const RECT_WIDTH: usize = 5;
/// Predicted angles are `MAX_ANGLE_DEG · tanh(raw)`.
pub const MAX_ANGLE_DEG: f64 = 90.0;

const MIN_SIZE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspHeadParams {
    /// `2d × d_hid`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d_hid × d_hid`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `d_hid × 2`
    pub w_score: Tensor,
    pub b_score: Tensor,
    /// `d_hid × 5`
    pub w_reg: Tensor,
    pub b_reg: Tensor,
}

impl GraspHeadParams {
    pub fn zeroed(d: usize, d_hid: usize) -> Self {
        Self {
            w1: Tensor::zeros(2 * d, d_hid),
            b1: Tensor::zeros(1, d_hid),
            w2: Tensor::zeros(d_hid, d_hid),
            b2: Tensor::zeros(1, d_hid),
            w_score: Tensor::zeros(d_hid, SCORE_WIDTH),
            b_score: Tensor::zeros(1, SCORE_WIDTH),
            w_reg: Tensor::zeros(d_hid, RECT_WIDTH),
            b_reg: Tensor::zeros(1, RECT_WIDTH),
        }
    }

    pub fn d_hid(&self) -> usize {
        self.w1.cols()
    }

    /// Embedding width the head was built for.
    pub fn d(&self) -> usize {
        self.w1.rows() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let (d2, h) = self.w1.shape();
        let expected = [
            ("b1", &self.b1, (1, h)),
            ("w2", &self.w2, (h, h)),
            ("b2", &self.b2, (1, h)),
            ("w_score", &self.w_score, (h, SCORE_WIDTH)),
            ("b_score", &self.b_score, (1, SCORE_WIDTH)),
            ("w_reg", &self.w_reg, (h, RECT_WIDTH)),
            ("b_reg", &self.b_reg, (1, RECT_WIDTH)),
        ];
        if d2 % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "GraspHeadParams",
                shape: self.w1.shape(),
                reason: "w1 must have 2d rows".into(),
            });
        }
        for (name, t, want) in expected {
            if t.shape() != want {
                return Err(Error::InvalidShape {
                    op: "GraspHeadParams",
                    shape: t.shape(),
                    reason: format!("{name} must be {want:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w_score", &self.w_score),
            ("b_score", &self.b_score),
            ("w_reg", &self.w_reg),
            ("b_reg", &self.b_reg),
        ]
        .into_iter()
        .map(|(n, t)| (format!("head.{n}"), t))
        .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_score,
            &mut self.b_score,
            &mut self.w_reg,
            &mut self.b_reg,
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
            w_score: tape.leaf(self.w_score.clone(), trainable),
            b_score: tape.leaf(self.b_score.clone(), trainable),
            w_reg: tape.leaf(self.w_reg.clone(), trainable),
            b_reg: tape.leaf(self.b_reg.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_score: Var,
    pub b_score: Var,
    pub w_reg: Var,
    pub b_reg: Var,
}

impl HeadVars {
    /// Inverse of [`Self::all`].
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
            w_score: v[4],
            b_score: v[5],
            w_reg: v[6],
            b_reg: v[7],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        vec![
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.w_score,
            self.b_score,
            self.w_reg,
            self.b_reg,
        ]
    }
}

/// Raw head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `m×2` graspable/ungraspable logits.
    pub logits: Var,
    /// `m×5` raw regression outputs.
    pub rect_raw: Var,
}

/// Fusion MLP and both heads, recorded on `tape`.
pub fn fuse_and_score_on_tape(
    tape: &mut Tape,
    z_text: Var,
    z_vis: Var,
    p: &HeadVars,
) -> Result<HeadNodes> {
    let (m, d) = tape.shape(z_vis);
    if tape.shape(z_text).1 != d || tape.shape(p.w1).0 != 2 * d {
        return Err(Error::Shape {
            op: "fuse_and_score",
            left: tape.shape(z_text),
            right: tape.shape(z_vis),
        });
    }
    let pooled = tape.mean_rows(z_text);
    let ones = tape.constant(Tensor::ones(m, 1));
    let tiled = tape.matmul(ones, pooled)?;
    let fused_in = tape.concat_cols(tiled, z_vis)?;

    let h1 = tape.matmul(fused_in, p.w1)?;
    let h1 = tape.add_row(h1, p.b1)?;
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, p.w2)?;
    let h2 = tape.add_row(h2, p.b2)?;
    let h2 = tape.relu(h2);

    let logits = tape.matmul(h2, p.w_score)?;
    let logits = tape.add_row(logits, p.b_score)?;
    let rect_raw = tape.matmul(h2, p.w_reg)?;
    let rect_raw = tape.add_row(rect_raw, p.b_reg)?;
    Ok(HeadNodes { logits, rect_raw })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraspPrediction {
    /// Graspable probability per proposal.
    pub scores: Vec<f64>,
    pub rects: Vec<GraspRect>,
    pub best_index: usize,
}

/// Decodes one regression row: identity for position/size (clamped to the
/// image), `90·tanh` for the angle.
pub fn decode_rect(raw: &[f64]) -> GraspRect {
    let theta = MAX_ANGLE_DEG * raw[4].tanh();
    GraspRect {
        x: raw[0].clamp(0.0, 1.0),
        y: raw[1].clamp(0.0, 1.0),
        w: raw[2].clamp(MIN_SIZE, 1.0),
        h: raw[3].clamp(MIN_SIZE, 1.0),
        // tanh(∞) = 1 would give +90; keep the half-open range
        theta: if theta >= MAX_ANGLE_DEG { -MAX_ANGLE_DEG } else { theta },
    }
}

/// Builds a prediction from raw `m×2` logits and `m×5` regression outputs.
pub fn prediction_from_raw(logits: &Tensor, rect_raw: &Tensor) -> Result<GraspPrediction> {
    if logits.rows() == 0 {
        return Err(Error::contract("prediction needs at least one proposal"));
    }
    let scores: Vec<f64> = (0..logits.rows())
        .map(|r| {
            let mut row = logits.row(r).to_vec();
            softmax_in_place(&mut row);
            row[0]
        })
        .collect();
    let rects = (0..rect_raw.rows()).map(|r| decode_rect(rect_raw.row(r))).collect();
    let best_index = argmax_first(&scores).expect("non-empty");
    Ok(GraspPrediction {
        scores,
        rects,
        best_index,
    })
}

/// Detached convenience wrapper.
pub fn fuse_and_score(z_text: &Tensor, z_vis: &Tensor, p: &GraspHeadParams) -> Result<GraspPrediction> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let zt = tape.constant(z_text.clone());
    let zv = tape.constant(z_vis.clone());
    let nodes = fuse_and_score_on_tape(&mut tape, zt, zv, &vars)?;
    prediction_from_raw(tape.value(nodes.logits), tape.value(nodes.rect_raw))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// The highest-scoring proposal's rectangle and index.
pub fn select_best(pred: &GraspPrediction) -> Result<(GraspRect, usize)> {
    let idx = argmax_first(&pred.scores)
        .ok_or_else(|| Error::contract("select_best on an empty prediction"))?;
    let rect = *pred
        .rects
        .get(idx)
        .ok_or_else(|| Error::contract("prediction has fewer rectangles than scores"))?;
    Ok((rect, idx))
}
