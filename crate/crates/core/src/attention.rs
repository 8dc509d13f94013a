//! Mask-guided attention: text self-attention, language/vision
//! cross-attention, and vision/segmentation cross-attention, each followed
//! by a layer-normalized residual.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which side supplies the queries in the language/vision stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Mean-pooled text is the single query over proposal keys/values; the
    /// attended row is broadcast onto every proposal before the residual.
    #[default]
    TextQuery,
    /// Proposals query the text tokens.
    RegionQuery,
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-query" => Ok(QueryMode::TextQuery),
            "region-query" => Ok(QueryMode::RegionQuery),
            other => Err(Error::Config(format!("unknown query mode `{other}`"))),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::TextQuery => "text-query",
            QueryMode::RegionQuery => "region-query",
        })
    }
}

/// Projection weights and layer-norm affine for one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl StreamParams {
    /// All projections zero, `w_o` identity, unit gain, zero bias.
    pub fn zeroed(d: usize) -> Self {
        Self {
            w_q: Tensor::zeros(d, d),
            w_k: Tensor::zeros(d, d),
            w_v: Tensor::zeros(d, d),
            w_o: Tensor::eye(d),
            ln_gain: Tensor::ones(1, d),
            ln_bias: Tensor::zeros(1, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> StreamVars {
        StreamVars {
            w_q: tape.leaf(self.w_q.clone(), trainable),
            w_k: tape.leaf(self.w_k.clone(), trainable),
            w_v: tape.leaf(self.w_v.clone(), trainable),
            w_o: tape.leaf(self.w_o.clone(), trainable),
            ln_gain: tape.leaf(self.ln_gain.clone(), trainable),
            ln_bias: tape.leaf(self.ln_bias.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl StreamVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w_q, self.w_k, self.w_v, self.w_o, self.ln_gain, self.ln_bias]
    }

    fn from_slice(v: &[Var]) -> Self {
        Self {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
            w_o: v[3],
            ln_gain: v[4],
            ln_bias: v[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub d: usize,
    pub heads: usize,
    pub text: StreamParams,
    pub vis: StreamParams,
    pub seg: StreamParams,
}

impl AttentionParams {
    pub fn zeroed(d: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            d,
            heads,
            text: StreamParams::zeroed(d),
            vis: StreamParams::zeroed(d),
            seg: StreamParams::zeroed(d),
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.d, self.heads)?;
        for (stream, sp) in [("text", &self.text), ("vis", &self.vis), ("seg", &self.seg)] {
            for (name, t) in sp.tensors() {
                let want = if name.starts_with("ln_") { (1, self.d) } else { (self.d, self.d) };
                if t.shape() != want {
                    return Err(Error::InvalidShape {
                        op: "AttentionParams",
                        shape: t.shape(),
                        reason: format!("{stream}.{name} must be {want:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(18);
        for (stream, sp) in [("text", &self.text), ("vis", &self.vis), ("seg", &self.seg)] {
            for (name, t) in sp.tensors() {
                out.push((format!("attn.{stream}.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(18);
        out.extend(self.text.tensors_mut());
        out.extend(self.vis.tensors_mut());
        out.extend(self.seg.tensors_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        AttentionVars {
            d: self.d,
            heads: self.heads,
            text: self.text.register(tape, trainable),
            vis: self.vis.register(tape, trainable),
            seg: self.seg.register(tape, trainable),
        }
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding width {d} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

/// Tape handles for every attention parameter.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub d: usize,
    pub heads: usize,
    pub text: StreamVars,
    pub vis: StreamVars,
    pub seg: StreamVars,
}

impl AttentionVars {
    /// Inverse of [`Self::all`]; `vars` must hold at least 18 handles.
    pub fn from_slice(d: usize, heads: usize, vars: &[Var]) -> Self {
        Self {
            d,
            heads,
            text: StreamVars::from_slice(&vars[0..6]),
            vis: StreamVars::from_slice(&vars[6..12]),
            seg: StreamVars::from_slice(&vars[12..18]),
        }
    }

    /// Handles in the same order as [`AttentionParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(18);
        out.extend(self.text.all());
        out.extend(self.vis.all());
        out.extend(self.seg.all());
        out
    }
}

/// Input streams for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamFeatures {
    /// `K×d` token embeddings.
    pub text: Tensor,
    /// `m×d` grasp-region features.
    pub vis: Tensor,
    /// `m×d` per-proposal segmentation features, row-aligned with `vis`.
    pub seg: Tensor,
}

impl StreamFeatures {
    pub fn validate(&self, d: usize) -> Result<()> {
        for (name, t) in [("text", &self.text), ("vis", &self.vis), ("seg", &self.seg)] {
            if t.cols() != d {
                return Err(Error::InvalidShape {
                    op: "StreamFeatures",
                    shape: t.shape(),
                    reason: format!("{name} must have {d} columns"),
                });
            }
        }
        if self.text.rows() < 1 {
            return Err(Error::contract("at least one text token is required"));
        }
        if self.vis.rows() < 2 {
            return Err(Error::contract("at least two proposals are required"));
        }
        if self.vis.rows() != self.seg.rows() {
            return Err(Error::Shape {
                op: "StreamFeatures",
                left: self.vis.shape(),
                right: self.seg.shape(),
            });
        }
        Ok(())
    }
}

/// Detached outputs of [`mask_guided_forward`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub z_text: Tensor,
    pub z_vis: Tensor,
    pub z_seg: Tensor,
    pub s_text: Tensor,
    pub s_vis: Tensor,
    pub s_seg: Tensor,
}

/// Tape-resident outputs; attention weights are detached values
/// (head-averaged when `heads > 1`).
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub z_text: Var,
    pub z_vis: Var,
    pub z_seg: Option<Var>,
    pub s_text: Tensor,
    pub s_vis: Tensor,
    pub s_seg: Option<Tensor>,
}

/// `softmax(q kᵀ · scale) · v` with query/key/value projections.
fn project_attend(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let q = tape.matmul(q_in, w_q)?;
    let k = tape.matmul(k_in, w_k)?;
    let v = tape.matmul(v_in, w_v)?;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, scale);
    let s = tape.row_softmax(logits);
    let out = tape.matmul(s, v)?;
    Ok((out, s))
}

/// Single-head attention, scaled by `1/√d`. Returns `(attended, weights)`.
pub fn single_head(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    stream: &StreamVars,
) -> Result<(Var, Var)> {
    let d = tape.shape(stream.w_q).0;
    check_inputs(tape, &[q_in, k_in, v_in], d)?;
    let scale = 1.0 / (d as f64).sqrt();
    project_attend(tape, q_in, k_in, v_in, stream.w_q, stream.w_k, stream.w_v, scale)
}

/// Multi-head attention. Head `h` uses columns `[h·d_head, (h+1)·d_head)` of
/// the stream's query/key/value matrices and is scaled by `1/√d_head`; heads
/// are concatenated and projected by `w_o`. Returns the attended tensor and
/// the head-averaged weights.
pub fn multi_head(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    stream: &StreamVars,
    heads: usize,
) -> Result<(Var, Tensor)> {
    let d = tape.shape(stream.w_q).0;
    check_heads(d, heads)?;
    check_inputs(tape, &[q_in, k_in, v_in], d)?;
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut concat: Option<Var> = None;
    let mut weights: Option<Tensor> = None;
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let wq = tape.slice_cols(stream.w_q, lo, hi)?;
        let wk = tape.slice_cols(stream.w_k, lo, hi)?;
        let wv = tape.slice_cols(stream.w_v, lo, hi)?;
        let (head, s) = project_attend(tape, q_in, k_in, v_in, wq, wk, wv, scale)?;
        concat = Some(match concat {
            None => head,
            Some(prev) => tape.concat_cols(prev, head)?,
        });
        let sv = tape.value(s);
        weights = Some(match weights {
            None => sv.clone(),
            Some(mut acc) => {
                acc.data_mut().iter_mut().zip(sv.data()).for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    let attended = tape.matmul(concat.expect("heads >= 1"), stream.w_o)?;
    let mut weights = weights.expect("heads >= 1");
    weights.data_mut().iter_mut().for_each(|w| *w /= heads as f64);
    Ok((attended, weights))
}

fn check_inputs(tape: &Tape, inputs: &[Var], d: usize) -> Result<()> {
    for &v in inputs {
        let shape = tape.shape(v);
        if shape.1 != d {
            return Err(Error::Shape {
                op: "attention",
                left: shape,
                right: (d, d),
            });
        }
    }
    Ok(())
}

/// Single-head for `heads == 1`, multi-head otherwise.
fn attend(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    stream: &StreamVars,
    heads: usize,
) -> Result<(Var, Tensor)> {
    if heads == 1 {
        let (out, s) = single_head(tape, q_in, k_in, v_in, stream)?;
        Ok((out, tape.value(s).clone()))
    } else {
        multi_head(tape, q_in, k_in, v_in, stream, heads)
    }
}

/// Text self-attention. Returns `(s_text, z_text)`.
pub fn text_self_attention(
    tape: &mut Tape,
    f_text: Var,
    p: &AttentionVars,
) -> Result<(Tensor, Var)> {
    let (attended, s) = attend(tape, f_text, f_text, f_text, &p.text, p.heads)?;
    let pre = tape.add(attended, f_text)?;
    let z = tape.layer_norm(pre, p.text.ln_gain, p.text.ln_bias, LAYER_NORM_EPS)?;
    Ok((s, z))
}

/// Language/vision cross-attention. Returns `(s_vis, z_vis)`; `s_vis` is
/// `1×m` in text-query mode and `m×K` in region-query mode.
pub fn language_vision_cross_attention(
    tape: &mut Tape,
    f_text: Var,
    f_vis: Var,
    p: &AttentionVars,
    mode: QueryMode,
) -> Result<(Tensor, Var)> {
    match mode {
        QueryMode::TextQuery => {
            let pooled = tape.mean_rows(f_text);
            let (attended, s) = attend(tape, pooled, f_vis, f_vis, &p.vis, p.heads)?;
            let pre = tape.add_row(f_vis, attended)?;
            let z = tape.layer_norm(pre, p.vis.ln_gain, p.vis.ln_bias, LAYER_NORM_EPS)?;
            Ok((s, z))
        }
        QueryMode::RegionQuery => {
            let (attended, s) = attend(tape, f_vis, f_text, f_text, &p.vis, p.heads)?;
            let pre = tape.add(attended, f_vis)?;
            let z = tape.layer_norm(pre, p.vis.ln_gain, p.vis.ln_bias, LAYER_NORM_EPS)?;
            Ok((s, z))
        }
    }
}

/// Vision/segmentation cross-attention: proposals query segmentation
/// features, and the residual is taken on the segmentation stream.
/// Returns `(s_seg, z_seg)`.
pub fn vision_segmentation_cross_attention(
    tape: &mut Tape,
    f_vis: Var,
    f_seg: Var,
    p: &AttentionVars,
) -> Result<(Tensor, Var)> {
    if tape.shape(f_vis).0 != tape.shape(f_seg).0 {
        return Err(Error::Shape {
            op: "vision_segmentation_cross_attention",
            left: tape.shape(f_vis),
            right: tape.shape(f_seg),
        });
    }
    let (attended, s) = attend(tape, f_vis, f_seg, f_seg, &p.seg, p.heads)?;
    let pre = tape.add(attended, f_seg)?;
    let z = tape.layer_norm(pre, p.seg.ln_gain, p.seg.ln_bias, LAYER_NORM_EPS)?;
    Ok((s, z))
}

/// All three streams on an existing tape. The segmentation stream is
/// skipped when `with_seg` is false.
pub fn forward_on_tape(
    tape: &mut Tape,
    f_text: Var,
    f_vis: Var,
    f_seg: Var,
    p: &AttentionVars,
    mode: QueryMode,
    with_seg: bool,
) -> Result<AttentionNodes> {
    let (s_text, z_text) = text_self_attention(tape, f_text, p)?;
    let (s_vis, z_vis) = language_vision_cross_attention(tape, f_text, f_vis, p, mode)?;
    let (s_seg, z_seg) = if with_seg {
        let (s, z) = vision_segmentation_cross_attention(tape, f_vis, f_seg, p)?;
        (Some(s), Some(z))
    } else {
        (None, None)
    };
    Ok(AttentionNodes {
        z_text,
        z_vis,
        z_seg,
        s_text,
        s_vis,
        s_seg,
    })
}

/// Full mask-guided block on detached inputs.
pub fn mask_guided_forward(
    feats: &StreamFeatures,
    p: &AttentionParams,
    mode: QueryMode,
) -> Result<AttentionOutput> {
    p.validate()?;
    feats.validate(p.d)?;
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let f_text = tape.constant(feats.text.clone());
    let f_vis = tape.constant(feats.vis.clone());
    let f_seg = tape.constant(feats.seg.clone());
    let nodes = forward_on_tape(&mut tape, f_text, f_vis, f_seg, &vars, mode, true)?;
    Ok(AttentionOutput {
        z_text: tape.value(nodes.z_text).clone(),
        z_vis: tape.value(nodes.z_vis).clone(),
        z_seg: tape.value(nodes.z_seg.expect("seg enabled")).clone(),
        s_text: nodes.s_text,
        s_vis: nodes.s_vis,
        s_seg: nodes.s_seg.expect("seg enabled"),
    })
}
