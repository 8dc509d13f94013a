//! Named gradient checks over every differentiable op and the composed
//! model, as run by `maskgrasp gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    forward_on_tape, language_vision_cross_attention, multi_head, text_self_attention,
    vision_segmentation_cross_attention, AttentionVars, QueryMode,
};
use crate::data::{GeneratorConfig, World};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_detailed, DEFAULT_STEP};
use crate::head::{fuse_and_score_on_tape, HeadVars};
use crate::losses::{correspondence_loss, grasp_loss, LossConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{init_params, scene_loss, ModelVars, TrainConfig};

/// Threshold for a single op checked in isolation.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Threshold for composed graphs.
pub const COMPOSED_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries: usize,
    /// Index of the parameter holding the worst entry, and the entry.
    pub worst_param: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Check with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks.iter().max_by(|a, b| {
            (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance))
        })
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    params: Vec<Tensor>,
    f: Builder,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Uniform in `±1` but at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, kinks: &[f64], gap: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| loop {
        let x: f64 = rng.random_range(-1.5..1.5);
        if kinks.iter().all(|k| (x - k).abs() >= gap) {
            break x;
        }
    })
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry carries a
/// distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, r, c, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn op_case(
    name: &'static str,
    params: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        tolerance: OP_TOLERANCE,
        params,
        f: Box::new(move |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, 7)
        }),
    }
}

fn attention_params(rng: &mut ChaCha8Rng, d: usize) -> Vec<Tensor> {
    let bound = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(18);
    for _ in 0..3 {
        for _ in 0..4 {
            out.push(uniform(rng, d, d, -2.0 * bound, 2.0 * bound));
        }
        out.push(uniform(rng, 1, d, 0.5, 1.5));
        out.push(uniform(rng, 1, d, -0.3, 0.3));
    }
    out
}

fn head_params(rng: &mut ChaCha8Rng, d: usize, d_hid: usize) -> Vec<Tensor> {
    let b1 = 1.0 / ((2 * d) as f64).sqrt();
    let b2 = 1.0 / (d_hid as f64).sqrt();
    vec![
        uniform(rng, 2 * d, d_hid, -b1, b1),
        uniform(rng, 1, d_hid, 0.05, 0.2),
        uniform(rng, d_hid, d_hid, -b2, b2),
        uniform(rng, 1, d_hid, 0.05, 0.2),
        uniform(rng, d_hid, 2, -b2, b2),
        uniform(rng, 1, 2, -0.1, 0.1),
        uniform(rng, d_hid, 5, -b2, b2),
        uniform(rng, 1, 5, -0.1, 0.1),
    ]
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let a34 = uniform(rng, 3, 4, -1.0, 1.0);
    let b34 = uniform(rng, 3, 4, -1.0, 1.0);
    let b45 = uniform(rng, 4, 5, -1.0, 1.0);
    let r14 = uniform(rng, 1, 4, -1.0, 1.0);
    let b32 = uniform(rng, 3, 2, -1.0, 1.0);
    let pos = uniform(rng, 3, 4, 0.5, 2.0);
    let kinked0 = away_from(rng, 3, 4, &[0.0], 0.05);
    let kinked_clamp = away_from(rng, 3, 4, &[-0.5, 0.5], 0.05);
    let kinked_l1 = away_from(rng, 3, 4, &[-1.0, 1.0], 0.05);
    let gain = uniform(rng, 1, 4, 0.5, 1.5);
    let bias = uniform(rng, 1, 4, -0.5, 0.5);
    let wide = uniform(rng, 4, 6, -1.0, 1.0);

    vec![
        op_case("matmul", vec![a34.clone(), b45], |t, v| t.matmul(v[0], v[1])),
        op_case("add", vec![a34.clone(), b34.clone()], |t, v| t.add(v[0], v[1])),
        op_case("sub", vec![a34.clone(), b34.clone()], |t, v| t.sub(v[0], v[1])),
        op_case("mul", vec![a34.clone(), b34], |t, v| t.mul(v[0], v[1])),
        op_case("scale", vec![a34.clone()], |t, v| Ok(t.scale(v[0], -1.7))),
        op_case("add_scalar", vec![a34.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        op_case("relu", vec![kinked0], |t, v| Ok(t.relu(v[0]))),
        op_case("tanh", vec![a34.clone()], |t, v| Ok(t.tanh(v[0]))),
        op_case("exp", vec![a34.clone()], |t, v| Ok(t.exp(v[0]))),
        op_case("log", vec![pos], |t, v| Ok(t.log(v[0]))),
        op_case("clamp", vec![kinked_clamp], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        op_case("smooth_l1", vec![kinked_l1], |t, v| Ok(t.smooth_l1(v[0], 1.0))),
        op_case("add_row", vec![a34.clone(), r14], |t, v| t.add_row(v[0], v[1])),
        op_case("concat_cols", vec![a34.clone(), b32], |t, v| t.concat_cols(v[0], v[1])),
        op_case("mean_rows", vec![a34.clone()], |t, v| Ok(t.mean_rows(v[0]))),
        op_case("sum", vec![a34.clone()], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
        op_case("transpose", vec![a34.clone()], |t, v| Ok(t.transpose(v[0]))),
        op_case("slice_rows", vec![a34.clone()], |t, v| t.slice_rows(v[0], 1, 3)),
        op_case("slice_cols", vec![a34.clone()], |t, v| t.slice_cols(v[0], 1, 3)),
        op_case("row_softmax", vec![a34.clone()], |t, v| Ok(t.row_softmax(v[0]))),
        op_case("layer_norm", vec![a34.clone(), gain, bias], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        op_case("l2_normalize_rows", vec![wide], |t, v| Ok(t.l2_normalize_rows(v[0]))),
    ]
}

fn composed_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (d, k, m, heads) = (8, 3, 5, 2);
    let f_text = uniform(rng, k, d, -1.0, 1.0);
    let f_vis = uniform(rng, m, d, -1.0, 1.0);
    let f_seg = uniform(rng, m, d, -1.0, 1.0);
    let attn = attention_params(rng, d);

    let mut cases = Vec::new();
    let stream_case = |name: &'static str,
                       heads: usize,
                       run: fn(&mut Tape, Var, Var, Var, &AttentionVars) -> Result<Var>| {
        let mut params = vec![f_text.clone(), f_vis.clone(), f_seg.clone()];
        params.extend(attn.iter().cloned());
        Case {
            name,
            tolerance: COMPOSED_TOLERANCE,
            params,
            f: Box::new(move |t, v| {
                let p = AttentionVars::from_slice(d, heads, &v[3..]);
                let out = run(t, v[0], v[1], v[2], &p)?;
                project(t, out, 11)
            }),
        }
    };

    cases.push(stream_case("multi_head", heads, |t, ft, fv, _, p| {
        Ok(multi_head(t, fv, ft, ft, &p.vis, p.heads)?.0)
    }));
    cases.push(stream_case("text_self_attention", 1, |t, ft, _, _, p| {
        Ok(text_self_attention(t, ft, p)?.1)
    }));
    cases.push(stream_case("text_self_attention_multi_head", heads, |t, ft, _, _, p| {
        Ok(text_self_attention(t, ft, p)?.1)
    }));
    cases.push(stream_case("language_vision_text_query", heads, |t, ft, fv, _, p| {
        Ok(language_vision_cross_attention(t, ft, fv, p, QueryMode::TextQuery)?.1)
    }));
    cases.push(stream_case("language_vision_region_query", heads, |t, ft, fv, _, p| {
        Ok(language_vision_cross_attention(t, ft, fv, p, QueryMode::RegionQuery)?.1)
    }));
    cases.push(stream_case("vision_segmentation_cross_attention", heads, |t, _, fv, fs, p| {
        Ok(vision_segmentation_cross_attention(t, fv, fs, p)?.1)
    }));
    cases.push(stream_case("mask_guided_forward", heads, |t, ft, fv, fs, p| {
        let n = forward_on_tape(t, ft, fv, fs, p, QueryMode::TextQuery, true)?;
        let z_seg = n.z_seg.expect("segmentation stream requested");
        let a = project(t, n.z_text, 21)?;
        let b = project(t, n.z_vis, 22)?;
        let c = project(t, z_seg, 23)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    }));

    let d_hid = 2 * d;
    let z_text = uniform(rng, k, d, -1.0, 1.0);
    let z_vis = uniform(rng, m, d, -1.0, 1.0);
    let mut params = vec![z_text, z_vis.clone()];
    params.extend(head_params(rng, d, d_hid));
    cases.push(Case {
        name: "fuse_and_score",
        tolerance: COMPOSED_TOLERANCE,
        params,
        f: Box::new(|t, v| {
            let hv = HeadVars::from_slice(&v[2..]);
            let n = fuse_and_score_on_tape(t, v[0], v[1], &hv)?;
            let a = project(t, n.logits, 31)?;
            let b = project(t, n.rect_raw, 32)?;
            t.add(a, b)
        }),
    });

    let z_seg = uniform(rng, m, d, -1.0, 1.0);
    cases.push(Case {
        name: "correspondence_loss",
        tolerance: COMPOSED_TOLERANCE,
        params: vec![z_vis, z_seg],
        f: Box::new(|t, v| {
            let cfg = LossConfig {
                alpha: 1.5,
                ..LossConfig::default()
            };
            correspondence_loss(t, v[0], v[1], &cfg)
        }),
    });

    let world = World::new(&small_generator()).expect("valid generator config");
    let scene = world.generate_scene(world.seen[0], 0).expect("scene");
    let logits = uniform(rng, scene.proposals(), 2, -1.0, 1.0);
    let rect_raw = uniform(rng, scene.proposals(), 5, 0.0, 1.0);
    let (labels, gts) = (scene.labels.clone(), scene.gt_rects.clone());
    cases.push(Case {
        name: "grasp_loss",
        tolerance: COMPOSED_TOLERANCE,
        params: vec![logits, rect_raw],
        f: Box::new(move |t, v| grasp_loss(t, v[0], v[1], &labels, &gts, &LossConfig::default())),
    });

    for (name, mode) in [
        ("full_model_text_query", QueryMode::TextQuery),
        ("full_model_region_query", QueryMode::RegionQuery),
    ] {
        let gen = small_generator();
        let model = init_params(gen.d, heads, 2 * gen.d, 5).expect("valid model config");
        let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let scene = scene.clone();
        let cfg = TrainConfig {
            mode,
            heads,
            ..TrainConfig::default()
        };
        cases.push(Case {
            name,
            tolerance: COMPOSED_TOLERANCE,
            params,
            f: Box::new(move |t, v| {
                let vars = ModelVars::from_slice(gen.d, heads, v);
                scene_loss(t, &vars, &scene, &cfg)
            }),
        });
    }
    cases
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        d: 12,
        m: 5,
        k: 3,
        num_categories: 6,
        // distinct tokens keep text-stream gradients well above
        // finite-difference noise
        noise_sigma: 1.0,
        seed: 3,
        ..GeneratorConfig::default()
    }
}

fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = op_cases(&mut rng);
    out.extend(composed_cases(&mut rng));
    out
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every check. `fault` names a check whose analytic gradient is
/// corrupted before comparison, to exercise the failure path.
pub fn run_suite(fault: Option<&str>) -> Result<SuiteReport> {
    let all = cases();
    if let Some(name) = fault {
        if !all.iter().any(|c| c.name == name) {
            return Err(Error::Config(format!("unknown gradient check `{name}`")));
        }
    }
    let mut checks = Vec::with_capacity(all.len());
    for case in all {
        let corrupt = fault == Some(case.name);
        let report = grad_check_detailed(&case.f, &case.params, DEFAULT_STEP, |g| {
            if corrupt {
                let x = &mut g[0].data_mut()[0];
                *x += 0.1 * (1.0 + x.abs());
            }
        })?;
        checks.push(CheckResult {
            name: case.name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance: case.tolerance,
            entries: report.entries,
            worst_param: report.worst.0,
            worst_entry: report.worst.1,
            analytic: report.analytic,
            numeric: report.numeric,
            passed: report.max_rel_error < case.tolerance,
        });
    }
    Ok(SuiteReport { checks })
}
