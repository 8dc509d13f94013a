//! Initialization, Adam training, evaluation, and checkpoints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::attention::{forward_on_tape, AttentionNodes, AttentionParams, AttentionVars, QueryMode};
use crate::data::SceneExample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{evaluate_available, is_success, EvalReport, GraspRect, SceneResult, Split};
use crate::head::{fuse_and_score_on_tape, prediction_from_raw, select_best, GraspHeadParams, GraspPrediction, HeadNodes, HeadVars};
use crate::json;
use crate::losses::{correspondence_loss, grasp_loss, total_loss, LossConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 2;

/// Attention block plus grasp head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub attn: AttentionParams,
    pub head: GraspHeadParams,
}

impl Model {
    pub fn d(&self) -> usize {
        self.attn.d
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.attn.named_tensors();
        out.extend(self.head.named_tensors());
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.attn.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            attn: self.attn.register(tape, trainable),
            head: self.head.register(tape, trainable),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        self.head.validate()?;
        if self.head.d() != self.attn.d {
            return Err(Error::contract(format!(
                "head built for width {} but attention has width {}",
                self.head.d(),
                self.attn.d
            )));
        }
        Ok(())
    }

    fn check_scene(&self, scene: &SceneExample) -> Result<()> {
        let d = self.d();
        if scene.vis.cols() != d || scene.seg.cols() != d || scene.text.cols() != d {
            return Err(Error::contract(format!(
                "scene {} has feature width {} but the model expects {d}",
                scene.scene_id,
                scene.vis.cols()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub attn: AttentionVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Inverse of [`Self::all`].
    pub fn from_slice(d: usize, heads: usize, vars: &[crate::tape::Var]) -> Self {
        Self {
            attn: AttentionVars::from_slice(d, heads, &vars[..18]),
            head: HeadVars::from_slice(&vars[18..]),
        }
    }

    pub fn all(&self) -> Vec<crate::tape::Var> {
        let mut out = self.attn.all();
        out.extend(self.head.all());
        out
    }
}

/// Projections and head weights uniform in `±1/√fan_in` (at most `1/√d`),
/// layer-norm gain 1, biases 0.
pub fn init_params(d: usize, heads: usize, d_hid: usize, seed: u64) -> Result<Model> {
    let mut attn = AttentionParams::zeroed(d, heads)?;
    let mut head = GraspHeadParams::zeroed(d, d_hid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut fill = |t: &mut Tensor, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
    };
    for s in [&mut attn.text, &mut attn.vis, &mut attn.seg] {
        fill(&mut s.w_q, d);
        fill(&mut s.w_k, d);
        fill(&mut s.w_v, d);
        fill(&mut s.w_o, d);
    }
    fill(&mut head.w1, 2 * d);
    fill(&mut head.w2, d_hid);
    fill(&mut head.w_score, d_hid);
    fill(&mut head.w_reg, d_hid);
    Ok(Model { attn, head })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub mode: QueryMode,
    pub heads: usize,
    pub seed: u64,
    pub disable_seg_stream: bool,
    pub disable_correspondence_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            loss: LossConfig::default(),
            mode: QueryMode::TextQuery,
            heads: 4,
            seed: 0,
            disable_seg_stream: false,
            disable_correspondence_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        self.loss.validate()
    }

    /// Canonical form: a zero correspondence weight and the
    /// `disable_correspondence_loss` flag always appear together, so the two
    /// spellings of the same run produce identical checkpoints.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if c.disable_correspondence_loss || c.loss.lambda_c == 0.0 {
            c.disable_correspondence_loss = true;
            c.loss.lambda_c = 0.0;
        }
        c
    }

    /// Whether the correspondence loss contributes.
    pub fn uses_correspondence(&self) -> bool {
        !self.disable_seg_stream && !self.disable_correspondence_loss && self.loss.lambda_c > 0.0
    }
}

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One bias-corrected update of `params` against `grads`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    scene: &SceneExample,
    mode: QueryMode,
    with_seg: bool,
) -> Result<(AttentionNodes, HeadNodes)> {
    let f_text = tape.constant(scene.text.clone());
    let f_vis = tape.constant(scene.vis.clone());
    let f_seg = tape.constant(scene.seg.clone());
    let nodes = forward_on_tape(tape, f_text, f_vis, f_seg, &vars.attn, mode, with_seg)?;
    let head = fuse_and_score_on_tape(tape, nodes.z_text, nodes.z_vis, &vars.head)?;
    Ok((nodes, head))
}

/// Records one scene's training loss on `tape`.
pub fn scene_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    scene: &SceneExample,
    cfg: &TrainConfig,
) -> Result<crate::tape::Var> {
    let use_cor = cfg.uses_correspondence();
    let (attn, head) = forward(tape, vars, scene, cfg.mode, use_cor)?;
    let l_grasp = grasp_loss(tape, head.logits, head.rect_raw, &scene.labels, &scene.gt_rects, &cfg.loss)?;
    match attn.z_seg {
        Some(z_seg) if use_cor => {
            let l_cor = correspondence_loss(tape, attn.z_vis, z_seg, &cfg.loss)?;
            total_loss(tape, l_grasp, l_cor, &cfg.loss)
        }
        _ => Ok(l_grasp),
    }
}

/// Loss and per-parameter gradients for one scene, in
/// [`Model::named_tensors`] order.
pub fn scene_gradient(model: &Model, scene: &SceneExample, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    model.check_scene(scene)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let loss = scene_loss(&mut tape, &vars, scene, cfg)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            scene_id: scene.scene_id,
            value,
        });
    }
    let mut grads = tape.backward(loss)?;
    let out: Vec<Tensor> = vars
        .all()
        .into_iter()
        .map(|v| {
            let (r, c) = tape.shape(v);
            grads.take(v).unwrap_or_else(|| Tensor::zeros(r, c))
        })
        .collect();
    if let Some(&bad) = out.iter().flat_map(|g| g.data()).find(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            scene_id: scene.scene_id,
            value: bad,
        });
    }
    Ok((value, out))
}

/// Loss of one scene without gradients.
pub fn scene_loss_value(model: &Model, scene: &SceneExample, cfg: &TrainConfig) -> Result<f64> {
    model.check_scene(scene)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let loss = scene_loss(&mut tape, &vars, scene, cfg)?;
    Ok(tape.value(loss).item())
}

/// Mean loss and mean gradient over a batch. Per-scene work fans out
/// through `exec`; the reduction runs in batch order.
pub fn batch_gradient(
    model: &Model,
    batch: &[&SceneExample],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let results = exec.map(batch, |s| scene_gradient(model, s, cfg));
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut acc = acc.expect("non-empty batch");
    for t in &mut acc {
        t.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, acc))
}

/// Per-epoch training log entry. Epoch 0 describes the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub h: Option<f64>,
}

impl EpochRecord {
    fn new(epoch: usize, loss: f64, report: Option<&EvalReport>) -> Self {
        Self {
            epoch,
            loss,
            seen: report.and_then(|r| r.seen_success()),
            unseen: report.and_then(|r| r.unseen_success()),
            h: report.and_then(|r| r.harmonic),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Mean loss over `scenes` under the current parameters.
pub fn mean_loss(model: &Model, scenes: &[SceneExample], cfg: &TrainConfig, exec: Execution) -> Result<f64> {
    let losses = exec.map(scenes, |s| scene_loss_value(model, s, cfg));
    let mut total = 0.0;
    for (l, s) in losses.into_iter().zip(scenes) {
        let l = l?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                scene_id: s.scene_id,
                value: l,
            });
        }
        total += l;
    }
    Ok(total / scenes.len() as f64)
}

/// Trains a freshly initialized model. `eval` scenes, when given, are
/// scored after every epoch; `on_epoch` sees each record as it is made.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[SceneExample],
    eval: &[SceneExample],
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let cfg = cfg.normalized();
    cfg.validate()?;
    let first = scenes
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let d = first.vis.cols();
    let mut model = init_params(d, cfg.heads, 2 * d, cfg.seed)?;
    for s in scenes.iter().chain(eval) {
        model.check_scene(s)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut adam = Adam::from_config(&cfg);
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    let evaluate = |model: &Model| -> Result<Option<EvalReport>> {
        if eval.is_empty() {
            Ok(None)
        } else {
            evaluate_model(model, cfg.mode, eval, exec).map(Some)
        }
    };

    let initial = EpochRecord::new(0, mean_loss(&model, scenes, &cfg, exec)?, evaluate(&model)?.as_ref());
    on_epoch(&initial);
    history.push(initial);

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneExample> = chunk.iter().map(|&i| &scenes[i]).collect();
            let (loss, grads) = batch_gradient(&model, &batch, &cfg, exec)?;
            total += loss * batch.len() as f64;
            adam.step(model.tensors_mut(), &grads)?;
        }
        let record = EpochRecord::new(epoch, total / scenes.len() as f64, evaluate(&model)?.as_ref());
        on_epoch(&record);
        history.push(record);
    }

    Ok(Checkpoint {
        epoch: cfg.epochs,
        config: cfg,
        rng,
        model,
        history,
    })
}

/// Scores, rectangles, and the chosen proposal for one scene.
pub fn predict(model: &Model, scene: &SceneExample, mode: QueryMode) -> Result<GraspPrediction> {
    model.check_scene(scene)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let (_, head) = forward(&mut tape, &vars, scene, mode, false)?;
    prediction_from_raw(tape.value(head.logits), tape.value(head.rect_raw))
}

/// Attended visual features `z_vis` (`m×d`) for one scene.
pub fn visual_features(model: &Model, scene: &SceneExample, mode: QueryMode) -> Result<Tensor> {
    model.check_scene(scene)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let (attn, _) = forward(&mut tape, &vars, scene, mode, false)?;
    Ok(tape.value(attn.z_vis).clone())
}

fn split_of(scene: &SceneExample) -> Split {
    if scene.is_unseen {
        Split::Unseen
    } else {
        Split::Seen
    }
}

/// Success of one predicted rectangle per scene against the target
/// proposal's ground truth.
pub fn evaluate_predictions(predictions: &[GraspRect], scenes: &[SceneExample]) -> Result<EvalReport> {
    if predictions.len() != scenes.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    let results = predictions
        .iter()
        .zip(scenes)
        .map(|(p, s)| {
            Ok(SceneResult {
                success: is_success(p, std::slice::from_ref(s.target_rect()))?,
                split: split_of(s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_available(&results))
}

pub fn evaluate_model(model: &Model, mode: QueryMode, scenes: &[SceneExample], exec: Execution) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let picked = exec.map(scenes, |s| {
        let pred = predict(model, s, mode)?;
        Ok(select_best(&pred)?.0)
    });
    let picked = picked.into_iter().collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&picked, scenes)
}

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: TrainConfig,
    epoch: usize,
    rng: ChaCha8Rng,
    d: usize,
    heads: usize,
    d_hid: usize,
    params: Vec<NamedParam>,
    history: Vec<EpochRecord>,
}

fn corrupt(message: impl ToString) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        message: message.to_string(),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            d: self.model.attn.d,
            heads: self.model.attn.heads,
            d_hid: self.model.head.d_hid(),
            params: self
                .model
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedParam {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
            history: self.history.clone(),
        };
        let mut s = json::to_string(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(corrupt)?;
        let version = value
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| corrupt("missing format_version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(corrupt)?;
        let mut model = Model {
            attn: AttentionParams::zeroed(file.d, file.heads).map_err(corrupt)?,
            head: GraspHeadParams::zeroed(file.d, file.d_hid),
        };
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != file.params.len() {
            return Err(corrupt(format!(
                "expected {} parameters, found {}",
                names.len(),
                file.params.len()
            )));
        }
        for ((name, slot), p) in names.iter().zip(model.tensors_mut()).zip(file.params) {
            if *name != p.name {
                return Err(corrupt(format!("expected parameter `{name}`, found `{}`", p.name)));
            }
            if slot.shape() != (p.rows, p.cols) {
                return Err(corrupt(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    (p.rows, p.cols),
                    slot.shape()
                )));
            }
            *slot = Tensor::from_vec(p.rows, p.cols, p.data).map_err(corrupt)?;
        }
        Ok(Checkpoint {
            config: file.config,
            epoch: file.epoch,
            rng: file.rng,
            model,
            history: file.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
