//! Deterministic synthetic scenes standing in for frozen visual,
//! segmentation, and text backbones.
//!
//! Every category has a latent prototype `c ∈ R^d`. Three fixed orthogonal
//! maps embed it into the visual, segmentation, and text streams, so all
//! three share one linear semantic manifold and unseen categories remain
//! reachable through the same maps.
//!
//! A visual row is laid out as
//!
//! ```text
//! [ rho | x y | E·g (5) | appearance (d - 8) ]
//! ```
//!
//! where `rho` is the proposal probability, `(x, y)` the proposal center,
//! `g` the proposal's normalized rectangle, and `E` a fixed scaled
//! orthogonal encoding. Noise (`noise_sigma`) is applied to the semantic
//! content (appearance, segmentation, text), not to the geometry columns.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use serde_json::Value;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::json;
use crate::exec::Execution;
use crate::geometry::GraspRect;
use crate::losses::normalized_rect;
use crate::tensor::Tensor;

/// Columns before the appearance block.
pub const GEOMETRY_COLS: usize = 8;
pub const RHO_COL: usize = 0;
pub const POSITION_COLS: std::ops::Range<usize> = 1..3;
pub const ENCODED_RECT_COLS: std::ops::Range<usize> = 3..8;
/// Scale of the rectangle encoding matrix.
pub const ENCODING_SCALE: f64 = 3.0;
pub const SEEN_FRACTION: f64 = 0.7;
/// Norm of every latent, both category prototypes and noise-proposal latents.
pub const PROTOTYPE_NORM: f64 = 1.25;
pub const WIDTH_RANGE: std::ops::Range<f64> = 0.3..0.5;
pub const HEIGHT_RANGE: std::ops::Range<f64> = 0.25..0.4;

const WORLD_STREAM: u64 = 0;
const SCENE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Feature width.
    pub d: usize,
    /// Proposals per scene.
    pub m: usize,
    /// Text tokens per scene.
    pub k: usize,
    pub num_categories: usize,
    pub noise_sigma: f64,
    pub occlusion_mode: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d: 32,
            m: 8,
            k: 4,
            num_categories: 20,
            noise_sigma: 0.1,
            occlusion_mode: false,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn seen_count(&self) -> usize {
        (SEEN_FRACTION * self.num_categories as f64).round() as usize
    }

    pub fn unseen_count(&self) -> usize {
        self.num_categories - self.seen_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < GEOMETRY_COLS + 2 {
            return Err(Error::Config(format!(
                "feature width must be at least {}, got {}",
                GEOMETRY_COLS + 2,
                self.d
            )));
        }
        if self.m < 2 {
            return Err(Error::Config(format!("need at least 2 proposals, got {}", self.m)));
        }
        if self.k < 1 {
            return Err(Error::Config("need at least 1 text token".into()));
        }
        if self.seen_count() < 2 || self.unseen_count() < 2 {
            return Err(Error::Config(format!(
                "{} categories leave {} seen / {} unseen; each split needs at least 2",
                self.num_categories,
                self.seen_count(),
                self.unseen_count()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One scene. Row `i` of `vis` and `seg` describe the same proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneExample {
    pub scene_id: u64,
    pub category_id: usize,
    pub is_unseen: bool,
    pub target_index: usize,
    pub vis: Tensor,
    pub seg: Tensor,
    pub text: Tensor,
    pub labels: Vec<bool>,
    pub gt_rects: Vec<GraspRect>,
}

impl SceneExample {
    pub fn target_rect(&self) -> &GraspRect {
        &self.gt_rects[self.target_index]
    }

    pub fn proposals(&self) -> usize {
        self.vis.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.vis.rows();
        let d = self.vis.cols();
        if self.seg.shape() != (m, d) || self.text.cols() != d || self.text.rows() == 0 {
            return Err(Error::contract(format!(
                "scene {}: stream shapes vis {:?}, seg {:?}, text {:?} disagree",
                self.scene_id,
                self.vis.shape(),
                self.seg.shape(),
                self.text.shape()
            )));
        }
        if self.labels.len() != m || self.gt_rects.len() != m || self.target_index >= m {
            return Err(Error::contract(format!(
                "scene {}: labels/rects/target do not match {m} proposals",
                self.scene_id
            )));
        }
        if self.labels.iter().filter(|&&l| l).count() != 1 || !self.labels[self.target_index] {
            return Err(Error::contract(format!(
                "scene {}: exactly the target proposal must be labeled positive",
                self.scene_id
            )));
        }
        Ok(())
    }
}

/// Fixed, seed-derived pieces shared by every scene of a dataset.
#[derive(Clone, Debug)]
pub struct World {
    pub config: GeneratorConfig,
    /// `num_categories × d`
    pub prototypes: Tensor,
    pub visual_map: Tensor,
    pub seg_map: Tensor,
    pub text_map: Tensor,
    /// `5 × 5`, applied as `g · encoding`.
    pub encoding: Tensor,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rescale(v: &mut [f64], norm: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= norm / n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| normal(rng))
}

/// Orthogonal matrix from modified Gram–Schmidt on the rows of a Gaussian.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut q = gaussian(rng, n, n);
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let prev = q.row(j).to_vec();
            for (a, b) in q.row_mut(i).iter_mut().zip(prev) {
                *a -= dot * b;
            }
        }
        let norm = q.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|a| *a /= norm);
    }
    q
}

fn row_times(v: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols())
        .map(|c| v.iter().enumerate().map(|(r, x)| x * m.get(r, c)).sum())
        .collect()
}

impl World {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(WORLD_STREAM);
        let d = config.d;

        let mut order: Vec<usize> = (0..config.num_categories).collect();
        order.shuffle(&mut rng);
        let mut seen = order[..config.seen_count()].to_vec();
        let mut unseen = order[config.seen_count()..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();

        let mut prototypes = gaussian(&mut rng, config.num_categories, d);
        for r in 0..prototypes.rows() {
            rescale(prototypes.row_mut(r), PROTOTYPE_NORM);
        }
        let visual_map = random_orthogonal(&mut rng, d);
        let seg_map = random_orthogonal(&mut rng, d);
        let text_map = random_orthogonal(&mut rng, d);
        let mut encoding = random_orthogonal(&mut rng, 5);
        encoding.data_mut().iter_mut().for_each(|x| *x *= ENCODING_SCALE);

        Ok(Self {
            config: config.clone(),
            prototypes,
            visual_map,
            seg_map,
            text_map,
            encoding,
            seen,
            unseen,
        })
    }

    pub fn is_unseen(&self, category: usize) -> bool {
        self.unseen.binary_search(&category).is_ok()
    }

    fn embed(&self, map: &Tensor, category: usize) -> Vec<f64> {
        row_times(self.prototypes.row(category), map)
    }

    /// Noise-free appearance block `(c·A)[8..d]` for a category.
    pub fn appearance(&self, category: usize) -> Vec<f64> {
        self.embed(&self.visual_map, category)[GEOMETRY_COLS..].to_vec()
    }

    pub fn seg_embedding(&self, category: usize) -> Vec<f64> {
        self.embed(&self.seg_map, category)
    }

    pub fn text_embedding(&self, category: usize) -> Vec<f64> {
        self.embed(&self.text_map, category)
    }

    pub fn encode_rect(&self, rect: &GraspRect) -> Vec<f64> {
        row_times(&normalized_rect(rect), &self.encoding)
    }

    /// Inverts [`Self::encode_rect`] on a visual row's reserved columns.
    pub fn decode_rect(&self, vis_row: &[f64]) -> [f64; 5] {
        let enc = &vis_row[ENCODED_RECT_COLS];
        let s2 = ENCODING_SCALE * ENCODING_SCALE;
        let mut out = [0.0; 5];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..5).map(|c| enc[c] * self.encoding.get(r, c)).sum::<f64>() / s2;
        }
        out
    }

    fn scene_rng(&self, scene_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ scene_id);
        rng.set_stream(SCENE_STREAM);
        rng
    }

    /// Generates scene `scene_id` with the given target category.
    pub fn generate_scene(&self, category: usize, scene_id: u64) -> Result<SceneExample> {
        let mut rng = self.scene_rng(scene_id);
        self.generate_with(category, scene_id, &mut rng)
    }

    fn generate_with(&self, category: usize, scene_id: u64, rng: &mut ChaCha8Rng) -> Result<SceneExample> {
        let cfg = &self.config;
        if category >= cfg.num_categories {
            return Err(Error::contract(format!(
                "category {category} out of range (num_categories = {})",
                cfg.num_categories
            )));
        }
        let (d, m, sigma) = (cfg.d, cfg.m, cfg.noise_sigma);
        let is_unseen = self.is_unseen(category);
        let pool: Vec<usize> = if is_unseen { &self.unseen } else { &self.seen }
            .iter()
            .copied()
            .filter(|&c| c != category)
            .collect();

        let target_index = rng.random_range(0..m);
        let n_distract = rng.random_range(1..=3usize).min(m - 1).min(pool.len());
        let mut others: Vec<usize> = (0..m).filter(|&i| i != target_index).collect();
        others.shuffle(rng);
        let distractor_cats: Vec<usize> = pool.choose_multiple(rng, n_distract).copied().collect();

        // None marks a background proposal
        let mut object_of: Vec<Option<usize>> = vec![None; m];
        object_of[target_index] = Some(category);
        for (slot, cat) in others.iter().zip(&distractor_cats) {
            object_of[*slot] = Some(*cat);
        }

        let mut vis = Tensor::zeros(m, d);
        let mut seg = Tensor::zeros(m, d);
        let mut gt_rects = Vec::with_capacity(m);
        for (i, obj) in object_of.iter().enumerate() {
            let rect = GraspRect::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(WIDTH_RANGE),
                rng.random_range(HEIGHT_RANGE),
                rng.random_range(-90.0..90.0),
            )?;
            let rho = match obj {
                Some(_) => rng.random_range(0.6..1.0),
                None => rng.random_range(0.0..0.4),
            };
            let row = vis.row_mut(i);
            row[RHO_COL] = rho;
            row[POSITION_COLS].copy_from_slice(&[rect.x, rect.y]);
            row[ENCODED_RECT_COLS].copy_from_slice(&self.encode_rect(&rect));
            match obj {
                Some(cat) => {
                    let app = self.appearance(*cat);
                    for (v, a) in row[GEOMETRY_COLS..].iter_mut().zip(app) {
                        *v = a + sigma * normal(rng);
                    }
                    let s = self.seg_embedding(*cat);
                    for (v, a) in seg.row_mut(i).iter_mut().zip(s) {
                        *v = a + sigma * normal(rng);
                    }
                }
                None => {
                    let mut u: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                    rescale(&mut u, PROTOTYPE_NORM);
                    let app = row_times(&u, &self.visual_map);
                    for (v, a) in row[GEOMETRY_COLS..].iter_mut().zip(&app[GEOMETRY_COLS..]) {
                        *v = a + sigma * normal(rng);
                    }
                    let sg = row_times(&u, &self.seg_map);
                    for (v, a) in seg.row_mut(i).iter_mut().zip(sg) {
                        *v = a + sigma * normal(rng);
                    }
                }
            }
            gt_rects.push(rect);
        }

        if cfg.occlusion_mode {
            let target_app = vis.row(target_index)[GEOMETRY_COLS..].to_vec();
            for slot in others.iter().take(distractor_cats.len()) {
                let row = vis.row_mut(*slot);
                for (v, t) in row[GEOMETRY_COLS..].iter_mut().zip(&target_app) {
                    *v = 0.5 * *v + 0.5 * t;
                }
            }
        }

        let text_base = self.text_embedding(category);
        let text = Tensor::from_fn(cfg.k, d, |_, c| text_base[c] + sigma * normal(rng));
        let labels = (0..m).map(|i| i == target_index).collect();

        Ok(SceneExample {
            scene_id,
            category_id: category,
            is_unseen,
            target_index,
            vis,
            seg,
            text,
            labels,
            gt_rects,
        })
    }

    /// Scene whose category is drawn uniformly from `categories`.
    pub fn sample_scene(&self, categories: &[usize], scene_id: u64) -> Result<SceneExample> {
        let mut rng = self.scene_rng(scene_id);
        let category = categories[rng.random_range(0..categories.len())];
        self.generate_with(category, scene_id, &mut rng)
    }
}

/// Train scenes from seen categories; evaluation scenes from each split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<SceneExample>,
    pub eval_seen: Vec<SceneExample>,
    pub eval_unseen: Vec<SceneExample>,
}

impl Dataset {
    /// Seen then unseen evaluation scenes.
    pub fn eval(&self) -> Vec<SceneExample> {
        self.eval_seen.iter().chain(&self.eval_unseen).cloned().collect()
    }
}

pub fn generate_dataset(
    cfg: &GeneratorConfig,
    n_train: usize,
    n_eval_seen: usize,
    n_eval_unseen: usize,
    exec: Execution,
) -> Result<Dataset> {
    let world = World::new(cfg)?;
    let make = |categories: &[usize], start: usize, n: usize| -> Result<Vec<SceneExample>> {
        exec.map_range(start..start + n, |id| world.sample_scene(categories, id as u64))
            .into_iter()
            .collect()
    };
    let train = make(&world.seen, 0, n_train)?;
    let eval_seen = make(&world.seen, n_train, n_eval_seen)?;
    let eval_unseen = make(&world.unseen, n_train + n_eval_seen, n_eval_unseen)?;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        eval_seen,
        eval_unseen,
    })
}

/// Current dataset file layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct HeaderOut<'a> {
    schema_version: u32,
    config: &'a GeneratorConfig,
}

/// Writes a header line carrying `config`, then one scene per line.
pub fn write_dataset_to<W: Write>(writer: &mut W, config: &GeneratorConfig, scenes: &[SceneExample]) -> Result<()> {
    json::write_record(
        writer,
        &HeaderOut {
            schema_version: SCHEMA_VERSION,
            config,
        },
    )?;
    for scene in scenes {
        json::write_record(writer, scene)?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, config: &GeneratorConfig, scenes: &[SceneExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, config, scenes)?;
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, field: &str, message: impl ToString) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn field<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, line: usize, name: &str) -> Result<T> {
    let v = obj.get(name).ok_or_else(|| parse_err(line, name, "missing"))?;
    T::deserialize(v).map_err(|e| parse_err(line, name, e))
}

fn parse_object(text: &str, line: usize) -> Result<serde_json::Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(parse_err(line, "<record>", "expected an object")),
        Err(e) => Err(parse_err(line, "<record>", e)),
    }
}

fn parse_scene(text: &str, line: usize) -> Result<SceneExample> {
    let obj = parse_object(text, line)?;
    let scene = SceneExample {
        scene_id: field(&obj, line, "scene_id")?,
        category_id: field(&obj, line, "category_id")?,
        is_unseen: field(&obj, line, "is_unseen")?,
        target_index: field(&obj, line, "target_index")?,
        vis: field(&obj, line, "vis")?,
        seg: field(&obj, line, "seg")?,
        text: field(&obj, line, "text")?,
        labels: field(&obj, line, "labels")?,
        gt_rects: field(&obj, line, "gt_rects")?,
    };
    scene.validate().map_err(|e| parse_err(line, "<record>", e))?;
    Ok(scene)
}

/// Reads a dataset written by [`write_dataset_to`]. Errors carry the
/// 1-based line number and the offending field.
pub fn read_dataset_from<R: BufRead>(reader: R) -> Result<(GeneratorConfig, Vec<SceneExample>)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(parse_err(1, "schema_version", "missing header")),
    };
    let obj = parse_object(&header, 1)?;
    let version: u32 = field(&obj, 1, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let config: GeneratorConfig = field(&obj, 1, "config")?;
    let mut scenes = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l?;
        let line = i + 2;
        if l.trim().is_empty() {
            continue;
        }
        scenes.push(parse_scene(&l, line)?);
    }
    Ok((config, scenes))
}

pub fn read_dataset(path: &Path) -> Result<(GeneratorConfig, Vec<SceneExample>)> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
