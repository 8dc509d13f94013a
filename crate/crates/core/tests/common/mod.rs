//! Straight-line reference implementations over `Vec<Vec<f64>>`, written
//! without the library's tensor or tape code.

#![allow(dead_code)]

use maskgrasp::attention::{AttentionParams, AttentionVars};
use maskgrasp::{StreamFeatures, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn from_tensor(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn cols(a: &Mat, lo: usize, hi: usize) -> Mat {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(c, x)| (x - mean) / sd * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Weights for one stream.
#[derive(Clone, Debug)]
pub struct Stream {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Stream {
    pub fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let s = 1.5 / (d as f64).sqrt();
        Self {
            wq: rand_mat(rng, d, d, s),
            wk: rand_mat(rng, d, d, s),
            wv: rand_mat(rng, d, d, s),
            wo: rand_mat(rng, d, d, s),
            gain: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
            bias: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    pub fn load_into(&self, p: &mut maskgrasp::attention::StreamParams) {
        p.w_q = to_tensor(&self.wq);
        p.w_k = to_tensor(&self.wk);
        p.w_v = to_tensor(&self.wv);
        p.w_o = to_tensor(&self.wo);
        p.ln_gain = to_tensor(&vec![self.gain.clone()]);
        p.ln_bias = to_tensor(&vec![self.bias.clone()]);
    }
}

/// Scaled dot-product attention, optionally split into heads.
/// Returns `(attended, head-averaged weights)`.
pub fn attention(q_in: &Mat, k_in: &Mat, v_in: &Mat, s: &Stream, heads: usize) -> (Mat, Mat) {
    let d = s.wq.len();
    let q = matmul(q_in, &s.wq);
    let k = matmul(k_in, &s.wk);
    let v = matmul(v_in, &s.wv);
    if heads == 1 {
        let scale = 1.0 / (d as f64).sqrt();
        let logits: Mat = matmul(&q, &transpose(&k))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x * scale).collect())
            .collect();
        let w = softmax_rows(&logits);
        return (matmul(&w, &v), w);
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat: Mat = vec![Vec::with_capacity(d); q.len()];
    let mut avg: Mat = vec![vec![0.0; k.len()]; q.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * dh, (h + 1) * dh), cols(&k, h * dh, (h + 1) * dh), cols(&v, h * dh, (h + 1) * dh));
        let logits: Mat = matmul(&qh, &transpose(&kh))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x * scale).collect())
            .collect();
        let w = softmax_rows(&logits);
        for (row, out) in matmul(&w, &vh).into_iter().zip(concat.iter_mut()) {
            out.extend(row);
        }
        for (a, r) in avg.iter_mut().zip(&w) {
            for (x, y) in a.iter_mut().zip(r) {
                *x += y / heads as f64;
            }
        }
    }
    (matmul(&concat, &s.wo), avg)
}

pub fn text_stream(f_text: &Mat, s: &Stream, heads: usize) -> (Mat, Mat) {
    let (att, w) = attention(f_text, f_text, f_text, s, heads);
    (w, layer_norm(&add(&att, f_text), &s.gain, &s.bias))
}

pub fn vis_stream_text_query(f_text: &Mat, f_vis: &Mat, s: &Stream, heads: usize) -> (Mat, Mat) {
    let pooled = vec![mean_rows(f_text)];
    let (att, w) = attention(&pooled, f_vis, f_vis, s, heads);
    let pre: Mat = f_vis
        .iter()
        .map(|r| r.iter().zip(&att[0]).map(|(x, a)| x + a).collect())
        .collect();
    (w, layer_norm(&pre, &s.gain, &s.bias))
}

pub fn vis_stream_region_query(f_text: &Mat, f_vis: &Mat, s: &Stream, heads: usize) -> (Mat, Mat) {
    let (att, w) = attention(f_vis, f_text, f_text, s, heads);
    (w, layer_norm(&add(&att, f_vis), &s.gain, &s.bias))
}

pub fn seg_stream(f_vis: &Mat, f_seg: &Mat, s: &Stream, heads: usize) -> (Mat, Mat) {
    let (att, w) = attention(f_vis, f_seg, f_seg, s, heads);
    (w, layer_norm(&add(&att, f_seg), &s.gain, &s.bias))
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum()
}

/// Brute-force hard-negative mining and triplet hinge sum.
pub fn correspondence(z_vis: &Mat, z_seg: &Mat, alpha: f64) -> (f64, Vec<usize>, Vec<usize>) {
    let m = z_vis.len();
    let mut loss = 0.0;
    let (mut is, mut js) = (Vec::new(), Vec::new());
    for a in 0..m {
        let mut i_best = None::<(usize, f64)>;
        let mut j_best = None::<(usize, f64)>;
        for k in 0..m {
            if k == a {
                continue;
            }
            let si = cos(&z_vis[a], &z_seg[k]);
            if i_best.is_none_or(|(_, v)| si > v) {
                i_best = Some((k, si));
            }
            let sj = cos(&z_vis[k], &z_seg[a]);
            if j_best.is_none_or(|(_, v)| sj > v) {
                j_best = Some((k, sj));
            }
        }
        let pos = cos(&z_vis[a], &z_seg[a]);
        let (i, si) = i_best.unwrap();
        let (j, sj) = j_best.unwrap();
        loss += (alpha - pos + si).max(0.0) + (alpha - pos + sj).max(0.0);
        is.push(i);
        js.push(j);
    }
    (loss, is, js)
}

fn inside(px: f64, py: f64, r: &maskgrasp::GraspRect, cs: (f64, f64)) -> bool {
    let (c, s) = cs;
    let (dx, dy) = (px - r.x, py - r.y);
    (c * dx + s * dy).abs() <= 0.5 * r.w && (-s * dx + c * dy).abs() <= 0.5 * r.h
}

fn bbox(r: &maskgrasp::GraspRect) -> [f64; 4] {
    let (s, c) = r.theta.to_radians().sin_cos();
    let ex = 0.5 * (r.w * c.abs() + r.h * s.abs());
    let ey = 0.5 * (r.w * s.abs() + r.h * c.abs());
    [r.x - ex, r.y - ey, r.x + ex, r.y + ey]
}

/// Monte-Carlo IoU from `grid²` jittered samples (one uniform point per
/// cell) over the union bounding box.
pub fn mc_iou<R: Rng>(a: &maskgrasp::GraspRect, b: &maskgrasp::GraspRect, grid: usize, rng: &mut R) -> f64 {
    let (ba, bb) = (bbox(a), bbox(b));
    let (x0, y0) = (ba[0].min(bb[0]), ba[1].min(bb[1]));
    let (x1, y1) = (ba[2].max(bb[2]), ba[3].max(bb[3]));
    let (cw, ch) = ((x1 - x0) / grid as f64, (y1 - y0) / grid as f64);
    let csa = { let (s, c) = a.theta.to_radians().sin_cos(); (c, s) };
    let csb = { let (s, c) = b.theta.to_radians().sin_cos(); (c, s) };
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..grid {
        for j in 0..grid {
            let px = x0 + (i as f64 + rng.random::<f64>()) * cw;
            let py = y0 + (j as f64 + rng.random::<f64>()) * ch;
            let (ia, ib) = (inside(px, py, a, csa), inside(px, py, b, csb));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Random rectangle pair; about half the pairs are placed to overlap.
pub fn random_rect_pair<R: Rng>(rng: &mut R) -> (maskgrasp::GraspRect, maskgrasp::GraspRect) {
    let rect = |x: f64, y: f64, rng: &mut R| {
        maskgrasp::GraspRect::new(
            x,
            y,
            rng.random_range(0.02..0.6),
            rng.random_range(0.02..0.6),
            rng.random_range(-90.0..90.0),
        )
        .unwrap()
    };
    let a = rect(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng);
    let (bx, by) = if rng.random_bool(0.5) {
        (a.x + rng.random_range(-0.15..0.15), a.y + rng.random_range(-0.15..0.15))
    } else {
        (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
    };
    let b = rect(bx, by, rng);
    (a, b)
}

/// Random features and weights for all three streams.
pub struct Instance {
    pub d: usize,
    pub heads: usize,
    pub f_text: Mat,
    pub f_vis: Mat,
    pub f_seg: Mat,
    pub text: Stream,
    pub vis: Stream,
    pub seg: Stream,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..5).max(if heads == 1 { 2 } else { 1 });
        let k = r.random_range(1..6);
        let m = r.random_range(2..9);
        Self {
            d,
            heads,
            f_text: rand_mat(&mut r, k, d, 2.0),
            f_vis: rand_mat(&mut r, m, d, 2.0),
            f_seg: rand_mat(&mut r, m, d, 2.0),
            text: Stream::random(&mut r, d),
            vis: Stream::random(&mut r, d),
            seg: Stream::random(&mut r, d),
        }
    }

    pub fn params(&self) -> AttentionParams {
        let mut p = AttentionParams::zeroed(self.d, self.heads).unwrap();
        self.text.load_into(&mut p.text);
        self.vis.load_into(&mut p.vis);
        self.seg.load_into(&mut p.seg);
        p
    }

    pub fn features(&self) -> StreamFeatures {
        StreamFeatures {
            text: to_tensor(&self.f_text),
            vis: to_tensor(&self.f_vis),
            seg: to_tensor(&self.f_seg),
        }
    }
}

pub fn assert_stochastic(w: &Mat) {
    for row in w {
        assert!(row.iter().all(|&x| x >= 0.0));
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
    }
}

/// Runs one stream function of the library on a fresh tape.
pub fn with_tape<F>(inst: &Instance, f: F) -> (Mat, Mat)
where
    F: FnOnce(&mut Tape, [maskgrasp::Var; 3], &AttentionVars) -> (maskgrasp::Tensor, maskgrasp::Var),
{
    let p = inst.params();
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let ft = tape.constant(to_tensor(&inst.f_text));
    let fv = tape.constant(to_tensor(&inst.f_vis));
    let fs = tape.constant(to_tensor(&inst.f_seg));
    let (s, z) = f(&mut tape, [ft, fv, fs], &vars);
    (from_tensor(&s), from_tensor(tape.value(z)))
}

