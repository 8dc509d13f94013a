use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Straight-line per-row layer norm with unit gain and zero bias.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let q = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / q;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / q;
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) / (var + eps).sqrt();
        }
    }
    out
}
