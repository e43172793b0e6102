//! Input fixtures shared by the benchmarks.

use mscan_core::eval::ItemMeta;
use mscan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Random distances plus metadata with `ids` identities spread over two cameras.
pub fn retrieval_problem(queries: usize, gallery: usize, ids: usize, seed: u64) -> (Tensor<f64>, Vec<ItemMeta>, Vec<ItemMeta>) {
    let mut r = rng(seed);
    let dist = (0..queries * gallery).map(|_| r.gen_range(0.0..4.0)).collect();
    let q = (0..queries).map(|i| ItemMeta::new(i % ids, 0)).collect();
    let g = (0..gallery).map(|i| ItemMeta::new(i % ids, 1)).collect();
    (Tensor::from_vec(&[queries, gallery], dist).expect("shape matches data"), q, g)
}
