//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segcurate_core::losses::{AttentionStack, GroundTruthGrid};
use segcurate_core::mask::BinaryMask;
use segcurate_core::matching::CostMatrix;

/// Blobby mask: random disks on an empty canvas.
pub fn blobs(h: usize, w: usize, disks: usize, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64, f64)> = (0..disks)
        .map(|_| {
            let r = rng.gen_range(2.0..(h.min(w) as f64 / 6.0).max(3.0));
            (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), r)
        })
        .collect();
    BinaryMask::from_fn(h, w, |r, c| {
        centers
            .iter()
            .any(|&(cy, cx, rad)| (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= rad * rad)
    })
    .expect("non-empty shape")
}

/// Salt-and-pepper mask with the given foreground density.
pub fn noise(h: usize, w: usize, density: f64, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
    BinaryMask::new(h, w, data).expect("sizes agree")
}

pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CostMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>()).collect()).expect("sizes agree")
}

pub fn attention(blocks: usize, heads: usize, d: usize, seed: u64) -> (AttentionStack, GroundTruthGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..blocks * heads * d * d).map(|_| rng.gen::<f64>()).collect();
    let cells = (0..d * d).map(|i| u8::from(i % d < d / 3)).collect();
    (
        AttentionStack::new(blocks, heads, d, data).expect("sizes agree"),
        GroundTruthGrid::new(d, cells).expect("binary cells"),
    )
}
