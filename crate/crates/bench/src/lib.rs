//! Deterministic inputs for the kernel benchmarks.

use mlcap::nn::Matrix;
use mlcap::rng;
use rand::Rng;

const WORDS: [&str; 16] = [
    "a", "the", "red", "blue", "wooden", "metal", "chair", "table", "with", "four", "legs", "seat", "back", "and", "round", "top",
];

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, "bench-matrix", (rows * 1000 + cols) as u64);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn sentence<R: Rng>(r: &mut R) -> Vec<String> {
    let len = r.gen_range(4..12);
    (0..len).map(|_| WORDS[r.gen_range(0..WORDS.len())].to_string()).collect()
}

/// Candidate/reference pairs drawn from a small vocabulary.
pub fn caption_pairs(n: usize, refs: usize, seed: u64) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = rng::stream(seed, "bench-captions", n as u64);
    (0..n).map(|_| (sentence(&mut r), (0..refs).map(|_| sentence(&mut r)).collect())).collect()
}
