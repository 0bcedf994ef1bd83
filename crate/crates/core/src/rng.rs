//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 generator derived from
//! a user seed plus a named sub-stream label, optionally keyed by an index.
//! Nothing reads ambient entropy, so every artifact can be replayed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::linalg::{Matrix, UnitVector};

fn label_hash(label: &str) -> u64 {
    // FNV-1a, 64 bit
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn seed_bytes(seed: u64, label: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[..8].copy_from_slice(&seed.to_le_bytes());
    out[8..16].copy_from_slice(&label_hash(label).to_le_bytes());
    out[16..24].copy_from_slice(&0x6772_6173_705f_6c61_u64.to_le_bytes());
    out
}

/// Generator for the named sub-stream `label` of `seed`.
pub fn substream(seed: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(seed_bytes(seed, label))
}

/// Generator for element `index` of the named sub-stream. Distinct indices
/// use distinct ChaCha stream ids, so draws never overlap.
pub fn keyed(seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut rng = substream(seed, label);
    rng.set_stream(index);
    rng
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

/// Uniformly distributed direction on the sphere.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> UnitVector {
    loop {
        let v = gaussian_vec(rng, n);
        if let Ok(u) = UnitVector::normalize(v) {
            return u;
        }
    }
}
