//! Maps raw observations to stable [`StateId`]s.
//!
//! Tabular environments hash a canonical byte encoding of the observation.
//! Continuous observations go through a fixed random affine projector with a
//! recurrent hidden vector; the projected vector is quantized before hashing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transition_model::StateId;

pub const DEFAULT_QUANTIZATION_SCALE: f64 = 1e-3;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_OUTPUT_DIM: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Observations with a canonical, platform-independent byte encoding.
pub trait Canonical {
    fn canonical_bytes(&self) -> Vec<u8>;
}

impl Canonical for [i64] {
    fn canonical_bytes(&self) -> Vec<u8> {
        self.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl Canonical for Vec<i64> {
    fn canonical_bytes(&self) -> Vec<u8> {
        self.as_slice().canonical_bytes()
    }
}

pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn encode_tabular<O: Canonical + ?Sized>(obs: &O) -> StateId {
    StateId(stable_hash(&obs.canonical_bytes()))
}

/// Fixed random affine map `[state, hidden'] = W · [obs, hidden] + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomProjector {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Row-major, `(output_dim + hidden_dim) x (obs_dim + hidden_dim)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub initial_hidden: Vec<f64>,
    pub init_seed: u64,
    pub quantization_scale: f64,
}

impl RandomProjector {
    pub fn new(obs_dim: usize, hidden_dim: usize, output_dim: usize, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let rows = output_dim + hidden_dim;
        let cols = obs_dim + hidden_dim;
        let bound = if rows + cols == 0 {
            0.0
        } else {
            (6.0 / (rows + cols) as f64).sqrt()
        };
        let mut uniform = |b: f64| if b == 0.0 { 0.0 } else { rng.gen_range(-b..b) };
        let weight = (0..rows * cols).map(|_| uniform(bound)).collect();
        let bias = (0..rows).map(|_| uniform(bound)).collect();
        let initial_hidden = (0..hidden_dim).map(|_| uniform(1.0)).collect();
        Self {
            obs_dim,
            hidden_dim,
            output_dim,
            weight,
            bias,
            initial_hidden,
            init_seed,
            quantization_scale: DEFAULT_QUANTIZATION_SCALE,
        }
    }

    pub fn with_default_dims(obs_dim: usize, init_seed: u64) -> Self {
        Self::new(obs_dim, DEFAULT_HIDDEN_DIM, DEFAULT_OUTPUT_DIM, init_seed)
    }

    /// Returns `(state_vec, hidden_next)`.
    pub fn project_step(&self, obs: &[f64], hidden_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if obs.len() != self.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        if hidden_prev.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                got: hidden_prev.len(),
            });
        }
        let cols = self.obs_dim + self.hidden_dim;
        let mut out = self.bias.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weight[r * cols..(r + 1) * cols];
            let (w_obs, w_hidden) = row.split_at(self.obs_dim);
            *o += w_obs.iter().zip(obs).map(|(w, x)| w * x).sum::<f64>();
            *o += w_hidden
                .iter()
                .zip(hidden_prev)
                .map(|(w, x)| w * x)
                .sum::<f64>();
        }
        let hidden = out.split_off(self.output_dim);
        Ok((out, hidden))
    }

    pub fn vec_to_state(&self, v: &[f64]) -> StateId {
        let quantized: Vec<i64> = v
            .iter()
            .map(|x| (x / self.quantization_scale).round() as i64)
            .collect();
        encode_tabular(&quantized)
    }

    /// Encodes a whole observation sequence starting from the initial hidden vector.
    pub fn encode_sequence(&self, observations: &[Vec<f64>]) -> Result<Vec<StateId>> {
        let mut hidden = self.initial_hidden.clone();
        let mut ids = Vec::with_capacity(observations.len());
        for obs in observations {
            let (state, next_hidden) = self.project_step(obs, &hidden)?;
            ids.push(self.vec_to_state(&state));
            hidden = next_hidden;
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn fnv_matches_reference_vector() {
        // FNV-1a of "a" before finalization is 0xaf63dc4c8601ec8c
        let mut h = FNV_OFFSET;
        h ^= u64::from(b'a');
        h = h.wrapping_mul(FNV_PRIME);
        assert_eq!(h, 0xaf63_dc4c_8601_ec8c);
        assert_eq!(stable_hash(b"a"), splitmix64(0xaf63_dc4c_8601_ec8c));
    }

    #[test]
    fn tabular_is_stable_and_distinguishes() {
        let a = encode_tabular(&vec![1i64, 2, 3]);
        assert_eq!(a, encode_tabular(&vec![1i64, 2, 3]));
        assert_ne!(a, encode_tabular(&vec![3i64, 2, 1]));
    }

    #[test]
    fn projector_is_seed_deterministic() {
        assert_eq!(
            RandomProjector::new(3, 2, 4, 7),
            RandomProjector::new(3, 2, 4, 7)
        );
        assert_ne!(
            RandomProjector::new(3, 2, 4, 7).weight,
            RandomProjector::new(3, 2, 4, 8).weight
        );
    }

    #[test]
    fn projector_rejects_wrong_dimension() {
        let p = RandomProjector::new(3, 2, 4, 0);
        assert!(matches!(
            p.project_step(&[0.0; 2], &[0.0; 2]),
            Err(Error::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
        assert!(matches!(
            p.project_step(&[0.0; 3], &[0.0; 1]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn quantization_merges_close_vectors() {
        let p = RandomProjector::new(1, 0, 2, 0);
        assert_eq!(
            p.vec_to_state(&[0.1, 0.2]),
            p.vec_to_state(&[0.1 + 1e-6, 0.2 - 1e-6])
        );
        assert_ne!(
            p.vec_to_state(&[0.1, 0.2]),
            p.vec_to_state(&[0.1 + 2e-3, 0.2])
        );
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut p = RandomProjector::new(3, 2, 4, 5);
        p.weight.iter_mut().for_each(|w| *w = 0.0);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let (y, h) = p.project_step(&[1.0, -2.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(y, vec![0.0; 4]);
        assert_eq!(h, vec![0.0; 2]);
    }

    #[test]
    fn history_changes_the_encoding() {
        let p = RandomProjector::with_default_dims(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut obs = || -> Vec<f64> { (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mut distinct = 0;
        for _ in 0..1000 {
            let last = obs();
            let a = vec![obs(), obs(), last.clone()];
            let b = vec![obs(), obs(), last];
            let (ia, ib) = (
                p.encode_sequence(&a).unwrap(),
                p.encode_sequence(&b).unwrap(),
            );
            if ia[2] != ib[2] {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 1000);
    }

    #[test]
    fn far_apart_vectors_do_not_collide() {
        let p = RandomProjector::with_default_dims(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..DEFAULT_OUTPUT_DIM)
                .map(|_| rng.gen_range(-10.0..10.0))
                .collect();
            assert!(seen.insert(p.vec_to_state(&v)));
        }
    }

    #[test]
    fn encoding_is_a_function_of_seed_and_sequence() {
        let seq: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, -1.0]).collect();
        let a = RandomProjector::with_default_dims(2, 3)
            .encode_sequence(&seq)
            .unwrap();
        let b = RandomProjector::with_default_dims(2, 3)
            .encode_sequence(&seq)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(
            RandomProjector::with_default_dims(2, 3).weight.len(),
            128 * 66
        );
    }

    proptest! {
        #[test]
        fn projection_is_affine(
            o1 in prop::collection::vec(-5.0f64..5.0, 4),
            o2 in prop::collection::vec(-5.0f64..5.0, 4),
            seed in any::<u64>(),
        ) {
            let p = RandomProjector::new(4, 3, 5, seed);
            let h = p.initial_hidden.clone();
            let sum: Vec<f64> = o1.iter().zip(&o2).map(|(a, b)| a + b).collect();
            let (y1, g1) = p.project_step(&o1, &h).unwrap();
            let (y2, g2) = p.project_step(&o2, &h).unwrap();
            let (y0, g0) = p.project_step(&[0.0; 4], &h).unwrap();
            let (ys, gs) = p.project_step(&sum, &h).unwrap();
            for i in 0..5 {
                prop_assert!((y1[i] + y2[i] - y0[i] - ys[i]).abs() < 1e-9);
            }
            for i in 0..3 {
                prop_assert!((g1[i] + g2[i] - g0[i] - gs[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn tabular_hash_is_a_function(v in prop::collection::vec(any::<i64>(), 0..8)) {
            prop_assert_eq!(encode_tabular(&v), encode_tabular(&v.clone()));
        }
    }
}
