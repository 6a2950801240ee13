//! Owen-scrambled Sobol points in the unit cube.
//!
//! Direction numbers are the Joe–Kuo `new-joe-kuo-6.21201` set, truncated to
//! [`MAX_DIMENSION`] coordinates. Scrambling is a hash-based nested uniform
//! scramble in the style of Laine–Karras/Burley: the 32-bit coordinate is
//! bit-reversed, passed through a seeded hash whose every step only lets
//! low bits influence higher bits, and reversed back. In the original bit
//! order this means each digit is permuted by a function of the digits above
//! it only, which is the nested structure that keeps `(t, m, s)`-net
//! stratification intact.

use crate::error::{Error, Result};
use crate::seed::{mix, splitmix64};

/// Number of coordinates the embedded direction-number table supports.
pub const MAX_DIMENSION: usize = 21;

const BITS: usize = 32;

/// `(s, a, m_1..m_s)` per coordinate after the first.
const JOE_KUO: [(u32, u32, &[u32]); MAX_DIMENSION - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
];

fn directions(coordinate: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if coordinate == 0 {
        for (bit, slot) in v.iter_mut().enumerate() {
            *slot = 1u32 << (31 - bit);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[coordinate - 1];
    let s = s as usize;
    for bit in 0..s {
        v[bit] = m[bit] << (31 - bit);
    }
    for bit in s..BITS {
        let mut value = v[bit - s] ^ (v[bit - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                value ^= v[bit - k];
            }
        }
        v[bit] = value;
    }
    v
}

/// Unscrambled Sobol coordinates as 32-bit fixed-point fractions.
fn raw_point(index: u32, dirs: &[[u32; BITS]]) -> Vec<u32> {
    dirs.iter()
        .map(|v| {
            let mut x = 0u32;
            let mut n = index;
            let mut bit = 0;
            while n != 0 {
                if n & 1 == 1 {
                    x ^= v[bit];
                }
                n >>= 1;
                bit += 1;
            }
            x
        })
        .collect()
}

#[inline]
fn nested_scramble(x: u32, seed: u32) -> u32 {
    let mut n = x.reverse_bits();
    n ^= n.wrapping_mul(0x3d20_adea);
    n = n.wrapping_add(seed);
    n = n.wrapping_mul((seed >> 16) | 1);
    n ^= n.wrapping_mul(0x0552_6c56);
    n ^= n.wrapping_mul(0x53a2_2864);
    n.reverse_bits()
}

/// A seeded scrambled Sobol generator over `[0, 1)^dimension`.
#[derive(Debug, Clone)]
pub struct ScrambledSobol {
    dirs: Vec<[u32; BITS]>,
    seeds: Vec<u32>,
}

impl ScrambledSobol {
    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("Sobol dimension must be at least 1".into()));
        }
        if dimension > MAX_DIMENSION {
            return Err(Error::Config(format!(
                "Sobol dimension {dimension} exceeds the direction-number table ({MAX_DIMENSION})"
            )));
        }
        let dirs = (0..dimension).map(directions).collect();
        let seeds = (0..dimension)
            .map(|j| (splitmix64(mix(&[seed, j as u64])) >> 32) as u32)
            .collect();
        Ok(Self { dirs, seeds })
    }

    pub fn dimension(&self) -> usize {
        self.dirs.len()
    }

    pub fn point(&self, index: u32) -> Vec<f64> {
        raw_point(index, &self.dirs)
            .into_iter()
            .zip(&self.seeds)
            .map(|(x, &s)| nested_scramble(x, s) as f64 * (1.0 / 4_294_967_296.0))
            .collect()
    }

    pub fn points(&self, count: usize) -> Vec<Vec<f64>> {
        (0..count as u32).map(|i| self.point(i)).collect()
    }
}

/// The first `count` points of the scrambled sequence for `seed`.
pub fn sample_centres(count: usize, dimension: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Config("centre count must be at least 1".into()));
    }
    Ok(ScrambledSobol::new(dimension, seed)?.points(count))
}

#[cfg(test)]
pub(crate) fn unscrambled(count: usize, dimension: usize) -> Vec<Vec<f64>> {
    let dirs: Vec<_> = (0..dimension).map(directions).collect();
    (0..count as u32)
        .map(|i| {
            raw_point(i, &dirs)
                .into_iter()
                .map(|x| x as f64 / 4_294_967_296.0)
                .collect()
        })
        .collect()
}
