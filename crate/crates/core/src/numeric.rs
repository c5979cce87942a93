//! Small numeric helpers shared across modules.

use sha2::{Digest, Sha256};

/// Correctly rounded sum of a sequence of finite `f64` values.
///
/// Uses Shewchuk's non-overlapping partials followed by a round-half-even
/// correction, so the result depends only on the multiset of inputs. It is
/// therefore invariant under permutation and odd under negation
/// (`exact_sum(-x) == -exact_sum(x)` bitwise).
pub fn exact_sum<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut partials: Vec<f64> = Vec::new();
    for value in values {
        let mut x = value;
        let mut kept = 0;
        for k in 0..partials.len() {
            let mut y = partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }

    let Some(&top) = partials.last() else {
        return 0.0;
    };
    let mut idx = partials.len() - 1;
    let mut hi = top;
    let mut lo = 0.0;
    while idx > 0 {
        let x = hi;
        idx -= 1;
        let y = partials[idx];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if idx > 0 && ((lo < 0.0 && partials[idx - 1] < 0.0) || (lo > 0.0 && partials[idx - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Mean via [`exact_sum`]; `None` for an empty input.
pub fn exact_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(exact_sum(values.iter().copied()) / values.len() as f64)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of
/// indices (layer, condition, pair, ...).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Lower-case hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the little-endian bytes of several `f64` slices.
pub fn digest_f64(slices: &[&[f64]]) -> String {
    let mut hasher = Sha256::new();
    for s in slices {
        hasher.update((s.len() as u64).to_le_bytes());
        for v in *s {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
