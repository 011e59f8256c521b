//! Small shared helpers: deterministic seed derivation and a median.

/// splitmix64 step; stable across platforms and releases.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a base seed and a list of salts.
///
/// Used wherever a run needs many independent RNG streams (per song, per
/// source, per epoch) that must be reproducible from one top-level seed.
pub fn mix_seed(base: u64, salts: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &v in salts {
        s = splitmix64(s ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    s
}

/// Median of a non-empty slice; even counts average the two middle values.
///
/// Panics on empty input or NaN entries (callers filter those out first).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in median input"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
