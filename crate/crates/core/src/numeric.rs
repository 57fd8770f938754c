//! Small numeric helpers shared across the pipeline.

/// Pairwise (cascade) summation in f64. Order is fixed by the recursion, so
/// the result is independent of thread count and stable across runs.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// SplitMix64 finalizer; used to derive independent RNG stream keys from
/// (seed, context) tuples without correlated low bits.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix several values into one stream key.
pub fn mix_key(parts: &[u64]) -> u64 {
    let mut acc = 0x51f15eedu64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}
