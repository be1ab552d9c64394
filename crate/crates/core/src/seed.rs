//! Stable seed derivation. Every random stream in a run is a pure function
//! of the run seed and the coordinates of the draw, never of scheduling.

/// 64-bit FNV-1a over UTF-8 bytes.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer applied to `a` combined with `b`.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix_str(a: u64, s: &str) -> u64 {
    mix(a, stable_hash(s))
}

/// Canonical text form of a temperature (`1.0` and `1` agree).
pub fn temperature_key(t: f64) -> String {
    format!("{t}")
}

/// Seed for one temperature of a sweep: `seed + hash(temperature string)`.
pub fn temperature_seed(seed: u64, temperature: f64) -> u64 {
    seed.wrapping_add(stable_hash(&temperature_key(temperature)))
}
