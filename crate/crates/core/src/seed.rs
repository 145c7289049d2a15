//! Seed derivation. A master seed fans out into independent substreams so
//! that adding a replication or a method never shifts another's randomness.

/// One round of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of substream `stream` under `parent`.
pub fn derive(parent: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Stable 64-bit tag for a stream name (FNV-1a).
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
