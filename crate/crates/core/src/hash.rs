//! Fixed 64-bit mixing used for coverage indices, state hashes and seed
//! derivation. Changing any constant here changes every recorded coverage
//! number, so the function is versioned.

pub const HASH_VERSION: u16 = 1;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn hash64(words: &[u64]) -> u64 {
    let mut h = GOLDEN ^ words.len() as u64;
    for &w in words {
        h = mix64(h ^ w).wrapping_add(GOLDEN);
    }
    mix64(h)
}

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = GOLDEN ^ bytes.len() as u64;
    let mut chunks = bytes.chunks_exact(8);
    for c in &mut chunks {
        h = mix64(h ^ u64::from_le_bytes(c.try_into().unwrap())).wrapping_add(GOLDEN);
    }
    let rem = chunks.remainder();
    if !rem.is_empty() {
        let mut buf = [0u8; 8];
        buf[..rem.len()].copy_from_slice(rem);
        h = mix64(h ^ u64::from_le_bytes(buf)).wrapping_add(GOLDEN);
    }
    mix64(h)
}

/// Derives an independent stream seed from a parent seed and an index.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    hash64(&[seed, index])
}
