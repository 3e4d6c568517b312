//! Register-coverage bitmaps: one 2^k-bit map per control-register group.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{hash64, HASH_VERSION};
use crate::num::Real;

pub const GROUPS: usize = 22;
pub const DEFAULT_K: u8 = 14;

pub const GROUP_NAMES: [&str; GROUPS] = [
    "if_latch",
    "id_latch",
    "ex_latch",
    "mem_latch",
    "wb_latch",
    "hazard_stall",
    "forward_rs1",
    "forward_rs2",
    "flush",
    "bp_counter",
    "bp_outcome",
    "bp_history",
    "bp_target",
    "muldiv_busy",
    "muldiv_op",
    "muldiv_operands",
    "mem_request",
    "mem_address",
    "mem_data",
    "ex_x_mem",
    "id_x_ex",
    "fetch_x_retire",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoverageError {
    #[error("bitmap width k={0} outside 6..=24")]
    BadK(u8),
    #[error("cannot merge maps with k={0} and k={1}")]
    SchemaMismatch(u8, u8),
    #[error("bad coverage file: {0}")]
    Format(String),
}

impl From<io::Error> for CoverageError {
    fn from(e: io::Error) -> Self {
        CoverageError::Format(e.to_string())
    }
}

/// Bitmap index for a group's current control state `state` after `prev`.
#[inline]
pub fn coverage_index(group: usize, state: u64, prev: u64, k: u8) -> u32 {
    (hash64(&[group as u64, state, prev]) & ((1u64 << k) - 1)) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    k: u8,
    bits: Vec<u64>,
    counts: [u32; GROUPS],
}

impl CoverageMap {
    pub fn new(k: u8) -> Result<Self, CoverageError> {
        if !(6..=24).contains(&k) {
            return Err(CoverageError::BadK(k));
        }
        Ok(CoverageMap {
            k,
            bits: vec![0; GROUPS << (k - 6)],
            counts: [0; GROUPS],
        })
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    fn words_per_group(&self) -> usize {
        1 << (self.k - 6)
    }

    /// Sets a bit, returning whether it was new.
    #[inline]
    pub fn set(&mut self, group: usize, index: u32) -> bool {
        let w = group * self.words_per_group() + (index >> 6) as usize;
        let m = 1u64 << (index & 63);
        let new = self.bits[w] & m == 0;
        if new {
            self.bits[w] |= m;
            self.counts[group] += 1;
        }
        new
    }

    pub fn get(&self, group: usize, index: u32) -> bool {
        let w = group * self.words_per_group() + (index >> 6) as usize;
        self.bits[w] & (1u64 << (index & 63)) != 0
    }

    pub fn count(&self, group: usize) -> u32 {
        self.counts[group]
    }

    pub fn counts(&self) -> &[u32; GROUPS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    fn group_words(&self, group: usize) -> &[u64] {
        let n = self.words_per_group();
        &self.bits[group * n..(group + 1) * n]
    }

    /// Recounts bits; equal to `counts()` unless the map was corrupted.
    pub fn popcounts(&self) -> [u32; GROUPS] {
        std::array::from_fn(|g| self.group_words(g).iter().map(|w| w.count_ones()).sum())
    }

    /// In-place union with `other`.
    pub fn merge_from(&mut self, other: &CoverageMap) -> Result<(), CoverageError> {
        if self.k != other.k {
            return Err(CoverageError::SchemaMismatch(self.k, other.k));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        self.counts = self.popcounts();
        Ok(())
    }

    pub fn merge(maps: &[CoverageMap]) -> Result<CoverageMap, CoverageError> {
        let Some(first) = maps.first() else {
            return CoverageMap::new(DEFAULT_K);
        };
        let mut out = first.clone();
        for m in &maps[1..] {
            out.merge_from(m)?;
        }
        Ok(out)
    }

    /// Number of bits set in `self` but not in `base`.
    pub fn gain_over(&self, base: &CoverageMap) -> u64 {
        self.bits
            .iter()
            .zip(&base.bits)
            .map(|(a, b)| (a & !b).count_ones() as u64)
            .sum()
    }

    pub fn vector<F: Real>(&self) -> CoverageVectorOf<F> {
        CoverageVectorOf::from_counts(&self.counts, self.k)
    }

    pub const MAGIC: &'static [u8; 4] = b"LYRC";
    pub const VERSION: u16 = 1;

    /// `"LYRC" | version u16 | hash version u16 | k u8 | 22 × (len u8, name)
    /// | 22 × 2^k bits as little-endian u64 words`.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u16::<LittleEndian>(Self::VERSION)?;
        w.write_u16::<LittleEndian>(HASH_VERSION)?;
        w.write_u8(self.k)?;
        for name in GROUP_NAMES {
            w.write_u8(name.len() as u8)?;
            w.write_all(name.as_bytes())?;
        }
        for &word in &self.bits {
            w.write_u64::<LittleEndian>(word)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CoverageError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(CoverageError::Format("bad magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        let hv = r.read_u16::<LittleEndian>()?;
        if version != Self::VERSION || hv != HASH_VERSION {
            return Err(CoverageError::Format(format!("unsupported version {version}/{hv}")));
        }
        let k = r.read_u8()?;
        let mut map = CoverageMap::new(k)?;
        for expected in GROUP_NAMES {
            let len = r.read_u8()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            if name != expected.as_bytes() {
                return Err(CoverageError::Format(format!(
                    "group {:?} where {expected:?} was expected",
                    String::from_utf8_lossy(&name)
                )));
            }
        }
        for word in map.bits.iter_mut() {
            *word = r.read_u64::<LittleEndian>()?;
        }
        map.counts = map.popcounts();
        Ok(map)
    }
}

/// Per-group coverage fraction `covered / 2^k`, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoverageVectorOf<F: Real>(pub [F; GROUPS]);

impl<F: Real> Default for CoverageVectorOf<F> {
    fn default() -> Self {
        CoverageVectorOf([F::zero(); GROUPS])
    }
}

impl<F: Real> CoverageVectorOf<F> {
    pub fn from_counts(counts: &[u32; GROUPS], k: u8) -> Self {
        let denom = F::from_count(1u64 << k);
        CoverageVectorOf(std::array::from_fn(|g| F::from_count(counts[g] as u64) / denom))
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    /// Whether every component is finite and in `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= F::zero() && *v <= F::one())
    }

    pub fn to_f32(&self) -> [f32; GROUPS] {
        std::array::from_fn(|g| self.0[g].to_f32().unwrap_or(0.0))
    }

    pub fn from_f32(values: [f32; GROUPS]) -> Self {
        CoverageVectorOf(std::array::from_fn(|g| F::from_f32(values[g]).unwrap_or_else(F::zero)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> CoverageMap {
        let mut m = CoverageMap::new(DEFAULT_K).unwrap();
        for i in 0..500u64 {
            let h = hash64(&[seed, i]);
            m.set((h % GROUPS as u64) as usize, (h >> 32) as u32 & 0x3fff);
        }
        m
    }

    #[test]
    fn empty_map_counts_zero() {
        let m = CoverageMap::new(DEFAULT_K).unwrap();
        assert_eq!(m.total(), 0);
        assert_eq!(m.counts(), &[0; GROUPS]);
        assert!(CoverageMap::new(5).is_err());
    }

    #[test]
    fn counts_track_popcount() {
        let m = sample(1);
        assert_eq!(&m.popcounts(), m.counts());
        assert!(m.total() > 0);
    }

    #[test]
    fn merge_laws() {
        let a = sample(1);
        let b = sample(2);
        let empty = CoverageMap::new(DEFAULT_K).unwrap();
        assert_eq!(CoverageMap::merge(&[a.clone(), empty]).unwrap(), a);
        assert_eq!(CoverageMap::merge(&[a.clone(), a.clone()]).unwrap(), a);
        let ab = CoverageMap::merge(&[a.clone(), b.clone()]).unwrap();
        let ba = CoverageMap::merge(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.total() <= a.total() + b.total());
        assert!(ab.total() >= a.total().max(b.total()));
        assert_eq!(ab.gain_over(&a), ab.total() - a.total());
        let other = CoverageMap::new(10).unwrap();
        assert_eq!(a.clone().merge_from(&other), Err(CoverageError::SchemaMismatch(14, 10)));
    }

    #[test]
    fn file_roundtrip() {
        let m = sample(3);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LYRC");
        assert_eq!(CoverageMap::read_from(&buf[..]).unwrap(), m);
        buf[0] = b'X';
        assert!(CoverageMap::read_from(&buf[..]).is_err());
    }

    #[test]
    fn vector_is_normalized() {
        let mut m = CoverageMap::new(6).unwrap();
        for i in 0..64 {
            m.set(0, i);
        }
        m.set(1, 0);
        let v: CoverageVectorOf<f64> = m.vector();
        assert_eq!(v.0[0], 1.0);
        assert_eq!(v.0[1], 1.0 / 64.0);
        assert!(v.is_valid());
        let f: CoverageVectorOf<f32> = m.vector();
        assert_eq!(f.to_f32()[1], 1.0 / 64.0);
    }
}
