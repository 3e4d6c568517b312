//! Coverage-conditioned trigram token model.
//!
//! Each instruction is modelled on its own, starting from a `(BOS, BOS)`
//! context: `P(t | t-2, t-1, bucket)` with add-α smoothing over the 256 byte
//! values. A trigram context never seen in training backs off to the
//! unconditional bigram `P(t | t-1)`, and an unseen bigram to the unigram.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{CoverageVector, GenError, Generator, GeneratorRequest};
use crate::dataset::DatasetRecord;
use crate::hash::hash64;
use crate::legality::repaired_len;
use crate::num::Real;

pub const BOS: u16 = 256;
pub const BUCKETS: usize = 256;
pub const ALPHA: f64 = 0.1;
/// Level boundaries for a coverage fraction. Fractions on a 2^14 map are
/// tiny, so the levels are log-spaced rather than quartiles of `[0, 1]`.
pub const LEVEL_THRESHOLDS: [f32; 3] = [1.0 / 1024.0, 1.0 / 128.0, 1.0 / 16.0];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NgramError {
    #[error("n-gram model has no training data")]
    UntrainedModel,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad model file: {0}")]
    Format(String),
}

impl From<io::Error> for NgramError {
    fn from(e: io::Error) -> Self {
        NgramError::Format(e.to_string())
    }
}

/// 0..=3 for one coverage component.
pub fn level(v: f32) -> u8 {
    LEVEL_THRESHOLDS.iter().take_while(|&&t| v >= t).count() as u8
}

pub fn bucket(cov: &CoverageVector) -> u8 {
    let packed = cov.0.iter().enumerate().fold(0u64, |acc, (g, &v)| acc | (level(v) as u64) << (2 * g));
    (hash64(&[packed]) % BUCKETS as u64) as u8
}

/// Sparse counts over the 256 byte values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counts {
    total: u64,
    by_token: BTreeMap<u8, u32>,
}

impl Counts {
    fn add(&mut self, t: u8) {
        self.total += 1;
        *self.by_token.entry(t).or_default() += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, t: u8) -> u32 {
        self.by_token.get(&t).copied().unwrap_or(0)
    }

    fn prob(&self, t: u8) -> f64 {
        (self.get(t) as f64 + ALPHA) / (self.total as f64 + 256.0 * ALPHA)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u8 {
        let mut u = rng.random::<f64>() * (self.total as f64 + 256.0 * ALPHA);
        for t in 0..=255u8 {
            let w = self.get(t) as f64 + ALPHA;
            if u < w {
                return t;
            }
            u -= w;
        }
        255
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Trigram,
    Bigram,
    Unigram,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NgramTable {
    tri: BTreeMap<(u8, u16, u16), Counts>,
    bi: BTreeMap<u16, Counts>,
    uni: Counts,
    records: u64,
}

fn contexts(tokens: &[u8]) -> impl Iterator<Item = (u16, u16, u8)> + '_ {
    tokens.iter().enumerate().map(move |(i, &t)| {
        let at = |back: usize| if i >= back { tokens[i - back] as u16 } else { BOS };
        (at(2), at(1), t)
    })
}

impl NgramTable {
    pub fn train<'a>(records: impl IntoIterator<Item = &'a DatasetRecord>) -> Result<Self, NgramError> {
        let mut table = NgramTable::default();
        for r in records {
            table.add(r);
        }
        if table.records == 0 {
            return Err(NgramError::EmptyDataset);
        }
        Ok(table)
    }

    fn add(&mut self, r: &DatasetRecord) {
        let b = bucket(&r.cov);
        for (c2, c1, t) in contexts(&r.tokens) {
            self.tri.entry((b, c2, c1)).or_default().add(t);
            self.bi.entry(c1).or_default().add(t);
            self.uni.add(t);
        }
        self.records += 1;
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn is_trained(&self) -> bool {
        self.uni.total > 0
    }

    pub fn trigram(&self, bucket: u8, c2: u16, c1: u16) -> Option<&Counts> {
        self.tri.get(&(bucket, c2, c1))
    }

    pub fn unigram(&self) -> &Counts {
        &self.uni
    }

    fn dist(&self, b: u8, c2: u16, c1: u16) -> (&Counts, Level) {
        if let Some(c) = self.tri.get(&(b, c2, c1)) {
            (c, Level::Trigram)
        } else if let Some(c) = self.bi.get(&c1) {
            (c, Level::Bigram)
        } else {
            (&self.uni, Level::Unigram)
        }
    }

    /// Smoothed `P(t | c2, c1, bucket)` after backoff.
    pub fn prob<F: Real>(&self, b: u8, c2: u16, c1: u16, t: u8) -> (F, Level) {
        let (c, lvl) = self.dist(b, c2, c1);
        (F::lit(c.prob(t)), lvl)
    }

    /// One instruction's tokens, and how many positions backed off.
    fn sample_instruction<R: Rng>(&self, b: u8, rng: &mut R) -> (Vec<u8>, u32) {
        let mut out = Vec::with_capacity(6);
        let mut backoffs = 0;
        let mut len = 2;
        while out.len() < len {
            let at = |back: usize| if out.len() >= back { out[out.len() - back] as u16 } else { BOS };
            let (c, lvl) = self.dist(b, at(2), at(1));
            backoffs += (lvl != Level::Trigram) as u32;
            out.push(c.sample(rng));
            if out.len() == 2 {
                len = repaired_len(out[0], Some(out[1]));
            }
        }
        (out, backoffs)
    }

    pub fn generate(&self, req: &GeneratorRequest) -> Result<(Vec<u8>, u32), NgramError> {
        if !self.is_trained() {
            return Err(NgramError::UntrainedModel);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let b = bucket(&req.coverage);
        let mut out = Vec::with_capacity(req.batch as usize * 6);
        let mut backoffs = 0;
        for _ in 0..req.batch {
            let (t, n) = self.sample_instruction(b, &mut rng);
            out.extend_from_slice(&t);
            backoffs += n;
        }
        if backoffs > 0 {
            log::debug!("ngram bucket {b}: {backoffs} positions backed off");
        }
        Ok((out, backoffs))
    }

    /// Per-token perplexity of `records` under the model.
    pub fn perplexity<'a, F: Real>(&self, records: impl IntoIterator<Item = &'a DatasetRecord>) -> F {
        let mut nll = 0f64;
        let mut n = 0u64;
        for r in records {
            let b = bucket(&r.cov);
            for (c2, c1, t) in contexts(&r.tokens) {
                nll -= self.dist(b, c2, c1).0.prob(t).ln();
                n += 1;
            }
        }
        F::lit((nll / n.max(1) as f64).exp())
    }

    const MAGIC: &'static [u8; 4] = b"LYRN";
    const VERSION: u16 = 1;

    fn write_counts<W: Write>(w: &mut W, c: &Counts) -> io::Result<()> {
        w.write_u16::<LittleEndian>(c.by_token.len() as u16)?;
        for (&t, &n) in &c.by_token {
            w.write_u8(t)?;
            w.write_u32::<LittleEndian>(n)?;
        }
        Ok(())
    }

    fn read_counts<R: Read>(r: &mut R) -> io::Result<Counts> {
        let n = r.read_u16::<LittleEndian>()?;
        let mut c = Counts::default();
        for _ in 0..n {
            let t = r.read_u8()?;
            let k = r.read_u32::<LittleEndian>()?;
            c.by_token.insert(t, k);
            c.total += k as u64;
        }
        Ok(c)
    }

    /// `"LYRN" | version u16 | records u64 | unigram | n_bi u32 × (ctx u16,
    /// counts) | n_tri u32 × (bucket u8, ctx u16, ctx u16, counts)`, where
    /// counts is `n u16 × (token u8, count u32)`.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u16::<LittleEndian>(Self::VERSION)?;
        w.write_u64::<LittleEndian>(self.records)?;
        Self::write_counts(&mut w, &self.uni)?;
        w.write_u32::<LittleEndian>(self.bi.len() as u32)?;
        for (&c1, c) in &self.bi {
            w.write_u16::<LittleEndian>(c1)?;
            Self::write_counts(&mut w, c)?;
        }
        w.write_u32::<LittleEndian>(self.tri.len() as u32)?;
        for (&(b, c2, c1), c) in &self.tri {
            w.write_u8(b)?;
            w.write_u16::<LittleEndian>(c2)?;
            w.write_u16::<LittleEndian>(c1)?;
            Self::write_counts(&mut w, c)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NgramError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(NgramError::Format("bad magic".into()));
        }
        let v = r.read_u16::<LittleEndian>()?;
        if v != Self::VERSION {
            return Err(NgramError::Format(format!("unsupported version {v}")));
        }
        let mut t = NgramTable {
            records: r.read_u64::<LittleEndian>()?,
            uni: Self::read_counts(&mut r)?,
            ..NgramTable::default()
        };
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let c1 = r.read_u16::<LittleEndian>()?;
            t.bi.insert(c1, Self::read_counts(&mut r)?);
        }
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let b = r.read_u8()?;
            let c2 = r.read_u16::<LittleEndian>()?;
            let c1 = r.read_u16::<LittleEndian>()?;
            t.tri.insert((b, c2, c1), Self::read_counts(&mut r)?);
        }
        Ok(t)
    }
}

pub fn train_ngram<'a>(records: impl IntoIterator<Item = &'a DatasetRecord>) -> Result<NgramTable, NgramError> {
    NgramTable::train(records)
}

pub fn gen_ngram(req: &GeneratorRequest, model: &NgramTable) -> Result<Vec<u8>, NgramError> {
    model.generate(req).map(|(t, _)| t)
}

#[derive(Debug, Clone)]
pub struct NgramGenerator {
    pub model: NgramTable,
}

impl Generator for NgramGenerator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<u8>, GenError> {
        Ok(gen_ngram(req, &self.model)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dut::GROUPS;
    use crate::generators::{gen_random, legality_rate};
    use crate::isa::Instruction;
    use crate::legality::repair_stream;
    use crate::token::tokenize;

    fn cov(level_value: f32) -> CoverageVector {
        CoverageVector::from_f32([level_value; GROUPS])
    }

    fn rec(c: CoverageVector, inst: &Instruction) -> DatasetRecord {
        DatasetRecord {
            cov: c,
            tokens: tokenize(inst).0,
        }
    }

    #[test]
    fn levels_and_buckets() {
        assert_eq!(level(0.0), 0);
        assert_eq!(level(1.0 / 1024.0), 1);
        assert_eq!(level(0.01), 2);
        assert_eq!(level(1.0), 3);
        assert_eq!(bucket(&cov(0.0)), bucket(&cov(0.0001)));
    }

    #[test]
    fn untrained_and_empty() {
        assert_eq!(NgramTable::train(&[]), Err(NgramError::EmptyDataset));
        let req = GeneratorRequest::new(cov(0.0), 1, 0);
        assert_eq!(gen_ngram(&req, &NgramTable::default()), Err(NgramError::UntrainedModel));
    }

    #[test]
    fn nop_model_mostly_emits_nops() {
        let recs: Vec<_> = (0..1000).map(|_| rec(cov(0.0), &Instruction::nop())).collect();
        let m = train_ngram(&recs).unwrap();
        let (insts, _) = repair_stream(&gen_ngram(&GeneratorRequest::new(cov(0.0), 1000, 3), &m).unwrap());
        let nops = insts.iter().filter(|i| **i == Instruction::nop()).count();
        // per token, P(expected) = (1000 + 0.1) / (1000 + 25.6)
        let p = (1000.1f64 / 1025.6).powi(6);
        assert!(nops as f64 > 0.9 * p * 1000.0, "{nops} NOPs");
    }

    #[test]
    fn single_record_distribution() {
        let r = rec(cov(0.5), &Instruction::nop());
        let m = train_ngram([&r]).unwrap();
        let b = bucket(&r.cov);
        let (p, lvl) = m.prob::<f64>(b, BOS, BOS, 0x13);
        assert_eq!(lvl, Level::Trigram);
        assert!((p - 1.1 / 26.6).abs() < 1e-12);
        let (q, _) = m.prob::<f64>(b, BOS, BOS, 0x14);
        assert!((q - 0.1 / 26.6).abs() < 1e-12);
    }

    #[test]
    fn counts_are_consistent() {
        let recs: Vec<_> = (0..50)
            .map(|i| rec(cov(i as f32 / 50.0), &Instruction::addi(crate::Reg::new(1), crate::Reg::new(2), i)))
            .collect();
        let m = train_ngram(&recs).unwrap();
        let tokens: u64 = recs.iter().map(|r| r.tokens.len() as u64).sum();
        assert_eq!(m.unigram().total(), tokens);
        let tri_total: u64 = m.tri.values().map(Counts::total).sum();
        let bi_total: u64 = m.bi.values().map(Counts::total).sum();
        assert_eq!(tri_total, tokens);
        assert_eq!(bi_total, tokens);
        for c in m.tri.values() {
            assert_eq!(c.by_token.values().map(|&n| n as u64).sum::<u64>(), c.total());
        }
    }

    #[test]
    fn unseen_bucket_backs_off() {
        let r = rec(cov(0.0), &Instruction::nop());
        let m = train_ngram([&r]).unwrap();
        let other = cov(1.0);
        assert_ne!(bucket(&other), bucket(&r.cov));
        let (_, lvl) = m.prob::<f32>(bucket(&other), BOS, BOS, 0x13);
        assert_eq!(lvl, Level::Bigram);
        let (_, backoffs) = m.generate(&GeneratorRequest::new(other, 4, 0)).unwrap();
        assert!(backoffs > 0);
    }

    #[test]
    fn model_file_roundtrip() {
        let recs: Vec<_> = (0..20).map(|i| rec(cov(i as f32 / 20.0), &Instruction::nop())).collect();
        let m = train_ngram(&recs).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(NgramTable::read_from(&buf[..]).unwrap(), m);
        assert!(NgramTable::read_from(&buf[..10]).is_err());
    }

    #[test]
    fn perplexity_below_uniform_on_held_out() {
        let recs: Vec<DatasetRecord> = repair_stream(&gen_random(&GeneratorRequest::new(cov(0.0), 4000, 1)))
            .0
            .iter()
            .map(|i| rec(cov(0.0), i))
            .collect();
        let (train, test) = recs.split_at(3000);
        let m = train_ngram(train).unwrap();
        let ppl: f64 = m.perplexity(test);
        assert!(ppl < 256.0, "perplexity {ppl}");
    }

    #[test]
    fn conditioning_changes_distribution() {
        // bucket A always saw loads (0x03), bucket B always saw stores (0x23)
        let (a, b) = (cov(0.0), cov(0.1));
        assert_ne!(bucket(&a), bucket(&b));
        let load = crate::decode_word(0x0000_2083).unwrap();
        let store = crate::decode_word(0x0010_2023).unwrap();
        let mut recs = Vec::new();
        for _ in 0..500 {
            recs.push(rec(a, &load));
            recs.push(rec(b, &store));
        }
        let m = train_ngram(&recs).unwrap();
        let first = |c: CoverageVector| {
            let (s, _) = repair_stream(&gen_ngram(&GeneratorRequest::new(c, 2000, 7), &m).unwrap());
            let loads = s.iter().filter(|i| i.opcode() == 0x03).count() as f64;
            [loads, s.len() as f64 - loads]
        };
        let (oa, ob) = (first(a), first(b));
        // 2x2 chi-square for independence of (bucket, is-load)
        let n = oa[0] + oa[1] + ob[0] + ob[1];
        let mut chi2 = 0.0;
        for (row, rt) in [(oa, oa[0] + oa[1]), (ob, ob[0] + ob[1])] {
            for j in 0..2 {
                let ct = oa[j] + ob[j];
                let e = rt * ct / n;
                chi2 += (row[j] - e).powi(2) / e;
            }
        }
        // 10.83 is the 0.001 critical value at one degree of freedom
        assert!(chi2 > 10.83, "chi2 {chi2}");
    }

    #[test]
    fn trained_model_beats_random_legality() {
        let good: Vec<DatasetRecord> = repair_stream(&gen_random(&GeneratorRequest::new(cov(0.0), 5000, 2)))
            .0
            .iter()
            .map(|i| rec(cov(0.0), i))
            .collect();
        let m = train_ngram(&good).unwrap();
        let req = GeneratorRequest::new(cov(0.0), 20_000, 4);
        let r_rate = legality_rate(&gen_random(&req));
        let n_rate = legality_rate(&gen_ngram(&req, &m).unwrap());
        assert!(n_rate > r_rate, "ngram {n_rate} vs random {r_rate}");
    }
}
