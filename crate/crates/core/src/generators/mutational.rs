//! Bit-flip mutation over a coverage-guided corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gen_random, GenError, Generator, GeneratorRequest};
use crate::isa::{encode_word, Instruction};
use crate::legality::repaired_len;
use crate::token::raw_tokens;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub words: Vec<u32>,
    pub gain: u64,
    /// Insertion order; doubles as a logical timestamp.
    pub added: u64,
}

impl CorpusEntry {
    /// Scheduling weight: entries that found more new coverage are chosen
    /// more often.
    pub fn weight(&self) -> u64 {
        1 + self.gain
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    capacity: usize,
    next_id: u64,
}

impl Default for Corpus {
    fn default() -> Self {
        Corpus::with_capacity(1024)
    }
}

impl Corpus {
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0);
        Corpus {
            entries: Vec::new(),
            capacity,
            next_id: 0,
        }
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Retains `words` if it gained coverage. A full corpus replaces its
    /// lowest-gain entry (oldest first) when the newcomer gained more.
    pub fn offer(&mut self, words: Vec<u32>, gain: u64) -> bool {
        if gain == 0 || words.is_empty() {
            return false;
        }
        let entry = CorpusEntry {
            words,
            gain,
            added: self.next_id,
        };
        self.next_id += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return true;
        }
        let (idx, worst) = self
            .entries
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| (e.gain, e.added))
            .expect("corpus is full, so nonempty");
        if worst.gain < gain {
            self.entries[idx] = entry;
            true
        } else {
            false
        }
    }

    /// Weighted choice; `None` only when empty.
    pub fn select<R: Rng>(&self, rng: &mut R) -> Option<&CorpusEntry> {
        let total: u64 = self.entries.iter().map(CorpusEntry::weight).sum();
        if total == 0 {
            return None;
        }
        let mut pick = rng.random_range(0..total);
        for e in &self.entries {
            if pick < e.weight() {
                return Some(e);
            }
            pick -= e.weight();
        }
        unreachable!("pick below total weight")
    }
}

/// Flips `n` random bits across `words`.
pub fn flip_bits<R: Rng>(words: &mut [u32], n: u32, rng: &mut R) {
    for _ in 0..n {
        let w = rng.random_range(0..words.len());
        words[w] ^= 1 << rng.random_range(0..32);
    }
}

/// Token form of a possibly illegal word, cut to the length the repair stage
/// will read so stream segmentation stays aligned.
pub fn shaped_tokens(word: u32) -> Vec<u8> {
    let mut t = raw_tokens(word).0;
    t.resize(repaired_len(t[0], t.get(1).copied()), 0);
    t
}

/// One mutated program from the corpus, or `gen_random` when it is empty.
pub fn gen_mutational(req: &GeneratorRequest, corpus: &Corpus) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let Some(entry) = corpus.select(&mut rng) else {
        return gen_random(req);
    };
    let mut words: Vec<u32> = (0..req.batch as usize).map(|i| entry.words[i % entry.words.len()]).collect();
    let flips = rng.random_range(1..=8);
    flip_bits(&mut words, flips, &mut rng);
    words.into_iter().flat_map(shaped_tokens).collect()
}

#[derive(Debug, Clone, Default)]
pub struct MutationalGenerator {
    pub corpus: Corpus,
}

impl Generator for MutationalGenerator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<u8>, GenError> {
        Ok(gen_mutational(req, &self.corpus))
    }

    fn feedback(&mut self, program: &[Instruction], gain: u64) {
        self.corpus.offer(program.iter().map(encode_word).collect(), gain);
    }
}
