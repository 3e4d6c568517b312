//! Stimulus sources. Every generator maps a [`GeneratorRequest`] to a flat
//! token stream that [`crate::legality::repair_stream`] turns into legal
//! instructions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Instruction;
use crate::legality::{is_legal_seq, repair_stream, repaired_len};
use crate::token::tokenize;

pub mod external;
pub mod mutational;
pub mod ngram;

pub use external::{Endpoint, ExternalGenerator, WireRequest, WireResponse};
pub use mutational::{Corpus, CorpusEntry, MutationalGenerator};
pub use ngram::{NgramError, NgramGenerator, NgramTable};

pub use crate::CoverageVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorRequest {
    pub coverage: CoverageVector,
    /// Instructions wanted, at least 1.
    pub batch: u32,
    pub seed: u64,
}

impl GeneratorRequest {
    pub fn new(coverage: CoverageVector, batch: u32, seed: u64) -> Self {
        assert!(batch >= 1, "batch must be at least one instruction");
        GeneratorRequest { coverage, batch, seed }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Ngram(#[from] NgramError),
    #[error(transparent)]
    External(#[from] external::ExternalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Random,
    Mutational,
    Ngram,
    External,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(GeneratorKind::Random),
            "mutational" => Ok(GeneratorKind::Mutational),
            "ngram" => Ok(GeneratorKind::Ngram),
            "external" => Ok(GeneratorKind::External),
            other => Err(format!("unknown generator {other:?}")),
        }
    }
}

pub trait Generator: Send {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<u8>, GenError>;

    /// Reports the coverage gain of a program built from earlier output.
    fn feedback(&mut self, _program: &[Instruction], _gain: u64) {}
}

/// Uniform bytes, cut into instructions at the lengths the repair stage will
/// use, so `batch` instructions come out of `repair_stream`.
pub fn gen_random(req: &GeneratorRequest) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut out = Vec::with_capacity(req.batch as usize * 6);
    for _ in 0..req.batch {
        let op: u8 = rng.random();
        let f3: u8 = rng.random();
        out.push(op);
        out.push(f3);
        for _ in 2..repaired_len(op, Some(f3)) {
            out.push(rng.random());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomGenerator;

impl Generator for RandomGenerator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<u8>, GenError> {
        Ok(gen_random(req))
    }
}

/// Fraction of instruction-sized pieces of `stream` that are already legal.
pub fn legality_rate(stream: &[u8]) -> f64 {
    let mut total = 0u64;
    let mut legal = 0u64;
    let mut pos = 0;
    while pos < stream.len() {
        let len = repaired_len(stream[pos], stream.get(pos + 1).copied());
        let end = (pos + len).min(stream.len());
        total += 1;
        legal += is_legal_seq(&stream[pos..end]) as u64;
        pos += len;
    }
    if total == 0 {
        0.0
    } else {
        legal as f64 / total as f64
    }
}

/// Repairs generator output into exactly `batch` instructions. Short output
/// is padded with NOPs; extra instructions are dropped.
pub fn assemble(stream: &[u8], batch: usize) -> (Vec<Instruction>, usize) {
    let (mut insts, _) = repair_stream(stream);
    let produced = insts.len();
    insts.truncate(batch);
    insts.resize(batch, Instruction::nop());
    (insts, produced)
}

/// Folds every branch and JAL target into the program, word aligned, so the
/// only control transfers that leave it are register-indirect ones. Returns
/// the number of instructions changed.
pub fn fold_transfers(insts: &mut [Instruction]) -> usize {
    let n = insts.len() as i64;
    let mut changed = 0;
    for (i, inst) in insts.iter_mut().enumerate() {
        let Some(off) = inst.pc_relative_target() else {
            continue;
        };
        let target = (i as i64 + (off as i64).div_euclid(4)).rem_euclid(n);
        let folded = ((target - i as i64) * 4) as i32;
        if folded != off {
            *inst = inst.with_imm(folded);
            changed += 1;
        }
    }
    changed
}

/// Token stream of already legal instructions.
pub fn stream_of(insts: &[Instruction]) -> Vec<u8> {
    insts.iter().flat_map(|i| tokenize(i).0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::legality::RepairAction;

    fn req(batch: u32, seed: u64) -> GeneratorRequest {
        GeneratorRequest::new(CoverageVector::default(), batch, seed)
    }

    #[test]
    fn random_is_deterministic() {
        assert_eq!(gen_random(&req(300, 5)), gen_random(&req(300, 5)));
        assert_ne!(gen_random(&req(300, 5)), gen_random(&req(300, 6)));
    }

    #[test]
    fn random_yields_exactly_batch() {
        for seed in 0..50 {
            for batch in [1, 2, 17, 256] {
                let (insts, reports) = repair_stream(&gen_random(&req(batch, seed)));
                assert_eq!(insts.len(), batch as usize);
                assert!(reports.iter().all(|r| r.action != RepairAction::Discarded));
                assert!(reports.iter().all(|r| r.fields_changed.iter().all(|f| *f != "length")));
            }
        }
    }

    #[test]
    fn random_legality_rate_is_measurable() {
        let rate = legality_rate(&gen_random(&req(10_000, 1)));
        assert!(rate > 0.0 && rate < 1.0, "rate {rate}");
    }

    #[test]
    fn assemble_pads_and_truncates() {
        let (p, n) = assemble(&[], 3);
        assert_eq!(n, 0);
        assert_eq!(p, vec![Instruction::nop(); 3]);
        let (p, n) = assemble(&gen_random(&req(10, 1)), 4);
        assert_eq!((p.len(), n), (4, 10));
    }

    #[test]
    fn folded_targets_stay_inside() {
        let (mut insts, _) = repair_stream(&gen_random(&req(256, 3)));
        let changed = fold_transfers(&mut insts);
        assert!(changed > 0);
        for (i, inst) in insts.iter().enumerate() {
            assert!(inst.validate().is_ok());
            if let Some(off) = inst.pc_relative_target() {
                assert_eq!(off % 4, 0);
                let t = i as i64 + off as i64 / 4;
                assert!((0..256).contains(&t), "target {t} from {i}");
            }
        }
        assert_eq!(fold_transfers(&mut insts), 0);
    }

    #[test]
    fn kind_parses() {
        assert_eq!("ngram".parse::<GeneratorKind>(), Ok(GeneratorKind::Ngram));
        assert!("gpt".parse::<GeneratorKind>().is_err());
    }
}
