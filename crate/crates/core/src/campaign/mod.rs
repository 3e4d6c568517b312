//! The fuzzing loop: generate, repair, sanitize, co-execute, merge coverage.
//!
//! A coordinator owns the generator and the global coverage map. Each round
//! it issues up to `workers` requests conditioned on the current merged
//! vector, runs the programs in parallel on private copies of the map, then
//! merges the results in program order. Conditioning can therefore lag the
//! true coverage by at most `workers` programs, and the output depends only
//! on the configuration.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{emit_dataset, DatasetRecord};
use crate::diff::{co_execute, Bundle, BundleConfig, DiffError, MismatchRecord};
use crate::dut::{CoverageError, CoverageMap, CoverageVectorOf, DutConfig, GROUPS};
use crate::emulator::{MachineState, MemLayout};
use crate::generators::external::{Endpoint, ExternalGenerator, DEFAULT_TIMEOUT};
use crate::generators::ngram::{NgramError, NgramGenerator, NgramTable};
use crate::generators::{
    assemble, fold_transfers, GenError, Generator, GeneratorKind, GeneratorRequest, MutationalGenerator, RandomGenerator,
};
use crate::hash::derive_seed;
use crate::isa::{encode_word, Instruction};
use crate::sanitizer::{sanitize, SanitizeConfig, SanitizeError};
use crate::token::tokenize;

pub mod metrics;

pub use metrics::{coverage_at, dcv, dcv_trend_non_decreasing, read_curve, write_curve, CurvePoint, DcvPoint, DcvValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub generator: GeneratorKind,
    /// Trained table for the `ngram` generator.
    pub ngram_model: Option<PathBuf>,
    /// `tcp://host:port` or `exec:cmd args` for the `external` generator.
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub fallback_to_random: bool,
    pub seed: u64,
    pub program_len: u32,
    /// Generated instructions; the campaign runs `budget / program_len` programs.
    pub budget: u64,
    pub layout: MemLayout,
    pub address_correction: bool,
    pub dataset: Option<PathBuf>,
    pub workers: usize,
    /// Retirement limit per program.
    pub max_steps: u64,
    pub dut: DutConfig,
    pub sanitizer: SanitizeConfig,
    /// Where reproduction bundles go; one subdirectory per mismatch.
    pub bundle_dir: Option<PathBuf>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            generator: GeneratorKind::Random,
            ngram_model: None,
            endpoint: None,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
            fallback_to_random: false,
            seed: 0,
            program_len: 256,
            budget: 100_000,
            layout: MemLayout::default(),
            address_correction: true,
            dataset: None,
            workers: 1,
            max_steps: 4096,
            dut: DutConfig::default(),
            sanitizer: SanitizeConfig::default(),
            bundle_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Ngram(#[from] NgramError),
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, CampaignError> {
        let cfg: CampaignConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::Config(m));
        if self.program_len == 0 {
            return bad("program_len must be positive".into());
        }
        if self.budget < self.program_len as u64 {
            return bad(format!("budget {} is below program_len {}", self.budget, self.program_len));
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if let Err(e) = self.layout.validate() {
            return bad(e.to_string());
        }
        if (self.program_len as u64) * 4 > self.layout.code_size as u64 {
            return bad("program_len does not fit the code region".into());
        }
        CoverageMap::new(self.dut.k)?;
        match self.generator {
            GeneratorKind::Ngram if self.ngram_model.is_none() => bad("ngram generator needs ngram_model".into()),
            GeneratorKind::External if self.endpoint.is_none() => bad("external generator needs endpoint".into()),
            _ => Ok(()),
        }
    }

    /// Programs needed to spend at least `budget` generated instructions.
    pub fn programs(&self) -> u64 {
        self.budget.div_ceil(self.program_len as u64)
    }
}

/// Generator named by the config, loading or connecting as needed.
pub fn build_generator(cfg: &CampaignConfig) -> Result<Box<dyn Generator>, CampaignError> {
    Ok(match cfg.generator {
        GeneratorKind::Random => Box::new(RandomGenerator),
        GeneratorKind::Mutational => Box::new(MutationalGenerator::default()),
        GeneratorKind::Ngram => {
            let path = cfg.ngram_model.as_ref().expect("validated");
            let model = NgramTable::read_from(BufReader::new(File::open(path)?))?;
            Box::new(NgramGenerator { model })
        }
        GeneratorKind::External => {
            let ep: Endpoint = cfg
                .endpoint
                .as_ref()
                .expect("validated")
                .parse()
                .map_err(CampaignError::Config)?;
            let mut g = ExternalGenerator::connect(&ep, Duration::from_secs(cfg.timeout_secs))
                .map_err(|e| CampaignError::Generator(e.into()))?;
            g.fallback_to_random = cfg.fallback_to_random;
            Box::new(g)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchEntry {
    pub program: u64,
    pub seed: u64,
    pub record: MismatchRecord,
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub programs: u64,
    pub generated_instructions: u64,
    pub executed_instructions: u64,
    /// Instructions the generator produced beyond or short of `program_len`.
    pub padded_instructions: u64,
    pub sanitizer_rewrites: u64,
    pub sanitizer_failures: u64,
    pub dut_failures: u64,
    /// Programs whose execution ended on a memory or illegal-instruction fault.
    pub faulted_programs: u64,
    pub programs_with_gain: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub curve: Vec<CurvePoint>,
    pub mismatches: Vec<MismatchEntry>,
    pub stats: CampaignStats,
    pub final_counts: [u32; GROUPS],
    pub final_coverage: u64,
}

impl CampaignReport {
    /// Report with timing zeroed, for replay comparison.
    pub fn without_time(&self) -> CampaignReport {
        let mut r = self.clone();
        for p in &mut r.curve {
            p.seconds = 0.0;
        }
        r
    }

    pub fn write_curve_csv(&self, path: &Path) -> Result<(), metrics::CurveError> {
        write_curve(BufWriter::new(File::create(path).map_err(csv::Error::from)?), &self.curve)
    }
}

/// Turns generator output into a `len`-instruction program: repair, pad or
/// truncate, then fold static branch targets into the program. Also returns
/// how many instructions the stream held.
pub fn build_program(stream: &[u8], len: usize) -> (Vec<Instruction>, usize) {
    let (mut insts, produced) = assemble(stream, len);
    fold_transfers(&mut insts);
    (insts, produced)
}

struct ProgramResult {
    map: CoverageMap,
    executed: u64,
    rewrites: u64,
    sanitizer_failed: bool,
    dut_failed: bool,
    faulted: bool,
    mismatch: Option<Box<crate::diff::Mismatch>>,
    records: Vec<DatasetRecord>,
    /// Kept only for mismatches, which need it for the bundle.
    initial: Option<MachineState>,
    program: Vec<u32>,
}

fn run_one(cfg: &CampaignConfig, words: Vec<u32>, seed: u64, mut map: CoverageMap, want_records: bool) -> ProgramResult {
    let mut rewrites = 0;
    let mut sanitizer_failed = false;
    let program = if cfg.address_correction {
        match sanitize(&words, &cfg.layout, seed, &cfg.sanitizer) {
            Ok(s) => {
                rewrites = s.log.access_rewrites() as u64;
                s.program
            }
            Err(SanitizeError::RewriteBudgetExceeded { partial } | SanitizeError::CodeFull { partial, .. }) => {
                log::debug!("sanitizer gave up on seed {seed:#x}; running the partial rewrite");
                sanitizer_failed = true;
                rewrites = partial.log.access_rewrites() as u64;
                partial.program
            }
            Err(SanitizeError::Load(e)) => {
                log::warn!("program for seed {seed:#x} does not load: {e}");
                sanitizer_failed = true;
                words
            }
        }
    } else {
        words
    };
    let initial = MachineState::seeded(&cfg.layout, seed);
    let mut out = ProgramResult {
        map: CoverageMap::new(cfg.dut.k).expect("validated"),
        executed: 0,
        rewrites,
        sanitizer_failed,
        dut_failed: false,
        faulted: false,
        mismatch: None,
        records: Vec::new(),
        initial: None,
        program: Vec::new(),
    };
    let outcome = co_execute(&program, cfg.layout, &initial, &cfg.dut, &mut map, cfg.max_steps, want_records);
    match outcome {
        Ok(a) => {
            out.executed = a.retired;
            out.faulted = matches!(
                a.end,
                crate::emulator::EventKind::MemMisaligned
                    | crate::emulator::EventKind::MemOutOfBounds
                    | crate::emulator::EventKind::IllegalInstruction
            );
            if want_records {
                let k = cfg.dut.k;
                out.records = a
                    .trace
                    .iter()
                    .map(|t| DatasetRecord {
                        cov: CoverageVectorOf::from_counts(&t.counts_before, k),
                        tokens: tokenize(&t.inst).0,
                    })
                    .collect();
            }
        }
        Err(DiffError::Mismatch(m)) => {
            out.executed = m.record.retired_index;
            out.mismatch = Some(m);
            out.initial = Some(initial);
        }
        Err(e) => {
            log::warn!("co-execution failed for seed {seed:#x}: {e}");
            out.dut_failed = true;
        }
    }
    out.map = map;
    out.program = program;
    out
}

/// Runs a campaign with the generator `gen`, writing dataset records to
/// `dataset` when given.
pub fn run_campaign_with(
    cfg: &CampaignConfig,
    gen: &mut dyn Generator,
    mut dataset: Option<&mut dyn Write>,
) -> Result<CampaignReport, CampaignError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CampaignError::Config(e.to_string()))?;
    let started = Instant::now();
    let mut global = CoverageMap::new(cfg.dut.k)?;
    let mut report = CampaignReport {
        curve: Vec::new(),
        mismatches: Vec::new(),
        stats: CampaignStats::default(),
        final_counts: [0; GROUPS],
        final_coverage: 0,
    };
    let total = cfg.programs();
    let mut next = 0u64;
    while next < total {
        let round = (cfg.workers as u64).min(total - next);
        let coverage = global.vector::<f32>();
        let mut jobs = Vec::with_capacity(round as usize);
        for i in next..next + round {
            let seed = derive_seed(cfg.seed, i);
            let req = GeneratorRequest::new(coverage, cfg.program_len, seed);
            let stream = gen.generate(&req)?;
            let (insts, produced) = build_program(&stream, cfg.program_len as usize);
            report.stats.padded_instructions += produced.abs_diff(cfg.program_len as usize) as u64;
            jobs.push((i, seed, insts));
        }
        let want = dataset.is_some();
        let results: Vec<ProgramResult> = pool.install(|| {
            jobs.par_iter()
                .map(|(_, seed, insts)| run_one(cfg, insts.iter().map(encode_word).collect(), *seed, global.clone(), want))
                .collect()
        });
        for ((i, seed, insts), res) in jobs.into_iter().zip(results) {
            let gain = res.map.gain_over(&global);
            global.merge_from(&res.map)?;
            gen.feedback(&insts, gain);
            let s = &mut report.stats;
            s.programs += 1;
            s.generated_instructions += cfg.program_len as u64;
            s.executed_instructions += res.executed;
            s.sanitizer_rewrites += res.rewrites;
            s.sanitizer_failures += res.sanitizer_failed as u64;
            s.dut_failures += res.dut_failed as u64;
            s.faulted_programs += res.faulted as u64;
            s.programs_with_gain += (gain > 0) as u64;
            if let (Some(w), false) = (dataset.as_deref_mut(), res.records.is_empty()) {
                emit_dataset(&mut *w, &res.records)?;
            }
            if let Some(m) = res.mismatch {
                let bundle = match &cfg.bundle_dir {
                    Some(dir) => {
                        let path = dir.join(format!("mismatch_{i:06}"));
                        let b = Bundle::new(
                            BundleConfig {
                                layout: cfg.layout,
                                dut: cfg.dut,
                                seed,
                                max_steps: cfg.max_steps,
                            },
                            &res.program,
                            res.initial.as_ref().expect("kept on mismatch"),
                            (*m).clone(),
                        );
                        b.write_to(&path).map_err(|e| io::Error::other(e.to_string()))?;
                        Some(path)
                    }
                    None => None,
                };
                report.mismatches.push(MismatchEntry {
                    program: i,
                    seed,
                    record: m.record,
                    bundle,
                });
            }
            report.curve.push(CurvePoint {
                instructions: report.stats.generated_instructions,
                coverage: global.total(),
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        next += round;
    }
    if let Some(w) = dataset {
        w.flush()?;
    }
    report.final_counts = *global.counts();
    report.final_coverage = global.total();
    Ok(report)
}

/// Runs a campaign from its config alone, opening the dataset file if one is
/// configured.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, CampaignError> {
    cfg.validate()?;
    let mut gen = build_generator(cfg)?;
    match &cfg.dataset {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            run_campaign_with(cfg, gen.as_mut(), Some(&mut w))
        }
        None => run_campaign_with(cfg, gen.as_mut(), None),
    }
}

/// One arm of a comparison: a name and its configuration.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub config: CampaignConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seed: u64,
    pub budget: u64,
    pub coverage_at_budget: u64,
    /// Instructions to reach the lowest final coverage among the arms run on
    /// this seed.
    pub time_to_common_coverage: Option<u64>,
    pub dcv_trend_non_decreasing: bool,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// `(arm, seed, report)` in arm-major order.
    pub runs: Vec<(String, u64, CampaignReport)>,
    pub summary: Vec<ArmSummary>,
}

/// Runs every arm on every seed with the same budget.
///
/// `make` builds the generator for an arm; it lets callers supply in-memory
/// models. DCV segments span `dcv_window` instructions.
pub fn compare_arms(
    arms: &[Arm],
    seeds: &[u64],
    budget: u64,
    dcv_window: u64,
    mut make: impl FnMut(&Arm) -> Result<Box<dyn Generator>, CampaignError>,
) -> Result<Comparison, CampaignError> {
    let mut runs = Vec::new();
    for arm in arms {
        for &seed in seeds {
            let cfg = CampaignConfig {
                seed,
                budget,
                ..arm.config.clone()
            };
            let mut gen = make(arm)?;
            runs.push((arm.name.clone(), seed, run_campaign_with(&cfg, gen.as_mut(), None)?));
        }
    }
    let mut summary = Vec::new();
    for (name, seed, rep) in &runs {
        let common = runs
            .iter()
            .filter(|(_, s, _)| s == seed)
            .map(|(_, _, r)| r.final_coverage)
            .min()
            .unwrap_or(0);
        let trend = dcv::<f64>(&rep.curve, dcv_window)
            .map(|d| dcv_trend_non_decreasing(&d))
            .unwrap_or(true);
        summary.push(ArmSummary {
            arm: name.clone(),
            seed: *seed,
            budget,
            coverage_at_budget: coverage_at(&rep.curve, budget),
            time_to_common_coverage: metrics::time_to_coverage(&rep.curve, common),
            dcv_trend_non_decreasing: trend,
        });
    }
    Ok(Comparison { runs, summary })
}

impl Comparison {
    /// One `<arm>_seed<N>.csv` curve per run plus `summary.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, metrics::CurveError> {
        std::fs::create_dir_all(dir).map_err(csv::Error::from)?;
        let mut files = Vec::new();
        for (arm, seed, rep) in &self.runs {
            let p = dir.join(format!("{arm}_seed{seed}.csv"));
            rep.write_curve_csv(&p)?;
            files.push(p);
        }
        let p = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&p)?;
        for s in &self.summary {
            w.serialize(s)?;
        }
        w.flush().map_err(csv::Error::from)?;
        files.push(p);
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;
    use crate::legality::is_legal_seq;

    fn small(programs: u64) -> CampaignConfig {
        CampaignConfig {
            budget: 64 * programs,
            program_len: 64,
            max_steps: 512,
            ..CampaignConfig::default()
        }
    }

    #[test]
    fn one_program_one_point() {
        let cfg = small(1);
        let r = run_campaign(&cfg).unwrap();
        assert_eq!(r.curve.len(), 1);
        assert_eq!(r.stats.programs, 1);
        assert_eq!(r.curve[0].instructions, 64);
    }

    #[test]
    fn deterministic_and_monotone() {
        let cfg = small(12);
        let a = run_campaign(&cfg).unwrap();
        let b = run_campaign(&cfg).unwrap();
        assert_eq!(a.without_time(), b.without_time());
        metrics::is_monotone(&a.curve).unwrap();
        assert!(a.final_coverage > 0);
        assert!(a.mismatches.is_empty());
    }

    #[test]
    fn workers_do_not_change_results_for_a_fixed_count() {
        let cfg = CampaignConfig { workers: 3, ..small(9) };
        let a = run_campaign(&cfg).unwrap();
        let b = run_campaign(&cfg).unwrap();
        assert_eq!(a.without_time(), b.without_time());
    }

    #[test]
    fn dataset_records_are_legal() {
        let cfg = small(4);
        let mut buf = Vec::new();
        let r = run_campaign_with(&cfg, &mut RandomGenerator, Some(&mut buf)).unwrap();
        let recs = load_dataset(&buf[..]).unwrap();
        assert_eq!(recs.len() as u64, r.stats.executed_instructions);
        assert!(recs.iter().all(|x| is_legal_seq(&x.tokens)));
        assert!(recs.iter().all(|x| x.cov.is_valid()));
        assert_eq!(recs[0].cov, CoverageVectorOf::default());
    }

    #[test]
    fn mutational_corpus_grows() {
        let cfg = CampaignConfig {
            generator: GeneratorKind::Mutational,
            ..small(6)
        };
        let mut g = MutationalGenerator::default();
        let r = run_campaign_with(&cfg, &mut g, None).unwrap();
        assert_eq!(g.corpus.len() as u64, r.stats.programs_with_gain);
    }

    #[test]
    fn config_validation() {
        assert!(CampaignConfig {
            budget: 10,
            ..CampaignConfig::default()
        }
        .validate()
        .is_err());
        assert!(CampaignConfig {
            generator: GeneratorKind::Ngram,
            ..CampaignConfig::default()
        }
        .validate()
        .is_err());
        let cfg = CampaignConfig::from_toml("seed = 7\nbudget = 512\n[dut]\ninject_bug = true\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.dut.inject_bug);
        assert_eq!(cfg.program_len, 256);
        assert!(CampaignConfig::from_toml("sede = 7").is_err());
    }

    #[test]
    fn self_comparison_is_identical() {
        let arm = |name: &str| Arm {
            name: name.into(),
            config: small(4),
        };
        let c = compare_arms(&[arm("a"), arm("b")], &[1, 2], 256, 64, |_| Ok(Box::new(RandomGenerator))).unwrap();
        assert_eq!(c.runs.len(), 4);
        assert_eq!(c.runs[0].2.without_time(), c.runs[2].2.without_time());
        let dir = tempfile::tempdir().unwrap();
        let files = c.write_to(dir.path()).unwrap();
        assert_eq!(files.len(), 5);
    }
}
