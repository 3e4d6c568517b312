//! Lock-step differential checking of the DUT against the reference
//! emulator, and reproduction bundles for mismatches.
//!
//! Every retirement compares pc, the destination-register write and the
//! memory write. Every [`HASH_PERIOD`] retirements the full register files
//! are compared through their hashes.

use std::fs;
use std::io::{self, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dut::{CoverageMap, DutConfig, DutError, Pipeline, GROUPS};
use crate::emulator::{
    program_from_hex, program_to_hex, EventKind, ExecEvent, Emulator, MachineState, MemLayout, MemWrite,
    ProgramFileError, SnapshotBlob, SnapshotError,
};
use crate::isa::Instruction;

pub const HASH_PERIOD: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchField {
    Pc,
    RegWrite,
    MemWrite,
    RegfileHash,
    /// Event kinds differ: one side retired while the other faulted or halted.
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldValue {
    Pc(u32),
    RegWrite(Option<(u8, u32)>),
    MemWrite(Option<MemWrite>),
    Hash(u64),
    Event(Option<EventKind>),
}

/// First divergence between DUT and reference. Snapshots hold the committed
/// architectural state of each side just before the diverging retirement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub record: MismatchRecord,
    pub dut_snapshot: SnapshotBlob,
    pub ref_snapshot: SnapshotBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchRecord {
    pub retired_index: u64,
    pub pc_dut: u32,
    pub pc_ref: u32,
    pub field: MismatchField,
    pub dut_value: FieldValue,
    pub ref_value: FieldValue,
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("mismatch at retirement {} on {:?}", .0.record.retired_index, .0.record.field)]
    Mismatch(Box<Mismatch>),
    #[error(transparent)]
    Dut(#[from] DutError),
    #[error(transparent)]
    Load(#[from] crate::emulator::LoadError),
}

/// One retired instruction with the global coverage counts just before it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub inst: Instruction,
    pub counts_before: [u32; GROUPS],
    /// Bits this instruction's retirement window added.
    pub gain: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub retired: u64,
    /// Final event kind shared by both sides (`Halted` for a clean end or
    /// hitting `max_steps`).
    pub end: EventKind,
    pub trace: Vec<TraceEntry>,
}

fn write_of(e: &ExecEvent) -> Option<(u8, u32)> {
    e.reg_write.map(|(r, v)| (r.index() as u8, v))
}

/// Compares one DUT event against one reference event.
fn compare(dut: Option<&ExecEvent>, reference: Option<&ExecEvent>) -> Option<(MismatchField, FieldValue, FieldValue)> {
    let kind = |e: Option<&ExecEvent>| e.map(|e| e.kind);
    match (dut, reference) {
        (None, None) => None,
        (Some(d), Some(r)) if d.kind == r.kind => {
            if d.pc != r.pc {
                Some((MismatchField::Pc, FieldValue::Pc(d.pc), FieldValue::Pc(r.pc)))
            } else if write_of(d) != write_of(r) {
                Some((MismatchField::RegWrite, FieldValue::RegWrite(write_of(d)), FieldValue::RegWrite(write_of(r))))
            } else if d.mem_write != r.mem_write {
                Some((MismatchField::MemWrite, FieldValue::MemWrite(d.mem_write), FieldValue::MemWrite(r.mem_write)))
            } else {
                None
            }
        }
        _ => Some((MismatchField::Event, FieldValue::Event(kind(dut)), FieldValue::Event(kind(reference)))),
    }
}

/// Runs both sides from `initial` in lock step.
///
/// `cov` accumulates DUT coverage. With `record_trace`, each agreed
/// retirement is returned with the coverage counts just before it.
pub fn co_execute(
    program: &[u32],
    layout: MemLayout,
    initial: &MachineState,
    cfg: &DutConfig,
    cov: &mut CoverageMap,
    max_steps: u64,
    record_trace: bool,
) -> Result<Agreement, DiffError> {
    let mut reference = Emulator::new(program, layout, initial.clone())?;
    let mut dut = Pipeline::new(program, layout, initial.clone(), *cfg);
    let mut retired = 0u64;
    let mut trace = Vec::new();
    let mut counts_before = *cov.counts();

    loop {
        if retired == max_steps {
            return Ok(Agreement {
                retired,
                end: EventKind::Halted,
                trace,
            });
        }
        let r = reference.step();
        let r = (r.kind != EventKind::Halted).then_some(r);
        let d = dut.next_event(cov)?;
        if let Some((field, dut_value, ref_value)) = compare(d.as_ref(), r.as_ref()) {
            let record = MismatchRecord {
                retired_index: retired,
                pc_dut: d.map_or_else(|| dut.arch_state().pc, |e| e.pc),
                pc_ref: r.map_or(reference.state.pc, |e| e.pc),
                field,
                dut_value,
                ref_value,
            };
            return Err(mismatch(program, layout, initial, cfg, record));
        }
        let Some(ev) = r else {
            return Ok(Agreement {
                retired,
                end: EventKind::Halted,
                trace,
            });
        };
        if ev.kind != EventKind::Retired {
            return Ok(Agreement {
                retired,
                end: ev.kind,
                trace,
            });
        }
        if record_trace {
            let now = *cov.counts();
            let gain = now.iter().zip(&counts_before).map(|(a, b)| a - b).sum();
            trace.push(TraceEntry {
                inst: ev.inst.expect("retired event has an instruction"),
                counts_before,
                gain,
            });
            counts_before = now;
        }
        retired += 1;
        if retired.is_multiple_of(HASH_PERIOD) {
            let (dh, rh) = (dut.regfile_hash(), reference.state.regfile_hash());
            if dh != rh {
                let record = MismatchRecord {
                    retired_index: retired - 1,
                    pc_dut: ev.pc,
                    pc_ref: ev.pc,
                    field: MismatchField::RegfileHash,
                    dut_value: FieldValue::Hash(dh),
                    ref_value: FieldValue::Hash(rh),
                };
                return Err(mismatch(program, layout, initial, cfg, record));
            }
        }
    }
}

/// Architectural states of both sides after `k` agreed retirements.
fn states_at(program: &[u32], layout: MemLayout, initial: &MachineState, cfg: &DutConfig, k: u64) -> (MachineState, MachineState) {
    let mut reference = Emulator::new(program, layout, initial.clone()).expect("program loaded before");
    for _ in 0..k {
        reference.step();
    }
    let mut dut = Pipeline::new(program, layout, initial.clone(), *cfg);
    let mut scratch = CoverageMap::new(cfg.k).expect("k validated by caller");
    while dut.retired() < k {
        if dut.next_event(&mut scratch).ok().flatten().is_none() {
            break;
        }
    }
    (dut.arch_state(), reference.state)
}

fn mismatch(program: &[u32], layout: MemLayout, initial: &MachineState, cfg: &DutConfig, record: MismatchRecord) -> DiffError {
    // A hash mismatch is reported after the retirement that completed the
    // period, so its snapshots follow that retirement.
    let k = match record.field {
        MismatchField::RegfileHash => record.retired_index + 1,
        _ => record.retired_index,
    };
    let (d, r) = states_at(program, layout, initial, cfg, k);
    let snap = |s: MachineState| Emulator::new(program, layout, s).expect("program loaded before").snapshot();
    DiffError::Mismatch(Box::new(Mismatch {
        record,
        dut_snapshot: snap(d),
        ref_snapshot: snap(r),
    }))
}

// ---------------------------------------------------------------------------
// Reproduction bundles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub layout: MemLayout,
    pub dut: DutConfig,
    pub seed: u64,
    pub max_steps: u64,
}

/// Everything needed to reproduce a mismatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub config: BundleConfig,
    pub program: Vec<u32>,
    pub initial: SnapshotBlob,
    pub mismatch: Mismatch,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Program(#[from] ProgramFileError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("replay failed to run: {0}")]
    Replay(String),
}

const F_PROGRAM: &str = "program.hex";
const F_CONFIG: &str = "config.json";
const F_INITIAL: &str = "initial.lyrs";
const F_DUT: &str = "dut.lyrs";
const F_REF: &str = "ref.lyrs";
const F_MISMATCH: &str = "mismatch.json";

impl Bundle {
    pub fn write_to(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(F_PROGRAM), program_to_hex(&self.program))?;
        fs::write(dir.join(F_CONFIG), serde_json::to_string_pretty(&self.config)?)?;
        fs::write(dir.join(F_INITIAL), &self.initial.0)?;
        fs::write(dir.join(F_DUT), &self.mismatch.dut_snapshot.0)?;
        fs::write(dir.join(F_REF), &self.mismatch.ref_snapshot.0)?;
        fs::write(dir.join(F_MISMATCH), serde_json::to_string_pretty(&self.mismatch.record)?)?;
        Ok(())
    }

    pub fn read_from(dir: &Path) -> Result<Bundle, BundleError> {
        let program = program_from_hex(BufReader::new(fs::File::open(dir.join(F_PROGRAM))?))?;
        let config = serde_json::from_slice(&fs::read(dir.join(F_CONFIG))?)?;
        let initial = SnapshotBlob(fs::read(dir.join(F_INITIAL))?);
        Emulator::restore(&initial)?;
        let dut_snapshot = SnapshotBlob(fs::read(dir.join(F_DUT))?);
        let ref_snapshot = SnapshotBlob(fs::read(dir.join(F_REF))?);
        Emulator::restore(&dut_snapshot)?;
        Emulator::restore(&ref_snapshot)?;
        let record = serde_json::from_slice(&fs::read(dir.join(F_MISMATCH))?)?;
        Ok(Bundle {
            config,
            program,
            initial,
            mismatch: Mismatch {
                record,
                dut_snapshot,
                ref_snapshot,
            },
        })
    }

    pub fn new(config: BundleConfig, program: &[u32], initial: &MachineState, mismatch: Mismatch) -> Bundle {
        let initial = Emulator::new(program, config.layout, initial.clone())
            .expect("program ran")
            .snapshot();
        Bundle {
            config,
            program: program.to_vec(),
            initial,
            mismatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    /// The rerun produced the identical record and snapshots.
    pub reproduced: bool,
    pub observed: Option<Mismatch>,
    /// The reference snapshot stepped once yields the recorded reference value.
    pub ref_step_matches: bool,
}

/// Reruns the bundle from its initial snapshot and checks the mismatch recurs
/// bit for bit.
///
/// The DUT snapshot is architectural: pipeline contents (forwarding state,
/// predictor, in-flight instructions) are recreated by rerunning from the
/// initial state rather than restored.
pub fn replay(bundle: &Bundle) -> Result<ReplayOutcome, BundleError> {
    let init = Emulator::restore(&bundle.initial)?;
    let c = &bundle.config;
    let mut cov = CoverageMap::new(c.dut.k).map_err(|e| BundleError::Replay(e.to_string()))?;
    let observed = match co_execute(&bundle.program, c.layout, &init.state, &c.dut, &mut cov, c.max_steps, false) {
        Ok(_) => None,
        Err(DiffError::Mismatch(m)) => Some(*m),
        Err(e) => return Err(BundleError::Replay(e.to_string())),
    };
    let reproduced = observed.as_ref() == Some(&bundle.mismatch);

    let rec = &bundle.mismatch.record;
    let mut r = Emulator::restore(&bundle.mismatch.ref_snapshot)?;
    let ref_step_matches = match rec.field {
        MismatchField::RegfileHash => rec.ref_value == FieldValue::Hash(r.state.regfile_hash()),
        _ => {
            let ev = r.step();
            let ev = (ev.kind != EventKind::Halted).then_some(ev);
            let got = match rec.field {
                MismatchField::Pc => ev.map(|e| FieldValue::Pc(e.pc)),
                MismatchField::RegWrite => ev.map(|e| FieldValue::RegWrite(write_of(&e))),
                MismatchField::MemWrite => ev.map(|e| FieldValue::MemWrite(e.mem_write)),
                MismatchField::Event => Some(FieldValue::Event(ev.map(|e| e.kind))),
                MismatchField::RegfileHash => unreachable!(),
            };
            got == Some(rec.ref_value)
        }
    };
    Ok(ReplayOutcome {
        reproduced,
        observed,
        ref_step_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::NOP_WORD;

    const SELF_LOOP: u32 = 0x0000_006f;

    fn run(program: &[u32], cfg: DutConfig) -> Result<Agreement, DiffError> {
        let layout = MemLayout::default();
        let init = MachineState::seeded(&layout, 11);
        let mut cov = CoverageMap::new(cfg.k).unwrap();
        co_execute(program, layout, &init, &cfg, &mut cov, 10_000, true)
    }

    #[test]
    fn empty_program_agrees() {
        let a = run(&[], DutConfig::default()).unwrap();
        assert_eq!(a.retired, 0);
    }

    #[test]
    fn simple_program_agrees() {
        let prog = [NOP_WORD, 0x0050_0093, 0x0010_8133, SELF_LOOP];
        let a = run(&prog, DutConfig::default()).unwrap();
        assert_eq!(a.retired, 4);
        assert_eq!(a.trace.len(), 4);
        assert!(a.trace.iter().any(|t| t.gain > 0));
    }

    #[test]
    fn long_loop_passes_hash_checks() {
        // addi x1,x0,100 ; addi x2,x2,3 ; addi x1,x1,-1 ; bne x1,x0,-8 ; self loop
        let prog = [0x0640_0093, 0x0031_0113, 0xfff0_8093, 0xfe00_9ce3, SELF_LOOP];
        let a = run(&prog, DutConfig::default()).unwrap();
        assert_eq!(a.retired, 1 + 300 + 1);
    }

    #[test]
    fn injected_bug_is_caught_at_the_write() {
        let prog = [0x02a0_0093, 0x0000_8133, SELF_LOOP];
        let cfg = DutConfig {
            inject_bug: true,
            ..DutConfig::default()
        };
        let Err(DiffError::Mismatch(m)) = run(&prog, cfg) else {
            panic!("expected a mismatch")
        };
        assert_eq!(m.record.field, MismatchField::RegWrite);
        assert_eq!(m.record.retired_index, 1);
        assert_eq!(m.record.ref_value, FieldValue::RegWrite(Some((2, 42))));
        assert_ne!(m.record.dut_value, m.record.ref_value);
        // the snapshots agree up to the diverging retirement
        let d = Emulator::restore(&m.dut_snapshot).unwrap();
        let r = Emulator::restore(&m.ref_snapshot).unwrap();
        assert_eq!(d.state, r.state);
    }

    #[test]
    fn bundle_roundtrip_and_replay() {
        let prog = [0x02a0_0093, 0x0000_8133, SELF_LOOP];
        let layout = MemLayout::default();
        let cfg = DutConfig {
            inject_bug: true,
            ..DutConfig::default()
        };
        let init = MachineState::seeded(&layout, 11);
        let Err(DiffError::Mismatch(m)) = run(&prog, cfg) else {
            panic!("expected a mismatch")
        };
        let bundle = Bundle::new(
            BundleConfig {
                layout,
                dut: cfg,
                seed: 11,
                max_steps: 10_000,
            },
            &prog,
            &init,
            *m,
        );
        let dir = tempfile::tempdir().unwrap();
        bundle.write_to(dir.path()).unwrap();
        let back = Bundle::read_from(dir.path()).unwrap();
        assert_eq!(back, bundle);
        let out = replay(&back).unwrap();
        assert!(out.reproduced);
        assert!(out.ref_step_matches);
    }
}
