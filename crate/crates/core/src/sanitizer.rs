//! Emulator-driven rewriting of memory accesses so that a program runs with
//! no misaligned or out-of-bounds data access.
//!
//! The program is executed on the reference emulator from its seeded initial
//! state. A misaligned access has its offset lowered by `addr mod width`. An
//! access that is out of bounds (or whose alignment fix does not fit the
//! 12-bit offset) gets an `auipc`/`addi` pair inserted in front of it that
//! loads a base register so the unmodified offset lands inside the data
//! region. Branches and jumps crossing the insertion are relinked.
//!
//! The result is only fault-free for the initial state it was sanitized
//! against, so callers must execute it with the same seed.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::{Emulator, EventKind, LoadError, MachineState, MemLayout};
use crate::isa::{decode_word, encode_word, Instruction, MemAccess, Reg, NOP_WORD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteKind {
    AlignOffset,
    InsertAuipcAddi,
    /// A relinked branch no longer fit its offset field and became a NOP.
    RelinkImpossible,
    /// An access faulted again after its pair was inserted, so control
    /// reached it around the pair (an indirect jump whose target moved with
    /// it). The access became a NOP.
    DropAccess,
}

/// One rewrite. `pc` is the address of the rewritten word at the time of the
/// rewrite; for `InsertAuipcAddi` the replacement is `[auipc, addi, access]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteEntry {
    pub pc: u32,
    pub kind: RewriteKind,
    pub original: Vec<u32>,
    pub replacement: Vec<u32>,
    pub chosen_target: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteLog {
    pub entries: Vec<RewriteEntry>,
}

impl RewriteLog {
    /// Rewrites of memory accesses (relink fallout excluded).
    pub fn access_rewrites(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != RewriteKind::RelinkImpossible)
            .count()
    }

    pub fn write_json_lines<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeMode {
    /// Continue from the rewritten instruction, then confirm with a fresh run.
    Resume,
    /// Rerun the whole program from its initial state after every rewrite.
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanitizeConfig {
    pub max_rewrites: usize,
    pub max_steps: u64,
    pub mode: ResumeMode,
}

impl Default for SanitizeConfig {
    fn default() -> Self {
        SanitizeConfig {
            max_rewrites: 64,
            max_steps: 4096,
            mode: ResumeMode::Resume,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sanitized {
    pub program: Vec<u32>,
    pub log: RewriteLog,
}

#[derive(Debug, Error)]
pub enum SanitizeError {
    #[error("rewrite budget exhausted after {} rewrites", .partial.log.entries.len())]
    RewriteBudgetExceeded { partial: Box<Sanitized> },
    #[error("no room in the code region for an address fix at {pc:#010x}")]
    CodeFull { pc: u32, partial: Box<Sanitized> },
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// New offset for a misaligned access, or `None` if it does not fit in 12
/// signed bits.
pub fn fix_misalignment(inst: &Instruction, effective_addr: u32, width: u32) -> Option<Instruction> {
    let delta = (effective_addr % width) as i32;
    let imm = inst.imm().expect("memory access has an offset") - delta;
    (-2048..=2047).contains(&imm).then(|| inst.with_imm(imm))
}

/// Legal data address an out-of-bounds access is redirected to:
/// `data_base + (addr mod data_size)`, aligned down to the access width.
pub fn choose_target(effective_addr: u32, width: u32, layout: &MemLayout) -> u32 {
    let off = effective_addr % layout.data_size;
    layout.data_base + off - off % width
}

/// Splits `delta` into an auipc immediate (low 12 bits clear) and a 12-bit
/// signed addi immediate with `hi + lo == delta` modulo 2^32.
pub fn hi_lo_split(delta: u32) -> (i32, i32) {
    let lo = ((delta << 20) as i32) >> 20;
    let hi = delta.wrapping_sub(lo as u32) as i32;
    (hi, lo)
}

/// Register the inserted pair writes, and the access rewritten to use it.
fn base_register(inst: &Instruction) -> (Reg, Instruction) {
    let rs1 = inst.rs1().expect("memory access has a base");
    let rs2 = match inst.is_memory_access() {
        MemAccess::Store { .. } => inst.rs2(),
        _ => None,
    };
    if rs1 != Reg::ZERO && rs2 != Some(rs1) {
        return (rs1, *inst);
    }
    let scratch = if rs2 == Some(Reg::new(31)) { Reg::new(30) } else { Reg::new(31) };
    (scratch, inst.with_rs1(scratch))
}

fn relink_limit(inst: &Instruction) -> (i64, i64) {
    match inst {
        Instruction::B { .. } => (-4096, 4094),
        _ => (-(1 << 20), (1 << 20) - 2),
    }
}

/// Inserts an `auipc`/`addi` pair before the access at word `index`.
///
/// Returns the log entries (the insertion first, then any relink failures)
/// or `None` if the code region has no room for two more words.
pub fn fix_out_of_bounds(
    program: &mut Vec<u32>,
    index: usize,
    effective_addr: u32,
    width: u32,
    layout: &MemLayout,
) -> Option<Vec<RewriteEntry>> {
    if program.len() + 2 > layout.code_words() {
        return None;
    }
    let original = program[index];
    let inst = decode_word(original).expect("faulting access decodes");
    let target = choose_target(effective_addr, width, layout);
    let imm = inst.imm().expect("memory access has an offset");
    let pc = layout.code_base + 4 * index as u32;
    let (base, access) = base_register(&inst);
    let want_base = target.wrapping_sub(imm as u32);
    let (hi, lo) = hi_lo_split(want_base.wrapping_sub(pc));
    let pair = [
        encode_word(&Instruction::auipc(base, hi)),
        encode_word(&Instruction::addi(base, base, lo)),
    ];
    let access_word = encode_word(&access);

    let mut entries = vec![RewriteEntry {
        pc,
        kind: RewriteKind::InsertAuipcAddi,
        original: vec![original],
        replacement: vec![pair[0], pair[1], access_word],
        chosen_target: target,
    }];

    // Relink static control transfers whose span crosses the insertion.
    let boundary = 4 * index as i64;
    let shift = |b: i64| if b > boundary { b + 8 } else { b };
    for (s, word) in program.iter_mut().enumerate() {
        let Ok(cf) = decode_word(*word) else { continue };
        let Some(off) = cf.pc_relative_target() else { continue };
        let src = 4 * s as i64;
        let dst = src + off as i64;
        let new_src = if s >= index { src + 8 } else { src };
        let new_dst = shift(dst);
        let new_off = new_dst - new_src;
        if new_off == off as i64 {
            continue;
        }
        let (lo_lim, hi_lim) = relink_limit(&cf);
        let old = *word;
        if (lo_lim..=hi_lim).contains(&new_off) {
            *word = encode_word(&cf.with_imm(new_off as i32));
        } else {
            *word = NOP_WORD;
            entries.push(RewriteEntry {
                pc: layout.code_base.wrapping_add(new_src as u32),
                kind: RewriteKind::RelinkImpossible,
                original: vec![old],
                replacement: vec![NOP_WORD],
                chosen_target: layout.code_base.wrapping_add(new_dst as u32),
            });
        }
    }

    program[index] = access_word;
    program.splice(index..index, pair);
    Some(entries)
}

const TAG_ALIGNED: u8 = 1;
const TAG_PAIRED: u8 = 2;

/// Sanitizes `program` against the initial state `MachineState::seeded(layout, seed)`.
///
/// Returns only after a run from that initial state reaches halt or
/// `max_steps` with no memory fault.
pub fn sanitize(program: &[u32], layout: &MemLayout, seed: u64, cfg: &SanitizeConfig) -> Result<Sanitized, SanitizeError> {
    let mut prog = program.to_vec();
    let mut tags = vec![0u8; prog.len()];
    let mut log = RewriteLog::default();
    let fresh = |p: &[u32]| Emulator::new(p, *layout, MachineState::seeded(layout, seed));

    'pass: loop {
        let mut emu = fresh(&prog)?;
        let mut clean = true;
        let mut steps = 0u64;
        loop {
            if steps == cfg.max_steps {
                break;
            }
            let ev = emu.step();
            match ev.kind {
                EventKind::Retired => {
                    steps += 1;
                    continue;
                }
                EventKind::Halted | EventKind::IllegalInstruction => break,
                EventKind::MemMisaligned | EventKind::MemOutOfBounds => {}
            }
            clean = false;
            if log.access_rewrites() >= cfg.max_rewrites {
                return Err(SanitizeError::RewriteBudgetExceeded {
                    partial: Box::new(Sanitized { program: prog, log }),
                });
            }
            let index = ((ev.pc - layout.code_base) / 4) as usize;
            let inst = ev.inst.expect("faulting access carries its instruction");
            let width = inst.is_memory_access().width().expect("fault on a memory access");
            let addr = ev.effective_addr.expect("fault carries its address");

            let aligned_fix = (ev.kind == EventKind::MemMisaligned && tags[index] & TAG_ALIGNED == 0)
                .then(|| fix_misalignment(&inst, addr, width))
                .flatten()
                .filter(|_| layout.data_contains(addr - addr % width, width));
            if tags[index] & TAG_PAIRED != 0 {
                // another pair would be bypassed the same way
                log.entries.push(RewriteEntry {
                    pc: ev.pc,
                    kind: RewriteKind::DropAccess,
                    original: vec![prog[index]],
                    replacement: vec![NOP_WORD],
                    chosen_target: addr,
                });
                prog[index] = NOP_WORD;
            } else if let Some(fixed) = aligned_fix {
                let word = encode_word(&fixed);
                log.entries.push(RewriteEntry {
                    pc: ev.pc,
                    kind: RewriteKind::AlignOffset,
                    original: vec![prog[index]],
                    replacement: vec![word],
                    chosen_target: addr - addr % width,
                });
                prog[index] = word;
                tags[index] |= TAG_ALIGNED;
            } else {
                let Some(entries) = fix_out_of_bounds(&mut prog, index, addr, width, layout) else {
                    return Err(SanitizeError::CodeFull {
                        pc: ev.pc,
                        partial: Box::new(Sanitized { program: prog, log }),
                    });
                };
                log.entries.extend(entries);
                tags[index] |= TAG_PAIRED;
                tags.splice(index..index, [0, 0]);
            }
            match cfg.mode {
                ResumeMode::Resume => emu.set_program(prog.clone())?,
                ResumeMode::Restart => continue 'pass,
            }
        }
        if clean {
            return Ok(Sanitized { program: prog, log });
        }
    }
}
