//! Reference ISA emulator over a flat memory model with precise faults.
//!
//! Code and data live in disjoint regions. Code is read-only and fetched from
//! the loaded program; loads and stores must fall entirely inside the data
//! region. Execution halts when a control transfer targets its own pc or when
//! the next pc leaves the loaded program.

use std::fmt;
use std::io::{self, BufRead};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{hash64, hash_bytes};
use crate::isa::{decode_word, Instruction, MemAccess, Op, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemLayout {
    pub code_base: u32,
    pub code_size: u32,
    pub data_base: u32,
    pub data_size: u32,
}

impl Default for MemLayout {
    fn default() -> Self {
        MemLayout {
            code_base: 0x8000_0000,
            code_size: 64 * 1024,
            data_base: 0x8001_0000,
            data_size: 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("{region} region at {base:#x} is not 4-byte aligned in base and size")]
    Unaligned { region: &'static str, base: u32 },
    #[error("{region} region is empty")]
    Empty { region: &'static str },
    #[error("{region} region wraps the address space")]
    Wraps { region: &'static str },
    #[error("code and data regions overlap")]
    Overlap,
}

impl MemLayout {
    pub fn validate(&self) -> Result<(), LayoutError> {
        for (region, base, size) in [
            ("code", self.code_base, self.code_size),
            ("data", self.data_base, self.data_size),
        ] {
            if base % 4 != 0 || size % 4 != 0 {
                return Err(LayoutError::Unaligned { region, base });
            }
            if size == 0 {
                return Err(LayoutError::Empty { region });
            }
            if base.checked_add(size - 1).is_none() {
                return Err(LayoutError::Wraps { region });
            }
        }
        let code_end = self.code_base as u64 + self.code_size as u64;
        let data_end = self.data_base as u64 + self.data_size as u64;
        if (self.code_base as u64) < data_end && (self.data_base as u64) < code_end {
            return Err(LayoutError::Overlap);
        }
        Ok(())
    }

    pub fn code_words(&self) -> usize {
        (self.code_size / 4) as usize
    }

    /// Whether `[addr, addr + width)` lies inside the data region.
    #[inline]
    pub fn data_contains(&self, addr: u32, width: u32) -> bool {
        let off = addr.wrapping_sub(self.data_base) as u64;
        addr >= self.data_base && off + width as u64 <= self.data_size as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Retired,
    MemMisaligned,
    MemOutOfBounds,
    IllegalInstruction,
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemWrite {
    pub addr: u32,
    pub width: u32,
    pub value: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecEvent {
    pub kind: EventKind,
    pub pc: u32,
    pub inst: Option<Instruction>,
    pub effective_addr: Option<u32>,
    /// Register writes to x0 are not reported.
    pub reg_write: Option<(Reg, u32)>,
    pub mem_write: Option<MemWrite>,
}

impl ExecEvent {
    fn bare(kind: EventKind, pc: u32, inst: Option<Instruction>) -> Self {
        ExecEvent {
            kind,
            pc,
            inst,
            effective_addr: None,
            reg_write: None,
            mem_write: None,
        }
    }

    pub fn is_fault(&self) -> bool {
        matches!(
            self.kind,
            EventKind::MemMisaligned | EventKind::MemOutOfBounds | EventKind::IllegalInstruction
        )
    }
}

/// Architectural state. `mem` backs the data region only.
#[derive(Clone, PartialEq, Eq)]
pub struct MachineState {
    pub pc: u32,
    pub regs: [u32; 32],
    pub mem: Vec<u8>,
    pub retired: u64,
    pub halted: bool,
}

impl fmt::Debug for MachineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MachineState")
            .field("pc", &format_args!("{:#010x}", self.pc))
            .field("regs", &self.regs)
            .field("mem_hash", &format_args!("{:#018x}", hash_bytes(&self.mem)))
            .field("retired", &self.retired)
            .field("halted", &self.halted)
            .finish()
    }
}

impl MachineState {
    pub fn zeroed(layout: &MemLayout) -> Self {
        MachineState {
            pc: layout.code_base,
            regs: [0; 32],
            mem: vec![0; layout.data_size as usize],
            retired: 0,
            halted: false,
        }
    }

    /// Zeroed memory, x1..x31 drawn from `seed`.
    pub fn seeded(layout: &MemLayout, seed: u64) -> Self {
        let mut s = Self::zeroed(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in s.regs.iter_mut().skip(1) {
            *r = rng.random();
        }
        s
    }

    /// Hash over pc and the register file.
    pub fn regfile_hash(&self) -> u64 {
        regfile_hash(self.pc, &self.regs)
    }

    /// Hash over every architectural field including memory.
    pub fn full_hash(&self) -> u64 {
        hash64(&[
            self.regfile_hash(),
            hash_bytes(&self.mem),
            self.retired,
            self.halted as u64,
        ])
    }
}

pub fn regfile_hash(pc: u32, regs: &[u32; 32]) -> u64 {
    let mut words = [0u64; 33];
    words[0] = pc as u64;
    for (w, r) in words[1..].iter_mut().zip(regs) {
        *w = *r as u64;
    }
    hash64(&words)
}

#[inline]
fn load(mem: &[u8], off: usize, width: u32, signed: bool) -> u32 {
    match (width, signed) {
        (1, true) => mem[off] as i8 as i32 as u32,
        (1, false) => mem[off] as u32,
        (2, true) => i16::from_le_bytes([mem[off], mem[off + 1]]) as i32 as u32,
        (2, false) => u16::from_le_bytes([mem[off], mem[off + 1]]) as u32,
        _ => u32::from_le_bytes(mem[off..off + 4].try_into().unwrap()),
    }
}

#[inline]
fn store(mem: &mut [u8], off: usize, width: u32, value: u32) {
    mem[off..off + width as usize].copy_from_slice(&value.to_le_bytes()[..width as usize]);
}

/// Value written to rd by a register-register or register-immediate op.
pub fn alu(op: Op, a: u32, b: u32) -> u32 {
    let sa = a as i32;
    let sb = b as i32;
    match op {
        Op::Add | Op::Addi => a.wrapping_add(b),
        Op::Sub => a.wrapping_sub(b),
        Op::Sll | Op::Slli => a << (b & 31),
        Op::Srl | Op::Srli => a >> (b & 31),
        Op::Sra | Op::Srai => (sa >> (b & 31)) as u32,
        Op::Slt | Op::Slti => (sa < sb) as u32,
        Op::Sltu | Op::Sltiu => (a < b) as u32,
        Op::Xor | Op::Xori => a ^ b,
        Op::Or | Op::Ori => a | b,
        Op::And | Op::Andi => a & b,
        Op::Mul => a.wrapping_mul(b),
        Op::Mulh => ((sa as i64 * sb as i64) >> 32) as u32,
        Op::Mulhsu => ((sa as i64 * b as i64) >> 32) as u32,
        Op::Mulhu => ((a as u64 * b as u64) >> 32) as u32,
        Op::Div => {
            if b == 0 {
                u32::MAX
            } else {
                sa.wrapping_div(sb) as u32
            }
        }
        Op::Divu => a.checked_div(b).unwrap_or(u32::MAX),
        Op::Rem => {
            if b == 0 {
                a
            } else {
                sa.wrapping_rem(sb) as u32
            }
        }
        Op::Remu => a.checked_rem(b).unwrap_or(a),
        other => unreachable!("{other:?} is not an ALU op"),
    }
}

fn branch_taken(op: Op, a: u32, b: u32) -> bool {
    match op {
        Op::Beq => a == b,
        Op::Bne => a != b,
        Op::Blt => (a as i32) < (b as i32),
        Op::Bge => (a as i32) >= (b as i32),
        Op::Bltu => a < b,
        _ => a >= b,
    }
}

/// A program bound to a layout plus its mutable state.
#[derive(Debug, Clone)]
pub struct Emulator {
    layout: MemLayout,
    code: Vec<u32>,
    pub state: MachineState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("program of {words} words exceeds code region of {capacity} words")]
    TooLarge { words: usize, capacity: usize },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

impl Emulator {
    pub fn new(program: &[u32], layout: MemLayout, state: MachineState) -> Result<Self, LoadError> {
        layout.validate()?;
        if program.len() > layout.code_words() {
            return Err(LoadError::TooLarge {
                words: program.len(),
                capacity: layout.code_words(),
            });
        }
        debug_assert_eq!(state.mem.len(), layout.data_size as usize);
        Ok(Emulator {
            layout,
            code: program.to_vec(),
            state,
        })
    }

    pub fn layout(&self) -> &MemLayout {
        &self.layout
    }

    pub fn program(&self) -> &[u32] {
        &self.code
    }

    /// Swaps in a new program without touching architectural state.
    pub fn set_program(&mut self, program: Vec<u32>) -> Result<(), LoadError> {
        if program.len() > self.layout.code_words() {
            return Err(LoadError::TooLarge {
                words: program.len(),
                capacity: self.layout.code_words(),
            });
        }
        self.code = program;
        Ok(())
    }

    /// Program word at `pc`, if `pc` is aligned and inside the loaded program.
    #[inline]
    pub fn fetch(&self, pc: u32) -> Option<u32> {
        let off = pc.wrapping_sub(self.layout.code_base);
        if pc < self.layout.code_base || !off.is_multiple_of(4) {
            return None;
        }
        self.code.get((off / 4) as usize).copied()
    }

    pub fn step(&mut self) -> ExecEvent {
        let pc = self.state.pc;
        if self.state.halted {
            return ExecEvent::bare(EventKind::Halted, pc, None);
        }
        let Some(word) = self.fetch(pc) else {
            self.state.halted = true;
            return ExecEvent::bare(EventKind::Halted, pc, None);
        };
        let Ok(inst) = decode_word(word) else {
            return ExecEvent::bare(EventKind::IllegalInstruction, pc, None);
        };
        let regs = &self.state.regs;
        let rs1 = inst.rs1().map_or(0, |r| regs[r.index()]);
        let rs2 = inst.rs2().map_or(0, |r| regs[r.index()]);
        let imm = inst.imm().unwrap_or(0);
        let mut ev = ExecEvent::bare(EventKind::Retired, pc, Some(inst));
        let mut next = pc.wrapping_add(4);
        let mut rd_val = None;
        let op = inst.op();

        match inst.is_memory_access() {
            MemAccess::Load { width, signed } => {
                let addr = rs1.wrapping_add(imm as u32);
                if let Some(kind) = self.check_access(addr, width) {
                    ev.kind = kind;
                    ev.effective_addr = Some(addr);
                    return ev;
                }
                ev.effective_addr = Some(addr);
                let off = (addr - self.layout.data_base) as usize;
                rd_val = Some(load(&self.state.mem, off, width, signed));
            }
            MemAccess::Store { width } => {
                let addr = rs1.wrapping_add(imm as u32);
                if let Some(kind) = self.check_access(addr, width) {
                    ev.kind = kind;
                    ev.effective_addr = Some(addr);
                    return ev;
                }
                ev.effective_addr = Some(addr);
                let off = (addr - self.layout.data_base) as usize;
                let value = if width == 4 { rs2 } else { rs2 & ((1 << (8 * width)) - 1) };
                store(&mut self.state.mem, off, width, value);
                ev.mem_write = Some(MemWrite { addr, width, value });
            }
            MemAccess::None => match op {
                Op::Lui => rd_val = Some(imm as u32),
                Op::Auipc => rd_val = Some(pc.wrapping_add(imm as u32)),
                Op::Jal => {
                    rd_val = Some(pc.wrapping_add(4));
                    next = pc.wrapping_add(imm as u32);
                }
                Op::Jalr => {
                    rd_val = Some(pc.wrapping_add(4));
                    next = rs1.wrapping_add(imm as u32) & !1;
                }
                Op::Beq | Op::Bne | Op::Blt | Op::Bge | Op::Bltu | Op::Bgeu => {
                    if branch_taken(op, rs1, rs2) {
                        next = pc.wrapping_add(imm as u32);
                    }
                }
                _ => {
                    let b = match inst {
                        Instruction::R { .. } => rs2,
                        Instruction::IShift { shamt, .. } => shamt as u32,
                        _ => imm as u32,
                    };
                    rd_val = Some(alu(op, rs1, b));
                }
            },
        }

        if let (Some(v), Some(rd)) = (rd_val, inst.writes_reg()) {
            self.state.regs[rd.index()] = v;
            ev.reg_write = Some((rd, v));
        }
        self.state.pc = next;
        self.state.retired += 1;
        if next == pc || self.fetch(next).is_none() {
            self.state.halted = true;
        }
        ev
    }

    #[inline]
    fn check_access(&self, addr: u32, width: u32) -> Option<EventKind> {
        if !addr.is_multiple_of(width) {
            Some(EventKind::MemMisaligned)
        } else if !self.layout.data_contains(addr, width) {
            Some(EventKind::MemOutOfBounds)
        } else {
            None
        }
    }

    /// Steps until halt, fault or `max_steps` retirements, recording events.
    pub fn run(&mut self, max_steps: u64) -> Vec<ExecEvent> {
        let mut events = Vec::new();
        self.run_with(max_steps, |e| events.push(*e));
        events
    }

    /// Like [`run`](Self::run) but hands each event to `f`. Returns the last event
    /// (`None` if `max_steps` was zero).
    pub fn run_with(&mut self, max_steps: u64, mut f: impl FnMut(&ExecEvent)) -> Option<ExecEvent> {
        let mut last = None;
        let mut steps = 0;
        loop {
            if steps == max_steps && !self.state.halted {
                return last;
            }
            let ev = self.step();
            f(&ev);
            last = Some(ev);
            if ev.kind != EventKind::Retired {
                return last;
            }
            steps += 1;
        }
    }
}

/// Runs `program` from a state seeded by `seed`.
pub fn run(program: &[u32], layout: MemLayout, max_steps: u64, seed: u64) -> Result<Vec<ExecEvent>, LoadError> {
    let state = MachineState::seeded(&layout, seed);
    Ok(Emulator::new(program, layout, state)?.run(max_steps))
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"LYRS";
pub const SNAPSHOT_VERSION: u16 = 1;
const PAGE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    Version(u16),
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated snapshot")]
    Truncated,
    #[error("snapshot layout is invalid: {0}")]
    Layout(#[from] LayoutError),
}

/// Serialized [`Emulator`]. Layout, all little-endian:
///
/// ```text
/// "LYRS" | version u16 | body_len u32 | body | checksum u64 (hash_bytes of body)
/// body = pc u32 | retired u64 | halted u8 | regs 32*u32
///      | code_base u32 | code_size u32 | data_base u32 | data_size u32
///      | n_code u32 | code words
///      | n_pages u32 | (page_offset u32 | 4096 bytes)*   nonzero data pages
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotBlob(pub Vec<u8>);

impl Emulator {
    pub fn snapshot(&self) -> SnapshotBlob {
        let s = &self.state;
        let mut body = Vec::with_capacity(256 + self.code.len() * 4);
        body.extend_from_slice(&s.pc.to_le_bytes());
        body.extend_from_slice(&s.retired.to_le_bytes());
        body.push(s.halted as u8);
        for r in s.regs {
            body.extend_from_slice(&r.to_le_bytes());
        }
        let l = &self.layout;
        for v in [l.code_base, l.code_size, l.data_base, l.data_size] {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend_from_slice(&(self.code.len() as u32).to_le_bytes());
        for w in &self.code {
            body.extend_from_slice(&w.to_le_bytes());
        }
        let pages: Vec<(usize, &[u8])> = s
            .mem
            .chunks(PAGE)
            .enumerate()
            .filter(|(_, p)| p.iter().any(|&b| b != 0))
            .collect();
        body.extend_from_slice(&(pages.len() as u32).to_le_bytes());
        for (i, p) in pages {
            body.extend_from_slice(&((i * PAGE) as u32).to_le_bytes());
            body.extend_from_slice(p);
            body.resize(body.len() + PAGE - p.len(), 0);
        }

        let mut out = Vec::with_capacity(body.len() + 18);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&hash_bytes(&body).to_le_bytes());
        SnapshotBlob(out)
    }

    pub fn restore(blob: &SnapshotBlob) -> Result<Emulator, SnapshotError> {
        let b = &blob.0;
        if b.len() < 10 {
            return Err(SnapshotError::Truncated);
        }
        if &b[..4] != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::Version(version));
        }
        let len = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
        if b.len() != 10 + len + 8 {
            return Err(SnapshotError::Truncated);
        }
        let body = &b[10..10 + len];
        let sum = u64::from_le_bytes(b[10 + len..].try_into().unwrap());
        if hash_bytes(body) != sum {
            return Err(SnapshotError::Checksum);
        }

        let mut r = Reader { buf: body, pos: 0 };
        let pc = r.u32()?;
        let retired = r.u64()?;
        let halted = r.bytes(1)?[0] != 0;
        let mut regs = [0u32; 32];
        for reg in regs.iter_mut() {
            *reg = r.u32()?;
        }
        let layout = MemLayout {
            code_base: r.u32()?,
            code_size: r.u32()?,
            data_base: r.u32()?,
            data_size: r.u32()?,
        };
        layout.validate()?;
        let n_code = r.u32()? as usize;
        let mut code = Vec::with_capacity(n_code);
        for _ in 0..n_code {
            code.push(r.u32()?);
        }
        let mut mem = vec![0u8; layout.data_size as usize];
        let n_pages = r.u32()?;
        for _ in 0..n_pages {
            let off = r.u32()? as usize;
            let page = r.bytes(PAGE)?;
            let end = (off + PAGE).min(mem.len());
            if off >= mem.len() {
                return Err(SnapshotError::Truncated);
            }
            mem[off..end].copy_from_slice(&page[..end - off]);
        }
        if r.pos != body.len() {
            return Err(SnapshotError::Truncated);
        }
        Ok(Emulator {
            layout,
            code,
            state: MachineState {
                pc,
                regs,
                mem,
                retired,
                halted,
            },
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or(SnapshotError::Truncated)?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Program files
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ProgramFileError {
    #[error("binary program length {0} is not a multiple of 4")]
    Length(usize),
    #[error("line {line}: {text:?} is not a 32-bit hex word")]
    BadHex { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn program_from_bin(bytes: &[u8]) -> Result<Vec<u32>, ProgramFileError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(ProgramFileError::Length(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn program_to_bin(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// One word per line, optional `0x` prefix; blank lines and `#` comments skipped.
pub fn program_from_hex(text: impl BufRead) -> Result<Vec<u32>, ProgramFileError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line?;
        let t = line.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
        let w = u32::from_str_radix(digits, 16).map_err(|_| ProgramFileError::BadHex {
            line: i + 1,
            text: t.to_string(),
        })?;
        out.push(w);
    }
    Ok(out)
}

pub fn program_to_hex(words: &[u32]) -> String {
    words.iter().map(|w| format!("{w:08x}\n")).collect()
}
