//! RV32IM instruction model, bit-exact binary encoding and legality tables.
//!
//! Only the unprivileged integer and multiply/divide instructions are legal.
//! FENCE and SYSTEM encodings decode as [`IsaError::IllegalEncoding`] so the
//! repair stage maps them onto something executable.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("illegal encoding {0:#010x}")]
    IllegalEncoding(u32),
}

/// Major opcodes (bits [6:0]).
pub mod opcode {
    pub const LOAD: u8 = 0b000_0011;
    pub const MISC_MEM: u8 = 0b000_1111;
    pub const OP_IMM: u8 = 0b001_0011;
    pub const AUIPC: u8 = 0b001_0111;
    pub const STORE: u8 = 0b010_0011;
    pub const OP: u8 = 0b011_0011;
    pub const LUI: u8 = 0b011_0111;
    pub const BRANCH: u8 = 0b110_0011;
    pub const JALR: u8 = 0b110_0111;
    pub const JAL: u8 = 0b110_1111;
    pub const SYSTEM: u8 = 0b111_0011;
}

pub const NOP_WORD: u32 = 0x0000_0013;

/// Integer register index, always in `0..32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Reg(u8);

impl Reg {
    pub const ZERO: Reg = Reg(0);

    /// Panics if `index >= 32`.
    pub const fn new(index: u8) -> Reg {
        assert!(index < 32, "register index out of range");
        Reg(index)
    }

    /// Keeps the low five bits.
    pub const fn masked(raw: u32) -> Reg {
        Reg((raw & 0x1f) as u8)
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub const fn bits(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    R,
    I,
    IShift,
    S,
    B,
    U,
    J,
}

/// A decoded instruction. The immediate is always the sign-extended
/// architectural value; segmentation into tokens lives in [`crate::token`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    R {
        opcode: u8,
        funct3: u8,
        funct7: u8,
        rd: Reg,
        rs1: Reg,
        rs2: Reg,
    },
    I {
        opcode: u8,
        funct3: u8,
        rd: Reg,
        rs1: Reg,
        imm: i32,
    },
    IShift {
        opcode: u8,
        funct3: u8,
        rd: Reg,
        rs1: Reg,
        shamt: u8,
        arith: bool,
    },
    S {
        opcode: u8,
        funct3: u8,
        rs1: Reg,
        rs2: Reg,
        imm: i32,
    },
    B {
        opcode: u8,
        funct3: u8,
        rs1: Reg,
        rs2: Reg,
        imm: i32,
    },
    U {
        opcode: u8,
        rd: Reg,
        imm: i32,
    },
    J {
        opcode: u8,
        rd: Reg,
        imm: i32,
    },
}

/// Memory-access classification with the access width in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemAccess {
    None,
    Load { width: u32, signed: bool },
    Store { width: u32 },
}

impl MemAccess {
    pub fn width(self) -> Option<u32> {
        match self {
            MemAccess::None => None,
            MemAccess::Load { width, .. } | MemAccess::Store { width } => Some(width),
        }
    }
}

/// Semantic operation of a legal instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Lui,
    Auipc,
    Jal,
    Jalr,
    Beq,
    Bne,
    Blt,
    Bge,
    Bltu,
    Bgeu,
    Lb,
    Lh,
    Lw,
    Lbu,
    Lhu,
    Sb,
    Sh,
    Sw,
    Addi,
    Slti,
    Sltiu,
    Xori,
    Ori,
    Andi,
    Slli,
    Srli,
    Srai,
    Add,
    Sub,
    Sll,
    Slt,
    Sltu,
    Xor,
    Srl,
    Sra,
    Or,
    And,
    Mul,
    Mulh,
    Mulhsu,
    Mulhu,
    Div,
    Divu,
    Rem,
    Remu,
}

impl Op {
    pub fn mnemonic(self) -> &'static str {
        use Op::*;
        match self {
            Lui => "lui",
            Auipc => "auipc",
            Jal => "jal",
            Jalr => "jalr",
            Beq => "beq",
            Bne => "bne",
            Blt => "blt",
            Bge => "bge",
            Bltu => "bltu",
            Bgeu => "bgeu",
            Lb => "lb",
            Lh => "lh",
            Lw => "lw",
            Lbu => "lbu",
            Lhu => "lhu",
            Sb => "sb",
            Sh => "sh",
            Sw => "sw",
            Addi => "addi",
            Slti => "slti",
            Sltiu => "sltiu",
            Xori => "xori",
            Ori => "ori",
            Andi => "andi",
            Slli => "slli",
            Srli => "srli",
            Srai => "srai",
            Add => "add",
            Sub => "sub",
            Sll => "sll",
            Slt => "slt",
            Sltu => "sltu",
            Xor => "xor",
            Srl => "srl",
            Sra => "sra",
            Or => "or",
            And => "and",
            Mul => "mul",
            Mulh => "mulh",
            Mulhsu => "mulhsu",
            Mulhu => "mulhu",
            Div => "div",
            Divu => "divu",
            Rem => "rem",
            Remu => "remu",
        }
    }

    pub fn is_muldiv(self) -> bool {
        use Op::*;
        matches!(self, Mul | Mulh | Mulhsu | Mulhu | Div | Divu | Rem | Remu)
    }

    pub fn is_div(self) -> bool {
        use Op::*;
        matches!(self, Div | Divu | Rem | Remu)
    }
}

/// Legal opcode / funct3 / funct7 combinations of the supported subset.
///
/// Every list is ascending so that modulo-indexed repair is deterministic.
#[derive(Debug)]
pub struct LegalityTables {
    opcodes: &'static [u8],
}

static OPCODES: [u8; 9] = [
    opcode::LOAD,
    opcode::OP_IMM,
    opcode::AUIPC,
    opcode::STORE,
    opcode::OP,
    opcode::LUI,
    opcode::BRANCH,
    opcode::JALR,
    opcode::JAL,
];

static TABLES: LegalityTables = LegalityTables { opcodes: &OPCODES };

const F3_ALL: [u8; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
const F3_LOAD: [u8; 5] = [0, 1, 2, 4, 5];
const F3_STORE: [u8; 3] = [0, 1, 2];
const F3_BRANCH: [u8; 6] = [0, 1, 4, 5, 6, 7];
const F3_JALR: [u8; 1] = [0];
const F7_BASE_MULDIV: [u8; 2] = [0x00, 0x01];
const F7_BASE_MULDIV_ALT: [u8; 3] = [0x00, 0x01, 0x20];
const F7_ZERO: [u8; 1] = [0x00];
const F7_SHIFT_RIGHT: [u8; 2] = [0x00, 0x20];

impl LegalityTables {
    pub fn rv32im() -> &'static LegalityTables {
        &TABLES
    }

    pub fn opcodes(&self) -> &[u8] {
        self.opcodes
    }

    pub fn is_legal_opcode(&self, op: u8) -> bool {
        self.opcodes.binary_search(&op).is_ok()
    }

    /// Legal funct3 values for `op`; empty for formats without funct3 or
    /// for unknown opcodes.
    pub fn funct3_set(&self, op: u8) -> &'static [u8] {
        match op {
            opcode::LOAD => &F3_LOAD,
            opcode::OP_IMM | opcode::OP => &F3_ALL,
            opcode::STORE => &F3_STORE,
            opcode::BRANCH => &F3_BRANCH,
            opcode::JALR => &F3_JALR,
            _ => &[],
        }
    }

    /// Legal values of bits [31:25] for `(op, funct3)` when those bits are
    /// a function field (R-format and shift-immediates); empty otherwise.
    pub fn funct7_set(&self, op: u8, funct3: u8) -> &'static [u8] {
        match (op, funct3) {
            (opcode::OP, 0 | 5) => &F7_BASE_MULDIV_ALT,
            (opcode::OP, _) => &F7_BASE_MULDIV,
            (opcode::OP_IMM, 1) => &F7_ZERO,
            (opcode::OP_IMM, 5) => &F7_SHIFT_RIGHT,
            _ => &[],
        }
    }

    /// Format implied by an opcode; `funct3` is only consulted for OP-IMM.
    pub fn format_of(&self, op: u8, funct3: u8) -> Option<Format> {
        Some(match op {
            opcode::OP => Format::R,
            opcode::OP_IMM if funct3 == 1 || funct3 == 5 => Format::IShift,
            opcode::OP_IMM | opcode::LOAD | opcode::JALR => Format::I,
            opcode::STORE => Format::S,
            opcode::BRANCH => Format::B,
            opcode::LUI | opcode::AUIPC => Format::U,
            opcode::JAL => Format::J,
            _ => return None,
        })
    }

    pub fn is_legal(&self, op: u8, funct3: u8, funct7: u8) -> bool {
        let Some(format) = self.format_of(op, funct3) else {
            return false;
        };
        match format {
            Format::U | Format::J => true,
            Format::I | Format::S | Format::B => self.funct3_set(op).contains(&funct3),
            Format::R | Format::IShift => {
                self.funct3_set(op).contains(&funct3) && self.funct7_set(op, funct3).contains(&funct7)
            }
        }
    }
}

#[inline]
fn bits(word: u32, hi: u32, lo: u32) -> u32 {
    (word >> lo) & ((1u32 << (hi - lo + 1)) - 1)
}

#[inline]
fn sext(value: u32, width: u32) -> i32 {
    let shift = 32 - width;
    ((value << shift) as i32) >> shift
}

/// Decodes a 32-bit word. Fails exactly when the opcode/funct combination is
/// not in [`LegalityTables::rv32im`].
pub fn decode_word(word: u32) -> Result<Instruction, IsaError> {
    let tables = LegalityTables::rv32im();
    let op = (word & 0x7f) as u8;
    let funct3 = bits(word, 14, 12) as u8;
    let funct7 = bits(word, 31, 25) as u8;
    if !tables.is_legal(op, funct3, funct7) {
        return Err(IsaError::IllegalEncoding(word));
    }
    let format = tables.format_of(op, funct3).expect("legal opcode has a format");
    Ok(decode_as(word, format))
}

/// Splits `word` into the fields of `format` without any legality check.
pub fn decode_as(word: u32, format: Format) -> Instruction {
    let op = (word & 0x7f) as u8;
    let funct3 = bits(word, 14, 12) as u8;
    let funct7 = bits(word, 31, 25) as u8;
    let rd = Reg::masked(word >> 7);
    let rs1 = Reg::masked(word >> 15);
    let rs2 = Reg::masked(word >> 20);
    match format {
        Format::R => Instruction::R {
            opcode: op,
            funct3,
            funct7,
            rd,
            rs1,
            rs2,
        },
        Format::I => Instruction::I {
            opcode: op,
            funct3,
            rd,
            rs1,
            imm: sext(bits(word, 31, 20), 12),
        },
        Format::IShift => Instruction::IShift {
            opcode: op,
            funct3,
            rd,
            rs1,
            shamt: bits(word, 25, 20) as u8,
            arith: bits(word, 30, 30) == 1,
        },
        Format::S => Instruction::S {
            opcode: op,
            funct3,
            rs1,
            rs2,
            imm: sext(bits(word, 31, 25) << 5 | bits(word, 11, 7), 12),
        },
        Format::B => {
            let raw = bits(word, 31, 31) << 12
                | bits(word, 7, 7) << 11
                | bits(word, 30, 25) << 5
                | bits(word, 11, 8) << 1;
            Instruction::B {
                opcode: op,
                funct3,
                rs1,
                rs2,
                imm: sext(raw, 13),
            }
        }
        Format::U => Instruction::U {
            opcode: op,
            rd,
            imm: (word & 0xffff_f000) as i32,
        },
        Format::J => {
            let raw = bits(word, 31, 31) << 20
                | bits(word, 19, 12) << 12
                | bits(word, 20, 20) << 11
                | bits(word, 30, 21) << 1;
            Instruction::J {
                opcode: op,
                rd,
                imm: sext(raw, 21),
            }
        }
    }
}

/// Bit-exact encoding. The instruction must satisfy [`Instruction::validate`].
pub fn encode_word(inst: &Instruction) -> u32 {
    match *inst {
        Instruction::R {
            opcode,
            funct3,
            funct7,
            rd,
            rs1,
            rs2,
        } => {
            (funct7 as u32) << 25
                | rs2.bits() << 20
                | rs1.bits() << 15
                | (funct3 as u32) << 12
                | rd.bits() << 7
                | opcode as u32
        }
        Instruction::I {
            opcode,
            funct3,
            rd,
            rs1,
            imm,
        } => {
            ((imm as u32) & 0xfff) << 20
                | rs1.bits() << 15
                | (funct3 as u32) << 12
                | rd.bits() << 7
                | opcode as u32
        }
        Instruction::IShift {
            opcode,
            funct3,
            rd,
            rs1,
            shamt,
            arith,
        } => {
            (arith as u32) << 30
                | ((shamt as u32) & 0x3f) << 20
                | rs1.bits() << 15
                | (funct3 as u32) << 12
                | rd.bits() << 7
                | opcode as u32
        }
        Instruction::S {
            opcode,
            funct3,
            rs1,
            rs2,
            imm,
        } => {
            let imm = imm as u32;
            bits(imm, 11, 5) << 25
                | rs2.bits() << 20
                | rs1.bits() << 15
                | (funct3 as u32) << 12
                | bits(imm, 4, 0) << 7
                | opcode as u32
        }
        Instruction::B {
            opcode,
            funct3,
            rs1,
            rs2,
            imm,
        } => {
            let imm = imm as u32;
            bits(imm, 12, 12) << 31
                | bits(imm, 10, 5) << 25
                | rs2.bits() << 20
                | rs1.bits() << 15
                | (funct3 as u32) << 12
                | bits(imm, 4, 1) << 8
                | bits(imm, 11, 11) << 7
                | opcode as u32
        }
        Instruction::U { opcode, rd, imm } => (imm as u32 & 0xffff_f000) | rd.bits() << 7 | opcode as u32,
        Instruction::J { opcode, rd, imm } => {
            let imm = imm as u32;
            bits(imm, 20, 20) << 31
                | bits(imm, 10, 1) << 21
                | bits(imm, 11, 11) << 20
                | bits(imm, 19, 12) << 12
                | rd.bits() << 7
                | opcode as u32
        }
    }
}

impl Instruction {
    pub fn format(&self) -> Format {
        match self {
            Instruction::R { .. } => Format::R,
            Instruction::I { .. } => Format::I,
            Instruction::IShift { .. } => Format::IShift,
            Instruction::S { .. } => Format::S,
            Instruction::B { .. } => Format::B,
            Instruction::U { .. } => Format::U,
            Instruction::J { .. } => Format::J,
        }
    }

    pub fn opcode(&self) -> u8 {
        match *self {
            Instruction::R { opcode, .. }
            | Instruction::I { opcode, .. }
            | Instruction::IShift { opcode, .. }
            | Instruction::S { opcode, .. }
            | Instruction::B { opcode, .. }
            | Instruction::U { opcode, .. }
            | Instruction::J { opcode, .. } => opcode,
        }
    }

    pub fn funct3(&self) -> Option<u8> {
        match *self {
            Instruction::R { funct3, .. }
            | Instruction::I { funct3, .. }
            | Instruction::IShift { funct3, .. }
            | Instruction::S { funct3, .. }
            | Instruction::B { funct3, .. } => Some(funct3),
            Instruction::U { .. } | Instruction::J { .. } => None,
        }
    }

    pub fn rd(&self) -> Option<Reg> {
        match *self {
            Instruction::R { rd, .. }
            | Instruction::I { rd, .. }
            | Instruction::IShift { rd, .. }
            | Instruction::U { rd, .. }
            | Instruction::J { rd, .. } => Some(rd),
            Instruction::S { .. } | Instruction::B { .. } => None,
        }
    }

    pub fn rs1(&self) -> Option<Reg> {
        match *self {
            Instruction::R { rs1, .. }
            | Instruction::I { rs1, .. }
            | Instruction::IShift { rs1, .. }
            | Instruction::S { rs1, .. }
            | Instruction::B { rs1, .. } => Some(rs1),
            Instruction::U { .. } | Instruction::J { .. } => None,
        }
    }

    pub fn rs2(&self) -> Option<Reg> {
        match *self {
            Instruction::R { rs2, .. } | Instruction::S { rs2, .. } | Instruction::B { rs2, .. } => {
                Some(rs2)
            }
            _ => None,
        }
    }

    pub fn imm(&self) -> Option<i32> {
        match *self {
            Instruction::I { imm, .. }
            | Instruction::S { imm, .. }
            | Instruction::B { imm, .. }
            | Instruction::U { imm, .. }
            | Instruction::J { imm, .. } => Some(imm),
            _ => None,
        }
    }

    /// Checks the per-format field invariants and legality.
    pub fn validate(&self) -> Result<(), IsaError> {
        let tables = LegalityTables::rv32im();
        let in_range = |v: i32, width: u32| {
            let lim = 1i64 << (width - 1);
            (v as i64) >= -lim && (v as i64) < lim
        };
        let ok = match *self {
            Instruction::R {
                opcode,
                funct3,
                funct7,
                ..
            } => tables.format_of(opcode, funct3) == Some(Format::R) && tables.is_legal(opcode, funct3, funct7),
            Instruction::I {
                opcode, funct3, imm, ..
            } => {
                tables.format_of(opcode, funct3) == Some(Format::I)
                    && tables.is_legal(opcode, funct3, 0)
                    && in_range(imm, 12)
            }
            Instruction::IShift {
                opcode,
                funct3,
                shamt,
                arith,
                ..
            } => {
                tables.format_of(opcode, funct3) == Some(Format::IShift)
                    && shamt < 32
                    && tables.is_legal(opcode, funct3, if arith { 0x20 } else { 0 })
            }
            Instruction::S {
                opcode, funct3, imm, ..
            } => tables.format_of(opcode, funct3) == Some(Format::S) && tables.is_legal(opcode, funct3, 0) && in_range(imm, 12),
            Instruction::B {
                opcode, funct3, imm, ..
            } => {
                tables.format_of(opcode, funct3) == Some(Format::B)
                    && tables.is_legal(opcode, funct3, 0)
                    && in_range(imm, 13)
                    && imm & 1 == 0
            }
            Instruction::U { opcode, imm, .. } => tables.format_of(opcode, 0) == Some(Format::U) && imm & 0xfff == 0,
            Instruction::J { opcode, imm, .. } => {
                tables.format_of(opcode, 0) == Some(Format::J) && in_range(imm, 21) && imm & 1 == 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(IsaError::IllegalEncoding(encode_word(self)))
        }
    }

    /// Semantic operation. The instruction must be legal.
    pub fn op(&self) -> Op {
        use Op::*;
        match *self {
            Instruction::U { opcode, .. } => {
                if opcode == opcode::LUI {
                    Lui
                } else {
                    Auipc
                }
            }
            Instruction::J { .. } => Jal,
            Instruction::B { funct3, .. } => match funct3 {
                0 => Beq,
                1 => Bne,
                4 => Blt,
                5 => Bge,
                6 => Bltu,
                _ => Bgeu,
            },
            Instruction::S { funct3, .. } => match funct3 {
                0 => Sb,
                1 => Sh,
                _ => Sw,
            },
            Instruction::I { opcode, funct3, .. } => match opcode {
                opcode::JALR => Jalr,
                opcode::LOAD => match funct3 {
                    0 => Lb,
                    1 => Lh,
                    2 => Lw,
                    4 => Lbu,
                    _ => Lhu,
                },
                _ => match funct3 {
                    0 => Addi,
                    2 => Slti,
                    3 => Sltiu,
                    4 => Xori,
                    6 => Ori,
                    _ => Andi,
                },
            },
            Instruction::IShift { funct3, arith, .. } => match (funct3, arith) {
                (1, _) => Slli,
                (_, false) => Srli,
                (_, true) => Srai,
            },
            Instruction::R { funct3, funct7, .. } => match (funct7, funct3) {
                (0x01, 0) => Mul,
                (0x01, 1) => Mulh,
                (0x01, 2) => Mulhsu,
                (0x01, 3) => Mulhu,
                (0x01, 4) => Div,
                (0x01, 5) => Divu,
                (0x01, 6) => Rem,
                (0x01, _) => Remu,
                (0x20, 0) => Sub,
                (0x20, _) => Sra,
                (_, 0) => Add,
                (_, 1) => Sll,
                (_, 2) => Slt,
                (_, 3) => Sltu,
                (_, 4) => Xor,
                (_, 5) => Srl,
                (_, 6) => Or,
                _ => And,
            },
        }
    }

    pub fn is_memory_access(&self) -> MemAccess {
        match self.op() {
            Op::Lb => MemAccess::Load { width: 1, signed: true },
            Op::Lbu => MemAccess::Load { width: 1, signed: false },
            Op::Lh => MemAccess::Load { width: 2, signed: true },
            Op::Lhu => MemAccess::Load { width: 2, signed: false },
            Op::Lw => MemAccess::Load { width: 4, signed: true },
            Op::Sb => MemAccess::Store { width: 1 },
            Op::Sh => MemAccess::Store { width: 2 },
            Op::Sw => MemAccess::Store { width: 4 },
            _ => MemAccess::None,
        }
    }

    /// Static control-transfer offset for JAL and conditional branches.
    pub fn pc_relative_target(&self) -> Option<i32> {
        match *self {
            Instruction::B { imm, .. } | Instruction::J { imm, .. } => Some(imm),
            _ => None,
        }
    }

    /// Destination register, if the instruction writes one other than x0.
    pub fn writes_reg(&self) -> Option<Reg> {
        self.rd().filter(|r| *r != Reg::ZERO)
    }

    /// Returns a copy with a different immediate (I, S, B, U, J only).
    pub fn with_imm(&self, new_imm: i32) -> Instruction {
        let mut out = *self;
        match &mut out {
            Instruction::I { imm, .. }
            | Instruction::S { imm, .. }
            | Instruction::B { imm, .. }
            | Instruction::U { imm, .. }
            | Instruction::J { imm, .. } => *imm = new_imm,
            _ => {}
        }
        out
    }

    pub fn with_rs1(&self, new_rs1: Reg) -> Instruction {
        let mut out = *self;
        match &mut out {
            Instruction::R { rs1, .. }
            | Instruction::I { rs1, .. }
            | Instruction::IShift { rs1, .. }
            | Instruction::S { rs1, .. }
            | Instruction::B { rs1, .. } => *rs1 = new_rs1,
            _ => {}
        }
        out
    }

    pub fn nop() -> Instruction {
        Instruction::I {
            opcode: opcode::OP_IMM,
            funct3: 0,
            rd: Reg::ZERO,
            rs1: Reg::ZERO,
            imm: 0,
        }
    }

    pub fn addi(rd: Reg, rs1: Reg, imm: i32) -> Instruction {
        Instruction::I {
            opcode: opcode::OP_IMM,
            funct3: 0,
            rd,
            rs1,
            imm,
        }
    }

    pub fn auipc(rd: Reg, imm: i32) -> Instruction {
        Instruction::U {
            opcode: opcode::AUIPC,
            rd,
            imm,
        }
    }

    pub fn lui(rd: Reg, imm: i32) -> Instruction {
        Instruction::U {
            opcode: opcode::LUI,
            rd,
            imm,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.op().mnemonic();
        match *self {
            Instruction::R { rd, rs1, rs2, .. } => write!(f, "{m} {rd}, {rs1}, {rs2}"),
            Instruction::IShift { rd, rs1, shamt, .. } => write!(f, "{m} {rd}, {rs1}, {shamt}"),
            Instruction::I { rd, rs1, imm, opcode, .. } => {
                if opcode == opcode::LOAD || opcode == opcode::JALR {
                    write!(f, "{m} {rd}, {imm}({rs1})")
                } else {
                    write!(f, "{m} {rd}, {rs1}, {imm}")
                }
            }
            Instruction::S { rs1, rs2, imm, .. } => write!(f, "{m} {rs2}, {imm}({rs1})"),
            Instruction::B { rs1, rs2, imm, .. } => write!(f, "{m} {rs1}, {rs2}, {imm:+}"),
            Instruction::U { rd, imm, .. } => write!(f, "{m} {rd}, {:#x}", (imm as u32) >> 12),
            Instruction::J { rd, imm, .. } => write!(f, "{m} {rd}, {imm:+}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nop_decodes_to_addi_zero() {
        assert_eq!(decode_word(NOP_WORD), Ok(Instruction::nop()));
        assert_eq!(encode_word(&Instruction::nop()), NOP_WORD);
    }

    #[test]
    fn add_x1_x2_x3() {
        let inst = decode_word(0x003100b3).unwrap();
        assert_eq!(
            inst,
            Instruction::R {
                opcode: opcode::OP,
                funct3: 0,
                funct7: 0,
                rd: Reg::new(1),
                rs1: Reg::new(2),
                rs2: Reg::new(3),
            }
        );
        assert_eq!(inst.to_string(), "add x1, x2, x3");
    }

    #[test]
    fn all_ones_is_illegal() {
        assert_eq!(decode_word(0xffff_ffff), Err(IsaError::IllegalEncoding(0xffff_ffff)));
        assert!(!LegalityTables::rv32im().is_legal_opcode(0x7f));
    }

    #[test]
    fn fence_and_system_are_illegal() {
        assert!(decode_word(0x0000_000f).is_err());
        assert!(decode_word(0x0000_0073).is_err());
        assert!(decode_word(0x0010_0073).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_word(&Instruction::lui(Reg::new(5), 0xabcd_e000u32 as i32)), 0xabcd_e2b7);
        let beq = Instruction::B {
            opcode: opcode::BRANCH,
            funct3: 0,
            rs1: Reg::new(1),
            rs2: Reg::new(2),
            imm: 8,
        };
        assert_eq!(encode_word(&beq), 0x0020_8463);
    }

    #[test]
    fn memory_access_classes() {
        assert_eq!(decode_word(0x003100b3).unwrap().is_memory_access(), MemAccess::None);
        // lh x1, 0(x2)
        let lh = decode_word(0x00011083).unwrap();
        assert_eq!(lh.is_memory_access(), MemAccess::Load { width: 2, signed: true });
        // sw x2, 4(x3)
        let sw = decode_word(0x0021_a223).unwrap();
        assert_eq!(sw.is_memory_access(), MemAccess::Store { width: 4 });
    }

    #[test]
    fn shift_immediate_rules() {
        // slli with bit 25 set is shamt >= 32: illegal on RV32
        assert!(decode_word(0x0201_1093).is_err());
        // srai x1, x2, 3
        let srai = decode_word(0x4031_5093).unwrap();
        assert_eq!(srai.op(), Op::Srai);
        // slli with funct7 0x20 is not a thing
        assert!(decode_word(0x4031_1093).is_err());
    }

    #[test]
    fn opcode_table_is_ascending() {
        let ops = LegalityTables::rv32im().opcodes();
        assert!(ops.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ops.len(), 9);
    }
}
