//! Byte-token encoding of instructions.
//!
//! Each instruction becomes 5 or 6 tokens, one per field, every token at most
//! 8 bits wide. The opcode token (plus the funct3 token for OP-IMM) fixes the
//! format and therefore the length, so a flat stream of tokens can be split
//! back into instructions without delimiters.
//!
//! | format  | tokens                                          |
//! |---------|-------------------------------------------------|
//! | R       | opcode(7) funct7(7) funct3(3) rd(5) rs1(5) rs2(5) |
//! | I       | opcode(7) funct3(3) rd(5) rs1(5) lo(8) mi(4)    |
//! | I-shift | opcode(7) funct3(3) rd(5) rs1(5) shamt(7)       |
//! | S, B    | opcode(7) funct3(3) rs1(5) rs2(5) lo(8) mi(4)   |
//! | U, J    | opcode(7) rd(5) lo(8) mi(8) hi(4)               |
//!
//! Immediate segments are little-endian. B and J segments carry only the
//! encoded bits (bit 0 is implicitly zero). The shift token packs the
//! arithmetic flag in bit 6 above `shamt[5:0]`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::isa::{self, opcode, Format, Instruction, IsaError, LegalityTables, Reg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("empty token sequence")]
    Empty,
    #[error("unknown opcode token {0:#04x}")]
    UnknownOpcode(u8),
    #[error("OP-IMM length depends on a funct3 token that is absent")]
    MissingFunct3,
    #[error("expected {expected} tokens, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("token {value} at position {position} exceeds the {width}-bit {field:?} field")]
    FieldOverflow {
        position: usize,
        field: Field,
        width: u32,
        value: u8,
    },
    #[error(transparent)]
    Illegal(#[from] IsaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Opcode,
    Funct7,
    Funct3,
    Rd,
    Rs1,
    Rs2,
    ImmLo,
    ImmMi,
    ImmHi,
    Shamt,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Opcode => "opcode",
            Field::Funct7 => "funct7",
            Field::Funct3 => "funct3",
            Field::Rd => "rd",
            Field::Rs1 => "rs1",
            Field::Rs2 => "rs2",
            Field::ImmLo => "imm_lo",
            Field::ImmMi => "imm_mi",
            Field::ImmHi => "imm_hi",
            Field::Shamt => "shamt",
        }
    }
}

/// Ordered `(field, bit width)` pairs of one format.
pub type FieldLayout = &'static [(Field, u32)];

const LAYOUT_R: [(Field, u32); 6] = [
    (Field::Opcode, 7),
    (Field::Funct7, 7),
    (Field::Funct3, 3),
    (Field::Rd, 5),
    (Field::Rs1, 5),
    (Field::Rs2, 5),
];
const LAYOUT_I: [(Field, u32); 6] = [
    (Field::Opcode, 7),
    (Field::Funct3, 3),
    (Field::Rd, 5),
    (Field::Rs1, 5),
    (Field::ImmLo, 8),
    (Field::ImmMi, 4),
];
const LAYOUT_SHIFT: [(Field, u32); 5] = [
    (Field::Opcode, 7),
    (Field::Funct3, 3),
    (Field::Rd, 5),
    (Field::Rs1, 5),
    (Field::Shamt, 7),
];
const LAYOUT_SB: [(Field, u32); 6] = [
    (Field::Opcode, 7),
    (Field::Funct3, 3),
    (Field::Rs1, 5),
    (Field::Rs2, 5),
    (Field::ImmLo, 8),
    (Field::ImmMi, 4),
];
const LAYOUT_UJ: [(Field, u32); 5] = [
    (Field::Opcode, 7),
    (Field::Rd, 5),
    (Field::ImmLo, 8),
    (Field::ImmMi, 8),
    (Field::ImmHi, 4),
];

pub fn layout(format: Format) -> FieldLayout {
    match format {
        Format::R => &LAYOUT_R,
        Format::I => &LAYOUT_I,
        Format::IShift => &LAYOUT_SHIFT,
        Format::S | Format::B => &LAYOUT_SB,
        Format::U | Format::J => &LAYOUT_UJ,
    }
}

/// A token sequence; complete instructions have 5 or 6 tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(pub Vec<u8>);

impl TokenSeq {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u8>> for TokenSeq {
    fn from(v: Vec<u8>) -> Self {
        TokenSeq(v)
    }
}

impl AsRef<[u8]> for TokenSeq {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// Splits a canonical immediate into `(lo, mi, hi)` segment values.
pub fn imm_segments(format: Format, imm: i32) -> [u8; 3] {
    let v = imm as u32;
    match format {
        Format::I | Format::S => [(v & 0xff) as u8, ((v >> 8) & 0xf) as u8, 0],
        Format::B => [((v >> 1) & 0xff) as u8, ((v >> 9) & 0xf) as u8, 0],
        Format::U => {
            let f = v >> 12;
            [(f & 0xff) as u8, ((f >> 8) & 0xff) as u8, ((f >> 16) & 0xf) as u8]
        }
        Format::J => {
            let f = (v >> 1) & 0xf_ffff;
            [(f & 0xff) as u8, ((f >> 8) & 0xff) as u8, ((f >> 16) & 0xf) as u8]
        }
        Format::R | Format::IShift => [0, 0, 0],
    }
}

/// Rebuilds the sign-extended canonical immediate from raw segment bits.
/// Segment values wider than their fields are masked.
pub fn imm_from_segments(format: Format, lo: u8, mi: u8, hi: u8) -> i32 {
    let (lo, mi, hi) = (lo as u32, mi as u32, hi as u32);
    let sext = |v: u32, w: u32| ((v << (32 - w)) as i32) >> (32 - w);
    match format {
        Format::I | Format::S => sext(lo | (mi & 0xf) << 8, 12),
        Format::B => sext((lo | (mi & 0xf) << 8) << 1, 13),
        Format::U => ((lo | mi << 8 | (hi & 0xf) << 16) << 12) as i32,
        Format::J => sext((lo | mi << 8 | (hi & 0xf) << 16) << 1, 21),
        Format::R | Format::IShift => 0,
    }
}

pub fn pack_shamt(shamt: u8, arith: bool) -> u8 {
    (arith as u8) << 6 | (shamt & 0x3f)
}

pub fn tokenize(inst: &Instruction) -> TokenSeq {
    let format = inst.format();
    let r = |reg: Reg| reg.index() as u8;
    let tokens = match *inst {
        Instruction::R {
            opcode,
            funct3,
            funct7,
            rd,
            rs1,
            rs2,
        } => vec![opcode, funct7, funct3, r(rd), r(rs1), r(rs2)],
        Instruction::I {
            opcode,
            funct3,
            rd,
            rs1,
            imm,
        } => {
            let [lo, mi, _] = imm_segments(format, imm);
            vec![opcode, funct3, r(rd), r(rs1), lo, mi]
        }
        Instruction::IShift {
            opcode,
            funct3,
            rd,
            rs1,
            shamt,
            arith,
        } => vec![opcode, funct3, r(rd), r(rs1), pack_shamt(shamt, arith)],
        Instruction::S {
            opcode,
            funct3,
            rs1,
            rs2,
            imm,
        }
        | Instruction::B {
            opcode,
            funct3,
            rs1,
            rs2,
            imm,
        } => {
            let [lo, mi, _] = imm_segments(format, imm);
            vec![opcode, funct3, r(rs1), r(rs2), lo, mi]
        }
        Instruction::U { opcode, rd, imm } | Instruction::J { opcode, rd, imm } => {
            let [lo, mi, hi] = imm_segments(format, imm);
            vec![opcode, r(rd), lo, mi, hi]
        }
    };
    TokenSeq(tokens)
}

/// Token count of the instruction whose leading tokens are given.
pub fn seq_len_for(opcode_token: u8, funct3_token: Option<u8>) -> Result<usize, CodecError> {
    let tables = LegalityTables::rv32im();
    if !tables.is_legal_opcode(opcode_token) {
        return Err(CodecError::UnknownOpcode(opcode_token));
    }
    let funct3 = if opcode_token == opcode::OP_IMM {
        funct3_token.ok_or(CodecError::MissingFunct3)? & 0x7
    } else {
        0
    };
    let format = tables.format_of(opcode_token, funct3).expect("legal opcode");
    Ok(layout(format).len())
}

/// Format implied by the first two tokens, without any repair.
pub fn infer_format(tokens: &[u8]) -> Result<Format, CodecError> {
    let &op = tokens.first().ok_or(CodecError::Empty)?;
    let tables = LegalityTables::rv32im();
    if !tables.is_legal_opcode(op) {
        return Err(CodecError::UnknownOpcode(op));
    }
    let funct3 = if op == opcode::OP_IMM {
        *tokens.get(1).ok_or(CodecError::MissingFunct3)?
    } else {
        0
    };
    if funct3 > 7 {
        return Err(CodecError::FieldOverflow {
            position: 1,
            field: Field::Funct3,
            width: 3,
            value: funct3,
        });
    }
    Ok(tables.format_of(op, funct3).expect("legal opcode"))
}

/// Builds an instruction from tokens whose values already fit their fields.
/// Checks widths and length but not funct legality.
pub(crate) fn assemble_fields(format: Format, t: &[u8]) -> Instruction {
    let reg = |v: u8| Reg::masked(v as u32);
    match format {
        Format::R => Instruction::R {
            opcode: t[0],
            funct7: t[1],
            funct3: t[2],
            rd: reg(t[3]),
            rs1: reg(t[4]),
            rs2: reg(t[5]),
        },
        Format::I => Instruction::I {
            opcode: t[0],
            funct3: t[1],
            rd: reg(t[2]),
            rs1: reg(t[3]),
            imm: imm_from_segments(format, t[4], t[5], 0),
        },
        Format::IShift => Instruction::IShift {
            opcode: t[0],
            funct3: t[1],
            rd: reg(t[2]),
            rs1: reg(t[3]),
            shamt: t[4] & 0x3f,
            arith: t[4] & 0x40 != 0,
        },
        Format::S => Instruction::S {
            opcode: t[0],
            funct3: t[1],
            rs1: reg(t[2]),
            rs2: reg(t[3]),
            imm: imm_from_segments(format, t[4], t[5], 0),
        },
        Format::B => Instruction::B {
            opcode: t[0],
            funct3: t[1],
            rs1: reg(t[2]),
            rs2: reg(t[3]),
            imm: imm_from_segments(format, t[4], t[5], 0),
        },
        Format::U => Instruction::U {
            opcode: t[0],
            rd: reg(t[1]),
            imm: imm_from_segments(format, t[2], t[3], t[4]),
        },
        Format::J => Instruction::J {
            opcode: t[0],
            rd: reg(t[1]),
            imm: imm_from_segments(format, t[2], t[3], t[4]),
        },
    }
}

/// Reverse of [`tokenize`]. Any deviation is reported, never fixed.
pub fn detokenize(tokens: &[u8]) -> Result<Instruction, CodecError> {
    let format = infer_format(tokens)?;
    let fields = layout(format);
    if tokens.len() != fields.len() {
        return Err(CodecError::WrongLength {
            expected: fields.len(),
            got: tokens.len(),
        });
    }
    for (position, (&value, &(field, width))) in tokens.iter().zip(fields).enumerate() {
        if u32::from(value) >= 1 << width {
            return Err(CodecError::FieldOverflow {
                position,
                field,
                width,
                value,
            });
        }
    }
    let inst = assemble_fields(format, tokens);
    inst.validate()?;
    Ok(inst)
}

/// Concatenated tokens of a program.
pub fn tokenize_program(program: &[Instruction]) -> Vec<u8> {
    program.iter().flat_map(|i| tokenize(i).0).collect()
}

/// Splits a flat stream of well-formed tokens at instruction boundaries.
pub fn segment(stream: &[u8]) -> Result<Vec<&[u8]>, CodecError> {
    let mut out = Vec::new();
    let mut rest = stream;
    while !rest.is_empty() {
        let len = seq_len_for(rest[0], rest.get(1).copied())?;
        if rest.len() < len {
            return Err(CodecError::WrongLength {
                expected: len,
                got: rest.len(),
            });
        }
        let (head, tail) = rest.split_at(len);
        out.push(head);
        rest = tail;
    }
    Ok(out)
}

/// Decodes a well-formed flat token stream.
pub fn detokenize_stream(stream: &[u8]) -> Result<Vec<Instruction>, CodecError> {
    segment(stream)?.into_iter().map(detokenize).collect()
}

/// Token stream files are raw bytes, one token per byte.
pub fn write_stream<W: Write>(mut w: W, tokens: &[u8]) -> io::Result<()> {
    w.write_all(tokens)
}

pub fn read_stream<R: Read>(mut r: R) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Token form of an arbitrary word, for mutation-based generation. Field bits
/// are cut according to the opcode's format; unknown opcodes are cut as
/// R-format so the repair stage sees every bit.
pub fn raw_tokens(word: u32) -> TokenSeq {
    let op = (word & 0x7f) as u8;
    let funct3 = ((word >> 12) & 7) as u8;
    let format = LegalityTables::rv32im()
        .format_of(op, funct3)
        .unwrap_or(Format::R);
    tokenize(&isa::decode_as(word, format))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::decode_word;

    #[test]
    fn nop_tokens() {
        assert_eq!(tokenize(&Instruction::nop()).0, vec![0x13, 0, 0, 0, 0, 0]);
        assert_eq!(detokenize(&[0x13, 0, 0, 0, 0, 0]), Ok(Instruction::nop()));
    }

    #[test]
    fn add_tokens() {
        let add = decode_word(0x003100b3).unwrap();
        assert_eq!(tokenize(&add).0, vec![0x33, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn lui_tokens() {
        let lui = Instruction::lui(Reg::new(5), 0xabcd_e000u32 as i32);
        assert_eq!(tokenize(&lui).0, vec![0x37, 5, 0xde, 0xbc, 0xa]);
    }

    #[test]
    fn slli_from_tokens() {
        let inst = detokenize(&[0x13, 0b001, 3, 4, 5]).unwrap();
        // slli x3, x4, 5
        assert_eq!(inst, decode_word(0x0052_1193).unwrap());
    }

    #[test]
    fn unknown_opcode_is_malformed() {
        assert_eq!(detokenize(&[0x7f, 0, 0, 0, 0, 0]), Err(CodecError::UnknownOpcode(0x7f)));
    }

    #[test]
    fn wrong_length_and_overflow() {
        assert!(matches!(detokenize(&[0x13, 0, 0, 0, 0]), Err(CodecError::WrongLength { .. })));
        assert!(matches!(
            detokenize(&[0x13, 0, 40, 0, 0, 0]),
            Err(CodecError::FieldOverflow { position: 2, .. })
        ));
        assert!(matches!(
            detokenize(&[0x13, 0, 0, 0, 0, 16]),
            Err(CodecError::FieldOverflow { position: 5, .. })
        ));
    }

    #[test]
    fn lengths_from_prefix() {
        assert_eq!(seq_len_for(0x33, None), Ok(6));
        assert_eq!(seq_len_for(0x37, None), Ok(5));
        assert_eq!(seq_len_for(0x13, Some(0b101)), Ok(5));
        assert_eq!(seq_len_for(0x13, Some(0b000)), Ok(6));
        assert_eq!(seq_len_for(0x13, None), Err(CodecError::MissingFunct3));
        assert_eq!(seq_len_for(0x7f, None), Err(CodecError::UnknownOpcode(0x7f)));
    }

    #[test]
    fn raw_tokens_of_legal_word_match_tokenize() {
        assert_eq!(raw_tokens(0x003100b3).0, vec![0x33, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn segment_concatenation() {
        let prog = [
            Instruction::nop(),
            decode_word(0x003100b3).unwrap(),
            Instruction::lui(Reg::new(5), 0x1000),
            decode_word(0x0052_1193).unwrap(),
        ];
        let stream = tokenize_program(&prog);
        assert_eq!(detokenize_stream(&stream).unwrap(), prog);
    }
}
