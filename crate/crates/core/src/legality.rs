//! Legality filter: turns arbitrary token sequences into legal instructions.
//!
//! Fields restricted to a small legal set (opcode, funct3, funct7) are mapped
//! by indexing the ascending legal list with `token mod len`. Register and
//! immediate tokens are masked to their field width and used directly. When
//! the reassembled instruction is still illegal (only possible through the
//! shift-amount token) the closest legal encoding by Hamming distance over
//! the 32-bit word is chosen, ties going to the lower word.

use crate::isa::{self, encode_word, opcode, Format, Instruction, LegalityTables};
use crate::token::{self, assemble_fields, detokenize, layout, Field, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepairAction {
    Passed,
    RepairedFieldwise,
    RepairedNearest,
    Discarded,
}

/// Outcome of [`repair`]. `result` is present iff the action is not
/// `Discarded`; `fields_changed` is empty iff the action is `Passed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairReport {
    pub action: RepairAction,
    pub original: TokenSeq,
    pub result: Option<Instruction>,
    pub fields_changed: Vec<&'static str>,
}

fn map_into(value: u8, legal: &[u8]) -> u8 {
    if legal.contains(&value) {
        value
    } else {
        legal[value as usize % legal.len()]
    }
}

/// Opcode after repair.
pub fn repaired_opcode(token: u8) -> u8 {
    map_into(token, LegalityTables::rv32im().opcodes())
}

/// Format and length the repair stage will assign to a sequence starting
/// with these tokens.
pub fn repaired_format(opcode_token: u8, funct3_token: Option<u8>) -> Format {
    let tables = LegalityTables::rv32im();
    let op = repaired_opcode(opcode_token);
    let funct3 = if op == opcode::OP_IMM {
        map_into(funct3_token.unwrap_or(0), tables.funct3_set(op))
    } else {
        0
    };
    tables.format_of(op, funct3).expect("repaired opcode is legal")
}

pub fn repaired_len(opcode_token: u8, funct3_token: Option<u8>) -> usize {
    layout(repaired_format(opcode_token, funct3_token)).len()
}

pub fn repair(tokens: &[u8]) -> RepairReport {
    let original = TokenSeq(tokens.to_vec());
    if tokens.is_empty() {
        return RepairReport {
            action: RepairAction::Discarded,
            original,
            result: None,
            fields_changed: Vec::new(),
        };
    }
    if let Ok(inst) = detokenize(tokens) {
        return RepairReport {
            action: RepairAction::Passed,
            original,
            result: Some(inst),
            fields_changed: Vec::new(),
        };
    }

    let tables = LegalityTables::rv32im();
    let mut changed: Vec<&'static str> = Vec::new();
    let mut note = |name: &'static str| {
        if !changed.contains(&name) {
            changed.push(name);
        }
    };

    let format = repaired_format(tokens[0], tokens.get(1).copied());
    let fields = layout(format);
    let mut seq: Vec<u8> = tokens.to_vec();
    if seq.len() != fields.len() {
        seq.resize(fields.len(), 0);
        note("length");
    }

    let op = repaired_opcode(seq[0]);
    for (i, &(field, width)) in fields.iter().enumerate() {
        let raw = seq[i];
        let fixed = match field {
            Field::Opcode => op,
            Field::Funct3 => map_into(raw, tables.funct3_set(op)),
            Field::Funct7 => {
                // R-format puts funct7 before funct3 in the token order.
                let f3 = map_into(seq[2], tables.funct3_set(op));
                map_into(raw, tables.funct7_set(op, f3))
            }
            _ => raw & ((1u16 << width) - 1) as u8,
        };
        if fixed != raw {
            note(field.name());
        }
        seq[i] = fixed;
    }

    let candidate = assemble_fields(format, &seq);
    if candidate.validate().is_ok() {
        return RepairReport {
            action: RepairAction::RepairedFieldwise,
            original,
            result: Some(candidate),
            fields_changed: changed,
        };
    }

    let word = encode_word(&candidate);
    let nearest = nearest_legal(word);
    let inst = isa::decode_word(nearest).expect("nearest_legal returns a legal word");
    let diff = word ^ nearest;
    if diff & (0x7 << 12) != 0 {
        note("funct3");
    }
    if diff & (0x7f << 25) != 0 {
        note(if format == Format::IShift { "shamt" } else { "funct7" });
    }
    RepairReport {
        action: RepairAction::RepairedNearest,
        original,
        result: Some(inst),
        fields_changed: changed,
    }
}

/// Closest legal word sharing `word`'s (legal) opcode.
///
/// Only funct3 and bits [31:25] are constrained by the legality tables, so
/// the search enumerates their legal combinations and keeps every other bit.
pub fn nearest_legal(word: u32) -> u32 {
    let tables = LegalityTables::rv32im();
    let op = (word & 0x7f) as u8;
    debug_assert!(tables.is_legal_opcode(op));
    let f3_set = tables.funct3_set(op);
    let f3_choices: Vec<Option<u8>> = if f3_set.is_empty() {
        vec![None]
    } else {
        f3_set.iter().copied().map(Some).collect()
    };
    let mut best: Option<(u32, u32)> = None;
    for f3 in f3_choices {
        let with_f3 = match f3 {
            Some(f) => (word & !(0x7 << 12)) | (f as u32) << 12,
            None => word,
        };
        let f7_set = tables.funct7_set(op, f3.unwrap_or(0));
        let f7_choices: Vec<Option<u8>> = if f7_set.is_empty() {
            vec![None]
        } else {
            f7_set.iter().copied().map(Some).collect()
        };
        for f7 in f7_choices {
            let cand = match f7 {
                Some(f) => (with_f3 & !(0x7f << 25)) | (f as u32) << 25,
                None => with_f3,
            };
            if isa::decode_word(cand).is_err() {
                continue;
            }
            let dist = (cand ^ word).count_ones();
            if best.is_none_or(|(d, w)| dist < d || (dist == d && cand < w)) {
                best = Some((dist, cand));
            }
        }
    }
    best.expect("every legal opcode has a legal variant").1
}

/// Splits a flat token stream into instructions and repairs each piece.
///
/// Boundaries come from the repaired opcode (and funct3 for OP-IMM); a final
/// short piece is zero-padded by [`repair`].
pub fn repair_stream(stream: &[u8]) -> (Vec<Instruction>, Vec<RepairReport>) {
    let mut insts = Vec::new();
    let mut reports = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let len = repaired_len(stream[pos], stream.get(pos + 1).copied());
        let end = (pos + len).min(stream.len());
        let report = repair(&stream[pos..end]);
        if let Some(inst) = report.result {
            insts.push(inst);
        }
        reports.push(report);
        pos += len;
    }
    (insts, reports)
}

/// Whether `tokens` already decode to a legal instruction.
pub fn is_legal_seq(tokens: &[u8]) -> bool {
    token::detokenize(tokens).is_ok()
}
