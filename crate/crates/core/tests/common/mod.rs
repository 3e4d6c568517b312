//! Helpers shared by the integration tests: campaign-shaped random programs
//! and a third-party RV32IM simulator used as an independent oracle.
#![allow(dead_code)]

use rrs_lib::instruction_executor::{InstructionException, InstructionExecutor};
use rrs_lib::instruction_string_outputter::InstructionStringOutputter;
use rrs_lib::memories::{MemorySpace, VecMemory};
use rrs_lib::HartState;

use rvfuzz::campaign::build_program;
use rvfuzz::emulator::{MachineState, MemLayout};
use rvfuzz::generators::{gen_random, CoverageVector, GeneratorRequest};
use rvfuzz::isa::{opcode, Instruction};
use rvfuzz::sanitizer::{sanitize, SanitizeConfig};
use rvfuzz::{encode_word, Format};

/// Unsanitized program exactly as a random-generator campaign builds it.
pub fn random_program(seed: u64, len: u32) -> Vec<u32> {
    let req = GeneratorRequest::new(CoverageVector::default(), len, seed);
    build_program(&gen_random(&req), len as usize).0.iter().map(encode_word).collect()
}

/// Sanitized against the initial state seeded by `seed`.
pub fn sanitized_program(seed: u64, len: u32, layout: &MemLayout) -> Vec<u32> {
    let raw = random_program(seed, len);
    match sanitize(&raw, layout, seed, &SanitizeConfig::default()) {
        Ok(s) => s.program,
        Err(e) => panic!("sanitize failed for seed {seed}: {e}"),
    }
}

pub struct RrsFinal {
    pub regs: [u32; 32],
    pub pc: u32,
    pub data: Vec<u32>,
}

/// Runs `steps` instructions on the third-party simulator from `initial`.
pub fn rrs_run(program: &[u32], layout: &MemLayout, initial: &MachineState, steps: u64) -> Result<RrsFinal, InstructionException> {
    let mut code = program.to_vec();
    code.resize(layout.code_words(), 0);
    let data: Vec<u32> = initial
        .mem
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut space = MemorySpace::new();
    space
        .add_memory(layout.code_base, layout.code_size, Box::new(VecMemory::new(code)))
        .unwrap();
    let di = space
        .add_memory(layout.data_base, layout.data_size, Box::new(VecMemory::new(data)))
        .unwrap();
    let mut hart = HartState::new();
    hart.registers = initial.regs;
    hart.pc = initial.pc;
    {
        let mut exec = InstructionExecutor {
            hart_state: &mut hart,
            mem: &mut space,
        };
        for _ in 0..steps {
            exec.step()?;
        }
    }
    let data = space.get_memory_ref::<VecMemory>(di).unwrap().mem.clone();
    let mut regs = hart.registers;
    regs[0] = 0;
    Ok(RrsFinal { regs, pc: hart.pc, data })
}

pub fn words_of(mem: &[u8]) -> Vec<u32> {
    mem.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Third-party disassembly of `word` at `pc`.
pub fn rrs_disasm(word: u32, pc: u32) -> Option<String> {
    rrs_lib::process_instruction(&mut InstructionStringOutputter { insn_pc: pc }, word)
}

/// Our decoded fields rendered in the third-party disassembler's syntax.
pub fn render_like_rrs(inst: &Instruction, pc: u32) -> String {
    let m = inst.op().mnemonic();
    let r = |x: Option<rvfuzz::Reg>| x.unwrap().index();
    let imm = inst.imm().unwrap_or(0);
    match inst.format() {
        Format::R => format!("{m} x{}, x{}, x{}", r(inst.rd()), r(inst.rs1()), r(inst.rs2())),
        Format::IShift => {
            let Instruction::IShift { shamt, .. } = *inst else { unreachable!() };
            format!("{m} x{}, x{}, {shamt}", r(inst.rd()), r(inst.rs1()))
        }
        Format::I if inst.opcode() == opcode::LOAD => format!("{m} x{}, {imm}(x{})", r(inst.rd()), r(inst.rs1())),
        Format::I if inst.opcode() == opcode::JALR => format!("{m} x{}, 0x{:03x}(x{})", r(inst.rd()), imm, r(inst.rs1())),
        Format::I => format!("{m} x{}, x{}, {imm}", r(inst.rd()), r(inst.rs1())),
        Format::S => format!("{m} x{}, {imm}(x{})", r(inst.rs2()), r(inst.rs1())),
        Format::B => format!("{m} x{}, x{}, 0x{:08x}", r(inst.rs1()), r(inst.rs2()), pc.wrapping_add(imm as u32)),
        Format::U if inst.opcode() == opcode::AUIPC => format!("{m} x{}, 0x{:08x}", r(inst.rd()), pc.wrapping_add(imm as u32)),
        Format::U => format!("{m} x{}, 0x{:08x}", r(inst.rd()), imm as u32),
        Format::J => format!("{m} x{}, 0x{:08x}", r(inst.rd()), pc.wrapping_add(imm as u32)),
    }
}

/// Whether an access rewrite kept opcode, funct3, rd (loads) and rs2
/// (stores), and, for an insertion, whether the pair feeds the access's base.
pub fn rewrite_preserves_fields(e: &rvfuzz::sanitizer::RewriteEntry) -> bool {
    use rvfuzz::decode_word;
    use rvfuzz::sanitizer::RewriteKind;
    let orig = decode_word(e.original[0]).unwrap();
    let access = match e.kind {
        RewriteKind::AlignOffset => decode_word(e.replacement[0]).unwrap(),
        RewriteKind::InsertAuipcAddi => decode_word(e.replacement[2]).unwrap(),
        RewriteKind::RelinkImpossible => return true,
        RewriteKind::DropAccess => return false,
    };
    let same = orig.opcode() == access.opcode()
        && orig.funct3() == access.funct3()
        && orig.rd() == access.rd()
        && orig.rs2() == access.rs2();
    if e.kind == RewriteKind::AlignOffset {
        return same && orig.rs1() == access.rs1();
    }
    let auipc = decode_word(e.replacement[0]).unwrap();
    let addi = decode_word(e.replacement[1]).unwrap();
    same && auipc.opcode() == opcode::AUIPC
        && auipc.rd() == access.rs1()
        && addi.rd() == access.rs1()
        && addi.rs1() == access.rs1()
        && access.imm() == orig.imm()
}
