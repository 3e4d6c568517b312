//! Property tests for the codec, repair, sanitizer, pipeline and campaign
//! invariants.

mod common;

use proptest::prelude::*;

use common::{random_program, rewrite_preserves_fields};
use rvfuzz::campaign::{dcv, CurvePoint, DcvValue};
use rvfuzz::dataset::{emit_dataset, load_dataset, DatasetRecord};
use rvfuzz::diff::co_execute;
use rvfuzz::dut::{CoverageMap, DutConfig, GROUPS};
use rvfuzz::emulator::{Emulator, EventKind, MachineState, MemLayout};
use rvfuzz::generators::CoverageVector;
use rvfuzz::legality::{repair, repair_stream, RepairAction};
use rvfuzz::sanitizer::{sanitize, SanitizeConfig};
use rvfuzz::token::{detokenize, detokenize_stream, tokenize, tokenize_program};
use rvfuzz::{decode_word, encode_word, Instruction};

fn legal_inst() -> impl Strategy<Value = Instruction> {
    prop::collection::vec(any::<u8>(), 1..8).prop_map(|b| repair(&b).result.unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn word_roundtrip(inst in legal_inst()) {
        prop_assert_eq!(decode_word(encode_word(&inst)), Ok(inst));
    }

    #[test]
    fn token_roundtrip(inst in legal_inst()) {
        let t = tokenize(&inst);
        prop_assert!(t.len() == 5 || t.len() == 6);
        prop_assert_eq!(detokenize(t.as_slice()), Ok(inst));
    }

    #[test]
    fn stream_is_prefix_code(prog in prop::collection::vec(legal_inst(), 0..40)) {
        prop_assert_eq!(detokenize_stream(&tokenize_program(&prog)), Ok(prog));
    }

    #[test]
    fn repair_is_total_and_legal(bytes in prop::collection::vec(any::<u8>(), 1..12)) {
        let r = repair(&bytes);
        prop_assert_ne!(r.action, RepairAction::Discarded);
        let inst = r.result.unwrap();
        prop_assert!(inst.validate().is_ok());
        prop_assert_eq!(r.fields_changed.is_empty(), r.action == RepairAction::Passed);
    }

    #[test]
    fn repair_is_idempotent_and_deterministic(bytes in prop::collection::vec(any::<u8>(), 1..12)) {
        let r = repair(&bytes);
        prop_assert_eq!(&repair(&bytes), &r);
        let again = repair(tokenize(&r.result.unwrap()).as_slice());
        prop_assert_eq!(again.action, RepairAction::Passed);
        prop_assert_eq!(again.result, r.result);
    }

    #[test]
    fn repair_preserves_legal_input(inst in legal_inst()) {
        let r = repair(tokenize(&inst).as_slice());
        prop_assert_eq!(r.action, RepairAction::Passed);
        prop_assert_eq!(r.result, Some(inst));
    }

    #[test]
    fn repair_stream_outputs_only_legal(stream in prop::collection::vec(any::<u8>(), 0..200)) {
        let (insts, reports) = repair_stream(&stream);
        prop_assert!(insts.iter().all(|i| i.validate().is_ok()));
        prop_assert_eq!(insts.len(), reports.len());
    }

    #[test]
    fn coverage_merge_is_a_union(a in prop::collection::vec((0..GROUPS, 0u32..1 << 14), 0..200),
                                 b in prop::collection::vec((0..GROUPS, 0u32..1 << 14), 0..200)) {
        let fill = |v: &[(usize, u32)]| {
            let mut m = CoverageMap::new(14).unwrap();
            for &(g, i) in v { m.set(g, i); }
            m
        };
        let (ma, mb) = (fill(&a), fill(&b));
        let ab = CoverageMap::merge(&[ma.clone(), mb.clone()]).unwrap();
        prop_assert_eq!(&ab, &CoverageMap::merge(&[mb.clone(), ma.clone()]).unwrap());
        prop_assert_eq!(&CoverageMap::merge(&[ab.clone(), ma.clone()]).unwrap(), &ab);
        prop_assert!(a.iter().chain(&b).all(|&(g, i)| ab.get(g, i)));
        prop_assert!(ab.vector::<f64>().is_valid());
    }

    #[test]
    fn dcv_of_monotone_curve(steps in prop::collection::vec((1u64..500, 0u64..50), 2..60), window in 1u64..2000) {
        let mut curve = vec![CurvePoint { instructions: 0, coverage: 0, seconds: 0.0 }];
        for (di, dc) in steps {
            let last = *curve.last().unwrap();
            curve.push(CurvePoint { instructions: last.instructions + di, coverage: last.coverage + dc, seconds: 0.0 });
        }
        for p in dcv::<f64>(&curve, window).unwrap() {
            prop_assert!(p.delta_inst >= window);
            match p.value {
                DcvValue::Finite(v) => prop_assert!(v > 0.0 && (v - p.delta_inst as f64 / p.delta_cov as f64).abs() < 1e-9),
                DcvValue::Infinite => prop_assert_eq!(p.delta_cov, 0),
            }
        }
    }

    #[test]
    fn dataset_roundtrip(recs in prop::collection::vec((prop::array::uniform22(0u32..=1000), legal_inst()), 0..30)) {
        let recs: Vec<DatasetRecord> = recs.into_iter().map(|(c, inst)| DatasetRecord {
            cov: CoverageVector::from_f32(c.map(|v| v as f32 / 1000.0)),
            tokens: tokenize(&inst).0,
        }).collect();
        let mut buf = Vec::new();
        emit_dataset(&mut buf, &recs).unwrap();
        prop_assert_eq!(load_dataset(&buf[..]).unwrap(), recs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sanitized_programs_never_fault(seed in any::<u64>()) {
        let layout = MemLayout::default();
        let raw = random_program(seed, 256);
        let s = sanitize(&raw, &layout, seed, &SanitizeConfig::default()).unwrap();
        prop_assert!(s.log.entries.iter().all(rewrite_preserves_fields));
        let mut emu = Emulator::new(&s.program, layout, MachineState::seeded(&layout, seed)).unwrap();
        let events = emu.run(SanitizeConfig::default().max_steps);
        prop_assert!(events.iter().all(|e| matches!(e.kind, EventKind::Retired | EventKind::Halted)));
        // sanitizing again changes nothing
        let again = sanitize(&s.program, &layout, seed, &SanitizeConfig::default()).unwrap();
        prop_assert_eq!(again.program, s.program);
    }

    #[test]
    fn pipeline_matches_reference(seed in any::<u64>(), sanitized in any::<bool>()) {
        let layout = MemLayout::default();
        let raw = random_program(seed, 128);
        let prog = if sanitized {
            sanitize(&raw, &layout, seed, &SanitizeConfig::default()).unwrap().program
        } else {
            raw
        };
        let mut cov = CoverageMap::new(14).unwrap();
        let init = MachineState::seeded(&layout, seed);
        let r = co_execute(&prog, layout, &init, &DutConfig::default(), &mut cov, 2048, false);
        prop_assert!(r.is_ok(), "seed {}: {:?}", seed, r.err());
    }
}
