//! Coverage curves and convergence difficulty (instructions per unit of new
//! coverage).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;

/// One sample of a coverage curve, taken after each program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Generated stimulus instructions so far (the budget axis).
    pub instructions: u64,
    /// Set bits across all groups of the merged coverage map.
    pub coverage: u64,
    pub seconds: f64,
}

#[derive(Debug, Error)]
pub enum CurveError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("curve needs at least two points")]
    Degenerate,
    #[error("curve is not monotone at point {0}")]
    NotMonotone(usize),
    #[error("window must be positive")]
    ZeroWindow,
}

pub fn write_curve<W: Write>(w: W, curve: &[CurvePoint]) -> Result<(), CurveError> {
    let mut out = csv::Writer::from_writer(w);
    for p in curve {
        out.serialize(p)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_curve<R: Read>(r: R) -> Result<Vec<CurvePoint>, CurveError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

pub fn is_monotone(curve: &[CurvePoint]) -> Result<(), CurveError> {
    for (i, w) in curve.windows(2).enumerate() {
        if w[1].instructions < w[0].instructions || w[1].coverage < w[0].coverage {
            return Err(CurveError::NotMonotone(i + 1));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcvValue<F> {
    Finite(F),
    /// The segment added no coverage.
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcvPoint<F> {
    /// Coverage at the end of the segment.
    pub coverage: u64,
    pub delta_inst: u64,
    pub delta_cov: u64,
    pub value: DcvValue<F>,
}

impl<F: Real> DcvPoint<F> {
    /// The DCV, or for a flat segment its lower bound `delta_inst` (what the
    /// segment would score had it found one bit).
    pub fn bounded(&self) -> F {
        match self.value {
            DcvValue::Finite(v) => v,
            DcvValue::Infinite => F::from_count(self.delta_inst),
        }
    }
}

/// Splits the curve into consecutive segments spanning at least `window`
/// instructions and reports ΔInst/ΔCov for each.
pub fn dcv<F: Real>(curve: &[CurvePoint], window: u64) -> Result<Vec<DcvPoint<F>>, CurveError> {
    if window == 0 {
        return Err(CurveError::ZeroWindow);
    }
    if curve.len() < 2 {
        return Err(CurveError::Degenerate);
    }
    is_monotone(curve)?;
    let mut out = Vec::new();
    let mut start = curve[0];
    for p in &curve[1..] {
        let di = p.instructions - start.instructions;
        if di < window {
            continue;
        }
        let dc = p.coverage - start.coverage;
        out.push(DcvPoint {
            coverage: p.coverage,
            delta_inst: di,
            delta_cov: dc,
            value: if dc == 0 {
                DcvValue::Infinite
            } else {
                DcvValue::Finite(F::from_count(di) / F::from_count(dc))
            },
        });
        start = *p;
    }
    Ok(out)
}

/// Whether DCV does not fall as coverage rises: the mean bounded DCV of the
/// later half of the segments is at least that of the earlier half.
pub fn dcv_trend_non_decreasing<F: Real>(points: &[DcvPoint<F>]) -> bool {
    if points.len() < 2 {
        return true;
    }
    let mid = points.len() / 2;
    let mean = |s: &[DcvPoint<F>]| s.iter().map(|p| p.bounded()).sum::<F>() / F::from_count(s.len() as u64);
    mean(&points[mid..]) >= mean(&points[..mid])
}

/// Smallest instruction count at which `curve` reaches `target` coverage.
pub fn time_to_coverage(curve: &[CurvePoint], target: u64) -> Option<u64> {
    curve.iter().find(|p| p.coverage >= target).map(|p| p.instructions)
}

/// Coverage reached by `budget` instructions (the last point within it).
pub fn coverage_at(curve: &[CurvePoint], budget: u64) -> u64 {
    curve
        .iter()
        .take_while(|p| p.instructions <= budget)
        .last()
        .map_or(0, |p| p.coverage)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(i: u64, c: u64) -> CurvePoint {
        CurvePoint {
            instructions: i,
            coverage: c,
            seconds: 0.0,
        }
    }

    #[test]
    fn dcv_arithmetic() {
        let d: Vec<DcvPoint<f64>> = dcv(&[pt(0, 0), pt(1000, 10)], 1000).unwrap();
        assert_eq!(d[0].value, DcvValue::Finite(100.0));
    }

    #[test]
    fn flat_segment_is_infinite() {
        let d: Vec<DcvPoint<f32>> = dcv(&[pt(0, 5), pt(500, 5)], 100).unwrap();
        assert_eq!(d[0].value, DcvValue::Infinite);
        assert_eq!(d[0].bounded(), 500.0);
    }

    #[test]
    fn windows_accumulate() {
        let curve = [pt(0, 0), pt(256, 40), pt(512, 60), pt(768, 70), pt(1024, 75)];
        let d: Vec<DcvPoint<f64>> = dcv(&curve, 500).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].delta_inst, d[0].delta_cov), (512, 60));
        assert_eq!((d[1].delta_inst, d[1].delta_cov), (512, 15));
        assert!(dcv_trend_non_decreasing(&d));
    }

    #[test]
    fn errors() {
        assert!(matches!(dcv::<f64>(&[pt(0, 0)], 1), Err(CurveError::Degenerate)));
        assert!(matches!(dcv::<f64>(&[pt(0, 0), pt(1, 1)], 0), Err(CurveError::ZeroWindow)));
        assert!(matches!(
            dcv::<f64>(&[pt(0, 5), pt(1, 4)], 1),
            Err(CurveError::NotMonotone(1))
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let curve = vec![pt(256, 10), pt(512, 17)];
        let mut buf = Vec::new();
        write_curve(&mut buf, &curve).unwrap();
        assert!(buf.starts_with(b"instructions,coverage,seconds\n"));
        assert_eq!(read_curve(&buf[..]).unwrap(), curve);
    }

    #[test]
    fn curve_queries() {
        let curve = [pt(256, 10), pt(512, 17), pt(768, 20)];
        assert_eq!(time_to_coverage(&curve, 17), Some(512));
        assert_eq!(time_to_coverage(&curve, 99), None);
        assert_eq!(coverage_at(&curve, 600), 17);
        assert_eq!(coverage_at(&curve, 10), 0);
    }
}
