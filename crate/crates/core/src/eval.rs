//! Mean matching accuracy against ground-truth homographies.
//!
//! Points here are `(x, y)` pixels, the order used by homography files and
//! the match CSV.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;

/// A 3×3 projective transform, normalised so `H[2][2] = 1` when that entry
/// is non-zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

const SINGULAR_DET: f64 = 1e-12;
const INFINITY_W: f64 = 1e-12;

impl Homography {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    fn from_matrix(mut m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("homography has non-finite entries".into()));
        }
        if m[(2, 2)] != 0.0 {
            m /= m[(2, 2)];
        }
        let det = m.determinant();
        if det.abs() <= SINGULAR_DET {
            return Err(Error::Singular(det));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]).expect("translation is invertible")
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.m[(row, col)]
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Singular(self.m.determinant()))?;
        Self::from_matrix(inv)
    }

    /// Projects `[x, y]` with perspective division.
    pub fn warp(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let q = self.m * Vector3::new(p[0], p[1], 1.0);
        if q.z.abs() <= INFINITY_W {
            return Err(Error::PointAtInfinity(q.z));
        }
        Ok([q.x / q.z, q.y / q.z])
    }

    /// Parses nine whitespace-separated numbers (conventionally three lines
    /// of three).
    pub fn parse(text: &str) -> Result<Self> {
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("homography entry {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 9 {
            return Err(Error::Parse(format!(
                "homography needs 9 numbers, found {}",
                nums.len()
            )));
        }
        Self::from_matrix(Matrix3::from_row_slice(&nums))
    }
}

pub fn warp(h: &Homography, p: [f64; 2]) -> Result<[f64; 2]> {
    h.warp(p)
}

/// A correspondence in source-image pixels, `[x, y]` per side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub score: f32,
}

/// `‖T_H(a) − b‖₂` for every correspondence.
pub fn endpoint_errors(matches: &[Correspondence], h: &Homography) -> Result<Vec<f64>> {
    matches
        .iter()
        .map(|m| {
            let w = h.warp(m.a)?;
            Ok(((w[0] - m.b[0]).powi(2) + (w[1] - m.b[1]).powi(2)).sqrt())
        })
        .collect()
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if let Some(t) = thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::InvalidArgument(format!("threshold {t} must be positive")));
    }
    Ok(())
}

/// Fraction of errors strictly below each threshold.
pub fn accuracy_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptyMatches);
    }
    check_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64)
        .collect())
}

/// Matching accuracy of `matches` under `h` at every threshold.
pub fn mma(matches: &[Correspondence], h: &Homography, thresholds: &[f64]) -> Result<Vec<f64>> {
    if matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    accuracy_from_errors(&endpoint_errors(matches, h)?, thresholds)
}

/// Parses `a:b` (integers a..=b), `a:b:step`, or a comma-separated list.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("threshold {s:?}: {e}")))
    };
    let out = if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(num).collect::<Result<_>>()?;
        let (lo, hi, step) = match parts[..] {
            [lo, hi] => (lo, hi, 1.0),
            [lo, hi, step] => (lo, hi, step),
            _ => return Err(Error::Parse(format!("bad threshold range {text:?}"))),
        };
        if step.is_nan() || step <= 0.0 || hi < lo {
            return Err(Error::Parse(format!("bad threshold range {text:?}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    check_thresholds(&out)?;
    Ok(out)
}

/// Endpoint errors of one evaluated image pair.
#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub sequence: String,
    pub pair_id: String,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmaRow {
    pub pair_id: String,
    pub threshold: f64,
    pub accuracy: f64,
    pub match_count: usize,
}

/// Per-pair rows for every threshold, then one `mean:<sequence>` row per
/// sequence and a final `mean:all` row, each averaging per-pair accuracy.
pub fn mma_sweep_report(pairs: &[PairEvaluation], thresholds: &[f64]) -> Result<Vec<MmaRow>> {
    check_thresholds(thresholds)?;
    let per_pair: Vec<Result<Vec<f64>>> =
        par::map_slice(pairs, |p| accuracy_from_errors(&p.errors, thresholds));
    let per_pair: Vec<Vec<f64>> = per_pair.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (p, acc) in pairs.iter().zip(&per_pair) {
        for (&t, &a) in thresholds.iter().zip(acc) {
            rows.push(MmaRow {
                pair_id: p.pair_id.clone(),
                threshold: t,
                accuracy: a,
                match_count: p.errors.len(),
            });
        }
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (n, p) in pairs.iter().enumerate() {
        groups.entry(p.sequence.as_str()).or_default().push(n);
    }
    let all: Vec<usize> = (0..pairs.len()).collect();
    let aggregates = groups
        .iter()
        .map(|(seq, members)| (format!("mean:{seq}"), members))
        .chain((!pairs.is_empty()).then(|| ("mean:all".to_string(), &all)));
    for (id, members) in aggregates {
        let count: usize = members.iter().map(|&n| pairs[n].errors.len()).sum();
        for (ti, &t) in thresholds.iter().enumerate() {
            let mean = members.iter().map(|&n| per_pair[n][ti]).sum::<f64>() / members.len() as f64;
            rows.push(MmaRow {
                pair_id: id.clone(),
                threshold: t,
                accuracy: mean,
                match_count: count,
            });
        }
    }
    Ok(rows)
}

pub fn write_mma_csv<W: Write>(rows: &[MmaRow], mut out: W) -> Result<()> {
    writeln!(out, "pair_id,threshold,accuracy,match_count")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{}",
            r.pair_id, r.threshold, r.accuracy, r.match_count
        )?;
    }
    Ok(())
}

/// Reads a `xA,yA,xB,yB,score` match file.
pub fn read_match_csv<R: BufRead>(input: R) -> Result<Vec<Correspondence>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse("empty match file".into()))?;
    if header.trim() != crate::pipeline::MATCH_CSV_HEADER {
        return Err(Error::Parse(format!("unexpected match header {header:?}")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!("line {}: expected 5 fields", n + 2)));
        }
        let v: Vec<f64> = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {f:?}: {e}", n + 2)))
            })
            .collect::<Result<_>>()?;
        out.push(Correspondence {
            a: [v[0], v[1]],
            b: [v[2], v[3]],
            score: v[4] as f32,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_errors(errors: &[f64]) -> Vec<Correspondence> {
        errors
            .iter()
            .map(|&e| Correspondence { a: [10.0, 20.0], b: [10.0 + e, 20.0], score: 1.0 })
            .collect()
    }

    #[test]
    fn identity_and_translation_warps() {
        assert_eq!(warp(&Homography::identity(), [3.5, -2.0]).unwrap(), [3.5, -2.0]);
        assert_eq!(Homography::translation(4.0, -1.5).warp([1.0, 1.0]).unwrap(), [5.0, -0.5]);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..100 {
            let h = Homography::new([
                [rng.gen_range(0.8..1.2), rng.gen_range(-0.2..0.2), rng.gen_range(-50.0..50.0)],
                [rng.gen_range(-0.2..0.2), rng.gen_range(0.8..1.2), rng.gen_range(-50.0..50.0)],
                [rng.gen_range(-1e-4..1e-4), rng.gen_range(-1e-4..1e-4), 1.0],
            ])
            .unwrap();
            let p = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
            let back = h.inverse().unwrap().warp(h.warp(p).unwrap()).unwrap();
            assert!((back[0] - p[0]).abs() < 1e-6 && (back[1] - p[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(h.warp([-1.0, 0.0]), Err(Error::PointAtInfinity(_))));
        assert!(matches!(
            Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]),
            Err(Error::Singular(_))
        ));
        assert!(matches!(mma(&[], &Homography::identity(), &[1.0]), Err(Error::EmptyMatches)));
        assert!(mma(&with_errors(&[1.0]), &Homography::identity(), &[0.0]).is_err());
    }

    #[test]
    fn normalises_h22() {
        let h = Homography::new([[2.0, 0.0, 4.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(h.entry(0, 2), 2.0);
        assert_eq!(h.entry(2, 2), 1.0);
    }

    #[test]
    fn exact_matches_score_one() {
        let ms = with_errors(&[0.0; 5]);
        assert_eq!(mma(&ms, &Homography::identity(), &[1.0, 5.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn threshold_is_strict() {
        let ms = with_errors(&[3.0]);
        let h = Homography::identity();
        assert_eq!(mma(&ms, &h, &[3.0]).unwrap(), vec![0.0]);
        assert_eq!(mma(&ms, &h, &[3.0001]).unwrap(), vec![1.0]);
    }

    #[test]
    fn hand_counted_sweep() {
        let ms = with_errors(&[0.5, 1.5, 2.5, 9.0]);
        let ts: Vec<f64> = (1..=10).map(f64::from).collect();
        let acc = mma(&ms, &Homography::identity(), &ts).unwrap();
        assert_eq!(acc, vec![0.25, 0.5, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 1.0]);
    }

    #[test]
    fn monotone_bounded_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let errors: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..12.0)).collect();
        let ts: Vec<f64> = (1..=10).map(f64::from).collect();
        let acc = accuracy_from_errors(&errors, &ts).unwrap();
        assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
        let mut rev = errors.clone();
        rev.reverse();
        assert_eq!(accuracy_from_errors(&rev, &ts).unwrap(), acc);
        let scaled: Vec<f64> = errors.iter().map(|e| e * 1.7).collect();
        let worse = accuracy_from_errors(&scaled, &ts).unwrap();
        assert!(worse.iter().zip(&acc).all(|(w, a)| w <= a));
    }

    #[test]
    fn threshold_specs() {
        assert_eq!(parse_thresholds("1:3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_thresholds("0.5:1.5:0.5").unwrap(), vec![0.5, 1.0, 1.5]);
        assert_eq!(parse_thresholds("1,2.5").unwrap(), vec![1.0, 2.5]);
        assert!(parse_thresholds("0:3").is_err());
        assert!(parse_thresholds("3:1").is_err());
        assert!(parse_thresholds("x").is_err());
    }

    #[test]
    fn parses_homography_text() {
        let h = Homography::parse("1 0 5\n0 1 -2\n0 0 1\n").unwrap();
        assert_eq!(h.warp([0.0, 0.0]).unwrap(), [5.0, -2.0]);
        assert!(Homography::parse("1 0 0\n0 1 0\n").is_err());
    }

    #[test]
    fn sweep_report_aggregates_by_sequence() {
        let pairs = vec![
            PairEvaluation { sequence: "s1".into(), pair_id: "s1/1-2".into(), errors: vec![0.5, 5.0] },
            PairEvaluation { sequence: "s1".into(), pair_id: "s1/1-3".into(), errors: vec![0.5] },
            PairEvaluation { sequence: "s2".into(), pair_id: "s2/1-2".into(), errors: vec![5.0] },
        ];
        let rows = mma_sweep_report(&pairs, &[1.0, 10.0]).unwrap();
        assert_eq!(rows.len(), 3 * 2 + 3 * 2);
        let find = |id: &str, t: f64| rows.iter().find(|r| r.pair_id == id && r.threshold == t).unwrap();
        assert_eq!(find("s1/1-2", 1.0).accuracy, 0.5);
        assert_eq!(find("mean:s1", 1.0).accuracy, 0.75);
        assert_eq!(find("mean:s1", 1.0).match_count, 3);
        assert_eq!(find("mean:s2", 1.0).accuracy, 0.0);
        assert!((find("mean:all", 1.0).accuracy - 0.5).abs() < 1e-12);
        assert_eq!(find("mean:all", 10.0).accuracy, 1.0);

        let mut buf = Vec::new();
        write_mma_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("pair_id,threshold,accuracy,match_count\ns1/1-2,1,0.500000,2\n"));
    }

    #[test]
    fn reads_match_csv() {
        let text = "xA,yA,xB,yB,score\n1.5,2.0,3.0,4.25,0.9\n";
        let ms = read_match_csv(text.as_bytes()).unwrap();
        assert_eq!(ms, vec![Correspondence { a: [1.5, 2.0], b: [3.0, 4.25], score: 0.9 }]);
        assert!(read_match_csv("a,b\n".as_bytes()).is_err());
        assert!(read_match_csv("xA,yA,xB,yB,score\n1,2,3\n".as_bytes()).is_err());
    }
}
