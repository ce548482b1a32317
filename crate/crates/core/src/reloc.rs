//! Match relocalisation on feature maps at twice the coarse resolution.
//!
//! Hard relocalisation picks the best pair among the 2×2 fine cells under
//! each coarse cell. Soft relocalisation then moves each endpoint by a
//! softargmax over its 3×3 fine neighbourhood, scored against the other
//! endpoint's centre descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot, FeatureMap, Match, RefinedMatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelocMode {
    /// Coordinates are doubled into the fine frame, nothing else.
    None,
    Hard,
    HardSoft,
}

impl std::str::FromStr for RelocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "hard" => Ok(Self::Hard),
            "hard+soft" | "hard-soft" => Ok(Self::HardSoft),
            other => Err(Error::InvalidArgument(format!(
                "unknown relocalisation mode {other:?} (expected none, hard or hard+soft)"
            ))),
        }
    }
}

/// How the temperature enters the softmax exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureConvention {
    /// weights ∝ exp(t · score)
    Multiply,
    /// weights ∝ exp(score / t)
    Divide,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelocConfig {
    pub temperature: f32,
    pub mode: RelocMode,
    pub convention: TemperatureConvention,
}

impl Default for RelocConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            mode: RelocMode::HardSoft,
            convention: TemperatureConvention::Multiply,
        }
    }
}

impl RelocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn beta(&self) -> f64 {
        match self.convention {
            TemperatureConvention::Multiply => self.temperature as f64,
            TemperatureConvention::Divide => 1.0 / self.temperature as f64,
        }
    }
}

/// Expected offset under `softmax(beta · score)`.
///
/// Scores are `(offset, score)` pairs; an empty slice yields zero.
pub fn softargmax(scores: &[([i32; 2], f32)], beta: f64) -> [f64; 2] {
    let Some(max) = scores.iter().map(|s| s.1).reduce(f32::max) else {
        return [0.0; 2];
    };
    let mut total = 0f64;
    let mut acc = [0f64; 2];
    for &(off, s) in scores {
        let w = (beta * (s as f64 - max as f64)).exp();
        total += w;
        acc[0] += w * off[0] as f64;
        acc[1] += w * off[1] as f64;
    }
    [acc[0] / total, acc[1] / total]
}

fn refined(a: [f64; 2], b: [f64; 2], score: f32, fa: &FeatureMap, fb: &FeatureMap) -> RefinedMatch {
    RefinedMatch {
        a,
        b,
        score,
        pixel_a: fa.grid_to_pixel(a[0], a[1]),
        pixel_b: fb.grid_to_pixel(b[0], b[1]),
    }
}

/// Winning 2×2 sub-cell displacement `(δi, δj, δk, δl)` and its similarity.
/// Ties go to the smallest linearised displacement.
pub fn hard_displacement(m: &Match, fa: &FeatureMap, fb: &FeatureMap) -> Result<([u32; 4], f32)> {
    let [i, j] = m.a.map(|c| 2 * c as usize);
    let [k, l] = m.b.map(|c| 2 * c as usize);
    if i + 1 >= fa.height() || j + 1 >= fa.width() || k + 1 >= fb.height() || l + 1 >= fb.width() {
        return Err(Error::Shape(format!(
            "match {:?}->{:?} does not fit fine maps {}x{} and {}x{}",
            m.a,
            m.b,
            fa.height(),
            fa.width(),
            fb.height(),
            fb.width()
        )));
    }
    if fa.channels() != fb.channels() {
        return Err(Error::Shape("fine maps have different descriptor lengths".into()));
    }
    let mut best = ([0u32; 4], f32::NEG_INFINITY);
    for di in 0..2 {
        for dj in 0..2 {
            let da = fa.descriptor(i + di, j + dj);
            for dk in 0..2 {
                for dl in 0..2 {
                    let s = dot(da, fb.descriptor(k + dk, l + dl));
                    if s > best.1 {
                        best = ([di, dj, dk, dl].map(|d| d as u32), s);
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Hard relocalisation: `m_h = 2m + Δm_h` in the fine grid.
pub fn hard_reloc(m: &Match, fa: &FeatureMap, fb: &FeatureMap) -> Result<RefinedMatch> {
    let (d, _) = hard_displacement(m, fa, fb)?;
    let a = [2 * m.a[0] + d[0], 2 * m.a[1] + d[1]].map(f64::from);
    let b = [2 * m.b[0] + d[2], 2 * m.b[1] + d[3]].map(f64::from);
    Ok(refined(a, b, m.score, fa, fb))
}

/// Scores of the in-bounds 3×3 neighbourhood of `centre` in `map` against
/// `probe`.
fn neighbourhood_scores(map: &FeatureMap, centre: [usize; 2], probe: &[f32]) -> Vec<([i32; 2], f32)> {
    let mut out = Vec::with_capacity(9);
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let y = centre[0] as i64 + dy as i64;
            let x = centre[1] as i64 + dx as i64;
            if y < 0 || x < 0 || y >= map.height() as i64 || x >= map.width() as i64 {
                continue;
            }
            out.push(([dy, dx], dot(map.descriptor(y as usize, x as usize), probe)));
        }
    }
    out
}

fn integer_cell(c: [f64; 2], map: &FeatureMap) -> Result<[usize; 2]> {
    if c.iter().any(|v| v.fract() != 0.0 || *v < 0.0)
        || c[0] as usize >= map.height()
        || c[1] as usize >= map.width()
    {
        return Err(Error::InvalidArgument(format!(
            "soft relocalisation needs integer in-bounds coordinates, got {c:?}"
        )));
    }
    Ok([c[0] as usize, c[1] as usize])
}

/// Soft relocalisation of a hard-relocalised match. Each endpoint moves by
/// the softargmax of its 3×3 neighbourhood scored against the other
/// endpoint's centre descriptor; out-of-bounds cells are left out of the
/// softmax.
pub fn soft_reloc(
    mh: &RefinedMatch,
    fa: &FeatureMap,
    fb: &FeatureMap,
    cfg: &RelocConfig,
) -> Result<RefinedMatch> {
    let ca = integer_cell(mh.a, fa)?;
    let cb = integer_cell(mh.b, fb)?;
    let beta = cfg.beta();
    let centre_a = fa.descriptor(ca[0], ca[1]);
    let centre_b = fb.descriptor(cb[0], cb[1]);
    let da = softargmax(&neighbourhood_scores(fa, ca, centre_b), beta);
    let db = softargmax(&neighbourhood_scores(fb, cb, centre_a), beta);
    let a = [mh.a[0] + da[0], mh.a[1] + da[1]];
    let b = [mh.b[0] + db[0], mh.b[1] + db[1]];
    Ok(refined(a, b, mh.score, fa, fb))
}

/// Relocalises every match according to `cfg.mode`, preserving order.
pub fn refine_all(
    matches: &[Match],
    fa: &FeatureMap,
    fb: &FeatureMap,
    cfg: &RelocConfig,
) -> Result<Vec<RefinedMatch>> {
    cfg.validate()?;
    let out: Vec<Result<RefinedMatch>> = par::map_slice(matches, |m| match cfg.mode {
        RelocMode::None => {
            let a = m.a.map(|c| 2.0 * c as f64);
            let b = m.b.map(|c| 2.0 * c as f64);
            Ok(refined(a, b, m.score, fa, fb))
        }
        RelocMode::Hard => hard_reloc(m, fa, fb),
        RelocMode::HardSoft => soft_reloc(&hard_reloc(m, fa, fb)?, fa, fb, cfg),
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let v = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_unnormalized(h, w, c, v, [2.0, 2.0]).unwrap()
    }

    /// Map whose cell `n` holds basis vector `e_n`, except the listed cells
    /// which get the given basis index instead.
    fn basis_map(h: usize, w: usize, c: usize, overrides: &[((usize, usize), usize)]) -> FeatureMap {
        let mut v = vec![0f32; h * w * c];
        for n in 0..h * w {
            v[n * c + n] = 1.0;
        }
        for &((y, x), e) in overrides {
            let cell = y * w + x;
            v[cell * c..(cell + 1) * c].fill(0.0);
            v[cell * c + e] = 1.0;
        }
        FeatureMap::new(h, w, c, v, [1.0, 1.0]).unwrap()
    }

    #[test]
    fn hard_finds_constructed_maximiser_at_origin() {
        let c = 40;
        let fa = basis_map(4, 4, c, &[]);
        // B cell (2,2) carries A's (2,2) descriptor; the rest use a disjoint basis.
        let mut v = vec![0f32; 16 * c];
        for n in 0..16 {
            v[n * c + 16 + n] = 1.0;
        }
        let cell = 2 * 4 + 2;
        v[cell * c..(cell + 1) * c].fill(0.0);
        v[cell * c + cell] = 1.0;
        let fb = FeatureMap::new(4, 4, c, v, [1.0, 1.0]).unwrap();
        let m = Match { a: [1, 1], b: [1, 1], score: 1.0 };
        let r = hard_reloc(&m, &fa, &fb).unwrap();
        assert_eq!((r.a, r.b), ([2.0, 2.0], [2.0, 2.0]));
    }

    #[test]
    fn hard_finds_odd_subcell() {
        let c = 40;
        let fa = basis_map(4, 4, c, &[]);
        let mut v = vec![0f32; 16 * c];
        for n in 0..16 {
            v[n * c + 16 + n] = 1.0;
        }
        // B (1,3) matches A (3,1)
        let cell = 1 * 4 + 3;
        v[cell * c..(cell + 1) * c].fill(0.0);
        v[cell * c + 3 * 4 + 1] = 1.0;
        let fb = FeatureMap::new(4, 4, c, v, [1.0, 1.0]).unwrap();
        let m = Match { a: [1, 0], b: [0, 1], score: 0.5 };
        let (d, s) = hard_displacement(&m, &fa, &fb).unwrap();
        assert_eq!(d, [1, 1, 1, 1]);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn hard_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (fa, fb) = (random_map(8, 6, 5, &mut rng), random_map(6, 8, 5, &mut rng));
        for i in 0..4u32 {
            for j in 0..3u32 {
                let m = Match { a: [i, j], b: [rng.gen_range(0..3), rng.gen_range(0..4)], score: 0.0 };
                let mut best = (f32::NEG_INFINITY, [0.0f64; 4]);
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            for d in 0..2 {
                                let pa = (2 * m.a[0] as usize + a, 2 * m.a[1] as usize + b);
                                let pb = (2 * m.b[0] as usize + c, 2 * m.b[1] as usize + d);
                                let s = dot(fa.descriptor(pa.0, pa.1), fb.descriptor(pb.0, pb.1));
                                if s > best.0 {
                                    best = (s, [pa.0, pa.1, pb.0, pb.1].map(|x| x as f64));
                                }
                            }
                        }
                    }
                }
                let r = hard_reloc(&m, &fa, &fb).unwrap();
                assert_eq!([r.a[0], r.a[1], r.b[0], r.b[1]], best.1);
            }
        }
    }

    #[test]
    fn hard_rejects_mismatched_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fa = random_map(4, 4, 3, &mut rng);
        let m = Match { a: [2, 0], b: [0, 0], score: 0.0 };
        assert!(matches!(hard_reloc(&m, &fa, &fa), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_scores_give_zero_displacement() {
        let scores: Vec<_> = (0..9).map(|n| ([n / 3 - 1, n % 3 - 1], 0.3f32)).collect();
        assert_eq!(softargmax(&scores, 10.0), [0.0, 0.0]);
    }

    #[test]
    fn dominant_score_pulls_towards_its_offset() {
        // closed form: weight e^10 on (0,1), weight 1 on the other eight
        let scores: Vec<_> = (0..9)
            .map(|n| {
                let off = [n / 3 - 1, n % 3 - 1];
                (off, if off == [0, 1] { 1.0f32 } else { 0.0 })
            })
            .collect();
        let d = softargmax(&scores, 10.0);
        let e = 10f64.exp();
        let expect_x = (e + 2.0 - 3.0) / (e + 8.0);
        assert!((d[1] - expect_x).abs() < 1e-12);
        assert!(d[0].abs() < 1e-12);
        assert!((d[1] - 1.0).abs() < 2e-3);
    }

    #[test]
    fn softargmax_shift_invariance_and_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let scores: Vec<_> = (0..9)
                .map(|n| ([n / 3 - 1, n % 3 - 1], rng.gen_range(-1.0f32..1.0)))
                .collect();
            let base = softargmax(&scores, 10.0);
            let shifted: Vec<_> = scores.iter().map(|&(o, s)| (o, s + 0.25)).collect();
            let d = softargmax(&shifted, 10.0);
            assert!((d[0] - base[0]).abs() < 1e-6 && (d[1] - base[1]).abs() < 1e-6);
            let reflected: Vec<_> = scores.iter().map(|&(o, s)| ([o[0], -o[1]], s)).collect();
            let r = softargmax(&reflected, 10.0);
            assert!((r[0] - base[0]).abs() < 1e-6 && (r[1] + base[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_scores_cancel_along_axis() {
        let scores: Vec<_> = (0..9)
            .map(|n| {
                let off = [n / 3 - 1, n % 3 - 1];
                (off, [0.1f32, 0.7, 0.1][(off[1] + 1) as usize] + 0.2 * off[0] as f32)
            })
            .collect();
        let d = softargmax(&scores, 10.0);
        assert!(d[1].abs() < 1e-12);
        assert!(d[0] > 0.0);
    }

    #[test]
    fn soft_excludes_out_of_bounds_cells() {
        // a uniform map: every in-bounds cell scores 1, so at a corner only
        // the four valid cells share the weight
        let fa = FeatureMap::new(3, 3, 1, vec![1.0; 9], [1.0, 1.0]).unwrap();
        let mh = RefinedMatch { a: [0.0, 0.0], b: [1.0, 1.0], score: 0.0, pixel_a: [0.0; 2], pixel_b: [0.0; 2] };
        let r = soft_reloc(&mh, &fa, &fa, &RelocConfig::default()).unwrap();
        assert_eq!(r.a, [0.5, 0.5]);
        assert_eq!(r.b, [1.0, 1.0]);
    }

    #[test]
    fn refine_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (fa, fb) = (random_map(8, 8, 6, &mut rng), random_map(8, 8, 6, &mut rng));
        let ms: Vec<Match> = (0..20)
            .map(|_| Match {
                a: [rng.gen_range(0..4), rng.gen_range(0..4)],
                b: [rng.gen_range(0..4), rng.gen_range(0..4)],
                score: rng.gen(),
            })
            .collect();
        let mut cfg = RelocConfig { mode: RelocMode::None, ..Default::default() };
        let none = refine_all(&ms, &fa, &fb, &cfg).unwrap();
        for (m, r) in ms.iter().zip(&none) {
            assert_eq!(r.a, m.a.map(|c| 2.0 * c as f64));
            assert_eq!(r.b, m.b.map(|c| 2.0 * c as f64));
            assert_eq!(r.pixel_a, [r.a[0] * 2.0 + 0.5, r.a[1] * 2.0 + 0.5]);
        }
        cfg.mode = RelocMode::Hard;
        let hard = refine_all(&ms, &fa, &fb, &cfg).unwrap();
        for (m, r) in ms.iter().zip(&hard) {
            assert_eq!(*r, hard_reloc(m, &fa, &fb).unwrap());
        }
        cfg.mode = RelocMode::HardSoft;
        let soft = refine_all(&ms, &fa, &fb, &cfg).unwrap();
        for ((m, h), s) in ms.iter().zip(&hard).zip(&soft) {
            for ax in 0..2 {
                assert!((s.a[ax] - h.a[ax]).abs() <= 1.0);
                assert!((s.b[ax] - h.b[ax]).abs() <= 1.0);
                assert!((s.a[ax] / 2.0 - m.a[ax] as f64).abs() <= 1.5);
            }
            assert_eq!(s.score, m.score);
        }
    }

    #[test]
    fn high_temperature_approaches_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut checked = 0;
        while checked < 100 {
            let scores: Vec<_> = (0..9)
                .map(|n| ([n / 3 - 1, n % 3 - 1], rng.gen_range(-1.0f32..1.0)))
                .collect();
            let mut sorted: Vec<f32> = scores.iter().map(|s| s.1).collect();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] < 0.01 {
                continue;
            }
            let best = scores.iter().find(|s| s.1 == sorted[0]).unwrap().0;
            let d = softargmax(&scores, 1000.0);
            assert!((d[0] - best[0] as f64).abs() <= 1e-3);
            assert!((d[1] - best[1] as f64).abs() <= 1e-3);
            checked += 1;
        }
    }

    #[test]
    fn mode_parsing_and_validation() {
        assert_eq!("hard+soft".parse::<RelocMode>().unwrap(), RelocMode::HardSoft);
        assert_eq!("none".parse::<RelocMode>().unwrap(), RelocMode::None);
        assert!("soft".parse::<RelocMode>().is_err());
        let cfg = RelocConfig { temperature: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
