//! End-to-end matching of one feature-map pair, plus batch reports.
//!
//! Inputs are the fine (doubled-resolution) maps. Coarse maps are derived
//! from them by 2×2 max-pooling, so both levels share one frame.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corr::{self, CorrConfig};
use crate::error::{Error, Result};
use crate::featio::{load_feature_map, maxpool2x2};
use crate::matchx::{extract_matches, rank_matches};
use crate::ncn::{permutation_invariant_forward, ConvNetwork};
use crate::par;
use crate::reloc::{refine_all, RelocConfig};
use crate::tensor::{FeatureMap, RefinedMatch};

pub const MATCH_CSV_HEADER: &str = "xA,yA,xB,yB,score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corr: CorrConfig,
    pub reloc: RelocConfig,
    /// Matches kept after ranking.
    pub top_n: usize,
    /// Weights file; `None` means the caller supplies the network.
    pub weights: Option<PathBuf>,
    /// Worker threads for batch runs; 0 uses the ambient pool.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corr: CorrConfig::default(),
            reloc: RelocConfig::default(),
            top_n: 1000,
            weights: None,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub pool_s: f64,
    pub correlation_s: f64,
    pub filter_s: f64,
    pub extract_s: f64,
    pub reloc_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStats {
    /// `(hA, wA, hB, wB)` of the coarse correlation tensor.
    pub coarse_dims: [usize; 4],
    pub sites: usize,
    pub site_bound: u64,
    pub storage_bytes: u64,
    pub aligned_storage_bytes: u64,
    pub dense_equivalent_bytes: u64,
    /// Largest sum of simultaneously live tensor buffers (coordinates,
    /// values, hidden activations, site index) during correlation and
    /// filtering.
    pub peak_tensor_bytes: u64,
    pub raw_matches: usize,
    pub kept_matches: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    pub matches: Vec<RefinedMatch>,
    pub stats: PairStats,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs pooling, sparse correlation, filtering, extraction, ranking and
/// relocalisation for one pair of fine feature maps.
pub fn match_pair(
    fine_a: &FeatureMap,
    fine_b: &FeatureMap,
    net: &ConvNetwork,
    cfg: &PipelineConfig,
) -> Result<PairOutput> {
    if fine_a.channels() != fine_b.channels() {
        return Err(Error::Shape(format!(
            "descriptor length mismatch: {} vs {}",
            fine_a.channels(),
            fine_b.channels()
        )));
    }
    cfg.reloc.validate()?;
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let coarse_a = maxpool2x2(fine_a)?;
    let coarse_b = maxpool2x2(fine_b)?;
    timings.pool_s = secs(t);
    let dims = [
        coarse_a.height(),
        coarse_a.width(),
        coarse_b.height(),
        coarse_b.width(),
    ];

    let t = Instant::now();
    let c = corr::symmetric_correlation(&coarse_a, &coarse_b, &cfg.corr)?;
    timings.correlation_s = secs(t);
    let k = cfg.corr.k as u64;
    let site_bound = (coarse_a.cells() as u64 + coarse_b.cells() as u64) * k;
    assert!(
        c.len() as u64 <= site_bound,
        "{} sites exceed the bound {site_bound}",
        c.len()
    );

    let n = c.len() as u64;
    let record = corr::site_record_bytes(1);
    // correlation: both one-sided tensors, the transposed copy and the sum
    let one_sided = (coarse_a.cells() + coarse_b.cells()) as u64 * k * record;
    let corr_peak = one_sided + (coarse_b.cells() as u64 * k * record) + n * record;
    // filtering: input, direct output values, transposed input, widest
    // hidden activation and the site index
    let index_bytes = 4 * ((dims[0] * dims[1]).max(dims[2] * dims[3]) as u64 + 1);
    let filter_peak =
        n * record + n * 4 + n * record + n * 4 * net.max_channels() as u64 + index_bytes;

    let stats_sites = c.len();
    let storage_bytes = corr::storage_bytes(&c);
    let aligned_storage_bytes = corr::aligned_storage_bytes(&c);

    let t = Instant::now();
    let filtered = permutation_invariant_forward(net, &c)?;
    drop(c);
    timings.filter_s = secs(t);

    let t = Instant::now();
    let raw = extract_matches(&filtered)?;
    drop(filtered);
    let raw_matches = raw.len();
    let ranked = rank_matches(raw, cfg.top_n);
    timings.extract_s = secs(t);

    let t = Instant::now();
    let matches = refine_all(&ranked, fine_a, fine_b, &cfg.reloc)?;
    timings.reloc_s = secs(t);
    timings.total_s = secs(start);

    Ok(PairOutput {
        stats: PairStats {
            coarse_dims: dims,
            sites: stats_sites,
            site_bound,
            storage_bytes,
            aligned_storage_bytes,
            dense_equivalent_bytes: corr::dense_equivalent_bytes(dims),
            peak_tensor_bytes: corr_peak.max(filter_peak),
            raw_matches,
            kept_matches: matches.len(),
            timings,
        },
        matches,
    })
}

/// Writes `xA,yA,xB,yB,score` rows with six decimals.
pub fn write_match_csv<W: Write>(matches: &[RefinedMatch], mut out: W) -> Result<()> {
    writeln!(out, "{MATCH_CSV_HEADER}")?;
    for m in matches {
        writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.pixel_a[1], m.pixel_a[0], m.pixel_b[1], m.pixel_b[0], m.score
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub pair_id: String,
    pub features_a: PathBuf,
    pub features_b: PathBuf,
    pub wall_s: f64,
    pub stats: PairStats,
    pub matches_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub pairs: Vec<PairReport>,
    pub total_sites: u64,
    pub total_matches: u64,
    pub peak_sites: usize,
    pub wall_s: f64,
}

/// Matches every `(features_a, features_b)` pair, in parallel across pairs
/// when `cfg.workers` allows. With `out_dir`, each pair's matches are
/// written to `<out_dir>/<pair_id>.csv`.
pub fn match_report(
    pairs: &[(PathBuf, PathBuf)],
    net: &ConvNetwork,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    let start = Instant::now();
    let run_one = |n: usize| -> Result<PairReport> {
        let (pa, pb) = &pairs[n];
        let t = Instant::now();
        let fa = load_feature_map(pa)?;
        let fb = load_feature_map(pb)?;
        let out = match_pair(&fa, &fb, net, cfg)?;
        let pair_id = format!("pair{n:04}");
        let matches_file = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("{pair_id}.csv"));
                let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
                write_match_csv(&out.matches, file)?;
                Some(path)
            }
            None => None,
        };
        Ok(PairReport {
            pair_id,
            features_a: pa.clone(),
            features_b: pb.clone(),
            wall_s: secs(t),
            stats: out.stats,
            matches_file,
        })
    };
    let results = par::with_workers(cfg.workers, || par::map_range(pairs.len(), run_one))?;
    let reports: Vec<PairReport> = results.into_iter().collect::<Result<_>>()?;
    Ok(RunReport {
        total_sites: reports.iter().map(|r| r.stats.sites as u64).sum(),
        total_matches: reports.iter().map(|r| r.stats.kept_matches as u64).sum(),
        peak_sites: reports.iter().map(|r| r.stats.sites).max().unwrap_or(0),
        wall_s: secs(start),
        pairs: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::{extract_patch_descriptors, GrayImage};
    use crate::reloc::RelocMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(h, w, |_, _| rng.gen_range(0.0f32..255.0).round())
    }

    #[test]
    fn identical_images_match_diagonally() {
        let img = random_image(40, 36, 3);
        let f = extract_patch_descriptors(&img, 4, 2).unwrap();
        let cfg = PipelineConfig {
            corr: CorrConfig { k: 1, symmetric: true },
            reloc: RelocConfig { mode: RelocMode::None, ..Default::default() },
            ..Default::default()
        };
        let out = match_pair(&f, &f, &ConvNetwork::identity(), &cfg).unwrap();
        assert!(!out.matches.is_empty());
        for m in &out.matches {
            assert_eq!(m.a, m.b);
        }
        assert_eq!(out.stats.kept_matches, out.matches.len());
        assert!(out.stats.sites as u64 <= out.stats.site_bound);
    }

    #[test]
    fn csv_layout() {
        let m = RefinedMatch {
            a: [0.0; 2],
            b: [0.0; 2],
            score: 0.5,
            pixel_a: [2.0, 1.0],
            pixel_b: [4.0, 3.0],
        };
        let mut buf = Vec::new();
        write_match_csv(&[m], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "xA,yA,xB,yB,score\n1.000000,2.000000,3.000000,4.000000,0.500000\n"
        );
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let a = FeatureMap::new(2, 2, 1, vec![1.0; 4], [1.0, 1.0]).unwrap();
        let b = FeatureMap::new(2, 2, 2, vec![1.0, 0.0].repeat(4), [1.0, 1.0]).unwrap();
        assert!(match_pair(&a, &b, &ConvNetwork::identity(), &PipelineConfig::default()).is_err());
    }
}
