//! Sparse correlation tensors built from exact top-K cosine-similarity
//! neighbours between two feature maps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot, FeatureMap, Site, SparseTensor4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrConfig {
    /// Neighbours kept per feature.
    pub k: usize,
    /// Sum both matching directions (A→B and B→A).
    pub symmetric: bool,
}

impl Default for CorrConfig {
    fn default() -> Self {
        Self {
            k: 10,
            symmetric: true,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    sim: f32,
    idx: u32,
}

/// Higher similarity first, then smaller destination index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.sim
        .partial_cmp(&a.sim)
        .unwrap_or(Ordering::Equal)
        .then(a.idx.cmp(&b.idx))
}

/// One-sided correlation: for every cell of `src`, the `k` cells of `dst`
/// with the largest inner product. Output dims are
/// `(src.h, src.w, dst.h, dst.w)` with one channel.
pub fn topk_correlation(src: &FeatureMap, dst: &FeatureMap, k: usize) -> Result<SparseTensor4D> {
    if src.channels() != dst.channels() {
        return Err(Error::Shape(format!(
            "descriptor length mismatch: {} vs {}",
            src.channels(),
            dst.channels()
        )));
    }
    let n_dst = dst.cells();
    if k == 0 || k > n_dst {
        return Err(Error::InvalidArgument(format!(
            "K must be in 1..={n_dst}, got {k}"
        )));
    }
    let dims = [src.height(), src.width(), dst.height(), dst.width()];
    let (w_src, w_dst) = (src.width(), dst.width());

    let rows: Vec<Vec<(u32, f32)>> = par::map_range(src.height(), |row| {
        let mut scratch = Vec::with_capacity(n_dst);
        let mut out = Vec::with_capacity(w_src * k);
        for col in 0..w_src {
            let query = src.descriptor(row, col);
            scratch.clear();
            scratch.extend((0..n_dst).map(|idx| Candidate {
                sim: dot(query, dst.cell(idx)),
                idx: idx as u32,
            }));
            if k < n_dst {
                scratch.select_nth_unstable_by(k - 1, rank);
            }
            let top = &mut scratch[..k];
            top.sort_unstable_by_key(|c| c.idx);
            out.extend(top.iter().map(|c| (c.idx, c.sim)));
        }
        out
    });

    let total = src.cells() * k;
    let mut sites = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for (row, entries) in rows.into_iter().enumerate() {
        for (n, (idx, sim)) in entries.into_iter().enumerate() {
            let col = n / k;
            let idx = idx as usize;
            sites.push([
                row as u32,
                col as u32,
                (idx / w_dst) as u32,
                (idx % w_dst) as u32,
            ] as Site);
            values.push(sim);
        }
    }
    Ok(SparseTensor4D::from_parts_unchecked(dims, 1, sites, values))
}

/// The correlation tensor fed to the filtering network: A→B top-K plus the
/// transposed B→A top-K (or A→B alone when `cfg.symmetric` is off).
pub fn symmetric_correlation(
    fa: &FeatureMap,
    fb: &FeatureMap,
    cfg: &CorrConfig,
) -> Result<SparseTensor4D> {
    let ab = topk_correlation(fa, fb, cfg.k)?;
    if !cfg.symmetric {
        return Ok(ab);
    }
    let ba = topk_correlation(fb, fa, cfg.k)?;
    ab.add(&ba.transpose())
}

/// Upper bound on active sites of a symmetric tensor: `h·w·K·2`.
pub fn site_bound(h: usize, w: usize, k: usize) -> u64 {
    h as u64 * w as u64 * k as u64 * 2
}

/// Bytes per site in the minimal layout: four `u32` coordinates plus the
/// channel values.
pub fn site_record_bytes(channels: usize) -> u64 {
    16 + 4 * channels as u64
}

/// [`site_record_bytes`] rounded up to 8-byte alignment (24 B for one channel).
pub fn aligned_site_record_bytes(channels: usize) -> u64 {
    site_record_bytes(channels).div_ceil(8) * 8
}

pub fn storage_bytes(t: &SparseTensor4D) -> u64 {
    t.len() as u64 * site_record_bytes(t.channels())
}

pub fn aligned_storage_bytes(t: &SparseTensor4D) -> u64 {
    t.len() as u64 * aligned_site_record_bytes(t.channels())
}

/// Bytes of the equivalent dense single-channel `f32` tensor.
pub fn dense_equivalent_bytes(dims: [usize; 4]) -> u64 {
    dims.iter().map(|&d| d as u64).product::<u64>() * 4
}
