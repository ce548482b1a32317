//! Storage arithmetic for sparse versus dense correlation tensors.

use serde::Serialize;

use crate::corr::{aligned_site_record_bytes, dense_equivalent_bytes, site_record_bytes};

pub const MB: f64 = 1e6;
pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub dims: [usize; 4],
    pub k: usize,
    /// Largest possible active-site count, `(hA·wA + hB·wB)·K`.
    pub site_bound: u64,
    /// Site count the sparse figures are computed for.
    pub sites: u64,
    pub dense_bytes: u64,
    /// 20 bytes per site: four `u32` coordinates and one `f32`.
    pub sparse_bytes: u64,
    /// 24 bytes per site: the same record padded to 8-byte alignment.
    pub sparse_aligned_bytes: u64,
}

impl MemoryReport {
    /// Figures for a single-channel tensor. `sites` defaults to the bound.
    pub fn new(dims: [usize; 4], k: usize, sites: Option<u64>) -> Self {
        let [ha, wa, hb, wb] = dims.map(|d| d as u64);
        let site_bound = (ha * wa + hb * wb) * k as u64;
        let sites = sites.unwrap_or(site_bound);
        Self {
            dims,
            k,
            site_bound,
            sites,
            dense_bytes: dense_equivalent_bytes(dims),
            sparse_bytes: sites * site_record_bytes(1),
            sparse_aligned_bytes: sites * aligned_site_record_bytes(1),
        }
    }

    /// Dense bytes over aligned sparse bytes.
    pub fn reduction(&self) -> f64 {
        if self.sparse_aligned_bytes == 0 {
            f64::INFINITY
        } else {
            self.dense_bytes as f64 / self.sparse_aligned_bytes as f64
        }
    }

    /// `key=value` lines, sizes in bytes, MB and MiB.
    pub fn to_lines(&self) -> Vec<String> {
        let size = |name: &str, b: u64| {
            format!(
                "{name}_bytes={b} {name}_mb={:.2} {name}_mib={:.2}",
                b as f64 / MB,
                b as f64 / MIB
            )
        };
        vec![
            format!(
                "dims={}x{}x{}x{} k={}",
                self.dims[0], self.dims[1], self.dims[2], self.dims[3], self.k
            ),
            format!("site_bound={} sites={}", self.site_bound, self.sites),
            size("dense", self.dense_bytes),
            size("sparse", self.sparse_bytes),
            size("sparse_aligned", self.sparse_aligned_bytes),
            format!("reduction={:.1}", self.reduction()),
        ]
    }
}
