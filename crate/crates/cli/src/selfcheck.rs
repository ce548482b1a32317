//! Seeded comparisons of the sparse kernels against straightforward
//! references: dense convolution and full-sort correlation.

use std::collections::BTreeMap;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sncnet::ncn::{
    dense_conv4d, dense_network_forward, mask_to_sites, network_forward_mapped, submanifold_conv,
    Dense4D,
};
use sncnet::tensor::Site;
use sncnet::{
    network_forward, symmetric_correlation, topk_correlation, ConvNetwork, CorrConfig, FeatureMap,
    SparseTensor4D,
};

pub const TOLERANCE: f32 = 1e-5;

#[derive(Debug, Default)]
pub struct Report {
    pub conv_instances: usize,
    pub conv_max_dev: f32,
    pub corr_instances: usize,
    pub corr_max_dev: f32,
    pub corr_site_mismatches: usize,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.conv_max_dev <= TOLERANCE
            && self.corr_max_dev <= TOLERANCE
            && self.corr_site_mismatches == 0
    }

    pub fn lines(&self) -> Vec<String> {
        let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
        vec![
            format!(
                "conv instances={} max_abs_dev={:e} {}",
                self.conv_instances,
                self.conv_max_dev,
                verdict(self.conv_max_dev <= TOLERANCE)
            ),
            format!(
                "corr instances={} max_abs_dev={:e} site_mismatches={} {}",
                self.corr_instances,
                self.corr_max_dev,
                self.corr_site_mismatches,
                verdict(self.corr_max_dev <= TOLERANCE && self.corr_site_mismatches == 0)
            ),
        ]
    }
}

fn random_sparse(rng: &mut ChaCha8Rng) -> Result<SparseTensor4D> {
    let dims: [usize; 4] = std::array::from_fn(|_| rng.gen_range(1..=8));
    let cap = dims.iter().product::<usize>().min(60);
    let target = rng.gen_range(1..=cap);
    let mut entries = BTreeMap::new();
    while entries.len() < target {
        let site: Site = dims.map(|d| rng.gen_range(0..d as u32));
        entries.insert(site, vec![rng.gen_range(-1.0f32..1.0)]);
    }
    Ok(SparseTensor4D::from_entries(dims, 1, entries)?)
}

fn max_dev(a: &SparseTensor4D, b: &SparseTensor4D) -> f32 {
    if a.sites() != b.sites() {
        return f32::INFINITY;
    }
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Result<FeatureMap> {
    let v = (0..h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Ok(FeatureMap::from_unnormalized(h, w, c, v, [1.0, 1.0])?)
}

/// Full-sort top-K: every destination cell ranked by descending score,
/// ties broken by the smaller linear index.
fn brute_topk(src: &FeatureMap, dst: &FeatureMap, k: usize) -> BTreeMap<Site, f32> {
    let mut out = BTreeMap::new();
    for s in 0..src.cells() {
        let mut all: Vec<(usize, f32)> = (0..dst.cells())
            .map(|d| {
                let score = src.cell(s).iter().zip(dst.cell(d)).map(|(x, y)| x * y).sum();
                (d, score)
            })
            .collect();
        all.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(d, score) in &all[..k] {
            let site = [s / src.width(), s % src.width(), d / dst.width(), d % dst.width()];
            out.insert(site.map(|c| c as u32), score);
        }
    }
    out
}

fn compare(t: &SparseTensor4D, expected: &BTreeMap<Site, f32>, report: &mut Report) {
    let same_sites = t.len() == expected.len() && t.sites().iter().eq(expected.keys());
    if !same_sites {
        report.corr_site_mismatches += 1;
        return;
    }
    for (v, e) in t.values().iter().zip(expected.values()) {
        report.corr_max_dev = report.corr_max_dev.max((v - e).abs());
    }
}

pub fn run(seed: u64, instances: usize) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();

    for n in 0..instances {
        let x = random_sparse(&mut rng)?;
        let hidden = rng.gen_range(1..=16);
        let net = ConvNetwork::seeded_with_channels(seed.wrapping_add(n as u64), &[1, hidden, 1]);
        let dense_net = dense_network_forward(&net, &x)?;
        report.conv_max_dev = report
            .conv_max_dev
            .max(max_dev(&network_forward(&net, &x)?, &dense_net))
            .max(max_dev(&network_forward_mapped(&net, &x)?, &dense_net));
        let layer = &net.layers()[0];
        let dense_layer = mask_to_sites(&dense_conv4d(&Dense4D::from_sparse(&x)?, layer)?, &x)?;
        report.conv_max_dev = report
            .conv_max_dev
            .max(max_dev(&submanifold_conv(&x, layer)?, &dense_layer));
        report.conv_instances += 1;
    }

    for _ in 0..instances {
        let (ha, wa, hb, wb) = (
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        );
        let c = rng.gen_range(1..=8);
        let fa = random_map(&mut rng, ha, wa, c)?;
        let fb = random_map(&mut rng, hb, wb, c)?;
        let k = rng.gen_range(1..=(ha * wa).min(hb * wb));

        let ab = brute_topk(&fa, &fb, k);
        compare(&topk_correlation(&fa, &fb, k)?, &ab, &mut report);

        let mut sym = ab;
        for ([k0, l0, i0, j0], v) in brute_topk(&fb, &fa, k) {
            *sym.entry([i0, j0, k0, l0]).or_insert(0.0) += v;
        }
        let cfg = CorrConfig { k, symmetric: true };
        compare(&symmetric_correlation(&fa, &fb, &cfg)?, &sym, &mut report);
        report.corr_instances += 1;
    }
    Ok(report)
}
