//! Match extraction from a filtered correlation tensor and score ranking.
//!
//! A site is a match when it holds the largest value of its B-cell slice
//! (over all A-cells) or of its A-cell slice (over all B-cells). Only
//! stored sites compete; ties go to the smaller linearised coordinate.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ncn::SiteIndex;
use crate::par;
use crate::tensor::{Match, SparseTensor4D};

const SCAN_TASKS: usize = 16;

/// Best site per B-cell over `sites[range]`, earliest index on ties.
fn best_per_b_cell(t: &SparseTensor4D, range: std::ops::Range<usize>) -> Vec<u32> {
    let [_, _, hb, wb] = t.dims();
    let mut best = vec![u32::MAX; hb * wb];
    for idx in range {
        let s = t.sites()[idx];
        let cell = s[2] as usize * wb + s[3] as usize;
        let v = t.value(idx)[0];
        let slot = &mut best[cell];
        if *slot == u32::MAX || v > t.value(*slot as usize)[0] {
            *slot = idx as u32;
        }
    }
    best
}

/// Matches in canonical site order, each site at most once.
pub fn extract_matches(ct: &SparseTensor4D) -> Result<Vec<Match>> {
    if ct.channels() != 1 {
        return Err(Error::Shape(format!(
            "match extraction needs one channel, got {}",
            ct.channels()
        )));
    }
    let n = ct.len();
    let mut winner = vec![false; n];

    // A-cell slices are contiguous blocks of the canonical list.
    let [ha, wa, _, _] = ct.dims();
    let index = SiteIndex::build(ct);
    let row_winners: Vec<Vec<usize>> = par::map_range(ha, |i| {
        (0..wa)
            .filter_map(|j| {
                let range = index.block(i, j);
                let mut best: Option<usize> = None;
                for idx in range {
                    if best.is_none_or(|b| ct.value(idx)[0] > ct.value(b)[0]) {
                        best = Some(idx);
                    }
                }
                best
            })
            .collect()
    });
    for idx in row_winners.into_iter().flatten() {
        winner[idx] = true;
    }

    // B-cell slices are scattered: scan in chunks, then merge in chunk order
    // so the earliest site keeps winning ties.
    let chunk = n.div_ceil(SCAN_TASKS).max(1);
    let partial: Vec<Vec<u32>> = par::map_range(n.div_ceil(chunk), |task| {
        best_per_b_cell(ct, task * chunk..((task + 1) * chunk).min(n))
    });
    let mut merged: Option<Vec<u32>> = None;
    for part in partial {
        match merged.as_mut() {
            None => merged = Some(part),
            Some(best) => {
                for (slot, cand) in best.iter_mut().zip(part) {
                    if cand == u32::MAX {
                        continue;
                    }
                    if *slot == u32::MAX || ct.value(cand as usize)[0] > ct.value(*slot as usize)[0]
                    {
                        *slot = cand;
                    }
                }
            }
        }
    }
    for idx in merged.unwrap_or_default() {
        if idx != u32::MAX {
            winner[idx as usize] = true;
        }
    }

    Ok(winner
        .iter()
        .enumerate()
        .filter(|(_, &w)| w)
        .map(|(idx, _)| {
            let [i, j, k, l] = ct.sites()[idx];
            Match {
                a: [i, j],
                b: [k, l],
                score: ct.value(idx)[0],
            }
        })
        .collect())
}

fn rank_order(x: &Match, y: &Match) -> Ordering {
    y.score
        .partial_cmp(&x.score)
        .unwrap_or(Ordering::Equal)
        .then(x.a.cmp(&y.a))
        .then(x.b.cmp(&y.b))
}

/// Highest score first (ties by A-cell, then B-cell), truncated to `top_n`.
pub fn rank_matches(mut matches: Vec<Match>, top_n: usize) -> Vec<Match> {
    matches.sort_by(rank_order);
    matches.truncate(top_n);
    matches
}
