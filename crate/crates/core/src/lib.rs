//! Sparse neighbourhood-consensus matching.
//!
//! Two dense feature maps are matched through a sparse 4D correlation
//! tensor holding only each feature's top-K neighbours in both directions.
//! A submanifold sparse 4D CNN filters the tensor, matches are read off by
//! per-slice argmax, and a two-stage relocalisation moves them onto a grid
//! of twice the resolution with sub-cell precision.
//!
//! # Modules
//! - [`tensor`]: feature maps, sparse 4D tensors, match records.
//! - [`featio`]: feature files, patch descriptors, 2×2 max-pooling.
//! - [`corr`]: top-K correlation tensors and storage arithmetic.
//! - [`ncn`]: submanifold convolutions, the filtering network, dense reference.
//! - [`matchx`]: match extraction and ranking.
//! - [`reloc`]: hard and soft relocalisation.
//! - [`pipeline`]: end-to-end matching of a feature-map pair.
//! - [`eval`]: matching accuracy against homographies.
//!
//! # Feature flags
//! - `parallel` (default): rayon data parallelism. Results are identical
//!   with and without it.

pub mod corr;
pub mod error;
pub mod eval;
pub mod featio;
pub mod matchx;
pub mod memory;
pub mod ncn;
mod par;
pub mod pipeline;
pub mod reloc;
pub mod tensor;
mod wire;

pub use corr::{symmetric_correlation, topk_correlation, CorrConfig};
pub use error::{Error, Result};
pub use eval::{mma, Homography};
pub use featio::{extract_patch_descriptors, load_feature_map, maxpool2x2, save_feature_map, GrayImage};
pub use matchx::{extract_matches, rank_matches};
pub use memory::MemoryReport;
pub use ncn::{network_forward, permutation_invariant_forward, ConvLayer, ConvNetwork};
pub use par::is_parallel;
pub use pipeline::{match_pair, PairOutput, PipelineConfig};
pub use reloc::{refine_all, RelocConfig, RelocMode};
pub use tensor::{add_sparse, transpose4d, FeatureMap, Match, RefinedMatch, SparseTensor4D};
