//! Spectral segments of a pretrained weight.
//!
//! A weight `W₀ = U Σ Vᵀ` is cut into contiguous bands of singular
//! triples. Bands become either rank-r blocks ([`block_decompose`]) or
//! expert priors ([`make_segments`] + [`build_expert`]).

mod blocks;
mod segments;

pub use blocks::{
    best_rank_r_block, block_decompose, block_decompose_factors, BlockDecomposition, SvdBlock,
};
pub use segments::{
    build_expert, build_single_lora_init, make_segments, ExpertPair, ExpertSource, SegmentSpec,
    SegmentStrategy, SingleLoraVariant,
};
