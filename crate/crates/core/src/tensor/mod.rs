//! Dense tensors, outer products, matricization, CP/TT formats and
//! numerical rank.

pub mod cap;
mod decomp;
mod dense;
pub mod linalg;

pub use decomp::{cp_to_full, tt_decompose, tt_to_full, CpFactors, TtCores};
pub use dense::{dot, gen_outer, inner, matricize, outer, DenseTensor, Matricization};
pub use linalg::{numerical_rank, Conditioning, RankEstimate, DEFAULT_RANK_TOL};
