//! CPU kernels for memory-bound inference with bitmap-compressed
//! unstructured sparsity: load as sparse, compute as dense.
//!
//! Weights (and cached K/V) are stored compressed — one metadata bit per
//! element plus the non-zero values in kernel consumption order — then
//! decompressed tile-by-tile into dense scratch buffers and multiplied with
//! a tiled GEMM schedule. Decode-stage GEMM is bottlenecked by weight
//! loading, so trading extra decompression compute for reduced memory
//! traffic comes out ahead.
//!
//! Modules:
//! - [`format`]: the compressed representation, tile-interleaved pack order,
//!   per-worker value cursors, and the `.spx` file format.
//! - [`kernel`]: dense/sparse tiled GEMM, the 16-lane popcount prefix sum,
//!   tile decompression, and the lane-vector kernel variant.
//! - [`int8`]: symmetric INT8 quantization and INT8 GEMM with exact INT32
//!   accumulation.
//! - [`attention`]: magnitude-pruned packed KV cache with a dense dynamic
//!   tail, and grouped-query sparse attention over it.
//! - [`oracle`]: independent brute-force references used by tests and
//!   benchmark validation.

pub mod attention;
pub mod error;
pub mod format;
pub mod int8;
pub mod kernel;
pub mod matrix;
pub mod oracle;

pub use error::{Error, Result};
pub use matrix::Matrix;

pub use attention::{magnitude_prune, sparse_attention, SparseKVCache};
pub use format::{
    build_thread_cursors, load_packed, pack_weights, save_packed, unpack_weights, Dtype,
    PackedSparseTensor, TileBuffer, TileLayout,
};
pub use int8::{choose_scales, quantize, QuantParams};
pub use kernel::{
    bytes_read_model_dense, bytes_read_model_sparse, decompress_tile, dense_gemm, pack_dense_tiles,
    prefix_sum16, row_popcounts, sparse_gemm, vector_sparse_gemm, DenseTiles, GemmPlan, Lane16,
};
