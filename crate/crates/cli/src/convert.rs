//! Offline preprocessing: raw dense tensor -> pruned, packed `.spx`.

use std::path::{Path, PathBuf};

use sparamx::attention::magnitude_prune;
use sparamx::error::Result;
use sparamx::format::{pack_weights, save_packed_with_quant, Dtype, TileLayout};
use sparamx::int8::{choose_scales, quantize_weights};
use sparamx::kernel::bytes_read_model_dense;
use sparamx::matrix::Matrix;

use crate::raw::read_raw_f32;

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    pub sparsity: f32,
    pub dtype: Dtype,
    pub workers: usize,
    /// Clamp `workers` to the tensor's column-block count instead of
    /// erroring; set when the worker count was an automatic default.
    pub clamp_workers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertSummary {
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub compressed_bytes: usize,
    pub dense_bytes: u64,
    pub workers: usize,
}

impl ConvertSummary {
    pub fn ratio(&self) -> f64 {
        self.compressed_bytes as f64 / self.dense_bytes as f64
    }
}

pub fn convert(opts: &ConvertOptions) -> Result<ConvertSummary> {
    let mut dense = read_raw_f32(&opts.input)?;
    magnitude_prune(dense.as_mut_slice(), opts.sparsity);

    let layout = TileLayout::tiled(opts.dtype);
    let workers = if opts.clamp_workers {
        let blocks = layout.col_blocks(layout.padded_dims(dense.rows(), dense.cols()).1);
        opts.workers.min(blocks).max(1)
    } else {
        opts.workers
    };

    let (nnz, compressed_bytes) = match opts.dtype {
        Dtype::Bf16 => {
            let w = Matrix::from_f32(&dense);
            let packed = pack_weights(&w, layout, workers)?;
            let mut f = std::fs::File::create(&opts.output)?;
            save_packed_with_quant(&packed, None, &mut f)?;
            (packed.nnz(), packed.compressed_size_bytes())
        }
        Dtype::Int8 => {
            let q = choose_scales(&dense);
            let qw = quantize_weights(&dense, &q)?;
            let packed = pack_weights(&qw, layout, workers)?;
            let mut f = std::fs::File::create(&opts.output)?;
            save_packed_with_quant(&packed, Some(&q), &mut f)?;
            (packed.nnz(), packed.compressed_size_bytes())
        }
    };

    Ok(ConvertSummary {
        rows: dense.rows(),
        cols: dense.cols(),
        nnz,
        compressed_bytes,
        dense_bytes: bytes_read_model_dense(dense.rows(), dense.cols(), opts.dtype),
        workers,
    })
}

/// `convert` for tests: write, convert, and reload in one temp dir.
pub fn convert_file(
    input: &Path,
    output: &Path,
    sparsity: f32,
    dtype: Dtype,
    workers: usize,
) -> Result<ConvertSummary> {
    convert(&ConvertOptions {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        sparsity,
        dtype,
        workers,
        clamp_workers: false,
    })
}
