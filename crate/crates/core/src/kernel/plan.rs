//! GEMM schedule: accumulator blocking and worker partition.

use crate::error::{Error, Result};
use crate::format::{partition_blocks, round_up, Dtype, TileLayout, COL_BLOCK_COLS};

/// Input rows covered by one accumulator set (two 16-row tiles).
pub const ROW_BLOCK_ROWS: usize = 32;

/// Blocking and partition plan for one GEMM call.
///
/// Each accumulator set covers two input-row tiles by two weight-column
/// tiles (four accumulator tiles, four operand tiles: eight live at once).
/// Workers partition output-column blocks; when `out_cols` is smaller than
/// `32 x workers` the spare workers split the row blocks instead.
#[derive(Debug, Clone)]
pub struct GemmPlan {
    out_rows: usize,
    out_cols: usize,
    inner: usize,
    layout: TileLayout,
    padded_inner: usize,
    padded_cols: usize,
    col_blocks: usize,
    row_blocks: usize,
    col_workers: usize,
    row_groups: usize,
}

impl GemmPlan {
    pub fn new(
        out_rows: usize,
        inner: usize,
        out_cols: usize,
        workers: usize,
        dtype: Dtype,
    ) -> Result<Self> {
        if out_rows == 0 || inner == 0 || out_cols == 0 {
            return Err(Error::DimMismatch("plan dims must be >= 1".into()));
        }
        if workers == 0 {
            return Err(Error::DimMismatch("workers must be >= 1".into()));
        }
        let layout = TileLayout::tiled(dtype);
        let padded_inner = round_up(inner, layout.k_tile());
        let padded_cols = round_up(out_cols, COL_BLOCK_COLS);
        let col_blocks = padded_cols / COL_BLOCK_COLS;
        let row_blocks = out_rows.div_ceil(ROW_BLOCK_ROWS);

        let col_workers = workers.min(col_blocks);
        let row_groups = if out_cols < COL_BLOCK_COLS * workers {
            (workers / col_workers).clamp(1, row_blocks)
        } else {
            1
        };

        Ok(GemmPlan {
            out_rows,
            out_cols,
            inner,
            layout,
            padded_inner,
            padded_cols,
            col_blocks,
            row_blocks,
            col_workers,
            row_groups,
        })
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn out_cols(&self) -> usize {
        self.out_cols
    }

    pub fn inner(&self) -> usize {
        self.inner
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn padded_inner(&self) -> usize {
        self.padded_inner
    }

    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    pub fn col_blocks(&self) -> usize {
        self.col_blocks
    }

    pub fn row_blocks(&self) -> usize {
        self.row_blocks
    }

    /// Workers partitioning output-column blocks; sparse tensors must have
    /// been packed for exactly this count.
    pub fn col_workers(&self) -> usize {
        self.col_workers
    }

    pub fn row_groups(&self) -> usize {
        self.row_groups
    }

    pub fn col_partition(&self) -> Vec<std::ops::Range<usize>> {
        partition_blocks(self.col_blocks, self.col_workers)
    }

    pub fn row_partition(&self) -> Vec<std::ops::Range<usize>> {
        partition_blocks(self.row_blocks, self.row_groups)
    }

    pub fn inner_tiles(&self) -> usize {
        self.padded_inner / self.layout.k_tile()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parallelizes_over_columns() {
        let p = GemmPlan::new(1, 4096, 14336, 8, Dtype::Bf16).unwrap();
        assert_eq!(p.col_blocks(), 14336 / 32);
        assert_eq!(p.col_workers(), 8);
        assert_eq!(p.row_groups(), 1);
    }

    #[test]
    fn narrow_output_falls_back_to_rows() {
        // out_cols 64 < 32*4: two column workers, spare workers split rows.
        let p = GemmPlan::new(128, 256, 64, 4, Dtype::Bf16).unwrap();
        assert_eq!(p.col_workers(), 2);
        assert_eq!(p.row_groups(), 2);
        assert_eq!(p.row_blocks(), 4);

        // Single-row decode cannot split rows.
        let p = GemmPlan::new(1, 256, 32, 4, Dtype::Bf16).unwrap();
        assert_eq!(p.col_workers(), 1);
        assert_eq!(p.row_groups(), 1);
    }

    #[test]
    fn padding_follows_tile_granularity() {
        let p = GemmPlan::new(3, 33, 17, 1, Dtype::Bf16).unwrap();
        assert_eq!(p.padded_inner(), 64);
        assert_eq!(p.padded_cols(), 32);
        let p = GemmPlan::new(3, 33, 17, 1, Dtype::Int8).unwrap();
        assert_eq!(p.padded_inner(), 64);
        assert_eq!(p.padded_cols(), 32);
        let p = GemmPlan::new(3, 65, 17, 1, Dtype::Int8).unwrap();
        assert_eq!(p.padded_inner(), 128);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(GemmPlan::new(0, 4, 4, 1, Dtype::Bf16).is_err());
        assert!(GemmPlan::new(4, 4, 4, 0, Dtype::Bf16).is_err());
    }
}
