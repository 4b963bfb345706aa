//! Bitmap-compressed weight format.
//!
//! A packed tensor stores one metadata bit per padded element plus a value
//! stream holding only the non-zeros, ordered exactly as the kernels consume
//! them. Decompression is therefore a single forward scan per worker, with
//! precomputed start cursors making the scan parallelizable.
//!
//! Packed element order (tiled layout): column blocks of 32 output columns
//! outermost, then inner-dimension tiles ascending, then the two 16-column
//! weight tiles of the block, then tile rows, then packed positions within
//! the row. Packed row `r`, position `p = n*interleave + j` holds logical
//! element `W[k = r*interleave + j, n]`, so one packed row carries
//! `interleave` consecutive inner-dimension elements of each output column.
//!
//! Bitmap bits are LSB-first within each 32-bit word: bit `i % 32` of word
//! `i / 32` corresponds to packed element `i`.

mod file;

pub use file::{
    load_packed, load_packed_any, load_packed_with_quant, save_packed, save_packed_with_quant,
    AnyPackedTensor,
};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use half::bf16;

/// Element precision of a packed tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// 16-bit brain float: the upper half of an f32 bit pattern.
    Bf16,
    /// Signed 8-bit integer.
    Int8,
}

impl Dtype {
    pub fn element_bits(self) -> usize {
        match self {
            Dtype::Bf16 => 16,
            Dtype::Int8 => 8,
        }
    }

    pub fn element_bytes(self) -> usize {
        self.element_bits() / 8
    }
}

/// Packed element ordering variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackOrder {
    /// Tile-major order consumed by the tiled GEMM kernels.
    Tiled,
    /// Strip-major order consumed by the lane-vector kernel: 16-column
    /// strips outermost, inner dimension ascending within each strip.
    VectorStrips,
}

/// Geometry and interleave ordering of one operand tile.
///
/// Every tile spans 16 rows of 512 bits: 16x32 BF16 elements or 16x64 INT8
/// elements. A weight tile covers `k_tile()` inner-dimension elements of
/// `n_tile()` = 16 output columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    dtype: Dtype,
    order: PackOrder,
}

/// Rows in every tile.
pub const TILE_ROWS: usize = 16;

/// Bits per tile row (one 512-bit register row).
pub const TILE_ROW_BITS: usize = 512;

/// Output columns per worker-partition block in the tiled layout: two
/// 16-column weight tiles are processed per accumulator set.
pub const COL_BLOCK_COLS: usize = 32;

/// Output columns per strip in the vector-path layout.
pub const STRIP_COLS: usize = 16;

impl TileLayout {
    pub fn tiled(dtype: Dtype) -> Self {
        TileLayout {
            dtype,
            order: PackOrder::Tiled,
        }
    }

    pub fn vector(dtype: Dtype) -> Self {
        TileLayout {
            dtype,
            order: PackOrder::VectorStrips,
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn order(&self) -> PackOrder {
        self.order
    }

    pub fn tile_rows(&self) -> usize {
        TILE_ROWS
    }

    /// Elements per tile row: 32 for BF16, 64 for INT8.
    pub fn tile_cols(&self) -> usize {
        TILE_ROW_BITS / self.dtype.element_bits()
    }

    /// Consecutive inner-dimension elements stored adjacently per column:
    /// 2 for BF16, 4 for INT8.
    pub fn interleave(&self) -> usize {
        match self.dtype {
            Dtype::Bf16 => 2,
            Dtype::Int8 => 4,
        }
    }

    pub fn tile_elems(&self) -> usize {
        self.tile_rows() * self.tile_cols()
    }

    /// 32-bit metadata words covering one tile.
    pub fn words_per_tile(&self) -> usize {
        self.tile_elems() / 32
    }

    /// Inner-dimension elements covered by one weight tile.
    pub fn k_tile(&self) -> usize {
        self.tile_rows() * self.interleave()
    }

    /// Output columns covered by one weight tile.
    pub fn n_tile(&self) -> usize {
        self.tile_cols() / self.interleave()
    }

    /// Output columns per worker-partition block.
    pub fn block_cols(&self) -> usize {
        match self.order {
            PackOrder::Tiled => COL_BLOCK_COLS,
            PackOrder::VectorStrips => STRIP_COLS,
        }
    }

    /// Inner-dimension padding granularity.
    pub fn k_granularity(&self) -> usize {
        match self.order {
            PackOrder::Tiled => self.k_tile(),
            PackOrder::VectorStrips => self.interleave(),
        }
    }

    /// Padded dims for a logical `k x n` weight matrix.
    pub fn padded_dims(&self, k: usize, n: usize) -> (usize, usize) {
        (
            round_up(k, self.k_granularity()),
            round_up(n, self.block_cols()),
        )
    }

    pub fn col_blocks(&self, padded_cols: usize) -> usize {
        padded_cols / self.block_cols()
    }

    /// Bitmap bits spanned by one column block (all padded inner rows).
    pub fn bits_per_block(&self, padded_rows: usize) -> usize {
        padded_rows * self.block_cols()
    }
}

pub(crate) fn round_up(v: usize, to: usize) -> usize {
    v.div_ceil(to) * to
}

/// Storable element of a packed tensor.
///
/// `is_stored_zero` decides pruned-vs-kept at pack time: a BF16 element is
/// pruned only when its bit pattern is exactly +0.0, so -0.0 and every other
/// pattern round-trip bit-exactly.
pub trait Element:
    Copy + PartialEq + Default + Send + Sync + std::fmt::Debug + 'static + private::Sealed
{
    const DTYPE: Dtype;
    const SIZE: usize;

    fn is_stored_zero(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

mod private {
    pub trait Sealed {}
    impl Sealed for half::bf16 {}
    impl Sealed for i8 {}
}

impl Element for bf16 {
    const DTYPE: Dtype = Dtype::Bf16;
    const SIZE: usize = 2;

    fn is_stored_zero(self) -> bool {
        self.to_bits() == 0
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        bf16::from_bits(u16::from_le_bytes([bytes[0], bytes[1]]))
    }
}

impl Element for i8 {
    const DTYPE: Dtype = Dtype::Int8;
    const SIZE: usize = 1;

    fn is_stored_zero(self) -> bool {
        self == 0
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

/// Bitmap-compressed weight or KV matrix.
///
/// Immutable after construction; safe to share read-only across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSparseTensor<T> {
    logical_rows: usize,
    logical_cols: usize,
    padded_rows: usize,
    padded_cols: usize,
    layout: TileLayout,
    bitmap: Vec<u32>,
    values: Vec<T>,
    thread_cursors: Vec<u32>,
    num_workers: usize,
}

impl<T: Element> PackedSparseTensor<T> {
    pub fn logical_rows(&self) -> usize {
        self.logical_rows
    }

    pub fn logical_cols(&self) -> usize {
        self.logical_cols
    }

    pub fn padded_rows(&self) -> usize {
        self.padded_rows
    }

    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn bitmap(&self) -> &[u32] {
        &self.bitmap
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn thread_cursors(&self) -> &[u32] {
        &self.thread_cursors
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_blocks(&self) -> usize {
        self.layout.col_blocks(self.padded_cols)
    }

    /// Bytes of weight traffic per forward pass: bitmap + values + cursors.
    pub fn compressed_size_bytes(&self) -> usize {
        self.padded_rows * self.padded_cols / 8 + T::SIZE * self.values.len() + 4 * self.num_workers
    }

    /// Metadata words of the tile at `tile_index` in consumption order.
    pub(crate) fn tile_words(&self, tile_index: usize) -> &[u32] {
        let wpt = self.layout.words_per_tile();
        &self.bitmap[tile_index * wpt..(tile_index + 1) * wpt]
    }

    /// Rebuild cursors for a different worker count without repacking.
    pub fn repartitioned(&self, num_workers: usize) -> Result<Self> {
        let blocks = self.col_blocks();
        if num_workers == 0 || num_workers > blocks {
            return Err(Error::OverPartitioned {
                workers: num_workers,
                blocks,
            });
        }
        let starts = partition_start_bits(self.layout, self.padded_rows, blocks, num_workers);
        let thread_cursors = build_thread_cursors(&self.bitmap, &starts)?;
        Ok(PackedSparseTensor {
            thread_cursors,
            num_workers,
            ..self.clone()
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        logical_rows: usize,
        logical_cols: usize,
        padded_rows: usize,
        padded_cols: usize,
        layout: TileLayout,
        bitmap: Vec<u32>,
        values: Vec<T>,
        thread_cursors: Vec<u32>,
        num_workers: usize,
    ) -> Self {
        PackedSparseTensor {
            logical_rows,
            logical_cols,
            padded_rows,
            padded_cols,
            layout,
            bitmap,
            values,
            thread_cursors,
            num_workers,
        }
    }
}

/// Dense scratch for one decompressed tile, reused across iterations.
#[derive(Debug)]
pub struct TileBuffer<T> {
    data: Box<[T]>,
}

impl<T: Element> TileBuffer<T> {
    pub fn new(layout: TileLayout) -> Self {
        TileBuffer {
            data: vec![T::default(); layout.tile_elems()].into_boxed_slice(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Visit every packed element position in order, yielding logical `(k, n)`.
///
/// Positions in the padding region yield coordinates at or beyond the
/// logical dims; callers treat those as zero.
pub(crate) fn for_each_packed(
    layout: TileLayout,
    padded_rows: usize,
    padded_cols: usize,
    mut visit: impl FnMut(usize, usize),
) {
    let il = layout.interleave();
    match layout.order() {
        PackOrder::Tiled => {
            let k_tile = layout.k_tile();
            let n_tile = layout.n_tile();
            let tile_cols = layout.tile_cols();
            let k_tiles = padded_rows / k_tile;
            let blocks = padded_cols / COL_BLOCK_COLS;
            for cb in 0..blocks {
                for kt in 0..k_tiles {
                    for wt in 0..2 {
                        let n_base = cb * COL_BLOCK_COLS + wt * n_tile;
                        let k_base = kt * k_tile;
                        for r in 0..TILE_ROWS {
                            for p in 0..tile_cols {
                                visit(k_base + r * il + p % il, n_base + p / il);
                            }
                        }
                    }
                }
            }
        }
        PackOrder::VectorStrips => {
            let strips = padded_cols / STRIP_COLS;
            let k_steps = padded_rows / il;
            for strip in 0..strips {
                let n_base = strip * STRIP_COLS;
                for step in 0..k_steps {
                    let k_base = step * il;
                    for lane in 0..STRIP_COLS {
                        for j in 0..il {
                            visit(k_base + j, n_base + lane);
                        }
                    }
                }
            }
        }
    }
}

fn partition_spans(n_blocks: usize, workers: usize) -> Vec<(usize, usize)> {
    let base = n_blocks / workers;
    let rem = n_blocks % workers;
    (0..workers)
        .map(|t| {
            let start = t * base + t.min(rem);
            (start, base + usize::from(t < rem))
        })
        .collect()
}

/// Column-block ranges owned by each worker: contiguous and balanced, every
/// worker holding at least one block when `workers <= n_blocks`.
pub fn partition_blocks(n_blocks: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    partition_spans(n_blocks, workers)
        .into_iter()
        .map(|(s, l)| s..s + l)
        .collect()
}

fn partition_start_bits(
    layout: TileLayout,
    padded_rows: usize,
    n_blocks: usize,
    workers: usize,
) -> Vec<usize> {
    let bits_per_block = layout.bits_per_block(padded_rows);
    partition_spans(n_blocks, workers)
        .into_iter()
        .map(|(s, _)| s * bits_per_block)
        .collect()
}

/// Count set bits preceding each partition start.
///
/// Starts must be strictly increasing and word-aligned; the counts are the
/// per-worker value-stream entry points, computed once at load time.
pub fn build_thread_cursors(bitmap: &[u32], partition_starts: &[usize]) -> Result<Vec<u32>> {
    let total_bits = bitmap.len() * 32;
    let mut prev: Option<usize> = None;
    for &start in partition_starts {
        if start % 32 != 0 {
            return Err(Error::UnalignedPartition(start));
        }
        if start > total_bits {
            return Err(Error::UnalignedPartition(start));
        }
        if let Some(p) = prev {
            if start <= p {
                return Err(Error::UnalignedPartition(start));
            }
        }
        prev = Some(start);
    }

    let mut cursors = Vec::with_capacity(partition_starts.len());
    let mut count: u64 = 0;
    let mut word = 0usize;
    for &start in partition_starts {
        let end_word = start / 32;
        while word < end_word {
            count += u64::from(bitmap[word].count_ones());
            word += 1;
        }
        cursors.push(count as u32);
    }
    Ok(cursors)
}

/// Compress a pruned dense matrix (zeros are the pruned entries).
///
/// Dims are zero-padded to tile granularity so every kernel loop is
/// boundary-free; `num_workers` is frozen into the tensor because the value
/// cursors depend on the partition.
pub fn pack_weights<T: Element>(
    dense: &Matrix<T>,
    layout: TileLayout,
    num_workers: usize,
) -> Result<PackedSparseTensor<T>> {
    if layout.dtype() != T::DTYPE {
        return Err(Error::DimMismatch(format!(
            "layout dtype {:?} does not match element dtype {:?}",
            layout.dtype(),
            T::DTYPE
        )));
    }
    let (k, n) = (dense.rows(), dense.cols());
    if k == 0 || n == 0 {
        return Err(Error::DimMismatch("weight dims must be >= 1".into()));
    }
    if num_workers == 0 {
        return Err(Error::DimMismatch("num_workers must be >= 1".into()));
    }
    let (padded_rows, padded_cols) = layout.padded_dims(k, n);
    let blocks = layout.col_blocks(padded_cols);
    if num_workers > blocks {
        return Err(Error::OverPartitioned {
            workers: num_workers,
            blocks,
        });
    }

    let total = padded_rows * padded_cols;
    let mut bitmap = vec![0u32; total / 32];
    let mut values = Vec::new();
    let mut idx = 0usize;
    for_each_packed(layout, padded_rows, padded_cols, |kk, nn| {
        if kk < k && nn < n {
            let elem = dense.get(kk, nn);
            if !elem.is_stored_zero() {
                bitmap[idx / 32] |= 1 << (idx % 32);
                values.push(elem);
            }
        }
        idx += 1;
    });
    debug_assert_eq!(idx, total);

    let starts = partition_start_bits(layout, padded_rows, blocks, num_workers);
    let thread_cursors = build_thread_cursors(&bitmap, &starts)?;

    Ok(PackedSparseTensor {
        logical_rows: k,
        logical_cols: n,
        padded_rows,
        padded_cols,
        layout,
        bitmap,
        values,
        thread_cursors,
        num_workers,
    })
}

/// Reconstruct the dense logical matrix: zeros at clear bits, padding
/// stripped.
pub fn unpack_weights<T: Element>(t: &PackedSparseTensor<T>) -> Result<Matrix<T>> {
    let popcount: u64 = t.bitmap.iter().map(|w| u64::from(w.count_ones())).sum();
    if popcount != t.values.len() as u64 {
        return Err(Error::CorruptTensor(format!(
            "bitmap popcount {} != value count {}",
            popcount,
            t.values.len()
        )));
    }
    let mut dense = Matrix::zeros(t.logical_rows, t.logical_cols);
    let mut idx = 0usize;
    let mut vi = 0usize;
    for_each_packed(t.layout, t.padded_rows, t.padded_cols, |k, n| {
        if t.bitmap[idx / 32] >> (idx % 32) & 1 == 1 {
            if k < t.logical_rows && n < t.logical_cols {
                dense.set(k, n, t.values[vi]);
            }
            vi += 1;
        }
        idx += 1;
    });
    Ok(dense)
}
