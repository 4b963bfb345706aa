//! Tiled GEMM engine shared by the dense and sparse paths.
//!
//! Both paths run the same schedule and the same accumulation order
//! (ascending inner tiles, then tile rows, then interleave positions, i.e.
//! ascending inner index per output element), so the sparse path is
//! bit-identical to the dense path on the unpacked weights. The only
//! difference is where weight tiles come from: a plain slice into
//! pre-reordered dense storage, or a decompression into a per-worker
//! scratch tile.

use half::bf16;

use crate::error::{Error, Result};
use crate::format::{for_each_packed, Element, PackedSparseTensor, TileBuffer, TileLayout};
use crate::kernel::decompress::decompress_tile;
use crate::kernel::plan::{GemmPlan, ROW_BLOCK_ROWS};
use crate::matrix::Matrix;

/// Element type with its accumulator arithmetic.
///
/// `accumulate_tile` multiplies one input row against one weight tile with
/// a fixed per-output-element order: tile rows ascending, interleave
/// positions ascending, i.e. the inner index `k = r*interleave + j` strictly
/// ascending. Every kernel path shares these implementations, which is what
/// makes sparse-vs-dense bit-exactness hold.
pub trait KernelElement: Element {
    type Acc: Copy + Default + Send + PartialEq + std::fmt::Debug + 'static;
    /// Input operand domain: converted once per call, exactly.
    type AInput: Copy + Default + Send + Sync + 'static;

    fn input_of(v: Self) -> Self::AInput;

    /// `acc[n] (+)= sum_k a[k] * w[k, n]` for one 16-column weight tile, with
    /// `a` holding `k_tile` converted input elements.
    fn accumulate_tile(acc: &mut [Self::Acc; 16], a: &[Self::AInput], w_tile: &[Self]);
}

/// Portable BF16 tile multiply; defines the semantics the accelerated
/// backend must reproduce bit-for-bit.
pub(crate) fn accumulate_tile_bf16_scalar(acc: &mut [f32; 16], a: &[f32], w_tile: &[bf16]) {
    // Both operands convert to f32 exactly; multiply and accumulate in
    // f32. Packed row r holds [w(2r,0), w(2r+1,0), w(2r,1), ...].
    for (r, w_row) in w_tile.chunks_exact(32).enumerate() {
        let mut wf = [0f32; 32];
        for (dst, src) in wf.iter_mut().zip(w_row) {
            *dst = src.to_f32();
        }
        let a0 = a[2 * r];
        let a1 = a[2 * r + 1];
        for n in 0..16 {
            acc[n] += a0 * wf[2 * n];
            acc[n] += a1 * wf[2 * n + 1];
        }
    }
}

pub(crate) fn accumulate_tile_i8_scalar(acc: &mut [i32; 16], a: &[i32], w_tile: &[i8]) {
    for (r, w_row) in w_tile.chunks_exact(64).enumerate() {
        let a0 = a[4 * r];
        let a1 = a[4 * r + 1];
        let a2 = a[4 * r + 2];
        let a3 = a[4 * r + 3];
        for n in 0..16 {
            let mut v = acc[n];
            v = v.wrapping_add(a0.wrapping_mul(w_row[4 * n] as i32));
            v = v.wrapping_add(a1.wrapping_mul(w_row[4 * n + 1] as i32));
            v = v.wrapping_add(a2.wrapping_mul(w_row[4 * n + 2] as i32));
            v = v.wrapping_add(a3.wrapping_mul(w_row[4 * n + 3] as i32));
            acc[n] = v;
        }
    }
}

impl KernelElement for bf16 {
    type Acc = f32;
    type AInput = f32;

    #[inline(always)]
    fn input_of(v: bf16) -> f32 {
        v.to_f32()
    }

    #[inline]
    fn accumulate_tile(acc: &mut [f32; 16], a: &[f32], w_tile: &[bf16]) {
        #[cfg(target_arch = "x86_64")]
        if crate::kernel::simd::accel_available() {
            // Safety: feature set checked at runtime; slice sizes hold by
            // the tile layout.
            return unsafe { crate::kernel::simd::accumulate_tile_bf16(acc, a, w_tile) };
        }
        accumulate_tile_bf16_scalar(acc, a, w_tile)
    }
}

impl KernelElement for i8 {
    type Acc = i32;
    type AInput = i32;

    #[inline(always)]
    fn input_of(v: i8) -> i32 {
        v as i32
    }

    #[inline]
    fn accumulate_tile(acc: &mut [i32; 16], a: &[i32], w_tile: &[i8]) {
        #[cfg(target_arch = "x86_64")]
        if crate::kernel::simd::accel_available() {
            return unsafe { crate::kernel::simd::accumulate_tile_i8(acc, a, w_tile) };
        }
        accumulate_tile_i8_scalar(acc, a, w_tile)
    }
}

/// Dense weights pre-reordered into packed tile order.
#[derive(Debug, Clone)]
pub struct DenseTiles<T> {
    logical_rows: usize,
    logical_cols: usize,
    padded_rows: usize,
    padded_cols: usize,
    layout: TileLayout,
    data: Vec<T>,
}

impl<T: Element> DenseTiles<T> {
    pub fn logical_rows(&self) -> usize {
        self.logical_rows
    }

    pub fn logical_cols(&self) -> usize {
        self.logical_cols
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn padded_rows(&self) -> usize {
        self.padded_rows
    }

    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    /// Total stored elements (padded dims).
    pub fn padded_len(&self) -> usize {
        self.data.len()
    }

    fn tile(&self, tile_index: usize) -> &[T] {
        let te = self.layout.tile_elems();
        &self.data[tile_index * te..(tile_index + 1) * te]
    }
}

/// Reorder a dense weight matrix into tile-packed storage (zeros included).
pub fn pack_dense_tiles<T: Element>(
    dense: &Matrix<T>,
    layout: TileLayout,
) -> Result<DenseTiles<T>> {
    if layout.dtype() != T::DTYPE {
        return Err(Error::DimMismatch("layout dtype mismatch".into()));
    }
    let (k, n) = (dense.rows(), dense.cols());
    if k == 0 || n == 0 {
        return Err(Error::DimMismatch("weight dims must be >= 1".into()));
    }
    let (padded_rows, padded_cols) = layout.padded_dims(k, n);
    let mut data = Vec::with_capacity(padded_rows * padded_cols);
    for_each_packed(layout, padded_rows, padded_cols, |kk, nn| {
        data.push(if kk < k && nn < n {
            dense.get(kk, nn)
        } else {
            T::default()
        });
    });
    Ok(DenseTiles {
        logical_rows: k,
        logical_cols: n,
        padded_rows,
        padded_cols,
        layout,
        data,
    })
}

/// Provider of weight tiles in consumption order.
pub(crate) trait TileSource<T: Element> {
    /// Called at the start of each row-block pass; resets the value scan to
    /// the worker's cursor.
    fn start_pass(&mut self, col_worker: usize) -> Result<()>;

    fn tile(&mut self, tile_index: usize) -> Result<&[T]>;
}

pub(crate) struct DenseSource<'a, T> {
    tiles: &'a DenseTiles<T>,
}

impl<'a, T: Element> DenseSource<'a, T> {
    pub(crate) fn new(tiles: &'a DenseTiles<T>) -> Self {
        DenseSource { tiles }
    }
}

impl<T: Element> TileSource<T> for DenseSource<'_, T> {
    fn start_pass(&mut self, _col_worker: usize) -> Result<()> {
        Ok(())
    }

    fn tile(&mut self, tile_index: usize) -> Result<&[T]> {
        Ok(self.tiles.tile(tile_index))
    }
}

pub(crate) struct SparseSource<'a, T: Element> {
    tensor: &'a PackedSparseTensor<T>,
    buf: TileBuffer<T>,
    cursor: usize,
}

impl<'a, T: Element> SparseSource<'a, T> {
    pub(crate) fn new(tensor: &'a PackedSparseTensor<T>) -> Self {
        SparseSource {
            tensor,
            buf: TileBuffer::new(tensor.layout()),
            cursor: 0,
        }
    }
}

impl<T: Element> TileSource<T> for SparseSource<'_, T> {
    fn start_pass(&mut self, col_worker: usize) -> Result<()> {
        self.cursor = self.tensor.thread_cursors()[col_worker] as usize;
        Ok(())
    }

    fn tile(&mut self, tile_index: usize) -> Result<&[T]> {
        self.cursor = decompress_tile(
            self.tensor.layout(),
            self.tensor.tile_words(tile_index),
            self.tensor.values(),
            self.cursor,
            &mut self.buf,
        )?;
        Ok(self.buf.as_slice())
    }
}

fn pad_input<T: KernelElement>(input: &Matrix<T>, padded_inner: usize) -> Vec<T::AInput> {
    let m = input.rows();
    let k = input.cols();
    let mut out = vec![T::AInput::default(); m * padded_inner];
    for r in 0..m {
        for (dst, &src) in out[r * padded_inner..r * padded_inner + k]
            .iter_mut()
            .zip(input.row(r))
        {
            *dst = T::input_of(src);
        }
    }
    out
}

struct WorkItem {
    col_worker: usize,
    col_blocks: std::ops::Range<usize>,
    row_first: usize,
    row_count: usize,
}

fn worker_body<T: KernelElement, S: TileSource<T>>(
    item: &WorkItem,
    input_pad: &[T::AInput],
    plan: &GemmPlan,
    source: &mut S,
) -> Result<Vec<T::Acc>> {
    let layout = plan.layout();
    let k_tiles = plan.inner_tiles();
    let k_tile = layout.k_tile();
    let m = plan.out_rows();
    let padded_inner = plan.padded_inner();

    let rect_cols = item.col_blocks.len() * 32;
    let mut rect = vec![T::Acc::default(); item.row_count * rect_cols];
    let mut acc = [T::Acc::default(); ROW_BLOCK_ROWS * 32];

    let row_block0 = item.row_first / ROW_BLOCK_ROWS;
    let row_blocks = item.row_count.div_ceil(ROW_BLOCK_ROWS);
    for rb in row_block0..row_block0 + row_blocks {
        source.start_pass(item.col_worker)?;
        let r0 = rb * ROW_BLOCK_ROWS;
        let rows = ROW_BLOCK_ROWS.min(m - r0);
        for cb in item.col_blocks.clone() {
            let acc_rect = &mut acc[..rows * 32];
            acc_rect.fill(T::Acc::default());
            for kt in 0..k_tiles {
                for wt in 0..2 {
                    let tile_index = (cb * k_tiles + kt) * 2 + wt;
                    let w_tile = source.tile(tile_index)?;
                    for mr in 0..rows {
                        let a_row = &input_pad[(r0 + mr) * padded_inner + kt * k_tile..][..k_tile];
                        let acc_row: &mut [T::Acc; 16] = (&mut acc_rect
                            [mr * 32 + wt * 16..mr * 32 + wt * 16 + 16])
                            .try_into()
                            .expect("16-wide accumulator row");
                        T::accumulate_tile(acc_row, a_row, w_tile);
                    }
                }
            }
            // Store the accumulator set into the worker's rectangle.
            let rect_c0 = (cb - item.col_blocks.start) * 32;
            for mr in 0..rows {
                let dst_row = r0 - item.row_first + mr;
                rect[dst_row * rect_cols + rect_c0..dst_row * rect_cols + rect_c0 + 32]
                    .copy_from_slice(&acc_rect[mr * 32..mr * 32 + 32]);
            }
        }
    }
    Ok(rect)
}

/// Run the tiled schedule over all work items, threading when the plan has
/// more than one. Workers own disjoint output rectangles; results are
/// stitched after the join.
pub(crate) fn run_gemm<T, S, F>(
    input: &Matrix<T>,
    plan: &GemmPlan,
    make_source: F,
) -> Result<Matrix<T::Acc>>
where
    T: KernelElement,
    S: TileSource<T>,
    F: Fn() -> S + Sync,
{
    if input.rows() != plan.out_rows() || input.cols() != plan.inner() {
        return Err(Error::DimMismatch(format!(
            "input {}x{} does not match plan {}x{}",
            input.rows(),
            input.cols(),
            plan.out_rows(),
            plan.inner()
        )));
    }

    let input_pad = pad_input(input, plan.padded_inner());
    let m = plan.out_rows();

    let mut items = Vec::new();
    for (cw, col_blocks) in plan.col_partition().into_iter().enumerate() {
        for rows in plan.row_partition() {
            let row_first = rows.start * ROW_BLOCK_ROWS;
            let row_end = (rows.end * ROW_BLOCK_ROWS).min(m);
            items.push(WorkItem {
                col_worker: cw,
                col_blocks: col_blocks.clone(),
                row_first,
                row_count: row_end - row_first,
            });
        }
    }

    let rects: Vec<Result<Vec<T::Acc>>> = if items.len() == 1 {
        let mut source = make_source();
        vec![worker_body(&items[0], &input_pad, plan, &mut source)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = items
                .iter()
                .map(|item| {
                    let input_pad = &input_pad;
                    let make_source = &make_source;
                    scope.spawn(move || {
                        let mut source = make_source();
                        worker_body(item, input_pad, plan, &mut source)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };

    let mut out = Matrix::zeros(m, plan.out_cols());
    for (item, rect) in items.iter().zip(rects) {
        let rect = rect?;
        let rect_cols = item.col_blocks.len() * 32;
        let col0 = item.col_blocks.start * 32;
        let valid_cols = rect_cols.min(plan.out_cols() - col0);
        for r in 0..item.row_count {
            let row = item.row_first + r;
            let src = &rect[r * rect_cols..r * rect_cols + valid_cols];
            out.as_mut_slice()[row * plan.out_cols() + col0..][..valid_cols].copy_from_slice(src);
        }
    }
    Ok(out)
}
