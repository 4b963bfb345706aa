//! Lane-vector sparse GEMM: one input element broadcast against strips of
//! 16 neuron columns, with `num_neuron_groups` strips accumulated per pass.
//!
//! Per output column the math is the same inner-index-ascending f32
//! accumulation as the tiled path; the group count only changes how many
//! strip accumulators are live at once.

use half::bf16;

use crate::error::{Error, Result};
use crate::format::{partition_blocks, Dtype, PackOrder, PackedSparseTensor, STRIP_COLS};
use crate::kernel::decompress::expand_word;
use crate::matrix::Matrix;

/// Supported neuron-group range.
pub const MAX_NEURON_GROUPS: usize = 8;

/// Default group count; more groups keep more accumulators live per pass.
pub const DEFAULT_NEURON_GROUPS: usize = 4;

/// Value-stream start index for every strip, from one bitmap scan.
fn strip_offsets(t: &PackedSparseTensor<bf16>, words_per_strip: usize) -> Vec<usize> {
    let strips = t.padded_cols() / STRIP_COLS;
    let mut offsets = Vec::with_capacity(strips);
    let mut acc = 0usize;
    for s in 0..strips {
        offsets.push(acc);
        for w in &t.bitmap()[s * words_per_strip..(s + 1) * words_per_strip] {
            acc += w.count_ones() as usize;
        }
    }
    offsets
}

pub fn vector_sparse_gemm(
    input: &Matrix<bf16>,
    weights: &PackedSparseTensor<bf16>,
    num_neuron_groups: usize,
) -> Result<Matrix<f32>> {
    if !(1..=MAX_NEURON_GROUPS).contains(&num_neuron_groups) {
        return Err(Error::UnsupportedGroupCount(num_neuron_groups));
    }
    if weights.layout().order() != PackOrder::VectorStrips
        || weights.layout().dtype() != Dtype::Bf16
    {
        return Err(Error::DimMismatch(
            "weights must be packed in the BF16 vector-strip layout".into(),
        ));
    }
    if input.cols() != weights.logical_rows() {
        return Err(Error::DimMismatch(format!(
            "input inner dim {} != weight rows {}",
            input.cols(),
            weights.logical_rows()
        )));
    }

    let il = weights.layout().interleave();
    let k_pad = weights.padded_rows();
    let k_steps = k_pad / il;
    // One metadata word per inner step per strip (16 lanes x interleave 2).
    let words_per_strip = k_steps;
    let m = input.rows();
    let n = weights.logical_cols();
    let strips = weights.padded_cols() / STRIP_COLS;

    let offsets = strip_offsets(weights, words_per_strip);
    let parts = partition_blocks(strips, weights.num_workers());

    let mut input_pad = vec![bf16::default(); m * k_pad];
    for r in 0..m {
        input_pad[r * k_pad..r * k_pad + input.cols()].copy_from_slice(input.row(r));
    }

    let worker = |strip_range: std::ops::Range<usize>| -> Vec<f32> {
        let mut rect = vec![0f32; m * strip_range.len() * STRIP_COLS];
        let rect_cols = strip_range.len() * STRIP_COLS;
        let mut expanded = [bf16::default(); 32];
        for set_start in strip_range.clone().step_by(num_neuron_groups) {
            let set_end = (set_start + num_neuron_groups).min(strip_range.end);
            for row in 0..m {
                let a = &input_pad[row * k_pad..(row + 1) * k_pad];
                let mut acc = [[0f32; STRIP_COLS]; MAX_NEURON_GROUPS];
                let mut cursors = [0usize; MAX_NEURON_GROUPS];
                for (g, strip) in (set_start..set_end).enumerate() {
                    cursors[g] = offsets[strip];
                }
                for step in 0..k_steps {
                    for (g, strip) in (set_start..set_end).enumerate() {
                        let word = weights.bitmap()[strip * words_per_strip + step];
                        cursors[g] +=
                            expand_word(word, &weights.values()[cursors[g]..], &mut expanded);
                        let lanes = &mut acc[g];
                        for j in 0..il {
                            let a_v = a[step * il + j].to_f32();
                            for lane in 0..STRIP_COLS {
                                lanes[lane] += a_v * expanded[lane * il + j].to_f32();
                            }
                        }
                    }
                }
                for (g, strip) in (set_start..set_end).enumerate() {
                    let c0 = (strip - strip_range.start) * STRIP_COLS;
                    rect[row * rect_cols + c0..row * rect_cols + c0 + STRIP_COLS]
                        .copy_from_slice(&acc[g]);
                }
            }
        }
        rect
    };

    let rects: Vec<Vec<f32>> = if parts.len() == 1 {
        vec![worker(parts[0].clone())]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = parts
                .iter()
                .map(|p| {
                    let worker = &worker;
                    let p = p.clone();
                    scope.spawn(move || worker(p))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };

    let mut out = Matrix::zeros(m, n);
    for (part, rect) in parts.iter().zip(rects) {
        let rect_cols = part.len() * STRIP_COLS;
        let col0 = part.start * STRIP_COLS;
        if col0 >= n {
            continue;
        }
        let valid = rect_cols.min(n - col0);
        for row in 0..m {
            out.as_mut_slice()[row * n + col0..row * n + col0 + valid]
                .copy_from_slice(&rect[row * rect_cols..row * rect_cols + valid]);
        }
    }
    Ok(out)
}
