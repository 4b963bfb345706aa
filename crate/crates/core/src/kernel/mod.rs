//! Tiled GEMM kernels: dense baseline, sparse with on-the-fly tile
//! decompression, and the lane-vector variant.

mod decompress;
mod engine;
mod lanes;
mod plan;
mod simd;
mod vector;

pub use decompress::decompress_tile;
pub use engine::{pack_dense_tiles, DenseTiles, KernelElement};
pub use lanes::{prefix_sum16, row_popcounts, Lane16};
pub use plan::{GemmPlan, ROW_BLOCK_ROWS};
pub use vector::{vector_sparse_gemm, DEFAULT_NEURON_GROUPS, MAX_NEURON_GROUPS};

pub(crate) use engine::{run_gemm, DenseSource, SparseSource};

use half::bf16;

use crate::error::{Error, Result};
use crate::format::{Dtype, Element, PackOrder, PackedSparseTensor};
use crate::matrix::Matrix;

fn check_weight_dims<T: Element>(
    rows: usize,
    cols: usize,
    dtype: Dtype,
    order: PackOrder,
    plan: &GemmPlan,
) -> Result<()> {
    if order != PackOrder::Tiled {
        return Err(Error::DimMismatch(
            "tiled kernels require the tiled pack order".into(),
        ));
    }
    if dtype != T::DTYPE || plan.layout().dtype() != T::DTYPE {
        return Err(Error::DimMismatch(
            "dtype mismatch between plan and weights".into(),
        ));
    }
    if rows != plan.inner() || cols != plan.out_cols() {
        return Err(Error::DimMismatch(format!(
            "weights {}x{} do not match plan inner {} x out_cols {}",
            rows,
            cols,
            plan.inner(),
            plan.out_cols()
        )));
    }
    Ok(())
}

/// Dense tiled GEMM: `OUT = IN x W` with f32 accumulation.
pub fn dense_gemm(
    input: &Matrix<bf16>,
    weights: &DenseTiles<bf16>,
    plan: &GemmPlan,
) -> Result<Matrix<f32>> {
    check_weight_dims::<bf16>(
        weights.logical_rows(),
        weights.logical_cols(),
        weights.layout().dtype(),
        weights.layout().order(),
        plan,
    )?;
    run_gemm(input, plan, || DenseSource::new(weights))
}

/// Sparse tiled GEMM: same traversal as [`dense_gemm`] with each weight
/// tile decompressed into a per-worker scratch buffer just before its
/// multiply. Bit-identical to `dense_gemm` on the unpacked weights.
pub fn sparse_gemm(
    input: &Matrix<bf16>,
    weights: &PackedSparseTensor<bf16>,
    plan: &GemmPlan,
) -> Result<Matrix<f32>> {
    check_weight_dims::<bf16>(
        weights.logical_rows(),
        weights.logical_cols(),
        weights.layout().dtype(),
        weights.layout().order(),
        plan,
    )?;
    if weights.num_workers() != plan.col_workers() {
        return Err(Error::RepartitionRequired {
            packed: weights.num_workers(),
            plan: plan.col_workers(),
        });
    }
    run_gemm(input, plan, || SparseSource::new(weights))
}

/// Analytic weight-traffic bytes for one dense forward pass.
pub fn bytes_read_model_dense(inner: usize, out_cols: usize, dtype: Dtype) -> u64 {
    let layout = crate::format::TileLayout::tiled(dtype);
    let (pr, pc) = layout.padded_dims(inner, out_cols);
    (pr * pc * dtype.element_bytes()) as u64
}

/// Analytic weight-traffic bytes for one sparse forward pass.
pub fn bytes_read_model_sparse<T: Element>(weights: &PackedSparseTensor<T>) -> u64 {
    weights.compressed_size_bytes() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{pack_weights, TileLayout};
    use crate::oracle;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn bf(v: f32) -> bf16 {
        bf16::from_f32(v)
    }

    fn random_bf16(rng: &mut StdRng, rows: usize, cols: usize, zero_frac: f64) -> Matrix<bf16> {
        Matrix::from_fn(rows, cols, |_, _| {
            if zero_frac > 0.0 && rng.gen_bool(zero_frac) {
                bf(0.0)
            } else {
                bf(rng.gen_range(-1.0f32..1.0))
            }
        })
    }

    #[test]
    fn identity_weights_copy_input() {
        let k = 64;
        let id = Matrix::from_fn(k, k, |r, c| bf(if r == c { 1.0 } else { 0.0 }));
        let tiles = pack_dense_tiles(&id, TileLayout::tiled(Dtype::Bf16)).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let input = random_bf16(&mut rng, 3, k, 0.0);
        let plan = GemmPlan::new(3, k, k, 1, Dtype::Bf16).unwrap();
        let out = dense_gemm(&input, &tiles, &plan).unwrap();
        for r in 0..3 {
            for c in 0..k {
                assert_eq!(out.get(r, c), input.get(r, c).to_f32());
            }
        }
    }

    #[test]
    fn dot_product_matches_scalar_ordered_sum() {
        let k = 96;
        let mut rng = StdRng::seed_from_u64(2);
        let input = random_bf16(&mut rng, 1, k, 0.0);
        let w = random_bf16(&mut rng, k, 1, 0.0);
        let tiles = pack_dense_tiles(&w, TileLayout::tiled(Dtype::Bf16)).unwrap();
        let plan = GemmPlan::new(1, k, 1, 1, Dtype::Bf16).unwrap();
        let out = dense_gemm(&input, &tiles, &plan).unwrap();

        let mut acc = 0f32;
        for i in 0..k {
            acc += input.get(0, i).to_f32() * w.get(i, 0).to_f32();
        }
        assert_eq!(out.get(0, 0), acc, "same order must give the same bits");
    }

    #[test]
    fn dense_matches_f64_oracle() {
        let (m, k, n) = (2, 64, 32);
        let mut rng = StdRng::seed_from_u64(3);
        let input = random_bf16(&mut rng, m, k, 0.0);
        let w = random_bf16(&mut rng, k, n, 0.0);
        let tiles = pack_dense_tiles(&w, TileLayout::tiled(Dtype::Bf16)).unwrap();
        let plan = GemmPlan::new(m, k, n, 1, Dtype::Bf16).unwrap();
        let out = dense_gemm(&input, &tiles, &plan).unwrap();
        let reference = oracle::naive_gemm_f64(&input.to_f64(), &w.to_f64()).unwrap();
        for r in 0..m {
            for c in 0..n {
                let got = out.get(r, c) as f64;
                let want = reference.get(r, c);
                let err = (got - want).abs() / want.abs().max(1.0);
                assert!(err <= 2f64.powi(-8), "({r},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn sparse_zero_sparsity_equals_dense_bit_exactly() {
        let (m, k, n) = (2, 64, 64);
        let mut rng = StdRng::seed_from_u64(4);
        let w = random_bf16(&mut rng, k, n, 0.0);
        let input = random_bf16(&mut rng, m, k, 0.0);
        let plan = GemmPlan::new(m, k, n, 2, Dtype::Bf16).unwrap();
        let packed = pack_weights(&w, TileLayout::tiled(Dtype::Bf16), plan.col_workers()).unwrap();
        let tiles = pack_dense_tiles(&w, TileLayout::tiled(Dtype::Bf16)).unwrap();
        let dense = dense_gemm(&input, &tiles, &plan).unwrap();
        let sparse = sparse_gemm(&input, &packed, &plan).unwrap();
        assert_eq!(dense, sparse);
    }

    #[test]
    fn full_sparsity_gives_zero_output() {
        let w: Matrix<bf16> = Matrix::zeros(64, 32);
        let packed = pack_weights(&w, TileLayout::tiled(Dtype::Bf16), 1).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let input = random_bf16(&mut rng, 1, 64, 0.0);
        let plan = GemmPlan::new(1, 64, 32, 1, Dtype::Bf16).unwrap();
        let out = sparse_gemm(&input, &packed, &plan).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repartition_mismatch_is_rejected() {
        let mut rng = StdRng::seed_from_u64(6);
        let w = random_bf16(&mut rng, 32, 128, 0.5);
        let packed = pack_weights(&w, TileLayout::tiled(Dtype::Bf16), 2).unwrap();
        let input = random_bf16(&mut rng, 1, 32, 0.0);
        let plan = GemmPlan::new(1, 32, 128, 4, Dtype::Bf16).unwrap();
        match sparse_gemm(&input, &packed, &plan) {
            Err(Error::RepartitionRequired { packed: 2, plan: 4 }) => {}
            other => panic!("expected repartition required, got {other:?}"),
        }
    }

    #[test]
    fn vector_path_identity() {
        let k = 32;
        let id = Matrix::from_fn(k, k, |r, c| bf(if r == c { 1.0 } else { 0.0 }));
        let packed = pack_weights(&id, TileLayout::vector(Dtype::Bf16), 1).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let input = random_bf16(&mut rng, 2, k, 0.0);
        let out = vector_sparse_gemm(&input, &packed, DEFAULT_NEURON_GROUPS).unwrap();
        for r in 0..2 {
            for c in 0..k {
                assert_eq!(out.get(r, c), input.get(r, c).to_f32());
            }
        }
    }

    #[test]
    fn vector_group_counts_agree() {
        let (m, k, n) = (2, 50, 70);
        let mut rng = StdRng::seed_from_u64(8);
        let w = random_bf16(&mut rng, k, n, 0.5);
        let input = random_bf16(&mut rng, m, k, 0.0);
        let packed = pack_weights(&w, TileLayout::vector(Dtype::Bf16), 2).unwrap();
        let g1 = vector_sparse_gemm(&input, &packed, 1).unwrap();
        let g4 = vector_sparse_gemm(&input, &packed, 4).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g4.as_slice()) {
            let err = (a - b).abs() as f64 / (*b as f64).abs().max(1.0);
            assert!(err <= 2f64.powi(-8));
        }
    }

    #[test]
    fn vector_matches_tiled_sparse_math() {
        let (m, k, n) = (1, 64, 48);
        let mut rng = StdRng::seed_from_u64(9);
        let w = random_bf16(&mut rng, k, n, 0.5);
        let input = random_bf16(&mut rng, m, k, 0.0);
        let tiled = pack_weights(&w, TileLayout::tiled(Dtype::Bf16), 1).unwrap();
        let vec_packed = pack_weights(&w, TileLayout::vector(Dtype::Bf16), 1).unwrap();
        let plan = GemmPlan::new(m, k, n, 1, Dtype::Bf16).unwrap();
        let a = sparse_gemm(&input, &tiled, &plan).unwrap();
        let b = vector_sparse_gemm(&input, &vec_packed, 4).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let err = (x - y).abs() as f64 / (*y as f64).abs().max(1.0);
            assert!(err <= 2f64.powi(-8));
        }
    }

    #[test]
    fn vector_rejects_bad_inputs() {
        let mut rng = StdRng::seed_from_u64(10);
        let w = random_bf16(&mut rng, 32, 32, 0.5);
        let vec_packed = pack_weights(&w, TileLayout::vector(Dtype::Bf16), 1).unwrap();
        let tiled = pack_weights(&w, TileLayout::tiled(Dtype::Bf16), 1).unwrap();
        let input = random_bf16(&mut rng, 1, 32, 0.0);
        assert!(matches!(
            vector_sparse_gemm(&input, &vec_packed, 0),
            Err(Error::UnsupportedGroupCount(0))
        ));
        assert!(matches!(
            vector_sparse_gemm(&input, &vec_packed, 9),
            Err(Error::UnsupportedGroupCount(9))
        ));
        assert!(vector_sparse_gemm(&input, &tiled, 4).is_err());
    }

    #[test]
    fn bytes_model_examples() {
        assert_eq!(
            bytes_read_model_dense(4096, 14336, Dtype::Bf16),
            117_440_512
        );
        // 0% sparsity costs 1.0625x dense for BF16 (bitmap overhead).
        let mut rng = StdRng::seed_from_u64(11);
        let w = random_bf16(&mut rng, 256, 256, 0.0);
        let packed = pack_weights(&w, TileLayout::tiled(Dtype::Bf16), 1).unwrap();
        let dense = bytes_read_model_dense(256, 256, Dtype::Bf16) as f64;
        let sparse = bytes_read_model_sparse(&packed) as f64 - 4.0;
        assert!((sparse / dense - 1.0625).abs() < 1e-9);
    }

    #[test]
    fn bytes_model_crossover_at_one_sixteenth() {
        // Sparse wins exactly when sparsity > 1/16 for BF16 (bitmap costs
        // 1/16th of an element per element), > 1/8 for INT8.
        for (dtype, threshold) in [(Dtype::Bf16, 16.0), (Dtype::Int8, 8.0)] {
            let elem_bytes = dtype.element_bytes() as f64;
            let padded = 512.0 * 64.0;
            let dense = padded * elem_bytes;
            for sparsity in [0.0, 1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 0.25, 0.9] {
                let nnz = padded * (1.0 - sparsity);
                let sparse = padded / 8.0 + elem_bytes * nnz;
                let wins = sparse < dense;
                let expect = sparsity > 1.0 / threshold;
                assert_eq!(wins, expect, "{dtype:?} at sparsity {sparsity}");
            }
        }
    }
}
