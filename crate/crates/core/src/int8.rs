//! Symmetric INT8 quantization and the INT8 dense/sparse GEMM path.
//!
//! Zero points are fixed at 0: weights get one scale per output column,
//! activations one scale per tensor, so the integer kernel needs no
//! zero-point correction terms. Accumulation is exact INT32; only the two
//! final f32 multiplies of the dequantization round.

use crate::error::{Error, Result};
use crate::format::{Dtype, PackedSparseTensor};
use crate::kernel::{run_gemm, DenseSource, DenseTiles, GemmPlan, SparseSource};
use crate::matrix::Matrix;

/// Inner-dimension bound asserted before INT32 accumulation.
pub const INT8_MAX_INNER: usize = 1 << 24;

/// Symmetric quantization scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    /// One scale per output column.
    pub weight_scales: Vec<f32>,
    /// One scale for the whole activation tensor.
    pub activation_scale: f32,
}

impl QuantParams {
    pub fn with_activation_scale(mut self, scale: f32) -> Self {
        self.activation_scale = scale;
        self
    }
}

/// `q = clamp(round_half_away_from_zero(x / scale), -127, 127)`.
///
/// -128 is excluded to keep the scheme symmetric.
pub fn quantize(x: &[f32], scale: f32) -> Result<Vec<i8>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DimMismatch("quantization scale must be > 0".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        // f32::round rounds half away from zero.
        out.push((v / scale).round().clamp(-127.0, 127.0) as i8);
    }
    Ok(out)
}

pub fn dequantize(q: &[i8], scale: f32) -> Vec<f32> {
    q.iter().map(|&v| v as f32 * scale).collect()
}

/// Per-output-column weight scales: `max|W[:,n]| / 127`, with all-zero
/// columns falling back to scale 1. The activation scale defaults to 1 and
/// is chosen per call via [`activation_scale_for`].
pub fn choose_scales(weights: &Matrix<f32>) -> QuantParams {
    let mut weight_scales = Vec::with_capacity(weights.cols());
    for n in 0..weights.cols() {
        let mut max = 0f32;
        for k in 0..weights.rows() {
            max = max.max(weights.get(k, n).abs());
        }
        weight_scales.push(if max > 0.0 { max / 127.0 } else { 1.0 });
    }
    QuantParams {
        weight_scales,
        activation_scale: 1.0,
    }
}

/// Per-tensor activation scale: `max|x| / 127`, 1 for an all-zero tensor.
pub fn activation_scale_for(x: &[f32]) -> f32 {
    let max = x.iter().fold(0f32, |m, v| m.max(v.abs()));
    if max > 0.0 {
        max / 127.0
    } else {
        1.0
    }
}

/// Quantize a weight matrix with its per-column scales.
pub fn quantize_weights(weights: &Matrix<f32>, q: &QuantParams) -> Result<Matrix<i8>> {
    if q.weight_scales.len() != weights.cols() {
        return Err(Error::DimMismatch(format!(
            "{} scales for {} columns",
            q.weight_scales.len(),
            weights.cols()
        )));
    }
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for n in 0..weights.cols() {
        let scale = q.weight_scales[n];
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::DimMismatch("quantization scale must be > 0".into()));
        }
        for k in 0..weights.rows() {
            let v = weights.get(k, n);
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            out.set(k, n, (v / scale).round().clamp(-127.0, 127.0) as i8);
        }
    }
    Ok(out)
}

fn check_inner_bound(plan: &GemmPlan) -> Result<()> {
    if plan.inner() > INT8_MAX_INNER {
        return Err(Error::InnerDimTooLarge(plan.inner()));
    }
    Ok(())
}

/// Dense INT8 GEMM returning raw INT32 accumulators.
pub fn int8_dense_gemm_i32(
    input: &Matrix<i8>,
    weights: &DenseTiles<i8>,
    plan: &GemmPlan,
) -> Result<Matrix<i32>> {
    check_inner_bound(plan)?;
    if weights.logical_rows() != plan.inner() || weights.logical_cols() != plan.out_cols() {
        return Err(Error::DimMismatch("weights do not match plan".into()));
    }
    run_gemm(input, plan, || DenseSource::new(weights))
}

/// Sparse INT8 GEMM returning raw INT32 accumulators; bit-exact against the
/// dense path on the unpacked weights.
pub fn int8_sparse_gemm_i32(
    input: &Matrix<i8>,
    weights: &PackedSparseTensor<i8>,
    plan: &GemmPlan,
) -> Result<Matrix<i32>> {
    check_inner_bound(plan)?;
    if weights.layout().dtype() != Dtype::Int8 {
        return Err(Error::DimMismatch("weights are not INT8".into()));
    }
    if weights.logical_rows() != plan.inner() || weights.logical_cols() != plan.out_cols() {
        return Err(Error::DimMismatch("weights do not match plan".into()));
    }
    if weights.num_workers() != plan.col_workers() {
        return Err(Error::RepartitionRequired {
            packed: weights.num_workers(),
            plan: plan.col_workers(),
        });
    }
    run_gemm(input, plan, || SparseSource::new(weights))
}

fn dequantize_output(acc: &Matrix<i32>, q: &QuantParams) -> Result<Matrix<f32>> {
    if q.weight_scales.len() != acc.cols() {
        return Err(Error::DimMismatch(format!(
            "{} scales for {} output columns",
            q.weight_scales.len(),
            acc.cols()
        )));
    }
    Ok(Matrix::from_fn(acc.rows(), acc.cols(), |m, n| {
        acc.get(m, n) as f32 * q.activation_scale * q.weight_scales[n]
    }))
}

/// Dense INT8 GEMM with dequantized f32 output.
pub fn int8_dense_gemm(
    input: &Matrix<i8>,
    weights: &DenseTiles<i8>,
    q: &QuantParams,
    plan: &GemmPlan,
) -> Result<Matrix<f32>> {
    dequantize_output(&int8_dense_gemm_i32(input, weights, plan)?, q)
}

/// Sparse INT8 GEMM with dequantized f32 output.
pub fn int8_sparse_gemm(
    input: &Matrix<i8>,
    weights: &PackedSparseTensor<i8>,
    q: &QuantParams,
    plan: &GemmPlan,
) -> Result<Matrix<f32>> {
    dequantize_output(&int8_sparse_gemm_i32(input, weights, plan)?, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{pack_weights, unpack_weights, TileLayout};
    use crate::kernel::pack_dense_tiles;
    use crate::oracle;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn quantize_fixed_points() {
        let q = quantize(&[0.0, 0.5, -0.5, 0.76, -0.76], 0.5).unwrap();
        assert_eq!(q, vec![0, 1, -1, 2, -2]);
        // Half-away-from-zero at the .5 boundary.
        let q = quantize(&[0.75, -0.75], 0.5).unwrap();
        assert_eq!(q, vec![2, -2]);
        // Clamp to +/-127.
        let q = quantize(&[1000.0, -1000.0], 1.0).unwrap();
        assert_eq!(q, vec![127, -127]);
        assert!(matches!(quantize(&[f32::NAN], 1.0), Err(Error::NonFinite)));
        assert!(quantize(&[1.0], 0.0).is_err());
    }

    #[test]
    fn quantize_round_trip_within_half_scale() {
        let mut rng = StdRng::seed_from_u64(1);
        let scale = 0.03f32;
        let x: Vec<f32> = (0..500).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let q = quantize(&x, scale).unwrap();
        let back = dequantize(&q, scale);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn scales_map_column_max_to_127() {
        let w = Matrix::from_vec(2, 3, vec![127.0, 0.0, 0.3, -64.0, 0.0, -0.9]);
        let q = choose_scales(&w);
        assert_eq!(q.weight_scales[0], 1.0);
        assert_eq!(q.weight_scales[1], 1.0); // zero column falls back to 1
        let quantized = quantize_weights(&w, &q).unwrap();
        assert_eq!(quantized.get(0, 0), 127);
        assert_eq!(quantized.get(0, 1), 0);
        assert_eq!(quantized.get(1, 1), 0);
        assert_eq!(quantized.get(1, 2), -127); // column max magnitude -> -127
    }

    #[test]
    fn argmax_maps_to_plus_minus_127() {
        let mut rng = StdRng::seed_from_u64(2);
        let w = Matrix::from_fn(40, 8, |_, _| rng.gen_range(-5.0f32..5.0));
        let q = choose_scales(&w);
        let quantized = quantize_weights(&w, &q).unwrap();
        for n in 0..8 {
            let max_abs_q = (0..40).map(|k| quantized.get(k, n).abs()).max().unwrap();
            assert_eq!(max_abs_q, 127);
        }
    }

    #[test]
    fn identity_weights_unit_scales_pass_input_through() {
        let k = 64;
        let id = Matrix::from_fn(k, k, |r, c| i8::from(r == c));
        let tiles = pack_dense_tiles(&id, TileLayout::tiled(Dtype::Int8)).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let input = Matrix::from_fn(2, k, |_, _| rng.gen_range(-127i8..=127));
        let plan = GemmPlan::new(2, k, k, 1, Dtype::Int8).unwrap();
        let q = QuantParams {
            weight_scales: vec![1.0; k],
            activation_scale: 1.0,
        };
        let out = int8_dense_gemm(&input, &tiles, &q, &plan).unwrap();
        for r in 0..2 {
            for c in 0..k {
                assert_eq!(out.get(r, c), input.get(r, c) as f32);
            }
        }
    }

    #[test]
    fn sparse_matches_dense_unpacked_bit_exactly() {
        let (m, k, n) = (2, 128, 64);
        let mut rng = StdRng::seed_from_u64(4);
        let w = Matrix::from_fn(k, n, |_, _| {
            if rng.gen_bool(0.5) {
                0i8
            } else {
                rng.gen_range(-127i8..=127)
            }
        });
        let input = Matrix::from_fn(m, k, |_, _| rng.gen_range(-127i8..=127));
        let plan = GemmPlan::new(m, k, n, 2, Dtype::Int8).unwrap();
        let packed = pack_weights(&w, TileLayout::tiled(Dtype::Int8), plan.col_workers()).unwrap();
        let unpacked = unpack_weights(&packed).unwrap();
        let tiles = pack_dense_tiles(&unpacked, TileLayout::tiled(Dtype::Int8)).unwrap();

        let sparse = int8_sparse_gemm_i32(&input, &packed, &plan).unwrap();
        let dense = int8_dense_gemm_i32(&input, &tiles, &plan).unwrap();
        assert_eq!(sparse, dense);
    }

    #[test]
    fn accumulators_match_scalar_integer_oracle_exactly() {
        let (m, k, n) = (3, 70, 40);
        let mut rng = StdRng::seed_from_u64(5);
        let w = Matrix::from_fn(k, n, |_, _| rng.gen_range(-127i8..=127));
        let input = Matrix::from_fn(m, k, |_, _| rng.gen_range(-127i8..=127));
        let plan = GemmPlan::new(m, k, n, 1, Dtype::Int8).unwrap();
        let tiles = pack_dense_tiles(&w, TileLayout::tiled(Dtype::Int8)).unwrap();
        let got = int8_dense_gemm_i32(&input, &tiles, &plan).unwrap();
        let want = oracle::naive_gemm_i32(&input, &w).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn dequantized_output_rounds_only_the_two_final_multiplies() {
        let (m, k, n) = (1, 64, 32);
        let mut rng = StdRng::seed_from_u64(6);
        let w = Matrix::from_fn(k, n, |_, _| rng.gen_range(-127i8..=127));
        let input = Matrix::from_fn(m, k, |_, _| rng.gen_range(-127i8..=127));
        let plan = GemmPlan::new(m, k, n, 1, Dtype::Int8).unwrap();
        let tiles = pack_dense_tiles(&w, TileLayout::tiled(Dtype::Int8)).unwrap();
        let q = QuantParams {
            weight_scales: (0..n).map(|i| 0.005 + i as f32 * 0.001).collect(),
            activation_scale: 0.02,
        };
        let out = int8_dense_gemm(&input, &tiles, &q, &plan).unwrap();
        let acc = oracle::naive_gemm_i32(&input, &w).unwrap();
        for r in 0..m {
            for c in 0..n {
                let want = acc.get(r, c) as f32 * q.activation_scale * q.weight_scales[c];
                assert_eq!(out.get(r, c), want);
            }
        }
    }

    #[test]
    fn inner_dim_bound_is_asserted() {
        let plan = GemmPlan::new(1, INT8_MAX_INNER + 64, 32, 1, Dtype::Int8).unwrap();
        let input = Matrix::zeros(1, INT8_MAX_INNER + 64);
        let w: Matrix<i8> = Matrix::zeros(64, 32);
        let packed = pack_weights(&w, TileLayout::tiled(Dtype::Int8), 1).unwrap();
        match int8_sparse_gemm_i32(&input, &packed, &plan) {
            Err(Error::InnerDimTooLarge(_)) => {}
            other => panic!("expected inner-dim bound error, got {other:?}"),
        }
    }
}
