//! Brute-force reference implementations used by tests and bench
//! validation.
//!
//! Everything here works on flat logical indexing and shares no code with
//! the tile layout or kernel paths, so an agreement check between a kernel
//! and its oracle cannot be satisfied by a bug present on both sides.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Textbook triple-loop GEMM, f64 throughout.
pub fn naive_gemm_f64(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<Matrix<f64>> {
    if a.cols() != b.rows() {
        return Err(Error::DimMismatch(format!(
            "{}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0f64;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Integer triple-loop GEMM with wrapping i32 accumulation.
pub fn naive_gemm_i32(a: &Matrix<i8>, b: &Matrix<i8>) -> Result<Matrix<i32>> {
    if a.cols() != b.rows() {
        return Err(Error::DimMismatch(format!(
            "{}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0i32;
            for k in 0..a.cols() {
                acc = acc.wrapping_add(a.get(i, k) as i32 * b.get(k, j) as i32);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Walk metadata bits LSB-first, emitting a value for each set bit and a
/// zero for each clear bit. Returns the expansion and the advanced cursor.
pub fn scalar_expand<T: Copy + Default>(
    metadata: &[u32],
    values: &[T],
    cursor: usize,
) -> Result<(Vec<T>, usize)> {
    let mut out = Vec::with_capacity(metadata.len() * 32);
    let mut c = cursor;
    for &word in metadata {
        for bit in 0..32 {
            if word >> bit & 1 == 1 {
                let v = *values.get(c).ok_or(Error::ExhaustedValues)?;
                out.push(v);
                c += 1;
            } else {
                out.push(T::default());
            }
        }
    }
    Ok((out, c))
}

/// Scalar cumulative sum over 16 lanes, modular.
pub fn scalar_prefix_sum16(v: &[u32; 16]) -> [u32; 16] {
    let mut out = [0u32; 16];
    let mut acc = 0u32;
    for i in 0..16 {
        acc = acc.wrapping_add(v[i]);
        out[i] = acc;
    }
    out
}

/// Indices kept by magnitude pruning, from a full sort.
///
/// The `floor(sparsity * len)` smallest-magnitude elements are dropped;
/// among equal magnitudes the lower flat index is kept.
pub fn magnitude_kept_indices(values: &[f32], sparsity: f32) -> Vec<usize> {
    let drop = ((sparsity as f64) * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Ascending magnitude; ties ordered by descending index so higher
    // indices are dropped first.
    order.sort_by(|&i, &j| {
        values[i]
            .abs()
            .partial_cmp(&values[j].abs())
            .unwrap()
            .then(j.cmp(&i))
    });
    let mut kept: Vec<usize> = order[drop.min(values.len())..].to_vec();
    kept.sort_unstable();
    kept
}

/// Dense attention with an explicit score matrix, f64 softmax, and
/// explicitly repeated K/V heads for grouped queries.
///
/// `k_heads[g]` and `v_heads[g]` are `context x head_dim` per KV head;
/// `q` is `n_heads x head_dim`.
pub fn naive_attention(
    q: &Matrix<f64>,
    k_heads: &[Matrix<f64>],
    v_heads: &[Matrix<f64>],
    scale: f64,
) -> Result<Matrix<f64>> {
    let n_heads = q.rows();
    let n_kv = k_heads.len();
    if n_kv == 0 || v_heads.len() != n_kv || !n_heads.is_multiple_of(n_kv) {
        return Err(Error::DimMismatch("head counts".into()));
    }
    let group = n_heads / n_kv;
    let head_dim = q.cols();

    // Materialize the repeated K/V explicitly, one copy per query head.
    let mut k_rep = Vec::with_capacity(n_heads);
    let mut v_rep = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        k_rep.push(k_heads[h / group].clone());
        v_rep.push(v_heads[h / group].clone());
    }

    let mut out = Matrix::zeros(n_heads, head_dim);
    for h in 0..n_heads {
        let k = &k_rep[h];
        let v = &v_rep[h];
        let ctx = k.rows();
        if ctx == 0 {
            return Err(Error::NoContext);
        }
        let mut scores = vec![0f64; ctx];
        for (t, s) in scores.iter_mut().enumerate() {
            let mut acc = 0f64;
            for d in 0..head_dim {
                acc += q.get(h, d) * k.get(t, d);
            }
            *s = acc * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        for d in 0..head_dim {
            let mut acc = 0f64;
            for (t, s) in scores.iter().enumerate() {
                acc += s / denom * v.get(t, d);
            }
            out.set(h, d, acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity_and_scalar() {
        let id = Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let a = Matrix::from_fn(2, 4, |r, c| (r * 4 + c) as f64);
        assert_eq!(naive_gemm_f64(&a, &id).unwrap(), a);

        let x = Matrix::from_vec(1, 1, vec![3.0]);
        let y = Matrix::from_vec(1, 1, vec![-2.5]);
        assert_eq!(naive_gemm_f64(&x, &y).unwrap().get(0, 0), -7.5);

        assert!(naive_gemm_f64(&a, &a).is_err());
    }

    #[test]
    fn expand_walks_lsb_first() {
        let (row, c) = scalar_expand(&[0b101u32], &[7i8, 9], 0).unwrap();
        assert_eq!(c, 2);
        assert_eq!(row[0], 7);
        assert_eq!(row[1], 0);
        assert_eq!(row[2], 9);
        assert!(row[3..].iter().all(|&v| v == 0));

        assert!(matches!(
            scalar_expand(&[0b11u32], &[1i8], 0),
            Err(Error::ExhaustedValues)
        ));
    }

    #[test]
    fn kept_indices_tie_break_keeps_lower_index() {
        let kept = magnitude_kept_indices(&[1.0, 1.0, 1.0, 1.0], 0.5);
        assert_eq!(kept, vec![0, 1]);
        let kept = magnitude_kept_indices(&[3.0, -1.0, 0.5, 2.0], 0.5);
        assert_eq!(kept, vec![0, 3]);
        assert_eq!(magnitude_kept_indices(&[1.0, 2.0], 0.0), vec![0, 1]);
        assert!(magnitude_kept_indices(&[1.0, 2.0], 1.0).is_empty());
    }

    #[test]
    fn attention_singleton_context_returns_v_row() {
        let q = Matrix::from_vec(1, 2, vec![0.3, -0.7]);
        let k = vec![Matrix::from_vec(1, 2, vec![1.0, 2.0])];
        let v = vec![Matrix::from_vec(1, 2, vec![5.0, -6.0])];
        let out = naive_attention(&q, &k, &v, 0.5).unwrap();
        assert_eq!(out.get(0, 0), 5.0);
        assert_eq!(out.get(0, 1), -6.0);
    }

    #[test]
    fn attention_uniform_scores_average_v_rows() {
        // Zero query makes every score equal, so the output is the mean.
        let q = Matrix::zeros(1, 2);
        let k = vec![Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])];
        let v = vec![Matrix::from_vec(2, 2, vec![2.0, 4.0, 6.0, 8.0])];
        let out = naive_attention(&q, &k, &v, 1.0).unwrap();
        assert!((out.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((out.get(0, 1) - 6.0).abs() < 1e-12);
    }
}
