//! Sparse-KV attention: magnitude-pruned, bitmap-packed static K/V plus a
//! dense dynamic tail for freshly decoded tokens.
//!
//! The packed static cache is immutable after prefill packing; appends only
//! grow the tails, so decoding never re-copies or re-packs cached context.
//! Grouped-query heads read the same packed K/V directly instead of
//! materializing repeated copies.

use std::io::{Read, Write};
use std::path::Path;

use half::bf16;

use crate::error::{Error, Result};
use crate::format::{
    load_packed, pack_weights, save_packed, Dtype, PackedSparseTensor, TileLayout,
};
use crate::kernel::{sparse_gemm, GemmPlan};
use crate::matrix::Matrix;

/// Zero the `floor(sparsity * len)` smallest-magnitude elements in place.
///
/// Ties keep the lower flat index. Selection runs over the whole slice, so
/// pruning one layer's K (or V) tensor treats all its heads jointly.
pub fn magnitude_prune(values: &mut [f32], sparsity: f32) {
    let s = sparsity.clamp(0.0, 1.0);
    let drop = (s as f64 * values.len() as f64).floor() as usize;
    if drop == 0 {
        return;
    }
    if drop >= values.len() {
        values.fill(0.0);
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Quickselect on (magnitude asc, index desc): the first `drop` slots end
    // up holding exactly the dropped set.
    order.select_nth_unstable_by(drop - 1, |&i, &j| {
        values[i].abs().total_cmp(&values[j].abs()).then(j.cmp(&i))
    });
    for &i in &order[..drop] {
        values[i] = 0.0;
    }
}

/// Numerically safe softmax: max-subtracted f32 exponentials with the
/// normalizer accumulated in f64, so rows sum to 1 within one f32 ulp even
/// at 16K-token contexts.
pub fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0f64;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        denom += f64::from(*s);
    }
    for s in scores.iter_mut() {
        *s = (f64::from(*s) / denom) as f32;
    }
}

/// One layer's cache: per-KV-head packed static K/V plus dense tails.
#[derive(Debug, Clone)]
pub struct SparseKVCache {
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    n_static: usize,
    n_tail: usize,
    workers: usize,
    /// Per KV head, `head_dim x n_static` (ready for q x K).
    k_static: Vec<PackedSparseTensor<bf16>>,
    /// Per KV head, `n_static x head_dim` (ready for r x V).
    v_static: Vec<PackedSparseTensor<bf16>>,
    /// Per KV head, `n_tail x head_dim` row-major append buffers.
    k_tail: Vec<Vec<bf16>>,
    v_tail: Vec<Vec<bf16>>,
}

impl SparseKVCache {
    /// Prune and pack a layer's prefill K/V.
    ///
    /// `k_heads[g]` / `v_heads[g]` are `context x head_dim` per KV head. K
    /// and V are each pruned at their own rate across all heads of the
    /// layer, then packed per head; tails start empty. `workers` sets the
    /// head-level parallelism of attention calls.
    pub fn pack(
        n_heads: usize,
        k_heads: &[Matrix<f32>],
        v_heads: &[Matrix<f32>],
        k_sparsity: f32,
        v_sparsity: f32,
        workers: usize,
    ) -> Result<Self> {
        let n_kv_heads = k_heads.len();
        if n_kv_heads == 0 || v_heads.len() != n_kv_heads {
            return Err(Error::DimMismatch("K and V head counts differ".into()));
        }
        if n_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
            return Err(Error::DimMismatch(format!(
                "{n_heads} query heads not divisible by {n_kv_heads} KV heads"
            )));
        }
        if workers == 0 {
            return Err(Error::DimMismatch("workers must be >= 1".into()));
        }
        let n_static = k_heads[0].rows();
        let head_dim = k_heads[0].cols();
        if head_dim == 0 {
            return Err(Error::DimMismatch("head_dim must be >= 1".into()));
        }
        for m in k_heads.iter().chain(v_heads) {
            if m.rows() != n_static || m.cols() != head_dim {
                return Err(Error::DimMismatch("per-head K/V dims differ".into()));
            }
        }

        let prune_heads = |heads: &[Matrix<f32>], sparsity: f32| -> Vec<Matrix<f32>> {
            let mut flat: Vec<f32> = heads.iter().flat_map(|m| m.as_slice().to_vec()).collect();
            magnitude_prune(&mut flat, sparsity);
            heads
                .iter()
                .enumerate()
                .map(|(g, m)| {
                    let span = m.rows() * m.cols();
                    Matrix::from_vec(m.rows(), m.cols(), flat[g * span..(g + 1) * span].to_vec())
                })
                .collect()
        };

        let k_pruned = prune_heads(k_heads, k_sparsity);
        let v_pruned = prune_heads(v_heads, v_sparsity);

        let mut k_static = Vec::with_capacity(n_kv_heads);
        let mut v_static = Vec::with_capacity(n_kv_heads);
        if n_static > 0 {
            let layout = TileLayout::tiled(Dtype::Bf16);
            for g in 0..n_kv_heads {
                let k_t = Matrix::from_f32(&k_pruned[g].transposed());
                let v_m = Matrix::from_f32(&v_pruned[g]);
                k_static.push(pack_weights(&k_t, layout, 1)?);
                v_static.push(pack_weights(&v_m, layout, 1)?);
            }
        }

        Ok(SparseKVCache {
            n_heads,
            n_kv_heads,
            head_dim,
            n_static,
            n_tail: 0,
            workers,
            k_static,
            v_static,
            k_tail: vec![Vec::new(); n_kv_heads],
            v_tail: vec![Vec::new(); n_kv_heads],
        })
    }

    /// Append one decoded token's K/V; the static packs are untouched.
    ///
    /// `k_new` / `v_new` hold `n_kv_heads * head_dim` values, head-major.
    pub fn append_token(&mut self, k_new: &[f32], v_new: &[f32]) -> Result<()> {
        let want = self.n_kv_heads * self.head_dim;
        if k_new.len() != want || v_new.len() != want {
            return Err(Error::DimMismatch(format!(
                "append expects {want} values per tensor"
            )));
        }
        for g in 0..self.n_kv_heads {
            let span = g * self.head_dim..(g + 1) * self.head_dim;
            self.k_tail[g].extend(k_new[span.clone()].iter().map(|&v| bf16::from_f32(v)));
            self.v_tail[g].extend(v_new[span].iter().map(|&v| bf16::from_f32(v)));
        }
        self.n_tail += 1;
        Ok(())
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn n_static(&self) -> usize {
        self.n_static
    }

    pub fn n_tail(&self) -> usize {
        self.n_tail
    }

    pub fn context_len(&self) -> usize {
        self.n_static + self.n_tail
    }

    pub fn k_static(&self) -> &[PackedSparseTensor<bf16>] {
        &self.k_static
    }

    pub fn v_static(&self) -> &[PackedSparseTensor<bf16>] {
        &self.v_static
    }

    /// Compressed static bytes across all heads (both K and V).
    pub fn static_compressed_bytes(&self) -> usize {
        self.k_static
            .iter()
            .chain(&self.v_static)
            .map(|t| t.compressed_size_bytes())
            .sum()
    }
}

fn attend_head(cache: &SparseKVCache, q_row: &[bf16], g: usize, out_row: &mut [f32]) -> Result<()> {
    let d = cache.head_dim;
    let ctx = cache.context_len();
    let scale = 1.0 / (d as f32).sqrt();

    let mut scores = vec![0f32; ctx];
    if cache.n_static > 0 {
        let q_m = Matrix::from_vec(1, d, q_row.to_vec());
        let plan = GemmPlan::new(1, d, cache.n_static, 1, Dtype::Bf16)?;
        let s = sparse_gemm(&q_m, &cache.k_static[g], &plan)?;
        scores[..cache.n_static].copy_from_slice(s.row(0));
    }
    for t in 0..cache.n_tail {
        let k_row = &cache.k_tail[g][t * d..(t + 1) * d];
        let mut acc = 0f32;
        for (qv, kv) in q_row.iter().zip(k_row) {
            acc += qv.to_f32() * kv.to_f32();
        }
        scores[cache.n_static + t] = acc;
    }
    for s in scores.iter_mut() {
        *s *= scale;
    }
    softmax_in_place(&mut scores);

    out_row.fill(0.0);
    if cache.n_static > 0 {
        let r: Vec<bf16> = scores[..cache.n_static]
            .iter()
            .map(|&v| bf16::from_f32(v))
            .collect();
        let r_m = Matrix::from_vec(1, cache.n_static, r);
        let plan = GemmPlan::new(1, cache.n_static, d, 1, Dtype::Bf16)?;
        let o = sparse_gemm(&r_m, &cache.v_static[g], &plan)?;
        out_row.copy_from_slice(o.row(0));
    }
    for t in 0..cache.n_tail {
        let w = bf16::from_f32(scores[cache.n_static + t]).to_f32();
        let v_row = &cache.v_tail[g][t * d..(t + 1) * d];
        for (o, vv) in out_row.iter_mut().zip(v_row) {
            *o += w * vv.to_f32();
        }
    }
    Ok(())
}

/// Single-token attention over the packed static cache plus the dense tail.
///
/// Per head `h` with KV head `g = h / group_size`: scores are
/// `q K^T / sqrt(head_dim)` over static (sparse GEMM) and tail (dense)
/// tokens, softmaxed in f32, then weighted against V the same way.
pub fn sparse_attention(q: &Matrix<bf16>, cache: &SparseKVCache) -> Result<Matrix<f32>> {
    if q.rows() != cache.n_heads || q.cols() != cache.head_dim {
        return Err(Error::DimMismatch(format!(
            "query {}x{} for cache with {} heads of dim {}",
            q.rows(),
            q.cols(),
            cache.n_heads,
            cache.head_dim
        )));
    }
    if cache.context_len() == 0 {
        return Err(Error::NoContext);
    }
    let group = cache.n_heads / cache.n_kv_heads;
    let d = cache.head_dim;

    let mut out = Matrix::zeros(cache.n_heads, d);
    let threads = cache.workers.min(cache.n_heads);
    if threads <= 1 {
        for h in 0..cache.n_heads {
            let row = &mut out.as_mut_slice()[h * d..(h + 1) * d];
            attend_head(cache, q.row(h), h / group, row)?;
        }
        return Ok(out);
    }

    // Heads are independent work units; chunk them contiguously.
    let per = cache.n_heads.div_ceil(threads);
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let mut rest = out.as_mut_slice();
        let mut h0 = 0usize;
        while h0 < cache.n_heads {
            let count = per.min(cache.n_heads - h0);
            let (chunk, tail) = rest.split_at_mut(count * d);
            rest = tail;
            let first = h0;
            handles.push(scope.spawn(move || {
                for (i, row) in chunk.chunks_mut(d).enumerate() {
                    let h = first + i;
                    attend_head(cache, q.row(h), h / group, row)?;
                }
                Ok(())
            }));
            h0 += count;
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(out)
}

const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "sparamx-kv-cache\tv1";

/// Save a cache as one `.spx` file per static tensor, raw tail blobs, and a
/// manifest listing each file's role and head.
pub fn save_cache(cache: &SparseKVCache, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for (key, v) in [
        ("n_heads", cache.n_heads),
        ("n_kv_heads", cache.n_kv_heads),
        ("head_dim", cache.head_dim),
        ("n_static", cache.n_static),
        ("n_tail", cache.n_tail),
        ("workers", cache.workers),
    ] {
        manifest.push_str(&format!("{key}\t{v}\n"));
    }
    for g in 0..cache.n_kv_heads {
        if cache.n_static > 0 {
            for (role, tensor) in [
                ("k_static", &cache.k_static[g]),
                ("v_static", &cache.v_static[g]),
            ] {
                let name = format!("{role}_{g}.spx");
                let mut f = std::fs::File::create(dir.join(&name))?;
                save_packed(tensor, &mut f)?;
                manifest.push_str(&format!("{role}\t{g}\t{name}\n"));
            }
        }
        for (role, tail) in [("k_tail", &cache.k_tail[g]), ("v_tail", &cache.v_tail[g])] {
            let name = format!("{role}_{g}.bin");
            let mut f = std::fs::File::create(dir.join(&name))?;
            let mut bytes = Vec::with_capacity(tail.len() * 2);
            for v in tail {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            f.write_all(&bytes)?;
            manifest.push_str(&format!("{role}\t{g}\t{name}\n"));
        }
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

pub fn load_cache(dir: &Path) -> Result<SparseKVCache> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::MalformedInput("bad cache manifest header".into()));
    }
    let mut fields = std::collections::HashMap::new();
    let mut entries: Vec<(String, usize, String)> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        match parts.as_slice() {
            [key, value] => {
                let v: usize = value
                    .parse()
                    .map_err(|_| Error::MalformedInput(format!("bad manifest value: {line}")))?;
                fields.insert(key.to_string(), v);
            }
            [role, head, file] => {
                let h: usize = head
                    .parse()
                    .map_err(|_| Error::MalformedInput(format!("bad manifest head: {line}")))?;
                entries.push((role.to_string(), h, file.to_string()));
            }
            _ => return Err(Error::MalformedInput(format!("bad manifest line: {line}"))),
        }
    }
    let get = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::MalformedInput(format!("manifest missing {key}")))
    };
    let n_heads = get("n_heads")?;
    let n_kv_heads = get("n_kv_heads")?;
    let head_dim = get("head_dim")?;
    let n_static = get("n_static")?;
    let n_tail = get("n_tail")?;
    let workers = get("workers")?;

    let mut cache = SparseKVCache {
        n_heads,
        n_kv_heads,
        head_dim,
        n_static,
        n_tail,
        workers,
        k_static: Vec::new(),
        v_static: Vec::new(),
        k_tail: vec![Vec::new(); n_kv_heads],
        v_tail: vec![Vec::new(); n_kv_heads],
    };
    let mut k_static: Vec<Option<PackedSparseTensor<bf16>>> = vec![None; n_kv_heads];
    let mut v_static: Vec<Option<PackedSparseTensor<bf16>>> = vec![None; n_kv_heads];
    for (role, g, file) in entries {
        if g >= n_kv_heads {
            return Err(Error::MalformedInput(format!("head {g} out of range")));
        }
        let path = dir.join(&file);
        match role.as_str() {
            "k_static" | "v_static" => {
                let mut f = std::fs::File::open(&path)?;
                let tensor = load_packed::<bf16, _>(&mut f)?;
                if role == "k_static" {
                    k_static[g] = Some(tensor);
                } else {
                    v_static[g] = Some(tensor);
                }
            }
            "k_tail" | "v_tail" => {
                let mut f = std::fs::File::open(&path)?;
                let mut bytes = Vec::new();
                f.read_to_end(&mut bytes)?;
                if bytes.len() != n_tail * head_dim * 2 {
                    return Err(Error::Truncated);
                }
                let tail: Vec<bf16> = bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect();
                if role == "k_tail" {
                    cache.k_tail[g] = tail;
                } else {
                    cache.v_tail[g] = tail;
                }
            }
            other => {
                return Err(Error::MalformedInput(format!("unknown role {other}")));
            }
        }
    }
    if n_static > 0 {
        for g in 0..n_kv_heads {
            cache.k_static.push(
                k_static[g].take().ok_or_else(|| {
                    Error::MalformedInput(format!("manifest missing k_static {g}"))
                })?,
            );
            cache.v_static.push(
                v_static[g].take().ok_or_else(|| {
                    Error::MalformedInput(format!("manifest missing v_static {g}"))
                })?,
            );
        }
    }
    Ok(cache)
}
