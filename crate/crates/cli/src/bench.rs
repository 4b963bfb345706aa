//! Latency/throughput sweeps over sparsity, shape, and worker count.
//!
//! Every timed point first validates its kernel output against the
//! reference path for that kernel; a mismatch aborts the point so timings
//! are never reported for wrong results. With a fixed seed the generated
//! inputs, checksums, and every non-timing CSV column are reproducible.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use half::bf16;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use sparamx::attention::{magnitude_prune, sparse_attention, SparseKVCache};
use sparamx::error::{Error, Result};
use sparamx::format::{
    load_packed_any, pack_weights, unpack_weights, AnyPackedTensor, Dtype, PackedSparseTensor,
    TileLayout,
};
use sparamx::int8::{
    activation_scale_for, choose_scales, int8_dense_gemm, int8_sparse_gemm, quantize,
    quantize_weights, QuantParams,
};
use sparamx::kernel::{
    bytes_read_model_dense, bytes_read_model_sparse, dense_gemm, pack_dense_tiles, sparse_gemm,
    vector_sparse_gemm, DenseTiles, GemmPlan,
};
use sparamx::matrix::Matrix;
use sparamx::oracle;

/// Default shape catalog: the seven per-layer projections of an 8B-class
/// model plus the 4192-input profiling shape.
pub const SHAPE_CATALOG: &[(&str, usize, usize)] = &[
    ("q_proj", 4096, 4096),
    ("k_proj", 4096, 1024),
    ("v_proj", 4096, 1024),
    ("o_proj", 4096, 4096),
    ("gate_proj", 4096, 14336),
    ("up_proj", 4096, 14336),
    ("down_proj", 14336, 4096),
    ("profile_4192", 4192, 14336),
];

/// The Table-of-projections subset of [`SHAPE_CATALOG`] (no profile shape).
pub const PROJECTION_SHAPES: &[(&str, usize, usize)] = &[
    ("q_proj", 4096, 4096),
    ("k_proj", 4096, 1024),
    ("v_proj", 4096, 1024),
    ("o_proj", 4096, 4096),
    ("gate_proj", 4096, 14336),
    ("up_proj", 4096, 14336),
    ("down_proj", 14336, 4096),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Dense,
    Sparse,
    VectorSparse,
    Int8Dense,
    Int8Sparse,
    Attention,
}

impl KernelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(KernelKind::Dense),
            "sparse" => Ok(KernelKind::Sparse),
            "vector_sparse" => Ok(KernelKind::VectorSparse),
            "int8_dense" => Ok(KernelKind::Int8Dense),
            "int8_sparse" => Ok(KernelKind::Int8Sparse),
            "attention" => Ok(KernelKind::Attention),
            other => Err(Error::MalformedInput(format!("unknown kernel {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Dense => "dense",
            KernelKind::Sparse => "sparse",
            KernelKind::VectorSparse => "vector_sparse",
            KernelKind::Int8Dense => "int8_dense",
            KernelKind::Int8Sparse => "int8_sparse",
            KernelKind::Attention => "attention",
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            KernelKind::Int8Dense | KernelKind::Int8Sparse => Dtype::Int8,
            _ => Dtype::Bf16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub kernels: Vec<KernelKind>,
    pub m: usize,
    /// `(name, inner, out_cols)` GEMM shapes; empty means the catalog.
    pub shapes: Vec<(String, usize, usize)>,
    /// Bench packed weights from a file instead of generating them.
    pub weights: Option<PathBuf>,
    pub sparsities: Vec<f32>,
    pub v_sparsity: Option<f32>,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub context: usize,
    pub workers: usize,
    pub groups: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::MalformedInput("no kernels selected".into()));
        }
        if self.reps < 3 {
            return Err(Error::MalformedInput("reps must be >= 3".into()));
        }
        if self.warmup < 1 {
            return Err(Error::MalformedInput("warmup must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::MalformedInput("workers must be >= 1".into()));
        }
        if self.sparsities.is_empty() || self.sparsities.iter().any(|&s| !(0.0..=1.0).contains(&s))
        {
            return Err(Error::MalformedInput(
                "sparsity values must lie in [0, 1]".into(),
            ));
        }
        if !(1..=8).contains(&self.groups) {
            return Err(Error::UnsupportedGroupCount(self.groups));
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "kernel,shape,m,k,n,heads,kv_heads,head_dim,context,sparsity,\
v_sparsity,dtype,workers,groups,reps,warmup,seed,median_ns,min_ns,throughput,modeled_bytes,\
checksum,validated";

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub kernel: String,
    pub shape: String,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub heads: Option<usize>,
    pub kv_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub context: Option<usize>,
    pub sparsity: f32,
    pub v_sparsity: Option<f32>,
    pub dtype: String,
    pub workers: usize,
    pub groups: Option<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub median_ns: u128,
    pub min_ns: u128,
    pub throughput: f64,
    pub modeled_bytes: u64,
    pub checksum: String,
    pub validated: bool,
}

fn opt_col<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{:.4},{},{},{},{},{},{},{},{},{},{:.3},{},{},{}",
            self.kernel,
            self.shape,
            self.m,
            self.k,
            self.n,
            opt_col(&self.heads),
            opt_col(&self.kv_heads),
            opt_col(&self.head_dim),
            opt_col(&self.context),
            self.sparsity,
            self.v_sparsity
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default(),
            self.dtype,
            self.workers,
            opt_col(&self.groups),
            self.reps,
            self.warmup,
            self.seed,
            self.median_ns,
            self.min_ns,
            self.throughput,
            self.modeled_bytes,
            self.checksum,
            if self.validated { "yes" } else { "no" },
        );
        s
    }
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: &mut W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.to_csv())?;
    }
    Ok(())
}

/// FNV-1a 64 over little-endian f32 bit patterns.
pub fn checksum_f32(data: &[f32]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for v in data {
        for b in v.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

fn median_min(mut samples: Vec<u128>) -> (u128, u128) {
    samples.sort_unstable();
    (samples[samples.len() / 2], samples[0])
}

fn time_point<F: FnMut() -> Result<()>>(
    reps: usize,
    warmup: usize,
    mut f: F,
) -> Result<(u128, u128)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_nanos());
    }
    Ok(median_min(samples))
}

fn assert_close_f64(got: &Matrix<f32>, want: &Matrix<f64>, tol: f64, what: &str) -> Result<()> {
    for r in 0..got.rows() {
        for c in 0..got.cols() {
            let g = got.get(r, c) as f64;
            let w = want.get(r, c);
            let err = (g - w).abs() / w.abs().max(1.0);
            if err > tol {
                return Err(Error::Validation(format!(
                    "{what}: element ({r},{c}) off by {err:.3e} (got {g}, want {w})"
                )));
            }
        }
    }
    Ok(())
}

fn random_f32(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0))
}

fn pruned_weights(rng: &mut StdRng, k: usize, n: usize, sparsity: f32) -> Matrix<f32> {
    let mut w = random_f32(rng, k, n);
    magnitude_prune(w.as_mut_slice(), sparsity);
    w
}

fn gemm_gflops(m: usize, k: usize, n: usize, median_ns: u128) -> f64 {
    if median_ns == 0 {
        return 0.0;
    }
    2.0 * m as f64 * k as f64 * n as f64 / median_ns as f64
}

struct GemmPoint {
    name: String,
    sparsity: f32,
    bf16_weights: Option<Matrix<bf16>>,
    int8_weights: Option<(Matrix<i8>, QuantParams)>,
    k: usize,
    n: usize,
}

/// Build a bench point's weights, either generated or loaded from `.spx`.
fn gemm_point(
    config: &BenchConfig,
    kernel: KernelKind,
    shape: &(String, usize, usize),
    sparsity: f32,
) -> Result<GemmPoint> {
    if let Some(path) = &config.weights {
        let mut f = std::fs::File::open(path)?;
        let (any, quant) = load_packed_any(&mut f)?;
        return match (any, kernel.dtype()) {
            (AnyPackedTensor::Bf16(t), Dtype::Bf16) => {
                let dense = unpack_weights(&t)?;
                let nnz = t.nnz() as f64;
                let (k, n) = (t.logical_rows(), t.logical_cols());
                Ok(GemmPoint {
                    name: path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "weights".into()),
                    sparsity: (1.0 - nnz / (k * n) as f64) as f32,
                    bf16_weights: Some(dense),
                    int8_weights: None,
                    k,
                    n,
                })
            }
            (AnyPackedTensor::Int8(t), Dtype::Int8) => {
                let dense = unpack_weights(&t)?;
                let nnz = t.nnz() as f64;
                let (k, n) = (t.logical_rows(), t.logical_cols());
                let quant = quant.ok_or_else(|| {
                    Error::MalformedInput("INT8 weights file lacks a QNT1 section".into())
                })?;
                Ok(GemmPoint {
                    name: path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "weights".into()),
                    sparsity: (1.0 - nnz / (k * n) as f64) as f32,
                    bf16_weights: None,
                    int8_weights: Some((dense, quant)),
                    k,
                    n,
                })
            }
            _ => Err(Error::MalformedInput(format!(
                "weights file dtype does not match kernel {}",
                kernel.as_str()
            ))),
        };
    }

    let (name, k, n) = shape;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let pruned = pruned_weights(&mut rng, *k, *n, sparsity);
    match kernel.dtype() {
        Dtype::Bf16 => Ok(GemmPoint {
            name: name.clone(),
            sparsity,
            bf16_weights: Some(Matrix::from_f32(&pruned)),
            int8_weights: None,
            k: *k,
            n: *n,
        }),
        Dtype::Int8 => {
            let q = choose_scales(&pruned);
            let qw = quantize_weights(&pruned, &q)?;
            Ok(GemmPoint {
                name: name.clone(),
                sparsity,
                bf16_weights: None,
                int8_weights: Some((qw, q)),
                k: *k,
                n: *n,
            })
        }
    }
}

fn bench_gemm_point(
    config: &BenchConfig,
    kernel: KernelKind,
    point: GemmPoint,
) -> Result<BenchRow> {
    let (m, k, n) = (config.m, point.k, point.n);
    let plan = GemmPlan::new(m, k, n, config.workers, kernel.dtype())?;
    let mut rng = StdRng::seed_from_u64(config.seed.wrapping_add(1));
    let input_f32 = random_f32(&mut rng, m, k);

    let layout_tiled = TileLayout::tiled(kernel.dtype());
    let (output, median_ns, min_ns, modeled_bytes): (Matrix<f32>, u128, u128, u64);

    match kernel {
        KernelKind::Dense => {
            let w = point.bf16_weights.as_ref().expect("bf16 weights");
            let input = Matrix::from_f32(&input_f32);
            let tiles = pack_dense_tiles(w, TileLayout::tiled(Dtype::Bf16))?;
            let got = dense_gemm(&input, &tiles, &plan)?;
            let want = oracle::naive_gemm_f64(&input.to_f64(), &w.to_f64())?;
            assert_close_f64(&got, &want, 2f64.powi(-8), "dense vs f64 oracle")?;
            let (med, min) = time_point(config.reps, config.warmup, || {
                std::hint::black_box(dense_gemm(&input, &tiles, &plan)?);
                Ok(())
            })?;
            output = got;
            median_ns = med;
            min_ns = min;
            modeled_bytes = bytes_read_model_dense(k, n, Dtype::Bf16);
        }
        KernelKind::Sparse => {
            let w = point.bf16_weights.as_ref().expect("bf16 weights");
            let input = Matrix::from_f32(&input_f32);
            let packed = pack_weights(w, TileLayout::tiled(Dtype::Bf16), plan.col_workers())?;
            let tiles = pack_dense_tiles(&unpack_weights(&packed)?, layout_tiled)?;
            let got = sparse_gemm(&input, &packed, &plan)?;
            let dense = dense_gemm(&input, &tiles, &plan)?;
            if got != dense {
                return Err(Error::Validation(
                    "sparse output not bit-identical to dense on unpacked weights".into(),
                ));
            }
            let (med, min) = time_point(config.reps, config.warmup, || {
                std::hint::black_box(sparse_gemm(&input, &packed, &plan)?);
                Ok(())
            })?;
            output = got;
            median_ns = med;
            min_ns = min;
            modeled_bytes = bytes_read_model_sparse(&packed);
        }
        KernelKind::VectorSparse => {
            let w = point.bf16_weights.as_ref().expect("bf16 weights");
            let input = Matrix::from_f32(&input_f32);
            let strips = TileLayout::vector(Dtype::Bf16).padded_dims(k, n).1 / 16;
            let packed = pack_weights(
                w,
                TileLayout::vector(Dtype::Bf16),
                config.workers.min(strips),
            )?;
            let got = vector_sparse_gemm(&input, &packed, config.groups)?;
            let want = oracle::naive_gemm_f64(&input.to_f64(), &w.to_f64())?;
            assert_close_f64(&got, &want, 2f64.powi(-8), "vector path vs f64 oracle")?;
            let (med, min) = time_point(config.reps, config.warmup, || {
                std::hint::black_box(vector_sparse_gemm(&input, &packed, config.groups)?);
                Ok(())
            })?;
            output = got;
            median_ns = med;
            min_ns = min;
            modeled_bytes = bytes_read_model_sparse(&packed);
        }
        KernelKind::Int8Dense | KernelKind::Int8Sparse => {
            let (qw, q) = point.int8_weights.as_ref().expect("int8 weights");
            let act_scale = activation_scale_for(input_f32.as_slice());
            let q_in_vec = quantize(input_f32.as_slice(), act_scale)?;
            let q_in = Matrix::from_vec(m, k, q_in_vec);
            let q = q.clone().with_activation_scale(act_scale);

            let acc_oracle = oracle::naive_gemm_i32(&q_in, qw)?;
            let want = Matrix::from_fn(m, n, |r, c| {
                acc_oracle.get(r, c) as f32 * q.activation_scale * q.weight_scales[c]
            });

            if kernel == KernelKind::Int8Dense {
                let tiles: DenseTiles<i8> = pack_dense_tiles(qw, layout_tiled)?;
                let got = int8_dense_gemm(&q_in, &tiles, &q, &plan)?;
                if got != want {
                    return Err(Error::Validation(
                        "int8 dense output differs from scalar integer oracle".into(),
                    ));
                }
                let (med, min) = time_point(config.reps, config.warmup, || {
                    std::hint::black_box(int8_dense_gemm(&q_in, &tiles, &q, &plan)?);
                    Ok(())
                })?;
                output = got;
                median_ns = med;
                min_ns = min;
                modeled_bytes = bytes_read_model_dense(k, n, Dtype::Int8);
            } else {
                let packed: PackedSparseTensor<i8> =
                    pack_weights(qw, layout_tiled, plan.col_workers())?;
                let got = int8_sparse_gemm(&q_in, &packed, &q, &plan)?;
                if got != want {
                    return Err(Error::Validation(
                        "int8 sparse output differs from scalar integer oracle".into(),
                    ));
                }
                let (med, min) = time_point(config.reps, config.warmup, || {
                    std::hint::black_box(int8_sparse_gemm(&q_in, &packed, &q, &plan)?);
                    Ok(())
                })?;
                output = got;
                median_ns = med;
                min_ns = min;
                modeled_bytes = bytes_read_model_sparse(&packed);
            }
        }
        KernelKind::Attention => unreachable!("attention handled separately"),
    }

    Ok(BenchRow {
        kernel: kernel.as_str().into(),
        shape: point.name,
        m,
        k,
        n,
        heads: None,
        kv_heads: None,
        head_dim: None,
        context: None,
        sparsity: point.sparsity,
        v_sparsity: None,
        dtype: match kernel.dtype() {
            Dtype::Bf16 => "bf16".into(),
            Dtype::Int8 => "int8".into(),
        },
        workers: config.workers,
        groups: (kernel == KernelKind::VectorSparse).then_some(config.groups),
        reps: config.reps,
        warmup: config.warmup,
        seed: config.seed,
        median_ns,
        min_ns,
        throughput: gemm_gflops(m, k, n, median_ns),
        modeled_bytes,
        checksum: format!("{:016x}", checksum_f32(output.as_slice())),
        validated: true,
    })
}

fn bench_attention_point(config: &BenchConfig, k_sparsity: f32) -> Result<BenchRow> {
    let v_sparsity = config.v_sparsity.unwrap_or(k_sparsity);
    let (heads, kv, d, ctx) = (
        config.heads,
        config.kv_heads,
        config.head_dim,
        config.context,
    );
    let mut rng = StdRng::seed_from_u64(config.seed);
    // bf16-representable values so the oracle sees exactly the cached data.
    let gen_heads = |rng: &mut StdRng| -> Vec<Matrix<f32>> {
        (0..kv)
            .map(|_| {
                Matrix::from_fn(ctx, d, |_, _| {
                    bf16::from_f32(rng.gen_range(-1.0f32..1.0)).to_f32()
                })
            })
            .collect()
    };
    let k_heads = gen_heads(&mut rng);
    let v_heads = gen_heads(&mut rng);
    let cache = SparseKVCache::pack(
        heads,
        &k_heads,
        &v_heads,
        k_sparsity,
        v_sparsity,
        config.workers,
    )?;
    let q = Matrix::from_fn(heads, d, |_, _| bf16::from_f32(rng.gen_range(-1.0f32..1.0)));

    // Oracle over the pruned K/V as actually cached.
    let k_pruned: Vec<Matrix<f64>> = cache
        .k_static()
        .iter()
        .map(|t| Ok(unpack_weights(t)?.transposed().map(|v| v.to_f32() as f64)))
        .collect::<Result<_>>()?;
    let v_pruned: Vec<Matrix<f64>> = cache
        .v_static()
        .iter()
        .map(|t| Ok(unpack_weights(t)?.map(|v| v.to_f32() as f64)))
        .collect::<Result<_>>()?;
    let want = oracle::naive_attention(&q.to_f64(), &k_pruned, &v_pruned, 1.0 / (d as f64).sqrt())?;
    let got = sparse_attention(&q, &cache)?;
    assert_close_f64(&got, &want, 2f64.powi(-8), "attention vs f64 oracle")?;

    let (median_ns, min_ns) = time_point(config.reps, config.warmup, || {
        std::hint::black_box(sparse_attention(&q, &cache)?);
        Ok(())
    })?;

    Ok(BenchRow {
        kernel: "attention".into(),
        shape: "attention".into(),
        m: 1,
        k: 0,
        n: 0,
        heads: Some(heads),
        kv_heads: Some(kv),
        head_dim: Some(d),
        context: Some(ctx),
        sparsity: k_sparsity,
        v_sparsity: Some(v_sparsity),
        dtype: "bf16".into(),
        workers: config.workers,
        groups: None,
        reps: config.reps,
        warmup: config.warmup,
        seed: config.seed,
        median_ns,
        min_ns,
        throughput: if median_ns == 0 {
            0.0
        } else {
            1e9 / median_ns as f64
        },
        modeled_bytes: cache.static_compressed_bytes() as u64,
        checksum: format!("{:016x}", checksum_f32(got.as_slice())),
        validated: true,
    })
}

/// Run every configured point; one point at a time.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let shapes: Vec<(String, usize, usize)> = if config.shapes.is_empty() {
        SHAPE_CATALOG
            .iter()
            .map(|&(name, k, n)| (name.to_string(), k, n))
            .collect()
    } else {
        config.shapes.clone()
    };

    let mut rows = Vec::new();
    for &kernel in &config.kernels {
        if kernel == KernelKind::Attention {
            if config.weights.is_some() {
                return Err(Error::MalformedInput(
                    "attention bench does not take a weights file".into(),
                ));
            }
            for &s in &config.sparsities {
                rows.push(bench_attention_point(config, s)?);
            }
            continue;
        }
        if config.weights.is_some() {
            // File-backed weights carry their own sparsity.
            let point = gemm_point(config, kernel, &("file".into(), 0, 0), 0.0)?;
            rows.push(bench_gemm_point(config, kernel, point)?);
            continue;
        }
        for shape in &shapes {
            for &s in &config.sparsities {
                let point = gemm_point(config, kernel, shape, s)?;
                rows.push(bench_gemm_point(config, kernel, point)?);
            }
        }
    }
    Ok(rows)
}
