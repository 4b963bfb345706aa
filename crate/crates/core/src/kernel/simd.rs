//! Runtime-detected 512-bit backend for tile decompression and the tile
//! multiply. Observationally equivalent to the portable path: expansion is
//! the same LSB-first contiguous fill, and the multiply issues the same
//! IEEE mul/add sequence per output element (no FMA contraction), so
//! results are bit-identical. `SPARAMX_NO_ACCEL=1` forces the portable
//! path.

#![cfg(target_arch = "x86_64")]

use std::arch::x86_64::*;
use std::sync::OnceLock;

use half::bf16;

pub(crate) fn accel_available() -> bool {
    static AVAIL: OnceLock<bool> = OnceLock::new();
    *AVAIL.get_or_init(|| {
        std::env::var_os("SPARAMX_NO_ACCEL").is_none()
            && is_x86_feature_detected!("avx512f")
            && is_x86_feature_detected!("avx512bw")
            && is_x86_feature_detected!("avx512vbmi2")
            && is_x86_feature_detected!("avx512vpopcntdq")
    })
}

/// Per-word popcounts and their exclusive prefix for one 16-word group.
///
/// # Safety
/// Requires avx512f + avx512vpopcntdq.
#[target_feature(enable = "avx512f,avx512vpopcntdq")]
unsafe fn group_offsets(words: &[u32; 16]) -> ([u32; 16], usize) {
    let meta = _mm512_loadu_si512(words.as_ptr() as *const _);
    let counts = _mm512_popcnt_epi32(meta);
    let zero = _mm512_setzero_si512();
    // Shift-add doubling: offsets 1, 2, 4, 8 lanes.
    let mut s = counts;
    s = _mm512_add_epi32(s, _mm512_alignr_epi32::<15>(s, zero));
    s = _mm512_add_epi32(s, _mm512_alignr_epi32::<14>(s, zero));
    s = _mm512_add_epi32(s, _mm512_alignr_epi32::<12>(s, zero));
    s = _mm512_add_epi32(s, _mm512_alignr_epi32::<8>(s, zero));
    let total = _mm512_reduce_max_epu32(s) as usize;
    let excl = _mm512_sub_epi32(s, counts);
    let mut offsets = [0u32; 16];
    _mm512_storeu_si512(offsets.as_mut_ptr() as *mut _, excl);
    (offsets, total)
}

/// Expand one BF16 tile (16 words, 16 rows of 32 elements).
///
/// # Safety
/// Requires the detected feature set; `values` must hold at least the
/// tile's total popcount elements and `out` one full tile.
#[target_feature(enable = "avx512f,avx512bw,avx512vbmi2,avx512vpopcntdq")]
pub(crate) unsafe fn expand_tile_u16(metadata: &[u32; 16], values: *const u16, out: *mut u16) {
    let (offsets, _) = group_offsets(metadata);
    for r in 0..16 {
        let row = _mm512_maskz_expandloadu_epi16(
            metadata[r],
            values.add(offsets[r] as usize) as *const i16,
        );
        _mm512_storeu_si512(out.add(r * 32) as *mut _, row);
    }
}

/// Expand one INT8 tile (two 16-word groups, 16 rows of 64 elements).
///
/// # Safety
/// As [`expand_tile_u16`].
#[target_feature(enable = "avx512f,avx512bw,avx512vbmi2,avx512vpopcntdq")]
pub(crate) unsafe fn expand_tile_u8(metadata: &[u32; 32], values: *const u8, out: *mut u8) {
    let mut base = 0usize;
    for g in 0..2 {
        let words: &[u32; 16] = metadata[g * 16..(g + 1) * 16].try_into().unwrap();
        let (offsets, total) = group_offsets(words);
        for r in 0..8 {
            // Row r of the group spans two metadata words.
            let mask = u64::from(words[2 * r]) | u64::from(words[2 * r + 1]) << 32;
            let row = _mm512_maskz_expandloadu_epi8(
                mask,
                values.add(base + offsets[2 * r] as usize) as *const i8,
            );
            _mm512_storeu_si512(out.add((g * 8 + r) * 64) as *mut _, row);
        }
        base += total;
    }
}

/// 16-lane BF16 tile multiply; same per-element op sequence as the scalar
/// body (mul then add per interleave position, rows ascending).
///
/// # Safety
/// Requires avx512f + avx512bw; `a` holds 32 elements, `w` 512.
#[target_feature(enable = "avx512f,avx512bw")]
pub(crate) unsafe fn accumulate_tile_bf16(acc: &mut [f32; 16], a: &[f32], w: &[bf16]) {
    debug_assert!(a.len() >= 32 && w.len() >= 512);
    let mut acc_v = _mm512_loadu_ps(acc.as_ptr());
    let hi_mask = _mm512_set1_epi32(0xFFFF_0000u32 as i32);
    let w_ptr = w.as_ptr();
    let a_ptr = a.as_ptr();
    for r in 0..16 {
        let wv = _mm512_loadu_si512(w_ptr.add(r * 32) as *const _);
        // Lane n holds the bf16 pair (k=2r, n), (k=2r+1, n); shifting makes
        // the exact f32 bit patterns.
        let even = _mm512_castsi512_ps(_mm512_slli_epi32::<16>(wv));
        let odd = _mm512_castsi512_ps(_mm512_and_si512(wv, hi_mask));
        let a0 = _mm512_set1_ps(*a_ptr.add(2 * r));
        let a1 = _mm512_set1_ps(*a_ptr.add(2 * r + 1));
        acc_v = _mm512_add_ps(acc_v, _mm512_mul_ps(a0, even));
        acc_v = _mm512_add_ps(acc_v, _mm512_mul_ps(a1, odd));
    }
    _mm512_storeu_ps(acc.as_mut_ptr(), acc_v);
}

/// 16-lane INT8 tile multiply with wrapping INT32 accumulation.
///
/// # Safety
/// Requires avx512f; `a` holds 64 elements, `w` 1024.
#[target_feature(enable = "avx512f")]
pub(crate) unsafe fn accumulate_tile_i8(acc: &mut [i32; 16], a: &[i32], w: &[i8]) {
    debug_assert!(a.len() >= 64 && w.len() >= 1024);
    let mut acc_v = _mm512_loadu_si512(acc.as_ptr() as *const _);
    let w_ptr = w.as_ptr();
    let a_ptr = a.as_ptr();
    for r in 0..16 {
        let wv = _mm512_loadu_si512(w_ptr.add(r * 64) as *const _);
        // Lane n holds bytes (k=4r+j, n) for j = 0..4; shift pairs sign-extend.
        let b0 = _mm512_srai_epi32::<24>(_mm512_slli_epi32::<24>(wv));
        let b1 = _mm512_srai_epi32::<24>(_mm512_slli_epi32::<16>(wv));
        let b2 = _mm512_srai_epi32::<24>(_mm512_slli_epi32::<8>(wv));
        let b3 = _mm512_srai_epi32::<24>(wv);
        acc_v = _mm512_add_epi32(
            acc_v,
            _mm512_mullo_epi32(_mm512_set1_epi32(*a_ptr.add(4 * r)), b0),
        );
        acc_v = _mm512_add_epi32(
            acc_v,
            _mm512_mullo_epi32(_mm512_set1_epi32(*a_ptr.add(4 * r + 1)), b1),
        );
        acc_v = _mm512_add_epi32(
            acc_v,
            _mm512_mullo_epi32(_mm512_set1_epi32(*a_ptr.add(4 * r + 2)), b2),
        );
        acc_v = _mm512_add_epi32(
            acc_v,
            _mm512_mullo_epi32(_mm512_set1_epi32(*a_ptr.add(4 * r + 3)), b3),
        );
    }
    _mm512_storeu_si512(acc.as_mut_ptr() as *mut _, acc_v);
}
