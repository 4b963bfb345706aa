//! Tile decompression: expand bitmap metadata into a dense scratch tile.

use crate::error::{Error, Result};
use crate::format::{Element, TileBuffer, TileLayout};
use crate::kernel::lanes::{prefix_sum16, row_popcounts};

/// Expand one metadata word LSB-first into 32 output elements.
///
/// Set bit at position `p` consumes the next value into `out[p]`; clear bits
/// leave zeros. Returns the number of values consumed.
#[inline]
pub(crate) fn expand_word<T: Element>(word: u32, values: &[T], out: &mut [T]) -> usize {
    out[..32].fill(T::default());
    let mut remaining = word;
    let mut taken = 0usize;
    while remaining != 0 {
        let p = remaining.trailing_zeros() as usize;
        out[p] = values[taken];
        taken += 1;
        remaining &= remaining - 1;
    }
    taken
}

/// Decompress one weight tile from `values` starting at `cursor`.
///
/// Metadata is consumed in 16-word groups (one group per BF16 tile, two for
/// INT8). Per-word value offsets come from the exclusive prefix of the word
/// popcounts so each row expansion is independent of the others. Returns the
/// cursor advanced by the tile's total popcount.
pub fn decompress_tile<T: Element>(
    layout: TileLayout,
    metadata: &[u32],
    values: &[T],
    cursor: usize,
    out: &mut TileBuffer<T>,
) -> Result<usize> {
    if layout.dtype() != T::DTYPE {
        return Err(Error::DimMismatch("layout dtype mismatch".into()));
    }
    let wpt = layout.words_per_tile();
    if metadata.len() != wpt {
        return Err(Error::DimMismatch(format!(
            "expected {wpt} metadata words, got {}",
            metadata.len()
        )));
    }
    debug_assert_eq!(out.len(), layout.tile_elems());

    let total: u64 = metadata.iter().map(|w| u64::from(w.count_ones())).sum();
    if cursor as u64 + total > values.len() as u64 {
        return Err(Error::ExhaustedValues);
    }

    #[cfg(target_arch = "x86_64")]
    if crate::kernel::simd::accel_available() {
        // Safety: features checked at runtime; the underrun check above
        // bounds every expand-load source range, and `out` holds one tile.
        unsafe {
            use crate::format::Dtype;
            match layout.dtype() {
                Dtype::Bf16 => crate::kernel::simd::expand_tile_u16(
                    metadata.try_into().expect("16-word group"),
                    (values.as_ptr() as *const u16).add(cursor),
                    out.as_mut_slice().as_mut_ptr() as *mut u16,
                ),
                Dtype::Int8 => crate::kernel::simd::expand_tile_u8(
                    metadata.try_into().expect("32-word group"),
                    (values.as_ptr() as *const u8).add(cursor),
                    out.as_mut_slice().as_mut_ptr() as *mut u8,
                ),
            }
        }
        return Ok(cursor + total as usize);
    }

    let buf = out.as_mut_slice();
    let mut group_base = cursor;
    for (g, group) in metadata.chunks_exact(16).enumerate() {
        let group: &[u32; 16] = group.try_into().expect("16-word group");
        let counts = row_popcounts(group);
        let inclusive = prefix_sum16(counts);
        for w in 0..16 {
            let offset = (inclusive[w] - counts[w]) as usize;
            let span = &mut buf[(g * 16 + w) * 32..(g * 16 + w + 1) * 32];
            let taken = expand_word(group[w], &values[group_base + offset..], span);
            debug_assert_eq!(taken, counts[w] as usize);
        }
        group_base += inclusive[15] as usize;
    }
    debug_assert_eq!(group_base, cursor + total as usize);
    Ok(group_base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::Dtype;
    use half::bf16;

    fn bf(v: f32) -> bf16 {
        bf16::from_f32(v)
    }

    #[test]
    fn all_zero_metadata_leaves_zero_tile_and_cursor() {
        let layout = TileLayout::tiled(Dtype::Bf16);
        let mut out = TileBuffer::new(layout);
        out.as_mut_slice().fill(bf(9.0)); // stale contents must be cleared
        let values = [bf(1.0); 4];
        let cursor = decompress_tile(layout, &[0u32; 16], &values, 2, &mut out).unwrap();
        assert_eq!(cursor, 2);
        assert!(out.as_slice().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn all_one_metadata_copies_next_512_values() {
        let layout = TileLayout::tiled(Dtype::Bf16);
        let mut out = TileBuffer::new(layout);
        let values: Vec<bf16> = (0..600).map(|i| bf(i as f32)).collect();
        let cursor = decompress_tile(layout, &[u32::MAX; 16], &values, 10, &mut out).unwrap();
        assert_eq!(cursor, 522);
        for (i, v) in out.as_slice().iter().enumerate() {
            assert_eq!(*v, values[10 + i]);
        }
    }

    #[test]
    fn sparse_word_scatters_lsb_first() {
        // word0 = 0b101: values [a, b] land at positions 0 and 2 of row 0.
        let layout = TileLayout::tiled(Dtype::Bf16);
        let mut metadata = [0u32; 16];
        metadata[0] = 0x0000_0005;
        let values = [bf(7.5), bf(-3.25)];
        let mut out = TileBuffer::new(layout);
        let cursor = decompress_tile(layout, &metadata, &values, 0, &mut out).unwrap();
        assert_eq!(cursor, 2);
        let row0 = &out.as_slice()[..32];
        assert_eq!(row0[0], bf(7.5));
        assert_eq!(row0[1].to_bits(), 0);
        assert_eq!(row0[2], bf(-3.25));
        assert!(row0[3..].iter().all(|v| v.to_bits() == 0));
        assert!(out.as_slice()[32..].iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn int8_tile_uses_two_word_groups() {
        // 16x64 tile: word 2r covers elements 0..32 of row r, word 2r+1 the
        // rest; words 0..16 therefore cover rows 0..8.
        let layout = TileLayout::tiled(Dtype::Int8);
        assert_eq!(layout.words_per_tile(), 32);
        let mut metadata = [0u32; 32];
        metadata[0] = 1; // row 0, element 0
        metadata[1] = 1 << 5; // row 0, element 37
        metadata[17] = 1 << 2; // row 8, element 34
        let values = [11i8, 22, 33];
        let mut out = TileBuffer::new(layout);
        let cursor = decompress_tile(layout, &metadata, &values, 0, &mut out).unwrap();
        assert_eq!(cursor, 3);
        let tile = out.as_slice();
        assert_eq!(tile[0], 11);
        assert_eq!(tile[37], 22);
        assert_eq!(tile[8 * 64 + 34], 33);
        assert_eq!(tile.iter().filter(|&&v| v != 0).count(), 3);
    }

    #[test]
    fn value_underrun_is_an_error() {
        let layout = TileLayout::tiled(Dtype::Bf16);
        let mut metadata = [0u32; 16];
        metadata[3] = 0xFF;
        let values = [bf(1.0); 7]; // needs 8
        let mut out = TileBuffer::new(layout);
        match decompress_tile(layout, &metadata, &values, 0, &mut out) {
            Err(Error::ExhaustedValues) => {}
            other => panic!("expected exhausted values, got {other:?}"),
        }
    }
}
