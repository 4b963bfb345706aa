//! `.spx` packed-tensor file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic   "SPX1"
//! u8      version (1)
//! u8      dtype code: 0 = BF16, 1 = INT8; +2 selects the vector-strip order
//! u32     logical_rows, logical_cols, padded_rows, padded_cols, num_workers
//! u32 n   thread cursors      (n u32 entries)
//! u32 n   bitmap              (n u32 words)
//! u32 n   values              (n raw elements)
//! ```
//!
//! An optional trailing section tagged `QNT1` carries quantization scales:
//! a u32-length-prefixed f32 array of per-column weight scales followed by
//! one f32 activation scale.

use std::io::{Read, Write};

use half::bf16;

use crate::error::{Error, Result};
use crate::format::{Dtype, Element, PackOrder, PackedSparseTensor, TileLayout};
use crate::int8::QuantParams;

const MAGIC: [u8; 4] = *b"SPX1";
const QUANT_TAG: [u8; 4] = *b"QNT1";
const VERSION: u8 = 1;

fn dtype_code(layout: TileLayout) -> u8 {
    let base = match layout.dtype() {
        Dtype::Bf16 => 0,
        Dtype::Int8 => 1,
    };
    match layout.order() {
        PackOrder::Tiled => base,
        PackOrder::VectorStrips => base + 2,
    }
}

fn layout_of_code(code: u8) -> Result<TileLayout> {
    match code {
        0 => Ok(TileLayout::tiled(Dtype::Bf16)),
        1 => Ok(TileLayout::tiled(Dtype::Int8)),
        2 => Ok(TileLayout::vector(Dtype::Bf16)),
        3 => Ok(TileLayout::vector(Dtype::Int8)),
        other => Err(Error::BadDtype(other)),
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

/// Save a tensor; bit-exact round trip with [`load_packed`].
pub fn save_packed<T: Element, W: Write>(t: &PackedSparseTensor<T>, sink: &mut W) -> Result<()> {
    save_packed_with_quant(t, None, sink)
}

/// Save a tensor with an optional trailing quantization section.
pub fn save_packed_with_quant<T: Element, W: Write>(
    t: &PackedSparseTensor<T>,
    quant: Option<&QuantParams>,
    sink: &mut W,
) -> Result<()> {
    sink.write_all(&MAGIC)?;
    sink.write_all(&[VERSION, dtype_code(t.layout())])?;
    write_u32(sink, t.logical_rows() as u32)?;
    write_u32(sink, t.logical_cols() as u32)?;
    write_u32(sink, t.padded_rows() as u32)?;
    write_u32(sink, t.padded_cols() as u32)?;
    write_u32(sink, t.num_workers() as u32)?;

    write_u32(sink, t.thread_cursors().len() as u32)?;
    for &c in t.thread_cursors() {
        write_u32(sink, c)?;
    }
    write_u32(sink, t.bitmap().len() as u32)?;
    for &w in t.bitmap() {
        write_u32(sink, w)?;
    }
    write_u32(sink, t.values().len() as u32)?;
    let mut bytes = Vec::with_capacity(t.values().len() * T::SIZE);
    for &v in t.values() {
        v.write_le(&mut bytes);
    }
    sink.write_all(&bytes)?;

    if let Some(q) = quant {
        sink.write_all(&QUANT_TAG)?;
        write_u32(sink, q.weight_scales.len() as u32)?;
        for &s in &q.weight_scales {
            sink.write_all(&s.to_le_bytes())?;
        }
        sink.write_all(&q.activation_scale.to_le_bytes())?;
    }
    Ok(())
}

/// Load a tensor of a known element type, ignoring any quantization section.
pub fn load_packed<T: Element, R: Read>(source: &mut R) -> Result<PackedSparseTensor<T>> {
    Ok(load_packed_with_quant(source)?.0)
}

/// Load a tensor of a known element type plus its quantization section.
pub fn load_packed_with_quant<T: Element, R: Read>(
    source: &mut R,
) -> Result<(PackedSparseTensor<T>, Option<QuantParams>)> {
    match load_packed_any(source)? {
        (AnyPackedTensor::Bf16(t), q) if T::DTYPE == Dtype::Bf16 => {
            // The dtype check above makes this transmute-free downcast safe:
            // T is bf16 exactly when the match arm is taken.
            let any: Box<dyn std::any::Any> = Box::new(t);
            Ok((*any.downcast().expect("dtype checked"), q))
        }
        (AnyPackedTensor::Int8(t), q) if T::DTYPE == Dtype::Int8 => {
            let any: Box<dyn std::any::Any> = Box::new(t);
            Ok((*any.downcast().expect("dtype checked"), q))
        }
        (AnyPackedTensor::Bf16(_) | AnyPackedTensor::Int8(_), _) => Err(Error::BadDtype(255)),
    }
}

/// Tensor of either element type, as read from a file header.
pub enum AnyPackedTensor {
    Bf16(PackedSparseTensor<bf16>),
    Int8(PackedSparseTensor<i8>),
}

/// Load a tensor dispatching on the header dtype code.
pub fn load_packed_any<R: Read>(source: &mut R) -> Result<(AnyPackedTensor, Option<QuantParams>)> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut vd = [0u8; 2];
    source.read_exact(&mut vd)?;
    if vd[0] != VERSION {
        return Err(Error::BadVersion(vd[0]));
    }
    let layout = layout_of_code(vd[1])?;

    let logical_rows = read_u32(source)? as usize;
    let logical_cols = read_u32(source)? as usize;
    let padded_rows = read_u32(source)? as usize;
    let padded_cols = read_u32(source)? as usize;
    let num_workers = read_u32(source)? as usize;

    let n_cursors = read_u32(source)? as usize;
    let mut cursors = Vec::with_capacity(n_cursors);
    for _ in 0..n_cursors {
        cursors.push(read_u32(source)?);
    }
    let n_words = read_u32(source)? as usize;
    let mut bitmap = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        bitmap.push(read_u32(source)?);
    }
    let n_values = read_u32(source)? as usize;

    let tensor = match layout.dtype() {
        Dtype::Bf16 => AnyPackedTensor::Bf16(read_body::<bf16, R>(
            source,
            logical_rows,
            logical_cols,
            padded_rows,
            padded_cols,
            layout,
            bitmap,
            cursors,
            num_workers,
            n_values,
        )?),
        Dtype::Int8 => AnyPackedTensor::Int8(read_body::<i8, R>(
            source,
            logical_rows,
            logical_cols,
            padded_rows,
            padded_cols,
            layout,
            bitmap,
            cursors,
            num_workers,
            n_values,
        )?),
    };

    let quant = read_quant_section(source)?;
    Ok((tensor, quant))
}

#[allow(clippy::too_many_arguments)]
fn read_body<T: Element, R: Read>(
    source: &mut R,
    logical_rows: usize,
    logical_cols: usize,
    padded_rows: usize,
    padded_cols: usize,
    layout: TileLayout,
    bitmap: Vec<u32>,
    cursors: Vec<u32>,
    num_workers: usize,
    n_values: usize,
) -> Result<PackedSparseTensor<T>> {
    let mut bytes = vec![0u8; n_values * T::SIZE];
    source.read_exact(&mut bytes)?;
    let values: Vec<T> = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();

    if padded_rows * padded_cols != bitmap.len() * 32 {
        return Err(Error::CorruptTensor(format!(
            "bitmap holds {} bits for {} padded elements",
            bitmap.len() * 32,
            padded_rows * padded_cols
        )));
    }
    let popcount: u64 = bitmap.iter().map(|w| u64::from(w.count_ones())).sum();
    if popcount != values.len() as u64 {
        return Err(Error::CorruptTensor(format!(
            "bitmap popcount {} != value count {}",
            popcount,
            values.len()
        )));
    }
    if cursors.len() != num_workers {
        return Err(Error::CorruptTensor(format!(
            "{} cursors for {} workers",
            cursors.len(),
            num_workers
        )));
    }

    Ok(PackedSparseTensor::from_parts(
        logical_rows,
        logical_cols,
        padded_rows,
        padded_cols,
        layout,
        bitmap,
        values,
        cursors,
        num_workers,
    ))
}

fn read_quant_section<R: Read>(source: &mut R) -> Result<Option<QuantParams>> {
    let mut tag = [0u8; 4];
    let mut got = 0usize;
    while got < 4 {
        let n = source.read(&mut tag[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None); // clean end of stream
    }
    if got < 4 || tag != QUANT_TAG {
        return Err(Error::MalformedInput("unexpected trailing data".into()));
    }
    let n = read_u32(source)? as usize;
    let mut weight_scales = Vec::with_capacity(n);
    for _ in 0..n {
        weight_scales.push(read_f32(source)?);
    }
    let activation_scale = read_f32(source)?;
    Ok(Some(QuantParams {
        weight_scales,
        activation_scale,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::pack_weights;
    use crate::matrix::Matrix;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_tensor(workers: usize) -> PackedSparseTensor<bf16> {
        let mut rng = StdRng::seed_from_u64(21);
        let dense = Matrix::from_fn(48, 96, |_, _| {
            if rng.gen_bool(0.5) {
                bf16::from_f32(0.0)
            } else {
                bf16::from_f32(rng.gen_range(-2.0f32..2.0))
            }
        });
        pack_weights(&dense, TileLayout::tiled(Dtype::Bf16), workers).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let t = sample_tensor(2);
        let mut buf = Vec::new();
        save_packed(&t, &mut buf).unwrap();
        let back: PackedSparseTensor<bf16> = load_packed(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);

        // Saving the reloaded tensor reproduces identical bytes.
        let mut buf2 = Vec::new();
        save_packed(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        let t = sample_tensor(3);
        let mut buf = Vec::new();
        save_packed(&t, &mut buf).unwrap();
        let header = 4 + 1 + 1 + 5 * 4;
        let prefixes = 3 * 4;
        let expect = header
            + prefixes
            + 4 * t.thread_cursors().len()
            + 4 * t.bitmap().len()
            + 2 * t.values().len();
        assert_eq!(buf.len(), expect);
    }

    #[test]
    fn truncated_stream_is_reported() {
        let t = sample_tensor(1);
        let mut buf = Vec::new();
        save_packed(&t, &mut buf).unwrap();
        for cut in [3, 5, 24, 30, buf.len() - 1] {
            match load_packed::<bf16, _>(&mut &buf[..cut]) {
                Err(Error::Truncated) => {}
                other => panic!("cut {cut}: expected truncation, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let t = sample_tensor(1);
        let mut buf = Vec::new();
        save_packed(&t, &mut buf).unwrap();

        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(
            load_packed::<bf16, _>(&mut wrong.as_slice()),
            Err(Error::BadMagic(_))
        ));

        let mut wrong = buf.clone();
        wrong[4] = 9;
        assert!(matches!(
            load_packed::<bf16, _>(&mut wrong.as_slice()),
            Err(Error::BadVersion(9))
        ));

        let mut wrong = buf;
        wrong[5] = 7;
        assert!(matches!(
            load_packed::<bf16, _>(&mut wrong.as_slice()),
            Err(Error::BadDtype(7))
        ));
    }

    #[test]
    fn quant_section_round_trips() {
        let mut rng = StdRng::seed_from_u64(77);
        let dense = Matrix::from_fn(64, 32, |_, _| rng.gen_range(-90i8..=90));
        let t = pack_weights(&dense, TileLayout::tiled(Dtype::Int8), 1).unwrap();
        let q = QuantParams {
            weight_scales: (0..32).map(|i| 0.01 * (i + 1) as f32).collect(),
            activation_scale: 0.0123,
        };
        let mut buf = Vec::new();
        save_packed_with_quant(&t, Some(&q), &mut buf).unwrap();
        let (back, back_q) = load_packed_with_quant::<i8, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let back_q = back_q.expect("quant section present");
        assert_eq!(back_q.weight_scales, q.weight_scales);
        assert_eq!(back_q.activation_scale, q.activation_scale);
    }

    #[test]
    fn vector_layout_round_trips_via_dtype_code() {
        let mut rng = StdRng::seed_from_u64(31);
        let dense = Matrix::from_fn(30, 20, |_, _| {
            if rng.gen_bool(0.5) {
                bf16::from_f32(0.0)
            } else {
                bf16::from_f32(rng.gen_range(-1.0f32..1.0))
            }
        });
        let t = pack_weights(&dense, TileLayout::vector(Dtype::Bf16), 1).unwrap();
        let mut buf = Vec::new();
        save_packed(&t, &mut buf).unwrap();
        assert_eq!(buf[5], 2);
        let back: PackedSparseTensor<bf16> = load_packed(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }
}
