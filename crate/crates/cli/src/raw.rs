//! Raw dense tensor files: the converter's input format.
//!
//! Little-endian: `u32 rows`, `u32 cols`, `u8 dtype` (0 = BF16, 1 = INT8,
//! 2 = F32), then row-major element data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::bf16;
use sparamx::error::{Error, Result};
use sparamx::matrix::Matrix;

pub const RAW_DTYPE_BF16: u8 = 0;
pub const RAW_DTYPE_INT8: u8 = 1;
pub const RAW_DTYPE_F32: u8 = 2;

/// Read any raw tensor as f32 values.
pub fn read_raw_f32(path: &Path) -> Result<Matrix<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 9];
    r.read_exact(&mut header)?;
    let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dtype = header[8];
    if rows == 0 || cols == 0 {
        return Err(Error::MalformedInput("raw tensor has zero dims".into()));
    }
    let count = rows * cols;
    let elem_size = match dtype {
        RAW_DTYPE_BF16 => 2,
        RAW_DTYPE_INT8 => 1,
        RAW_DTYPE_F32 => 4,
        other => return Err(Error::MalformedInput(format!("unknown raw dtype {other}"))),
    };
    let mut bytes = vec![0u8; count * elem_size];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = match dtype {
        RAW_DTYPE_BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        RAW_DTYPE_INT8 => bytes.iter().map(|&b| b as i8 as f32).collect(),
        _ => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_raw_bf16(path: &Path, m: &Matrix<bf16>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    w.write_all(&[RAW_DTYPE_BF16])?;
    let mut bytes = Vec::with_capacity(m.rows() * m.cols() * 2);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_raw_f32(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    w.write_all(&[RAW_DTYPE_F32])?;
    let mut bytes = Vec::with_capacity(m.rows() * m.cols() * 4);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_and_bf16_round_trip() {
        let dir = std::env::temp_dir().join(format!("sparamx-raw-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let m = Matrix::from_fn(5, 7, |r, c| (r * 7 + c) as f32 * 0.5 - 3.0);

        let p = dir.join("t.f32");
        write_raw_f32(&p, &m).unwrap();
        assert_eq!(read_raw_f32(&p).unwrap(), m);

        let p = dir.join("t.bf16");
        let mb = Matrix::from_f32(&m);
        write_raw_bf16(&p, &mb).unwrap();
        assert_eq!(read_raw_f32(&p).unwrap(), mb.to_f32());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = std::env::temp_dir().join(format!("sparamx-raw-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.dns");
        std::fs::write(&p, [1, 0, 0, 0, 1, 0, 0, 0, 9]).unwrap();
        assert!(matches!(read_raw_f32(&p), Err(Error::MalformedInput(_))));
        std::fs::write(&p, [1, 0, 0, 0, 1, 0, 0, 0, 2, 0xAA]).unwrap();
        assert!(matches!(read_raw_f32(&p), Err(Error::Truncated)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
