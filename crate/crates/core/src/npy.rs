//! Thin layer over `npyz` restricted to the two element types the toolkit
//! exchanges: little-endian `f32` matrices and `u8` pattern matrices, both
//! C-contiguous.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use npyz::WriterBuilder;

use crate::error::{Error, Result};
use crate::io_util::atomic_write;

fn open(path: &Path) -> Result<npyz::NpyFile<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    npyz::NpyFile::new(BufReader::new(file))
        .map_err(|e| Error::format(path.display().to_string(), format!("malformed npy header: {e}")))
}

fn check_layout<R: std::io::Read>(path: &Path, npy: &npyz::NpyFile<R>, descr: &str) -> Result<Vec<u64>> {
    let ctx = path.display().to_string();
    let found = match npy.dtype() {
        npyz::DType::Plain(ts) => ts.to_string(),
        other => other.descr(),
    };
    if found != descr {
        return Err(Error::format(ctx, format!("expected dtype '{descr}', found '{found}'")));
    }
    if npy.order() != npyz::Order::C {
        return Err(Error::format(ctx, "Fortran-order arrays are not supported"));
    }
    Ok(npy.shape().to_vec())
}

fn shape2(path: &Path, shape: &[u64]) -> Result<(usize, usize)> {
    match *shape {
        [rows, cols] => Ok((rows as usize, cols as usize)),
        [n] => Ok((1, n as usize)),
        _ => Err(Error::format(
            path.display().to_string(),
            format!("expected a 1-D or 2-D array, found shape {shape:?}"),
        )),
    }
}

/// Reads a `<f4` matrix. A 1-D array is returned as a single row.
pub fn read_f32_matrix(path: &Path) -> Result<Array2<f32>> {
    let npy = open(path)?;
    let shape = check_layout(path, &npy, "<f4")?;
    let (rows, cols) = shape2(path, &shape)?;
    let data: Vec<f32> = npy
        .into_vec()
        .map_err(|e| Error::format(path.display().to_string(), format!("truncated data: {e}")))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::format(path.display().to_string(), e))
}

/// Reads a `|u1` matrix.
pub fn read_u8_matrix(path: &Path) -> Result<Array2<u8>> {
    let npy = open(path)?;
    let shape = check_layout(path, &npy, "|u1")?;
    let (rows, cols) = shape2(path, &shape)?;
    let data: Vec<u8> = npy
        .into_vec()
        .map_err(|e| Error::format(path.display().to_string(), format!("truncated data: {e}")))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::format(path.display().to_string(), e))
}

fn write_matrix<T>(path: &Path, rows: usize, cols: usize, values: impl Iterator<Item = T>) -> Result<()>
where
    T: npyz::AutoSerialize,
{
    atomic_write(path, |file| {
        let mut buf = BufWriter::new(file);
        let mut writer = npyz::WriteOptions::new()
            .default_dtype()
            .shape(&[rows as u64, cols as u64])
            .writer(&mut buf)
            .begin_nd()?;
        writer.extend(values)?;
        writer.finish()?;
        buf.flush()
    })
}

pub fn write_f32_matrix(path: &Path, data: &Array2<f32>) -> Result<()> {
    let (rows, cols) = data.dim();
    write_matrix(path, rows, cols, data.iter().copied())
}

pub fn write_u8_matrix(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (rows, cols) = data.dim();
    write_matrix(path, rows, cols, data.iter().copied())
}
