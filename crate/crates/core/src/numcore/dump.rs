//! Debug dump of a tensor: raw little-endian values plus a `.json` sidecar
//! holding the shape and element type.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{bail, Error, Result};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_dump<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let width = std::mem::size_of::<T>();
    let mut bytes = Vec::with_capacity(tensor.numel() * width);
    for v in tensor.data() {
        if width == 4 {
            bytes.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        } else {
            bytes.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = Sidecar {
        shape: tensor.shape().to_vec(),
        dtype: T::NAME.to_string(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(side, e))
}

pub fn read_dump<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let side = sidecar_path(path);
    let meta: Sidecar =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    if meta.dtype != T::NAME {
        bail!(Input, "dump holds {} values, requested {}", meta.dtype, T::NAME);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = std::mem::size_of::<T>();
    let expected = meta.shape.iter().product::<usize>() * width;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("dump payload is {} bytes, shape needs {expected}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            } else {
                T::c(f64::from_le_bytes(c.try_into().unwrap()))
            }
        })
        .collect();
    Tensor::new(meta.shape, data)
}
