//! Versioned binary checkpoint.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SMOP" | u32 version | u64 config_len | config (TOML, UTF-8)
//! u64 n_params
//! per param: u32 name_len | name | u8 trainable | u32 ndim | u64 dims[ndim] | f64 values[Π dims]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::harness::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMOP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    let cfg = model.config.to_toml()?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    let params = model.store.params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[u8::from(p.trainable)])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    read(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let cfg_len = u64::from_le_bytes(array(&mut r)?) as usize;
    let mut cfg = vec![0u8; cfg_len];
    read(&mut r, &mut cfg)?;
    let cfg = String::from_utf8(cfg).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = TrainConfig::from_toml(&cfg)?;

    let n = u64::from_le_bytes(array(&mut r)?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = u32::from_le_bytes(array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        read(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("bad param name".into()))?;
        let [trainable] = array::<1>(&mut r)?;
        let ndim = u32::from_le_bytes(array(&mut r)?) as usize;
        let shape = (0..ndim)
            .map(|_| array(&mut r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| array(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(shape, data)?, trainable != 0);
    }
    let mut model = Model::new(config)?;
    model.store.load_values(&store)?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn read(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read(r, &mut b)?;
    Ok(b)
}
