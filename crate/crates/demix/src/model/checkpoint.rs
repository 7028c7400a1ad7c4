//! Single-file checkpoint container: format version, the `ModelConfig` as
//! JSON, then named parameter tensors. Loading validates the config and the
//! parameter table before any tensor is restored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::error::{DemixError, Result};

use super::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DMIXCKP1";
const VERSION: u32 = 1;

pub fn save(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.param_names().len() as u32).to_le_bytes())?;
    for (name, value) in model.param_names().iter().zip(model.param_values()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in value.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DemixError::Data("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DemixError::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    config.validate()?;

    // Rebuild the architecture first; the stored tensors must match it.
    let mut model: Model<f32> = Model::build(config)?;
    let n = read_u32(&mut r)? as usize;
    if n != model.param_names().len() {
        return Err(DemixError::Data(format!(
            "checkpoint has {n} tensors, architecture needs {}",
            model.param_names().len()
        )));
    }
    for i in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| DemixError::Data(e.to_string()))?;
        if name != model.param_names()[i] {
            return Err(DemixError::Data(format!(
                "tensor {i} named {name:?}, architecture expects {:?}",
                model.param_names()[i]
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let expect = model.param_values()[i].shape().to_vec();
        if dims.to_vec() != expect {
            return Err(DemixError::Data(format!(
                "tensor {name} has shape {dims:?}, architecture expects {expect:?}"
            )));
        }
        let count: usize = dims.iter().product();
        let mut data = vec![0f32; count];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        model.param_values_mut()[i] =
            Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
                .map_err(|e| DemixError::Data(e.to_string()))?;
    }
    Ok(model)
}
