//! Versioned binary model files: magic, architecture header, frozen
//! standardization constants, then every parameter tensor in layout order
//! as little-endian f32.

use std::io::{Read, Write};

use super::{ModelParams, Standardization, TrainedModel, VitConfig};
use crate::error::{Error, Result};
use crate::geom::Vec2;

const MAGIC: &[u8; 8] = b"GRAINMDL";
const VERSION: u32 = 1;

pub fn write_model<W: Write>(model: &TrainedModel, mut w: W) -> Result<()> {
    let cfg = &model.params.cfg;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for dim in [
        cfg.rows,
        cfg.cols,
        cfg.channels,
        cfg.patch,
        cfg.embed,
        cfg.blocks,
        cfg.heads,
        cfg.ff,
        cfg.head_hidden,
        cfg.extra_head_inputs,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&(cfg.extent.x as f32).to_le_bytes())?;
    w.write_all(&(cfg.extent.y as f32).to_le_bytes())?;
    for c in 0..cfg.channels {
        w.write_all(&(model.stdz.mean[c] as f32).to_le_bytes())?;
        w.write_all(&(model.stdz.scale[c] as f32).to_le_bytes())?;
    }
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for &v in &model.params.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<TrainedModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let mut dims = [0usize; 10];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let extent = Vec2::new(read_f32(&mut r)? as f64, read_f32(&mut r)? as f64);
    let cfg = VitConfig {
        rows: dims[0],
        cols: dims[1],
        channels: dims[2],
        patch: dims[3],
        embed: dims[4],
        blocks: dims[5],
        heads: dims[6],
        ff: dims[7],
        head_hidden: dims[8],
        extra_head_inputs: dims[9],
        extent,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("bad model header: {e}")))?;
    let mut mean = Vec::with_capacity(cfg.channels);
    let mut scale = Vec::with_capacity(cfg.channels);
    for _ in 0..cfg.channels {
        mean.push(read_f32(&mut r)? as f64);
        scale.push(read_f32(&mut r)? as f64);
    }
    let count = read_u32(&mut r)? as usize;
    let expected = ModelParams::init(cfg, 0)
        .map_err(|e| Error::Format(format!("bad model header: {e}")))?
        .len();
    if count != expected {
        return Err(Error::Format(format!(
            "parameter count {count} does not match the architecture ({expected})"
        )));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(read_f32(&mut r)? as f64);
    }
    Ok(TrainedModel {
        params: ModelParams { cfg, data },
        stdz: Standardization { mean, scale },
    })
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
