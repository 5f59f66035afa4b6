//! Flat binary episode records and the dataset manifest.
//!
//! Record layout (little-endian): magic "NPFE", u32 version, u8 modality
//! tag (0/1/2), u64 context_views, u64 image h, u64 image w (0 when
//! absent), f64 t_near/t_far (NaN when absent), u8 mask flag + mask bytes,
//! then four arrays (context in/out, target in, optional target out),
//! each as u8 presence flag, u64 rows, u64 cols, row-major f64 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Modality;

use super::{BatchMeta, TaskBatch};

const MAGIC: &[u8; 4] = b"NPFE";
const VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, t: Option<&Tensor>) {
    match t {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::invalid_input("truncated episode record"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Option<Tensor>> {
        if self.u8()? == 0 {
            return Ok(None);
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Some(Tensor::from_vec(rows, cols, data)))
    }
}

pub fn write_episode(path: &Path, batch: &TaskBatch) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match batch.modality {
        Modality::Signal1d => 0,
        Modality::Image2d => 1,
        Modality::Rays3d => 2,
    });
    out.extend_from_slice(&(batch.meta.context_views as u64).to_le_bytes());
    let (h, w) = batch.meta.image_hw.unwrap_or((0, 0));
    out.extend_from_slice(&(h as u64).to_le_bytes());
    out.extend_from_slice(&(w as u64).to_le_bytes());
    let (tn, tf) = batch.meta.t_bounds.unwrap_or((f64::NAN, f64::NAN));
    out.extend_from_slice(&tn.to_le_bytes());
    out.extend_from_slice(&tf.to_le_bytes());
    match &batch.meta.context_mask {
        None => out.push(0),
        Some(m) => {
            out.push(1);
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            out.extend(m.iter().map(|&b| b as u8));
        }
    }
    put_tensor(&mut out, Some(&batch.context_inputs));
    put_tensor(&mut out, Some(&batch.context_outputs));
    put_tensor(&mut out, Some(&batch.target_inputs));
    put_tensor(&mut out, batch.target_outputs.as_ref());
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<TaskBatch> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { b: &raw, pos: 0 };
    if r.bytes(4)? != MAGIC {
        return Err(Error::invalid_input("bad episode magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::invalid_input(format!("unsupported episode version {version}")));
    }
    let modality = match r.u8()? {
        0 => Modality::Signal1d,
        1 => Modality::Image2d,
        2 => Modality::Rays3d,
        other => return Err(Error::invalid_input(format!("bad modality tag {other}"))),
    };
    let context_views = r.u64()? as usize;
    let h = r.u64()? as usize;
    let w = r.u64()? as usize;
    let tn = r.f64()?;
    let tf = r.f64()?;
    let context_mask = if r.u8()? == 1 {
        let n = r.u64()? as usize;
        Some(r.bytes(n)?.iter().map(|&b| b != 0).collect())
    } else {
        None
    };
    let context_inputs = r.tensor()?.ok_or_else(|| Error::invalid_input("missing context"))?;
    let context_outputs = r.tensor()?.ok_or_else(|| Error::invalid_input("missing context"))?;
    let target_inputs = r.tensor()?.ok_or_else(|| Error::invalid_input("missing targets"))?;
    let target_outputs = r.tensor()?;
    Ok(TaskBatch {
        modality,
        context_inputs,
        context_outputs,
        target_inputs,
        target_outputs,
        meta: BatchMeta {
            image_hw: if h > 0 { Some((h, w)) } else { None },
            context_mask,
            context_views,
            t_bounds: if tn.is_finite() { Some((tn, tf)) } else { None },
        },
    })
}

/// Seeds and splits for a reproducible dataset.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub task: String,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid_input(format!("manifest encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::invalid_input(format!("manifest decode: {e}")))
    }
}
