//! Versioned binary checkpoint format.
//!
//! Layout: magic `GSDF`, version u32 LE, header length u64 LE, header JSON
//! (configs, parameter manifest, optional training extras), then f64 LE
//! parameter arrays in declaration order. When training extras are present,
//! the optimizer's first- and second-moment arrays follow in the same
//! order. Round-trips are bitwise exact.

use super::{ConditionalSdfModel, DecoderConfig, EncoderConfig, ParamStore};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GSDF";
const VERSION: u32 = 1;

/// Optimizer and schedule state carried alongside the model so a run can
/// resume bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointExtras {
    pub epoch: usize,
    /// Adam step counter.
    pub step_count: u64,
    pub base_seed: u64,
    pub config_hash: String,
    /// (first moment, second moment) per parameter, in declaration order.
    pub moments: Vec<(Tensor, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ExtrasMeta {
    epoch: usize,
    step_count: u64,
    base_seed: u64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    init_seed: u64,
    params: Vec<ParamMeta>,
    extras: Option<ExtrasMeta>,
}

pub fn save_checkpoint(
    model: &ConditionalSdfModel,
    extras: Option<&CheckpointExtras>,
    path: &Path,
) -> Result<()> {
    if let Some(e) = extras {
        if e.moments.len() != model.params().len() {
            return Err(Error::Usage(
                "optimizer moments do not match the parameter count".into(),
            ));
        }
    }
    let header = Header {
        encoder: model.encoder.clone(),
        decoder: model.decoder.clone(),
        init_seed: model.init_seed,
        params: model
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
        extras: extras.map(|e| ExtrasMeta {
            epoch: e.epoch,
            step_count: e.step_count,
            base_seed: e.base_seed,
            config_hash: e.config_hash.clone(),
        }),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    let write_tensor = |w: &mut BufWriter<File>, t: &Tensor| -> Result<()> {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for p in model.params().iter() {
        write_tensor(&mut w, &p.tensor)?;
    }
    if let Some(e) = extras {
        for (m, _) in &e.moments {
            write_tensor(&mut w, m)?;
        }
        for (_, v) in &e.moments {
            write_tensor(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ConditionalSdfModel, Option<CheckpointExtras>)> {
    let file = File::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Load(format!("{}: truncated magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Load(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)
        .map_err(|_| Error::Load(format!("{}: truncated version", path.display())))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Load(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l)
        .map_err(|_| Error::Load(format!("{}: truncated header length", path.display())))?;
    let header_len = u64::from_le_bytes(l) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Load(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Load(format!("{}: bad header: {e}", path.display())))?;

    let read_tensor = |r: &mut BufReader<File>, shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Load(format!("{}: truncated parameter data", path.display())))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape.to_vec(), data)
    };

    let mut params = ParamStore::default();
    for meta in &header.params {
        params.push(meta.name.clone(), read_tensor(&mut r, &meta.shape)?);
    }
    let extras = match &header.extras {
        None => None,
        Some(meta) => {
            let mut ms = Vec::with_capacity(header.params.len());
            for p in &header.params {
                ms.push(read_tensor(&mut r, &p.shape)?);
            }
            // v arrays are grouped after all m arrays; pair them back up.
            let mut moments = Vec::with_capacity(header.params.len());
            for (p, m) in header.params.iter().zip(ms) {
                moments.push((m, read_tensor(&mut r, &p.shape)?));
            }
            Some(CheckpointExtras {
                epoch: meta.epoch,
                step_count: meta.step_count,
                base_seed: meta.base_seed,
                config_hash: meta.config_hash.clone(),
                moments,
            })
        }
    };

    let mut model = ConditionalSdfModel::new(header.encoder, header.decoder, header.init_seed)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    let got: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    if expected != got {
        return Err(Error::Load(format!(
            "{}: parameter manifest does not match the configs",
            path.display()
        )));
    }
    model.set_params(params);
    Ok((model, extras))
}
