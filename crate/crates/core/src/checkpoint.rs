//! Binary model checkpoints and loss-history CSV files.
//!
//! Layout: the 8 magic bytes `PIMLCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! every array's entries as little-endian `f64` in header order.

use crate::error::{Error, Result};
use crate::oscillator::{OscillatorConfig, OscillatorModel};
use crate::params::ParamSet;
use crate::pinn::{Activation, MlpModel, PinnLossReport};
use crate::Array;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PIMLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelMeta {
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
        seed: u64,
    },
    Oscillator {
        config: OscillatorConfig,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: ModelMeta,
    arrays: Vec<ArrayEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, meta: &ModelMeta, params: &ParamSet) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        arrays: params
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for a in params.arrays() {
        for v in a.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelMeta, ParamSet)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic bytes)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut params = ParamSet::new();
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; 8 * n];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("checkpoint truncated inside array '{}'", entry.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(entry.name, Array::from_vec(entry.shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last array".into()));
    }
    Ok((header.meta, params))
}

pub fn save_mlp(path: &Path, model: &MlpModel, seed: u64) -> Result<()> {
    let meta = ModelMeta::Mlp {
        widths: model.widths.clone(),
        activation: model.activation,
        seed,
    };
    write_checkpoint(BufWriter::new(fs::File::create(path)?), &meta, &model.params)
}

/// Returns the network and the seed it was initialized from.
pub fn load_mlp(path: &Path) -> Result<(MlpModel, u64)> {
    let (meta, params) = read_checkpoint(BufReader::new(fs::File::open(path)?))?;
    let ModelMeta::Mlp { widths, activation, seed } = meta else {
        return Err(Error::Format(format!("{} holds an oscillator, not a network", path.display())));
    };
    let reference = MlpModel::zeros(&widths)?;
    if reference.params.names() != params.names()
        || reference.params.arrays().iter().zip(params.arrays()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Format(format!("{}: arrays do not match widths {widths:?}", path.display())));
    }
    Ok((
        MlpModel {
            widths,
            activation,
            params,
        },
        seed,
    ))
}

pub fn save_oscillator(path: &Path, model: &OscillatorModel) -> Result<()> {
    let meta = ModelMeta::Oscillator { config: model.config };
    write_checkpoint(BufWriter::new(fs::File::create(path)?), &meta, &model.params)
}

pub fn load_oscillator(path: &Path) -> Result<OscillatorModel> {
    let (meta, params) = read_checkpoint(BufReader::new(fs::File::open(path)?))?;
    let ModelMeta::Oscillator { config } = meta else {
        return Err(Error::Format(format!("{} holds a network, not an oscillator", path.display())));
    };
    let model = OscillatorModel { config, params };
    model.validate()?;
    Ok(model)
}

pub fn write_pinn_history<W: Write>(mut w: W, history: &[PinnLossReport]) -> Result<()> {
    writeln!(w, "epoch,total,residual,ic,bc")?;
    for r in history {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.epoch, r.total, r.residual_term, r.ic_term, r.bc_term
        )?;
    }
    Ok(())
}

pub fn write_oscillator_history<W: Write>(mut w: W, history: &[f64]) -> Result<()> {
    writeln!(w, "epoch,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(w, "{i},{l:.16e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillator::CellKind;

    #[test]
    fn mlp_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pinn.ckpt");
        let model = MlpModel::new(&[2, 20, 20, 1], 17).unwrap();
        save_mlp(&path, &model, 17).unwrap();
        let (back, seed) = load_mlp(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(seed, 17);
        assert!(load_oscillator(&path).is_err());
    }

    #[test]
    fn oscillator_round_trip_keeps_hyperparameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("osc.ckpt");
        let mut cfg = OscillatorConfig::new(CellKind::Cornn, 7);
        cfg.delta_t = 0.3;
        cfg.explicit_damping = true;
        let model = OscillatorModel::new(cfg).unwrap();
        save_oscillator(&path, &model).unwrap();
        assert_eq!(load_oscillator(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = MlpModel::new(&[2, 3, 1], 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ModelMeta::Mlp { widths: model.widths.clone(), activation: Activation::Tanh, seed: 0 }, &model.params).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut future = bytes.clone();
        future[8] = 9;
        assert!(read_checkpoint(&future[..]).is_err());
        assert!(read_checkpoint(&bytes[..]).is_ok());
    }

    #[test]
    fn history_csv_layout() {
        let mut out = Vec::new();
        let rep = PinnLossReport {
            epoch: 0,
            total: 1.5,
            residual_term: 1.0,
            ic_term: 0.25,
            bc_term: 0.25,
        };
        write_pinn_history(&mut out, &[rep]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,total,residual,ic,bc"));
        let fields: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(fields, vec![0.0, 1.5, 1.0, 0.25, 0.25]);
    }
}
