//! Self-describing binary checkpoints.
//!
//! Layout: magic, format version, JSON header (model spec, step counters,
//! seed, array directory, parameter layout), then the named arrays as
//! little-endian 32-bit floats. Files are written to a temporary sibling and
//! renamed into place, so readers never observe partial checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Dims, ParamEntry};
use super::{AttackMlpSpec, ClassifierSpec, TrainState};
use crate::error::{data_err, Error, Result};

const MAGIC: &[u8; 4] = b"SLKC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Classifier {
        spec: ClassifierSpec,
        input: Dims,
        step: usize,
        total_steps: usize,
        seed: u64,
        stream: String,
        arrays: Vec<ArrayEntry>,
        layout: Vec<ParamEntry>,
    },
    Attack {
        spec: AttackMlpSpec,
        arrays: Vec<ArrayEntry>,
    },
}

fn write_container(path: &Path, header: &Header, arrays: &[&[f32]]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        let mut buf = Vec::new();
        for arr in arrays {
            buf.clear();
            buf.reserve(arr.len() * 4);
            for v in *arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return data_err(format!("{}: not a checkpoint container", path.display()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return data_err(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        ));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return data_err(format!("{}: truncated checkpoint header", path.display()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| Error::Data(format!("{}: bad checkpoint header: {e}", path.display())))?;
    let arrays_meta = match &header {
        Header::Classifier { arrays, .. } => arrays,
        Header::Attack { arrays, .. } => arrays,
    };
    let mut offset = 16 + hlen;
    let mut arrays = Vec::with_capacity(arrays_meta.len());
    for meta in arrays_meta {
        let end = offset + meta.len * 4;
        if bytes.len() < end {
            return data_err(format!(
                "{}: array '{}' truncated at byte {offset}",
                path.display(),
                meta.name
            ));
        }
        let vals: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(vals);
        offset = end;
    }
    if offset != bytes.len() {
        return data_err(format!("{}: {} trailing bytes", path.display(), bytes.len() - offset));
    }
    Ok((header, arrays))
}

pub fn save_classifier(path: &Path, state: &TrainState) -> Result<()> {
    let net = state.net()?;
    let flex: Vec<f32> = state.flex_status.iter().map(|&v| v as f32).collect();
    let header = Header::Classifier {
        spec: state.spec,
        input: state.input,
        step: state.step,
        total_steps: state.total_steps,
        seed: state.seed,
        stream: state.stream_name.clone(),
        arrays: vec![
            ArrayEntry { name: "theta".into(), len: state.theta.len() },
            ArrayEntry { name: "theta_ema".into(), len: state.theta_ema.len() },
            ArrayEntry { name: "velocity".into(), len: state.velocity.len() },
            ArrayEntry { name: "flex_status".into(), len: flex.len() },
        ],
        layout: net.param_layout(),
    };
    write_container(
        path,
        &header,
        &[&state.theta, &state.theta_ema, &state.velocity, &flex],
    )
}

pub fn load_classifier(path: &Path) -> Result<TrainState> {
    let (header, mut arrays) = read_container(path)?;
    let Header::Classifier { spec, input, step, total_steps, seed, stream, .. } = header else {
        return data_err(format!("{}: not a classifier checkpoint", path.display()));
    };
    if arrays.len() != 4 {
        return data_err(format!("{}: expected 4 arrays", path.display()));
    }
    let flex = arrays.pop().unwrap();
    let velocity = arrays.pop().unwrap();
    let theta_ema = arrays.pop().unwrap();
    let theta = arrays.pop().unwrap();
    let expect = spec.build(input)?.param_count();
    for (name, arr) in [("theta", &theta), ("theta_ema", &theta_ema), ("velocity", &velocity)] {
        if arr.len() != expect {
            return data_err(format!(
                "{}: array '{name}' holds {} values, spec wants {expect}",
                path.display(),
                arr.len()
            ));
        }
    }
    Ok(TrainState {
        spec,
        input,
        step,
        total_steps,
        theta,
        theta_ema,
        velocity,
        seed,
        stream_name: stream,
        flex_status: flex.iter().map(|&v| v as i64).collect(),
    })
}

/// Load a classifier checkpoint and require its label space to match.
pub fn load_classifier_expecting(path: &Path, class_count: usize) -> Result<TrainState> {
    let state = load_classifier(path)?;
    if state.spec.class_count != class_count {
        return data_err(format!(
            "{}: checkpoint trained for {} classes, run uses {class_count}",
            path.display(),
            state.spec.class_count
        ));
    }
    Ok(state)
}

pub fn save_attack(path: &Path, spec: AttackMlpSpec, theta: &[f32]) -> Result<()> {
    let header = Header::Attack {
        spec,
        arrays: vec![ArrayEntry { name: "theta".into(), len: theta.len() }],
    };
    write_container(path, &header, &[theta])
}

pub fn load_attack(path: &Path) -> Result<(AttackMlpSpec, Vec<f32>)> {
    let (header, mut arrays) = read_container(path)?;
    let Header::Attack { spec, .. } = header else {
        return data_err(format!("{}: not an attack checkpoint", path.display()));
    };
    let theta = arrays.pop().ok_or_else(|| Error::Data("missing theta array".into()))?;
    if theta.len() != spec.build()?.param_count() {
        return data_err(format!("{}: attack parameter count mismatch", path.display()));
    }
    Ok((spec, theta))
}
