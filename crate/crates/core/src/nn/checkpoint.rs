use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::network::{Architecture, NetworkParams};
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_FILE: &str = "model.json";
const DATA_FILE: &str = "model.bin";
const PROJECTION: &str = "trunk.projection";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    /// Byte offset into `model.bin`.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    latent_dim: usize,
    trunk_input_dim: usize,
    tensors: Vec<TensorEntry>,
    crc32c: u32,
    #[serde(default)]
    config: serde_json::Value,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Trained network plus the configuration that produced it and any
/// stage-specific metadata (training design, reference radius, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
}

fn io(path: &Path, source: std::io::Error) -> NnError {
    NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let p = &ckpt.params;
    let mut named: Vec<(String, &Array2<f64>)> =
        p.tensor_names().into_iter().zip(p.tensors()).collect();
    if let Some(proj) = &p.trunk_projection {
        named.push((PROJECTION.to_string(), proj));
    }
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        tensors.push(TensorEntry {
            name,
            shape: t.dim(),
            offset: bytes.len() as u64,
        });
        for &x in t.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        architecture: p.arch.clone(),
        latent_dim: p.latent_dim(),
        trunk_input_dim: p.trunk_input_dim(),
        tensors,
        crc32c: crc32c::crc32c(&bytes),
        config: ckpt.config.clone(),
        extra: ckpt.extra.clone(),
    };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &bytes).map_err(|e| io(&data_path, e))?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&header)?;
    fs::write(&meta_path, json).map_err(|e| io(&meta_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, NnError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read(&meta_path).map_err(|e| io(&meta_path, e))?;
    let probe: VersionProbe = serde_json::from_slice(&text)?;
    if probe.format_version != CHECKPOINT_VERSION {
        return Err(NnError::Version {
            found: probe.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = serde_json::from_slice(&text)?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| io(&data_path, e))?;

    let mut params = NetworkParams::init(&header.architecture, 0)?;
    if header.latent_dim != params.latent_dim()
        || header.trunk_input_dim != params.trunk_input_dim()
    {
        return Err(NnError::Architecture(
            "header dimensions disagree with architecture".into(),
        ));
    }
    let needed = header
        .tensors
        .iter()
        .map(|t| t.offset + 8 * (t.shape.0 * t.shape.1) as u64)
        .max()
        .unwrap_or(0);
    if (bytes.len() as u64) < needed {
        return Err(NnError::Truncated {
            needed,
            len: bytes.len() as u64,
        });
    }
    if crc32c::crc32c(&bytes) != header.crc32c {
        return Err(NnError::Checksum);
    }

    let read = |e: &TensorEntry| -> Array2<f64> {
        let start = e.offset as usize;
        let vals = bytes[start..start + 8 * e.shape.0 * e.shape.1]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Array2::from_shape_vec(e.shape, vals).expect("shape checked")
    };

    let names = params.tensor_names();
    let (proj, body): (Vec<_>, Vec<_>) = header.tensors.iter().partition(|e| e.name == PROJECTION);
    if body.len() != names.len() {
        return Err(NnError::Architecture(format!(
            "checkpoint has {} tensors, architecture needs {}",
            body.len(),
            names.len()
        )));
    }
    for ((slot, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&body) {
        if &entry.name != name || entry.shape != slot.dim() {
            return Err(NnError::Architecture(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                slot.dim()
            )));
        }
        *slot = read(entry);
    }
    if let Some(e) = proj.first() {
        let d = params.latent_dim();
        if e.shape != (d, d) {
            return Err(NnError::Shape {
                op: "load_projection",
                lhs: e.shape,
                rhs: (d, d),
            });
        }
        params.trunk_projection = Some(read(e));
    }
    Ok(Checkpoint {
        params,
        config: header.config,
        extra: header.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            branch: vec![10, 8, 4],
            trunk: vec![1, 8, 4],
            branch_activation: Activation::Rowdy,
            trunk_activation: Activation::Relu,
            rowdy_terms: 5,
        };
        let mut params = NetworkParams::init(&arch, 11).unwrap();
        params.trunk_projection = Some(Array2::from_shape_fn((4, 4), |(i, j)| {
            (i as f64 + 0.1) / (j as f64 + 3.0)
        }));
        Checkpoint {
            params,
            config: serde_json::json!({"lr": 5e-4, "epochs": 3}),
            extra: serde_json::json!({"r0_ref": 5e-5}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(dir.path(), &c).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, c);
        let (x, dx) = crate::nn::network::time_column(&[0.1, 0.7]);
        let p = Array2::from_elem((2, 10), 0.4);
        assert_eq!(
            c.params.predict(&p, &x, Some(&dx)).unwrap(),
            back.params.predict(&p, &x, Some(&dx)).unwrap()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let bin = dir.path().join(DATA_FILE);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(NnError::Checksum)
        ));
    }

    #[test]
    fn truncation_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let bin = dir.path().join(DATA_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(NnError::Truncated { .. })
        ));

        save_checkpoint(dir.path(), &sample()).unwrap();
        let meta = dir.path().join(META_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&meta).unwrap()).unwrap();
        v["format_version"] = 99.into();
        fs::write(&meta, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(NnError::Version {
                found: 99,
                expected: 1
            })
        ));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope")),
            Err(NnError::Io { .. })
        ));
    }
}
