//! On-disk checkpoints: a JSON manifest next to raw little-endian `f64`
//! arrays for `θ_g` and every client's gating parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Federation, Method};
use crate::gating::{GatingLayer, PARAM_NAMES};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub round: usize,
    pub config_hash: String,
    pub method: Method,
    pub n_params: usize,
    pub input_dim: usize,
    pub n_blocks: usize,
    pub theta_file: String,
    pub clients: Vec<ClientEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub id: usize,
    pub sparsity: f64,
    pub phi_file: String,
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Protocol(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes the federation's current state into `dir`.
pub fn save(dir: &Path, fed: &Federation, config_hash: &str) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let theta_file = "theta.f64".to_string();
    write_f64s(&dir.join(&theta_file), fed.theta().as_slice())?;
    let mut clients = Vec::with_capacity(fed.clients.len());
    for c in &fed.clients {
        let phi_file = format!("phi_{}.f64", c.id);
        write_f64s(&dir.join(&phi_file), &c.phi.to_flat())?;
        clients.push(ClientEntry {
            id: c.id,
            sparsity: c.sparsity,
            phi_file,
        });
    }
    let manifest = Manifest {
        round: fed.round(),
        config_hash: config_hash.to_string(),
        method: fed.method,
        n_params: fed.engine.spec.n_params(),
        input_dim: fed.engine.spec.input_dim(),
        n_blocks: fed.engine.partition.n_blocks(),
        theta_file,
        clients,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub theta: Vec<f64>,
    pub phis: Vec<(usize, GatingLayer)>,
}

/// Reads a checkpoint directory (or its manifest path).
pub fn load(path: &Path) -> Result<Checkpoint> {
    let dir = if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(Path::new("."))
    };
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let theta = read_f64s(&dir.join(&manifest.theta_file))?;
    if theta.len() != manifest.n_params {
        return Err(Error::Protocol(format!(
            "theta has {} values, manifest says {}",
            theta.len(),
            manifest.n_params
        )));
    }
    let phis = manifest
        .clients
        .iter()
        .map(|c| {
            let flat = read_f64s(&dir.join(&c.phi_file))?;
            Ok((
                c.id,
                GatingLayer::from_flat(manifest.input_dim, manifest.n_blocks, &flat)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint { manifest, theta, phis })
}

#[derive(Clone, Debug, Serialize)]
pub struct GateDump {
    pub round: usize,
    pub param_names: Vec<&'static str>,
    pub param_shapes: Vec<(usize, usize)>,
    pub clients: Vec<ClientGates>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClientGates {
    pub id: usize,
    pub sparsity: f64,
    /// Flat gating parameters in `param_names` order.
    pub phi: Vec<f64>,
}

/// Per-client gating parameters as plain arrays, for external analysis.
pub fn dump_gates(path: &Path) -> Result<GateDump> {
    let ckpt = load(path)?;
    let shapes = ckpt
        .phis
        .first()
        .map(|(_, phi)| phi.tensors().iter().map(|t| t.shape()).collect())
        .unwrap_or_default();
    let clients = ckpt
        .phis
        .iter()
        .zip(&ckpt.manifest.clients)
        .map(|((id, phi), entry)| ClientGates {
            id: *id,
            sparsity: entry.sparsity,
            phi: phi.to_flat(),
        })
        .collect();
    Ok(GateDump {
        round: ckpt.manifest.round,
        param_names: PARAM_NAMES.to_vec(),
        param_shapes: shapes,
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_arrays_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5];
        let path = dir.path().join("a.f64");
        write_f64s(&path, &values).unwrap();
        let back = read_f64s(&path).unwrap();
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        fs::write(&path, [0u8; 5]).unwrap();
        assert!(read_f64s(&path).is_err());
    }
}
