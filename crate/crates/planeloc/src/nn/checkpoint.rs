//! Network checkpoints: a JSON header followed by a raw little-endian
//! `f64` parameter payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, NnError, Tensor};

const FORMAT: &str = "planeloc-net-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    spec: NetworkSpec,
    seed: u64,
    steps: u64,
    param_len: usize,
}

pub fn save_network(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<(), NnError> {
    let header = Header {
        format: FORMAT.into(),
        spec: net.spec().clone(),
        seed: meta.seed,
        steps: meta.steps,
        param_len: net.param_count(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for tensor in net.params() {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_network(path: &Path) -> Result<(Network, CheckpointMeta), NnError> {
    let mut file = fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(NnError::Format(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| NnError::Format(e.to_string()))?;
    if header.format != FORMAT {
        return Err(NnError::Format(format!("unknown checkpoint format {:?}", header.format)));
    }

    let mut net = Network::new(header.spec, 0)?;
    if net.param_count() != header.param_len {
        return Err(NnError::Format(format!(
            "payload length {} does not match spec ({} parameters)",
            header.param_len,
            net.param_count()
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != header.param_len * 8 {
        return Err(NnError::Format(format!(
            "expected {} payload bytes, found {}",
            header.param_len * 8,
            payload.len()
        )));
    }
    let mut offset = 0;
    for tensor in net.params_mut() {
        let shape = tensor.shape().to_vec();
        let mut data = Vec::with_capacity(tensor.len());
        for _ in 0..tensor.len() {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&payload[offset..offset + 8]);
            data.push(f64::from_le_bytes(bytes));
            offset += 8;
        }
        *tensor = Tensor::from_vec(&shape, data)?;
    }
    Ok((net, CheckpointMeta { seed: header.seed, steps: header.steps }))
}

/// Loads a checkpoint and verifies it was written for `expected` exactly.
pub fn load_network_expecting(
    path: &Path,
    expected: &NetworkSpec,
) -> Result<(Network, CheckpointMeta), NnError> {
    let (net, meta) = load_network(path)?;
    if net.spec() != expected {
        return Err(NnError::SpecMismatch);
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ForwardCache, LayerSpec};

    fn sample_net() -> Network {
        let spec = NetworkSpec::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 3 },
            ],
        );
        Network::new(spec, 99).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net();
        save_network(&path, &net, &CheckpointMeta { seed: 99, steps: 1234 }).unwrap();
        let (loaded, meta) = load_network(&path).unwrap();
        assert_eq!(meta.seed, 99);
        assert_eq!(meta.steps, 1234);
        assert_eq!(net.params(), loaded.params());
        assert_eq!(net.spec(), loaded.spec());

        let input = Tensor::from_vec(&[1, 6, 6], (0..36).map(|v| v as f64 / 36.0).collect()).unwrap();
        let (mut ca, mut cb) = (ForwardCache::new(), ForwardCache::new());
        net.forward(&input, &mut ca).unwrap();
        loaded.forward(&input, &mut cb).unwrap();
        assert_eq!(ca.output().unwrap(), cb.output().unwrap());
    }

    #[test]
    fn loading_validates_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net();
        save_network(&path, &net, &CheckpointMeta { seed: 0, steps: 0 }).unwrap();
        assert!(load_network_expecting(&path, net.spec()).is_ok());
        let other = NetworkSpec::new(vec![4], vec![LayerSpec::Dense { width: 2 }]);
        assert!(matches!(
            load_network_expecting(&path, &other),
            Err(NnError::SpecMismatch)
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net();
        save_network(&path, &net, &CheckpointMeta { seed: 0, steps: 0 }).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_network(&path), Err(NnError::Format(_))));
    }
}
