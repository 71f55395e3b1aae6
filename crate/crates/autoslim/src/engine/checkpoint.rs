//! Checkpoint file format.
//!
//! Layout: magic "ASLM", format version (u32 LE), 32-byte SHA-256 of the
//! canonical spec JSON, tensor count (u32 LE), then per tensor: name length
//! (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each), raw
//! little-endian f32 data. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::net::{EngineError, SlimmableWeights};
use super::tensor::Tensor;
use crate::netspec::Network;

const MAGIC: &[u8; 4] = b"ASLM";
const VERSION: u32 = 1;

pub fn spec_hash(net: &Network) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(net.canonical_json().as_bytes());
    h.finalize().into()
}

fn named_tensors<'a>(w: &'a SlimmableWeights<f32>) -> Vec<(String, &'a Tensor<f32>)> {
    let mut out = Vec::new();
    for (id, p) in &w.params {
        out.push((format!("{id}.weight"), &p.weight));
        out.push((format!("{id}.bias"), &p.bias));
    }
    for (id, b) in &w.bn {
        out.push((format!("{id}.gamma"), &b.gamma));
        out.push((format!("{id}.beta"), &b.beta));
        out.push((format!("{id}.running_mean"), &b.running_mean));
        out.push((format!("{id}.running_var"), &b.running_var));
    }
    out
}

pub fn save(path: &Path, net: &Network, w: &SlimmableWeights<f32>) -> Result<(), EngineError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&spec_hash(net))?;
    let tensors = named_tensors(w);
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, EngineError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Load a checkpoint into a store initialized for `net`; the stored spec
/// hash must match `net` exactly.
pub fn load(path: &Path, net: &Network) -> Result<SlimmableWeights<f32>, EngineError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EngineError::BadCheckpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(EngineError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut hash = [0u8; 32];
    f.read_exact(&mut hash)?;
    if hash != spec_hash(net) {
        return Err(EngineError::BadCheckpoint(
            "spec hash mismatch: checkpoint was trained on a different spec".into(),
        ));
    }

    // Start from a zero-seed skeleton to get the right tensor shapes, then
    // overwrite every entry from the file.
    let mut w = SlimmableWeights::<f32>::init(net, 0);
    let count = read_u32(&mut f)? as usize;
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name_buf = vec![0u8; name_len];
        f.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| EngineError::BadCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut f)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut f)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let t = Tensor::from_vec(&dims, data);
        let (id, field) = name
            .rsplit_once('.')
            .ok_or_else(|| EngineError::BadCheckpoint(format!("bad tensor name {name}")))?;
        let installed = match field {
            "weight" | "bias" => w.params.get_mut(id).map(|p| {
                if field == "weight" {
                    p.weight = t.clone();
                } else {
                    p.bias = t.clone();
                }
            }),
            "gamma" | "beta" | "running_mean" | "running_var" => w.bn.get_mut(id).map(|b| {
                match field {
                    "gamma" => b.gamma = t.clone(),
                    "beta" => b.beta = t.clone(),
                    "running_mean" => b.running_mean = t.clone(),
                    _ => b.running_var = t.clone(),
                };
            }),
            _ => None,
        };
        if installed.is_none() {
            return Err(EngineError::BadCheckpoint(format!(
                "tensor {name} does not belong to this spec"
            )));
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_spec;

    #[test]
    fn roundtrip_is_bit_exact() {
        let doc = r#"{
            "input_shape": [1, 6, 6],
            "num_classes": 3,
            "bounds": {"lower": 0.25, "upper": 1.5, "groups": 3},
            "layers": [
                {"id": "c1", "kind": "conv", "kernel": 3, "stride": 2, "base_channels": 8, "channel_set": "s0"},
                {"id": "n1", "kind": "bn", "base_channels": 8, "channel_set": "s0"},
                {"id": "fc", "kind": "fc", "base_channels": 3, "slimmable": false, "channel_set": "out"}
            ],
            "edges": [["c1", "n1"], ["n1", "fc"]]
        }"#;
        let net = parse_spec(doc).unwrap();
        let w = SlimmableWeights::<f32>::init(&net, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aslm");
        save(&path, &net, &w).unwrap();
        let w2 = load(&path, &net).unwrap();
        for (id, p) in &w.params {
            assert_eq!(p.weight.data(), w2.params[id].weight.data());
            assert_eq!(p.bias.data(), w2.params[id].bias.data());
        }
        for (id, b) in &w.bn {
            assert_eq!(b.gamma.data(), w2.bn[id].gamma.data());
            assert_eq!(b.running_var.data(), w2.bn[id].running_var.data());
        }
        // Same bytes when saved again.
        let path2 = dir.path().join("w2.aslm");
        save(&path2, &net, &w2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_spec_is_rejected() {
        let doc = r#"{
            "input_shape": [1, 6, 6],
            "num_classes": 3,
            "bounds": {"lower": 0.25, "upper": 1.5, "groups": 3},
            "layers": [
                {"id": "c1", "kind": "conv", "kernel": 3, "base_channels": 8, "channel_set": "s0"},
                {"id": "fc", "kind": "fc", "base_channels": 3, "slimmable": false, "channel_set": "out"}
            ],
            "edges": [["c1", "fc"]]
        }"#;
        let net = parse_spec(doc).unwrap();
        let other = parse_spec(&doc.replace("\"kernel\": 3", "\"kernel\": 1")).unwrap();
        let w = SlimmableWeights::<f32>::init(&net, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aslm");
        save(&path, &net, &w).unwrap();
        assert!(matches!(
            load(&path, &other),
            Err(EngineError::BadCheckpoint(_))
        ));
    }
}
