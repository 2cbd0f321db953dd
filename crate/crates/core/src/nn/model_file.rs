//! Self-describing JSON model documents. Parameters are stored as base64 of
//! little-endian `f64` bytes so a save/load cycle is bit-exact; a SHA-256
//! digest over all parameter bytes detects corruption.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use super::network::{LayerParams, LayerSpec, Network};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerDoc>,
    training_provenance: BTreeMap<String, String>,
    param_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    kind: String,
    dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    weights: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    bias: String,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(text: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Corrupted(format!("{what}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupted(format!("{what}: {} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn param_digest(params: &[LayerParams]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for v in p.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn layer_dims(spec: &LayerSpec) -> Vec<usize> {
    match *spec {
        LayerSpec::Dense { in_dim, out_dim } => vec![in_dim, out_dim],
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
        } => vec![in_ch, out_ch, kernel, stride],
        LayerSpec::Flatten | LayerSpec::Relu => vec![],
    }
}

fn layer_from_doc(doc: &LayerDoc) -> Result<LayerSpec> {
    let bad = || Error::Corrupted(format!("layer `{}` with dims {:?}", doc.kind, doc.dims));
    Ok(match (doc.kind.as_str(), doc.dims.as_slice()) {
        ("dense", &[in_dim, out_dim]) => LayerSpec::Dense { in_dim, out_dim },
        ("conv2d", &[in_ch, out_ch, kernel, stride]) => LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
        },
        ("flatten", &[]) => LayerSpec::Flatten,
        ("relu", &[]) => LayerSpec::Relu,
        _ => return Err(bad()),
    })
}

pub fn to_json(net: &Network) -> Result<String> {
    let doc = ModelDoc {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        num_classes: net.num_classes(),
        layers: net
            .layers()
            .iter()
            .zip(net.params())
            .map(|(spec, p)| LayerDoc {
                kind: spec.name().to_string(),
                dims: layer_dims(spec),
                weights: if p.weight.is_empty() { String::new() } else { encode(&p.weight) },
                bias: if p.bias.is_empty() { String::new() } else { encode(&p.bias) },
            })
            .collect(),
        training_provenance: net.provenance.clone(),
        param_digest: param_digest(net.params()),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<Network> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Corrupted("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let doc: ModelDoc = serde_json::from_value(raw)?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    let mut params = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.iter().enumerate() {
        layers.push(layer_from_doc(l)?);
        params.push(LayerParams {
            weight: decode(&l.weights, &format!("layer {i} weights"))?,
            bias: decode(&l.bias, &format!("layer {i} bias"))?,
        });
    }
    if param_digest(&params) != doc.param_digest {
        return Err(Error::Corrupted("parameter digest mismatch".into()));
    }
    let mut net = Network::new(doc.input_shape, doc.num_classes, layers, params)?;
    net.provenance = doc.training_provenance;
    Ok(net)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::mlp_layers;
    use rand::SeedableRng;

    fn sample_net() -> Network {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 18, out_dim: 3 },
        ];
        let mut net = Network::init(vec![1, 5, 5], 3, layers, &mut rng).unwrap();
        net.provenance.insert("regime".into(), "natural".into());
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let back = from_json(&to_json(&net).unwrap()).unwrap();
        assert_eq!(back, net);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mlp = Network::init(vec![4], 2, mlp_layers(4, &[3], 2), &mut rng).unwrap();
        assert_eq!(from_json(&to_json(&mlp).unwrap()).unwrap(), mlp);
    }

    #[test]
    fn corrupted_weights_fail_digest() {
        let net = sample_net();
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&net).unwrap()).unwrap();
        let w = doc["layers"][3]["weights"].as_str().unwrap().to_string();
        let mut bytes = B64.decode(w).unwrap();
        bytes[5] ^= 0x40;
        doc["layers"][3]["weights"] = serde_json::Value::String(B64.encode(bytes));
        let err = from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(err, Error::Corrupted(_)), "{err}");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let net = sample_net();
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&net).unwrap()).unwrap();
        doc["format_version"] = 7.into();
        assert!(matches!(
            from_json(&doc.to_string()),
            Err(Error::UnsupportedVersion { found: 7, expected: 1 })
        ));
    }
}
