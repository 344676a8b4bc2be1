//! ISUR weights file: a JSON envelope around base64 little-endian f32 blobs.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};

use super::mlp::{Layer, Mlp};
use super::net::{layer_blobs, InputNormalization, SurrogateNet};

const MAGIC: &str = "ISUR";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    magic: String,
    version: u32,
    /// `[outputs, inputs]` per layer.
    shapes: Vec<[usize; 2]>,
    hidden_activation: String,
    output_activation: String,
    normalization: Normalization,
    dt: f64,
    seed: u64,
    sha256: String,
    layers: Vec<Blobs>,
}

#[derive(Serialize, Deserialize)]
struct Normalization {
    input: InputNormalization,
    output_units: String,
}

#[derive(Serialize, Deserialize)]
struct Blobs {
    weight: String,
    bias: String,
}

pub fn to_json(net: &SurrogateNet) -> Result<String> {
    let mlp = net.mlp();
    let envelope = Envelope {
        magic: MAGIC.into(),
        version: VERSION,
        shapes: mlp.layers.iter().map(|l| [l.outputs(), l.inputs()]).collect(),
        hidden_activation: "relu".into(),
        output_activation: "identity".into(),
        normalization: Normalization {
            input: *net.normalization(),
            output_units: "m".into(),
        },
        dt: net.dt(),
        seed: net.seed(),
        sha256: net.sha256().to_string(),
        layers: layer_blobs(mlp)
            .into_iter()
            .map(|(w, b)| Blobs {
                weight: STANDARD.encode(w),
                bias: STANDARD.encode(b),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&envelope)?)
}

fn floats(blob: &str, expected: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(blob)
        .map_err(|e| LoadError::Malformed(format!("{what}: {e}")))?;
    if bytes.len() != 4 * expected {
        return Err(LoadError::ShapeMismatch(format!("{what}: {} bytes, expected {}", bytes.len(), 4 * expected)).into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn from_json(text: &str) -> Result<SurrogateNet> {
    let envelope: Envelope = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            LoadError::Truncated(e.to_string())
        } else {
            LoadError::Malformed(e.to_string())
        }
    })?;
    if envelope.magic != MAGIC {
        return Err(LoadError::BadMagic {
            expected: MAGIC.into(),
            found: envelope.magic,
        }
        .into());
    }
    if envelope.version != VERSION {
        return Err(LoadError::Version(envelope.version).into());
    }
    if envelope.shapes.len() != envelope.layers.len() || envelope.shapes.is_empty() {
        return Err(LoadError::ShapeMismatch(format!(
            "{} shapes for {} layers",
            envelope.shapes.len(),
            envelope.layers.len()
        ))
        .into());
    }
    if envelope.hidden_activation != "relu" || envelope.output_activation != "identity" {
        return Err(LoadError::Malformed("unsupported activations".into()).into());
    }
    let mut layers = Vec::with_capacity(envelope.layers.len());
    for (l, (&[rows, cols], blobs)) in envelope.shapes.iter().zip(&envelope.layers).enumerate() {
        let w = floats(&blobs.weight, rows * cols, &format!("layer {l} weight"))?;
        let b = floats(&blobs.bias, rows, &format!("layer {l} bias"))?;
        layers.push(Layer {
            weight: DMatrix::from_row_slice(rows, cols, &w),
            bias: DVector::from_vec(b),
        });
    }
    let net = SurrogateNet::new(
        Mlp { layers },
        envelope.normalization.input,
        envelope.dt,
        envelope.seed,
    )
    .map_err(|e| match e {
        Error::CorruptModel(m) => Error::Load(LoadError::ShapeMismatch(m)),
        other => other,
    })?;
    if net.sha256() != envelope.sha256 {
        return Err(LoadError::Checksum {
            expected: envelope.sha256,
            computed: net.sha256().to_string(),
        }
        .into());
    }
    Ok(net)
}

pub fn save_weights(net: &SurrogateNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(net)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<SurrogateNet> {
    from_json(&std::fs::read_to_string(path)?)
}
