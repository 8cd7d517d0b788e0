//! Binary checkpoint container.
//!
//! Layout: magic `CLXK`, format version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header (config plus ordered tensor name/shape index), then raw
//! little-endian IEEE-754 32-bit tensor payloads in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TagScheme;
use crate::encoder::{tensor_specs, EncoderConfig, EncoderModel};
use crate::scalar::Scalar;
use crate::tagger::{CrfHead, Tagger};

pub const MAGIC: [u8; 4] = *b"CLXK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint holds a {0} model, expected {1}")]
    KindMismatch(String, String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Encoder,
    Tagger,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointKind::Encoder => write!(f, "encoder"),
            CheckpointKind::Tagger => write!(f, "tagger"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    /// Present for tagger checkpoints.
    pub scheme: Option<TagScheme>,
    pub tensors: Vec<TensorInfo>,
}

fn expected_tensors(kind: CheckpointKind, cfg: &EncoderConfig, scheme: Option<&TagScheme>) -> Vec<TensorInfo> {
    let mut tensors: Vec<TensorInfo> = tensor_specs(cfg)
        .into_iter()
        .map(|(name, shape)| TensorInfo { name, shape })
        .collect();
    if kind == CheckpointKind::Tagger {
        let y = scheme.map(|s| s.alphabet_size()).unwrap_or(0);
        let d = cfg.model_dim;
        for (name, shape) in [
            ("crf.w", vec![d, y]),
            ("crf.b", vec![y]),
            ("crf.trans", vec![y, y]),
            ("crf.start", vec![y]),
            ("crf.end", vec![y]),
        ] {
            tensors.push(TensorInfo {
                name: name.to_string(),
                shape,
            });
        }
    }
    tensors
}

fn write_container<W: Write>(
    mut out: W,
    header: &Header,
    payloads: &[Vec<f32>],
) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (info, data) in header.tensors.iter().zip(payloads) {
        debug_assert_eq!(info.shape.iter().product::<usize>(), data.len());
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_container<R: Read>(mut input: R) -> Result<(Header, Vec<Vec<f32>>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    input.read_exact(&mut buf4).map_err(|_| CheckpointError::Truncated)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8).map_err(|_| CheckpointError::Truncated)?;
    let json_len = u64::from_le_bytes(buf8) as usize;
    let mut json = vec![0u8; json_len];
    input.read_exact(&mut json).map_err(|_| CheckpointError::Truncated)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    // Cross-check the tensor index against the declared config.
    for (want, got) in expected_tensors(header.kind, &header.encoder, header.scheme.as_ref())
        .iter()
        .zip(&header.tensors)
    {
        if want.name != got.name || want.shape != got.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: got.name.clone(),
                expected: want.shape.clone(),
                got: got.shape.clone(),
            });
        }
    }
    let mut payloads = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let len: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        input.read_exact(&mut bytes).map_err(|_| CheckpointError::Truncated)?;
        payloads.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    Ok((header, payloads))
}

fn to_f32<S: Scalar>(tensor: &[S]) -> Vec<f32> {
    tensor.iter().map(|v| v.to_f64_() as f32).collect()
}

fn from_f32<S: Scalar>(tensor: &[f32]) -> Vec<S> {
    tensor.iter().map(|&v| S::from_f64(v as f64)).collect()
}

pub fn save_encoder<S: Scalar, W: Write>(model: &EncoderModel<S>, out: W) -> Result<()> {
    let header = Header {
        kind: CheckpointKind::Encoder,
        encoder: model.config.clone(),
        scheme: None,
        tensors: expected_tensors(CheckpointKind::Encoder, &model.config, None),
    };
    let payloads: Vec<Vec<f32>> = model.params.iter().map(|t| to_f32(t)).collect();
    write_container(out, &header, &payloads)
}

pub fn save_tagger<S: Scalar, W: Write>(tagger: &Tagger<S>, out: W) -> Result<()> {
    let header = Header {
        kind: CheckpointKind::Tagger,
        encoder: tagger.encoder.config.clone(),
        scheme: Some(tagger.scheme.clone()),
        tensors: expected_tensors(
            CheckpointKind::Tagger,
            &tagger.encoder.config,
            Some(&tagger.scheme),
        ),
    };
    let mut payloads: Vec<Vec<f32>> = tagger.encoder.params.iter().map(|t| to_f32(t)).collect();
    for t in tagger.head.tensors() {
        payloads.push(to_f32(t));
    }
    write_container(out, &header, &payloads)
}

pub fn load_encoder<S: Scalar, R: Read>(input: R) -> Result<EncoderModel<S>> {
    let (header, payloads) = read_container(input)?;
    if header.kind != CheckpointKind::Encoder {
        return Err(CheckpointError::KindMismatch(
            header.kind.to_string(),
            "encoder".into(),
        ));
    }
    Ok(EncoderModel {
        config: header.encoder,
        params: payloads.iter().map(|t| from_f32(t)).collect(),
    })
}

pub fn load_tagger<S: Scalar, R: Read>(input: R) -> Result<Tagger<S>> {
    let (header, payloads) = read_container(input)?;
    if header.kind != CheckpointKind::Tagger {
        return Err(CheckpointError::KindMismatch(
            header.kind.to_string(),
            "tagger".into(),
        ));
    }
    let scheme = header
        .scheme
        .ok_or_else(|| CheckpointError::Header("tagger checkpoint without scheme".into()))?;
    let cfg = header.encoder;
    let n_enc = tensor_specs(&cfg).len();
    let encoder = EncoderModel {
        params: payloads[..n_enc].iter().map(|t| from_f32(t)).collect(),
        config: cfg.clone(),
    };
    let head_payloads = &payloads[n_enc..];
    if head_payloads.len() != 5 {
        return Err(CheckpointError::Truncated);
    }
    let head = CrfHead {
        input_dim: cfg.model_dim,
        num_tags: scheme.alphabet_size(),
        w: from_f32(&head_payloads[0]),
        b: from_f32(&head_payloads[1]),
        trans: from_f32(&head_payloads[2]),
        start: from_f32(&head_payloads[3]),
        end: from_f32(&head_payloads[4]),
    };
    Ok(Tagger {
        encoder,
        head,
        scheme,
    })
}

/// Loads an encoder and checks its tensor index against the caller's
/// expected config; a disagreement names the first offending tensor.
pub fn load_encoder_expecting<S: Scalar, R: Read>(
    input: R,
    expected: &EncoderConfig,
) -> Result<EncoderModel<S>> {
    let model = load_encoder::<S, R>(input)?;
    let want = expected_tensors(CheckpointKind::Encoder, expected, None);
    let got = expected_tensors(CheckpointKind::Encoder, &model.config, None);
    for w in &want {
        match got.iter().find(|g| g.name == w.name) {
            Some(g) if g.shape == w.shape => {}
            Some(g) => {
                return Err(CheckpointError::ShapeMismatch {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    got: g.shape.clone(),
                })
            }
            None => {
                return Err(CheckpointError::ShapeMismatch {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    got: vec![],
                })
            }
        }
    }
    Ok(model)
}

pub fn save_tagger_to_path<S: Scalar>(tagger: &Tagger<S>, path: &Path) -> Result<()> {
    save_tagger(tagger, BufWriter::new(File::create(path)?))
}

pub fn load_tagger_from_path<S: Scalar>(path: &Path) -> Result<Tagger<S>> {
    load_tagger(BufReader::new(File::open(path)?))
}

pub fn save_encoder_to_path<S: Scalar>(model: &EncoderModel<S>, path: &Path) -> Result<()> {
    save_encoder(model, BufWriter::new(File::create(path)?))
}

pub fn load_encoder_from_path<S: Scalar>(path: &Path) -> Result<EncoderModel<S>> {
    load_encoder(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SchemeKind;
    use crate::encoder::init_encoder;

    fn cfg(seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            model_dim: 8,
            num_heads: 2,
            num_layers: 1,
            feedforward_dim: 12,
            max_positions: 32,
            dropout_rate: 0.0,
            seed,
        }
    }

    #[test]
    fn encoder_roundtrip_bit_exact() {
        let model = init_encoder::<f32>(&cfg(5)).unwrap();
        let mut buf = Vec::new();
        save_encoder(&model, &mut buf).unwrap();
        let back = load_encoder::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(model, back);
        // Saving again yields identical bytes.
        let mut buf2 = Vec::new();
        save_encoder(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn tagger_roundtrip_bit_exact() {
        let scheme = TagScheme::new(SchemeKind::Biose, vec!["X".into(), "Y".into()]);
        let tagger = Tagger::<f32>::init(&cfg(9), scheme, 11).unwrap();
        let mut buf = Vec::new();
        save_tagger(&tagger, &mut buf).unwrap();
        let back = load_tagger::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(tagger, back);
    }

    #[test]
    fn altered_magic_is_rejected() {
        let model = init_encoder::<f32>(&cfg(5)).unwrap();
        let mut buf = Vec::new();
        save_encoder(&model, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            load_encoder::<f32, _>(buf.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let model = init_encoder::<f32>(&cfg(5)).unwrap();
        let mut buf = Vec::new();
        save_encoder(&model, &mut buf).unwrap();
        buf[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            load_encoder::<f32, _>(buf.as_slice()),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = init_encoder::<f32>(&cfg(5)).unwrap();
        let mut buf = Vec::new();
        save_encoder(&model, &mut buf).unwrap();
        buf.truncate(buf.len() - 10);
        assert!(matches!(
            load_encoder::<f32, _>(buf.as_slice()),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn config_mismatch_names_tensor() {
        let model = init_encoder::<f32>(&cfg(5)).unwrap();
        let mut buf = Vec::new();
        save_encoder(&model, &mut buf).unwrap();
        let other = EncoderConfig {
            model_dim: 16,
            feedforward_dim: 12,
            num_heads: 2,
            ..cfg(5)
        };
        match load_encoder_expecting::<f32, _>(buf.as_slice(), &other) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => {
                assert_eq!(name, "tok_emb");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let model = init_encoder::<f32>(&cfg(5)).unwrap();
        let mut buf = Vec::new();
        save_encoder(&model, &mut buf).unwrap();
        assert!(matches!(
            load_tagger::<f32, _>(buf.as_slice()),
            Err(CheckpointError::KindMismatch(..))
        ));
    }
}
