//! Binary checkpoint format.
//!
//! Layout: magic `CLCK`, a little-endian `u32` format version, a `u64`
//! header length, the JSON header, then the model parameters as
//! little-endian `f64`, followed by the behavioural-cloning policy
//! parameters when present.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use conceptlab_core::data::DatasetSpec;
use conceptlab_core::intervention::LogitAnchors;
use conceptlab_core::model::{ConceptModel, MlpNet, ModelConfig};
use conceptlab_core::policy::BcPolicy;
use conceptlab_core::train::TrainConfig;
use conceptlab_tensor::{ParamSet, RngStream};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"CLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] conceptlab_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub config_hash: String,
    pub dataset: Option<DatasetSpec>,
    pub train: Option<TrainConfig>,
    pub final_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BcHeader {
    input: usize,
    widths: Vec<usize>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    meta: TrainingMeta,
    anchors: Option<LogitAnchors>,
    bc: Option<BcHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ConceptModel,
    pub meta: TrainingMeta,
    pub bc: Option<BcPolicy>,
}

fn manifest(params: &ParamSet) -> Vec<ManifestEntry> {
    params
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn numel(m: &[ManifestEntry]) -> usize {
    m.iter().map(|e| e.shape.iter().product::<usize>()).sum()
}

fn check_manifest(expected: &[ManifestEntry], found: &[ManifestEntry], what: &str) -> Result<(), CheckpointError> {
    if expected != found {
        return Err(CheckpointError::Manifest(format!(
            "{what} parameters do not match the architecture in the header"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: ConceptModel, meta: TrainingMeta) -> Self {
        Self { model, meta, bc: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            config: self.model.config().clone(),
            manifest: manifest(self.model.params()),
            meta: self.meta.clone(),
            anchors: self.model.anchors().cloned(),
            bc: self.bc.as_ref().map(|bc| BcHeader {
                input: bc.net.input_width(),
                widths: bc.net.widths().to_vec(),
                manifest: manifest(bc.net.params()),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.model.params().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(bc) = &self.bc {
            for v in bc.net.params().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(
            bytes
                .get(4..8)
                .ok_or(CheckpointError::Truncated("version"))?
                .try_into()
                .expect("4 bytes"),
        );
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let hlen = u64::from_le_bytes(
            bytes
                .get(8..16)
                .ok_or(CheckpointError::Truncated("header length"))?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let header_end = 16usize.checked_add(hlen).ok_or(CheckpointError::Truncated("header"))?;
        let header: Header = serde_json::from_slice(bytes.get(16..header_end).ok_or(CheckpointError::Truncated("header"))?)?;
        let floats: Vec<f64> = bytes[header_end..]
            .chunks(8)
            .map(|c| c.try_into().map(f64::from_le_bytes))
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::Truncated("parameter blob"))?;

        let n_model = numel(&header.manifest);
        let n_bc = header.bc.as_ref().map_or(0, |b| numel(&b.manifest));
        if floats.len() != n_model + n_bc {
            return Err(CheckpointError::Manifest(format!(
                "blob holds {} values, manifest declares {}",
                floats.len(),
                n_model + n_bc
            )));
        }
        let mut model = ConceptModel::new(header.config, &mut RngStream::new(0))?;
        check_manifest(&manifest(model.params()), &header.manifest, "model")?;
        model.params_mut().load_flat(&floats[..n_model]).map_err(conceptlab_core::Error::from)?;
        if let Some(a) = header.anchors {
            model.set_anchors(a)?;
        }
        let bc = match header.bc {
            Some(h) => {
                let (out, hidden) = h.widths.split_last().ok_or_else(|| CheckpointError::Manifest("empty policy widths".into()))?;
                let mut net = MlpNet::new(h.input, hidden, *out, &mut RngStream::new(0));
                check_manifest(&manifest(net.params()), &h.manifest, "policy")?;
                net.params_mut().load_flat(&floats[n_model..]).map_err(conceptlab_core::Error::from)?;
                Some(BcPolicy { net })
            }
            None => None,
        };
        Ok(Self {
            model,
            meta: header.meta,
            bc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use conceptlab_core::groups::Groups;
    use conceptlab_core::model::Variant;

    fn model(variant: Variant) -> ConceptModel {
        let cfg = ModelConfig {
            n_inputs: 3,
            n_concepts: 3,
            emb_width: 2,
            n_classes: 2,
            groups: Groups::contiguous(&[2, 1]).unwrap(),
            hidden_f: vec![4],
            hidden_psi: vec![4],
            backbone_hidden: vec![5],
            variant,
        };
        ConceptModel::new(cfg, &mut RngStream::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model(Variant::JointLogitCbm);
        m.fit_logit_anchors(&[0.1, -0.4, 2.0, 1.0, 0.0, -1.0], 2).unwrap();
        let mut ck = Checkpoint::new(m, TrainingMeta::default());
        ck.meta.final_metrics.insert("acc".into(), 0.1 + 0.2);
        ck.bc = Some(BcPolicy {
            net: MlpNet::new(5, &[3], 2, &mut RngStream::new(1)),
        });
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let bits = |p: &ParamSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.model.params()), bits(ck.model.params()));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint::new(model(Variant::IntCem), TrainingMeta::default()).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(CheckpointError::Manifest(_))
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version { found: 9 })));
        let mut v = bytes;
        v[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::BadMagic)));
        assert!(Checkpoint::from_bytes(b"CLC").is_err());
    }
}
