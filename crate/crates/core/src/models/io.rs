//! Model persistence.
//!
//! Binary format (single models): magic `LBM1`, record count (u32 LE), then
//! per record: name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE
//! each), values as f64 LE bits. The first record is always `__spec__`, a
//! small integer vector describing the architecture so the loader can
//! rebuild the parameter layout. Round-trips are bit-exact.
//!
//! The proposed ensemble is a JSON wrapper referencing its two sub-model
//! files; [`load_model`] dispatches on the leading bytes.

use super::{build_proposed, param_layout, BasicCnnSpec, Model, ModelError, ModelSpec, Param, ResNetSpec, VitSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"LBM1";
const SPEC_RECORD: &str = "__spec__";
const WRAPPER_FORMAT: &str = "lungbench-ensemble";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: version mismatch: magic {found:?}, expected {expected:?}")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: truncated model file")]
    Truncated { path: PathBuf },
    #[error("{path}: trailing bytes after the last record")]
    TrailingData { path: PathBuf },
    #[error("{path}: first record must be {SPEC_RECORD}, found {found:?}")]
    MissingSpec { path: PathBuf, found: String },
    #[error("{path}: malformed architecture record")]
    BadSpecRecord { path: PathBuf },
    #[error("{path}: unknown parameter name {name:?} (expected {expected:?})")]
    UnknownParamName {
        path: PathBuf,
        name: String,
        expected: String,
    },
    #[error("{path}: parameter {name} has dims {found:?}, expected {expected:?}")]
    ParamShapeMismatch {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: file holds {found} records, layout expects {expected}")]
    RecordCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: parameter name is not valid UTF-8")]
    BadName { path: PathBuf },
    #[error("{path}: ensemble wrapper is not valid JSON: {source}")]
    WrapperParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: ensemble wrapper format {format:?} v{version} unsupported")]
    WrapperVersion {
        path: PathBuf,
        format: String,
        version: u32,
    },
    #[error("the proposed ensemble saves as a wrapper (save_ensemble_wrapper), not a single model file")]
    EnsembleNotSavable,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn spec_to_f64s(spec: &ModelSpec) -> Vec<f64> {
    let ints: Vec<usize> = match spec {
        ModelSpec::BasicCnn(s) => vec![
            0,
            s.input_side,
            s.num_classes,
            s.widths[0],
            s.widths[1],
            s.widths[2],
            s.widths[3],
        ],
        ModelSpec::ResNetStyle(s) => vec![1, s.input_side, s.num_classes, s.stem_width, s.num_blocks],
        ModelSpec::ViT(s) => vec![
            2,
            s.input_side,
            s.num_classes,
            s.patch_size,
            s.embed_dim,
            s.num_heads,
            s.mlp_dim,
            s.num_layers,
        ],
        ModelSpec::ProposedEnsemble { .. } => unreachable!("ensembles are not written as LBM1"),
    };
    ints.into_iter().map(|v| v as f64).collect()
}

fn spec_from_f64s(values: &[f64]) -> Option<ModelSpec> {
    if values.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return None;
    }
    let ints: Vec<usize> = values.iter().map(|&v| v as usize).collect();
    match (ints.first()?, ints.len()) {
        (0, 7) => Some(ModelSpec::BasicCnn(BasicCnnSpec {
            input_side: ints[1],
            num_classes: ints[2],
            widths: [ints[3], ints[4], ints[5], ints[6]],
        })),
        (1, 5) => Some(ModelSpec::ResNetStyle(ResNetSpec {
            input_side: ints[1],
            num_classes: ints[2],
            stem_width: ints[3],
            num_blocks: ints[4],
        })),
        (2, 8) => Some(ModelSpec::ViT(VitSpec {
            input_side: ints[1],
            num_classes: ints[2],
            patch_size: ints[3],
            embed_dim: ints[4],
            num_heads: ints[5],
            mlp_dim: ints[6],
            num_layers: ints[7],
        })),
        _ => None,
    }
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in values {
        out.extend(v.to_le_bytes());
    }
}

/// Serialize a single (non-ensemble) model.
pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelIoError> {
    if matches!(model.spec(), ModelSpec::ProposedEnsemble { .. }) {
        return Err(ModelIoError::EnsembleNotSavable);
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend((model.params().len() as u32 + 1).to_le_bytes());
    let spec_values = spec_to_f64s(model.spec());
    push_record(&mut out, SPEC_RECORD, &[spec_values.len()], &spec_values);
    for p in model.params() {
        push_record(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    std::fs::write(path, out).map_err(|source| ModelIoError::Io { path: path.to_path_buf(), source })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelIoError::Truncated { path: self.path.to_path_buf() });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), ModelIoError> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| ModelIoError::BadName { path: self.path.to_path_buf() })?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok((name, shape, values))
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleWrapper {
    format: String,
    version: u32,
    resnet: String,
    vit: String,
}

/// Write the JSON wrapper for a trained ensemble; `resnet` and `vit` are
/// paths to the sub-model files, stored as written (usually relative to the
/// wrapper).
pub fn save_ensemble_wrapper(path: &Path, resnet: &str, vit: &str) -> Result<(), ModelIoError> {
    let wrapper = EnsembleWrapper {
        format: WRAPPER_FORMAT.to_string(),
        version: 1,
        resnet: resnet.to_string(),
        vit: vit.to_string(),
    };
    let json = serde_json::to_string_pretty(&wrapper).expect("wrapper serializes");
    std::fs::write(path, json).map_err(|source| ModelIoError::Io { path: path.to_path_buf(), source })
}

/// Load a model file: either an `LBM1` single model or an ensemble wrapper
/// referencing two of them.
pub fn load_model(path: &Path) -> Result<Model, ModelIoError> {
    let bytes = std::fs::read(path).map_err(|source| ModelIoError::Io { path: path.to_path_buf(), source })?;
    if bytes.first() == Some(&b'{') {
        return load_wrapper(path, &bytes);
    }
    if bytes.len() < 4 {
        return Err(ModelIoError::Truncated { path: path.to_path_buf() });
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelIoError::VersionMismatch {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
        });
    }

    let mut cursor = Cursor { bytes: &bytes, pos: 4, path };
    let record_count = cursor.u32()? as usize;

    let (first_name, _, spec_values) = cursor.record()?;
    if first_name != SPEC_RECORD {
        return Err(ModelIoError::MissingSpec { path: path.to_path_buf(), found: first_name });
    }
    let spec = spec_from_f64s(&spec_values)
        .ok_or_else(|| ModelIoError::BadSpecRecord { path: path.to_path_buf() })?;
    spec.validate()?;

    let layout = param_layout(&spec);
    if record_count != layout.len() + 1 {
        return Err(ModelIoError::RecordCountMismatch {
            path: path.to_path_buf(),
            expected: layout.len() + 1,
            found: record_count,
        });
    }
    let mut params = Vec::with_capacity(layout.len());
    for def in &layout {
        let (name, shape, values) = cursor.record()?;
        if name != def.name {
            return Err(ModelIoError::UnknownParamName {
                path: path.to_path_buf(),
                name,
                expected: def.name.clone(),
            });
        }
        if shape != def.shape {
            return Err(ModelIoError::ParamShapeMismatch {
                path: path.to_path_buf(),
                name,
                expected: def.shape.clone(),
                found: shape,
            });
        }
        let value = Tensor::new(shape, values).map_err(|_| ModelIoError::BadSpecRecord {
            path: path.to_path_buf(),
        })?;
        params.push(Param { name, value });
    }
    if cursor.pos != bytes.len() {
        return Err(ModelIoError::TrailingData { path: path.to_path_buf() });
    }
    Ok(Model::from_parts(spec, params, Vec::new()))
}

fn load_wrapper(path: &Path, bytes: &[u8]) -> Result<Model, ModelIoError> {
    let wrapper: EnsembleWrapper = serde_json::from_slice(bytes)
        .map_err(|source| ModelIoError::WrapperParse { path: path.to_path_buf(), source })?;
    if wrapper.format != WRAPPER_FORMAT || wrapper.version != 1 {
        return Err(ModelIoError::WrapperVersion {
            path: path.to_path_buf(),
            format: wrapper.format,
            version: wrapper.version,
        });
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let resnet = load_model(&dir.join(&wrapper.resnet))?;
    let vit = load_model(&dir.join(&wrapper.vit))?;
    Ok(build_proposed(resnet, vit)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BasicCnnSpec, ResNetSpec, VitSpec};
    use tempfile::tempdir;

    fn specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::BasicCnn(BasicCnnSpec { input_side: 8, num_classes: 5, widths: [2, 2, 3, 3] }),
            ModelSpec::ResNetStyle(ResNetSpec { input_side: 8, num_classes: 5, stem_width: 3, num_blocks: 2 }),
            ModelSpec::ViT(VitSpec {
                input_side: 8,
                num_classes: 5,
                patch_size: 4,
                embed_dim: 6,
                num_heads: 2,
                mlp_dim: 12,
                num_layers: 2,
            }),
        ]
    }

    #[test]
    fn round_trip_is_bitwise_exact_for_every_kind() {
        let dir = tempdir().unwrap();
        for (i, spec) in specs().into_iter().enumerate() {
            let model = Model::build(spec, 41 + i as u64).unwrap();
            let path = dir.path().join(format!("m{i}.lbm"));
            save_model(&model, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.spec(), model.spec());
            assert_eq!(back.params().len(), model.params().len());
            for (a, b) in model.params().iter().zip(back.params()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value.shape(), b.value.shape());
                assert_eq!(a.value.data(), b.value.data());
            }
        }
    }

    #[test]
    fn empty_file_is_truncated_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.lbm");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::Truncated { .. })));
    }

    #[test]
    fn flipped_magic_is_version_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.lbm");
        let model = Model::build(specs()[0], 1).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].reverse();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::VersionMismatch { .. })));
    }

    // Hand-built records double as an independent check of the wire format.
    fn record_bytes(name: &str, shape: &[usize], values: &[f64]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in values {
            out.extend(v.to_le_bytes());
        }
        out
    }

    #[test]
    fn unknown_parameter_name_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bogus.lbm");
        let mut bytes = b"LBM1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        // BasicCnn(side 4, classes 2, widths [1,1,1,1]) has 10 params, but
        // claim 1 record named bogus.weight.
        bytes.extend(record_bytes("__spec__", &[7], &[0.0, 4.0, 2.0, 1.0, 1.0, 1.0, 1.0]));
        bytes.extend(record_bytes("bogus.weight", &[1], &[0.5]));
        std::fs::write(&path, bytes).unwrap();
        // Count mismatch is detected first; rebuild with the right count but
        // a wrong first name.
        assert!(matches!(load_model(&path), Err(ModelIoError::RecordCountMismatch { .. })));

        let mut bytes = b"LBM1".to_vec();
        bytes.extend(11u32.to_le_bytes());
        bytes.extend(record_bytes("__spec__", &[7], &[0.0, 4.0, 2.0, 1.0, 1.0, 1.0, 1.0]));
        bytes.extend(record_bytes("bogus.weight", &[1, 1, 3, 3], &[0.0; 9]));
        std::fs::write(&path, bytes).unwrap();
        match load_model(&path) {
            Err(ModelIoError::UnknownParamName { name, expected, .. }) => {
                assert_eq!(name, "bogus.weight");
                assert_eq!(expected, "conv1.weight");
            }
            other => panic!("expected UnknownParamName, got {other:?}"),
        }
    }

    #[test]
    fn truncated_values_are_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cut.lbm");
        let model = Model::build(specs()[0], 1).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("extra.lbm");
        let model = Model::build(specs()[0], 1).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::TrailingData { .. })));
    }

    #[test]
    fn ensemble_wrapper_round_trips() {
        let dir = tempdir().unwrap();
        let resnet = Model::build(specs()[1], 5).unwrap();
        let vit = Model::build(specs()[2], 6).unwrap();
        save_model(&resnet, &dir.path().join("resnet.lbm")).unwrap();
        save_model(&vit, &dir.path().join("vit.lbm")).unwrap();
        let wrapper = dir.path().join("proposed.json");
        save_ensemble_wrapper(&wrapper, "resnet.lbm", "vit.lbm").unwrap();

        let ensemble = load_model(&wrapper).unwrap();
        assert!(matches!(ensemble.spec(), ModelSpec::ProposedEnsemble { num_classes: 5 }));
        assert_eq!(ensemble.subs().len(), 2);

        let img = crate::tensor::Tensor::full(vec![1, 8, 8], 0.4).unwrap();
        let probs = ensemble.predict(&[&img]).unwrap();
        let sum: f64 = probs[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn saving_an_ensemble_directly_is_an_error() {
        let resnet = Model::build(specs()[1], 5).unwrap();
        let vit = Model::build(specs()[2], 6).unwrap();
        let ensemble = build_proposed(resnet, vit).unwrap();
        let dir = tempdir().unwrap();
        assert!(matches!(
            save_model(&ensemble, &dir.path().join("x.lbm")),
            Err(ModelIoError::EnsembleNotSavable)
        ));
    }
}
