//! Binary model container: magic, version, a JSON manifest of named
//! (dtype, shape) entries, then raw little-endian `f64` buffers in manifest
//! order.
//!
//! The manifest also records the width profile, io shape, head kind, STFT
//! configuration and the normalization epsilon, so a checkpoint is enough
//! to rebuild the full separation pipeline. Optimizer state (or any other
//! named buffer) can ride along as extra entries.

use crate::dsp::{NormalizationStats, StftConfig};
use crate::error::{Error, Result};
use crate::model::{
    build_shared_model, build_single_model, export_state, import_state, HeadKind, SharedModel,
    SingleTaskModel, WidthProfile,
};
use crate::source::SourceId;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SSPCKPT1";
pub const VERSION: u32 = 1;

const NORM_ENTRY: &str = "norm.per_bin_std";
const MODEL_PREFIX: &str = "model.";

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    source: Option<SourceId>,
    profile: WidthProfile,
    io_shape: (usize, usize, usize),
    head: HeadKind,
    stft: StftConfig,
    norm_epsilon: f64,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

/// An arbitrary named buffer stored alongside the model (optimizer moments,
/// for example).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedBuffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A model loaded from a checkpoint together with the front-end it was
/// trained with.
pub enum LoadedModel {
    Shared(SharedModel),
    Single(SingleTaskModel),
}

pub struct Loaded {
    pub model: LoadedModel,
    pub stft: StftConfig,
    pub norm: NormalizationStats,
    pub extras: Vec<NamedBuffer>,
}

fn write_container(
    path: &Path,
    manifest: &Manifest,
    buffers: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(manifest)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, data) in buffers {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn save_impl(
    path: &Path,
    kind: &str,
    source: Option<SourceId>,
    profile: &WidthProfile,
    io_shape: (usize, usize, usize),
    head: HeadKind,
    state: Vec<(String, Vec<usize>, Vec<f64>)>,
    stft: &StftConfig,
    norm: &NormalizationStats,
    extras: &[NamedBuffer],
) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(state.len() + 1);
    buffers.push((
        NORM_ENTRY.to_string(),
        vec![norm.per_bin_std.len()],
        norm.per_bin_std.clone(),
    ));
    buffers.extend(state);
    for e in extras {
        buffers.push((e.name.clone(), e.shape.clone(), e.data.clone()));
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        source,
        profile: profile.clone(),
        io_shape,
        head,
        stft: stft.clone(),
        norm_epsilon: norm.epsilon,
        entries: buffers
            .iter()
            .map(|(name, shape, _)| EntryMeta {
                name: name.clone(),
                dtype: "f64".into(),
                shape: shape.clone(),
            })
            .collect(),
    };
    write_container(path, &manifest, &buffers)
}

pub fn save_shared(
    path: &Path,
    model: &SharedModel,
    stft: &StftConfig,
    norm: &NormalizationStats,
    extras: &[NamedBuffer],
) -> Result<()> {
    save_impl(
        path,
        "shared",
        None,
        &model.profile,
        model.io_shape,
        model.head_kind,
        export_state(&model.state_refs()),
        stft,
        norm,
        extras,
    )
}

pub fn save_single(
    path: &Path,
    model: &SingleTaskModel,
    stft: &StftConfig,
    norm: &NormalizationStats,
    extras: &[NamedBuffer],
) -> Result<()> {
    save_impl(
        path,
        "single",
        Some(model.source),
        &model.profile,
        model.io_shape,
        model.head_kind,
        export_state(&model.state_refs()),
        stft,
        norm,
        extras,
    )
}

fn read_exact_ck(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CorruptCheckpoint("truncated file".into())
        } else {
            Error::Io(e)
        }
    })
}

struct RawCheckpoint {
    manifest: Manifest,
    buffers: HashMap<String, (Vec<usize>, Vec<f64>)>,
    order: Vec<String>,
}

fn read_container(path: &Path) -> Result<RawCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_ck(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let mut v = [0u8; 4];
    read_exact_ck(&mut r, &mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let mut len8 = [0u8; 8];
    read_exact_ck(&mut r, &mut len8)?;
    let json_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; json_len];
    read_exact_ck(&mut r, &mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::CorruptCheckpoint(format!("unreadable manifest: {e}")))?;
    let mut buffers = HashMap::new();
    let mut order = Vec::new();
    for entry in &manifest.entries {
        if entry.dtype != "f64" {
            return Err(Error::CorruptCheckpoint(format!(
                "entry {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        read_exact_ck(&mut r, &mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        order.push(entry.name.clone());
        buffers.insert(entry.name.clone(), (entry.shape.clone(), data));
    }
    Ok(RawCheckpoint {
        manifest,
        buffers,
        order,
    })
}

fn extract_norm(raw: &mut RawCheckpoint) -> Result<NormalizationStats> {
    let (_, per_bin_std) = raw
        .buffers
        .remove(NORM_ENTRY)
        .ok_or_else(|| Error::CorruptCheckpoint("missing normalization entry".into()))?;
    Ok(NormalizationStats {
        per_bin_std,
        epsilon: raw.manifest.norm_epsilon,
    })
}

/// Load a checkpoint, rebuilding the model recorded in its manifest.
pub fn load(path: &Path) -> Result<Loaded> {
    let mut raw = read_container(path)?;
    let norm = extract_norm(&mut raw)?;
    let m = &raw.manifest;
    let model = match m.kind.as_str() {
        "shared" => {
            let mut model = build_shared_model(&m.profile, m.io_shape, m.head, 0)?;
            fill_model(&mut raw, ModelRefs::Shared(&mut model))?;
            LoadedModel::Shared(model)
        }
        "single" => {
            let source = m.source.ok_or_else(|| {
                Error::CorruptCheckpoint("single checkpoint missing source".into())
            })?;
            let mut model = build_single_model(&m.profile, m.io_shape, m.head, source, 0)?;
            fill_model(&mut raw, ModelRefs::Single(&mut model))?;
            LoadedModel::Single(model)
        }
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "unknown model kind '{other}'"
            )))
        }
    };
    let extras = raw
        .order
        .iter()
        .filter(|n| raw.buffers.contains_key(*n) && !n.starts_with(MODEL_PREFIX))
        .map(|n| {
            let (shape, data) = raw.buffers[n].clone();
            NamedBuffer {
                name: n.clone(),
                shape,
                data,
            }
        })
        .collect();
    let stft = raw.manifest.stft.clone();
    Ok(Loaded {
        model,
        stft,
        norm,
        extras,
    })
}

enum ModelRefs<'a> {
    Shared(&'a mut SharedModel),
    Single(&'a mut SingleTaskModel),
}

fn fill_model(raw: &mut RawCheckpoint, refs: ModelRefs<'_>) -> Result<()> {
    let state = match &refs {
        ModelRefs::Shared(m) => m.state_refs(),
        ModelRefs::Single(m) => m.state_refs(),
    };
    import_state(&state, &raw.buffers)
}

/// Load checkpoint weights into an already-built shared model skeleton.
///
/// Fails with a shape error naming the first offending tensor when the file
/// was produced under a different profile.
pub fn load_into_shared(path: &Path, model: &mut SharedModel) -> Result<(StftConfig, NormalizationStats)> {
    let mut raw = read_container(path)?;
    if raw.manifest.kind != "shared" {
        return Err(Error::CorruptCheckpoint(format!(
            "expected a shared-model checkpoint, found '{}'",
            raw.manifest.kind
        )));
    }
    let norm = extract_norm(&mut raw)?;
    import_state(&model.state_refs(), &raw.buffers)?;
    Ok((raw.manifest.stft, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_shared_model, HeadKind, WidthProfile};
    use crate::tensor::{Mode, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_fixture() -> (SharedModel, StftConfig, NormalizationStats) {
        let model =
            build_shared_model(&WidthProfile::desk(), (2, 32, 129), HeadKind::FixedAverage, 42)
                .unwrap();
        let stft = StftConfig::new(256, 64, 8000).unwrap();
        let norm = NormalizationStats {
            per_bin_std: (0..129).map(|k| 0.5 + k as f64 * 0.01).collect(),
            epsilon: 1e-8,
        };
        (model, stft, norm)
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, stft, norm) = desk_fixture();
        save_shared(&path, &model, &stft, &norm, &[]).unwrap();

        let loaded = load(&path).unwrap();
        let LoadedModel::Shared(loaded_model) = loaded.model else {
            panic!("expected shared model");
        };
        assert_eq!(loaded.norm, norm);
        assert_eq!(loaded.stft, stft);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 32 * 129).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 2, 32, 129], data).unwrap();
        let a = model.forward(&x, Mode::Eval).unwrap();
        let b = loaded_model.forward(&x, Mode::Eval).unwrap();
        for s in crate::source::SourceId::ALL {
            assert_eq!(a[s].to_vec(), b[s].to_vec());
        }
    }

    #[test]
    fn truncated_file_is_reported_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, stft, norm) = desk_fixture();
        save_shared(&path, &model, &stft, &norm, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&cut), Err(Error::CorruptCheckpoint(_))));

        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&garbage), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, stft, norm) = desk_fixture();
        save_shared(&path, &model, &stft, &norm, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(Error::CheckpointVersion {
                found: 99,
                supported: VERSION
            })
        ));
    }

    #[test]
    fn profile_mismatch_names_first_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plus.ckpt");
        let plus = build_shared_model(
            &WidthProfile::encoder_plus(),
            (2, 128, 1025),
            HeadKind::FixedAverage,
            3,
        )
        .unwrap();
        let stft = StftConfig::default();
        let norm = NormalizationStats {
            per_bin_std: vec![1.0; 1025],
            epsilon: 1e-8,
        };
        save_shared(&path, &plus, &stft, &norm, &[]).unwrap();

        let mut base =
            build_shared_model(&WidthProfile::base(), (2, 128, 1025), HeadKind::FixedAverage, 4)
                .unwrap();
        let err = load_into_shared(&path, &mut base).unwrap_err();
        match err {
            Error::CheckpointShape(msg) => {
                assert!(msg.contains("model.encoder.in.conv.weight"), "{msg}");
            }
            other => panic!("expected shape error, got {other}"),
        }
    }

    #[test]
    fn extras_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, stft, norm) = desk_fixture();
        let extras = vec![NamedBuffer {
            name: "optim.encoder.step".into(),
            shape: vec![1],
            data: vec![17.0],
        }];
        save_shared(&path, &model, &stft, &norm, &extras).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.extras, extras);
    }
}
