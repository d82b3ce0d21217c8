//! Checkpoint serialization.
//!
//! Layout: an 8-byte magic, a format version, a JSON manifest (training
//! config, model spec, RNG state, store/entry catalog), then every tensor's
//! f64 values little-endian in catalog order. Loading rebuilds the model
//! from that spec and restores values strictly: entries the model does not
//! have, shape differences, or leftover bytes are integrity errors rather
//! than warnings.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

use super::{Model, ModelSpec, TrainConfig};

pub const MAGIC: &[u8; 8] = b"HDANCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable snapshot of a ChaCha20 generator. The word position is a
/// u128, stored as a decimal string to stay inside JSON's safe number range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, lowercase hex.
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> RngState {
        let seed = rng.get_seed();
        let mut hex = String::with_capacity(64);
        for b in seed {
            hex.push_str(&format!("{b:02x}"));
        }
        RngState {
            seed: hex,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha20Rng> {
        if self.seed.len() != 64 || !self.seed.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Format(format!(
                "rng seed must be 64 hex digits, got {:?}",
                self.seed
            )));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).expect("hex verified above");
            seed[i] = u8::from_str_radix(s, 16).expect("hex verified above");
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word_pos {:?}", self.word_pos)))?;
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// A trained model plus everything needed to resume or reproduce the run.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub rng: RngState,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    iteration: usize,
    rng: RngState,
    spec: ModelSpec,
    config: TrainConfig,
    stores: Vec<StoreManifest>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    label: String,
    entries: Vec<EntryManifest>,
}

#[derive(Serialize, Deserialize)]
struct EntryManifest {
    name: String,
    shape: [usize; 4],
    learnable: bool,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(path, &ckpt.config, ckpt.iteration, &ckpt.rng, &ckpt.model)
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    iteration: usize,
    rng: &RngState,
    model: &Model,
) -> Result<()> {
    let path = path.as_ref();
    let stores = model
        .stores()
        .iter()
        .map(|s| StoreManifest {
            label: s.label().to_string(),
            entries: s
                .iter()
                .map(|(name, e)| EntryManifest {
                    name: name.clone(),
                    shape: {
                        let (a, b, c, d) = e.value.dim();
                        [a, b, c, d]
                    },
                    learnable: e.learnable,
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        iteration,
        rng: rng.clone(),
        spec: model.spec.clone(),
        config: config.clone(),
        stores,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::json(path, e))?;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    out.write_all(&manifest_bytes).map_err(io)?;
    for store in model.stores() {
        for (_, entry) in store.iter() {
            for &v in entry.value.iter() {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Format(format!(
            "checkpoint {} is too short to hold a header",
            path.display()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize.checked_add(manifest_len).ok_or_else(|| {
        Error::Format("checkpoint manifest length overflows".into())
    })?;
    if bytes.len() < data_start {
        return Err(Error::Format(format!(
            "checkpoint manifest is truncated in {}",
            path.display()
        )));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..data_start]).map_err(|e| Error::json(path, e))?;
    if manifest.version != version {
        return Err(Error::Format(format!(
            "manifest version {} disagrees with header version {version}",
            manifest.version
        )));
    }

    let mut model = Model::new(&manifest.spec, 0)?;
    let expected_labels = ["heads", "hr", "decoder", "d_feat", "d_cat", "preproc"];
    if manifest.stores.len() != expected_labels.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} stores, expected {}",
            manifest.stores.len(),
            expected_labels.len()
        )));
    }

    let mut offset = data_start;
    for (store_m, expected) in manifest.stores.iter().zip(expected_labels) {
        if store_m.label != expected {
            return Err(Error::Integrity(format!(
                "checkpoint store {:?} where {expected:?} was expected",
                store_m.label
            )));
        }
        let strict = expected != "preproc";
        let model_store = match expected {
            "heads" => &mut model.heads,
            "hr" => &mut model.hr,
            "decoder" => &mut model.dec,
            "d_feat" => &mut model.df,
            "d_cat" => &mut model.dc,
            _ => &mut model.preproc,
        };
        if strict && store_m.entries.len() != model_store.len() {
            return Err(Error::Integrity(format!(
                "store {expected} has {} entries in the checkpoint but {} in the model",
                store_m.entries.len(),
                model_store.len()
            )));
        }
        for entry in &store_m.entries {
            let len: usize = entry.shape.iter().product();
            let end = offset
                .checked_add(len * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "checkpoint data is truncated at {}.{}",
                        expected, entry.name
                    ))
                })?;
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            let shape = (entry.shape[0], entry.shape[1], entry.shape[2], entry.shape[3]);
            let tensor = Tensor::from_shape_vec(shape, values).expect("length matches shape");
            if strict {
                model_store.restore(&entry.name, tensor)?;
            } else {
                model_store.insert(entry.name.clone(), tensor, entry.learnable);
            }
        }
        if strict {
            for (name, model_entry) in model_store.iter() {
                let ckpt_entry = store_m
                    .entries
                    .iter()
                    .find(|e| &e.name == name)
                    .ok_or_else(|| {
                        Error::Integrity(format!(
                            "model parameter {expected}.{name} is missing from the checkpoint"
                        ))
                    })?;
                if ckpt_entry.learnable != model_entry.learnable {
                    return Err(Error::Integrity(format!(
                        "parameter {expected}.{name} learnable flag mismatch"
                    )));
                }
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }

    Ok(Checkpoint {
        config: manifest.config,
        iteration: manifest.iteration,
        rng: manifest.rng,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use crate::raster::PcaModel;
    use rand::RngCore;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            modalities: vec![("a".into(), 2), ("b".into(), 1)],
            num_classes: 3,
            ignore_index: 0,
            class_names: vec!["x".into(), "y".into(), "z".into()],
            head_width: 4,
            stream_widths: vec![4, 8],
            blocks_per_stage: 1,
            decoder_widths: vec![4, 4, 4],
            d_feat_widths: vec![4],
            d_cat_widths: vec![4, 8],
            enable_feature_da: true,
        }
    }

    fn tiny_config() -> TrainConfig {
        serde_json::from_value(serde_json::json!({
            "source_dir": "src",
            "out_dir": "out",
            "epochs": 1,
            "enable_feature_da": false,
            "enable_category_da": false,
            "pca_components": null
        }))
        .expect("valid config")
    }

    fn forward_logits(model: &mut Model) -> Tensor {
        let inputs = vec![
            (
                "a".to_string(),
                Tensor::from_shape_fn((1, 2, 8, 8), |(_, c, i, j)| {
                    (c + i * 8 + j) as f64 * 0.01 - 0.3
                }),
            ),
            (
                "b".to_string(),
                Tensor::from_shape_fn((1, 1, 8, 8), |(_, _, i, j)| (i * j) as f64 * 0.005),
            ),
        ];
        let mut g = Graph::new(false);
        let v = model
            .encoder
            .encode_all(&mut g, &mut model.heads, &mut model.hr, &inputs)
            .expect("encode");
        let logits = model
            .decoder
            .forward(&mut g, &mut model.dec, v)
            .expect("decode");
        g.value(logits).clone()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().expect("tempdir");
        let spec = tiny_spec();
        let mut model = Model::new(&spec, 42).expect("model");
        let pca = PcaModel {
            mean: vec![0.25, -0.5],
            components: ndarray::arr2(&[[0.6, 0.8]]),
            explained: vec![1.5],
            total_variance: 2.0,
        };
        model.set_pca(Some(&pca));
        let before = forward_logits(&mut model);

        let rng_src = {
            let mut r = ChaCha20Rng::seed_from_u64(9);
            r.next_u64();
            r.next_u64();
            r
        };
        let rng = RngState::capture(&rng_src);
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &tiny_config(), 17, &rng, &model).expect("save");

        let loaded = load_checkpoint(&path).expect("load");
        assert_eq!(loaded.iteration, 17);
        assert_eq!(loaded.rng, rng);
        assert_eq!(loaded.model.spec, spec);
        let mut restored_rng = loaded.rng.restore().expect("rng restores");
        let mut orig_rng = rng_src.clone();
        assert_eq!(restored_rng.next_u64(), orig_rng.next_u64());

        for (orig, read) in model.stores().iter().zip(loaded.model.stores()) {
            assert_eq!(orig.label(), read.label());
            assert_eq!(orig.len(), read.len());
            for ((name_a, e_a), (name_b, e_b)) in orig.iter().zip(read.iter()) {
                assert_eq!(name_a, name_b);
                assert_eq!(e_a.learnable, e_b.learnable);
                assert_eq!(e_a.value, e_b.value, "mismatch in {name_a}");
            }
        }
        let restored_pca = loaded.model.pca().expect("pca buffers restored");
        assert_eq!(restored_pca.mean, pca.mean);
        assert_eq!(restored_pca.components, pca.components);

        let mut loaded_model = loaded.model;
        let after = forward_logits(&mut loaded_model);
        assert_eq!(before, after);
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = tempfile::tempdir().expect("tempdir");
        let spec = tiny_spec();
        let model = Model::new(&spec, 1).expect("model");
        let rng = RngState::capture(&ChaCha20Rng::seed_from_u64(0));
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &tiny_config(), 0, &rng, &model).expect("save");

        let good = std::fs::read(&path).expect("read");
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).expect("write");
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[8] = 99;
        std::fs::write(&path, &bad).expect("write");
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 5];
        std::fs::write(&path, truncated).expect("write");
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &trailing).expect("write");
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn renamed_entry_is_an_integrity_error() {
        let dir = tempfile::tempdir().expect("tempdir");
        let model = Model::new(&tiny_spec(), 1).expect("model");
        let rng = RngState::capture(&ChaCha20Rng::seed_from_u64(0));
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &tiny_config(), 0, &rng, &model).expect("save");

        let bytes = std::fs::read(&path).expect("read");
        let manifest_len =
            u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&bytes[20..20 + manifest_len]).expect("manifest json");
        manifest["stores"][0]["entries"][0]["name"] = "nonexistent.w".into();
        let new_manifest = serde_json::to_vec(&manifest).expect("encode");
        let mut patched = Vec::new();
        patched.extend_from_slice(&bytes[..12]);
        patched.extend_from_slice(&(new_manifest.len() as u64).to_le_bytes());
        patched.extend_from_slice(&new_manifest);
        patched.extend_from_slice(&bytes[20 + manifest_len..]);
        std::fs::write(&path, &patched).expect("write");
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn rng_state_survives_serialization() {
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        rng.set_stream(7);
        for _ in 0..13 {
            rng.next_u64();
        }
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).expect("encode");
        let back: RngState = serde_json::from_str(&json).expect("decode");
        let mut restored = back.restore().expect("restore");
        assert_eq!(restored.next_u64(), rng.next_u64());
        assert_eq!(restored.next_u64(), rng.next_u64());
    }
}
