//! Scene directory round-tripping.
//!
//! A scene directory holds exactly `manifest.json`, the label plane named by
//! `label_file`, and one raw raster file per manifest modality. Rasters are
//! little-endian f32 in band-major C order, labels are raw u8 row-major.
//! Loading rejects unknown manifest keys, missing files, and unexpected extra
//! files, so a directory either matches the manifest exactly or fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{RasterStack, Scene};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u8,
    class_names: Vec<String>,
    label_file: String,
    modalities: Vec<ModalityEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityEntry {
    id: String,
    file: String,
    bands: usize,
    dtype: String,
}

/// Reads and validates a scene directory.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Format(format!("{} has no {MANIFEST_NAME}", dir.display()))
        } else {
            Error::io(&manifest_path, e)
        }
    })?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::json(&manifest_path, e))?;

    for m in &manifest.modalities {
        if m.dtype != "f32" {
            return Err(Error::Format(format!(
                "modality {} has dtype {:?}, only \"f32\" is supported",
                m.id, m.dtype
            )));
        }
    }

    check_directory_contents(dir, &manifest)?;

    let labels = read_labels(
        &dir.join(&manifest.label_file),
        manifest.height,
        manifest.width,
    )?;
    let mut modalities = Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        let data = read_raster(
            &dir.join(&m.file),
            m.bands,
            manifest.height,
            manifest.width,
        )?;
        modalities.push(RasterStack {
            modality_id: m.id.clone(),
            data,
        });
    }

    let scene = Scene {
        name: manifest.name,
        height: manifest.height,
        width: manifest.width,
        num_classes: manifest.num_classes,
        ignore_index: manifest.ignore_index,
        class_names: manifest.class_names,
        modalities,
        labels,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes a scene as a directory, creating it if needed.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    scene.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = Manifest {
        name: scene.name.clone(),
        height: scene.height,
        width: scene.width,
        num_classes: scene.num_classes,
        ignore_index: scene.ignore_index,
        class_names: scene.class_names.clone(),
        label_file: "labels.u8".into(),
        modalities: scene
            .modalities
            .iter()
            .map(|m| ModalityEntry {
                id: m.modality_id.clone(),
                file: format!("{}.f32", m.modality_id),
                bands: m.bands(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let label_path = dir.join("labels.u8");
    let label_bytes: Vec<u8> = scene.labels.iter().copied().collect();
    fs::write(&label_path, label_bytes).map_err(|e| Error::io(&label_path, e))?;

    for m in &scene.modalities {
        let path = dir.join(format!("{}.f32", m.modality_id));
        let mut bytes = Vec::with_capacity(m.data.len() * 4);
        for v in m.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// The directory must contain the manifest, the label file, and the listed
/// raster files, and nothing else.
fn check_directory_contents(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut expected: BTreeSet<String> = BTreeSet::new();
    expected.insert(MANIFEST_NAME.to_string());
    expected.insert(manifest.label_file.clone());
    for m in &manifest.modalities {
        if !expected.insert(m.file.clone()) {
            return Err(Error::Format(format!(
                "manifest lists file {:?} more than once",
                m.file
            )));
        }
    }

    let mut present: BTreeSet<String> = BTreeSet::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        present.insert(entry.file_name().to_string_lossy().into_owned());
    }

    if let Some(missing) = expected.difference(&present).next() {
        return Err(Error::Format(format!(
            "scene directory is missing {missing:?}"
        )));
    }
    if let Some(extra) = present.difference(&expected).next() {
        return Err(Error::Format(format!(
            "scene directory contains unexpected file {extra:?}"
        )));
    }
    Ok(())
}

fn read_labels(path: &Path, height: usize, width: usize) -> Result<Array2<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = height * width;
    if bytes.len() != want {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, manifest implies {want}",
            path.display(),
            bytes.len()
        )));
    }
    Array2::from_shape_vec((height, width), bytes)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

fn read_raster(path: &Path, bands: usize, height: usize, width: usize) -> Result<Array3<f32>> {
    if bands == 0 {
        return Err(Error::Format(format!(
            "{} declares zero bands",
            path.display()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = bands * height * width * 4;
    if bytes.len() != want {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, manifest implies {want}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array3::from_shape_vec((bands, height, width), values)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}
