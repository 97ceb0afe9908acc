//! On-disk dataset layout shared by the synthesizer, preprocessing and
//! training stages.
//!
//! ```text
//! <root>/
//!   meta.json            format version, provenance hash, face state
//!   manifest.jsonl       segment manifest
//!   clips/<id>.face.clip     landmark clip (30x68x3 f32)
//!   clips/<id>.audio.clip    latent clip (30x50x1 f32)
//!   clips/<id>.wave.clip     waveform chunk sequence (30x1470 f32), optional
//!   hidden_labels.jsonl  optional ground truth for unlabeled synthetic items
//! ```

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{
    io_err, load_manifest, read_clip_f32, save_manifest, write_clip_f32, ClassLabel, DataError,
    LabeledExample, LandmarkClip, LatentClip, Result, SegmentManifest, UnlabeledPool,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub config_hash: String,
    /// True once face clips have been through rotation and scale
    /// normalization; raw synthesized datasets carry `false`.
    pub face_normalized: bool,
}

pub struct DatasetStore {
    root: PathBuf,
    pub manifest: SegmentManifest,
    pub meta: DatasetMeta,
}

/// Unlabeled pools plus identities, with ground truth retained separately
/// when the data is synthetic (never exposed to training). The audio and
/// face clips under one media id may carry different hidden classes, so
/// the labels come as per-modality pairs.
pub struct StoredUnlabeled {
    pub audio: UnlabeledPool,
    pub face: UnlabeledPool,
    pub media_ids: Vec<String>,
    pub hidden_labels: Option<Vec<(ClassLabel, ClassLabel)>>,
}

impl DatasetStore {
    pub fn create(root: &Path, manifest: SegmentManifest, meta: DatasetMeta) -> Result<Self> {
        std::fs::create_dir_all(root.join("clips")).map_err(|e| io_err(root, e))?;
        save_manifest(&root.join("manifest.jsonl"), &manifest)?;
        let meta_path = root.join("meta.json");
        let body = serde_json::to_string_pretty(&meta).unwrap();
        std::fs::write(&meta_path, body).map_err(|e| io_err(&meta_path, e))?;
        Ok(DatasetStore { root: root.to_path_buf(), manifest, meta })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(&root.join("manifest.jsonl"))?;
        let meta_path = root.join("meta.json");
        let body = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&body).map_err(|e| DataError::Parse {
            path: meta_path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(DatasetStore { root: root.to_path_buf(), manifest, meta })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn clip_path(&self, media_id: &str, kind: &str) -> PathBuf {
        self.root.join("clips").join(format!("{media_id}.{kind}.clip"))
    }

    pub fn face_clip_exists(&self, media_id: &str) -> bool {
        self.clip_path(media_id, "face").exists()
    }

    pub fn latent_clip_exists(&self, media_id: &str) -> bool {
        self.clip_path(media_id, "audio").exists()
    }

    pub fn waveform_exists(&self, media_id: &str) -> bool {
        self.clip_path(media_id, "wave").exists()
    }

    pub fn write_face_clip(&self, media_id: &str, clip: &LandmarkClip) -> Result<()> {
        write_clip_f32(&self.clip_path(media_id, "face"), &clip.frames().clone().into_dyn())
    }

    pub fn read_face_clip(&self, media_id: &str) -> Result<LandmarkClip> {
        let path = self.clip_path(media_id, "face");
        let arr = read_clip_f32(&path)?;
        let arr3: Array3<f32> =
            arr.into_dimensionality().map_err(|e| DataError::ClipFormat {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        LandmarkClip::new(arr3, self.meta.face_normalized)
    }

    pub fn write_latent_clip(&self, media_id: &str, clip: &LatentClip) -> Result<()> {
        write_clip_f32(&self.clip_path(media_id, "audio"), &clip.latents().clone().into_dyn())
    }

    pub fn read_latent_clip(&self, media_id: &str) -> Result<LatentClip> {
        let path = self.clip_path(media_id, "audio");
        let arr = read_clip_f32(&path)?;
        let arr3: Array3<f32> =
            arr.into_dimensionality().map_err(|e| DataError::ClipFormat {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        LatentClip::new(arr3)
    }

    /// Waveform chunk sequences are stored as `[chunks, samples]` arrays.
    pub fn write_waveform(&self, media_id: &str, wave: &ndarray::Array2<f32>) -> Result<()> {
        write_clip_f32(&self.clip_path(media_id, "wave"), &wave.clone().into_dyn())
    }

    pub fn read_waveform(&self, media_id: &str) -> Result<ndarray::Array2<f32>> {
        let path = self.clip_path(media_id, "wave");
        let arr = read_clip_f32(&path)?;
        arr.into_dimensionality().map_err(|e| DataError::ClipFormat {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Loads every labeled manifest entry with its available modalities.
    pub fn load_labeled(&self) -> Result<Vec<(usize, LabeledExample)>> {
        let mut out = Vec::new();
        for (idx, entry) in self.manifest.entries.iter().enumerate() {
            let Some(label) = entry.label else { continue };
            let audio =
                entry.has_audio.then(|| self.read_latent_clip(&entry.media_id)).transpose()?;
            let face =
                entry.has_face.then(|| self.read_face_clip(&entry.media_id)).transpose()?;
            out.push((idx, LabeledExample::new(audio, face, label)?));
        }
        Ok(out)
    }

    /// Loads the unlabeled pools. Only entries carrying both modalities are
    /// eligible so the audio and face pools stay index-aligned.
    pub fn load_unlabeled(&self) -> Result<StoredUnlabeled> {
        let mut audio = Vec::new();
        let mut face = Vec::new();
        let mut media_ids = Vec::new();
        for entry in &self.manifest.entries {
            if entry.label.is_some() {
                continue;
            }
            if !(entry.has_audio && entry.has_face) {
                return Err(DataError::Invariant {
                    field: "unlabeled entry",
                    msg: format!(
                        "{} must carry both modalities for pool alignment",
                        entry.media_id
                    ),
                });
            }
            audio.push(self.read_latent_clip(&entry.media_id)?);
            face.push(self.read_face_clip(&entry.media_id)?);
            media_ids.push(entry.media_id.clone());
        }
        let hidden_labels = self.read_hidden_labels(&media_ids)?;
        Ok(StoredUnlabeled {
            audio: UnlabeledPool::Audio(audio),
            face: UnlabeledPool::Face(face),
            media_ids,
            hidden_labels,
        })
    }

    pub fn write_hidden_labels(
        &self,
        entries: &[(String, ClassLabel, ClassLabel)],
    ) -> Result<()> {
        let path = self.root.join("hidden_labels.jsonl");
        let mut out = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        writeln!(out, "{}", serde_json::json!({"format_version": 1, "kind": "hidden_labels"}))
            .map_err(|e| io_err(&path, e))?;
        for (id, audio, face) in entries {
            writeln!(
                out,
                "{}",
                serde_json::json!({"media_id": id, "audio": audio.name(), "face": face.name()})
            )
            .map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    fn read_hidden_labels(
        &self,
        media_ids: &[String],
    ) -> Result<Option<Vec<(ClassLabel, ClassLabel)>>> {
        let path = self.root.join("hidden_labels.jsonl");
        if !path.exists() {
            return Ok(None);
        }
        let file = std::fs::File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut map = std::collections::HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(&path, e))?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| DataError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            let id = v["media_id"].as_str().unwrap_or_default().to_string();
            let audio = ClassLabel::from_name(v["audio"].as_str().unwrap_or_default())?;
            let face = ClassLabel::from_name(v["face"].as_str().unwrap_or_default())?;
            map.insert(id, (audio, face));
        }
        let labels: Option<Vec<(ClassLabel, ClassLabel)>> =
            media_ids.iter().map(|id| map.get(id).copied()).collect();
        Ok(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SegmentEntry;
    use ndarray::Array3;

    fn entry(id: &str, label: Option<ClassLabel>) -> SegmentEntry {
        SegmentEntry {
            media_id: id.into(),
            start_s: 0.0,
            end_s: 1.0,
            has_audio: true,
            has_face: true,
            label,
            annotator_agreement: None,
        }
    }

    #[test]
    fn store_round_trips_labeled_and_unlabeled_items() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = SegmentManifest {
            entries: vec![entry("a", Some(ClassLabel::CONFUSION)), entry("b", None)],
        };
        let meta = DatasetMeta {
            format_version: 1,
            config_hash: "deadbeef".into(),
            face_normalized: false,
        };
        let store = DatasetStore::create(dir.path(), manifest, meta).unwrap();

        let face = LandmarkClip::new(Array3::from_elem((30, 68, 3), 0.25), false).unwrap();
        let latent = LatentClip::new(Array3::from_elem((30, 50, 1), -1.0)).unwrap();
        for id in ["a", "b"] {
            store.write_face_clip(id, &face).unwrap();
            store.write_latent_clip(id, &latent).unwrap();
        }
        store
            .write_hidden_labels(&[("b".into(), ClassLabel::NEUTRAL, ClassLabel::AGREEMENT)])
            .unwrap();

        let reopened = DatasetStore::open(dir.path()).unwrap();
        let labeled = reopened.load_labeled().unwrap();
        assert_eq!(labeled.len(), 1);
        assert_eq!(labeled[0].1.label, ClassLabel::CONFUSION);
        assert!(labeled[0].1.has_both());

        let unlabeled = reopened.load_unlabeled().unwrap();
        assert_eq!(unlabeled.audio.len(), 1);
        assert_eq!(unlabeled.face.len(), 1);
        assert_eq!(
            unlabeled.hidden_labels,
            Some(vec![(ClassLabel::NEUTRAL, ClassLabel::AGREEMENT)])
        );
    }
}
