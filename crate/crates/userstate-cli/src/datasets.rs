//! Dataset-producing commands: synthetic generation and preprocessing.

use ndarray::Array2;
use serde_json::json;
use std::path::Path;

use userstate_core::audio::{chunk_stream, AudioChunk, CHUNK_SAMPLES, SAMPLE_RATE};
use userstate_core::codec::{latents_for_segment, CodecModel};
use userstate_core::data::{
    DatasetMeta, DatasetStore, LatentClip, SegmentEntry, SegmentManifest, UnlabeledPool,
    MANIFEST_FORMAT_VERSION,
};
use userstate_core::face::normalize_clip;
use userstate_core::synth::{generate_labeled, generate_unlabeled};

use crate::config::RunConfig;
use crate::run::{require_inputs, RunContext};
use crate::CliError;

fn entry(media_id: String, label: Option<userstate_core::data::ClassLabel>) -> SegmentEntry {
    SegmentEntry {
        media_id,
        start_s: 0.0,
        end_s: 1.0,
        has_audio: true,
        has_face: true,
        label,
        annotator_agreement: None,
    }
}

fn waveform_rows(wave: &[f64]) -> Result<Array2<f32>, CliError> {
    let chunks = chunk_stream(wave, SAMPLE_RATE)?;
    let mut rows = Array2::<f32>::zeros((chunks.len(), CHUNK_SAMPLES));
    for (r, chunk) in chunks.iter().enumerate() {
        for (c, &v) in chunk.samples().iter().enumerate() {
            rows[(r, c)] = v as f32;
        }
    }
    Ok(rows)
}

/// Generates a synthetic dataset: raw face clips, grid-aligned latents,
/// optional waveforms, and hidden truth for the unlabeled pools.
pub fn synth(ctx: &mut RunContext, config: &RunConfig) -> Result<serde_json::Value, CliError> {
    let section = &config.synth;
    if section.labeled == 0 {
        return Err(CliError::Config("synth.labeled must be positive".into()));
    }
    let spec = section.generator_spec(config.seed);
    ctx.log_event(
        "generate",
        json!({
            "labeled": section.labeled,
            "unlabeled": section.unlabeled,
            "noise": section.noise,
            "rare_rate": section.rare_rate,
        }),
    );
    let items = generate_labeled(section.labeled, &spec)?;
    let pools = generate_unlabeled(section.unlabeled, &spec, section.rare_rate)?;

    let mut entries = Vec::with_capacity(section.labeled + section.unlabeled);
    for (i, item) in items.iter().enumerate() {
        entries.push(entry(format!("l{i:04}"), Some(item.label)));
    }
    for i in 0..section.unlabeled {
        entries.push(entry(format!("u{i:04}"), None));
    }
    let meta = DatasetMeta {
        format_version: MANIFEST_FORMAT_VERSION,
        config_hash: ctx.config_hash().to_string(),
        face_normalized: false,
    };
    let store = DatasetStore::create(ctx.dir(), SegmentManifest { entries }, meta)?;

    for (i, item) in items.iter().enumerate() {
        let id = format!("l{i:04}");
        store.write_face_clip(&id, &item.raw_face)?;
        store.write_latent_clip(&id, &item.latent)?;
        if let Some(wave) = &item.waveform {
            store.write_waveform(&id, &waveform_rows(wave)?)?;
        }
    }
    let UnlabeledPool::Audio(latents) = &pools.audio else { unreachable!("audio pool") };
    let mut hidden = Vec::with_capacity(section.unlabeled);
    for i in 0..section.unlabeled {
        let id = format!("u{i:04}");
        store.write_face_clip(&id, &pools.raw_faces[i])?;
        store.write_latent_clip(&id, &latents[i])?;
        if let Some(waves) = &pools.audio_waveforms {
            store.write_waveform(&id, &waveform_rows(&waves[i])?)?;
        }
        hidden.push((id, pools.hidden_audio[i], pools.hidden_face[i]));
    }
    store.write_hidden_labels(&hidden)?;

    Ok(json!({
        "labeled": section.labeled,
        "unlabeled": section.unlabeled,
        "audio_mode": section.audio_mode,
        "dataset": ctx.dir().display().to_string(),
    }))
}

/// Which audio payload a command reads from a dataset.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AudioInput {
    Latents,
    Waveforms,
}

/// Checks a source dataset and enumerates every clip file the manifest
/// promises before any work starts.
pub fn check_dataset_inputs(
    input: &Path,
    faces: bool,
    audio: Option<AudioInput>,
) -> Result<(), CliError> {
    let manifest_path = input.join("manifest.jsonl");
    let meta_path = input.join("meta.json");
    let mut required: Vec<(&str, &Path)> = vec![("dataset directory", input)];
    if input.exists() {
        required.push(("dataset manifest", &manifest_path));
        required.push(("dataset meta", &meta_path));
    }
    require_inputs(&required)?;

    let store = DatasetStore::open(input)?;
    let mut missing = Vec::new();
    for entry in &store.manifest.entries {
        if faces && entry.has_face && !store.face_clip_exists(&entry.media_id) {
            missing.push(format!("face clip: {}", entry.media_id));
        }
        if entry.has_audio {
            match audio {
                Some(AudioInput::Waveforms) if !store.waveform_exists(&entry.media_id) => {
                    missing.push(format!("waveform clip: {}", entry.media_id));
                }
                Some(AudioInput::Latents) if !store.latent_clip_exists(&entry.media_id) => {
                    missing.push(format!("latent clip: {}", entry.media_id));
                }
                _ => {}
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingInputs(missing))
    }
}

/// Normalizes face clips and resolves audio latents (copying stored
/// latents, or re-encoding waveforms when a codec checkpoint is given).
pub fn preprocess(
    ctx: &mut RunContext,
    config: &RunConfig,
    input: &Path,
    codec_path: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let src = DatasetStore::open(input)?;
    if src.meta.face_normalized {
        return Err(CliError::Config(format!(
            "{} is already normalized",
            input.display()
        )));
    }
    let codec = codec_path
        .map(|p| CodecModel::load(config.codec.clone(), config.seed, p))
        .transpose()?;

    let meta = DatasetMeta {
        format_version: MANIFEST_FORMAT_VERSION,
        config_hash: ctx.config_hash().to_string(),
        face_normalized: true,
    };
    let out = DatasetStore::create(ctx.dir(), src.manifest.clone(), meta)?;

    let mut faces = 0usize;
    let mut encoded = 0usize;
    let mut copied = 0usize;
    for entry in &src.manifest.entries {
        if entry.has_face {
            let raw = src.read_face_clip(&entry.media_id)?;
            out.write_face_clip(&entry.media_id, &normalize_clip(&raw, config.rotation_mode)?)?;
            faces += 1;
        }
        if entry.has_audio {
            let latent: LatentClip = match &codec {
                Some(model) => {
                    let rows = src.read_waveform(&entry.media_id)?;
                    let chunks: Vec<AudioChunk> = rows
                        .rows()
                        .into_iter()
                        .map(|row| {
                            AudioChunk::new(row.iter().map(|&v| v as f64).collect())
                        })
                        .collect::<Result<_, _>>()?;
                    encoded += 1;
                    latents_for_segment(&chunks, model)?
                }
                None => {
                    copied += 1;
                    src.read_latent_clip(&entry.media_id)?
                }
            };
            out.write_latent_clip(&entry.media_id, &latent)?;
        }
    }
    let hidden = input.join("hidden_labels.jsonl");
    if hidden.exists() {
        let target = ctx.dir().join("hidden_labels.jsonl");
        std::fs::copy(&hidden, &target)
            .map_err(|e| CliError::Io { path: target.display().to_string(), source: e })?;
    }
    ctx.log_event(
        "preprocessed",
        json!({ "faces": faces, "latents_copied": copied, "latents_encoded": encoded }),
    );
    Ok(json!({
        "entries": src.manifest.entries.len(),
        "faces_normalized": faces,
        "latents_copied": copied,
        "latents_encoded": encoded,
        "dataset": ctx.dir().display().to_string(),
    }))
}

/// Guard for consumers that need a preprocessed dataset.
pub fn require_normalized(store: &DatasetStore, what: &str) -> Result<(), CliError> {
    if store.meta.face_normalized {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{what} needs normalized face clips; run preprocess first"
        )))
    }
}

