//! Segment manifests: one JSON object per line, preceded by a header line.
//!
//! ```text
//! {"format_version":1,"kind":"segment_manifest"}
//! {"media_id":"s001","start_s":0.0,"end_s":1.0,"has_audio":true,"has_face":true,"label":"agreement","annotator_agreement":0.83}
//! ```
//!
//! `label` accepts a class name or an integer index and may be absent for
//! unlabeled segments. Clip payloads for entry `m` live next to the
//! manifest as `clips/<m>.audio.clip` and `clips/<m>.face.clip`.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{io_err, ClassLabel, DataError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelSpec {
    Name(String),
    Index(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    media_id: String,
    start_s: f64,
    end_s: f64,
    has_audio: bool,
    has_face: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<LabelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotator_agreement: Option<f64>,
}

/// One media segment: identity, span, available modalities, optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEntry {
    pub media_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub has_audio: bool,
    pub has_face: bool,
    pub label: Option<ClassLabel>,
    pub annotator_agreement: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentManifest {
    pub entries: Vec<SegmentEntry>,
}

impl SegmentManifest {
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.label.map(|_| i))
            .collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.label.is_none().then_some(i))
            .collect()
    }
}

fn entry_from_raw(raw: RawEntry, path: &str, line: usize) -> Result<SegmentEntry> {
    let parse = |msg: String| DataError::Parse { path: path.to_string(), line, msg };
    if !(raw.end_s > raw.start_s) {
        return Err(parse(format!(
            "segment span must have positive duration, got [{}, {}]",
            raw.start_s, raw.end_s
        )));
    }
    if !raw.has_audio && !raw.has_face {
        return Err(parse("segment must carry at least one modality flag".into()));
    }
    let label = match raw.label {
        None => None,
        Some(LabelSpec::Name(n)) => {
            Some(ClassLabel::from_name(&n).map_err(|e| parse(e.to_string()))?)
        }
        Some(LabelSpec::Index(i)) => {
            Some(ClassLabel::new(i as usize).map_err(|e| parse(e.to_string()))?)
        }
    };
    if let Some(a) = raw.annotator_agreement {
        if !(0.0..=1.0).contains(&a) {
            return Err(parse(format!("annotator_agreement {a} outside [0,1]")));
        }
    }
    Ok(SegmentEntry {
        media_id: raw.media_id,
        start_s: raw.start_s,
        end_s: raw.end_s,
        has_audio: raw.has_audio,
        has_face: raw.has_face,
        label,
        annotator_agreement: raw.annotator_agreement,
    })
}

pub fn load_manifest(path: &Path) -> Result<SegmentManifest> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: Header = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: pstr.clone(),
                line: lineno,
                msg: format!("expected manifest header: {e}"),
            })?;
            if header.format_version != MANIFEST_FORMAT_VERSION {
                return Err(DataError::Parse {
                    path: pstr,
                    line: lineno,
                    msg: format!("unsupported format_version {}", header.format_version),
                });
            }
            if header.kind != "segment_manifest" {
                return Err(DataError::Parse {
                    path: pstr,
                    line: lineno,
                    msg: format!("unexpected kind {:?}", header.kind),
                });
            }
            saw_header = true;
            continue;
        }
        let raw: RawEntry = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: pstr.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        entries.push(entry_from_raw(raw, &pstr, lineno)?);
    }
    if !saw_header && !entries.is_empty() {
        unreachable!("entries cannot precede the header");
    }
    if !saw_header {
        // An empty file is a valid manifest of zero entries.
        return Ok(SegmentManifest::default());
    }
    Ok(SegmentManifest { entries })
}

pub fn save_manifest(path: &Path, manifest: &SegmentManifest) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let header =
        Header { format_version: MANIFEST_FORMAT_VERSION, kind: "segment_manifest".into() };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap()).map_err(|e| io_err(path, e))?;
    for e in &manifest.entries {
        let raw = RawEntry {
            media_id: e.media_id.clone(),
            start_s: e.start_s,
            end_s: e.end_s,
            has_audio: e.has_audio,
            has_face: e.has_face,
            label: e.label.map(|l| LabelSpec::Name(l.name().to_string())),
            annotator_agreement: e.annotator_agreement,
        };
        writeln!(out, "{}", serde_json::to_string(&raw).unwrap()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
