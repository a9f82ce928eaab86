//! JSON-lines manifests.
//!
//! The first record is a header (`"kind": "header"`) carrying class names,
//! patch interval and the generator echo. Every following line is one patch:
//! `{id, northing_m, easting_m, label, image_ref}`. `image_ref` is a path
//! relative to the manifest's directory, or `inline:<base64 GSSL blob>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{GeneratorEcho, GeoPatch, Image, ImageSource, SurveyManifest};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "geossl-manifest/1";
const INLINE_PREFIX: &str = "inline:";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    kind: String,
    format: String,
    class_names: Vec<String>,
    patch_interval_m: f64,
    generator: Option<GeneratorEcho>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchRecord {
    id: usize,
    northing_m: f64,
    easting_m: f64,
    label: Option<usize>,
    image_ref: String,
}

impl SurveyManifest {
    fn header_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&HeaderRecord {
            kind: "header".into(),
            format: MANIFEST_FORMAT.into(),
            class_names: self.class_names.clone(),
            patch_interval_m: self.patch_interval_m,
            generator: self.generator.clone(),
        })?)
    }

    fn write_lines(&self, path: &Path, mut image_ref: impl FnMut(&GeoPatch) -> Result<String>) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.header_line()?);
        out.push('\n');
        for p in &self.patches {
            let rec = PatchRecord {
                id: p.id,
                northing_m: p.northing_m,
                easting_m: p.easting_m,
                label: p.label,
                image_ref: image_ref(p)?,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Writes `manifest.jsonl` plus one `images/<id>.gssl` blob per patch into
    /// `dir`, returning the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let path = dir.join("manifest.jsonl");
        self.write_lines(&path, |p| {
            let name = format!("images/{:06}.gssl", p.id);
            p.image()?.write_blob(&dir.join(&name))?;
            Ok(name)
        })?;
        Ok(path)
    }

    /// Writes a single self-contained manifest with base64 payloads.
    pub fn save_inline(&self, path: &Path) -> Result<()> {
        self.write_lines(path, |p| {
            Ok(format!("{INLINE_PREFIX}{}", B64.encode(p.image()?.to_blob())))
        })
    }
}

/// Parses and validates a manifest. Blob payloads are checked for existence
/// here and read lazily on first access.
pub fn load_manifest(path: &Path) -> Result<SurveyManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let Some((hline, htext)) = lines.next() else {
        return Err(err(0, "no patches".into()));
    };
    let header: HeaderRecord =
        serde_json::from_str(htext).map_err(|e| err(hline, format!("invalid header record: {e}")))?;
    if header.kind != "header" {
        return Err(err(
            hline,
            format!("first record must be the header, found kind {:?}", header.kind),
        ));
    }
    if header.format != MANIFEST_FORMAT {
        return Err(err(hline, format!("unsupported format {:?}", header.format)));
    }

    let mut rows: Vec<(usize, PatchRecord)> = Vec::new();
    for (line, raw) in lines {
        let rec: PatchRecord = serde_json::from_str(raw).map_err(|e| err(line, format!("malformed row: {e}")))?;
        rows.push((line, rec));
    }
    if rows.is_empty() {
        return Err(err(hline, "no patches".into()));
    }

    let n = rows.len();
    let mut seen: Vec<Option<usize>> = vec![None; n];
    for (line, rec) in &rows {
        if rec.id >= n {
            return Err(err(*line, format!("id {} outside dense range 0..{n}", rec.id)));
        }
        if let Some(prev) = seen[rec.id] {
            return Err(err(*line, format!("duplicate id {} (first on line {prev})", rec.id)));
        }
        seen[rec.id] = Some(*line);
    }
    rows.sort_by_key(|(_, r)| r.id);

    let mut patches = Vec::with_capacity(n);
    for (line, rec) in rows {
        if let Some(l) = rec.label {
            if l >= header.class_names.len() {
                return Err(err(
                    line,
                    format!("label {l} exceeds class count {}", header.class_names.len()),
                ));
            }
        }
        let source = if let Some(payload) = rec.image_ref.strip_prefix(INLINE_PREFIX) {
            let bytes = B64
                .decode(payload)
                .map_err(|e| err(line, format!("inline payload is not base64: {e}")))?;
            let img = Image::from_blob(&bytes).map_err(|m| err(line, format!("inline payload: {m}")))?;
            ImageSource::Memory(Arc::new(img))
        } else {
            let blob = base.join(&rec.image_ref);
            if !blob.is_file() {
                return Err(err(line, format!("missing image payload {}", blob.display())));
            }
            ImageSource::blob(blob)
        };
        patches.push(GeoPatch {
            id: rec.id,
            northing_m: rec.northing_m,
            easting_m: rec.easting_m,
            label: rec.label,
            source,
        });
    }
    SurveyManifest::new(header.class_names, header.patch_interval_m, header.generator, patches)
        .map_err(|e| err(0, e.to_string()))
}
