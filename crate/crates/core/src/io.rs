//! Mask rasters, dataset manifests, and JSONL QA records on disk.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::mask::SemanticMask;
use crate::metrics::PredictionSet;
use crate::qa::{AnswerToken, QaItem};

/// Reads an 8-bit single-channel mask (binary or ASCII PGM, or PNG).
///
/// With `resize`, the grid is resampled nearest-neighbour to `(width, height)`.
pub fn load_mask(path: &Path, resize: Option<(usize, usize)>) -> Result<SemanticMask, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let (width, height, codes) = if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        parse_pgm(&bytes).map_err(|m| DataError::format(path, m))?
    } else {
        decode_raster(&bytes).map_err(|m| DataError::format(path, m))?
    };
    let mask = SemanticMask::from_codes(width, height, &codes).map_err(|source| DataError::Mask {
        path: path.to_path_buf(),
        source,
    })?;
    match resize {
        Some((w, h)) => mask.resize_nearest(w, h).map_err(|source| DataError::Mask {
            path: path.to_path_buf(),
            source,
        }),
        None => Ok(mask),
    }
}

fn decode_raster(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            Ok((w as usize, h as usize, gray.into_raw()))
        }
        other => Err(format!(
            "expected an 8-bit single-channel image, found {:?} with {} channels",
            other.color(),
            other.color().channel_count()
        )),
    }
}

/// Splits a PGM header into tokens, skipping `#` comments. Returns the
/// tokens and the offset just past the single whitespace byte that ends the
/// header.
fn pgm_header(bytes: &[u8], wanted: usize) -> Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(wanted);
    let mut i = 0;
    while tokens.len() < wanted {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        if i >= bytes.len() {
            return Err("truncated PGM header".into());
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let (tokens, offset) = pgm_header(bytes, 4)?;
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("invalid PGM {what} {s:?}"))
    };
    let width = num(&tokens[1], "width")?;
    let height = num(&tokens[2], "height")?;
    let maxval = num(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("PGM maxval {maxval} is not an 8-bit depth"));
    }
    let n = width * height;
    let codes = if tokens[0] == "P5" {
        let body = bytes.get(offset..).unwrap_or(&[]);
        if body.len() < n {
            return Err(format!("truncated PGM: expected {n} pixels, found {}", body.len()));
        }
        body[..n].to_vec()
    } else {
        let text = std::str::from_utf8(bytes.get(offset.min(bytes.len())..).unwrap_or(&[]))
            .map_err(|_| "ASCII PGM body is not UTF-8".to_string())?;
        let values = text
            .split_ascii_whitespace()
            .map(|t| t.parse::<u8>().map_err(|_| format!("invalid PGM sample {t:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() < n {
            return Err(format!("truncated PGM: expected {n} pixels, found {}", values.len()));
        }
        values[..n].to_vec()
    };
    Ok((width, height, codes))
}

/// Writes a binary PGM with one byte per label code.
pub fn save_mask_pgm(mask: &SemanticMask, path: &Path) -> Result<(), DataError> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.codes());
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Writes an 8-bit grayscale PNG holding the raw label codes.
pub fn save_mask_png(mask: &SemanticMask, path: &Path) -> Result<(), DataError> {
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.codes())
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| DataError::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub mask_path: PathBuf,
    #[serde(default)]
    pub region: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_path: Option<PathBuf>,
}

/// List of scenes to generate questions for.
///
/// Relative paths are resolved against the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ids = std::collections::HashSet::new();
        for entry in &mut manifest.entries {
            if !ids.insert(entry.image_id.clone()) {
                return Err(DataError::format(
                    path,
                    format!("duplicate image_id {:?}", entry.image_id),
                ));
            }
            entry.mask_path = base.join(&entry.mask_path);
            if let Some(d) = &entry.description_path {
                entry.description_path = Some(base.join(d));
            }
            for p in std::iter::once(&entry.mask_path).chain(entry.description_path.as_ref()) {
                if !p.exists() {
                    return Err(DataError::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| DataError::io(path, e))
    }
}

/// Writes one JSON object per line with fields in a fixed order.
pub fn write_qa_jsonl<W: Write>(items: &[QaItem], out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_qa_jsonl(items: &[QaItem], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_qa_jsonl(items, file).map_err(|e| DataError::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_qa_jsonl(path: &Path) -> Result<Vec<QaItem>, DataError> {
    read_lines(path)
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    image_id: String,
    template_id: String,
    answer: AnswerToken,
}

/// Reads predictions; any record carrying `image_id`, `template_id` and
/// `answer` is accepted, so a gold file doubles as a perfect prediction file.
pub fn load_predictions(path: &Path) -> Result<PredictionSet, DataError> {
    let mut set = PredictionSet::new();
    for rec in read_lines::<PredictionRecord>(path)? {
        set.insert(rec.image_id, rec.template_id, rec.answer)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::MaskError;
    use crate::qa::generate_all;

    #[test]
    fn four_pixel_graymap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        fs::write(&p, b"P5\n# comment\n2 2\n255\n\x00\x01\x02\x03").unwrap();
        let mask = load_mask(&p, None).unwrap();
        assert_eq!(mask, SemanticMask::from_rows(&[&[0, 1], &[2, 3]]).unwrap());

        fs::write(&p, "P2\n2 2\n3\n0 1\n2 3\n").unwrap();
        assert_eq!(load_mask(&p, None).unwrap(), mask);
    }

    #[test]
    fn truncated_and_invalid_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        fs::write(&p, b"P5\n2 2\n255\n\x00\x01").unwrap();
        assert!(matches!(load_mask(&p, None), Err(DataError::Format { .. })));

        fs::write(&p, b"P5\n2 2\n255\n\x00\x01\x07\x03").unwrap();
        match load_mask(&p, None) {
            Err(DataError::Mask { source, .. }) => {
                assert_eq!(source, MaskError::InvalidLabel { value: 7, x: 0, y: 1 })
            }
            other => panic!("unexpected {other:?}"),
        }

        let missing = dir.path().join("nope.pgm");
        assert!(load_mask(&missing, None).unwrap_err().is_io());
    }

    #[test]
    fn rgb_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::new(2, 2).save(&p).unwrap();
        let err = load_mask(&p, None).unwrap_err();
        assert!(err.to_string().contains("single-channel"), "{err}");
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codes: Vec<u8> = (0..35).map(|i| (i * 7 % 4) as u8).collect();
        let mask = SemanticMask::from_codes(7, 5, &codes).unwrap();
        let pgm = dir.path().join("m.pgm");
        let png = dir.path().join("m.png");
        save_mask_pgm(&mask, &pgm).unwrap();
        save_mask_png(&mask, &png).unwrap();
        assert_eq!(load_mask(&pgm, None).unwrap(), mask);
        assert_eq!(load_mask(&png, None).unwrap(), mask);
        let up = load_mask(&png, Some((14, 10))).unwrap();
        assert_eq!(up.get(13, 9), mask.get(6, 4));
    }

    #[test]
    fn jsonl_round_trip_and_field_order() {
        let dir = tempfile::tempdir().unwrap();
        let mask = SemanticMask::from_rows(&[&[0, 1], &[2, 3]]).unwrap();
        let items = generate_all(&mask, "scene-1");
        let p = dir.path().join("qa.jsonl");
        save_qa_jsonl(&items, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 40);
        assert!(text.lines().next().unwrap().starts_with(
            r#"{"image_id":"scene-1","template_id":"dd_intact","category":"damage_detection","question":"#
        ));
        assert_eq!(load_qa_jsonl(&p).unwrap(), items);

        let preds = load_predictions(&p).unwrap();
        assert_eq!(preds.len(), 40);
    }

    #[test]
    fn unknown_answer_token_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        fs::write(
            &p,
            "{\"image_id\":\"a\",\"template_id\":\"t\",\"answer\":\"Yes\"}\n{\"image_id\":\"a\",\"template_id\":\"u\",\"answer\":\"Perhaps\"}\n",
        )
        .unwrap();
        match load_predictions(&p) {
            Err(DataError::Record { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("Perhaps"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mask = SemanticMask::from_rows(&[&[0, 1]]).unwrap();
        save_mask_pgm(&mask, &dir.path().join("a.pgm")).unwrap();
        let manifest = DatasetManifest {
            entries: vec![ManifestEntry {
                image_id: "a".into(),
                mask_path: "a.pgm".into(),
                region: "Bata".into(),
                description_path: None,
            }],
        };
        let mp = dir.path().join("manifest.json");
        manifest.save(&mp).unwrap();
        let loaded = DatasetManifest::load(&mp).unwrap();
        assert_eq!(loaded.entries[0].mask_path, dir.path().join("a.pgm"));

        let mut dup = manifest.clone();
        dup.entries.push(dup.entries[0].clone());
        dup.save(&mp).unwrap();
        assert!(DatasetManifest::load(&mp).is_err());

        let mut missing = manifest;
        missing.entries[0].mask_path = "gone.pgm".into();
        missing.save(&mp).unwrap();
        assert!(DatasetManifest::load(&mp).unwrap_err().is_io());
    }
}
