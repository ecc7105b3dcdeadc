//! On-disk corpus layout: a `manifest.jsonl` plus one raw file per view.
//!
//! Raw image layout, all little-endian: `u32` magic, `u32` height, `u32`
//! width, `u32` channels, then `H*W*F` `f32` pixels in row-major HWC order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, ImageView, Sample, Split};
use crate::error::{Error, Result};

/// `"A3IM"` read as a little-endian `u32`.
pub const IMAGE_MAGIC: u32 = u32::from_le_bytes(*b"A3IM");

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    split: String,
    report: String,
    image_files: Vec<String>,
}

pub fn write_image(path: &Path, img: &ImageView) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.pixels.len() * 4);
    for v in [IMAGE_MAGIC, img.height as u32, img.width as u32, img.channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in &img.pixels {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageView> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    if word(0) != IMAGE_MAGIC {
        return Err(bad("bad magic"));
    }
    let (h, w, f) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(f))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() != 16 + n * 4 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", n * 4, bytes.len() - 16)));
    }
    let pixels = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    ImageView::new(h, w, f, pixels).map_err(|e| bad(&e.to_string()))
}

/// Writes `dir/manifest.jsonl` and `dir/images/<id>_v<k>.img`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut manifest = fs::File::create(dir.join(MANIFEST_NAME))?;
    for s in &corpus.samples {
        let mut files = Vec::with_capacity(s.images.len());
        for (k, img) in s.images.iter().enumerate() {
            let rel = format!("images/{}_v{k}.img", s.id);
            write_image(&dir.join(&rel), img)?;
            files.push(rel);
        }
        let line = ManifestLine {
            id: s.id.clone(),
            split: s.split.as_str().to_string(),
            report: s.report.clone(),
            image_files: files,
        };
        writeln!(manifest, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Loads a corpus from a directory holding `manifest.jsonl` or from the
/// manifest file itself. Image paths resolve relative to the manifest.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = manifest_path(path);
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = manifest.display().to_string();
    let file = fs::File::open(&manifest)?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            source_name: name.clone(),
            line: lineno,
            msg,
        };
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let split: Split = entry.split.parse().map_err(|e: Error| parse_err(e.to_string()))?;
        if entry.report.trim().is_empty() {
            return Err(parse_err(format!("sample {} has an empty report", entry.id)));
        }
        if entry.image_files.is_empty() || entry.image_files.len() > 2 {
            return Err(parse_err(format!("sample {} lists {} images; expected 1 or 2", entry.id, entry.image_files.len())));
        }
        let mut images = Vec::with_capacity(entry.image_files.len());
        for f in &entry.image_files {
            let p = base.join(f);
            if !p.is_file() {
                return Err(Error::Format(format!("sample {}: missing image file {}", entry.id, p.display())));
            }
            images.push(read_image(&p)?);
        }
        samples.push(Sample {
            id: entry.id,
            images,
            report: entry.report,
            split,
        });
    }
    Ok(Corpus { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, views: usize, split: Split) -> Sample {
        let img = ImageView::new(2, 3, 1, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        Sample {
            id: id.into(),
            images: vec![img; views],
            report: "the heart is normal.".into(),
            split,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus {
            samples: vec![sample("a", 1, Split::Train), sample("b", 2, Split::Test)],
        };
        save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.samples[1].images.len(), 2);
        assert_eq!(back.digest(), corpus.digest());
    }

    #[test]
    fn bad_split_tag_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus {
            samples: vec![sample("a", 1, Split::Train)],
        };
        save_corpus(&corpus, dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&m).unwrap();
        fs::write(&m, format!("{text}{}", text.replace("\"train\"", "\"holdout\""))).unwrap();
        match load_corpus(dir.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("holdout"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_NAME), "{not json\n").unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Parse { line: 1, .. })));

        fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"id":"x9","split":"val","report":"ok","image_files":["images/none.img"]}"#,
        )
        .unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x9"), "{err}");
    }

    #[test]
    fn image_header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.img");
        fs::write(&p, [0u8; 20]).unwrap();
        assert!(read_image(&p).is_err());
        let img = ImageView::new(1, 1, 1, vec![0.5]).unwrap();
        write_image(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"A3IM");
        assert_eq!(bytes.len(), 20);
        assert_eq!(read_image(&p).unwrap(), img);
    }
}
