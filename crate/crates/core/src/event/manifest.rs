//! Dataset manifest: one `id=… rgb=… egray=… label=…` line per sample.
//!
//! Paths are stored as written (typically relative to the manifest's own
//! directory); labels come last so they may contain `=` but not whitespace —
//! the recognizer charset never needs it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::EventError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub egray: PathBuf,
    pub label: String,
}

fn field<'a>(part: Option<&'a str>, key: &str, line_no: usize) -> Result<&'a str, EventError> {
    let part = part.ok_or_else(|| EventError::Parse {
        line: line_no,
        reason: format!("missing `{key}=` field"),
    })?;
    part.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| EventError::Parse {
            line: line_no,
            reason: format!("expected `{key}=…`, got `{part}`"),
        })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, EventError> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = field(parts.next(), "id", line_no)?.to_string();
        let rgb = PathBuf::from(field(parts.next(), "rgb", line_no)?);
        let egray = PathBuf::from(field(parts.next(), "egray", line_no)?);
        let label = field(parts.next(), "label", line_no)?.to_string();
        if label.is_empty() {
            return Err(EventError::Parse {
                line: line_no,
                reason: "empty label".into(),
            });
        }
        if let Some(extra) = parts.next() {
            return Err(EventError::Parse {
                line: line_no,
                reason: format!("unexpected trailing field `{extra}`"),
            });
        }
        entries.push(ManifestEntry { id, rgb, egray, label });
    }
    if entries.is_empty() {
        return Err(EventError::Validation(format!(
            "manifest {} lists no samples",
            path.display()
        )));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), EventError> {
    let mut out = String::new();
    for e in entries {
        writeln!(
            out,
            "id={} rgb={} egray={} label={}",
            e.id,
            e.rgb.display(),
            e.egray.display(),
            e.label
        )
        .expect("string write cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("manifest-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trips_entries() {
        let entries = vec![
            ManifestEntry {
                id: "train-000".into(),
                rgb: "img/train-000.ppm".into(),
                egray: "img/train-000.pgm".into(),
                label: "K156+400".into(),
            },
            ManifestEntry {
                id: "train-001".into(),
                rgb: "img/train-001.ppm".into(),
                egray: "img/train-001.pgm".into(),
                label: "73".into(),
            },
        ];
        let path = tmp("roundtrip.txt");
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let path = tmp("comments.txt");
        std::fs::write(
            &path,
            "# header\n\nid=a rgb=a.ppm egray=a.pgm label=12\n",
        )
        .unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].label, "12");
    }

    #[test]
    fn reports_malformed_lines_by_number() {
        let path = tmp("bad.txt");
        std::fs::write(
            &path,
            "id=a rgb=a.ppm egray=a.pgm label=12\nid=b rgb=b.ppm label=9\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        match err {
            EventError::Parse { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("egray"), "reason: {reason}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn rejects_empty_manifest() {
        let path = tmp("empty.txt");
        std::fs::write(&path, "# nothing\n").unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(EventError::Validation(_))
        ));
    }
}
