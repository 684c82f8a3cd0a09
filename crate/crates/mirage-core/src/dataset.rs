//! Persistent dataset formats.
//!
//! Everything is line-delimited: one JSON object per line for samples,
//! responses, and preference records; tab-separated lines for ground
//! truth annotations. Writers are atomic (temp file + rename) and take
//! an advisory `flock` on a sidecar lock file. See FORMATS.md at the
//! repository root for field-by-field documentation.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::os::unix::io::AsRawFd;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GroundTruthAnnotation;

/// Version stamp embedded in every preference record.
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// An input awaiting a generated description: `(image, prompt)` with no
/// ground-truth response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnannotatedSample {
    pub sample_id: String,
    pub image_ref: String,
    pub prompt: String,
}

/// A generated response for a sample; the unit the co-occurrence graph
/// and the injector consume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub sample_id: String,
    pub image_ref: String,
    pub prompt: String,
    pub text: String,
}

/// One preference pair with its injection provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub sample_id: String,
    pub image_ref: String,
    pub prompt: String,
    pub preferred_text: String,
    pub dispreferred_text: String,
    /// 1-based sentence indices that were replaced, ascending.
    pub replace_indices: Vec<usize>,
    pub hallucinated_objects: Vec<String>,
    pub template_ids: Vec<usize>,
    pub iteration: u32,
    pub rho: f64,
    pub pipeline_version: String,
}

impl PreferenceRecord {
    /// The schema invariant: the three injection vectors are parallel
    /// and non-empty.
    pub fn validate(&self) -> Result<()> {
        let n = self.replace_indices.len();
        if n == 0 || self.hallucinated_objects.len() != n || self.template_ids.len() != n {
            return Err(Error::Invariant(format!(
                "record {id:?}: replace_indices/hallucinated_objects/template_ids must have equal non-zero lengths ({} / {} / {})",
                n,
                self.hallucinated_objects.len(),
                self.template_ids.len(),
                id = self.sample_id,
            )));
        }
        Ok(())
    }
}

/// Lossy export row for external preference trainers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenRejectedRecord {
    pub prompt: String,
    pub image_ref: String,
    pub chosen: String,
    pub rejected: String,
}

/// Takes an exclusive advisory lock (released on drop) and writes the
/// file atomically: content goes to a temp file in the same directory,
/// which is renamed over the target only after `write` succeeds.
pub fn atomic_write<F>(path: impl AsRef<Path>, write: F) -> Result<()>
where
    F: FnOnce(&mut File) -> std::io::Result<()>,
{
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let _lock = PathLock::acquire(path)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.as_file_mut().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Advisory per-path write lock backed by `flock` on `<path>.lock`.
struct PathLock {
    file: File,
}

impl PathLock {
    fn acquire(target: &Path) -> Result<Self> {
        let lock_path = {
            let mut os = target.as_os_str().to_owned();
            os.push(".lock");
            std::path::PathBuf::from(os)
        };
        let file = File::create(&lock_path).map_err(|e| Error::io(&lock_path, e))?;
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
        if rc != 0 {
            return Err(Error::io(&lock_path, std::io::Error::last_os_error()));
        }
        Ok(PathLock { file })
    }
}

impl Drop for PathLock {
    fn drop(&mut self) {
        unsafe {
            libc::flock(self.file.as_raw_fd(), libc::LOCK_UN);
        }
    }
}

fn read_jsonl<T, FId>(path: &Path, id_of: FId) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    FId: Fn(&T) -> &str,
{
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let id = id_of(&record).to_string();
        if let Some(first) = seen.insert(id.clone(), i + 1) {
            return Err(Error::DuplicateId {
                id,
                first_line: first,
                second_line: i + 1,
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<usize> {
    let mut lines = Vec::with_capacity(records.len());
    for record in records {
        lines.push(serde_json::to_string(record).map_err(|e| {
            Error::Invariant(format!("record failed to serialize: {e}"))
        })?);
    }
    atomic_write(path, |f| {
        for line in &lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    })?;
    Ok(records.len())
}

pub fn read_unannotated(path: impl AsRef<Path>) -> Result<Vec<UnannotatedSample>> {
    read_jsonl(path.as_ref(), |r: &UnannotatedSample| &r.sample_id)
}

pub fn write_unannotated(records: &[UnannotatedSample], path: impl AsRef<Path>) -> Result<usize> {
    write_jsonl(records, path.as_ref())
}

pub fn read_responses(path: impl AsRef<Path>) -> Result<Vec<ResponseRecord>> {
    read_jsonl(path.as_ref(), |r: &ResponseRecord| &r.sample_id)
}

pub fn write_responses(records: &[ResponseRecord], path: impl AsRef<Path>) -> Result<usize> {
    write_jsonl(records, path.as_ref())
}

pub fn read_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>> {
    let records = read_jsonl(path.as_ref(), |r: &PreferenceRecord| &r.sample_id)?;
    for record in &records {
        record.validate()?;
    }
    Ok(records)
}

/// Writes preference records, validating invariants before any bytes
/// reach disk.
pub fn write_preferences(records: &[PreferenceRecord], path: impl AsRef<Path>) -> Result<usize> {
    for record in records {
        record.validate()?;
    }
    write_jsonl(records, path.as_ref())
}

/// Reads `sample_id<TAB>tag,tag,...` annotation lines.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<GroundTruthAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, tags) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `sample_id<TAB>tag,tag,...`"))?;
        if let Some(first) = seen.insert(id.to_string(), i + 1) {
            return Err(Error::DuplicateId {
                id: id.to_string(),
                first_line: first,
                second_line: i + 1,
            });
        }
        let present_tags = tags
            .split(',')
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        records.push(GroundTruthAnnotation {
            sample_id: id.to_string(),
            present_tags,
        });
    }
    Ok(records)
}

pub fn write_annotations(records: &[GroundTruthAnnotation], path: impl AsRef<Path>) -> Result<usize> {
    atomic_write(path.as_ref(), |f| {
        for record in records {
            let tags: Vec<&str> = record.present_tags.iter().map(String::as_str).collect();
            writeln!(f, "{}\t{}", record.sample_id, tags.join(","))?;
        }
        Ok(())
    })?;
    Ok(records.len())
}

/// Exports `(prompt, image_ref, chosen, rejected)` lines for external
/// trainers. Injection metadata is dropped; this export is one-way.
pub fn export_training_format(
    records: &[PreferenceRecord],
    path: impl AsRef<Path>,
) -> Result<usize> {
    let rows: Vec<ChosenRejectedRecord> = records
        .iter()
        .map(|r| ChosenRejectedRecord {
            prompt: r.prompt.clone(),
            image_ref: r.image_ref.clone(),
            chosen: r.preferred_text.clone(),
            rejected: r.dispreferred_text.clone(),
        })
        .collect();
    write_jsonl(&rows, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> PreferenceRecord {
        PreferenceRecord {
            sample_id: id.to_string(),
            image_ref: format!("img/{id}.jpg"),
            prompt: "Describe the image.".to_string(),
            preferred_text: "A dog runs. It barks.".to_string(),
            dispreferred_text: "A dog runs. There is a table.".to_string(),
            replace_indices: vec![2],
            hallucinated_objects: vec!["table".to_string()],
            template_ids: vec![1],
            iteration: 1,
            rho: 0.2,
            pipeline_version: PIPELINE_VERSION.to_string(),
        }
    }

    #[test]
    fn empty_file_reads_as_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_preferences(&path).unwrap().is_empty());
    }

    #[test]
    fn zero_records_write_an_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        assert_eq!(write_preferences(&[], &path).unwrap(), 0);
        assert_eq!(std::fs::read(&path).unwrap(), b"");
    }

    #[test]
    fn duplicate_ids_name_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let a = serde_json::to_string(&record("x")).unwrap();
        std::fs::write(&path, format!("{a}\n{a}\n")).unwrap();
        match read_preferences(&path) {
            Err(Error::DuplicateId {
                id,
                first_line,
                second_line,
            }) => {
                assert_eq!(id, "x");
                assert_eq!((first_line, second_line), (1, 2));
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut bad = record("x");
        bad.hallucinated_objects.clear();
        assert!(matches!(
            write_preferences(&[bad], &path),
            Err(Error::Invariant(_))
        ));
        assert!(!path.exists());
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let records: Vec<PreferenceRecord> = (0..50)
            .map(|i| {
                let mut r = record(&format!("s{i}"));
                r.preferred_text = format!("Sentence {i} über\nzwei Zeilen. 猫もいる。 End.");
                r.rho = 0.2 + (i as f64) * 0.01;
                r
            })
            .collect();
        write_preferences(&records, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let reread = read_preferences(&path).unwrap();
        assert_eq!(reread, records);
        let path2 = dir.path().join("b.jsonl");
        write_preferences(&reread, &path2).unwrap();
        assert_eq!(bytes, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn atomic_write_failure_leaves_previous_file_intact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        std::fs::write(&path, "original").unwrap();
        let result = atomic_write(&path, |f| {
            f.write_all(b"partial")?;
            Err(std::io::Error::other("simulated crash before rename"))
        });
        assert!(result.is_err());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "original");
        // No stray temp files once the writer is gone.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn annotations_roundtrip_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.tsv");
        std::fs::write(&path, "s1\tdog,frisbee\ns2\t\n").unwrap();
        let anns = read_annotations(&path).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].present_tags.len(), 2);
        assert!(anns[1].present_tags.is_empty());
        write_annotations(&anns, &path).unwrap();
        let again = read_annotations(&path).unwrap();
        assert_eq!(anns, again);

        std::fs::write(&path, "s1\tdog\ns1\tcat\n").unwrap();
        assert!(matches!(read_annotations(&path), Err(Error::DuplicateId { .. })));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arbitrary_record() -> impl Strategy<Value = PreferenceRecord> {
            (
                "[a-z0-9-]{1,12}",
                any::<String>(),
                any::<String>(),
                any::<String>(),
                any::<String>(),
                1..4usize,
                1..=3u32,
                0.01..=1.0f64,
            )
                .prop_map(
                    |(id, image_ref, prompt, preferred, dispreferred, n, iteration, rho)| {
                        PreferenceRecord {
                            sample_id: id,
                            image_ref,
                            prompt,
                            preferred_text: preferred,
                            dispreferred_text: dispreferred,
                            replace_indices: (2..2 + n).collect(),
                            hallucinated_objects: (0..n).map(|k| format!("o{k}")).collect(),
                            template_ids: (0..n).collect(),
                            iteration,
                            rho,
                            pipeline_version: PIPELINE_VERSION.to_string(),
                        }
                    },
                )
        }

        proptest! {
            #[test]
            fn write_read_is_identity(mut records in proptest::collection::vec(arbitrary_record(), 0..20)) {
                for (i, record) in records.iter_mut().enumerate() {
                    record.sample_id = format!("{}-{i}", record.sample_id);
                }
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("prop.jsonl");
                write_preferences(&records, &path).unwrap();
                let reread = read_preferences(&path).unwrap();
                prop_assert_eq!(&reread, &records);
                let again = dir.path().join("again.jsonl");
                write_preferences(&reread, &again).unwrap();
                prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
            }
        }
    }

    #[test]
    fn export_writes_chosen_rejected_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.jsonl");
        let n = export_training_format(&[record("s1")], &path).unwrap();
        assert_eq!(n, 1);
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(value["chosen"], "A dog runs. It barks.");
        assert_eq!(value["rejected"], "A dog runs. There is a table.");
        assert!(value.get("replace_indices").is_none());
    }
}
