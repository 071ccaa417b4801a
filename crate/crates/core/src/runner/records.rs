//! Append-only line-delimited record files.
//!
//! Layout: a header line, one JSON record per line, then a footer holding
//! the record count and the SHA-256 of every byte before it. A file without
//! a footer is unsealed and may be resumed; a torn last line is dropped on
//! reopen.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::hash::Hash;
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub kind: String,
    pub run_id: String,
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footer {
    pub records: usize,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: Header,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FooterLine {
    footer: Footer,
}

/// Contents of a record file.
#[derive(Debug, Clone)]
pub struct RecordFile<T> {
    pub header: Header,
    pub records: Vec<T>,
    pub sealed: bool,
}

fn integrity(path: &Path, msg: impl std::fmt::Display) -> RunError {
    RunError::Integrity(format!("{}: {msg}", path.display()))
}

fn io(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("record serializes");
    s.push('\n');
    s
}

struct Scan<T> {
    header: Header,
    records: Vec<T>,
    footer: Option<Footer>,
    /// Byte length of the valid prefix (header plus complete records).
    valid_len: u64,
    torn: bool,
}

fn scan<T: DeserializeOwned>(path: &Path, resumable: bool) -> Result<Scan<T>, RunError> {
    let file = File::open(path).map_err(|e| io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut line = String::new();
    let mut offset = 0u64;
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    let mut footer = None;
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if footer.is_some() {
            return Err(integrity(path, "data after footer"));
        }
        let complete = line.ends_with('\n');
        let Some(head) = &header else {
            let parsed: HeaderLine = serde_json::from_str(line.trim_end())
                .map_err(|e| integrity(path, format!("bad header: {e}")))?;
            if !complete {
                return Err(integrity(path, "torn header"));
            }
            header = Some(parsed.header);
            hasher.update(line.as_bytes());
            offset += n as u64;
            continue;
        };
        if let Ok(f) = serde_json::from_str::<FooterLine>(line.trim_end()) {
            let digest = hex::encode(hasher.clone().finalize());
            if f.footer.sha256 != digest {
                return Err(integrity(path, "content hash does not match footer"));
            }
            if f.footer.records != records.len() {
                return Err(integrity(path, format!("footer counts {} records, found {}", f.footer.records, records.len())));
            }
            footer = Some(f.footer);
            offset += n as u64;
            continue;
        } else {
            match serde_json::from_str::<T>(line.trim_end()) {
                Ok(r) if complete => records.push(r),
                Ok(_) | Err(_) if resumable && !complete => {
                    return Ok(Scan { header: head.clone(), records, footer, valid_len: offset, torn: true });
                }
                Ok(_) => return Err(integrity(path, format!("line {lineno} is not newline-terminated"))),
                Err(e) => return Err(integrity(path, format!("line {lineno}: {e}"))),
            }
        }
        hasher.update(line.as_bytes());
        offset += n as u64;
    }
    let header = header.ok_or_else(|| integrity(path, "empty file"))?;
    Ok(Scan { header, records, footer, valid_len: offset, torn: false })
}

/// Reads and verifies a record file.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<RecordFile<T>, RunError> {
    let s = scan(path, false)?;
    Ok(RecordFile { header: s.header, records: s.records, sealed: s.footer.is_some() })
}

/// Reads a possibly interrupted file, ignoring a torn final line.
pub fn read_lenient<T: DeserializeOwned>(path: &Path) -> Result<RecordFile<T>, RunError> {
    let s = scan(path, true)?;
    Ok(RecordFile { header: s.header, records: s.records, sealed: s.footer.is_some() })
}

/// Reads a record file if it exists.
pub fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Option<RecordFile<T>>, RunError> {
    if path.exists() {
        read_records(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Single writer for one record file.
pub struct RecordWriter {
    path: PathBuf,
    file: File,
    hasher: Sha256,
    count: usize,
}

pub enum Opened<T> {
    /// Already sealed; contents are complete.
    Sealed(Vec<T>),
    /// Open for appending; holds the records already present.
    Open(RecordWriter, Vec<T>),
}

impl RecordWriter {
    /// Opens `path` for appending, creating it with `header` if missing.
    /// An existing file must carry the same header.
    pub fn open<T: DeserializeOwned>(path: &Path, header: &Header) -> Result<Opened<T>, RunError> {
        let empty = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if empty {
            let mut file = OpenOptions::new().create(true).truncate(true).write(true).open(path).map_err(|e| io(path, e))?;
            let line = json_line(&HeaderLine { header: header.clone() });
            file.write_all(line.as_bytes()).map_err(|e| io(path, e))?;
            file.sync_data().map_err(|e| io(path, e))?;
            let mut hasher = Sha256::new();
            hasher.update(line.as_bytes());
            return Ok(Opened::Open(RecordWriter { path: path.to_path_buf(), file, hasher, count: 0 }, Vec::new()));
        }
        let s = scan::<T>(path, true)?;
        if &s.header != header {
            return Err(integrity(path, "header does not match this run"));
        }
        if s.footer.is_some() {
            return Ok(Opened::Sealed(s.records));
        }
        let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(|e| io(path, e))?;
        if s.torn {
            log::warn!("{}: dropping torn final line", path.display());
        }
        file.set_len(s.valid_len).map_err(|e| io(path, e))?;
        file.seek(SeekFrom::Start(s.valid_len)).map_err(|e| io(path, e))?;
        let mut hasher = Sha256::new();
        let mut prefix = String::new();
        let mut reader = BufReader::new(File::open(path).map_err(|e| io(path, e))?);
        loop {
            prefix.clear();
            if reader.read_line(&mut prefix).map_err(|e| io(path, e))? == 0 {
                break;
            }
            hasher.update(prefix.as_bytes());
        }
        let count = s.records.len();
        Ok(Opened::Open(RecordWriter { path: path.to_path_buf(), file, hasher, count }, s.records))
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), RunError> {
        let line = json_line(record);
        self.file.write_all(line.as_bytes()).map_err(|e| io(&self.path, e))?;
        self.hasher.update(line.as_bytes());
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Writes the footer; the file is complete afterwards.
    pub fn seal(mut self) -> Result<(), RunError> {
        let footer = Footer { records: self.count, sha256: hex::encode(self.hasher.finalize()) };
        self.file.write_all(json_line(&FooterLine { footer }).as_bytes()).map_err(|e| io(&self.path, e))?;
        self.file.sync_all().map_err(|e| io(&self.path, e))
    }
}

/// Appends records with keys not yet present, counting toward a stop budget.
pub struct Filler<'a, K> {
    pub writer: &'a mut RecordWriter,
    pub done: HashSet<K>,
    pub budget: &'a mut Option<usize>,
}

impl<K: Eq + Hash> Filler<'_, K> {
    pub fn push<T: Serialize>(&mut self, key: K, record: &T) -> Result<(), RunError> {
        if self.done.contains(&key) {
            return Ok(());
        }
        if let Some(left) = self.budget.as_mut() {
            if *left == 0 {
                return Err(RunError::Interrupted);
            }
            *left -= 1;
        }
        self.writer.append(record)?;
        self.done.insert(key);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Header {
        Header { schema: SCHEMA_VERSION, kind: "test".into(), run_id: "r".into(), manifest: "m".into() }
    }

    fn open(path: &Path) -> (RecordWriter, Vec<u32>) {
        match RecordWriter::open::<u32>(path, &header()).unwrap() {
            Opened::Open(w, r) => (w, r),
            Opened::Sealed(_) => panic!("sealed"),
        }
    }

    #[test]
    fn round_trip_and_seal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let (mut w, existing) = open(&path);
        assert!(existing.is_empty());
        for i in 0..5u32 {
            w.append(&i).unwrap();
        }
        w.seal().unwrap();
        let f = read_records::<u32>(&path).unwrap();
        assert!(f.sealed);
        assert_eq!(f.records, vec![0, 1, 2, 3, 4]);
        assert!(matches!(RecordWriter::open::<u32>(&path, &header()).unwrap(), Opened::Sealed(_)));
    }

    #[test]
    fn torn_tail_is_dropped_and_resume_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.jsonl");
        let (mut w, _) = open(&full);
        for i in 0..6u32 {
            w.append(&(i * 1000)).unwrap();
        }
        w.seal().unwrap();

        let part = dir.path().join("part.jsonl");
        let (mut w, _) = open(&part);
        for i in 0..3u32 {
            w.append(&(i * 1000)).unwrap();
        }
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&part).unwrap();
        f.write_all(b"30").unwrap();
        drop(f);
        assert!(read_records::<u32>(&part).is_err());
        let (mut w, existing) = open(&part);
        assert_eq!(existing, vec![0, 1000, 2000]);
        for i in 3..6u32 {
            w.append(&(i * 1000)).unwrap();
        }
        w.seal().unwrap();
        assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let (mut w, _) = open(&path);
        w.append(&7u32).unwrap();
        w.seal().unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\n7\n", "\n8\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_records::<u32>(&path), Err(RunError::Integrity(_))));
        let other = Header { run_id: "other".into(), ..header() };
        assert!(RecordWriter::open::<u32>(&path, &other).is_err());
    }
}
