//! Content-addressed response cache on disk.
//!
//! Entries live at `<dir>/<namespace>/<key[..2]>/<key>.json` and are written
//! to a temporary file first, then renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::Value;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, namespace: &str, key: &str) -> PathBuf {
        self.dir.join(namespace).join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    /// Missing or unreadable entries are treated as misses.
    pub fn get(&self, namespace: &str, key: &str) -> Option<Value> {
        let bytes = fs::read(self.path(namespace, key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put(&self, namespace: &str, key: &str, value: &Value) -> std::io::Result<()> {
        let path = self.path(namespace, key);
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(value.to_string().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn put_then_get_and_replace() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path().to_path_buf());
        assert!(cache.get("ns", "abcdef").is_none());
        cache.put("ns", "abcdef", &json!({"text": "one"})).unwrap();
        assert_eq!(cache.get("ns", "abcdef").unwrap()["text"], "one");
        cache.put("ns", "abcdef", &json!({"text": "two"})).unwrap();
        assert_eq!(cache.get("ns", "abcdef").unwrap()["text"], "two");
        assert!(cache.get("other", "abcdef").is_none());
    }
}
