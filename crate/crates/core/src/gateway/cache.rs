//! Content-addressed disk cache of raw completions.
//!
//! Layout under the cache root:
//!
//! ```text
//! objects/<h[0..2]>/<h>.txt    completion text, named by its SHA-256
//! index/<key[0..2]>/<key>.json {content_hash, provider_tag, instance_id, sample_index}
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so
//! concurrent writers never expose a partial entry. Reads verify the content
//! hash, so an entry torn by a crash reads as a miss and is rewritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub content_hash: String,
    pub provider_tag: String,
    pub instance_id: String,
    pub sample_index: u32,
}

#[derive(Debug)]
pub struct DiskCache {
    root: PathBuf,
    counter: AtomicU64,
}

impl DiskCache {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("index"))?;
        Ok(Self {
            root,
            counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self, key: &str) -> PathBuf {
        self.root
            .join("index")
            .join(&key[..2])
            .join(format!("{key}.json"))
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root
            .join("objects")
            .join(&hash[..2])
            .join(format!("{hash}.txt"))
    }

    /// Cached text for `key`, if present and intact.
    pub fn get(&self, key: &str) -> std::io::Result<Option<String>> {
        let idx = match fs::read(self.index_path(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let Ok(entry) = serde_json::from_slice::<IndexEntry>(&idx) else {
            return Ok(None);
        };
        match fs::read_to_string(self.object_path(&entry.content_hash)) {
            Ok(text) if sha256_hex(&[text.as_bytes()]) == entry.content_hash => Ok(Some(text)),
            Ok(_) => Ok(None),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(
        &self,
        key: &str,
        provider_tag: &str,
        instance_id: &str,
        sample_index: u32,
        text: &str,
    ) -> std::io::Result<()> {
        let hash = sha256_hex(&[text.as_bytes()]);
        let obj = self.object_path(&hash);
        let intact = fs::read(&obj).is_ok_and(|b| b == text.as_bytes());
        if !intact {
            self.write_atomic(&obj, text.as_bytes())?;
        }
        let entry = IndexEntry {
            content_hash: hash,
            provider_tag: provider_tag.to_string(),
            instance_id: instance_id.to_string(),
            sample_index,
        };
        let json = serde_json::to_vec_pretty(&entry).map_err(std::io::Error::other)?;
        self.write_atomic(&self.index_path(key), &json)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        let dir = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(dir)?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(
            ".tmp-{}-{n}-{}",
            std::process::id(),
            path.file_name().and_then(|s| s.to_str()).unwrap_or("entry")
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
        }
        fs::rename(&tmp, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let key = sha256_hex(&[b"k"]);
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, "mock", "id", 0, "1. a\n2. b\n").unwrap();
        assert_eq!(cache.get(&key).unwrap().as_deref(), Some("1. a\n2. b\n"));
        // reopened cache sees the same entry
        let again = DiskCache::open(dir.path()).unwrap();
        assert_eq!(again.get(&key).unwrap().as_deref(), Some("1. a\n2. b\n"));
    }

    #[test]
    fn identical_content_is_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        cache
            .put(&sha256_hex(&[b"a"]), "t", "i", 0, "same")
            .unwrap();
        cache
            .put(&sha256_hex(&[b"b"]), "t", "i", 1, "same")
            .unwrap();
        let objects: usize = fs::read_dir(dir.path().join("objects"))
            .unwrap()
            .map(|d| fs::read_dir(d.unwrap().path()).unwrap().count())
            .sum();
        assert_eq!(objects, 1);
    }

    #[test]
    fn corrupted_object_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let key = sha256_hex(&[b"k"]);
        cache.put(&key, "t", "i", 0, "hello").unwrap();
        let obj = cache.object_path(&sha256_hex(&[b"hello"]));
        fs::write(obj, "tampered").unwrap();
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, "t", "i", 0, "hello").unwrap();
        assert_eq!(cache.get(&key).unwrap().as_deref(), Some("hello"));
    }

    #[test]
    fn concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let key = sha256_hex(&[b"shared"]);
        std::thread::scope(|s| {
            for i in 0..8 {
                let cache = &cache;
                let key = &key;
                s.spawn(move || cache.put(key, "t", "i", i, "payload").unwrap());
            }
        });
        assert_eq!(cache.get(&key).unwrap().as_deref(), Some("payload"));
        let leftovers = fs::read_dir(dir.path().join("index").join(&key[..2]))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with(".tmp")
            })
            .count();
        assert_eq!(leftovers, 0);
    }
}
