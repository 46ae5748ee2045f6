//! Raw image bytes per namespace, needed whenever image tokens are
//! recomputed. Optionally mirrored to `<dir>/<namespace hash>/<id>.img`.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use mpic_core::store::CacheKey;
use parking_lot::RwLock;

use crate::error::Result;

#[derive(Debug, Default)]
pub struct ImageLibrary {
    dir: Option<PathBuf>,
    images: RwLock<HashMap<(String, String), Arc<Vec<u8>>>>,
}

/// Hex content hash; the `cache_id` clients use to reference an image.
pub fn image_id(bytes: &[u8]) -> String {
    CacheKey::for_bytes(bytes, 0, "").cache_id()
}

impl ImageLibrary {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            images: RwLock::default(),
        }
    }

    fn path(&self, namespace: &str, id: &str) -> Option<PathBuf> {
        let ns = CacheKey::for_bytes(&[], 0, namespace).namespace_hash();
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{ns:016x}")).join(format!("{id}.img")))
    }

    /// Keeps `bytes` in memory and returns their id.
    pub fn insert(&self, namespace: &str, bytes: Vec<u8>) -> String {
        let id = image_id(&bytes);
        self.images
            .write()
            .insert((namespace.to_string(), id.clone()), Arc::new(bytes));
        id
    }

    /// Like [`insert`](Self::insert), and also writes the bytes to disk.
    pub fn persist(&self, namespace: &str, bytes: Vec<u8>) -> Result<String> {
        if let Some(path) = self.path(namespace, &image_id(&bytes)) {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, &bytes)?;
        }
        Ok(self.insert(namespace, bytes))
    }

    pub fn get(&self, namespace: &str, id: &str) -> Option<Arc<Vec<u8>>> {
        let slot = (namespace.to_string(), id.to_string());
        if let Some(b) = self.images.read().get(&slot) {
            return Some(b.clone());
        }
        let bytes = fs::read(self.path(namespace, id)?).ok()?;
        if image_id(&bytes) != id {
            return None;
        }
        let bytes = Arc::new(bytes);
        self.images.write().insert(slot, bytes.clone());
        Some(bytes)
    }

    pub fn remove(&self, namespace: &str, id: &str) -> bool {
        let in_memory = self
            .images
            .write()
            .remove(&(namespace.to_string(), id.to_string()))
            .is_some();
        let on_disk = self.path(namespace, id).is_some_and(|p| fs::remove_file(p).is_ok());
        in_memory || on_disk
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_and_disk_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let lib = ImageLibrary::new(Some(dir.path().to_path_buf()));
        let id = lib.persist("alice", b"pixels".to_vec()).unwrap();
        assert_eq!(id, image_id(b"pixels"));
        assert!(lib.get("bob", &id).is_none());

        let reopened = ImageLibrary::new(Some(dir.path().to_path_buf()));
        assert_eq!(reopened.get("alice", &id).unwrap().as_slice(), b"pixels");
        assert!(reopened.remove("alice", &id));
        assert!(ImageLibrary::new(Some(dir.path().to_path_buf())).get("alice", &id).is_none());
    }
}
