//! Content-addressed response store.
//!
//! On disk a cache directory holds one `<digest>.txt` file per response and
//! a `manifest.tsv` of `digest \t label` lines sorted by digest. The same
//! layout serves as a replay fixture directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use tracing::debug;

use crate::{BackendError, BackendKind, VlmBackend, VlmRequest, VlmResponse};

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn response_path(dir: &Path, digest: &str) -> PathBuf {
    dir.join(format!("{digest}.txt"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BackendError + '_ {
    move |source| BackendError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads `manifest.tsv`; a missing file is an empty manifest.
pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>, BackendError> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| match l.split_once('\t') {
            Some((d, label)) => (d.to_string(), label.to_string()),
            None => (l.to_string(), String::new()),
        })
        .collect())
}

#[derive(Debug, Default)]
struct Inner {
    memory: HashMap<String, String>,
    manifest: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let manifest = read_manifest(&dir)?;
        Ok(Self {
            dir: Some(dir),
            inner: Mutex::new(Inner {
                memory: HashMap::new(),
                manifest,
            }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, digest: &str) -> Result<Option<String>, BackendError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(t) = inner.memory.get(digest) {
            return Ok(Some(t.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = response_path(dir, digest);
        match fs::read_to_string(&path) {
            Ok(text) => {
                inner.memory.insert(digest.to_string(), text.clone());
                Ok(Some(text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn put(&self, digest: &str, label: &str, text: &str) -> Result<(), BackendError> {
        let mut inner = self.inner.lock().unwrap();
        inner.memory.insert(digest.to_string(), text.to_string());
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = response_path(dir, digest);
        let tmp = dir.join(format!(".{digest}.tmp"));
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        inner.manifest.insert(digest.to_string(), label.to_string());
        let mut out = String::new();
        for (d, l) in &inner.manifest {
            out.push_str(d);
            out.push('\t');
            out.push_str(l);
            out.push('\n');
        }
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, out).map_err(io_err(&mpath))
    }

    pub fn len(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        match &self.dir {
            Some(_) => inner.manifest.len().max(inner.memory.len()),
            None => inner.memory.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Wraps a backend so that repeated requests are answered from the cache.
/// Several wrappers may share one cache.
pub struct CachedBackend<B> {
    inner: B,
    cache: Arc<ResponseCache>,
}

impl<B: VlmBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: impl Into<Arc<ResponseCache>>) -> Self {
        Self {
            inner,
            cache: cache.into(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl<B: VlmBackend> VlmBackend for CachedBackend<B> {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        let digest = request.digest();
        let start = Instant::now();
        if let Some(text) = self.cache.get(&digest)? {
            debug!(%digest, "cache hit");
            return Ok(VlmResponse {
                text,
                latency_s: start.elapsed().as_secs_f64(),
                backend: self.inner.kind(),
                cache_hit: true,
                retries: 0,
            });
        }
        let resp = self.inner.complete(request)?;
        self.cache
            .put(&digest, &format!("{}#{}", request.label, request.sample_index), &resp.text)?;
        Ok(resp)
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::test_request;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);

    impl VlmBackend for Counting {
        fn complete(&self, r: &VlmRequest) -> Result<VlmResponse, BackendError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok(VlmResponse {
                text: format!("reply {n} to sample {}\n\u{e9}\r\n", r.sample_index),
                latency_s: 0.0,
                backend: BackendKind::Oracle,
                cache_hit: false,
                retries: 0,
            })
        }
        fn kind(&self) -> BackendKind {
            BackendKind::Oracle
        }
    }

    #[test]
    fn second_call_served_from_cache_verbatim() {
        let b = CachedBackend::new(Counting(AtomicUsize::new(0)), ResponseCache::in_memory());
        let r = test_request();
        let first = b.complete(&r).unwrap();
        let second = b.complete(&r).unwrap();
        assert!(!first.cache_hit && second.cache_hit);
        assert_eq!(first.text, second.text);
        assert_eq!(b.inner().0.load(Ordering::SeqCst), 1);
        let other = b.complete(&r.with_sample(1)).unwrap();
        assert!(!other.cache_hit);
    }

    #[test]
    fn directory_cache_persists_and_lists_sorted_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let r = test_request();
        let text = {
            let b = CachedBackend::new(Counting(AtomicUsize::new(0)), ResponseCache::with_dir(dir.path()).unwrap());
            let mut t = String::new();
            for i in (0..3).rev() {
                t = b.complete(&r.with_sample(i)).unwrap().text;
            }
            t
        };
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let digests: Vec<&str> = manifest.lines().map(|l| l.split('\t').next().unwrap()).collect();
        let mut sorted = digests.clone();
        sorted.sort();
        assert_eq!(digests, sorted);
        assert_eq!(digests.len(), 3);
        assert!(manifest.contains("\ta#2\n"));

        let fresh = CachedBackend::new(Counting(AtomicUsize::new(0)), ResponseCache::with_dir(dir.path()).unwrap());
        let again = fresh.complete(&r.with_sample(0)).unwrap();
        assert!(again.cache_hit);
        assert_eq!(again.text, text);
        assert_eq!(fresh.inner().0.load(Ordering::SeqCst), 0);
        assert_eq!(fs::read_to_string(response_path(dir.path(), &r.with_sample(0).digest())).unwrap(), text);
    }
}
