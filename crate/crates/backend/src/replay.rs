use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use crate::cache::response_path;
use crate::{BackendError, BackendKind, VlmBackend, VlmRequest, VlmResponse};

/// Serves recorded responses from a fixture directory keyed by request
/// digest. A response counts as a cache hit once it has been served before.
#[derive(Debug)]
pub struct ReplayBackend {
    dir: PathBuf,
    served: Mutex<HashSet<String>>,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(BackendError::InvalidConfig(format!(
                "fixture directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Self {
            dir,
            served: Mutex::new(HashSet::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl VlmBackend for ReplayBackend {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        let start = Instant::now();
        let digest = request.digest();
        let path = response_path(&self.dir, &digest);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BackendError::FixtureMissing(digest));
            }
            Err(source) => return Err(BackendError::Io { path, source }),
        };
        if text.is_empty() {
            return Err(BackendError::EmptyReply);
        }
        let cache_hit = !self.served.lock().unwrap().insert(digest);
        Ok(VlmResponse {
            text,
            latency_s: start.elapsed().as_secs_f64(),
            backend: BackendKind::Replay,
            cache_hit,
            retries: 0,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::test_request;

    #[test]
    fn replays_fixture_and_marks_repeat_as_hit() {
        let dir = tempfile::tempdir().unwrap();
        let r = test_request();
        fs::write(response_path(dir.path(), &r.digest()), "[0.3, 0.0]").unwrap();
        let b = ReplayBackend::new(dir.path()).unwrap();
        let a = b.complete(&r).unwrap();
        let c = b.complete(&r).unwrap();
        assert_eq!(a.text, "[0.3, 0.0]");
        assert_eq!(a.backend, BackendKind::Replay);
        assert!(!a.cache_hit && c.cache_hit);
    }

    #[test]
    fn missing_fixture_names_digest() {
        let dir = tempfile::tempdir().unwrap();
        let r = test_request();
        match ReplayBackend::new(dir.path()).unwrap().complete(&r) {
            Err(BackendError::FixtureMissing(d)) => assert_eq!(d, r.digest()),
            other => panic!("{other:?}"),
        }
        assert!(ReplayBackend::new(dir.path().join("nope")).is_err());
    }
}
