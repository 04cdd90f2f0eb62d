//! Model backends behind one trait: a chat-completion HTTP client, a replay
//! backend over recorded responses, and a noisy oracle for offline runs.
//!
//! Request digests are SHA-256 over length-prefixed fields (see
//! [`VlmRequest::digest`]) so caches and fixtures are portable.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use thiserror::Error;

pub mod cache;
pub mod http;
pub mod oracle;
pub mod replay;
mod request;
pub mod stub;

pub use cache::{CachedBackend, ResponseCache};
pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use oracle::{oracle_respond, OracleBackend, OracleConfig};
pub use replay::ReplayBackend;
pub use request::{BackendKind, ImageAttachment, VlmRequest, VlmResponse, DIGEST_TAG};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("endpoint {endpoint} unreachable: {reason}")]
    EndpointUnreachable { endpoint: String, reason: String },
    #[error("endpoint returned status {0}")]
    BadStatus(u16),
    #[error("no recorded response for request digest {0}")]
    FixtureMissing(String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("backend returned an empty reply")]
    EmptyReply,
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub trait VlmBackend: Send + Sync {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError>;
    fn kind(&self) -> BackendKind;
}

impl<B: VlmBackend + ?Sized> VlmBackend for &B {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        (**self).complete(request)
    }
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

impl<B: VlmBackend + ?Sized> VlmBackend for Box<B> {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        (**self).complete(request)
    }
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

impl<B: VlmBackend + ?Sized> VlmBackend for std::sync::Arc<B> {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        (**self).complete(request)
    }
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

#[derive(Debug, Error)]
#[error("sample {index}: {error}")]
pub struct SampleError {
    pub index: u32,
    #[source]
    pub error: BackendError,
}

/// Requests samples `0..n` of `template`, at most `max_in_flight` at a time.
/// Results come back in sample order whatever order they complete in.
pub fn sample_n<B: VlmBackend + ?Sized>(
    backend: &B,
    template: &VlmRequest,
    n: usize,
    max_in_flight: usize,
) -> Vec<Result<VlmResponse, SampleError>> {
    let workers = max_in_flight.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<VlmResponse, SampleError>>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let index = i as u32;
                let result = backend
                    .complete(&template.with_sample(index))
                    .map_err(|error| SampleError { index, error });
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index is visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::response_path;
    use crate::request::test_request;
    use std::time::Duration;

    struct Jittery;

    impl VlmBackend for Jittery {
        fn complete(&self, r: &VlmRequest) -> Result<VlmResponse, BackendError> {
            // Later indices finish first.
            thread::sleep(Duration::from_millis(5 * (8 - r.sample_index as u64)));
            Ok(VlmResponse {
                text: format!("sample {}", r.sample_index),
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
    fn results_ordered_by_index() {
        let out = sample_n(&Jittery, &test_request(), 8, 8);
        let texts: Vec<String> = out.into_iter().map(|r| r.unwrap().text).collect();
        let want: Vec<String> = (0..8).map(|i| format!("sample {i}")).collect();
        assert_eq!(texts, want);
    }

    #[test]
    fn single_sample_matches_complete() {
        let r = test_request();
        let out = sample_n(&Jittery, &r, 1, 4);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].as_ref().unwrap().text, Jittery.complete(&r).unwrap().text);
    }

    fn fixture_dir(skip: Option<u32>) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let r = test_request();
        for i in 0..5 {
            if Some(i) != skip {
                std::fs::write(response_path(dir.path(), &r.with_sample(i).digest()), format!("fixture {i}")).unwrap();
            }
        }
        dir
    }

    #[test]
    fn replay_fixtures_in_index_order() {
        let dir = fixture_dir(None);
        let b = ReplayBackend::new(dir.path()).unwrap();
        let texts: Vec<String> = sample_n(&b, &test_request(), 5, 3)
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        assert_eq!(texts, ["fixture 0", "fixture 1", "fixture 2", "fixture 3", "fixture 4"]);
    }

    #[test]
    fn missing_fixture_reported_with_index() {
        let dir = fixture_dir(Some(3));
        let b = ReplayBackend::new(dir.path()).unwrap();
        let out = sample_n(&b, &test_request(), 5, 2);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 4);
        match &out[3] {
            Err(SampleError {
                index: 3,
                error: BackendError::FixtureMissing(d),
            }) => assert_eq!(*d, test_request().with_sample(3).digest()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oracle_sampling_is_repeatable() {
        let cfg = OracleConfig {
            speed_noise_std: 0.2,
            curvature_noise_std: 0.02,
            outlier_prob: 0.3,
            outlier_scale: 5.0,
            seed: 9,
            ..OracleConfig::exact(vec![
                offemma_core::kinematics::VcSample {
                    speed: 0.4,
                    curvature: 0.01
                };
                5
            ])
        };
        let b = OracleBackend::new(cfg).unwrap();
        let texts = |m| -> Vec<String> {
            sample_n(&b, &test_request(), 6, m)
                .into_iter()
                .map(|r| r.unwrap().text)
                .collect()
        };
        assert_eq!(texts(1), texts(6));
    }
}
