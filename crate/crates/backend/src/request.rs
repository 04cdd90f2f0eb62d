use std::sync::Arc;

use offemma_core::prompting::PromptBundle;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Tag hashed first into every request digest. Changing the digest layout
/// must change this tag.
pub const DIGEST_TAG: &str = "offemma-request-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub mime: String,
    pub bytes: Arc<[u8]>,
}

impl ImageAttachment {
    pub fn png(bytes: impl Into<Arc<[u8]>>) -> Self {
        Self {
            mime: "image/png".into(),
            bytes: bytes.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub model_id: String,
    pub prompt: PromptBundle,
    pub images: Vec<ImageAttachment>,
    pub temperature: f64,
    pub sample_index: u32,
    pub max_tokens: u32,
    /// Send the four stages as successive user turns instead of one message.
    pub multi_turn: bool,
    /// Human-readable name used in cache manifests; not part of the digest.
    pub label: String,
}

impl VlmRequest {
    pub fn with_sample(&self, sample_index: u32) -> Self {
        Self {
            sample_index,
            ..self.clone()
        }
    }

    /// Lowercase hex SHA-256 over the tag and every request field, each
    /// prefixed with its byte length as u64 little-endian. Numbers are hashed
    /// as little-endian bytes; `temperature` by its IEEE-754 bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(DIGEST_TAG.as_bytes());
        field(self.model_id.as_bytes());
        field(&self.prompt.canonical_bytes());
        field(&(self.images.len() as u64).to_le_bytes());
        for img in &self.images {
            field(img.mime.as_bytes());
            field(&img.bytes);
        }
        field(&self.temperature.to_bits().to_le_bytes());
        field(&self.sample_index.to_le_bytes());
        field(&self.max_tokens.to_le_bytes());
        field(&[self.multi_turn as u8]);
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
    Oracle,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Http => "http",
            BackendKind::Replay => "replay",
            BackendKind::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub text: String,
    pub latency_s: f64,
    pub backend: BackendKind,
    pub cache_hit: bool,
    /// Transport retries spent on this response.
    #[serde(default)]
    pub retries: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use offemma_core::prompting::PromptStage;

    pub(crate) fn request() -> VlmRequest {
        VlmRequest {
            model_id: "m".into(),
            prompt: PromptBundle {
                template_version: "v".into(),
                system_preamble: "sys".into(),
                stages: vec![PromptStage {
                    title: "Generate Motion".into(),
                    body: "go".into(),
                }],
                legend_text: String::new(),
                image_ref: "img.png".into(),
            },
            images: vec![ImageAttachment::png(vec![1u8, 2, 3])],
            temperature: 0.7,
            sample_index: 0,
            max_tokens: 512,
            multi_turn: false,
            label: "a".into(),
        }
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = request().digest();
        assert_eq!(d.len(), 64);
        assert!(d.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
        assert_eq!(d, request().digest());
    }

    #[test]
    fn digest_ignores_label_only() {
        let base = request();
        let digest = base.digest();
        let mut r = base.clone();
        r.label = "other".into();
        assert_eq!(r.digest(), digest);

        let variants: Vec<VlmRequest> = vec![
            VlmRequest {
                model_id: "m2".into(),
                ..base.clone()
            },
            VlmRequest {
                temperature: 0.70000001,
                ..base.clone()
            },
            base.with_sample(1),
            VlmRequest {
                images: vec![ImageAttachment::png(vec![1u8, 2, 4])],
                ..base.clone()
            },
            VlmRequest {
                images: vec![],
                ..base.clone()
            },
            VlmRequest {
                multi_turn: true,
                ..base.clone()
            },
            {
                let mut r = base.clone();
                r.prompt.stages[0].body.push('!');
                r
            },
        ];
        for v in variants {
            assert_ne!(v.digest(), digest, "{v:?}");
        }
    }

    #[test]
    fn length_prefix_prevents_field_shifting() {
        let mut a = request();
        a.model_id = "ab".into();
        a.prompt.template_version = "c".into();
        let mut b = request();
        b.model_id = "a".into();
        b.prompt.template_version = "bc".into();
        assert_ne!(a.digest(), b.digest());
    }
}

#[cfg(test)]
pub(crate) use tests::request as test_request;
