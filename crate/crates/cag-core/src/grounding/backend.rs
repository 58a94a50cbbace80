//! VLM backends: a chat-completions HTTP client and a fixture stub.
//!
//! Both return the raw message content; parsing and validation are shared
//! and live in [`super::parse`]. The stub reads fixtures and performs no
//! network traffic, so alignment stays testable offline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompts::{render_bbox_prompt, render_word_prompt};
use super::GroundingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VlmMode {
    Remote,
    Stub,
}

/// A reference image on disk. Content digests key the grounding cache.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub path: PathBuf,
}

impl ImageRef {
    pub fn new(path: impl Into<PathBuf>) -> ImageRef {
        ImageRef { path: path.into() }
    }

    /// For tests and toy scenes where no file exists on disk.
    pub fn unchecked(path: impl Into<PathBuf>) -> ImageRef {
        ImageRef { path: path.into() }
    }

    pub fn bytes(&self) -> std::io::Result<Vec<u8>> {
        std::fs::read(&self.path)
    }

    /// Hex SHA-256 of the image bytes.
    pub fn digest(&self) -> std::io::Result<String> {
        let bytes = self.bytes()?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Backend interface for the two alignment subtasks.
pub trait VlmBackend: Sync {
    /// Raw response to the word-extraction prompt.
    fn words_response(&self, instruction: &str, images: &[ImageRef])
        -> Result<String, GroundingError>;
    /// Raw response to the localization prompt for one word.
    fn bbox_response(
        &self,
        word: &str,
        n_refs: usize,
        images: &[ImageRef],
    ) -> Result<String, GroundingError>;
    fn mode(&self) -> VlmMode;
}

// --- Remote chat-completions backend ----------------------------------------

/// Endpoint configuration; see `CAG_VLM_URL`, `CAG_VLM_MODEL`, `CAG_VLM_KEY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmEndpoint {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

impl VlmEndpoint {
    /// Applies `CAG_VLM_URL` / `CAG_VLM_MODEL` / `CAG_VLM_KEY` overrides.
    pub fn with_env_overrides(mut self) -> VlmEndpoint {
        if let Ok(url) = std::env::var("CAG_VLM_URL") {
            self.base_url = url;
        }
        if let Ok(model) = std::env::var("CAG_VLM_MODEL") {
            self.model = model;
        }
        if let Ok(key) = std::env::var("CAG_VLM_KEY") {
            self.api_key = Some(key);
        }
        self
    }
}

#[derive(Serialize)]
struct ContentPart {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage {
    role: &'static str,
    content: Vec<ContentPart>,
}

#[derive(Serialize)]
struct ChatRequest {
    model: String,
    messages: Vec<ChatMessage>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: MessageContent,
}

#[derive(Deserialize)]
struct MessageContent {
    content: String,
}

pub struct RemoteVlm {
    endpoint: VlmEndpoint,
    client: reqwest::blocking::Client,
}

impl RemoteVlm {
    pub fn new(endpoint: VlmEndpoint) -> Result<RemoteVlm, GroundingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| GroundingError::Transport(e.to_string()))?;
        Ok(RemoteVlm { endpoint, client })
    }

    fn complete(&self, prompt: String, images: &[ImageRef]) -> Result<String, GroundingError> {
        let mut content =
            vec![ContentPart { kind: "text", text: Some(prompt), image: None }];
        for image in images {
            let bytes = image.bytes()?;
            content.push(ContentPart {
                kind: "image",
                text: None,
                image: Some(base64_encode(&bytes)),
            });
        }
        let request = ChatRequest {
            model: self.endpoint.model.clone(),
            messages: vec![ChatMessage { role: "user", content }],
        };

        let url = format!("{}/v1/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(url).json(&request);
        if let Some(key) = &self.endpoint.api_key {
            builder = builder.header("Authorization", format!("Bearer {key}"));
        }
        let response =
            builder.send().map_err(|e| GroundingError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(GroundingError::Http { status: status.as_u16(), body });
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| GroundingError::Parse { reason: e.to_string(), raw: String::new() })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GroundingError::Parse {
                reason: "response has no choices".into(),
                raw: String::new(),
            })
    }
}

impl VlmBackend for RemoteVlm {
    fn words_response(
        &self,
        instruction: &str,
        images: &[ImageRef],
    ) -> Result<String, GroundingError> {
        let prompt = render_word_prompt(instruction, images.len())?;
        self.complete(prompt, images)
    }

    fn bbox_response(
        &self,
        word: &str,
        n_refs: usize,
        images: &[ImageRef],
    ) -> Result<String, GroundingError> {
        let prompt = render_bbox_prompt(word, n_refs)?;
        self.complete(prompt, images)
    }

    fn mode(&self) -> VlmMode {
        VlmMode::Remote
    }
}

// Minimal standard base64 (RFC 4648) for request payloads.
fn base64_encode(bytes: &[u8]) -> String {
    const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(ALPHABET[(n >> 18) as usize & 63] as char);
        out.push(ALPHABET[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { ALPHABET[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { ALPHABET[n as usize & 63] as char } else { '=' });
    }
    out
}

// --- Fixture stub ------------------------------------------------------------

/// Fixture payloads for the stub backend. The stub re-serializes them to
/// raw JSON strings so responses flow through the same parser as remote
/// output.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StubFixtures {
    /// Words the word-extraction call should return.
    pub words: Vec<String>,
    /// Per-word (reference id, bbox) the localization call should return.
    pub bboxes: BTreeMap<String, (i64, [f64; 4])>,
}

pub struct StubVlm {
    fixtures: StubFixtures,
}

impl StubVlm {
    pub fn new(fixtures: StubFixtures) -> StubVlm {
        StubVlm { fixtures }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<StubVlm, GroundingError> {
        let text = std::fs::read_to_string(path)?;
        Ok(StubVlm { fixtures: serde_json::from_str(&text)? })
    }
}

impl VlmBackend for StubVlm {
    fn words_response(
        &self,
        _instruction: &str,
        _images: &[ImageRef],
    ) -> Result<String, GroundingError> {
        Ok(serde_json::to_string(&self.fixtures.words).expect("fixture serializes"))
    }

    fn bbox_response(
        &self,
        word: &str,
        _n_refs: usize,
        _images: &[ImageRef],
    ) -> Result<String, GroundingError> {
        let key = word.to_lowercase();
        let (id, bbox) = self
            .fixtures
            .bboxes
            .get(&key)
            .ok_or_else(|| GroundingError::FixtureMissing(word.to_string()))?;
        Ok(format!(
            "{{\"id\": {id}, \"bbox\": [{}, {}, {}, {}]}}",
            bbox[0], bbox[1], bbox[2], bbox[3]
        ))
    }

    fn mode(&self) -> VlmMode {
        VlmMode::Stub
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base64_known_vectors() {
        assert_eq!(base64_encode(b""), "");
        assert_eq!(base64_encode(b"f"), "Zg==");
        assert_eq!(base64_encode(b"fo"), "Zm8=");
        assert_eq!(base64_encode(b"foo"), "Zm9v");
        assert_eq!(base64_encode(b"foobar"), "Zm9vYmFy");
    }

    #[test]
    fn stub_round_trips_through_the_parser() {
        let mut bboxes = BTreeMap::new();
        bboxes.insert("cat".to_string(), (1i64, [1.0, 2.0, 3.0, 4.0]));
        let stub = StubVlm::new(StubFixtures { words: vec!["cat".into()], bboxes });
        let words = super::super::parse_words_response(&stub.words_response("x", &[]).unwrap())
            .unwrap();
        assert_eq!(words, vec!["cat"]);
        let (id, bbox) =
            super::super::parse_bbox_response(&stub.bbox_response("cat", 2, &[]).unwrap()).unwrap();
        assert_eq!(id, 1);
        assert_eq!(bbox, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn stub_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.json");
        std::fs::write(
            &path,
            r#"{"words": ["cat"], "bboxes": {"cat": [0, [1, 2, 3, 4]]}}"#,
        )
        .unwrap();
        let stub = StubVlm::from_file(&path).unwrap();
        assert_eq!(stub.mode(), VlmMode::Stub);
        assert!(stub.bbox_response("cat", 1, &[]).is_ok());
        assert!(matches!(
            stub.bbox_response("dog", 1, &[]),
            Err(GroundingError::FixtureMissing(_))
        ));
    }

    #[test]
    fn image_digest_matches_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        std::fs::write(&path, b"abc").unwrap();
        let digest = ImageRef::new(&path).digest().unwrap();
        assert_eq!(digest, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
