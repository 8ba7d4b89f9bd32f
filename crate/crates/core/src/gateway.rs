//! Chat-completion requests and the model backend boundary.
//!
//! Stages build a [`CompletionRequest`] and hand it to any [`ChatModel`].
//! Requests are identified by [`request_digest`], which is what replay
//! fixtures are keyed on.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::{CanonicalHasher, ContentHash};
use crate::model::Screenshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(Screenshot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![Part::Text(text.into())])
    }
}

/// Sampling settings of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub model_tag: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output: u32,
}

fn default_max_output() -> u32 {
    StageSettings::DEFAULT_MAX_OUTPUT
}

impl StageSettings {
    pub const DEFAULT_MAX_OUTPUT: u32 = 4096;

    pub fn new(model_tag: impl Into<String>) -> Self {
        Self {
            model_tag: model_tag.into(),
            temperature: 0.0,
            max_output: Self::DEFAULT_MAX_OUTPUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub model_tag: String,
    pub temperature: f64,
    pub max_output: u32,
}

impl CompletionRequest {
    pub fn new(stage: &StageSettings, messages: Vec<ChatMessage>) -> Result<Self, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages"));
        }
        if messages.iter().any(|m| m.parts.is_empty()) {
            return Err(GatewayError::InvalidRequest("message without parts"));
        }
        if stage.temperature.is_nan() || stage.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0"));
        }
        Ok(Self {
            messages,
            model_tag: stage.model_tag.clone(),
            temperature: stage.temperature,
            max_output: stage.max_output,
        })
    }

    pub fn digest(&self) -> ContentHash {
        request_digest(self)
    }

    /// A copy with `text` appended as a new user message.
    pub fn followed_by(&self, text: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.messages.push(ChatMessage::user_text(text));
        next
    }

    /// Concatenated text parts, for journal summaries and logs.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            for p in &m.parts {
                if let Part::Text(t) = p {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }
}

/// Content hash of a request.
///
/// Covers the model tag, temperature, output budget, message roles, text
/// parts and image content hashes. Image bytes enter only through their
/// digest.
pub fn request_digest(request: &CompletionRequest) -> ContentHash {
    request.shape().digest()
}

/// A request with images replaced by their content hashes. This is what
/// fixture journals store, and it hashes to the same digest as the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestShape {
    pub model_tag: String,
    pub temperature: f64,
    pub max_output: u32,
    pub messages: Vec<MessageShape>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageShape {
    pub role: Role,
    pub parts: Vec<PartShape>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartShape {
    Text(String),
    Image(ContentHash),
}

impl RequestShape {
    pub fn digest(&self) -> ContentHash {
        let mut h = CanonicalHasher::new("evolkit.request.v1");
        h.str(&self.model_tag)
            .f64(self.temperature)
            .u64(u64::from(self.max_output))
            .u64(self.messages.len() as u64);
        for m in &self.messages {
            h.str(m.role.as_str()).u64(m.parts.len() as u64);
            for p in &m.parts {
                match p {
                    PartShape::Text(t) => h.tag(b'T').str(t),
                    PartShape::Image(d) => h.tag(b'I').hash(d),
                };
            }
        }
        h.finish()
    }
}

impl CompletionRequest {
    pub fn shape(&self) -> RequestShape {
        RequestShape {
            model_tag: self.model_tag.clone(),
            temperature: self.temperature,
            max_output: self.max_output,
            messages: self
                .messages
                .iter()
                .map(|m| MessageShape {
                    role: m.role,
                    parts: m
                        .parts
                        .iter()
                        .map(|p| match p {
                            Part::Text(t) => PartShape::Text(t.clone()),
                            Part::Image(img) => PartShape::Image(img.digest()),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub text: String,
    pub request_digest: ContentHash,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("no fixture entry for request {digest}")]
    NoFixtureEntry { digest: ContentHash },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("output budget of {max_output} tokens exceeded")]
    BudgetExceeded { max_output: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
}

/// A chat-completion backend. Implementations must be safe to call from
/// several workers at once.
pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

impl<M: ChatModel + ?Sized> ChatModel for &M {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

impl<M: ChatModel + ?Sized> ChatModel for Box<M> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

impl<M: ChatModel + ?Sized> ChatModel for Arc<M> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

/// Serves responses from a digest-keyed fixture. A pure function of the
/// fixture contents and the request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayModel {
    entries: BTreeMap<ContentHash, String>,
}

impl ReplayModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry. The first response stored for a digest wins.
    pub fn insert(&mut self, digest: ContentHash, response: impl Into<String>) -> bool {
        use alloc::collections::btree_map::Entry;
        match self.entries.entry(digest) {
            Entry::Vacant(v) => {
                v.insert(response.into());
                true
            }
            Entry::Occupied(_) => false,
        }
    }

    pub fn insert_for(&mut self, request: &CompletionRequest, response: impl Into<String>) -> bool {
        self.insert(request_digest(request), response)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, digest: &ContentHash) -> Option<&str> {
        self.entries.get(digest).map(String::as_str)
    }
}

impl FromIterator<(ContentHash, String)> for ReplayModel {
    fn from_iter<I: IntoIterator<Item = (ContentHash, String)>>(iter: I) -> Self {
        let mut m = Self::new();
        for (d, r) in iter {
            m.insert(d, r);
        }
        m
    }
}

impl ChatModel for ReplayModel {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let digest = request_digest(request);
        match self.entries.get(&digest) {
            Some(text) => Ok(CompletionResult {
                text: text.clone(),
                request_digest: digest,
                backend: BackendKind::Replay,
            }),
            None => Err(GatewayError::NoFixtureEntry { digest }),
        }
    }
}
