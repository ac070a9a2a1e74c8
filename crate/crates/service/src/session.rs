use std::time::{SystemTime, UNIX_EPOCH};

use empathy_core::backbone::BackboneBundle;
use empathy_core::corpus::{serialize_context, Polarity, Role, Turn};
use empathy_core::decoder::{generate, predict_polarity, DecodingConfig};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    User,
    Bot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub text: String,
    /// Predicted speaker polarity; set on user turns once answered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: String,
    pub turns: Vec<ChatTurn>,
    pub decoding: DecodingConfig,
    /// Unix time in milliseconds.
    pub created_at: u64,
}

impl ChatSession {
    pub fn new(id: String, decoding: DecodingConfig) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        ChatSession {
            id,
            turns: Vec::new(),
            decoding,
            created_at,
        }
    }

    /// The dialogue so far in the training-time format: the user is the
    /// speaker and the bot the listener.
    pub fn context(&self) -> String {
        let turns: Vec<Turn> = self
            .turns
            .iter()
            .map(|t| Turn {
                role: match t.role {
                    ChatRole::User => Role::Speaker,
                    ChatRole::Bot => Role::Listener,
                },
                text: t.text.clone(),
            })
            .collect();
        serialize_context(&turns)
    }
}

/// Partial decoding settings supplied when creating a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingOverrides {
    pub top_p: Option<f64>,
    pub top_k: Option<usize>,
    pub max_length: Option<usize>,
    pub seed: Option<u64>,
    pub length_penalty: Option<f64>,
    pub num_candidates: Option<usize>,
    pub temperature: Option<f64>,
}

impl DecodingOverrides {
    pub fn apply(&self, base: &DecodingConfig) -> Result<DecodingConfig, ServiceError> {
        let mut cfg = base.clone();
        if let Some(v) = self.top_p {
            cfg.top_p = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.max_length {
            cfg.max_length = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.length_penalty {
            cfg.length_penalty = v;
        }
        if let Some(v) = self.num_candidates {
            cfg.num_candidates = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        cfg.validate().map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub polarity: Polarity,
    pub confidence: f64,
    pub session_id: String,
    /// Index of the bot turn in the transcript.
    pub turn_index: usize,
}

/// Produces replies for a dialogue context.
pub trait Responder: Send + Sync {
    /// Identity of the loaded model, reported by the health endpoint.
    fn checkpoint(&self) -> &str;
    fn predict_polarity(&self, context: &str) -> empathy_core::Result<(Polarity, f64)>;
    fn generate(&self, context: &str, decoding: &DecodingConfig) -> empathy_core::Result<String>;
}

pub struct BundleResponder {
    bundle: BackboneBundle,
    name: String,
}

impl BundleResponder {
    pub fn new(bundle: BackboneBundle, name: impl Into<String>) -> Self {
        BundleResponder {
            bundle,
            name: name.into(),
        }
    }

    pub fn bundle(&self) -> &BackboneBundle {
        &self.bundle
    }
}

impl Responder for BundleResponder {
    fn checkpoint(&self) -> &str {
        &self.name
    }

    fn predict_polarity(&self, context: &str) -> empathy_core::Result<(Polarity, f64)> {
        predict_polarity(&self.bundle, context)
    }

    fn generate(&self, context: &str, decoding: &DecodingConfig) -> empathy_core::Result<String> {
        Ok(generate(&self.bundle, context, decoding)?.text)
    }
}

/// Appends the user message, annotates it with the predicted polarity of
/// the accumulated context and appends the generated reply. The session is
/// left unchanged on failure.
pub fn exchange(responder: &dyn Responder, session: &mut ChatSession, text: &str) -> Result<ChatReply, ServiceError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ServiceError::InvalidRequest("message text is empty".into()));
    }
    session.turns.push(ChatTurn {
        role: ChatRole::User,
        text: text.to_string(),
        polarity: None,
        confidence: None,
    });
    let context = session.context();
    // Each turn draws from its own stream so repeated messages still vary.
    let decoding = DecodingConfig {
        seed: session.decoding.seed.wrapping_add(session.turns.len() as u64),
        ..session.decoding.clone()
    };
    let result = responder
        .predict_polarity(&context)
        .and_then(|p| responder.generate(&context, &decoding).map(|reply| (p, reply)));
    let ((polarity, confidence), reply) = match result {
        Ok(r) => r,
        Err(e) => {
            session.turns.pop();
            return Err(ServiceError::Generation(e.to_string()));
        }
    };
    if let Some(user) = session.turns.last_mut() {
        user.polarity = Some(polarity);
        user.confidence = Some(confidence);
    }
    session.turns.push(ChatTurn {
        role: ChatRole::Bot,
        text: reply.clone(),
        polarity: None,
        confidence: None,
    });
    Ok(ChatReply {
        text: reply,
        polarity,
        confidence,
        session_id: session.id.clone(),
        turn_index: session.turns.len() - 1,
    })
}
