//! Transport-independent core of the infilling proxy: gateway decision,
//! prompt rendering and reuse estimation against a shadow prefix cache.

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::gateway::{GatewayDecision, GatewayError, InfillRequest, Outcome, SessionPool};
use crate::kv_cache::{CacheError, CacheTree};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Body of a `/v1/infill` response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillResponse {
    pub middle: String,
    pub outcome: Outcome,
    pub reused_token_estimate: usize,
}

/// Body sent to an external completion endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub decision: GatewayDecision,
    /// Rendered prompt with special-token display strings.
    pub prompt: String,
    pub prompt_tokens: usize,
    /// Prompt tokens an engine with the configured block prefix cache would
    /// not recompute.
    pub reused_token_estimate: usize,
}

pub struct InfillService {
    pool: SessionPool,
    cache: Mutex<CacheTree>,
    vocab: Vocabulary,
    session_limit: usize,
}

impl InfillService {
    pub fn new(vocab: Vocabulary, block_size: usize, capacity_tokens: usize, session_limit: usize) -> Result<Self, ServiceError> {
        Ok(Self {
            pool: SessionPool::new(),
            cache: Mutex::new(CacheTree::new(block_size, capacity_tokens)?),
            vocab,
            session_limit,
        })
    }

    pub fn from_config(config: &Config) -> Result<Self, ServiceError> {
        Self::new(
            config.vocabulary()?,
            config.block_size,
            config.cache_capacity_tokens,
            config.session_pool_limit,
        )
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn sessions(&self) -> usize {
        self.pool.len()
    }

    pub fn prepare(&self, req: &InfillRequest) -> Result<Prepared, ServiceError> {
        let decision = self.pool.handle_request(req, self.vocab.specials())?;
        let tokens = decision.encode(&self.vocab);
        let reused = {
            let mut cache = self.cache.lock();
            let mut lease = cache.match_prefix(&tokens);
            let reused = lease.matched_len();
            cache.insert(&mut lease, &tokens);
            cache.release(lease)?;
            reused
        };
        if self.pool.len() > self.session_limit {
            self.pool.evict_idle(self.session_limit);
        }
        let prompt = String::from_utf8(decision.layout.render(self.vocab.specials()))
            .expect("prompt built from UTF-8 parts");
        Ok(Prepared {
            decision,
            prompt,
            prompt_tokens: tokens.len(),
            reused_token_estimate: reused,
        })
    }
}
