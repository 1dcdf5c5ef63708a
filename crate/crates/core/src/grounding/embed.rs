//! Text → unit-vector embedding providers.

use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GroundingError;
use crate::kernel::norm;

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, GroundingError>;

    /// Identifies the provider and its settings; two embedders with equal
    /// fingerprints map text to the same vectors.
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingProvider {
    Local {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Http {
        endpoint: String,
        model: String,
        dim: usize,
        /// Name of the environment variable holding the bearer token.
        #[serde(default = "default_key_var")]
        api_key_env: String,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_key_var() -> String {
    "GROUNDCOMM_EMBED_API_KEY".to_string()
}

fn default_retries() -> u32 {
    3
}

impl EmbeddingProvider {
    pub fn local(dim: usize) -> Self {
        EmbeddingProvider::Local { dim, seed: 0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Local { dim, .. } | EmbeddingProvider::Http { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, GroundingError> {
        match self {
            EmbeddingProvider::Local { dim, seed } => Ok(Box::new(LocalHashEmbedder::new(*dim, *seed)?)),
            EmbeddingProvider::Http {
                endpoint,
                model,
                dim,
                api_key_env,
                retries,
            } => {
                let key = std::env::var(api_key_env).ok();
                let mut e = HttpEmbedder::new(endpoint.clone(), model.clone(), *dim, key)?;
                e.retries = *retries;
                Ok(Box::new(e))
            }
        }
    }
}

/// Bag-of-tokens embedder: each token maps to a fixed pseudo-random Gaussian
/// vector keyed by a hash of `(seed, token)`; a text is the normalized mean
/// of its token vectors.
#[derive(Clone, Debug)]
pub struct LocalHashEmbedder {
    dim: usize,
    seed: u64,
}

impl LocalHashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, GroundingError> {
        if dim == 0 {
            return Err(GroundingError::Invalid("embedding dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl Embedder for LocalHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GroundingError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(GroundingError::EmptyText);
        }
        let mut sum = vec![0.0; self.dim];
        for t in &tokens {
            for (s, v) in sum.iter_mut().zip(self.token_vector(t)) {
                *s += v;
            }
        }
        normalize(sum)
    }

    fn fingerprint(&self) -> String {
        format!("local-hash:d{}:s{}", self.dim, self.seed)
    }
}

/// Client for a JSON embedding endpoint: `POST {"input", "dimensions"}` →
/// `{"embedding": [...]}`. Responses are truncated or zero-padded to `dim`
/// and normalized.
#[derive(Clone, Debug)]
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    pub retries: u32,
    pub backoff: Duration,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: String, model: String, dim: usize, api_key: Option<String>) -> Result<Self, GroundingError> {
        if dim == 0 {
            return Err(GroundingError::Invalid("embedding dimension must be positive".into()));
        }
        Ok(Self {
            endpoint,
            model,
            dim,
            api_key,
            retries: 3,
            backoff: Duration::from_millis(200),
        })
    }

    fn request(&self, text: &str) -> Result<Vec<f64>, String> {
        let body = serde_json::json!({ "input": text, "dimensions": self.dim, "model": self.model });
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: EmbedResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(parsed.embedding)
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GroundingError> {
        if tokenize(text).is_empty() {
            return Err(GroundingError::EmptyText);
        }
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.request(text) {
                Ok(mut v) => {
                    v.resize(self.dim, 0.0);
                    return normalize(v);
                }
                Err(e) => last = e,
            }
        }
        Err(GroundingError::Provider {
            attempts: self.retries + 1,
            message: last,
        })
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:{}:d{}", self.endpoint, self.model, self.dim)
    }
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, GroundingError> {
    let n = norm(&v);
    if n == 0.0 || !n.is_finite() {
        return Err(GroundingError::Invalid("embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}
