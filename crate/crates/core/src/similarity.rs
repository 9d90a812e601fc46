//! Embedding similarity between prompts and a reference corpus, and the
//! correlation of that similarity with prompt scores.
//!
//! The offline embedder hashes each lowercased token (see
//! [`crate::bleu::tokenize`]) with 64-bit FNV-1a into one of 384 buckets,
//! counts occurrences and L2-normalizes the counts.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bleu::tokenize;
use crate::provider::{HttpTransport, ProviderError};

pub const OFFLINE_DIM: usize = 384;
pub const OFFLINE_PROVIDER_ID: &str = "offline-fnv1a-384";
pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-ada-002";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self, SimilarityError> {
        if values.is_empty() {
            return Err(SimilarityError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self {
            values,
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The vector multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * alpha).collect(),
            provider_id: self.provider_id.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("embedding has no components")]
    EmptyVector,
    #[error("embedding has non-finite components")]
    NonFinite,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("correlation is undefined for a constant series")]
    ConstantSeries,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("unexpected embedding response: {0}")]
    Decode(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, SimilarityError>;
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hashed bag-of-words embedder, deterministic and offline.
#[derive(Debug, Clone)]
pub struct OfflineEmbedder {
    dim: usize,
}

impl Default for OfflineEmbedder {
    fn default() -> Self {
        Self { dim: OFFLINE_DIM }
    }
}

impl OfflineEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    /// Bucket of a (lowercased) token.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl EmbeddingProvider for OfflineEmbedder {
    fn id(&self) -> &str {
        OFFLINE_PROVIDER_ID
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, SimilarityError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(SimilarityError::EmptyText);
        }
        let mut values = vec![0.0; self.dim];
        for t in tokens.tokens() {
            values[self.bucket(&t.to_lowercase())] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
        EmbeddingVector::new(values, OFFLINE_PROVIDER_ID)
    }
}

/// Remote embedder: POST `{base_url}/embeddings` with `{model, input}`, reading
/// `data[0].embedding`. Shares the completion client's retry and rate-limit
/// handling; responses are cached as one JSON file per text when a cache
/// directory is set.
pub struct HttpEmbedder {
    transport: HttpTransport,
    model: String,
    id: String,
    cache_dir: Option<PathBuf>,
}

impl HttpEmbedder {
    pub fn new(transport: HttpTransport, model: impl Into<String>, cache_dir: Option<PathBuf>) -> Self {
        let model = model.into();
        Self {
            transport,
            id: format!("http:{model}"),
            model,
            cache_dir,
        }
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let digest = Sha256::digest(serde_json::to_vec(&json!(["embedding", self.model, text])).ok()?);
        Some(dir.join(format!("emb-{}.json", hex::encode(digest))))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, SimilarityError> {
        if text.trim().is_empty() {
            return Err(SimilarityError::EmptyText);
        }
        let path = self.cache_path(text);
        if let Some(p) = &path {
            if let Ok(bytes) = std::fs::read(p) {
                match serde_json::from_slice::<EmbeddingVector>(&bytes) {
                    Ok(v) => return Ok(v),
                    Err(e) => log::warn!("corrupt embedding cache entry {}: {e}; replacing", p.display()),
                }
            }
        }
        let resp = self
            .transport
            .post_json("embeddings", &json!({ "model": self.model, "input": text }))?;
        let values: Vec<f64> = resp
            .body
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| SimilarityError::Decode("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| SimilarityError::Decode("non-numeric component".into())))
            .collect::<Result<_, _>>()?;
        let vector = EmbeddingVector::new(values, self.id.clone())?;
        if let (Some(p), Some(dir)) = (&path, &self.cache_dir) {
            let write = || -> std::io::Result<()> {
                std::fs::create_dir_all(dir)?;
                let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
                serde_json::to_writer(&mut tmp, &vector)?;
                tmp.persist(p).map_err(|e| e.error)?;
                Ok(())
            };
            if let Err(e) = write() {
                log::warn!("could not cache embedding: {e}");
            }
        }
        Ok(vector)
    }
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, SimilarityError> {
    if u.dim() != v.dim() {
        return Err(SimilarityError::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, SimilarityError> {
    if xs.len() != ys.len() {
        return Err(SimilarityError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(SimilarityError::TooFewPoints(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SimilarityError::ConstantSeries);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, SimilarityError> {
    if xs.len() != ys.len() {
        return Err(SimilarityError::LengthMismatch(xs.len(), ys.len()));
    }
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRecord {
    pub prompt_index: usize,
    pub max_similarity: f64,
    pub mean_similarity: f64,
    pub score: f64,
}

/// Max and mean cosine of each prompt against every corpus document.
pub fn similarity_report<E>(
    prompts: &[(String, f64)],
    corpus: &[String],
    provider: &E,
) -> Result<Vec<SimilarityRecord>, SimilarityError>
where
    E: EmbeddingProvider + ?Sized,
{
    if corpus.is_empty() {
        return Err(SimilarityError::EmptyCorpus);
    }
    let corpus_vecs = corpus.iter().map(|d| provider.embed(d)).collect::<Result<Vec<_>, _>>()?;
    prompts
        .iter()
        .enumerate()
        .map(|(i, (text, score))| {
            let v = provider.embed(text)?;
            let sims = corpus_vecs.iter().map(|c| cosine(&v, c)).collect::<Result<Vec<_>, _>>()?;
            Ok(SimilarityRecord {
                prompt_index: i,
                max_similarity: sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_similarity: sims.iter().sum::<f64>() / sims.len() as f64,
                score: *score,
            })
        })
        .collect()
}

/// CSV with columns `prompt_index, max_sim, mean_sim, score`.
pub fn write_similarity_csv<W: Write>(records: &[SimilarityRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt_index", "max_sim", "mean_sim", "score"])?;
    for r in records {
        w.write_record([
            r.prompt_index.to_string(),
            r.max_similarity.to_string(),
            r.mean_similarity.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON summary with the Pearson r (and Spearman rho) of score against max
/// and mean similarity. An undefined correlation is `null` with the reason
/// alongside.
pub fn similarity_summary(records: &[SimilarityRecord], provider_id: &str) -> Value {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let corr = |xs: Vec<f64>| match pearson(&xs, &scores) {
        Ok(r) => json!({ "r": r, "spearman": spearman(&xs, &scores).ok() }),
        Err(e) => json!({ "r": null, "reason": e.to_string() }),
    };
    json!({
        "prompts": records.len(),
        "embedder": provider_id,
        "pearson_max_similarity": corr(records.iter().map(|r| r.max_similarity).collect()),
        "pearson_mean_similarity": corr(records.iter().map(|r| r.mean_similarity).collect()),
    })
}
