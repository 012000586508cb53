//! Prompt catalog and deterministic prompt embedding.
//!
//! The catalog holds state phrases ("without flaw", ...) and physical-state
//! templates ("a bright photo of a {}.") that render into the prompt pools
//! used for conditioning, prompt selection, and text scoring. The embedding
//! is a seeded feature-hashing scheme over word n-grams: deterministic,
//! unit-norm, and distinct across the shipped catalog — which is all the
//! conditioning pathway needs.

use crate::error::{Error, Result};
use crate::util::hash_bytes_u64;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Embedding width shared by prompt conditioning and text scoring.
pub const EMBED_DIM: usize = 64;

const HASH_SALT: &str = "padkit-prompt-embed-v1";

/// Which side of the normal/abnormal split to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Normal,
    Abnormal,
}

/// State words and templates for one object category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCatalog {
    pub object_name: String,
    pub normal_states: Vec<String>,
    pub abnormal_states: Vec<String>,
    pub physical_templates: Vec<String>,
}

impl PromptCatalog {
    pub fn new(
        object_name: impl Into<String>,
        normal_states: Vec<String>,
        abnormal_states: Vec<String>,
        physical_templates: Vec<String>,
    ) -> Result<Self> {
        let catalog = Self {
            object_name: object_name.into(),
            normal_states,
            abnormal_states,
            physical_templates,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    /// The default catalog: three per-polarity state phrases and ten
    /// physical-state templates.
    pub fn builtin(object_name: &str) -> Self {
        let catalog = Self {
            object_name: object_name.to_string(),
            normal_states: vec![
                "without flaw".into(),
                "without defect".into(),
                "without damage".into(),
            ],
            abnormal_states: vec![
                "with flaw".into(),
                "with defect".into(),
                "with damage".into(),
            ],
            physical_templates: vec![
                "a photo of a small {}.".into(),
                "a photo of a large {}.".into(),
                "a bright photo of a {}.".into(),
                "a dark photo of a {}.".into(),
                "a blurry photo of a {}.".into(),
                "a bad photo of a {}.".into(),
                "a good photo of a {}.".into(),
                "a cropped photo of a {}.".into(),
                "a close-up photo of a {}.".into(),
                "a low resolution photo of a {}.".into(),
            ],
        };
        catalog.validate().expect("builtin catalog is valid");
        catalog
    }

    fn validate(&self) -> Result<()> {
        if self.object_name.trim().is_empty() {
            return Err(Error::InvalidParameter {
                name: "object_name",
                reason: "must be non-empty".into(),
            });
        }
        if self.normal_states.is_empty() || self.abnormal_states.is_empty() {
            return Err(Error::EmptyInput("catalog state list"));
        }
        if self.physical_templates.is_empty() {
            return Err(Error::EmptyInput("catalog template list"));
        }
        for t in &self.physical_templates {
            if t.matches("{}").count() != 1 {
                return Err(Error::InvalidParameter {
                    name: "physical_templates",
                    reason: format!("template `{t}` must contain the placeholder {{}} exactly once"),
                });
            }
        }
        for (list, name) in [
            (&self.normal_states, "normal_states"),
            (&self.abnormal_states, "abnormal_states"),
        ] {
            if list.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::InvalidParameter {
                    name: "states",
                    reason: format!("{name} contains an empty phrase"),
                });
            }
        }
        // No duplicate rendered prompts.
        for polarity in [Polarity::Normal, Polarity::Abnormal] {
            let rendered = self.render_unchecked(polarity);
            let mut sorted = rendered.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != rendered.len() {
                return Err(Error::InvalidParameter {
                    name: "catalog",
                    reason: "duplicate rendered prompts".into(),
                });
            }
        }
        Ok(())
    }

    fn render_unchecked(&self, polarity: Polarity) -> Vec<String> {
        let states = match polarity {
            Polarity::Normal => &self.normal_states,
            Polarity::Abnormal => &self.abnormal_states,
        };
        let mut out = Vec::with_capacity(states.len() * self.physical_templates.len());
        for state in states {
            for template in &self.physical_templates {
                let subject = format!("{} {}", self.object_name, state);
                out.push(template.replacen("{}", &subject, 1));
            }
        }
        out
    }

    /// Cross product of state phrases and physical templates, in stable
    /// (state-major) order.
    pub fn render_prompts(&self, polarity: Polarity) -> Vec<String> {
        self.render_unchecked(polarity)
    }

    /// The candidate pool for one-to-normal personalization: each normal
    /// state phrase rendered with the plain template.
    pub fn personalization_prompts(&self) -> Vec<String> {
        self.normal_states
            .iter()
            .map(|state| format!("a photo of a {} {}.", self.object_name, state))
            .collect()
    }

    /// The canonical demonstration prompt used during customization.
    pub fn customization_prompt(&self) -> String {
        format!("a photo of normal {}", self.object_name)
    }

    /// The class-generic prompt used for base-model training and the prior
    /// preservation set.
    pub fn class_generic_prompt() -> String {
        "a photo of an object".to_string()
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            what: "catalog",
            reason: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let catalog: PromptCatalog = toml::from_str(&text).map_err(|e| Error::Format {
            what: "catalog",
            reason: e.to_string(),
        })?;
        catalog.validate()?;
        Ok(catalog)
    }
}

/// A prompt mapped to a fixed-width unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    vector: Vec<f64>,
    source_prompt: String,
}

impl ConditionEmbedding {
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn source_prompt(&self) -> &str {
        &self.source_prompt
    }
}

/// Embed a prompt as a unit vector of width [`EMBED_DIM`].
pub fn embed_prompt(text: &str) -> Result<ConditionEmbedding> {
    embed_prompt_dim(text, EMBED_DIM)
}

/// Embed a prompt at an explicit width. Hashed word unigrams and bigrams are
/// signed-bucketed into the vector, which is then L2-normalized.
pub fn embed_prompt_dim(text: &str, dim: usize) -> Result<ConditionEmbedding> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("prompt text"));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter {
            name: "dim",
            reason: "embedding width must be positive".into(),
        });
    }
    let words: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    let mut grams: Vec<String> = words.clone();
    for pair in words.windows(2) {
        grams.push(format!("{} {}", pair[0], pair[1]));
    }
    if grams.is_empty() {
        return Err(Error::EmptyInput("prompt text"));
    }

    let mut vector = vec![0.0_f64; dim];
    for gram in &grams {
        let h = hash_bytes_u64(format!("{HASH_SALT}\u{1f}{gram}").as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        vector[bucket] += sign;
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // All n-gram signs cancelled; fall back to a single deterministic axis.
        let h = hash_bytes_u64(text.as_bytes());
        vector[(h % dim as u64) as usize] = 1.0;
    } else {
        for v in &mut vector {
            *v /= norm;
        }
    }
    Ok(ConditionEmbedding {
        vector,
        source_prompt: text.to_string(),
    })
}

/// Hash of the embedding scheme, recorded in checkpoints so models are never
/// driven with embeddings from a different table.
pub fn embed_table_hash(dim: usize) -> String {
    crate::util::hash_bytes_hex(format!("{HASH_SALT}\u{1f}dim={dim}").as_bytes())
}
