//! Compositional prompt pool.
//!
//! Prompts pair a subject token with motion and background phrases drawn
//! from the synthetic world, so the pool is a pure function of grammar and
//! seed and never looks at reference images.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::text;
use crate::world::{BackgroundId, MotionId};

/// Reserved subject token for the personalized identity.
pub const KEYWORD: &str = "V";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub subject_token: String,
    pub motion_id: MotionId,
    pub background_id: BackgroundId,
    /// Pooled text embedding, width `text::DEFAULT_TEXT_WIDTH`.
    pub embedding: Vec<f64>,
}

impl PromptSpec {
    pub fn new(
        subject: &str,
        modifier: &str,
        motion_id: MotionId,
        background_id: BackgroundId,
    ) -> PromptSpec {
        let text = if modifier.is_empty() {
            format!("{subject} {} {}", motion_id.phrase(), background_id.phrase())
        } else {
            format!("{subject} {modifier} {} {}", motion_id.phrase(), background_id.phrase())
        };
        let embedding = text::pooled_embedding(&text, text::DEFAULT_TEXT_WIDTH);
        PromptSpec { text, subject_token: subject.to_string(), motion_id, background_id, embedding }
    }

    pub fn keyword_count(&self) -> usize {
        text::tokenize(&self.text).iter().filter(|t| *t == &self.subject_token).count()
    }
}

/// Prompt for a rendered corpus video, addressed by the identity's token.
pub fn corpus_prompt(subject_token: &str, motion: MotionId, background: BackgroundId) -> PromptSpec {
    PromptSpec::new(subject_token, "", motion, background)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub subject: String,
    pub motions: Vec<MotionId>,
    pub backgrounds: Vec<BackgroundId>,
    pub modifiers: Vec<String>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            subject: KEYWORD.to_string(),
            motions: MotionId::all().to_vec(),
            backgrounds: BackgroundId::all().to_vec(),
            modifiers: ["", "gently", "quickly", "slowly", "smoothly"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl GrammarConfig {
    pub fn combinations(&self) -> usize {
        self.motions.len() * self.backgrounds.len() * self.modifiers.len().max(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPool {
    pub prompts: Vec<PromptSpec>,
    pub seed: u64,
}

pub const DEFAULT_POOL_SIZE: usize = 50;

/// Deterministic pool of distinct prompts. The first motions x backgrounds
/// entries cover every combination, so default-sized pools span the grammar.
pub fn build_prompt_pool(size: usize, grammar: &GrammarConfig, seed: u64) -> Result<PromptPool> {
    if size < 1 {
        return Err(Error::invalid("pool size must be at least 1"));
    }
    if grammar.motions.len() < 2 || grammar.backgrounds.len() < 2 {
        return Err(Error::invalid("grammar needs at least 2 motions and 2 backgrounds"));
    }
    if grammar.combinations() < size {
        return Err(Error::invalid(format!(
            "grammar yields {} distinct prompts, {} requested",
            grammar.combinations(),
            size
        )));
    }
    let modifiers =
        if grammar.modifiers.is_empty() { vec![String::new()] } else { grammar.modifiers.clone() };

    let mut rng = rng::stream(seed, "prompt-pool", 0);
    let mut prompts = Vec::with_capacity(size);
    for (tier, modifier) in modifiers.iter().enumerate() {
        let mut combos: Vec<(MotionId, BackgroundId)> = grammar
            .motions
            .iter()
            .flat_map(|m| grammar.backgrounds.iter().map(move |b| (*m, *b)))
            .collect();
        combos.shuffle(&mut rng);
        for (m, b) in combos {
            if prompts.len() >= size {
                break;
            }
            prompts.push(PromptSpec::new(&grammar.subject, modifier, m, b));
        }
        let _ = tier;
        if prompts.len() >= size {
            break;
        }
    }
    Ok(PromptPool { prompts, seed })
}

pub fn sample_prompt<'a>(pool: &'a PromptPool, rng: &mut ChaCha8Rng) -> Result<&'a PromptSpec> {
    if pool.prompts.is_empty() {
        return Err(Error::invalid("empty prompt pool"));
    }
    Ok(&pool.prompts[rng.random_range(0..pool.prompts.len())])
}
