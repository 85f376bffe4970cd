//! Prompt-set files and the toy tokenizer.
//!
//! ```yaml
//! sets:
//!   - superclass: fantasy
//!     subject_token: dragon
//!     subject_description: A red dragon
//!     description_level: generic
//!     style: Origami style
//!     settings: [blowing bubbles, in a library]
//!     seed: 7
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::PromptSpec;
use crate::error::{Error, Result};
use crate::io::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Superclass {
    Humans,
    Animals,
    Fantasy,
    Inanimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionLevel {
    Generic,
    Detailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub superclass: Superclass,
    pub subject_token: String,
    pub subject_description: String,
    pub description_level: DescriptionLevel,
    pub style: String,
    pub settings: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSetFile {
    pub sets: Vec<PromptSet>,
}

/// Token id of one whitespace-separated word.
pub fn token_id(word: &str, vocab_size: usize) -> usize {
    (fnv1a64(word.to_lowercase().as_bytes()) % vocab_size as u64) as usize
}

/// Whitespace tokenization; every word whose lowercase form contains a
/// subject token becomes a position of that subject.
pub fn tokenize(text: &str, subject_tokens: &[&str], vocab_size: usize) -> Result<PromptSpec> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let mut subject_token_positions = Vec::with_capacity(subject_tokens.len());
    for tok in subject_tokens {
        let needle = tok.to_lowercase();
        let hits: Vec<usize> = if needle.is_empty() {
            Vec::new()
        } else {
            lower
                .iter()
                .enumerate()
                .filter(|(_, w)| w.contains(&needle))
                .map(|(i, _)| i)
                .collect()
        };
        if hits.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "subject token {tok:?} does not appear in {text:?}"
            )));
        }
        subject_token_positions.push(hits);
    }
    Ok(PromptSpec {
        text: text.to_string(),
        token_ids: words.iter().map(|w| token_id(w, vocab_size)).collect(),
        subject_token_positions,
    })
}

impl PromptSet {
    /// `"<style> <subject_description> <setting>"` for every setting.
    pub fn texts(&self) -> Vec<String> {
        self.settings
            .iter()
            .map(|s| format!("{} {} {}", self.style, self.subject_description, s))
            .collect()
    }

    pub fn prompts(&self, vocab_size: usize) -> Result<Vec<PromptSpec>> {
        self.texts()
            .iter()
            .map(|t| tokenize(t, &[self.subject_token.as_str()], vocab_size))
            .collect()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.settings.is_empty() {
            return Err("settings must not be empty".into());
        }
        if self.subject_token.split_whitespace().count() != 1 {
            return Err(format!("subject token {:?} must be a single word", self.subject_token));
        }
        for t in self.texts() {
            if !t.to_lowercase().contains(&self.subject_token.to_lowercase()) {
                return Err(format!("subject token {:?} absent from {t:?}", self.subject_token));
            }
        }
        Ok(())
    }
}

impl PromptSetFile {
    pub fn parse(text: &str) -> Result<Self> {
        let root: serde_yaml::Value = serde_yaml::from_str(text)?;
        let map = root
            .as_mapping()
            .ok_or_else(|| Error::Format("prompt file must be a mapping with a `sets` list".into()))?;
        if let Some(k) = map.keys().find(|k| k.as_str() != Some("sets")) {
            return Err(Error::Format(format!("unknown top-level key {k:?}")));
        }
        let raw = map
            .get("sets")
            .and_then(|v| v.as_sequence())
            .ok_or_else(|| Error::Format("prompt file needs a `sets` list".into()))?;
        let mut sets = Vec::with_capacity(raw.len());
        for (i, v) in raw.iter().enumerate() {
            let set: PromptSet = serde_yaml::from_value(v.clone()).map_err(|e| Error::PromptSet {
                set: i,
                message: e.to_string(),
            })?;
            set.check().map_err(|message| Error::PromptSet { set: i, message })?;
            sets.push(set);
        }
        if sets.is_empty() {
            return Err(Error::Format("prompt file has no sets".into()));
        }
        Ok(Self { sets })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
sets:
  - superclass: fantasy
    subject_token: dragon
    subject_description: A red dragon
    description_level: generic
    style: Origami style
    settings: [blowing bubbles, in a library]
    seed: 7
";

    #[test]
    fn composes_prompts() {
        let f = PromptSetFile::parse(SAMPLE).unwrap();
        let set = &f.sets[0];
        assert_eq!(set.texts()[0], "Origami style A red dragon blowing bubbles");
        let p = &set.prompts(1024).unwrap()[0];
        assert_eq!(p.token_ids.len(), 7);
        assert_eq!(p.subject_token_positions, vec![vec![4]]);
        let q = &set.prompts(1024).unwrap()[1];
        assert_eq!(p.token_ids[4], q.token_ids[4]);
    }

    #[test]
    fn missing_field_names_set() {
        let text = format!(
            "{}  - superclass: humans\n    subject_token: boy\n    subject_description: A boy\n    description_level: detailed\n    settings: [reading]\n    seed: 1\n",
            SAMPLE
        );
        match PromptSetFile::parse(&text) {
            Err(Error::PromptSet { set: 1, message }) => assert!(message.contains("style"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(PromptSetFile::parse(&SAMPLE.replace("fantasy", "robots")).is_err());
        assert!(PromptSetFile::parse(&SAMPLE.replace("subject_token: dragon", "subject_token: cat")).is_err());
        assert!(PromptSetFile::parse(&SAMPLE.replace("seed: 7", "seed: 7\n    extra: 1")).is_err());
        assert!(PromptSetFile::parse(&SAMPLE.replace("[blowing bubbles, in a library]", "[]")).is_err());
    }

    #[test]
    fn round_trip() {
        let f = PromptSetFile::parse(SAMPLE).unwrap();
        let again = PromptSetFile::parse(&f.to_yaml().unwrap()).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn tokenizer_is_stable() {
        assert_eq!(token_id("Dragon", 1024), token_id("dragon", 1024));
        assert!(token_id("anything", 10) < 10);
        let p = tokenize("a cat and a dog", &["cat", "dog"], 64).unwrap();
        assert_eq!(p.subject_token_positions, vec![vec![1], vec![4]]);
        assert!(tokenize("a cat", &["dog"], 64).is_err());
    }
}
