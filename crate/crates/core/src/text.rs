// SPDX-License-Identifier: MIT OR Apache-2.0

//! Character tokenizer and the bundled text assets.

use serde::{Deserialize, Serialize};

use crate::error::{BridgeError, Result};

/// Fixed vocabulary: one token per 7-bit ASCII code point.
pub const VOCAB_SIZE: usize = 128;

const GENERAL_CORPUS: &str = include_str!("../assets/corpus_general.txt");
const INSTRUCT_CORPUS: &str = include_str!("../assets/corpus_instruct.txt");
const PROMPTS: &str = include_str!("../assets/prompts.tsv");

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(i, c)| {
            if c.is_ascii() {
                Ok(c as usize)
            } else {
                Err(BridgeError::Input(format!(
                    "character {c:?} at index {i} is outside the {VOCAB_SIZE}-symbol vocabulary"
                )))
            }
        })
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| {
            char::from_u32(t as u32)
                .filter(char::is_ascii)
                .unwrap_or('?')
        })
        .collect()
}

/// One line of the prompt corpus: a topic, its full prompt, and the
/// abbreviated part prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub domain: String,
    pub full: String,
    pub part: String,
}

/// Parses `<domain>\t<full prompt>\t<part prompt>` lines. Blank lines are skipped.
pub fn parse_prompts(text: &str) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [domain, full, part] = fields.as_slice() else {
            return Err(BridgeError::Input(format!(
                "prompt line {} has {} tab-separated fields, expected 3",
                lineno + 1,
                fields.len()
            )));
        };
        if full.is_empty() || part.is_empty() {
            return Err(BridgeError::Input(format!(
                "prompt line {} has an empty prompt",
                lineno + 1
            )));
        }
        out.push(PromptRecord {
            domain: domain.to_string(),
            full: full.to_string(),
            part: part.to_string(),
        });
    }
    Ok(out)
}

/// Mixed-register prose used to train the "general" model.
pub fn general_corpus() -> &'static str {
    GENERAL_CORPUS
}

/// Templated instruction/response text used to train the "instruct" model.
pub fn instruct_corpus() -> &'static str {
    INSTRUCT_CORPUS
}

/// The 60-line stock prompt corpus text.
pub fn stock_prompt_text() -> &'static str {
    PROMPTS
}

pub fn stock_prompts() -> Vec<PromptRecord> {
    parse_prompts(PROMPTS).expect("bundled prompt corpus is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_ascii() {
        let s = "Explain photosynthesis.\n";
        assert_eq!(decode(&encode(s).unwrap()), s);
        assert!(encode("naïve").is_err());
    }

    #[test]
    fn prompt_parsing() {
        let p = parse_prompts("ml\tExplain ML.\tml\n\nqc\tWhat is QC?\tqc\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].full, "What is QC?");
        assert!(parse_prompts("only\ttwo").is_err());
    }

    #[test]
    fn bundled_assets() {
        let prompts = stock_prompts();
        assert_eq!(prompts.len(), 60);
        let mut domains: Vec<&str> = prompts.iter().map(|p| p.domain.as_str()).collect();
        domains.dedup();
        assert_eq!(domains.len(), 5);
        for p in &prompts {
            encode(&p.full).unwrap();
            encode(&p.part).unwrap();
        }
        encode(general_corpus()).unwrap();
        encode(instruct_corpus()).unwrap();
    }
}
