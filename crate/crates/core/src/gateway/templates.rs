//! Prompt templates with named `{slot}` placeholders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::wire::Operation;
use crate::error::{Error, Result};

pub const ECR_DEFAULT: &str = "ecr.default";
pub const QAR_DEFAULT: &str = "qar.video";
pub const PAIRWISE_DEFAULT: &str = "rerank.pairwise";
pub const LISTWISE_DEFAULT: &str = "rerank.listwise";
pub const JUDGE_DEFAULT: &str = "judge.relevance";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub operation: Operation,
    pub text: String,
}

impl Template {
    /// Placeholder names in order of first appearance.
    pub fn slots(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    let name = &after[..close];
                    if !out.iter().any(|s| s == name) {
                        out.push(name.to_string());
                    }
                    rest = &after[close + 1..];
                }
                _ => rest = after,
            }
        }
        out
    }

    /// Single-pass substitution; slot values are never re-scanned.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    let name = &after[..close];
                    let value = slots.get(name).ok_or_else(|| {
                        Error::InvalidInput(format!("template slot `{name}` not provided"))
                    })?;
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    pub templates: BTreeMap<String, Template>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::defaults()
    }
}

impl TemplateRegistry {
    /// Built-in templates; `config/templates.toml` in the repository carries
    /// the same set for editing.
    pub fn defaults() -> Self {
        let t = |operation, text: &str| Template {
            operation,
            text: text.to_string(),
        };
        let templates = BTreeMap::from([
            (
                ECR_DEFAULT.to_string(),
                t(
                    Operation::GenerateEcr,
                    "{instruction}\nInput text: {content_text}\nMedia: {media_ref}\n\
                     Think step by step inside <think></think>, then write a one-paragraph summary.",
                ),
            ),
            (
                QAR_DEFAULT.to_string(),
                t(
                    Operation::RewriteQar,
                    "{instruction}\nQuery: {query_text_or_ecr}\nCandidate media: {media_ref}\n\
                     Existing reasoning: {candidate_ecr}\n\
                     Rewrite the reasoning so it states the details of the candidate that support or \
                     refute the query. Answer as <think>...</think> followed by a summary.",
                ),
            ),
            (
                PAIRWISE_DEFAULT.to_string(),
                t(
                    Operation::ScorePair,
                    "<Instruct>: {instruction}\n<Query>: {query_text_or_ecr}\n<Document>: {candidate_ecr}",
                ),
            ),
            (
                LISTWISE_DEFAULT.to_string(),
                t(
                    Operation::RankListwise,
                    "{instruction}\nQuery: {query_text_or_ecr}\nCandidates:\n{candidate_list}\n\
                     Rank all candidates from most to least relevant to the query. \
                     Output only the candidate numbers separated by commas.",
                ),
            ),
            (
                JUDGE_DEFAULT.to_string(),
                t(
                    Operation::ScorePair,
                    "{instruction}\nQuery: {query_text_or_ecr}\nCandidate: {candidate_ecr}\n\
                     Is the candidate relevant to the query? Answer yes or no.",
                ),
            ),
        ]);
        TemplateRegistry { templates }
    }

    pub fn get(&self, id: &str, operation: Operation) -> Result<&Template> {
        let t = self
            .templates
            .get(id)
            .ok_or_else(|| Error::Config(format!("template `{id}` is not registered")))?;
        if t.operation != operation {
            return Err(Error::Config(format!(
                "template `{id}` is for {:?}, not {:?}",
                t.operation, operation
            )));
        }
        Ok(t)
    }

    pub fn insert(&mut self, id: impl Into<String>, template: Template) {
        self.templates.insert(id.into(), template);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_and_render() {
        let reg = TemplateRegistry::defaults();
        let t = reg.get(PAIRWISE_DEFAULT, Operation::ScorePair).unwrap();
        assert_eq!(
            t.slots(),
            vec!["instruction", "query_text_or_ecr", "candidate_ecr"]
        );
        let slots = BTreeMap::from([
            ("instruction".to_string(), "I".to_string()),
            (
                "query_text_or_ecr".to_string(),
                "Q {candidate_ecr}".to_string(),
            ),
            ("candidate_ecr".to_string(), "D".to_string()),
        ]);
        assert_eq!(
            t.render(&slots).unwrap(),
            "<Instruct>: I\n<Query>: Q {candidate_ecr}\n<Document>: D"
        );
    }

    #[test]
    fn missing_slot_and_wrong_operation() {
        let reg = TemplateRegistry::defaults();
        let t = reg.get(LISTWISE_DEFAULT, Operation::RankListwise).unwrap();
        assert!(t.render(&BTreeMap::new()).is_err());
        assert!(reg.get(LISTWISE_DEFAULT, Operation::ScorePair).is_err());
        assert!(reg.get("nope", Operation::ScorePair).is_err());
    }
}
