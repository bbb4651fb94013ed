//! Decomposition of composite instructions into an action, a source object
//! and an ordered list of (referent, predicate) pairs.

mod embed;
#[cfg(feature = "http")]
mod http;
mod grammar;
mod llm;

pub use embed::{cosine, embed_text, fnv1a64, tokenize, D_TXT};
pub use grammar::{
    canonical_predicate, parse_expression, parse_grammar, ACTION_VERBS, DIRECTIONAL_PREDICATES,
    INSTRUCTION_PREDICATES, SELF_SOURCE,
};
#[cfg(feature = "http")]
pub use http::HttpTransport;
pub use llm::{
    parse_llm, reply_for, request_hash, ChatMessage, ChatRequest, ChatTransport, LlmClient,
    LlmClientConfig, ReplayRecord, ReplayTransport, PROMPT_TEMPLATE, PROMPT_VERSION,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One referring expression in text form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationText {
    pub referent: String,
    pub predicate: String,
}

impl RelationText {
    pub fn new(referent: impl Into<String>, predicate: impl Into<String>) -> Self {
        Self { referent: referent.into(), predicate: predicate.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    /// The verb, or empty for a bare relation phrase.
    pub action: String,
    /// The moved object, or [`SELF_SOURCE`] when the agent itself moves.
    pub source: String,
    pub targets: Vec<RelationText>,
}

/// A referring expression carried as embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTuple {
    pub ref_text: String,
    pub pred_text: String,
    pub f_ref: Vec<f64>,
    pub f_pred: Vec<f64>,
}

impl RelationTuple {
    pub fn from_text(rel: &RelationText) -> Result<Self> {
        Ok(Self {
            ref_text: rel.referent.clone(),
            pred_text: rel.predicate.clone(),
            f_ref: embed_text(&rel.referent)?,
            f_pred: embed_text(&rel.predicate)?,
        })
    }
}

pub fn to_relation_tuples(parsed: &ParsedInstruction) -> Result<Vec<RelationTuple>> {
    if parsed.targets.is_empty() {
        return Err(Error::Domain("instruction has no referring expressions".into()));
    }
    parsed.targets.iter().map(RelationTuple::from_text).collect()
}

/// The skill whose embedding is most similar to the action; ties keep the
/// earliest skill.
pub fn normalize_action(action: &str, skill_set: &[&str]) -> Result<String> {
    if skill_set.is_empty() {
        return Err(Error::Domain("skill set is empty".into()));
    }
    let a = embed_text(action)?;
    let mut best: Option<(&str, f64)> = None;
    for &skill in skill_set {
        let c = cosine(&a, &embed_text(skill)?);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((skill, c));
        }
    }
    Ok(best.map(|(s, _)| s.to_string()).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_action_cases() {
        assert_eq!(normalize_action("put", &["move", "put"]).unwrap(), "put");
        let place = embed_text("place").unwrap();
        let c_move = cosine(&place, &embed_text("move").unwrap());
        let c_put = cosine(&place, &embed_text("put").unwrap());
        let want = if c_put > c_move { "put" } else { "move" };
        for _ in 0..3 {
            assert_eq!(normalize_action("place", &["move", "put"]).unwrap(), want);
        }
        assert_eq!(normalize_action("x", &["x", "x"]).unwrap(), "x");
        assert!(normalize_action("x", &[]).is_err());
    }

    #[test]
    fn tuples_follow_targets() {
        let p = parse_grammar(
            "put the green ring to the left of the gray cube, the above of the gray cube, and the right of the red bowl",
        )
        .unwrap();
        let t = to_relation_tuples(&p).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].ref_text, "gray cube");
        assert_eq!(t[0].f_ref, t[1].f_ref);
        assert_ne!(t[0].f_pred, t[1].f_pred);
        let one = parse_grammar("put the cyan bowl above the chocolate").unwrap();
        assert_eq!(to_relation_tuples(&one).unwrap().len(), 1);
        let empty = ParsedInstruction { action: "put".into(), source: "x".into(), targets: vec![] };
        assert!(to_relation_tuples(&empty).is_err());
    }
}
