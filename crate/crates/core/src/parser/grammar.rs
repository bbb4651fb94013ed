//! Deterministic recursive-descent backend for the instruction grammar
//!
//! ```text
//! instruction := verb source? relation (sep relation)*
//! source      := "the" word+            (ends where a relation starts)
//! relation    := "to"? "the"? predicate ("of" | "from" | "to")? "the"? word+
//! sep         := "," | "and" | "," "and"
//! ```

use super::{ParsedInstruction, RelationText};
use crate::error::{Error, Result};

/// Source used when the instruction moves the agent itself.
pub const SELF_SOURCE: &str = "self";

/// The ten relations synthesized by the benchmark.
pub const INSTRUCTION_PREDICATES: [&str; 10] = [
    "left",
    "right",
    "above",
    "below",
    "left above",
    "right above",
    "left below",
    "right below",
    "close",
    "far",
];

/// Directional predicates accepted by the parser, including the two
/// navigation forms.
pub const DIRECTIONAL_PREDICATES: [&str; 10] = [
    "left",
    "right",
    "above",
    "below",
    "left above",
    "right above",
    "left below",
    "right below",
    "front",
    "behind",
];

pub const ACTION_VERBS: [&str; 14] = [
    "put", "place", "move", "set", "bring", "go", "drop", "push", "lay", "position", "navigate",
    "walk", "stack", "pick",
];

// (surface tokens, canonical predicate); two-word forms are tried first.
const PREDICATE_FORMS: [(&[&str], &str); 18] = [
    (&["left", "above"], "left above"),
    (&["above", "left"], "left above"),
    (&["right", "above"], "right above"),
    (&["above", "right"], "right above"),
    (&["left", "below"], "left below"),
    (&["below", "left"], "left below"),
    (&["right", "below"], "right below"),
    (&["below", "right"], "right below"),
    (&["left"], "left"),
    (&["right"], "right"),
    (&["above"], "above"),
    (&["below"], "below"),
    (&["close"], "close"),
    (&["near"], "close"),
    (&["far"], "far"),
    (&["front"], "front"),
    (&["behind"], "behind"),
    (&["beside"], "close"),
];

/// Canonical spelling of a predicate phrase, if it is in the lexicon.
pub fn canonical_predicate(text: &str) -> Option<&'static str> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let words: Vec<&str> = words
        .iter()
        .map(String::as_str)
        .filter(|w| !matches!(*w, "to" | "of" | "from" | "the"))
        .collect();
    PREDICATE_FORMS
        .iter()
        .find(|(form, _)| *form == words.as_slice())
        .map(|(_, canon)| *canon)
}

/// Parses a full instruction; the leading verb is required.
pub fn parse_grammar(instruction: &str) -> Result<ParsedInstruction> {
    Parser::new(instruction).instruction(true)
}

/// Parses one or more relation phrases, with or without a leading verb and
/// source ("left of the red box", "and close to the tree").
pub fn parse_expression(text: &str) -> Result<ParsedInstruction> {
    Parser::new(text).instruction(false)
}

fn lex(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch == ',' || ch == ';' {
                out.push(",".to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

struct Parser {
    tokens: Vec<String>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Self {
        Self { tokens: lex(text), pos: 0 }
    }

    fn peek_at(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    fn peek(&self) -> Option<&str> {
        self.peek_at(self.pos)
    }

    fn error(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            position: at,
            token: self.peek_at(at).unwrap_or("<end>").to_string(),
            message: message.into(),
        }
    }

    /// Length and canonical form of a predicate starting at `at`.
    fn predicate_at(&self, at: usize) -> Option<(usize, &'static str)> {
        PREDICATE_FORMS.iter().find_map(|(form, canon)| {
            let matches = form
                .iter()
                .enumerate()
                .all(|(k, w)| self.peek_at(at + k) == Some(*w));
            matches.then_some((form.len(), *canon))
        })
    }

    fn relation_starts_at(&self, at: usize) -> bool {
        match self.peek_at(at) {
            Some("to") => {
                self.predicate_at(at + 1).is_some()
                    || (self.peek_at(at + 1) == Some("the") && self.predicate_at(at + 2).is_some())
            }
            Some("the") => self.predicate_at(at + 1).is_some(),
            Some(_) => self.predicate_at(at).is_some(),
            None => false,
        }
    }

    fn instruction(mut self, require_action: bool) -> Result<ParsedInstruction> {
        if self.tokens.is_empty() {
            return Err(self.error(0, "empty instruction"));
        }
        let mut action = String::new();
        let mut source = SELF_SOURCE.to_string();
        let first = self.peek().unwrap_or_default().to_string();
        if ACTION_VERBS.contains(&first.as_str()) {
            action = first;
            self.pos += 1;
            if let Some(s) = self.source()? {
                source = s;
            }
        } else if require_action {
            return Err(self.error(0, "expected an action verb"));
        } else if self.peek() == Some("and") {
            self.pos += 1;
        }

        let mut targets = vec![self.relation()?];
        while self.pos < self.tokens.len() {
            match self.peek() {
                Some(",") => {
                    self.pos += 1;
                    if self.peek() == Some("and") {
                        self.pos += 1;
                    }
                }
                Some("and") => self.pos += 1,
                _ => return Err(self.error(self.pos, "expected ',' or 'and' between relations")),
            }
            targets.push(self.relation()?);
        }
        Ok(ParsedInstruction { action, source, targets })
    }

    fn source(&mut self) -> Result<Option<String>> {
        if self.relation_starts_at(self.pos) {
            return Ok(None);
        }
        if matches!(self.peek(), Some("the") | Some("a") | Some("an")) {
            self.pos += 1;
        }
        let start = self.pos;
        while let Some(tok) = self.peek() {
            if tok == "," || tok == "and" || self.relation_starts_at(self.pos) {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.error(self.pos, "expected a source object"));
        }
        Ok(Some(self.tokens[start..self.pos].join(" ")))
    }

    fn relation(&mut self) -> Result<RelationText> {
        if self.peek() == Some("to") {
            self.pos += 1;
        }
        if self.peek() == Some("the") && self.predicate_at(self.pos + 1).is_some() {
            self.pos += 1;
        }
        let (len, predicate) = self
            .predicate_at(self.pos)
            .ok_or_else(|| self.error(self.pos, "expected a spatial predicate"))?;
        self.pos += len;
        if matches!(self.peek(), Some("of") | Some("from") | Some("to")) {
            self.pos += 1;
        }
        if matches!(self.peek(), Some("the") | Some("a") | Some("an")) {
            self.pos += 1;
        }
        let start = self.pos;
        while let Some(tok) = self.peek() {
            if tok == "," || tok == "and" {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.error(self.pos, "expected a referenced object"));
        }
        Ok(RelationText::new(self.tokens[start..self.pos].join(" "), predicate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(r: &str, p: &str) -> RelationText {
        RelationText::new(r, p)
    }

    #[test]
    fn two_relation_instruction() {
        let p = parse_grammar("put the cyan bowl above the chocolate and left of the silver spoon").unwrap();
        assert_eq!(p.action, "put");
        assert_eq!(p.source, "cyan bowl");
        assert_eq!(p.targets, vec![rel("chocolate", "above"), rel("silver spoon", "left")]);
    }

    #[test]
    fn three_relation_list() {
        let p = parse_grammar(
            "put the green ring to the left of the gray cube, the above of the gray cube, and the right of the red bowl.",
        )
        .unwrap();
        assert_eq!(p.source, "green ring");
        assert_eq!(
            p.targets,
            vec![rel("gray cube", "left"), rel("gray cube", "above"), rel("red bowl", "right")]
        );
    }

    #[test]
    fn navigation_without_source() {
        let p = parse_grammar("move to the front of the red box and close to the tree").unwrap();
        assert_eq!(p.action, "move");
        assert_eq!(p.source, SELF_SOURCE);
        assert_eq!(p.targets, vec![rel("red box", "front"), rel("tree", "close")]);
    }

    #[test]
    fn multi_word_predicates() {
        let p = parse_grammar("Place the red cube to the LEFT ABOVE of the blue bowl, far from the tree").unwrap();
        assert_eq!(p.targets, vec![rel("blue bowl", "left above"), rel("tree", "far")]);
        let p = parse_grammar("put the box above right of the ring").unwrap();
        assert_eq!(p.targets, vec![rel("ring", "right above")]);
    }

    #[test]
    fn expressions_without_verb() {
        let p = parse_expression("left of the red box").unwrap();
        assert_eq!(p.action, "");
        assert_eq!(p.targets, vec![rel("red box", "left")]);
        let p = parse_expression("and close to the tree").unwrap();
        assert_eq!(p.targets, vec![rel("tree", "close")]);
    }

    #[test]
    fn errors_name_the_failing_token() {
        match parse_expression("frobnicate the bluh") {
            Err(Error::Parse { position, token, .. }) => {
                assert_eq!((position, token.as_str()), (0, "frobnicate"));
            }
            other => panic!("{other:?}"),
        }
        match parse_grammar("frobnicate the bluh") {
            Err(Error::Parse { token, .. }) => assert_eq!(token, "frobnicate"),
            other => panic!("{other:?}"),
        }
        match parse_grammar("put the cyan bowl") {
            Err(Error::Parse { token, .. }) => assert_eq!(token, "<end>"),
            other => panic!("{other:?}"),
        }
        match parse_grammar("put the cyan bowl above the") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("referenced object")),
            other => panic!("{other:?}"),
        }
        assert!(parse_grammar("").is_err());
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonical_predicate("Close to"), Some("close"));
        assert_eq!(canonical_predicate("far from"), Some("far"));
        assert_eq!(canonical_predicate("below left"), Some("left below"));
        assert_eq!(canonical_predicate("inside"), None);
    }
}
