//! Monotone access policies over namespaced attributes.
//!
//! Grammar (AND binds tighter than OR, both left-associative):
//!
//! ```text
//! expr   := term ('OR' term)*
//! term   := factor ('AND' factor)*
//! factor := NAME | '(' expr ')'
//! NAME   := [a-z][a-z0-9_]*(:[a-zA-Z0-9._-]+)?
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::AbeError;

/// Maximum tree depth of a policy; a lone attribute has depth 1.
pub const MAX_POLICY_DEPTH: usize = 32;

/// Attribute held only by the emergency server; OR-ed into every sealed policy.
pub const EMERGENCY_ATTRIBUTE: &str = "emergency:override";

pub fn is_valid_attribute_name(name: &str) -> bool {
    let (kind, value) = match name.split_once(':') {
        Some((k, v)) => (k, Some(v)),
        None => (name, None),
    };
    let mut kind_chars = kind.chars();
    let head_ok = matches!(kind_chars.next(), Some('a'..='z'));
    let kind_ok = head_ok && kind_chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'));
    let value_ok = match value {
        None => true,
        Some(v) => {
            !v.is_empty()
                && v.chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        }
    };
    kind_ok && value_ok
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Policy {
    Attr(String),
    And(Box<Policy>, Box<Policy>),
    Or(Box<Policy>, Box<Policy>),
}

impl Policy {
    pub fn attr(name: impl Into<String>) -> Result<Policy, AbeError> {
        let name = name.into();
        if !is_valid_attribute_name(&name) {
            return Err(AbeError::InvalidAttributeName(name));
        }
        Ok(Policy::Attr(name))
    }

    pub fn and(left: Policy, right: Policy) -> Policy {
        Policy::And(Box::new(left), Box::new(right))
    }

    pub fn or(left: Policy, right: Policy) -> Policy {
        Policy::Or(Box::new(left), Box::new(right))
    }

    /// Left-folded conjunction of the given attributes, in set order.
    pub fn all_of(attrs: &AttributeSet) -> Result<Policy, AbeError> {
        let mut names = attrs.iter();
        let first = names.next().ok_or(AbeError::EmptyAttributeSet)?;
        Ok(names.fold(Policy::Attr(first.clone()), |acc, n| {
            Policy::and(acc, Policy::Attr(n.clone()))
        }))
    }

    pub fn depth(&self) -> usize {
        match self {
            Policy::Attr(_) => 1,
            Policy::And(l, r) | Policy::Or(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Policy::Attr(_) => 1,
            Policy::And(l, r) | Policy::Or(l, r) => l.leaf_count() + r.leaf_count(),
        }
    }

    /// Distinct attribute names mentioned anywhere in the tree.
    pub fn attributes(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_attributes(&mut out);
        out
    }

    fn collect_attributes(&self, out: &mut BTreeSet<String>) {
        match self {
            Policy::Attr(a) => {
                out.insert(a.clone());
            }
            Policy::And(l, r) | Policy::Or(l, r) => {
                l.collect_attributes(out);
                r.collect_attributes(out);
            }
        }
    }

    pub fn mentions(&self, name: &str) -> bool {
        match self {
            Policy::Attr(a) => a == name,
            Policy::And(l, r) | Policy::Or(l, r) => l.mentions(name) || r.mentions(name),
        }
    }

    /// Checks the name grammar on every leaf and the depth bound.
    pub fn validate(&self) -> Result<(), AbeError> {
        if self.depth() > MAX_POLICY_DEPTH {
            return Err(AbeError::MalformedPolicy(format!(
                "depth {} exceeds {MAX_POLICY_DEPTH}",
                self.depth()
            )));
        }
        for name in self.attributes() {
            if !is_valid_attribute_name(&name) {
                return Err(AbeError::InvalidAttributeName(name));
            }
        }
        Ok(())
    }

    /// Removes every leaf named in `revoked`. An inner node that loses one
    /// child collapses to the surviving child; `None` when nothing survives.
    pub fn without(&self, revoked: &BTreeSet<String>) -> Option<Policy> {
        match self {
            Policy::Attr(a) if revoked.contains(a) => None,
            Policy::Attr(_) => Some(self.clone()),
            Policy::And(l, r) | Policy::Or(l, r) => {
                match (l.without(revoked), r.without(revoked)) {
                    (Some(l2), Some(r2)) => Some(match self {
                        Policy::And(..) => Policy::and(l2, r2),
                        _ => Policy::or(l2, r2),
                    }),
                    (Some(only), None) | (None, Some(only)) => Some(only),
                    (None, None) => None,
                }
            }
        }
    }

    /// `Or(self, emergency:override)`, the form embedded in every envelope.
    pub fn with_emergency_override(&self) -> Policy {
        Policy::or(self.clone(), Policy::Attr(EMERGENCY_ATTRIBUTE.to_string()))
    }

    /// Inverse of [`Policy::with_emergency_override`]; `None` if the top
    /// node is not the emergency extension.
    pub fn strip_emergency_override(&self) -> Option<&Policy> {
        match self {
            Policy::Or(base, e) if **e == Policy::Attr(EMERGENCY_ATTRIBUTE.to_string()) => {
                Some(base)
            }
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Policy, AbeError> {
        parse_policy(text)
    }
}

/// Monotone evaluation: `Attr(a)` holds iff `a` is in the set.
pub fn satisfies(policy: &Policy, attrs: &AttributeSet) -> bool {
    match policy {
        Policy::Attr(a) => attrs.contains(a),
        Policy::And(l, r) => satisfies(l, attrs) && satisfies(r, attrs),
        Policy::Or(l, r) => satisfies(l, attrs) || satisfies(r, attrs),
    }
}

/// Fully parenthesized canonical text; `parse_policy` inverts it exactly.
pub fn policy_to_string(policy: &Policy) -> String {
    policy.to_string()
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Attr(a) => f.write_str(a),
            Policy::And(l, r) => write!(f, "({l} AND {r})"),
            Policy::Or(l, r) => write!(f, "({l} OR {r})"),
        }
    }
}

impl FromStr for Policy {
    type Err = AbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_policy(s)
    }
}

impl Serialize for Policy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_policy(&text).map_err(serde::de::Error::custom)
    }
}

/// Location and expectation of a policy syntax error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "at byte {}: expected {}, found {}",
            self.offset,
            self.expected.join(" or "),
            self.found
        )
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Name(String),
    And,
    Or,
    LParen,
    RParen,
    End,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Name(n) => format!("`{n}`"),
            Token::And => "`AND`".into(),
            Token::Or => "`OR`".into(),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
            Token::End => "end of input".into(),
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | ':' | '.' | '-')
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' => {
                chars.next();
                tokens.push((pos, Token::LParen));
            }
            ')' => {
                chars.next();
                tokens.push((pos, Token::RParen));
            }
            c if is_word_char(c) => {
                let mut end = pos;
                while let Some(&(i, c)) = chars.peek() {
                    if !is_word_char(c) {
                        break;
                    }
                    end = i + c.len_utf8();
                    chars.next();
                }
                let word = &text[pos..end];
                let token = match word {
                    "AND" => Token::And,
                    "OR" => Token::Or,
                    w if is_valid_attribute_name(w) => Token::Name(w.to_string()),
                    w => {
                        return Err(ParseError {
                            offset: pos,
                            expected: vec!["attribute name", "`AND`", "`OR`"],
                            found: format!("`{w}`"),
                        })
                    }
                };
                tokens.push((pos, token));
            }
            other => {
                return Err(ParseError {
                    offset: pos,
                    expected: vec!["attribute name", "`(`", "`)`", "`AND`", "`OR`"],
                    found: format!("`{other}`"),
                })
            }
        }
    }
    tokens.push((text.len(), Token::End));
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &(usize, Token) {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> (usize, Token) {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: Vec<&'static str>) -> ParseError {
        let (offset, tok) = self.peek();
        ParseError { offset: *offset, expected, found: tok.describe() }
    }

    fn expr(&mut self, nesting: usize) -> Result<Policy, ParseError> {
        let mut left = self.term(nesting)?;
        while self.peek().1 == Token::Or {
            self.bump();
            let right = self.term(nesting)?;
            left = Policy::or(left, right);
        }
        Ok(left)
    }

    fn term(&mut self, nesting: usize) -> Result<Policy, ParseError> {
        let mut left = self.factor(nesting)?;
        while self.peek().1 == Token::And {
            self.bump();
            let right = self.factor(nesting)?;
            left = Policy::and(left, right);
        }
        Ok(left)
    }

    fn factor(&mut self, nesting: usize) -> Result<Policy, ParseError> {
        match self.peek().1.clone() {
            Token::Name(n) => {
                self.bump();
                Ok(Policy::Attr(n))
            }
            Token::LParen => {
                if nesting >= MAX_POLICY_DEPTH {
                    return Err(self.error(vec!["shallower nesting"]));
                }
                self.bump();
                let inner = self.expr(nesting + 1)?;
                if self.peek().1 != Token::RParen {
                    return Err(self.error(vec!["`)`", "`AND`", "`OR`"]));
                }
                self.bump();
                Ok(inner)
            }
            _ => Err(self.error(vec!["attribute name", "`(`"])),
        }
    }
}

/// Parses policy text into a tree, rejecting trees deeper than
/// [`MAX_POLICY_DEPTH`].
pub fn parse_policy(text: &str) -> Result<Policy, AbeError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let policy = parser.expr(0)?;
    if parser.peek().1 != Token::End {
        return Err(parser.error(vec!["`AND`", "`OR`", "end of input"]).into());
    }
    if policy.depth() > MAX_POLICY_DEPTH {
        return Err(ParseError {
            offset: text.len(),
            expected: vec!["policy of depth <= 32"],
            found: format!("depth {}", policy.depth()),
        }
        .into());
    }
    Ok(policy)
}

/// Set of namespaced attribute names held by a user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct AttributeSet(BTreeSet<String>);

impl AttributeSet {
    pub fn new<I, S>(names: I) -> Result<AttributeSet, AbeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for name in names {
            let name = name.into();
            if !is_valid_attribute_name(&name) {
                return Err(AbeError::InvalidAttributeName(name));
            }
            set.insert(name);
        }
        Ok(AttributeSet(set))
    }

    pub fn empty() -> AttributeSet {
        AttributeSet::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn insert(&mut self, name: &str) -> Result<bool, AbeError> {
        if !is_valid_attribute_name(name) {
            return Err(AbeError::InvalidAttributeName(name.to_string()));
        }
        Ok(self.0.insert(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_set(&self) -> &BTreeSet<String> {
        &self.0
    }

    pub fn is_subset(&self, other: &AttributeSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl<'de> Deserialize<'de> for AttributeSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        AttributeSet::new(names).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for AttributeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, name) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            f.write_str(name)?;
        }
        write!(f, "}}")
    }
}
