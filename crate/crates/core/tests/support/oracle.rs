//! Independent reference evaluators used by the property and acceptance tests.
//!
//! `eval_text` works directly on policy text with a shunting-yard pass, so it
//! shares no code with the crate's recursive-descent parser.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Fixed policy suite over {a,b,c,d}. Bit `s` of each mask is the truth
/// value for the subset whose members are the set bits of `s` (bit 0 = a,
/// bit 1 = b, bit 2 = c, bit 3 = d). Masks were computed with Python's own
/// boolean evaluator, not with this crate.
pub const SUITE: [(&str, u16); 12] = [
    ("a", 0xaaaa),
    ("a AND b", 0x8888),
    ("a OR b", 0xeeee),
    ("(a AND b) OR d", 0xff88),
    ("a AND (b OR c)", 0xa8a8),
    ("(a OR b) AND (c OR d)", 0xeee0),
    ("(a AND b) OR (c AND d)", 0xf888),
    ("a AND b AND c AND d", 0x8000),
    ("a OR b OR c OR d", 0xfffe),
    ("a AND (b OR (c AND d))", 0xa888),
    ("(a OR (b AND c)) AND d", 0xea00),
    ("((a AND b) OR c) AND (a OR d)", 0xf8a8),
];

pub const OMEGA: [&str; 4] = ["a", "b", "c", "d"];

/// Members of subset `s` of `OMEGA`.
pub fn subset(s: u16) -> Vec<&'static str> {
    OMEGA.iter().enumerate().filter(|(i, _)| s >> i & 1 == 1).map(|(_, n)| *n).collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    And,
    Or,
    Open,
    Close,
}

fn tokens(text: &str) -> Vec<Tok> {
    let spaced = text.replace('(', " ( ").replace(')', " ) ");
    spaced
        .split_whitespace()
        .map(|w| match w {
            "AND" => Tok::And,
            "OR" => Tok::Or,
            "(" => Tok::Open,
            ")" => Tok::Close,
            name => Tok::Name(name.to_string()),
        })
        .collect()
}

fn prec(t: &Tok) -> u8 {
    match t {
        Tok::And => 2,
        Tok::Or => 1,
        _ => 0,
    }
}

/// Truth value of `text` when exactly the names in `present` are true.
pub fn eval_text(text: &str, present: &BTreeSet<String>) -> bool {
    let mut out: Vec<Tok> = Vec::new();
    let mut ops: Vec<Tok> = Vec::new();
    for t in tokens(text) {
        match t {
            Tok::Name(_) => out.push(t),
            Tok::And | Tok::Or => {
                while ops.last().is_some_and(|top| prec(top) >= prec(&t)) {
                    out.push(ops.pop().unwrap());
                }
                ops.push(t);
            }
            Tok::Open => ops.push(t),
            Tok::Close => {
                while let Some(top) = ops.pop() {
                    if top == Tok::Open {
                        break;
                    }
                    out.push(top);
                }
            }
        }
    }
    while let Some(top) = ops.pop() {
        out.push(top);
    }
    let mut stack: Vec<bool> = Vec::new();
    for t in out {
        match t {
            Tok::Name(n) => stack.push(present.contains(&n)),
            Tok::And => {
                let (r, l) = (stack.pop().unwrap(), stack.pop().unwrap());
                stack.push(l && r);
            }
            Tok::Or => {
                let (r, l) = (stack.pop().unwrap(), stack.pop().unwrap());
                stack.push(l || r);
            }
            _ => unreachable!(),
        }
    }
    assert_eq!(stack.len(), 1, "malformed oracle input {text}");
    stack[0]
}

/// Truth table of `text` over `OMEGA` as a 16-bit mask.
pub fn truth_mask(text: &str) -> u16 {
    (0..16u16)
        .filter(|&s| eval_text(text, &subset(s).into_iter().map(String::from).collect()))
        .fold(0, |m, s| m | 1 << s)
}
