//! Text form of metric graphs.
//!
//! ```text
//! expr  := leaf | name "(" args ")" | "smul" "(" number "," expr ")"
//! leaf  := "u" | "v" | "ones"
//! name  := add | sub | dot | cos | had | l1d | l2d | proj | l1n | l2n | norm | neg | sum
//! ```
//!
//! Whitespace between tokens is ignored.

use std::fmt::{self, Write as _};

use super::{Expr, LeafKind, MetricGraph, NodeId, NodeKind, Operator, MAX_DEPTH_LIMIT};
use crate::error::GraphError;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    /// Byte offset of the offending token.
    pub offset: usize,
    pub expected: Vec<&'static str>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "parse error at byte {}: expected one of {}",
            self.offset,
            self.expected.join(", ")
        )
    }
}

pub fn print_expr(graph: &MetricGraph) -> String {
    let mut out = String::new();
    write_node(graph, 0, &mut out);
    out
}

fn write_node(graph: &MetricGraph, id: NodeId, out: &mut String) {
    let node = graph.node(id);
    match node.kind {
        NodeKind::Leaf(l) => out.push_str(l.symbol()),
        NodeKind::Op(op) => {
            out.push_str(op.name());
            out.push('(');
            if let Operator::Scale(c) = op {
                write!(out, "{c}").unwrap();
                out.push(',');
            }
            for (k, &c) in node.children.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_node(graph, c, out);
            }
            out.push(')');
        }
    }
}

/// Parses and validates an expression, allowing depths up to
/// [`MAX_DEPTH_LIMIT`].
pub fn parse_expr(text: &str) -> Result<MetricGraph, GraphError> {
    parse_expr_with_depth(text, MAX_DEPTH_LIMIT)
}

pub fn parse_expr_with_depth(text: &str, max_depth: usize) -> Result<MetricGraph, GraphError> {
    let mut parser = Parser { src: text, pos: 0 };
    let expr = parser.expr()?;
    parser.skip_ws();
    if parser.pos != text.len() {
        return Err(parser.error(&["end of input"]).into());
    }
    let graph = MetricGraph::from_expr(&expr, max_depth);
    graph.validate()?;
    Ok(graph)
}

const EXPR_START: &[&str] = &["u", "v", "ones", "operator name"];

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, expected: &[&'static str]) -> ParseError {
        ParseError {
            offset: self.pos,
            expected: expected.to_vec(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, c: char, expected: &'static str) -> Result<(), ParseError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.error(&[expected]))
        }
    }

    fn ident(&mut self) -> &str {
        self.skip_ws();
        let start = self.pos;
        let len = self.src[start..]
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
            .count();
        self.pos += len;
        &self.src[start..self.pos]
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let len = self.src[start..]
            .bytes()
            .take_while(|b| b.is_ascii_digit() || matches!(b, b'-' | b'+' | b'.' | b'e' | b'E'))
            .count();
        let value = self.src[start..start + len]
            .parse::<f64>()
            .ok()
            .filter(|c| c.is_finite());
        match value {
            Some(c) => {
                self.pos += len;
                Ok(c)
            }
            None => Err(self.error(&["number"])),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let name = self.ident().to_owned();
        match name.as_str() {
            "u" => return Ok(Expr::Leaf(LeafKind::User)),
            "v" => return Ok(Expr::Leaf(LeafKind::Item)),
            "ones" => return Ok(Expr::Leaf(LeafKind::Ones)),
            _ => {}
        }
        let Some(op) = Operator::from_name(&name) else {
            self.pos = start;
            return Err(self.error(EXPR_START));
        };
        self.eat('(', "(")?;
        let op = match op {
            Operator::Scale(_) => {
                let c = self.number()?;
                self.eat(',', ",")?;
                Operator::Scale(c)
            }
            other => other,
        };
        let mut children = Vec::with_capacity(op.arity());
        for k in 0..op.arity() {
            if k > 0 {
                self.eat(',', ",")?;
            }
            children.push(self.expr()?);
        }
        self.eat(')', ")")?;
        Ok(Expr::Op(op, children))
    }
}
