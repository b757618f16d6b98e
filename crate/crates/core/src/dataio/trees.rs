use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::chartkernel::{ParseTree, Span};
use crate::dataio::Punctuation;
use crate::error::{Error, Result};

/// A reference tree over punctuation-free, lowercased tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTree {
    pub tokens: Vec<String>,
    pub tree: ParseTree,
}

#[derive(Debug)]
enum Node {
    Leaf(String),
    Phrase(String, Vec<Node>),
}

struct Lexer<'a> {
    s: &'a str,
    pos: usize,
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> Option<Tok<'a>> {
        let rest = &self.s[self.pos..];
        let skip = rest.len() - rest.trim_start().len();
        self.pos += skip;
        let rest = &self.s[self.pos..];
        let c = rest.chars().next()?;
        match c {
            '(' => {
                self.pos += 1;
                Some(Tok::Open)
            }
            ')' => {
                self.pos += 1;
                Some(Tok::Close)
            }
            _ => {
                let end = rest
                    .find(|c: char| c.is_whitespace() || c == '(' || c == ')')
                    .unwrap_or(rest.len());
                self.pos += end;
                Some(Tok::Atom(&rest[..end]))
            }
        }
    }
}

fn parse_node(lx: &mut Lexer<'_>) -> std::result::Result<Node, String> {
    // caller consumed '('
    let mut label = String::new();
    let mut children = Vec::new();
    let mut first = true;
    loop {
        match lx.next() {
            None => return Err("unbalanced brackets: missing ')'".into()),
            Some(Tok::Close) => break,
            Some(Tok::Open) => children.push(parse_node(lx)?),
            Some(Tok::Atom(a)) => {
                if first {
                    label = a.to_string();
                } else {
                    children.push(Node::Leaf(a.to_string()));
                }
            }
        }
        first = false;
    }
    Ok(Node::Phrase(label, children))
}

fn parse_line(line: &str) -> std::result::Result<Node, String> {
    let mut lx = Lexer { s: line, pos: 0 };
    if lx.next() != Some(Tok::Open) {
        return Err("tree must start with '('".into());
    }
    let node = parse_node(&mut lx)?;
    match lx.next() {
        None => Ok(node),
        Some(Tok::Close) => Err("unbalanced brackets: extra ')'".into()),
        Some(_) => Err("trailing material after tree".into()),
    }
}

/// `NP-SBJ-1` → `NP`, `PP=2` → `PP`; labels such as `-NONE-` are kept.
pub fn strip_function_tags(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    match label.find(['-', '=']) {
        Some(k) if k > 0 => &label[..k],
        _ => label,
    }
}

struct Collector<'p> {
    punct: &'p Punctuation,
    tokens: Vec<String>,
    labels: BTreeMap<Span, Vec<String>>,
}

impl Collector<'_> {
    /// Returns the kept-token range covered by `node`, if any.
    fn visit(&mut self, node: &Node) -> Option<Span> {
        match node {
            Node::Leaf(w) => self.leaf(w),
            Node::Phrase(tag, children) => {
                if let [Node::Leaf(w)] = children.as_slice() {
                    // preterminal
                    if tag == "-NONE-" {
                        return None;
                    }
                    return self.leaf(w);
                }
                let mut lo = None;
                let mut hi = None;
                for c in children {
                    if let Some((a, b)) = self.visit(c) {
                        lo.get_or_insert(a);
                        hi = Some(b);
                    }
                }
                let span = (lo?, hi?);
                let label = strip_function_tags(tag);
                if !label.is_empty() && span.1 > span.0 {
                    self.labels.entry(span).or_default().push(label.to_string());
                }
                Some(span)
            }
        }
    }

    fn leaf(&mut self, w: &str) -> Option<Span> {
        if self.punct.is_punct(w) {
            return None;
        }
        let k = self.tokens.len();
        self.tokens.push(w.to_lowercase());
        Some((k, k))
    }
}

/// Parses one bracketed tree, dropping punctuation leaves and re-indexing
/// spans over the remaining tokens.
pub fn parse_gold_tree(line: &str, punct: &Punctuation) -> std::result::Result<GoldTree, String> {
    let root = parse_line(line)?;
    let mut col = Collector {
        punct,
        tokens: Vec::new(),
        labels: BTreeMap::new(),
    };
    col.visit(&root);
    if col.tokens.is_empty() {
        return Err("tree has no tokens after punctuation removal".into());
    }
    let n = col.tokens.len();
    let mut spans: Vec<Span> = col.labels.keys().copied().collect();
    if n >= 2 {
        spans.push((0, n - 1));
    }
    let tree = ParseTree::new(n, spans).map_err(|e| e.to_string())?.with_labels(col.labels);
    Ok(GoldTree {
        tokens: col.tokens,
        tree,
    })
}

/// One tree per non-blank line.
pub fn read_gold_trees(path: &Path, punct: &Punctuation) -> Result<Vec<GoldTree>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gold_text(&text, punct).map_err(|(line, msg)| Error::Syntax {
        path: path.display().to_string(),
        line,
        msg,
    })
}

/// Like [`read_gold_trees`] on in-memory text; errors carry the 1-based line.
pub fn parse_gold_text(text: &str, punct: &Punctuation) -> std::result::Result<Vec<GoldTree>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_gold_tree(l, punct).map_err(|e| (i + 1, e)))
        .collect()
}

/// Bracketed rendering with labels, leaves bare. Unlabeled spans print as `X`.
pub fn to_labeled_bracketed(tree: &ParseTree, tokens: &[String]) -> Result<String> {
    let plain = tree.to_bracketed(tokens)?;
    if tree.label_map().is_empty() {
        return Ok(plain);
    }
    let mut out = String::new();
    render(tree, 0, tokens.len().saturating_sub(1), tokens, &mut out);
    Ok(out)
}

fn render(tree: &ParseTree, i: usize, j: usize, tokens: &[String], out: &mut String) {
    let labels = tree.labels((i, j));
    let top = labels.last().map(String::as_str).unwrap_or("X");
    out.push('(');
    out.push_str(top);
    let mut pos = i;
    while pos <= j {
        let child = (pos..=j)
            .rev()
            .map(|b| (pos, b))
            .find(|&s| s != (i, j) && s.1 > s.0 && tree.spans().contains(&s));
        out.push(' ');
        match child {
            Some((a, b)) => {
                render(tree, a, b, tokens, out);
                pos = b + 1;
            }
            None => {
                out.push_str(&tokens[pos]);
                pos += 1;
            }
        }
    }
    out.push(')');
}
