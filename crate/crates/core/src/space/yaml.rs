//! Line-oriented reader for the YAML subset used by search-space documents.
//!
//! Supported: block mappings, block sequences (`- item`), flow sets `{a, b}`,
//! flow lists `[a, b]`, single- and double-quoted scalars and `#` comments.
//! Flow collections must close on the line they open. Anchors, tags,
//! multi-line scalars and tabs in indentation are rejected.

use super::SpaceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalar {
    pub text: String,
    pub quoted: bool,
    pub pos: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Set,
    List,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Scalar(Scalar),
    Flow {
        kind: FlowKind,
        items: Vec<Scalar>,
        pos: Pos,
    },
    Seq {
        items: Vec<Node>,
        pos: Pos,
    },
    Map {
        entries: Vec<Entry>,
        pos: Pos,
    },
    Empty(Pos),
}

impl Node {
    pub fn pos(&self) -> Pos {
        match self {
            Node::Scalar(s) => s.pos,
            Node::Flow { pos, .. } | Node::Seq { pos, .. } | Node::Map { pos, .. } => *pos,
            Node::Empty(pos) => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: Scalar,
    pub value: Node,
}

struct Line<'a> {
    no: usize,
    indent: usize,
    text: &'a str,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> SpaceError {
    SpaceError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

/// Strips a trailing comment, honouring quotes.
fn strip_comment(raw: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut prev_ws = true;
    for (i, c) in raw.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => {
                if c == '#' && prev_ws {
                    return &raw[..i];
                }
                if c == '"' || c == '\'' {
                    quote = Some(c);
                }
            }
        }
        prev_ws = c.is_whitespace();
    }
    raw
}

fn split_lines(src: &str) -> Result<Vec<Line<'_>>, SpaceError> {
    let mut out = Vec::new();
    for (i, raw) in src.split('\n').enumerate() {
        let no = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let body = strip_comment(raw).trim_end();
        if body.trim().is_empty() {
            continue;
        }
        let indent = body.len() - body.trim_start_matches(' ').len();
        if body[indent..].starts_with('\t') {
            return Err(syntax(no, indent + 1, "tab character in indentation"));
        }
        out.push(Line {
            no,
            indent,
            text: &body[indent..],
        });
    }
    Ok(out)
}

/// Parses a whole document into its top-level mapping.
pub fn parse_document(src: &str) -> Result<Node, SpaceError> {
    let lines = split_lines(src)?;
    if lines.is_empty() {
        return Err(syntax(1, 1, "empty document"));
    }
    let mut p = Parser { lines, cur: 0, depth: 0 };
    if p.lines[0].indent != 0 {
        let l = &p.lines[0];
        return Err(syntax(l.no, l.indent + 1, "document must start at column 1"));
    }
    let node = p.block(None)?;
    if let Some(l) = p.lines.get(p.cur) {
        return Err(syntax(l.no, l.indent + 1, "unexpected indentation"));
    }
    Ok(node)
}

const MAX_DEPTH: usize = 64;

struct Parser<'a> {
    lines: Vec<Line<'a>>,
    cur: usize,
    depth: usize,
}

fn is_seq_item(text: &str) -> bool {
    text == "-" || text.starts_with("- ")
}

impl<'a> Parser<'a> {
    /// Parses the block starting at the current line; its indentation must
    /// exceed `parent` (if any).
    fn block(&mut self, parent: Option<usize>) -> Result<Node, SpaceError> {
        if self.depth >= MAX_DEPTH {
            let l = &self.lines[self.cur];
            return Err(syntax(l.no, l.indent + 1, "nesting too deep"));
        }
        self.depth += 1;
        let node = self.block_inner(parent);
        self.depth -= 1;
        node
    }

    fn block_inner(&mut self, parent: Option<usize>) -> Result<Node, SpaceError> {
        let first = &self.lines[self.cur];
        let indent = first.indent;
        // `key:` followed by `- item` at the key's own indentation
        let compact = parent == Some(indent);
        let pos = Pos {
            line: first.no,
            col: indent + 1,
        };
        if is_seq_item(first.text) {
            let mut items = Vec::new();
            while let Some(l) = self.lines.get(self.cur) {
                if l.indent < indent {
                    break;
                }
                if l.indent > indent {
                    return Err(syntax(l.no, l.indent + 1, "unexpected indentation"));
                }
                if !is_seq_item(l.text) {
                    if compact {
                        break;
                    }
                    return Err(syntax(l.no, l.indent + 1, "expected `- ` sequence item"));
                }
                let rest = l.text[1..].trim_start();
                let col = l.indent + 1 + (l.text.len() - rest.len());
                let (no, lind) = (l.no, l.indent);
                self.cur += 1;
                if rest.is_empty() {
                    items.push(self.nested(lind, Pos { line: no, col }, false)?);
                } else {
                    items.push(inline_value(rest, no, col)?);
                }
            }
            return Ok(Node::Seq { items, pos });
        }
        let mut entries: Vec<Entry> = Vec::new();
        while let Some(l) = self.lines.get(self.cur) {
            if l.indent < indent {
                break;
            }
            if l.indent > indent {
                return Err(syntax(l.no, l.indent + 1, "unexpected indentation"));
            }
            if is_seq_item(l.text) {
                return Err(syntax(l.no, l.indent + 1, "sequence item inside a mapping"));
            }
            let (no, lind, text) = (l.no, l.indent, l.text);
            let (key, rest, rest_col) = split_key(text, no, lind + 1)?;
            if entries.iter().any(|e| e.key.text == key.text) {
                return Err(SpaceError::DuplicateName {
                    line: key.pos.line,
                    col: key.pos.col,
                    name: key.text,
                });
            }
            self.cur += 1;
            let value = if rest.is_empty() {
                self.nested(
                    lind,
                    Pos {
                        line: no,
                        col: rest_col,
                    },
                    true,
                )?
            } else {
                inline_value(rest, no, rest_col)?
            };
            entries.push(Entry { key, value });
        }
        Ok(Node::Map { entries, pos })
    }

    fn nested(&mut self, parent_indent: usize, at: Pos, allow_compact: bool) -> Result<Node, SpaceError> {
        match self.lines.get(self.cur) {
            Some(l) if l.indent > parent_indent => self.block(Some(parent_indent)),
            Some(l) if allow_compact && l.indent == parent_indent && is_seq_item(l.text) => {
                self.block(Some(parent_indent))
            }
            _ => Ok(Node::Empty(at)),
        }
    }
}

fn split_key(text: &str, line: usize, col: usize) -> Result<(Scalar, &str, usize), SpaceError> {
    let (key, quoted, after) = if let Some(q) = text.chars().next().filter(|c| *c == '"' || *c == '\'') {
        let end = text[1..]
            .find(q)
            .ok_or_else(|| syntax(line, col, "unterminated quoted key"))?;
        (&text[1..1 + end], true, 2 + end)
    } else {
        let idx = find_key_colon(text).ok_or_else(|| syntax(line, col, "expected `key:`"))?;
        (text[..idx].trim_end(), false, idx)
    };
    let tail = &text[after..];
    let tail_trim = tail.trim_start();
    let Some(rest) = tail_trim.strip_prefix(':') else {
        return Err(syntax(line, col + after, "expected `:` after key"));
    };
    if !rest.is_empty() && !rest.starts_with(' ') {
        return Err(syntax(line, col + after, "expected space after `:`"));
    }
    if key.is_empty() {
        return Err(syntax(line, col, "empty key"));
    }
    let rest_trim = rest.trim_start();
    let rest_col = col + (text.len() - rest_trim.len());
    Ok((
        Scalar {
            text: key.to_string(),
            quoted,
            pos: Pos { line, col },
        },
        rest_trim,
        rest_col,
    ))
}

fn find_key_colon(text: &str) -> Option<usize> {
    let b = text.as_bytes();
    (0..b.len()).find(|&i| b[i] == b':' && (i + 1 == b.len() || b[i + 1] == b' '))
}

fn scalar(text: &str, line: usize, col: usize) -> Result<Scalar, SpaceError> {
    let pos = Pos { line, col };
    let first = text.chars().next();
    if let Some(q) = first.filter(|c| *c == '"' || *c == '\'') {
        if text.len() < 2 || !text.ends_with(q) {
            return Err(syntax(line, col, "unterminated quoted scalar"));
        }
        let inner = &text[1..text.len() - 1];
        if inner.contains(q) {
            return Err(syntax(line, col, "embedded quote in scalar"));
        }
        return Ok(Scalar {
            text: inner.to_string(),
            quoted: true,
            pos,
        });
    }
    if let Some(c) = first.filter(|c| matches!(c, '&' | '*' | '!' | '|' | '>' | '%' | '@' | '`')) {
        return Err(syntax(line, col, format!("unsupported YAML indicator `{c}`")));
    }
    if text.contains(['{', '}', '[', ']']) {
        return Err(syntax(line, col, "unexpected bracket in scalar"));
    }
    Ok(Scalar {
        text: text.to_string(),
        quoted: false,
        pos,
    })
}

fn inline_value(text: &str, line: usize, col: usize) -> Result<Node, SpaceError> {
    let pos = Pos { line, col };
    let (kind, close) = match text.as_bytes()[0] {
        b'{' => (FlowKind::Set, '}'),
        b'[' => (FlowKind::List, ']'),
        _ => return Ok(Node::Scalar(scalar(text, line, col)?)),
    };
    if !text.ends_with(close) || text.len() < 2 {
        return Err(syntax(line, col, format!("flow collection must close with `{close}` on the same line")));
    }
    let inner = &text[1..text.len() - 1];
    let mut items = Vec::new();
    if inner.trim().is_empty() {
        return Ok(Node::Flow { kind, items, pos });
    }
    let mut start = 0;
    let mut quote: Option<char> = None;
    let mut pieces = Vec::new();
    for (i, c) in inner.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == ',' => {
                pieces.push((start, &inner[start..i]));
                start = i + 1;
            }
            None => {}
        }
    }
    if quote.is_some() {
        return Err(syntax(line, col, "unterminated quote in flow collection"));
    }
    pieces.push((start, &inner[start..]));
    for (off, piece) in pieces {
        let trimmed = piece.trim_start();
        let item_col = col + 1 + off + (piece.len() - trimmed.len());
        let trimmed = trimmed.trim_end();
        if trimmed.is_empty() {
            return Err(syntax(line, item_col, "empty item in flow collection"));
        }
        items.push(scalar(trimmed, line, item_col)?);
    }
    Ok(Node::Flow { kind, items, pos })
}
