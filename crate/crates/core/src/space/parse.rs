use super::yaml::{parse_document, Entry, FlowKind, Node, Pos, Scalar};
use super::{Children, Domain, HyperparamSpec, SpaceError, Value};

fn invalid(pos: Pos, msg: impl Into<String>) -> SpaceError {
    SpaceError::Invalid {
        line: pos.line,
        col: pos.col,
        msg: msg.into(),
    }
}

pub(super) fn parse_specs(document: &str) -> Result<Vec<HyperparamSpec>, SpaceError> {
    match parse_document(document)? {
        Node::Map { entries, .. } => params_from_entries(&entries),
        other => Err(invalid(other.pos(), "top level must be a mapping of hyperparameters")),
    }
}

fn params_from_entries(entries: &[Entry]) -> Result<Vec<HyperparamSpec>, SpaceError> {
    // sibling names are already unique: the reader rejects duplicate keys
    entries.iter().map(|e| param(&e.key, &e.value)).collect()
}

fn param(name: &Scalar, node: &Node) -> Result<HyperparamSpec, SpaceError> {
    let Node::Map { entries, pos } = node else {
        return Err(invalid(node.pos(), format!("`{}` must be a mapping", name.text)));
    };
    let mut kind: Option<&Scalar> = None;
    let mut range: Option<&Node> = None;
    let mut submodule: Option<&Node> = None;
    for e in entries {
        match e.key.text.as_str() {
            "type" => match &e.value {
                Node::Scalar(s) => kind = Some(s),
                other => return Err(invalid(other.pos(), "`type` must be a scalar")),
            },
            "range" => range = Some(&e.value),
            "submodule" => submodule = Some(&e.value),
            other => {
                return Err(invalid(e.key.pos, format!("unknown field `{other}` in `{}`", name.text)));
            }
        }
    }
    let kind = kind.ok_or_else(|| invalid(*pos, format!("`{}` has no `type`", name.text)))?;
    let range = range.ok_or_else(|| invalid(*pos, format!("`{}` has no `range`", name.text)))?;
    let domain = match kind.text.as_str() {
        "choice" => choice_domain(&name.text, range)?,
        "int" => {
            let (lo, hi) = int_bounds(&name.text, range)?;
            Domain::Int { lo, hi }
        }
        "powerint2" => {
            let (lo, hi) = int_bounds(&name.text, range)?;
            if lo < 0 || hi > 63 {
                return Err(invalid(range.pos(), "powerint2 exponents must lie in [0, 63)"));
            }
            Domain::PowerInt2 { lo, hi }
        }
        "float" => {
            let (lo_s, hi_s, pos) = bounds_text(range)?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| invalid(pos, format!("`{s}` is not a finite number")))
            };
            let (lo, hi) = (parse(lo_s)?, parse(hi_s)?);
            if lo >= hi {
                return Err(empty(&name.text, pos));
            }
            Domain::Float { lo, hi }
        }
        _ => {
            return Err(SpaceError::UnknownKind {
                line: kind.pos.line,
                col: kind.pos.col,
                kind: kind.text.clone(),
            })
        }
    };
    let children = match submodule {
        None => Children::None,
        Some(sub) => children(name, &domain, sub)?,
    };
    Ok(HyperparamSpec {
        name: name.text.clone(),
        domain,
        children,
    })
}

fn empty(param: &str, pos: Pos) -> SpaceError {
    SpaceError::EmptyRange {
        line: pos.line,
        col: pos.col,
        param: param.to_string(),
    }
}

fn choice_domain(name: &str, range: &Node) -> Result<Domain, SpaceError> {
    let items: Vec<&Scalar> = match range {
        Node::Flow { items, .. } => items.iter().collect(),
        Node::Seq { items, .. } => items
            .iter()
            .map(|n| match n {
                Node::Scalar(s) => Ok(s),
                other => Err(invalid(other.pos(), "choice literals must be scalars")),
            })
            .collect::<Result<_, _>>()?,
        Node::Empty(pos) => return Err(empty(name, *pos)),
        other => return Err(invalid(other.pos(), "choice range must be written `{a, b, ...}`")),
    };
    if items.is_empty() {
        return Err(empty(name, range.pos()));
    }
    let mut values: Vec<Value> = Vec::with_capacity(items.len());
    for s in items {
        let v = Value::from_literal(&s.text, s.quoted);
        if values.iter().any(|u| super::values_match(u, &v)) {
            return Err(invalid(s.pos, format!("duplicate literal `{}` in `{name}`", s.text)));
        }
        values.push(v);
    }
    Ok(Domain::Choice(values))
}

/// Extracts the two sides of a `[lo...hi]` range.
fn bounds_text(range: &Node) -> Result<(&str, &str, Pos), SpaceError> {
    let item = match range {
        Node::Flow {
            kind: FlowKind::List,
            items,
            pos,
        } => match items.as_slice() {
            [one] => one,
            _ => return Err(invalid(*pos, "numeric range must be written `[lo...hi]`")),
        },
        Node::Seq { items, pos } => match items.as_slice() {
            [Node::Scalar(one)] => one,
            _ => return Err(invalid(*pos, "numeric range must be a single `lo...hi` item")),
        },
        other => return Err(invalid(other.pos(), "numeric range must be written `[lo...hi]`")),
    };
    let (lo, hi) = item
        .text
        .split_once("...")
        .ok_or_else(|| invalid(item.pos, format!("expected `lo...hi`, found `{}`", item.text)))?;
    Ok((lo, hi, item.pos))
}

fn int_bounds(name: &str, range: &Node) -> Result<(i64, i64), SpaceError> {
    let (lo_s, hi_s, pos) = bounds_text(range)?;
    let parse = |s: &str| {
        s.trim()
            .parse::<i64>()
            .map_err(|_| invalid(pos, format!("`{}` is not an integer", s.trim())))
    };
    let (lo, hi) = (parse(lo_s)?, parse(hi_s)?);
    if lo >= hi {
        return Err(empty(name, pos));
    }
    Ok((lo, hi))
}

fn children(name: &Scalar, domain: &Domain, sub: &Node) -> Result<Children, SpaceError> {
    let Node::Map { entries, .. } = sub else {
        return Err(invalid(sub.pos(), "`submodule` must be a mapping"));
    };
    match domain {
        Domain::Choice(values) => {
            let mut branches = Vec::with_capacity(entries.len());
            for e in entries {
                let key = Value::from_literal(&e.key.text, e.key.quoted);
                let Some(lit) = values
                    .iter()
                    .find(|v| super::values_match(v, &key) || matches!(v, Value::Text(t) if *t == e.key.text))
                else {
                    return Err(SpaceError::BadChildKey {
                        line: e.key.pos.line,
                        col: e.key.pos.col,
                        key: e.key.text.clone(),
                        param: name.text.clone(),
                    });
                };
                if branches.iter().any(|(v, _)| v == lit) {
                    return Err(SpaceError::DuplicateName {
                        line: e.key.pos.line,
                        col: e.key.pos.col,
                        name: e.key.text.clone(),
                    });
                }
                let kids = match &e.value {
                    Node::Map { entries, .. } => params_from_entries(entries)?,
                    Node::Empty(_) => Vec::new(),
                    other => return Err(invalid(other.pos(), "branch must map to hyperparameters")),
                };
                branches.push((lit.clone(), kids));
            }
            Ok(Children::Branches(branches))
        }
        Domain::Int { lo, .. } => {
            if *lo < 0 {
                return Err(invalid(sub.pos(), "replication count cannot be negative"));
            }
            Ok(Children::Replicated(params_from_entries(entries)?))
        }
        _ => Err(invalid(
            sub.pos(),
            format!("only choice and int hyperparameters may carry a submodule (`{}`)", name.text),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(doc: &str) -> SpaceError {
        parse_specs(doc).unwrap_err()
    }

    #[test]
    fn parses_kinds() {
        let specs = parse_specs(
            "a:\n  type: int\n  range: [0...2]\nb:\n  type: powerint2\n  range: [5...8]\nc:\n  type: choice\n  range: {1, 1.25, x}\n",
        )
        .unwrap();
        assert_eq!(specs[0].domain, Domain::Int { lo: 0, hi: 2 });
        assert_eq!(specs[1].domain, Domain::PowerInt2 { lo: 5, hi: 8 });
        assert_eq!(
            specs[2].domain,
            Domain::Choice(vec![Value::Int(1), Value::Float(1.25), Value::Text("x".into())])
        );
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            err("a:\n  type: bool\n  range: {0, 1}\n"),
            SpaceError::UnknownKind { line: 2, .. }
        ));
        assert!(matches!(
            err("a:\n  type: choice\n  range: {x, y}\n  submodule:\n    z:\n      b:\n        type: int\n        range: [0...3]\n"),
            SpaceError::BadChildKey { line: 5, ref key, .. } if key == "z"
        ));
        assert!(matches!(err("a:\n  type: int\n  range: [3...3]\n"), SpaceError::EmptyRange { .. }));
        assert!(matches!(err("a:\n  type: float\n  range: [1...0.5]\n"), SpaceError::EmptyRange { .. }));
        assert!(matches!(err("a:\n  type: choice\n  range: {}\n"), SpaceError::EmptyRange { .. }));
        assert!(matches!(
            err("a:\n  type: float\n  range: [0...1]\na:\n  type: float\n  range: [0...1]\n"),
            SpaceError::DuplicateName { line: 4, .. }
        ));
        assert!(matches!(
            err("a:\n  type: float\n  range: [0...1]\n  submodule:\n    b:\n      type: int\n      range: [0...2]\n"),
            SpaceError::Invalid { .. }
        ));
        assert!(matches!(err("a:\n  type: int\n  range: [0.5...2]\n"), SpaceError::Invalid { .. }));
        assert!(matches!(err("a:\n  type: choice\n  range: {1, 1}\n"), SpaceError::Invalid { .. }));
        assert!(matches!(err("a:\n  range: [0...1]\n"), SpaceError::Invalid { .. }));
    }

    #[test]
    fn linear_branch_without_children() {
        let specs = parse_specs(crate::space::fixtures::SVM).unwrap();
        let Children::Branches(b) = &specs[1].children else {
            panic!()
        };
        assert_eq!(b.len(), 3);
        assert!(!b.iter().any(|(v, _)| *v == Value::Text("linear".into())));
    }
}
