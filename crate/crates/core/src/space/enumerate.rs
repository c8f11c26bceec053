use std::collections::BTreeMap;

use super::{Children, Domain, HyperparamSpec, Slot, SpaceError, Subspace, Value, MAX_SUBSPACES};

struct Ctx<'a> {
    codes: &'a BTreeMap<String, u32>,
}

struct Parent<'a> {
    name: Option<&'a str>,
    suffix: String,
    index: u32,
}

/// Enumerates every joint assignment of the structure-determining variables,
/// depth-first with values in range order.
pub(super) fn enumerate(
    roots: &[HyperparamSpec],
    codes: &BTreeMap<String, u32>,
) -> Result<Vec<Subspace>, SpaceError> {
    let ctx = Ctx { codes };
    let root = Parent {
        name: None,
        suffix: String::new(),
        index: 0,
    };
    let paths = ctx.expand_list(roots, &root)?;
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(i, slots)| Subspace {
            id: i + 1,
            decisions: slots
                .iter()
                .filter_map(|s| s.fixed.clone().map(|v| (s.key.clone(), v)))
                .collect(),
            slots,
        })
        .collect())
}

fn product(acc: Vec<Vec<Slot>>, alts: &[Vec<Slot>]) -> Result<Vec<Vec<Slot>>, SpaceError> {
    if acc.len().saturating_mul(alts.len()) > MAX_SUBSPACES {
        return Err(SpaceError::TooManySubspaces);
    }
    let mut out = Vec::with_capacity(acc.len() * alts.len());
    for head in &acc {
        for tail in alts {
            let mut path = head.clone();
            path.extend(tail.iter().cloned());
            out.push(path);
        }
    }
    Ok(out)
}

impl Ctx<'_> {
    fn expand_list(&self, specs: &[HyperparamSpec], parent: &Parent) -> Result<Vec<Vec<Slot>>, SpaceError> {
        let mut acc = vec![Vec::new()];
        for spec in specs {
            let alts = self.expand_one(spec, parent)?;
            acc = product(acc, &alts)?;
        }
        Ok(acc)
    }

    fn expand_one(&self, spec: &HyperparamSpec, parent: &Parent) -> Result<Vec<Vec<Slot>>, SpaceError> {
        let father_code = parent.name.map_or(0, |n| self.codes[n]);
        let slot = Slot {
            key: format!("{}{}", spec.name, parent.suffix),
            name: spec.name.clone(),
            domain: spec.domain.clone(),
            index: parent.index,
            father: parent.name.map(str::to_string),
            id_code: self.codes[&spec.name],
            idx_code: parent.index,
            father_code,
            fixed: None,
        };
        let fixed = |v: Value| Slot {
            fixed: Some(v),
            ..slot.clone()
        };
        match (&spec.children, &spec.domain) {
            (Children::None, _) => Ok(vec![vec![slot.clone()]]),
            (Children::Branches(branches), Domain::Choice(values)) => {
                let mut out = Vec::new();
                for v in values {
                    let head = vec![fixed(v.clone())];
                    match branches.iter().find(|(k, _)| k == v) {
                        Some((_, kids)) => {
                            let child = Parent {
                                name: Some(&spec.name),
                                suffix: parent.suffix.clone(),
                                index: parent.index,
                            };
                            let alts = self.expand_list(kids, &child)?;
                            out.extend(product(vec![head], &alts)?);
                        }
                        None => out.push(head),
                    }
                    if out.len() > MAX_SUBSPACES {
                        return Err(SpaceError::TooManySubspaces);
                    }
                }
                Ok(out)
            }
            (Children::Replicated(kids), Domain::Int { lo, hi }) => {
                let mut out = Vec::new();
                for count in *lo..*hi {
                    let mut acc = vec![vec![fixed(Value::Int(count))]];
                    for i in 1..=count as u32 {
                        let child = Parent {
                            name: Some(&spec.name),
                            suffix: format!("{}[{i}]", parent.suffix),
                            index: i,
                        };
                        let alts = self.expand_list(kids, &child)?;
                        acc = product(acc, &alts)?;
                    }
                    out.extend(acc);
                    if out.len() > MAX_SUBSPACES {
                        return Err(SpaceError::TooManySubspaces);
                    }
                }
                Ok(out)
            }
            // the parser only attaches branches to choices and replicas to ints
            _ => unreachable!("children attached to a non-structural kind"),
        }
    }
}
