use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Configuration, Domain, SearchSpace, Slot, SpaceError, Subspace, Token, Value};

fn out_of_range(domain: &Domain, v: &Value) -> SpaceError {
    SpaceError::OutOfRange {
        key: domain.kind().to_string(),
        value: v.to_string(),
    }
}

/// Maps a value of `domain` into `[0, 1]`.
///
/// Numeric kinds use `(v - lo) / (hi - lo)` (on the exponent for powerint2),
/// choices use their ordinal position over `max(n - 1, 1)`.
pub fn normalize_value(domain: &Domain, v: &Value) -> Result<f64, SpaceError> {
    match domain {
        Domain::Float { lo, hi } => {
            let x = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| out_of_range(domain, v))?;
            if x < *lo || x > *hi {
                return Err(out_of_range(domain, v));
            }
            Ok((x - lo) / (hi - lo))
        }
        Domain::Int { lo, hi } => {
            let Value::Int(i) = v else {
                return Err(out_of_range(domain, v));
            };
            if i < lo || i >= hi {
                return Err(out_of_range(domain, v));
            }
            Ok((i - lo) as f64 / (hi - lo) as f64)
        }
        Domain::PowerInt2 { lo, hi } => {
            let Value::Int(i) = v else {
                return Err(out_of_range(domain, v));
            };
            if *i <= 0 || i.count_ones() != 1 {
                return Err(out_of_range(domain, v));
            }
            let e = i.trailing_zeros() as i64;
            if e < *lo || e >= *hi {
                return Err(out_of_range(domain, v));
            }
            Ok((e - lo) as f64 / (hi - lo) as f64)
        }
        Domain::Choice(values) => {
            let pos = values
                .iter()
                .position(|u| super::values_match(u, v))
                .ok_or_else(|| out_of_range(domain, v))?;
            Ok(pos as f64 / (values.len().saturating_sub(1)).max(1) as f64)
        }
    }
}

/// Inverse of [`normalize_value`] for a free slot: snaps `u` in `[0, 1]` to
/// the nearest admissible value.
pub(crate) fn denormalize(domain: &Domain, u: f64) -> Value {
    let u = u.clamp(0.0, 1.0);
    match domain {
        Domain::Float { lo, hi } => Value::Float((lo + u * (hi - lo)).clamp(*lo, *hi)),
        Domain::Int { lo, hi } => Value::Int((lo + (u * (hi - lo) as f64).round() as i64).min(hi - 1)),
        Domain::PowerInt2 { lo, hi } => {
            let e = (lo + (u * (hi - lo) as f64).round() as i64).min(hi - 1);
            Value::Int(1i64 << e)
        }
        Domain::Choice(values) => {
            let n = values.len();
            let i = (u * (n.saturating_sub(1)).max(1) as f64).round() as usize;
            values[i.min(n - 1)].clone()
        }
    }
}

pub(crate) fn draw<R: Rng>(domain: &Domain, rng: &mut R) -> Value {
    match domain {
        Domain::Float { lo, hi } => Value::Float(rng.random_range(*lo..=*hi)),
        Domain::Int { lo, hi } => Value::Int(rng.random_range(*lo..*hi)),
        Domain::PowerInt2 { lo, hi } => Value::Int(1i64 << rng.random_range(*lo..*hi)),
        Domain::Choice(values) => values[rng.random_range(0..values.len())].clone(),
    }
}

pub(crate) fn token_for(slot: &Slot, v: &Value) -> Result<Token, SpaceError> {
    let norm_value = normalize_value(&slot.domain, v).map_err(|_| SpaceError::OutOfRange {
        key: slot.key.clone(),
        value: v.to_string(),
    })?;
    Ok(Token {
        id_code: slot.id_code,
        idx_code: slot.idx_code,
        father_code: slot.father_code,
        norm_value,
    })
}

pub(crate) fn sample_in<R: Rng>(sub: &Subspace, rng: &mut R) -> Configuration {
    let mut raw = BTreeMap::new();
    let mut tokens = Vec::with_capacity(sub.slots.len());
    for slot in &sub.slots {
        let v = match &slot.fixed {
            Some(v) => v.clone(),
            None => draw(&slot.domain, rng),
        };
        tokens.push(token_for(slot, &v).expect("drawn values lie in range"));
        raw.insert(slot.key.clone(), v);
    }
    Configuration {
        subspace_id: sub.id,
        tokens,
        raw,
    }
}

impl SearchSpace {
    /// Draws one configuration uniformly from `subspace_id`; deterministic in `seed`.
    pub fn sample(&self, subspace_id: usize, seed: u64) -> Result<Configuration, SpaceError> {
        let sub = self.subspace(subspace_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(sample_in(sub, &mut rng))
    }

    pub fn sample_with<R: Rng>(&self, subspace_id: usize, rng: &mut R) -> Result<Configuration, SpaceError> {
        Ok(sample_in(self.subspace(subspace_id)?, rng))
    }

    /// Rebuilds `config` with the value at `key` replaced.
    pub(crate) fn with_value(&self, config: &Configuration, slot_pos: usize, v: Value) -> Configuration {
        let sub = &self.subspaces[config.subspace_id - 1];
        let slot = &sub.slots[slot_pos];
        let mut out = config.clone();
        out.tokens[slot_pos] = token_for(slot, &v).expect("value in range");
        out.raw.insert(slot.key.clone(), v);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::fixtures;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        let f = Domain::Float { lo: 0.001, hi: 1000.0 };
        assert_eq!(normalize_value(&f, &Value::Float(1000.0)).unwrap(), 1.0);
        let c = Domain::Choice(["linear", "poly", "sigmoid", "rbf"].map(|s| Value::Text(s.into())).to_vec());
        assert_eq!(normalize_value(&c, &Value::Text("sigmoid".into())).unwrap(), 2.0 / 3.0);
        let i = Domain::Int { lo: 4, hi: 8 };
        assert_eq!(normalize_value(&i, &Value::Int(5)).unwrap(), 0.25);
        assert!(normalize_value(&i, &Value::Int(8)).is_err());
        let p = Domain::PowerInt2 { lo: 5, hi: 8 };
        assert_eq!(normalize_value(&p, &Value::Int(64)).unwrap(), 1.0 / 3.0);
        assert!(normalize_value(&p, &Value::Int(48)).is_err());
        assert!(normalize_value(&p, &Value::Int(256)).is_err());
        let single = Domain::Choice(vec![Value::Int(3)]);
        assert_eq!(normalize_value(&single, &Value::Int(3)).unwrap(), 0.0);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        for id in 1..=4 {
            assert_eq!(space.sample(id, 42).unwrap(), space.sample(id, 42).unwrap());
        }
        assert!(space.sample(0, 1).is_err());
        assert!(space.sample(5, 1).is_err());
    }

    #[test]
    fn int_zero_to_two_is_binary() {
        let space = SearchSpace::parse(fixtures::SIMULATION).unwrap();
        let mut seen = [false; 2];
        for seed in 0..200 {
            match space.sample(1, seed).unwrap().raw["r8"] {
                Value::Int(v @ 0..=1) => seen[v as usize] = true,
                ref other => panic!("{other:?}"),
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn uniform_float_mean() {
        let space = SearchSpace::parse("u:\n  type: float\n  range: [0...1]\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let sum: f64 = (0..n)
            .map(|_| space.sample_with(1, &mut rng).unwrap().raw["u"].as_f64().unwrap())
            .sum();
        assert!((sum / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn simulation_fathers_in_tokens() {
        let space = SearchSpace::parse(fixtures::SIMULATION).unwrap();
        let c = space.sample(1, 0).unwrap();
        let code = |n: &str| space.id_codes[n];
        let pairs: Vec<(u32, u32)> = c.tokens.iter().map(|t| (t.id_code, t.father_code)).collect();
        assert_eq!(
            pairs,
            [(code("x1"), 0), (code("r8"), code("x1")), (code("x2"), code("x1")), (code("x4"), code("x2"))]
        );
    }

    #[test]
    fn denormalize_inverts() {
        let d = Domain::Int { lo: 2, hi: 6 };
        for v in 2..6 {
            let u = normalize_value(&d, &Value::Int(v)).unwrap();
            assert_eq!(denormalize(&d, u), Value::Int(v));
        }
        let c = Domain::Choice(vec![Value::Int(0), Value::Int(8), Value::Int(16)]);
        assert_eq!(denormalize(&c, 0.5), Value::Int(8));
    }

    proptest! {
        #[test]
        fn int_sampling_excludes_hi(lo in -50i64..50, width in 1i64..20, seed in any::<u64>()) {
            let doc = format!("k:\n  type: int\n  range: [{lo}...{}]\n", lo + width);
            let space = SearchSpace::parse(&doc).unwrap();
            let c = space.sample(1, seed).unwrap();
            let Value::Int(v) = c.raw["k"] else { panic!() };
            prop_assert!(v >= lo && v < lo + width);
            prop_assert!((0.0..1.0).contains(&c.tokens[0].norm_value));
        }

        #[test]
        fn token_count_matches_dimension(seed in any::<u64>(), which in 0usize..5) {
            let doc = [fixtures::SIMULATION, fixtures::SVM, fixtures::XGBOOST, fixtures::CASH, fixtures::NAS][which];
            let space = SearchSpace::parse(doc).unwrap();
            for sub in &space.subspaces {
                let c = space.sample(sub.id, seed).unwrap();
                prop_assert_eq!(c.tokens.len(), sub.dimension());
                prop_assert!(c.tokens.iter().all(|t| (0.0..=1.0).contains(&t.norm_value) && t.id_code >= 1));
            }
        }
    }
}
