//! Expected Improvement and its maximization over subspaces.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{FitState, GpError, PosteriorPrediction};
use crate::space::{sample, Configuration, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum AcqError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("batch size {b} outside 1..={n}")]
    BatchSize { b: usize, n: usize },
    #[error("acquisition budget must be at least {0}")]
    Budget(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionResult {
    pub subspace_id: usize,
    pub config: Configuration,
    pub ei_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcqOptions {
    /// Random candidates per subspace.
    pub budget: usize,
    /// Candidates refined by hill-climbing.
    pub n_refine: usize,
    pub rounds: usize,
    /// Gaussian step on normalized continuous values.
    pub step: f64,
}

impl Default for AcqOptions {
    fn default() -> Self {
        AcqOptions {
            budget: 512,
            n_refine: 5,
            rounds: 50,
            step: 0.05,
        }
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// EI for minimization against incumbent `best`.
pub fn ei(mean: f64, sigma: f64, best: f64) -> f64 {
    let d = best - mean;
    if !(sigma >= 1e-12) {
        return d.max(0.0);
    }
    let z = d / sigma;
    (d * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}

pub fn expected_improvement(pred: &PosteriorPrediction, best_y_std: f64) -> f64 {
    ei(pred.mean, pred.variance.max(0.0).sqrt(), best_y_std)
}

/// Scores a batch of candidates; larger is better.
pub trait Scorer {
    fn score(&self, candidates: &[&Configuration]) -> Result<Vec<f64>, GpError>;
}

/// EI of a fitted model against a standardized incumbent.
pub struct EiScorer<'s> {
    pub state: &'s FitState,
    pub best_y_std: f64,
}

impl Scorer for EiScorer<'_> {
    fn score(&self, candidates: &[&Configuration]) -> Result<Vec<f64>, GpError> {
        Ok(self
            .state
            .predict_many(candidates)?
            .iter()
            .map(|p| expected_improvement(p, self.best_y_std))
            .collect())
    }
}

impl<F: Fn(&[&Configuration]) -> Result<Vec<f64>, GpError>> Scorer for F {
    fn score(&self, candidates: &[&Configuration]) -> Result<Vec<f64>, GpError> {
        self(candidates)
    }
}

fn score_owned<S: Scorer + ?Sized>(scorer: &S, configs: &[Configuration]) -> Result<Vec<f64>, GpError> {
    let refs: Vec<&Configuration> = configs.iter().collect();
    scorer.score(&refs)
}

/// Indices of the `k` largest scores, ties to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// One hill-climbing proposal: a Gaussian move on every continuous slot or
/// a resample of one discrete slot.
fn neighbor(space: &SearchSpace, c: &Configuration, step: f64, rng: &mut ChaCha8Rng) -> Configuration {
    let sub = &space.subspaces[c.subspace_id - 1];
    let mut cont = Vec::new();
    let mut disc = Vec::new();
    for (i, slot) in sub.slots.iter().enumerate() {
        if slot.fixed.is_none() {
            if slot.domain.is_discrete() {
                disc.push(i);
            } else {
                cont.push(i);
            }
        }
    }
    let move_continuous = match (cont.is_empty(), disc.is_empty()) {
        (true, true) => return c.clone(),
        (false, true) => true,
        (true, false) => false,
        (false, false) => rng.random_bool(0.5),
    };
    if move_continuous {
        let mut out = c.clone();
        for &i in &cont {
            let slot = &sub.slots[i];
            let u = out.tokens[i].norm_value + step * rng.sample::<f64, _>(StandardNormal);
            out = space.with_value(&out, i, sample::denormalize(&slot.domain, u));
        }
        out
    } else {
        let &i = disc.choose(rng).expect("non-empty");
        let v = sample::draw(&sub.slots[i].domain, rng);
        space.with_value(c, i, v)
    }
}

/// Random candidates in `subspace_id`, then hill-climbing from the best
/// few. With `budget == 1` the single random candidate is returned as is.
pub fn maximize_in_subspace<S: Scorer + ?Sized>(
    scorer: &S,
    space: &SearchSpace,
    subspace_id: usize,
    opts: &AcqOptions,
    seed: u64,
) -> Result<AcquisitionResult, AcqError> {
    if opts.budget < 1 {
        return Err(AcqError::Budget(1));
    }
    let sub = space.subspace(subspace_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Configuration> = (0..opts.budget).map(|_| sample::sample_in(sub, &mut rng)).collect();
    let scores = score_owned(scorer, &pool)?;
    let refine = if opts.budget == 1 { 0 } else { opts.n_refine.max(1) };
    let mut starts: Vec<(Configuration, f64)> = top_k(&scores, refine.max(1))
        .into_iter()
        .map(|i| (pool[i].clone(), scores[i]))
        .collect();
    if refine > 0 {
        for _ in 0..opts.rounds {
            let proposals: Vec<Configuration> = starts.iter().map(|(c, _)| neighbor(space, c, opts.step, &mut rng)).collect();
            let s = score_owned(scorer, &proposals)?;
            for ((start, p), v) in starts.iter_mut().zip(proposals).zip(s) {
                if v > start.1 {
                    *start = (p, v);
                }
            }
        }
    }
    let best = top_k(&starts.iter().map(|s| s.1).collect::<Vec<_>>(), 1)[0];
    let (config, ei_value) = starts.swap_remove(best);
    Ok(AcquisitionResult {
        subspace_id,
        config,
        ei_value,
    })
}

pub fn optimize_subspace(
    state: &FitState,
    space: &SearchSpace,
    subspace_id: usize,
    best_y_std: f64,
    opts: &AcqOptions,
    seed: u64,
) -> Result<AcquisitionResult, AcqError> {
    maximize_in_subspace(&EiScorer { state, best_y_std }, space, subspace_id, opts, seed)
}

/// The `b` results with the largest EI, ties to the lower subspace id.
pub fn select_batch(mut results: Vec<AcquisitionResult>, b: usize) -> Result<Vec<AcquisitionResult>, AcqError> {
    if b < 1 || b > results.len() {
        return Err(AcqError::BatchSize { b, n: results.len() });
    }
    results.sort_by(|x, y| y.ei_value.total_cmp(&x.ei_value).then(x.subspace_id.cmp(&y.subspace_id)));
    results.truncate(b);
    Ok(results)
}

/// Random search over all of `subspaces` (`budget` candidates dealt
/// round-robin), returning the top `b` by score. With `distinct` set, at
/// most one result is kept per subspace.
pub fn maximize_global_random<S: Scorer + ?Sized>(
    scorer: &S,
    space: &SearchSpace,
    subspaces: &[usize],
    budget: usize,
    b: usize,
    distinct: bool,
    seed: u64,
) -> Result<Vec<AcquisitionResult>, AcqError> {
    if distinct && b > subspaces.len() {
        return Err(AcqError::BatchSize { b, n: subspaces.len() });
    }
    if b < 1 || subspaces.is_empty() {
        return Err(AcqError::BatchSize { b, n: budget });
    }
    if budget < b {
        return Err(AcqError::Budget(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(budget);
    for i in 0..budget {
        let sub = space.subspace(subspaces[i % subspaces.len()])?;
        pool.push(sample::sample_in(sub, &mut rng));
    }
    let scores = score_owned(scorer, &pool)?;
    let mut out: Vec<AcquisitionResult> = Vec::with_capacity(b);
    for i in top_k(&scores, pool.len()) {
        if out.len() == b {
            break;
        }
        if distinct && out.iter().any(|r| r.subspace_id == pool[i].subspace_id) {
            continue;
        }
        out.push(AcquisitionResult {
            subspace_id: pool[i].subspace_id,
            config: pool[i].clone(),
            ei_value: scores[i],
        });
    }
    Ok(out)
}

pub fn optimize_global_random(
    state: &FitState,
    space: &SearchSpace,
    best_y_std: f64,
    budget: usize,
    b: usize,
    seed: u64,
) -> Result<Vec<AcquisitionResult>, AcqError> {
    let all: Vec<usize> = space.subspaces.iter().map(|s| s.id).collect();
    maximize_global_random(&EiScorer { state, best_y_std }, space, &all, budget, b, false, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::fixtures;
    use proptest::prelude::*;

    #[test]
    fn ei_examples() {
        assert_eq!(ei(0.3, 0.0, 0.3), 0.0);
        assert!((ei(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!(ei(1.0, 0.01, 0.0) < 1e-10);
        assert_eq!(ei(-1.0, 1e-13, 0.5), 1.5);
        // z = 1: Φ(1) = 0.8413447460685429, φ(1) = 0.24197072451914337
        assert!((ei(-1.0, 1.0, 0.0) - (0.8413447460685429 + 0.24197072451914337)).abs() < 1e-14);
    }

    fn quadratic(cs: &[&Configuration]) -> Result<Vec<f64>, GpError> {
        Ok(cs
            .iter()
            .map(|c| {
                let x = c.raw["x"].as_f64().unwrap();
                let y = c.raw["y"].as_f64().unwrap();
                1.0 - (x - 0.3).powi(2) - (y - 0.71).powi(2)
            })
            .collect())
    }

    const BOX: &str = "x:\n  type: float\n  range: [0...1]\ny:\n  type: float\n  range: [0...1]\n";

    #[test]
    fn budget_one_is_a_single_draw() {
        let space = SearchSpace::parse(BOX).unwrap();
        let opts = AcqOptions { budget: 1, ..Default::default() };
        let r = maximize_in_subspace(&quadratic, &space, 1, &opts, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let expected = sample::sample_in(&space.subspaces[0], &mut rng);
        assert_eq!(r.config, expected);
        assert_eq!(r.ei_value, quadratic(&[&expected]).unwrap()[0]);
        assert!(matches!(
            maximize_in_subspace(&quadratic, &space, 1, &AcqOptions { budget: 0, ..opts }, 0),
            Err(AcqError::Budget(_))
        ));
    }

    #[test]
    fn refinement_never_worse_than_pool() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let score = |cs: &[&Configuration]| -> Result<Vec<f64>, GpError> {
            Ok(cs.iter().map(|c| c.tokens.iter().map(|t| (t.norm_value - 0.4).abs()).sum::<f64>()).collect())
        };
        for id in 1..=4 {
            let opts = AcqOptions::default();
            let r = maximize_in_subspace(&score, &space, id, &opts, id as u64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(id as u64);
            let pool: Vec<Configuration> = (0..opts.budget).map(|_| space.sample_with(id, &mut rng).unwrap()).collect();
            let best = score_owned(&score, &pool).unwrap().into_iter().fold(f64::MIN, f64::max);
            assert!(r.ei_value >= best);
            assert_eq!(r.config.subspace_id, id);
            assert_eq!(space.locate(&r.config.raw), Some(id));
        }
    }

    #[test]
    fn close_to_dense_random_oracle() {
        let space = SearchSpace::parse(BOX).unwrap();
        let r = maximize_in_subspace(&quadratic, &space, 1, &AcqOptions::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let oracle = (0..50_000)
            .map(|_| quadratic(&[&space.sample_with(1, &mut rng).unwrap()]).unwrap()[0])
            .fold(f64::MIN, f64::max);
        assert!(r.ei_value >= 0.95 * oracle, "{} vs {}", r.ei_value, oracle);
    }

    fn result(id: usize, v: f64) -> AcquisitionResult {
        AcquisitionResult {
            subspace_id: id,
            config: Configuration {
                subspace_id: id,
                tokens: vec![],
                raw: Default::default(),
            },
            ei_value: v,
        }
    }

    #[test]
    fn select_batch_order() {
        let rs = vec![result(1, 0.3), result(2, 0.9), result(3, 0.5)];
        let ids = |v: Vec<AcquisitionResult>| v.iter().map(|r| r.subspace_id).collect::<Vec<_>>();
        assert_eq!(ids(select_batch(rs.clone(), 2).unwrap()), [2, 3]);
        assert_eq!(ids(select_batch(rs.clone(), 3).unwrap()), [2, 3, 1]);
        assert_eq!(ids(select_batch(vec![result(3, 0.5), result(1, 0.5), result(2, 0.5)], 2).unwrap()), [1, 2]);
        assert!(select_batch(rs.clone(), 0).is_err());
        assert!(select_batch(rs, 4).is_err());
    }

    #[test]
    fn global_random_top_b() {
        let space = SearchSpace::parse(fixtures::NAS).unwrap();
        let score = |cs: &[&Configuration]| -> Result<Vec<f64>, GpError> {
            Ok(cs.iter().map(|c| c.tokens.iter().map(|t| t.norm_value).sum::<f64>() / c.tokens.len() as f64).collect())
        };
        let all = [1, 2, 3, 4];
        let out = maximize_global_random(&score, &space, &all, 64, 5, false, 0).unwrap();
        assert_eq!(out.len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool: Vec<Configuration> = (0..64).map(|i| space.sample_with(all[i % 4], &mut rng).unwrap()).collect();
        let mut s = score_owned(&score, &pool).unwrap();
        s.sort_by(f64::total_cmp);
        let median = s[32];
        assert!(out.iter().all(|r| r.ei_value >= median));
        assert!(out.windows(2).all(|w| w[0].ei_value >= w[1].ei_value));
        assert!(maximize_global_random(&score, &space, &all, 3, 5, false, 0).is_err());
        let distinct = maximize_global_random(&score, &space, &all, 64, 4, true, 0).unwrap();
        let mut ids: Vec<usize> = distinct.iter().map(|r| r.subspace_id).collect();
        ids.sort();
        assert_eq!(ids, [1, 2, 3, 4]);
        assert!(maximize_global_random(&score, &space, &all, 64, 5, true, 0).is_err());
    }

    #[test]
    fn global_random_single_subspace_matches_pool_max() {
        let space = SearchSpace::parse(BOX).unwrap();
        let out = maximize_global_random(&quadratic, &space, &[1], 100, 1, false, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<Configuration> = (0..100).map(|_| space.sample_with(1, &mut rng).unwrap()).collect();
        let best = score_owned(&quadratic, &pool).unwrap().into_iter().fold(f64::MIN, f64::max);
        assert_eq!(out[0].ei_value, best);
    }

    proptest! {
        #[test]
        fn ei_nonnegative_and_monotone_in_sigma(mu in -3.0f64..3.0, b in -3.0f64..3.0, s1 in 0.0f64..3.0, ds in 0.0f64..3.0) {
            let lo = ei(mu, s1, b);
            let hi = ei(mu, s1 + ds, b);
            prop_assert!(lo >= 0.0 && hi >= 0.0);
            if mu < b {
                prop_assert!(hi >= lo - 1e-12);
            }
        }
    }
}
