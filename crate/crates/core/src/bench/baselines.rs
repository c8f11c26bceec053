//! Proposal rules of the comparison methods: uniform random search and one
//! independent GP per subspace.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquire::{self, ei};
use crate::driver::{derive_seed, purpose, DriverError, ObservationSet, Proposal, RunConfig, Source};
use crate::gp::{self, DeepKernelGp, FeatureMap, FitState, GpError, KernelParams};
use crate::space::{Configuration, SearchSpace};

/// `b` distinct random subspaces, one uniform draw in each.
pub fn propose_random(space: &SearchSpace, active: &[usize], b: usize, seed: u64, iter: u64) -> Vec<Proposal> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, iter, 0, purpose::RANDOM));
    let mut chosen: Vec<usize> = active.choose_multiple(&mut rng, b).copied().collect();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|id| {
            let s = derive_seed(seed, iter, id as u64, purpose::RANDOM);
            Proposal {
                config: space.sample(id, s).expect("active subspace"),
                seed: s,
                source: Source::Random,
                score: None,
            }
        })
        .collect()
}

/// Kernel parameters of one subspace's GP and the data size it was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubModel {
    pub kernel: KernelParams,
    pub fitted_on: usize,
}

/// Each subspace's GP (identity map on the normalized values) proposes its
/// EI maximizer; EI is measured in raw units against the global incumbent so
/// that subspaces compete on one scale. Subspaces with fewer than two
/// observations propose a random point with infinite priority.
pub fn propose_independent(
    space: &SearchSpace,
    obs: &ObservationSet,
    active: &[usize],
    models: &mut BTreeMap<usize, SubModel>,
    run: &RunConfig,
    iter: u64,
) -> Result<Vec<Proposal>, DriverError> {
    let best_raw = obs.best().and_then(|r| r.y);
    let mut results = Vec::with_capacity(active.len());
    for &id in active {
        let seed = derive_seed(run.seed, iter, id as u64, purpose::ACQUIRE);
        let (configs, ys): (Vec<&Configuration>, Vec<f64>) = obs
            .in_subspace(id)
            .filter_map(|r| r.y.map(|y| (&r.config, y)))
            .unzip();
        let (Some(best_raw), true) = (best_raw, configs.len() >= 2) else {
            results.push(acquire::AcquisitionResult {
                subspace_id: id,
                config: space.sample(id, seed)?,
                ei_value: f64::INFINITY,
            });
            continue;
        };
        let state = sub_state(space, id, models, &configs, &ys, run)?;
        let b_std = state.to_std(best_raw);
        let scale = state.y_std;
        let scorer = |cs: &[&Configuration]| -> Result<Vec<f64>, GpError> {
            Ok(state
                .predict_many(cs)?
                .iter()
                .map(|p| scale * ei(p.mean, p.variance.sqrt(), b_std))
                .collect())
        };
        results.push(acquire::maximize_in_subspace(&scorer, space, id, &run.acquisition, seed)?);
    }
    Ok(acquire::select_batch(results, run.batch)?
        .into_iter()
        .map(|r| Proposal {
            seed: derive_seed(run.seed, iter, r.subspace_id as u64, purpose::ACQUIRE),
            source: Source::Acquisition,
            score: r.ei_value.is_finite().then_some(r.ei_value),
            config: r.config,
        })
        .collect())
}

/// Fits (warm-continuing) the GP of subspace `id` when its data grew,
/// otherwise conditions the stored kernel on the data.
fn sub_state(
    space: &SearchSpace,
    id: usize,
    models: &mut BTreeMap<usize, SubModel>,
    configs: &[&Configuration],
    ys: &[f64],
    run: &RunConfig,
) -> Result<FitState, DriverError> {
    let width = space.subspace(id)?.dimension();
    let prev = models.get(&id).copied();
    let mut model = DeepKernelGp::new(FeatureMap::identity(width));
    if let Some(m) = prev {
        if m.fitted_on == configs.len() {
            model.kernel = m.kernel;
            return Ok(FitState::condition(model, configs, ys)?);
        }
        if !run.fresh_fit {
            model.kernel = m.kernel;
        }
    }
    let state = gp::fit(model, configs, ys, &run.fit)?;
    models.insert(
        id,
        SubModel {
            kernel: state.model.kernel,
            fitted_on: configs.len(),
        },
    );
    Ok(state)
}
