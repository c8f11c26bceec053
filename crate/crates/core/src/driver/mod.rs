//! The optimization loop: initial design, fit / acquire / evaluate, the
//! ask-tell interface, persistence and meta-training.

mod meta;
mod objective;
mod persist;
mod record;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquire::{self, AcqError, AcqOptions, EiScorer};
use crate::bench::baselines::{self, SubModel};
use crate::gp::{self, DeepKernelGp, FeatureMap, FitOptions, FitState, GpError};
use crate::nn::container::ParamContainer;
use crate::nn::{Adam, EncoderConfig, EncoderParams, NnError};
use crate::space::{config_to_json, Configuration, SearchSpace, SpaceError};

pub use meta::{meta_train, MetaOptions, MetaResult, MetaTask, MetaTaskSet};
pub use objective::{CommandObjective, Objective};
pub use persist::{Checkpoint, Manifest, RunDir};
pub use record::{ObservationRecord, ObservationSet, Source, Status};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcqError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("observation log line {line}: {msg}")]
    Log { line: usize, msg: String },
    #[error("search space hash mismatch: run was created with {expected}, got {found}")]
    SpaceMismatch { expected: String, found: String },
    #[error("objective failed twice on an initial point: {0}")]
    Objective(String),
    #[error("corrupt run directory: {0}")]
    Corrupt(String),
    #[error("warm start: {0}")]
    WarmStart(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AttnBo,
    RandomSearch,
    IndependentGp,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::AttnBo => "attnbo",
            Method::RandomSearch => "random",
            Method::IndependentGp => "indepgp",
        }
    }

    pub fn from_label(s: &str) -> Option<Method> {
        match s {
            "attnbo" | "attn_bo" => Some(Method::AttnBo),
            "random" | "random_search" => Some(Method::RandomSearch),
            "indepgp" | "independent_gp" => Some(Method::IndependentGp),
            _ => None,
        }
    }
}

/// Timestamp source for records. `Logical` stamps records with their
/// sequence number and zero durations, so logs are byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    System,
    Logical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// BO iterations after the initial design.
    pub iterations: usize,
    pub batch: usize,
    pub init_per_subspace: usize,
    pub seed: u64,
    pub method: Method,
    pub encoder: EncoderConfig,
    pub fit: FitOptions,
    pub acquisition: AcqOptions,
    /// Re-initialize the surrogate before every fit instead of continuing.
    pub fresh_fit: bool,
    pub warm_start: Option<PathBuf>,
    /// Above this many subspaces acquisition switches to global random search.
    pub global_random_threshold: usize,
    /// Restricts the run to these subspaces (all when unset).
    pub active_subspaces: Option<Vec<usize>>,
    pub clock: Clock,
    pub keep_checkpoints: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 50,
            batch: 1,
            init_per_subspace: 2,
            seed: 0,
            method: Method::AttnBo,
            encoder: EncoderConfig::compact(),
            fit: FitOptions::default(),
            acquisition: AcqOptions::default(),
            fresh_fit: false,
            warm_start: None,
            global_random_threshold: 32,
            active_subspaces: None,
            clock: Clock::System,
            keep_checkpoints: 2,
        }
    }
}

impl RunConfig {
    pub fn active(&self, space: &SearchSpace) -> Vec<usize> {
        match &self.active_subspaces {
            Some(ids) => ids.clone(),
            None => space.subspaces.iter().map(|s| s.id).collect(),
        }
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<(), DriverError> {
        let bad = |m: String| Err(DriverError::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        let active = self.active(space);
        if active.is_empty() {
            return bad("no active subspaces".into());
        }
        for (i, id) in active.iter().enumerate() {
            space.subspace(*id)?;
            if active[..i].contains(id) {
                return bad(format!("subspace {id} listed twice"));
            }
        }
        if self.batch < 1 || self.batch > active.len() {
            return bad(format!("batch size {} must lie in 1..={}", self.batch, active.len()));
        }
        if self.init_per_subspace < 1 {
            return bad("init_per_subspace must be at least 1".into());
        }
        if self.acquisition.budget < 1 {
            return bad("acquisition budget must be at least 1".into());
        }
        if !(self.fit.lr > 0.0) || self.fit.decay_every < 1 {
            return bad("fit learning rate and decay period must be positive".into());
        }
        self.encoder.validate()?;
        Ok(())
    }
}

/// Stable per-purpose seed from the run seed and loop coordinates.
pub fn derive_seed(base: u64, iter: u64, subspace: u64, purpose: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut s = splitmix(base);
    for v in [iter, subspace, purpose] {
        s = splitmix(s ^ v);
    }
    s
}

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const RETRY: u64 = 2;
    pub const MODEL: u64 = 3;
    pub const ACQUIRE: u64 = 4;
    pub const GLOBAL: u64 = 5;
    pub const RANDOM: u64 = 6;
}

/// A configuration chosen for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub config: Configuration,
    pub seed: u64,
    pub source: Source,
    /// Acquisition value when one was computed.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub objective: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub failures: usize,
    pub best_y: Option<f64>,
    pub best_subspace: Option<usize>,
    pub best_config: Option<serde_json::Value>,
    pub optimum: Option<f64>,
    pub log10_regret: Option<f64>,
}

/// Fresh surrogate for `space`: encoder weights seeded from the run seed,
/// or the warm-start container when configured.
pub fn initial_model(space: &SearchSpace, run: &RunConfig) -> Result<DeepKernelGp, DriverError> {
    if let Some(path) = &run.warm_start {
        let c = ParamContainer::load(path).map_err(|e| DriverError::WarmStart(format!("{}: {e}", path.display())))?;
        return warm_model(space, &c, &run.encoder);
    }
    let params = EncoderParams::init(
        &run.encoder,
        space.n_identities(),
        space.max_index as usize,
        derive_seed(run.seed, 0, 0, purpose::MODEL),
    )?;
    Ok(DeepKernelGp::new(FeatureMap::Attention {
        cfg: run.encoder.clone(),
        params,
    }))
}

/// Loads warm-start weights, checking that the embedding tables fit `space`.
pub fn warm_model(space: &SearchSpace, c: &ParamContainer, cfg: &EncoderConfig) -> Result<DeepKernelGp, DriverError> {
    let model = DeepKernelGp::from_container(c, cfg).map_err(|e| DriverError::WarmStart(e.to_string()))?;
    if let FeatureMap::Attention { params, .. } = &model.map {
        let (ids, idxs) = (space.n_identities() + 1, space.max_index as usize + 1);
        if params.id_rows() != ids || params.idx_rows() != idxs {
            return Err(DriverError::WarmStart(format!(
                "embedding tables have {}×{} rows, the space needs {ids}×{idxs}",
                params.id_rows(),
                params.idx_rows()
            )));
        }
    }
    Ok(model)
}

/// Evaluates `configs`, concurrently when there is more than one.
fn evaluate_all<O: Objective + ?Sized>(objective: &O, configs: &[Configuration]) -> Vec<(Result<f64, String>, u64)> {
    let timed = |c: &Configuration| {
        let t0 = Instant::now();
        let r = objective.evaluate(c).and_then(|y| {
            if y.is_finite() {
                Ok(y)
            } else {
                Err(format!("non-finite objective value {y}"))
            }
        });
        (r, t0.elapsed().as_millis() as u64)
    };
    if configs.len() <= 1 {
        return configs.iter().map(timed).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || timed(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| (Err("objective panicked".into()), 0)))
            .collect()
    })
}

fn adam_to_container(adam: &Adam) -> ParamContainer {
    let (m, v, t) = adam.moments();
    let mut c = ParamContainer::new(None);
    c.push("adam.m", &Array2::from_shape_vec((1, m.len()), m.to_vec()).expect("row"));
    c.push("adam.v", &Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
    c.meta.insert("t".into(), t.into());
    c
}

fn adam_from_container(c: &ParamContainer, n: usize) -> Result<Adam, DriverError> {
    let bad = |msg: &str| DriverError::Corrupt(format!("optimizer state: {msg}"));
    let tensors = c.tensors()?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.value.iter().copied().collect::<Vec<f64>>())
            .ok_or_else(|| bad(&format!("missing {name}")))
    };
    let (m, v) = (find("adam.m")?, find("adam.v")?);
    if m.len() != n || v.len() != n {
        return Err(bad("size does not match the model"));
    }
    let t = c.meta.get("t").and_then(|t| t.as_i64()).ok_or_else(|| bad("missing step count"))?;
    Ok(Adam::from_moments(m, v, t as i32))
}

/// Algorithm state. Drives a run either end to end ([`Optimizer::run`]) or
/// through [`Optimizer::ask`] / [`Optimizer::tell`].
pub struct Optimizer {
    space: Arc<SearchSpace>,
    run: RunConfig,
    obs: ObservationSet,
    model: DeepKernelGp,
    adam: Adam,
    sub_models: BTreeMap<usize, SubModel>,
    state: Option<FitState>,
    fitted_on: usize,
    iter: usize,
    initialized: bool,
    pending: Option<Vec<Proposal>>,
    dir: Option<RunDir>,
}

impl Optimizer {
    /// In-memory optimizer.
    pub fn new(space: SearchSpace, run: RunConfig) -> Result<Self, DriverError> {
        run.validate(&space)?;
        let model = initial_model(&space, &run)?;
        Ok(Optimizer {
            space: Arc::new(space),
            run,
            obs: ObservationSet::new(),
            adam: Adam::new(model.n_params()),
            model,
            sub_models: BTreeMap::new(),
            state: None,
            fitted_on: 0,
            iter: 0,
            initialized: false,
            pending: None,
            dir: None,
        })
    }

    /// Optimizer persisting to a new run directory.
    pub fn create(space: SearchSpace, run: RunConfig, dir: &Path, objective: &str) -> Result<Self, DriverError> {
        let mut opt = Optimizer::new(space, run)?;
        opt.dir = Some(RunDir::create(dir, &opt.run, &opt.space, objective)?);
        Ok(opt)
    }

    /// Reopens a run directory at its latest checkpoint. Records written
    /// after that checkpoint are discarded and will be regenerated.
    pub fn resume(space: SearchSpace, dir: &Path, iterations: Option<usize>) -> Result<Self, DriverError> {
        let (mut rd, manifest) = RunDir::open(dir, &space)?;
        let mut run = manifest.run;
        if let Some(t) = iterations {
            run.iterations = t;
            rd.rewrite_manifest(&run)?;
        }
        let mut opt = Optimizer::new(space, run)?;
        let restored = rd.restore(&opt.space)?;
        if let Some((ckpt, obs)) = restored {
            if let Some(c) = &ckpt.model {
                opt.model = warm_model(&opt.space, c, &opt.run.encoder)?;
            }
            if let Some(c) = &ckpt.optimizer {
                opt.adam = adam_from_container(c, opt.model.n_params())?;
            }
            opt.sub_models = ckpt.sub_models;
            opt.iter = ckpt.iter;
            opt.obs = obs;
            opt.initialized = true;
        }
        opt.dir = Some(rd);
        Ok(opt)
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    /// Completed BO iterations (0 during the initial design).
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn model(&self) -> &DeepKernelGp {
        &self.model
    }

    pub fn fit_state(&self) -> Option<&FitState> {
        self.state.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn run_dir(&self) -> Option<&RunDir> {
        self.dir.as_ref()
    }

    fn active(&self) -> Vec<usize> {
        self.run.active(&self.space)
    }

    fn stamp(&self, wall_ms: u64) -> (u64, u64) {
        match self.run.clock {
            Clock::Logical => (0, self.obs.len() as u64),
            Clock::System => {
                let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
                (wall_ms, ts)
            }
        }
    }

    fn record(&mut self, p: &Proposal, outcome: Result<f64, String>, wall_ms: u64) -> Result<ObservationRecord, DriverError> {
        let (wall_ms, ts) = self.stamp(wall_ms);
        let (y, status, error) = match outcome {
            Ok(y) => (Some(y), Status::Ok, None),
            Err(e) => (None, Status::Failed, Some(e)),
        };
        let r = ObservationRecord {
            iter: self.iter,
            config: p.config.clone(),
            y,
            status,
            seed: p.seed,
            wall_ms,
            ts,
            source: p.source,
            error,
        };
        if let Some(dir) = &mut self.dir {
            dir.append(&r)?;
        }
        self.obs.push(r.clone());
        Ok(r)
    }

    fn checkpoint(&mut self) -> Result<(), DriverError> {
        let Some(dir) = &mut self.dir else { return Ok(()) };
        let ckpt = Checkpoint {
            iter: self.iter,
            log_len: self.obs.len(),
            model: (self.run.method == Method::AttnBo).then(|| self.model.to_container()),
            optimizer: (self.run.method == Method::AttnBo).then(|| adam_to_container(&self.adam)),
            sub_models: self.sub_models.clone(),
        };
        dir.write_checkpoint(&ckpt, self.run.keep_checkpoints)
    }

    /// The initial design: `init_per_subspace` seeded draws in every active subspace.
    pub fn initial_design(&self) -> Vec<Proposal> {
        let mut out = Vec::new();
        for id in self.active() {
            for k in 0..self.run.init_per_subspace {
                let seed = derive_seed(self.run.seed, k as u64, id as u64, purpose::INIT);
                let config = self.space.sample(id, seed).expect("validated subspace");
                out.push(Proposal {
                    config,
                    seed,
                    source: Source::Init,
                    score: None,
                });
            }
        }
        out
    }

    /// Evaluates the initial design (no-op once done). A failed point is
    /// logged and retried once with a fresh seed; a second failure aborts.
    pub fn initialize<O: Objective + ?Sized>(&mut self, objective: &O) -> Result<(), DriverError> {
        if self.initialized {
            return Ok(());
        }
        let design = self.initial_design();
        for chunk in design.chunks(self.run.batch) {
            let configs: Vec<Configuration> = chunk.iter().map(|p| p.config.clone()).collect();
            let results = evaluate_all(objective, &configs);
            for (p, (outcome, ms)) in chunk.iter().zip(results) {
                if self.record(p, outcome, ms)?.y.is_some() {
                    continue;
                }
                let seed = derive_seed(p.seed, 0, p.config.subspace_id as u64, purpose::RETRY);
                let retry = Proposal {
                    config: self.space.sample(p.config.subspace_id, seed)?,
                    seed,
                    source: Source::Init,
                    score: None,
                };
                let (outcome, ms) = evaluate_all(objective, std::slice::from_ref(&retry.config)).remove(0);
                let rec = self.record(&retry, outcome, ms)?;
                if rec.y.is_none() {
                    return Err(DriverError::Objective(rec.error.unwrap_or_default()));
                }
            }
        }
        self.initialized = true;
        self.checkpoint()
    }

    /// Refits the unified surrogate if new observations arrived.
    fn refresh_fit(&mut self) -> Result<(), DriverError> {
        if self.state.is_some() && self.fitted_on == self.obs.len() {
            return Ok(());
        }
        let (configs, ys): (Vec<&Configuration>, Vec<f64>) = self.obs.successes().unzip();
        let start = if self.run.fresh_fit {
            self.adam = Adam::new(self.model.n_params());
            initial_model(&self.space, &self.run)?
        } else {
            self.model.clone()
        };
        let state = gp::fit_with(start, &configs, &ys, &self.run.fit, &mut self.adam)?;
        self.model = state.model.clone();
        self.state = Some(state);
        self.fitted_on = self.obs.len();
        Ok(())
    }

    fn propose_attnbo(&mut self, iter: u64) -> Result<Vec<Proposal>, DriverError> {
        if self.obs.n_successes() < 2 {
            return Ok(baselines::propose_random(&self.space, &self.active(), self.run.batch, self.run.seed, iter));
        }
        self.refresh_fit()?;
        let state = self.state.as_ref().expect("fitted");
        let scorer = EiScorer {
            state,
            best_y_std: state.best_y_std(),
        };
        let active = self.active();
        let (results, seeds) = if active.len() > self.run.global_random_threshold {
            let seed = derive_seed(self.run.seed, iter, 0, purpose::GLOBAL);
            let r = acquire::maximize_global_random(
                &scorer,
                &self.space,
                &active,
                self.run.acquisition.budget.max(self.run.batch),
                self.run.batch,
                true,
                seed,
            )?;
            let n = r.len();
            (r, vec![seed; n])
        } else {
            let mut results = Vec::with_capacity(active.len());
            for &id in &active {
                let seed = derive_seed(self.run.seed, iter, id as u64, purpose::ACQUIRE);
                results.push(acquire::maximize_in_subspace(&scorer, &self.space, id, &self.run.acquisition, seed)?);
            }
            let chosen = acquire::select_batch(results, self.run.batch)?;
            let seeds = chosen
                .iter()
                .map(|r| derive_seed(self.run.seed, iter, r.subspace_id as u64, purpose::ACQUIRE))
                .collect();
            (chosen, seeds)
        };
        Ok(results
            .into_iter()
            .zip(seeds)
            .map(|(r, seed)| Proposal {
                config: r.config,
                seed,
                source: Source::Acquisition,
                score: Some(r.ei_value),
            })
            .collect())
    }

    /// Proposals for the next iteration, without evaluating them.
    pub fn ask_proposals(&mut self) -> Result<Vec<Proposal>, DriverError> {
        if !self.initialized {
            return Err(DriverError::Config("initial design not evaluated yet".into()));
        }
        if let Some(p) = &self.pending {
            return Ok(p.clone());
        }
        let iter = self.iter as u64 + 1;
        let proposals = match self.run.method {
            Method::AttnBo => self.propose_attnbo(iter)?,
            Method::RandomSearch => baselines::propose_random(&self.space, &self.active(), self.run.batch, self.run.seed, iter),
            Method::IndependentGp => baselines::propose_independent(
                &self.space,
                &self.obs,
                &self.active(),
                &mut self.sub_models,
                &self.run,
                iter,
            )?,
        };
        self.pending = Some(proposals.clone());
        Ok(proposals)
    }

    /// The next batch of configurations. Repeated calls without an
    /// intervening `tell` return the same batch.
    pub fn ask(&mut self) -> Result<Vec<Configuration>, DriverError> {
        Ok(self.ask_proposals()?.into_iter().map(|p| p.config).collect())
    }

    /// Ingests results (`Err` marks a failed evaluation) as one iteration.
    pub fn tell(&mut self, configs: &[Configuration], outcomes: &[Result<f64, String>]) -> Result<(), DriverError> {
        self.tell_timed(configs, &outcomes.iter().map(|o| (o.clone(), 0)).collect::<Vec<_>>())
    }

    fn tell_timed(&mut self, configs: &[Configuration], outcomes: &[(Result<f64, String>, u64)]) -> Result<(), DriverError> {
        if configs.len() != outcomes.len() {
            return Err(DriverError::Config(format!("{} configurations but {} outcomes", configs.len(), outcomes.len())));
        }
        if !self.initialized {
            return Err(DriverError::Config("initial design not evaluated yet".into()));
        }
        let mut proposals = Vec::with_capacity(configs.len());
        for c in configs {
            let checked = self.space.make_config(c.subspace_id, c.raw.clone())?;
            if checked.tokens != c.tokens {
                return Err(SpaceError::Malformed("configuration tokens disagree with the space".into()).into());
            }
            let asked = self.pending.as_ref().and_then(|ps| ps.iter().find(|p| &p.config == c));
            proposals.push(match asked {
                Some(p) => p.clone(),
                None => Proposal {
                    config: checked,
                    seed: 0,
                    source: Source::External,
                    score: None,
                },
            });
        }
        self.iter += 1;
        self.pending = None;
        for (p, (outcome, ms)) in proposals.iter().zip(outcomes) {
            self.record(p, outcome.clone(), *ms)?;
        }
        self.checkpoint()
    }

    /// One iteration: ask, evaluate the batch concurrently, tell.
    pub fn step<O: Objective + ?Sized>(&mut self, objective: &O) -> Result<(), DriverError> {
        let configs = self.ask()?;
        let results = evaluate_all(objective, &configs);
        self.tell_timed(&configs, &results)
    }

    /// Runs until `min(stop_at, iterations)` iterations are complete.
    pub fn run_until<O: Objective + ?Sized>(&mut self, objective: &O, stop_at: usize) -> Result<(), DriverError> {
        self.initialize(objective)?;
        while self.iter < stop_at.min(self.run.iterations) {
            self.step(objective)?;
        }
        Ok(())
    }

    /// Runs to completion and writes the summary.
    pub fn run<O: Objective + ?Sized>(&mut self, objective: &O) -> Result<RunSummary, DriverError> {
        self.run_until(objective, self.run.iterations)?;
        let summary = self.summary(objective);
        if let Some(dir) = &self.dir {
            dir.write_summary(&summary)?;
        }
        Ok(summary)
    }

    pub fn summary<O: Objective + ?Sized>(&self, objective: &O) -> RunSummary {
        let best = self.obs.best();
        let optimum = objective.optimum();
        RunSummary {
            method: self.run.method,
            objective: objective.name(),
            iterations: self.iter,
            evaluations: self.obs.len(),
            failures: self.obs.records.iter().filter(|r| r.status == Status::Failed).count(),
            best_y: best.and_then(|r| r.y),
            best_subspace: best.map(|r| r.subspace_id()),
            best_config: best.map(|r| config_to_json(&r.config)),
            optimum,
            log10_regret: match (best.and_then(|r| r.y), optimum) {
                (Some(y), Some(o)) => Some(crate::bench::log10_regret(y, o)),
                _ => None,
            },
        }
    }
}
