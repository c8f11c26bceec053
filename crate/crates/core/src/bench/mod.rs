//! Built-in objectives, synthetic meta-tasks and the comparison harness.

pub mod baselines;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::{
    derive_seed, DriverError, MetaTask, MetaTaskSet, Method, Objective, ObservationRecord, ObservationSet, Optimizer,
    RunConfig, Source, Status,
};
use crate::space::{fixtures, Configuration, SearchSpace, Value};

pub const JENATTON_OPTIMUM: f64 = 0.1;

/// `log10(max(best - optimum, 1e-12))`.
pub fn log10_regret(best_y: f64, optimum: f64) -> f64 {
    (best_y - optimum).max(1e-12).log10()
}

fn get(raw: &BTreeMap<String, Value>, key: &str) -> Result<f64, String> {
    raw.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("missing numeric `{key}`"))
}

/// Leaf index (0..4) and the leaf and shared variables of a Jenatton
/// configuration; keys must be exactly those of the active branch.
fn jenatton_parts(raw: &BTreeMap<String, Value>, ignore: &[&str]) -> Result<(usize, f64, f64), String> {
    let x1 = get(raw, "x1")?;
    let (decision, leaves, r) = match x1 {
        v if v == 0.0 => ("x2", ["x4", "x5"], "r8"),
        v if v == 1.0 => ("x3", ["x6", "x7"], "r9"),
        v => return Err(format!("x1 = {v} is not a branch")),
    };
    let branch = get(raw, decision)?;
    let side = match branch {
        v if v == 0.0 => 0,
        v if v == 1.0 => 1,
        v => return Err(format!("{decision} = {v} is not a branch")),
    };
    let leaf = leaves[side];
    let expected = ["x1", decision, leaf, r];
    if let Some(extra) = raw.keys().find(|k| !expected.contains(&k.as_str()) && !ignore.contains(&k.as_str())) {
        return Err(format!("`{extra}` is inactive in this branch"));
    }
    let index = if x1 == 0.0 { side } else { 2 + side };
    Ok((index, get(raw, leaf)?, get(raw, r)?))
}

const LEAF_CONSTANTS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// The four-leaf conditional test function: the leaf variable squared plus
/// the leaf constant plus the branch's shared variable. Minimum 0.1.
pub fn jenatton_eval(raw: &BTreeMap<String, Value>) -> Result<f64, String> {
    let (leaf, x, r) = jenatton_parts(raw, &[])?;
    Ok(x * x + LEAF_CONSTANTS[leaf] + r)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Jenatton;

impl Objective for Jenatton {
    fn name(&self) -> String {
        "builtin:jenatton".into()
    }

    fn evaluate(&self, config: &Configuration) -> Result<f64, String> {
        jenatton_eval(&config.raw)
    }

    fn optimum(&self) -> Option<f64> {
        Some(JENATTON_OPTIMUM)
    }
}

/// The benchmark space (continuous shared variables).
pub fn jenatton_space() -> SearchSpace {
    SearchSpace::parse(fixtures::JENATTON).expect("bundled space parses")
}

/// One shifted and scaled Jenatton variant living in the `task = id`
/// branch of a union space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskObjective {
    pub task_id: usize,
    /// Location of each leaf's minimum.
    pub shifts: [f64; 4],
    pub scale: f64,
}

impl TaskObjective {
    pub fn eval_raw(&self, raw: &BTreeMap<String, Value>) -> Result<f64, String> {
        let task = get(raw, "task")?;
        if task != self.task_id as f64 {
            return Err(format!("configuration belongs to task {task}, not {}", self.task_id));
        }
        let (leaf, x, r) = jenatton_parts(raw, &["task"])?;
        Ok(self.scale * ((x - self.shifts[leaf]).powi(2) + LEAF_CONSTANTS[leaf] + r))
    }
}

impl Objective for TaskObjective {
    fn name(&self) -> String {
        format!("builtin:task{}", self.task_id)
    }

    fn evaluate(&self, config: &Configuration) -> Result<f64, String> {
        self.eval_raw(&config.raw)
    }

    fn optimum(&self) -> Option<f64> {
        Some(self.scale * LEAF_CONSTANTS[0])
    }
}

/// Union space whose root `task` choice selects one copy of the Jenatton tree.
pub fn union_space_text(n_tasks: usize) -> String {
    let ids: Vec<String> = (0..n_tasks).map(|i| i.to_string()).collect();
    let mut s = format!("task:\n  type: choice\n  range: {{{}}}\n  submodule:\n", ids.join(", "));
    for id in &ids {
        s.push_str(&format!("    {id}:\n"));
        for line in fixtures::JENATTON.lines() {
            if line.trim().is_empty() {
                continue;
            }
            s.push_str("      ");
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

/// Subspaces of the union space belonging to `task_id`.
pub fn task_subspaces(space: &SearchSpace, task_id: usize) -> Vec<usize> {
    space
        .subspaces
        .iter()
        .filter(|s| s.decisions.get("task").and_then(Value::as_f64) == Some(task_id as f64))
        .map(|s| s.id)
        .collect()
}

pub const META_OBSERVATIONS: usize = 50;

/// `n_tasks` random Jenatton variants (leaf minima shifted uniformly in
/// `[-0.5, 0.5]`, values scaled uniformly in `[0.5, 2]`), each with 50
/// uniform observations from its own branch.
pub fn make_meta_tasks(n_tasks: usize, seed: u64) -> (MetaTaskSet, Vec<TaskObjective>) {
    assert!(n_tasks >= 1, "at least one task");
    let space = SearchSpace::parse(&union_space_text(n_tasks)).expect("union space parses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objectives = Vec::with_capacity(n_tasks);
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let obj = TaskObjective {
            task_id: t,
            shifts: std::array::from_fn(|_| rng.random_range(-0.5..=0.5)),
            scale: rng.random_range(0.5..=2.0),
        };
        let subs = task_subspaces(&space, t);
        let mut obs = ObservationSet::new();
        for k in 0..META_OBSERVATIONS {
            let s = derive_seed(seed, t as u64, k as u64, 0);
            let config = space.sample(subs[k % subs.len()], s).expect("task subspace");
            let y = obj.evaluate(&config).expect("own branch");
            obs.push(ObservationRecord {
                iter: 0,
                config,
                y: Some(y),
                status: Status::Ok,
                seed: s,
                wall_ms: 0,
                ts: k as u64,
                source: Source::Offline,
                error: None,
            });
        }
        tasks.push(MetaTask {
            task_id: t,
            observations: obs,
        });
        objectives.push(obj);
    }
    (MetaTaskSet { space, tasks }, objectives)
}

/// One finished benchmark run.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub method: Method,
    pub seed: u64,
    pub observations: ObservationSet,
    pub dir: Option<PathBuf>,
}

/// Runs every `(method, seed)` pair with `base` as template, using up to
/// `jobs` worker threads. Each run gets `out/<method>/seed_<k>` when `out`
/// is set. Results are ordered by method then seed.
pub fn run_matrix<O: Objective>(
    space: &SearchSpace,
    objective: &O,
    methods: &[Method],
    seeds: &[u64],
    base: &RunConfig,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<BenchRun>, DriverError> {
    let work: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<BenchRun, DriverError>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(method, seed)) = work.get(i) else { break };
        let r = (|| {
            let run = RunConfig {
                method,
                seed,
                ..base.clone()
            };
            let dir = out.map(|o| o.join(method.label()).join(format!("seed_{seed}")));
            let mut opt = match &dir {
                Some(d) => Optimizer::create(space.clone(), run, d, &objective.name())?,
                None => Optimizer::new(space.clone(), run)?,
            };
            opt.run(objective)?;
            Ok(BenchRun {
                method,
                seed,
                observations: opt.observations().clone(),
                dir,
            })
        })();
        results.lock().expect("results lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            s.spawn(worker);
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(pairs: &[(&str, f64)]) -> BTreeMap<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| {
                let v = if ["x1", "x2", "x3"].contains(k) {
                    Value::Int(*v as i64)
                } else {
                    Value::Float(*v)
                };
                (k.to_string(), v)
            })
            .collect()
    }

    #[test]
    fn jenatton_cases() {
        assert_eq!(jenatton_eval(&raw(&[("x1", 0.0), ("x2", 0.0), ("x4", 0.0), ("r8", 0.0)])), Ok(0.1));
        let v = jenatton_eval(&raw(&[("x1", 1.0), ("x3", 1.0), ("x7", 0.5), ("r9", 0.5)])).unwrap();
        assert!((v - 1.15).abs() < 1e-15);
        assert!(jenatton_eval(&raw(&[("x1", 0.0), ("x2", 0.0), ("x4", 0.0), ("r8", 0.0), ("x5", 0.3)])).is_err());
        assert!(jenatton_eval(&raw(&[("x1", 0.0), ("x2", 0.0), ("x4", 0.0)])).is_err());
    }

    #[test]
    fn jenatton_lower_bound_on_samples() {
        let space = jenatton_space();
        for id in 1..=4 {
            for seed in 0..200 {
                let c = space.sample(id, seed).unwrap();
                assert!(Jenatton.evaluate(&c).unwrap() >= 0.1);
            }
        }
    }

    #[test]
    fn regret_examples() {
        assert_eq!(log10_regret(1.1, 0.1), 0.0);
        assert_eq!(log10_regret(0.1, 0.1), -12.0);
        assert!((log10_regret(0.15, 0.1) - 0.05f64.log10()).abs() < 1e-12);
        assert!((log10_regret(0.15, 0.1) + 1.301).abs() < 1e-3);
    }

    #[test]
    fn meta_tasks_are_distinct_and_branch_local() {
        let (set, objs) = make_meta_tasks(5, 3);
        assert_eq!(set.space.subspaces.len(), 20);
        for (t, task) in set.tasks.iter().enumerate() {
            assert_eq!(task.observations.len(), META_OBSERVATIONS);
            let own = task_subspaces(&set.space, t);
            assert_eq!(own.len(), 4);
            assert!(task.observations.records.iter().all(|r| own.contains(&r.subspace_id())));
            let opt = objs[t].optimum().unwrap();
            assert!(task.observations.successes().all(|(_, y)| y >= opt));
        }
        for a in 0..5 {
            for b in 0..a {
                assert_ne!(objs[a].shifts, objs[b].shifts);
            }
        }
        let c = set.space.sample(task_subspaces(&set.space, 1)[0], 0).unwrap();
        assert!(objs[0].evaluate(&c).is_err());
    }
}
