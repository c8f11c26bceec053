//! Best-so-far curves and their aggregation into CSV plot data.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::log10_regret;
use crate::driver::ObservationSet;

pub const CURVE_HEADER: &str = "method,seed,iter,evals,best_y,log10_regret,wall_ms";
pub const AGGREGATE_HEADER: &str = "method,iter,evals,n,median_best_y,median_log10_regret,q25_log10_regret,q75_log10_regret";

/// Incumbent after one iteration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub seed: u64,
    /// 0 is the state after the initial design.
    pub iter: usize,
    /// Evaluations so far.
    pub evals: usize,
    pub best_y: f64,
    pub log10_regret: Option<f64>,
    /// Cumulative evaluation time.
    pub wall_ms: u64,
}

/// One point per iteration present in the log.
pub fn curve(method: &str, seed: u64, obs: &ObservationSet, optimum: Option<f64>) -> Vec<CurvePoint> {
    let mut out: Vec<CurvePoint> = Vec::new();
    let mut best = f64::INFINITY;
    let mut wall = 0;
    for (n, r) in obs.records.iter().enumerate() {
        if let Some(y) = r.y {
            best = best.min(y);
        }
        wall += r.wall_ms;
        let point = CurvePoint {
            method: method.to_string(),
            seed,
            iter: r.iter,
            evals: n + 1,
            best_y: best,
            log10_regret: optimum.filter(|_| best.is_finite()).map(|o| log10_regret(best, o)),
            wall_ms: wall,
        };
        match out.last_mut() {
            Some(last) if last.iter == r.iter => *last = point,
            _ => out.push(point),
        }
    }
    out
}

/// Incumbent after the first `evals` evaluations.
pub fn best_after(obs: &ObservationSet, evals: usize) -> Option<f64> {
    obs.records.iter().take(evals).filter_map(|r| r.y).reduce(f64::min)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.method,
            p.seed,
            p.iter,
            p.evals,
            p.best_y,
            fmt_opt(p.log10_regret),
            p.wall_ms
        )
        .expect("string write");
    }
    s
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurvePoint>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(format!("expected header `{CURVE_HEADER}`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let err = |what: &str| format!("line {}: bad {what}", i + 1);
        if f.len() != 7 {
            return Err(err("field count"));
        }
        out.push(CurvePoint {
            method: f[0].to_string(),
            seed: f[1].parse().map_err(|_| err("seed"))?,
            iter: f[2].parse().map_err(|_| err("iter"))?,
            evals: f[3].parse().map_err(|_| err("evals"))?,
            best_y: f[4].parse().map_err(|_| err("best_y"))?,
            log10_regret: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| err("log10_regret"))?) },
            wall_ms: f[6].parse().map_err(|_| err("wall_ms"))?,
        });
    }
    Ok(out)
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub method: String,
    pub iter: usize,
    pub evals: f64,
    pub n: usize,
    pub median_best_y: f64,
    pub median_log10_regret: Option<f64>,
    pub q25_log10_regret: Option<f64>,
    pub q75_log10_regret: Option<f64>,
}

/// Medians and quartiles across seeds per `(method, iter)`, sorted by key.
pub fn aggregate(points: &[CurvePoint]) -> Vec<AggregatePoint> {
    let mut groups: BTreeMap<(&str, usize), Vec<&CurvePoint>> = BTreeMap::new();
    for p in points {
        groups.entry((&p.method, p.iter)).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|((method, iter), ps)| {
            let best: Vec<f64> = ps.iter().map(|p| p.best_y).collect();
            let evals: Vec<f64> = ps.iter().map(|p| p.evals as f64).collect();
            let regrets: Vec<f64> = ps.iter().filter_map(|p| p.log10_regret).collect();
            AggregatePoint {
                method: method.to_string(),
                iter,
                evals: median(&evals).unwrap_or(0.0),
                n: ps.len(),
                median_best_y: median(&best).unwrap_or(f64::NAN),
                median_log10_regret: median(&regrets),
                q25_log10_regret: quantile(&regrets, 0.25),
                q75_log10_regret: quantile(&regrets, 0.75),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregatePoint]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.iter,
            r.evals,
            r.n,
            r.median_best_y,
            fmt_opt(r.median_log10_regret),
            fmt_opt(r.q25_log10_regret),
            fmt_opt(r.q75_log10_regret)
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(method: &str, seed: u64, iter: usize, best: f64) -> CurvePoint {
        CurvePoint {
            method: method.into(),
            seed,
            iter,
            evals: 8 + iter,
            best_y: best,
            log10_regret: Some(log10_regret(best, 0.1)),
            wall_ms: 0,
        }
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(quantile(&[0.0, 10.0], 0.25), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn aggregate_ignores_run_order() {
        let mut pts = Vec::new();
        for seed in 0..5 {
            for iter in 0..4 {
                pts.push(point(if seed % 2 == 0 { "a" } else { "b" }, seed, iter, 1.0 / (1 + seed + iter as u64) as f64));
            }
        }
        let fwd = aggregate(&pts);
        pts.reverse();
        pts.swap(1, 7);
        assert_eq!(aggregate(&pts), fwd);
        assert_eq!(fwd.len(), 8);
    }

    #[test]
    fn csv_round_trip() {
        let pts = vec![point("attnbo", 3, 0, 0.5), point("random", 4, 2, 0.25)];
        assert_eq!(parse_curves_csv(&curves_csv(&pts)).unwrap(), pts);
        assert!(parse_curves_csv("nope\n").is_err());
    }
}
