//! Aggregation of sweep runs into comparison tables.
//!
//! A run directory holds the resolved `config.json` written by `clim pretrain`
//! and an `eval.tsv` of `metric<TAB>value<TAB>seed` lines appended by
//! `clim eval --save`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{ClimError, Result};
use crate::numerics::{mean, sample_std};

pub const METRICS: [&str; 3] = ["linear", "knn", "intra_sim"];

/// Configuration identity of a run (everything but the seed).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub strategy: String,
    pub mixing: String,
    pub resolutions: String,
    pub alpha: String,
    pub m: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub key: RunKey,
    pub seed: u64,
    pub linear: Option<f64>,
    pub knn: Option<f64>,
    pub intra_sim: Option<f64>,
}

impl SweepRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "linear" => self.linear,
            "knn" => self.knn,
            "intra_sim" => self.intra_sim,
            _ => None,
        }
    }

    fn metric_mut(&mut self, name: &str) -> Option<&mut Option<f64>> {
        match name {
            "linear" => Some(&mut self.linear),
            "knn" => Some(&mut self.knn),
            "intra_sim" => Some(&mut self.intra_sim),
            _ => None,
        }
    }
}

pub fn run_key(cfg: &RunConfig) -> RunKey {
    let t = &cfg.train;
    RunKey {
        strategy: t.strategy.to_string(),
        mixing: t.mixing.to_string(),
        resolutions: cfg
            .augment
            .resolutions
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(","),
        alpha: cfg.augment.alpha.to_string(),
        m: cfg.neighborhood.clusters.map_or_else(|| "auto".into(), |m| m.to_string()),
        k: cfg.neighborhood.knn_k,
    }
}

/// Parses `metric<TAB>value<TAB>seed` lines; each metric's value is the mean
/// over its seed lines. `mean` summary lines and malformed lines are skipped,
/// the latter with a warning.
pub fn parse_eval_lines(text: &str, key: RunKey, seed: u64) -> SweepRow {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = match fields.as_slice() {
            [metric, value, seed] if *seed != "mean" => value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .filter(|_| seed.parse::<u64>().is_ok())
                .map(|v| (metric.to_string(), v)),
            [_, _, _] => continue,
            _ => None,
        };
        match parsed {
            Some((metric, v)) if METRICS.contains(&metric.as_str()) => sums.entry(metric).or_default().push(v),
            _ => log::warn!("skipping malformed metric line {}: {line:?}", n + 1),
        }
    }
    let mut row = SweepRow {
        key,
        seed,
        linear: None,
        knn: None,
        intra_sim: None,
    };
    for (metric, vals) in sums {
        if let Some(slot) = row.metric_mut(&metric) {
            *slot = Some(mean(&vals));
        }
    }
    row
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<SweepRow> {
    let dir = dir.as_ref();
    let cfg = RunConfig::load(dir.join("config.json"))?;
    let eval_path = dir.join("eval.tsv");
    let text = std::fs::read_to_string(&eval_path).map_err(|e| ClimError::io(&eval_path, e))?;
    Ok(parse_eval_lines(&text, run_key(&cfg), cfg.train.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub key: RunKey,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

fn cmp_rows(a: &SweepRow, b: &SweepRow) -> std::cmp::Ordering {
    let vals = |r: &SweepRow| METRICS.map(|m| r.metric(m).unwrap_or(f64::NEG_INFINITY));
    a.key
        .cmp(&b.key)
        .then(a.seed.cmp(&b.seed))
        .then_with(|| {
            vals(a)
                .iter()
                .zip(vals(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Groups rows by configuration and summarizes every metric as mean and
/// sample standard deviation over seeds. A repeated (configuration, seed)
/// pair is kept once, with a warning. Output is sorted by configuration and
/// does not depend on input order.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(cmp_rows);
    let mut groups: BTreeMap<RunKey, Vec<SweepRow>> = BTreeMap::new();
    for row in sorted {
        let group = groups.entry(row.key.clone()).or_default();
        if group.iter().any(|r| r.seed == row.seed) {
            log::warn!("duplicate seed {} for {:?}; keeping the first", row.seed, row.key);
            continue;
        }
        group.push(row);
    }
    groups
        .into_iter()
        .map(|(key, group)| {
            let mut metrics = BTreeMap::new();
            for m in METRICS {
                let vals: Vec<f64> = group.iter().filter_map(|r| r.metric(m)).collect();
                if !vals.is_empty() {
                    let std = if vals.len() > 1 { sample_std(&vals) } else { 0.0 };
                    metrics.insert(
                        m.to_string(),
                        MetricSummary {
                            mean: mean(&vals),
                            std,
                            n: vals.len(),
                        },
                    );
                }
            }
            AggregateRow {
                key,
                seeds: group.iter().map(|r| r.seed).collect(),
                metrics,
            }
        })
        .collect()
}

pub fn format_table(table: &[AggregateRow]) -> String {
    let mut out = String::from("strategy\tmixing\tresolutions\talpha\tm\tk\tseeds");
    for m in METRICS {
        let _ = write!(out, "\t{m}_mean\t{m}_std");
    }
    out.push('\n');
    for row in table {
        let k = &row.key;
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            k.strategy,
            k.mixing,
            k.resolutions,
            k.alpha,
            k.m,
            k.k,
            row.seeds.len()
        );
        for m in METRICS {
            match row.metrics.get(m) {
                Some(s) => {
                    let _ = write!(out, "\t{:.4}\t{:.4}", s.mean, s.std);
                }
                None => out.push_str("\t-\t-"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRank {
    pub label: String,
    pub mean_linear: f64,
    /// Gap to the next entry in the ordering; `None` for the last one.
    pub delta_to_next: Option<f64>,
    /// Mean equal to the next entry's.
    pub tie: bool,
}

/// Configurations ordered by mean linear-probe accuracy, best first, with the
/// gap to the following entry.
pub fn compare_strategies(table: &[AggregateRow]) -> Vec<StrategyRank> {
    let mut entries: Vec<(String, f64)> = table
        .iter()
        .filter_map(|row| {
            let lin = row.metrics.get("linear")?.mean;
            let k = &row.key;
            Some((format!("{}+{}@{}", k.strategy, k.mixing, k.resolutions), lin))
        })
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(entries.len());
    for i in 0..entries.len() {
        let delta = entries.get(i + 1).map(|next| entries[i].1 - next.1);
        out.push(StrategyRank {
            label: entries[i].0.clone(),
            mean_linear: entries[i].1,
            delta_to_next: delta,
            tie: delta == Some(0.0),
        });
    }
    out
}

pub fn format_ranking(ranks: &[StrategyRank]) -> String {
    let mut out = String::from("rank\tconfig\tlinear_mean\tdelta_to_next\ttie\n");
    for (i, r) in ranks.iter().enumerate() {
        let delta = r.delta_to_next.map_or_else(|| "-".into(), |d| format!("{d:.4}"));
        let _ = writeln!(out, "{}\t{}\t{:.4}\t{}\t{}", i + 1, r.label, r.mean_linear, delta, r.tie);
    }
    out
}

/// Parsed output of `clim select`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionDump {
    pub anchor: usize,
    pub cluster: usize,
    pub center_distance: f64,
    pub omega1: usize,
    pub omega2: usize,
    pub omega_p: usize,
    /// `(set, index, distance)` rows in output order. The distance is to the
    /// anchor for `omega1` and `omega2` members and to the cluster center for
    /// `omega_p` members.
    pub members: Vec<(String, usize, f64)>,
}

impl SelectionDump {
    pub fn members_of(&self, set: &str) -> Vec<(usize, f64)> {
        self.members
            .iter()
            .filter(|(s, _, _)| s == set)
            .map(|&(_, i, d)| (i, d))
            .collect()
    }
}

pub fn parse_selection_dump(text: &str) -> Result<SelectionDump> {
    let mut dump = SelectionDump::default();
    let bad = |line: &str| ClimError::invalid(format!("malformed selection line {line:?}"));
    let mut seen_anchor = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
        match f.as_slice() {
            ["anchor", v] => {
                dump.anchor = int(v)?;
                seen_anchor = true;
            }
            ["cluster", v] => dump.cluster = int(v)?,
            ["center_distance", v] => dump.center_distance = v.parse().map_err(|_| bad(line))?,
            ["omega1", v] => dump.omega1 = int(v)?,
            ["omega2", v] => dump.omega2 = int(v)?,
            ["omega_p", v] => dump.omega_p = int(v)?,
            ["member", set, idx, dist] if ["omega1", "omega2", "omega_p"].contains(set) => {
                dump.members
                    .push((set.to_string(), int(idx)?, dist.parse().map_err(|_| bad(line))?));
            }
            _ => return Err(bad(line)),
        }
    }
    if !seen_anchor {
        return Err(ClimError::invalid("selection dump has no anchor line"));
    }
    for (set, n) in [("omega1", dump.omega1), ("omega2", dump.omega2), ("omega_p", dump.omega_p)] {
        let listed = dump.members_of(set).len();
        if listed != n {
            return Err(ClimError::invalid(format!("{set} lists {listed} members but declares {n}")));
        }
    }
    Ok(dump)
}
