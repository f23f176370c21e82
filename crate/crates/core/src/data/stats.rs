use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use super::Record;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioStats {
    /// `None` for the row pooling every scenario.
    pub scenario: Option<u64>,
    pub users: usize,
    pub items: usize,
    pub impressions: usize,
    pub ctr: f64,
    /// Fraction of distinct users seen here whose history is empty.
    pub csu_ratio: f64,
    /// Scenario id outside the configured range (accepted through hashing).
    pub unknown: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub scenarios: Vec<ScenarioStats>,
    pub overall: ScenarioStats,
}

fn summarize(scenario: Option<u64>, records: &[&Record], known: Option<usize>) -> ScenarioStats {
    let mut users = HashSet::new();
    let mut cold = HashSet::new();
    let mut items = HashSet::new();
    let mut clicks = 0usize;
    for r in records {
        users.insert(r.user_id);
        if r.is_cold() {
            cold.insert(r.user_id);
        }
        items.insert(r.item_id);
        clicks += r.label as usize;
    }
    ScenarioStats {
        scenario,
        users: users.len(),
        items: items.len(),
        impressions: records.len(),
        ctr: clicks as f64 / records.len() as f64,
        csu_ratio: cold.len() as f64 / users.len() as f64,
        unknown: match (scenario, known) {
            (Some(s), Some(k)) => s as usize >= k,
            _ => false,
        },
    }
}

/// Per-scenario user, item and impression counts, click rate and cold-start
/// user ratio. With `known_scenarios = Some(k)`, ids `>= k` are flagged.
pub fn stats(records: &[Record], known_scenarios: Option<usize>) -> Result<Stats> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to summarize".into()));
    }
    let mut by: BTreeMap<u64, Vec<&Record>> = BTreeMap::new();
    for r in records {
        by.entry(r.scenario).or_default().push(r);
    }
    let scenarios = by
        .iter()
        .map(|(&s, rs)| summarize(Some(s), rs, known_scenarios))
        .collect();
    let all: Vec<&Record> = records.iter().collect();
    Ok(Stats {
        scenarios,
        overall: summarize(None, &all, known_scenarios),
    })
}

impl Stats {
    fn rows(&self) -> impl Iterator<Item = &ScenarioStats> {
        self.scenarios.iter().chain(std::iter::once(&self.overall))
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>8} {:>8} {:>11} {:>8} {:>10}\n",
            "scenario", "#user", "#item", "#impression", "ctr", "csu_ratio"
        );
        for s in self.rows() {
            let name = s.scenario.map_or("all".to_string(), |v| v.to_string());
            let _ = write!(
                out,
                "{:<10} {:>8} {:>8} {:>11} {:>8.4} {:>9.2}%",
                name,
                s.users,
                s.items,
                s.impressions,
                s.ctr,
                100.0 * s.csu_ratio
            );
            if s.unknown {
                out.push_str("  (unknown scenario id)");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,users,items,impressions,ctr,csu_ratio,unknown\n");
        for s in self.rows() {
            let name = s.scenario.map_or("all".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{name},{},{},{},{:.6},{:.6},{}",
                s.users, s.items, s.impressions, s.ctr, s.csu_ratio, s.unknown
            );
        }
        out
    }
}
