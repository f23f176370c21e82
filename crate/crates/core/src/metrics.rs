//! Ranking metrics and comparison reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Probability that a random positive scores above a random negative, ties
/// counting one half, via the rank-sum statistic.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, tied runs sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += mean_rank * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Relative improvement in percent: `((auc_target − 0.5) / (auc_base − 0.5) − 1) · 100`.
pub fn ri(auc_target: f64, auc_base: f64) -> Result<f64> {
    if auc_base <= 0.5 || !auc_base.is_finite() {
        return Err(Error::UndefinedMetric(format!("relative improvement needs a base AUC above 0.5, got {auc_base}")));
    }
    Ok(((auc_target - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAuc {
    pub n: usize,
    /// `None` when the group holds a single class.
    pub auc: Option<f64>,
}

/// AUC per group plus the pooled value over every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedAuc {
    pub groups: BTreeMap<String, GroupAuc>,
    pub overall: GroupAuc,
}

fn group_auc(scores: &[f64], labels: &[f64]) -> Result<GroupAuc> {
    match auc(scores, labels) {
        Ok(a) => Ok(GroupAuc {
            n: scores.len(),
            auc: Some(a),
        }),
        Err(Error::UndefinedMetric(_)) => Ok(GroupAuc {
            n: scores.len(),
            auc: None,
        }),
        Err(e) => Err(e),
    }
}

/// Groups by `keys` (for instance the scenario id) and scores each group.
pub fn auc_by_group<K: ToString>(scores: &[f64], labels: &[f64], keys: &[K]) -> Result<GroupedAuc> {
    if keys.len() != scores.len() {
        return Err(Error::dim("auc_by_group", &[scores.len()], &[keys.len()]));
    }
    let mut buckets: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((s, y), k) in scores.iter().zip(labels).zip(keys) {
        let e = buckets.entry(k.to_string()).or_default();
        e.0.push(*s);
        e.1.push(*y);
    }
    let groups = buckets
        .into_iter()
        .map(|(k, (s, y))| Ok((k, group_auc(&s, &y)?)))
        .collect::<Result<_>>()?;
    Ok(GroupedAuc {
        groups,
        overall: group_auc(scores, labels)?,
    })
}

/// Evaluation of one trained run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    /// Run family, typically the variant or sweep value.
    pub name: String,
    pub seed: u64,
    pub aucs: GroupedAuc,
}

/// How the RI column is filled.
#[derive(Clone, Debug, PartialEq)]
pub enum Comparison {
    /// No RI column.
    None,
    /// Each row's improvement over the named run family.
    OverBaseline(String),
    /// The named run family's improvement over each row.
    TargetOver(String),
}

pub const CSV_HEADER: &str = "run,scenario,n,auc,ri";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
    /// Scenario-set differences between runs, one line each.
    pub mismatches: Vec<String>,
}

struct Row {
    run: String,
    family: String,
    seed: Option<u64>,
    cells: BTreeMap<String, GroupAuc>,
}

const OVERALL: &str = "overall";

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Renders per-seed rows and, for families with several seeds, a mean row.
/// Scenario columns follow the union of all runs' scenarios; a run lacking
/// some of them is listed in [`Report::mismatches`].
pub fn report(runs: &[RunMetrics], comparison: &Comparison) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run".into()));
    }
    let scenarios: BTreeSet<String> = runs.iter().flat_map(|r| r.aucs.groups.keys().cloned()).collect();
    let mut mismatches = Vec::new();
    for r in runs {
        let own: BTreeSet<&String> = r.aucs.groups.keys().collect();
        let missing: Vec<&str> = scenarios.iter().filter(|s| !own.contains(s)).map(String::as_str).collect();
        if !missing.is_empty() {
            mismatches.push(format!("{}/seed={} lacks scenarios {}", r.name, r.seed, missing.join(",")));
        }
    }

    let mut families: Vec<String> = Vec::new();
    for r in runs {
        if !families.contains(&r.name) {
            families.push(r.name.clone());
        }
    }
    let mut rows = Vec::new();
    for fam in &families {
        let members: Vec<&RunMetrics> = runs.iter().filter(|r| &r.name == fam).collect();
        for r in &members {
            let mut cells = r.aucs.groups.clone();
            cells.insert(OVERALL.into(), r.aucs.overall.clone());
            rows.push(Row {
                run: format!("{}/seed={}", r.name, r.seed),
                family: fam.clone(),
                seed: Some(r.seed),
                cells,
            });
        }
        if members.len() > 1 {
            let mut cells = BTreeMap::new();
            for key in scenarios.iter().map(String::as_str).chain([OVERALL]) {
                let picked: Vec<&GroupAuc> = members
                    .iter()
                    .filter_map(|r| if key == OVERALL { Some(&r.aucs.overall) } else { r.aucs.groups.get(key) })
                    .collect();
                let aucs: Vec<f64> = picked.iter().filter_map(|c| c.auc).collect();
                let defined = aucs.len() == picked.len();
                cells.insert(
                    key.to_string(),
                    GroupAuc {
                        n: picked.iter().map(|c| c.n).sum(),
                        auc: if defined { mean(&aucs) } else { None },
                    },
                );
            }
            rows.push(Row {
                run: format!("{fam}/mean"),
                family: fam.clone(),
                seed: None,
                cells,
            });
        }
    }

    let reference = match comparison {
        Comparison::None => None,
        Comparison::OverBaseline(name) | Comparison::TargetOver(name) => {
            if !families.contains(name) {
                return Err(Error::InvalidArgument(format!("no run named `{name}` to compare against")));
            }
            Some(name.as_str())
        }
    };
    let ri_of = |row: &Row, key: &str| -> Option<f64> {
        let name = reference?;
        let partner = rows.iter().find(|o| o.family == name && o.seed == row.seed)?;
        let mine = row.cells.get(key)?.auc?;
        let theirs = partner.cells.get(key)?.auc?;
        match comparison {
            Comparison::OverBaseline(_) => ri(mine, theirs).ok(),
            Comparison::TargetOver(_) => ri(theirs, mine).ok(),
            Comparison::None => None,
        }
    };

    let fmt_auc = |a: Option<f64>| a.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let fmt_ri = |r: Option<f64>| r.map_or("-".to_string(), |v| format!("{v:+.2}%"));
    let columns: Vec<&str> = scenarios.iter().map(String::as_str).chain([OVERALL]).collect();
    let run_width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let col_width = columns.iter().map(|c| c.len()).max().unwrap_or(0).max(if reference.is_some() { 17 } else { 9 });

    let mut text = String::new();
    let _ = write!(text, "{:<run_width$}", "run");
    for c in &columns {
        let _ = write!(text, "  {c:>col_width$}");
    }
    text.push('\n');
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        let _ = write!(text, "{:<run_width$}", row.run);
        for c in &columns {
            let cell = row.cells.get(*c);
            let shown = match cell {
                None => "missing".to_string(),
                Some(g) if reference.is_some() => format!("{} ({})", fmt_auc(g.auc), fmt_ri(ri_of(row, c))),
                Some(g) => fmt_auc(g.auc),
            };
            let _ = write!(text, "  {shown:>col_width$}");
            if let Some(g) = cell {
                let ri_cell = if reference.is_some() {
                    ri_of(row, c).map_or(String::new(), |v| format!("{v:.6}"))
                } else {
                    String::new()
                };
                let auc_cell = g.auc.map_or("undefined".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(csv, "{},{},{},{},{}", row.run, c, g.n, auc_cell, ri_cell);
            }
        }
        text.push('\n');
    }
    for m in &mismatches {
        let _ = writeln!(text, "scenario mismatch: {m}");
    }
    Ok(Report { text, csv, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(scores: &[f64], labels: &[f64]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.9], &[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn rank_sum_equals_all_pairs(pairs in prop::collection::vec((0u8..12, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = pairs.iter().map(|&(s, _)| s as f64 / 4.0).collect();
            let labels: Vec<f64> = pairs.iter().map(|&(_, y)| y as u8 as f64).collect();
            prop_assume!(labels.contains(&0.0) && labels.contains(&1.0));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_force(&scores, &labels));
        }

        #[test]
        fn invariant_under_increasing_transform(pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100)) {
            let scores: Vec<f64> = pairs.iter().map(|&(s, _)| s).collect();
            let labels: Vec<f64> = pairs.iter().map(|&(_, y)| y as u8 as f64).collect();
            prop_assume!(labels.contains(&0.0) && labels.contains(&1.0));
            let squashed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&squashed, &labels).unwrap());
        }
    }

    #[test]
    fn ri_examples() {
        assert!((ri(0.7001, 0.6954).unwrap() - 2.41).abs() < 0.005);
        assert!((ri(0.6546, 0.6527).unwrap() - 1.24).abs() < 0.005);
        assert_eq!(ri(0.71, 0.71).unwrap(), 0.0);
        assert!(ri(0.6, 0.5).is_err());
        assert!(ri(0.6, 0.4).is_err());
    }

    #[test]
    fn grouped_auc() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.1, 0.4, 0.35, 0.8];
        let labels = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let keys = [0, 0, 0, 0, 1, 1, 1, 1];
        let g = auc_by_group(&scores, &labels, &keys).unwrap();
        assert_eq!(g.groups["0"], g.groups["1"]);
        assert_eq!(g.groups["0"].n, 4);

        // The pooled value comes from the pool itself, not from averaging.
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0.0, 1.0, 0.0, 1.0];
        let g = auc_by_group(&scores, &labels, &[0, 0, 1, 1]).unwrap();
        assert_eq!(g.groups["0"].auc, Some(1.0));
        assert_eq!(g.groups["1"].auc, Some(1.0));
        assert_eq!(g.overall.auc, Some(0.75));

        let g = auc_by_group(&scores, &labels, &[5; 4]).unwrap();
        assert_eq!(g.groups["5"], g.overall);

        let g = auc_by_group(&[0.1, 0.2, 0.3], &[1.0, 1.0, 0.0], &[0, 0, 1]).unwrap();
        assert_eq!(g.groups["0"].auc, None);
        assert_eq!(g.groups["1"].auc, None);
        assert!(g.overall.auc.is_some());
    }

    fn run(name: &str, seed: u64, shift: f64, scenarios: &[u32]) -> RunMetrics {
        let mut keys = Vec::new();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for &s in scenarios {
            for i in 0..10 {
                keys.push(s);
                labels.push((i % 2) as f64);
                scores.push(i as f64 * 0.1 + if i % 2 == 1 { shift } else { 0.0 } + (i % 3) as f64 * 0.05);
            }
        }
        RunMetrics {
            name: name.into(),
            seed,
            aucs: auc_by_group(&scores, &labels, &keys).unwrap(),
        }
    }

    #[test]
    fn single_run_has_no_ri() {
        let r = report(&[run("full", 1, 0.0, &[0, 1])], &Comparison::None).unwrap();
        assert!(r.csv.starts_with("run,scenario,n,auc,ri\n"));
        assert!(r.csv.lines().skip(1).all(|l| l.ends_with(',')));
        assert_eq!(r.csv.lines().count(), 1 + 3);
        assert!(!r.text.contains('%'));
    }

    #[test]
    fn self_comparison_is_zero_everywhere() {
        let runs = [run("full", 1, 0.0, &[0, 1])];
        let r = report(&runs, &Comparison::OverBaseline("full".into())).unwrap();
        for line in r.csv.lines().skip(1) {
            let ri: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(ri, 0.0);
        }
        assert!(report(&runs, &Comparison::OverBaseline("nope".into())).is_err());
    }

    #[test]
    fn seeds_get_a_mean_row_and_ri_pairs_by_seed() {
        let runs = [
            run("full", 1, 0.2, &[0]),
            run("full", 2, 0.3, &[0]),
            run("wo_urmn", 1, 0.0, &[0]),
            run("wo_urmn", 2, 0.1, &[0]),
        ];
        let r = report(&runs, &Comparison::TargetOver("full".into())).unwrap();
        for name in ["full/seed=1", "full/seed=2", "full/mean", "wo_urmn/seed=1", "wo_urmn/mean"] {
            assert!(r.csv.contains(&format!("{name},overall,")), "{name}");
        }
        let full1 = runs[0].aucs.overall.auc.unwrap();
        let wo1 = runs[2].aucs.overall.auc.unwrap();
        let line = r.csv.lines().find(|l| l.starts_with("wo_urmn/seed=1,overall")).unwrap();
        let got: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((got - ri(full1, wo1).unwrap()).abs() < 1e-6);
        let mean_line = r.csv.lines().find(|l| l.starts_with("full/mean,overall")).unwrap();
        let mean_auc: f64 = mean_line.split(',').nth(3).unwrap().parse().unwrap();
        let expected = (full1 + runs[1].aucs.overall.auc.unwrap()) / 2.0;
        assert!((mean_auc - expected).abs() < 1e-6);
    }

    #[test]
    fn mismatched_scenarios_are_listed() {
        let runs = [run("a", 1, 0.0, &[0, 1]), run("b", 1, 0.0, &[0])];
        let r = report(&runs, &Comparison::None).unwrap();
        assert_eq!(r.mismatches, vec!["b/seed=1 lacks scenarios 1".to_string()]);
        assert!(r.text.contains("scenario mismatch: b/seed=1 lacks scenarios 1"));
        assert!(r.text.contains("missing"));
    }
}
