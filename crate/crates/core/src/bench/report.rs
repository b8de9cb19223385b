//! Aggregation of per-step AP rows into a report, forgetting, average ranks,
//! and CSV / leaderboard emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{BenchError, Result};

/// AP of every evaluated subset after each step. Row `t` (0-based) holds the
/// APs of subsets `1..=t+1` and may hold later subsets too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInput {
    pub method: String,
    pub num_steps: usize,
    pub step_rows: Vec<Vec<f64>>,
    pub unseen_ap: Option<f64>,
    /// Added parameters per step.
    pub added_params: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranks {
    pub seen: f64,
    pub unseen: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// AP of each subset after the final step.
    pub subset_ap: Vec<f64>,
    pub ap_old: Option<f64>,
    pub ap_new: f64,
    pub ap_seen: f64,
    pub ap_unseen: Option<f64>,
    /// `a[t][i]` for `i <= t`.
    pub ap_matrix: Vec<Vec<f64>>,
    /// `a[i][i] - a[t][i]` for `i <= t`.
    pub forgetting: Vec<Vec<f64>>,
    pub added_params: Vec<usize>,
    pub cumulative_params: Vec<usize>,
    pub ranks: Option<Ranks>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn aggregate(input: &ReportInput) -> Result<EvalReport> {
    let t_max = input.num_steps;
    if t_max == 0 {
        return Err(BenchError::Input("a run needs at least one step".into()));
    }
    if input.step_rows.len() != t_max {
        return Err(BenchError::Incomplete(format!(
            "{} step rows for {t_max} steps",
            input.step_rows.len()
        )));
    }
    for (t, row) in input.step_rows.iter().enumerate() {
        if row.len() < t + 1 {
            return Err(BenchError::Incomplete(format!(
                "step {} row has {} subsets, needs {}",
                t + 1,
                row.len(),
                t + 1
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(BenchError::Input(format!("AP {v} outside [0, 1]")));
        }
    }
    if input.added_params.len() != t_max {
        return Err(BenchError::Incomplete(format!(
            "{} parameter counts for {t_max} steps",
            input.added_params.len()
        )));
    }
    let ap_matrix: Vec<Vec<f64>> = input
        .step_rows
        .iter()
        .enumerate()
        .map(|(t, row)| row[..=t].to_vec())
        .collect();
    let forgetting = ap_matrix
        .iter()
        .map(|row| row.iter().enumerate().map(|(i, a)| ap_matrix[i][i] - a).collect())
        .collect();
    let subset_ap = ap_matrix[t_max - 1].clone();
    let ap_old = (t_max > 1).then(|| mean(&subset_ap[..t_max - 1]));
    let cumulative_params = input
        .added_params
        .iter()
        .scan(0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    Ok(EvalReport {
        method: input.method.clone(),
        ap_new: subset_ap[t_max - 1],
        ap_seen: mean(&subset_ap),
        ap_old,
        ap_unseen: input.unseen_ap,
        subset_ap,
        ap_matrix,
        forgetting,
        added_params: input.added_params.clone(),
        cumulative_params,
        ranks: None,
    })
}

/// Ranks of `scores` where the highest score is rank 1 and ties share the
/// mean of their positions.
pub fn fractional_ranks(scores: &[f64]) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| {
            let better = scores.iter().filter(|&&o| o > s).count();
            let tied = scores.iter().filter(|&&o| o == s).count();
            better as f64 + (tied as f64 + 1.0) / 2.0
        })
        .collect()
}

fn mean_ranks(table: &[Vec<f64>], what: &str) -> Result<Vec<f64>> {
    let k = table.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(BenchError::Input(format!("no {what} subsets to rank")));
    }
    if table.iter().any(|r| r.len() != k) {
        return Err(BenchError::Input(format!("methods cover different {what} subsets")));
    }
    let mut sums = vec![0.0; table.len()];
    for s in 0..k {
        let col: Vec<f64> = table.iter().map(|r| r[s]).collect();
        for (m, r) in fractional_ranks(&col).into_iter().enumerate() {
            sums[m] += r;
        }
    }
    Ok(sums.into_iter().map(|s| s / k as f64).collect())
}

/// Per-method seen, unseen and quadratic-mean ranks. `seen[j][k]` is method
/// `j`'s AP on seen subset `k`; `unseen[j]` likewise over unseen splits.
pub fn average_rank(seen: &[Vec<f64>], unseen: &[Vec<f64>]) -> Result<Vec<Ranks>> {
    if seen.is_empty() || seen.len() != unseen.len() {
        return Err(BenchError::Input(format!(
            "{} seen rows and {} unseen rows",
            seen.len(),
            unseen.len()
        )));
    }
    let rs = mean_ranks(seen, "seen")?;
    let ru = mean_ranks(unseen, "unseen")?;
    Ok(rs
        .into_iter()
        .zip(ru)
        .map(|(s, u)| Ranks {
            seen: s,
            unseen: u,
            avg: ((s * s + u * u) / 2.0).sqrt(),
        })
        .collect())
}

/// Fill `ranks` on every report; all reports need an unseen AP and equal subset counts.
pub fn rank_reports(reports: &mut [EvalReport]) -> Result<()> {
    let seen: Vec<Vec<f64>> = reports.iter().map(|r| r.subset_ap.clone()).collect();
    let unseen = reports
        .iter()
        .map(|r| {
            r.ap_unseen
                .map(|u| vec![u])
                .ok_or_else(|| BenchError::Input(format!("method `{}` has no unseen AP", r.method)))
        })
        .collect::<Result<Vec<_>>>()?;
    for (r, k) in reports.iter_mut().zip(average_rank(&seen, &unseen)?) {
        r.ranks = Some(k);
    }
    Ok(())
}

/// One `method,subset,metric,value` row per reported number.
pub fn to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,subset,metric,value\n");
    let mut row = |m: &str, s: &str, k: &str, v: f64| {
        let _ = writeln!(out, "{m},{s},{k},{v}");
    };
    for r in reports {
        let m = r.method.as_str();
        for (i, ap) in r.subset_ap.iter().enumerate() {
            row(m, &format!("S{}", i + 1), "ap", *ap);
        }
        for (t, fr) in r.forgetting.iter().enumerate() {
            for (i, f) in fr.iter().enumerate() {
                row(m, &format!("S{}", i + 1), &format!("forgetting@{}", t + 1), *f);
            }
        }
        if let Some(v) = r.ap_old {
            row(m, "all", "ap_old", v);
        }
        row(m, "all", "ap_new", r.ap_new);
        row(m, "all", "ap_seen", r.ap_seen);
        if let Some(v) = r.ap_unseen {
            row(m, "unseen", "ap", v);
        }
        if let Some(k) = r.ranks {
            row(m, "all", "r_seen", k.seen);
            row(m, "all", "r_unseen", k.unseen);
            row(m, "all", "r_avg", k.avg);
        }
        if let Some(p) = r.cumulative_params.last() {
            row(m, "all", "added_params", *p as f64);
        }
    }
    out
}

/// Monospaced table: one row per method, one column per subset, then Seen,
/// Unseen and R_avg. APs are shown in percent.
pub fn leaderboard(reports: &[EvalReport]) -> String {
    let k = reports.iter().map(|r| r.subset_ap.len()).max().unwrap_or(0);
    let name_w = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<name_w$}", "Method");
    for i in 1..=k {
        let _ = write!(out, " {:>6}", format!("S{i}"));
    }
    let _ = writeln!(out, " {:>6} {:>6} {:>6}", "Seen", "Unseen", "R_avg");
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    for r in reports {
        let _ = write!(out, "{:<name_w$}", r.method);
        for i in 0..k {
            let _ = write!(out, " {:>6}", pct(r.subset_ap.get(i).copied()));
        }
        let _ = writeln!(
            out,
            " {:>6} {:>6} {:>6}",
            pct(Some(r.ap_seen)),
            pct(r.ap_unseen),
            r.ranks.map_or("-".to_string(), |k| format!("{:.2}", k.avg))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(rows: Vec<Vec<f64>>) -> ReportInput {
        ReportInput {
            method: "m".into(),
            num_steps: rows.len(),
            added_params: vec![10; rows.len()],
            step_rows: rows,
            unseen_ap: Some(0.2),
        }
    }

    #[test]
    fn single_step_has_no_old() {
        let r = aggregate(&input(vec![vec![0.4]])).unwrap();
        assert_eq!(r.ap_old, None);
        assert_eq!(r.ap_new, r.ap_seen);
    }

    #[test]
    fn forgetting_from_diagonal() {
        let r = aggregate(&input(vec![vec![0.5], vec![0.3, 0.6]])).unwrap();
        assert_eq!(r.forgetting, vec![vec![0.0], vec![0.2, 0.0]]);
        assert_eq!(r.ap_old, Some(0.3));
        assert_eq!(r.cumulative_params, vec![10, 20]);
    }

    #[test]
    fn missing_rows_are_incomplete() {
        let mut i = input(vec![vec![0.5]]);
        i.num_steps = 2;
        assert!(matches!(aggregate(&i), Err(BenchError::Incomplete(_))));
        assert!(matches!(
            aggregate(&input(vec![vec![0.5], vec![0.3]])),
            Err(BenchError::Incomplete(_))
        ));
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(fractional_ranks(&[0.5, 0.7, 0.5]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn quadratic_mean_hand_case() {
        let r = average_rank(&[vec![0.1], vec![0.9]], &[vec![0.9], vec![0.1]]).unwrap();
        assert_eq!(r[0].seen, 2.0);
        assert_eq!(r[0].unseen, 1.0);
        assert!((r[0].avg - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_coverage_rejected() {
        assert!(average_rank(&[vec![0.1, 0.2], vec![0.9]], &[vec![0.9], vec![0.1]]).is_err());
    }

    #[test]
    fn emitters_mention_every_method() {
        let mut rs = vec![aggregate(&input(vec![vec![0.5]])).unwrap()];
        rank_reports(&mut rs).unwrap();
        assert!(to_csv(&rs).contains("m,all,r_avg,1"));
        assert!(leaderboard(&rs).lines().nth(1).unwrap().starts_with("m "));
    }
}
