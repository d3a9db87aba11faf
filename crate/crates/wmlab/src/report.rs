//! Experiment report plumbing: one row per trial, a plot-ready CSV export,
//! and a summary with attack success rate and score quantiles.
//!
//! The CSV is the deterministic artifact: given a fixed master seed two
//! runs must produce byte-identical files, so the wall-clock column is
//! deliberately absent from it (timing lives in the rows' JSON form and in
//! run metadata). Summaries are pure functions of the row data and ignore
//! timing entirely.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// What the attacker wants from the detector, which fixes the
/// success-counting direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackGoal {
    /// Success = post-attack text no longer flagged.
    Removal,
    /// Success = attacker text flagged as watermarked.
    Spoof,
}

/// One attack/defense trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub trial: usize,
    pub score_before: f64,
    pub score_after: f64,
    pub verdict_before: bool,
    pub verdict_after: bool,
    pub queries_generation: usize,
    pub queries_detection: usize,
    /// Pseudo-perplexity of the attack output under a held-out model;
    /// absent for experiments with no text output.
    pub quality: Option<f64>,
    /// Timing is reproducibility metadata, never part of the CSV.
    pub wall_clock_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub goal: AttackGoal,
    pub rows: Vec<ReportRow>,
}

const CSV_HEADER: &str = "trial,score_before,score_after,verdict_before,verdict_after,\
                          queries_generation,queries_detection,quality";

impl Report {
    pub fn new(experiment: impl Into<String>, goal: AttackGoal, rows: Vec<ReportRow>) -> Result<Self> {
        for row in &rows {
            let mut values = vec![row.score_before, row.score_after, row.wall_clock_ms];
            if let Some(q) = row.quality {
                values.push(q);
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "trial {} contains a non-finite value",
                    row.trial
                )));
            }
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: experiment.into(),
            goal,
            rows,
        })
    }

    /// Plot-ready rows, RFC-4180 (CRLF line endings, header row). All
    /// fields are numeric or boolean, so no quoting is ever required;
    /// floats print in shortest round-trip form and parse back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push_str("\r\n");
        for row in &self.rows {
            let quality = row.quality.map(|q| q.to_string()).unwrap_or_default();
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}\r\n",
                row.trial,
                row.score_before,
                row.score_after,
                row.verdict_before,
                row.verdict_after,
                row.queries_generation,
                row.queries_detection,
                quality
            );
        }
        out
    }

    /// Rebuilds a report from its CSV export. The CSV carries rows only,
    /// so the experiment label and goal come from the caller and
    /// wall-clock (absent by design) is zero.
    pub fn from_csv(experiment: impl Into<String>, goal: AttackGoal, csv: &str) -> Result<Self> {
        let mut lines = csv.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
        let header = lines
            .next()
            .ok_or_else(|| Error::SchemaMismatch("empty CSV: missing header row".into()))?;
        if header != CSV_HEADER {
            return Err(Error::SchemaMismatch(format!(
                "unrecognized CSV header: {header}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::SchemaMismatch(format!(
                    "row {} has {} fields, expected 8",
                    i + 1,
                    fields.len()
                )));
            }
            let parse_err = |what: &str, v: &str| {
                Error::SchemaMismatch(format!("row {}: bad {what} value {v:?}", i + 1))
            };
            rows.push(ReportRow {
                trial: fields[0].parse().map_err(|_| parse_err("trial", fields[0]))?,
                score_before: fields[1]
                    .parse()
                    .map_err(|_| parse_err("score_before", fields[1]))?,
                score_after: fields[2]
                    .parse()
                    .map_err(|_| parse_err("score_after", fields[2]))?,
                verdict_before: fields[3]
                    .parse()
                    .map_err(|_| parse_err("verdict_before", fields[3]))?,
                verdict_after: fields[4]
                    .parse()
                    .map_err(|_| parse_err("verdict_after", fields[4]))?,
                queries_generation: fields[5]
                    .parse()
                    .map_err(|_| parse_err("queries_generation", fields[5]))?,
                queries_detection: fields[6]
                    .parse()
                    .map_err(|_| parse_err("queries_detection", fields[6]))?,
                quality: if fields[7].is_empty() {
                    None
                } else {
                    Some(fields[7].parse().map_err(|_| parse_err("quality", fields[7]))?)
                },
                wall_clock_ms: 0.0,
            });
        }
        Report::new(experiment, goal, rows)
    }
}

/// Score quantiles by linear interpolation between order statistics
/// (the convention spreadsheets and R's default use).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("quartiles need at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("quartiles need finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(Quartiles {
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
    })
}

/// Pure function of the row data: attack success rate plus score and
/// query-cost aggregates. Timing never enters, so a summary computed from
/// a CSV round trip equals the in-memory one exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub goal: AttackGoal,
    pub trials: usize,
    /// Fraction of trials whose post-attack verdict favors the attacker.
    pub asr: f64,
    pub score_before: Quartiles,
    pub score_after: Quartiles,
    pub mean_queries_generation: f64,
    pub mean_queries_detection: f64,
    /// Present when at least one row carries a quality proxy.
    pub quality: Option<Quartiles>,
}

pub fn summarize(report: &Report) -> Result<Summary> {
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "report schema {} but this build reads {}",
            report.schema_version, REPORT_SCHEMA_VERSION
        )));
    }
    if report.rows.is_empty() {
        return Err(Error::InvalidParameter("cannot summarize an empty report".into()));
    }
    let n = report.rows.len();
    let favorable = report
        .rows
        .iter()
        .filter(|r| match report.goal {
            AttackGoal::Removal => !r.verdict_after,
            AttackGoal::Spoof => r.verdict_after,
        })
        .count();
    let before: Vec<f64> = report.rows.iter().map(|r| r.score_before).collect();
    let after: Vec<f64> = report.rows.iter().map(|r| r.score_after).collect();
    let quality: Vec<f64> = report.rows.iter().filter_map(|r| r.quality).collect();
    Ok(Summary {
        schema_version: report.schema_version,
        experiment: report.experiment.clone(),
        goal: report.goal,
        trials: n,
        asr: favorable as f64 / n as f64,
        score_before: quartiles(&before)?,
        score_after: quartiles(&after)?,
        mean_queries_generation: report.rows.iter().map(|r| r.queries_generation).sum::<usize>()
            as f64
            / n as f64,
        mean_queries_detection: report.rows.iter().map(|r| r.queries_detection).sum::<usize>()
            as f64
            / n as f64,
        quality: if quality.is_empty() { None } else { Some(quartiles(&quality)?) },
    })
}

/// Plain-text table for standard output: one aligned line per column of
/// the summary.
pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment           {}", summary.experiment);
    let _ = writeln!(out, "goal                 {:?}", summary.goal);
    let _ = writeln!(out, "trials               {}", summary.trials);
    let _ = writeln!(out, "attack success rate  {:.4}", summary.asr);
    let _ = writeln!(
        out,
        "score before         median {:.4}  q1 {:.4}  q3 {:.4}",
        summary.score_before.median, summary.score_before.q1, summary.score_before.q3
    );
    let _ = writeln!(
        out,
        "score after          median {:.4}  q1 {:.4}  q3 {:.4}",
        summary.score_after.median, summary.score_after.q1, summary.score_after.q3
    );
    let _ = writeln!(out, "mean gen queries     {:.2}", summary.mean_queries_generation);
    let _ = writeln!(out, "mean detect queries  {:.2}", summary.mean_queries_detection);
    if let Some(q) = summary.quality {
        let _ = writeln!(
            out,
            "quality proxy        median {:.4}  q1 {:.4}  q3 {:.4}",
            q.median, q.q1, q.q3
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: usize, before: f64, after: f64, vb: bool, va: bool) -> ReportRow {
        ReportRow {
            trial,
            score_before: before,
            score_after: after,
            verdict_before: vb,
            verdict_after: va,
            queries_generation: 100 + trial,
            queries_detection: 3 * trial,
            quality: if trial % 2 == 0 { Some(10.0 + trial as f64) } else { None },
            wall_clock_ms: 17.25 * trial as f64,
        }
    }

    fn fixture() -> Report {
        let scores = [3.2, -0.4, 1.1, 4.9, 0.0, 2.7, -1.3, 3.8, 0.9, 2.2];
        let rows = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| row(i, s + 4.0, s, true, i % 4 == 0))
            .collect();
        Report::new("fixture", AttackGoal::Removal, rows).unwrap()
    }

    #[test]
    fn quartiles_match_spreadsheet_recomputation() {
        let values = [3.2, -0.4, 1.1, 4.9, 0.0, 2.7, -1.3, 3.8, 0.9, 2.2];
        let q = quartiles(&values).unwrap();
        assert!((q.median - 1.65).abs() < 1e-12, "median {}", q.median);
        assert!((q.q1 - 0.225).abs() < 1e-12, "q1 {}", q.q1);
        assert!((q.q3 - 3.075).abs() < 1e-12, "q3 {}", q.q3);
        let single = quartiles(&[7.0]).unwrap();
        assert_eq!(single.q1, 7.0);
        assert_eq!(single.median, 7.0);
        assert_eq!(single.q3, 7.0);
        assert!(quartiles(&[]).is_err());
        assert!(quartiles(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn asr_counts_attacker_favorable_verdicts() {
        let report = fixture();
        // Removal: trials 0, 4, 8 still flagged → 7 of 10 succeeded.
        let s = summarize(&report).unwrap();
        assert_eq!(s.asr, 0.7);
        let mut spoof = report.clone();
        spoof.goal = AttackGoal::Spoof;
        assert_eq!(summarize(&spoof).unwrap().asr, 0.3);
        assert!((s.score_after.median - 1.65).abs() < 1e-12);
        assert!((s.score_before.median - 5.65).abs() < 1e-12);
        assert_eq!(s.trials, 10);
        assert_eq!(s.mean_queries_generation, 104.5);
        assert_eq!(s.mean_queries_detection, 13.5);
        let q = s.quality.unwrap();
        assert_eq!(q.median, 14.0); // rows 0,2,4,6,8 → 10,12,14,16,18
    }

    #[test]
    fn all_evaded_means_full_removal_success() {
        let rows = (0..5).map(|i| row(i, 8.0, 0.5, true, false)).collect();
        let report = Report::new("r", AttackGoal::Removal, rows).unwrap();
        assert_eq!(summarize(&report).unwrap().asr, 1.0);
        let rows = (0..5).map(|i| row(i, 0.1, 6.0, false, true)).collect();
        let spoof = Report::new("s", AttackGoal::Spoof, rows).unwrap();
        assert_eq!(summarize(&spoof).unwrap().asr, 1.0);
    }

    #[test]
    fn empty_report_exports_a_bare_header() {
        let report = Report::new("empty", AttackGoal::Spoof, vec![]).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv, format!("{CSV_HEADER}\r\n"));
        let back = Report::from_csv("empty", AttackGoal::Spoof, &csv).unwrap();
        assert!(back.rows.is_empty());
        assert!(summarize(&back).is_err(), "empty reports cannot be summarized");
    }

    #[test]
    fn csv_round_trip_preserves_the_summary_exactly() {
        // Awkward floats: values with no short decimal form must still
        // round-trip bit-exactly through the CSV.
        let mut report = fixture();
        report.rows[3].score_after = 0.1 + 0.2;
        report.rows[5].score_before = 1.0 / 3.0;
        report.rows[7].quality = Some(2.0_f64.sqrt() * 1e-7);
        let csv = report.to_csv();
        let back = Report::from_csv("fixture", AttackGoal::Removal, &csv).unwrap();
        for (a, b) in report.rows.iter().zip(&back.rows) {
            assert_eq!(a.score_before, b.score_before);
            assert_eq!(a.score_after, b.score_after);
            assert_eq!(a.quality, b.quality);
        }
        assert_eq!(summarize(&back).unwrap(), summarize(&report).unwrap());
    }

    #[test]
    fn csv_bytes_are_deterministic_and_timing_free() {
        let report = fixture();
        assert_eq!(report.to_csv(), report.to_csv());
        let mut retimed = report.clone();
        for r in &mut retimed.rows {
            r.wall_clock_ms += 1234.5;
        }
        assert_eq!(report.to_csv(), retimed.to_csv(), "timing must not leak into the CSV");
        assert!(!report.to_csv().contains("wall"), "no wall-clock column");
        assert_eq!(summarize(&report).unwrap(), summarize(&retimed).unwrap());
    }

    #[test]
    fn json_round_trip_keeps_every_field() {
        let report = fixture();
        let json = serde_json::to_string(&report).unwrap();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.rows[2].wall_clock_ms, 34.5);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(matches!(
            Report::from_csv("x", AttackGoal::Spoof, "nope,header\r\n"),
            Err(Error::SchemaMismatch(_))
        ));
        let missing_field = format!("{CSV_HEADER}\r\n1,2.0,3.0,true,false,10,20\r\n");
        assert!(Report::from_csv("x", AttackGoal::Spoof, &missing_field).is_err());
        let bad_bool = format!("{CSV_HEADER}\r\n1,2.0,3.0,yes,false,10,20,\r\n");
        assert!(Report::from_csv("x", AttackGoal::Spoof, &bad_bool).is_err());
    }

    #[test]
    fn reports_reject_non_finite_scores() {
        let mut rows = vec![row(0, 1.0, 2.0, true, true)];
        rows[0].score_after = f64::INFINITY;
        assert!(Report::new("x", AttackGoal::Spoof, rows).is_err());
        let mut rows = vec![row(0, 1.0, 2.0, true, true)];
        rows[0].quality = Some(f64::NAN);
        assert!(Report::new("x", AttackGoal::Spoof, rows).is_err());
    }

    #[test]
    fn schema_version_gates_summaries() {
        let mut report = fixture();
        report.schema_version = 99;
        assert!(matches!(summarize(&report), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn rendered_table_shows_the_headline_numbers() {
        let s = summarize(&fixture()).unwrap();
        let table = render_summary(&s);
        assert!(table.contains("attack success rate  0.7000"));
        assert!(table.contains("trials               10"));
        assert!(table.contains("quality proxy"));
    }
}
