//! Grid search over the fluency weight and the weight-schedule ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::ScheduleKind;
use crate::error::{Error, Result};

use super::bench::{run_benchmark, Aggregates};
use super::config::{Method, ModelSet, RunConfig};

pub const LAMBDA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// A λ is eligible when its perplexity is at most this multiple of the
/// unconstrained greedy perplexity.
pub const PPL_TOLERANCE: f64 = 1.5;

pub const SWEEP_FILE: &str = "lambda_sweep.json";
pub const SWEEP_TABLE_FILE: &str = "lambda_sweep.tsv";
pub const ABLATION_FILE: &str = "schedule_ablation.json";
pub const ABLATION_TABLE_FILE: &str = "schedule_ablation.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub metrics: Option<Aggregates>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Perplexity of greedy decoding on the same plan.
    pub base_ppl: f64,
    pub rows: Vec<SweepRow>,
    /// Most controllable λ whose perplexity stays within the tolerance.
    pub recommended: Option<f64>,
}

/// Controllability used to rank λ values: internal classifier accuracy for
/// attribute tasks, keyword coverage for keyword tasks.
pub fn controllability(a: &Aggregates) -> Option<f64> {
    a.internal.map(|m| m.accuracy).or(a.coverage)
}

/// Runs the base config once per λ (every spec gets that λ) and flags the
/// recommended value. A failing λ is recorded and the sweep continues.
pub fn lambda_sweep(base: &RunConfig, models: ModelSet<'_>, lambdas: &[f64]) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let greedy = RunConfig {
        method: Method::Greedy {
            repetition_penalty: repetition_penalty(&base.method),
        },
        ..base.clone()
    };
    let base_ppl = run_benchmark(&greedy, models)?
        .report
        .overall
        .ppl
        .ok_or_else(|| Error::invalid("greedy baseline produced no samples"))?;
    let rows: Vec<SweepRow> = lambdas
        .iter()
        .map(|&lambda| {
            let mut config = base.clone();
            config.specs.iter_mut().for_each(|s| s.lambda = lambda);
            match run_benchmark(&config, models) {
                Ok(run) => SweepRow {
                    lambda,
                    metrics: Some(run.report.overall),
                    error: None,
                },
                Err(e) => SweepRow {
                    lambda,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let recommended = recommend(&rows, base_ppl);
    Ok(SweepTable {
        base_ppl,
        rows,
        recommended,
    })
}

fn repetition_penalty(method: &Method) -> f64 {
    match method {
        Method::Bolt(c) => c.repetition_penalty,
        Method::Langevin(c) => c.repetition_penalty,
        Method::Greedy { repetition_penalty } => *repetition_penalty,
    }
}

/// Highest controllability among rows with `ppl <= PPL_TOLERANCE * base_ppl`;
/// ties go to the smaller λ.
pub fn recommend(rows: &[SweepRow], base_ppl: f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for row in rows {
        let Some(m) = &row.metrics else { continue };
        let (Some(ppl), Some(score)) = (m.ppl, controllability(m)) else { continue };
        if ppl <= PPL_TOLERANCE * base_ppl && best.is_none_or(|(_, s)| score > s) {
            best = Some((row.lambda, score));
        }
    }
    best.map(|b| b.0)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl SweepTable {
    /// Tab-separated table, one row per λ.
    pub fn render(&self) -> String {
        let mut out = String::from("lambda\tcontrol\tppl\tdist3\trep3\tnote\n");
        for row in &self.rows {
            let m = row.metrics.as_ref();
            let mut note = row.error.clone().unwrap_or_default();
            if self.recommended == Some(row.lambda) {
                note = "recommended".into();
            }
            let _ = writeln!(
                out,
                "{:.1}\t{}\t{}\t{}\t{}\t{}",
                row.lambda,
                cell(m.and_then(controllability)),
                cell(m.and_then(|m| m.ppl)),
                cell(m.and_then(|m| m.dist3)),
                cell(m.and_then(|m| m.rep3)),
                note
            );
        }
        let _ = writeln!(out, "base_ppl\t{:.4}", self.base_ppl);
        out
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SWEEP_FILE), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(SWEEP_TABLE_FILE), self.render())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub schedule: ScheduleKind,
    pub metrics: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<AblationColumn>,
}

/// Column heading of a schedule kind.
pub fn schedule_label(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::Increasing => "t/L",
        ScheduleKind::Decreasing => "1-t/L",
        ScheduleKind::Constant => "1",
        ScheduleKind::Learned => "w[t]",
    }
}

/// Runs a BOLT config once per schedule kind.
pub fn schedule_ablation(base: &RunConfig, models: ModelSet<'_>) -> Result<AblationTable> {
    let Method::Bolt(decode) = &base.method else {
        return Err(Error::Config("the schedule ablation needs a BOLT config".into()));
    };
    let mut columns = Vec::new();
    for schedule in ScheduleKind::ALL {
        let mut config = base.clone();
        config.method = Method::Bolt(crate::decoder::DecodeConfig {
            schedule,
            ..decode.clone()
        });
        let run = run_benchmark(&config, models)?;
        columns.push(AblationColumn {
            schedule,
            metrics: run.report.overall,
        });
    }
    Ok(AblationTable { columns })
}

impl AblationTable {
    /// Metrics as rows, schedule kinds as columns.
    pub fn render(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.columns {
            let _ = write!(out, "\t{}", schedule_label(c.schedule));
        }
        out.push('\n');
        type Pick = fn(&Aggregates) -> Option<f64>;
        let rows: [(&str, Pick); 3] = [
            ("Ext. Clsf.", |m| m.external.map(|e| e.accuracy)),
            ("PPL", |m| m.ppl),
            ("REP-3gram", |m| m.rep3),
        ];
        for (name, pick) in rows {
            out.push_str(name);
            for c in &self.columns {
                let _ = write!(out, "\t{}", cell(pick(&c.metrics)));
            }
            out.push('\n');
        }
        out
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ABLATION_FILE), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(ABLATION_TABLE_FILE), self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fixture::{soft_config, Fixture};
    use crate::harness::metrics::AttributeMetrics;

    fn row(lambda: f64, acc: f64, ppl: f64) -> SweepRow {
        SweepRow {
            lambda,
            metrics: Some(Aggregates {
                internal: Some(AttributeMetrics {
                    accuracy: acc,
                    ..AttributeMetrics::default()
                }),
                ppl: Some(ppl),
                ..Aggregates::default()
            }),
            error: None,
        }
    }

    #[test]
    fn recommendation_rule() {
        let rows = vec![
            row(0.0, 0.99, 40.0),
            row(0.1, 0.90, 14.0),
            row(0.2, 0.90, 12.0),
            row(0.3, 0.70, 10.0),
            SweepRow {
                lambda: 0.4,
                metrics: None,
                error: Some("x".into()),
            },
        ];
        assert_eq!(recommend(&rows, 10.0), Some(0.1));
        assert_eq!(recommend(&rows, 1.0), None);
        assert_eq!(recommend(&rows, 100.0), Some(0.0));
    }

    #[test]
    fn sweep_has_one_row_per_lambda() {
        let f = Fixture::new();
        let mut c = soft_config();
        c.lengths = vec![3];
        c.generations_per_prompt = 1;
        let t = lambda_sweep(&c, f.models(), &LAMBDA_GRID).unwrap();
        assert_eq!(t.rows.len(), 11);
        assert!(t.rows.iter().all(|r| r.metrics.is_some()));
        assert!(t.base_ppl > 1.0);
        let text = t.render();
        assert_eq!(text.lines().count(), 13);
        let dir = tempfile::tempdir().unwrap();
        t.persist(dir.path()).unwrap();
        let back: SweepTable =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ablation_covers_every_schedule() {
        let f = Fixture::new();
        let mut c = soft_config();
        c.lengths = vec![4];
        let t = schedule_ablation(&c, f.models()).unwrap();
        let kinds: Vec<ScheduleKind> = t.columns.iter().map(|c| c.schedule).collect();
        assert_eq!(kinds, ScheduleKind::ALL);
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "metric\tt/L\t1-t/L\t1\tw[t]");
        assert!(lines[1].starts_with("Ext. Clsf.\t") && lines[2].starts_with("PPL\t"));
        assert!(lines[3].starts_with("REP-3gram\t"));
        c.method = Method::Greedy { repetition_penalty: 1.2 };
        assert!(schedule_ablation(&c, f.models()).is_err());
    }
}
