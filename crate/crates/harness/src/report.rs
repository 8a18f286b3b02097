//! Run reports, method comparison tables and output files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: usize,
    pub difficulty: usize,
    pub correct: bool,
    pub prediction: String,
    pub gold: String,
    pub tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub dataset: String,
    pub example_count: usize,
    pub correct_count: usize,
    /// Percent exact match.
    pub accuracy: f64,
    pub avg_tokens: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_steps: Option<f64>,
    /// Step budget of the refinement policy (fixed K or adaptive K_max).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    /// `halting_histogram[i]` counts examples that halted at step `i + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halting_histogram: Option<Vec<usize>>,
    pub per_example: Vec<ExampleRecord>,
}

impl RunReport {
    /// Summary fields recomputed from `per_example`.
    pub fn from_examples(method: Method, seed: u64, dataset: String, budget: Option<usize>, per_example: Vec<ExampleRecord>) -> Self {
        let n = per_example.len();
        let correct = per_example.iter().filter(|e| e.correct).count();
        let mean = |sum: usize| if n == 0 { 0.0 } else { sum as f64 / n as f64 };
        let accuracy = if n == 0 { 0.0 } else { 100.0 * correct as f64 / n as f64 };
        let avg_tokens = mean(per_example.iter().map(|e| e.tokens).sum());
        let (avg_steps, halting_histogram) = match budget {
            Some(k) => {
                let mut hist = vec![0usize; k];
                let mut steps = 0;
                for e in &per_example {
                    let s = e.halt_step.unwrap_or(0);
                    steps += s;
                    if (1..=k).contains(&s) {
                        hist[s - 1] += 1;
                    }
                }
                (Some(mean(steps)), Some(hist))
            }
            None => (None, None),
        };
        RunReport {
            method,
            seed,
            dataset,
            example_count: n,
            correct_count: correct,
            accuracy,
            avg_tokens,
            avg_steps,
            budget,
            halting_histogram,
            per_example,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("method,examples,accuracy,avg_tokens,avg_steps\n");
        let steps = self.avg_steps.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{}",
            self.method, self.example_count, self.accuracy, self.avg_tokens, steps
        );
        s
    }

    pub fn traces_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.per_example {
            s.push_str(&serde_json::to_string(e).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Bar chart of the halting histogram in percent of examples.
pub fn halting_svg(histogram: &[usize]) -> String {
    let (w, h, pad) = (40.0 * histogram.len().max(1) as f64 + 60.0, 240.0, 30.0);
    let plot_h = h - 2.0 * pad;
    let total: usize = histogram.iter().sum();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x2 = w - pad
    );
    for (i, &count) in histogram.iter().enumerate() {
        let pct = if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
        let bar = plot_h * pct / 100.0;
        let x = pad + 10.0 + 40.0 * i as f64;
        let _ = writeln!(
            s,
            r##"<rect class="bar" data-step="{step}" data-percent="{pct:.2}" x="{x}" y="{y:.2}" width="30" height="{bar:.2}" fill="#4a78b5"/>"##,
            step = i + 1,
            y = h - pad - bar
        );
        let _ = writeln!(
            s,
            r#"<text x="{tx}" y="{ty}" font-size="11" text-anchor="middle">{step}</text>"#,
            tx = x + 15.0,
            ty = h - pad + 14.0,
            step = i + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" font-size="12" text-anchor="middle">% of examples halting at each step</text>"#,
        w / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        HarnessError::io(path, e)
    })
}

/// Writes report.json, metrics.csv, traces.jsonl and (for anchored methods)
/// halting_hist.svg into `dir`.
pub fn emit_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_atomic(&dir.join("report.json"), &report.to_json())?;
    write_atomic(&dir.join("metrics.csv"), &report.metrics_csv())?;
    write_atomic(&dir.join("traces.jsonl"), &report.traces_jsonl())?;
    if let Some(hist) = &report.halting_histogram {
        write_atomic(&dir.join("halting_hist.svg"), &halting_svg(hist))?;
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: Method,
    pub accuracy: f64,
    pub avg_tokens: f64,
    pub avg_steps: Option<f64>,
    pub step_reduction_pct: Option<f64>,
    pub token_reduction_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub has_step_column: bool,
    pub has_token_column: bool,
}

pub fn reduction_pct(baseline: f64, value: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (1.0 - value / baseline))
}

/// One row per report. Adaptive rows get their step reduction against the
/// fixed-K report; anchored rows get their token reduction against CoT.
pub fn compare_methods(reports: &[RunReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| HarnessError::Argument("compare needs at least one report".into()))?;
    for r in reports {
        if r.dataset != first.dataset || r.seed != first.seed || r.example_count != first.example_count {
            return Err(HarnessError::Comparability(format!(
                "{} (dataset {}, seed {}) vs {} (dataset {}, seed {})",
                first.method, first.dataset, first.seed, r.method, r.dataset, r.seed
            )));
        }
    }
    let fixed = reports.iter().find(|r| r.method == Method::AdaanchorFixed);
    let cot = reports.iter().find(|r| r.method == Method::Cot);
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            method: r.method,
            accuracy: r.accuracy,
            avg_tokens: r.avg_tokens,
            avg_steps: r.avg_steps,
            step_reduction_pct: match (r.method, fixed) {
                (Method::AdaanchorAdaptive, Some(f)) => reduction_pct(f.avg_steps.unwrap_or(0.0), r.avg_steps.unwrap_or(0.0)),
                _ => None,
            },
            token_reduction_pct: match cot {
                Some(c) if r.method.is_anchored() => reduction_pct(c.avg_tokens, r.avg_tokens),
                _ => None,
            },
        })
        .collect();
    let has_step_column = rows.iter().any(|r| r.step_reduction_pct.is_some());
    let has_token_column = rows.iter().any(|r| r.token_reduction_pct.is_some());
    Ok(Comparison {
        rows,
        has_step_column,
        has_token_column,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,accuracy,avg_tokens,avg_steps");
        if self.has_step_column {
            s.push_str(",step_reduction_pct");
        }
        if self.has_token_column {
            s.push_str(",token_reduction_pct");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{:.2},{:.2},{}",
                r.method,
                r.accuracy,
                r.avg_tokens,
                r.avg_steps.map(|x| format!("{x:.2}")).unwrap_or_default()
            );
            if self.has_step_column {
                let _ = write!(s, ",{}", opt(r.step_reduction_pct));
            }
            if self.has_token_column {
                let _ = write!(s, ",{}", opt(r.token_reduction_pct));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(method: Method, acc: f64, tok: f64, steps: Option<f64>) -> RunReport {
        RunReport {
            method,
            seed: 1,
            dataset: "d".into(),
            example_count: 100,
            correct_count: acc as usize,
            accuracy: acc,
            avg_tokens: tok,
            avg_steps: steps,
            budget: steps.map(|_| 8),
            halting_histogram: None,
            per_example: Vec::new(),
        }
    }

    #[test]
    fn reductions_match_table_rows() {
        let reports = [
            summary(Method::Cot, 20.0, 28.27, None),
            summary(Method::AdaanchorFixed, 15.0, 2.17, Some(8.0)),
            summary(Method::AdaanchorAdaptive, 16.0, 2.17, Some(3.23)),
        ];
        let c = compare_methods(&reports).unwrap();
        let adaptive = &c.rows[2];
        assert!((adaptive.step_reduction_pct.unwrap() - 59.625).abs() < 1e-9);
        assert!((adaptive.token_reduction_pct.unwrap() - 92.32402).abs() < 1e-4);
        let csv = c.to_csv();
        assert!(csv.starts_with("method,accuracy,avg_tokens,avg_steps,step_reduction_pct,token_reduction_pct\n"));
        assert!(csv.contains("adaanchor_adaptive,16.00,2.17,3.23,59.6,92.3"));
    }

    #[test]
    fn single_report_has_no_delta_columns() {
        let c = compare_methods(&[summary(Method::NoCot, 10.0, 2.0, None)]).unwrap();
        assert_eq!(c.to_csv(), "method,accuracy,avg_tokens,avg_steps\nno_cot,10.00,2.00,\n");
    }

    #[test]
    fn mismatched_datasets_are_rejected() {
        let mut other = summary(Method::Cot, 1.0, 1.0, None);
        other.dataset = "e".into();
        let err = compare_methods(&[summary(Method::NoCot, 1.0, 1.0, None), other]).unwrap_err();
        assert!(matches!(err, HarnessError::Comparability(_)));
    }

    #[test]
    fn summary_fields_follow_examples() {
        let ex = |id, correct, halt| ExampleRecord {
            id,
            difficulty: 1,
            correct,
            prediction: String::new(),
            gold: String::new(),
            tokens: 2,
            halt_step: Some(halt),
            deltas: Some(vec![0.0; halt]),
        };
        let r = RunReport::from_examples(Method::AdaanchorAdaptive, 0, "x".into(), Some(4), vec![ex(0, true, 2), ex(1, false, 4), ex(2, true, 4)]);
        assert!((r.accuracy - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.halting_histogram, Some(vec![0, 1, 0, 2]));
        assert!((r.avg_steps.unwrap() - 10.0 / 3.0).abs() < 1e-12);
        let empty = RunReport::from_examples(Method::AdaanchorFixed, 0, "x".into(), Some(8), vec![]);
        assert_eq!(empty.accuracy, 0.0);
        assert_eq!(empty.halting_histogram, Some(vec![0; 8]));
    }

    #[test]
    fn svg_full_bar_at_last_step() {
        let svg = halting_svg(&[0, 0, 0, 0, 0, 0, 0, 10]);
        assert!(svg.contains(r#"data-step="8" data-percent="100.00""#));
        assert!(svg.contains(r#"data-step="1" data-percent="0.00""#));
        assert!(svg.contains(r#"height="180.00""#));
    }
}
