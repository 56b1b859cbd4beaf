//! Per-variant analysis and report rendering: quantitative table, indicator
//! matrix, regression tables (CSV plus aligned text) and plot-data series.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::metrics::{aggregate, group_by_condition, MetricsError, Summary, TrialMetrics};
use crate::stats::{
    linear_fit, logistic_fit, score_indicators, t_interval, wilson_interval, GapRow, IndicatorScore, LogisticRow,
    RegressionFit, StatsError, ALPHA,
};

pub const QUANTITATIVE: &str = "quantitative";
pub const INDICATORS: &str = "indicators";
pub const REGRESSIONS: &str = "regressions";
pub const PLOT_DATA: &str = "plot_data.csv";

/// One Figure-2-style point: a (Δv, h) condition with interval columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub dv: f64,
    pub h: f64,
    pub n_trials: usize,
    pub n_analyzed: usize,
    pub merge_first: Option<(f64, f64, f64)>,
    pub gap: Option<(f64, f64, f64)>,
    pub rmse: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct VariantAnalysis {
    pub label: String,
    pub n_trials: usize,
    pub collision_rate: f64,
    /// Absent when every trial was excluded.
    pub summary: Option<Summary>,
    pub logit: Result<RegressionFit, StatsError>,
    pub gap: Result<RegressionFit, StatsError>,
    pub score: IndicatorScore,
    pub plot: Vec<PlotPoint>,
}

fn mean_with_interval(xs: &[f64]) -> Option<(f64, f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let m = crate::stats::mean(xs);
    Some(match t_interval(xs, 0.95) {
        Ok((lo, hi)) => (m, lo, hi),
        Err(_) => (m, f64::NAN, f64::NAN),
    })
}

fn plot_points(metrics: &[TrialMetrics]) -> Vec<PlotPoint> {
    group_by_condition(metrics)
        .into_values()
        .map(|group| {
            let kept: Vec<&&TrialMetrics> = group.iter().filter(|m| m.is_analyzed()).collect();
            let firsts = kept.iter().filter(|m| m.merge_first == Some(true)).count();
            let merge_first = wilson_interval(firsts as u64, kept.len() as u64, 0.95)
                .ok()
                .map(|(lo, hi)| (firsts as f64 / kept.len() as f64, lo, hi));
            let gaps: Vec<f64> = kept.iter().filter_map(|m| m.gap_at_merge).collect();
            let rmses: Vec<f64> = kept
                .iter()
                .flat_map(|m| [m.speed_rmse_left, m.speed_rmse_right])
                .collect();
            PlotPoint {
                dv: group[0].dv,
                h: group[0].h,
                n_trials: group.len(),
                n_analyzed: kept.len(),
                merge_first,
                gap: mean_with_interval(&gaps),
                rmse: mean_with_interval(&rmses),
            }
        })
        .collect()
}

/// Summary, both regressions and the indicator score for one dataset.
pub fn analyze(label: &str, metrics: &[TrialMetrics]) -> Result<VariantAnalysis, MetricsError> {
    let (summary, collision_rate) = match aggregate(metrics) {
        Ok(s) => {
            let rate = s.collision_rate;
            (Some(s), rate)
        }
        Err(MetricsError::EmptySample { collision_rate }) => (None, collision_rate),
        Err(e) => return Err(e),
    };
    let kept: Vec<&TrialMetrics> = metrics.iter().filter(|m| m.is_analyzed()).collect();
    let logit_rows: Vec<LogisticRow> = kept
        .iter()
        .filter_map(|m| {
            m.merge_first.map(|mf| LogisticRow {
                merge_first: mf,
                h: m.h,
                dv: m.dv,
            })
        })
        .collect();
    let gap_rows: Vec<GapRow> = kept
        .iter()
        .filter_map(|m| m.gap_at_merge.map(|gap| GapRow { gap, h: m.h, dv: m.dv }))
        .collect();
    let logit = logistic_fit(&logit_rows);
    let gap = linear_fit(&gap_rows);
    let score = score_indicators(
        logit.as_ref().ok(),
        gap.as_ref().ok(),
        summary.as_ref().and_then(|s| s.mean_piecewise),
        ALPHA,
    );
    Ok(VariantAnalysis {
        label: label.to_string(),
        n_trials: metrics.len(),
        collision_rate,
        summary,
        logit,
        gap,
        score,
        plot: plot_points(metrics),
    })
}

fn num(x: f64, dp: usize) -> String {
    if x.is_finite() {
        let s = format!("{x:.dp$}");
        // avoid "-0.00"
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    } else {
        "NA".to_string()
    }
}

fn p_text(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        num(p, 3)
    }
}

fn csv_line(cells: &[String]) -> String {
    let quoted: Vec<String> = cells
        .iter()
        .map(|c| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        })
        .collect();
    quoted.join(",") + "\n"
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = csv_line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    for r in rows {
        out.push_str(&csv_line(r));
    }
    out
}

/// Left-aligned first column, right-aligned others.
fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub struct RenderedReports {
    pub quantitative_csv: String,
    pub quantitative_txt: String,
    pub indicators_csv: String,
    pub indicators_txt: String,
    pub regressions_csv: String,
    pub regressions_txt: String,
    pub plot_csv: String,
}

pub fn render(analyses: &[VariantAnalysis]) -> RenderedReports {
    let q_header = ["variant", "n_trials", "n_analyzed", "collision_rate", "mean_gap", "mean_rmse", "joint_rate"];
    let q_rows = |dps: [usize; 4]| -> Vec<Vec<String>> {
        analyses
            .iter()
            .map(|a| {
                let s = a.summary.as_ref();
                vec![
                    a.label.clone(),
                    a.n_trials.to_string(),
                    s.map_or(0, |s| s.n_analyzed).to_string(),
                    num(a.collision_rate, dps[0]),
                    num(s.map_or(f64::NAN, |s| s.mean_gap), dps[1]),
                    num(s.map_or(f64::NAN, |s| s.mean_rmse), dps[2]),
                    num(s.map_or(f64::NAN, |s| s.joint_rate), dps[3]),
                ]
            })
            .collect()
    };

    let i_header = ["variant", "I1", "I2", "I3", "I4", "I5", "score"];
    let i_rows = |mark: fn(bool) -> &'static str| -> Vec<Vec<String>> {
        analyses
            .iter()
            .map(|a| {
                let mut r = vec![a.label.clone()];
                r.extend(a.score.flags().iter().map(|b| mark(*b).to_string()));
                r.push(format!("{}/5", a.score.total));
                r
            })
            .collect()
    };

    let r_header = ["variant", "model", "term", "estimate", "std_error", "statistic", "p_value", "n", "status"];
    let mut r_csv = Vec::new();
    let mut r_txt = Vec::new();
    for a in analyses {
        for (model, fit) in [("logistic", &a.logit), ("linear", &a.gap)] {
            match fit {
                Ok(f) => {
                    for c in &f.coefficients {
                        r_csv.push(vec![
                            a.label.clone(),
                            model.to_string(),
                            c.term.clone(),
                            format!("{:.10}", c.estimate),
                            format!("{:.10}", c.std_error),
                            format!("{:.10}", c.statistic),
                            format!("{:.6e}", c.p_value),
                            f.n.to_string(),
                            "ok".to_string(),
                        ]);
                        r_txt.push(vec![
                            a.label.clone(),
                            model.to_string(),
                            c.term.clone(),
                            num(c.estimate, 2),
                            num(c.std_error, 2),
                            num(c.statistic, 2),
                            p_text(c.p_value),
                            f.n.to_string(),
                            String::new(),
                        ]);
                    }
                }
                Err(e) => {
                    let mut row = vec![a.label.clone(), model.to_string()];
                    row.extend(std::iter::repeat_n(String::new(), 6));
                    row.push(e.to_string());
                    r_csv.push(row.clone());
                    r_txt.push(row);
                }
            }
        }
    }

    let p_header = [
        "variant", "dv", "h", "n_trials", "n_analyzed", "merge_first", "merge_first_lo", "merge_first_hi", "gap",
        "gap_lo", "gap_hi", "rmse", "rmse_lo", "rmse_hi",
    ];
    let triple = |t: Option<(f64, f64, f64)>| match t {
        Some((m, lo, hi)) => [num(m, 6), num(lo, 6), num(hi, 6)],
        None => ["NA".to_string(), "NA".to_string(), "NA".to_string()],
    };
    let p_rows: Vec<Vec<String>> = analyses
        .iter()
        .flat_map(|a| {
            a.plot.iter().map(move |p| {
                let mut r = vec![
                    a.label.clone(),
                    num(p.dv, 3),
                    num(p.h, 3),
                    p.n_trials.to_string(),
                    p.n_analyzed.to_string(),
                ];
                r.extend(triple(p.merge_first));
                r.extend(triple(p.gap));
                r.extend(triple(p.rmse));
                r
            })
        })
        .collect();

    RenderedReports {
        quantitative_csv: csv_table(&q_header, &q_rows([4, 4, 4, 4])),
        quantitative_txt: text_table(&q_header, &q_rows([2, 2, 2, 1])),
        indicators_csv: csv_table(&i_header, &i_rows(|b| if b { "1" } else { "0" })),
        indicators_txt: text_table(&i_header, &i_rows(|b| if b { "yes" } else { "no" })),
        regressions_csv: csv_table(&r_header, &r_csv),
        regressions_txt: text_table(&r_header, &r_txt),
        plot_csv: csv_table(&p_header, &p_rows),
    }
}

/// Writes every report file into `out_dir` and returns the paths written.
pub fn render_reports(analyses: &[VariantAnalysis], out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let r = render(analyses);
    let files = [
        (format!("{QUANTITATIVE}.csv"), r.quantitative_csv),
        (format!("{QUANTITATIVE}.txt"), r.quantitative_txt),
        (format!("{INDICATORS}.csv"), r.indicators_csv),
        (format!("{INDICATORS}.txt"), r.indicators_txt),
        (format!("{REGRESSIONS}.csv"), r.regressions_csv),
        (format!("{REGRESSIONS}.txt"), r.regressions_txt),
        (PLOT_DATA.to_string(), r.plot_csv),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
