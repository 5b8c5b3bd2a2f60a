use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lfo_core::metrics::{mean_overall_speed, moving_average_return, EpisodeRecord, LearningSpeed};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::ensure_dir;
use crate::error::LabError;
use crate::eval::{write_rows, TraceIndexRow, TRACE_DIR, TRACE_INDEX};
use crate::train::{read_training_log, TRAINING_LOG};

pub const PLOT_DIR: &str = "plots";
/// Returns are averaged over the last five episodes in the learning curve.
pub const RETURN_WINDOW: usize = 5;
pub const SPEED_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub moving_avg: f64,
    pub initial_q: f64,
}

pub fn learning_curve(records: &[EpisodeRecord]) -> Vec<CurveRow> {
    let avg = moving_average_return(records, RETURN_WINDOW);
    records
        .iter()
        .zip(avg)
        .map(|(r, m)| CurveRow {
            episode: r.episode,
            ret: r.ret,
            moving_avg: m,
            initial_q: r.initial_q,
        })
        .collect()
}

/// Success rate over the trailing `window` after every episode, counting the
/// episodes before training started as failures. Index 0 is the starting
/// level 0, index `k` the rate after `k` episodes.
pub fn trailing_success_curve(records: &[EpisodeRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let flags: Vec<f64> = records
        .iter()
        .map(|r| if r.success { 1.0 } else { 0.0 })
        .collect();
    let mut out = Vec::with_capacity(flags.len() + 1);
    out.push(0.0);
    let mut sum = 0.0;
    for i in 0..flags.len() {
        sum += flags[i];
        if i >= window {
            sum -= flags[i - window];
        }
        out.push(sum / window as f64);
    }
    out
}

/// Learning speed of a training log; `episodes_to_threshold` counts episodes
/// until the trailing success rate first reaches the threshold.
pub fn learning_speed(
    records: &[EpisodeRecord],
    window: usize,
    threshold: f64,
) -> Result<LearningSpeed, LabError> {
    Ok(mean_overall_speed(
        &trailing_success_curve(records, window),
        threshold,
    )?)
}

/// Minimal line chart, one polyline per series.
pub fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let pts = series
        .iter()
        .flat_map(|(_, p)| p.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let esc = |s: &str| {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="{M}" y="{}" font-size="10">{x0:.3}</text>"#,
        H - M + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#,
        W - M,
        H - M + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3e}</text>"#,
        M - 4.0,
        H - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{M}" font-size="10" text-anchor="end">{y1:.3e}</text>"#,
        M - 4.0
    );
    for (k, (name, points)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for &(x, y) in points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
        {
            let _ = write!(d, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - M - 120.0,
            M + 14.0 * k as f64,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_text(path: &Path, text: &str) -> Result<(), LabError> {
    std::fs::write(path, text).map_err(LabError::io(format!("write {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    t: f64,
    gen_id: usize,
    omega_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub channel: String,
    pub controller: String,
    pub seed: u64,
    pub episode: usize,
    pub t: f64,
    pub gen_id: usize,
    pub omega_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub seed: u64,
    pub episode: usize,
    pub constant: f64,
    pub variable: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSummaryRow {
    pub seed: u64,
    pub run: String,
    pub mean_overall_speed: f64,
    pub episodes_to_threshold: Option<usize>,
}

/// Files written by `plotdata`.
#[derive(Debug, Default)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
}

/// Figure data from the runs under `cfg.out`: learning curves per seed, the
/// speed traces of the evaluation grid and, when both runs are configured,
/// the constant- versus variable-delay learning speed.
pub fn cmd_plotdata(cfg: &ExperimentConfig) -> Result<PlotOutput, LabError> {
    let plot_dir = cfg.out.join(PLOT_DIR);
    let mut out = PlotOutput::default();
    let mut found = false;

    for &seed in &cfg.seeds {
        let log = cfg.seed_dir(seed).join(TRAINING_LOG);
        if !log.exists() {
            continue;
        }
        found = true;
        ensure_dir(&plot_dir)?;
        let curve = learning_curve(&read_training_log(&log)?);
        let path = plot_dir.join(format!("learning_curve_seed{seed}.csv"));
        write_rows(&path, &curve)?;
        out.files.push(path);
        if cfg.plot.svg {
            let svg = svg_line_chart(
                &format!("Learning curve, seed {seed}"),
                "episode",
                "return",
                &[
                    (
                        "return",
                        curve.iter().map(|r| (r.episode as f64, r.ret)).collect(),
                    ),
                    (
                        "moving average",
                        curve
                            .iter()
                            .map(|r| (r.episode as f64, r.moving_avg))
                            .collect(),
                    ),
                ],
            );
            let path = plot_dir.join(format!("learning_curve_seed{seed}.svg"));
            write_text(&path, &svg)?;
            out.files.push(path);
        }
    }

    let index_path = cfg.out.join(TRACE_DIR).join(TRACE_INDEX);
    if index_path.exists() {
        found = true;
        ensure_dir(&plot_dir)?;
        let mut index: Vec<TraceIndexRow> = csv::Reader::from_path(&index_path)?
            .deserialize()
            .collect::<Result<_, _>>()?;
        index.sort_by(|a, b| a.file.cmp(&b.file));
        let mut rows = Vec::new();
        for entry in &index {
            let mut r = csv::Reader::from_path(cfg.out.join(TRACE_DIR).join(&entry.file))?;
            for s in r.deserialize::<TraceRow>() {
                let s = s?;
                rows.push(ComparisonRow {
                    scenario: entry.scenario.clone(),
                    channel: entry.channel.clone(),
                    controller: entry.controller.clone(),
                    seed: entry.seed,
                    episode: entry.episode,
                    t: s.t,
                    gen_id: s.gen_id,
                    omega_pu: s.omega_pu,
                });
            }
        }
        let path = plot_dir.join("channel_comparison.csv");
        write_rows(&path, &rows)?;
        out.files.push(path);
        if cfg.plot.svg {
            // first generator of each trace
            let series: Vec<(&str, Vec<(f64, f64)>)> = index
                .iter()
                .map(|e| {
                    let pts = rows
                        .iter()
                        .filter(|r| {
                            r.gen_id == 0
                                && r.scenario == e.scenario
                                && r.channel == e.channel
                                && r.controller == e.controller
                                && r.seed == e.seed
                                && r.episode == e.episode
                        })
                        .map(|r| (r.t, r.omega_pu))
                        .collect();
                    (e.file.as_str(), pts)
                })
                .collect();
            let path = plot_dir.join("channel_comparison.svg");
            write_text(
                &path,
                &svg_line_chart("Generator 1 speed", "t [s]", "omega [pu]", &series),
            )?;
            out.files.push(path);
        }
    }

    if let (Some(c), Some(v)) = (&cfg.plot.constant_run, &cfg.plot.variable_run) {
        found = true;
        ensure_dir(&plot_dir)?;
        let mut rows = Vec::new();
        let mut summary = Vec::new();
        for &seed in &cfg.seeds {
            let seed_dir = format!("seed_{seed}");
            let rc = read_training_log(&c.join(&seed_dir).join(TRAINING_LOG))?;
            let rv = read_training_log(&v.join(&seed_dir).join(TRAINING_LOG))?;
            let cc = trailing_success_curve(&rc, cfg.success_window);
            let cv = trailing_success_curve(&rv, cfg.success_window);
            for k in 0..cc.len().max(cv.len()) {
                rows.push(SpeedRow {
                    seed,
                    episode: k,
                    constant: cc.get(k).copied().unwrap_or(f64::NAN),
                    variable: cv.get(k).copied().unwrap_or(f64::NAN),
                });
            }
            for (run, recs) in [("constant", &rc), ("variable", &rv)] {
                let s = learning_speed(recs, cfg.success_window, SPEED_THRESHOLD)?;
                summary.push(SpeedSummaryRow {
                    seed,
                    run: run.into(),
                    mean_overall_speed: s.mean_overall_speed,
                    episodes_to_threshold: s.episodes_to_threshold,
                });
            }
            if cfg.plot.svg {
                let svg = svg_line_chart(
                    &format!("Trailing success rate, seed {seed}"),
                    "episode",
                    "success rate",
                    &[
                        (
                            "constant delay",
                            cc.iter().enumerate().map(|(k, &y)| (k as f64, y)).collect(),
                        ),
                        (
                            "variable delay",
                            cv.iter().enumerate().map(|(k, &y)| (k as f64, y)).collect(),
                        ),
                    ],
                );
                let path = plot_dir.join(format!("learning_speed_seed{seed}.svg"));
                write_text(&path, &svg)?;
                out.files.push(path);
            }
        }
        let path = plot_dir.join("learning_speed.csv");
        write_rows(&path, &rows)?;
        out.files.push(path);
        let path = plot_dir.join("learning_speed_summary.csv");
        write_rows(&path, &summary)?;
        out.files.push(path);
    }

    if !found {
        return Err(LabError::MissingInput(format!(
            "no training logs or traces under {}",
            cfg.out.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(flags: &[bool]) -> Vec<EpisodeRecord> {
        flags
            .iter()
            .enumerate()
            .map(|(episode, &success)| EpisodeRecord {
                episode,
                ret: 0.0,
                success,
                initial_q: 0.0,
                wall_time_s: 0.0,
            })
            .collect()
    }

    #[test]
    fn curve_counts_missing_history_as_failures() {
        let c = trailing_success_curve(&recs(&[true, true, false, true]), 2);
        assert_eq!(c, vec![0.0, 0.5, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn immediate_success_reaches_threshold_after_a_full_window() {
        let s = learning_speed(&recs(&[true; 20]), 10, 0.8).unwrap();
        assert_eq!(s.episodes_to_threshold, Some(8));
    }

    #[test]
    fn svg_escapes_labels() {
        let svg = svg_line_chart("a<b", "x", "y", &[("s&t", vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(svg.contains("a&lt;b") && svg.contains("s&amp;t"));
    }
}
