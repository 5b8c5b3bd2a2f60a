//! Learning-curve and damping measurements. Every function is pure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("window of {window} needs at least that many records, have {have}")]
    Window { window: usize, have: usize },
    #[error("trace spans {span:.3} s, shorter than the {window:.3} s tail window")]
    ShortTrace { span: f64, window: f64 },
    #[error("need at least {need} points, have {have}")]
    TooFew { need: usize, have: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub success: bool,
    pub initial_q: f64,
    pub wall_time_s: f64,
}

/// Fraction of successful episodes among the last `window`.
pub fn success_rate(records: &[EpisodeRecord], window: usize) -> Result<f64, MetricsError> {
    if window == 0 || window > records.len() {
        return Err(MetricsError::Window {
            window,
            have: records.len(),
        });
    }
    let tail = &records[records.len() - window..];
    Ok(tail.iter().filter(|r| r.success).count() as f64 / window as f64)
}

/// Trailing mean; the first `window − 1` points average what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn moving_average_return(records: &[EpisodeRecord], window: usize) -> Vec<f64> {
    moving_average(&records.iter().map(|r| r.ret).collect::<Vec<_>>(), window)
}

/// Trailing success rate after every episode.
pub fn smoothed_success(records: &[EpisodeRecord], window: usize) -> Vec<f64> {
    moving_average(
        &records
            .iter()
            .map(|r| if r.success { 1.0 } else { 0.0 })
            .collect::<Vec<_>>(),
        window,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampingReport {
    /// Largest `|ω − 1|` over all generators after clearing, pu.
    pub peak_deviation: f64,
    /// Time after which every `|ω − 1|` stays below the threshold; `None`
    /// when the trace never settles.
    pub settling_time: Option<f64>,
    /// `∫ Σ_g (ω_g − 1)² dt` over the final window, pu²·s.
    pub tail_energy: f64,
}

/// Damping quality of a speed trace. `omega[k]` holds every generator's speed
/// at `times[k]`.
pub fn damping_report(
    times: &[f64],
    omega: &[Vec<f64>],
    clear_time: f64,
    threshold: f64,
    tail_window: f64,
) -> Result<DampingReport, MetricsError> {
    if times.len() < 2 || omega.len() != times.len() {
        return Err(MetricsError::TooFew {
            need: 2,
            have: times.len().min(omega.len()),
        });
    }
    let span = times[times.len() - 1] - times[0];
    if span + 1e-9 < tail_window {
        return Err(MetricsError::ShortTrace {
            span,
            window: tail_window,
        });
    }
    let dev = |k: usize| omega[k].iter().fold(0.0f64, |m, w| m.max((w - 1.0).abs()));
    let post: Vec<usize> = (0..times.len())
        .filter(|&k| times[k] >= clear_time)
        .collect();
    let peak_deviation = post.iter().map(|&k| dev(k)).fold(0.0, f64::max);
    let settling_time = match post.iter().rev().find(|&&k| dev(k) >= threshold) {
        None => Some(clear_time),
        Some(&k) if k + 1 < times.len() => Some(times[k + 1]),
        Some(_) => None,
    };
    let t_end = times[times.len() - 1];
    let start = t_end - tail_window;
    let energy = |k: usize| omega[k].iter().map(|w| (w - 1.0) * (w - 1.0)).sum::<f64>();
    let mut tail_energy = 0.0;
    for k in 1..times.len() {
        if times[k] <= start + 1e-12 {
            continue;
        }
        let (t0, t1) = (times[k - 1].max(start), times[k]);
        // energy at the clipped left edge by linear interpolation
        let e0 = if times[k - 1] < start {
            let f = (start - times[k - 1]) / (times[k] - times[k - 1]);
            energy(k - 1) + f * (energy(k) - energy(k - 1))
        } else {
            energy(k - 1)
        };
        tail_energy += 0.5 * (e0 + energy(k)) * (t1 - t0);
    }
    Ok(DampingReport {
        peak_deviation,
        settling_time,
        tail_energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningSpeed {
    /// `Σ v_x / max v_x` over per-episode increments `v_x` of the curve.
    pub mean_overall_speed: f64,
    /// First index at which the curve reaches the threshold.
    pub episodes_to_threshold: Option<usize>,
}

/// Learning speed of a smoothed success curve whose first point is the
/// starting level. The direction factor of the target is fixed at 1.
pub fn mean_overall_speed(curve: &[f64], threshold: f64) -> Result<LearningSpeed, MetricsError> {
    if curve.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            have: curve.len(),
        });
    }
    let inc: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    let max = inc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_overall_speed = if max > 0.0 {
        inc.iter().sum::<f64>() / max
    } else {
        0.0
    };
    let episodes_to_threshold = curve.iter().position(|&c| c >= threshold);
    Ok(LearningSpeed {
        mean_overall_speed,
        episodes_to_threshold,
    })
}
