//! Communication-latency models and the delayed measurement buffer.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("unknown channel `{0}` (expected fiber_optic, microwave, plc, telephone, satellite or custom)")]
    UnknownChannel(String),
    #[error("invalid delay mixture: {0}")]
    InvalidMixture(String),
    #[error("emit time {got} precedes previous emit time {last}")]
    NonMonotoneEmit { last: f64, got: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLabel {
    FiberOptic,
    Microwave,
    Plc,
    Telephone,
    Satellite,
    Custom,
}

impl ChannelLabel {
    pub const PRESETS: [ChannelLabel; 5] = [
        ChannelLabel::FiberOptic,
        ChannelLabel::Microwave,
        ChannelLabel::Plc,
        ChannelLabel::Telephone,
        ChannelLabel::Satellite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelLabel::FiberOptic => "fiber_optic",
            ChannelLabel::Microwave => "microwave",
            ChannelLabel::Plc => "plc",
            ChannelLabel::Telephone => "telephone",
            ChannelLabel::Satellite => "satellite",
            ChannelLabel::Custom => "custom",
        }
    }

    /// Published latency range in seconds; `None` for custom.
    pub fn range_s(self) -> Option<(f64, f64)> {
        match self {
            ChannelLabel::FiberOptic | ChannelLabel::Microwave => Some((0.100, 0.150)),
            ChannelLabel::Plc => Some((0.150, 0.350)),
            ChannelLabel::Telephone => Some((0.200, 0.300)),
            ChannelLabel::Satellite => Some((0.500, 0.700)),
            ChannelLabel::Custom => None,
        }
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelLabel {
    type Err = DelayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [ChannelLabel::Custom]
            .into_iter()
            .chain(ChannelLabel::PRESETS)
            .find(|l| l.as_str() == s)
            .ok_or_else(|| DelayError::UnknownChannel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    /// Seconds.
    pub mean: f64,
    /// Seconds; zero makes the component a point mass at `mean`.
    pub std: f64,
}

/// Inline description of a custom mixture, as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomMixture {
    pub weights: Vec<f64>,
    pub means_s: Vec<f64>,
    pub stds_s: Vec<f64>,
    pub trunc_s: [f64; 2],
}

/// Gaussian mixture truncated to `[min_s, max_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureDelay {
    pub components: Vec<MixtureComponent>,
    pub min_s: f64,
    pub max_s: f64,
    pub label: ChannelLabel,
}

impl GaussianMixtureDelay {
    /// Two equal-weight components at a quarter and three quarters of the
    /// channel range, each with std = span/8, truncated to the range.
    pub fn preset(label: ChannelLabel) -> Result<Self, DelayError> {
        let (lo, hi) = label.range_s().ok_or_else(|| {
            DelayError::InvalidMixture("custom channels need explicit components".into())
        })?;
        let span = hi - lo;
        let comp = |frac: f64| MixtureComponent {
            weight: 0.5,
            mean: lo + frac * span,
            std: span / 8.0,
        };
        Ok(Self {
            components: vec![comp(0.25), comp(0.75)],
            min_s: lo,
            max_s: hi,
            label,
        })
    }

    pub fn from_name(name: &str) -> Result<Self, DelayError> {
        Self::preset(name.parse()?)
    }

    pub fn custom(spec: &CustomMixture) -> Result<Self, DelayError> {
        let n = spec.weights.len();
        if spec.means_s.len() != n || spec.stds_s.len() != n {
            return Err(DelayError::InvalidMixture(format!(
                "{} weights, {} means, {} stds",
                n,
                spec.means_s.len(),
                spec.stds_s.len()
            )));
        }
        let model = Self {
            components: (0..n)
                .map(|k| MixtureComponent {
                    weight: spec.weights[k],
                    mean: spec.means_s[k],
                    std: spec.stds_s[k],
                })
                .collect(),
            min_s: spec.trunc_s[0],
            max_s: spec.trunc_s[1],
            label: ChannelLabel::Custom,
        };
        model.validate()?;
        Ok(model)
    }

    /// Degenerate single point mass; `delay_s = 0` gives an ideal channel.
    pub fn constant(delay_s: f64) -> Self {
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: delay_s,
                std: 0.0,
            }],
            min_s: delay_s,
            max_s: delay_s,
            label: ChannelLabel::Custom,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.components.iter().all(|c| c.std == 0.0)
    }

    pub fn validate(&self) -> Result<(), DelayError> {
        let bad = |m: String| Err(DelayError::InvalidMixture(m));
        if self.components.is_empty() {
            return bad("no components".into());
        }
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return bad(format!("weights sum to {wsum}"));
        }
        for c in &self.components {
            if !(c.weight >= 0.0 && c.std >= 0.0 && c.mean.is_finite() && c.std.is_finite()) {
                return bad(format!("component {c:?}"));
            }
        }
        if !(self.min_s >= 0.0 && self.min_s.is_finite() && self.max_s.is_finite()) {
            return bad(format!("truncation [{}, {}]", self.min_s, self.max_s));
        }
        if self.is_degenerate() {
            if self.min_s > self.max_s {
                return bad(format!("truncation [{}, {}]", self.min_s, self.max_s));
            }
        } else if self.min_s >= self.max_s {
            return bad(format!(
                "truncation [{}, {}] is empty",
                self.min_s, self.max_s
            ));
        }
        let mass = self.truncated_mass();
        if !(mass > 1e-9) {
            return bad(format!("mixture mass inside the truncation is {mass:e}"));
        }
        if self.label != ChannelLabel::Custom && !(self.min_s > 0.0) {
            return bad("preset channels need strictly positive delays".into());
        }
        Ok(())
    }

    fn component_mass(&self, c: &MixtureComponent) -> f64 {
        if c.std == 0.0 {
            return if (self.min_s..=self.max_s).contains(&c.mean) {
                1.0
            } else {
                0.0
            };
        }
        let n = StatNormal::new(c.mean, c.std).expect("std > 0");
        n.cdf(self.max_s) - n.cdf(self.min_s)
    }

    /// Probability mass of the untruncated mixture inside the truncation.
    pub fn truncated_mass(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * self.component_mass(c))
            .sum()
    }

    /// Density of the truncated mixture. Point-mass components carry no density.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.min_s || x > self.max_s {
            return 0.0;
        }
        let dens: f64 = self
            .components
            .iter()
            .filter(|c| c.std > 0.0)
            .map(|c| c.weight * StatNormal::new(c.mean, c.std).expect("std > 0").pdf(x))
            .sum();
        dens / self.truncated_mass()
    }

    /// Closed-form mean of the truncated mixture.
    pub fn truncated_mean(&self) -> f64 {
        let mut num = 0.0;
        for c in &self.components {
            if c.std == 0.0 {
                num += c.weight * self.component_mass(c) * c.mean;
                continue;
            }
            let n = StatNormal::new(0.0, 1.0).expect("unit normal");
            let a = (self.min_s - c.mean) / c.std;
            let b = (self.max_s - c.mean) / c.std;
            let z = n.cdf(b) - n.cdf(a);
            num += c.weight * (c.mean * z + c.std * (n.pdf(a) - n.pdf(b)));
        }
        num / self.truncated_mass()
    }

    /// Component by weight, Gaussian draw, both redrawn until the value lands
    /// inside the truncation.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.components.last().expect("validated mixture");
            for c in &self.components {
                acc += c.weight;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            let x = if chosen.std == 0.0 {
                chosen.mean
            } else {
                Normal::new(chosen.mean, chosen.std)
                    .expect("finite std")
                    .sample(rng)
            };
            if x >= self.min_s && x <= self.max_s {
                return x;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub emit_time: f64,
    pub arrive_time: f64,
    pub payload: T,
}

/// Time-indexed store of in-flight measurements for one controller.
///
/// Reads return the freshest sample that has arrived; an older packet that
/// arrives late never replaces a newer one already delivered.
#[derive(Debug, Clone)]
pub struct MeasurementBuffer<T> {
    entries: VecDeque<Entry<T>>,
    capacity: usize,
    delivered: Option<Entry<T>>,
}

impl<T: Clone> MeasurementBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            delivered: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &Entry<T>> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.delivered = None;
    }

    /// Stores `payload` with a latency drawn from `model`; returns the arrival time.
    pub fn push<R: Rng + ?Sized>(
        &mut self,
        emit_time: f64,
        payload: T,
        model: &GaussianMixtureDelay,
        rng: &mut R,
    ) -> Result<f64, DelayError> {
        self.check_emit(emit_time)?;
        let arrive_time = emit_time + model.sample(rng);
        self.insert(Entry {
            emit_time,
            arrive_time,
            payload,
        });
        Ok(arrive_time)
    }

    /// Stores `payload` with a given latency.
    pub fn push_with_delay(
        &mut self,
        emit_time: f64,
        payload: T,
        delay_s: f64,
    ) -> Result<f64, DelayError> {
        self.check_emit(emit_time)?;
        if !(delay_s >= 0.0) {
            return Err(DelayError::InvalidMixture(format!("delay {delay_s}")));
        }
        let arrive_time = emit_time + delay_s;
        self.insert(Entry {
            emit_time,
            arrive_time,
            payload,
        });
        Ok(arrive_time)
    }

    fn check_emit(&self, emit_time: f64) -> Result<(), DelayError> {
        if let Some(last) = self.entries.back() {
            if emit_time < last.emit_time || !emit_time.is_finite() {
                return Err(DelayError::NonMonotoneEmit {
                    last: last.emit_time,
                    got: emit_time,
                });
            }
        }
        Ok(())
    }

    fn insert(&mut self, entry: Entry<T>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Freshest arrived sample at `now`, or `None` if nothing has arrived.
    pub fn read_delayed(&mut self, now: f64) -> Option<&Entry<T>> {
        let newest = self
            .entries
            .iter()
            .rev()
            .find(|e| e.arrive_time <= now)
            .filter(|e| {
                self.delivered
                    .as_ref()
                    .is_none_or(|d| e.emit_time > d.emit_time)
            });
        if let Some(e) = newest {
            self.delivered = Some(e.clone());
        }
        self.delivered.as_ref()
    }
}
