//! Synthetic IMTS generation with controllable sparsity.
//!
//! Each channel's latent signal is a sum of one or two sinusoids plus a
//! shared mixing component, so channels are correlated and forecasting
//! is learnable without being trivial. Events inside the observation
//! window carry noisy readings; the events appended after the window
//! carry noiseless latent values, so a task sliced at the window
//! boundary has ground truth whose Bayes-optimal MSE equals the noise
//! variance.
//!
//! Masking is cover-then-fill: every event first observes one uniformly
//! chosen channel, then each remaining cell is kept with the probability
//! that makes the expected observed share equal `1 - sparsity`. Plain
//! independent masking cannot both hit the target sparsity and keep
//! every event non-empty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset};
use crate::graph::{Event, TimeSeries};

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub instance_count: usize,
    pub channel_count: usize,
    /// Event count per instance, drawn uniformly from this inclusive range.
    pub events_min: usize,
    pub events_max: usize,
    /// Observation window length; event times are drawn in `(0, window)`.
    pub window: f64,
    /// Number of forecast events appended after the window.
    pub horizon_steps: usize,
    /// Span after the window the forecast events are drawn in.
    pub horizon_span: f64,
    pub amplitude_range: (f64, f64),
    /// Sinusoid frequency in cycles per time unit.
    pub frequency_range: (f64, f64),
    /// Weight of the shared cross-channel component.
    pub mixing_strength: f64,
    /// Target share of missing cells per event, in `[0, 1)`.
    pub sparsity: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            instance_count: 100,
            channel_count: 5,
            events_min: 20,
            events_max: 40,
            window: 36.0,
            horizon_steps: 3,
            horizon_span: 6.0,
            amplitude_range: (0.5, 1.5),
            frequency_range: (0.02, 0.1),
            mixing_strength: 0.5,
            sparsity: 0.5,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.instance_count == 0 || self.channel_count == 0 || self.events_min == 0 {
            return Err(DataError::InvalidSpec(
                "instance, channel and event counts must be positive".into(),
            ));
        }
        if self.events_min > self.events_max {
            return Err(DataError::InvalidSpec(
                "events_min exceeds events_max".into(),
            ));
        }
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(DataError::InvalidSpec("window must be positive".into()));
        }
        if self.horizon_steps > 0 && !(self.horizon_span.is_finite() && self.horizon_span > 0.0) {
            return Err(DataError::InvalidSpec(
                "horizon_span must be positive when horizon_steps > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(DataError::InvalidSpec("sparsity must be in [0, 1)".into()));
        }
        // small slack so boundary cases like s = 0.9, C = 10 pass
        if (1.0 - self.sparsity) * (self.channel_count as f64) < 1.0 - 1e-9 {
            return Err(DataError::InvalidSpec(format!(
                "sparsity {} leaves fewer than one expected observation per event over {} channels",
                self.sparsity, self.channel_count
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(DataError::InvalidSpec(
                "noise_std must be finite and non-negative".into(),
            ));
        }
        for (lo, hi) in [self.amplitude_range, self.frequency_range] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                return Err(DataError::InvalidSpec(
                    "amplitude and frequency ranges must be positive and ordered".into(),
                ));
            }
        }
        Ok(())
    }

    /// Probability a non-covering cell is observed, chosen so the
    /// expected observed count per event is `(1 - sparsity) * C`.
    fn fill_probability(&self) -> f64 {
        let c = self.channel_count as f64;
        if self.channel_count == 1 {
            return 0.0;
        }
        (((1.0 - self.sparsity) * c - 1.0) / (c - 1.0)).clamp(0.0, 1.0)
    }
}

struct Sinusoid {
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

impl Sinusoid {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let (alo, ahi) = spec.amplitude_range;
        let (flo, fhi) = spec.frequency_range;
        Sinusoid {
            amplitude: rng.gen_range(alo..=ahi),
            frequency: rng.gen_range(flo..=fhi),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * self.frequency * t + self.phase).sin()
    }
}

struct Latent {
    per_channel: Vec<Vec<Sinusoid>>,
    shared: Sinusoid,
    mixing_weights: Vec<f64>,
    mixing_strength: f64,
}

impl Latent {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let per_channel = (0..spec.channel_count)
            .map(|_| {
                let k = rng.gen_range(1..=2);
                (0..k).map(|_| Sinusoid::sample(spec, rng)).collect()
            })
            .collect();
        let shared = Sinusoid::sample(spec, rng);
        let mixing_weights = (0..spec.channel_count)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        Latent {
            per_channel,
            shared,
            mixing_weights,
            mixing_strength: spec.mixing_strength,
        }
    }

    fn at(&self, channel: usize, t: f64) -> f64 {
        let own: f64 = self.per_channel[channel].iter().map(|s| s.at(t)).sum();
        own + self.mixing_strength * self.mixing_weights[channel] * self.shared.at(t)
    }
}

/// Draws `n` distinct times in `(lo, hi)`, ascending.
fn distinct_times(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    loop {
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        if times.len() == n {
            return times;
        }
        while times.len() < n {
            times.push(rng.gen_range(lo..hi));
        }
    }
}

/// Observation mask for one event: one covering channel plus
/// independent fills.
fn mask_event(rng: &mut ChaCha8Rng, channel_count: usize, fill_p: f64) -> Vec<bool> {
    let cover = rng.gen_range(0..channel_count);
    (0..channel_count)
        .map(|c| c == cover || rng.gen_bool(fill_p))
        .collect()
}

/// Generates a dataset of raw series. Each series holds the noisy
/// windowed events followed by `horizon_steps` noiseless forecast
/// events; slice at `spec.window` to obtain tasks.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<u64> = (0..spec.instance_count).map(|_| master.gen()).collect();
    let fill_p = spec.fill_probability();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .expect("validated noise std");

    let mut instances = Vec::with_capacity(spec.instance_count);
    for &seed in &seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Latent::sample(spec, &mut rng);
        let n = rng.gen_range(spec.events_min..=spec.events_max);
        let mut times = distinct_times(&mut rng, n, 0.0, spec.window);
        times.extend(distinct_times(
            &mut rng,
            spec.horizon_steps,
            spec.window,
            spec.window + spec.horizon_span,
        ));
        // masks before values, so the noise draws sit at the end of the
        // stream and the noise level cannot shift anything else
        let masks: Vec<Vec<bool>> = times
            .iter()
            .map(|_| mask_event(&mut rng, spec.channel_count, fill_p))
            .collect();
        let events = times
            .iter()
            .zip(&masks)
            .enumerate()
            .map(|(i, (&t, mask))| {
                let in_window = i < n;
                let values = mask
                    .iter()
                    .enumerate()
                    .map(|(c, &obs)| {
                        if !obs {
                            return None;
                        }
                        let mut v = latent.at(c, t);
                        if in_window && spec.noise_std > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        Some(v)
                    })
                    .collect();
                Event { time: t, values }
            })
            .collect();
        let ts = TimeSeries {
            events,
            channel_count: spec.channel_count,
        };
        ts.validate()?;
        instances.push(ts);
    }
    Ok(Dataset {
        channel_count: spec.channel_count,
        instances,
    })
}

/// Asynchronous sparsification: each event keeps exactly one of its
/// observed channels (uniformly chosen), then an `x` fraction of the
/// removed observations is put back, uniformly over the whole dataset.
pub fn sparsify_asts(ds: &Dataset, x: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DataError::InvalidSpec(
            "retrieve fraction must be in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    let mut removed: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (i, ts) in out.instances.iter_mut().enumerate() {
        for (j, event) in ts.events.iter_mut().enumerate() {
            let observed: Vec<usize> = (0..ts.channel_count)
                .filter(|&c| event.values[c].is_some())
                .collect();
            if observed.len() <= 1 {
                continue;
            }
            let keep = observed[rng.gen_range(0..observed.len())];
            for &c in &observed {
                if c != keep {
                    removed.push((i, j, c, event.values[c].take().unwrap()));
                }
            }
        }
    }
    let readd = (x * removed.len() as f64).round() as usize;
    for k in 0..readd {
        // partial Fisher-Yates: draw the k-th re-added cell
        let pick = rng.gen_range(k..removed.len());
        removed.swap(k, pick);
        let (i, j, c, v) = removed[k];
        out.instances[i].events[j].values[c] = Some(v);
    }
    Ok(out)
}
