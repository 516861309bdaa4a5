//! Discretized realizations and their rain-event logs.

use crate::error::{Error, Result};

/// One dry period followed by the rain event it triggers.
///
/// `rain_end` is `None` when the rain was still falling at the horizon. In the
/// spike-train limit `rain_start == rain_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainEvent {
    pub dry_start: f64,
    pub rain_start: f64,
    pub rain_end: Option<f64>,
}

impl RainEvent {
    pub fn dry_duration(&self) -> f64 {
        self.rain_start - self.dry_start
    }

    pub fn rain_duration(&self) -> Option<f64> {
        self.rain_end.map(|e| e - self.rain_start)
    }
}

/// Ordered rain events of one path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    entries: Vec<RainEvent>,
    horizon: f64,
}

impl EventLog {
    pub fn new(horizon: f64) -> Self {
        Self {
            entries: Vec::new(),
            horizon,
        }
    }

    pub(crate) fn push(&mut self, ev: RainEvent) {
        self.entries.push(ev);
    }

    pub(crate) fn close_last(&mut self, rain_end: f64) {
        if let Some(last) = self.entries.last_mut() {
            last.rain_end = Some(rain_end);
        }
    }

    pub fn entries(&self) -> &[RainEvent] {
        &self.entries
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of rain onsets in `[0, t]`.
    pub fn count(&self, t: f64) -> usize {
        self.entries.partition_point(|e| e.rain_start <= t)
    }

    /// Number of full dry+rain cycles finished by the horizon.
    pub fn completed_cycles(&self) -> usize {
        self.entries.iter().filter(|e| e.rain_end.is_some()).count()
    }

    pub fn dry_durations(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(RainEvent::dry_duration)
    }

    /// Durations of the rain events that ended before the horizon.
    pub fn rain_durations(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().filter_map(RainEvent::rain_duration)
    }

    /// Rain intervals clipped to the horizon.
    pub fn rain_intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.entries
            .iter()
            .map(|e| (e.rain_start, e.rain_end.unwrap_or(self.horizon)))
    }

    /// Total time spent raining in `[0, horizon]`.
    pub fn total_rain_time(&self) -> f64 {
        self.rain_intervals().map(|(a, b)| b - a).sum()
    }

    /// Whether `t` lies in a (half-open) rain interval.
    pub fn is_raining_at(&self, t: f64) -> bool {
        let k = self.count(t);
        if k == 0 {
            return false;
        }
        let e = &self.entries[k - 1];
        match e.rain_end {
            Some(end) => t < end,
            None => true,
        }
    }

    /// Verifies the ordering invariants:
    /// `dry_start < rain_start <= rain_end <= next dry_start`, only the last
    /// event may be open, and everything lies in `[0, horizon]`.
    pub fn check(&self) -> Result<()> {
        let bad = |i: usize, what: &str| Err(Error::Misaligned(format!("event {i}: {what}")));
        let n = self.entries.len();
        for (i, e) in self.entries.iter().enumerate() {
            if i == 0 && e.dry_start < 0.0 {
                return bad(i, "dry_start < 0");
            }
            if !(e.dry_start < e.rain_start) {
                return bad(i, "dry_start >= rain_start");
            }
            if e.rain_start > self.horizon {
                return bad(i, "rain_start beyond horizon");
            }
            match e.rain_end {
                Some(end) => {
                    if end < e.rain_start {
                        return bad(i, "rain_end < rain_start");
                    }
                    if end > self.horizon {
                        return bad(i, "rain_end beyond horizon");
                    }
                    if i + 1 < n && end > self.entries[i + 1].dry_start {
                        return bad(i, "rain_end after next dry_start");
                    }
                }
                None if i + 1 < n => return bad(i, "open event before the last"),
                None => {}
            }
        }
        Ok(())
    }
}

/// The rain process carried by a path record.
#[derive(Debug, Clone, PartialEq)]
pub enum RainSignal {
    /// Finite rain rate: a state flag per grid node and the rate `r/epsilon`
    /// used whenever the flag is set.
    Rate { raining: Vec<bool>, rate: f64 },
    /// Spike train: each spike delivers `mass` instantaneously.
    Spikes { times: Vec<f64>, mass: f64 },
}

impl RainSignal {
    /// Rain rate at grid node `k` (zero between spikes in the limit).
    pub fn value_at(&self, k: usize) -> f64 {
        match self {
            RainSignal::Rate { raining, rate } => {
                if raining[k] {
                    *rate
                } else {
                    0.0
                }
            }
            RainSignal::Spikes { .. } => 0.0,
        }
    }
}

/// A realization of `(q, sigma, E, P)` on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub sigma: RainSignal,
    /// Evaporation (moistening) component.
    pub e: Vec<f64>,
    /// Precipitation component.
    pub p: Vec<f64>,
    pub events: EventLog,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest `|q - (E + P)|` relative to `b`.
    pub fn decomposition_error(&self, b: f64) -> f64 {
        self.q
            .iter()
            .zip(self.e.iter().zip(&self.p))
            .map(|(q, (e, p))| (q - (e + p)).abs())
            .fold(0.0, f64::max)
            / b
    }

    /// Checks time-grid and event-log invariants.
    pub fn check(&self) -> Result<()> {
        if self.times.first() != Some(&0.0) {
            return Err(Error::Misaligned("times[0] must be 0".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Misaligned("times not strictly increasing".into()));
        }
        let last = *self.times.last().unwrap();
        if last > self.events.horizon() * (1.0 + 1e-12) {
            return Err(Error::Misaligned("grid extends past the horizon".into()));
        }
        for v in [&self.q, &self.e, &self.p] {
            if v.len() != self.times.len() {
                return Err(Error::Misaligned("component length differs from grid".into()));
            }
        }
        self.events.check()
    }
}
