//! Power delay profiles and the statistics computed from them.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cir::{CirTrace, Domain};
use crate::error::{Error, Result};

/// Power per delay bin on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdp {
    pub time_s: f64,
    pub delay_step_s: f64,
    pub powers: Vec<f64>,
}

impl Pdp {
    pub fn delay_s(&self, k: usize) -> f64 {
        k as f64 * self.delay_step_s
    }

    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }

    /// True when every bin is zero.
    pub fn is_empty_profile(&self) -> bool {
        self.powers.iter().all(|&p| p == 0.0)
    }
}

/// `|h|²` per tap.
pub fn instantaneous_pdp(h: &[Complex64], time_s: f64, delay_step_s: f64) -> Pdp {
    Pdp {
        time_s,
        delay_step_s,
        powers: h.iter().map(|x| x.norm_sqr()).collect(),
    }
}

/// How bins are judged to be above the noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseFloor {
    /// Keep every bin.
    None,
    /// Absolute noise power in dB; bins below floor + 6 dB are zeroed.
    Absolute(f64),
    /// Noise floor placed this many dB below the profile peak.
    BelowPeak(f64),
}

impl Default for NoiseFloor {
    fn default() -> Self {
        NoiseFloor::BelowPeak(100.0)
    }
}

/// Margin above the noise floor a bin must clear.
pub const NOISE_MARGIN_DB: f64 = 6.0;

impl NoiseFloor {
    /// Linear power threshold for a profile whose largest bin is `peak`.
    pub fn threshold(&self, peak: f64) -> f64 {
        let floor_db = match *self {
            NoiseFloor::None => return f64::NEG_INFINITY,
            NoiseFloor::Absolute(db) => db,
            NoiseFloor::BelowPeak(db) => {
                if peak <= 0.0 {
                    return f64::INFINITY;
                }
                10.0 * peak.log10() - db
            }
        };
        10f64.powf((floor_db + NOISE_MARGIN_DB) / 10.0)
    }

    /// Zeroes the bins that fall below the threshold.
    pub fn apply(&self, pdp: &mut Pdp) {
        let peak = pdp.powers.iter().cloned().fold(0.0, f64::max);
        let thr = self.threshold(peak);
        for p in &mut pdp.powers {
            if *p < thr {
                *p = 0.0;
            }
        }
    }
}

/// Bin-wise mean over a window of PDPs, then noise thresholding.
pub fn apdp(window: &[Pdp], noise: NoiseFloor) -> Result<Pdp> {
    let first = window
        .first()
        .ok_or_else(|| Error::param("window", "must be non-empty"))?;
    let n = first.powers.len();
    if window.iter().any(|p| p.powers.len() != n) {
        return Err(Error::param("window", "profiles differ in length"));
    }
    let mut powers = vec![0.0; n];
    for p in window {
        for (a, b) in powers.iter_mut().zip(&p.powers) {
            *a += b;
        }
    }
    let m = window.len() as f64;
    powers.iter_mut().for_each(|p| *p /= m);
    let mut out = Pdp {
        time_s: window.iter().map(|p| p.time_s).sum::<f64>() / m,
        delay_step_s: first.delay_step_s,
        powers,
    };
    noise.apply(&mut out);
    Ok(out)
}

/// Number of snapshots covering `40 λ` of travel; the whole trace when
/// the terminal does not move.
pub fn window_snapshots(wavelength_m: f64, speed_mps: f64, dt_s: f64, n_snapshots: usize) -> usize {
    let n = n_snapshots.max(1);
    if speed_mps <= 0.0 {
        return n;
    }
    ((40.0 * wavelength_m / (speed_mps * dt_s)).round() as usize).clamp(1, n)
}

/// PDP of every snapshot, averaged over element pairs.
pub fn trace_pdps(trace: &CirTrace) -> Vec<Pdp> {
    let step = match trace.domain {
        Domain::Delay => trace.grid_spacing,
        Domain::Frequency => 1.0 / (trace.n_points as f64 * trace.grid_spacing),
    };
    (0..trace.n_snapshots)
        .map(|t| Pdp {
            time_s: t as f64 * trace.snapshot_interval_s,
            delay_step_s: step,
            powers: trace.pdp(t),
        })
        .collect()
}

/// One APDP per snapshot from a window of `w` snapshots centred on it,
/// clipped at the trace edges.
pub fn sliding_apdps(pdps: &[Pdp], w: usize, noise: NoiseFloor) -> Result<Vec<Pdp>> {
    let n = pdps.len();
    let w = w.clamp(1, n.max(1));
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(w / 2);
            let hi = (lo + w).min(n);
            let lo = hi.saturating_sub(w);
            let mut a = apdp(&pdps[lo..hi], noise)?;
            a.time_s = pdps[t].time_s;
            Ok(a)
        })
        .collect()
}

/// `√(Σpτ²/Σp − (Σpτ/Σp)²)` over explicit delays and powers.
pub fn delay_spread(delays_s: &[f64], powers: &[f64]) -> Result<f64> {
    let p0: f64 = powers.iter().sum();
    if !(p0 > 0.0) {
        return Err(Error::Undefined("delay spread of an all-zero profile".into()));
    }
    let m1 = delays_s.iter().zip(powers).map(|(t, p)| p * t).sum::<f64>() / p0;
    let m2 = delays_s
        .iter()
        .zip(powers)
        .map(|(t, p)| p * (t - m1).powi(2))
        .sum::<f64>()
        / p0;
    Ok(m2.max(0.0).sqrt())
}

/// RMS delay spread of a profile, seconds.
pub fn rms_delay_spread(pdp: &Pdp) -> Result<f64> {
    let delays: Vec<f64> = (0..pdp.powers.len()).map(|k| pdp.delay_s(k)).collect();
    delay_spread(&delays, &pdp.powers)
}

/// Rice K-factor in dB: strongest bin over the sum of the other non-zero
/// bins. Apply the noise threshold first.
pub fn rice_k_factor(pdp: &Pdp) -> Result<f64> {
    let valid: Vec<f64> = pdp.powers.iter().cloned().filter(|&p| p > 0.0).collect();
    match valid.len() {
        0 => Err(Error::Undefined("K-factor of an all-zero profile".into())),
        1 => Err(Error::InfiniteK),
        _ => {
            let (imax, pmax) = valid
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            let rest: f64 = valid.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, p)| p).sum();
            Ok(10.0 * (pmax / rest).log10())
        }
    }
}

/// Large-scale attenuation `-10 log10(mean |H|²)` over non-overlapping
/// windows of `w` snapshots. Returns (window centre time, L in dB).
pub fn extract_large_scale(trace: &CirTrace, w: usize) -> Result<Vec<(f64, f64)>> {
    if w == 0 || w > trace.n_snapshots {
        return Err(Error::param("window", "must fit in the trace"));
    }
    // delay taps carry 1/N of the frequency-domain power per bin
    let scale = match trace.domain {
        Domain::Frequency => 1.0,
        Domain::Delay => trace.n_points as f64,
    };
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= trace.n_snapshots {
        let mean = (start..start + w).map(|t| trace.mean_power(t)).sum::<f64>() / w as f64 * scale;
        let centre = (start as f64 + (w - 1) as f64 / 2.0) * trace.snapshot_interval_s;
        out.push((centre, -10.0 * mean.log10()));
        start += w;
    }
    Ok(out)
}

/// Temporal PDP correlation `ΣPᵢPⱼ / max(ΣPᵢ², ΣPⱼ²)`.
pub fn tpcc(a: &Pdp, b: &Pdp) -> Result<f64> {
    if a.powers.len() != b.powers.len() {
        return Err(Error::param("pdp", "profiles differ in length"));
    }
    let cross: f64 = a.powers.iter().zip(&b.powers).map(|(x, y)| x * y).sum();
    let ea: f64 = a.powers.iter().map(|x| x * x).sum();
    let eb: f64 = b.powers.iter().map(|x| x * x).sum();
    let den = ea.max(eb);
    if !(den > 0.0) {
        return Err(Error::Undefined("TPCC of two all-zero profiles".into()));
    }
    Ok((cross / den).clamp(0.0, 1.0))
}

/// A run of consecutive snapshots `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
    pub duration_s: f64,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// Forward-maximal region from every anchor snapshot.
    pub per_anchor: Vec<Region>,
    /// Non-overlapping regions: each starts right after the previous one.
    pub segments: Vec<Region>,
}

impl StationarityReport {
    pub fn mean_anchor_duration_s(&self) -> f64 {
        mean(self.per_anchor.iter().map(|r| r.duration_s))
    }

    pub fn mean_segment_duration_s(&self) -> f64 {
        mean(self.segments.iter().map(|r| r.duration_s))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Stationary regions of a sequence of APDPs: from each anchor the window
/// extends forward while TPCC with the anchor stays at or above the
/// threshold. Distances are `speed · duration`.
pub fn stationarity_regions(
    apdps: &[Pdp],
    threshold: f64,
    speed_mps: f64,
    dt_s: f64,
) -> Result<StationarityReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::param("threshold", "must lie in (0, 1]"));
    }
    let n = apdps.len();
    let region = |i: usize| -> Result<Region> {
        let mut j = i;
        while j + 1 < n && tpcc(&apdps[i], &apdps[j + 1]).unwrap_or(0.0) >= threshold {
            j += 1;
        }
        let duration_s = (j - i + 1) as f64 * dt_s;
        Ok(Region {
            start: i,
            end: j,
            duration_s,
            distance_m: speed_mps * duration_s,
        })
    };
    let per_anchor = (0..n).map(region).collect::<Result<Vec<_>>>()?;
    let mut segments = Vec::new();
    let mut i = 0;
    while i < n {
        let r = per_anchor[i];
        segments.push(r);
        i = r.end + 1;
    }
    Ok(StationarityReport { per_anchor, segments })
}
