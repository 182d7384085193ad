//! Channel coefficients from a live cluster set, and the time-variant
//! trace they are sampled into.
//!
//! Taps live on a `1/B` delay grid with as many bins as frequency points,
//! so the frequency-domain trace is exactly the DFT of the tap vector.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::{Complex32, Complex64};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cluster_gen::{los_angles, ClusterAngles, ClusterSet, Ray};
use crate::error::{Error, Result};
use crate::geometry::{direction_unit_vector, AntennaPattern, SphericalAngles, Vec3, SPEED_OF_LIGHT};

/// Positions and LOS directions of one BS-UT link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkGeometry {
    pub bs: Vec3,
    pub ut: Vec3,
    /// Element offsets from the BS array centre.
    pub tx_elements: Vec<Vec3>,
    /// Element offsets from the UT array centre.
    pub rx_elements: Vec<Vec3>,
    pub los: ClusterAngles,
    pub d3d_m: f64,
    pub wavelength_m: f64,
}

impl LinkGeometry {
    pub fn new(
        bs: Vec3,
        ut: Vec3,
        tx_elements: Vec<Vec3>,
        rx_elements: Vec<Vec3>,
        wavelength_m: f64,
    ) -> Result<Self> {
        if tx_elements.is_empty() || rx_elements.is_empty() {
            return Err(Error::param("elements", "need at least one tx and rx element"));
        }
        if !(wavelength_m > 0.0) {
            return Err(Error::param("wavelength", "must be > 0"));
        }
        Ok(Self {
            los: los_angles(bs, ut)?,
            d3d_m: (bs - ut).norm(),
            bs,
            ut,
            tx_elements,
            rx_elements,
            wavelength_m,
        })
    }

    pub fn n_rx(&self) -> usize {
        self.rx_elements.len()
    }

    pub fn n_tx(&self) -> usize {
        self.tx_elements.len()
    }
}

/// Tx and Rx field patterns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patterns<'a> {
    pub tx: &'a AntennaPattern,
    pub rx: &'a AntennaPattern,
}

fn phase(x: f64) -> Complex64 {
    Complex64::from_polar(1.0, x)
}

/// `F_rxᵀ · M · F_tx` for a 2×2 polarization matrix.
fn polarized_gain(
    p: &Patterns<'_>,
    arrival: SphericalAngles,
    departure: SphericalAngles,
    m: [[Complex64; 2]; 2],
) -> Complex64 {
    let (rt, rp) = p.rx.field(arrival);
    let (tt, tp) = p.tx.field(departure);
    rt * (m[0][0] * tt + m[0][1] * tp) + rp * (m[1][0] * tt + m[1][1] * tp)
}

/// Array and Doppler phase terms shared by LOS and NLOS paths.
fn array_doppler(
    arrival: SphericalAngles,
    departure: SphericalAngles,
    d_rx: Vec3,
    d_tx: Vec3,
    v: Vec3,
    t_s: f64,
    wavelength_m: f64,
) -> Complex64 {
    let r_rx = direction_unit_vector(arrival);
    let r_tx = direction_unit_vector(departure);
    let k = 2.0 * PI / wavelength_m;
    phase(k * (r_rx.dot(d_rx) + r_tx.dot(d_tx) + r_rx.dot(v) * t_s))
}

/// Coefficient of one NLOS ray for one Rx/Tx element pair.
#[allow(clippy::too_many_arguments)]
pub fn nlos_ray_coefficient(
    ray: &Ray,
    cluster_power: f64,
    rays_in_cluster: usize,
    patterns: &Patterns<'_>,
    d_rx: Vec3,
    d_tx: Vec3,
    v: Vec3,
    t_s: f64,
    wavelength_m: f64,
) -> Complex64 {
    let xk = (1.0 / ray.xpr).sqrt();
    let [a, b, c, d] = ray.phases;
    let m = [
        [phase(a), xk * phase(b)],
        [xk * phase(c), phase(d)],
    ];
    let arr = ray.arrival();
    let dep = ray.departure();
    (cluster_power / rays_in_cluster as f64).sqrt()
        * polarized_gain(patterns, arr, dep, m)
        * array_doppler(arr, dep, d_rx, d_tx, v, t_s, wavelength_m)
}

/// Coefficient of the LOS path for one Rx/Tx element pair.
pub fn los_coefficient(
    los: &ClusterAngles,
    d3d_m: f64,
    patterns: &Patterns<'_>,
    d_rx: Vec3,
    d_tx: Vec3,
    v: Vec3,
    t_s: f64,
    wavelength_m: f64,
) -> Complex64 {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let m = [[one, zero], [zero, -one]];
    let arr = los.arrival();
    let dep = los.departure();
    polarized_gain(patterns, arr, dep, m)
        * phase(-2.0 * PI * d3d_m / wavelength_m)
        * array_doppler(arr, dep, d_rx, d_tx, v, t_s, wavelength_m)
}

/// Amplitude scales `(√(1/(K+1)), √(K/(K+1)))`; `K = ∞` gives `(0, 1)`.
pub fn k_scales(k_linear: f64) -> (f64, f64) {
    if k_linear.is_infinite() {
        (0.0, 1.0)
    } else {
        ((1.0 / (k_linear + 1.0)).sqrt(), (k_linear / (k_linear + 1.0)).sqrt())
    }
}

/// Scales a unit-power NLOS contribution and a LOS coefficient by the
/// Rice factor. The LOS term belongs at the earliest cluster delay.
pub fn combine_los(nlos: &[Complex64], los: Complex64, k_linear: f64) -> (Vec<Complex64>, Complex64) {
    let (a, b) = k_scales(k_linear);
    (nlos.iter().map(|h| h * a).collect(), los * b)
}

/// One propagation path at one instant: a delay and a coefficient per
/// (rx, tx) element pair, rx-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathContribution {
    pub cluster_id: u64,
    pub delay_s: f64,
    pub coeffs: Vec<Complex64>,
    /// `r̂_rxᵀ v / λ` of the path.
    pub doppler_hz: f64,
}

/// Every ray of `set` as a path contribution, with the NLOS part at unit
/// power and the LOS cluster combined through the set's K-factor.
pub fn snapshot_paths(
    set: &ClusterSet,
    geom: &LinkGeometry,
    patterns: &Patterns<'_>,
    v: Vec3,
    t_s: f64,
) -> Vec<PathContribution> {
    let nlos_power: f64 = set.clusters.iter().filter(|c| !c.is_los()).map(|c| c.power).sum();
    let has_los = set.los_cluster().is_some();
    let k = match (has_los, set.k_linear) {
        (false, _) => 0.0,
        (true, _) if nlos_power <= 0.0 => f64::INFINITY,
        (true, Some(k)) => k,
        (true, None) => 0.0,
    };
    let (a_nlos, a_los) = k_scales(k);
    let lambda = geom.wavelength_m;
    let mut out = Vec::new();
    for c in &set.clusters {
        if c.is_los() {
            let coeffs = geom
                .rx_elements
                .iter()
                .flat_map(|&dr| {
                    geom.tx_elements.iter().map(move |&dt| {
                        a_los * los_coefficient(&c.angles, geom.d3d_m, patterns, dr, dt, v, t_s, lambda)
                    })
                })
                .collect();
            out.push(PathContribution {
                cluster_id: c.id,
                delay_s: c.delay_s,
                coeffs,
                doppler_hz: direction_unit_vector(c.angles.arrival()).dot(v) / lambda,
            });
        } else if nlos_power > 0.0 {
            let p = c.power / nlos_power;
            let m = c.rays.len();
            for ray in &c.rays {
                let coeffs = geom
                    .rx_elements
                    .iter()
                    .flat_map(|&dr| {
                        geom.tx_elements.iter().map(move |&dt| {
                            a_nlos * nlos_ray_coefficient(ray, p, m, patterns, dr, dt, v, t_s, lambda)
                        })
                    })
                    .collect();
                out.push(PathContribution {
                    cluster_id: c.id,
                    delay_s: c.delay_s,
                    coeffs,
                    doppler_hz: direction_unit_vector(ray.arrival()).dot(v) / lambda,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Delay,
    Frequency,
}

impl Domain {
    fn flag(self) -> u32 {
        match self {
            Domain::Delay => 0,
            Domain::Frequency => 1,
        }
    }
}

/// What to do with a path delayed beyond the unambiguous span `N/B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverflowPolicy {
    Wrap,
    Truncate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub domain: Domain,
    pub n_points: usize,
    pub bandwidth_hz: f64,
    pub overflow: OverflowPolicy,
}

impl RenderConfig {
    pub fn tap_spacing_s(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn freq_spacing_hz(&self) -> f64 {
        self.bandwidth_hz / self.n_points as f64
    }

    fn grid_spacing(&self) -> f64 {
        match self.domain {
            Domain::Delay => self.tap_spacing_s(),
            Domain::Frequency => self.freq_spacing_hz(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::param("n_points", "must be >= 2"));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::param("bandwidth_hz", "must be > 0"));
        }
        Ok(())
    }
}

/// Bookkeeping collected while rendering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    /// Paths beyond the unambiguous delay span.
    pub overflow_paths: u64,
    /// Largest `|r̂_rxᵀ v| / λ` over all rendered rays.
    pub max_ray_doppler_hz: f64,
}

/// Complex samples indexed by (snapshot, grid point, rx element, tx element).
#[derive(Debug, Clone, PartialEq)]
pub struct CirTrace {
    pub n_snapshots: usize,
    pub n_points: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    pub domain: Domain,
    pub snapshot_interval_s: f64,
    /// Tap spacing in seconds or frequency spacing in hertz.
    pub grid_spacing: f64,
    pub data: Vec<Complex64>,
}

pub const TRACE_MAGIC: &[u8; 8] = b"CIR5GR1\0";
const HEADER_LEN: u64 = 8 + 5 * 4 + 2 * 8;

impl CirTrace {
    pub fn empty(n_points: usize, n_rx: usize, n_tx: usize, domain: Domain, dt: f64, spacing: f64) -> Self {
        Self {
            n_snapshots: 0,
            n_points,
            n_rx,
            n_tx,
            domain,
            snapshot_interval_s: dt,
            grid_spacing: spacing,
            data: Vec::new(),
        }
    }

    fn snapshot_len(&self) -> usize {
        self.n_points * self.n_rx * self.n_tx
    }

    pub fn index(&self, t: usize, k: usize, u: usize, s: usize) -> usize {
        ((t * self.n_points + k) * self.n_rx + u) * self.n_tx + s
    }

    pub fn get(&self, t: usize, k: usize, u: usize, s: usize) -> Complex64 {
        self.data[self.index(t, k, u, s)]
    }

    pub fn snapshot(&self, t: usize) -> &[Complex64] {
        let n = self.snapshot_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Samples of one element pair at one snapshot, along the grid.
    pub fn series(&self, t: usize, u: usize, s: usize) -> Vec<Complex64> {
        (0..self.n_points).map(|k| self.get(t, k, u, s)).collect()
    }

    /// Power delay profile `|h(τ)|²` of one snapshot, averaged over
    /// element pairs. Frequency-domain traces are inverse transformed.
    pub fn pdp(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_points];
        let pairs = (self.n_rx * self.n_tx) as f64;
        let mut planner = FftPlanner::new();
        let ifft = planner.plan_fft_inverse(self.n_points);
        for u in 0..self.n_rx {
            for s in 0..self.n_tx {
                let mut x = self.series(t, u, s);
                if self.domain == Domain::Frequency {
                    ifft.process(&mut x);
                    let n = self.n_points as f64;
                    x.iter_mut().for_each(|h| *h /= n);
                }
                for (o, h) in out.iter_mut().zip(&x) {
                    *o += h.norm_sqr() / pairs;
                }
            }
        }
        out
    }

    /// Delay of tap `k` in seconds.
    pub fn tap_delay_s(&self, k: usize) -> f64 {
        match self.domain {
            Domain::Delay => k as f64 * self.grid_spacing,
            Domain::Frequency => k as f64 / (self.n_points as f64 * self.grid_spacing),
        }
    }

    /// Mean `|h|²` over grid and element pairs of one snapshot.
    pub fn mean_power(&self, t: usize) -> f64 {
        let s = self.snapshot(t);
        s.iter().map(|h| h.norm_sqr()).sum::<f64>() / s.len() as f64
    }

    /// Scales snapshot `t` by the path loss `pl_db`.
    pub fn apply_large_scale_snapshot(&mut self, t: usize, pl_db: f64) {
        let g = 10f64.powf(-pl_db / 20.0);
        let n = self.snapshot_len();
        self.data[t * n..(t + 1) * n].iter_mut().for_each(|h| *h *= g);
    }

    pub fn check(&self) -> Result<()> {
        if self.data.len() != self.n_snapshots * self.snapshot_len() {
            return Err(Error::Domain("trace data does not match its dimensions".into()));
        }
        if self.data.iter().any(|h| !h.re.is_finite() || !h.im.is_finite()) {
            return Err(Error::Domain("trace holds non-finite values".into()));
        }
        Ok(())
    }

    /// Binary encoding: magic, five LE u32 (T, N, U, S, domain), two LE
    /// f64 (snapshot interval, grid spacing), then f32 (re, im) pairs.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TRACE_MAGIC)?;
        for x in [
            self.n_snapshots as u32,
            self.n_points as u32,
            self.n_rx as u32,
            self.n_tx as u32,
            self.domain.flag(),
        ] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.snapshot_interval_s.to_le_bytes())?;
        w.write_all(&self.grid_spacing.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for h in &self.data {
            let c = Complex32::new(h.re as f32, h.im as f32);
            buf.extend_from_slice(&c.re.to_le_bytes());
            buf.extend_from_slice(&c.im.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<trace>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: u64, reason: &str| Error::Format {
            offset,
            reason: reason.into(),
        };
        if bytes.len() < 8 || &bytes[..8] != TRACE_MAGIC {
            return Err(fmt(0, "bad magic"));
        }
        if (bytes.len() as u64) < HEADER_LEN {
            return Err(fmt(bytes.len() as u64, "truncated header"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (t, n, nr, ns) = (u(0), u(1), u(2), u(3));
        let domain = match u(4) {
            0 => Domain::Delay,
            1 => Domain::Frequency,
            _ => return Err(fmt(24, "unknown domain flag")),
        };
        let dt = f(28);
        let spacing = f(36);
        if n == 0 || nr == 0 || ns == 0 {
            return Err(fmt(12, "zero dimension"));
        }
        if !(dt > 0.0) || !(spacing > 0.0) {
            return Err(fmt(28, "non-positive interval or spacing"));
        }
        let count = t
            .checked_mul(n)
            .and_then(|x| x.checked_mul(nr))
            .and_then(|x| x.checked_mul(ns))
            .ok_or_else(|| fmt(8, "dimensions overflow"))?;
        let expected = HEADER_LEN as usize + count * 8;
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected) as u64,
                &format!("payload length {} does not match header ({expected})", bytes.len()),
            ));
        }
        let body = &bytes[HEADER_LEN as usize..];
        let data = body
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..].try_into().unwrap());
                Complex64::new(f64::from(re), f64::from(im))
            })
            .collect();
        Ok(Self {
            n_snapshots: t,
            n_points: n,
            n_rx: nr,
            n_tx: ns,
            domain,
            snapshot_interval_s: dt,
            grid_spacing: spacing,
            data,
        })
    }

    /// Long-format CSV: `snapshot,index,rx,tx,re,im`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["snapshot", "index", "rx", "tx", "re", "im"])?;
        for t in 0..self.n_snapshots {
            for k in 0..self.n_points {
                for u in 0..self.n_rx {
                    for s in 0..self.n_tx {
                        let h = self.get(t, k, u, s);
                        wr.write_record([
                            t.to_string(),
                            k.to_string(),
                            u.to_string(),
                            s.to_string(),
                            h.re.to_string(),
                            h.im.to_string(),
                        ])?;
                    }
                }
            }
        }
        wr.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }
}

/// Accumulates snapshots into a [`CirTrace`].
pub struct TraceBuilder {
    cfg: RenderConfig,
    trace: CirTrace,
    stats: RenderStats,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl TraceBuilder {
    pub fn new(cfg: RenderConfig, n_rx: usize, n_tx: usize, snapshot_interval_s: f64) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_points);
        Ok(Self {
            trace: CirTrace::empty(cfg.n_points, n_rx, n_tx, cfg.domain, snapshot_interval_s, cfg.grid_spacing()),
            cfg,
            stats: RenderStats::default(),
            fft,
        })
    }

    /// Places the paths on the tap grid and appends one snapshot.
    pub fn push_paths(&mut self, paths: &[PathContribution]) {
        let n = self.cfg.n_points;
        let pairs = self.trace.n_rx * self.trace.n_tx;
        let mut taps = vec![Complex64::new(0.0, 0.0); n * pairs];
        let dtau = self.cfg.tap_spacing_s();
        for p in paths {
            self.stats.max_ray_doppler_hz = self.stats.max_ray_doppler_hz.max(p.doppler_hz.abs());
            let mut bin = (p.delay_s / dtau).round() as usize;
            if bin >= n {
                self.stats.overflow_paths += 1;
                match self.cfg.overflow {
                    OverflowPolicy::Wrap => bin %= n,
                    OverflowPolicy::Truncate => continue,
                }
            }
            for (e, c) in p.coeffs.iter().enumerate() {
                taps[e * n + bin] += c;
            }
        }
        if self.cfg.domain == Domain::Frequency {
            for e in 0..pairs {
                self.fft.process(&mut taps[e * n..(e + 1) * n]);
            }
        }
        let start = self.trace.data.len();
        self.trace.data.resize(start + n * pairs, Complex64::new(0.0, 0.0));
        for e in 0..pairs {
            for k in 0..n {
                self.trace.data[start + k * pairs + e] = taps[e * n + k];
            }
        }
        self.trace.n_snapshots += 1;
    }

    pub fn push_snapshot(&mut self, set: &ClusterSet, geom: &LinkGeometry, patterns: &Patterns<'_>, v: Vec3, t_s: f64) {
        let paths = snapshot_paths(set, geom, patterns, v, t_s);
        self.push_paths(&paths);
    }

    /// Applies the path loss to the most recent snapshot.
    pub fn apply_large_scale_last(&mut self, pl_db: f64) {
        if let Some(t) = self.trace.n_snapshots.checked_sub(1) {
            self.trace.apply_large_scale_snapshot(t, pl_db);
        }
    }

    pub fn finish(self) -> (CirTrace, RenderStats) {
        (self.trace, self.stats)
    }
}

/// Multiplies every coefficient by `10^(-pl_db/20)`.
pub fn apply_large_scale(trace: &mut CirTrace, pl_db: f64) {
    let g = 10f64.powf(-pl_db / 20.0);
    trace.data.iter_mut().for_each(|h| *h *= g);
}

/// One input snapshot for [`render_trace`].
pub struct SnapshotInput<'a> {
    pub set: &'a ClusterSet,
    pub geometry: &'a LinkGeometry,
    pub velocity: Vec3,
    pub time_s: f64,
}

/// Renders a sequence of cluster-set snapshots into a trace.
pub fn render_trace<'a>(
    snapshots: impl IntoIterator<Item = SnapshotInput<'a>>,
    patterns: &Patterns<'_>,
    cfg: RenderConfig,
    n_rx: usize,
    n_tx: usize,
    snapshot_interval_s: f64,
) -> Result<(CirTrace, RenderStats)> {
    let mut b = TraceBuilder::new(cfg, n_rx, n_tx, snapshot_interval_s)?;
    for s in snapshots {
        b.push_snapshot(s.set, s.geometry, patterns, s.velocity, s.time_s);
    }
    Ok(b.finish())
}

/// Converts a delay-domain trace to the frequency domain, or back.
pub fn convert_domain(trace: &CirTrace, to: Domain) -> CirTrace {
    if trace.domain == to {
        return trace.clone();
    }
    let n = trace.n_points;
    let mut planner = FftPlanner::new();
    let fft = match to {
        Domain::Frequency => planner.plan_fft_forward(n),
        Domain::Delay => planner.plan_fft_inverse(n),
    };
    let scale = if to == Domain::Delay { 1.0 / n as f64 } else { 1.0 };
    let mut out = trace.clone();
    out.domain = to;
    out.grid_spacing = 1.0 / (n as f64 * trace.grid_spacing);
    for t in 0..trace.n_snapshots {
        for u in 0..trace.n_rx {
            for s in 0..trace.n_tx {
                let mut x = trace.series(t, u, s);
                fft.process(&mut x);
                for (k, h) in x.into_iter().enumerate() {
                    let i = out.index(t, k, u, s);
                    out.data[i] = h * scale;
                }
            }
        }
    }
    out
}

/// Delay a wave needs to travel `d` metres.
pub fn propagation_delay_s(d_m: f64) -> f64 {
    d_m / SPEED_OF_LIGHT
}
