//! Multipath components: records, angular spread and the MCD metric.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cluster_gen::ClusterSet;
use crate::error::{Error, Result};
use crate::geometry::wrap_to_pi;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcRecord {
    pub snapshot: usize,
    pub amplitude: Complex64,
    pub delay_s: f64,
    pub aoa_rad: f64,
    /// Zenith angle of arrival.
    pub eoa_rad: f64,
    pub cluster_label: Option<u64>,
    pub track_id: Option<u64>,
}

impl MpcRecord {
    pub fn power(&self) -> f64 {
        self.amplitude.norm_sqr()
    }

    /// `(cos φ sin θ, sin φ sin θ, cos θ)`.
    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.eoa_rad.sin_cos();
        let (sp, cp) = self.aoa_rad.sin_cos();
        [cp * st, sp * st, ct]
    }
}

pub const MPC_HEADER: [&str; 8] = [
    "snapshot",
    "amp_real",
    "amp_imag",
    "delay_s",
    "aoa_rad",
    "eoa_rad",
    "cluster_label",
    "track_id",
];

/// Ground-truth MPCs of a cluster set: one per ray, amplitude
/// `√(P_n/M)·e^{jΦθθ}`, labelled by cluster id.
pub fn mpcs_from_cluster_set(set: &ClusterSet, snapshot: usize) -> Vec<MpcRecord> {
    let mut out = Vec::new();
    for c in &set.clusters {
        let m = c.rays.len() as f64;
        for r in &c.rays {
            out.push(MpcRecord {
                snapshot,
                amplitude: Complex64::from_polar((c.power / m).sqrt(), r.phases[0]),
                delay_s: c.delay_s,
                aoa_rad: r.aoa,
                eoa_rad: r.eoa,
                cluster_label: Some(c.id),
                track_id: Some(c.id),
            });
        }
    }
    out
}

pub fn write_mpcs<W: Write>(records: &[MpcRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(MPC_HEADER)?;
    let opt = |x: Option<u64>| x.map_or(String::new(), |v| v.to_string());
    for r in records {
        wr.write_record([
            r.snapshot.to_string(),
            r.amplitude.re.to_string(),
            r.amplitude.im.to_string(),
            r.delay_s.to_string(),
            r.aoa_rad.to_string(),
            r.eoa_rad.to_string(),
            opt(r.cluster_label),
            opt(r.track_id),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<mpc csv>", e))?;
    Ok(())
}

/// Reads MPC records; the last two columns may be absent or empty.
pub fn read_mpcs<R: Read>(r: R) -> Result<Vec<MpcRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 6 || names[..6] != MPC_HEADER[..6] || names[6..].iter().zip(&MPC_HEADER[6..]).any(|(a, b)| a != b)
    {
        return Err(Error::Format {
            offset: 0,
            reason: format!("expected MPC header {}", MPC_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |i: usize| Error::Format {
            offset,
            reason: format!("column `{}` is malformed", MPC_HEADER[i]),
        };
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(i))
        };
        let opt = |i: usize| -> Result<Option<u64>> {
            match rec.get(i).map(str::trim) {
                None | Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad(i)),
            }
        };
        out.push(MpcRecord {
            snapshot: rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad(0))?,
            amplitude: Complex64::new(num(1)?, num(2)?),
            delay_s: num(3)?,
            aoa_rad: num(4)?,
            eoa_rad: num(5)?,
            cluster_label: opt(6)?,
            track_id: opt(7)?,
        });
    }
    Ok(out)
}

/// Splits records into per-snapshot groups, ordered by snapshot index.
pub fn group_by_snapshot(records: &[MpcRecord]) -> Vec<(usize, Vec<MpcRecord>)> {
    let mut map = std::collections::BTreeMap::<usize, Vec<MpcRecord>>::new();
    for r in records {
        map.entry(r.snapshot).or_default().push(*r);
    }
    map.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AngleDimension {
    Azimuth,
    Elevation,
}

/// Power-weighted RMS spread of angles (radians in, degrees out). Azimuth
/// deviations are taken on the circle about the circular mean.
pub fn spread_of(angles_rad: &[f64], powers: &[f64], dim: AngleDimension) -> Result<f64> {
    let total: f64 = powers.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("angular spread with zero total power".into()));
    }
    let var = match dim {
        AngleDimension::Azimuth => {
            let (s, c) = angles_rad
                .iter()
                .zip(powers)
                .fold((0.0, 0.0), |(s, c), (a, p)| (s + p * a.sin(), c + p * a.cos()));
            let mean = s.atan2(c);
            angles_rad
                .iter()
                .zip(powers)
                .map(|(a, p)| p * wrap_to_pi(a - mean).powi(2))
                .sum::<f64>()
                / total
        }
        AngleDimension::Elevation => {
            let mean = angles_rad.iter().zip(powers).map(|(a, p)| a * p).sum::<f64>() / total;
            angles_rad
                .iter()
                .zip(powers)
                .map(|(a, p)| p * (a - mean).powi(2))
                .sum::<f64>()
                / total
        }
    };
    Ok(var.max(0.0).sqrt().to_degrees())
}

pub fn angular_spread(mpcs: &[MpcRecord], dim: AngleDimension) -> Result<f64> {
    let powers: Vec<f64> = mpcs.iter().map(MpcRecord::power).collect();
    let angles: Vec<f64> = mpcs
        .iter()
        .map(|m| match dim {
            AngleDimension::Azimuth => m.aoa_rad,
            AngleDimension::Elevation => m.eoa_rad,
        })
        .collect();
    spread_of(&angles, &powers, dim)
}

/// Delay normalisation of the MCD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McdParams {
    pub xi: f64,
    pub tau_std_s: f64,
    pub dtau_max_s: f64,
}

impl McdParams {
    /// Delay standard deviation and range of a set of delays.
    pub fn from_delays(delays_s: &[f64], xi: f64) -> Self {
        let n = delays_s.len().max(1) as f64;
        let mean = delays_s.iter().sum::<f64>() / n;
        let std = (delays_s.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        let (lo, hi) = delays_s
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
        Self {
            xi,
            tau_std_s: std,
            dtau_max_s: if hi > lo { hi - lo } else { 0.0 },
        }
    }

    /// Coefficient `c` such that the delay MCD is `c·|τx − τy|`.
    pub fn delay_coefficient(&self) -> f64 {
        if self.dtau_max_s > 0.0 {
            self.xi * self.tau_std_s / (self.dtau_max_s * self.dtau_max_s)
        } else {
            0.0
        }
    }
}

/// Angular MPC distance `½‖u_x − u_y‖`, in [0, 1].
pub fn mcd_angle(x: &MpcRecord, y: &MpcRecord) -> f64 {
    let (a, b) = (x.unit_vector(), y.unit_vector());
    0.5 * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn mcd_delay(x: &MpcRecord, y: &MpcRecord, p: &McdParams) -> Result<f64> {
    let d = (x.delay_s - y.delay_s).abs();
    if p.dtau_max_s <= 0.0 {
        if d == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::param("dtau_max", "is zero while delays differ"));
    }
    Ok(p.xi * p.tau_std_s / p.dtau_max_s * d / p.dtau_max_s)
}

/// `√(MCD_angle² + MCD_delay²)`.
pub fn mcd(x: &MpcRecord, y: &MpcRecord, p: &McdParams) -> Result<f64> {
    Ok(mcd_angle(x, y).hypot(mcd_delay(x, y, p)?))
}
