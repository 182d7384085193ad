//! Clustered-delay-line tables and their instantiation as cluster sets.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_gen::{
    los_ray, spawn_rays, AngularSpreads, ClusterAngles, ClusterKind, ClusterSet, ClusterState, OffsetTable,
    XprModel,
};
use crate::error::{Error, Result};
use crate::geometry::{wrap_to_pi, RotationMatrix};
use crate::scenario::LspSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdlRow {
    pub delay_ns: f64,
    pub power_db: f64,
    pub aoa_deg: f64,
    /// Zenith angle of arrival.
    pub eoa_deg: f64,
    pub los: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdlTable {
    pub name: String,
    pub rows: Vec<CdlRow>,
}

fn rows(delay: [f64; 5], power: [f64; 5], aoa: [f64; 5], eoa: [f64; 5]) -> Vec<CdlRow> {
    (0..5)
        .map(|i| CdlRow {
            delay_ns: delay[i],
            power_db: power[i],
            aoa_deg: aoa[i],
            eoa_deg: eoa[i],
            los: i == 0,
        })
        .collect()
}

/// The fitted 5G-R rural table and the RMa CDL-D comparison column.
pub fn builtin_tables() -> Vec<CdlTable> {
    vec![
        CdlTable {
            name: "5g-r-rural".into(),
            rows: rows(
                [0.0, 70.787, 180.345, 282.813, 806.152],
                [-0.5, -23.7, -20.9, -11.4, -15.1],
                [219.6, 153.5, 166.6, 153.5, 66.2],
                [65.5, 70.9, 66.8, 65.2, 64.5],
            ),
        },
        CdlTable {
            name: "rma-cdl-d".into(),
            rows: rows(
                [0.0, 5.497, 96.123, 214.08, 220.674],
                [-0.2, -18.8, -21.0, -22.8, -17.9],
                [-180.0, 89.2, 89.2, 89.2, 163.0],
                [81.5, 86.9, 86.9, 86.9, 79.4],
            ),
        },
    ]
}

pub fn builtin(name: &str) -> Option<CdlTable> {
    builtin_tables().into_iter().find(|t| t.name == name)
}

impl CdlTable {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .rows
            .first()
            .ok_or_else(|| Error::param("cdl", "table has no rows"))?;
        if first.delay_ns != 0.0 {
            return Err(Error::param("cdl", "row 1 must have delay 0"));
        }
        if self.rows[1..].iter().any(|r| r.los) {
            return Err(Error::param("cdl", "only row 1 may be LOS"));
        }
        for r in &self.rows {
            if !(r.delay_ns >= 0.0) || !(r.power_db <= 0.0) || !r.aoa_deg.is_finite() {
                return Err(Error::param("cdl", "delays must be >= 0 and powers <= 0 dB"));
            }
            if !(0.0..=180.0).contains(&r.eoa_deg) {
                return Err(Error::param("cdl", "zenith angles must lie in [0, 180]"));
            }
        }
        Ok(())
    }

    pub fn delays_s(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delay_ns * 1e-9).collect()
    }

    /// Linear powers normalized to unit sum.
    pub fn linear_powers(&self) -> Vec<f64> {
        let p: Vec<f64> = self.rows.iter().map(|r| 10f64.powf(r.power_db / 10.0)).collect();
        let s: f64 = p.iter().sum();
        p.into_iter().map(|x| x / s).collect()
    }

    pub fn has_los(&self) -> bool {
        self.rows.first().is_some_and(|r| r.los)
    }

    /// `P_LOS / Σ P_NLOS`; `None` without a LOS row.
    pub fn k_factor_linear(&self) -> Option<f64> {
        if !self.has_los() {
            return None;
        }
        let p = self.linear_powers();
        Some(p[0] / p[1..].iter().sum::<f64>())
    }

    /// Multiplies every delay by `factor`.
    pub fn scale_normalized_delays(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::param("delay_scale", "must be > 0"));
        }
        let mut t = self.clone();
        for r in &mut t.rows {
            r.delay_ns *= factor;
        }
        Ok(t)
    }

    /// Power-weighted RMS delay spread of the rows, seconds.
    pub fn rms_delay_spread_s(&self) -> f64 {
        let (d, p) = (self.delays_s(), self.linear_powers());
        weighted_rms(&d, &p, |x, m| x - m)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["no.", "delay_ns", "power_db", "aoa_deg", "eoa_deg", "los_flag"])?;
        for (i, r) in self.rows.iter().enumerate() {
            wr.write_record([
                (i + 1).to_string(),
                r.delay_ns.to_string(),
                r.power_db.to_string(),
                r.aoa_deg.to_string(),
                r.eoa_deg.to_string(),
                u8::from(r.los).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<cdl csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(name: &str, r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let want = ["no.", "delay_ns", "power_db", "aoa_deg", "eoa_deg", "los_flag"];
        let header = rd.headers()?.clone();
        if header.iter().map(str::trim).ne(want) {
            return Err(Error::Format {
                offset: 0,
                reason: format!("expected header {}", want.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Format {
                        offset,
                        reason: format!("column `{}` is not a number", want[i]),
                    })
            };
            rows.push(CdlRow {
                delay_ns: num(1)?,
                power_db: num(2)?,
                aoa_deg: num(3)?,
                eoa_deg: num(4)?,
                los: num(5)? != 0.0,
            });
        }
        let t = Self {
            name: name.into(),
            rows,
        };
        t.validate()?;
        Ok(t)
    }
}

fn weighted_rms(v: &[f64], w: &[f64], dev: impl Fn(f64, f64) -> f64) -> f64 {
    let s: f64 = w.iter().sum();
    let m = v.iter().zip(w).map(|(x, p)| x * p).sum::<f64>() / s;
    (v.iter().zip(w).map(|(x, p)| p * dev(*x, m).powi(2)).sum::<f64>() / s).sqrt()
}

/// Circular power-weighted azimuth spread (deviation about the circular
/// mean), degrees.
fn azimuth_spread_deg(az_deg: &[f64], p: &[f64]) -> f64 {
    let (s, c) = az_deg.iter().zip(p).fold((0.0, 0.0), |(s, c), (a, w)| {
        let r = a.to_radians();
        (s + w * r.sin(), c + w * r.cos())
    });
    let mean = s.atan2(c);
    let tot: f64 = p.iter().sum();
    (az_deg
        .iter()
        .zip(p)
        .map(|(a, w)| w * wrap_to_pi(a.to_radians() - mean).powi(2))
        .sum::<f64>()
        / tot)
        .sqrt()
        .to_degrees()
}

/// Knobs for turning a table into a cluster set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdlInstantiation {
    pub rays_per_cluster: usize,
    /// Per-cluster spreads in degrees.
    pub intra_spreads: AngularSpreads,
    pub xpr: XprModel,
    pub r_tau: f64,
    /// Departure directions for every row; `None` uses the geometric LOS
    /// departure.
    pub departure_deg: Option<(f64, f64)>,
}

impl Default for CdlInstantiation {
    fn default() -> Self {
        Self {
            rays_per_cluster: 20,
            intra_spreads: AngularSpreads {
                asd: 2.0,
                esd: 2.0,
                asa: 2.0,
                esa: 2.0,
            },
            xpr: XprModel::default(),
            r_tau: 2.3,
            departure_deg: None,
        }
    }
}

/// One cluster per row, powers normalized, rays spawned around the row
/// angles. Per-cluster shadowing terms are solved so that the exponential
/// power law reproduces the table powers from the table delays.
pub fn instantiate<R: Rng + ?Sized>(
    table: &CdlTable,
    los: &ClusterAngles,
    los_abs_delay_s: f64,
    opts: &CdlInstantiation,
    time_s: f64,
    rng: &mut R,
) -> Result<ClusterSet> {
    table.validate()?;
    if opts.rays_per_cluster == 0 {
        return Err(Error::param("rays_per_cluster", "must be >= 1"));
    }
    let powers = table.linear_powers();
    let ds = table.rms_delay_spread_s();
    let ds_scale = if ds > 0.0 { ds } else { 1e-9 };
    let offsets = OffsetTable::laplacian(opts.rays_per_cluster);
    let (aod, eod) = match opts.departure_deg {
        Some((az, zen)) => (az.to_radians(), zen.to_radians()),
        None => (los.aod, los.eod),
    };

    let mut clusters = Vec::with_capacity(table.rows.len());
    for (i, (row, p)) in table.rows.iter().zip(&powers).enumerate() {
        let angles = ClusterAngles {
            aod: crate::geometry::wrap_azimuth(aod),
            eod,
            aoa: crate::geometry::wrap_azimuth(row.aoa_deg.to_radians()),
            eoa: row.eoa_deg.to_radians(),
        };
        let delay = row.delay_ns * 1e-9;
        let (kind, rays, shadow_db) = if row.los {
            (ClusterKind::Los, vec![los_ray(&angles)], 0.0)
        } else {
            let law = (-delay * (opts.r_tau - 1.0) / (opts.r_tau * ds_scale)).exp();
            (
                ClusterKind::Nlos,
                spawn_rays(&angles, &opts.intra_spreads, &offsets, &opts.xpr, rng),
                -10.0 * (p / law).log10(),
            )
        };
        clusters.push(ClusterState {
            id: i as u64,
            kind,
            delay_s: delay,
            abs_delay_s: los_abs_delay_s + delay,
            power: *p,
            shadow_db,
            angles,
            rays,
            birth_time_s: time_s,
            lifetime_s: None,
            rotation: RotationMatrix::identity(),
        });
    }

    let aoa: Vec<f64> = table.rows.iter().map(|r| r.aoa_deg).collect();
    let eoa: Vec<f64> = table.rows.iter().map(|r| r.eoa_deg).collect();
    let asa = azimuth_spread_deg(&aoa, &powers);
    let esa = weighted_rms(&eoa, &powers, |x, m| x - m);
    let k = table.k_factor_linear();
    let lsp = LspSample {
        ds_ns: ds * 1e9,
        asa_deg: asa,
        esa_deg: esa,
        asd_deg: asa,
        esd_deg: esa,
        k_db: k.map_or(f64::NEG_INFINITY, |k| 10.0 * k.log10()),
        sf_db: 0.0,
    };
    let mut set = ClusterSet::new(clusters, time_s, lsp, ds_scale, opts.r_tau, k);
    set.normalize_delays();
    set.renormalize_powers();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn rural() -> CdlTable {
        builtin("5g-r-rural").unwrap()
    }

    fn los() -> ClusterAngles {
        ClusterAngles {
            aod: 0.5,
            eod: 1.9,
            aoa: 3.6,
            eoa: 1.2,
        }
    }

    #[test]
    fn builtin_rows() {
        let r = rural();
        assert_eq!(r.rows.len(), 5);
        assert_eq!(
            r.rows[0],
            CdlRow {
                delay_ns: 0.0,
                power_db: -0.5,
                aoa_deg: 219.6,
                eoa_deg: 65.5,
                los: true
            }
        );
        let d = builtin("rma-cdl-d").unwrap();
        assert_eq!(d.rows.len(), 5);
        let last = d.rows[4];
        assert_eq!((last.delay_ns, last.power_db, last.aoa_deg, last.eoa_deg), (220.674, -17.9, 163.0, 79.4));
        for t in builtin_tables() {
            t.validate().unwrap();
        }
    }

    #[test]
    fn rural_k_factor() {
        let oracle = 10f64.powf(-0.05)
            / (10f64.powf(-2.37) + 10f64.powf(-2.09) + 10f64.powf(-1.14) + 10f64.powf(-1.51));
        let k = rural().k_factor_linear().unwrap();
        assert!((k - oracle).abs() < 1e-12);
        assert!((k - 7.7).abs() < 0.01);
        assert!((10.0 * k.log10() - 8.9).abs() < 0.05);
    }

    /// Oracle: first and second raw moments summed term by term in dB
    /// arithmetic, then the variance identity E[τ²] - E[τ]².
    #[test]
    fn rural_rms_delay_spread() {
        let rows = [(0.0, -0.5), (70.787, -23.7), (180.345, -20.9), (282.813, -11.4), (806.152, -15.1)];
        let (mut p0, mut p1, mut p2) = (0.0, 0.0, 0.0);
        for (t, db) in rows {
            let p = 10f64.powf(db / 10.0);
            p0 += p;
            p1 += p * t;
            p2 += p * t * t;
        }
        let oracle_ns = (p2 / p0 - (p1 / p0).powi(2)).sqrt();
        let ds_ns = rural().rms_delay_spread_s() * 1e9;
        assert!((ds_ns / oracle_ns - 1.0).abs() < 1e-9);
        assert!((ds_ns - 154.0).abs() < 1.0, "{ds_ns}");
    }

    #[test]
    fn delay_scaling() {
        let t = rural();
        assert_eq!(t.scale_normalized_delays(1.0).unwrap(), t);
        let t2 = t.scale_normalized_delays(2.0).unwrap();
        for (a, b) in t.rows.iter().zip(&t2.rows) {
            assert_eq!(b.delay_ns, 2.0 * a.delay_ns);
            assert_eq!((a.power_db, a.aoa_deg, a.eoa_deg), (b.power_db, b.aoa_deg, b.eoa_deg));
        }
        assert!((t2.rms_delay_spread_s() / t.rms_delay_spread_s() - 2.0).abs() < 1e-12);
        assert!(t.scale_normalized_delays(0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = rural();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("no.,delay_ns,power_db,aoa_deg,eoa_deg,los_flag\n"));
        let back = CdlTable::read_csv("5g-r-rural", buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(CdlTable::read_csv("x", "a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn instantiation_preserves_table() {
        let t = rural();
        let set = instantiate(&t, &los(), 3e-7, &CdlInstantiation::default(), 0.0, &mut substream(1, "cdl")).unwrap();
        set.check_invariants().unwrap();
        let p = t.linear_powers();
        for (c, want) in set.clusters.iter().zip(&p) {
            assert!((c.power - want).abs() < 1e-12, "{} vs {want}", c.power);
            assert_eq!(c.rays.len(), if c.is_los() { 1 } else { 20 });
        }
        assert!(set.clusters[0].is_los());
        assert!((set.k_linear.unwrap() - t.k_factor_linear().unwrap()).abs() < 1e-12);
        let mut s2 = set.clone();
        s2.renormalize_powers();
        for (a, b) in set.clusters.iter().zip(&s2.clusters) {
            assert!((a.power - b.power).abs() < 1e-12);
        }
    }

    #[test]
    fn single_ray_instantiation() {
        let opts = CdlInstantiation {
            rays_per_cluster: 1,
            ..Default::default()
        };
        let set = instantiate(&rural(), &los(), 3e-7, &opts, 0.0, &mut substream(2, "cdl")).unwrap();
        for (c, r) in set.clusters.iter().zip(&rural().rows) {
            assert_eq!(c.rays.len(), 1);
            assert!((c.rays[0].aoa - crate::geometry::wrap_azimuth(r.aoa_deg.to_radians())).abs() < 1e-12);
            assert!((c.rays[0].eoa - r.eoa_deg.to_radians()).abs() < 1e-12);
        }
    }
}
