//! Initial small-scale cluster generation: delays, powers, angles, rays,
//! phases and cross-polarization ratios drawn from one LSP realisation.
//!
//! A generated set is calibrated so that its realised delay spread and
//! angular spreads (LOS component included) equal the LSP sample. Delays
//! are rescaled together with the delay scale used by the power law, so the
//! cluster powers stay a function of the delays.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_azimuth, wrap_to_pi, RotationMatrix, SphericalAngles, Vec3};
use crate::scenario::{LspSample, Propagation};

/// One ray inside a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub aod: f64,
    pub eod: f64,
    pub aoa: f64,
    pub eoa: f64,
    /// Initial phases for the θθ, θφ, φθ and φφ polarization pairs.
    pub phases: [f64; 4],
    /// Cross-polarization power ratio κ (linear).
    pub xpr: f64,
}

impl Ray {
    pub fn arrival(&self) -> SphericalAngles {
        SphericalAngles::clamped(self.eoa, self.aoa)
    }

    pub fn departure(&self) -> SphericalAngles {
        SphericalAngles::clamped(self.eod, self.aod)
    }
}

/// Mean departure and arrival angles of a cluster, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterAngles {
    pub aod: f64,
    pub eod: f64,
    pub aoa: f64,
    pub eoa: f64,
}

impl ClusterAngles {
    pub fn arrival(&self) -> SphericalAngles {
        SphericalAngles::clamped(self.eoa, self.aoa)
    }

    pub fn departure(&self) -> SphericalAngles {
        SphericalAngles::clamped(self.eod, self.aod)
    }

    fn get(&self, dim: AngleDim) -> f64 {
        match dim {
            AngleDim::Aod => self.aod,
            AngleDim::Eod => self.eod,
            AngleDim::Aoa => self.aoa,
            AngleDim::Eoa => self.eoa,
        }
    }

    fn set(&mut self, dim: AngleDim, v: f64) {
        match dim {
            AngleDim::Aod => self.aod = v,
            AngleDim::Eod => self.eod = v,
            AngleDim::Aoa => self.aoa = v,
            AngleDim::Eoa => self.eoa = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AngleDim {
    Aod,
    Eod,
    Aoa,
    Eoa,
}

impl AngleDim {
    const ALL: [AngleDim; 4] = [AngleDim::Aod, AngleDim::Eod, AngleDim::Aoa, AngleDim::Eoa];

    fn is_azimuth(self) -> bool {
        matches!(self, AngleDim::Aod | AngleDim::Aoa)
    }

    /// Adds `delta` and brings the result back into range.
    fn offset(self, base: f64, delta: f64) -> f64 {
        if self.is_azimuth() {
            wrap_azimuth(base + delta)
        } else {
            (base + delta).clamp(0.0, PI)
        }
    }

    fn deviation(self, value: f64, center: f64) -> f64 {
        if self.is_azimuth() {
            wrap_to_pi(value - center)
        } else {
            value - center
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterKind {
    /// The specular line-of-sight path.
    Los,
    Nlos,
}

/// Live parameters of one multipath cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub id: u64,
    pub kind: ClusterKind,
    /// Delay relative to the earliest cluster, seconds.
    pub delay_s: f64,
    /// Absolute propagation delay τ̃, seconds.
    pub abs_delay_s: f64,
    /// Normalized power share.
    pub power: f64,
    /// Per-cluster shadowing Z_n in dB, held for the cluster's life.
    pub shadow_db: f64,
    pub angles: ClusterAngles,
    pub rays: Vec<Ray>,
    pub birth_time_s: f64,
    /// Sampled lifetime; `None` for clusters that never expire by age.
    pub lifetime_s: Option<f64>,
    /// Maps the UT velocity into this cluster's angle-update frame.
    pub rotation: RotationMatrix,
}

impl ClusterState {
    pub fn is_los(&self) -> bool {
        self.kind == ClusterKind::Los
    }

    /// Shifts the cluster mean and every ray by the same angle increments.
    pub fn shift_angles(&mut self, d_aod: f64, d_eod: f64, d_aoa: f64, d_eoa: f64) {
        let a = &mut self.angles;
        a.aod = wrap_azimuth(a.aod + d_aod);
        a.eod = (a.eod + d_eod).clamp(0.0, PI);
        a.aoa = wrap_azimuth(a.aoa + d_aoa);
        a.eoa = (a.eoa + d_eoa).clamp(0.0, PI);
        for r in &mut self.rays {
            r.aod = wrap_azimuth(r.aod + d_aod);
            r.eod = (r.eod + d_eod).clamp(0.0, PI);
            r.aoa = wrap_azimuth(r.aoa + d_aoa);
            r.eoa = (r.eoa + d_eoa).clamp(0.0, PI);
        }
    }
}

/// All live clusters of a link at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<ClusterState>,
    pub time_s: f64,
    pub lsp: LspSample,
    /// Delay scale entering the exponential power law (the realised DS
    /// after calibration).
    pub power_delay_scale_s: f64,
    pub r_tau: f64,
    /// Rice K-factor of the LOS cluster, linear. `None` without LOS.
    pub k_linear: Option<f64>,
    next_id: u64,
}

impl ClusterSet {
    pub fn new(
        clusters: Vec<ClusterState>,
        time_s: f64,
        lsp: LspSample,
        power_delay_scale_s: f64,
        r_tau: f64,
        k_linear: Option<f64>,
    ) -> Self {
        let next_id = clusters.iter().map(|c| c.id + 1).max().unwrap_or(0);
        Self {
            clusters,
            time_s,
            lsp,
            power_delay_scale_s,
            r_tau,
            k_linear,
            next_id,
        }
    }

    pub fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn nlos_count(&self) -> usize {
        self.clusters.iter().filter(|c| !c.is_los()).count()
    }

    pub fn los_cluster(&self) -> Option<&ClusterState> {
        self.clusters.iter().find(|c| c.is_los())
    }

    pub fn total_power(&self) -> f64 {
        self.clusters.iter().map(|c| c.power).sum()
    }

    /// Subtracts the minimum delay so the earliest cluster sits at 0.
    pub fn normalize_delays(&mut self) {
        let Some(min_abs) = self
            .clusters
            .iter()
            .map(|c| c.abs_delay_s)
            .min_by(f64::total_cmp)
        else {
            return;
        };
        for c in &mut self.clusters {
            c.delay_s = c.abs_delay_s - min_abs;
        }
    }

    /// Absolute delay of the earliest cluster.
    pub fn reference_abs_delay_s(&self) -> Option<f64> {
        self.clusters
            .iter()
            .map(|c| c.abs_delay_s)
            .min_by(f64::total_cmp)
    }

    /// Recomputes every power from the current delays and the held
    /// shadowing terms, then normalizes. The LOS cluster keeps the share
    /// `K / (K + 1)`; NLOS clusters share the rest.
    pub fn renormalize_powers(&mut self) {
        let raw: Vec<f64> = self
            .clusters
            .iter()
            .map(|c| {
                if c.is_los() {
                    0.0
                } else {
                    cluster_power(c.delay_s, self.power_delay_scale_s, self.r_tau, c.shadow_db)
                }
            })
            .collect();
        let nlos_sum: f64 = raw.iter().sum();
        let has_los = self.clusters.iter().any(|c| c.is_los());
        let (los_share, nlos_share) = match (has_los, self.k_linear) {
            (true, _) if nlos_sum <= 0.0 => (1.0, 0.0),
            (true, Some(k)) => (k / (k + 1.0), 1.0 / (k + 1.0)),
            (true, None) => (0.0, 1.0),
            (false, _) => (0.0, 1.0),
        };
        for (c, p) in self.clusters.iter_mut().zip(raw) {
            c.power = if c.is_los() {
                los_share
            } else if nlos_sum > 0.0 {
                nlos_share * p / nlos_sum
            } else {
                0.0
            };
        }
    }

    /// Checks the set-level invariants.
    pub fn check_invariants(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Ok(());
        }
        let sum = self.total_power();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("cluster powers sum to {sum}")));
        }
        let min = self
            .clusters
            .iter()
            .map(|c| c.delay_s)
            .fold(f64::INFINITY, f64::min);
        if min != 0.0 {
            return Err(Error::Domain(format!("minimum delay is {min}, not 0")));
        }
        let mut ids: Vec<u64> = self.clusters.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.clusters.len() {
            return Err(Error::Domain("duplicate cluster ids".into()));
        }
        if self.clusters.iter().any(|c| c.delay_s < 0.0 || c.power < 0.0 || c.rays.is_empty()) {
            return Err(Error::Domain("negative delay/power or empty cluster".into()));
        }
        Ok(())
    }
}

/// Cross-polarization ratio model: κ in dB is Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XprModel {
    pub mu_db: f64,
    pub sigma_db: f64,
}

impl Default for XprModel {
    fn default() -> Self {
        Self {
            mu_db: 8.0,
            sigma_db: 3.0,
        }
    }
}

impl XprModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        10f64.powf((self.mu_db + self.sigma_db * z) / 10.0)
    }
}

/// Normalized intra-cluster ray offsets, in units of the per-cluster
/// spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetTable(Vec<f64>);

impl OffsetTable {
    /// Equal-probability quantile midpoints of a unit-RMS Laplacian.
    pub fn laplacian(m: usize) -> Self {
        let b = FRAC_1_SQRT_2;
        let mut v = vec![0.0; m];
        for i in 0..m / 2 {
            let p = (i as f64 + 0.5) / m as f64;
            // lower half: F⁻¹(p) = b ln(2p)
            let q = b * (2.0 * p).ln();
            v[i] = q;
            v[m - 1 - i] = -q;
        }
        Self(v)
    }

    pub fn custom(offsets: Vec<f64>) -> Result<Self> {
        if offsets.is_empty() || offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("offset_table", "must be non-empty and finite"));
        }
        Ok(Self(offsets))
    }

    pub fn offsets(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Target RMS spreads in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularSpreads {
    pub asd: f64,
    pub esd: f64,
    pub asa: f64,
    pub esa: f64,
}

impl AngularSpreads {
    fn get(&self, dim: AngleDim) -> f64 {
        match dim {
            AngleDim::Aod => self.asd,
            AngleDim::Eod => self.esd,
            AngleDim::Aoa => self.asa,
            AngleDim::Eoa => self.esa,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            asd: self.asd * f,
            esd: self.esd * f,
            asa: self.asa * f,
            esa: self.esa * f,
        }
    }
}

/// Knobs of the small-scale generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallScaleConfig {
    /// Number of clusters, including the LOS cluster under LOS.
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub r_tau: f64,
    /// Per-cluster shadowing std ζ, dB.
    pub zeta_db: f64,
    pub xpr: XprModel,
    /// Per-cluster spreads; `None` splits the total spread as `total / √N`.
    pub intra_spreads: Option<AngularSpreads>,
    pub offset_table: Option<OffsetTable>,
    /// Upper clip applied to sampled azimuth / elevation spreads, degrees.
    pub max_azimuth_spread_deg: f64,
    pub max_elevation_spread_deg: f64,
}

impl Default for SmallScaleConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            rays_per_cluster: 20,
            r_tau: 2.3,
            zeta_db: 3.0,
            xpr: XprModel::default(),
            intra_spreads: None,
            offset_table: None,
            max_azimuth_spread_deg: 104.0,
            max_elevation_spread_deg: 52.0,
        }
    }
}

impl SmallScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=20).contains(&self.n_clusters) {
            return Err(Error::param("n_clusters", "must be in 1..=20"));
        }
        if self.rays_per_cluster == 0 {
            return Err(Error::param("rays_per_cluster", "must be >= 1"));
        }
        if !(self.r_tau > 1.0) {
            return Err(Error::param("r_tau", "must be > 1"));
        }
        if !(self.zeta_db >= 0.0) {
            return Err(Error::param("zeta_db", "must be >= 0"));
        }
        if let Some(t) = &self.offset_table {
            if t.len() != self.rays_per_cluster {
                return Err(Error::param(
                    "offset_table",
                    "length must equal rays_per_cluster",
                ));
            }
        }
        Ok(())
    }

    pub fn offsets(&self) -> OffsetTable {
        self.offset_table
            .clone()
            .unwrap_or_else(|| OffsetTable::laplacian(self.rays_per_cluster))
    }

    /// Clipped target spreads for an LSP sample.
    pub fn target_spreads(&self, lsp: &LspSample) -> AngularSpreads {
        AngularSpreads {
            asd: lsp.asd_deg.min(self.max_azimuth_spread_deg),
            esd: lsp.esd_deg.min(self.max_elevation_spread_deg),
            asa: lsp.asa_deg.min(self.max_azimuth_spread_deg),
            esa: lsp.esa_deg.min(self.max_elevation_spread_deg),
        }
    }

    pub fn intra_spreads_for(&self, total: &AngularSpreads) -> AngularSpreads {
        self.intra_spreads
            .unwrap_or_else(|| total.scaled(1.0 / (self.n_clusters as f64).sqrt()))
    }
}

/// Unnormalized cluster power `exp(-τ (r_τ - 1) / (r_τ DS)) · 10^(-Z/10)`.
pub fn cluster_power(delay_s: f64, ds_s: f64, r_tau: f64, shadow_db: f64) -> f64 {
    (-delay_s * (r_tau - 1.0) / (r_tau * ds_s)).exp() * 10f64.powf(-shadow_db / 10.0)
}

/// Uniform draw in (0, 1].
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Exponentially distributed delays `-r_τ DS ln u`, sorted, with the
/// smallest shifted to zero.
pub fn generate_delays<R: Rng + ?Sized>(
    n: usize,
    ds_s: f64,
    r_tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::param("n_clusters", "must be >= 1"));
    }
    if !(ds_s > 0.0) {
        return Err(Error::param("ds", "must be > 0"));
    }
    if !(r_tau > 1.0) {
        return Err(Error::param("r_tau", "must be > 1"));
    }
    let mut d: Vec<f64> = (0..n).map(|_| -r_tau * ds_s * open_unit(rng).ln()).collect();
    d.sort_by(f64::total_cmp);
    let min = d[0];
    for x in &mut d {
        *x -= min;
    }
    Ok(d)
}

/// Normalized cluster powers plus the shadowing draws that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPowers {
    pub powers: Vec<f64>,
    pub shadow_db: Vec<f64>,
}

pub fn generate_powers<R: Rng + ?Sized>(
    delays: &[f64],
    ds_s: f64,
    r_tau: f64,
    zeta_db: f64,
    rng: &mut R,
) -> GeneratedPowers {
    let shadow_db: Vec<f64> = delays
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            zeta_db * z
        })
        .collect();
    let raw: Vec<f64> = delays
        .iter()
        .zip(&shadow_db)
        .map(|(&t, &z)| cluster_power(t, ds_s, r_tau, z))
        .collect();
    let sum: f64 = raw.iter().sum();
    GeneratedPowers {
        powers: raw.iter().map(|p| p / sum).collect(),
        shadow_db,
    }
}

fn laplacian_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = rng.random::<f64>() - 0.5;
    -FRAC_1_SQRT_2 * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Power-weighted RMS of `values` about their weighted mean.
fn weighted_rms(values: &[f64], weights: &[f64]) -> f64 {
    let w: f64 = weights.iter().sum();
    if w <= 0.0 {
        return 0.0;
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / w;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean).powi(2))
        .sum::<f64>()
        / w;
    var.max(0.0).sqrt()
}

/// Per-cluster mean angles around the LOS direction.
///
/// Azimuth offsets are Gaussian and elevation offsets Laplacian; each
/// dimension is scaled so that the power-weighted RMS spread of the set
/// (the LOS component at zero offset included) equals the target. With
/// `pin_first` the first cluster sits exactly at the LOS direction.
pub fn generate_cluster_angles<R: Rng + ?Sized>(
    powers: &[f64],
    spreads: &AngularSpreads,
    los: &ClusterAngles,
    k_linear: Option<f64>,
    pin_first: bool,
    rng: &mut R,
) -> Vec<ClusterAngles> {
    let n = powers.len();
    let (los_w, nlos_scale) = match k_linear {
        Some(k) => (k / (k + 1.0), 1.0 / (k + 1.0)),
        None => (0.0, 1.0),
    };
    let mut weights: Vec<f64> = powers.iter().map(|p| p * nlos_scale).collect();
    weights.push(los_w);

    let mut out = vec![*los; n];
    for dim in AngleDim::ALL {
        let mut raw: Vec<f64> = (0..n)
            .map(|i| {
                let x = if dim.is_azimuth() {
                    StandardNormal.sample(rng)
                } else {
                    laplacian_unit(rng)
                };
                if pin_first && i == 0 {
                    0.0
                } else {
                    x
                }
            })
            .collect();
        raw.push(0.0);
        let spread = weighted_rms(&raw, &weights);
        let target = spreads.get(dim).to_radians();
        let scale = if spread > 0.0 { target / spread } else { 0.0 };
        for (a, r) in out.iter_mut().zip(&raw) {
            a.set(dim, dim.offset(los.get(dim), r * scale));
        }
    }
    out
}

/// Rays of one cluster: the offset table scaled by the per-cluster spread,
/// independently permuted in each angle dimension, with four uniform
/// phases in (-π, π] and a sampled XPR per ray.
pub fn spawn_rays<R: Rng + ?Sized>(
    mean: &ClusterAngles,
    intra: &AngularSpreads,
    table: &OffsetTable,
    xpr: &XprModel,
    rng: &mut R,
) -> Vec<Ray> {
    let m = table.len();
    let mut perms: [Vec<f64>; 4] = std::array::from_fn(|_| table.offsets().to_vec());
    for p in perms.iter_mut() {
        p.shuffle(rng);
    }
    (0..m)
        .map(|i| {
            let mut phases = [0.0; 4];
            for ph in &mut phases {
                *ph = PI - 2.0 * PI * rng.random::<f64>();
            }
            let xpr = xpr.sample(rng);
            Ray {
                aod: AngleDim::Aod.offset(mean.aod, perms[0][i] * intra.asd.to_radians()),
                eod: AngleDim::Eod.offset(mean.eod, perms[1][i] * intra.esd.to_radians()),
                aoa: AngleDim::Aoa.offset(mean.aoa, perms[2][i] * intra.asa.to_radians()),
                eoa: AngleDim::Eoa.offset(mean.eoa, perms[3][i] * intra.esa.to_radians()),
                phases,
                xpr,
            }
        })
        .collect()
}

/// Single ray of the specular LOS path.
pub fn los_ray(angles: &ClusterAngles) -> Ray {
    Ray {
        aod: angles.aod,
        eod: angles.eod,
        aoa: angles.aoa,
        eoa: angles.eoa,
        phases: [0.0; 4],
        xpr: f64::INFINITY,
    }
}

/// Geometric LOS directions between a BS and a UT: departure points from
/// the BS to the UT, arrival from the UT back to the BS.
pub fn los_angles(bs: Vec3, ut: Vec3) -> Result<ClusterAngles> {
    let dep = SphericalAngles::from_vector(ut - bs)?;
    let arr = SphericalAngles::from_vector(bs - ut)?;
    Ok(ClusterAngles {
        aod: dep.azimuth(),
        eod: dep.zenith(),
        aoa: arr.azimuth(),
        eoa: arr.zenith(),
    })
}

/// Inputs fixing where a link's clusters are anchored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkAnchor {
    /// Geometric LOS departure/arrival directions.
    pub los: ClusterAngles,
    /// Absolute LOS delay `d_3D / c`.
    pub los_abs_delay_s: f64,
    pub condition: Propagation,
    pub time_s: f64,
}

/// Generates a full, calibrated cluster set from one LSP sample.
pub fn generate_cluster_set<R: Rng + ?Sized>(
    lsp: &LspSample,
    cfg: &SmallScaleConfig,
    anchor: &LinkAnchor,
    rng: &mut R,
) -> Result<ClusterSet> {
    cfg.validate()?;
    let los = anchor.condition == Propagation::Los;
    let n_nlos = if los {
        cfg.n_clusters.saturating_sub(1).max(1)
    } else {
        cfg.n_clusters
    };
    let k_linear = los.then(|| lsp.k_linear());
    let ds = lsp.ds_s();

    let delays = generate_delays(n_nlos, ds, cfg.r_tau, rng)?;
    let gp = generate_powers(&delays, ds, cfg.r_tau, cfg.zeta_db, rng);
    let targets = cfg.target_spreads(lsp);
    let intra = cfg.intra_spreads_for(&targets);
    let means = generate_cluster_angles(&gp.powers, &targets, &anchor.los, k_linear, los, rng);
    let table = cfg.offsets();

    let mut clusters = Vec::with_capacity(n_nlos + 1);
    let mut id = 0;
    if los {
        clusters.push(ClusterState {
            id,
            kind: ClusterKind::Los,
            delay_s: 0.0,
            abs_delay_s: anchor.los_abs_delay_s,
            power: 0.0,
            shadow_db: 0.0,
            angles: anchor.los,
            rays: vec![los_ray(&anchor.los)],
            birth_time_s: anchor.time_s,
            lifetime_s: None,
            rotation: RotationMatrix::identity(),
        });
        id += 1;
    }
    for ((delay, z), mean) in delays.iter().zip(&gp.shadow_db).zip(&means) {
        let rays = spawn_rays(mean, &intra, &table, &cfg.xpr, rng);
        clusters.push(ClusterState {
            id,
            kind: ClusterKind::Nlos,
            delay_s: *delay,
            abs_delay_s: anchor.los_abs_delay_s + delay,
            power: 0.0,
            shadow_db: *z,
            angles: *mean,
            rays,
            birth_time_s: anchor.time_s,
            lifetime_s: None,
            rotation: RotationMatrix::identity(),
        });
        id += 1;
    }

    let mut set = ClusterSet::new(clusters, anchor.time_s, *lsp, ds, cfg.r_tau, k_linear);
    set.renormalize_powers();
    calibrate_angular_spreads(&mut set, &targets, &anchor.los);
    calibrate_delay_spread(&mut set, ds);
    Ok(set)
}

/// Rescales all ray angles about the LOS direction so the realised
/// power-weighted spread of every angle dimension equals its target.
fn calibrate_angular_spreads(set: &mut ClusterSet, targets: &AngularSpreads, center: &ClusterAngles) {
    for dim in AngleDim::ALL {
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for c in &set.clusters {
            let w = c.power / c.rays.len() as f64;
            for r in &c.rays {
                let a = ClusterAngles {
                    aod: r.aod,
                    eod: r.eod,
                    aoa: r.aoa,
                    eoa: r.eoa,
                };
                values.push(dim.deviation(a.get(dim), center.get(dim)));
                weights.push(w);
            }
        }
        let realised = weighted_rms(&values, &weights);
        if realised <= 0.0 {
            continue;
        }
        let s = targets.get(dim).to_radians() / realised;
        let c0 = center.get(dim);
        for c in &mut set.clusters {
            let m = c.angles.get(dim);
            c.angles.set(dim, dim.offset(c0, s * dim.deviation(m, c0)));
            for r in &mut c.rays {
                let mut a = ClusterAngles {
                    aod: r.aod,
                    eod: r.eod,
                    aoa: r.aoa,
                    eoa: r.eoa,
                };
                a.set(dim, dim.offset(c0, s * dim.deviation(a.get(dim), c0)));
                r.aod = a.aod;
                r.eod = a.eod;
                r.aoa = a.aoa;
                r.eoa = a.eoa;
            }
        }
    }
}

/// Rescales delays so the realised RMS delay spread equals `target_s`,
/// and scales the power-law delay constant by the same factor so powers
/// are unchanged.
fn calibrate_delay_spread(set: &mut ClusterSet, target_s: f64) {
    let delays: Vec<f64> = set.clusters.iter().map(|c| c.delay_s).collect();
    let powers: Vec<f64> = set.clusters.iter().map(|c| c.power).collect();
    let realised = weighted_rms(&delays, &powers);
    if realised <= 0.0 {
        return;
    }
    let s = target_s / realised;
    let base = set.reference_abs_delay_s().unwrap_or(0.0);
    for c in &mut set.clusters {
        c.delay_s *= s;
        c.abs_delay_s = base + c.delay_s;
    }
    set.power_delay_scale_s *= s;
    // rederive relative delays from absolute ones so later normalizations
    // are exact fixed points
    set.normalize_delays();
    set.renormalize_powers();
}

/// A freshly born NLOS cluster, drawn like the initial ones around the
/// LOS direction.
pub fn generate_birth<R: Rng + ?Sized>(
    set: &mut ClusterSet,
    cfg: &SmallScaleConfig,
    los: &ClusterAngles,
    time_s: f64,
    lifetime_s: Option<f64>,
    rng: &mut R,
) -> ClusterState {
    let delay = -set.r_tau * set.power_delay_scale_s * open_unit(rng).ln();
    let z: f64 = StandardNormal.sample(rng);
    let shadow_db = cfg.zeta_db * z;
    let targets = cfg.target_spreads(&set.lsp);
    let mut mean = *los;
    for dim in AngleDim::ALL {
        let x: f64 = if dim.is_azimuth() {
            StandardNormal.sample(rng)
        } else {
            laplacian_unit(rng)
        };
        mean.set(dim, dim.offset(los.get(dim), x * targets.get(dim).to_radians()));
    }
    let intra = cfg.intra_spreads_for(&targets);
    let rays = spawn_rays(&mean, &intra, &cfg.offsets(), &cfg.xpr, rng);
    let base = set.reference_abs_delay_s().unwrap_or(0.0);
    ClusterState {
        id: set.allocate_id(),
        kind: ClusterKind::Nlos,
        delay_s: delay,
        abs_delay_s: base + delay,
        power: 0.0,
        shadow_db,
        angles: mean,
        rays,
        birth_time_s: time_s,
        lifetime_s,
        rotation: RotationMatrix::identity(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::scenario::{sample_lsps, LspDistributions};

    fn lsp() -> LspSample {
        LspSample {
            ds_ns: 81.79,
            asa_deg: 16.26,
            esa_deg: 2.37,
            asd_deg: 16.26,
            esd_deg: 2.37,
            k_db: 0.66,
            sf_db: 0.0,
        }
    }

    fn anchor(condition: Propagation) -> LinkAnchor {
        LinkAnchor {
            los: ClusterAngles {
                aod: 3.0,
                eod: 1.6,
                aoa: 0.2,
                eoa: 1.5,
            },
            los_abs_delay_s: 3.3e-6,
            condition,
            time_s: 0.0,
        }
    }

    #[test]
    fn single_delay_is_zero() {
        let d = generate_delays(1, 80e-9, 2.3, &mut substream(1, "d")).unwrap();
        assert_eq!(d, vec![0.0]);
    }

    #[test]
    fn delays_reject_bad_r_tau() {
        assert!(generate_delays(5, 80e-9, 1.0, &mut substream(1, "d")).is_err());
        assert!(generate_delays(5, 80e-9, 0.5, &mut substream(1, "d")).is_err());
    }

    #[test]
    fn delays_sorted_non_negative() {
        let mut rng = substream(2, "d");
        for _ in 0..1000 {
            let d = generate_delays(7, 100e-9, 2.3, &mut rng).unwrap();
            assert_eq!(d[0], 0.0);
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    /// Brute-force oracle: the mean of sorted-and-shifted exponential
    /// samples, estimated from an independent uniform stream.
    #[test]
    fn delay_mean_matches_sampling_oracle() {
        let (n, ds, r) = (5usize, 80e-9, 2.3);
        let runs = 100_000;
        let mut rng = substream(3, "d");
        let mut mean = 0.0;
        for _ in 0..runs {
            mean += generate_delays(n, ds, r, &mut rng).unwrap().iter().sum::<f64>() / n as f64;
        }
        mean /= runs as f64;

        let mut orng = substream(4, "oracle");
        let mut oracle = 0.0;
        for _ in 0..runs {
            let xs: Vec<f64> = (0..n)
                .map(|_| -r * ds * (1.0 - orng.random::<f64>()).ln())
                .collect();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            oracle += xs.iter().map(|x| x - lo).sum::<f64>() / n as f64;
        }
        oracle /= runs as f64;
        assert!((mean / oracle - 1.0).abs() < 0.01, "{mean} vs {oracle}");
        // closed form: (n - 1)/n · r·DS for the mean of shifted exponentials
        assert!((mean / (0.8 * r * ds) - 1.0).abs() < 0.01);
    }

    #[test]
    fn power_law_examples() {
        assert_eq!(cluster_power(0.0, 80e-9, 2.3, 0.0), 1.0);
        let ds = 80e-9;
        let r = 2.3;
        let tau = r * ds / (r - 1.0);
        assert!((cluster_power(tau, ds, r, 0.0) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn powers_normalize() {
        let mut rng = substream(5, "p");
        for n in 1..10 {
            let d = generate_delays(n, 50e-9, 2.3, &mut rng).unwrap();
            let p = generate_powers(&d, 50e-9, 2.3, 3.0, &mut rng);
            assert!((p.powers.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spread_puts_clusters_on_los() {
        let los = anchor(Propagation::Los).los;
        let z = AngularSpreads {
            asd: 0.0,
            esd: 0.0,
            asa: 0.0,
            esa: 0.0,
        };
        let a = generate_cluster_angles(&[0.5, 0.3, 0.2], &z, &los, Some(2.0), false, &mut substream(1, "a"));
        assert!(a.iter().all(|x| *x == los));
    }

    #[test]
    fn cluster_angles_hit_target_spread() {
        let los = anchor(Propagation::Nlos).los;
        let mut rng = substream(6, "a");
        let spreads = AngularSpreads {
            asd: 10.0,
            esd: 3.0,
            asa: 16.26,
            esa: 2.37,
        };
        let mut acc = 0.0;
        let runs = 10_000;
        for _ in 0..runs {
            let d = generate_delays(5, 80e-9, 2.3, &mut rng).unwrap();
            let p = generate_powers(&d, 80e-9, 2.3, 3.0, &mut rng);
            let a = generate_cluster_angles(&p.powers, &spreads, &los, None, false, &mut rng);
            assert!(a.iter().all(|x| (0.0..2.0 * PI).contains(&x.aoa)));
            let vals: Vec<f64> = a.iter().map(|x| wrap_to_pi(x.aoa - los.aoa)).collect();
            acc += weighted_rms(&vals, &p.powers).to_degrees();
        }
        let mean = acc / runs as f64;
        assert!((mean / 16.26 - 1.0).abs() < 0.15, "{mean}");
    }

    #[test]
    fn laplacian_offset_table_is_symmetric() {
        for m in 1..=25 {
            let t = OffsetTable::laplacian(m);
            assert_eq!(t.len(), m);
            let o = t.offsets();
            for i in 0..m {
                assert_eq!(o[i], -o[m - 1 - i], "m = {m}");
            }
        }
        assert_eq!(OffsetTable::laplacian(1).offsets(), &[0.0]);
        let t20 = OffsetTable::laplacian(20);
        let rms = (t20.offsets().iter().map(|x| x * x).sum::<f64>() / 20.0).sqrt();
        assert!(rms > 0.8 && rms < 1.0, "{rms}");
    }

    #[test]
    fn single_ray_sits_on_mean() {
        let mean = anchor(Propagation::Nlos).los;
        let spreads = AngularSpreads {
            asd: 5.0,
            esd: 5.0,
            asa: 5.0,
            esa: 5.0,
        };
        let rays = spawn_rays(&mean, &spreads, &OffsetTable::laplacian(1), &XprModel::default(), &mut substream(1, "r"));
        assert_eq!(rays.len(), 1);
        assert_eq!((rays[0].aod, rays[0].eod, rays[0].aoa, rays[0].eoa), (mean.aod, mean.eod, mean.aoa, mean.eoa));
    }

    #[test]
    fn rays_are_deterministic_per_seed() {
        let mean = anchor(Propagation::Nlos).los;
        let s = AngularSpreads {
            asd: 2.0,
            esd: 2.0,
            asa: 2.0,
            esa: 2.0,
        };
        let t = OffsetTable::laplacian(20);
        let a = spawn_rays(&mean, &s, &t, &XprModel::default(), &mut substream(9, "r"));
        let b = spawn_rays(&mean, &s, &t, &XprModel::default(), &mut substream(9, "r"));
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.xpr > 0.0));
        assert!(a.iter().flat_map(|r| r.phases).all(|p| p > -PI && p <= PI));
    }

    /// Kolmogorov-Smirnov against U(-π, π]; the 1% critical value for large
    /// n is 1.628 / √n.
    #[test]
    fn ray_phases_are_uniform() {
        let mean = anchor(Propagation::Nlos).los;
        let s = AngularSpreads {
            asd: 2.0,
            esd: 2.0,
            asa: 2.0,
            esa: 2.0,
        };
        let t = OffsetTable::laplacian(20);
        let mut rng = substream(10, "phases");
        let mut ph: Vec<f64> = Vec::new();
        while ph.len() < 100_000 {
            for r in spawn_rays(&mean, &s, &t, &XprModel::default(), &mut rng) {
                ph.push(r.phases[0]);
            }
        }
        ph.sort_by(f64::total_cmp);
        let n = ph.len() as f64;
        let d = ph
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + PI) / (2.0 * PI);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / n.sqrt(), "KS {d}");
    }

    #[test]
    fn generated_set_satisfies_invariants() {
        let mut rng = substream(11, "set");
        for cond in [Propagation::Los, Propagation::Nlos] {
            for _ in 0..200 {
                let l = sample_lsps(&LspDistributions::AREA_A, &mut rng);
                let set = generate_cluster_set(&l, &SmallScaleConfig::default(), &anchor(cond), &mut rng).unwrap();
                set.check_invariants().unwrap();
                assert_eq!(set.len(), 5);
                assert_eq!(set.los_cluster().is_some(), cond == Propagation::Los);
            }
        }
    }

    #[test]
    fn generated_set_realises_delay_spread() {
        let mut rng = substream(12, "ds");
        let runs = 10_000;
        let mut acc = 0.0;
        for _ in 0..runs {
            let set = generate_cluster_set(&lsp(), &SmallScaleConfig::default(), &anchor(Propagation::Los), &mut rng).unwrap();
            let d: Vec<f64> = set.clusters.iter().map(|c| c.delay_s).collect();
            let p: Vec<f64> = set.clusters.iter().map(|c| c.power).collect();
            acc += weighted_rms(&d, &p);
        }
        let mean_ns = acc / runs as f64 * 1e9;
        assert!((mean_ns / 81.79 - 1.0).abs() < 0.15, "{mean_ns}");
    }

    #[test]
    fn renormalization_keeps_powers_after_calibration() {
        let mut set = generate_cluster_set(&lsp(), &SmallScaleConfig::default(), &anchor(Propagation::Los), &mut substream(13, "x")).unwrap();
        let before: Vec<f64> = set.clusters.iter().map(|c| c.power).collect();
        set.renormalize_powers();
        for (a, c) in before.iter().zip(&set.clusters) {
            assert!((a - c.power).abs() < 1e-12);
        }
        let k = set.k_linear.unwrap();
        assert!((set.los_cluster().unwrap().power - k / (k + 1.0)).abs() < 1e-12);
    }
}
