//! Time evolution of a cluster set.
//!
//! Two birth-death drivers are available: a Poisson-rate driver tied to
//! the UT displacement, and a four-state Markov chain. Between birth-death
//! events every surviving cluster drifts in delay, power and angle with the
//! UT velocity.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::cluster_gen::{generate_birth, los_angles, ClusterAngles, ClusterSet, SmallScaleConfig};
use crate::error::{Error, Result};
use crate::geometry::{direction_unit_vector, rotate_velocity, spherical_unit_vectors, Vec3, SPEED_OF_LIGHT};
use crate::scenario::LogNormalParams;

/// UT displacement over one birth-death interval.
pub fn displacement(speed_mps: f64, bd_interval_s: f64) -> f64 {
    speed_mps * bd_interval_s
}

/// Probability that a cluster survives a displacement `δ_P`.
pub fn survival_probability(delta_p_m: f64, lambda_r: f64, dc_m: f64) -> f64 {
    (-lambda_r * delta_p_m / dc_m).exp()
}

/// Mean number of clusters born over a displacement `δ_P`.
pub fn expected_new_clusters(lambda_g: f64, lambda_r: f64, delta_p_m: f64, dc_m: f64) -> Result<f64> {
    if !(lambda_r > 0.0) {
        return Err(Error::param("lambda_r", "must be > 0 for the birth rate"));
    }
    Ok(lambda_g / lambda_r * (1.0 - survival_probability(delta_p_m, lambda_r, dc_m)))
}

/// Birth-death state of one interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BdState {
    /// No births or deaths.
    S0,
    /// Births only.
    S1,
    /// Deaths only.
    S2,
    /// Births and deaths.
    S3,
}

impl BdState {
    pub const ALL: [BdState; 4] = [BdState::S0, BdState::S1, BdState::S2, BdState::S3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn classify(births: bool, deaths: bool) -> Self {
        match (births, deaths) {
            (false, false) => BdState::S0,
            (true, false) => BdState::S1,
            (false, true) => BdState::S2,
            (true, true) => BdState::S3,
        }
    }

    pub fn has_birth(self) -> bool {
        matches!(self, BdState::S1 | BdState::S3)
    }

    pub fn has_death(self) -> bool {
        matches!(self, BdState::S2 | BdState::S3)
    }
}

impl fmt::Display for BdState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index())
    }
}

/// Row-stochastic 4×4 matrix over [`BdState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix([[f64; 4]; 4]);

impl TransitionMatrix {
    /// Fitted 5G-R rural transition matrix.
    pub const RURAL: TransitionMatrix = TransitionMatrix([
        [0.66, 0.16, 0.12, 0.06],
        [0.28, 0.02, 0.53, 0.17],
        [0.36, 0.47, 0.05, 0.12],
        [0.16, 0.13, 0.19, 0.52],
    ]);

    pub const IDENTITY: TransitionMatrix = TransitionMatrix([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    pub fn new(rows: [[f64; 4]; 4]) -> Result<Self> {
        for row in &rows {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::param("transition", "entries must lie in [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::param("transition", format!("row sums to {s}")));
            }
        }
        Ok(Self(rows))
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        self.0
    }

    pub fn get(&self, from: BdState, to: BdState) -> f64 {
        self.0[from.index()][to.index()]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, from: BdState, rng: &mut R) -> BdState {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in self.0[from.index()].iter().enumerate() {
            acc += p;
            if u < acc {
                return BdState::ALL[j];
            }
        }
        // rounding left a sliver above the cumulative sum
        let last = self.0[from.index()].iter().rposition(|&p| p > 0.0).unwrap_or(from.index());
        BdState::ALL[last]
    }

    /// Stationary distribution π with πP = π, Σπ = 1, from a direct solve.
    /// `None` if the chain has no unique stationary distribution.
    pub fn stationary(&self) -> Option<[f64; 4]> {
        // (Pᵀ - I) π = 0 with the last equation replaced by Σπ = 1
        let mut a = [[0.0; 5]; 4];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] = self.0[j][i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        a[3] = [1.0, 1.0, 1.0, 1.0, 1.0];
        for col in 0..4 {
            let piv = (col..4).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
            if a[piv][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..5 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        Some(std::array::from_fn(|i| a[i][4] / a[i][i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Driver {
    Poisson,
    Markov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionParams {
    pub driver: Driver,
    pub bd_interval_s: f64,
    /// Generation rate λ_G per unit normalized distance.
    pub lambda_g: f64,
    /// Recombination rate λ_R per unit normalized distance.
    pub lambda_r: f64,
    /// Scenario correlation distance D_c, metres.
    pub dc_m: f64,
    pub transition: TransitionMatrix,
    pub initial_state: BdState,
    /// Cluster lifetime in ln(s); applies to the Markov driver.
    pub lifetime: LogNormalParams,
    pub tau_min_s: f64,
    pub sin_eps: f64,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        let lifetime = LogNormalParams::new(0.88, 0.92);
        let dc_m = 10.0;
        // λ_R ≈ D_c / (v · mean lifetime) at 80 km/h
        let lambda_r = dc_m / (80.0 / 3.6 * lifetime.mean());
        Self {
            driver: Driver::Markov,
            bd_interval_s: 0.1,
            lambda_g: 5.0 * lambda_r,
            lambda_r,
            dc_m,
            transition: TransitionMatrix::RURAL,
            initial_state: BdState::S0,
            lifetime,
            tau_min_s: 1e-9,
            sin_eps: 1e-6,
        }
    }
}

impl EvolutionParams {
    /// Checks the parameters against a parameter-update interval `dt`.
    pub fn validate(&self, dt_s: f64) -> Result<()> {
        if !(dt_s > 0.0) {
            return Err(Error::param("dt", "must be > 0"));
        }
        if !(self.bd_interval_s >= dt_s * (1.0 - 1e-9)) {
            return Err(Error::param("bd_interval_s", "must be >= the update interval"));
        }
        if !(self.lambda_g >= 0.0) || !(self.lambda_r >= 0.0) {
            return Err(Error::param("lambda", "rates must be >= 0"));
        }
        if !(self.dc_m > 0.0) {
            return Err(Error::param("dc_m", "must be > 0"));
        }
        if self.driver == Driver::Poisson && self.lambda_g > 0.0 && self.lambda_r == 0.0 {
            return Err(Error::param("lambda_r", "must be > 0 when lambda_g > 0"));
        }
        TransitionMatrix::new(self.transition.0)?;
        Ok(())
    }
}

/// One birth-death interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time_s: f64,
    pub state: BdState,
    pub births: Vec<u64>,
    pub deaths: Vec<u64>,
    pub n_clusters: usize,
    /// A death was requested but no NLOS cluster was alive.
    pub death_noop: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionLog {
    pub records: Vec<StepRecord>,
    /// Angle updates skipped by the singularity guards.
    pub guard_events: u64,
}

impl EvolutionLog {
    pub fn total_births(&self) -> usize {
        self.records.iter().map(|r| r.births.len()).sum()
    }

    pub fn total_deaths(&self) -> usize {
        self.records.iter().map(|r| r.deaths.len()).sum()
    }

    /// Writes `time_s,state,n_clusters,births,deaths`; ids are `;`-joined.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["time_s", "state", "n_clusters", "births", "deaths"])?;
        let join = |ids: &[u64]| ids.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        for r in &self.records {
            wr.write_record([
                format!("{}", r.time_s),
                r.state.to_string(),
                r.n_clusters.to_string(),
                join(&r.births),
                join(&r.deaths),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<evolution csv>", e))?;
        Ok(())
    }

    pub fn states(&self) -> Vec<BdState> {
        self.records.iter().map(|r| r.state).collect()
    }
}

fn remove_by_ids(set: &mut ClusterSet, ids: &[u64]) {
    set.clusters.retain(|c| !ids.contains(&c.id));
}

fn finish_step(set: &mut ClusterSet) {
    set.normalize_delays();
    set.renormalize_powers();
}

/// Poisson-rate driver: independent NLOS survival, Poisson births.
pub fn step_birth_death_poisson<R: Rng + ?Sized>(
    set: &mut ClusterSet,
    params: &EvolutionParams,
    small: &SmallScaleConfig,
    speed_mps: f64,
    los: &ClusterAngles,
    rng: &mut R,
) -> Result<StepRecord> {
    let delta = displacement(speed_mps, params.bd_interval_s);
    let p_surv = survival_probability(delta, params.lambda_r, params.dc_m);
    let mut deaths = Vec::new();
    for c in &set.clusters {
        if !c.is_los() && rng.random::<f64>() >= p_surv {
            deaths.push(c.id);
        }
    }
    remove_by_ids(set, &deaths);

    let mean = if params.lambda_g == 0.0 {
        0.0
    } else {
        expected_new_clusters(params.lambda_g, params.lambda_r, delta, params.dc_m)?
    };
    let n_new = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::Domain(format!("poisson mean {mean}: {e}")))?
            .sample(rng) as usize
    } else {
        0
    };
    let mut births = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let c = generate_birth(set, small, los, set.time_s, None, rng);
        births.push(c.id);
        set.clusters.push(c);
    }
    finish_step(set);
    Ok(StepRecord {
        time_s: set.time_s,
        state: BdState::classify(!births.is_empty(), !deaths.is_empty()),
        births,
        deaths,
        n_clusters: set.len(),
        death_noop: false,
    })
}

/// Markov driver: the next state fixes one birth and/or one death; clusters
/// past their lifetime die as well.
pub fn step_birth_death_markov<R: Rng + ?Sized>(
    set: &mut ClusterSet,
    params: &EvolutionParams,
    small: &SmallScaleConfig,
    state: &mut BdState,
    los: &ClusterAngles,
    rng: &mut R,
) -> Result<StepRecord> {
    let next = params.transition.sample_next(*state, rng);
    *state = next;
    let now = set.time_s;

    let mut deaths: Vec<u64> = set
        .clusters
        .iter()
        .filter(|c| !c.is_los())
        .filter(|c| c.lifetime_s.is_some_and(|l| now - c.birth_time_s >= l))
        .map(|c| c.id)
        .collect();
    let mut death_noop = false;
    if next.has_death() {
        let candidates: Vec<u64> = set
            .clusters
            .iter()
            .filter(|c| !c.is_los() && !deaths.contains(&c.id))
            .map(|c| c.id)
            .collect();
        if candidates.is_empty() {
            death_noop = true;
        } else {
            deaths.push(candidates[rng.random_range(0..candidates.len())]);
        }
    }
    remove_by_ids(set, &deaths);

    let mut births = Vec::new();
    if next.has_birth() {
        let life = params.lifetime.sample(rng);
        let c = generate_birth(set, small, los, now, Some(life), rng);
        births.push(c.id);
        set.clusters.push(c);
    }
    finish_step(set);
    Ok(StepRecord {
        time_s: now,
        state: next,
        births,
        deaths,
        n_clusters: set.len(),
        death_noop,
    })
}

/// New absolute delay after moving with `v` for `dt`.
pub fn update_delay(abs_delay_s: f64, r_rx: Vec3, v: Vec3, dt_s: f64) -> f64 {
    abs_delay_s - r_rx.dot(v) / SPEED_OF_LIGHT * dt_s
}

/// Angle increments for one update interval.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AngleIncrements {
    pub d_aod: f64,
    pub d_eod: f64,
    pub d_aoa: f64,
    pub d_eoa: f64,
    /// Increments zeroed by the singularity guards.
    pub skipped: u32,
}

/// Angle increments from the rotated velocity `v*` and the absolute delay
/// at the start of the interval.
pub fn update_angles(
    angles: &ClusterAngles,
    abs_delay_s: f64,
    v_star: Vec3,
    dt_s: f64,
    tau_min_s: f64,
    sin_eps: f64,
) -> AngleIncrements {
    if abs_delay_s <= tau_min_s {
        return AngleIncrements {
            skipped: 4,
            ..Default::default()
        };
    }
    let k = dt_s / (SPEED_OF_LIGHT * abs_delay_s);
    let mut out = AngleIncrements::default();
    let (th_d, ph_d) = spherical_unit_vectors(angles.departure());
    let (th_a, ph_a) = spherical_unit_vectors(angles.arrival());
    out.d_eod = v_star.dot(th_d) * k;
    out.d_eoa = v_star.dot(th_a) * k;
    let s_d = angles.eod.sin();
    if s_d.abs() < sin_eps {
        out.skipped += 1;
    } else {
        out.d_aod = v_star.dot(ph_d) * k / s_d;
    }
    let s_a = angles.eoa.sin();
    if s_a.abs() < sin_eps {
        out.skipped += 1;
    } else {
        out.d_aoa = v_star.dot(ph_a) * k / s_a;
    }
    out
}

/// UT and BS state at the end of an update interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub bs: Vec3,
    pub ut: Vec3,
    pub velocity: Vec3,
}

/// Drives one link: parameter drift every update, birth-death every
/// `bd_interval_s`.
#[derive(Debug, Clone)]
pub struct LinkEvolver {
    params: EvolutionParams,
    small: SmallScaleConfig,
    set: ClusterSet,
    state: BdState,
    log: EvolutionLog,
    next_bd_s: f64,
}

impl LinkEvolver {
    pub fn new<R: Rng + ?Sized>(
        mut set: ClusterSet,
        params: EvolutionParams,
        small: SmallScaleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if params.driver == Driver::Markov {
            for c in set.clusters.iter_mut().filter(|c| !c.is_los()) {
                c.lifetime_s = Some(params.lifetime.sample(rng));
            }
        }
        Ok(Self {
            next_bd_s: set.time_s + params.bd_interval_s,
            state: params.initial_state,
            params,
            small,
            set,
            log: EvolutionLog::default(),
        })
    }

    pub fn set(&self) -> &ClusterSet {
        &self.set
    }

    pub fn log(&self) -> &EvolutionLog {
        &self.log
    }

    pub fn state(&self) -> BdState {
        self.state
    }

    pub fn into_parts(self) -> (ClusterSet, EvolutionLog) {
        (self.set, self.log)
    }

    /// Advances the link by `dt_s`, ending at the given kinematics.
    pub fn step<R: Rng + ?Sized>(&mut self, dt_s: f64, kin: &Kinematics, rng: &mut R) -> Result<()> {
        let v = kin.velocity;
        if v != Vec3::ZERO {
            for c in self.set.clusters.iter_mut().filter(|c| !c.is_los()) {
                let v_star = rotate_velocity(&c.rotation, v);
                let inc = update_angles(
                    &c.angles,
                    c.abs_delay_s,
                    v_star,
                    dt_s,
                    self.params.tau_min_s,
                    self.params.sin_eps,
                );
                self.log.guard_events += u64::from(inc.skipped);
                let r_rx = direction_unit_vector(c.angles.arrival());
                c.abs_delay_s = update_delay(c.abs_delay_s, r_rx, v, dt_s);
                c.shift_angles(inc.d_aod, inc.d_eod, inc.d_aoa, inc.d_eoa);
            }
        }
        let los = los_angles(kin.bs, kin.ut)?;
        let los_delay = (kin.bs - kin.ut).norm() / SPEED_OF_LIGHT;
        if let Some(c) = self.set.clusters.iter_mut().find(|c| c.is_los()) {
            if v != Vec3::ZERO {
                c.abs_delay_s = los_delay;
                c.shift_angles(
                    los.aod - c.angles.aod,
                    los.eod - c.angles.eod,
                    los.aoa - c.angles.aoa,
                    los.eoa - c.angles.eoa,
                );
            }
        }
        self.set.time_s += dt_s;
        if v != Vec3::ZERO {
            finish_step(&mut self.set);
        }

        let tol = 1e-9 * self.params.bd_interval_s;
        while self.set.time_s + tol >= self.next_bd_s {
            let rec = match self.params.driver {
                Driver::Poisson => step_birth_death_poisson(
                    &mut self.set,
                    &self.params,
                    &self.small,
                    v.norm(),
                    &los,
                    rng,
                )?,
                Driver::Markov => step_birth_death_markov(
                    &mut self.set,
                    &self.params,
                    &self.small,
                    &mut self.state,
                    &los,
                    rng,
                )?,
            };
            self.log.records.push(rec);
            self.next_bd_s += self.params.bd_interval_s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster_gen::{generate_cluster_set, LinkAnchor};
    use crate::rng::substream;
    use crate::scenario::{LspSample, Propagation};
    use std::f64::consts::{FRAC_PI_2, PI};

    const V80: f64 = 80.0 / 3.6;

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

    fn geometry() -> (Vec3, Vec3) {
        (Vec3::new(0.0, 0.0, 26.0), Vec3::new(-1000.0, 30.0, 4.2))
    }

    fn fresh_set(cond: Propagation, seed: u64) -> ClusterSet {
        let (bs, ut) = geometry();
        let anchor = LinkAnchor {
            los: los_angles(bs, ut).unwrap(),
            los_abs_delay_s: (bs - ut).norm() / SPEED_OF_LIGHT,
            condition: cond,
            time_s: 0.0,
        };
        generate_cluster_set(&lsp(), &SmallScaleConfig::default(), &anchor, &mut substream(seed, "set")).unwrap()
    }

    #[test]
    fn displacement_examples() {
        assert_eq!(displacement(0.0, 0.1), 0.0);
        assert!((displacement(22.22, 0.1) - 2.222).abs() < 1e-12);
        assert_eq!(displacement(2.0 * 22.22, 0.1), 2.0 * displacement(22.22, 0.1));
    }

    #[test]
    fn survival_examples() {
        assert_eq!(survival_probability(0.0, 0.5, 10.0), 1.0);
        assert_eq!(survival_probability(123.0, 0.0, 10.0), 1.0);
        assert!((survival_probability(10.0, 1.0, 10.0) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn expected_births_examples() {
        assert_eq!(expected_new_clusters(1.0, 0.5, 0.0, 10.0).unwrap(), 0.0);
        let e = expected_new_clusters(20.0, 1.0, 10.0, 10.0).unwrap();
        let oracle = 20.0 * (1.0 - 1.0 / std::f64::consts::E);
        assert!((e - oracle).abs() < 1e-12);
        assert!((e - 12.64).abs() < 0.005);
        let far = expected_new_clusters(3.0, 0.2, 1e6, 10.0).unwrap();
        assert!((far - 15.0).abs() < 1e-12);
        assert!(expected_new_clusters(1.0, 0.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn transition_matrix_validation() {
        assert!(TransitionMatrix::new(TransitionMatrix::RURAL.rows()).is_ok());
        let mut bad = TransitionMatrix::RURAL.rows();
        bad[0][0] = 0.7;
        assert!(TransitionMatrix::new(bad).is_err());
    }

    /// Oracle: power iteration from the uniform distribution.
    #[test]
    fn stationary_matches_power_iteration() {
        let p = TransitionMatrix::RURAL.rows();
        let mut pi = [0.25; 4];
        for _ in 0..10_000 {
            let mut next = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    next[j] += pi[i] * p[i][j];
                }
            }
            pi = next;
        }
        let direct = TransitionMatrix::RURAL.stationary().unwrap();
        for i in 0..4 {
            assert!((direct[i] - pi[i]).abs() < 1e-6, "{direct:?} vs {pi:?}");
        }
        assert!(direct[0] > direct[1] && direct[0] > direct[2] && direct[0] > direct[3]);
        assert!(TransitionMatrix::IDENTITY.stationary().is_none());
    }

    #[test]
    fn markov_transitions_follow_matrix() {
        let mut rng = substream(1, "markov");
        let m = TransitionMatrix::RURAL;
        let mut counts = [[0usize; 4]; 4];
        let mut s = BdState::S0;
        for _ in 0..100_000 {
            let n = m.sample_next(s, &mut rng);
            counts[s.index()][n.index()] += 1;
            s = n;
        }
        for i in 0..4 {
            let tot: usize = counts[i].iter().sum();
            for j in 0..4 {
                let p = counts[i][j] as f64 / tot as f64;
                assert!((p - m.rows()[i][j]).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn identity_markov_never_changes() {
        let mut set = fresh_set(Propagation::Nlos, 2);
        let params = EvolutionParams {
            transition: TransitionMatrix::IDENTITY,
            lifetime: LogNormalParams::new(50.0, 0.0),
            ..Default::default()
        };
        let los = los_angles(geometry().0, geometry().1).unwrap();
        let mut s = BdState::S0;
        let mut rng = substream(2, "bd");
        for _ in 0..1000 {
            let r = step_birth_death_markov(&mut set, &params, &SmallScaleConfig::default(), &mut s, &los, &mut rng).unwrap();
            assert!(r.births.is_empty() && r.deaths.is_empty());
        }
    }

    #[test]
    fn markov_death_without_nlos_is_noop() {
        let mut set = fresh_set(Propagation::Los, 3);
        set.clusters.retain(|c| c.is_los());
        set.renormalize_powers();
        let params = EvolutionParams {
            transition: TransitionMatrix::new([[0.0, 0.0, 1.0, 0.0]; 4]).unwrap(),
            ..Default::default()
        };
        let los = los_angles(geometry().0, geometry().1).unwrap();
        let mut s = BdState::S0;
        let r = step_birth_death_markov(&mut set, &params, &SmallScaleConfig::default(), &mut s, &los, &mut substream(3, "bd")).unwrap();
        assert!(r.death_noop && r.deaths.is_empty());
        assert_eq!(set.len(), 1);
        assert!((set.total_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_without_recombination_never_kills() {
        let mut set = fresh_set(Propagation::Los, 4);
        let params = EvolutionParams {
            driver: Driver::Poisson,
            lambda_r: 1e-300,
            lambda_g: 0.0,
            ..Default::default()
        };
        let los = los_angles(geometry().0, geometry().1).unwrap();
        let mut rng = substream(4, "bd");
        for _ in 0..2000 {
            let r = step_birth_death_poisson(&mut set, &params, &SmallScaleConfig::default(), V80, &los, &mut rng).unwrap();
            assert!(r.deaths.is_empty());
        }
    }

    #[test]
    fn poisson_mean_cluster_count() {
        let mut set = fresh_set(Propagation::Nlos, 5);
        let params = EvolutionParams {
            driver: Driver::Poisson,
            lambda_r: 0.12,
            lambda_g: 20.0 * 0.12,
            ..Default::default()
        };
        let small = SmallScaleConfig {
            rays_per_cluster: 1,
            ..Default::default()
        };
        let los = los_angles(geometry().0, geometry().1).unwrap();
        let mut rng = substream(5, "bd");
        let mut acc = 0.0;
        let steps = 100_000;
        for _ in 0..steps {
            acc += step_birth_death_poisson(&mut set, &params, &small, V80, &los, &mut rng).unwrap().n_clusters as f64;
            assert!((set.total_power() - 1.0).abs() < 1e-9);
        }
        let mean = acc / steps as f64;
        assert!((mean / 20.0 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn delay_update_examples() {
        let v = Vec3::new(V80, 0.0, 0.0);
        assert_eq!(update_delay(1e-6, Vec3::new(0.0, 1.0, 0.0), v, 0.1), 1e-6);
        assert_eq!(update_delay(1e-6, Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO, 0.1), 1e-6);
        let d = 1e-6 - update_delay(1e-6, Vec3::new(1.0, 0.0, 0.0), v, 0.1);
        assert!((d - 7.41e-9).abs() < 1e-11, "{d}");
    }

    #[test]
    fn normalize_delays_examples() {
        let mut set = fresh_set(Propagation::Nlos, 6);
        for (c, d) in set.clusters.iter_mut().zip([5e-9, 7e-9, 9e-9, 12e-9, 30e-9]) {
            c.abs_delay_s = d;
        }
        set.normalize_delays();
        let got: Vec<f64> = set.clusters.iter().map(|c| c.delay_s).collect();
        let want = [0.0, 2e-9, 4e-9, 7e-9, 25e-9];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-20);
        }
        set.normalize_delays();
        assert_eq!(got, set.clusters.iter().map(|c| c.delay_s).collect::<Vec<_>>());
    }

    #[test]
    fn power_update_examples() {
        let mut set = fresh_set(Propagation::Nlos, 7);
        for c in &mut set.clusters {
            c.shadow_db = 0.0;
            c.delay_s = 0.0;
        }
        set.renormalize_powers();
        for c in &set.clusters {
            assert!((c.power - 0.2).abs() < 1e-12);
        }
        let before = set.clusters[2].power;
        set.clusters[2].delay_s = 50e-9;
        set.renormalize_powers();
        assert!(set.clusters[2].power < before);
        assert!((set.total_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_update_examples() {
        let a = ClusterAngles {
            aod: 0.0,
            eod: FRAC_PI_2,
            aoa: 1.0,
            eoa: 1.2,
        };
        let zero = update_angles(&a, 1e-6, Vec3::ZERO, 0.01, 1e-9, 1e-6);
        assert_eq!((zero.d_aod, zero.d_eod, zero.d_aoa, zero.d_eoa), (0.0, 0.0, 0.0, 0.0));

        // φ̂ at (θ = π/2, φ = 0) is +y
        let inc = update_angles(&a, 1e-6, Vec3::new(0.0, V80, 0.0), 0.01, 1e-9, 1e-6);
        let oracle = V80 / (SPEED_OF_LIGHT * 1e-6) * 0.01;
        assert!((inc.d_aod - oracle).abs() < 1e-15);
        assert!((inc.d_aod - 7.41e-4).abs() < 1e-6);

        // radial velocity at both ends: no angular change
        let b = ClusterAngles {
            aod: 0.0,
            eod: FRAC_PI_2,
            aoa: 0.0,
            eoa: FRAC_PI_2,
        };
        let inc = update_angles(&b, 1e-6, Vec3::new(V80, 0.0, 0.0), 0.01, 1e-9, 1e-6);
        assert!(inc.d_aod.abs() < 1e-18 && inc.d_eod.abs() < 1e-18);
        assert!(inc.d_aoa.abs() < 1e-18 && inc.d_eoa.abs() < 1e-18);
    }

    #[test]
    fn angle_update_guards() {
        let a = ClusterAngles {
            aod: 0.0,
            eod: 0.0,
            aoa: 0.0,
            eoa: PI,
        };
        let inc = update_angles(&a, 1e-6, Vec3::new(1.0, 1.0, 0.0), 0.01, 1e-9, 1e-6);
        assert_eq!(inc.skipped, 2);
        assert_eq!((inc.d_aod, inc.d_aoa), (0.0, 0.0));
        let inc = update_angles(&a, 0.5e-9, Vec3::new(1.0, 1.0, 0.0), 0.01, 1e-9, 1e-6);
        assert_eq!(inc.skipped, 4);
    }

    fn run_link(driver: Driver, speed: f64, seed: u64) -> (ClusterSet, EvolutionLog, Vec<ClusterSet>) {
        let (bs, ut0) = geometry();
        let set = fresh_set(Propagation::Los, seed);
        let params = EvolutionParams {
            driver,
            ..Default::default()
        };
        let mut rng = substream(seed, "evolve");
        let mut ev = LinkEvolver::new(set, params, SmallScaleConfig::default(), &mut rng).unwrap();
        let v = Vec3::new(speed, 0.0, 0.0);
        let dt = 0.02;
        let mut snaps = Vec::new();
        for k in 1..=250 {
            let kin = Kinematics {
                bs,
                ut: ut0 + v * (k as f64 * dt),
                velocity: v,
            };
            ev.step(dt, &kin, &mut rng).unwrap();
            ev.set().check_invariants().unwrap();
            snaps.push(ev.set().clone());
        }
        let (s, l) = ev.into_parts();
        (s, l, snaps)
    }

    #[test]
    fn static_poisson_link_is_time_invariant() {
        let (_, log, snaps) = run_link(Driver::Poisson, 0.0, 8);
        assert_eq!(log.total_births() + log.total_deaths(), 0);
        assert_eq!(log.records.len(), 50);
        for s in &snaps[1..] {
            assert_eq!(s.clusters, snaps[0].clusters);
        }
    }

    #[test]
    fn moving_link_keeps_invariants_and_los() {
        for driver in [Driver::Poisson, Driver::Markov] {
            let (set, log, _) = run_link(driver, V80, 9);
            assert!(set.los_cluster().is_some());
            let los_id = set.los_cluster().unwrap().id;
            assert!(log.records.iter().all(|r| !r.deaths.contains(&los_id)));
        }
    }

    #[test]
    fn evolution_is_deterministic() {
        let (a, la, _) = run_link(Driver::Markov, V80, 10);
        let (b, lb, _) = run_link(Driver::Markov, V80, 10);
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn normalization_preserves_delay_differences() {
        let (_, _, snaps) = run_link(Driver::Poisson, V80, 11);
        for s in &snaps {
            let base = s.reference_abs_delay_s().unwrap();
            for c in &s.clusters {
                assert!((c.delay_s - (c.abs_delay_s - base)).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn log_csv_has_header() {
        let (_, log, _) = run_link(Driver::Markov, V80, 12);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time_s,state,n_clusters,births,deaths\n"));
        assert_eq!(text.lines().count(), log.records.len() + 1);
    }
}
