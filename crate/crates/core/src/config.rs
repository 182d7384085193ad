//! INI run configuration.
//!
//! Sections mirror the modules: `[scenario]`, `[evolution]`, `[cdl]` and
//! `[analysis]`. Only `scenario.tag` and `scenario.condition` are required;
//! every other key falls back to the documented default. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::Path;

use ini::Ini;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::pdp::NoiseFloor;
use crate::cdl::{self, CdlInstantiation, CdlTable};
use crate::cir::{Domain, OverflowPolicy, RenderConfig};
use crate::cluster_gen::{AngularSpreads, SmallScaleConfig, XprModel};
use crate::error::{Error, Result};
use crate::evolution::{BdState, Driver, EvolutionParams, TransitionMatrix};
use crate::geometry::{AntennaPattern, Vec3};
use crate::scenario::{
    LogNormalParams, LspDistributions, NormalParams, PathLossModel, Propagation, RxArray, ScenarioConfig, ScenarioTag,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdlSettings {
    pub table: CdlTable,
    pub instantiation: CdlInstantiation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// MCD delay weight ξ.
    pub xi: f64,
    pub noise_floor: NoiseFloor,
    /// APDP averaging window in wavelengths.
    pub window_lambdas: f64,
    pub stationarity_threshold: f64,
    pub track_threshold: f64,
    pub k_max: usize,
    pub restarts: usize,
    pub cdf_rows: usize,
    /// Snapshots per birth-death window when refitting the Markov chain.
    pub bd_window: usize,
    /// Links simulated by `validate`.
    pub links: usize,
    /// Links rendered to traces for the stationarity row of `validate`.
    pub stationarity_links: usize,
    /// Relative tolerance on fitted parameters in `validate`.
    pub tolerance: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            xi: 1.0,
            noise_floor: NoiseFloor::default(),
            window_lambdas: 40.0,
            stationarity_threshold: 0.8,
            track_threshold: 0.06,
            k_max: 10,
            restarts: 3,
            cdf_rows: 1000,
            bd_window: 5,
            links: 200,
            stationarity_links: 2,
            tolerance: 0.15,
        }
    }
}

/// Everything one `simulate` or `validate` run needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub small_scale: SmallScaleConfig,
    pub domain: Domain,
    pub overflow: OverflowPolicy,
    /// Applies path loss and shadow fading to the rendered trace.
    pub large_scale: bool,
    pub evolution: EvolutionParams,
    /// Drives the link from a CDL table instead of sampled LSPs.
    pub cdl: Option<CdlSettings>,
    pub analysis: AnalysisConfig,
}

impl SimConfig {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            domain: self.domain,
            n_points: self.scenario.n_freq,
            bandwidth_hz: self.scenario.bandwidth_hz,
            overflow: self.overflow,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.small_scale.validate()?;
        self.render_config().validate()?;
        self.evolution.validate(self.scenario.snapshot_interval_s())?;
        let a = &self.analysis;
        if !(a.stationarity_threshold > 0.0 && a.stationarity_threshold <= 1.0) {
            return Err(Error::config("analysis", "stationarity_threshold", "must lie in (0, 1]"));
        }
        if a.cdf_rows < 2 {
            return Err(Error::config("analysis", "cdf_rows", "must be >= 2"));
        }
        if a.links < 2 {
            return Err(Error::config("analysis", "links", "must be >= 2"));
        }
        if let Some(c) = &self.cdl {
            c.table.validate()?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of the raw config bytes, recorded in run manifests.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path) -> Result<(SimConfig, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Format {
        offset: e.utf8_error().valid_up_to() as u64,
        reason: "config is not valid UTF-8".into(),
    })?;
    Ok((parse(&text)?, config_hash(&bytes)))
}

struct Section<'a> {
    name: &'static str,
    props: Option<&'a ini::Properties>,
    seen: BTreeSet<String>,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'static str) -> Self {
        Self {
            name,
            props: ini.section(Some(name)),
            seen: BTreeSet::new(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.seen.insert(key.to_string());
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn required(&mut self, key: &str) -> Result<&'a str> {
        self.raw(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::config(self.name, key, "missing required key"))
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(self.name, key, format!("cannot parse `{v}`"))),
        }
    }

    fn f64s(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::config(self.name, key, format!("cannot parse `{x}`")))
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some)
    }

    fn vec3(&mut self, key: &str, default: Vec3) -> Result<Vec3> {
        match self.f64s(key)? {
            None => Ok(default),
            Some(v) if v.len() == 3 => Ok(Vec3::new(v[0], v[1], v[2])),
            Some(_) => Err(Error::config(self.name, key, "expected x, y, z")),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(p) = self.props {
            for (k, _) in p.iter() {
                if !self.seen.contains(k) {
                    return Err(Error::config(self.name, k, "unknown key"));
                }
            }
        }
        Ok(())
    }
}

fn pattern(s: &mut Section<'_>, key: &str) -> Result<AntennaPattern> {
    let Some(v) = s.raw(key) else { return Ok(AntennaPattern::Isotropic) };
    let (kind, arg) = v.split_once(':').unwrap_or((v, ""));
    match kind.trim() {
        "isotropic" => Ok(AntennaPattern::Isotropic),
        "omni" => {
            let gain_dbi = if arg.is_empty() {
                0.0
            } else {
                arg.trim()
                    .parse()
                    .map_err(|_| Error::config(s.name, key, format!("bad gain `{arg}`")))?
            };
            Ok(AntennaPattern::OmniVertical { gain_dbi })
        }
        _ => Err(Error::config(s.name, key, format!("unknown pattern `{v}`"))),
    }
}

fn lognormal(s: &mut Section<'_>, prefix: &str, d: LogNormalParams) -> Result<LogNormalParams> {
    Ok(LogNormalParams::new(
        s.parsed(&format!("{prefix}_mu"), d.mu)?,
        s.parsed(&format!("{prefix}_sigma"), d.sigma)?,
    ))
}

pub fn parse(text: &str) -> Result<SimConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Format {
        offset: 0,
        reason: format!("config: {e}"),
    })?;
    for (name, _) in ini.iter() {
        match name {
            None | Some("scenario") | Some("evolution") | Some("cdl") | Some("analysis") => {}
            Some(other) => return Err(Error::config(other, "*", "unknown section")),
        }
    }
    if ini.general_section().iter().next().is_some() {
        let k = ini.general_section().iter().next().map(|(k, _)| k).unwrap_or("");
        return Err(Error::config("", k, "key outside any section"));
    }

    let mut s = Section::new(&ini, "scenario");
    let tag_str = s.required("tag")?;
    let tag = ScenarioTag::parse(tag_str).ok_or_else(|| Error::config("scenario", "tag", format!("unknown tag `{tag_str}`")))?;
    let condition = match s.required("condition")?.to_ascii_lowercase().as_str() {
        "los" => Propagation::Los,
        "nlos" => Propagation::Nlos,
        other => return Err(Error::config("scenario", "condition", format!("expected los or nlos, got `{other}`"))),
    };
    let base = ScenarioConfig::rural(tag);
    let lsp_base = base.lsp;
    let pl_base = base.path_loss;
    let speed_kmh: f64 = s.parsed("speed_kmh", base.ut_speed_mps * 3.6)?;
    let lsp = LspDistributions {
        ds: lognormal(&mut s, "ds", lsp_base.ds)?,
        asa: lognormal(&mut s, "asa", lsp_base.asa)?,
        esa: lognormal(&mut s, "esa", lsp_base.esa)?,
        asd: lognormal(&mut s, "asd", lsp_base.asd)?,
        esd: lognormal(&mut s, "esd", lsp_base.esd)?,
        k_db: NormalParams {
            mu: s.parsed("k_mu_db", lsp_base.k_db.mu)?,
            sigma: s.parsed("k_sigma_db", lsp_base.k_db.sigma)?,
        },
        sf_std_db: s.parsed("sf_std_db", lsp_base.sf_std_db)?,
        lifetime: lsp_base.lifetime,
        stationarity: lognormal(&mut s, "stationarity", lsp_base.stationarity)?,
    };
    let scenario = ScenarioConfig {
        carrier_hz: s.parsed("carrier_hz", base.carrier_hz)?,
        bandwidth_hz: s.parsed("bandwidth_hz", base.bandwidth_hz)?,
        n_freq: s.parsed("n_freq", base.n_freq)?,
        bs_position: s.vec3("bs_position", base.bs_position)?,
        ut_start: s.vec3("ut_start", base.ut_start)?,
        ut_speed_mps: speed_kmh / 3.6,
        ut_heading_rad: s.parsed("heading_deg", base.ut_heading_rad.to_degrees())?.to_radians(),
        tag,
        condition,
        tx_pattern: pattern(&mut s, "tx_pattern")?,
        rx_pattern: pattern(&mut s, "rx_pattern")?,
        rx_array: RxArray {
            elements: s.parsed("rx_elements", base.rx_array.elements)?,
            radius_m: s.raw("rx_radius_m").map(|v| v.parse()).transpose().map_err(|_| Error::config("scenario", "rx_radius_m", "not a number"))?,
        },
        duration_s: s.parsed("duration_s", base.duration_s)?,
        snapshot_rate_hz: s.parsed("snapshot_rate_hz", base.snapshot_rate_hz)?,
        near_field_cutoff_m: s.parsed("near_field_cutoff_m", base.near_field_cutoff_m)?,
        sf_decorrelation_m: s.parsed("sf_decorrelation_m", base.sf_decorrelation_m)?,
        path_loss: PathLossModel {
            intercept_db: s.parsed("pl_intercept_db", pl_base.intercept_db)?,
            exponent: s.parsed("pl_exponent", pl_base.exponent)?,
            ref_distance_m: s.parsed("pl_ref_distance_m", pl_base.ref_distance_m)?,
            sf_std_db: s.parsed("pl_sf_std_db", pl_base.sf_std_db)?,
        },
        lsp,
    };
    let sd = SmallScaleConfig::default();
    let small_scale = SmallScaleConfig {
        n_clusters: s.parsed("n_clusters", sd.n_clusters)?,
        rays_per_cluster: s.parsed("rays_per_cluster", sd.rays_per_cluster)?,
        r_tau: s.parsed("r_tau", sd.r_tau)?,
        zeta_db: s.parsed("zeta_db", sd.zeta_db)?,
        xpr: XprModel {
            mu_db: s.parsed("xpr_mu_db", sd.xpr.mu_db)?,
            sigma_db: s.parsed("xpr_sigma_db", sd.xpr.sigma_db)?,
        },
        ..sd
    };
    let domain = match s.raw("domain").unwrap_or("frequency") {
        "frequency" => Domain::Frequency,
        "delay" => Domain::Delay,
        v => return Err(Error::config("scenario", "domain", format!("expected frequency or delay, got `{v}`"))),
    };
    let overflow = match s.raw("overflow").unwrap_or("truncate") {
        "truncate" => OverflowPolicy::Truncate,
        "wrap" => OverflowPolicy::Wrap,
        v => return Err(Error::config("scenario", "overflow", format!("expected truncate or wrap, got `{v}`"))),
    };
    let large_scale = s.parsed("large_scale", true)?;
    s.finish()?;

    let mut e = Section::new(&ini, "evolution");
    let ed = EvolutionParams::default();
    let driver = match e.raw("driver").unwrap_or("markov") {
        "markov" => Driver::Markov,
        "poisson" => Driver::Poisson,
        v => return Err(Error::config("evolution", "driver", format!("expected markov or poisson, got `{v}`"))),
    };
    let transition = match e.f64s("transition")? {
        None => ed.transition,
        Some(v) if v.len() == 16 => {
            let mut rows = [[0.0; 4]; 4];
            for (i, x) in v.iter().enumerate() {
                rows[i / 4][i % 4] = *x;
            }
            TransitionMatrix::new(rows).map_err(|err| Error::config("evolution", "transition", err.to_string()))?
        }
        Some(_) => return Err(Error::config("evolution", "transition", "expected 16 row-major values")),
    };
    let initial_state = match e.raw("initial_state") {
        None => ed.initial_state,
        Some(v) => v
            .trim_start_matches(['S', 's'])
            .parse::<usize>()
            .ok()
            .and_then(BdState::from_index)
            .ok_or_else(|| Error::config("evolution", "initial_state", format!("expected S0..S3, got `{v}`")))?,
    };
    let evolution = EvolutionParams {
        driver,
        bd_interval_s: e.parsed("bd_interval_s", ed.bd_interval_s)?,
        lambda_g: e.parsed("lambda_g", ed.lambda_g)?,
        lambda_r: e.parsed("lambda_r", ed.lambda_r)?,
        dc_m: e.parsed("dc_m", ed.dc_m)?,
        transition,
        initial_state,
        lifetime: lognormal(&mut e, "lifetime", ed.lifetime)?,
        tau_min_s: e.parsed("tau_min_s", ed.tau_min_s)?,
        sin_eps: e.parsed("sin_eps", ed.sin_eps)?,
    };
    e.finish()?;

    let mut c = Section::new(&ini, "cdl");
    let cdl = match c.raw("table").filter(|v| !v.is_empty()) {
        None => None,
        Some(name) => {
            let table = match cdl::builtin(name) {
                Some(t) => t,
                None => {
                    let f = std::fs::File::open(name).map_err(|_| Error::config("cdl", "table", format!("no builtin table or file `{name}`")))?;
                    CdlTable::read_csv(name, f)?
                }
            };
            let cd = CdlInstantiation::default();
            let spread: f64 = c.parsed("intra_spread_deg", cd.intra_spreads.asa)?;
            let departure = match c.f64s("departure_deg")? {
                None => None,
                Some(v) if v.len() == 2 => Some((v[0], v[1])),
                Some(_) => return Err(Error::config("cdl", "departure_deg", "expected azimuth, zenith")),
            };
            Some(CdlSettings {
                table,
                instantiation: CdlInstantiation {
                    rays_per_cluster: c.parsed("rays_per_cluster", cd.rays_per_cluster)?,
                    intra_spreads: AngularSpreads {
                        asd: spread,
                        esd: spread,
                        asa: spread,
                        esa: spread,
                    },
                    departure_deg: departure,
                    ..cd
                },
            })
        }
    };
    c.finish()?;

    let mut a = Section::new(&ini, "analysis");
    let ad = AnalysisConfig::default();
    let noise_floor = match a.raw("noise_floor_db") {
        None => ad.noise_floor,
        Some("none") => NoiseFloor::None,
        Some(v) => NoiseFloor::BelowPeak(
            v.parse()
                .map_err(|_| Error::config("analysis", "noise_floor_db", format!("cannot parse `{v}`")))?,
        ),
    };
    let analysis = AnalysisConfig {
        xi: a.parsed("xi", ad.xi)?,
        noise_floor,
        window_lambdas: a.parsed("window_lambdas", ad.window_lambdas)?,
        stationarity_threshold: a.parsed("stationarity_threshold", ad.stationarity_threshold)?,
        track_threshold: a.parsed("track_threshold", ad.track_threshold)?,
        k_max: a.parsed("k_max", ad.k_max)?,
        restarts: a.parsed("restarts", ad.restarts)?,
        cdf_rows: a.parsed("cdf_rows", ad.cdf_rows)?,
        bd_window: a.parsed("bd_window", ad.bd_window)?,
        links: a.parsed("links", ad.links)?,
        stationarity_links: a.parsed("stationarity_links", ad.stationarity_links)?,
        tolerance: a.parsed("tolerance", ad.tolerance)?,
    };
    a.finish()?;

    let cfg = SimConfig {
        scenario,
        small_scale,
        domain,
        overflow,
        large_scale,
        evolution,
        cdl,
        analysis,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[scenario]\ntag = rural-a\ncondition = los\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(MIN).unwrap();
        assert_eq!(c.scenario, ScenarioConfig::rural(ScenarioTag::RuralA));
        assert_eq!(c.evolution, EvolutionParams::default());
        assert!(c.cdl.is_none());
        assert_eq!(c.analysis.cdf_rows, 1000);
    }

    #[test]
    fn missing_key_is_named() {
        let err = parse("[scenario]\ntag = rural-a\n").unwrap_err().to_string();
        assert!(err.contains("condition") && err.contains("scenario"), "{err}");
    }

    #[test]
    fn unknown_key_and_section_are_rejected() {
        let err = parse(&format!("{MIN}speeed_kmh = 3\n")).unwrap_err().to_string();
        assert!(err.contains("speeed_kmh"), "{err}");
        assert!(parse(&format!("{MIN}[extra]\nx = 1\n")).is_err());
    }

    #[test]
    fn overrides_and_cdl_table() {
        let c = parse(&format!(
            "{MIN}speed_kmh = 0\nds_mu = 3.6\n[evolution]\ndriver = poisson\n[cdl]\ntable = 5g-r-rural\nrays_per_cluster = 1\n"
        ))
        .unwrap();
        assert_eq!(c.scenario.ut_speed_mps, 0.0);
        assert_eq!(c.scenario.lsp.ds.mu, 3.6);
        assert_eq!(c.evolution.driver, Driver::Poisson);
        assert_eq!(c.cdl.unwrap().instantiation.rays_per_cluster, 1);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = parse(&format!("{MIN}n_freq = many\n")).unwrap_err().to_string();
        assert!(err.contains("n_freq"));
        let err = parse(&format!("{MIN}[evolution]\ntransition = 1,0,0\n")).unwrap_err().to_string();
        assert!(err.contains("transition"));
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = config_hash(b"abc");
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
