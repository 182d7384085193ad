//! Channel statistics extracted from traces and MPC records.

pub mod clustering;
pub mod fit;
pub mod markov;
pub mod mpc;
pub mod pdp;
pub mod tracking;

pub use clustering::{kpowermeans, select_k, Centroid, Clustering};
pub use fit::{cdf_table, fit_distribution, fit_path_loss, DistributionFit, Family, PathLossFit};
pub use markov::{fit_markov, MarkovFit};
pub use mpc::{angular_spread, mcd, AngleDimension, McdParams, MpcRecord};
pub use pdp::{
    apdp, extract_large_scale, instantaneous_pdp, rice_k_factor, rms_delay_spread, stationarity_regions, tpcc,
    NoiseFloor, Pdp, StationarityReport,
};
pub use tracking::{lifetime_stats, track_clusters, ClusterTrack, LifetimeStats, TrackNorm};
