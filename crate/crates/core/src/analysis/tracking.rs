//! Cluster tracking across snapshots and lifetime statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::clustering::Centroid;
use super::fit::{fit_distribution, DistributionFit, Family};
use super::mpc::{mcd, McdParams};
use crate::error::{Error, Result};
use crate::evolution::BdState;

pub const DEFAULT_TRACK_THRESHOLD: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrack {
    pub id: u64,
    pub birth: usize,
    pub death: usize,
    /// One centroid per snapshot in `birth..=death`.
    pub centroids: Vec<Centroid>,
}

impl ClusterTrack {
    pub fn len_snapshots(&self) -> usize {
        self.death - self.birth + 1
    }

    pub fn lifetime_s(&self, dt_s: f64) -> f64 {
        self.len_snapshots() as f64 * dt_s
    }

    pub fn alive_at(&self, t: usize) -> bool {
        (self.birth..=self.death).contains(&t)
    }
}

/// Delay normalisation used when comparing consecutive snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrackNorm {
    /// τ_std and Δτ_max from the union of both snapshots' centroids.
    Union { xi: f64 },
    Fixed(McdParams),
}

impl Default for TrackNorm {
    fn default() -> Self {
        TrackNorm::Union { xi: 1.0 }
    }
}

/// Greedy nearest-MCD matching between consecutive snapshots. Pairs at
/// or below `threshold` continue a track; the rest open or close tracks.
pub fn track_clusters(snapshots: &[Vec<Centroid>], threshold: f64, norm: TrackNorm) -> Result<Vec<ClusterTrack>> {
    let mut done: Vec<ClusterTrack> = Vec::new();
    // open[i] = index into `active` for centroid i of the previous snapshot
    let mut active: Vec<ClusterTrack> = Vec::new();
    let mut next_id = 0u64;
    let mut prev: Vec<Centroid> = Vec::new();
    let mut prev_track: Vec<usize> = Vec::new();

    for (t, cur) in snapshots.iter().enumerate() {
        let mut cur_track: Vec<Option<usize>> = vec![None; cur.len()];
        if !prev.is_empty() && !cur.is_empty() {
            let params = match norm {
                TrackNorm::Fixed(p) => p,
                TrackNorm::Union { xi } => {
                    let d: Vec<f64> = prev.iter().chain(cur).map(|c| c.delay_s).collect();
                    McdParams::from_delays(&d, xi)
                }
            };
            let mut pairs = Vec::with_capacity(prev.len() * cur.len());
            for (i, a) in prev.iter().enumerate() {
                for (j, b) in cur.iter().enumerate() {
                    pairs.push((mcd(&a.as_mpc(t), &b.as_mpc(t), &params)?, i, j));
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used_prev = vec![false; prev.len()];
            for (d, i, j) in pairs {
                if d > threshold {
                    break;
                }
                if used_prev[i] || cur_track[j].is_some() {
                    continue;
                }
                used_prev[i] = true;
                cur_track[j] = Some(prev_track[i]);
            }
        }
        let continuing: Vec<usize> = cur_track.iter().flatten().copied().collect();
        // close tracks not continued
        let mut keep = Vec::new();
        let mut remap = vec![usize::MAX; active.len()];
        for (k, tr) in active.drain(..).enumerate() {
            if continuing.contains(&k) {
                remap[k] = keep.len();
                keep.push(tr);
            } else {
                done.push(tr);
            }
        }
        active = keep;
        let mut new_prev_track = Vec::with_capacity(cur.len());
        for (j, c) in cur.iter().enumerate() {
            let k = match cur_track[j] {
                Some(old) => {
                    let k = remap[old];
                    active[k].death = t;
                    active[k].centroids.push(c.clone());
                    k
                }
                None => {
                    active.push(ClusterTrack {
                        id: next_id,
                        birth: t,
                        death: t,
                        centroids: vec![c.clone()],
                    });
                    next_id += 1;
                    active.len() - 1
                }
            };
            new_prev_track.push(k);
        }
        prev = cur.clone();
        prev_track = new_prev_track;
    }
    done.extend(active);
    done.sort_by_key(|t| t.id);
    Ok(done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeStats {
    pub fit: DistributionFit,
    /// Alive-track count per window → number of windows.
    pub count_histogram: BTreeMap<usize, usize>,
}

/// Lognormal lifetime fit plus a histogram of how many tracks are alive in
/// each non-overlapping window of `window` snapshots.
pub fn lifetime_stats(tracks: &[ClusterTrack], dt_s: f64, n_snapshots: usize, window: usize) -> Result<LifetimeStats> {
    if tracks.len() < 2 {
        return Err(Error::param("tracks", "need at least 2"));
    }
    let life: Vec<f64> = tracks.iter().map(|t| t.lifetime_s(dt_s)).collect();
    let fit = fit_distribution(&life, Family::LogNormal)?;
    let mut hist = BTreeMap::new();
    let w = window.max(1);
    let mut start = 0;
    while start < n_snapshots {
        let end = (start + w).min(n_snapshots) - 1;
        let alive = tracks.iter().filter(|t| t.birth <= end && t.death >= start).count();
        *hist.entry(alive).or_insert(0) += 1;
        start += w;
    }
    Ok(LifetimeStats {
        fit,
        count_histogram: hist,
    })
}

/// Birth-death state of each window of `window` snapshots, from track
/// births and deaths. Births at the first snapshot and deaths at the last
/// are edge effects and ignored.
pub fn bd_states_from_tracks(tracks: &[ClusterTrack], n_snapshots: usize, window: usize) -> Vec<BdState> {
    let w = window.max(1);
    let last = n_snapshots.saturating_sub(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_snapshots {
        let end = (start + w).min(n_snapshots) - 1;
        let birth = tracks.iter().any(|t| t.birth > 0 && (start..=end).contains(&t.birth));
        // a track dying at snapshot d is gone from d + 1 on
        let death = tracks.iter().any(|t| t.death < last && (start..=end).contains(&(t.death + 1)));
        out.push(BdState::classify(birth, death));
        start += w;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::scenario::LogNormalParams;

    fn c(delay_s: f64, aoa: f64) -> Centroid {
        Centroid {
            delay_s,
            aoa_rad: aoa,
            eoa_rad: 1.4,
            power: 1.0,
            members: vec![],
        }
    }

    #[test]
    fn static_centroids_give_full_tracks() {
        let snap = vec![c(0.0, 0.5), c(3e-7, 2.0), c(6e-7, 4.0)];
        let tracks = track_clusters(&vec![snap; 10], 0.06, TrackNorm::default()).unwrap();
        assert_eq!(tracks.len(), 3);
        assert!(tracks.iter().all(|t| t.birth == 0 && t.death == 9));
    }

    #[test]
    fn jump_kills_and_births() {
        let a = vec![c(0.0, 0.5), c(6e-7, 4.0)];
        let b = vec![c(0.0, 0.5), c(6e-7, 4.5)];
        let tracks = track_clusters(&[a.clone(), a, b], 0.06, TrackNorm::default()).unwrap();
        assert_eq!(tracks.len(), 3);
        let dead = tracks.iter().find(|t| t.death == 1).unwrap();
        assert_eq!(dead.birth, 0);
        assert!(tracks.iter().any(|t| t.birth == 2));
    }

    #[test]
    fn empty_snapshot_kills_everything() {
        let a = vec![c(0.0, 0.5), c(6e-7, 4.0)];
        let tracks = track_clusters(&[a.clone(), vec![], a], 0.06, TrackNorm::default()).unwrap();
        assert_eq!(tracks.len(), 4);
        assert!(tracks.iter().all(|t| t.birth == t.death));
    }

    #[test]
    fn occupancy_partition() {
        let mut rng = substream(1, "occ");
        use rand::Rng;
        let snaps: Vec<Vec<Centroid>> = (0..40)
            .map(|_| (0..rng.random_range(0..5)).map(|i| c(i as f64 * 2e-7, i as f64)).collect())
            .collect();
        let tracks = track_clusters(&snaps, 0.06, TrackNorm::default()).unwrap();
        let alive: usize = (0..snaps.len()).map(|t| tracks.iter().filter(|tr| tr.alive_at(t)).count()).sum();
        let life: usize = tracks.iter().map(|t| t.len_snapshots()).sum();
        let total: usize = snaps.iter().map(Vec::len).sum();
        assert_eq!(alive, life);
        assert_eq!(life, total);
    }

    #[test]
    fn lifetime_fit_recovers_lognormal() {
        let law = LogNormalParams::new(0.88, 0.92);
        let mut rng = substream(2, "life");
        let dt = 1e-4;
        let tracks: Vec<ClusterTrack> = (0..10_000)
            .map(|i| {
                let n = (law.sample(&mut rng) / dt).round().max(1.0) as usize;
                ClusterTrack {
                    id: i,
                    birth: 0,
                    death: n - 1,
                    centroids: vec![],
                }
            })
            .collect();
        let s = lifetime_stats(&tracks, dt, 10, 10).unwrap();
        assert!((s.fit.mu - 0.88).abs() < 0.03 && (s.fit.sigma - 0.92).abs() < 0.03, "{:?}", s.fit);
    }

    #[test]
    fn equal_lifetimes_and_single_track_histogram() {
        let t = |id| ClusterTrack {
            id,
            birth: 0,
            death: 49,
            centroids: vec![],
        };
        let s = lifetime_stats(&[t(0), t(1)], 0.02, 50, 10).unwrap();
        assert_eq!(s.fit.sigma, 0.0);
        let one = vec![t(0); 1];
        let tracks = track_clusters(&vec![vec![c(0.0, 1.0)]; 50], 0.06, TrackNorm::default()).unwrap();
        assert_eq!(tracks.len(), one.len());
        let mut h = BTreeMap::new();
        for chunk in 0..5 {
            let alive = tracks.iter().filter(|tr| tr.birth <= chunk * 10 + 9 && tr.death >= chunk * 10).count();
            *h.entry(alive).or_insert(0) += 1;
        }
        assert_eq!(h, BTreeMap::from([(1, 5)]));
    }
}
