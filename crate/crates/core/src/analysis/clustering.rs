//! KPowerMeans clustering of one snapshot's MPCs.
//!
//! MPCs are embedded as `(u/2, c·τ)` where `u` is the arrival unit vector
//! and `c` the MCD delay coefficient, so the Euclidean distance in the
//! embedding equals the MCD. The objective is the power-weighted sum of
//! squared MCDs to the assigned centroid, which Lloyd iterations never
//! increase.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mpc::{McdParams, MpcRecord};
use crate::error::{Error, Result};

type Point = [f64; 4];

fn embed(m: &MpcRecord, c: f64) -> Point {
    let u = m.unit_vector();
    [u[0] / 2.0, u[1] / 2.0, u[2] / 2.0, c * m.delay_s]
}

fn dist2(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Power-weighted centroid of a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub delay_s: f64,
    pub aoa_rad: f64,
    /// Zenith.
    pub eoa_rad: f64,
    pub power: f64,
    /// Indices of the member MPCs within the snapshot.
    pub members: Vec<usize>,
}

impl Centroid {
    pub fn as_mpc(&self, snapshot: usize) -> MpcRecord {
        MpcRecord {
            snapshot,
            amplitude: num_complex::Complex64::new(self.power.sqrt(), 0.0),
            delay_s: self.delay_s,
            aoa_rad: self.aoa_rad,
            eoa_rad: self.eoa_rad,
            cluster_label: None,
            track_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<Centroid>,
    /// Objective after every iteration.
    pub costs: Vec<f64>,
}

impl Clustering {
    pub fn cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(0.0)
    }
}

pub const MAX_ITERATIONS: usize = 100;

/// Power-weighted k-means++ seeding.
fn seed_centroids<R: Rng + ?Sized>(pts: &[Point], w: &[f64], k: usize, rng: &mut R) -> Vec<Point> {
    let n = pts.len();
    let mut chosen = vec![false; n];
    let mut centres = Vec::with_capacity(k);
    let total: f64 = w.iter().sum();
    let first = pick(w, total, rng).unwrap_or(0);
    chosen[first] = true;
    centres.push(pts[first]);
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let score: Vec<f64> = (0..n).map(|i| if chosen[i] { 0.0 } else { w[i] * d2[i] }).collect();
        let s: f64 = score.iter().sum();
        let i = pick(&score, s, rng).unwrap_or_else(|| (0..n).find(|&i| !chosen[i]).unwrap_or(0));
        chosen[i] = true;
        centres.push(pts[i]);
        for (j, p) in pts.iter().enumerate() {
            d2[j] = d2[j].min(dist2(p, &pts[i]));
        }
    }
    centres
}

fn pick<R: Rng + ?Sized>(w: &[f64], total: f64, rng: &mut R) -> Option<usize> {
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, x) in w.iter().enumerate() {
        acc += x;
        if u < acc && *x > 0.0 {
            return Some(i);
        }
    }
    w.iter().rposition(|&x| x > 0.0)
}

fn lloyd(pts: &[Point], w: &[f64], mut centres: Vec<Point>) -> (Vec<usize>, Vec<Point>, Vec<f64>) {
    let n = pts.len();
    let mut labels = vec![usize::MAX; n];
    let mut costs = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut cost = 0.0;
        for i in 0..n {
            let (best, d) = centres
                .iter()
                .enumerate()
                .map(|(k, c)| (k, dist2(&pts[i], c)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            cost += w[i] * d;
        }
        costs.push(cost);
        if !changed && costs.len() > 1 {
            break;
        }
        let mut acc = vec![([0.0; 4], 0.0); centres.len()];
        for i in 0..n {
            let (s, ws) = &mut acc[labels[i]];
            for d in 0..4 {
                s[d] += w[i] * pts[i][d];
            }
            *ws += w[i];
        }
        for (c, (s, ws)) in centres.iter_mut().zip(acc) {
            if ws > 0.0 {
                *c = s.map(|x| x / ws);
            }
        }
    }
    (labels, centres, costs)
}

/// Clusters one snapshot into `k` groups; the best of `restarts` seeded
/// runs is kept.
pub fn kpowermeans<R: Rng + ?Sized>(
    mpcs: &[MpcRecord],
    k: usize,
    params: &McdParams,
    restarts: usize,
    rng: &mut R,
) -> Result<Clustering> {
    if k == 0 || k > mpcs.len() {
        return Err(Error::param("k", format!("must lie in 1..={}", mpcs.len())));
    }
    let c = params.delay_coefficient();
    let pts: Vec<Point> = mpcs.iter().map(|m| embed(m, c)).collect();
    let w: Vec<f64> = mpcs.iter().map(MpcRecord::power).collect();
    let mut best: Option<(Vec<usize>, Vec<Point>, Vec<f64>)> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(&pts, &w, seed_centroids(&pts, &w, k, rng));
        if best.as_ref().is_none_or(|b| run.2.last() < b.2.last()) {
            best = Some(run);
        }
    }
    let (labels, centres, costs) = best.expect("at least one restart");
    let centroids = centres
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let members: Vec<usize> = (0..mpcs.len()).filter(|&i| labels[i] == j).collect();
            let power: f64 = members.iter().map(|&i| w[i]).sum();
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let (aoa, eoa) = if norm > 0.0 {
                (p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU), (p[2] / norm).clamp(-1.0, 1.0).acos())
            } else {
                (0.0, std::f64::consts::FRAC_PI_2)
            };
            let delay = if c > 0.0 {
                p[3] / c
            } else if power > 0.0 {
                members.iter().map(|&i| w[i] * mpcs[i].delay_s).sum::<f64>() / power
            } else {
                0.0
            };
            Centroid {
                delay_s: delay,
                aoa_rad: aoa,
                eoa_rad: eoa,
                power,
                members,
            }
        })
        .collect();
    Ok(Clustering {
        labels,
        centroids,
        costs,
    })
}

/// Sweeps `k = 1..=k_max` and returns the elbow of the cost curve: the
/// point farthest from the chord joining its ends.
pub fn select_k<R: Rng + ?Sized>(
    mpcs: &[MpcRecord],
    k_max: usize,
    params: &McdParams,
    rng: &mut R,
) -> Result<(usize, Vec<f64>)> {
    let k_max = k_max.min(mpcs.len());
    if k_max == 0 {
        return Err(Error::param("k_max", "no MPCs to cluster"));
    }
    let costs: Vec<f64> = (1..=k_max)
        .map(|k| kpowermeans(mpcs, k, params, 3, rng).map(|c| c.cost()))
        .collect::<Result<_>>()?;
    if k_max <= 2 || costs[0] <= 0.0 {
        return Ok((1, costs));
    }
    let (x0, y0) = (1.0, costs[0] / costs[0]);
    let (x1, y1) = (k_max as f64, costs[k_max - 1] / costs[0]);
    let span_x = x1 - x0;
    let best = (0..k_max)
        .map(|i| {
            let x = (i as f64 + 1.0 - x0) / span_x;
            let y = costs[i] / costs[0];
            // distance from (x, y) to the line through (0, y0) and (1, y1)
            let d = ((y1 - y0) * x - (y - y0)).abs() / ((y1 - y0).powi(2) + 1.0).sqrt();
            (i + 1, d)
        })
        .fold((1, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    Ok((best.0, costs))
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    let n = a.len();
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1.0;
        *ra.entry(*x).or_default() += 1.0;
        *rb.entry(*y).or_default() += 1.0;
    }
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n as f64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::mpc::mcd;
    use crate::rng::substream;
    use num_complex::Complex64;
    use rand_distr::{Distribution, StandardNormal};

    fn m(delay_s: f64, aoa: f64, eoa: f64, p: f64) -> MpcRecord {
        MpcRecord {
            snapshot: 0,
            amplitude: Complex64::new(p.sqrt(), 0.0),
            delay_s,
            aoa_rad: aoa,
            eoa_rad: eoa,
            cluster_label: None,
            track_id: None,
        }
    }

    fn blobs(rng: &mut crate::rng::Stream) -> (Vec<MpcRecord>, Vec<usize>) {
        let mut v = Vec::new();
        let mut truth = Vec::new();
        for (j, (d, a, e)) in [(1e-7, 0.5, 1.5), (8e-7, 3.5, 1.2)].into_iter().enumerate() {
            for _ in 0..30 {
                let n = |rng: &mut crate::rng::Stream| -> f64 { StandardNormal.sample(rng) };
                v.push(m(d + 5e-9 * n(rng), a + 0.01 * n(rng), e + 0.01 * n(rng), 0.5 + rng.random::<f64>()));
                truth.push(j);
            }
        }
        (v, truth)
    }

    #[test]
    fn each_mpc_its_own_cluster() {
        let mpcs: Vec<MpcRecord> = (0..6).map(|i| m(i as f64 * 1e-7, i as f64, 1.0 + 0.1 * i as f64, 1.0)).collect();
        let p = McdParams::from_delays(&mpcs.iter().map(|x| x.delay_s).collect::<Vec<_>>(), 1.0);
        let c = kpowermeans(&mpcs, 6, &p, 1, &mut substream(1, "k")).unwrap();
        assert!(c.cost() < 1e-24);
        let mut l = c.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 6);
        assert!(kpowermeans(&mpcs, 7, &p, 1, &mut substream(1, "k")).is_err());
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = substream(2, "blobs");
        let (mpcs, truth) = blobs(&mut rng);
        let p = McdParams::from_delays(&mpcs.iter().map(|x| x.delay_s).collect::<Vec<_>>(), 1.0);
        // separation check: inter-blob MCD dwarfs intra-blob MCD
        let intra = (0..30).flat_map(|i| (0..30).map(move |j| (i, j))).map(|(i, j)| mcd(&mpcs[i], &mpcs[j], &p).unwrap()).fold(0.0, f64::max);
        let inter = (0..30).flat_map(|i| (30..60).map(move |j| (i, j))).map(|(i, j)| mcd(&mpcs[i], &mpcs[j], &p).unwrap()).fold(f64::MAX, f64::min);
        assert!(inter > 10.0 * intra);
        let c = kpowermeans(&mpcs, 2, &p, 3, &mut rng).unwrap();
        assert_eq!(adjusted_rand_index(&c.labels, &truth), 1.0);
        let (k, _) = select_k(&mpcs, 6, &p, &mut rng).unwrap();
        assert_eq!(k, 2);
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = substream(3, "mono");
        for _ in 0..50 {
            let mpcs: Vec<MpcRecord> = (0..40)
                .map(|_| m(rng.random::<f64>() * 1e-6, rng.random::<f64>() * 6.28, rng.random::<f64>() * 3.14, rng.random::<f64>()))
                .collect();
            let p = McdParams::from_delays(&mpcs.iter().map(|x| x.delay_s).collect::<Vec<_>>(), 1.0);
            let c = kpowermeans(&mpcs, 5, &p, 1, &mut rng).unwrap();
            for w in c.costs.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", c.costs);
            }
        }
    }

    #[test]
    fn duplicates_share_a_centroid() {
        let mut mpcs = vec![m(1e-7, 1.0, 1.0, 1.0); 5];
        mpcs.push(m(9e-7, 4.0, 2.0, 1.0));
        let p = McdParams::from_delays(&mpcs.iter().map(|x| x.delay_s).collect::<Vec<_>>(), 1.0);
        let c = kpowermeans(&mpcs, 2, &p, 1, &mut substream(4, "dup")).unwrap();
        let l0 = c.labels[0];
        assert!(c.labels[..5].iter().all(|&l| l == l0));
        let cen = &c.centroids[l0];
        assert!((cen.delay_s - 1e-7).abs() < 1e-15 && (cen.aoa_rad - 1.0).abs() < 1e-12 && (cen.eoa_rad - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }
}
