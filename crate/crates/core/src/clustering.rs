//! Density clustering of (delay, DoA) candidates into reflection estimates.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{Direction, Vec3};
use crate::error::{Error, Result};
use crate::phalcor::DetectionCandidate;
use crate::room::{Reflection, ReflectionSet};
use crate::seeding::stream_rng;

/// What the density threshold is a fraction of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityBasis {
    /// Detector cells (band and frame-group pairs): a cluster must be seen in
    /// at least this fraction of the analysed cells.
    Cells,
    /// Total candidate count.
    Candidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub gamma_omega_deg: f64,
    pub gamma_tau: f64,
    /// minPts as a fraction of the count selected by `density_basis`.
    pub density: f64,
    pub density_basis: DensityBasis,
    /// Absolute minPts; overrides `density` when set.
    pub min_points: Option<usize>,
    pub subcluster: bool,
    pub split_threshold: f64,
    pub max_split_depth: usize,
    pub kmeans_restarts: usize,
    pub azimuth_only: bool,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            gamma_omega_deg: 15.0,
            gamma_tau: 0.3e-3,
            density: 0.05,
            density_basis: DensityBasis::Cells,
            min_points: None,
            subcluster: true,
            split_threshold: 1.5,
            max_split_depth: 3,
            kmeans_restarts: 10,
            azimuth_only: false,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clustering.gamma_omega_deg", self.gamma_omega_deg),
            ("clustering.gamma_tau", self.gamma_tau),
            ("clustering.density", self.density),
            ("clustering.split_threshold", self.split_threshold),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(k, format!("must be positive, got {v}")));
            }
        }
        if self.density > 1.0 {
            return Err(Error::invalid("clustering.density", "must not exceed 1"));
        }
        if self.min_points == Some(0) {
            return Err(Error::invalid("clustering.min_points", "must be at least 1"));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::invalid("clustering.kmeans_restarts", "must be at least 1"));
        }
        Ok(())
    }

    /// minPts for `candidates` points collected over `cells` detector cells.
    pub fn min_points_for(&self, candidates: usize, cells: usize) -> usize {
        let n = match self.density_basis {
            DensityBasis::Cells => cells,
            DensityBasis::Candidates => candidates,
        };
        self.min_points
            .unwrap_or_else(|| ((self.density * n as f64).ceil() as usize).max(2))
    }

    fn angle(&self, a: &Direction, b: &Direction) -> f64 {
        if self.azimuth_only {
            a.azimuth_distance(b)
        } else {
            a.angle_to(b)
        }
    }
}

/// A point in the delay/direction map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub tau: f64,
    pub doa: Direction,
}

impl From<&DetectionCandidate> for MapPoint {
    fn from(c: &DetectionCandidate) -> Self {
        MapPoint { tau: c.tau, doa: c.doa }
    }
}

pub fn weighted_distance(a: &MapPoint, b: &MapPoint, cfg: &ClusterConfig) -> f64 {
    let da = cfg.angle(&a.doa, &b.doa) / cfg.gamma_omega_deg.to_radians();
    let dt = (a.tau - b.tau) / cfg.gamma_tau;
    da.hypot(dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Indices into the clustered point list, ascending.
    pub members: Vec<usize>,
    pub center_tau: f64,
    pub center_doa: Direction,
    pub weight: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normalized mean of unit vectors; the azimuth-only version averages on the
/// horizontal circle.
fn spherical_mean(dirs: impl Iterator<Item = Direction>, azimuth_only: bool) -> Direction {
    let mut s = [0.0; 3];
    for d in dirs {
        let u = if azimuth_only {
            Direction::new(FRAC_PI_2, d.azimuth).unit_vector()
        } else {
            d.unit_vector()
        };
        for k in 0..3 {
            s[k] += u[k];
        }
    }
    if s.iter().all(|&x| x.abs() < 1e-300) {
        return Direction::new(FRAC_PI_2, 0.0);
    }
    if azimuth_only {
        s[2] = 0.0;
    }
    Direction::from_vector(&s)
}

impl Cluster {
    pub fn from_members(mut members: Vec<usize>, points: &[MapPoint], azimuth_only: bool) -> Self {
        members.sort_unstable();
        let center_tau = median(members.iter().map(|&i| points[i].tau).collect());
        let center_doa = spherical_mean(members.iter().map(|&i| points[i].doa), azimuth_only);
        Cluster {
            weight: members.len(),
            members,
            center_tau,
            center_doa,
        }
    }

    fn center(&self) -> MapPoint {
        MapPoint {
            tau: self.center_tau,
            doa: self.center_doa,
        }
    }
}

fn order_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| {
        b.weight
            .cmp(&a.weight)
            .then(a.center_tau.total_cmp(&b.center_tau))
            .then(a.members.cmp(&b.members))
    });
}

/// DBSCAN with eps = 1 under [`weighted_distance`]. Noise is dropped.
/// `cells` is the number of detector cells the points were collected over.
pub fn dbscan_cluster(points: &[MapPoint], cells: usize, cfg: &ClusterConfig) -> Vec<Cluster> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let min_pts = cfg.min_points_for(n, cells);
    // a canonical processing order makes the result independent of input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.tau
            .total_cmp(&q.tau)
            .then(p.doa.elevation.total_cmp(&q.doa.elevation))
            .then(p.doa.azimuth.total_cmp(&q.doa.azimuth))
            .then(a.cmp(&b))
    });
    let sorted: Vec<MapPoint> = order.iter().map(|&i| points[i]).collect();
    let eps = 1.0 + 1e-12;
    let neighbors = |i: usize| -> Vec<usize> {
        let t = sorted[i].tau;
        let lo = sorted.partition_point(|p| p.tau < t - cfg.gamma_tau * eps);
        let mut out = Vec::new();
        for (j, p) in sorted.iter().enumerate().skip(lo) {
            if p.tau > t + cfg.gamma_tau * eps {
                break;
            }
            if weighted_distance(&sorted[i], p, cfg) <= eps {
                out.push(j);
            }
        }
        out
    };

    const UNSEEN: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let mut label = vec![UNSEEN; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if label[i] != UNSEEN {
            continue;
        }
        let nb = neighbors(i);
        if nb.len() < min_pts {
            label[i] = NOISE;
            continue;
        }
        let id = groups.len();
        let mut members = vec![i];
        label[i] = id;
        let mut queue: Vec<usize> = nb;
        let mut head = 0;
        while head < queue.len() {
            let j = queue[head];
            head += 1;
            if label[j] == NOISE {
                label[j] = id;
                members.push(j);
                continue;
            }
            if label[j] != UNSEEN {
                continue;
            }
            label[j] = id;
            members.push(j);
            let nj = neighbors(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
        groups.push(members);
    }
    let mut clusters: Vec<Cluster> = groups
        .into_iter()
        .map(|m| Cluster::from_members(m.into_iter().map(|j| order[j]).collect(), points, cfg.azimuth_only))
        .collect();
    order_clusters(&mut clusters);
    clusters
}

/// Coordinates in which Euclidean distance approximates the weighted metric.
fn embed(p: &MapPoint, cfg: &ClusterConfig) -> [f64; 4] {
    let g = cfg.gamma_omega_deg.to_radians();
    let u: Vec3 = if cfg.azimuth_only {
        let (s, c) = p.doa.azimuth.sin_cos();
        [c, s, 0.0]
    } else {
        p.doa.unit_vector()
    };
    [u[0] / g, u[1] / g, u[2] / g, p.tau / cfg.gamma_tau]
}

fn sq(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two-means with k-means++ seeding; returns the labels of the lowest-inertia
/// restart.
fn two_means(x: &[[f64; 4]], restarts: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let first = x[rng.random_range(0..n)];
        let d2: Vec<f64> = x.iter().map(|p| sq(p, &first)).collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut r = rng.random::<f64>() * total;
        let mut second = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if r < d {
                second = i;
                break;
            }
            r -= d;
        }
        let mut centers = [first, x[second]];
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in x.iter().enumerate() {
                let l = usize::from(sq(p, &centers[1]) < sq(p, &centers[0]));
                if l != labels[i] {
                    labels[i] = l;
                    changed = true;
                }
            }
            let mut sums = [[0.0; 4]; 2];
            let mut counts = [0usize; 2];
            for (p, &l) in x.iter().zip(&labels) {
                counts[l] += 1;
                for k in 0..4 {
                    sums[l][k] += p[k];
                }
            }
            for l in 0..2 {
                if counts[l] > 0 {
                    centers[l] = sums[l].map(|s| s / counts[l] as f64);
                }
            }
            if !changed {
                break;
            }
        }
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let inertia: f64 = x.iter().zip(&labels).map(|(p, &l)| sq(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, labels));
        }
    }
    best.map(|b| b.1)
}

fn split_recursive(
    cluster: Cluster,
    points: &[MapPoint],
    cfg: &ClusterConfig,
    depth: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Cluster>,
) {
    if depth >= cfg.max_split_depth {
        out.push(cluster);
        return;
    }
    let x: Vec<[f64; 4]> = cluster.members.iter().map(|&i| embed(&points[i], cfg)).collect();
    let Some(labels) = two_means(&x, cfg.kmeans_restarts, rng) else {
        out.push(cluster);
        return;
    };
    let mut parts = [Vec::new(), Vec::new()];
    for (&m, &l) in cluster.members.iter().zip(&labels) {
        parts[l].push(m);
    }
    let [a, b] = parts.map(|p| Cluster::from_members(p, points, cfg.azimuth_only));
    if weighted_distance(&a.center(), &b.center(), cfg) > cfg.split_threshold {
        split_recursive(a, points, cfg, depth + 1, rng, out);
        split_recursive(b, points, cfg, depth + 1, rng, out);
    } else {
        out.push(cluster);
    }
}

/// Recursive two-way k-means split of a cluster whose halves have centers
/// farther apart than the split threshold.
pub fn subcluster_split(cluster: &Cluster, points: &[MapPoint], cfg: &ClusterConfig) -> Vec<Cluster> {
    let mut rng = stream_rng(cfg.seed, "subcluster");
    let mut out = Vec::new();
    split_recursive(cluster.clone(), points, cfg, 0, &mut rng, &mut out);
    order_clusters(&mut out);
    out
}

/// DBSCAN followed by sub-clustering when enabled.
pub fn cluster_points(points: &[MapPoint], cells: usize, cfg: &ClusterConfig) -> Vec<Cluster> {
    let base = dbscan_cluster(points, cells, cfg);
    if !cfg.subcluster {
        return base;
    }
    let mut out: Vec<Cluster> = base.iter().flat_map(|c| subcluster_split(c, points, cfg)).collect();
    order_clusters(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub delay: f64,
    pub doa: Direction,
    pub weight: usize,
}

/// Reflection estimates sorted by delay. In azimuth-only mode the elevation of
/// every estimate is π/2 and carries no information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSet {
    pub azimuth_only: bool,
    pub estimates: Vec<Estimate>,
}

impl EstimateSet {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    /// Unit-amplitude reflection set headed by the given direct sound.
    pub fn to_reflection_set(&self, direct: Direction) -> ReflectionSet {
        let mut set = ReflectionSet::direct_only(direct);
        set.reflections = self
            .estimates
            .iter()
            .map(|e| Reflection {
                delay: e.delay,
                amplitude: 1.0,
                doa: e.doa,
                order: 1,
            })
            .collect();
        set
    }
}

pub fn finalize_estimates(clusters: &[Cluster], azimuth_only: bool) -> EstimateSet {
    let mut estimates: Vec<Estimate> = clusters
        .iter()
        .map(|c| Estimate {
            delay: c.center_tau,
            doa: c.center_doa,
            weight: c.weight,
        })
        .collect();
    estimates.sort_by(|a, b| {
        a.delay
            .total_cmp(&b.delay)
            .then(b.weight.cmp(&a.weight))
            .then(a.doa.azimuth.total_cmp(&b.doa.azimuth))
    });
    EstimateSet {
        azimuth_only,
        estimates,
    }
}

/// Drops elevation: every direction moves to the horizontal plane.
pub fn azimuth_only(d: &Direction) -> Direction {
    Direction::new(FRAC_PI_2, d.azimuth)
}

pub fn collapse_to_azimuth(set: &EstimateSet) -> EstimateSet {
    EstimateSet {
        azimuth_only: true,
        estimates: set
            .estimates
            .iter()
            .map(|e| Estimate {
                doa: azimuth_only(&e.doa),
                ..*e
            })
            .collect(),
    }
}

/// Full clustering stage on detector output.
pub fn estimate_reflections(candidates: &[DetectionCandidate], cells: usize, cfg: &ClusterConfig) -> EstimateSet {
    let points: Vec<MapPoint> = candidates.iter().map(MapPoint::from).collect();
    finalize_estimates(&cluster_points(&points, cells, cfg), cfg.azimuth_only)
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    delay_s: f64,
    elevation_rad: f64,
    azimuth_rad: f64,
    weight: usize,
}

pub fn write_estimates_csv(path: &Path, set: &EstimateSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in &set.estimates {
        w.serialize(EstimateRow {
            delay_s: e.delay,
            elevation_rad: if set.azimuth_only { f64::NAN } else { e.doa.elevation },
            azimuth_rad: e.doa.azimuth,
            weight: e.weight,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_estimates_csv(path: &Path) -> Result<EstimateSet> {
    let rows = csv::Reader::from_path(path)?
        .into_deserialize::<EstimateRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let azimuth_only = rows.first().is_some_and(|r| r.elevation_rad.is_nan());
    if rows.iter().any(|r| r.elevation_rad.is_nan() != azimuth_only) {
        return Err(Error::Format(format!(
            "{}: mixed azimuth-only and full-direction rows",
            path.display()
        )));
    }
    let estimates = rows
        .into_iter()
        .map(|r| Estimate {
            delay: r.delay_s,
            doa: Direction::new(if azimuth_only { FRAC_PI_2 } else { r.elevation_rad }, r.azimuth_rad),
            weight: r.weight,
        })
        .collect();
    Ok(EstimateSet {
        azimuth_only,
        estimates,
    })
}
