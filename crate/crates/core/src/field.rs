//! Local affinity, the adaptive unsigned distance field (AUD) and the
//! geometric utilities built on it: query sampling, Chamfer distance and
//! resampling a learned implicit surface.
//!
//! For a cloud `P`, the local affinity `d_j` of point `p_j` is the mean distance
//! to its `M` nearest *other* points (excluded by index, so duplicates count as
//! neighbours at distance 0). The clamping threshold `d_M` is the mean of all
//! `d_j`. The AUD of a query `q` is its nearest-point distance `D`, replaced by
//! 0 whenever `D ≤ d_M`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::pointcloud::{Point3, PointCloud};
use crate::spatial::KdTree;
use crate::tensor::Tensor;

pub const DEFAULT_NEIGHBORS: usize = 3;
pub const DEFAULT_CUBE_HALF_WIDTH: f64 = 0.55;
pub const DEFAULT_QUERIES_PER_STEP: usize = 512;

/// Per-point local affinities and their mean, the clamping threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityProfile {
    pub per_point: Vec<f64>,
    pub threshold: f64,
    pub neighbor_count: usize,
}

pub fn local_affinity(cloud: &PointCloud, neighbors: usize) -> Result<AffinityProfile> {
    let tree = KdTree::build(cloud.points())?;
    local_affinity_with_tree(cloud, &tree, neighbors)
}

/// As [`local_affinity`], reusing a tree built over `cloud`.
pub fn local_affinity_with_tree(
    cloud: &PointCloud,
    tree: &KdTree,
    neighbors: usize,
) -> Result<AffinityProfile> {
    ensure!(neighbors >= 1, "neighbour count M must be positive");
    let n = cloud.len();
    ensure!(
        n > neighbors,
        "local affinity with M = {neighbors} needs more than {neighbors} points, got {n}"
    );
    let mut per_point = Vec::with_capacity(n);
    for (j, p) in cloud.points().iter().enumerate() {
        let hits = tree.knn(p, neighbors + 1)?;
        let sum: f64 = hits
            .iter()
            .filter(|h| h.index != j)
            .take(neighbors)
            .map(|h| h.distance)
            .sum();
        per_point.push(sum / neighbors as f64);
    }
    let threshold = per_point.iter().sum::<f64>() / n as f64;
    Ok(AffinityProfile {
        per_point,
        threshold,
        neighbor_count: neighbors,
    })
}

/// `K` query points inside the axis-aligned cube `[−h, h]³`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    points: Vec<Point3>,
    half_width: f64,
}

impl QuerySet {
    pub fn new(points: Vec<Point3>, half_width: f64) -> Result<Self> {
        ensure!(half_width > 0.0, "cube half-width must be positive");
        ensure!(
            points.iter().flatten().all(|c| c.abs() <= half_width),
            "query outside the cube [-{half_width}, {half_width}]^3"
        );
        Ok(QuerySet { points, half_width })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `[K×3]` tensor of the queries.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(
            self.len(),
            3,
            self.points.iter().flatten().copied().collect(),
        )
    }
}

fn uniform_cube<R: Rng + ?Sized>(count: usize, half_width: f64, rng: &mut R) -> Vec<Point3> {
    (0..count)
        .map(|_| {
            [
                rng.random_range(-half_width..=half_width),
                rng.random_range(-half_width..=half_width),
                rng.random_range(-half_width..=half_width),
            ]
        })
        .collect()
}

/// `count` i.i.d. uniform points in `[−h, h]³`.
pub fn sample_queries<R: Rng + ?Sized>(
    count: usize,
    half_width: f64,
    rng: &mut R,
) -> Result<QuerySet> {
    ensure!(count >= 1, "query count must be positive");
    ensure!(half_width > 0.0, "cube half-width must be positive");
    Ok(QuerySet {
        points: uniform_cube(count, half_width, rng),
        half_width,
    })
}

/// `resolution³` grid points spanning `[−h, h]³` (endpoints included), x fastest.
pub fn grid_queries(resolution: usize, half_width: f64) -> Result<QuerySet> {
    ensure!(resolution >= 1, "grid resolution must be positive");
    let coord = |i: usize| {
        if resolution == 1 {
            0.0
        } else {
            -half_width + 2.0 * half_width * i as f64 / (resolution - 1) as f64
        }
    };
    let mut pts = Vec::with_capacity(resolution.pow(3));
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                pts.push([coord(i), coord(j), coord(k)]);
            }
        }
    }
    QuerySet::new(pts, half_width)
}

/// Adaptive unsigned distance field of one cloud, ready for repeated queries.
#[derive(Clone, Debug)]
pub struct AudField {
    tree: KdTree,
    threshold: f64,
}

impl AudField {
    pub fn new(cloud: &PointCloud, neighbors: usize) -> Result<Self> {
        let tree = KdTree::build(cloud.points())?;
        let profile = local_affinity_with_tree(cloud, &tree, neighbors)?;
        Ok(AudField {
            tree,
            threshold: profile.threshold,
        })
    }

    pub fn from_profile(cloud: &PointCloud, profile: &AffinityProfile) -> Result<Self> {
        ensure!(
            profile.per_point.len() == cloud.len(),
            "affinity profile has {} entries for a {}-point cloud",
            profile.per_point.len(),
            cloud.len()
        );
        Ok(AudField {
            tree: KdTree::build(cloud.points())?,
            threshold: profile.threshold,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn at(&self, q: &Point3) -> f64 {
        let d = self.tree.nearest(q).distance;
        if d > self.threshold {
            d
        } else {
            0.0
        }
    }

    pub fn evaluate(&self, queries: &[Point3]) -> Vec<f64> {
        queries.iter().map(|q| self.at(q)).collect()
    }
}

/// AUD values of `queries` for a cloud and its affinity profile.
pub fn aud(cloud: &PointCloud, profile: &AffinityProfile, queries: &QuerySet) -> Result<Vec<f64>> {
    Ok(AudField::from_profile(cloud, profile)?.evaluate(queries.points()))
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let ta = KdTree::build(a.points())?;
    let tb = KdTree::build(b.points())?;
    let one_way = |from: &PointCloud, tree: &KdTree| {
        from.points()
            .iter()
            .map(|p| {
                let d = tree.nearest(p).distance;
                d * d
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(one_way(a, &tb) + one_way(b, &ta))
}

const RESAMPLE_CHUNK: usize = 8192;

/// Draws `n_samples` uniform points in `[−h, h]³` and keeps those whose
/// predicted distance is strictly below `epsilon`. `None` when nothing is kept.
///
/// `evaluate` maps a batch of query points and the latent code to one
/// predicted distance per query; it is called on chunks of the sample.
pub fn resample_from_implicit<F, R>(
    mut evaluate: F,
    latent: &Tensor,
    n_samples: usize,
    epsilon: f64,
    half_width: f64,
    rng: &mut R,
) -> Result<Option<PointCloud>>
where
    F: FnMut(&[Point3], &Tensor) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    ensure!(epsilon > 0.0, "epsilon must be positive");
    ensure!(half_width > 0.0, "cube half-width must be positive");
    let samples = uniform_cube(n_samples, half_width, rng);
    let mut kept = Vec::new();
    for chunk in samples.chunks(RESAMPLE_CHUNK) {
        let d = evaluate(chunk, latent)?;
        ensure!(
            d.len() == chunk.len(),
            "evaluator returned {} values for {} queries",
            d.len(),
            chunk.len()
        );
        kept.extend(
            chunk
                .iter()
                .zip(d)
                .filter(|(_, v)| *v < epsilon)
                .map(|(p, _)| *p),
        );
    }
    if kept.is_empty() {
        Ok(None)
    } else {
        PointCloud::new(kept).map(Some)
    }
}

/// `x y z d` lines, one per query, in the XYZ text conventions.
pub fn format_field_dump(queries: &[Point3], values: &[f64]) -> Result<String> {
    ensure!(
        queries.len() == values.len(),
        "one value per query required"
    );
    let mut s = String::with_capacity(queries.len() * 96);
    for (q, d) in queries.iter().zip(values) {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e} {:.16e}", q[0], q[1], q[2], d);
    }
    Ok(s)
}

pub fn write_field_dump(path: &Path, queries: &[Point3], values: &[f64]) -> Result<()> {
    let text = format_field_dump(queries, values)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
