//! Point-cloud values, XYZ text I/O and input preprocessing.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{ensure, Error, Result};

pub type Point3 = [f64; 3];

/// Half-extent of the cube every normalized cloud fits in.
pub const UNIT_HALF_EXTENT: f64 = 0.5;

/// Non-empty sequence of finite 3-D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        ensure!(
            !points.is_empty(),
            "point cloud must contain at least one point"
        );
        ensure!(
            points.iter().flatten().all(|c| c.is_finite()),
            "point cloud coordinates must be finite"
        );
        Ok(PointCloud {
            points,
            label: None,
        })
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Row-major `[N×3]` coordinate buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// New cloud with the same label.
    pub(crate) fn derive(&self, points: Vec<Point3>) -> PointCloud {
        PointCloud {
            points,
            label: self.label,
        }
    }
}

pub(crate) fn centroid(points: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len() as f64;
    c.map(|v| v / n)
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// Parses whitespace-separated `x y z` lines; `#` lines and blank lines are skipped.
pub fn parse_xyz(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 coordinates, found {}",
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|_| err(format!("`{f}` is not a number")))?;
            if !slot.is_finite() {
                return Err(err(format!("`{f}` is not finite")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: "file contains no points".into(),
        });
    }
    PointCloud::new(points)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// One line per point, each coordinate with 17 significant digits.
pub fn format_xyz(points: &[Point3]) -> String {
    let mut s = String::with_capacity(points.len() * 72);
    for p in points {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    s
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    ensure!(!cloud.is_empty(), "refusing to save an empty cloud");
    std::fs::write(path, format_xyz(cloud.points())).map_err(|e| Error::io(path, e))
}

/// Subtracts the centroid, then scales uniformly so the largest absolute
/// coordinate is exactly 0.5.
pub fn normalize_unit_scale(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let mut pts: Vec<Point3> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let extent = pts.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(
        extent > 0.0,
        "cannot normalize a degenerate cloud (all points identical)"
    );
    let s = UNIT_HALF_EXTENT / extent;
    for p in &mut pts {
        for v in p.iter_mut() {
            *v *= s;
        }
    }
    Ok(cloud.derive(pts))
}

/// Brings a cloud to exactly `target_count` points: a uniform subsample
/// without replacement when it is too large (original order kept), otherwise
/// the original points followed by uniform draws with replacement.
pub fn pad_duplicative<R: Rng + ?Sized>(
    cloud: &PointCloud,
    target_count: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    ensure!(target_count >= 1, "target_count must be positive");
    let n = cloud.len();
    let pts = if n == target_count {
        cloud.points.clone()
    } else if n > target_count {
        let mut idx = sample(rng, n, target_count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| cloud.points[i]).collect()
    } else {
        let mut pts = Vec::with_capacity(target_count);
        pts.extend_from_slice(&cloud.points);
        for _ in n..target_count {
            pts.push(cloud.points[rng.random_range(0..n)]);
        }
        pts
    };
    Ok(cloud.derive(pts))
}

/// Rotates every point about the z axis by `angle` radians.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let pts = cloud
        .points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect();
    cloud.derive(pts)
}
