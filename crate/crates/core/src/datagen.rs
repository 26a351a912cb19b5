//! Synthetic two-domain shape benchmark.
//!
//! Each class is a simple surface sampled uniformly by area; a domain profile
//! then degrades it (point budget, Gaussian noise, one-sided occlusion) before
//! renormalizing to the unit cube.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::pointcloud::{
    load_xyz, normalize_unit_scale, pad_duplicative, save_xyz, Point3, PointCloud,
};
use crate::seeding::stream_rng;

pub const CLASS_NAMES: [&str; 3] = ["sphere", "cube", "cylinder"];
pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "path,label";
/// Surface samples drawn before a profile thins them out.
const BASE_POINTS: usize = 2048;
const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainProfile {
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    /// Fraction of points removed from the far side along a random direction.
    pub occlusion: Option<f64>,
}

impl DomainProfile {
    /// Dense, clean clouds.
    pub fn source() -> Self {
        DomainProfile {
            points_per_cloud: 1024,
            noise_sigma: 0.005,
            occlusion: None,
        }
    }

    /// Sparse, noisy, partially occluded clouds.
    pub fn target() -> Self {
        DomainProfile {
            points_per_cloud: 256,
            noise_sigma: 0.02,
            occlusion: Some(0.3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.points_per_cloud >= 32,
            "points_per_cloud must be at least 32"
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be non-negative"
        );
        if let Some(f) = self.occlusion {
            ensure!(
                (0.0..1.0).contains(&f),
                "occlusion fraction must lie in [0, 1), got {f}"
            );
        }
        Ok(())
    }
}

/// Points on the ideal class surface, before normalization: a unit-radius
/// sphere, the cube `[−0.5, 0.5]³`, or a cylinder of radius 0.5 and height 1
/// with caps.
pub fn sample_surface<R: Rng + ?Sized>(
    class_id: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    ensure!(n >= 1, "need at least one point");
    let pts = match class_id {
        0 => (0..n)
            .map(|_| loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if r > 1e-12 {
                    break [v[0] / r, v[1] / r, v[2] / r];
                }
            })
            .collect(),
        1 => (0..n)
            .map(|_| {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let mut p = [
                    rng.random_range(-0.5..=0.5),
                    rng.random_range(-0.5..=0.5),
                    rng.random_range(-0.5..=0.5),
                ];
                p[axis] = if face % 2 == 0 { -0.5 } else { 0.5 };
                p
            })
            .collect(),
        2 => (0..n)
            .map(|_| {
                // Lateral area π, two caps π/4 each.
                let u: f64 = rng.random_range(0.0..1.5);
                if u < 1.0 {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    [0.5 * t.cos(), 0.5 * t.sin(), rng.random_range(-0.5..=0.5)]
                } else {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = 0.5 * rng.random_range(0.0f64..=1.0).sqrt();
                    let z = if u < 1.25 { -0.5 } else { 0.5 };
                    [r * t.cos(), r * t.sin(), z]
                }
            })
            .collect(),
        _ => {
            return Err(Error::contract(format!(
                "unknown shape class {class_id}; {} classes are available",
                CLASS_NAMES.len()
            )))
        }
    };
    Ok(pts)
}

/// A labelled, unit-normalized cloud of `n` points on the class surface.
pub fn gen_shape<R: Rng + ?Sized>(class_id: usize, n: usize, rng: &mut R) -> Result<PointCloud> {
    let pts = sample_surface(class_id, n, rng)?;
    normalize_unit_scale(&PointCloud::new(pts)?.with_label(Some(class_id)))
}

fn add_gaussian_noise<R: Rng + ?Sized>(
    points: &mut [Point3],
    sigma: f64,
    rng: &mut R,
) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::contract(e.to_string()))?;
    for p in points {
        for v in p.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(())
}

/// Keeps the `⌈(1 − fraction)·n⌉` points with the smallest projection on a
/// uniformly random direction, in their original order.
fn occlude<R: Rng + ?Sized>(points: &[Point3], fraction: f64, rng: &mut R) -> Vec<Point3> {
    let dir = loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if r > 1e-12 {
            break [v[0] / r, v[1] / r, v[2] / r];
        }
    };
    let keep = ((1.0 - fraction) * points.len() as f64).ceil() as usize;
    let proj = |p: &Point3| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        proj(&points[a])
            .total_cmp(&proj(&points[b]))
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    order.into_iter().map(|i| points[i]).collect()
}

/// Thins `cloud` to the profile's point budget, adds noise, occludes and
/// renormalizes. The label is preserved.
pub fn apply_domain_shift<R: Rng + ?Sized>(
    cloud: &PointCloud,
    profile: &DomainProfile,
    rng: &mut R,
) -> Result<PointCloud> {
    profile.validate()?;
    let mut pts = pad_duplicative(cloud, profile.points_per_cloud, rng)?.into_points();
    add_gaussian_noise(&mut pts, profile.noise_sigma, rng)?;
    if let Some(f) = profile.occlusion {
        pts = occlude(&pts, f, rng);
    }
    normalize_unit_scale(&PointCloud::new(pts)?.with_label(cloud.label()))
}

/// Relative cloud paths with class labels, anchored at the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(String, usize)>,
    pub class_count: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn format(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for (p, l) in &self.entries {
            s.push_str(&format!("{p},{l}\n"));
        }
        s
    }

    pub fn write(&self) -> Result<()> {
        let path = self.manifest_path();
        std::fs::write(&path, self.format()).map_err(|e| Error::io(&path, e))
    }

    /// Parses a manifest file; `class_count` is one past the largest label.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(parse_err(1, format!("expected header {MANIFEST_HEADER:?}"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (p, l) = line
                .rsplit_once(',')
                .ok_or_else(|| parse_err(i + 1, "expected path,label".into()))?;
            let label: usize = l
                .trim()
                .parse()
                .map_err(|_| parse_err(i + 1, format!("invalid label {l:?}")))?;
            if !root.join(p).is_file() {
                return Err(parse_err(i + 1, format!("cloud file {p} does not exist")));
            }
            entries.push((p.to_string(), label));
        }
        ensure!(
            !entries.is_empty(),
            "manifest {} lists no clouds",
            path.display()
        );
        let class_count = entries.iter().map(|e| e.1).max().unwrap() + 1;
        Ok(DatasetManifest {
            root,
            entries,
            class_count,
        })
    }

    /// Loads every cloud with its manifest label attached.
    pub fn load_clouds(&self) -> Result<Vec<PointCloud>> {
        self.entries
            .iter()
            .map(|(p, l)| Ok(load_xyz(&self.root.join(p))?.with_label(Some(*l))))
            .collect()
    }

    /// Entries per class, indexed by label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for (_, l) in &self.entries {
            h[*l] += 1;
        }
        h
    }
}

fn gen_domain(
    classes: usize,
    per_class: usize,
    profile: &DomainProfile,
    seed: u64,
    stream: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clouds: Vec<PointCloud> = (0..classes * per_class)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, stream, k as u64);
            let base = gen_shape(
                k / per_class,
                BASE_POINTS.max(profile.points_per_cloud),
                &mut rng,
            )?;
            apply_domain_shift(&base, profile, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(clouds.len());
    for (k, c) in clouds.iter().enumerate() {
        let label = k / per_class;
        let name = format!("{}_{:04}.xyz", CLASS_NAMES[label], k % per_class);
        save_xyz(c, &dir.join(&name))?;
        entries.push((name, label));
    }
    let m = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        class_count: classes,
    };
    m.write()?;
    Ok(m)
}

/// Writes balanced source (`out_root/source`) and target (`out_root/target`)
/// datasets with their manifests. Each domain and each cloud uses its own
/// random stream derived from `seed`.
pub fn gen_dataset(
    classes: usize,
    per_class_count: usize,
    source: &DomainProfile,
    target: &DomainProfile,
    seed: u64,
    out_root: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    ensure!(
        (2..=CLASS_NAMES.len()).contains(&classes),
        "the generator provides 2 to {} classes, got {classes}",
        CLASS_NAMES.len()
    );
    ensure!(per_class_count >= 1, "per_class_count must be positive");
    source.validate()?;
    target.validate()?;
    let s = gen_domain(
        classes,
        per_class_count,
        source,
        seed,
        SOURCE_STREAM,
        &out_root.join("source"),
    )?;
    let t = gen_domain(
        classes,
        per_class_count,
        target,
        seed,
        TARGET_STREAM,
        &out_root.join("target"),
    )?;
    Ok((s, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_samples_have_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in sample_surface(0, 2000, &mut rng).unwrap() {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cube_samples_lie_on_a_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_surface(1, 2000, &mut rng).unwrap() {
            assert!(p.iter().any(|v| (v.abs() - 0.5).abs() < 1e-12));
            assert!(p.iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn cylinder_samples_lie_on_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_surface(2, 6000, &mut rng).unwrap();
        let mut lateral = 0;
        for p in &pts {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_side = (r - 0.5).abs() < 1e-12 && p[2].abs() <= 0.5;
            let on_cap = (p[2].abs() - 0.5).abs() < 1e-12 && r <= 0.5 + 1e-12;
            assert!(on_side || on_cap);
            lateral += on_side as usize;
        }
        // Two thirds of the area is lateral.
        let frac = lateral as f64 / pts.len() as f64;
        let sigma = (2.0 / 9.0 / pts.len() as f64).sqrt();
        assert!((frac - 2.0 / 3.0).abs() < 4.0 * sigma, "{frac}");
    }

    #[test]
    fn sphere_centroid_is_near_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let pts = sample_surface(0, n, &mut rng).unwrap();
        // Each coordinate of a uniform unit-sphere point has variance 1/3.
        let sigma = (1.0 / 3.0 / n as f64).sqrt();
        for k in 0..3 {
            let m = pts.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            assert!(m.abs() < 3.0 * sigma, "axis {k}: {m}");
        }
    }

    #[test]
    fn unknown_class_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(gen_shape(3, 10, &mut rng).is_err());
        let c = gen_shape(1, 64, &mut rng).unwrap();
        assert_eq!(c.label(), Some(1));
        assert_eq!(c.len(), 64);
    }

    #[test]
    fn clean_shift_only_renormalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = gen_shape(2, 100, &mut rng).unwrap();
        let p = DomainProfile {
            points_per_cloud: 100,
            noise_sigma: 0.0,
            occlusion: None,
        };
        let out = apply_domain_shift(&c, &p, &mut rng).unwrap();
        for (a, b) in out.points().iter().zip(c.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert_eq!(out.label(), Some(2));
    }

    #[test]
    fn occlusion_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = gen_shape(0, 2048, &mut rng).unwrap();
        for (n, f) in [(256, 0.5), (255, 0.5), (256, 0.3), (100, 0.0)] {
            let p = DomainProfile {
                points_per_cloud: n,
                noise_sigma: 0.01,
                occlusion: Some(f),
            };
            let out = apply_domain_shift(&c, &p, &mut rng).unwrap();
            assert_eq!(out.len(), ((1.0 - f) * n as f64).ceil() as usize);
            assert_eq!(out.label(), Some(0));
        }
        let bad = DomainProfile {
            points_per_cloud: 64,
            noise_sigma: 0.0,
            occlusion: Some(1.0),
        };
        assert!(apply_domain_shift(&c, &bad, &mut rng).is_err());
    }

    #[test]
    fn occlusion_removes_far_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> = (0..100).map(|i| [i as f64, 0.0, 0.0]).collect();
        let kept = occlude(&pts, 0.25, &mut rng);
        assert_eq!(kept.len(), 75);
        // A contiguous run along x survives: the removed points are one end.
        let xs: Vec<f64> = kept.iter().map(|p| p[0]).collect();
        assert!(xs.windows(2).all(|w| w[1] - w[0] == 1.0));
    }

    #[test]
    fn noise_std_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = 0.02;
        let mut pts = vec![[0.0; 3]; 100_000 / 3 + 1];
        add_gaussian_noise(&mut pts, sigma, &mut rng).unwrap();
        let vals: Vec<f64> = pts.iter().flatten().copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((var.sqrt() - sigma).abs() < 0.1 * sigma);
    }

    #[test]
    fn profile_validation() {
        assert!(DomainProfile::source().validate().is_ok());
        assert!(DomainProfile::target().validate().is_ok());
        assert!(DomainProfile {
            points_per_cloud: 31,
            ..DomainProfile::source()
        }
        .validate()
        .is_err());
        assert!(DomainProfile {
            noise_sigma: -1.0,
            ..DomainProfile::source()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn manifest_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(&path, "file,label\na.xyz,0\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());
        std::fs::write(&path, "path,label\nmissing.xyz,0\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());
        std::fs::write(dir.path().join("a.xyz"), "0 0 0\n").unwrap();
        std::fs::write(&path, "path,label\na.xyz,x\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());
        std::fs::write(&path, "path,label\na.xyz,2\n").unwrap();
        let m = DatasetManifest::read(&path).unwrap();
        assert_eq!(m.class_count, 3);
        assert_eq!(m.load_clouds().unwrap()[0].label(), Some(2));
    }
}
