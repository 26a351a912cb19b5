//! Point-cloud augmentations: affinity-aware jittering, a fixed-range uniform
//! jitter for comparison, and random neighbourhood masking.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::field::{local_affinity, AffinityProfile};
use crate::pointcloud::{dist2, pad_duplicative, Point3, PointCloud};

/// Range of the masking radius, in normalized coordinate units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            radius_min: 0.1,
            radius_max: 0.3,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.radius_min >= 0.0
                && self.radius_min <= self.radius_max
                && self.radius_max.is_finite(),
            "mask radii must satisfy 0 <= radius_min <= radius_max, got [{}, {}]",
            self.radius_min,
            self.radius_max
        );
        Ok(())
    }
}

/// A padded cloud together with the source index of every appended point.
#[derive(Clone, Debug)]
pub struct Jittered {
    pub cloud: PointCloud,
    /// `sources[i]` is the original index that appended point `N + i` came from.
    pub sources: Vec<usize>,
}

fn jitter_with<R, F>(
    cloud: &PointCloud,
    target_count: usize,
    rng: &mut R,
    mut offset: F,
) -> Result<Jittered>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut R) -> f64,
{
    let n = cloud.len();
    ensure!(
        target_count >= n,
        "target_count {target_count} is smaller than the cloud ({n} points)"
    );
    let mut pts = Vec::with_capacity(target_count);
    pts.extend_from_slice(cloud.points());
    let mut sources = Vec::with_capacity(target_count - n);
    for _ in n..target_count {
        let j = rng.random_range(0..n);
        let p = cloud.points()[j];
        let q: Point3 = [
            p[0] + offset(j, rng),
            p[1] + offset(j, rng),
            p[2] + offset(j, rng),
        ];
        pts.push(q);
        sources.push(j);
    }
    Ok(Jittered {
        cloud: cloud.derive(pts),
        sources,
    })
}

/// Like [`affinity_jitter`], also reporting the source of each appended point.
pub fn affinity_jitter_traced<R: Rng + ?Sized>(
    cloud: &PointCloud,
    profile: &AffinityProfile,
    target_count: usize,
    rng: &mut R,
) -> Result<Jittered> {
    ensure!(
        profile.per_point.len() == cloud.len(),
        "affinity profile has {} entries for a {}-point cloud",
        profile.per_point.len(),
        cloud.len()
    );
    jitter_with(cloud, target_count, rng, |j, rng| {
        let half = 0.5 * profile.per_point[j];
        if half > 0.0 {
            rng.random_range(-half..=half)
        } else {
            0.0
        }
    })
}

/// Pads `cloud` to `target_count` points: the originals, then copies of
/// uniformly chosen points `p_j` shifted by an independent uniform offset in
/// `[−d_j/2, d_j/2]` per coordinate.
pub fn affinity_jitter<R: Rng + ?Sized>(
    cloud: &PointCloud,
    profile: &AffinityProfile,
    target_count: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    affinity_jitter_traced(cloud, profile, target_count, rng).map(|j| j.cloud)
}

pub fn uniform_jitter_baseline_traced<R: Rng + ?Sized>(
    cloud: &PointCloud,
    target_count: usize,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<Jittered> {
    ensure!(
        0.0 <= lo && lo <= hi && hi.is_finite(),
        "jitter range must satisfy 0 <= lo <= hi"
    );
    jitter_with(cloud, target_count, rng, |_, rng| {
        let magnitude = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        if rng.random_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    })
}

/// Padding with a fixed offset magnitude range `[lo, hi]` and random sign per
/// coordinate, independent of local density.
pub fn uniform_jitter_baseline<R: Rng + ?Sized>(
    cloud: &PointCloud,
    target_count: usize,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    uniform_jitter_baseline_traced(cloud, target_count, lo, hi, rng).map(|j| j.cloud)
}

/// Removes every point within distance `r ~ U[radius_min, radius_max]` of a
/// random seed point. If nothing would survive, the point farthest from the
/// seed (lowest index on ties) is kept.
pub fn random_mask<R: Rng + ?Sized>(
    cloud: &PointCloud,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<PointCloud> {
    spec.validate()?;
    ensure!(cloud.len() >= 2, "masking needs at least 2 points");
    let r = if spec.radius_min < spec.radius_max {
        rng.random_range(spec.radius_min..=spec.radius_max)
    } else {
        spec.radius_min
    };
    let seed = cloud.points()[rng.random_range(0..cloud.len())];
    let r2 = r * r;
    let kept: Vec<Point3> = cloud
        .points()
        .iter()
        .filter(|p| dist2(p, &seed) > r2)
        .copied()
        .collect();
    if !kept.is_empty() {
        return Ok(cloud.derive(kept));
    }
    let mut far = 0;
    let mut far_d = -1.0;
    for (i, p) in cloud.points().iter().enumerate() {
        let d = dist2(p, &seed);
        if d > far_d {
            far = i;
            far_d = d;
        }
    }
    Ok(cloud.derive(vec![cloud.points()[far]]))
}

/// Brings a cloud to the encoder's fixed input size: a subsample when it is too
/// large, affinity jitter when it is too small, and duplicative padding when it
/// has too few points for a local affinity with `neighbors` neighbours.
pub fn fit_to_input<R: Rng + ?Sized>(
    cloud: &PointCloud,
    input_points: usize,
    neighbors: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if cloud.len() >= input_points || cloud.len() <= neighbors {
        return pad_duplicative(cloud, input_points, rng);
    }
    let profile = local_affinity(cloud, neighbors)?;
    affinity_jitter(cloud, &profile, input_points, rng)
}

/// As [`fit_to_input`] with a precomputed affinity profile of `cloud`.
pub fn fit_to_input_with<R: Rng + ?Sized>(
    cloud: &PointCloud,
    profile: &AffinityProfile,
    input_points: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if cloud.len() >= input_points {
        return pad_duplicative(cloud, input_points, rng);
    }
    affinity_jitter(cloud, profile, input_points, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ]
                })
                .collect(),
        )
        .unwrap()
        .with_label(Some(2))
    }

    fn chebyshev(a: &Point3, b: &Point3) -> f64 {
        (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn jitter_to_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 20);
        let p = local_affinity(&c, 3).unwrap();
        assert_eq!(affinity_jitter(&c, &p, 20, &mut rng).unwrap(), c);
        assert!(affinity_jitter(&c, &p, 19, &mut rng).is_err());
    }

    #[test]
    fn jitter_stays_within_half_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 50);
        let p = local_affinity(&c, 3).unwrap();
        let j = affinity_jitter_traced(&c, &p, 5050, &mut rng).unwrap();
        assert_eq!(j.cloud.len(), 5050);
        assert_eq!(&j.cloud.points()[..50], c.points());
        assert_eq!(j.cloud.label(), Some(2));
        for (q, &s) in j.cloud.points()[50..].iter().zip(&j.sources) {
            assert!(chebyshev(q, &c.points()[s]) <= p.per_point[s] / 2.0 + 1e-12);
        }
    }

    #[test]
    fn zero_affinity_points_are_copied_exactly() {
        let c = PointCloud::new(
            vec![[0.1, 0.1, 0.1]; 4]
                .into_iter()
                .chain([[1.0, 1.0, 1.0]])
                .collect(),
        )
        .unwrap();
        let p = local_affinity(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = affinity_jitter_traced(&c, &p, 200, &mut rng).unwrap();
        for (q, &s) in j.cloud.points()[5..].iter().zip(&j.sources) {
            if s < 4 {
                assert_eq!(*q, [0.1, 0.1, 0.1]);
            }
        }
    }

    #[test]
    fn uniform_baseline_magnitudes_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 30);
        let j = uniform_jitter_baseline_traced(&c, 3030, 0.03, 0.06, &mut rng).unwrap();
        for (q, &s) in j.cloud.points()[30..].iter().zip(&j.sources) {
            for k in 0..3 {
                let off = (q[k] - c.points()[s][k]).abs();
                assert!((0.03 - 1e-12..=0.06 + 1e-12).contains(&off), "{off}");
            }
        }
        let dup = uniform_jitter_baseline_traced(&c, 100, 0.0, 0.0, &mut rng).unwrap();
        for (q, &s) in dup.cloud.points()[30..].iter().zip(&dup.sources) {
            assert_eq!(*q, c.points()[s]);
        }
        assert!(uniform_jitter_baseline(&c, 40, 0.06, 0.03, &mut rng).is_err());
    }

    #[test]
    fn zero_radius_mask_removes_only_seed_copies() {
        let c = PointCloud::new(vec![[0.0; 3], [0.0; 3], [0.0; 3]]).unwrap();
        let spec = MaskSpec {
            radius_min: 0.0,
            radius_max: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // All copies coincide with the seed: the safeguard keeps one.
        assert_eq!(random_mask(&c, &spec, &mut rng).unwrap().len(), 1);
        let d = random_cloud(&mut rng, 40);
        assert_eq!(random_mask(&d, &spec, &mut rng).unwrap().len(), 39);
    }

    #[test]
    fn huge_radius_keeps_farthest_point() {
        let c = PointCloud::new(vec![[0.0; 3], [0.1, 0.0, 0.0], [0.3, 0.0, 0.0]]).unwrap();
        let spec = MaskSpec {
            radius_min: 10.0,
            radius_max: 10.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let out = random_mask(&c, &spec, &mut rng).unwrap();
            assert_eq!(out.len(), 1);
            assert!(out.points()[0] == [0.0; 3] || out.points()[0] == [0.3, 0.0, 0.0]);
        }
        assert!(random_mask(&PointCloud::new(vec![[0.0; 3]]).unwrap(), &spec, &mut rng).is_err());
        assert!(MaskSpec {
            radius_min: 0.4,
            radius_max: 0.2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fit_to_input_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2, 3, 4, 100, 256, 1500] {
            let c = random_cloud(&mut rng, n);
            let out = fit_to_input(&c, 1024, 3, &mut rng).unwrap();
            assert_eq!(out.len(), 1024);
            assert_eq!(out.label(), Some(2));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_is_sub_multiset_outside_radius(seed in 0u64..100_000, n in 2usize..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, n);
            let spec = MaskSpec::default();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let out = random_mask(&c, &spec, &mut r1).unwrap();
            // Replay the draws to recover radius and seed point.
            let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let r: f64 = r2.random_range(spec.radius_min..=spec.radius_max);
            let s = c.points()[r2.random_range(0..n)];
            let mut pool = c.points().to_vec();
            for p in out.points() {
                let pos = pool.iter().position(|q| q == p);
                prop_assert!(pos.is_some());
                pool.swap_remove(pos.unwrap());
            }
            if out.len() > 1 || dist2(&out.points()[0], &s) > r * r {
                prop_assert!(out.points().iter().all(|p| dist2(p, &s) > r * r));
            }
            let again = random_mask(&c, &spec, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc)).unwrap();
            prop_assert_eq!(out, again);
        }

        #[test]
        fn jitter_is_deterministic(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 16);
            let p = local_affinity(&c, 3).unwrap();
            let a = affinity_jitter(&c, &p, 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = affinity_jitter(&c, &p, 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
