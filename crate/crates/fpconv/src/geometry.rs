//! Spatial primitives: radius neighbor search over a uniform grid hash,
//! farthest point sampling, KNN, and PCA surface-variation curvature.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Positions with optional per-point attributes. All optional arrays, when
/// present, share the leading extent.
#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub normals: Option<Vec<[f64; 3]>>,
    /// Class indices; -1 marks unlabeled points.
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Point>) -> Self {
        PointCloud {
            positions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks attribute extents, unit normals, and label range.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let n = self.positions.len();
        let check = |len: usize, what: &'static str| {
            if len != n {
                Err(Error::shape(what, format!("{n}"), format!("{len}")))
            } else {
                Ok(())
            }
        };
        if let Some(c) = &self.colors {
            check(c.len(), "cloud colors")?;
        }
        if let Some(nm) = &self.normals {
            check(nm.len(), "cloud normals")?;
            for v in nm {
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::shape(
                        "cloud normals",
                        "unit length",
                        format!("{norm}"),
                    ));
                }
            }
        }
        if let Some(l) = &self.labels {
            check(l.len(), "cloud labels")?;
            if let Some(nc) = num_classes {
                for &lab in l {
                    if lab >= 0 && lab as usize >= nc {
                        return Err(Error::LabelOutOfRange {
                            label: lab as i64,
                            num_classes: nc,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Uniform-grid hash with cell size equal to the query radius; one cell ring
/// suffices per lookup. Built once, then read-only.
pub struct SpatialHash<'a> {
    cell: f64,
    points: &'a [Point],
    map: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Point], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        SpatialHash { cell, points, map }
    }

    fn key(p: &Point, cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Indices with distance strictly below `radius`, ascending.
    /// Requires `radius <= cell`.
    pub fn query(&self, q: &Point, radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell + 1e-12);
        let (kx, ky, kz) = Self::key(q, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cell) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in cell {
                            if dist2(&self.points[i as usize], q) < r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// A center with its radius neighbors in center-relative coordinates.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    /// Index of the zero-distance point when the center belongs to the cloud.
    pub center_index: Option<usize>,
    pub center: Point,
    pub neighbor_indices: Vec<usize>,
    pub relative_coords: Vec<Point>,
    pub radius: f64,
    /// True when indices were repeated to reach the requested size.
    pub padded: bool,
}

/// Index of the lexicographically smallest position; a permutation-stable
/// anchor for farthest point sampling inside the network blocks.
pub fn lexicographic_min_index(positions: &[Point]) -> usize {
    let mut best = 0usize;
    for (i, p) in positions.iter().enumerate().skip(1) {
        if p < &positions[best] {
            best = i;
        }
    }
    best
}

fn position_hash(p: &Point) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &c in p {
        h ^= c.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// For each query: every point within `rho`; a seeded uniform subset of
/// `n_max` (always retaining the zero-distance center) when more are found;
/// repetition-padding to `n_max` when fewer.
///
/// Candidate ordering, subset choice, and padding are all functions of the
/// point set and the query position (never of point indices), so outputs are
/// stable under input permutations.
pub fn radius_search(
    cloud: &PointCloud,
    queries: &[Point],
    rho: f64,
    n_max: usize,
    seed: u64,
) -> Result<Vec<Neighborhood>> {
    assert!(rho > 0.0, "radius must be positive");
    assert!(n_max >= 1, "n_max must be at least 1");
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let hash = SpatialHash::new(&cloud.positions, rho);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        // canonical candidate order: by distance, then by position
        let mut cand: Vec<(f64, Point, usize)> = hash
            .query(q, rho)
            .into_iter()
            .map(|i| (dist2(&cloud.positions[i], q), cloud.positions[i], i))
            .collect();
        cand.sort_unstable_by(|a, b| {
            (a.0, a.1).partial_cmp(&(b.0, b.1)).expect("finite coords")
        });
        let center_index = cand.first().filter(|c| c.0 == 0.0).map(|c| c.2);
        let mut idx: Vec<usize> = cand.iter().map(|c| c.2).collect();
        let mut padded = false;
        match idx.len().cmp(&n_max) {
            std::cmp::Ordering::Greater => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ position_hash(q));
                // the zero-distance center (canonical slot 0) always stays
                let keep_from = usize::from(center_index.is_some());
                let mut rest: Vec<usize> = idx.split_off(keep_from);
                rest.shuffle(&mut rng);
                rest.truncate(n_max - keep_from);
                idx.extend(rest);
            }
            std::cmp::Ordering::Less => {
                if !idx.is_empty() {
                    let base = idx.clone();
                    let mut j = 0usize;
                    while idx.len() < n_max {
                        idx.push(base[j % base.len()]);
                        j += 1;
                    }
                    padded = true;
                }
            }
            std::cmp::Ordering::Equal => {}
        }
        let relative_coords = idx
            .iter()
            .map(|&i| {
                let p = cloud.positions[i];
                [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
            })
            .collect();
        out.push(Neighborhood {
            center_index,
            center: *q,
            neighbor_indices: idx,
            relative_coords,
            radius: rho,
            padded,
        });
    }
    Ok(out)
}

/// Iterative farthest point sampling with the lowest-index tie rule.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    m: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if m == 0 || m > n {
        return Err(Error::TooManySamples {
            requested: m,
            available: n,
        });
    }
    assert!(start_index < n, "start_index within cloud");
    let pts = &cloud.positions;
    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    for _ in 1..m {
        let cp = pts[current];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&pts[i], &cp);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
        min_d2[current] = f64::NEG_INFINITY;
    }
    Ok(selected)
}

/// Per-query K nearest sources: ascending distance, ties by lowest index.
pub fn knn_search(
    sources: &[Point],
    queries: &[Point],
    k: usize,
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    if k > sources.len() {
        return Err(Error::TooFewSources {
            requested: k,
            available: sources.len(),
        });
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut scored: Vec<(f64, usize)> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| (dist2(s, q), i))
            .collect();
        scored.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let idx: Vec<usize> = scored[..k].iter().map(|&(_, i)| i).collect();
        let dist: Vec<f64> = scored[..k].iter().map(|&(d, _)| d.sqrt()).collect();
        out.push((idx, dist));
    }
    Ok(out)
}

/// Per-point surface variation sigma = lambda_min / (sum of eigenvalues),
/// in [0, 1/3]; zero on degenerate neighborhoods.
#[derive(Clone, Debug)]
pub struct CurvatureField {
    pub sigma: Vec<f64>,
    pub radius: f64,
}

pub fn estimate_curvature(cloud: &PointCloud, radius: f64) -> Result<CurvatureField> {
    assert!(radius > 0.0, "radius must be positive");
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let hash = SpatialHash::new(&cloud.positions, radius);
    let mut sigma = Vec::with_capacity(cloud.len());
    for p in &cloud.positions {
        let idx = hash.query(p, radius);
        if idx.len() < 4 {
            sigma.push(0.0);
            continue;
        }
        let k = idx.len() as f64;
        let mut mean = [0.0f64; 3];
        for &i in &idx {
            for a in 0..3 {
                mean[a] += cloud.positions[i][a];
            }
        }
        for m in mean.iter_mut() {
            *m /= k;
        }
        // symmetric covariance, upper triangle
        let mut c = [0.0f64; 6]; // xx, xy, xz, yy, yz, zz
        for &i in &idx {
            let d = [
                cloud.positions[i][0] - mean[0],
                cloud.positions[i][1] - mean[1],
                cloud.positions[i][2] - mean[2],
            ];
            c[0] += d[0] * d[0];
            c[1] += d[0] * d[1];
            c[2] += d[0] * d[2];
            c[3] += d[1] * d[1];
            c[4] += d[1] * d[2];
            c[5] += d[2] * d[2];
        }
        for v in c.iter_mut() {
            *v /= k;
        }
        let trace = c[0] + c[3] + c[5];
        if trace < 1e-12 {
            sigma.push(0.0);
            continue;
        }
        let eig = eigenvalues_sym3(&c);
        let s = (eig[0] / trace).clamp(0.0, 1.0 / 3.0);
        sigma.push(s);
    }
    Ok(CurvatureField { sigma, radius })
}

/// Eigenvalues of a symmetric 3x3 matrix given as [xx, xy, xz, yy, yz, zz],
/// ascending. Trigonometric closed form.
pub fn eigenvalues_sym3(c: &[f64; 6]) -> [f64; 3] {
    let (a11, a12, a13, a22, a23, a33) = (c[0], c[1], c[2], c[3], c[4], c[5]);
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    if p1 == 0.0 {
        let mut d = [a11, a22, a33];
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        return d;
    }
    let q = (a11 + a22 + a33) / 3.0;
    let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let inv_p = 1.0 / p;
    // B = (A - q I) / p
    let b11 = (a11 - q) * inv_p;
    let b22 = (a22 - q) * inv_p;
    let b33 = (a33 - q) * inv_p;
    let b12 = a12 * inv_p;
    let b13 = a13 * inv_p;
    let b23 = a23 * inv_p;
    let det_b = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13)
        + b13 * (b12 * b23 - b22 * b13);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let mut d = [e1, e2, e3];
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        PointCloud::from_positions(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0.0..extent),
                        rng.gen_range(0.0..extent),
                        rng.gen_range(0.0..extent),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn radius_search_single_point_self() {
        let cloud = PointCloud::from_positions(vec![[1.0, 2.0, 3.0]]);
        let nb = radius_search(&cloud, &[[1.0, 2.0, 3.0]], 0.5, 4, 0).unwrap();
        assert_eq!(nb[0].center_index, Some(0));
        assert!(nb[0].padded);
        assert_eq!(nb[0].neighbor_indices, vec![0, 0, 0, 0]);
        assert_eq!(nb[0].relative_coords[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn radius_search_unit_line() {
        let cloud =
            PointCloud::from_positions((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        let nb = radius_search(&cloud, &[[0.0, 0.0, 0.0]], 1.5, 16, 0).unwrap();
        let unique: std::collections::BTreeSet<usize> =
            nb[0].neighbor_indices.iter().copied().collect();
        assert_eq!(unique.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn radius_search_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cloud = rand_cloud(&mut rng, 1000, 4.0);
        let queries: Vec<Point> = (0..50)
            .map(|_| {
                [
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                ]
            })
            .collect();
        let rho = 0.4;
        // n_max large enough that no subsampling happens
        let nbs = radius_search(&cloud, &queries, rho, 2000, 7).unwrap();
        for (q, nb) in queries.iter().zip(&nbs) {
            let mut brute: Vec<usize> = (0..cloud.len())
                .filter(|&i| dist2(&cloud.positions[i], q) < rho * rho)
                .collect();
            brute.sort_unstable();
            let mut got: Vec<usize> = nb.neighbor_indices.clone();
            got.dedup();
            got.sort_unstable();
            got.dedup();
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn radius_search_respects_cap_and_keeps_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cloud = rand_cloud(&mut rng, 200, 0.5);
        cloud.positions[17] = [0.25, 0.25, 0.25];
        let nb = radius_search(&cloud, &[[0.25, 0.25, 0.25]], 0.6, 16, 9).unwrap();
        assert_eq!(nb[0].neighbor_indices.len(), 16);
        assert!(nb[0].neighbor_indices.contains(&17));
        assert_eq!(nb[0].center_index, Some(17));
        for rc in &nb[0].relative_coords {
            let n2 = rc[0] * rc[0] + rc[1] * rc[1] + rc[2] * rc[2];
            assert!(n2 < 0.36);
        }
    }

    #[test]
    fn radius_search_empty_cloud_errors() {
        let cloud = PointCloud::default();
        assert!(matches!(
            radius_search(&cloud, &[[0.0; 3]], 1.0, 4, 0),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn fps_collinear_tie_takes_lowest_index() {
        let cloud =
            PointCloud::from_positions((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        let idx = farthest_point_sample(&cloud, 3, 0).unwrap();
        assert_eq!(idx, vec![0, 9, 4]);
    }

    #[test]
    fn fps_unit_square_corners() {
        let cloud = PointCloud::from_positions(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let idx = farthest_point_sample(&cloud, 4, 0).unwrap();
        // (0,0) then (1,1); remaining corners tie -> lowest index 1; then 2.
        assert_eq!(idx, vec![0, 3, 1, 2]);
    }

    #[test]
    fn fps_full_sample_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = rand_cloud(&mut rng, 64, 1.0);
        let mut idx = farthest_point_sample(&cloud, 64, 7).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn fps_too_many_samples_errors() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3]]);
        assert!(matches!(
            farthest_point_sample(&cloud, 2, 0),
            Err(Error::TooManySamples { .. })
        ));
    }

    /// O(n^2) reference: recompute the min distance to the selected set from
    /// scratch at every iteration, strict-greater argmax for the tie rule.
    fn fps_oracle(pts: &[Point], m: usize, start: usize) -> Vec<usize> {
        let mut selected = vec![start];
        while selected.len() < m {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..pts.len() {
                if selected.contains(&i) {
                    continue;
                }
                let d = selected
                    .iter()
                    .map(|&s| dist2(&pts[i], &pts[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            selected.push(best);
        }
        selected
    }

    #[test]
    fn fps_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = rng.gen_range(2..=128);
            let cloud = rand_cloud(&mut rng, n, 2.0);
            let m = rng.gen_range(1..=n);
            let start = rng.gen_range(0..n);
            let got = farthest_point_sample(&cloud, m, start).unwrap();
            let want = fps_oracle(&cloud.positions, m, start);
            assert_eq!(got, want, "trial {trial} n={n} m={m} start={start}");
        }
    }

    #[test]
    fn knn_query_on_source_has_zero_first_distance() {
        let sources = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let res = knn_search(&sources, &[[0.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(res[0].0[0], 0);
        assert_eq!(res[0].1[0], 0.0);
    }

    #[test]
    fn knn_orders_by_distance() {
        let sources = vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let res = knn_search(&sources, &[[0.0; 3]], 2).unwrap();
        assert_eq!(res[0].0, vec![0, 1]);
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sources: Vec<Point> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let queries: Vec<Point> = (0..50)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let res = knn_search(&sources, &queries, 5).unwrap();
        for (q, (idx, dist)) in queries.iter().zip(&res) {
            let mut all: Vec<(f64, usize)> = sources
                .iter()
                .enumerate()
                .map(|(i, s)| (dist2(s, q), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..5].iter().map(|&(_, i)| i).collect();
            assert_eq!(idx, &want);
            for w in dist.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn knn_too_few_sources_errors() {
        assert!(matches!(
            knn_search(&[[0.0; 3]], &[[0.0; 3]], 2),
            Err(Error::TooFewSources { .. })
        ));
    }

    #[test]
    fn curvature_zero_on_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cloud = PointCloud::from_positions(
            (0..500)
                .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 0.0])
                .collect(),
        );
        let field = estimate_curvature(&cloud, 0.3).unwrap();
        for &s in &field.sigma {
            assert!(s < 1e-9, "plane sigma = {s}");
        }
    }

    #[test]
    fn curvature_zero_under_four_neighbors() {
        let cloud = PointCloud::from_positions(vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
        ]);
        let field = estimate_curvature(&cloud, 1.0).unwrap();
        assert!(field.sigma.iter().all(|&s| s == 0.0));
    }

    /// Jacobi rotation eigenvalue oracle for symmetric 3x3 matrices.
    fn jacobi_eigenvalues(c: &[f64; 6]) -> [f64; 3] {
        let mut a = [
            [c[0], c[1], c[2]],
            [c[1], c[3], c[4]],
            [c[2], c[4], c[5]],
        ];
        for _ in 0..100 {
            // largest off-diagonal element
            let (mut p, mut q, mut mx) = (0usize, 1usize, a[0][1].abs());
            for (i, j) in [(0usize, 2usize), (1, 2)] {
                if a[i][j].abs() > mx {
                    mx = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
            if mx < 1e-15 {
                break;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let cos = 1.0 / (t * t + 1.0).sqrt();
            let sin = t * cos;
            let mut b = a;
            for k in 0..3 {
                b[p][k] = cos * a[p][k] - sin * a[q][k];
                b[q][k] = sin * a[p][k] + cos * a[q][k];
            }
            let mut c2 = b;
            for k in 0..3 {
                c2[k][p] = cos * b[k][p] - sin * b[k][q];
                c2[k][q] = sin * b[k][p] + cos * b[k][q];
            }
            a = c2;
        }
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        d
    }

    #[test]
    fn curvature_on_right_angle_corner_matches_eigen_oracle() {
        // dense samples on two perpendicular half-planes meeting at x = 0
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut pts = Vec::new();
        for _ in 0..400 {
            let u = rng.gen_range(0.0..0.5);
            let v = rng.gen_range(0.0..0.5);
            pts.push([u, v, 0.0]);
            pts.push([0.0, rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)]);
            let _ = v;
        }
        let cloud = PointCloud::from_positions(pts);
        let radius = 0.2;
        let field = estimate_curvature(&cloud, radius).unwrap();
        let hash = SpatialHash::new(&cloud.positions, radius);
        for (pi, p) in cloud.positions.iter().enumerate().step_by(37) {
            let idx = hash.query(p, radius);
            if idx.len() < 4 {
                continue;
            }
            let k = idx.len() as f64;
            let mut mean = [0.0; 3];
            for &i in &idx {
                for a in 0..3 {
                    mean[a] += cloud.positions[i][a];
                }
            }
            for m in mean.iter_mut() {
                *m /= k;
            }
            let mut c = [0.0; 6];
            for &i in &idx {
                let d = [
                    cloud.positions[i][0] - mean[0],
                    cloud.positions[i][1] - mean[1],
                    cloud.positions[i][2] - mean[2],
                ];
                c[0] += d[0] * d[0];
                c[1] += d[0] * d[1];
                c[2] += d[0] * d[2];
                c[3] += d[1] * d[1];
                c[4] += d[1] * d[2];
                c[5] += d[2] * d[2];
            }
            for v in c.iter_mut() {
                *v /= k;
            }
            let eig = jacobi_eigenvalues(&c);
            let want = (eig[0] / (eig[0] + eig[1] + eig[2])).clamp(0.0, 1.0 / 3.0);
            assert!(
                (field.sigma[pi] - want).abs() < 1e-9,
                "point {pi}: got {}, want {want}",
                field.sigma[pi]
            );
        }
    }

    #[test]
    fn curvature_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts: Vec<Point> = (0..300)
            .map(|_| {
                // hemisphere patch: curved surface with nonzero sigma
                let theta = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                [
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                ]
            })
            .collect();
        let cloud = PointCloud::from_positions(pts.clone());
        let f1 = estimate_curvature(&cloud, 0.5).unwrap();

        let ang: f64 = 0.7;
        let (s, c) = ang.sin_cos();
        let rotated: Vec<Point> = pts
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect();
        let f2 = estimate_curvature(&PointCloud::from_positions(rotated), 0.5).unwrap();
        for (a, b) in f1.sigma.iter().zip(&f2.sigma) {
            assert!((a - b).abs() < 1e-9);
            assert!((0.0..=1.0 / 3.0).contains(a));
        }
    }
}
