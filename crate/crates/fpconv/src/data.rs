//! Synthetic desk-scale data: labeled room scenes, primitive shape clouds,
//! ASCII point-cloud I/O with a train/test manifest, block sampling, and
//! train-time augmentation.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub const SCENE_CLASSES: [&str; 6] = ["floor", "ceiling", "wall", "table", "board", "clutter"];
pub const SHAPE_CLASSES: [&str; 6] = ["plane", "sphere", "cylinder", "corner", "saddle", "torus"];

/// Room recipe: extents plus the object inventory and coloring.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub extents: [f64; 3],
    pub n_boxes: usize,
    pub n_spheres: usize,
    pub n_boards: usize,
    pub color_noise: f64,
    pub points: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extents: [6.0, 6.0, 3.0],
            n_boxes: 3,
            n_spheres: 4,
            n_boards: 2,
            color_noise: 0.05,
            points: 20_000,
            seed: 0,
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.45, 0.35, 0.25], // floor
    [0.90, 0.90, 0.90], // ceiling
    [0.75, 0.70, 0.60], // wall
    [0.55, 0.30, 0.15], // table
    [0.20, 0.50, 0.30], // board
    [0.60, 0.20, 0.20], // clutter
];

enum Surface {
    /// origin + u*s + v*t for s,t in [0,1]
    Rect { origin: Point, u: Point, v: Point },
    Sphere { center: Point, radius: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Surface::Rect { u, v, .. } => {
                let cx = u[1] * v[2] - u[2] * v[1];
                let cy = u[2] * v[0] - u[0] * v[2];
                let cz = u[0] * v[1] - u[1] * v[0];
                (cx * cx + cy * cy + cz * cz).sqrt()
            }
            Surface::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match self {
            Surface::Rect { origin, u, v } => {
                let (s, t) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                [
                    origin[0] + u[0] * s + v[0] * t,
                    origin[1] + u[1] * s + v[1] * t,
                    origin[2] + u[2] * s + v[2] * t,
                ]
            }
            Surface::Sphere { center, radius } => {
                let d = gaussian3(rng);
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                [
                    center[0] + d[0] / n * radius,
                    center[1] + d[1] / n * radius,
                    center[2] + d[2] / n * radius,
                ]
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [gaussian(rng), gaussian(rng), gaussian(rng)]
}

fn rect(origin: Point, u: Point, v: Point) -> Surface {
    Surface::Rect { origin, u, v }
}

/// Deterministic labeled room: floor, ceiling, walls, box "tables", thin
/// wall-mounted "boards", and sphere "clutter", sampled uniformly by area.
pub fn generate_scene(spec: &SceneSpec) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [ex, ey, ez] = spec.extents;
    let mut prims: Vec<(Surface, usize)> = Vec::new();

    prims.push((rect([0., 0., 0.], [ex, 0., 0.], [0., ey, 0.]), 0));
    prims.push((rect([0., 0., ez], [ex, 0., 0.], [0., ey, 0.]), 1));
    for wall in [
        rect([0., 0., 0.], [ex, 0., 0.], [0., 0., ez]),
        rect([0., ey, 0.], [ex, 0., 0.], [0., 0., ez]),
        rect([0., 0., 0.], [0., ey, 0.], [0., 0., ez]),
        rect([ex, 0., 0.], [0., ey, 0.], [0., 0., ez]),
    ] {
        prims.push((wall, 2));
    }

    for _ in 0..spec.n_boxes {
        let sx = rng.gen_range(0.5..1.2);
        let sy = rng.gen_range(0.5..1.2);
        let h = rng.gen_range(0.4..0.9);
        let cx = rng.gen_range(0.8..ex - 0.8 - sx);
        let cy = rng.gen_range(0.8..ey - 0.8 - sy);
        // top face and four sides
        prims.push((rect([cx, cy, h], [sx, 0., 0.], [0., sy, 0.]), 3));
        prims.push((rect([cx, cy, 0.], [sx, 0., 0.], [0., 0., h]), 3));
        prims.push((rect([cx, cy + sy, 0.], [sx, 0., 0.], [0., 0., h]), 3));
        prims.push((rect([cx, cy, 0.], [0., sy, 0.], [0., 0., h]), 3));
        prims.push((rect([cx + sx, cy, 0.], [0., sy, 0.], [0., 0., h]), 3));
    }

    for _ in 0..spec.n_boards {
        let w = rng.gen_range(0.8..1.5);
        let h = rng.gen_range(0.6..1.0);
        let z0 = rng.gen_range(1.0..(ez - h).max(1.01));
        let off = 0.02;
        let along = rng.gen_range(0.3..ex - 0.3 - w);
        match rng.gen_range(0..4u32) {
            0 => prims.push((rect([along, off, z0], [w, 0., 0.], [0., 0., h]), 4)),
            1 => prims.push((rect([along, ey - off, z0], [w, 0., 0.], [0., 0., h]), 4)),
            2 => prims.push((rect([off, along, z0], [0., w, 0.], [0., 0., h]), 4)),
            _ => prims.push((rect([ex - off, along, z0], [0., w, 0.], [0., 0., h]), 4)),
        }
    }

    for _ in 0..spec.n_spheres {
        let r = rng.gen_range(0.1..0.25);
        let c = [
            rng.gen_range(0.5..ex - 0.5),
            rng.gen_range(0.5..ey - 0.5),
            rng.gen_range(r..1.2),
        ];
        prims.push((Surface::Sphere { center: c, radius: r }, 5));
    }

    let areas: Vec<f64> = prims.iter().map(|(s, _)| s.area()).collect();
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut total = 0.0;
    for a in &areas {
        total += a;
        cumulative.push(total);
    }

    let mut positions = Vec::with_capacity(spec.points);
    let mut colors = Vec::with_capacity(spec.points);
    let mut labels = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let draw = rng.gen_range(0.0..total);
        let pi = cumulative.partition_point(|&c| c <= draw).min(prims.len() - 1);
        let (surface, class) = &prims[pi];
        positions.push(surface.sample(&mut rng));
        let base = PALETTE[*class];
        colors.push([
            (base[0] + gaussian(&mut rng) * spec.color_noise).clamp(0.0, 1.0),
            (base[1] + gaussian(&mut rng) * spec.color_noise).clamp(0.0, 1.0),
            (base[2] + gaussian(&mut rng) * spec.color_noise).clamp(0.0, 1.0),
        ]);
        labels.push(*class as i32);
    }
    PointCloud {
        positions,
        colors: Some(colors),
        normals: None,
        labels: Some(labels),
    }
}

/// A fixed-size sample drawn from one xy block of a scene.
#[derive(Clone, Debug)]
pub struct BlockSample {
    pub origin: [f64; 2],
    pub extent: f64,
    pub indices: Vec<usize>,
    pub positions: Vec<Point>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<i32>,
    /// True when points were drawn with replacement to reach `n_points`.
    pub repeated: bool,
}

impl BlockSample {
    pub fn to_cloud(&self) -> PointCloud {
        PointCloud {
            positions: self.positions.clone(),
            colors: Some(self.colors.clone()),
            normals: None,
            labels: Some(self.labels.clone()),
        }
    }
}

fn cloud_bbox(cloud: &PointCloud) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Random block origin, then `n_points` drawn from the block's points:
/// without replacement when enough are available, with replacement (flagged)
/// otherwise.
pub fn sample_block(
    cloud: &PointCloud,
    block_extent: f64,
    n_points: usize,
    seed: u64,
) -> Result<BlockSample> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    assert!(block_extent > 0.0 && n_points > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cloud_bbox(cloud);

    let mut members: Vec<usize> = Vec::new();
    let mut origin = [lo[0], lo[1]];
    for attempt in 0..100 {
        origin = [
            pick_origin(&mut rng, lo[0], hi[0], block_extent),
            pick_origin(&mut rng, lo[1], hi[1], block_extent),
        ];
        if attempt == 99 {
            // center the block on a random point; guarantees membership
            let p = cloud.positions[rng.gen_range(0..cloud.len())];
            origin = [p[0] - block_extent / 2.0, p[1] - block_extent / 2.0];
        }
        members = (0..cloud.len())
            .filter(|&i| {
                let p = cloud.positions[i];
                p[0] >= origin[0]
                    && p[0] <= origin[0] + block_extent
                    && p[1] >= origin[1]
                    && p[1] <= origin[1] + block_extent
            })
            .collect();
        if !members.is_empty() {
            break;
        }
    }

    let (indices, repeated) = if members.len() >= n_points {
        let mut pool = members;
        for i in (1..pool.len()).rev() {
            pool.swap(i, rng.gen_range(0..=i));
        }
        pool.truncate(n_points);
        (pool, false)
    } else {
        let picks: Vec<usize> = (0..n_points)
            .map(|_| members[rng.gen_range(0..members.len())])
            .collect();
        (picks, true)
    };

    let positions: Vec<Point> = indices.iter().map(|&i| cloud.positions[i]).collect();
    let colors: Vec<[f64; 3]> = match &cloud.colors {
        Some(c) => indices.iter().map(|&i| c[i]).collect(),
        None => vec![[0.5; 3]; indices.len()],
    };
    let labels: Vec<i32> = match &cloud.labels {
        Some(l) => indices.iter().map(|&i| l[i]).collect(),
        None => vec![-1; indices.len()],
    };
    Ok(BlockSample {
        origin,
        extent: block_extent,
        indices,
        positions,
        colors,
        labels,
        repeated,
    })
}

fn pick_origin(rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: f64) -> f64 {
    let span = hi - lo;
    if span <= extent {
        lo
    } else {
        rng.gen_range(lo..hi - extent)
    }
}

/// The 9-channel block representation: xyz within the block, rgb, and the
/// location normalized to the room bounds (clamped into [0,1]).
pub fn block_features(
    positions: &[Point],
    colors: &[[f64; 3]],
    origin: [f64; 2],
    room_lo: Point,
    room_hi: Point,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * 9);
    for (p, c) in positions.iter().zip(colors) {
        out.push(p[0] - origin[0]);
        out.push(p[1] - origin[1]);
        out.push(p[2] - room_lo[2]);
        out.extend_from_slice(c);
        for a in 0..3 {
            let span = (room_hi[a] - room_lo[a]).max(1e-12);
            out.push(((p[a] - room_lo[a]) / span).clamp(0.0, 1.0));
        }
    }
    out
}

/// Uniform rotation about the z-axis through the cloud centroid, then
/// per-coordinate Gaussian jitter clipped to `±jitter_clip`.
pub fn augment(cloud: &PointCloud, seed: u64, jitter_sigma: f64, jitter_clip: f64) -> PointCloud {
    assert!(jitter_sigma > 0.0 && jitter_clip > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    let n = cloud.len().max(1) as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for v in centroid.iter_mut() {
        *v /= n;
    }

    let positions = cloud
        .positions
        .iter()
        .map(|p| {
            let x = p[0] - centroid[0];
            let y = p[1] - centroid[1];
            let rx = c * x - s * y + centroid[0];
            let ry = s * x + c * y + centroid[1];
            [
                rx + (gaussian(&mut rng) * jitter_sigma).clamp(-jitter_clip, jitter_clip),
                ry + (gaussian(&mut rng) * jitter_sigma).clamp(-jitter_clip, jitter_clip),
                p[2] + (gaussian(&mut rng) * jitter_sigma).clamp(-jitter_clip, jitter_clip),
            ]
        })
        .collect();
    let normals = cloud.normals.as_ref().map(|ns| {
        ns.iter()
            .map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])
            .collect()
    });
    PointCloud {
        positions,
        colors: cloud.colors.clone(),
        normals,
        labels: cloud.labels.clone(),
    }
}

/// One point per line: `x y z r g b label` at 9 significant digits, with
/// `#` comment lines. Label -1 marks unlabeled points.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.positions.iter().enumerate() {
        let c = cloud.colors.as_ref().map_or([0.5; 3], |c| c[i]);
        let l = cloud.labels.as_ref().map_or(-1, |l| l[i]);
        out.push_str(&format!(
            "{:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {}\n",
            p[0], p[1], p[2], c[0], c[1], c[2], l
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 7 {
            return Err(parse_err(format!("expected 7 fields, got {}", tokens.len())));
        }
        let mut nums = [0.0f64; 6];
        for (i, t) in tokens[..6].iter().enumerate() {
            nums[i] = t
                .parse()
                .map_err(|_| parse_err(format!("bad float {t:?}")))?;
        }
        let label: i32 = tokens[6]
            .parse()
            .map_err(|_| parse_err(format!("bad label {:?}", tokens[6])))?;
        positions.push([nums[0], nums[1], nums[2]]);
        colors.push([nums[3], nums[4], nums[5]]);
        labels.push(label);
    }
    Ok(PointCloud {
        positions,
        colors: Some(colors),
        normals: None,
        labels: Some(labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Manifest format: one `train <path>` or `test <path>` line per cloud,
/// paths relative to the manifest location.
pub fn load_manifest(path: &Path) -> Result<Vec<(Split, PathBuf)>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let (split, rest) = match trimmed.split_once(char::is_whitespace) {
            Some((s, r)) => (s, r.trim()),
            None => return Err(parse_err("expected `<split> <path>`".to_string())),
        };
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(parse_err(format!("unknown split marker {other:?}"))),
        };
        out.push((split, base.join(rest)));
    }
    Ok(out)
}

pub fn save_manifest(entries: &[(Split, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (split, rel) in entries {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push_str(&format!("{tag} {rel}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Labeled clouds over the six primitive classes, unit scale, with analytic
/// normals; each shape gets a random z-rotation and mild scale jitter.
pub fn generate_shape_dataset(
    n_per_class: usize,
    n_points: usize,
    seed: u64,
) -> Vec<(PointCloud, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * SHAPE_CLASSES.len());
    for class in 0..SHAPE_CLASSES.len() {
        for _ in 0..n_per_class {
            out.push((sample_shape(class, n_points, &mut rng), class));
        }
    }
    out
}

fn sample_shape(class: usize, n_points: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale = rng.gen_range(0.9..1.1);
    let (s, c) = angle.sin_cos();
    let mut positions = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (p, n) = match class {
            0 => {
                let p = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0];
                (p, [0.0, 0.0, 1.0])
            }
            1 => {
                let d = gaussian3(rng);
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                let n = [d[0] / norm, d[1] / norm, d[2] / norm];
                ([n[0] * 0.5, n[1] * 0.5, n[2] * 0.5], n)
            }
            2 => {
                let t = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = rng.gen_range(-0.5..0.5);
                ([0.3 * t.cos(), 0.3 * t.sin(), z], [t.cos(), t.sin(), 0.0])
            }
            3 => {
                let (u, v) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
                match rng.gen_range(0..3u32) {
                    0 => ([u - 0.3, v - 0.3, -0.3], [0.0, 0.0, 1.0]),
                    1 => ([u - 0.3, -0.3, v - 0.3], [0.0, 1.0, 0.0]),
                    _ => ([-0.3, u - 0.3, v - 0.3], [1.0, 0.0, 0.0]),
                }
            }
            4 => loop {
                let x: f64 = rng.gen_range(-0.5..0.5);
                let y: f64 = rng.gen_range(-0.5..0.5);
                let da = (1.0 + 4.0 * x * x + 4.0 * y * y).sqrt();
                if rng.gen_range(0.0..3.0f64.sqrt()) <= da {
                    let n = [-2.0 * x, 2.0 * y, 1.0];
                    let nn = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
                    break ([x, y, x * x - y * y], [n[0] / nn, n[1] / nn, n[2] / nn]);
                }
            },
            _ => {
                let (big_r, small_r) = (0.35, 0.15);
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                let theta = loop {
                    let t = rng.gen_range(0.0..std::f64::consts::TAU);
                    let w = (big_r + small_r * t.cos()) / (big_r + small_r);
                    if rng.gen_range(0.0..1.0) <= w {
                        break t;
                    }
                };
                let ring = big_r + small_r * theta.cos();
                (
                    [ring * phi.cos(), ring * phi.sin(), small_r * theta.sin()],
                    [
                        theta.cos() * phi.cos(),
                        theta.cos() * phi.sin(),
                        theta.sin(),
                    ],
                )
            }
        };
        positions.push([
            (c * p[0] - s * p[1]) * scale,
            (s * p[0] + c * p[1]) * scale,
            p[2] * scale,
        ]);
        normals.push([c * n[0] - s * n[1], s * n[0] + c * n[1], n[2]]);
    }
    PointCloud {
        positions,
        colors: None,
        normals: Some(normals),
        labels: None,
    }
}

/// Classification features: centered xyz plus the analytic normal.
pub fn shape_features(cloud: &PointCloud) -> Vec<f64> {
    let n = cloud.len().max(1) as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for v in centroid.iter_mut() {
        *v /= n;
    }
    let mut out = Vec::with_capacity(cloud.len() * 6);
    for (i, p) in cloud.positions.iter().enumerate() {
        out.push(p[0] - centroid[0]);
        out.push(p[1] - centroid[1]);
        out.push(p[2] - centroid[2]);
        let nrm = cloud.normals.as_ref().map_or([0.0; 3], |ns| ns[i]);
        out.extend_from_slice(&nrm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::estimate_curvature;

    #[test]
    fn scene_generation_is_deterministic() {
        let spec = SceneSpec {
            points: 2000,
            seed: 7,
            ..Default::default()
        };
        let a = generate_scene(&spec);
        let b = generate_scene(&spec);
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.colors, b.colors);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn floor_only_scene_is_flat_and_labeled_floor() {
        let spec = SceneSpec {
            n_boxes: 0,
            n_spheres: 0,
            n_boards: 0,
            extents: [4.0, 4.0, 2.5],
            points: 3000,
            seed: 1,
            ..Default::default()
        };
        let cloud = generate_scene(&spec);
        // keep floor points only (walls/ceiling still exist in the room)
        let floor: Vec<usize> = cloud
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 0)
            .map(|(i, _)| i)
            .collect();
        assert!(!floor.is_empty());
        for &i in &floor {
            assert_eq!(cloud.positions[i][2], 0.0);
        }
    }

    #[test]
    fn scene_planes_have_near_zero_curvature() {
        let spec = SceneSpec {
            n_boxes: 0,
            n_spheres: 0,
            n_boards: 0,
            extents: [4.0, 4.0, 2.5],
            points: 6000,
            seed: 2,
            ..Default::default()
        };
        let cloud = generate_scene(&spec);
        let field = estimate_curvature(&cloud, 0.25).unwrap();
        // points away from room edges sit on a single plane
        let labels = cloud.labels.as_ref().unwrap();
        let mut checked = 0;
        for (i, p) in cloud.positions.iter().enumerate() {
            if labels[i] == 0 && p[0] > 0.5 && p[0] < 3.5 && p[1] > 0.5 && p[1] < 3.5 {
                assert!(field.sigma[i] < 1e-6, "sigma {} at {:?}", field.sigma[i], p);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn block_sample_respects_bounds_and_padding() {
        let spec = SceneSpec {
            points: 5000,
            seed: 3,
            ..Default::default()
        };
        let cloud = generate_scene(&spec);
        let block = sample_block(&cloud, 2.0, 512, 11).unwrap();
        assert_eq!(block.positions.len(), 512);
        for p in &block.positions {
            assert!(p[0] >= block.origin[0] && p[0] <= block.origin[0] + 2.0);
            assert!(p[1] >= block.origin[1] && p[1] <= block.origin[1] + 2.0);
        }

        // tiny cloud: 10 points, ask 16 -> with replacement, >= 6 repeats
        let tiny = PointCloud::from_positions(
            (0..10).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect(),
        );
        let b = sample_block(&tiny, 1.0, 16, 0).unwrap();
        assert!(b.repeated);
        assert_eq!(b.positions.len(), 16);
        let unique: std::collections::BTreeSet<usize> = b.indices.iter().copied().collect();
        assert!(16 - unique.len() >= 6);
    }

    #[test]
    fn block_features_normalized_channels_in_unit_range() {
        let spec = SceneSpec {
            points: 4000,
            seed: 5,
            ..Default::default()
        };
        let cloud = generate_scene(&spec);
        let block = sample_block(&cloud, 2.0, 256, 1).unwrap();
        let (lo, hi) = cloud_bbox(&cloud);
        let feats = block_features(&block.positions, &block.colors, block.origin, lo, hi);
        for row in feats.chunks(9) {
            for &v in &row[6..9] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn augment_preserves_z_and_xy_distances() {
        let spec = SceneSpec {
            points: 500,
            seed: 6,
            ..Default::default()
        };
        let cloud = generate_scene(&spec);
        // isolate the rotation by making jitter negligible
        let rotated = augment(&cloud, 9, 1e-300, 1e-12);
        for (a, b) in cloud.positions.iter().zip(&rotated.positions) {
            assert!((a[2] - b[2]).abs() <= 1e-12);
        }
        for i in (0..400).step_by(37) {
            let (a1, a2) = (cloud.positions[i], cloud.positions[i + 1]);
            let (b1, b2) = (rotated.positions[i], rotated.positions[i + 1]);
            let da = ((a1[0] - a2[0]).powi(2) + (a1[1] - a2[1]).powi(2)).sqrt();
            let db = ((b1[0] - b2[0]).powi(2) + (b1[1] - b2[1]).powi(2)).sqrt();
            assert!((da - db).abs() <= 1e-9);
        }

        // jitter displacements obey the clip
        let jittered = augment(&cloud, 10, 0.5, 0.03);
        let re_rotated = augment(&cloud, 10, 1e-300, 1e-12);
        let _ = re_rotated;
        // rotation differs per seed; verify the clip via a zero-rotation
        // construction: rotate the same cloud twice with the same seed and
        // compare displacement magnitudes
        let base = augment(&cloud, 10, 1e-300, 1e-12);
        for (a, b) in base.positions.iter().zip(&jittered.positions) {
            for c in 0..3 {
                assert!(
                    (a[c] - b[c]).abs() <= 0.03 + 1e-12,
                    "jitter exceeded clip: {}",
                    (a[c] - b[c]).abs()
                );
            }
        }
    }

    #[test]
    fn cloud_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            points: 300,
            seed: 8,
            ..Default::default()
        };
        let cloud = generate_scene(&spec);
        let path = dir.path().join("scene.txt");
        save_cloud(&cloud, &path).unwrap();
        let loaded = load_cloud(&path).unwrap();
        assert_eq!(loaded.len(), cloud.len());
        for (a, b) in cloud.positions.iter().zip(&loaded.positions) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-6);
            }
        }
        assert_eq!(cloud.labels, loaded.labels);

        // single literal line
        let single = dir.path().join("one.txt");
        std::fs::write(&single, "# header\n0 0 0 0.5 0.5 0.5 2\n").unwrap();
        let one = load_cloud(&single).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.colors.as_ref().unwrap()[0], [0.5, 0.5, 0.5]);
        assert_eq!(one.labels.as_ref().unwrap()[0], 2);

        // malformed line is named
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "0 0 0 0.5 0.5 0.5 2\n1 2 three\n").unwrap();
        match load_cloud(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        save_manifest(
            &[
                (Split::Train, "a.txt".to_string()),
                (Split::Test, "b.txt".to_string()),
            ],
            &path,
        )
        .unwrap();
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, Split::Train);
        assert!(entries[1].1.ends_with("b.txt"));
    }

    #[test]
    fn shape_dataset_balance_and_geometry() {
        let shapes = generate_shape_dataset(3, 256, 4);
        assert_eq!(shapes.len(), 18);
        for class in 0..6 {
            assert_eq!(shapes.iter().filter(|(_, c)| *c == class).count(), 3);
        }
        // spheres: constant distance from centroid
        for (cloud, class) in &shapes {
            if *class != 1 {
                continue;
            }
            let r0 = (cloud.positions[0][0].powi(2)
                + cloud.positions[0][1].powi(2)
                + cloud.positions[0][2].powi(2))
            .sqrt();
            for p in &cloud.positions {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - r0).abs() < 1e-9);
            }
        }
        // planes: near-zero surface variation
        for (cloud, class) in &shapes {
            if *class != 0 {
                continue;
            }
            let field = estimate_curvature(cloud, 0.3).unwrap();
            for &s in &field.sigma {
                assert!(s < 1e-6);
            }
        }
        // normals are unit length
        for (cloud, _) in &shapes {
            cloud.validate(None).unwrap();
        }
    }

    #[test]
    fn shape_dataset_deterministic_under_seed() {
        let a = generate_shape_dataset(1, 64, 12);
        let b = generate_shape_dataset(1, 64, 12);
        for ((ca, _), (cb, _)) in a.iter().zip(&b) {
            assert_eq!(ca.positions, cb.positions);
        }
    }
}
