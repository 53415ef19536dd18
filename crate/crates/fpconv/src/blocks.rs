//! Network building blocks: the residual FPConv block (with optional FPS
//! downsampling), local max pooling, KNN feature upsampling, a point-MLP
//! baseline convolution, and the parallel two-branch fusion block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flatten::{fpconv_batch, rel_tensor, FPConvCfg, FPConvParams, NormKind};
use crate::geometry::{
    farthest_point_sample, knn_search, radius_search, Neighborhood, Point, PointCloud,
};
use crate::tensor::layers::{BatchNorm, Layer, Linear, NamedTensor, SharedMlp};
use crate::tensor::operators as op;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    FPConv,
    PointMlp,
    Parallel,
}

impl ConvKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fpconv" => Ok(ConvKind::FPConv),
            "pointmlp" => Ok(ConvKind::PointMlp),
            "parallel" => Ok(ConvKind::Parallel),
            other => Err(Error::Config(format!("unknown conv kind {other:?}"))),
        }
    }
}

/// Shape and sampling choices for one block.
#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub d_in: usize,
    pub d_mid: usize,
    pub d_out: usize,
    pub radius: f64,
    pub n_max: usize,
    /// Keep-ratio in (0,1]; None disables downsampling.
    pub downsample: Option<f64>,
    pub kind: ConvKind,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_mid == 0 || self.d_out == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        if let Some(r) = self.downsample {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("downsample ratio {r} not in (0,1]")));
            }
        }
        if self.radius <= 0.0 {
            return Err(Error::Config("block radius must be positive".into()));
        }
        Ok(())
    }
}

/// Shared per-point MLP on `[rel_coord || feature]` followed by channel max;
/// the volumetric-style fusion partner.
pub struct PointMlpParams<T: Scalar> {
    pub mlp: SharedMlp<T>,
}

impl<T: Scalar> PointMlpParams<T> {
    pub fn new(c_in: usize, c_out: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        PointMlpParams {
            mlp: SharedMlp::new(&[3 + c_in, c_out, c_out], false, slope, rng),
        }
    }

    pub fn c_out(&self) -> usize {
        self.mlp.out_width()
    }
}

impl<T: Scalar> Layer<T> for PointMlpParams<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }
}

/// Batched point-MLP convolution: `rel [B,K,3]`, `feats [B,K,C]` -> `[B,C_out]`.
pub fn pointmlp_batch<T: Scalar>(
    params: &PointMlpParams<T>,
    rel: &Tensor<T>,
    feats: &Tensor<T>,
    train: bool,
) -> Result<Tensor<T>> {
    let cat = op::concat_last(rel, feats)?;
    let h = params.mlp.forward(&cat, train)?;
    Ok(op::max_axis(&h, 1).0)
}

/// Single-neighborhood point-MLP convolution.
pub fn pointmlp_conv<T: Scalar>(
    nbhd: &Neighborhood,
    feats: &Tensor<T>,
    params: &PointMlpParams<T>,
    train: bool,
) -> Result<Tensor<T>> {
    let n = nbhd.relative_coords.len();
    if feats.shape().len() != 2 || feats.shape()[0] != n {
        return Err(Error::shape(
            "pointmlp_conv",
            format!("[{n},C]"),
            format!("{:?}", feats.shape()),
        ));
    }
    let rel = op::reshape(&rel_tensor::<T>(&nbhd.relative_coords), &[1, n, 3])?;
    let f = op::reshape(feats, &[1, n, feats.shape()[1]])?;
    let out = pointmlp_batch(params, &rel, &f, train)?;
    op::reshape(&out, &[out.shape()[1]])
}

/// Flattened neighbor indices and relative coordinates of a batch of
/// equally-sized neighborhoods.
pub struct NeighborBatch<T: Scalar> {
    pub rel: Tensor<T>,
    pub flat_indices: Vec<usize>,
    pub b: usize,
    pub k: usize,
}

pub fn batch_neighborhoods<T: Scalar>(nbhds: &[Neighborhood]) -> Result<NeighborBatch<T>> {
    let b = nbhds.len();
    if b == 0 {
        return Err(Error::EmptyCloud);
    }
    let k = nbhds[0].neighbor_indices.len();
    let mut flat_indices = Vec::with_capacity(b * k);
    let mut coords = Vec::with_capacity(b * k);
    for nb in nbhds {
        if nb.neighbor_indices.len() != k || nb.neighbor_indices.is_empty() {
            return Err(Error::shape(
                "batch_neighborhoods",
                format!("{k} neighbors"),
                format!("{}", nb.neighbor_indices.len()),
            ));
        }
        flat_indices.extend_from_slice(&nb.neighbor_indices);
        coords.extend_from_slice(&nb.relative_coords);
    }
    let rel = op::reshape(&rel_tensor::<T>(&coords), &[b, k, 3])?;
    Ok(NeighborBatch {
        rel,
        flat_indices,
        b,
        k,
    })
}

/// FPConv evaluated at sampled centers with neighbors searched over the full
/// cloud.
#[allow(clippy::too_many_arguments)]
pub fn fpconv_with_fps<T: Scalar>(
    cloud: &PointCloud,
    features: &Tensor<T>,
    center_indices: &[usize],
    params: &FPConvParams<T>,
    radius: f64,
    n_max: usize,
    seed: u64,
    train: bool,
) -> Result<Tensor<T>> {
    let centers: Vec<Point> = center_indices.iter().map(|&i| cloud.positions[i]).collect();
    let nbhds = radius_search(cloud, &centers, radius, n_max, seed)?;
    let nb = batch_neighborhoods::<T>(&nbhds)?;
    let gathered = op::gather_rows(features, &nb.flat_indices, &[nb.b, nb.k])?;
    fpconv_batch(params, &nb.rel, &gathered, train)
}

/// Channel-wise max over each center's radius neighborhood.
pub fn local_max_pool<T: Scalar>(
    cloud: &PointCloud,
    features: &Tensor<T>,
    centers: &[Point],
    radius: f64,
    n_max: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    assert!(radius > 0.0, "pooling radius must be positive");
    let nbhds = radius_search(cloud, centers, radius, n_max, seed)?;
    let nb = batch_neighborhoods::<T>(&nbhds)?;
    let gathered = op::gather_rows(features, &nb.flat_indices, &[nb.b, nb.k])?;
    Ok(op::max_axis(&gathered, 1).0)
}

/// Inverse-distance KNN interpolation of source features at target points.
/// A target within 1e-10 of a source copies that source's feature exactly.
pub fn knn_upsample<T: Scalar>(
    source_points: &[Point],
    source_features: &Tensor<T>,
    target_points: &[Point],
    k: usize,
) -> Result<Tensor<T>> {
    let results = knn_search(source_points, target_points, k)?;
    let mut idx = Vec::with_capacity(target_points.len() * k);
    let mut weights: Vec<T> = Vec::with_capacity(target_points.len() * k);
    for (indices, dists) in &results {
        idx.extend_from_slice(indices);
        if let Some(hit) = dists.iter().position(|&d| d < 1e-10) {
            for j in 0..k {
                weights.push(if j == hit { T::ONE } else { T::ZERO });
            }
        } else {
            let inv: Vec<f64> = dists.iter().map(|&d| 1.0 / d).collect();
            let total: f64 = inv.iter().sum();
            for w in &inv {
                weights.push(T::from_f64(w / total));
            }
        }
    }
    let gathered = op::gather_rows(source_features, &idx, &[target_points.len(), k])?;
    op::weighted_sum_axis1(&gathered, &weights)
}

/// The two-conv parallel branch inside a fusion block.
pub struct ParallelConv<T: Scalar> {
    pub fp: FPConvParams<T>,
    pub pm: PointMlpParams<T>,
    /// Fuses the concatenated branch outputs back to the block width.
    pub fuse: SharedMlp<T>,
}

/// Convolution choice inside a residual block.
pub enum BlockConv<T: Scalar> {
    Fp(FPConvParams<T>),
    PointMlp(PointMlpParams<T>),
    Parallel(ParallelConv<T>),
}

impl<T: Scalar> BlockConv<T> {
    fn forward(
        &self,
        rel: &Tensor<T>,
        feats: &Tensor<T>,
        train: bool,
    ) -> Result<Tensor<T>> {
        match self {
            BlockConv::Fp(p) => fpconv_batch(p, rel, feats, train),
            BlockConv::PointMlp(p) => pointmlp_batch(p, rel, feats, train),
            BlockConv::Parallel(p) => {
                let a = fpconv_batch(&p.fp, rel, feats, train)?;
                let b = pointmlp_batch(&p.pm, rel, feats, train)?;
                let cat = op::concat_last(&a, &b)?;
                p.fuse.forward(&cat, train)
            }
        }
    }
}

impl<T: Scalar> Layer<T> for BlockConv<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        match self {
            BlockConv::Fp(p) => p.collect(&format!("{prefix}.fp"), out),
            BlockConv::PointMlp(p) => p.collect(&format!("{prefix}.pm"), out),
            BlockConv::Parallel(p) => {
                p.fp.collect(&format!("{prefix}.fp"), out);
                p.pm.collect(&format!("{prefix}.pm"), out);
                p.fuse.collect(&format!("{prefix}.fuse"), out);
            }
        }
    }
}

/// Bottleneck residual block: shared MLP down to `d_mid`, a point
/// convolution at `d_mid`, shared MLP up to `d_out`, added to a shortcut.
/// Downsampling blocks select centers by FPS; their shortcut max-pools the
/// input features at the new centers.
pub struct ResidualBlock<T: Scalar> {
    pub spec: BlockSpec,
    pub mlp1: SharedMlp<T>,
    pub conv: BlockConv<T>,
    pub mlp2: SharedMlp<T>,
    pub shortcut: Option<(Linear<T>, BatchNorm<T>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        spec: BlockSpec,
        plane: (usize, usize),
        norm: NormKind,
        d_g: usize,
        eps: f64,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut fp_cfg = FPConvCfg::new(spec.d_mid, spec.d_mid);
        fp_cfg.plane = plane;
        fp_cfg.norm = norm;
        fp_cfg.d_g = d_g;
        fp_cfg.eps = eps;
        fp_cfg.slope = slope;
        let conv = match spec.kind {
            ConvKind::FPConv => BlockConv::Fp(FPConvParams::new(&fp_cfg, rng)),
            ConvKind::PointMlp => {
                BlockConv::PointMlp(PointMlpParams::new(spec.d_mid, spec.d_mid, slope, rng))
            }
            ConvKind::Parallel => BlockConv::Parallel(ParallelConv {
                fp: FPConvParams::new(&fp_cfg, rng),
                pm: PointMlpParams::new(spec.d_mid, spec.d_mid, slope, rng),
                fuse: SharedMlp::new(&[2 * spec.d_mid, spec.d_mid], false, slope, rng),
            }),
        };
        let shortcut = if spec.d_in != spec.d_out {
            Some((
                Linear::new(spec.d_in, spec.d_out, rng),
                BatchNorm::new(spec.d_out),
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            mlp1: SharedMlp::new(&[spec.d_in, spec.d_mid], false, slope, rng),
            conv,
            mlp2: SharedMlp::new(&[spec.d_mid, spec.d_out], false, slope, rng),
            shortcut,
            spec,
        })
    }

    /// Returns the (possibly downsampled) positions and output features.
    pub fn forward(
        &self,
        positions: &[Point],
        features: &Tensor<T>,
        train: bool,
        seed: u64,
    ) -> Result<(Vec<Point>, Tensor<T>)> {
        let n = positions.len();
        if features.shape() != [n, self.spec.d_in] {
            return Err(Error::shape(
                "residual_block",
                format!("[{n},{}]", self.spec.d_in),
                format!("{:?}", features.shape()),
            ));
        }
        let cloud = PointCloud::from_positions(positions.to_vec());

        let h = self.mlp1.forward(features, train)?;

        let center_indices: Vec<usize> = match self.spec.downsample {
            Some(ratio) => {
                let m = ((n as f64 * ratio).round() as usize).clamp(1, n);
                // anchor FPS at a permutation-stable point so the sampled
                // set depends on the cloud, not on input ordering
                let start = crate::geometry::lexicographic_min_index(positions);
                farthest_point_sample(&cloud, m, start)?
            }
            None => (0..n).collect(),
        };
        let centers: Vec<Point> = center_indices.iter().map(|&i| positions[i]).collect();

        let nbhds = radius_search(&cloud, &centers, self.spec.radius, self.spec.n_max, seed)?;
        let nb = batch_neighborhoods::<T>(&nbhds)?;
        let gathered = op::gather_rows(&h, &nb.flat_indices, &[nb.b, nb.k])?;
        let conv_out = self.conv.forward(&nb.rel, &gathered, train)?;
        let branch = self.mlp2.forward(&conv_out, train)?;

        let shortcut_in = if self.spec.downsample.is_some() {
            local_max_pool(
                &cloud,
                features,
                &centers,
                self.spec.radius,
                self.spec.n_max,
                seed,
            )?
        } else {
            features.clone()
        };
        let shortcut = match &self.shortcut {
            Some((lin, bn)) => {
                let s = lin.forward(&shortcut_in)?;
                bn.forward(&s, train)?
            }
            None => shortcut_in,
        };
        Ok((centers, op::add(&branch, &shortcut)?))
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.mlp1.collect(&format!("{prefix}.mlp1"), out);
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.mlp2.collect(&format!("{prefix}.mlp2"), out);
        if let Some((lin, bn)) = &self.shortcut {
            lin.collect(&format!("{prefix}.sc"), out);
            bn.collect(&format!("{prefix}.scbn"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatten::fpconv_forward;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::no_grad;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rand_positions(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                ]
            })
            .collect()
    }

    fn rand_feats(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
        let v: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::param(&[n, c], v).unwrap()
    }

    fn spec(d_in: usize, d_out: usize, kind: ConvKind, downsample: Option<f64>) -> BlockSpec {
        BlockSpec {
            d_in,
            d_mid: d_out.max(2) / 2,
            d_out,
            radius: 0.8,
            n_max: 8,
            downsample,
            kind,
        }
    }

    fn block(
        s: BlockSpec,
        seed: u64,
    ) -> ResidualBlock<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ResidualBlock::new(s, (4, 4), NormKind::Sparse, 8, 1e-5, 0.1, &mut rng).unwrap()
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let blk = block(spec(4, 4, ConvKind::FPConv, None), 1);
        blk.mlp2.zero_last_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = rand_positions(&mut rng, 12, 1.0);
        let feats = rand_feats(&mut rng, 12, 4);
        let (out_pts, out) = blk.forward(&pts, &feats, true, 0).unwrap();
        assert_eq!(out_pts.len(), 12);
        assert_eq!(out.to_vec(), feats.to_vec());
    }

    #[test]
    fn downsample_quarter_keeps_subset_of_positions() {
        let blk = block(spec(4, 8, ConvKind::FPConv, Some(0.25)), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = rand_positions(&mut rng, 64, 2.0);
        let feats = rand_feats(&mut rng, 64, 4);
        let (out_pts, out) = blk.forward(&pts, &feats, true, 0).unwrap();
        assert_eq!(out_pts.len(), 16);
        assert_eq!(out.shape(), &[16, 8]);
        for p in &out_pts {
            assert!(pts.contains(p), "downsampled position not in input");
        }
    }

    #[test]
    fn block_gradcheck() {
        let blk = block(spec(3, 4, ConvKind::FPConv, None), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut named = Vec::new();
        blk.collect("blk", &mut named);
        for e in &named {
            if e.trainable {
                for v in e.tensor.values_mut().iter_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
        }
        let pts = rand_positions(&mut rng, 6, 0.8);
        let feats = rand_feats(&mut rng, 6, 3);
        let mut inputs = vec![feats];
        for e in &named {
            if e.trainable {
                inputs.push(e.tensor.clone());
            }
        }
        let pts2 = pts.clone();
        let rep = grad_check(
            |ins| {
                let (_, y) = blk.forward(&pts2, &ins[0], true, 0)?;
                let n = y.numel();
                let coefs: Vec<f64> =
                    (0..n).map(|i| ((i * 29 + 7) % 17) as f64 / 17.0 - 0.4).collect();
                let w = Tensor::from_vec(&[n, 1], coefs).unwrap();
                op::reshape(&op::matmul(&op::reshape(&y, &[1, n])?, &w)?, &[])
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max_rel_err = {}", rep.max_rel_err);
    }

    #[test]
    fn fpconv_with_fps_all_centers_equals_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = FPConvCfg::new(3, 4);
        cfg.d_g = 8;
        cfg.plane = (4, 4);
        let params = FPConvParams::<f64>::new(&cfg, &mut rng);
        let pts = rand_positions(&mut rng, 10, 0.9);
        let cloud = PointCloud::from_positions(pts.clone());
        let feats = rand_feats(&mut rng, 10, 3);
        let centers: Vec<usize> = (0..10).collect();
        let batched = no_grad(|| {
            fpconv_with_fps(&cloud, &feats, &centers, &params, 0.7, 6, 42, false)
        })
        .unwrap();

        let nbhds = radius_search(&cloud, &pts, 0.7, 6, 42).unwrap();
        for (i, nb) in nbhds.iter().enumerate() {
            let local = op::gather_rows(
                &feats,
                &nb.neighbor_indices,
                &[nb.neighbor_indices.len()],
            )
            .unwrap();
            let single = no_grad(|| fpconv_forward(nb, &local, &params, false)).unwrap();
            for (a, b) in single
                .values()
                .iter()
                .zip(batched.values()[i * 4..(i + 1) * 4].iter())
            {
                assert!((a - b).abs() < 1e-12, "center {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fpconv_with_fps_isolated_center_uses_padded_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cfg = FPConvCfg::new(2, 3);
        cfg.d_g = 8;
        cfg.plane = (4, 4);
        let params = FPConvParams::<f64>::new(&cfg, &mut rng);
        let mut pts = rand_positions(&mut rng, 6, 0.5);
        pts.push([50.0, 50.0, 50.0]); // far away from everything
        let cloud = PointCloud::from_positions(pts);
        let feats = rand_feats(&mut rng, 7, 2);
        let out =
            no_grad(|| fpconv_with_fps(&cloud, &feats, &[6], &params, 0.4, 4, 0, false)).unwrap();

        let nb = radius_search(&cloud, &[[50.0, 50.0, 50.0]], 0.4, 4, 0)
            .unwrap()
            .remove(0);
        assert!(nb.padded);
        assert!(nb.neighbor_indices.iter().all(|&i| i == 6));
        let local = op::gather_rows(&feats, &nb.neighbor_indices, &[4]).unwrap();
        let single = no_grad(|| fpconv_forward(&nb, &local, &params, false)).unwrap();
        for (a, b) in single.values().iter().zip(out.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_max_pool_examples() {
        // two points near the center with features [1,5] and [3,2]
        let cloud = PointCloud::from_positions(vec![[0.0; 3], [0.1, 0.0, 0.0]]);
        let feats = Tensor::from_vec(&[2, 2], vec![1., 5., 3., 2.]).unwrap();
        let out = local_max_pool(&cloud, &feats, &[[0.05, 0.0, 0.0]], 0.2, 4, 0).unwrap();
        assert_eq!(out.to_vec(), vec![3., 5.]);

        // a single neighbor passes through unchanged
        let out = local_max_pool(&cloud, &feats, &[[0.1, 0.0, 0.0]], 0.05, 4, 0).unwrap();
        assert_eq!(out.to_vec(), vec![3., 2.]);
    }

    #[test]
    fn local_max_pool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = rand_positions(&mut rng, 50, 1.0);
        let cloud = PointCloud::from_positions(pts.clone());
        let feats = rand_feats(&mut rng, 50, 3);
        let centers = rand_positions(&mut rng, 5, 1.0);
        let r = 0.5;
        let out = local_max_pool(&cloud, &feats, &centers, r, 64, 0).unwrap();
        let fv = feats.values();
        for (ci, c) in centers.iter().enumerate() {
            let members: Vec<usize> = (0..50)
                .filter(|&i| crate::geometry::dist2(&pts[i], c) < r * r)
                .collect();
            if members.is_empty() {
                continue;
            }
            for ch in 0..3 {
                let want = members
                    .iter()
                    .map(|&i| fv[i * 3 + ch])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((out.values()[ci * 3 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_upsample_copies_coincident_source() {
        let sources = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let feats = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let out = knn_upsample(&sources, &feats, &[[1.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(out.to_vec(), vec![3., 4.]);
    }

    #[test]
    fn knn_upsample_averages_equidistant_pair() {
        let sources = vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let feats = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let out = knn_upsample(&sources, &feats, &[[0.0; 3]], 2).unwrap();
        assert!((out.values()[0] - 2.0).abs() < 1e-12);
        assert!((out.values()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_upsample_matches_formula_oracle_and_weights_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sources = rand_positions(&mut rng, 20, 1.0);
        let feats = rand_feats(&mut rng, 20, 2);
        let targets = rand_positions(&mut rng, 7, 1.0);
        let k = 3;
        let out = knn_upsample(&sources, &feats, &targets, k).unwrap();
        let res = knn_search(&sources, &targets, k).unwrap();
        let fv = feats.values();
        for (t, (idx, dists)) in res.iter().enumerate() {
            let inv: Vec<f64> = dists.iter().map(|&d| 1.0 / d).collect();
            let total: f64 = inv.iter().sum();
            let weights: Vec<f64> = inv.iter().map(|w| w / total).collect();
            assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for ch in 0..2 {
                let want: f64 = idx
                    .iter()
                    .zip(&weights)
                    .map(|(&i, w)| fv[i * 2 + ch] * w)
                    .sum();
                assert!((out.values()[t * 2 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointmlp_permutation_invariant_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = PointMlpParams::<f64>::new(3, 4, 0.1, &mut rng);
        let pts = rand_positions(&mut rng, 8, 0.5);
        let cloud = PointCloud::from_positions(pts.clone());
        let nb = radius_search(&cloud, &[pts[0]], 1.5, 8, 0).unwrap().remove(0);
        let feats = rand_feats(&mut rng, 8, 3);
        let local = op::gather_rows(&feats, &nb.neighbor_indices, &[8]).unwrap();
        let base = no_grad(|| pointmlp_conv(&nb, &local, &params, false)).unwrap();

        let mut nb2 = nb.clone();
        nb2.relative_coords.reverse();
        nb2.neighbor_indices.reverse();
        let local2 = op::gather_rows(&feats, &nb2.neighbor_indices, &[8]).unwrap();
        let out2 = no_grad(|| pointmlp_conv(&nb2, &local2, &params, false)).unwrap();
        for (a, b) in base.values().iter().zip(out2.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }

        // zero all weights: output must be zero
        let mut named = Vec::new();
        params.collect("pm", &mut named);
        for e in &named {
            if e.trainable && e.name.contains(".w") || e.name.contains(".b") {
                for v in e.tensor.values_mut().iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let zero = no_grad(|| pointmlp_conv(&nb, &local, &params, false)).unwrap();
        assert!(zero.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointmlp_matches_recomputation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = PointMlpParams::<f64>::new(2, 3, 0.1, &mut rng);
        let coords = rand_positions(&mut rng, 5, 0.4);
        let cloud = PointCloud::from_positions(coords.clone());
        let nb = radius_search(&cloud, &[coords[0]], 2.0, 5, 0).unwrap().remove(0);
        let feats = rand_feats(&mut rng, 5, 2);
        let local = op::gather_rows(&feats, &nb.neighbor_indices, &[5]).unwrap();
        let got = no_grad(|| pointmlp_conv(&nb, &local, &params, false)).unwrap();

        // direct recomputation: per-point MLP rows, then channel max
        let cat_rows: Vec<f64> = nb
            .relative_coords
            .iter()
            .zip(local.values().chunks(2))
            .flat_map(|(rc, f)| {
                let mut row = rc.to_vec();
                row.extend_from_slice(f);
                row
            })
            .collect();
        let cat = Tensor::from_vec(&[5, 5], cat_rows).unwrap();
        let rows = no_grad(|| params.mlp.forward(&cat, false)).unwrap();
        let rv = rows.values();
        for ch in 0..3 {
            let want = (0..5).map(|i| rv[i * 3 + ch]).fold(f64::NEG_INFINITY, f64::max);
            assert!((got.values()[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_block_zero_branches_identity_and_width() {
        let blk = block(spec(4, 4, ConvKind::Parallel, None), 13);
        blk.mlp2.zero_last_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = rand_positions(&mut rng, 10, 0.8);
        let feats = rand_feats(&mut rng, 10, 4);
        let (_, out) = blk.forward(&pts, &feats, true, 0).unwrap();
        assert_eq!(out.to_vec(), feats.to_vec());

        // concatenated width ahead of the fusion MLP is C_a + C_b
        if let BlockConv::Parallel(p) = &blk.conv {
            assert_eq!(
                p.fuse.linears[0].w.shape()[0],
                p.fp.c_out() + p.pm.c_out()
            );
        } else {
            panic!("expected parallel conv");
        }
    }

    #[test]
    fn parallel_block_gradcheck_reaches_both_branches() {
        let blk = block(spec(3, 4, ConvKind::Parallel, None), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut named = Vec::new();
        blk.collect("blk", &mut named);
        for e in &named {
            if e.trainable {
                for v in e.tensor.values_mut().iter_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
        }
        let pts = rand_positions(&mut rng, 5, 0.6);
        let feats = rand_feats(&mut rng, 5, 3);
        let mut inputs = vec![feats];
        for e in &named {
            if e.trainable {
                inputs.push(e.tensor.clone());
            }
        }
        let pts2 = pts.clone();
        let rep = grad_check(
            |ins| {
                let (_, y) = blk.forward(&pts2, &ins[0], true, 0)?;
                let n = y.numel();
                let coefs: Vec<f64> =
                    (0..n).map(|i| ((i * 23 + 5) % 13) as f64 / 13.0 - 0.4).collect();
                let w = Tensor::from_vec(&[n, 1], coefs).unwrap();
                op::reshape(&op::matmul(&op::reshape(&y, &[1, n])?, &w)?, &[])
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max_rel_err = {}", rep.max_rel_err);
    }
}
