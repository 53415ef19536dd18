//! The FPConv core: learn a projection-weight matrix from neighborhood
//! geometry, normalize it (dense softmax or two-step sparse), project point
//! features onto a grid plane, and convolve the plane down to a center
//! feature.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Neighborhood;
use crate::tensor::layers::{BatchNorm, Conv2d, Layer, NamedTensor, SharedMlp};
use crate::tensor::operators as op;
use crate::tensor::{Scalar, Tensor};

/// Which projection-weight normalization the pipeline applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Dense,
    Sparse,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "dense" => Ok(NormKind::Dense),
            "sparse" => Ok(NormKind::Sparse),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Dense => "dense",
            NormKind::Sparse => "sparse",
        }
    }
}

/// Normalization state carried by a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormState {
    Raw,
    Dense,
    Sparse,
    /// Explicitly opted out of normalization (ablation path).
    Passthrough,
}

/// The projection-weight matrix: `[B, N, L]` with `L = m_w * m_h`.
#[derive(Clone, Debug)]
pub struct ProjWeights<T: Scalar> {
    pub w: Tensor<T>,
    pub m_w: usize,
    pub m_h: usize,
    pub state: NormState,
}

impl<T: Scalar> ProjWeights<T> {
    /// Single-neighborhood matrix `[N, L]`.
    pub fn from_matrix(w: Tensor<T>, m_w: usize, m_h: usize) -> Result<Self> {
        let s = w.shape().to_vec();
        if s.len() != 2 || s[1] != m_w * m_h {
            return Err(Error::shape(
                "ProjWeights",
                format!("[N,{}]", m_w * m_h),
                format!("{s:?}"),
            ));
        }
        let w = op::reshape(&w, &[1, s[0], s[1]])?;
        Ok(ProjWeights {
            w,
            m_w,
            m_h,
            state: NormState::Raw,
        })
    }

    /// Batched weights `[B, N, L]`.
    pub fn batched(w: Tensor<T>, m_w: usize, m_h: usize) -> Result<Self> {
        let s = w.shape();
        if s.len() != 3 || s[2] != m_w * m_h {
            return Err(Error::shape(
                "ProjWeights",
                format!("[B,N,{}]", m_w * m_h),
                format!("{s:?}"),
            ));
        }
        Ok(ProjWeights {
            w,
            m_w,
            m_h,
            state: NormState::Raw,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.m_w * self.m_h
    }

    /// Single-neighborhood view `[N, L]`; panics if batched.
    pub fn matrix(&self) -> Result<Tensor<T>> {
        let s = self.w.shape().to_vec();
        assert_eq!(s[0], 1, "matrix() on batched weights");
        op::reshape(&self.w, &[s[1], s[2]])
    }

    /// Mark raw weights as intentionally unnormalized (the "w/o norm"
    /// ablation variant). Project accepts this state.
    pub fn assume_normalized(mut self) -> Self {
        self.state = NormState::Passthrough;
        self
    }
}

/// Column-wise softmax over the points: each pixel's received intensities
/// sum to one.
pub fn normalize_dense<T: Scalar>(pw: ProjWeights<T>) -> Result<ProjWeights<T>> {
    if pw.state != NormState::Raw {
        return Err(Error::AlreadyNormalized {
            tag: state_name(pw.state),
        });
    }
    let w = op::softmax(&pw.w, 1);
    Ok(ProjWeights {
        w,
        state: NormState::Dense,
        ..pw
    })
}

/// Two-step sparsity-preserving normalization: rows scaled by
/// `1/(||row|| + eps)`, then columns divided by `max(||col||, 1)`.
pub fn normalize_sparse<T: Scalar>(pw: ProjWeights<T>, eps: f64) -> Result<ProjWeights<T>> {
    if pw.state != NormState::Raw {
        return Err(Error::AlreadyNormalized {
            tag: state_name(pw.state),
        });
    }
    assert!(eps > 0.0, "sparse normalization needs a positive eps");
    let step1 = op::l2_normalize_last(&pw.w, eps);
    let w = op::l2_clamp_columns(&step1)?;
    Ok(ProjWeights {
        w,
        state: NormState::Sparse,
        ..pw
    })
}

fn state_name(s: NormState) -> &'static str {
    match s {
        NormState::Raw => "raw",
        NormState::Dense => "dense",
        NormState::Sparse => "sparse",
        NormState::Passthrough => "passthrough",
    }
}

/// The discretized feature plane produced by projection.
#[derive(Clone, Debug)]
pub struct GridPlane<T: Scalar> {
    /// `[B, m_w, m_h, C]`.
    pub plane: Tensor<T>,
    pub m_w: usize,
    pub m_h: usize,
}

/// `S(v_j) = sum_i w_ji F(q_i)` for every pixel, batched; differentiable
/// through both the weights and the features.
pub fn project_to_grid<T: Scalar>(pw: &ProjWeights<T>, f: &Tensor<T>) -> Result<GridPlane<T>> {
    if pw.state == NormState::Raw {
        return Err(Error::UnnormalizedWeights);
    }
    let feats = match f.shape().len() {
        2 => op::reshape(f, &[1, f.shape()[0], f.shape()[1]])?,
        3 => f.clone(),
        _ => {
            return Err(Error::shape(
                "project_to_grid",
                "[N,C] or [B,N,C]",
                format!("{:?}", f.shape()),
            ))
        }
    };
    let s = op::project_grid(&pw.w, &feats)?; // [B, L, C]
    let b = s.shape()[0];
    let c = s.shape()[2];
    let plane = op::reshape(&s, &[b, pw.m_w, pw.m_h, c])?;
    Ok(GridPlane {
        plane,
        m_w: pw.m_w,
        m_h: pw.m_h,
    })
}

/// Everything FPConv learns: the distribution-feature extractor, the weight
/// predictor, and the 2D convolution stack applied to the grid plane.
pub struct FPConvParams<T: Scalar> {
    pub dist_mlp: SharedMlp<T>,
    pub predictor: SharedMlp<T>,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub global_conv: Conv2d<T>,
    pub bn3: BatchNorm<T>,
    pub m_w: usize,
    pub m_h: usize,
    pub norm: NormKind,
    pub eps: f64,
    pub slope: f64,
}

/// Construction-time choices for one FPConv operator.
#[derive(Clone, Debug)]
pub struct FPConvCfg {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub plane: (usize, usize),
    pub norm: NormKind,
    pub d_g: usize,
    pub eps: f64,
    pub slope: f64,
}

impl FPConvCfg {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        FPConvCfg {
            c_in,
            c_mid: c_out,
            c_out,
            plane: (6, 6),
            norm: NormKind::Sparse,
            d_g: 64,
            eps: 1e-5,
            slope: 0.1,
        }
    }
}

impl<T: Scalar> FPConvParams<T> {
    pub fn new(cfg: &FPConvCfg, rng: &mut ChaCha8Rng) -> Self {
        let (m_w, m_h) = cfg.plane;
        let l = m_w * m_h;
        FPConvParams {
            dist_mlp: SharedMlp::new(&[3, 32, cfg.d_g], false, cfg.slope, rng),
            predictor: SharedMlp::new(&[3 + cfg.d_g, 64, l], true, cfg.slope, rng),
            conv1: Conv2d::new(3, cfg.c_in, cfg.c_mid, 1, rng),
            bn1: BatchNorm::new(cfg.c_mid),
            conv2: Conv2d::new(3, cfg.c_mid, cfg.c_mid, 1, rng),
            bn2: BatchNorm::new(cfg.c_mid),
            global_conv: Conv2d::new_rect(m_w, m_h, cfg.c_mid, cfg.c_out, 0, rng),
            bn3: BatchNorm::new(cfg.c_out),
            m_w,
            m_h,
            norm: cfg.norm,
            eps: cfg.eps,
            slope: cfg.slope,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.m_w * self.m_h
    }

    pub fn c_out(&self) -> usize {
        self.global_conv.kernel.shape()[3]
    }
}

impl<T: Scalar> Layer<T> for FPConvParams<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.dist_mlp.collect(&format!("{prefix}.dist"), out);
        self.predictor.collect(&format!("{prefix}.pred"), out);
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.cbn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.cbn2"), out);
        self.global_conv.collect(&format!("{prefix}.gconv"), out);
        self.bn3.collect(&format!("{prefix}.cbn3"), out);
    }
}

/// Permutation-invariant neighborhood descriptor: shared per-point MLP on
/// relative coordinates, max-pooled over the points.
///
/// Accepts `[K,3]` (returns `[D_g]`) or `[B,K,3]` (returns `[B,D_g]`).
pub fn distribution_feature<T: Scalar>(
    params: &FPConvParams<T>,
    rel: &Tensor<T>,
    train: bool,
) -> Result<Tensor<T>> {
    match rel.shape().len() {
        2 => {
            let b = op::reshape(rel, &[1, rel.shape()[0], rel.shape()[1]])?;
            let out = distribution_feature(params, &b, train)?;
            let d = out.shape()[1];
            op::reshape(&out, &[d])
        }
        3 => {
            let h = params.dist_mlp.forward(rel, train)?;
            Ok(op::max_axis(&h, 1).0)
        }
        _ => Err(Error::shape(
            "distribution_feature",
            "[K,3] or [B,K,3]",
            format!("{:?}", rel.shape()),
        )),
    }
}

/// Predict raw projection weights from coordinates and the distribution
/// feature. The weights are a function of point locations only; attached
/// point features never enter this branch.
pub fn predict_weights<T: Scalar>(
    params: &FPConvParams<T>,
    rel: &Tensor<T>,
    dist_feat: &Tensor<T>,
    train: bool,
) -> Result<ProjWeights<T>> {
    let (rel3, dist2) = match rel.shape().len() {
        2 => (
            op::reshape(rel, &[1, rel.shape()[0], rel.shape()[1]])?,
            op::reshape(dist_feat, &[1, dist_feat.numel()])?,
        ),
        3 => (rel.clone(), dist_feat.clone()),
        _ => {
            return Err(Error::shape(
                "predict_weights",
                "[N,3] or [B,N,3]",
                format!("{:?}", rel.shape()),
            ))
        }
    };
    let k = rel3.shape()[1];
    let ex = op::expand_axis1(&dist2, k)?;
    let cat = op::concat_last(&rel3, &ex)?;
    let w = params.predictor.forward(&cat, train)?;
    ProjWeights::batched(w, params.m_w, params.m_h)
}

fn apply_norm<T: Scalar>(params: &FPConvParams<T>, pw: ProjWeights<T>) -> Result<ProjWeights<T>> {
    match params.norm {
        NormKind::Dense => normalize_dense(pw),
        NormKind::Sparse => normalize_sparse(pw, params.eps),
        NormKind::None => Ok(pw.assume_normalized()),
    }
}

/// Batched FPConv over neighborhoods that were padded to a common size:
/// `rel [B,K,3]`, `feats [B,K,C_in]` -> `[B, C_out]`.
pub fn fpconv_batch<T: Scalar>(
    params: &FPConvParams<T>,
    rel: &Tensor<T>,
    feats: &Tensor<T>,
    train: bool,
) -> Result<Tensor<T>> {
    let (out, _) = fpconv_batch_with_weights(params, rel, feats, train)?;
    Ok(out)
}

/// Same as [`fpconv_batch`] but also returns the normalized projection
/// weights for inspection.
pub fn fpconv_batch_with_weights<T: Scalar>(
    params: &FPConvParams<T>,
    rel: &Tensor<T>,
    feats: &Tensor<T>,
    train: bool,
) -> Result<(Tensor<T>, ProjWeights<T>)> {
    let (sr, sf) = (rel.shape().to_vec(), feats.shape().to_vec());
    if sr.len() != 3 || sf.len() != 3 || sr[0] != sf[0] || sr[1] != sf[1] || sr[2] != 3 {
        return Err(Error::shape(
            "fpconv_batch",
            "[B,K,3] with [B,K,C]",
            format!("{sr:?} with {sf:?}"),
        ));
    }
    let dist = distribution_feature(params, rel, train)?;
    let pw = predict_weights(params, rel, &dist, train)?;
    let pw = apply_norm(params, pw)?;
    let grid = project_to_grid(&pw, feats)?;

    let x = params.conv1.forward(&grid.plane)?;
    let x = op::leaky_relu(&params.bn1.forward(&x, train)?, params.slope);
    let x = params.conv2.forward(&x)?;
    let x = op::leaky_relu(&params.bn2.forward(&x, train)?, params.slope);
    let x = params.global_conv.forward(&x)?; // [B,1,1,C_out]
    let x = op::leaky_relu(&params.bn3.forward(&x, train)?, params.slope);
    let b = x.shape()[0];
    let c = x.shape()[3];
    Ok((op::reshape(&x, &[b, c])?, pw))
}

/// FPConv on a single neighborhood: features `[N, C_in]` -> `[C_out]` at the
/// center point.
pub fn fpconv_forward<T: Scalar>(
    nbhd: &Neighborhood,
    feats: &Tensor<T>,
    params: &FPConvParams<T>,
    train: bool,
) -> Result<Tensor<T>> {
    let n = nbhd.relative_coords.len();
    if feats.shape().len() != 2 || feats.shape()[0] != n {
        return Err(Error::shape(
            "fpconv_forward",
            format!("[{n},C]"),
            format!("{:?}", feats.shape()),
        ));
    }
    let rel = rel_tensor::<T>(&nbhd.relative_coords);
    let rel = op::reshape(&rel, &[1, n, 3])?;
    let f = op::reshape(feats, &[1, n, feats.shape()[1]])?;
    let out = fpconv_batch(params, &rel, &f, train)?;
    let c = out.shape()[1];
    op::reshape(&out, &[c])
}

/// Relative coordinates as a constant tensor `[K, 3]`.
pub fn rel_tensor<T: Scalar>(coords: &[[f64; 3]]) -> Tensor<T> {
    let v: Vec<T> = coords
        .iter()
        .flat_map(|p| p.iter().map(|&x| T::from_f64(x)))
        .collect();
    Tensor::from_vec(&[coords.len(), 3], v).expect("coords shape")
}

/// Scalar-loop reference path: the explicit per-pixel double sum of the
/// convolution composed with the same nonlinear stack, in eval mode. Used as
/// the oracle for the fused matrix form and as the bench comparator.
pub mod naive {
    use super::*;

    pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut c = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = T::ZERO;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn linear_rows<T: Scalar>(x: &[T], rows: usize, lin: &crate::tensor::layers::Linear<T>) -> Vec<T> {
        let w = lin.w.values();
        let b = lin.b.values();
        let c_in = lin.w.shape()[0];
        let c_out = lin.w.shape()[1];
        let mut out = matmul(x, &w, rows, c_in, c_out);
        for r in 0..rows {
            for j in 0..c_out {
                out[r * c_out + j] += b[j];
            }
        }
        out
    }

    fn bn_eval_rows<T: Scalar>(x: &mut [T], rows: usize, bn: &BatchNorm<T>) {
        let g = bn.gamma.values();
        let bt = bn.beta.values();
        let rm = bn.running_mean.values();
        let rv = bn.running_var.values();
        let c = g.len();
        let eps = T::from_f64(bn.eps);
        for r in 0..rows {
            for j in 0..c {
                let s = T::ONE / (rv[j] + eps).sqrt();
                x[r * c + j] = (x[r * c + j] - rm[j]) * s * g[j] + bt[j];
            }
        }
    }

    fn leaky<T: Scalar>(x: &mut [T], slope: f64) {
        let s = T::from_f64(slope);
        for v in x.iter_mut() {
            if *v < T::ZERO {
                *v = *v * s;
            }
        }
    }

    fn mlp_eval_rows<T: Scalar>(x: &[T], rows: usize, mlp: &SharedMlp<T>) -> Vec<T> {
        let mut h = x.to_vec();
        for (lin, norm) in mlp.linears.iter().zip(&mlp.norms) {
            h = linear_rows(&h, rows, lin);
            if let Some(bn) = norm {
                bn_eval_rows(&mut h, rows, bn);
                leaky(&mut h, mlp.slope);
            }
        }
        h
    }

    /// Per-pixel double sum `S_j = sum_i w_ji F_i`.
    pub fn project<T: Scalar>(w: &[T], f: &[T], k: usize, l: usize, c: usize) -> Vec<T> {
        let mut s = vec![T::ZERO; l * c];
        for j in 0..l {
            for i in 0..k {
                let wij = w[i * l + j];
                for ci in 0..c {
                    s[j * c + ci] += wij * f[i * c + ci];
                }
            }
        }
        s
    }

    /// Direct-loop 2D cross-correlation on one `[H,W,C]` plane.
    pub fn conv2d<T: Scalar>(
        x: &[T],
        h: usize,
        w: usize,
        c_in: usize,
        kernel: &[T],
        k: usize,
        c_out: usize,
        pad: usize,
    ) -> Vec<T> {
        let oh = h + 2 * pad - k + 1;
        let ow = w + 2 * pad - k + 1;
        let mut out = vec![T::ZERO; oh * ow * c_out];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..c_out {
                    let mut s = T::ZERO;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                s += x[((iy as usize) * w + ix as usize) * c_in + ci]
                                    * kernel[((ky * k + kx) * c_in + ci) * c_out + co];
                            }
                        }
                    }
                    out[(oy * ow + ox) * c_out + co] = s;
                }
            }
        }
        out
    }

    pub fn normalize_dense<T: Scalar>(w: &mut [T], k: usize, l: usize) {
        for j in 0..l {
            let mut mx = w[j];
            for i in 1..k {
                if w[i * l + j] > mx {
                    mx = w[i * l + j];
                }
            }
            let mut sum = T::ZERO;
            for i in 0..k {
                sum += (w[i * l + j] - mx).exp();
            }
            for i in 0..k {
                w[i * l + j] = (w[i * l + j] - mx).exp() / sum;
            }
        }
    }

    pub fn normalize_sparse<T: Scalar>(w: &mut [T], k: usize, l: usize, eps: f64) {
        let e = T::from_f64(eps);
        for i in 0..k {
            let mut sq = T::ZERO;
            for j in 0..l {
                sq += w[i * l + j] * w[i * l + j];
            }
            let denom = sq.sqrt() + e;
            for j in 0..l {
                w[i * l + j] = w[i * l + j] / denom;
            }
        }
        for j in 0..l {
            let mut sq = T::ZERO;
            for i in 0..k {
                sq += w[i * l + j] * w[i * l + j];
            }
            let r = sq.sqrt();
            if r > T::ONE {
                for i in 0..k {
                    w[i * l + j] = w[i * l + j] / r;
                }
            }
        }
    }

    /// Full eval-mode FPConv on one neighborhood, every stage as explicit
    /// loops. `rel` is `[K,3]`, `feats` is `[K,C_in]`; returns `[C_out]`.
    pub fn forward<T: Scalar>(
        params: &FPConvParams<T>,
        rel: &[T],
        feats: &[T],
        k: usize,
        c_in: usize,
    ) -> Vec<T> {
        let l = params.plane_len();
        let d_g = params.dist_mlp.out_width();

        // distribution feature: per-point MLP + channel max
        let h = mlp_eval_rows(rel, k, &params.dist_mlp);
        let mut dist = vec![T::ZERO; d_g];
        for j in 0..d_g {
            let mut mx = h[j];
            for i in 1..k {
                if h[i * d_g + j] > mx {
                    mx = h[i * d_g + j];
                }
            }
            dist[j] = mx;
        }

        // concat [rel || dist] per point, predict raw weights
        let mut cat = vec![T::ZERO; k * (3 + d_g)];
        for i in 0..k {
            cat[i * (3 + d_g)..i * (3 + d_g) + 3].copy_from_slice(&rel[i * 3..i * 3 + 3]);
            cat[i * (3 + d_g) + 3..(i + 1) * (3 + d_g)].copy_from_slice(&dist);
        }
        let mut w = mlp_eval_rows(&cat, k, &params.predictor);

        match params.norm {
            NormKind::Dense => normalize_dense(&mut w, k, l),
            NormKind::Sparse => normalize_sparse(&mut w, k, l, params.eps),
            NormKind::None => {}
        }

        // per-pixel double sum, then the conv stack
        let plane = project(&w, feats, k, l, c_in);
        let (m_w, m_h) = (params.m_w, params.m_h);
        let c_mid = params.conv1.kernel.shape()[3];

        let mut x = conv2d(&plane, m_w, m_h, c_in, &params.conv1.kernel.values(), 3, c_mid, 1);
        add_bias(&mut x, &params.conv1.bias.values());
        bn_eval_rows(&mut x, m_w * m_h, &params.bn1);
        leaky(&mut x, params.slope);

        let mut x2 = conv2d(&x, m_w, m_h, c_mid, &params.conv2.kernel.values(), 3, c_mid, 1);
        add_bias(&mut x2, &params.conv2.bias.values());
        bn_eval_rows(&mut x2, m_w * m_h, &params.bn2);
        leaky(&mut x2, params.slope);

        // global convolution: one explicit sum over every pixel
        let c_out = params.c_out();
        let gk = params.global_conv.kernel.values();
        let mut out = vec![T::ZERO; c_out];
        for co in 0..c_out {
            let mut s = T::ZERO;
            for py in 0..m_w {
                for px in 0..m_h {
                    for ci in 0..c_mid {
                        s += x2[(py * m_h + px) * c_mid + ci]
                            * gk[((py * m_h + px) * c_mid + ci) * c_out + co];
                    }
                }
            }
            out[co] = s + params.global_conv.bias.values()[co];
        }
        bn_eval_rows(&mut out, 1, &params.bn3);
        leaky(&mut out, params.slope);
        out
    }

    fn add_bias<T: Scalar>(x: &mut [T], b: &[T]) {
        let c = b.len();
        for row in x.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}
