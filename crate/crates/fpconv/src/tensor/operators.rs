//! Differentiable tensor operations. Each op computes its forward result
//! eagerly and, when recording is active, attaches a closure that pushes the
//! output gradient into its parents.

use super::{gemm_strided, should_record, OpRecord, Scalar, Tensor};
use crate::error::{Error, Result};

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn record<T: Scalar>(
    parents: Vec<Tensor<T>>,
    backward: impl Fn(&[T]) + 'static,
) -> Option<OpRecord<T>> {
    Some(OpRecord {
        parents,
        backward: Box::new(backward),
    })
}

/// Matrix product of `a` (M x K) and `b` (K x N).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(
            "matmul",
            "[M,K] x [K,N]",
            format!("{sa:?} x {sb:?}"),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::ZERO; m * n];
    gemm_strided(
        m,
        k,
        n,
        T::ONE,
        &a.values(),
        k as isize,
        1,
        &b.values(),
        n as isize,
        1,
        T::ZERO,
        &mut out,
        n as isize,
        1,
    );
    let rec = if should_record(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        record(vec![a.clone(), b.clone()], move |g| {
            if a.requires_grad() {
                // dA = dC * B^T
                a.with_grad_buf(|da| {
                    gemm_strided(
                        m,
                        n,
                        k,
                        T::ONE,
                        g,
                        n as isize,
                        1,
                        &b.values(),
                        1,
                        n as isize,
                        T::ONE,
                        da,
                        k as isize,
                        1,
                    );
                });
            }
            if b.requires_grad() {
                // dB = A^T * dC
                b.with_grad_buf(|db| {
                    gemm_strided(
                        k,
                        m,
                        n,
                        T::ONE,
                        &a.values(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::ONE,
                        db,
                        n as isize,
                        1,
                    );
                });
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(vec![m, n], out, rec))
}

/// Affine map on the trailing axis: `x [.., C_in] -> [.., C_out]`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let sx = x.shape();
    let sw = w.shape();
    if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
        return Err(Error::shape(
            "linear",
            "[..,C_in] x [C_in,C_out]",
            format!("{sx:?} x {sw:?}"),
        ));
    }
    let c_in = sw[0];
    let c_out = sw[1];
    let m = x.numel() / c_in;
    let mut out = vec![T::ZERO; m * c_out];
    gemm_strided(
        m,
        c_in,
        c_out,
        T::ONE,
        &x.values(),
        c_in as isize,
        1,
        &w.values(),
        c_out as isize,
        1,
        T::ZERO,
        &mut out,
        c_out as isize,
        1,
    );
    if let Some(bias) = b {
        if bias.shape() != [c_out] {
            return Err(Error::shape(
                "linear",
                format!("bias [{c_out}]"),
                format!("{:?}", bias.shape()),
            ));
        }
        let bv = bias.values();
        for row in out.chunks_mut(c_out) {
            for (o, &bb) in row.iter_mut().zip(bv.iter()) {
                *o += bb;
            }
        }
    }
    let mut shape = sx.to_vec();
    *shape.last_mut().unwrap() = c_out;

    let mut parents: Vec<&Tensor<T>> = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    let rec = if should_record(&parents) {
        let (x, w, b) = (x.clone(), w.clone(), b.cloned());
        let mut par = vec![x.clone(), w.clone()];
        if let Some(bb) = &b {
            par.push(bb.clone());
        }
        record(par, move |g| {
            if x.requires_grad() {
                // dX = dY * W^T
                x.with_grad_buf(|dx| {
                    gemm_strided(
                        m,
                        c_out,
                        c_in,
                        T::ONE,
                        g,
                        c_out as isize,
                        1,
                        &w.values(),
                        1,
                        c_out as isize,
                        T::ONE,
                        dx,
                        c_in as isize,
                        1,
                    );
                });
            }
            if w.requires_grad() {
                // dW = X^T * dY
                w.with_grad_buf(|dw| {
                    gemm_strided(
                        c_in,
                        m,
                        c_out,
                        T::ONE,
                        &x.values(),
                        1,
                        c_in as isize,
                        g,
                        c_out as isize,
                        1,
                        T::ONE,
                        dw,
                        c_out as isize,
                        1,
                    );
                });
            }
            if let Some(bb) = &b {
                if bb.requires_grad() {
                    bb.with_grad_buf(|db| {
                        for row in g.chunks(c_out) {
                            for (d, &gg) in db.iter_mut().zip(row) {
                                *d += gg;
                            }
                        }
                    });
                }
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(shape, out, rec))
}

/// Unfold `kh x kw` patches of a padded `[B,H,W,C]` image into rows of
/// `[B*OH*OW, kh*kw*C]`, matching the kernel's `[kh,kw,ci]` flattening.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let cols = kh * kw * c;
    let mut col = vec![T::ZERO; batch * oh * ow * cols];
    let mut row = 0usize;
    for b in 0..batch {
        let xb = &x[b * h * w * c..(b + 1) * h * w * c];
        for out_y in 0..oh {
            for out_x in 0..ow {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for ky in 0..kh {
                    let iy = (out_y + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (out_x + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let d = (ky * kw + kx) * c;
                        dst[d..d + c].copy_from_slice(&xb[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// 2D cross-correlation. Input `[B,H,W,C_in]` (or `[H,W,C_in]`), kernel
/// `[kh,kw,C_in,C_out]`; output spatial extent `H + 2*padding - kh + 1` by
/// `W + 2*padding - kw + 1`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let sx = x.shape().to_vec();
    let sk = kernel.shape();
    let (batch, h, w, c_in, batched) = match sx.len() {
        3 => (1, sx[0], sx[1], sx[2], false),
        4 => (sx[0], sx[1], sx[2], sx[3], true),
        _ => {
            return Err(Error::shape(
                "conv2d",
                "[B,H,W,C] or [H,W,C]",
                format!("{sx:?}"),
            ))
        }
    };
    if sk.len() != 4 || sk[2] != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("[kh,kw,{c_in},C_out]"),
            format!("{sk:?}"),
        ));
    }
    let (kh, kw) = (sk[0], sk[1]);
    let c_out = sk[3];
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} <= padded extent"),
            format!("{h}x{w} + 2*{padding}"),
        ));
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;
    let rows = batch * oh * ow;
    let cols = kh * kw * c_in;

    let col = im2col(&x.values(), batch, h, w, c_in, kh, kw, padding, oh, ow);
    let mut out = vec![T::ZERO; rows * c_out];
    gemm_strided(
        rows,
        cols,
        c_out,
        T::ONE,
        &col,
        cols as isize,
        1,
        &kernel.values(),
        c_out as isize,
        1,
        T::ZERO,
        &mut out,
        c_out as isize,
        1,
    );

    let out_shape = if batched {
        vec![batch, oh, ow, c_out]
    } else {
        vec![oh, ow, c_out]
    };
    let rec = if should_record(&[x, kernel]) {
        let (x, kernel) = (x.clone(), kernel.clone());
        record(vec![x.clone(), kernel.clone()], move |g| {
            if kernel.requires_grad() {
                // dK = col^T * dOut
                kernel.with_grad_buf(|dk| {
                    gemm_strided(
                        cols,
                        rows,
                        c_out,
                        T::ONE,
                        &col,
                        1,
                        cols as isize,
                        g,
                        c_out as isize,
                        1,
                        T::ONE,
                        dk,
                        c_out as isize,
                        1,
                    );
                });
            }
            if x.requires_grad() {
                // dCol = dOut * K^T, then fold patches back (col2im).
                let mut dcol = vec![T::ZERO; rows * cols];
                gemm_strided(
                    rows,
                    c_out,
                    cols,
                    T::ONE,
                    g,
                    c_out as isize,
                    1,
                    &kernel.values(),
                    1,
                    c_out as isize,
                    T::ZERO,
                    &mut dcol,
                    cols as isize,
                    1,
                );
                x.with_grad_buf(|dx| {
                    let mut row = 0usize;
                    for b in 0..batch {
                        let dxb = &mut dx[b * h * w * c_in..(b + 1) * h * w * c_in];
                        for out_y in 0..oh {
                            for out_x in 0..ow {
                                let src = &dcol[row * cols..(row + 1) * cols];
                                for ky in 0..kh {
                                    let iy = (out_y + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (out_x + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let dst = (iy as usize * w + ix as usize) * c_in;
                                        let s = (ky * kw + kx) * c_in;
                                        for ci in 0..c_in {
                                            dxb[dst + ci] += src[s + ci];
                                        }
                                    }
                                }
                                row += 1;
                            }
                        }
                    }
                });
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(out_shape, out, rec))
}

/// Elementwise `max(x, slope * x)`; `slope` must lie in (0, 1).
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    assert!(slope > 0.0 && slope < 1.0, "leaky_relu slope in (0,1)");
    let s = T::from_f64(slope);
    let out: Vec<T> = x
        .values()
        .iter()
        .map(|&v| if v >= T::ZERO { v } else { v * s })
        .collect();
    let rec = if should_record(&[x]) {
        let x = x.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(x.values().iter()) {
                    *d += if v >= T::ZERO { gg } else { gg * s };
                }
            });
        })
    } else {
        None
    };
    Tensor::from_op(x.shape().to_vec(), out, rec)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    assert!(axis < x.shape().len(), "softmax axis out of range");
    let (outer, len, inner) = axis_dims(x.shape(), axis);
    let xv = x.values();
    let mut out = vec![T::ZERO; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = xv[base];
            for a in 1..len {
                let v = xv[base + a * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::ZERO;
            for a in 0..len {
                let e = (xv[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                out[base + a * inner] = out[base + a * inner] / sum;
            }
        }
    }
    drop(xv);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        let y = out.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for a in 0..len {
                            let idx = base + a * inner;
                            dot += g[idx] * y[idx];
                        }
                        for a in 0..len {
                            let idx = base + a * inner;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        })
    } else {
        None
    };
    Tensor::from_op(x.shape().to_vec(), out, rec)
}

/// Max reduction along `axis`. Gradient flows to the first occurrence of the
/// maximum in each lane. Returns the reduced tensor and flat argmax indices
/// (position along `axis` per output element).
pub fn max_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> (Tensor<T>, Vec<usize>) {
    assert!(axis < x.shape().len(), "max_axis axis out of range");
    let (outer, len, inner) = axis_dims(x.shape(), axis);
    assert!(len >= 1, "max_axis over empty axis");
    let xv = x.values();
    let mut out = vec![T::ZERO; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut best = xv[base];
            let mut best_a = 0usize;
            for a in 1..len {
                let v = xv[base + a * inner];
                if v > best {
                    best = v;
                    best_a = a;
                }
            }
            out[o * inner + i] = best;
            arg[o * inner + i] = best_a;
        }
    }
    drop(xv);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        let arg = arg.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let a = arg[o * inner + i];
                        dx[o * len * inner + a * inner + i] += g[o * inner + i];
                    }
                }
            });
        })
    } else {
        None
    };
    (Tensor::from_op(shape, out, rec), arg)
}

/// Per-channel max over the points axis of `[N,C]`.
pub fn max_reduce<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.shape().len() != 2 || x.shape()[0] == 0 {
        return Err(Error::shape("max_reduce", "[N,C], N >= 1", format!("{:?}", x.shape())));
    }
    Ok(max_axis(x, 0))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            "[B,C] with B labels",
            format!("{s:?} with {} labels", labels.len()),
        ));
    }
    let (m, c) = (s[0], s[1]);
    for &l in labels {
        if l >= c {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                num_classes: c,
            });
        }
    }
    let xv = logits.values();
    let mut probs = vec![T::ZERO; m * c];
    let mut loss = 0.0f64;
    for r in 0..m {
        let row = &xv[r * c..(r + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::ZERO;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            probs[r * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[r * c + j] = probs[r * c + j] / sum;
        }
        let lse = mx.to_f64() + sum.to_f64().ln();
        loss += lse - row[labels[r]].to_f64();
    }
    drop(xv);
    let loss = T::from_f64(loss / m as f64);
    let rec = if should_record(&[logits]) {
        let logits = logits.clone();
        let labels = labels.to_vec();
        let inv_m = T::from_f64(1.0 / m as f64);
        record(vec![logits.clone()], move |g| {
            let gs = g[0];
            logits.with_grad_buf(|dx| {
                for r in 0..m {
                    for j in 0..c {
                        let onehot = if labels[r] == j { T::ONE } else { T::ZERO };
                        dx[r * c + j] += gs * inv_m * (probs[r * c + j] - onehot);
                    }
                }
            });
        })
    } else {
        None
    };
    Ok(Tensor::from_op(vec![], vec![loss], rec))
}

/// Add a `[C]` bias to every trailing-axis lane of `x [.., C]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if b.shape() != [c] {
        return Err(Error::shape(
            "add_bias",
            format!("bias [{c}]"),
            format!("{:?}", b.shape()),
        ));
    }
    let bv = b.values();
    let out: Vec<T> = x
        .values()
        .chunks(c)
        .flat_map(|row| row.iter().zip(bv.iter()).map(|(&v, &bb)| v + bb))
        .collect();
    drop(bv);
    let rec = if should_record(&[x, b]) {
        let (x, b) = (x.clone(), b.clone());
        record(vec![x.clone(), b.clone()], move |g| {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.with_grad_buf(|db| {
                    for row in g.chunks(c) {
                        for (d, &gg) in db.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                });
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(x.shape().to_vec(), out, rec))
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let out: Vec<T> = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let rec = if should_record(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        record(vec![a.clone(), b.clone()], move |g| {
            for t in [&a, &b] {
                if t.requires_grad() {
                    t.accumulate_grad(g);
                }
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(a.shape().to_vec(), out, rec))
}

/// Multiply every element by a constant.
pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let cv = T::from_f64(c);
    let out: Vec<T> = x.values().iter().map(|&v| v * cv).collect();
    let rec = if should_record(&[x]) {
        let x = x.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for (d, &gg) in dx.iter_mut().zip(g) {
                    *d += gg * cv;
                }
            });
        })
    } else {
        None
    };
    Tensor::from_op(x.shape().to_vec(), out, rec)
}

/// Concatenate along the trailing axis; leading dims must agree.
pub fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::shape(
            "concat_last",
            format!("{sa:?}-compatible"),
            format!("{sb:?}"),
        ));
    }
    let ca = sa[sa.len() - 1];
    let cb = sb[sb.len() - 1];
    let rows = a.numel() / ca;
    let mut out = vec![T::ZERO; rows * (ca + cb)];
    {
        let (av, bv) = (a.values(), b.values());
        for r in 0..rows {
            out[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&av[r * ca..(r + 1) * ca]);
            out[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
    }
    let mut shape = sa.clone();
    *shape.last_mut().unwrap() = ca + cb;
    let rec = if should_record(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        record(vec![a.clone(), b.clone()], move |g| {
            if a.requires_grad() {
                a.with_grad_buf(|da| {
                    for r in 0..rows {
                        for j in 0..ca {
                            da[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
            }
            if b.requires_grad() {
                b.with_grad_buf(|db| {
                    for r in 0..rows {
                        for j in 0..cb {
                            db[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(shape, out, rec))
}

/// Repeat `[B,D]` along a new middle axis: output `[B,k,D]`.
pub fn expand_axis1<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("expand_axis1", "[B,D]", format!("{s:?}")));
    }
    let (b, d) = (s[0], s[1]);
    let xv = x.values();
    let mut out = vec![T::ZERO; b * k * d];
    for bi in 0..b {
        for j in 0..k {
            out[(bi * k + j) * d..(bi * k + j + 1) * d]
                .copy_from_slice(&xv[bi * d..(bi + 1) * d]);
        }
    }
    drop(xv);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for bi in 0..b {
                    for j in 0..k {
                        for di in 0..d {
                            dx[bi * d + di] += g[(bi * k + j) * d + di];
                        }
                    }
                }
            });
        })
    } else {
        None
    };
    Ok(Tensor::from_op(vec![b, k, d], out, rec))
}

/// Gather rows of `x [N,C]` by flat indices; output `lead ++ [C]` where
/// `prod(lead) == idx.len()`. Backward scatter-adds into `x`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize], lead: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("gather_rows", "[N,C]", format!("{s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if lead.iter().product::<usize>() != idx.len() {
        return Err(Error::shape(
            "gather_rows",
            format!("{} indices", lead.iter().product::<usize>()),
            format!("{}", idx.len()),
        ));
    }
    debug_assert!(idx.iter().all(|&i| i < n));
    let xv = x.values();
    let mut out = vec![T::ZERO; idx.len() * c];
    for (r, &i) in idx.iter().enumerate() {
        out[r * c..(r + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
    }
    drop(xv);
    let mut shape = lead.to_vec();
    shape.push(c);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        let idx = idx.to_vec();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[r * c + j];
                    }
                }
            });
        })
    } else {
        None
    };
    Ok(Tensor::from_op(shape, out, rec))
}

/// Weighted reduction over the middle axis: `out[b,c] = sum_k w[b,k] x[b,k,c]`
/// with constant weights.
pub fn weighted_sum_axis1<T: Scalar>(x: &Tensor<T>, w: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] * s[1] != w.len() {
        return Err(Error::shape(
            "weighted_sum_axis1",
            "[B,K,C] with B*K weights",
            format!("{s:?} with {} weights", w.len()),
        ));
    }
    let (b, k, c) = (s[0], s[1], s[2]);
    let xv = x.values();
    let mut out = vec![T::ZERO; b * c];
    for bi in 0..b {
        for ki in 0..k {
            let wv = w[bi * k + ki];
            let src = &xv[(bi * k + ki) * c..(bi * k + ki + 1) * c];
            let dst = &mut out[bi * c..(bi + 1) * c];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += wv * v;
            }
        }
    }
    drop(xv);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        let w = w.to_vec();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                for bi in 0..b {
                    for ki in 0..k {
                        let wv = w[bi * k + ki];
                        for ci in 0..c {
                            dx[(bi * k + ki) * c + ci] += wv * g[bi * c + ci];
                        }
                    }
                }
            });
        })
    } else {
        None
    };
    Ok(Tensor::from_op(vec![b, c], out, rec))
}

/// Same data under a new shape (element count preserved).
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{} elements", x.numel()),
            format!("{shape:?}"),
        ));
    }
    let out = x.to_vec();
    let rec = if should_record(&[x]) {
        let x = x.clone();
        record(vec![x.clone()], move |g| {
            x.accumulate_grad(g);
        })
    } else {
        None
    };
    Ok(Tensor::from_op(shape.to_vec(), out, rec))
}

/// Batched projection `out[b] = w[b]^T f[b]`: `[B,K,L] x [B,K,C] -> [B,L,C]`.
/// This is the fused matrix form of the per-pixel weighted sum.
pub fn project_grid<T: Scalar>(w: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let (sw, sf) = (w.shape(), f.shape());
    if sw.len() != 3 || sf.len() != 3 || sw[0] != sf[0] || sw[1] != sf[1] {
        return Err(Error::shape(
            "project_grid",
            "[B,K,L] with [B,K,C]",
            format!("{sw:?} with {sf:?}"),
        ));
    }
    let (b, k, l) = (sw[0], sw[1], sw[2]);
    let c = sf[2];
    let mut out = vec![T::ZERO; b * l * c];
    {
        let (wv, fv) = (w.values(), f.values());
        for bi in 0..b {
            gemm_strided(
                l,
                k,
                c,
                T::ONE,
                &wv[bi * k * l..(bi + 1) * k * l],
                1,
                l as isize,
                &fv[bi * k * c..(bi + 1) * k * c],
                c as isize,
                1,
                T::ZERO,
                &mut out[bi * l * c..(bi + 1) * l * c],
                c as isize,
                1,
            );
        }
    }
    let rec = if should_record(&[w, f]) {
        let (w, f) = (w.clone(), f.clone());
        record(vec![w.clone(), f.clone()], move |g| {
            if w.requires_grad() {
                // dW[b] = F[b] * dS[b]^T
                w.with_grad_buf(|dw| {
                    let fv = f.values();
                    for bi in 0..b {
                        gemm_strided(
                            k,
                            c,
                            l,
                            T::ONE,
                            &fv[bi * k * c..(bi + 1) * k * c],
                            c as isize,
                            1,
                            &g[bi * l * c..(bi + 1) * l * c],
                            1,
                            c as isize,
                            T::ONE,
                            &mut dw[bi * k * l..(bi + 1) * k * l],
                            l as isize,
                            1,
                        );
                    }
                });
            }
            if f.requires_grad() {
                // dF[b] = W[b] * dS[b]
                f.with_grad_buf(|df| {
                    let wv = w.values();
                    for bi in 0..b {
                        gemm_strided(
                            k,
                            l,
                            c,
                            T::ONE,
                            &wv[bi * k * l..(bi + 1) * k * l],
                            l as isize,
                            1,
                            &g[bi * l * c..(bi + 1) * l * c],
                            c as isize,
                            1,
                            T::ONE,
                            &mut df[bi * k * c..(bi + 1) * k * c],
                            c as isize,
                            1,
                        );
                    }
                });
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(vec![b, l, c], out, rec))
}

/// Scale every trailing-axis lane to `lane / (||lane||_2 + eps)`.
/// Zero lanes map to zero.
pub fn l2_normalize_last<T: Scalar>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    assert!(eps > 0.0, "l2_normalize_last eps > 0");
    let s = x.shape();
    let len = *s.last().expect("rank >= 1");
    let lanes = x.numel() / len;
    let e = T::from_f64(eps);
    let xv = x.values();
    let mut out = vec![T::ZERO; xv.len()];
    let mut norms = vec![T::ZERO; lanes];
    for li in 0..lanes {
        let lane = &xv[li * len..(li + 1) * len];
        let mut sq = T::ZERO;
        for &v in lane {
            sq += v * v;
        }
        let r = sq.sqrt();
        norms[li] = r;
        let a = T::ONE / (r + e);
        for (o, &v) in out[li * len..(li + 1) * len].iter_mut().zip(lane) {
            *o = v * a;
        }
    }
    drop(xv);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                let xv = x.values();
                for li in 0..lanes {
                    let r = norms[li];
                    let a = T::ONE / (r + e);
                    let lane = &xv[li * len..(li + 1) * len];
                    let gl = &g[li * len..(li + 1) * len];
                    let mut dot = T::ZERO;
                    for (&v, &gg) in lane.iter().zip(gl) {
                        dot += v * gg;
                    }
                    let coef = if r > T::ZERO {
                        dot * a * a / r
                    } else {
                        T::ZERO
                    };
                    for j in 0..len {
                        dx[li * len + j] += a * gl[j] - lane[j] * coef;
                    }
                }
            });
        })
    } else {
        None
    };
    Tensor::from_op(s.to_vec(), out, rec)
}

/// Divide each middle-axis column of `[B,K,L]` by `max(||column||_2, 1)`.
/// Columns at or below unit norm pass through untouched.
pub fn l2_clamp_columns<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("l2_clamp_columns", "[B,K,L]", format!("{s:?}")));
    }
    let (b, k, l) = (s[0], s[1], s[2]);
    let xv = x.values();
    let mut out = xv.clone();
    let mut norms = vec![T::ZERO; b * l];
    for bi in 0..b {
        for li in 0..l {
            let mut sq = T::ZERO;
            for ki in 0..k {
                let v = xv[(bi * k + ki) * l + li];
                sq += v * v;
            }
            let r = sq.sqrt();
            norms[bi * l + li] = r;
            if r > T::ONE {
                for ki in 0..k {
                    let idx = (bi * k + ki) * l + li;
                    out[idx] = out[idx] / r;
                }
            }
        }
    }
    drop(xv);
    let rec = if should_record(&[x]) {
        let x = x.clone();
        record(vec![x.clone()], move |g| {
            x.with_grad_buf(|dx| {
                let xv = x.values();
                for bi in 0..b {
                    for li in 0..l {
                        let r = norms[bi * l + li];
                        if r <= T::ONE {
                            for ki in 0..k {
                                let idx = (bi * k + ki) * l + li;
                                dx[idx] += g[idx];
                            }
                        } else {
                            let mut dot = T::ZERO;
                            for ki in 0..k {
                                let idx = (bi * k + ki) * l + li;
                                dot += xv[idx] * g[idx];
                            }
                            let r3 = r * r * r;
                            for ki in 0..k {
                                let idx = (bi * k + ki) * l + li;
                                dx[idx] += g[idx] / r - xv[idx] * dot / r3;
                            }
                        }
                    }
                }
            });
        })
    } else {
        None
    };
    Ok(Tensor::from_op(s.to_vec(), out, rec))
}

/// Batch-norm mode and constants.
#[derive(Clone, Copy, Debug)]
pub struct BnCfg {
    pub eps: f64,
    pub decay: f64,
    pub train: bool,
}

impl Default for BnCfg {
    fn default() -> Self {
        BnCfg {
            eps: 1e-5,
            decay: 0.9,
            train: true,
        }
    }
}

/// Normalize the trailing channel axis. Train mode uses batch statistics and
/// updates the running buffers in place (decay-weighted); eval mode applies
/// the running statistics as a fixed affine map.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    cfg: BnCfg,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let c = *s.last().ok_or_else(|| {
        Error::shape("batch_norm", "[..,C]", "rank 0".to_string())
    })?;
    let m = x.numel() / c;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("gamma/beta [{c}]"),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    if m == 0 {
        return Err(Error::shape("batch_norm", "B >= 1", "empty batch".to_string()));
    }

    let (mean, var) = if cfg.train {
        let xv = x.values();
        let mut mean = vec![T::ZERO; c];
        for row in xv.chunks(c) {
            for (mu, &v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        let inv_m = T::from_f64(1.0 / m as f64);
        for mu in mean.iter_mut() {
            *mu = *mu * inv_m;
        }
        let mut var = vec![T::ZERO; c];
        for row in xv.chunks(c) {
            for ((vv, &v), &mu) in var.iter_mut().zip(row).zip(mean.iter()) {
                let d = v - mu;
                *vv += d * d;
            }
        }
        for vv in var.iter_mut() {
            *vv = *vv * inv_m;
        }
        drop(xv);
        // decay-weighted running update
        let d = T::from_f64(cfg.decay);
        let omd = T::from_f64(1.0 - cfg.decay);
        {
            let mut rm = running_mean.values_mut();
            let mut rv = running_var.values_mut();
            for i in 0..c {
                rm[i] = rm[i] * d + mean[i] * omd;
                rv[i] = rv[i] * d + var[i] * omd;
            }
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let eps = T::from_f64(cfg.eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let xv = x.values();
    let gv = gamma.values();
    let bv = beta.values();
    let mut xhat = vec![T::ZERO; xv.len()];
    let mut out = vec![T::ZERO; xv.len()];
    for r in 0..m {
        for j in 0..c {
            let h = (xv[r * c + j] - mean[j]) * inv_std[j];
            xhat[r * c + j] = h;
            out[r * c + j] = gv[j] * h + bv[j];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);

    let rec = if should_record(&[x, gamma, beta]) {
        let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
        let train = cfg.train;
        record(vec![x.clone(), gamma.clone(), beta.clone()], move |g| {
            let gv = gamma.values();
            if gamma.requires_grad() {
                gamma.with_grad_buf(|dg| {
                    for r in 0..m {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
            }
            if beta.requires_grad() {
                beta.with_grad_buf(|db| {
                    for r in 0..m {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                });
            }
            if x.requires_grad() {
                x.with_grad_buf(|dx| {
                    if train {
                        // dx = gamma/s * (g - mean(g) - xhat * mean(g*xhat))
                        let inv_m = T::from_f64(1.0 / m as f64);
                        for j in 0..c {
                            let mut g_mean = T::ZERO;
                            let mut gh_mean = T::ZERO;
                            for r in 0..m {
                                g_mean += g[r * c + j];
                                gh_mean += g[r * c + j] * xhat[r * c + j];
                            }
                            g_mean = g_mean * inv_m;
                            gh_mean = gh_mean * inv_m;
                            let a = gv[j] * inv_std[j];
                            for r in 0..m {
                                dx[r * c + j] +=
                                    a * (g[r * c + j] - g_mean - xhat[r * c + j] * gh_mean);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..c {
                                dx[r * c + j] += g[r * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
        })
    } else {
        None
    };
    Ok(Tensor::from_op(s.to_vec(), out, rec))
}

/// Row-wise argmax of `[M,C]` values (not differentiable).
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let s = x.shape();
    assert_eq!(s.len(), 2);
    let c = s[1];
    x.values()
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
