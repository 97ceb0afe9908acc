//! Differentiable tensor operations.
//!
//! Every function appends one node to the tape and returns its [`Var`].
//! Layout convention for feature maps is NCHW. Gradient closures read
//! parent values back from the graph instead of cloning them; only
//! auxiliary forward state (im2col buffers, argmax indices) is captured.

use ndarray::{concatenate, s, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, Ix4};

use super::graph::{Graph, Var};

/// Reshapes an owned array, copying only if it is not contiguous.
pub fn reshape_std(a: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let a = if a.is_standard_layout() { a } else { a.as_standard_layout().to_owned() };
    a.into_shape_with_order(shape)
        .expect("reshape: element count mismatch")
}

fn to2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Var {
    let val = g.val(a) + g.val(b);
    g.push(val, vec![a.0, b.0], Some(Box::new(|_, grad| vec![grad.clone(), grad.clone()])))
}

pub fn sub(g: &mut Graph, a: Var, b: Var) -> Var {
    let val = g.val(a) - g.val(b);
    g.push(
        val,
        vec![a.0, b.0],
        Some(Box::new(|_, grad| vec![grad.clone(), grad.mapv(|v| -v)])),
    )
}

pub fn mul_scalar(g: &mut Graph, a: Var, c: f64) -> Var {
    let val = g.val(a).mapv(|v| v * c);
    g.push(val, vec![a.0], Some(Box::new(move |_, grad| vec![grad.mapv(|v| v * c)])))
}

pub fn square(g: &mut Graph, a: Var) -> Var {
    let val = g.val(a).mapv(|v| v * v);
    let a_id = a.0;
    g.push(
        val,
        vec![a.0],
        Some(Box::new(move |gr, grad| vec![grad * &gr.val(Var(a_id)).mapv(|v| 2.0 * v)])),
    )
}

pub fn sum_all(g: &mut Graph, a: Var) -> Var {
    let val = ArrayD::from_elem(ndarray::IxDyn(&[]), g.val(a).sum());
    let shape = g.val(a).raw_dim();
    g.push(
        val,
        vec![a.0],
        Some(Box::new(move |_, grad| {
            let s = *grad.iter().next().unwrap();
            vec![ArrayD::from_elem(shape.clone(), s)]
        })),
    )
}

pub fn mean_all(g: &mut Graph, a: Var) -> Var {
    let n = g.val(a).len() as f64;
    let s = sum_all(g, a);
    mul_scalar(g, s, 1.0 / n)
}

/// Elementwise `max(x, alpha * x)`; `alpha = 0` gives plain ReLU.
pub fn leaky_relu(g: &mut Graph, a: Var, alpha: f64) -> Var {
    let val = g.val(a).mapv(|v| if v > 0.0 { v } else { alpha * v });
    let a_id = a.0;
    g.push(
        val,
        vec![a.0],
        Some(Box::new(move |gr, grad| {
            let x = gr.val(Var(a_id));
            let mut gx = grad.clone();
            ndarray::Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                if xv <= 0.0 {
                    *gv *= alpha;
                }
            });
            vec![gx]
        })),
    )
}

pub fn relu(g: &mut Graph, a: Var) -> Var {
    leaky_relu(g, a, 0.0)
}

/// `a [n, k] . b [k, m] -> [n, m]`.
pub fn matmul(g: &mut Graph, a: Var, b: Var) -> Var {
    let val = to2(g.val(a)).dot(&to2(g.val(b))).into_dyn();
    let (a_id, b_id) = (a.0, b.0);
    g.push(
        val,
        vec![a.0, b.0],
        Some(Box::new(move |gr, grad| {
            let gy = to2(grad);
            let av = to2(gr.val(Var(a_id)));
            let bv = to2(gr.val(Var(b_id)));
            vec![gy.dot(&bv.t()).into_dyn(), av.t().dot(&gy).into_dyn()]
        })),
    )
}

/// Adds a `[m]` bias row-wise to a `[n, m]` matrix.
pub fn add_row_bias(g: &mut Graph, a: Var, b: Var) -> Var {
    let bv = g.val(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias rank");
    let val = (&to2(g.val(a)) + &bv).into_dyn();
    g.push(
        val,
        vec![a.0, b.0],
        Some(Box::new(|_, grad| {
            let gy = to2(grad);
            vec![grad.clone(), gy.sum_axis(Axis(0)).into_dyn()]
        })),
    )
}

/// Concatenates two `[n, *]` matrices along the feature axis.
pub fn concat_cols(g: &mut Graph, a: Var, b: Var) -> Var {
    let av = to2(g.val(a));
    let bv = to2(g.val(b));
    let val = concatenate(Axis(1), &[av, bv]).expect("concat shapes").into_dyn();
    let split = av.ncols();
    g.push(
        val,
        vec![a.0, b.0],
        Some(Box::new(move |_, grad| {
            let gy = to2(grad);
            vec![
                gy.slice(s![.., ..split]).to_owned().into_dyn(),
                gy.slice(s![.., split..]).to_owned().into_dyn(),
            ]
        })),
    )
}

pub fn reshape(g: &mut Graph, a: Var, shape: &[usize]) -> Var {
    let val = reshape_std(g.val(a).clone(), shape);
    let orig: Vec<usize> = g.val(a).shape().to_vec();
    g.push(
        val,
        vec![a.0],
        Some(Box::new(move |_, grad| vec![reshape_std(grad.clone(), &orig)])),
    )
}

/// Slices channels `[lo, hi)` of an NCHW map.
pub fn slice_channels(g: &mut Graph, a: Var, lo: usize, hi: usize) -> Var {
    let val = g.val(a).slice(s![.., lo..hi, .., ..]).to_owned().into_dyn();
    let full = g.val(a).raw_dim();
    g.push(
        val,
        vec![a.0],
        Some(Box::new(move |_, grad| {
            let mut gx = ArrayD::zeros(full.clone());
            gx.slice_mut(s![.., lo..hi, .., ..]).assign(grad);
            vec![gx]
        })),
    )
}

/// Concatenates NCHW maps along the channel axis.
pub fn concat_channels(g: &mut Graph, parts: &[Var]) -> Var {
    let views: Vec<ArrayViewD<'_, f64>> = parts.iter().map(|v| g.val(*v).view()).collect();
    let val = concatenate(Axis(1), &views).expect("concat shapes");
    let widths: Vec<usize> = parts.iter().map(|v| g.val(*v).shape()[1]).collect();
    let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
    g.push(
        val,
        ids,
        Some(Box::new(move |_, grad| {
            let mut out = Vec::with_capacity(widths.len());
            let mut lo = 0;
            for &w in &widths {
                out.push(grad.slice(s![.., lo..lo + w, .., ..]).to_owned().into_dyn());
                lo += w;
            }
            out
        })),
    )
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<f64> {
    let xv = x.view().into_dimensionality::<Ix4>().expect("conv input rank");
    let (n, c, h, w) = xv.dim();
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut cols = ndarray::Array2::<f64>::zeros((n * oh * ow, c * kh * kw));
    let xs = xv.as_slice().expect("conv input layout");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = c * kh * kw;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    let base_in = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = row + (ci * kh + ky) * kw;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = base_in + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst + kx] = xs[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    gcols: &ndarray::Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut gx = ArrayD::<f64>::zeros(ndarray::IxDyn(&[n, c, h, w]));
    let gs = gx.as_slice_mut().unwrap();
    let cols = gcols.as_slice().expect("col layout");
    let row_len = c * kh * kw;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    let base_out = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = row + (ci * kh + ky) * kw;
                        let out_row = base_out + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gs[out_row + ix as usize] += cols[src + kx];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// 2D convolution, `x [n, c, h, w]`, `w [oc, c, kh, kw]`, optional `[oc]` bias.
pub fn conv2d(g: &mut Graph, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
    let (n, c, h, wd) = g.val(x).view().into_dimensionality::<Ix4>().unwrap().dim();
    let wdim = g.val(w).view().into_dimensionality::<Ix4>().unwrap().dim();
    let (oc, wc, kh, kw) = wdim;
    assert_eq!(c, wc, "conv2d: input channels {c} != kernel channels {wc}");
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(wd, kw, stride, pad);

    let cols = im2col(g.val(x), kh, kw, stride, pad);
    let w_mat = g.val(w).view().into_shape_with_order((oc, wc * kh * kw)).unwrap();
    let y2 = cols.dot(&w_mat.t());
    let mut y = reshape_std(y2.into_dyn(), &[n, oh, ow, oc])
        .permuted_axes(vec![0, 3, 1, 2])
        .as_standard_layout()
        .to_owned();
    if let Some(bv) = b {
        let bias = g.val(bv).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        for (mut ch, bval) in y
            .view_mut()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .axis_iter_mut(Axis(1))
            .zip(bias.iter())
        {
            ch += *bval;
        }
    }

    let (x_id, w_id) = (x.0, w.0);
    let mut parents = vec![x.0, w.0];
    if let Some(bv) = b {
        parents.push(bv.0);
    }
    let has_bias = b.is_some();
    g.push(
        y,
        parents,
        Some(Box::new(move |gr, grad| {
            let gy = grad
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((n * oh * ow, oc))
                .unwrap();
            let w_mat = gr
                .val(Var(w_id))
                .view()
                .into_shape_with_order((oc, c * kh * kw))
                .unwrap()
                .to_owned();
            let gw = gy.t().dot(&cols);
            let gcols = gy.dot(&w_mat);
            let gx = col2im(&gcols, n, c, h, wd, kh, kw, stride, pad);
            let mut out = vec![gx, reshape_std(gw.into_dyn(), &[oc, c, kh, kw])];
            if has_bias {
                let _ = gr.val(Var(x_id));
                let gb = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                out.push(gb.into_dyn());
            }
            out
        })),
    )
}

/// Non-overlapping 2x2 max pooling; both spatial dims must be even.
pub fn max_pool_2x2(g: &mut Graph, x: Var) -> Var {
    let xv = g.val(x).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool_2x2 requires even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = ndarray::Array4::<f64>::zeros((n, c, oh, ow));
    let mut arg: Vec<u32> = Vec::with_capacity(n * c * oh * ow);
    let xs = xv.as_slice().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = base + (2 * oy) * w + 2 * ox;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    y[(ni, ci, oy, ox)] = xs[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    let full = g.val(x).raw_dim();
    g.push(
        y.into_dyn(),
        vec![x.0],
        Some(Box::new(move |_, grad| {
            let mut gx = ArrayD::<f64>::zeros(full.clone());
            let gs = gx.as_slice_mut().unwrap();
            for (gi, &src) in grad.iter().zip(arg.iter()) {
                gs[src as usize] += *gi;
            }
            vec![gx]
        })),
    )
}

/// Average pooling with zero padding counted in the divisor (`k*k`).
pub fn avg_pool(g: &mut Graph, x: Var, k: usize, stride: usize, pad: usize) -> Var {
    let xv = g.val(x).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let inv = 1.0 / (k * k) as f64;
    let mut y = ndarray::Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xv[(ni, ci, iy as usize, ix as usize)];
                        }
                    }
                    y[(ni, ci, oy, ox)] = acc * inv;
                }
            }
        }
    }
    g.push(
        y.into_dyn(),
        vec![x.0],
        Some(Box::new(move |_, grad| {
            let gy = grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gy[(ni, ci, oy, ox)] * inv;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gx[(ni, ci, iy as usize, ix as usize)] += gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![gx.into_dyn()]
        })),
    )
}

/// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Var {
    let xv = g.val(x).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let inv = 1.0 / (h * w) as f64;
    let y = xv.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * inv);
    g.push(
        y.into_dyn(),
        vec![x.0],
        Some(Box::new(move |_, grad| {
            let gy = to2(grad);
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    gx.slice_mut(s![ni, ci, .., ..]).fill(gy[(ni, ci)] * inv);
                }
            }
            vec![gx.into_dyn()]
        })),
    )
}

fn up2_table(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear x2 upsampling with half-pixel sample centers and edge clamping.
pub fn bilinear_up2(g: &mut Graph, x: Var) -> Var {
    let xv = g.val(x).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let ty = up2_table(h);
    let tx = up2_table(w);
    let mut y = ndarray::Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            let xp = xv.slice(s![ni, ci, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = xp[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
                        + xp[(y0, x1)] * (1.0 - fy) * fx
                        + xp[(y1, x0)] * fy * (1.0 - fx)
                        + xp[(y1, x1)] * fy * fx;
                    y[(ni, ci, oy, ox)] = v;
                }
            }
        }
    }
    g.push(
        y.into_dyn(),
        vec![x.0],
        Some(Box::new(move |_, grad| {
            let gy = grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let mut gp = gx.slice_mut(s![ni, ci, .., ..]);
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gy[(ni, ci, oy, ox)];
                            gp[(y0, x0)] += gv * (1.0 - fy) * (1.0 - fx);
                            gp[(y0, x1)] += gv * (1.0 - fy) * fx;
                            gp[(y1, x0)] += gv * fy * (1.0 - fx);
                            gp[(y1, x1)] += gv * fy * fx;
                        }
                    }
                }
            }
            vec![gx.into_dyn()]
        })),
    )
}

/// Batch normalization over N, H, W per channel using batch statistics.
///
/// Returns the output together with the biased batch mean and variance so
/// the caller can maintain running statistics.
pub fn batchnorm_train(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> (Var, ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let xv = g.val(x).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let m = (n * h * w) as f64;
    let mut mean = ndarray::Array1::<f64>::zeros(c);
    let mut var = ndarray::Array1::<f64>::zeros(c);
    for ci in 0..c {
        let ch = xv.slice(s![.., ci, .., ..]);
        let mu = ch.sum() / m;
        let v = ch.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
        mean[ci] = mu;
        var[ci] = v;
    }
    let invstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let gv = g.val(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let bv = g.val(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let mut y = ndarray::Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        let scale = gv[ci] * invstd[ci];
        let shift = bv[ci] - mean[ci] * scale;
        let ch = xv.slice(s![.., ci, .., ..]);
        let mut yo = y.slice_mut(s![.., ci, .., ..]);
        ndarray::Zip::from(&mut yo).and(&ch).for_each(|o, &xi| *o = xi * scale + shift);
    }
    let (x_id, gamma_id) = (x.0, gamma.0);
    let (mean_c, invstd_c) = (mean.clone(), var.mapv(|v| 1.0 / (v + eps).sqrt()));
    let out = g.push(
        y.into_dyn(),
        vec![x.0, gamma.0, beta.0],
        Some(Box::new(move |gr, grad| {
            let xv = gr.val(Var(x_id)).view().into_dimensionality::<Ix4>().unwrap();
            let gammav =
                gr.val(Var(gamma_id)).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let gy = grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            let mut ggamma = ndarray::Array1::<f64>::zeros(c);
            let mut gbeta = ndarray::Array1::<f64>::zeros(c);
            for ci in 0..c {
                let xc = xv.slice(s![.., ci, .., ..]);
                let gc = gy.slice(s![.., ci, .., ..]);
                let (mu, istd) = (mean_c[ci], invstd_c[ci]);
                let mut sum_g = 0.0;
                let mut sum_gxhat = 0.0;
                ndarray::Zip::from(&gc).and(&xc).for_each(|&gi, &xi| {
                    sum_g += gi;
                    sum_gxhat += gi * (xi - mu) * istd;
                });
                ggamma[ci] = sum_gxhat;
                gbeta[ci] = sum_g;
                let (mg, mgx) = (sum_g / m, sum_gxhat / m);
                let scale = gammav[ci] * istd;
                let mut go = gx.slice_mut(s![.., ci, .., ..]);
                ndarray::Zip::from(&mut go).and(&gc).and(&xc).for_each(|o, &gi, &xi| {
                    let xhat = (xi - mu) * istd;
                    *o = scale * (gi - mg - xhat * mgx);
                });
            }
            vec![gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn()]
        })),
    );
    (out, mean, var)
}

/// Batch normalization using fixed (running) statistics.
pub fn batchnorm_infer(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &ndarray::Array1<f64>,
    running_var: &ndarray::Array1<f64>,
    eps: f64,
) -> Var {
    let xv = g.val(x).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let invstd = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
    let gv = g.val(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let bv = g.val(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let mut y = ndarray::Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        let scale = gv[ci] * invstd[ci];
        let shift = bv[ci] - running_mean[ci] * scale;
        let ch = xv.slice(s![.., ci, .., ..]);
        let mut yo = y.slice_mut(s![.., ci, .., ..]);
        ndarray::Zip::from(&mut yo).and(&ch).for_each(|o, &xi| *o = xi * scale + shift);
    }
    let x_id = x.0;
    let (rm, istd) = (running_mean.clone(), invstd);
    let gamma_id = gamma.0;
    g.push(
        y.into_dyn(),
        vec![x.0, gamma.0, beta.0],
        Some(Box::new(move |gr, grad| {
            let xv = gr.val(Var(x_id)).view().into_dimensionality::<Ix4>().unwrap();
            let gammav =
                gr.val(Var(gamma_id)).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let gy = grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            let mut ggamma = ndarray::Array1::<f64>::zeros(c);
            let mut gbeta = ndarray::Array1::<f64>::zeros(c);
            for ci in 0..c {
                let xc = xv.slice(s![.., ci, .., ..]);
                let gc = gy.slice(s![.., ci, .., ..]);
                let scale = gammav[ci] * istd[ci];
                let mut go = gx.slice_mut(s![.., ci, .., ..]);
                ndarray::Zip::from(&mut go).and(&gc).for_each(|o, &gi| *o = gi * scale);
                ndarray::Zip::from(&gc).and(&xc).for_each(|&gi, &xi| {
                    ggamma[ci] += gi * (xi - rm[ci]) * istd[ci];
                    gbeta[ci] += gi;
                });
            }
            vec![gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn()]
        })),
    )
}

/// Replaces the value while passing gradients through unchanged.
///
/// Implements the straight-through estimator used by the vector quantizer:
/// the forward value is `replacement`, the backward gradient is copied to
/// `a` as if the op were the identity.
pub fn passthrough(g: &mut Graph, a: Var, replacement: ArrayD<f64>) -> Var {
    assert_eq!(g.val(a).shape(), replacement.shape(), "passthrough shape mismatch");
    g.push(replacement, vec![a.0], Some(Box::new(|_, grad| vec![grad.clone()])))
}

/// Numerically stable row-wise softmax for `[n, k]` logits.
pub fn softmax_rows(g: &mut Graph, a: Var) -> Var {
    let x = to2(g.val(a));
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let yc = y.clone();
    g.push(
        y.into_dyn(),
        vec![a.0],
        Some(Box::new(move |_, grad| {
            let gy = to2(grad);
            let mut gx = gy.to_owned();
            for (mut grow, yrow) in gx.rows_mut().into_iter().zip(yc.rows()) {
                let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                ndarray::Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| {
                    *gv = yv * (*gv - dot);
                });
            }
            vec![gx.into_dyn()]
        })),
    )
}

fn log_softmax_val(x: &ArrayView2<'_, f64>) -> ndarray::Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy between `[n, k]` logits and constant one-hot targets.
pub fn cross_entropy_mean(g: &mut Graph, logits: Var, targets: &ndarray::Array2<f64>) -> Var {
    let x = to2(g.val(logits));
    let n = x.nrows() as f64;
    assert_eq!(x.dim(), targets.dim(), "cross_entropy_mean target shape");
    let lsm = log_softmax_val(&x);
    let loss = -(&lsm * targets).sum() / n;
    let probs = lsm.mapv(f64::exp);
    let t = targets.clone();
    g.push(
        ArrayD::from_elem(ndarray::IxDyn(&[]), loss),
        vec![logits.0],
        Some(Box::new(move |_, grad| {
            let gs = *grad.iter().next().unwrap() / n;
            vec![((&probs - &t) * gs).into_dyn()]
        })),
    )
}

/// Masked cross-entropy summed over rows and divided by a fixed denominator.
///
/// Rows with `mask[i] == 0` contribute nothing to the value or gradient.
/// The denominator is independent of how many rows pass the mask.
pub fn cross_entropy_masked_scaled(
    g: &mut Graph,
    logits: Var,
    targets: &ndarray::Array2<f64>,
    mask: &ndarray::Array1<f64>,
    denom: f64,
) -> Var {
    let x = to2(g.val(logits));
    assert_eq!(x.dim(), targets.dim(), "masked cross-entropy target shape");
    assert_eq!(x.nrows(), mask.len(), "masked cross-entropy mask length");
    assert!(denom > 0.0, "masked cross-entropy denominator must be positive");
    let lsm = log_softmax_val(&x);
    let mut loss = 0.0;
    for (i, row) in lsm.rows().into_iter().enumerate() {
        if mask[i] != 0.0 {
            let ce: f64 = -row
                .iter()
                .zip(targets.row(i).iter())
                .map(|(&l, &t)| l * t)
                .sum::<f64>();
            loss += mask[i] * ce;
        }
    }
    loss /= denom;
    let probs = lsm.mapv(f64::exp);
    let t = targets.clone();
    let m = mask.clone();
    g.push(
        ArrayD::from_elem(ndarray::IxDyn(&[]), loss),
        vec![logits.0],
        Some(Box::new(move |_, grad| {
            let gs = *grad.iter().next().unwrap() / denom;
            let mut gx = (&probs - &t).to_owned();
            for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v * m[i] * gs);
            }
            vec![gx.into_dyn()]
        })),
    )
}

/// Constant scalar leaf.
pub fn scalar_leaf(g: &mut Graph, v: f64) -> Var {
    g.leaf(ArrayD::from_elem(ndarray::IxDyn(&[]), v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new(false);
        let x = g.leaf(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn());
        let p = softmax_rows(&mut g, x);
        for row in to2(g.val(p)).rows() {
            assert_close(row.sum(), 1.0, 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_manual_value() {
        let mut g = Graph::new(true);
        let logits = g.leaf(arr2(&[[2.0, 0.0, -1.0, 0.5]]).into_dyn());
        let t = arr2(&[[0.0, 1.0, 0.0, 0.0]]);
        let l = cross_entropy_mean(&mut g, logits, &t);
        let z: f64 = [2.0f64, 0.0, -1.0, 0.5].iter().map(|v| v.exp()).sum();
        assert_close(g.scalar(l), z.ln(), 1e-12);
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_rows() {
        let t = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let mask = arr1(&[1.0, 0.0]);
        let mut g = Graph::new(true);
        let logits = g.leaf(arr2(&[[0.3, -0.2], [5.0, -5.0]]).into_dyn());
        let l = cross_entropy_masked_scaled(&mut g, logits, &t, &mask, 4.0);
        let grads = g.backward(l);
        let gl = grads.get(logits).unwrap();
        assert_eq!(gl[[1, 0]], 0.0);
        assert_eq!(gl[[1, 1]], 0.0);
        let row0: f64 = -((0.3f64 - 0.2).mul_add(0.0, 0.0)
            + (0.3 - ((0.3f64).exp() + (-0.2f64).exp()).ln()));
        assert_close(g.scalar(l), row0 / 4.0, 1e-12);
    }

    #[test]
    fn conv2d_known_values() {
        let mut g = Graph::new(false);
        let mut x = Array4::<f64>::zeros((1, 1, 3, 3));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let w = Array4::<f64>::ones((1, 1, 2, 2));
        let xv = g.leaf(x.into_dyn());
        let wv = g.leaf(w.into_dyn());
        let y = conv2d(&mut g, xv, wv, None, 1, 0);
        let yv = g.val(y);
        assert_eq!(yv.shape(), &[1, 1, 2, 2]);
        assert_close(yv[[0, 0, 0, 0]], 0.0 + 1.0 + 3.0 + 4.0, 1e-12);
        assert_close(yv[[0, 0, 1, 1]], 4.0 + 5.0 + 7.0 + 8.0, 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::new(true);
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[(0, 0, 1, 0)] = 9.0;
        let xv = g.leaf(x.into_dyn());
        let y = max_pool_2x2(&mut g, xv);
        let s = sum_all(&mut g, y);
        let grads = g.backward(s);
        let gx = grads.get(xv).unwrap();
        assert_eq!(gx[[0, 0, 1, 0]], 1.0);
        assert_eq!(gx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn bilinear_up2_preserves_constant_maps() {
        let mut g = Graph::new(false);
        let x = g.leaf(Array4::<f64>::from_elem((1, 1, 3, 5), 2.5).into_dyn());
        let y = bilinear_up2(&mut g, x);
        assert_eq!(g.val(y).shape(), &[1, 1, 6, 10]);
        for &v in g.val(y).iter() {
            assert_close(v, 2.5, 1e-12);
        }
    }

    #[test]
    fn passthrough_value_and_gradient() {
        let mut g = Graph::new(true);
        let x = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = passthrough(&mut g, x, arr1(&[10.0, 20.0]).into_dyn());
        assert_eq!(g.val(y), &arr1(&[10.0, 20.0]).into_dyn());
        let s = sum_all(&mut g, y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &arr1(&[1.0, 1.0]).into_dyn());
    }
}
