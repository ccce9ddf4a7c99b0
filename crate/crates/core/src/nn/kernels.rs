//! Forward and backward kernels for the tape's built-in operations.
//!
//! All image tensors are `[N, C, H, W]`.

use super::tensor::{gemm, Tensor};

pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> ConvGeom {
    let (_, cin, h, wd) = x.dims4();
    let (_, wcin, k, k2) = w.dims4();
    assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
    assert_eq!(k, k2, "only square kernels are supported");
    ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: conv_out_size(h, k, stride, pad),
        wo: conv_out_size(wd, k, stride, pad),
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let g = geom(x, w, stride, pad);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let rows = g.cin * g.k * g.k;
    let plane = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    let in_len = g.cin * g.h * g.w;
    for i in 0..n {
        let xs = &x.data()[i * in_len..(i + 1) * in_len];
        let os = &mut out.data_mut()[i * cout * plane..(i + 1) * cout * plane];
        let cm: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        gemm(cout, rows, plane, w.data(), false, cm, false, 0.0, os);
        if let Some(b) = b {
            for (co, chunk) in os.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let g = geom(x, w, stride, pad);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let rows = g.cin * g.k * g.k;
    let plane = g.ho * g.wo;
    let in_len = g.cin * g.h * g.w;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    let mut dcols = vec![0.0; rows * plane];
    for i in 0..n {
        let xs = &x.data()[i * in_len..(i + 1) * in_len];
        let dys = &dy.data()[i * cout * plane..(i + 1) * cout * plane];
        for (co, chunk) in dys.chunks(plane).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        let cm: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        gemm(cout, plane, rows, dys, false, cm, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, cout, plane, w.data(), true, dys, false, 1.0, dxs);
            } else {
                gemm(rows, cout, plane, w.data(), true, dys, false, 0.0, &mut dcols);
                col2im_add(&dcols, &g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with a 2×2 kernel and stride 2; weight is `[Cin, Cout, 2, 2]`.
pub(crate) fn conv_t2_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, k1, k2) = w.dims4();
    assert_eq!(cin, wcin);
    assert!(k1 == 2 && k2 == 2);
    let plane = h * wd;
    let mut out = Tensor::zeros(&[n, cout, 2 * h, 2 * wd]);
    let mut tmp = vec![0.0; cout * 4 * plane];
    let (oh, ow) = (2 * h, 2 * wd);
    for i in 0..n {
        let xs = &x.data()[i * cin * plane..(i + 1) * cin * plane];
        // tmp[(co*4 + dy*2 + dx), p] = sum_ci w[ci, co, dy, dx] * x[ci, p]
        gemm(cout * 4, cin, plane, w.data(), true, xs, false, 0.0, &mut tmp);
        let os = &mut out.data_mut()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        for co in 0..cout {
            let bv = b.map_or(0.0, |b| b.data()[co]);
            for d in 0..4 {
                let (ddy, ddx) = (d / 2, d % 2);
                let src = &tmp[(co * 4 + d) * plane..(co * 4 + d + 1) * plane];
                for y in 0..h {
                    for x_ in 0..wd {
                        os[co * oh * ow + (2 * y + ddy) * ow + 2 * x_ + ddx] = src[y * wd + x_] + bv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_t2_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[1];
    let plane = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut gathered = vec![0.0; cout * 4 * plane];
    for i in 0..n {
        let dys = &dy.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        for co in 0..cout {
            db.data_mut()[co] += dys[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
            for d in 0..4 {
                let (ddy, ddx) = (d / 2, d % 2);
                let dst = &mut gathered[(co * 4 + d) * plane..(co * 4 + d + 1) * plane];
                for y in 0..h {
                    for x_ in 0..wd {
                        dst[y * wd + x_] = dys[co * oh * ow + (2 * y + ddy) * ow + 2 * x_ + ddx];
                    }
                }
            }
        }
        let xs = &x.data()[i * cin * plane..(i + 1) * cin * plane];
        // dw[ci, (co,d)] += x[ci, p] · gathered[(co,d), p]
        gemm(cin, plane, cout * 4, xs, false, &gathered, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[i * cin * plane..(i + 1) * cin * plane];
            gemm(cin, cout * 4, plane, w.data(), false, &gathered, false, 1.0, dxs);
        }
    }
    (dx, dw, db)
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Returns the normalized output plus per-(sample, group) mean and reciprocal std.
pub(crate) fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
    let cg = c / groups;
    let plane = h * w;
    let glen = cg * plane;
    let mut out = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cg) * plane;
            let xs = &x.data()[start..start + glen];
            let mean = xs.iter().sum::<f64>() / glen as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let os = &mut out.data_mut()[start..start + glen];
            for (ch, (oc, xc)) in os.chunks_mut(plane).zip(xs.chunks(plane)).enumerate() {
                let (ga, be) = (gamma.data()[g * cg + ch], beta.data()[g * cg + ch]);
                for (o, v) in oc.iter_mut().zip(xc) {
                    *o = (v - mean) * rstd * ga + be;
                }
            }
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    means: &[f64],
    rstds: &[f64],
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let cg = c / groups;
    let plane = h * w;
    let glen = cg * plane;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        for g in 0..groups {
            let idx = i * groups + g;
            let (mean, rstd) = (means[idx], rstds[idx]);
            let start = (i * c + g * cg) * plane;
            let xs = &x.data()[start..start + glen];
            let dys = &dy.data()[start..start + glen];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ch in 0..cg {
                let cidx = g * cg + ch;
                let ga = gamma.data()[cidx];
                let (mut dg, mut dbt) = (0.0, 0.0);
                for p in 0..plane {
                    let xhat = (xs[ch * plane + p] - mean) * rstd;
                    let d = dys[ch * plane + p];
                    dg += d * xhat;
                    dbt += d;
                    sum_dxhat += d * ga;
                    sum_dxhat_xhat += d * ga * xhat;
                }
                dgamma.data_mut()[cidx] += dg;
                dbeta.data_mut()[cidx] += dbt;
            }
            if let Some(dx) = dx.as_mut() {
                let mean_dxhat = sum_dxhat / glen as f64;
                let mean_dxhat_xhat = sum_dxhat_xhat / glen as f64;
                let dxs = &mut dx.data_mut()[start..start + glen];
                for ch in 0..cg {
                    let ga = gamma.data()[g * cg + ch];
                    for p in 0..plane {
                        let j = ch * plane + p;
                        let xhat = (xs[j] - mean) * rstd;
                        dxs[j] = rstd * (dys[j] * ga - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Interpolation taps for bilinear upsampling by an integer factor
/// (half-pixel centres, edge clamped).
pub(crate) fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    if factor == 1 {
        return x.clone();
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut rows = vec![0.0; h * ow];
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                rows[y * ow + ox] = w0 * plane_in[y * w + i0] + w1 * plane_in[y * w + i1];
            }
        }
        for (oy, &(j0, j1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..ow {
                plane_out[oy * ow + ox] = w0 * rows[j0 * ow + ox] + w1 * rows[j1 * ow + ox];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &Tensor, in_shape: &[usize], factor: usize) -> Tensor {
    if factor == 1 {
        return dy.clone();
    }
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = Tensor::zeros(in_shape);
    let mut rows = vec![0.0; h * ow];
    for (gout, gin) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        rows.fill(0.0);
        for (oy, &(j0, j1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..ow {
                let g = gout[oy * ow + ox];
                rows[j0 * ow + ox] += w0 * g;
                rows[j1 * ow + ox] += w1 * g;
            }
        }
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                let g = rows[y * ow + ox];
                gin[y * w + i0] += w0 * g;
                gin[y * w + i1] += w1 * g;
            }
        }
    }
    dx
}

/// Numerically stable softmax over dimension 1 of `[N, C, H, W]`.
pub(crate) fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(x.data()[base + ch * plane + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (x.data()[base + ch * plane + p] - mx).exp();
                out.data_mut()[base + ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..c {
                out.data_mut()[base + ch * plane + p] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = y.dims4();
    let plane = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for ch in 0..c {
                let j = base + ch * plane + p;
                dot += y.data()[j] * dy.data()[j];
            }
            for ch in 0..c {
                let j = base + ch * plane + p;
                dx.data_mut()[j] = y.data()[j] * (dy.data()[j] - dot);
            }
        }
    }
    dx
}
