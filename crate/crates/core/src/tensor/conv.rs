//! im2col convolution kernels for NCHW tensors.

use super::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom { stride: 1, padding: 0, groups: 1 }
    }
}

struct Dims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Dims {
    fn new(x: &[usize], w: &[usize], g: ConvGeom) -> Dims {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be OIHW, got {w:?}");
        let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        assert!(g.groups > 0 && cin % g.groups == 0 && cout % g.groups == 0, "bad group count");
        assert_eq!(cin / g.groups, cin_g, "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(h + 2 * g.padding >= kh && wd + 2 * g.padding >= kw, "kernel larger than input");
        let ho = (h + 2 * g.padding - kh) / g.stride + 1;
        let wo = (wd + 2 * g.padding - kw) / g.stride + 1;
        Dims { batch, cin, h, w: wd, cout, kh, kw, ho, wo, cin_g, cout_g: cout / g.groups }
    }

    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self, g: ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

fn im2col(x: &[f64], d: &Dims, g: ConvGeom, col: &mut [f64]) {
    let p = d.p();
    for c in 0..d.cin_g {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut col[((c * d.kh + ki) * d.kw + kj) * p..][..p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..][..d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], d: &Dims, g: ConvGeom, x: &mut [f64]) {
    let p = d.p();
    for c in 0..d.cin_g {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &col[((c * d.kh + ki) * d.kw + kj) * p..][..p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..][..d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += row[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, NCHW input, OIHW weight, optional per-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let d = Dims::new(x.shape(), w.shape(), g);
    let (k, p) = (d.k(), d.p());
    let mut out = vec![0.0; d.batch * d.cout * p];
    let mut col = if d.pointwise(g) { Vec::new() } else { vec![0.0; k * p] };
    let wd = w.data();
    for b in 0..d.batch {
        for gi in 0..g.groups {
            let xin = &x.data()[(b * d.cin + gi * d.cin_g) * d.h * d.w..][..d.cin_g * d.h * d.w];
            let src: &[f64] = if d.pointwise(g) {
                xin
            } else {
                im2col(xin, &d, g, &mut col);
                &col
            };
            let wg = &wd[gi * d.cout_g * k..(gi + 1) * d.cout_g * k];
            let dst = &mut out[(b * d.cout + gi * d.cout_g) * p..][..d.cout_g * p];
            gemm(d.cout_g, k, p, wg, k, 1, src, p, 1, dst, p, 0.0);
        }
    }
    if let Some(bias) = bias {
        assert_eq!(bias.shape(), &[d.cout]);
        for b in 0..d.batch {
            for (c, &bv) in bias.data().iter().enumerate() {
                out[(b * d.cout + c) * p..][..p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[d.batch, d.cout, d.ho, d.wo], out)
}

/// Gradients of [`conv2d`] w.r.t. input and weight (bias gradient is the
/// spatial+batch sum of `gout`, left to the caller).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    g: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = Dims::new(x.shape(), w.shape(), g);
    let (k, p) = (d.k(), d.p());
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let pointwise = d.pointwise(g);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let god = gout.data();
    for b in 0..d.batch {
        for gi in 0..g.groups {
            let xoff = (b * d.cin + gi * d.cin_g) * d.h * d.w;
            let xlen = d.cin_g * d.h * d.w;
            let go = &god[(b * d.cout + gi * d.cout_g) * p..][..d.cout_g * p];
            let wg = &w.data()[gi * d.cout_g * k..(gi + 1) * d.cout_g * k];
            if let Some(gw) = gw.as_mut() {
                let src: &[f64] = if pointwise {
                    &x.data()[xoff..xoff + xlen]
                } else {
                    im2col(&x.data()[xoff..xoff + xlen], &d, g, &mut col);
                    &col
                };
                let dst = &mut gw[gi * d.cout_g * k..(gi + 1) * d.cout_g * k];
                // (cout_g x p) * (p x k)
                gemm(d.cout_g, p, k, go, p, 1, src, 1, p, dst, k, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[xoff..xoff + xlen];
                if pointwise {
                    gemm(k, d.cout_g, p, wg, 1, k, go, p, 1, dst, p, 1.0);
                } else {
                    gemm(k, d.cout_g, p, wg, 1, k, go, p, 1, &mut col, p, 0.0);
                    col2im_add(&col, &d, g, dst);
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::new(x.shape(), v)),
        gw.map(|v| Tensor::new(w.shape(), v)),
    )
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (n, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = vec![0.0; n * 4 * h * w];
    for c in 0..n {
        let src = &x.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * 4 * h * w..(c + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)
}

pub fn upsample_nearest2x_backward(gout: &Tensor) -> Tensor {
    let s = gout.shape();
    let (n, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
    let mut out = vec![0.0; n * h * w];
    for c in 0..n {
        let src = &gout.data()[c * 4 * h * w..(c + 1) * 4 * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    Tensor::new(&[s[0], s[1], h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let d = Dims::new(x.shape(), w.shape(), g);
        let mut out = Tensor::zeros(&[d.batch, d.cout, d.ho, d.wo]);
        for b in 0..d.batch {
            for o in 0..d.cout {
                let gi = o / d.cout_g;
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let mut acc = 0.0;
                        for c in 0..d.cin_g {
                            let ci = gi * d.cin_g + c;
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * d.cin + ci) * d.h + iy as usize) * d.w + ix as usize];
                                    let wv = w.data()[((o * d.cin_g + c) * d.kh + ki) * d.kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((b * d.cout + o) * d.ho + oy) * d.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_for_assorted_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, stride, pad, groups) in &[
            (3, 4, 3, 1, 1, 1),
            (4, 6, 3, 2, 1, 2),
            (4, 4, 3, 1, 1, 4),
            (6, 3, 1, 1, 0, 1),
            (8, 8, 1, 1, 0, 4),
            (2, 2, 3, 2, 0, 1),
        ] {
            let g = ConvGeom { stride, padding: pad, groups };
            let x = Tensor::randn(&[2, cin, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[cout, cin / groups, k, k], 1.0, &mut rng);
            let fast = conv2d(&x, &w, None, g);
            let slow = naive(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T(g)> and likewise for the weight.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(cin, cout, k, stride, pad, groups) in &[(4, 6, 3, 2, 1, 2), (3, 3, 3, 1, 1, 3), (4, 2, 1, 1, 0, 1)] {
            let g = ConvGeom { stride, padding: pad, groups };
            let x = Tensor::randn(&[2, cin, 6, 5], 1.0, &mut rng);
            let w = Tensor::randn(&[cout, cin / groups, k, k], 1.0, &mut rng);
            let y = conv2d(&x, &w, None, g);
            let go = Tensor::randn(y.shape(), 1.0, &mut rng);
            let (gx, gw) = conv2d_backward(&x, &w, &go, g, true, true);
            let lhs: f64 = y.mul(&go).sum();
            assert!((lhs - x.mul(&gx.unwrap()).sum()).abs() < 1e-9);
            assert!((lhs - w.mul(&gw.unwrap()).sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_roundtrip_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.shape(), &[1, 2, 6, 8]);
        let go = Tensor::randn(y.shape(), 1.0, &mut rng);
        let gx = upsample_nearest2x_backward(&go);
        assert!((y.mul(&go).sum() - x.mul(&gx).sum()).abs() < 1e-10);
    }
}
