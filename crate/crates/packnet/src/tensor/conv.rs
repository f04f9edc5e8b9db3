//! Structured layers: convolutions, group normalization, pixel shuffles, and
//! the bilinear sampler used for view synthesis.
//!
//! Convolutions reduce to matrix products through an im2col buffer that is
//! processed in bounded chunks so peak memory stays flat regardless of
//! resolution. The backward pass recomputes each chunk instead of caching it.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::{Element, Tape, Tensor};

/// Target size in bytes for one im2col chunk.
const COL_CHUNK_BYTES: usize = 64 << 20;

pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "convolution input smaller than kernel");
    (n + 2 * pad - k) / stride + 1
}

/// Fill `col` (shape `[c_in * k * k, len]`) with the receptive fields of
/// output positions `pos0 .. pos0 + len` (row-major over the output raster).
fn im2col_chunk<T: Element>(
    x: &ArrayD<T>,
    k: usize,
    stride: usize,
    pad: usize,
    w_out: usize,
    pos0: usize,
    len: usize,
    col: &mut Array2<T>,
) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_slice().expect("conv input must be contiguous");
    debug_assert_eq!(col.shape(), &[c_in * k * k, len]);
    let cs = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cs[row * len..(row + 1) * len];
                for (j, d) in dst.iter_mut().enumerate() {
                    let pos = pos0 + j;
                    let oy = pos / w_out;
                    let ox = pos % w_out;
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let xc = (ox * stride + kx) as isize - pad as isize;
                    *d = if y >= 0 && (y as usize) < h && xc >= 0 && (xc as usize) < w {
                        xs[(c * h + y as usize) * w + xc as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Scatter-add `col` gradients (same layout as [`im2col_chunk`]) back into
/// the input gradient.
fn col2im_chunk<T: Element>(
    gx: &mut ArrayD<T>,
    k: usize,
    stride: usize,
    pad: usize,
    w_out: usize,
    pos0: usize,
    col: &Array2<T>,
) {
    let (c_in, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    let gs = gx.as_slice_mut().unwrap();
    let len = col.shape()[1];
    let cs = col.as_slice().unwrap();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cs[row * len..(row + 1) * len];
                for (j, &v) in src.iter().enumerate() {
                    let pos = pos0 + j;
                    let oy = pos / w_out;
                    let ox = pos % w_out;
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let xc = (ox * stride + kx) as isize - pad as isize;
                    if y >= 0 && (y as usize) < h && xc >= 0 && (xc as usize) < w {
                        let idx = (c * h + y as usize) * w + xc as usize;
                        gs[idx] = gs[idx] + v;
                    }
                }
            }
        }
    }
}

fn chunk_cols<T>(rows: usize) -> usize {
    (COL_CHUNK_BYTES / (rows * std::mem::size_of::<T>())).max(1)
}

impl<T: Element> Tape<T> {
    /// 2-D convolution. `x` is `[C_in, H, W]`, `w` is `[C_out, C_in, K, K]`,
    /// `b` is `[C_out]`. Zero padding.
    pub fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(w.shape().len(), 4, "conv2d weight must be [O,I,K,K]");
        assert_eq!(w.shape()[2], w.shape()[3], "conv2d kernel must be square");
        assert_eq!(
            x.shape()[0],
            w.shape()[1],
            "conv2d: input channels do not match weight"
        );
        let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let (h, wd) = (x.shape()[1], x.shape()[2]);
        let h_out = conv_out_len(h, k, stride, padding);
        let w_out = conv_out_len(wd, k, stride, padding);
        let n_pos = h_out * w_out;
        let rows = c_in * k * k;

        let w_mat = w
            .array()
            .view()
            .into_shape_with_order((c_out, rows))
            .expect("conv2d weight not contiguous")
            .to_owned();
        let mut out = Array2::<T>::zeros((c_out, n_pos));
        let max_cols = chunk_cols::<T>(rows);
        let xv = x.share();
        let mut pos = 0;
        let mut col = Array2::<T>::zeros((rows, max_cols.min(n_pos)));
        while pos < n_pos {
            let len = max_cols.min(n_pos - pos);
            let mut col_v = col.slice_mut(ndarray::s![.., ..len]);
            {
                let mut tmp = Array2::<T>::zeros((rows, len));
                im2col_chunk(&xv, k, stride, padding, w_out, pos, len, &mut tmp);
                col_v.assign(&tmp);
            }
            let chunk = w_mat.dot(&col.slice(ndarray::s![.., ..len]));
            out.slice_mut(ndarray::s![.., pos..pos + len]).assign(&chunk);
            pos += len;
        }
        if let Some(bias) = b {
            assert_eq!(bias.shape(), &[c_out], "conv2d bias shape");
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.array().iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let data = out
            .into_shape_with_order((c_out, h_out, w_out))
            .unwrap()
            .into_dyn();

        let wv = w.share();
        let bias_node = b.map(|t| t.node()).unwrap_or(None);
        let parents = vec![x.node(), w.node(), bias_node];
        self.record(
            data,
            parents,
            Box::new(move |g, need| {
                let g_mat = g
                    .view()
                    .into_shape_with_order((c_out, n_pos))
                    .expect("conv2d grad not contiguous")
                    .to_owned();
                let w_mat = wv
                    .view()
                    .into_shape_with_order((c_out, rows))
                    .unwrap()
                    .to_owned();
                let mut gx = need[0].then(|| ArrayD::<T>::zeros(IxDyn(xv.shape())));
                let mut gw = need[1].then(|| Array2::<T>::zeros((c_out, rows)));
                let gb = need[2].then(|| g_mat.sum_axis(Axis(1)).into_dyn());
                if need[0] || need[1] {
                    let max_cols = chunk_cols::<T>(rows);
                    let mut pos = 0;
                    while pos < n_pos {
                        let len = max_cols.min(n_pos - pos);
                        let g_chunk = g_mat.slice(ndarray::s![.., pos..pos + len]);
                        if need[1] {
                            let mut col = Array2::<T>::zeros((rows, len));
                            im2col_chunk(&xv, k, stride, padding, w_out, pos, len, &mut col);
                            gw.as_mut()
                                .unwrap()
                                .scaled_add(T::one(), &g_chunk.dot(&col.t()));
                        }
                        if need[0] {
                            let col_grad = w_mat.t().dot(&g_chunk);
                            col2im_chunk(
                                gx.as_mut().unwrap(),
                                k,
                                stride,
                                padding,
                                w_out,
                                pos,
                                &col_grad,
                            );
                        }
                        pos += len;
                    }
                }
                vec![
                    gx,
                    gw.map(|m| {
                        m.into_shape_with_order((c_out, c_in, k, k))
                            .unwrap()
                            .into_dyn()
                    }),
                    gb,
                ]
            }),
        )
    }

    /// Single-channel 3-D convolution that expands a feature map into `D`
    /// copies filtered along (channel, height, width).
    ///
    /// `x` is `[C, H, W]` treated as a one-channel volume; `w` is
    /// `[D, 3, 3, 3]`, `b` is `[D]`. Output is `[D * C, H, W]` with the
    /// depth index major, i.e. output channel `d * C + z`.
    pub fn conv3d_expand(&self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "conv3d_expand input must be [C,H,W]");
        assert_eq!(w.shape().len(), 4, "conv3d_expand weight must be [D,3,3,3]");
        assert_eq!(&w.shape()[1..], &[3, 3, 3], "conv3d_expand kernel must be 3x3x3");
        let d = w.shape()[0];
        assert_eq!(b.shape(), &[d], "conv3d_expand bias shape");
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);

        let xv = x.share();
        let wv = w.share();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[d * c, h, wd]));
        for di in 0..d {
            let bias = b.array()[[di]];
            let mut block = out.slice_mut(ndarray::s![di * c..(di + 1) * c, .., ..]);
            block.fill(bias);
            accumulate_shifted(&mut block, &xv, &wv, di, T::one());
        }

        self.record(
            out,
            vec![x.node(), w.node(), b.node()],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, wd]));
                    // Correlation transpose: flip all three kernel axes.
                    for di in 0..d {
                        let g_block = g
                            .slice(ndarray::s![di * c..(di + 1) * c, .., ..])
                            .to_owned()
                            .into_dyn();
                        let mut view = gx
                            .view_mut()
                            .into_dimensionality::<ndarray::Ix3>()
                            .unwrap();
                        accumulate_shifted_flipped(&mut view, &g_block, &wv, di);
                    }
                    gx
                });
                let gw = need[1].then(|| {
                    let mut gw = ArrayD::<T>::zeros(IxDyn(&[d, 3, 3, 3]));
                    for di in 0..d {
                        let g_block = g.slice(ndarray::s![di * c..(di + 1) * c, .., ..]);
                        for dz in 0..3usize {
                            for dy in 0..3usize {
                                for dx in 0..3usize {
                                    let (gz, gy, gxr, iz, iy, ixr) =
                                        overlap(c, h, wd, dz, dy, dx);
                                    let a = g_block.slice(ndarray::s![
                                        gz.clone(),
                                        gy.clone(),
                                        gxr.clone()
                                    ]);
                                    let bsl = xv.slice(ndarray::s![iz, iy, ixr]);
                                    let mut acc = T::zero();
                                    ndarray::Zip::from(&a).and(&bsl).for_each(|&u, &v| {
                                        acc = acc + u * v;
                                    });
                                    gw[[di, dz, dy, dx]] = acc;
                                }
                            }
                        }
                    }
                    gw
                });
                let gb = need[2].then(|| {
                    let mut gb = ArrayD::<T>::zeros(IxDyn(&[d]));
                    for di in 0..d {
                        gb[[di]] = g.slice(ndarray::s![di * c..(di + 1) * c, .., ..]).sum();
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Channel-wise group normalization over `[C, H, W]` with per-channel
    /// scale and shift.
    pub fn group_norm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        groups: usize,
        eps: T,
    ) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "group_norm input must be [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(groups >= 1 && c % groups == 0, "channels must split into groups");
        assert_eq!(gamma.shape(), &[c], "group_norm gamma shape");
        assert_eq!(beta.shape(), &[c], "group_norm beta shape");
        let cg = c / groups;
        let n_group = cg * h * w;
        let inv_n = T::from_f64(1.0 / n_group as f64);

        let xv = x.share();
        let mut mean = vec![T::zero(); groups];
        let mut inv_std = vec![T::zero(); groups];
        for gi in 0..groups {
            let sl = xv.slice(ndarray::s![gi * cg..(gi + 1) * cg, .., ..]);
            let mu = sl.sum() * inv_n;
            let mut var = T::zero();
            sl.for_each(|&v| {
                let d = v - mu;
                var = var + d * d;
            });
            var = var * inv_n;
            mean[gi] = mu;
            inv_std[gi] = T::one() / (var + eps).sqrt();
        }
        let gv = gamma.share();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            let gi = ci / cg;
            let (mu, is) = (mean[gi], inv_std[gi]);
            let ga = gv[[ci]];
            let be = beta.array()[[ci]];
            let src = xv.slice(ndarray::s![ci, .., ..]);
            let mut dst = out.slice_mut(ndarray::s![ci, .., ..]);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|o, &v| {
                *o = ga * (v - mu) * is + be;
            });
        }

        self.record(
            out,
            vec![x.node(), gamma.node(), beta.node()],
            Box::new(move |g, need| {
                // Per group, with xhat = (x - mu) * inv_std and a = gamma * g:
                //   dx = inv_std * (a - mean(a) - xhat * mean(a * xhat))
                let mut gx = need[0].then(|| ArrayD::<T>::zeros(IxDyn(&[c, h, w])));
                let mut gg = need[1].then(|| ArrayD::<T>::zeros(IxDyn(&[c])));
                let mut gb = need[2].then(|| ArrayD::<T>::zeros(IxDyn(&[c])));
                for gi in 0..groups {
                    let (mu, is) = (mean[gi], inv_std[gi]);
                    let mut sum_a = T::zero();
                    let mut sum_ax = T::zero();
                    if need[0] {
                        for ci in gi * cg..(gi + 1) * cg {
                            let ga = gv[[ci]];
                            let gs = g.slice(ndarray::s![ci, .., ..]);
                            let xs = xv.slice(ndarray::s![ci, .., ..]);
                            ndarray::Zip::from(&gs).and(&xs).for_each(|&gi_, &xi| {
                                let a = ga * gi_;
                                sum_a = sum_a + a;
                                sum_ax = sum_ax + a * (xi - mu) * is;
                            });
                        }
                    }
                    let (m_a, m_ax) = (sum_a * inv_n, sum_ax * inv_n);
                    for ci in gi * cg..(gi + 1) * cg {
                        let ga = gv[[ci]];
                        let gs = g.slice(ndarray::s![ci, .., ..]);
                        let xs = xv.slice(ndarray::s![ci, .., ..]);
                        if let Some(gx) = gx.as_mut() {
                            let mut dst = gx.slice_mut(ndarray::s![ci, .., ..]);
                            ndarray::Zip::from(&mut dst)
                                .and(&gs)
                                .and(&xs)
                                .for_each(|o, &gi_, &xi| {
                                    let xh = (xi - mu) * is;
                                    *o = is * (ga * gi_ - m_a - xh * m_ax);
                                });
                        }
                        if need[1] || need[2] {
                            let mut s_gx = T::zero();
                            let mut s_g = T::zero();
                            ndarray::Zip::from(&gs).and(&xs).for_each(|&gi_, &xi| {
                                s_gx = s_gx + gi_ * (xi - mu) * is;
                                s_g = s_g + gi_;
                            });
                            if let Some(gg) = gg.as_mut() {
                                gg[[ci]] = s_gx;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[[ci]] = s_g;
                            }
                        }
                    }
                }
                vec![gx, gg, gb]
            }),
        )
    }

    /// Rearrange `[C, H, W]` into `[C * r^2, H / r, W / r]`; output channel
    /// `c * r^2 + dy * r + dx` holds input pixels at offset `(dy, dx)`.
    pub fn space_to_depth(&self, x: &Tensor<T>, r: usize) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "space_to_depth input must be [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h % r == 0 && w % r == 0, "spatial dims must divide the block size");
        let (ho, wo) = (h / r, w / r);
        let xv = x.array();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c * r * r, ho, wo]));
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ci * r * r + dy * r + dx;
                    for y in 0..ho {
                        for xc in 0..wo {
                            out[[oc, y, xc]] = xv[[ci, y * r + dy, xc * r + dx]];
                        }
                    }
                }
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let oc = ci * r * r + dy * r + dx;
                        for y in 0..ho {
                            for xc in 0..wo {
                                gin[[ci, y * r + dy, xc * r + dx]] = g[[oc, y, xc]];
                            }
                        }
                    }
                }
            }
            gin
        })
    }

    /// Inverse of [`Tape::space_to_depth`]: `[C * r^2, H, W]` to `[C, H * r, W * r]`.
    pub fn depth_to_space(&self, x: &Tensor<T>, r: usize) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "depth_to_space input must be [C,H,W]");
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(cin % (r * r) == 0, "channels must divide the block size");
        let c = cin / (r * r);
        let xv = x.array();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h * r, w * r]));
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = ci * r * r + dy * r + dx;
                    for y in 0..h {
                        for xc in 0..w {
                            out[[ci, y * r + dy, xc * r + dx]] = xv[[ic, y, xc]];
                        }
                    }
                }
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::<T>::zeros(IxDyn(&[cin, h, w]));
            for ci in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let ic = ci * r * r + dy * r + dx;
                        for y in 0..h {
                            for xc in 0..w {
                                gin[[ic, y, xc]] = g[[ci, y * r + dy, xc * r + dx]];
                            }
                        }
                    }
                }
            }
            gin
        })
    }

    /// 2×2 max pooling with stride 2 over `[C, H, W]`. Gradients flow to the
    /// argmax of each block (first occurrence on ties).
    pub fn max_pool2(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "max_pool2 input must be [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = x.array();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, ho, wo]));
        let mut arg = vec![(0usize, 0usize, 0usize); c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xc in 0..wo {
                    let mut best = xv[[ci, 2 * y, 2 * xc]];
                    let mut at = (ci, 2 * y, 2 * xc);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = xv[[ci, 2 * y + dy, 2 * xc + dx]];
                        if v > best {
                            best = v;
                            at = (ci, 2 * y + dy, 2 * xc + dx);
                        }
                    }
                    out[[ci, y, xc]] = best;
                    arg[(ci * ho + y) * wo + xc] = at;
                }
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
            for (i, &(ac, ay, ax)) in arg.iter().enumerate() {
                let (ci, rest) = (i / (ho * wo), i % (ho * wo));
                gx[[ac, ay, ax]] = gx[[ac, ay, ax]] + g[[ci, rest / wo, rest % wo]];
            }
            gx
        })
    }

    /// Sample `img` (`[C, H, W]`) at continuous pixel coordinates
    /// (`px`, `py`, each `[N]` with `N = out_h * out_w`). Taps outside the
    /// image contribute zero. Returns the sampled map `[C, out_h, out_w]`
    /// and a validity mask (1 where the coordinate lies inside the image).
    pub fn bilinear_sample(
        &self,
        img: &Tensor<T>,
        px: &Tensor<T>,
        py: &Tensor<T>,
        out_h: usize,
        out_w: usize,
    ) -> (Tensor<T>, ArrayD<T>) {
        assert_eq!(img.shape().len(), 3, "bilinear_sample image must be [C,H,W]");
        let n = out_h * out_w;
        assert_eq!(px.shape(), &[n], "px must be [out_h * out_w]");
        assert_eq!(py.shape(), &[n], "py must be [out_h * out_w]");
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);

        let iv = img.share();
        let pxv = px.share();
        let pyv = py.share();
        let tap = |ci: usize, y: isize, x: isize| -> T {
            if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                iv[[ci, y as usize, x as usize]]
            } else {
                T::zero()
            }
        };
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, out_h, out_w]));
        let mut mask = ArrayD::<T>::zeros(IxDyn(&[out_h, out_w]));
        // Border tolerance: a coordinate a hair past the last pixel (from
        // floating-point noise in upstream projections) still counts as valid.
        let eps = 1e-6;
        for j in 0..n {
            let x = pxv[[j]].into_f64();
            let y = pyv[[j]].into_f64();
            let (oy, ox) = (j / out_w, j % out_w);
            if x >= -eps && x <= (w - 1) as f64 + eps && y >= -eps && y <= (h - 1) as f64 + eps {
                mask[[oy, ox]] = T::one();
            }
            let x0 = x.floor();
            let y0 = y.floor();
            let (fx, fy) = (T::from_f64(x - x0), T::from_f64(y - y0));
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ci in 0..c {
                let v00 = tap(ci, y0, x0);
                let v01 = tap(ci, y0, x0 + 1);
                let v10 = tap(ci, y0 + 1, x0);
                let v11 = tap(ci, y0 + 1, x0 + 1);
                let top = v00 * (T::one() - fx) + v01 * fx;
                let bot = v10 * (T::one() - fx) + v11 * fx;
                out[[ci, oy, ox]] = top * (T::one() - fy) + bot * fy;
            }
        }

        let iv2 = iv.clone();
        let pxv2 = pxv.clone();
        let pyv2 = pyv.clone();
        let sampled = self.record(
            out,
            vec![img.node(), px.node(), py.node()],
            Box::new(move |g, need| {
                let tap = |ci: usize, y: isize, x: isize| -> T {
                    if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                        iv2[[ci, y as usize, x as usize]]
                    } else {
                        T::zero()
                    }
                };
                let mut gi = need[0].then(|| ArrayD::<T>::zeros(IxDyn(&[c, h, w])));
                let mut gpx = need[1].then(|| ArrayD::<T>::zeros(IxDyn(&[n])));
                let mut gpy = need[2].then(|| ArrayD::<T>::zeros(IxDyn(&[n])));
                for j in 0..n {
                    let x = pxv2[[j]].into_f64();
                    let y = pyv2[[j]].into_f64();
                    let (oy, ox) = (j / out_w, j % out_w);
                    let x0f = x.floor();
                    let y0f = y.floor();
                    let (fx, fy) = (T::from_f64(x - x0f), T::from_f64(y - y0f));
                    let (x0, y0) = (x0f as isize, y0f as isize);
                    let mut dpx = T::zero();
                    let mut dpy = T::zero();
                    for ci in 0..c {
                        let gv = g[[ci, oy, ox]];
                        if gv == T::zero() {
                            continue;
                        }
                        let v00 = tap(ci, y0, x0);
                        let v01 = tap(ci, y0, x0 + 1);
                        let v10 = tap(ci, y0 + 1, x0);
                        let v11 = tap(ci, y0 + 1, x0 + 1);
                        if let Some(gi) = gi.as_mut() {
                            let mut add = |yy: isize, xx: isize, wgt: T| {
                                if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                                    let p = [ci, yy as usize, xx as usize];
                                    gi[p] = gi[p] + gv * wgt;
                                }
                            };
                            add(y0, x0, (T::one() - fx) * (T::one() - fy));
                            add(y0, x0 + 1, fx * (T::one() - fy));
                            add(y0 + 1, x0, (T::one() - fx) * fy);
                            add(y0 + 1, x0 + 1, fx * fy);
                        }
                        dpx = dpx
                            + gv * ((v01 - v00) * (T::one() - fy) + (v11 - v10) * fy);
                        dpy = dpy
                            + gv * ((v10 - v00) * (T::one() - fx) + (v11 - v01) * fx);
                    }
                    if let Some(gpx) = gpx.as_mut() {
                        gpx[[j]] = dpx;
                    }
                    if let Some(gpy) = gpy.as_mut() {
                        gpy[[j]] = dpy;
                    }
                }
                vec![gi, gpx, gpy]
            }),
        );
        (sampled, mask)
    }
}

type SliceTriple = (
    std::ops::Range<usize>,
    std::ops::Range<usize>,
    std::ops::Range<usize>,
    std::ops::Range<usize>,
    std::ops::Range<usize>,
    std::ops::Range<usize>,
);

/// Output/input slice ranges for a 3x3x3 kernel offset with padding 1.
fn overlap(c: usize, h: usize, w: usize, dz: usize, dy: usize, dx: usize) -> SliceTriple {
    let rng = |n: usize, d: usize| -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        // Output index o reads input index o + d - 1.
        match d {
            0 => (1..n, 0..n - 1),
            1 => (0..n, 0..n),
            _ => (0..n - 1, 1..n),
        }
    };
    let (oz, iz) = rng(c, dz);
    let (oy, iy) = rng(h, dy);
    let (ox, ix) = rng(w, dx);
    (oz, oy, ox, iz, iy, ix)
}

/// `block += sum_offsets w[d, dz, dy, dx] * shift(x)`.
fn accumulate_shifted<T: Element>(
    block: &mut ndarray::ArrayViewMut3<T>,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    d: usize,
    scale: T,
) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    for dz in 0..3usize {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let (oz, oy, ox, iz, iy, ix) = overlap(c, h, wd, dz, dy, dx);
                let wgt = w[[d, dz, dy, dx]] * scale;
                let src = x.slice(ndarray::s![iz, iy, ix]);
                let mut dst = block.slice_mut(ndarray::s![oz, oy, ox]);
                dst.scaled_add(wgt, &src);
            }
        }
    }
}

/// Transposed counterpart: `gx += sum_offsets w[d, dz, dy, dx] * unshift(g)`.
fn accumulate_shifted_flipped<T: Element>(
    gx: &mut ndarray::ArrayViewMut3<T>,
    g: &ArrayD<T>,
    w: &ArrayD<T>,
    d: usize,
) {
    let (c, h, wd) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    for dz in 0..3usize {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let (oz, oy, ox, iz, iy, ix) = overlap(c, h, wd, dz, dy, dx);
                let wgt = w[[d, dz, dy, dx]];
                // Forward wrote output[o] += w * input[i]; the transpose
                // scatters grad[o] into gx[i].
                let src = g.slice(ndarray::s![oz, oy, ox]);
                let mut dst = gx.slice_mut(ndarray::s![iz, iy, ix]);
                dst.scaled_add(wgt, &src);
            }
        }
    }
}

/// 2x average pooling of `[C, H, W]` (plain array, no gradient); used to
/// build image pyramids for losses that operate below full resolution.
pub fn avg_pool2<T: Element>(x: &ArrayD<T>) -> ArrayD<T> {
    assert_eq!(x.shape().len(), 3, "avg_pool2 expects [C,H,W]");
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let quarter = T::from_f64(0.25);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h / 2, w / 2]));
    for ci in 0..c {
        for y in 0..h / 2 {
            for xc in 0..w / 2 {
                out[[ci, y, xc]] = (x[[ci, 2 * y, 2 * xc]]
                    + x[[ci, 2 * y, 2 * xc + 1]]
                    + x[[ci, 2 * y + 1, 2 * xc]]
                    + x[[ci, 2 * y + 1, 2 * xc + 1]])
                    * quarter;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn arr(shape: &[usize], vals: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        let tape = Tape::<f64>::new();
        // 1x3x3 input, identity-ish 1x1x2x2 kernel, stride 1, no padding.
        let x = tape.leaf(arr(&[1, 3, 3], (1..=9).map(f64::from).collect()));
        let w = tape.leaf(arr(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(&x, &w, None, 1, 0);
        assert_eq!(y.shape(), &[1, 2, 2]);
        // Each output adds top-left and bottom-right of its 2x2 window.
        assert_eq!(y.array()[[0, 0, 0]], 1.0 + 5.0);
        assert_eq!(y.array()[[0, 1, 1]], 5.0 + 9.0);
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[3, 8, 10])));
        let w = tape.leaf(ArrayD::zeros(IxDyn(&[5, 3, 3, 3])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[5])));
        let y = tape.conv2d(&x, &w, Some(&b), 2, 1);
        assert_eq!(y.shape(), &[5, 4, 5]);
    }

    #[test]
    fn space_depth_roundtrip_ordering() {
        let tape = Tape::<f64>::new();
        // Single channel 2x2 block [a b; c d] must land in channels [a, b, c, d].
        let x = tape.leaf(arr(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.space_to_depth(&x, 2);
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(
            y.array().as_slice().unwrap(),
            &[1.0, 2.0, 3.0, 4.0],
            "channel order must be row-major over the block"
        );
        let z = tape.depth_to_space(&y, 2);
        assert_eq!(z.array(), x.array());
    }

    #[test]
    fn conv3d_expand_identity_kernel_replicates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr(&[2, 2, 2], (1..=8).map(f64::from).collect()));
        // Kernel with 1 at the center: output depth slice equals the input.
        let mut wv = vec![0.0; 2 * 27];
        wv[13] = 1.0; // d = 0, center
        wv[27 + 13] = 2.0; // d = 1, center, doubled
        let w = tape.leaf(arr(&[2, 3, 3, 3], wv));
        let b = tape.leaf(arr(&[2], vec![0.0, 0.0]));
        let y = tape.conv3d_expand(&x, &w, &b);
        assert_eq!(y.shape(), &[4, 2, 2]);
        assert_eq!(y.array()[[0, 0, 0]], 1.0);
        assert_eq!(y.array()[[1, 1, 1]], 8.0);
        assert_eq!(y.array()[[2, 0, 0]], 2.0);
        assert_eq!(y.array()[[3, 1, 1]], 16.0);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr(&[2, 1, 2], vec![1.0, 3.0, 10.0, 30.0]));
        let gamma = tape.leaf(arr(&[2], vec![1.0, 1.0]));
        let beta = tape.leaf(arr(&[2], vec![0.0, 0.0]));
        let y = tape.group_norm(&x, &gamma, &beta, 2, 1e-8);
        // Each group is its own channel here: outputs are +-1.
        for &v in y.array().iter() {
            assert!((v.abs() - 1.0).abs() < 1e-3, "got {v}");
        }
        let m = y.array().sum();
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn bilinear_sample_interpolates_and_masks() {
        let tape = Tape::<f64>::new();
        let img = tape.leaf(arr(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]));
        let px = tape.leaf(arr(&[2], vec![0.5, 5.0]));
        let py = tape.leaf(arr(&[2], vec![0.5, 0.0]));
        let (out, mask) = tape.bilinear_sample(&img, &px, &py, 1, 2);
        assert!((out.array()[[0, 0, 0]] - 1.5).abs() < 1e-12);
        assert_eq!(mask[[0, 0]], 1.0);
        assert_eq!(mask[[0, 1]], 0.0, "off-image sample must be flagged");
    }

    #[test]
    fn avg_pool2_halves_resolution() {
        let x = arr(&[1, 2, 4], (1..=8).map(f64::from).collect());
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y[[0, 0, 0]], (1.0 + 2.0 + 5.0 + 6.0) / 4.0);
    }

    #[test]
    fn max_pool2_takes_block_maxima_and_routes_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr(&[1, 2, 4], vec![1.0, 7.0, 2.0, 3.0, 5.0, 0.0, 4.0, 6.0]));
        let y = tape.max_pool2(&x);
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.array().as_slice().unwrap(), &[7.0, 6.0]);
        let loss = tape.sum(&y);
        let g = tape.backward(&loss);
        let gx = g.wrt(&x).unwrap();
        // Only the two maxima receive gradient.
        assert_eq!(
            gx.as_slice().unwrap(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }
}
