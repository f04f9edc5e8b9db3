//! Elementwise, reduction, and shape operations on the tape.
//!
//! Binary arithmetic supports equal shapes or one zero-dimensional operand;
//! anything fancier is a bug in the caller, so it panics.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

use super::{scalar_array, Element, Tape, Tensor};

fn one_scalar<T: Element>(a: &ArrayD<T>) -> Option<T> {
    (a.len() == 1).then(|| *a.iter().next().unwrap())
}

fn bin_map<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    if a.shape() == b.shape() {
        Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
    } else if let Some(s) = one_scalar(b) {
        a.mapv(|x| f(x, s))
    } else if let Some(s) = one_scalar(a) {
        b.mapv(|y| f(s, y))
    } else {
        panic!(
            "incompatible shapes for elementwise op: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
}

/// Reduce a gradient to the shape of a (possibly scalar) operand.
fn reduce_like<T: Element>(grad: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        grad
    } else {
        ArrayD::from_elem(IxDyn(shape), grad.sum())
    }
}

impl<T: Element> Tape<T> {
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let data = bin_map(a.array(), b.array(), |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record(
            data,
            vec![a.node(), b.node()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_like(g.clone(), &sa)),
                    need[1].then(|| reduce_like(g.clone(), &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let data = bin_map(a.array(), b.array(), |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record(
            data,
            vec![a.node(), b.node()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_like(g.clone(), &sa)),
                    need[1].then(|| reduce_like(g.mapv(|v| -v), &sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let data = bin_map(a.array(), b.array(), |x, y| x * y);
        let (av, bv) = (a.share(), b.share());
        self.record(
            data,
            vec![a.node(), b.node()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_like(bin_map(g, &bv, |gi, y| gi * y), av.shape())),
                    need[1].then(|| reduce_like(bin_map(g, &av, |gi, x| gi * x), bv.shape())),
                ]
            }),
        )
    }

    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let data = bin_map(a.array(), b.array(), |x, y| x / y);
        let (av, bv) = (a.share(), b.share());
        self.record(
            data,
            vec![a.node(), b.node()],
            Box::new(move |g, need| {
                let ga = need[0].then(|| reduce_like(bin_map(g, &bv, |gi, y| gi / y), av.shape()));
                let gb = need[1].then(|| {
                    let t = bin_map(&bin_map(g, &av, |gi, x| gi * x), &bv, |n, y| -n / (y * y));
                    reduce_like(t, bv.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.shape(), b.shape(), "minimum: shape mismatch");
        let data = bin_map(a.array(), b.array(), |x, y| if x <= y { x } else { y });
        let (av, bv) = (a.share(), b.share());
        self.record(
            data,
            vec![a.node(), b.node()],
            Box::new(move |g, need| {
                let pick_a = Zip::from(&*av)
                    .and(&*bv)
                    .map_collect(|&x, &y| if x <= y { T::one() } else { T::zero() });
                let ga = need[0].then(|| bin_map(g, &pick_a, |gi, p| gi * p));
                let gb = need[1].then(|| bin_map(g, &pick_a, |gi, p| gi * (T::one() - p)));
                vec![ga, gb]
            }),
        )
    }

    pub fn neg(&self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(x, x.array().mapv(|v| -v), |g, _| g.mapv(|v| -v))
    }

    pub fn add_scalar(&self, x: &Tensor<T>, c: T) -> Tensor<T> {
        self.unary(x, x.array().mapv(|v| v + c), |g, _| g.clone())
    }

    pub fn mul_scalar(&self, x: &Tensor<T>, c: T) -> Tensor<T> {
        self.unary(x, x.array().mapv(|v| v * c), move |g, _| g.mapv(|v| v * c))
    }

    pub fn abs(&self, x: &Tensor<T>) -> Tensor<T> {
        let xv = x.share();
        self.unary(x, x.array().mapv(|v| v.abs()), move |g, _| {
            Zip::from(g).and(&*xv).map_collect(|&gi, &v| gi * sign(v))
        })
    }

    pub fn exp(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.array().mapv(|v| v.exp());
        let yv = data.clone();
        self.unary(x, data, move |g, _| {
            Zip::from(g).and(&yv).map_collect(|&gi, &y| gi * y)
        })
    }

    pub fn sqrt(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.array().mapv(|v| v.sqrt());
        let yv = data.clone();
        let half = T::from_f64(0.5);
        self.unary(x, data, move |g, _| {
            Zip::from(g).and(&yv).map_collect(|&gi, &y| gi * half / y)
        })
    }

    pub fn recip(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.array().mapv(|v| T::one() / v);
        let yv = data.clone();
        self.unary(x, data, move |g, _| {
            Zip::from(g).and(&yv).map_collect(|&gi, &y| -gi * y * y)
        })
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.array().mapv(|v| T::one() / (T::one() + (-v).exp()));
        let yv = data.clone();
        self.unary(x, data, move |g, _| {
            Zip::from(g)
                .and(&yv)
                .map_collect(|&gi, &y| gi * y * (T::one() - y))
        })
    }

    pub fn relu(&self, x: &Tensor<T>) -> Tensor<T> {
        let xv = x.share();
        let data = x.array().mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(x, data, move |g, _| {
            Zip::from(g)
                .and(&*xv)
                .map_collect(|&gi, &v| if v > T::zero() { gi } else { T::zero() })
        })
    }

    /// ELU with alpha = 1.
    pub fn elu(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x
            .array()
            .mapv(|v| if v > T::zero() { v } else { v.exp() - T::one() });
        let yv = data.clone();
        self.unary(x, data, move |g, _| {
            Zip::from(g).and(&yv).map_collect(|&gi, &y| {
                if y > T::zero() {
                    gi
                } else {
                    gi * (y + T::one())
                }
            })
        })
    }

    /// max(x, c); gradient is blocked where the clamp is active.
    pub fn clamp_min(&self, x: &Tensor<T>, c: T) -> Tensor<T> {
        let xv = x.share();
        let data = x.array().mapv(|v| if v > c { v } else { c });
        self.unary(x, data, move |g, _| {
            Zip::from(g)
                .and(&*xv)
                .map_collect(|&gi, &v| if v > c { gi } else { T::zero() })
        })
    }

    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape().to_vec();
        self.unary(x, scalar_array(x.array().sum()), move |g, _| {
            ArrayD::from_elem(IxDyn(&shape), *g.iter().next().unwrap())
        })
    }

    pub fn mean(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.array().len();
        let shape = x.shape().to_vec();
        let inv_n = T::from_f64(1.0 / n as f64);
        let data = scalar_array(x.array().sum() * inv_n);
        self.unary(x, data, move |g, _| {
            ArrayD::from_elem(IxDyn(&shape), *g.iter().next().unwrap() * inv_n)
        })
    }

    /// Mean over elements where `mask` is nonzero. Returns a constant zero
    /// when the mask is empty (the caller should flag that case).
    pub fn mean_where(&self, x: &Tensor<T>, mask: &ArrayD<T>) -> Tensor<T> {
        assert_eq!(x.shape(), mask.shape(), "mean_where: shape mismatch");
        let count = mask.iter().filter(|&&m| m != T::zero()).count();
        if count == 0 {
            return self.scalar(T::zero());
        }
        let inv_n = T::from_f64(1.0 / count as f64);
        let total = Zip::from(x.array())
            .and(mask)
            .fold(T::zero(), |acc, &v, &m| {
                if m != T::zero() {
                    acc + v
                } else {
                    acc
                }
            });
        let maskc = mask.clone();
        self.unary(x, scalar_array(total * inv_n), move |g, _| {
            let gs = *g.iter().next().unwrap() * inv_n;
            maskc.mapv(|m| if m != T::zero() { gs } else { T::zero() })
        })
    }

    /// `[C, H, W] -> [H, W]` channel average.
    pub fn mean_channels(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "mean_channels expects [C,H,W]");
        let c = x.shape()[0];
        let inv_c = T::from_f64(1.0 / c as f64);
        let data = x.array().sum_axis(Axis(0)).mapv(|v| v * inv_c);
        self.unary(x, data, move |g, _| {
            let mut out = ArrayD::zeros(IxDyn(&[c, g.shape()[0], g.shape()[1]]));
            for mut ch in out.axis_iter_mut(Axis(0)) {
                ch.assign(&g.mapv(|v| v * inv_c));
            }
            out
        })
    }

    /// `[C, H, W] -> [C]` spatial average.
    pub fn mean_spatial(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "mean_spatial expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let inv_n = T::from_f64(1.0 / (h * w) as f64);
        let data = x
            .array()
            .sum_axis(Axis(2))
            .sum_axis(Axis(1))
            .mapv(|v| v * inv_n)
            .into_dyn();
        self.unary(x, data, move |g, _| {
            let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
            for (i, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
                ch.fill(g[[i]] * inv_n);
            }
            out
        })
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        assert_eq!(x.array().len(), n, "reshape: element count mismatch");
        let old_shape = x.shape().to_vec();
        let data = ArrayD::from_shape_vec(IxDyn(shape), x.array().iter().copied().collect())
            .expect("reshape");
        self.unary(x, data, move |g, _| {
            ArrayD::from_shape_vec(IxDyn(&old_shape), g.iter().copied().collect())
                .expect("reshape backward")
        })
    }

    /// Concatenate along axis 0.
    pub fn concat0(&self, parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat0: empty input list");
        let views: Vec<_> = parts.iter().map(|t| t.array().view()).collect();
        let data = concatenate(Axis(0), &views).expect("concat0: incompatible shapes");
        let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[0]).collect();
        let parents: Vec<Option<usize>> = parts.iter().map(|t| t.node()).collect();
        self.record(
            data,
            parents,
            Box::new(move |g, need| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for (i, &len) in sizes.iter().enumerate() {
                    out.push(need[i].then(|| {
                        g.slice_axis(Axis(0), Slice::from(start..start + len))
                            .to_owned()
                    }));
                    start += len;
                }
                out
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let full = x.shape().to_vec();
        assert!(start + len <= full[axis], "narrow out of bounds");
        let data = x
            .array()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.unary(x, data, move |g, _| {
            let mut out = ArrayD::zeros(IxDyn(&full));
            out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            out
        })
    }

    /// Integer-factor nearest-neighbor upsampling of the last two axes.
    pub fn upsample_nearest(&self, x: &Tensor<T>, factor: usize) -> Tensor<T> {
        assert!(factor >= 1);
        if factor == 1 {
            return x.clone();
        }
        let ndim = x.shape().len();
        assert!(ndim >= 2, "upsample_nearest expects at least 2 axes");
        let (h, w) = (x.shape()[ndim - 2], x.shape()[ndim - 1]);
        let lead: usize = x.shape()[..ndim - 2].iter().product();
        let mut out_shape = x.shape().to_vec();
        out_shape[ndim - 2] = h * factor;
        out_shape[ndim - 1] = w * factor;

        let xs: Vec<T> = x.array().iter().copied().collect();
        let mut out = vec![T::zero(); lead * h * factor * w * factor];
        for l in 0..lead {
            for y in 0..h * factor {
                let sy = y / factor;
                let src_row = (l * h + sy) * w;
                let dst_row = (l * h * factor + y) * w * factor;
                for xcol in 0..w * factor {
                    out[dst_row + xcol] = xs[src_row + xcol / factor];
                }
            }
        }
        let data = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let in_shape = x.shape().to_vec();
        self.unary(x, data, move |g, _| {
            let gs: Vec<T> = g.iter().copied().collect();
            let mut gin = vec![T::zero(); lead * h * w];
            for l in 0..lead {
                for y in 0..h * factor {
                    let sy = y / factor;
                    let src_row = (l * h + sy) * w;
                    let dst_row = (l * h * factor + y) * w * factor;
                    for xcol in 0..w * factor {
                        gin[src_row + xcol / factor] =
                            gin[src_row + xcol / factor] + gs[dst_row + xcol];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&in_shape), gin).unwrap()
        })
    }

    /// Bilinear resize of `[C, H, W]` with edge clamping (half-pixel centers).
    pub fn resize_bilinear(&self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "resize_bilinear expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        // Precompute per-axis taps.
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|i| {
                    let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .clamp(0.0, (n_in - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let xv = x.array();
        let mut out = ArrayD::zeros(IxDyn(&[c, out_h, out_w]));
        for ci in 0..c {
            for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = xv[[ci, y0, x0]].into_f64();
                    let v01 = xv[[ci, y0, x1]].into_f64();
                    let v10 = xv[[ci, y1, x0]].into_f64();
                    let v11 = xv[[ci, y1, x1]].into_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[[ci, yo, xo]] = T::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g[[ci, yo, xo]].into_f64();
                        gin[[ci, y0, x0]] =
                            gin[[ci, y0, x0]] + T::from_f64(gv * (1.0 - fx) * (1.0 - fy));
                        gin[[ci, y0, x1]] = gin[[ci, y0, x1]] + T::from_f64(gv * fx * (1.0 - fy));
                        gin[[ci, y1, x0]] = gin[[ci, y1, x0]] + T::from_f64(gv * (1.0 - fx) * fy);
                        gin[[ci, y1, x1]] = gin[[ci, y1, x1]] + T::from_f64(gv * fx * fy);
                    }
                }
            }
            gin
        })
    }

    /// Reflect-pad the last two axes of `[C, H, W]` by one pixel.
    pub fn pad_reflect1(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "pad_reflect1 expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h >= 2 && w >= 2, "pad_reflect1 needs at least 2x2 input");
        let refl = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let xv = x.array();
        let mut out = ArrayD::zeros(IxDyn(&[c, h + 2, w + 2]));
        for ci in 0..c {
            for y in 0..h + 2 {
                let sy = refl(y as isize - 1, h);
                for xc in 0..w + 2 {
                    out[[ci, y, xc]] = xv[[ci, sy, refl(xc as isize - 1, w)]];
                }
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for y in 0..h + 2 {
                    let sy = refl(y as isize - 1, h);
                    for xc in 0..w + 2 {
                        let sx = refl(xc as isize - 1, w);
                        gin[[ci, sy, sx]] = gin[[ci, sy, sx]] + g[[ci, y, xc]];
                    }
                }
            }
            gin
        })
    }

    /// Valid 3x3 box mean over `[C, H, W]` (stride 1): output `[C, H-2, W-2]`.
    pub fn box_mean3(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 3, "box_mean3 expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h >= 3 && w >= 3, "box_mean3 needs at least 3x3 input");
        let ninth = T::from_f64(1.0 / 9.0);
        let xv = x.array();
        let mut out = ArrayD::zeros(IxDyn(&[c, h - 2, w - 2]));
        for ci in 0..c {
            for y in 0..h - 2 {
                for xc in 0..w - 2 {
                    let mut s = T::zero();
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s = s + xv[[ci, y + dy, xc + dx]];
                        }
                    }
                    out[[ci, y, xc]] = s * ninth;
                }
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for y in 0..h - 2 {
                    for xc in 0..w - 2 {
                        let gv = g[[ci, y, xc]] * ninth;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                gin[[ci, y + dy, xc + dx]] = gin[[ci, y + dy, xc + dx]] + gv;
                            }
                        }
                    }
                }
            }
            gin
        })
    }

    /// First differences along rows of `[H, W]`: output `[H-1, W]`.
    pub fn diff_h(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 2, "diff_h expects [H,W]");
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let xv = x.array();
        let mut out = ArrayD::zeros(IxDyn(&[h - 1, w]));
        for y in 0..h - 1 {
            for xc in 0..w {
                out[[y, xc]] = xv[[y + 1, xc]] - xv[[y, xc]];
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::zeros(IxDyn(&[h, w]));
            for y in 0..h - 1 {
                for xc in 0..w {
                    gin[[y + 1, xc]] = gin[[y + 1, xc]] + g[[y, xc]];
                    gin[[y, xc]] = gin[[y, xc]] - g[[y, xc]];
                }
            }
            gin
        })
    }

    /// First differences along columns of `[H, W]`: output `[H, W-1]`.
    pub fn diff_w(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 2, "diff_w expects [H,W]");
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let xv = x.array();
        let mut out = ArrayD::zeros(IxDyn(&[h, w - 1]));
        for y in 0..h {
            for xc in 0..w - 1 {
                out[[y, xc]] = xv[[y, xc + 1]] - xv[[y, xc]];
            }
        }
        self.unary(x, out, move |g, _| {
            let mut gin = ArrayD::zeros(IxDyn(&[h, w]));
            for y in 0..h {
                for xc in 0..w - 1 {
                    gin[[y, xc + 1]] = gin[[y, xc + 1]] + g[[y, xc]];
                    gin[[y, xc]] = gin[[y, xc]] - g[[y, xc]];
                }
            }
            gin
        })
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.shape().len(), 2);
        assert_eq!(b.shape().len(), 2);
        assert_eq!(a.shape()[1], b.shape()[0], "matmul: inner dim mismatch");
        let a2 = a
            .array()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b2 = b
            .array()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let data = a2.dot(&b2).into_dyn();
        let (av, bv) = (a.share(), b.share());
        self.record(
            data,
            vec![a.node(), b.node()],
            Box::new(move |g, need| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    need[0].then(|| g2.dot(&b2.t()).into_dyn()),
                    need[1].then(|| a2.t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }

    /// Add a column vector `[r]` to every column of `[r, n]`.
    pub fn add_col(&self, x: &Tensor<T>, col: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape().len(), 2);
        assert_eq!(col.shape(), &[x.shape()[0]], "add_col: shape mismatch");
        let mut data = x.array().clone();
        for (mut row, &c) in data.axis_iter_mut(Axis(0)).zip(col.array().iter()) {
            row.mapv_inplace(|v| v + c);
        }
        self.record(
            data,
            vec![x.node(), col.node()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.sum_axis(Axis(1)).into_dyn()),
                ]
            }),
        )
    }

    pub(crate) fn unary(
        &self,
        x: &Tensor<T>,
        data: ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &[bool]) -> ArrayD<T> + 'static,
    ) -> Tensor<T> {
        self.record(
            data,
            vec![x.node()],
            Box::new(move |g, need| vec![need[0].then(|| back(g, need))]),
        )
    }
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
