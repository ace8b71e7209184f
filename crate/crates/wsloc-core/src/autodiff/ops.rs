//! Forward rules for every differentiable primitive.
//!
//! Each constructor validates shapes and attribute ranges, rejects
//! non-finite inputs, computes the forward value and records the op so
//! `backward` can replay the chain rule. The matching backward rules live
//! in `backward.rs`; every kind here is covered by the finite-difference
//! checker in `gradcheck.rs`.

use std::rc::Rc;

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Floor applied to arguments of `log` so losses stay finite.
pub const LOG_EPS: f64 = 1e-8;

pub(crate) enum Op {
    Add,
    Mul,
    MaxElem,
    // `b` drops out of the derivative; kept so the record names the full op.
    ScalarAffine {
        a: f64,
        #[allow(dead_code)]
        b: f64,
    },
    Relu,
    Sigmoid,
    Exp,
    LogClamped { eps: f64 },
    Softmax,
    Sum,
    Pick { index: usize },
    SpatialAvg,
    ChannelGroupMean { group: usize },
    ChannelWeightedSum,
    SliceChannel { index: usize },
    RepeatChannel { copies: usize },
    Concat { sizes: Vec<usize> },
    Reshape,
    DropoutApply { mask: Rc<Vec<f64>> },
    TopKMean { alpha: f64, top: Vec<usize>, bottom: Vec<usize> },
    BilinearUpsample,
    Conv2d { stride: usize, pad: usize, cols: Vec<f64> },
    Linear,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(())
}

fn binary(
    op_name: &'static str,
    a: &Tensor,
    b: &Tensor,
    op: Op,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    same_shape(op_name, a, b)?;
    a.check_finite(op_name)?;
    b.check_finite(op_name)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_op(
        data,
        a.shape(),
        op,
        vec![a.clone(), b.clone()],
        false,
    ))
}

fn unary(
    op_name: &'static str,
    x: &Tensor,
    op: Op,
    f: impl Fn(f64) -> f64,
) -> Result<Tensor> {
    x.check_finite(op_name)?;
    let data = x.data().iter().map(|&v| f(v)).collect();
    Ok(Tensor::from_op(data, x.shape(), op, vec![x.clone()], false))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, Op::Add, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, Op::Mul, |a, b| a * b)
    }

    /// Elementwise maximum. Ties route the gradient to `self`.
    pub fn max_elem(&self, other: &Tensor) -> Result<Tensor> {
        binary("max", self, other, Op::MaxElem, f64::max)
    }

    /// `a * x + b` elementwise.
    pub fn scalar_affine(&self, a: f64, b: f64) -> Result<Tensor> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid("scalar_affine", "non-finite coefficient"));
        }
        unary("scalar_affine", self, Op::ScalarAffine { a, b }, |v| {
            a * v + b
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary("relu", self, Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, Op::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, Op::Exp, f64::exp)
    }

    /// Natural log with the argument clamped to at least [`LOG_EPS`], so the
    /// result never reaches -inf.
    pub fn log_clamped(&self) -> Result<Tensor> {
        unary("log", self, Op::LogClamped { eps: LOG_EPS }, |v| {
            v.max(LOG_EPS).ln()
        })
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(Error::invalid(
                "softmax",
                format!("expected non-empty rank-1 tensor, got {shape:?}"),
            ));
        }
        self.check_finite("softmax")?;
        let d = self.data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = d.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        drop(d);
        let data = exps.iter().map(|e| e / total).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Softmax,
            vec![self.clone()],
            false,
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        self.check_finite("sum")?;
        let s: f64 = self.data().iter().sum();
        Ok(Tensor::from_op(
            vec![s],
            vec![1],
            Op::Sum,
            vec![self.clone()],
            false,
        ))
    }

    /// Select one element of a rank-1 tensor, as a `[1]` tensor.
    pub fn pick(&self, index: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::invalid(
                "pick",
                format!("expected rank-1 tensor, got {shape:?}"),
            ));
        }
        if index >= shape[0] {
            return Err(Error::invalid(
                "pick",
                format!("index {index} out of range for length {}", shape[0]),
            ));
        }
        self.check_finite("pick")?;
        let v = self.data()[index];
        Ok(Tensor::from_op(
            vec![v],
            vec![1],
            Op::Pick { index },
            vec![self.clone()],
            false,
        ))
    }

    /// Global average over the spatial dims of a `(c, h, w)` tensor -> `[c]`.
    pub fn spatial_avg(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(Error::invalid(
                "spatial_avg",
                format!("expected non-empty (c,h,w) tensor, got {shape:?}"),
            ));
        }
        self.check_finite("spatial_avg")?;
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let d = self.data();
        let data = (0..c)
            .map(|k| d[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        drop(d);
        Ok(Tensor::from_op(
            data,
            vec![c],
            Op::SpatialAvg,
            vec![self.clone()],
            false,
        ))
    }

    /// Average groups of `group` consecutive channels:
    /// `(g*group, h, w)` -> `(g, h, w)`.
    pub fn channel_group_mean(&self, group: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 || group == 0 || !shape[0].is_multiple_of(group) {
            return Err(Error::invalid(
                "channel_group_mean",
                format!("cannot average {shape:?} in groups of {group}"),
            ));
        }
        self.check_finite("channel_group_mean")?;
        let (g, hw) = (shape[0] / group, shape[1] * shape[2]);
        let d = self.data();
        let mut data = vec![0.0; g * hw];
        for out_c in 0..g {
            for m in 0..group {
                let src = (out_c * group + m) * hw;
                for i in 0..hw {
                    data[out_c * hw + i] += d[src + i];
                }
            }
        }
        drop(d);
        let inv = 1.0 / group as f64;
        for v in &mut data {
            *v *= inv;
        }
        Ok(Tensor::from_op(
            data,
            vec![g, shape[1], shape[2]],
            Op::ChannelGroupMean { group },
            vec![self.clone()],
            false,
        ))
    }

    /// Weighted sum over the channel axis: `(c,h,w)` maps and `[c]` weights
    /// -> `(h,w)`. Differentiable in both arguments.
    pub fn channel_weighted_sum(maps: &Tensor, weights: &Tensor) -> Result<Tensor> {
        let ms = maps.shape();
        let ws = weights.shape();
        if ms.len() != 3 || ws.len() != 1 || ms[0] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "channel_weighted_sum",
                lhs: ms,
                rhs: ws,
            });
        }
        maps.check_finite("channel_weighted_sum")?;
        weights.check_finite("channel_weighted_sum")?;
        let (c, hw) = (ms[0], ms[1] * ms[2]);
        let md = maps.data();
        let wd = weights.data();
        let mut data = vec![0.0; hw];
        for k in 0..c {
            let w = wd[k];
            let src = &md[k * hw..(k + 1) * hw];
            for (o, &v) in data.iter_mut().zip(src) {
                *o += w * v;
            }
        }
        drop(md);
        drop(wd);
        Ok(Tensor::from_op(
            data,
            vec![ms[1], ms[2]],
            Op::ChannelWeightedSum,
            vec![maps.clone(), weights.clone()],
            false,
        ))
    }

    /// Extract channel `index` of a `(c,h,w)` tensor as `(h,w)`.
    pub fn slice_channel(&self, index: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 || index >= shape[0] {
            return Err(Error::invalid(
                "slice_channel",
                format!("channel {index} invalid for shape {shape:?}"),
            ));
        }
        self.check_finite("slice_channel")?;
        let hw = shape[1] * shape[2];
        let data = self.data()[index * hw..(index + 1) * hw].to_vec();
        Ok(Tensor::from_op(
            data,
            vec![shape[1], shape[2]],
            Op::SliceChannel { index },
            vec![self.clone()],
            false,
        ))
    }

    /// Broadcast a `(h,w)` tensor to `(copies,h,w)`.
    pub fn repeat_channel(&self, copies: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || copies == 0 {
            return Err(Error::invalid(
                "repeat_channel",
                format!("cannot repeat shape {shape:?} x{copies}"),
            ));
        }
        self.check_finite("repeat_channel")?;
        let d = self.data();
        let mut data = Vec::with_capacity(d.len() * copies);
        for _ in 0..copies {
            data.extend_from_slice(&d);
        }
        drop(d);
        Ok(Tensor::from_op(
            data,
            vec![copies, shape[0], shape[1]],
            Op::RepeatChannel { copies },
            vec![self.clone()],
            false,
        ))
    }

    /// Concatenate along axis 0. All parts must agree on trailing dims.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = parts[0].shape();
        let mut axis0 = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            p.check_finite("concat")?;
            axis0 += s[0];
            sizes.push(s[0]);
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let mut shape = first;
        shape[0] = axis0;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Concat { sizes },
            parts.to_vec(),
            false,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape()),
            ));
        }
        self.check_finite("reshape")?;
        Ok(Tensor::from_op(
            self.data_vec(),
            shape.to_vec(),
            Op::Reshape,
            vec![self.clone()],
            false,
        ))
    }

    /// Multiply by a fixed dropout mask whose kept entries already carry the
    /// `1/(1-rate)` scale. The mask is an attribute, not a graph input.
    pub fn dropout_apply(&self, mask: Rc<Vec<f64>>) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::invalid(
                "dropout_apply",
                format!(
                    "mask length {} does not match tensor {:?}",
                    mask.len(),
                    self.shape()
                ),
            ));
        }
        self.check_finite("dropout_apply")?;
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape(),
            Op::DropoutApply { mask },
            vec![self.clone()],
            false,
        ))
    }

    /// Mean of the top `ceil(kmax*n)` elements plus `alpha` times the mean of
    /// the bottom `ceil(kmin*n)` elements, as a `[1]` tensor. Ties are broken
    /// by flat index so the selection is deterministic.
    pub fn top_k_mean(&self, kmax: f64, kmin: f64, alpha: f64) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::invalid("top_k_mean", "empty tensor"));
        }
        for (name, k) in [("kmax", kmax), ("kmin", kmin)] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::invalid(
                    "top_k_mean",
                    format!("{name}={k} outside (0,1]"),
                ));
            }
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid("top_k_mean", format!("alpha={alpha}")));
        }
        self.check_finite("top_k_mean")?;

        let d = self.data();
        let mut order: Vec<usize> = (0..n).collect();
        // Descending by value, ascending by index on ties.
        order.sort_by(|&i, &j| {
            d[j].partial_cmp(&d[i])
                .expect("finite values")
                .then(i.cmp(&j))
        });
        let k_top = (kmax * n as f64).ceil() as usize;
        let top: Vec<usize> = order[..k_top].to_vec();
        let mut value = top.iter().map(|&i| d[i]).sum::<f64>() / k_top as f64;

        let bottom = if alpha != 0.0 {
            let k_bot = (kmin * n as f64).ceil() as usize;
            let mut asc: Vec<usize> = (0..n).collect();
            asc.sort_by(|&i, &j| {
                d[i].partial_cmp(&d[j])
                    .expect("finite values")
                    .then(i.cmp(&j))
            });
            let bottom: Vec<usize> = asc[..k_bot].to_vec();
            value += alpha * bottom.iter().map(|&i| d[i]).sum::<f64>() / k_bot as f64;
            bottom
        } else {
            Vec::new()
        };
        drop(d);

        Ok(Tensor::from_op(
            vec![value],
            vec![1],
            Op::TopKMean { alpha, top, bottom },
            vec![self.clone()],
            false,
        ))
    }

    /// Align-corners bilinear interpolation of a `(h,w)` or `(c,h,w)` tensor
    /// to `(out_h, out_w)`. With `detach` the result is cut out of the
    /// gradient graph: backward propagates exactly zero to the input.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize, detach: bool) -> Result<Tensor> {
        let shape = self.shape();
        let (c, in_h, in_w) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => {
                return Err(Error::invalid(
                    "bilinear_upsample",
                    format!("expected rank-2 or rank-3 tensor, got {shape:?}"),
                ))
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_upsample", "zero-sized target"));
        }
        if out_h < in_h || out_w < in_w {
            return Err(Error::invalid(
                "bilinear_upsample",
                format!("target {out_h}x{out_w} smaller than input {in_h}x{in_w}"),
            ));
        }
        self.check_finite("bilinear_upsample")?;

        let ys = axis_lerp(in_h, out_h);
        let xs = axis_lerp(in_w, out_w);
        let d = self.data();
        let mut data = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &d[ch * in_h * in_w..(ch + 1) * in_h * in_w];
            let dst = &mut data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let v00 = src[y0 * in_w + x0];
                    let v01 = src[y0 * in_w + x1];
                    let v10 = src[y1 * in_w + x0];
                    let v11 = src[y1 * in_w + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    dst[oy * out_w + ox] = top + (bot - top) * wy;
                }
            }
        }
        drop(d);
        let out_shape = if shape.len() == 2 {
            vec![out_h, out_w]
        } else {
            vec![c, out_h, out_w]
        };
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::BilinearUpsample,
            vec![self.clone()],
            detach,
        ))
    }

    /// 2-D convolution of a single `(c_in, h, w)` image with weights
    /// `(c_out, c_in, k, k)` and bias `[c_out]`.
    pub fn conv2d(
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let xs = x.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if xs[0] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != vec![ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![ws[0]],
                rhs: bs,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} too large for padded input {h}x{w} (pad {pad})"),
            ));
        }
        x.check_finite("conv2d")?;
        weight.check_finite("conv2d")?;
        bias.check_finite("conv2d")?;

        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let cols = im2col(&x.data(), c_in, h, w, k, stride, pad, out_h, out_w);

        // (c_out, c_in*k*k) x (c_in*k*k, out_h*out_w)
        let rows = c_in * k * k;
        let l = out_h * out_w;
        let wd = weight.data();
        let wv = ArrayView2::from_shape((c_out, rows), &wd[..]).expect("weight view");
        let cv = ArrayView2::from_shape((rows, l), &cols[..]).expect("cols view");
        let prod = wv.dot(&cv);
        drop(wd);
        let bd = bias.data();
        let mut data = Vec::with_capacity(c_out * l);
        for (o, row) in prod.rows().into_iter().enumerate() {
            data.extend(row.iter().map(|v| v + bd[o]));
        }
        drop(bd);

        Ok(Tensor::from_op(
            data,
            vec![c_out, out_h, out_w],
            Op::Conv2d { stride, pad, cols },
            vec![x.clone(), weight.clone(), bias.clone()],
            false,
        ))
    }

    /// Fully-connected layer: `[n]` input, `(m, n)` weight, `[m]` bias.
    pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != vec![ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![ws[0]],
                rhs: bs,
            });
        }
        x.check_finite("linear")?;
        weight.check_finite("linear")?;
        bias.check_finite("linear")?;
        let (m, n) = (ws[0], ws[1]);
        let wd = weight.data();
        let xd = x.data();
        let wv = ArrayView2::from_shape((m, n), &wd[..]).expect("weight view");
        let xv = ArrayView1::from_shape(n, &xd[..]).expect("input view");
        let y = wv.dot(&xv);
        drop(wd);
        drop(xd);
        let bd = bias.data();
        let data = y.iter().zip(bd.iter()).map(|(v, b)| v + b).collect();
        drop(bd);
        Ok(Tensor::from_op(
            data,
            vec![m],
            Op::Linear,
            vec![x.clone(), weight.clone(), bias.clone()],
            false,
        ))
    }
}

/// Per-axis align-corners interpolation table: (low index, high index, weight).
pub(crate) fn axis_lerp(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            if in_len == 1 || out_len == 1 {
                (0, 0, 0.0)
            } else {
                let src = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
                let lo = (src.floor() as usize).min(in_len - 1);
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, src - lo as f64)
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let l = out_h * out_w;
    let mut cols = vec![0.0; c_in * k * k * l];
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * out_w + ox] = plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}
