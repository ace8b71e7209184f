//! Reverse-mode gradient propagation.
//!
//! `backward` walks the graph from a scalar loss in reverse topological
//! order and applies one chain-rule step per primitive. Gradients
//! accumulate additively into each node, so calling `backward` twice
//! without zeroing doubles every gradient — the training loop relies on
//! that for per-step gradient accumulation. Detached nodes stop the walk:
//! their parents receive exactly zero contribution through them.

use std::collections::HashSet;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

use super::ops::Op;
use super::tensor::Tensor;

/// Propagate d`loss`/d`node` into every reachable node that requires grad.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::invalid(
            "backward",
            format!("loss must be scalar-shaped, got {:?}", loss.shape()),
        ));
    }
    if !loss.requires_grad() {
        // Nothing reachable collects gradient; a no-op, not an error.
        return Ok(());
    }

    let order = topo_order(loss);
    // Interior grads are scratch space for this pass; only leaves keep
    // accumulating across calls.
    for node in &order {
        if node.0.borrow().op.is_some() {
            node.zero_grad();
        }
    }
    loss.accumulate_grad(&[1.0]);

    for node in order.iter().rev() {
        propagate(node)?;
    }
    Ok(())
}

/// Post-order DFS over the subgraph that requires grad. Parents of detached
/// nodes are not entered, which is what makes detachment cut the flow.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if node.is_detached() || !node.requires_grad() {
            continue;
        }
        let inner = node.0.borrow();
        if let Some(rec) = &inner.op {
            for p in &rec.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn propagate(node: &Tensor) -> Result<()> {
    if node.is_detached() {
        return Ok(());
    }
    let inner = node.0.borrow();
    let Some(rec) = &inner.op else {
        return Ok(());
    };
    let Some(grad) = inner.grad.clone() else {
        return Ok(());
    };
    let data = inner.data.clone();
    let shape = inner.shape.clone();

    match &rec.op {
        Op::Add => {
            for p in &rec.parents {
                if p.requires_grad() {
                    p.accumulate_grad(&grad);
                }
            }
        }
        Op::Mul => {
            let (a, b) = (&rec.parents[0], &rec.parents[1]);
            if a.requires_grad() {
                let bd = b.data();
                let g: Vec<f64> = grad.iter().zip(bd.iter()).map(|(g, v)| g * v).collect();
                drop(bd);
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                let ad = a.data();
                let g: Vec<f64> = grad.iter().zip(ad.iter()).map(|(g, v)| g * v).collect();
                drop(ad);
                b.accumulate_grad(&g);
            }
        }
        Op::MaxElem => {
            let (a, b) = (&rec.parents[0], &rec.parents[1]);
            let ad = a.data().to_vec();
            let bd = b.data().to_vec();
            if a.requires_grad() {
                let g: Vec<f64> = grad
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(g, (x, y))| if x >= y { *g } else { 0.0 })
                    .collect();
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                let g: Vec<f64> = grad
                    .iter()
                    .zip(ad.iter().zip(&bd))
                    .map(|(g, (x, y))| if x >= y { 0.0 } else { *g })
                    .collect();
                b.accumulate_grad(&g);
            }
        }
        Op::ScalarAffine { a, .. } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let g: Vec<f64> = grad.iter().map(|g| g * a).collect();
                p.accumulate_grad(&g);
            }
        }
        Op::Relu => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let pd = p.data();
                let g: Vec<f64> = grad
                    .iter()
                    .zip(pd.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                drop(pd);
                p.accumulate_grad(&g);
            }
        }
        Op::Sigmoid => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let g: Vec<f64> = grad
                    .iter()
                    .zip(data.iter())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                p.accumulate_grad(&g);
            }
        }
        Op::Exp => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let g: Vec<f64> = grad.iter().zip(data.iter()).map(|(g, y)| g * y).collect();
                p.accumulate_grad(&g);
            }
        }
        Op::LogClamped { eps } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let pd = p.data();
                // Below the clamp the forward is constant, so the true
                // derivative there is zero.
                let g: Vec<f64> = grad
                    .iter()
                    .zip(pd.iter())
                    .map(|(g, x)| if *x > *eps { g / x } else { 0.0 })
                    .collect();
                drop(pd);
                p.accumulate_grad(&g);
            }
        }
        Op::Softmax => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let dot: f64 = grad.iter().zip(data.iter()).map(|(g, y)| g * y).sum();
                let g: Vec<f64> = grad
                    .iter()
                    .zip(data.iter())
                    .map(|(g, y)| y * (g - dot))
                    .collect();
                p.accumulate_grad(&g);
            }
        }
        Op::Sum => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let g = vec![grad[0]; p.numel()];
                p.accumulate_grad(&g);
            }
        }
        Op::Pick { index } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let mut g = vec![0.0; p.numel()];
                g[*index] = grad[0];
                p.accumulate_grad(&g);
            }
        }
        Op::SpatialAvg => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let ps = p.shape();
                let hw = ps[1] * ps[2];
                let inv = 1.0 / hw as f64;
                let mut g = vec![0.0; p.numel()];
                for c in 0..ps[0] {
                    let gc = grad[c] * inv;
                    for v in &mut g[c * hw..(c + 1) * hw] {
                        *v = gc;
                    }
                }
                p.accumulate_grad(&g);
            }
        }
        Op::ChannelGroupMean { group } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let hw = shape[1] * shape[2];
                let inv = 1.0 / *group as f64;
                let mut g = vec![0.0; p.numel()];
                for out_c in 0..shape[0] {
                    for m in 0..*group {
                        let dst = (out_c * group + m) * hw;
                        for i in 0..hw {
                            g[dst + i] = grad[out_c * hw + i] * inv;
                        }
                    }
                }
                p.accumulate_grad(&g);
            }
        }
        Op::ChannelWeightedSum => {
            let (maps, weights) = (&rec.parents[0], &rec.parents[1]);
            let ms = maps.shape();
            let (c, hw) = (ms[0], ms[1] * ms[2]);
            if maps.requires_grad() {
                let wd = weights.data();
                let mut g = vec![0.0; c * hw];
                for k in 0..c {
                    let w = wd[k];
                    for i in 0..hw {
                        g[k * hw + i] = grad[i] * w;
                    }
                }
                drop(wd);
                maps.accumulate_grad(&g);
            }
            if weights.requires_grad() {
                let md = maps.data();
                let mut g = vec![0.0; c];
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = grad
                        .iter()
                        .zip(&md[k * hw..(k + 1) * hw])
                        .map(|(gi, mi)| gi * mi)
                        .sum();
                }
                drop(md);
                weights.accumulate_grad(&g);
            }
        }
        Op::SliceChannel { index } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let hw = shape[0] * shape[1];
                let mut g = vec![0.0; p.numel()];
                g[index * hw..(index + 1) * hw].copy_from_slice(&grad);
                p.accumulate_grad(&g);
            }
        }
        Op::RepeatChannel { copies } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let hw = p.numel();
                let mut g = vec![0.0; hw];
                for c in 0..*copies {
                    for i in 0..hw {
                        g[i] += grad[c * hw + i];
                    }
                }
                p.accumulate_grad(&g);
            }
        }
        Op::Concat { sizes } => {
            let stride: usize = shape[1..].iter().product();
            let mut offset = 0;
            for (p, &sz) in rec.parents.iter().zip(sizes) {
                let span = sz * stride;
                if p.requires_grad() {
                    p.accumulate_grad(&grad[offset..offset + span]);
                }
                offset += span;
            }
        }
        Op::Reshape => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                p.accumulate_grad(&grad);
            }
        }
        Op::DropoutApply { mask } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let g: Vec<f64> = grad.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                p.accumulate_grad(&g);
            }
        }
        Op::TopKMean { alpha, top, bottom } => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let mut g = vec![0.0; p.numel()];
                let w_top = grad[0] / top.len() as f64;
                for &i in top {
                    g[i] += w_top;
                }
                if *alpha != 0.0 && !bottom.is_empty() {
                    let w_bot = grad[0] * alpha / bottom.len() as f64;
                    for &i in bottom {
                        g[i] += w_bot;
                    }
                }
                p.accumulate_grad(&g);
            }
        }
        Op::BilinearUpsample => {
            let p = &rec.parents[0];
            if p.requires_grad() {
                let ps = p.shape();
                let (c, in_h, in_w) = match ps.len() {
                    2 => (1, ps[0], ps[1]),
                    _ => (ps[0], ps[1], ps[2]),
                };
                let (out_h, out_w) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    _ => (shape[1], shape[2]),
                };
                let ys = super::ops::axis_lerp(in_h, out_h);
                let xs = super::ops::axis_lerp(in_w, out_w);
                let mut g = vec![0.0; p.numel()];
                for ch in 0..c {
                    let src = &grad[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    let dst = &mut g[ch * in_h * in_w..(ch + 1) * in_h * in_w];
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let go = src[oy * out_w + ox];
                            dst[y0 * in_w + x0] += go * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * in_w + x1] += go * (1.0 - wy) * wx;
                            dst[y1 * in_w + x0] += go * wy * (1.0 - wx);
                            dst[y1 * in_w + x1] += go * wy * wx;
                        }
                    }
                }
                p.accumulate_grad(&g);
            }
        }
        Op::Conv2d { stride, pad, cols } => {
            let (x, weight, bias) = (&rec.parents[0], &rec.parents[1], &rec.parents[2]);
            let xs = x.shape();
            let ws = weight.shape();
            let (c_in, h, w) = (xs[0], xs[1], xs[2]);
            let (c_out, k) = (ws[0], ws[2]);
            let (out_h, out_w) = (shape[1], shape[2]);
            let l = out_h * out_w;
            let rows = c_in * k * k;

            if bias.requires_grad() {
                let mut g = vec![0.0; c_out];
                for (o, go) in g.iter_mut().enumerate() {
                    *go = grad[o * l..(o + 1) * l].iter().sum();
                }
                bias.accumulate_grad(&g);
            }
            let gv = ArrayView2::from_shape((c_out, l), &grad[..]).expect("grad view");
            if weight.requires_grad() {
                let cv = ArrayView2::from_shape((rows, l), &cols[..]).expect("cols view");
                let gw = gv.dot(&cv.t());
                let g: Vec<f64> = gw.iter().copied().collect();
                weight.accumulate_grad(&g);
            }
            if x.requires_grad() {
                let wd = weight.data();
                let wv = ArrayView2::from_shape((c_out, rows), &wd[..]).expect("w view");
                let gcols = wv.t().dot(&gv);
                drop(wd);
                let gc: Vec<f64> = gcols.iter().copied().collect();
                let g = col2im(&gc, c_in, h, w, k, *stride, *pad, out_h, out_w);
                x.accumulate_grad(&g);
            }
        }
        Op::Linear => {
            let (x, weight, bias) = (&rec.parents[0], &rec.parents[1], &rec.parents[2]);
            let n = x.numel();
            let m = shape[0];
            if bias.requires_grad() {
                bias.accumulate_grad(&grad);
            }
            if weight.requires_grad() {
                let xd = x.data();
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    let gi = grad[i];
                    for j in 0..n {
                        g[i * n + j] = gi * xd[j];
                    }
                }
                drop(xd);
                weight.accumulate_grad(&g);
            }
            if x.requires_grad() {
                let wd = weight.data();
                let mut g = vec![0.0; n];
                for i in 0..m {
                    let gi = grad[i];
                    for j in 0..n {
                        g[j] += gi * wd[i * n + j];
                    }
                }
                drop(wd);
                x.accumulate_grad(&g);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &[f64],
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
    let mut g = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        let plane = &mut g[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &gcols[row * l..(row + 1) * l];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[dst_row + ix as usize] += src[oy * out_w + ox];
                    }
                }
            }
        }
    }
    g
}
