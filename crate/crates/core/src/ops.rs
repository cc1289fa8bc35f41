//! Differentiable operations. Forward computes the value eagerly; each op
//! registers a closure mapping the upstream gradient to per-parent gradients.
//! All produced arrays are standard (row-major) layout.

use ndarray::{concatenate, Array1, Array2, Axis, Ix2, IxDyn, Slice, Zip};

use crate::tensor::{broadcast_shape, reduce_to_shape, Arr, Tensor};

fn gemm(a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>, out: &mut Array2<f64>, beta: f64) {
    ndarray::linalg::general_mat_mul(1.0, &a, &b, beta, out);
}

fn view2(a: &Arr, r: usize, c: usize) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((r, c))
        .expect("non-contiguous tensor value")
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Arr {
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("broadcast mismatch {:?} vs {:?}", a.shape(), b.shape()));
    let av = a.value().broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.value().broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = Arr::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let out = broadcast_binary(a, b, |x, y| x + y);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            vec![
                Some(reduce_to_shape(g, ps[0].shape())),
                Some(reduce_to_shape(g, ps[1].shape())),
            ]
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let out = broadcast_binary(a, b, |x, y| x - y);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            vec![
                Some(reduce_to_shape(g, ps[0].shape())),
                Some(reduce_to_shape(&g.mapv(|v| -v), ps[1].shape())),
            ]
        }),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let out = broadcast_binary(a, b, |x, y| x * y);
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            let shape = broadcast_shape(ps[0].shape(), ps[1].shape()).unwrap();
            let bv = ps[1].broadcast(IxDyn(&shape)).unwrap();
            let av = ps[0].broadcast(IxDyn(&shape)).unwrap();
            let ga = reduce_to_shape(&(g * &bv), ps[0].shape());
            let gb = reduce_to_shape(&(g * &av), ps[1].shape());
            vec![Some(ga), Some(gb)]
        }),
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_op(
        a.value().mapv(|v| v * c),
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(g.mapv(|v| v * c))]),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_op(
        a.value().mapv(|v| v + c),
        vec![a.clone()],
        Box::new(|g, _| vec![Some(g.clone())]),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor::from_op(
        a.value().mapv(|v| v.max(0.0)),
        vec![a.clone()],
        Box::new(|g, ps| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(ps[0]).for_each(|gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0
                }
            });
            vec![Some(gx)]
        }),
    )
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

pub fn gelu(a: &Tensor) -> Tensor {
    let out = a
        .value()
        .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(|g, ps| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(ps[0]).for_each(|gv, &x| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            });
            vec![Some(gx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Tensor {
    let s = a.value().sum();
    Tensor::from_op(
        Arr::from_elem(IxDyn(&[]), s),
        vec![a.clone()],
        Box::new(|g, ps| {
            let gv = *g.iter().next().unwrap();
            vec![Some(Arr::from_elem(IxDyn(ps[0].shape()), gv))]
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.value().len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

pub fn sum_axis_keep(a: &Tensor, axis: usize) -> Tensor {
    let out = a.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, ps| {
            let gb = g.broadcast(IxDyn(ps[0].shape())).unwrap().to_owned();
            vec![Some(gb)]
        }),
    )
}

pub fn mean_axis_keep(a: &Tensor, axis: usize) -> Tensor {
    let n = a.shape()[axis] as f64;
    scale(&sum_axis_keep(a, axis), 1.0 / n)
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    let out = a
        .value()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", a.shape(), shape));
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(|g, ps| {
            vec![Some(
                g.clone().into_shape_with_order(IxDyn(ps[0].shape())).unwrap(),
            )]
        }),
    )
}

pub fn permute(a: &Tensor, perm: &[usize]) -> Tensor {
    let out = a
        .value()
        .view()
        .permuted_axes(IxDyn(perm))
        .as_standard_layout()
        .to_owned();
    let perm_owned: Vec<usize> = perm.to_vec();
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut inv = vec![0usize; perm_owned.len()];
            for (i, &p) in perm_owned.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(
                g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned(),
            )]
        }),
    )
}

pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let out = a
        .value()
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .as_standard_layout()
        .to_owned();
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, ps| {
            let mut gx = Arr::zeros(IxDyn(ps[0].shape()));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(gx)]
        }),
    )
}

pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    // concatenate along inner axes yields non-standard layouts; normalize.
    let out = concatenate(Axis(axis), &views)
        .expect("concat shape mismatch")
        .as_standard_layout()
        .to_owned();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Tensor::from_op(
        out,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for &s in &sizes {
                grads.push(Some(
                    g.slice_axis(Axis(axis), Slice::from(off..off + s))
                        .as_standard_layout()
                        .to_owned(),
                ));
                off += s;
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Batched matmul: `[..., m, k] x [..., k, n]` with equal leading dims, or
/// a 2-D right operand shared across the batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (asz, bsz) = (a.shape().to_vec(), b.shape().to_vec());
    assert!(asz.len() >= 2 && bsz.len() >= 2, "matmul needs >=2-D operands");
    let (m, k) = (asz[asz.len() - 2], asz[asz.len() - 1]);
    let (kb, n) = (bsz[bsz.len() - 2], bsz[bsz.len() - 1]);
    assert_eq!(k, kb, "matmul inner dim {:?} x {:?}", asz, bsz);
    let lead_a = &asz[..asz.len() - 2];
    let lead_b = &bsz[..bsz.len() - 2];
    assert!(
        lead_b.is_empty() || lead_a == lead_b,
        "matmul batch dims {:?} x {:?}",
        asz,
        bsz
    );
    let p: usize = lead_a.iter().product::<usize>().max(1);
    let b_shared = lead_b.is_empty() && !lead_a.is_empty();

    let a3 = a.value().view().into_shape_with_order((p, m, k)).unwrap();
    let mut out = Array2::zeros((p * m, n));
    {
        if b_shared || lead_a.is_empty() {
            let b2 = view2(b.value(), k, n);
            let a2 = a.value().view().into_shape_with_order((p * m, k)).unwrap();
            gemm(a2, b2, &mut out, 0.0);
        } else {
            let b3 = b.value().view().into_shape_with_order((p, k, n)).unwrap();
            for i in 0..p {
                let mut o = Array2::zeros((m, n));
                gemm(a3.index_axis(Axis(0), i), b3.index_axis(Axis(0), i), &mut o, 0.0);
                out.slice_mut(ndarray::s![i * m..(i + 1) * m, ..]).assign(&o);
            }
        }
    }
    let mut out_shape: Vec<usize> = lead_a.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let out = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();

    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, ps| {
            let g3 = g.view().into_shape_with_order((p, m, n)).unwrap();
            let a3 = ps[0].view().into_shape_with_order((p, m, k)).unwrap();
            // da = g . b^T
            let mut da = Arr::zeros(IxDyn(ps[0].shape()));
            {
                let mut da3 = da.view_mut().into_shape_with_order((p, m, k)).unwrap();
                if b_shared || p == 1 && ps[1].ndim() == 2 {
                    let b2 = view2(ps[1], k, n);
                    for i in 0..p {
                        let mut o = Array2::zeros((m, k));
                        gemm(g3.index_axis(Axis(0), i), b2.t(), &mut o, 0.0);
                        da3.index_axis_mut(Axis(0), i).assign(&o);
                    }
                } else {
                    let b3 = ps[1].view().into_shape_with_order((p, k, n)).unwrap();
                    for i in 0..p {
                        let mut o = Array2::zeros((m, k));
                        gemm(g3.index_axis(Axis(0), i), b3.index_axis(Axis(0), i).t(), &mut o, 0.0);
                        da3.index_axis_mut(Axis(0), i).assign(&o);
                    }
                }
            }
            // db = a^T . g
            let db = if ps[1].ndim() == 2 {
                let mut acc = Array2::zeros((k, n));
                for i in 0..p {
                    gemm(a3.index_axis(Axis(0), i).t(), g3.index_axis(Axis(0), i), &mut acc, 1.0);
                }
                acc.into_dyn()
            } else {
                let mut db = Arr::zeros(IxDyn(ps[1].shape()));
                {
                    let mut db3 = db.view_mut().into_shape_with_order((p, k, n)).unwrap();
                    for i in 0..p {
                        let mut o = Array2::zeros((k, n));
                        gemm(a3.index_axis(Axis(0), i).t(), g3.index_axis(Axis(0), i), &mut o, 0.0);
                        db3.index_axis_mut(Axis(0), i).assign(&o);
                    }
                }
                db
            };
            vec![Some(da), Some(db)]
        }),
    )
}

/// `y = x . w^T + b` over the last axis: x `[..., in]`, w `[out, in]`, b `[out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let xin = *x.shape().last().unwrap();
    let (out_dim, win) = (w.shape()[0], w.shape()[1]);
    assert_eq!(xin, win, "linear: x {:?} w {:?}", x.shape(), w.shape());
    let rows: usize = x.value().len() / xin;
    let x2 = x.value().view().into_shape_with_order((rows, xin)).unwrap();
    let w2 = view2(w.value(), out_dim, win);
    let mut y2 = Array2::zeros((rows, out_dim));
    gemm(x2, w2.t(), &mut y2, 0.0);
    if let Some(bias) = b {
        let bv = bias.value().view().into_shape_with_order(out_dim).unwrap();
        for mut row in y2.rows_mut() {
            row += &bv;
        }
    }
    let mut y_shape = x.shape().to_vec();
    *y_shape.last_mut().unwrap() = out_dim;
    let y = y2.into_shape_with_order(IxDyn(&y_shape)).unwrap();

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        y,
        parents,
        Box::new(move |g, ps| {
            let g2 = g.view().into_shape_with_order((rows, out_dim)).unwrap();
            let x2 = ps[0].view().into_shape_with_order((rows, xin)).unwrap();
            let w2 = view2(ps[1], out_dim, xin);
            let mut dx2 = Array2::zeros((rows, xin));
            gemm(g2, w2, &mut dx2, 0.0);
            let mut dw = Array2::zeros((out_dim, xin));
            gemm(g2.t(), x2, &mut dw, 0.0);
            let mut grads = vec![
                Some(dx2.into_shape_with_order(IxDyn(ps[0].shape())).unwrap()),
                Some(dw.into_dyn()),
            ];
            if has_bias {
                grads.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

fn softmax_raw(x: &Arr, axis: usize) -> Arr {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in lane.iter_mut() {
            *v /= denom;
        }
    }
    y
}

pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let y = softmax_raw(x.value(), axis);
    let y_saved = y.clone();
    Tensor::from_op(
        y,
        vec![x.clone()],
        Box::new(move |g, _| {
            // dx = y * (g - sum(g * y, axis))
            let gy = g * &y_saved;
            let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let mut dx = g.clone();
            dx -= &s.broadcast(IxDyn(g.shape())).unwrap();
            dx *= &y_saved;
            vec![Some(dx)]
        }),
    )
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Tensor {
    let mut y = x.value().clone();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in lane.iter_mut() {
            *v -= lse;
        }
    }
    let y_saved = y.clone();
    Tensor::from_op(
        y,
        vec![x.clone()],
        Box::new(move |g, _| {
            // dx = g - softmax(x) * sum(g, axis)
            let s = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let p = y_saved.mapv(f64::exp);
            let mut dx = g.clone();
            dx -= &(&p * &s.broadcast(IxDyn(g.shape())).unwrap());
            vec![Some(dx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Layer norm over the last axis with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    assert_eq!(gamma.value().len(), d);
    assert_eq!(beta.value().len(), d);
    let rows = x.value().len() / d;
    let x2 = x.value().view().into_shape_with_order((rows, d)).unwrap();
    let gv = gamma.value().view().into_shape_with_order(d).unwrap();
    let bv = beta.value().view().into_shape_with_order(d).unwrap();

    let mut y2 = Array2::zeros((rows, d));
    let mut xhat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x2.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let xh = (row[c] - mean) * is;
            xhat[(r, c)] = xh;
            y2[(r, c)] = xh * gv[c] + bv[c];
        }
    }
    let y = y2.into_shape_with_order(IxDyn(x.shape())).unwrap();

    Tensor::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, ps| {
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let gv = ps[1].view().into_shape_with_order(d).unwrap();
            let mut dx = Array2::zeros((rows, d));
            let mut dgamma = Array1::<f64>::zeros(d);
            let mut dbeta = Array1::<f64>::zeros(d);
            for r in 0..rows {
                let gr = g2.row(r);
                let xh = xhat.row(r);
                let mut mean_h = 0.0;
                let mut mean_hx = 0.0;
                for c in 0..d {
                    let h = gr[c] * gv[c];
                    mean_h += h;
                    mean_hx += h * xh[c];
                    dgamma[c] += gr[c] * xh[c];
                    dbeta[c] += gr[c];
                }
                mean_h /= d as f64;
                mean_hx /= d as f64;
                let is = inv_std[r];
                for c in 0..d {
                    let h = gr[c] * gv[c];
                    dx[(r, c)] = is * (h - mean_h - xh[c] * mean_hx);
                }
            }
            vec![
                Some(dx.into_shape_with_order(IxDyn(ps[0].shape())).unwrap()),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        }),
    )
}

/// Per-row L2 normalization over the last axis: y = x / sqrt(|x|^2 + eps).
pub fn l2_normalize(x: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    let rows = x.value().len() / d;
    let x2 = x.value().view().into_shape_with_order((rows, d)).unwrap();
    let mut y2 = Array2::zeros((rows, d));
    let mut norms = Array1::zeros(rows);
    for r in 0..rows {
        let row = x2.row(r);
        let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        norms[r] = n;
        for c in 0..d {
            y2[(r, c)] = row[c] / n;
        }
    }
    let y = y2.into_shape_with_order(IxDyn(x.shape())).unwrap();
    Tensor::from_op(
        y,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let x2 = ps[0].view().into_shape_with_order((rows, d)).unwrap();
            let mut dx = Array2::zeros((rows, d));
            for r in 0..rows {
                let n = norms[r];
                let gr = g2.row(r);
                let xr = x2.row(r);
                let dot: f64 = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    dx[(r, c)] = gr[c] / n - xr[c] * dot / (n * n * n);
                }
            }
            vec![Some(dx.into_shape_with_order(IxDyn(ps[0].shape())).unwrap())]
        }),
    )
}

/// Batch norm over (N, H, W) per channel using batch statistics.
/// Returns normalized output plus the biased batch mean/var for the caller
/// to fold into running statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Array1<f64>, Array1<f64>) {
    let sh = x.shape().to_vec();
    assert_eq!(sh.len(), 4, "batch_norm expects [B,C,H,W]");
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let n = (b * h * w) as f64;
    let xv = x.value();
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let sl = xv.slice(ndarray::s![.., ci, .., ..]);
        let m = sl.sum() / n;
        mean[ci] = m;
        var[ci] = sl.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    let gv = gamma.value().view().into_shape_with_order(c).unwrap().to_owned();
    let bv = beta.value().view().into_shape_with_order(c).unwrap().to_owned();
    let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut y = Arr::zeros(IxDyn(&sh));
    let mut xhat = Arr::zeros(IxDyn(&sh));
    for ci in 0..c {
        let m = mean[ci];
        let is = inv_std[ci];
        let (gc, bc) = (gv[ci], bv[ci]);
        let xs = xv.slice(ndarray::s![.., ci, .., ..]);
        let mut ys = y.slice_mut(ndarray::s![.., ci, .., ..]);
        let mut hs = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
        Zip::from(&mut ys).and(&mut hs).and(&xs).for_each(|yv, hv, &x| {
            let xh = (x - m) * is;
            *hv = xh;
            *yv = xh * gc + bc;
        });
    }

    let mean_out = mean.clone();
    let var_out = var.clone();
    let t = Tensor::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, ps| {
            let gv = ps[1].view().into_shape_with_order(c).unwrap();
            let mut dx = Arr::zeros(IxDyn(g.shape()));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let gs = g.slice(ndarray::s![.., ci, .., ..]);
                let hs = xhat.slice(ndarray::s![.., ci, .., ..]);
                let sum_g = gs.sum();
                let sum_gh: f64 = gs.iter().zip(hs.iter()).map(|(a, b)| a * b).sum();
                dgamma[ci] = sum_gh;
                dbeta[ci] = sum_g;
                let is = inv_std[ci];
                let gc = gv[ci];
                let mg = sum_g / n;
                let mgh = sum_gh / n;
                let mut dxs = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                Zip::from(&mut dxs).and(&gs).and(&hs).for_each(|d, &g, &xh| {
                    *d = gc * is * (g - mg - xh * mgh);
                });
            }
            vec![Some(dx), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        }),
    );
    (t, mean_out, var_out)
}

/// Batch norm with fixed running statistics (inference).
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Arr,
    running_var: &Arr,
    eps: f64,
) -> Tensor {
    let sh = x.shape().to_vec();
    let c = sh[1];
    let rm = running_mean.view().into_shape_with_order(c).unwrap().to_owned();
    let is: Array1<f64> = running_var
        .view()
        .into_shape_with_order(c)
        .unwrap()
        .mapv(|v| 1.0 / (v + eps).sqrt());
    let gv = gamma.value().view().into_shape_with_order(c).unwrap().to_owned();
    let bv = beta.value().view().into_shape_with_order(c).unwrap().to_owned();

    let mut y = Arr::zeros(IxDyn(&sh));
    for ci in 0..c {
        let xs = x.value().slice(ndarray::s![.., ci, .., ..]);
        let mut ys = y.slice_mut(ndarray::s![.., ci, .., ..]);
        let (m, s, gc, bc) = (rm[ci], is[ci], gv[ci], bv[ci]);
        Zip::from(&mut ys).and(&xs).for_each(|yv, &x| *yv = (x - m) * s * gc + bc);
    }
    let rm2 = rm.clone();
    let is2 = is.clone();
    Tensor::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, ps| {
            let gv = ps[1].view().into_shape_with_order(c).unwrap();
            let mut dx = Arr::zeros(IxDyn(g.shape()));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let gs = g.slice(ndarray::s![.., ci, .., ..]);
                let xs = ps[0].slice(ndarray::s![.., ci, .., ..]);
                let (m, s) = (rm2[ci], is2[ci]);
                dbeta[ci] = gs.sum();
                dgamma[ci] = gs
                    .iter()
                    .zip(xs.iter())
                    .map(|(gvv, xv)| gvv * (xv - m) * s)
                    .sum();
                let mut dxs = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                let k = gv[ci] * s;
                Zip::from(&mut dxs).and(&gs).for_each(|d, &g| *d = g * k);
            }
            vec![Some(dx), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        }),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    xs: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let robase = row * (ho * wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xbase = (ci * h + ii as usize) * w;
                    let obase = robase + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cs[obase + oj] = xs[xbase + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut xs = vec![0.0; c * h * w];
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let robase = row * (ho * wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xbase = (ci * h + ii as usize) * w;
                    let obase = robase + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        xs[xbase + jj as usize] += cs[obase + oj];
                    }
                }
            }
        }
    }
    xs
}

/// 2-D convolution, x `[B,C,H,W]`, w `[O,C,kh,kw]`, optional bias `[O]`,
/// symmetric stride/padding. im2col + GEMM on both passes.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    assert_eq!(xs.len(), 4);
    assert_eq!(ws.len(), 4);
    assert_eq!(xs[1], ws[1], "conv2d channels: x {:?} w {:?}", xs, ws);
    let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);

    let w2 = w.value().view().into_shape_with_order((o, c * kh * kw)).unwrap();
    let bias: Option<Array1<f64>> = b.map(|t| t.value().view().into_shape_with_order(o).unwrap().to_owned());

    let mut y = Arr::zeros(IxDyn(&[bsz, o, ho, wo]));
    let x_flat = x.value().as_slice().unwrap();
    for i in 0..bsz {
        let cols = im2col(&x_flat[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo);
        let mut out = Array2::zeros((o, ho * wo));
        gemm(w2.view(), cols.view(), &mut out, 0.0);
        if let Some(ref bias) = bias {
            for (mut row, &bv) in out.rows_mut().into_iter().zip(bias.iter()) {
                row += bv;
            }
        }
        y.slice_mut(ndarray::s![i, .., .., ..])
            .assign(&out.into_shape_with_order((o, ho, wo)).unwrap());
    }

    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = b.is_some();
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    Tensor::from_op(
        y,
        parents,
        Box::new(move |g, ps| {
            let x_flat = ps[0].as_slice().unwrap();
            let w2 = ps[1].view().into_shape_with_order((o, c * kh * kw)).unwrap();
            let mut dx = Arr::zeros(IxDyn(ps[0].shape()));
            let dx_flat = dx.as_slice_mut().unwrap();
            let mut dw2 = Array2::<f64>::zeros((o, c * kh * kw));
            let mut db = Array1::<f64>::zeros(o);
            for i in 0..bsz {
                let g2 = g
                    .slice(ndarray::s![i, .., .., ..])
                    .into_shape_with_order((o, ho * wo))
                    .unwrap()
                    .to_owned();
                let cols = im2col(&x_flat[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo);
                gemm(g2.view(), cols.t(), &mut dw2, 1.0);
                if has_bias {
                    db += &g2.sum_axis(Axis(1));
                }
                let mut dcols = Array2::zeros((c * kh * kw, ho * wo));
                gemm(w2.t(), g2.view(), &mut dcols, 0.0);
                let dxi = col2im(&dcols, c, h, wd, kh, kw, stride, pad, ho, wo);
                dx_flat[i * c * h * wd..(i + 1) * c * h * wd]
                    .iter_mut()
                    .zip(dxi.iter())
                    .for_each(|(a, b)| *a += b);
            }
            let mut grads = vec![
                Some(dx),
                Some(dw2.into_shape_with_order(IxDyn(ps[1].shape())).unwrap()),
            ];
            if has_bias {
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// Bilinear interpolation
// ---------------------------------------------------------------------------

struct BilinearAxis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn bilinear_axis(input: usize, output: usize) -> BilinearAxis {
    let scale = input as f64 / output as f64;
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut frac = Vec::with_capacity(output);
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        lo.push(i0);
        hi.push(i1);
        frac.push(src - i0 as f64);
    }
    BilinearAxis { lo, hi, frac }
}

/// Raw bilinear resize of `[B,C,H,W]` (half-pixel centers, edges clamped).
/// The lerp form `a + t*(b-a)` keeps constant fields exactly constant.
pub fn bilinear_resize_raw(x: &Arr, oh: usize, ow: usize) -> Arr {
    let sh = x.shape();
    assert_eq!(sh.len(), 4);
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let ya = bilinear_axis(h, oh);
    let xa = bilinear_axis(w, ow);
    let xs = x.as_slice().unwrap();
    let mut out = Arr::zeros(IxDyn(&[b, c, oh, ow]));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let obase = (bi * c + ci) * oh * ow;
            for oi in 0..oh {
                let (y0, y1, fy) = (ya.lo[oi], ya.hi[oi], ya.frac[oi]);
                for oj in 0..ow {
                    let (x0, x1, fx) = (xa.lo[oj], xa.hi[oj], xa.frac[oj]);
                    let v00 = xs[base + y0 * w + x0];
                    let v01 = xs[base + y0 * w + x1];
                    let v10 = xs[base + y1 * w + x0];
                    let v11 = xs[base + y1 * w + x1];
                    let r0 = v00 + fx * (v01 - v00);
                    let r1 = v10 + fx * (v11 - v10);
                    os[obase + oi * ow + oj] = r0 + fy * (r1 - r0);
                }
            }
        }
    }
    out
}

/// Differentiable bilinear resize to `(oh, ow)`.
pub fn bilinear2d(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let sh = x.shape().to_vec();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let out = bilinear_resize_raw(x.value(), oh, ow);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let ya = bilinear_axis(h, oh);
            let xa = bilinear_axis(w, ow);
            let gs = g.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[b, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let obase = (bi * c + ci) * oh * ow;
                    for oi in 0..oh {
                        let (y0, y1, fy) = (ya.lo[oi], ya.hi[oi], ya.frac[oi]);
                        for oj in 0..ow {
                            let (x0, x1, fx) = (xa.lo[oj], xa.hi[oj], xa.frac[oj]);
                            let gv = gs[obase + oi * ow + oj];
                            ds[base + y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                            ds[base + y0 * w + x1] += gv * fx * (1.0 - fy);
                            ds[base + y1 * w + x0] += gv * (1.0 - fx) * fy;
                            ds[base + y1 * w + x1] += gv * fx * fy;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// Indexing
// ---------------------------------------------------------------------------

/// Row lookup into a `[V, D]` table; backward scatter-adds into the table.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let tv = table.value().view().into_dimensionality::<Ix2>().unwrap();
    let mut out = Array2::zeros((ids.len(), d));
    for (r, &id) in ids.iter().enumerate() {
        assert!(id < v, "gather id {} out of range {}", id, v);
        out.row_mut(r).assign(&tv.row(id));
    }
    let ids_owned = ids.to_vec();
    Tensor::from_op(
        out.into_dyn(),
        vec![table.clone()],
        Box::new(move |g, ps| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dt = Array2::<f64>::zeros((ps[0].shape()[0], ps[0].shape()[1]));
            for (r, &id) in ids_owned.iter().enumerate() {
                let mut row = dt.row_mut(id);
                row += &g2.row(r);
            }
            vec![Some(dt.into_dyn())]
        }),
    )
}

/// Sum of negative picked log-probabilities: rows of `logp` `[R, V]`,
/// one target per row; rows where `include` is false are skipped.
pub fn nll_sum(logp: &Tensor, targets: &[usize], include: Option<&[bool]>) -> Tensor {
    let (r, v) = (logp.shape()[0], logp.shape()[1]);
    assert_eq!(targets.len(), r);
    let lv = logp.value().view().into_dimensionality::<Ix2>().unwrap();
    let mut total = 0.0;
    for i in 0..r {
        if include.map(|m| m[i]).unwrap_or(true) {
            assert!(targets[i] < v);
            total -= lv[(i, targets[i])];
        }
    }
    let targets_owned = targets.to_vec();
    let include_owned: Option<Vec<bool>> = include.map(|m| m.to_vec());
    Tensor::from_op(
        Arr::from_elem(IxDyn(&[]), total),
        vec![logp.clone()],
        Box::new(move |g, ps| {
            let gv = *g.iter().next().unwrap();
            let mut dl = Arr::zeros(IxDyn(ps[0].shape()));
            {
                let mut d2 = dl.view_mut().into_dimensionality::<Ix2>().unwrap();
                for i in 0..r {
                    if include_owned.as_ref().map(|m| m[i]).unwrap_or(true) {
                        d2[(i, targets_owned[i])] = -gv;
                    }
                }
            }
            vec![Some(dl)]
        }),
    )
}
