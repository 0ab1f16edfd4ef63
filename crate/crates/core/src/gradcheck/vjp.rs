//! Vector-Jacobian products of the block kernels.

use super::ParamGrads;
use crate::blocks::{channel_split, Linear, PartialSplit, PatChParams, PatSfParams, PatSpParams};
use crate::error::{Error, Result};
use crate::tensor::{col2im, conv2d, hard_sigmoid, im2col, logistic, ConvParams, Scalar, Tensor4, CHANNEL_STAT_EPS};

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub x: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// VJP of an ungrouped convolution.
pub fn conv2d_vjp<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, dy: &Tensor4<T>) -> Result<ConvGrads<T>> {
    if p.groups != 1 {
        return Err(Error::InvalidArgument("grouped convolution gradients are not supported".into()));
    }
    let (oh, ow) = p.output_hw(x.h(), x.w())?;
    if dy.shape() != [x.n(), p.out_ch(), oh, ow] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match convolution output {:?}",
            dy.shape(),
            [x.n(), p.out_ch(), oh, ow]
        )));
    }
    let (k, cin, cout) = (p.kernel(), p.in_ch(), p.out_ch());
    let rows = cin * k * k;
    let cols = oh * ow;
    let w = p.weight.data();
    let mut dx = Tensor4::zeros(x.n(), cin, x.h(), x.w());
    let mut dw = vec![T::zero(); cout * rows];
    let mut db = vec![T::zero(); cout];
    let mut buf = vec![T::zero(); rows * cols];
    let mut dbuf = vec![T::zero(); rows * cols];
    for n in 0..x.n() {
        im2col(x.sample(n), cin, x.h(), x.w(), k, p.stride, p.padding, oh, ow, &mut buf);
        let g = dy.sample(n);
        for o in 0..cout {
            let go = &g[o * cols..(o + 1) * cols];
            db[o] += go.iter().copied().sum();
            for r in 0..rows {
                let col = &buf[r * cols..(r + 1) * cols];
                dw[o * rows + r] += go.iter().zip(col).map(|(&a, &b)| a * b).sum();
            }
        }
        for r in 0..rows {
            let d = &mut dbuf[r * cols..(r + 1) * cols];
            d.fill(T::zero());
            for o in 0..cout {
                let wv = w[o * rows + r];
                for (dv, &gv) in d.iter_mut().zip(&g[o * cols..(o + 1) * cols]) {
                    *dv += wv * gv;
                }
            }
        }
        col2im(&dbuf, cin, x.h(), x.w(), k, p.stride, p.padding, oh, ow, dx.sample_mut(n));
    }
    Ok(ConvGrads { x: dx, weight: dw, bias: db })
}

/// Gradients of a linear layer applied to the columns of an `in x cols` block.
pub struct LinearGrads<T> {
    pub x: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_vjp<T: Scalar>(l: &Linear<T>, x: &[T], cols: usize, dy: &[T]) -> LinearGrads<T> {
    let (out_f, in_f) = (l.out_features(), l.in_features());
    let mut dx = vec![T::zero(); in_f * cols];
    let mut dw = vec![T::zero(); out_f * in_f];
    let mut db = vec![T::zero(); out_f];
    for o in 0..out_f {
        let g = &dy[o * cols..(o + 1) * cols];
        db[o] = g.iter().copied().sum();
        for i in 0..in_f {
            let xi = &x[i * cols..(i + 1) * cols];
            dw[o * in_f + i] = g.iter().zip(xi).map(|(&a, &b)| a * b).sum();
            let w = l.weight.at(o, i);
            for (d, &gv) in dx[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                *d += w * gv;
            }
        }
    }
    LinearGrads { x: dx, weight: dw, bias: db }
}

/// VJP of a row-wise softmax given its output `a` and upstream `da`.
pub fn softmax_vjp<T: Scalar>(a: &[T], da: &[T]) -> Vec<T> {
    let dot: T = a.iter().zip(da).map(|(&p, &g)| p * g).sum();
    a.iter().zip(da).map(|(&p, &g)| p * (g - dot)).collect()
}

/// Subgradient of the hard sigmoid: `1/6` strictly inside `(-3, 3)`, else 0.
pub fn hard_sigmoid_grad<T: Scalar>(x: T) -> T {
    if x > T::lit(-3.0) && x < T::lit(3.0) {
        T::lit(1.0 / 6.0)
    } else {
        T::zero()
    }
}

/// Scatters per-sample upstream slices for the two channel groups.
fn split_grad<T: Scalar>(dy: &Tensor4<T>, s: PartialSplit) -> Result<(Tensor4<T>, Tensor4<T>)> {
    channel_split(dy, s)
}

fn join_grad<T: Scalar>(dxp: &Tensor4<T>, dxu: &Tensor4<T>) -> Result<Tensor4<T>> {
    crate::blocks::channel_concat(dxp, dxu)
}

/// Gradient of the optional convolution branch; `None` weights mean an empty slice.
fn conv_branch_vjp<T: Scalar>(
    xp: &Tensor4<T>,
    conv3: Option<&ConvParams<T>>,
    dyp: &Tensor4<T>,
    grads: &mut ParamGrads<T>,
) -> Result<Tensor4<T>> {
    match conv3 {
        Some(c) => {
            let g = conv2d_vjp(xp, c, dyp)?;
            grads.push(("conv3.weight".into(), g.weight));
            Ok(g.x)
        }
        None => Ok(xp.clone()),
    }
}

pub fn pat_sp_vjp<T: Scalar>(
    p: &PatSpParams<T>,
    s: PartialSplit,
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, ParamGrads<T>)> {
    p.validate(s)?;
    let logits = conv2d(x, &p.map)?;
    let plane = x.spatial();
    let c = x.c();
    let mut dx = dy.clone();
    let mut dlogit = Tensor4::zeros(x.n(), 1, x.h(), x.w());
    for n in 0..x.n() {
        let l = logits.sample(n);
        let xs = x.sample(n);
        let ds = dy.sample(n);
        let dxs = dx.sample_mut(n);
        for pix in 0..plane {
            let g = hard_sigmoid(l[pix]);
            let mut dg = T::zero();
            for ch in s.c_p()..c {
                dg += ds[ch * plane + pix] * xs[ch * plane + pix];
                dxs[ch * plane + pix] = ds[ch * plane + pix] * g;
            }
            dlogit.sample_mut(n)[pix] = dg * hard_sigmoid_grad(l[pix]);
        }
    }
    let map = conv2d_vjp(x, &p.map, &dlogit)?;
    dx.add_assign(&map.x)?;
    Ok((dx, vec![("map.weight".into(), map.weight), ("map.bias".into(), map.bias)]))
}

pub fn pat_ch_vjp<T: Scalar>(
    p: &PatChParams<T>,
    s: PartialSplit,
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, ParamGrads<T>)> {
    p.validate(s)?;
    let (xp, xu) = channel_split(x, s)?;
    let (dyp, dyu) = split_grad(dy, s)?;
    let mut grads = Vec::new();
    let dxp = conv_branch_vjp(&xp, p.conv3.as_ref(), &dyp, &mut grads)?;

    let c_u = s.c_u();
    let plane = x.spatial();
    let pn = T::from(plane).unwrap();
    let (hid, in2) = (p.hidden(), 2 * c_u);
    let mut dxu = Tensor4::zeros(x.n(), c_u, x.h(), x.w());
    let mut d1w = vec![T::zero(); hid * in2];
    let mut d1b = vec![T::zero(); hid];
    let mut d2w = vec![T::zero(); c_u * hid];
    let mut d2b = vec![T::zero(); c_u];
    for n in 0..x.n() {
        let xs = xu.sample(n);
        let ds = dyu.sample(n);
        let mut z = vec![T::zero(); in2];
        for ch in 0..c_u {
            let v = &xs[ch * plane..(ch + 1) * plane];
            let m = v.iter().copied().sum::<T>() / pn;
            let var = v.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / pn;
            z[ch] = m;
            z[c_u + ch] = (var + T::lit(CHANNEL_STAT_EPS)).sqrt();
        }
        let a1 = p.fc1.apply_vec(&z);
        let h: Vec<T> = a1.iter().map(|&v| v.max(T::zero())).collect();
        let gate: Vec<T> = p.fc2.apply_vec(&h).into_iter().map(logistic).collect();

        let dxs = dxu.sample_mut(n);
        let mut dl2 = vec![T::zero(); c_u];
        for ch in 0..c_u {
            let r = ch * plane..(ch + 1) * plane;
            let mut dg = T::zero();
            for ((d, &g), &v) in dxs[r.clone()].iter_mut().zip(&ds[r.clone()]).zip(&xs[r]) {
                *d = g * gate[ch];
                dg += g * v;
            }
            dl2[ch] = dg * gate[ch] * (T::one() - gate[ch]);
        }
        let g2 = linear_vjp(&p.fc2, &h, 1, &dl2);
        let dh: Vec<T> = g2.x.iter().zip(&a1).map(|(&d, &a)| if a > T::zero() { d } else { T::zero() }).collect();
        let g1 = linear_vjp(&p.fc1, &z, 1, &dh);
        for (acc, v) in [(&mut d1w, g1.weight), (&mut d1b, g1.bias), (&mut d2w, g2.weight), (&mut d2b, g2.bias)] {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        for ch in 0..c_u {
            let r = ch * plane..(ch + 1) * plane;
            let (dm, dsd) = (g1.x[ch], g1.x[c_u + ch]);
            let m = z[ch];
            let dvar_scale = dsd / (T::lit(2.0) * z[c_u + ch]) * T::lit(2.0) / pn;
            for (d, &v) in dxs[r.clone()].iter_mut().zip(&xs[r]) {
                *d += dm / pn + dvar_scale * (v - m);
            }
        }
    }
    grads.extend([
        ("fc1.weight".into(), d1w),
        ("fc1.bias".into(), d1b),
        ("fc2.weight".into(), d2w),
        ("fc2.bias".into(), d2b),
    ]);
    Ok((join_grad(&dxp, &dxu)?, grads))
}

pub fn pat_sf_vjp<T: Scalar>(
    p: &PatSfParams<T>,
    s: PartialSplit,
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, ParamGrads<T>)> {
    p.validate(s)?;
    if (x.h(), x.w()) != (p.rpe.h, p.rpe.w) {
        return Err(Error::shape(format!(
            "spatial extent {}x{} does not match the {}x{} relative position table",
            x.h(),
            x.w(),
            p.rpe.h,
            p.rpe.w
        )));
    }
    let (xp, xu) = channel_split(x, s)?;
    let (dyp, dyu) = split_grad(dy, s)?;
    let mut grads = Vec::new();
    let dxp = conv_branch_vjp(&xp, p.conv3.as_ref(), &dyp, &mut grads)?;

    let c_u = s.c_u();
    let t = p.rpe.tokens();
    let d = p.head_dim();
    let scale = T::one() / T::from(d).unwrap().sqrt();
    let mut acc: Vec<Vec<T>> = [&p.q, &p.k, &p.v, &p.o]
        .iter()
        .flat_map(|l| [vec![T::zero(); l.weight.data().len()], vec![T::zero(); l.bias.len()]])
        .collect();
    let mut drpe = vec![T::zero(); p.rpe.table.len()];
    let mut dxu = Tensor4::zeros(x.n(), c_u, x.h(), x.w());
    for n in 0..x.n() {
        let tokens = xu.sample(n);
        let q = p.q.apply_cols(tokens, t);
        let k = p.k.apply_cols(tokens, t);
        let att = crate::blocks::self_attention(tokens, p);
        let go = linear_vjp(&p.o, &att.mixed, t, dyu.sample(n));
        let dm = &go.x;
        let mut dq = vec![T::zero(); c_u * t];
        let mut dk = vec![T::zero(); c_u * t];
        let mut dv = vec![T::zero(); c_u * t];
        for head in 0..p.heads {
            let a = &att.probs[head * t * t..(head + 1) * t * t];
            let ch0 = head * d;
            for i in 0..t {
                let da: Vec<T> = (0..t)
                    .map(|j| (ch0..ch0 + d).map(|c| dm[c * t + i] * att.values[c * t + j]).sum())
                    .collect();
                let ds = softmax_vjp(&a[i * t..(i + 1) * t], &da);
                for j in 0..t {
                    drpe[p.rpe.offset(head, i, j)] += ds[j];
                    let w = a[i * t + j];
                    for c in ch0..ch0 + d {
                        dv[c * t + j] += dm[c * t + i] * w;
                        dq[c * t + i] += scale * ds[j] * k[c * t + j];
                        dk[c * t + j] += scale * ds[j] * q[c * t + i];
                    }
                }
            }
        }
        let gq = linear_vjp(&p.q, tokens, t, &dq);
        let gk = linear_vjp(&p.k, tokens, t, &dk);
        let gv = linear_vjp(&p.v, tokens, t, &dv);
        let dx = dxu.sample_mut(n);
        for g in [&gq, &gk, &gv] {
            dx.iter_mut().zip(&g.x).for_each(|(a, &b)| *a += b);
        }
        for (slot, g) in [gq, gk, gv, go].into_iter().enumerate() {
            acc[2 * slot].iter_mut().zip(g.weight).for_each(|(a, b)| *a += b);
            acc[2 * slot + 1].iter_mut().zip(g.bias).for_each(|(a, b)| *a += b);
        }
    }
    for (slot, name) in ["q", "k", "v", "o"].into_iter().enumerate() {
        grads.push((format!("{name}.weight"), std::mem::take(&mut acc[2 * slot])));
        grads.push((format!("{name}.bias"), std::mem::take(&mut acc[2 * slot + 1])));
    }
    grads.push(("rpe".into(), drpe));
    Ok((join_grad(&dxp, &dxu)?, grads))
}
