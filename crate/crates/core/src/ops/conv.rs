//! Spatial ops over `N×C×H×W` feature maps.


use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn nchw(v: &Var, what: &str) -> Result<[usize; 4]> {
    match v.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::dim(format!("{what} expects N×C×H×W, got {s:?}"))),
    }
}

/// Target column count per GEMM; small maps are batched to reach it.
const GROUP_COLS: usize = 1024;

/// Unfolds the 3×3 zero-padded neighbourhoods of one `C×H×W` image into
/// columns `[off, off + H·W)` of a `(C·9) × ld` matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], ld: usize, off: usize) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..][..hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut out[((ci * 9) + ky * 3 + kx) * ld + off..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..][..w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64], ld: usize, off: usize) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..][..hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * ld + off..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Copies samples `[n0, n0 + g)` of an `N×C×HW` array into a `C × (g·HW)` matrix.
fn gather(d: &[f64], c: usize, hw: usize, n0: usize, g: usize, out: &mut [f64]) {
    for j in 0..g {
        for ci in 0..c {
            out[ci * g * hw + j * hw..][..hw].copy_from_slice(&d[((n0 + j) * c + ci) * hw..][..hw]);
        }
    }
}

/// Inverse of [`gather`].
fn scatter(m: &[f64], c: usize, hw: usize, n0: usize, g: usize, out: &mut [f64]) {
    for j in 0..g {
        for ci in 0..c {
            out[((n0 + j) * c + ci) * hw..][..hw].copy_from_slice(&m[ci * g * hw + j * hw..][..hw]);
        }
    }
}

/// Sample groups `(start, len)` covering `0..n`.
fn groups(n: usize, hw: usize) -> impl Iterator<Item = (usize, usize)> {
    let g = (GROUP_COLS / hw).max(1);
    (0..n).step_by(g).map(move |s| (s, g.min(n - s)))
}

/// 3×3, stride 1, zero padding 1 cross-correlation plus per-channel bias.
pub fn conv2d(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    let [n, c, h, w] = nchw(x, "conv2d input")?;
    let &[co, ci, 3, 3] = weight.shape() else {
        return Err(Error::dim(format!(
            "conv2d weight must be C'×C×3×3, got {:?}",
            weight.shape()
        )));
    };
    if ci != c {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {:?}, weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::dim(format!("conv2d bias must be [{co}], got {:?}", bias.shape())));
    }
    let hw = h * w;
    let k = c * 9;
    let xv = x.shared_value();
    let wv = weight.shared_value();
    let bd = bias.value().data();
    let gmax = (GROUP_COLS / hw).max(1).min(n);
    let mut y = vec![0.0; n * co * hw];
    let mut cols = vec![0.0; k * gmax * hw];
    let mut out = vec![0.0; co * gmax * hw];
    for (n0, g) in groups(n, hw) {
        let ld = g * hw;
        for j in 0..g {
            im2col(&xv.data()[(n0 + j) * c * hw..][..c * hw], c, h, w, &mut cols, ld, j * hw);
        }
        let out = &mut out[..co * ld];
        for (o, &b) in bd.iter().enumerate() {
            out[o * ld..][..ld].fill(b);
        }
        gemm(MatRef::new(wv.data(), co, k), MatRef::new(&cols[..k * ld], k, ld), 1.0, out);
        scatter(out, co, hw, n0, g, &mut y);
    }
    let value = Tensor::new(&[n, co, h, w], y)?;
    Ok(x.tape().push(value, &[x, weight, bias], move |gr, needs| {
        let gd = gr.data();
        let mut dx = needs[0].then(|| vec![0.0; n * c * hw]);
        let mut dw = needs[1].then(|| vec![0.0; co * k]);
        let mut cols = vec![0.0; k * gmax * hw];
        let mut gm = vec![0.0; co * gmax * hw];
        for (n0, g) in groups(n, hw) {
            let ld = g * hw;
            let gm = &mut gm[..co * ld];
            gather(gd, co, hw, n0, g, gm);
            let gref = MatRef::new(gm, co, ld);
            if let Some(dw) = &mut dw {
                for j in 0..g {
                    im2col(&xv.data()[(n0 + j) * c * hw..][..c * hw], c, h, w, &mut cols, ld, j * hw);
                }
                gemm(gref, MatRef::new(&cols[..k * ld], k, ld).t(), 1.0, dw);
            }
            if let Some(dx) = &mut dx {
                gemm(MatRef::new(wv.data(), co, k).t(), gref, 0.0, &mut cols[..k * ld]);
                for j in 0..g {
                    col2im(&cols, c, h, w, &mut dx[(n0 + j) * c * hw..][..c * hw], ld, j * hw);
                }
            }
        }
        let db = needs[2].then(|| {
            let mut d = vec![0.0; co];
            for (i, chunk) in gd.chunks_exact(hw).enumerate() {
                d[i % co] += chunk.iter().sum::<f64>();
            }
            Tensor::new(&[co], d).unwrap()
        });
        vec![
            dx.map(|d| Tensor::new(&[n, c, h, w], d).unwrap()),
            dw.map(|d| Tensor::new(&[co, c, 3, 3], d).unwrap()),
            db,
        ]
    }))
}

/// 1×1 convolution without bias: per-pixel channel mixing by `weight[C'×C]`.
pub fn pointwise_conv(x: &Var, weight: &Var) -> Result<Var> {
    let [n, c, h, w] = nchw(x, "pointwise_conv input")?;
    let &[co, ci] = weight.shape() else {
        return Err(Error::dim(format!("pointwise weight must be C'×C, got {:?}", weight.shape())));
    };
    if ci != c {
        return Err(Error::dim(format!(
            "pointwise channel mismatch: input {:?}, weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let hw = h * w;
    let xv = x.shared_value();
    let wv = weight.shared_value();
    let mut y = vec![0.0; n * co * hw];
    for ni in 0..n {
        gemm(
            MatRef::new(wv.data(), co, c),
            MatRef::new(&xv.data()[ni * c * hw..][..c * hw], c, hw),
            0.0,
            &mut y[ni * co * hw..][..co * hw],
        );
    }
    let value = Tensor::new(&[n, co, h, w], y)?;
    Ok(x.tape().push(value, &[x, weight], move |g, needs| {
        let gd = g.data();
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; n * c * hw];
            for ni in 0..n {
                gemm(
                    MatRef::new(wv.data(), co, c).t(),
                    MatRef::new(&gd[ni * co * hw..][..co * hw], co, hw),
                    0.0,
                    &mut d[ni * c * hw..][..c * hw],
                );
            }
            Tensor::new(&[n, c, h, w], d).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut d = vec![0.0; co * c];
            for ni in 0..n {
                gemm(
                    MatRef::new(&gd[ni * co * hw..][..co * hw], co, hw),
                    MatRef::new(&xv.data()[ni * c * hw..][..c * hw], c, hw).t(),
                    1.0,
                    &mut d,
                );
            }
            Tensor::new(&[co, c], d).unwrap()
        });
        vec![dx, dw]
    }))
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Var) -> Result<Var> {
    let [n, c, h, w] = nchw(x, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("avg_pool2 needs even H, W, got {:?}", x.shape())));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.value().data();
    let mut y = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let base = p * h * w + 2 * i * w + 2 * j;
                y[p * ho * wo + i * wo + j] =
                    0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    let value = Tensor::new(&[n, c, ho, wo], y)?;
    Ok(x.tape().push(value, &[x], move |g, _| {
        let gd = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let v = 0.25 * gd[p * ho * wo + i * wo + j];
                    let base = p * h * w + 2 * i * w + 2 * j;
                    dx[base] = v;
                    dx[base + 1] = v;
                    dx[base + w] = v;
                    dx[base + w + 1] = v;
                }
            }
        }
        vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
    }))
}

/// Mean over H×W: `N×C×H×W → N×C`.
pub fn global_avg_pool(x: &Var) -> Result<Var> {
    let [n, c, h, w] = nchw(x, "global_avg_pool")?;
    let hw = h * w;
    let y: Vec<f64> = x
        .value()
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    let value = Tensor::new(&[n, c], y)?;
    Ok(x.tape().push(value, &[x], move |g, _| {
        let dx = g
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v / hw as f64).take(hw))
            .collect();
        vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
    }))
}

/// `x[n,c,:,:] * mask[n,c]`.
pub fn mask_channels(x: &Var, mask: &Var) -> Result<Var> {
    let [n, c, h, w] = nchw(x, "mask_channels")?;
    if mask.shape() != [n, c] {
        return Err(Error::dim(format!(
            "channel mask {:?} does not match features {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let xv = x.shared_value();
    let mv = mask.shared_value();
    let y: Vec<f64> = xv
        .data()
        .chunks_exact(hw)
        .zip(mv.data())
        .flat_map(|(p, &m)| p.iter().map(move |v| v * m))
        .collect();
    let value = Tensor::new(xv.shape(), y)?;
    Ok(x.tape().push(value, &[x, mask], move |g, needs| {
        let gd = g.data();
        let dx = needs[0].then(|| {
            let d = gd
                .chunks_exact(hw)
                .zip(mv.data())
                .flat_map(|(p, &m)| p.iter().map(move |v| v * m))
                .collect();
            Tensor::new(&[n, c, h, w], d).unwrap()
        });
        let dm = needs[1].then(|| {
            let d = gd
                .chunks_exact(hw)
                .zip(xv.data().chunks_exact(hw))
                .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                .collect();
            Tensor::new(&[n, c], d).unwrap()
        });
        vec![dx, dm]
    }))
}

/// `x[n,:,i,j] * mask[n,i,j]`.
pub fn mask_spatial(x: &Var, mask: &Var) -> Result<Var> {
    let [n, c, h, w] = nchw(x, "mask_spatial")?;
    if mask.shape() != [n, h, w] {
        return Err(Error::dim(format!(
            "spatial mask {:?} does not match features {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let xv = x.shared_value();
    let mv = mask.shared_value();
    let mut y = xv.data().to_vec();
    for ni in 0..n {
        let m = &mv.data()[ni * hw..][..hw];
        for ci in 0..c {
            y[(ni * c + ci) * hw..][..hw]
                .iter_mut()
                .zip(m)
                .for_each(|(v, m)| *v *= m);
        }
    }
    let value = Tensor::new(xv.shape(), y)?;
    Ok(x.tape().push(value, &[x, mask], move |g, needs| {
        let gd = g.data();
        let dx = needs[0].then(|| {
            let mut d = gd.to_vec();
            for ni in 0..n {
                let m = &mv.data()[ni * hw..][..hw];
                for ci in 0..c {
                    d[(ni * c + ci) * hw..][..hw]
                        .iter_mut()
                        .zip(m)
                        .for_each(|(v, m)| *v *= m);
                }
            }
            Tensor::new(&[n, c, h, w], d).unwrap()
        });
        let dm = needs[1].then(|| {
            let mut d = vec![0.0; n * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    for p in 0..hw {
                        d[ni * hw + p] += gd[off + p] * xv.data()[off + p];
                    }
                }
            }
            Tensor::new(&[n, h, w], d).unwrap()
        });
        vec![dx, dm]
    }))
}

fn upsample_dims(shape: &[usize], fy: usize, fx: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || fy == 0 || fx == 0 {
        return Err(Error::dim(format!(
            "nearest_upsample needs rank ≥ 2 and positive factors, got {shape:?} by {fy}×{fx}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape.iter().product::<usize>() / (h * w), h, w))
}

/// Nearest-neighbour upsampling of the last two axes by integer factors.
pub fn nearest_upsample_tensor(x: &Tensor, fy: usize, fx: usize) -> Result<Tensor> {
    let (lead, h, w) = upsample_dims(x.shape(), fy, fx)?;
    let (ho, wo) = (h * fy, w * fx);
    let mut y = Vec::with_capacity(lead * ho * wo);
    for p in x.data().chunks_exact(h * w) {
        for i in 0..ho {
            let row = &p[(i / fy) * w..][..w];
            for j in 0..wo {
                y.push(row[j / fx]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(&shape, y)
}

pub fn nearest_upsample(x: &Var, fy: usize, fx: usize) -> Result<Var> {
    let value = nearest_upsample_tensor(x.value(), fy, fx)?;
    let (lead, h, w) = upsample_dims(x.shape(), fy, fx)?;
    let in_shape = x.shape().to_vec();
    Ok(x.tape().push(value, &[x], move |g, _| {
        let (ho, wo) = (h * fy, w * fx);
        let gd = g.data();
        let mut dx = vec![0.0; lead * h * w];
        for l in 0..lead {
            for i in 0..ho {
                for j in 0..wo {
                    dx[l * h * w + (i / fy) * w + j / fx] += gd[l * ho * wo + i * wo + j];
                }
            }
        }
        vec![Some(Tensor::new(&in_shape, dx).unwrap())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::new();
        let c = 2;
        let x: Vec<f64> = (0..c * 16).map(|v| (v as f64 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new(&[1, c, 4, 4], x).unwrap());
        let mut wd = vec![0.0; c * c * 9];
        for ch in 0..c {
            wd[(ch * c + ch) * 9 + 4] = 1.0;
        }
        let w = tape.constant(Tensor::new(&[c, c, 3, 3], wd).unwrap());
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = conv2d(&x, &w, &b).unwrap();
        assert!(y.value().bitwise_eq(x.value()));
    }

    #[test]
    fn ones_kernel_interior_sum() {
        let tape = Tape::new();
        let v = 0.7;
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], v));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv2d(&x, &w, &b).unwrap();
        let d = y.value().data();
        assert!((d[2 * 5 + 2] - 9.0 * v).abs() < 1e-14);
        // corner sees a 2x2 window
        assert!((d[0] - 4.0 * v).abs() < 1e-14);
    }

    #[test]
    fn conv_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(conv2d(&x, &w, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn upsample_block_replication() {
        let m = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let up = nearest_upsample_tensor(&m, 2, 2).unwrap();
        assert_eq!(up.shape(), &[4, 4]);
        #[rustfmt::skip]
        let want = [1., 1., 0., 0.,
                    1., 1., 0., 0.,
                    0., 0., 1., 1.,
                    0., 0., 1., 1.];
        assert_eq!(up.data(), &want);
        assert_eq!(up.mean(), m.mean());
    }

    #[test]
    fn pooling_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(avg_pool2(&x).unwrap().value().data(), &[2.5]);
        assert_eq!(global_avg_pool(&x).unwrap().value().data(), &[2.5]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(avg_pool2(&odd).is_err());
    }
}
