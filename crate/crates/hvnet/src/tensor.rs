//! Minimal dense numerical kernels with explicit forward and backward passes.
//!
//! Everything is plain row-major `f64` storage and hand-written loops; there
//! is no autodiff graph. Each forward op has a matching `_backward` that
//! computes exact analytic gradients, verified elsewhere against central
//! finite differences.

use crate::error::{HvError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense rank-1..4 real array with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        DenseGrid {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(HvError::dim(
                "DenseGrid::from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(DenseGrid {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 2D grid from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(HvError::dim("DenseGrid::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        DenseGrid::from_vec(&[n_rows, n_cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `i` of a 2D grid.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    /// Channel plane `c` of a rank-3 grid as a flat HxW slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    /// Elementwise accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &DenseGrid) -> Result<()> {
        if self.shape != other.shape {
            return Err(HvError::dim(
                "DenseGrid::add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn hadamard(&self, other: &DenseGrid) -> Result<DenseGrid> {
        if self.shape != other.shape {
            return Err(HvError::dim(
                "DenseGrid::hadamard",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        DenseGrid::from_vec(&self.shape, data)
    }

    /// Quantize every value through f32, so the grid survives a float32
    /// archive round trip bit-identically.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Weight + bias of a fully connected layer; weight is `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: DenseGrid,
    pub bias: DenseGrid,
}

impl LinearParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearParams {
            weight: DenseGrid::zeros(&[out_dim, in_dim]),
            bias: DenseGrid::zeros(&[out_dim]),
        }
    }

    /// Uniform fan-in init in +-sqrt(6/fan_in), zero bias, f32-representable.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut p = LinearParams::zeros(out_dim, in_dim);
        for v in p.weight.data_mut() {
            *v = rng.gen_range(-bound..bound) as f32 as f64;
        }
        p
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// 2D convolution parameters: weight `[outC x inC x kH x kW]`, per-axis
/// stride and zero padding. The same struct drives the transposed op, where
/// `inC` is the input side of the deconvolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    pub weight: DenseGrid,
    pub bias: DenseGrid,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dParams {
    pub fn zeros(out_c: usize, in_c: usize, k: (usize, usize)) -> Self {
        Conv2dParams {
            weight: DenseGrid::zeros(&[out_c, in_c, k.0, k.1]),
            bias: DenseGrid::zeros(&[out_c]),
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn init<R: Rng>(out_c: usize, in_c: usize, k: (usize, usize), rng: &mut R) -> Self {
        let fan_in = (in_c * k.0 * k.1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut p = Conv2dParams::zeros(out_c, in_c, k);
        for v in p.weight.data_mut() {
            *v = rng.gen_range(-bound..bound) as f32 as f64;
        }
        p
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

/// Gradients of a linear layer: w.r.t. input, weight and bias.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: DenseGrid,
    pub weight: DenseGrid,
    pub bias: DenseGrid,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: DenseGrid,
    pub weight: DenseGrid,
    pub bias: DenseGrid,
}

/// `y_i = W x_i + b`, optionally rectified (negatives clamped to 0).
pub fn linear_forward(x: &DenseGrid, p: &LinearParams, activated: bool) -> Result<DenseGrid> {
    if x.shape().len() != 2 || x.shape()[1] != p.in_dim() {
        return Err(HvError::dim(
            "linear_forward",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let (n, in_dim, out_dim) = (x.shape()[0], p.in_dim(), p.out_dim());
    let mut out = DenseGrid::zeros(&[n, out_dim]);
    for i in 0..n {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for o in 0..out_dim {
            let wrow = p.weight.row(o);
            let mut acc = p.bias.data()[o];
            for k in 0..in_dim {
                acc += wrow[k] * xi[k];
            }
            oi[o] = if activated { acc.max(0.0) } else { acc };
        }
    }
    Ok(out)
}

/// Backward of [`linear_forward`]. `y` is that call's output; when the layer
/// is activated it supplies the rectifier mask (`y > 0`).
pub fn linear_backward(
    x: &DenseGrid,
    p: &LinearParams,
    activated: bool,
    y: &DenseGrid,
    upstream: &DenseGrid,
) -> Result<LinearGrads> {
    let (n, in_dim, out_dim) = (x.shape()[0], p.in_dim(), p.out_dim());
    if upstream.shape() != [n, out_dim] {
        return Err(HvError::dim(
            "linear_backward",
            format!("upstream {:?}, expected [{n}, {out_dim}]", upstream.shape()),
        ));
    }
    let mut gx = DenseGrid::zeros(&[n, in_dim]);
    let mut gw = DenseGrid::zeros(&[out_dim, in_dim]);
    let mut gb = DenseGrid::zeros(&[out_dim]);
    for i in 0..n {
        let xi = x.row(i);
        let ui = upstream.row(i);
        let yi = y.row(i);
        let gxi = gx.row_mut(i);
        for o in 0..out_dim {
            let u = if activated && yi[o] <= 0.0 { 0.0 } else { ui[o] };
            if u == 0.0 {
                continue;
            }
            gb.data_mut()[o] += u;
            let wrow = p.weight.row(o);
            let gwrow = gw.row_mut(o);
            for k in 0..in_dim {
                gxi[k] += u * wrow[k];
                gwrow[k] += u * xi[k];
            }
        }
    }
    Ok(LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn conv_out_extent(input: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(HvError::dim(
            "conv2d",
            format!("kernel {k} larger than padded input {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation of `x [C x H x W]` with `p`, optional rectification.
pub fn conv2d_forward(x: &DenseGrid, p: &Conv2dParams, activated: bool) -> Result<DenseGrid> {
    if x.shape().len() != 3 || x.shape()[0] != p.in_channels() {
        return Err(HvError::dim(
            "conv2d_forward",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let (in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = p.kernel();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let oh = conv_out_extent(h, ph, kh, sh)?;
    let ow = conv_out_extent(w, pw, kw, sw)?;
    let out_c = p.out_channels();

    let mut out = DenseGrid::zeros(&[out_c, oh, ow]);
    for oc in 0..out_c {
        let bias = p.bias.data()[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ic in 0..in_c {
                    let xp = x.plane(ic);
                    let wbase = ((oc * in_c + ic) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xp[iy as usize * w..(iy as usize + 1) * w];
                        let wrow = &p.weight.data()[wbase + ky * kw..wbase + (ky + 1) * kw];
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xrow[ix as usize] * wrow[kx];
                        }
                    }
                }
                let v = if activated { acc.max(0.0) } else { acc };
                out.data_mut()[(oc * oh + oy) * ow + ox] = v;
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv2d_forward`]; `y` is the forward output (mask source).
pub fn conv2d_backward(
    x: &DenseGrid,
    p: &Conv2dParams,
    activated: bool,
    y: &DenseGrid,
    upstream: &DenseGrid,
) -> Result<ConvGrads> {
    if upstream.shape() != y.shape() {
        return Err(HvError::dim(
            "conv2d_backward",
            format!("upstream {:?} vs output {:?}", upstream.shape(), y.shape()),
        ));
    }
    let (in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = p.kernel();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (out_c, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);

    let mut gx = DenseGrid::zeros(&[in_c, h, w]);
    let mut gw = DenseGrid::zeros(p.weight.shape());
    let mut gb = DenseGrid::zeros(&[out_c]);
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = (oc * oh + oy) * ow + ox;
                let mut u = upstream.data()[idx];
                if activated && y.data()[idx] <= 0.0 {
                    u = 0.0;
                }
                if u == 0.0 {
                    continue;
                }
                gb.data_mut()[oc] += u;
                for ic in 0..in_c {
                    let wbase = ((oc * in_c + ic) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ic * h + iy as usize) * w + ix as usize;
                            gx.data_mut()[xi] += u * p.weight.data()[wbase + ky * kw + kx];
                            gw.data_mut()[wbase + ky * kw + kx] += u * x.data()[xi];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Transposed convolution: output extents `(in-1)*stride - 2*pad + k`.
pub fn deconv2d_forward(x: &DenseGrid, p: &Conv2dParams, activated: bool) -> Result<DenseGrid> {
    if x.shape().len() != 3 || x.shape()[0] != p.in_channels() {
        return Err(HvError::dim(
            "deconv2d_forward",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let (in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = p.kernel();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let oh = ((h - 1) * sh + kh).checked_sub(2 * ph);
    let ow = ((w - 1) * sw + kw).checked_sub(2 * pw);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(HvError::dim(
                "deconv2d_forward",
                format!("invalid output extents for input {:?}", x.shape()),
            ))
        }
    };
    let out_c = p.out_channels();

    let mut out = DenseGrid::zeros(&[out_c, oh, ow]);
    for oc in 0..out_c {
        let bias = p.bias.data()[oc];
        let plane = &mut out.data_mut()[oc * oh * ow..(oc + 1) * oh * ow];
        for v in plane.iter_mut() {
            *v = bias;
        }
    }
    for ic in 0..in_c {
        let xp = x.plane(ic);
        for iy in 0..h {
            for ix in 0..w {
                let v = xp[iy * w + ix];
                if v == 0.0 {
                    continue;
                }
                for oc in 0..out_c {
                    let wbase = ((oc * in_c + ic) * kh) * kw;
                    for ky in 0..kh {
                        let oy = (iy * sh + ky) as isize - ph as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * sw + kx) as isize - pw as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            out.data_mut()[(oc * oh + oy as usize) * ow + ox as usize] +=
                                v * p.weight.data()[wbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    if activated {
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
    }
    Ok(out)
}

/// Backward of [`deconv2d_forward`]; `y` is the forward output.
pub fn deconv2d_backward(
    x: &DenseGrid,
    p: &Conv2dParams,
    activated: bool,
    y: &DenseGrid,
    upstream: &DenseGrid,
) -> Result<ConvGrads> {
    if upstream.shape() != y.shape() {
        return Err(HvError::dim(
            "deconv2d_backward",
            format!("upstream {:?} vs output {:?}", upstream.shape(), y.shape()),
        ));
    }
    let (in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = p.kernel();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (out_c, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);

    // Apply the rectifier mask once up front.
    let mut up = upstream.clone();
    if activated {
        for (u, yv) in up.data_mut().iter_mut().zip(y.data()) {
            if *yv <= 0.0 {
                *u = 0.0;
            }
        }
    }

    let mut gx = DenseGrid::zeros(&[in_c, h, w]);
    let mut gw = DenseGrid::zeros(p.weight.shape());
    let mut gb = DenseGrid::zeros(&[out_c]);
    for oc in 0..out_c {
        let up_plane = &up.data()[oc * oh * ow..(oc + 1) * oh * ow];
        gb.data_mut()[oc] = up_plane.iter().sum();
    }
    for ic in 0..in_c {
        for iy in 0..h {
            for ix in 0..w {
                let xv = x.data()[(ic * h + iy) * w + ix];
                let mut acc = 0.0;
                for oc in 0..out_c {
                    let wbase = ((oc * in_c + ic) * kh) * kw;
                    for ky in 0..kh {
                        let oy = (iy * sh + ky) as isize - ph as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * sw + kx) as isize - pw as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let u = up.data()[(oc * oh + oy as usize) * ow + ox as usize];
                            acc += u * p.weight.data()[wbase + ky * kw + kx];
                            gw.data_mut()[wbase + ky * kw + kx] += u * xv;
                        }
                    }
                }
                gx.data_mut()[(ic * h + iy) * w + ix] = acc;
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(rows: &[&[f64]]) -> DenseGrid {
        DenseGrid::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_hand_example() {
        // weight [[1,2],[3,4]], bias 0, x [[1,1]] -> [[3,7]]
        let p = LinearParams {
            weight: grid2(&[&[1.0, 2.0], &[3.0, 4.0]]),
            bias: DenseGrid::zeros(&[2]),
        };
        let x = grid2(&[&[1.0, 1.0]]);
        let y = linear_forward(&x, &p, false).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let p = LinearParams {
            weight: grid2(&[&[1.0, 0.0], &[0.0, 1.0]]),
            bias: DenseGrid::zeros(&[2]),
        };
        let x = grid2(&[&[0.3, -0.7], &[2.0, 5.0]]);
        let y = linear_forward(&x, &p, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_rectifier_clamps() {
        // 1*1 - 2 = -1 -> clamped to 0
        let p = LinearParams {
            weight: grid2(&[&[1.0]]),
            bias: DenseGrid::from_vec(&[1], vec![-2.0]).unwrap(),
        };
        let x = grid2(&[&[1.0]]);
        let y = linear_forward(&x, &p, true).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_error() {
        let p = LinearParams::zeros(2, 3);
        let x = grid2(&[&[1.0, 1.0]]);
        let err = linear_forward(&x, &p, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn linear_backward_scalar_chain_rule() {
        // w=2, x=3, upstream=1 -> gx=2, gw=3, gb=1
        let p = LinearParams {
            weight: grid2(&[&[2.0]]),
            bias: DenseGrid::zeros(&[1]),
        };
        let x = grid2(&[&[3.0]]);
        let y = linear_forward(&x, &p, false).unwrap();
        let up = grid2(&[&[1.0]]);
        let g = linear_backward(&x, &p, false, &y, &up).unwrap();
        assert_eq!(g.input.data(), &[2.0]);
        assert_eq!(g.weight.data(), &[3.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn linear_backward_zero_upstream() {
        let p = LinearParams {
            weight: grid2(&[&[2.0, -1.0], &[0.5, 3.0]]),
            bias: DenseGrid::from_vec(&[2], vec![0.1, -0.2]).unwrap(),
        };
        let x = grid2(&[&[3.0, 1.0]]);
        let y = linear_forward(&x, &p, true).unwrap();
        let up = DenseGrid::zeros(&[1, 2]);
        let g = linear_backward(&x, &p, true, &y, &up).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_additivity_without_bias() {
        let p = LinearParams {
            weight: grid2(&[&[1.5, -2.0], &[0.25, 4.0]]),
            bias: DenseGrid::zeros(&[2]),
        };
        let a = grid2(&[&[0.3, 0.9]]);
        let b = grid2(&[&[-1.2, 0.4]]);
        let mut ab = a.clone();
        ab.add_assign(&b).unwrap();
        let fa = linear_forward(&a, &p, false).unwrap();
        let fb = linear_forward(&b, &p, false).unwrap();
        let fab = linear_forward(&ab, &p, false).unwrap();
        for k in 0..2 {
            assert!((fab.data()[k] - fa.data()[k] - fb.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_hand_example_ones() {
        // 3x3 ones input, 3x3 ones kernel, pad 1: center 9, corners 4.
        let x = DenseGrid::from_vec(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let mut p = Conv2dParams::zeros(1, 1, (3, 3)).with_padding(1);
        for v in p.weight.data_mut() {
            *v = 1.0;
        }
        let y = conv2d_forward(&x, &p, false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.at3(0, 1, 1), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 2, 2), 4.0);
        assert_eq!(y.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = DenseGrid::from_vec(&[1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mut p = Conv2dParams::zeros(1, 1, (1, 1));
        p.weight.data_mut()[0] = 1.0;
        let y = conv2d_forward(&x, &p, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = DenseGrid::zeros(&[1, 4, 4]);
        let p = Conv2dParams::zeros(1, 1, (2, 2)).with_stride(2);
        let y = conv2d_forward(&x, &p, false).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv_kernel_too_large_is_error() {
        let x = DenseGrid::zeros(&[1, 2, 2]);
        let p = Conv2dParams::zeros(1, 1, (5, 5));
        assert!(conv2d_forward(&x, &p, false).is_err());
    }

    #[test]
    fn deconv_broadcasts_single_pixel() {
        // 1x1 input v, 2x2 ones kernel, stride 2 -> 2x2 all v.
        let x = DenseGrid::from_vec(&[1, 1, 1], vec![2.5]).unwrap();
        let mut p = Conv2dParams::zeros(1, 1, (2, 2)).with_stride(2);
        for v in p.weight.data_mut() {
            *v = 1.0;
        }
        let y = deconv2d_forward(&x, &p, false).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn deconv_zero_input_zero_output() {
        let x = DenseGrid::zeros(&[2, 3, 3]);
        let p = Conv2dParams::init(4, 2, (2, 2), &mut crate::rng(7)).with_stride(2);
        let y = deconv2d_forward(&x, &p, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_upsamples_80_to_160() {
        let x = DenseGrid::zeros(&[1, 80, 80]);
        let p = Conv2dParams::zeros(1, 1, (2, 2)).with_stride(2);
        let y = deconv2d_forward(&x, &p, false).unwrap();
        assert_eq!(y.shape(), &[1, 160, 160]);
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = crate::rng(3);
        let x = DenseGrid::from_vec(
            &[2, 5, 5],
            (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let p = Conv2dParams::init(3, 2, (3, 3), &mut rng).with_padding(1);
        let a = conv2d_forward(&x, &p, true).unwrap();
        let b = conv2d_forward(&x, &p, true).unwrap();
        assert_eq!(a, b);
    }
}
