//! Minimal CHW tensors and the convolution / dense kernels used by the
//! embedder, each with an explicit backward pass. Weights live in one flat
//! parameter vector; layers only hold offsets into it.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn add_inplace(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Zeroes gradient entries where the forward ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How a parameter block is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    He { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub range: Range<usize>,
    pub init: Init,
}

/// Allocates named, contiguous parameter ranges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize, init: Init) -> Range<usize> {
        let range = self.len..self.len + len;
        self.len += len;
        self.blocks.push(ParamBlock {
            name: name.into(),
            range: range.clone(),
            init,
        });
        range
    }

    pub fn block_of(&self, index: usize) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.range.contains(&index))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = layout.alloc(format!("{name}.weight"), out_c * fan_in, Init::He { fan_in });
        let bias = layout.alloc(format!("{name}.bias"), out_c, Init::Constant(0.0));
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Unfolds input patches into a `(in_c * k * k) x (oh * ow)` matrix.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let cols = oh * ow;
        let mut out = vec![0.0; self.patch_len() * cols];
        for c in 0..self.in_c {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= x.h {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < x.w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_grad: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let cols = oh * ow;
        let mut dx = Tensor::zeros(self.in_c, h, w);
        for c in 0..self.in_c {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols_grad[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let oh = self.out_side(x.h);
        let ow = self.out_side(x.w);
        let n = oh * ow;
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        let bias = &params[self.bias.clone()];
        for (o, chunk) in y.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[o]);
        }
        let weight = &params[self.weight.clone()];
        if self.is_pointwise() {
            gemm(self.out_c, self.in_c, n, weight, false, &x.data, false, 1.0, &mut y.data);
        } else {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_c, self.patch_len(), n, weight, false, &cols, false, 1.0, &mut y.data);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        dy: &Tensor,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (dy.h, dy.w);
        let n = oh * ow;
        {
            let db = &mut grads[self.bias.clone()];
            for (o, chunk) in dy.data.chunks(n).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        let weight = &params[self.weight.clone()];
        let kdim = self.patch_len();
        if self.is_pointwise() {
            gemm(self.out_c, n, kdim, &dy.data, false, &x.data, true, 1.0, &mut grads[self.weight.clone()]);
            if !need_input_grad {
                return None;
            }
            let mut dx = Tensor::zeros(self.in_c, x.h, x.w);
            gemm(kdim, self.out_c, n, weight, true, &dy.data, false, 0.0, &mut dx.data);
            Some(dx)
        } else {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_c, n, kdim, &dy.data, false, &cols, true, 1.0, &mut grads[self.weight.clone()]);
            if !need_input_grad {
                return None;
            }
            let mut dcols = vec![0.0; kdim * n];
            gemm(kdim, self.out_c, n, weight, true, &dy.data, false, 0.0, &mut dcols);
            Some(self.col2im(&dcols, x.h, x.w, oh, ow))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = layout.alloc(
            format!("{name}.weight"),
            in_dim * out_dim,
            Init::He { fan_in: in_dim },
        );
        let bias = layout.alloc(format!("{name}.bias"), out_dim, Init::Constant(0.0));
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = &params[self.weight.clone()];
        let b = &params[self.bias.clone()];
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        {
            let dw = &mut grads[self.weight.clone()];
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, &xi) in dw[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        {
            let db = &mut grads[self.bias.clone()];
            for (d, &g) in db.iter_mut().zip(dy) {
                *d += g;
            }
        }
        let w = &params[self.weight.clone()];
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &wi) in dx.iter_mut().zip(&w[o * self.in_dim..(o + 1) * self.in_dim]) {
                *d += g * wi;
            }
        }
        dx
    }
}

pub fn relu_vec(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu_vec_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = x.plane() as f64;
    x.data.chunks(x.plane()).map(|p| p.iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(dpooled: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let n = (h * w) as f64;
    let mut dx = Tensor::zeros(c, h, w);
    for (chunk, &g) in dx.data.chunks_mut(h * w).zip(dpooled) {
        chunk.fill(g / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_reference(conv: &Conv2d, params: &[f64], x: &Tensor) -> Tensor {
        let oh = conv.out_side(x.h);
        let ow = conv.out_side(x.w);
        let k = conv.kernel;
        let w = &params[conv.weight.clone()];
        let b = &params[conv.bias.clone()];
        let mut y = Tensor::zeros(conv.out_c, oh, ow);
        for o in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..conv.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += w[((o * conv.in_c + c) * k + ky) * k + kx]
                                        * x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_reference_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 4, 0), (1, 1, 0), (1, 2, 0)] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::new(&mut layout, "c", 2, 3, k, s, p);
            let params = random_vec(&mut rng, layout.len);
            let x = Tensor::from_vec(2, 8, 8, random_vec(&mut rng, 128));
            let y = conv.forward(&params, &x);
            let r = conv_reference(&conv, &params, &x);
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }

            // Scalar probe L = <dy, y>; check dL/dx and dL/dw by central differences.
            let dy = Tensor::from_vec(y.c, y.h, y.w, random_vec(&mut rng, y.data.len()));
            let probe = |params: &[f64], x: &Tensor| -> f64 {
                conv_reference(&conv, params, x)
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let mut grads = vec![0.0; layout.len];
            let dx = conv.backward(&params, &x, &dy, &mut grads, true).unwrap();
            let h = 1e-6;
            for i in [0, 5, params.len() - 1] {
                let mut pp = params.clone();
                pp[i] += h;
                let mut pm = params.clone();
                pm[i] -= h;
                let fd = (probe(&pp, &x) - probe(&pm, &x)) / (2.0 * h);
                assert!((fd - grads[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grads[i]);
            }
            for i in [0, 17, 127] {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let fd = (probe(&params, &xp) - probe(&params, &xm)) / (2.0 * h);
                assert!((fd - dx.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layout = ParamLayout::default();
        let lin = Linear::new(&mut layout, "fc", 5, 3);
        let params = random_vec(&mut rng, layout.len);
        let x = random_vec(&mut rng, 5);
        let dy = random_vec(&mut rng, 3);
        let mut grads = vec![0.0; layout.len];
        let dx = lin.backward(&params, &x, &dy, &mut grads);
        let probe = |p: &[f64], x: &[f64]| -> f64 {
            lin.forward(p, x).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..layout.len {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            assert!(((probe(&pp, &x) - probe(&pm, &x)) / (2.0 * h) - grads[i]).abs() < 1e-8);
        }
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert!(((probe(&params, &xp) - probe(&params, &xm)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
    }
}
