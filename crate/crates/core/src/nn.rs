//! 3×3 convolution (padding 1) via im2col and GEMM, with its backward pass.
//!
//! Tensors are dense CHW `f64` slices for a single image.

use matrixmultiply::dgemm;

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, with explicit strides so that
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of the slices for the
    // given dimensions; callers pass buffers sized by the same shapes.
    unsafe {
        dgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub relu: bool,
}

impl ConvShape {
    pub const KERNEL: usize = 3;

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * Self::KERNEL * Self::KERNEL
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size - 1) / self.stride + 1
    }
}

/// Saved activations of one conv application.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    out: Vec<f64>,
    h: usize,
    w: usize,
}

impl ConvCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

fn im2col(input: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let p = ho * wo;
    let mut cols = vec![0.0; cin * 9 * p];
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let p = ho * wo;
    let mut out = vec![0.0; cin * h * w];
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward pass. `params` holds the weights `[cout, cin·9]` followed by the bias.
pub fn conv_forward(shape: ConvShape, params: &[f64], input: &[f64], h: usize, w: usize) -> ConvCache {
    debug_assert_eq!(params.len(), shape.param_len());
    debug_assert_eq!(input.len(), shape.cin * h * w);
    let (weights, bias) = params.split_at(shape.weight_len());
    let (cols, ho, wo) = im2col(input, shape.cin, h, w, shape.stride);
    let p = ho * wo;
    let k = shape.cin * 9;
    let mut out = vec![0.0; shape.cout * p];
    for (o, b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].fill(*b);
    }
    gemm(
        shape.cout,
        k,
        p,
        weights,
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        1.0,
        &mut out,
    );
    if shape.relu {
        for v in &mut out {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    ConvCache { cols, out, h, w }
}

/// Backward pass. `dout` is the gradient w.r.t. the (post-activation) output
/// and is consumed. Parameter gradients are accumulated into `dparams`; the
/// input gradient is returned when requested.
pub fn conv_backward(
    shape: ConvShape,
    params: &[f64],
    cache: &ConvCache,
    mut dout: Vec<f64>,
    dparams: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let ho = shape.out_size(cache.h);
    let wo = shape.out_size(cache.w);
    let p = ho * wo;
    let k = shape.cin * 9;
    debug_assert_eq!(dout.len(), shape.cout * p);
    if shape.relu {
        for (d, o) in dout.iter_mut().zip(&cache.out) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
    }
    let (dw, db) = dparams.split_at_mut(shape.weight_len());
    for (o, g) in db.iter_mut().enumerate() {
        *g += dout[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    // dW[cout×k] += dZ[cout×p] · colsᵀ[p×k]
    gemm(
        shape.cout,
        p,
        k,
        &dout,
        (p as isize, 1),
        &cache.cols,
        (1, p as isize),
        1.0,
        dw,
    );
    if !want_input_grad {
        return None;
    }
    let weights = &params[..shape.weight_len()];
    // dcols[k×p] = Wᵀ[k×cout] · dZ[cout×p]
    let mut dcols = vec![0.0; k * p];
    gemm(
        k,
        shape.cout,
        p,
        weights,
        (1, k as isize),
        &dout,
        (p as isize, 1),
        0.0,
        &mut dcols,
    );
    Some(col2im(&dcols, shape.cin, cache.h, cache.w, shape.stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct 3×3 convolution, used as an oracle for the im2col path.
    fn naive_conv(shape: ConvShape, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let ho = shape.out_size(h);
        let wo = shape.out_size(w);
        let mut out = vec![0.0; shape.cout * ho * wo];
        for o in 0..shape.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = params[shape.weight_len() + o];
                    for c in 0..shape.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * shape.stride + ky) as isize - 1;
                                let ix = (ox * shape.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += params[((o * shape.cin + c) * 3 + ky) * 3 + kx]
                                    * input[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = if shape.relu { acc.max(0.0) } else { acc };
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let shape = ConvShape { cin: 2, cout: 3, stride, relu: true };
            let params = random(shape.param_len(), &mut rng);
            let input = random(2 * 7 * 6, &mut rng);
            let got = conv_forward(shape, &params, &input, 7, 6);
            let want = naive_conv(shape, &params, &input, 7, 6);
            for (a, b) in got.output().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = ConvShape { cin: 2, cout: 2, stride: 2, relu: false };
        let params = random(shape.param_len(), &mut rng);
        let input = random(2 * 5 * 5, &mut rng);
        let cache = conv_forward(shape, &params, &input, 5, 5);
        let upstream = random(cache.output().len(), &mut rng);
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            naive_conv(shape, p, x, 5, 5).iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut dparams = vec![0.0; params.len()];
        let dinput = conv_backward(shape, &params, &cache, upstream.clone(), &mut dparams, true).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut a = params.clone();
            let mut b = params.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a, &input) - loss(&b, &input)) / (2.0 * h);
            assert!((fd - dparams[i]).abs() < 1e-6, "param {i}");
        }
        for i in 0..input.len() {
            let mut a = input.clone();
            let mut b = input.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&params, &a) - loss(&params, &b)) / (2.0 * h);
            assert!((fd - dinput[i]).abs() < 1e-6, "input {i}");
        }
    }
}
