//! Numeric kernels behind the graph ops. All loops have a fixed reduction order,
//! so results are bitwise reproducible regardless of the worker count.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c = a · b + beta · c` with optional transposition of the stored operands.
///
/// `a` is logically `m × k` and `b` is `k × n`; with `*_t` set they are stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n row-major
    // (or transposed) regions whose lengths are checked by the debug assertion.
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

fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation; output is `N × C_out × H_out × W_out`.
pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.col_cols();
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.par_chunks(in_len))
        .for_each(|(o, x)| {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(g, x, &mut cols);
            if let Some(b) = bias {
                for (oc, chunk) in o.chunks_mut(g.col_cols()).enumerate() {
                    chunk.fill(b[oc]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(g.out_channels, g.col_rows(), g.col_cols(), weight, false, &cols, false, beta, o);
        });
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.col_cols();
    let wlen = g.out_channels * g.col_rows();

    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = input
        .par_chunks(in_len)
        .zip(grad_out.par_chunks(out_len))
        .map(|(x, dy)| {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(g, x, &mut cols);
            let mut dw = vec![0.0; wlen];
            gemm(g.out_channels, g.col_cols(), g.col_rows(), dy, false, &cols, true, 0.0, &mut dw);
            let dx = need_input.then(|| {
                gemm(g.col_rows(), g.out_channels, g.col_cols(), weight, true, dy, false, 0.0, &mut cols);
                let mut dx = vec![0.0; in_len];
                col2im(g, &cols, &mut dx);
                dx
            });
            (dw, dx)
        })
        .collect();

    let mut dweight = vec![0.0; wlen];
    let mut dinput = need_input.then(|| Vec::with_capacity(g.batch * in_len));
    for (dw, dx) in per_sample {
        for (a, b) in dweight.iter_mut().zip(&dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let mut dbias = vec![0.0; g.out_channels];
    for dy in grad_out.chunks(out_len) {
        for (oc, chunk) in dy.chunks(g.col_cols()).enumerate() {
            dbias[oc] += chunk.iter().sum::<f64>();
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

/// Per-channel sums over batch and space, visiting elements in a fixed order.
pub fn channel_sums(x: &[f64], dims: [usize; 4], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += x[base..base + plane]
                .iter()
                .enumerate()
                .map(|(i, &v)| f(base + i, v))
                .sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.batch * g.out_channels * ho * wo];
        for n in 0..g.batch {
            for oc in 0..g.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oc];
                        for ic in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.in_channels + ic) * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                        out[((n * g.out_channels + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_loops() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let g = ConvGeom {
                batch: 2,
                in_channels: 3,
                height: 5,
                width: 5,
                out_channels: 4,
                kernel: k,
                stride,
                pad,
            };
            let x = lcg(1, 2 * 3 * 25);
            let w = lcg(2, 4 * 3 * k * k);
            let b = lcg(3, 4);
            let fast = conv2d_forward(&g, &x, &w, Some(&b));
            let slow = naive_conv(&g, &x, &w, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        for h in [4, 5, 6, 7] {
            let g = ConvGeom {
                batch: 1,
                in_channels: 1,
                height: h,
                width: h,
                out_channels: 1,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            assert_eq!(g.out_height(), h.div_ceil(2));
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let g = ConvGeom {
            batch: 1,
            in_channels: 1,
            height: 3,
            width: 4,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let x = lcg(9, 12);
        assert_eq!(conv2d_forward(&g, &x, &[1.0], None), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let g = ConvGeom {
            batch: 1,
            in_channels: 2,
            height: 3,
            width: 3,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let out = conv2d_forward(&g, &[0.0; 18], &lcg(4, 36), Some(&[0.5, -1.5]));
        assert!(out[..9].iter().all(|&v| v == 0.5));
        assert!(out[9..].iter().all(|&v| v == -1.5));
    }
}
