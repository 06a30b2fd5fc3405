//! Minimal 2D convolution with explicit im2col forward and backward passes.
//! All tensors are HWC `f64`; matrix products go through ndarray's `dot`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand_chacha::ChaCha12Rng;

use super::ModelError;

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Saved activations needed by the backward pass.
#[derive(Debug)]
pub struct ConvCache {
    patches: Array2<f64>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Conv2d {
    /// He-normal weight init, zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_fn(
            (out_channels, in_channels, kernel, kernel),
            |_| std * standard_normal(rng),
        );
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    /// Weight as a `[in*k*k, out]` matrix matching the im2col column layout.
    fn weight_matrix(&self) -> Array2<f64> {
        let (out_c, in_c, k, _) = self.weight.dim();
        let mut m = Array2::zeros((in_c * k * k, out_c));
        for o in 0..out_c {
            for c in 0..in_c {
                for ky in 0..k {
                    for kx in 0..k {
                        m[[(c * k + ky) * k + kx, o]] = self.weight[[o, c, ky, kx]];
                    }
                }
            }
        }
        m
    }

    fn im2col(&self, input: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (h, w, cin) = input.dim();
        let k = self.kernel();
        let (oh, ow) = self.out_hw(h, w);
        let pad = self.padding as isize;
        let mut patches = Array2::zeros((oh * ow, cin * k * k));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            patches[[row, (c * k + ky) * k + kx]] =
                                input[[iy as usize, ix as usize, c]];
                        }
                    }
                }
            }
        }
        (patches, (oh, ow))
    }

    pub fn forward(&self, input: &Array3<f64>) -> Result<(Array3<f64>, ConvCache), ModelError> {
        let (h, w, cin) = input.dim();
        if cin != self.in_channels() {
            return Err(ModelError::ChannelMismatch {
                expected: self.in_channels(),
                got: cin,
            });
        }
        let (patches, (oh, ow)) = self.im2col(input);
        let mut out2 = patches.dot(&self.weight_matrix());
        out2 += &self.bias.view().insert_axis(Axis(0));
        let out = out2
            .into_shape_with_order((oh, ow, self.out_channels()))
            .expect("matmul output is contiguous");
        Ok((
            out,
            ConvCache {
                patches,
                in_dim: (h, w, cin),
                out_hw: (oh, ow),
            },
        ))
    }

    /// Gradients for the input and the parameters given d(loss)/d(output).
    /// Parameter grads come back as `[weight, bias]` in dynamic-dim form.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_out: &Array3<f64>,
    ) -> (Array3<f64>, Vec<ArrayD<f64>>) {
        let (oh, ow) = cache.out_hw;
        let (h, w, cin) = cache.in_dim;
        let out_c = self.out_channels();
        let k = self.kernel();
        let d_out2 = d_out
            .to_shape((oh * ow, out_c))
            .expect("dims match")
            .to_owned();
        let d_bias = d_out2.sum_axis(Axis(0));
        let d_wm = cache.patches.t().dot(&d_out2);
        let mut d_weight = Array4::zeros(self.weight.dim());
        for o in 0..out_c {
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        d_weight[[o, c, ky, kx]] = d_wm[[(c * k + ky) * k + kx, o]];
                    }
                }
            }
        }
        let d_patches = d_out2.dot(&self.weight_matrix().t());
        let mut d_input = Array3::zeros((h, w, cin));
        let pad = self.padding as isize;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            d_input[[iy as usize, ix as usize, c]] +=
                                d_patches[[row, (c * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
        (d_input, vec![d_weight.into_dyn(), d_bias.into_dyn()])
    }
}
