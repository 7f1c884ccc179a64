use rand::Rng;

use super::{axpy, dot, Layer, LayerParams, Mode, Scalar, Tensor, TensorError};

/// 2-D convolution over channels-last input `[batch, H, W, C_in]`.
///
/// Weights are `[kh, kw, C_in, C_out]`, bias `[C_out]`. Implemented as
/// im2col followed by a small matrix product per sample.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub params: LayerParams<T>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    input_dims: Vec<usize>,
    cols: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(params: LayerParams<T>, stride: usize, padding: usize) -> Result<Self, TensorError> {
        let wd = params.weights.dims();
        if wd.len() != 4 || params.bias.dims() != [wd[3]] {
            return Err(TensorError::Config(format!(
                "conv weights {:?} / bias {:?} inconsistent",
                wd,
                params.bias.dims()
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv stride must be >= 1".into()));
        }
        Ok(Self {
            params,
            stride,
            padding,
            cache: None,
        })
    }

    pub fn init(
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let params = LayerParams::he_uniform(&[kernel, kernel, cin, cout], cout, fan_in, 1.0, rng);
        Self {
            params,
            stride,
            padding,
            cache: None,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let wd = self.params.weights.dims();
        let (kh, kw) = (wd[0], wd[1]);
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if kh > ph || kw > pw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn geometry(&self, dims: &[usize]) -> Result<Geometry, TensorError> {
        let wd = self.params.weights.dims();
        let [_, h, w, c] = dims else {
            return Err(TensorError::Config(format!(
                "conv expects [batch, H, W, C], got {dims:?}"
            )));
        };
        if *c != wd[2] {
            return Err(TensorError::Config(format!(
                "conv expects {} input channels, got {c}",
                wd[2]
            )));
        }
        let (oh, ow) = self.output_size(*h, *w).ok_or_else(|| {
            TensorError::Config(format!(
                "kernel {}x{} larger than padded input {h}x{w} (pad {})",
                wd[0], wd[1], self.padding
            ))
        })?;
        Ok(Geometry {
            h: *h,
            w: *w,
            cin: *c,
            kh: wd[0],
            kw: wd[1],
            cout: wd[3],
            oh,
            ow,
        })
    }

    fn im2col(&self, g: &Geometry, x: &[T], cols: &mut [T]) {
        let patch = g.patch();
        let pad = self.padding as isize;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
                for ky in 0..g.kh {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    for kx in 0..g.kw {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                            dst.copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(stride: usize, padding: usize, g: &Geometry, dcols: &[T], dx: &mut [T]) {
    let patch = g.patch();
    let pad = padding as isize;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dcols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = &mut dx[((iy as usize) * g.w + ix as usize) * g.cin..][..g.cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let g = self.geometry(input.dims())?;
        let batch = input.batch();
        let patch = g.patch();
        let pixels = g.oh * g.ow;
        let in_len = g.h * g.w * g.cin;
        let mut cols = vec![T::zero(); batch * pixels * patch];
        let mut out = vec![T::zero(); batch * pixels * g.cout];
        let w = self.params.weights.data();
        let b = self.params.bias.data();
        for n in 0..batch {
            let c = &mut cols[n * pixels * patch..][..pixels * patch];
            self.im2col(&g, &input.data()[n * in_len..][..in_len], c);
            let o = &mut out[n * pixels * g.cout..][..pixels * g.cout];
            for (prow, orow) in c.chunks_exact(patch).zip(o.chunks_exact_mut(g.cout)) {
                orow.copy_from_slice(b);
                for (k, &pv) in prow.iter().enumerate() {
                    if pv != T::zero() {
                        axpy(pv, &w[k * g.cout..(k + 1) * g.cout], orow);
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, g.oh, g.ow, g.cout], out)?;
        out.ensure_finite("conv2d forward")?;
        if mode == Mode::Train {
            self.cache = Some(ConvCache {
                input_dims: input.dims().to_vec(),
                cols,
            });
        }
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("conv2d".into()))?;
        let g = self.geometry(&cache.input_dims)?;
        let batch = cache.input_dims[0];
        if grad_output.dims() != [batch, g.oh, g.ow, g.cout] {
            return Err(TensorError::Config(format!(
                "conv grad {:?} does not match output [{batch}, {}, {}, {}]",
                grad_output.dims(),
                g.oh,
                g.ow,
                g.cout
            )));
        }
        let patch = g.patch();
        let pixels = g.oh * g.ow;
        let in_len = g.h * g.w * g.cin;
        let mut grad_input = vec![T::zero(); batch * in_len];
        let mut dcols = vec![T::zero(); pixels * patch];
        let (stride, padding) = (self.stride, self.padding);
        let LayerParams {
            weights,
            grad_weights,
            grad_bias,
            ..
        } = &mut self.params;
        let w = weights.data();
        let gw = grad_weights.data_mut();
        let gb = grad_bias.data_mut();
        for n in 0..batch {
            let c = &cache.cols[n * pixels * patch..][..pixels * patch];
            let dy = &grad_output.data()[n * pixels * g.cout..][..pixels * g.cout];
            for ((prow, dyrow), drow) in c
                .chunks_exact(patch)
                .zip(dy.chunks_exact(g.cout))
                .zip(dcols.chunks_exact_mut(patch))
            {
                for (gbv, &d) in gb.iter_mut().zip(dyrow) {
                    *gbv = *gbv + d;
                }
                for (k, (&pv, dc)) in prow.iter().zip(drow.iter_mut()).enumerate() {
                    let wk = &w[k * g.cout..(k + 1) * g.cout];
                    *dc = dot(wk, dyrow);
                    if pv != T::zero() {
                        axpy(pv, dyrow, &mut gw[k * g.cout..(k + 1) * g.cout]);
                    }
                }
            }
            col2im_add(stride, padding, &g, &dcols, &mut grad_input[n * in_len..][..in_len]);
        }
        let grad = Tensor::new(cache.input_dims, grad_input)?;
        grad.ensure_finite("conv2d backward")?;
        Ok(grad)
    }

    fn params(&self) -> Option<&LayerParams<T>> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        Some(&mut self.params)
    }
}
