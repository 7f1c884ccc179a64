use super::{Layer, Mode, Scalar, Tensor, TensorError};

/// Bilinear resize of `[batch, H, W, C]` to `[batch, out_h, out_w, C]` with
/// corner alignment: output corners sample input corners exactly.
#[derive(Clone, Debug)]
pub struct UpsampleBilinear {
    pub out_h: usize,
    pub out_w: usize,
    input_dims: Option<Vec<usize>>,
}

/// Source index pair and weight of the upper neighbour for one output coordinate.
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let pos = if out > 1 {
                o as f64 * (inp - 1) as f64 / (out - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl UpsampleBilinear {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            input_dims: None,
        }
    }

    fn check<T: Scalar>(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, usize), TensorError> {
        let [b, h, w, c] = input.dims() else {
            return Err(TensorError::Config(format!(
                "upsample expects [batch, H, W, C], got {:?}",
                input.dims()
            )));
        };
        if self.out_h < *h || self.out_w < *w {
            return Err(TensorError::Config(format!(
                "upsample target {}x{} smaller than input {h}x{w}",
                self.out_h, self.out_w
            )));
        }
        Ok((*b, *h, *w, *c))
    }
}

impl<T: Scalar> Layer<T> for UpsampleBilinear {
    fn kind(&self) -> &'static str {
        "upsample_bilinear"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let (b, h, w, c) = self.check(input)?;
        let ty = taps(self.out_h, h);
        let tx = taps(self.out_w, w);
        let x = input.data();
        let mut out = vec![T::zero(); b * self.out_h * self.out_w * c];
        for n in 0..b {
            let src = &x[n * h * w * c..][..h * w * c];
            let dst = &mut out[n * self.out_h * self.out_w * c..][..self.out_h * self.out_w * c];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let w00 = (T::one() - fy) * (T::one() - fx);
                    let w01 = (T::one() - fy) * fx;
                    let w10 = fy * (T::one() - fx);
                    let w11 = fy * fx;
                    let p00 = &src[(y0 * w + x0) * c..][..c];
                    let p01 = &src[(y0 * w + x1) * c..][..c];
                    let p10 = &src[(y1 * w + x0) * c..][..c];
                    let p11 = &src[(y1 * w + x1) * c..][..c];
                    let o = &mut dst[(oy * self.out_w + ox) * c..][..c];
                    for k in 0..c {
                        o[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.input_dims = Some(input.dims().to_vec());
        }
        let out = Tensor::new(vec![b, self.out_h, self.out_w, c], out)?;
        out.ensure_finite("upsample forward")?;
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let dims = self
            .input_dims
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("upsample_bilinear".into()))?;
        let (b, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
        if grad_output.dims() != [b, self.out_h, self.out_w, c] {
            return Err(TensorError::Config("upsample grad shape mismatch".into()));
        }
        let ty = taps(self.out_h, h);
        let tx = taps(self.out_w, w);
        let dy = grad_output.data();
        let mut dx = vec![T::zero(); b * h * w * c];
        for n in 0..b {
            let g = &dy[n * self.out_h * self.out_w * c..][..self.out_h * self.out_w * c];
            let d = &mut dx[n * h * w * c..][..h * w * c];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let go = &g[(oy * self.out_w + ox) * c..][..c];
                    let weights = [
                        ((y0 * w + x0) * c, (T::one() - fy) * (T::one() - fx)),
                        ((y0 * w + x1) * c, (T::one() - fy) * fx),
                        ((y1 * w + x0) * c, fy * (T::one() - fx)),
                        ((y1 * w + x1) * c, fy * fx),
                    ];
                    for (base, wt) in weights {
                        for k in 0..c {
                            d[base + k] = d[base + k] + wt * go[k];
                        }
                    }
                }
            }
        }
        Tensor::new(dims, dx)
    }
}
