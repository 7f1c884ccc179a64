use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fusion, PoseNetError, FUSED_CHANNELS, FUSED_SIZE};
use crate::tensorkit::{
    sigmoid, AnyLayer, BatchNorm, Conv2d, Dropout, Flatten, LayerParams, Linear, Mode, Relu, Sequential, Tensor,
    BN_EPSILON,
};

/// Fused features plus the D-mask channel.
pub const STAGE2_CHANNELS: usize = FUSED_CHANNELS + 1;

const STAGE1_CONV_OUT: usize = 16;
const STAGE1_FC: [usize; 3] = [512, 256, 128];
/// Final-layer init gain; keeps initial logits near zero so the untrained
/// loss sits at the uniform-prediction value.
const HEAD_GAIN: f64 = 0.01;

fn check_batch(x: &Tensor<f32>, channels: usize) -> Result<(), PoseNetError> {
    match x.dims() {
        [_, h, w, c] if *h == FUSED_SIZE && *w == FUSED_SIZE && *c == channels => Ok(()),
        d => Err(PoseNetError::Shape(format!(
            "expected [batch, {FUSED_SIZE}, {FUSED_SIZE}, {channels}], got {d:?}"
        ))),
    }
}

/// Shared trunk (conv, three FC blocks) and separate azimuth/elevation heads.
#[derive(Clone, Debug)]
pub struct Stage1Net {
    pub trunk: Sequential<f32>,
    pub az_head: Sequential<f32>,
    pub el_head: Sequential<f32>,
}

impl Stage1Net {
    pub fn new(k_az: usize, k_el: usize, dropout_p: f64, seed: u64) -> Result<Self, PoseNetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Sequential::new();
        let conv = Conv2d::init(5, FUSED_CHANNELS, STAGE1_CONV_OUT, 4, 2, &mut rng);
        let side = conv.output_size(FUSED_SIZE, FUSED_SIZE).expect("kernel fits").0;
        trunk
            .push("conv", AnyLayer::Conv(conv))
            .push("relu0", AnyLayer::Relu(Relu::new()))
            .push("flatten", AnyLayer::Flatten(Flatten::new()));
        let mut width = side * side * STAGE1_CONV_OUT;
        for (i, &out) in STAGE1_FC.iter().enumerate() {
            let n = i + 1;
            trunk
                .push(format!("fc{n}"), AnyLayer::Linear(Linear::init(width, out, 1.0, &mut rng)))
                .push(format!("bn{n}"), AnyLayer::BatchNorm(BatchNorm::new(out)))
                .push(format!("relu{n}"), AnyLayer::Relu(Relu::new()))
                .push(
                    format!("drop{n}"),
                    AnyLayer::Dropout(Dropout::new(dropout_p, seed.wrapping_add(n as u64))?),
                );
            width = out;
        }
        let mut az_head = Sequential::new();
        az_head.push("fc", AnyLayer::Linear(Linear::init(width, k_az, HEAD_GAIN, &mut rng)));
        let mut el_head = Sequential::new();
        el_head.push("fc", AnyLayer::Linear(Linear::init(width, k_el, HEAD_GAIN, &mut rng)));
        Ok(Self { trunk, az_head, el_head })
    }

    fn head_width(head: &Sequential<f32>) -> usize {
        match head.layers().next() {
            Some((_, AnyLayer::Linear(l))) => l.out_features(),
            _ => 0,
        }
    }

    pub fn k_az(&self) -> usize {
        Self::head_width(&self.az_head)
    }

    pub fn k_el(&self) -> usize {
        Self::head_width(&self.el_head)
    }

    /// `[B, 128, 128, 8]` -> (`[B, K_az]`, `[B, K_el]`) logits.
    pub fn forward(&mut self, fused: &Tensor<f32>, mode: Mode) -> Result<(Tensor<f32>, Tensor<f32>), PoseNetError> {
        check_batch(fused, FUSED_CHANNELS)?;
        let h = self.trunk.forward(fused, mode)?;
        let az = self.az_head.forward(&h, mode)?;
        let el = self.el_head.forward(&h, mode)?;
        Ok((az, el))
    }

    pub fn backward(&mut self, d_az: &Tensor<f32>, d_el: &Tensor<f32>) -> Result<(), PoseNetError> {
        let mut g = self.az_head.backward(d_az)?;
        g.add_assign(&self.el_head.backward(d_el)?)?;
        self.trunk.backward(&g)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<f32>> {
        self.trunk
            .params_mut()
            .chain(self.az_head.params_mut())
            .chain(self.el_head.params_mut())
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.az_head.num_params() + self.el_head.num_params()
    }

    pub(crate) fn parts(&self) -> [(&'static str, &Sequential<f32>); 3] {
        [("trunk", &self.trunk), ("az_head", &self.az_head), ("el_head", &self.el_head)]
    }

    pub(crate) fn parts_mut(&mut self) -> [(&'static str, &mut Sequential<f32>); 3] {
        [
            ("trunk", &mut self.trunk),
            ("az_head", &mut self.az_head),
            ("el_head", &mut self.el_head),
        ]
    }
}

/// Binary verifier over `[B, 128, 128, 9]` inputs; outputs one logit per
/// sample.
#[derive(Clone, Debug)]
pub struct Stage2Net {
    pub layers: Sequential<f32>,
}

impl Stage2Net {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a6_e002);
        let mut layers = Sequential::new();
        let c1 = Conv2d::init(3, STAGE2_CHANNELS, 16, 2, 1, &mut rng);
        let s1 = c1.output_size(FUSED_SIZE, FUSED_SIZE).expect("fits").0;
        let c2 = Conv2d::init(3, 16, 32, 2, 1, &mut rng);
        let s2 = c2.output_size(s1, s1).expect("fits").0;
        layers
            .push("conv1", AnyLayer::Conv(c1))
            .push("bn1", AnyLayer::BatchNorm(BatchNorm::new(16)))
            .push("relu1", AnyLayer::Relu(Relu::new()))
            .push("conv2", AnyLayer::Conv(c2))
            .push("bn2", AnyLayer::BatchNorm(BatchNorm::new(32)))
            .push("relu2", AnyLayer::Relu(Relu::new()))
            .push("flatten", AnyLayer::Flatten(Flatten::new()))
            .push("fc1", AnyLayer::Linear(Linear::init(s2 * s2 * 32, 256, 1.0, &mut rng)))
            .push("relu3", AnyLayer::Relu(Relu::new()))
            .push("fc2", AnyLayer::Linear(Linear::init(256, 64, 1.0, &mut rng)))
            .push("relu4", AnyLayer::Relu(Relu::new()))
            .push("fc3", AnyLayer::Linear(Linear::init(64, 1, HEAD_GAIN, &mut rng)));
        Self { layers }
    }

    /// `[B, 1]` logits.
    pub fn forward(&mut self, input: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>, PoseNetError> {
        check_batch(input, STAGE2_CHANNELS)?;
        Ok(self.layers.forward(input, mode)?)
    }

    /// Sigmoid probabilities in eval mode.
    pub fn probabilities(&mut self, input: &Tensor<f32>) -> Result<Vec<f64>, PoseNetError> {
        let logits = self.forward(input, Mode::Eval)?;
        Ok(logits.data().iter().map(|&z| sigmoid(z as f64)).collect())
    }

    pub fn backward(&mut self, d_logits: &Tensor<f32>) -> Result<(), PoseNetError> {
        self.layers.backward(d_logits)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<f32>> {
        self.layers.params_mut()
    }
}

/// Hand-set weights that read bin indices straight from the features.
///
/// Expects every normal-feature pixel to carry the azimuth bin index in
/// channel 0 and the elevation bin index in channel 1. The fusion conv and
/// every trunk layer pass those two values through unchanged, and the heads
/// compute `2 a k - k^2`, which is maximal at `k = a`.
pub fn oracle_stage1(k_az: usize, k_el: usize) -> Result<(Fusion, Stage1Net), PoseNetError> {
    let mut fuse_w = Tensor::zeros(&[1, 1, 16, FUSED_CHANNELS]);
    fuse_w.data_mut()[0] = 1.0; // in 0 -> out 0
    fuse_w.data_mut()[FUSED_CHANNELS + 1] = 1.0; // in 1 -> out 1
    let fusion = Fusion::from_conv(Conv2d::new(
        LayerParams::new(fuse_w, Tensor::zeros(&[FUSED_CHANNELS])),
        1,
        0,
    )?)?;

    let mut net = Stage1Net::new(k_az, k_el, 0.0, 0)?;
    let mut widths = vec![32 * 32 * STAGE1_CONV_OUT];
    widths.extend(STAGE1_FC);
    let mut fc = 0;
    for (_, layer) in net.trunk.layers_mut() {
        match layer {
            AnyLayer::Conv(c) => {
                let mut w = Tensor::zeros(&[5, 5, FUSED_CHANNELS, STAGE1_CONV_OUT]);
                let center = (2 * 5 + 2) * FUSED_CHANNELS * STAGE1_CONV_OUT;
                w.data_mut()[center] = 1.0;
                w.data_mut()[center + STAGE1_CONV_OUT + 1] = 1.0;
                c.params = LayerParams::new(w, Tensor::zeros(&[STAGE1_CONV_OUT]));
            }
            AnyLayer::Linear(l) => {
                let (inp, out) = (widths[fc], widths[fc + 1]);
                let mut w = Tensor::zeros(&[out, inp]);
                w.data_mut()[0] = 1.0;
                w.data_mut()[inp + 1] = 1.0;
                l.params = LayerParams::new(w, Tensor::zeros(&[out]));
                fc += 1;
            }
            AnyLayer::BatchNorm(b) => {
                let c = b.channels();
                let mut p = LayerParams::new(Tensor::filled(&[c], 1.0), Tensor::zeros(&[c]));
                p.running_mean = Some(vec![0.0; c]);
                p.running_var = Some(vec![(1.0 - BN_EPSILON) as f32; c]);
                *b = BatchNorm::from_params(p)?;
            }
            _ => {}
        }
    }
    let last = *widths.last().expect("non-empty");
    for (head, k, src) in [(&mut net.az_head, k_az, 0usize), (&mut net.el_head, k_el, 1usize)] {
        let mut w = Tensor::zeros(&[k, last]);
        let mut b = Tensor::zeros(&[k]);
        for j in 0..k {
            w.data_mut()[j * last + src] = 2.0 * j as f32;
            b.data_mut()[j] = -((j * j) as f32);
        }
        *head = Sequential::new();
        head.push("fc", AnyLayer::Linear(Linear::new(LayerParams::new(w, b))?));
    }
    Ok((fusion, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenet::FeatureInput;
    use crate::tensorkit::softmax;

    fn random_batch(b: usize, c: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, FUSED_SIZE, FUSED_SIZE, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn stage1_shapes_and_determinism() {
        let mut net = Stage1Net::new(9, 5, 0.5, 1).unwrap();
        let x = random_batch(2, 8, 0);
        let (a, e) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!((a.dims(), e.dims()), (&[2, 9][..], &[2, 5][..]));
        let (a2, e2) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.data(), a2.data());
        assert_eq!(e.data(), e2.data());
        for row in a.data().chunks(9) {
            let s: f32 = softmax(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!((net.k_az(), net.k_el()), (9, 5));
    }

    #[test]
    fn stage2_outputs_probabilities() {
        let mut net = Stage2Net::new(4);
        let x = random_batch(3, 9, 1);
        let p = net.probabilities(&x).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, net.probabilities(&x).unwrap());
        assert!(net.forward(&random_batch(1, 8, 0), Mode::Eval).is_err());
    }

    #[test]
    fn oracle_reads_bins_from_features() {
        let (fusion, mut net) = oracle_stage1(9, 5).unwrap();
        for a in 0..9 {
            for e in 0..5 {
                let normal = Tensor::from_fn(&[16, 16, 8], |i| match i % 8 {
                    0 => a as f32,
                    1 => e as f32,
                    _ => 0.7,
                });
                let fused = fusion
                    .fuse(&FeatureInput::new(normal, Tensor::filled(&[16, 16, 8], -3.0)).unwrap())
                    .unwrap();
                let (az, el) = net.forward(&fused.reshape(&[1, 128, 128, 8]).unwrap(), Mode::Eval).unwrap();
                let argmax = |v: &[f32]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
                assert_eq!((argmax(az.data()), argmax(el.data())), (a, e));
            }
        }
    }
}
