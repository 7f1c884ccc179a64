use super::upsample::UpsampleBilinear;
use super::{BatchNorm, Conv2d, Dropout, Flatten, Layer, LayerParams, Linear, Mode, Relu, Scalar, Tensor, TensorError};

/// Closed set of layer types a [`Sequential`] can hold. An enum keeps
/// networks `Clone` so evaluation can fan out over read-only copies.
#[derive(Clone, Debug)]
pub enum AnyLayer<T: Scalar = f32> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu<T>),
    Dropout(Dropout<T>),
    Flatten(Flatten),
    Upsample(UpsampleBilinear),
}

impl<T: Scalar> AnyLayer<T> {
    fn inner(&self) -> &dyn Layer<T> {
        match self {
            AnyLayer::Conv(l) => l,
            AnyLayer::Linear(l) => l,
            AnyLayer::BatchNorm(l) => l,
            AnyLayer::Relu(l) => l,
            AnyLayer::Dropout(l) => l,
            AnyLayer::Flatten(l) => l,
            AnyLayer::Upsample(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            AnyLayer::Conv(l) => l,
            AnyLayer::Linear(l) => l,
            AnyLayer::BatchNorm(l) => l,
            AnyLayer::Relu(l) => l,
            AnyLayer::Dropout(l) => l,
            AnyLayer::Flatten(l) => l,
            AnyLayer::Upsample(l) => l,
        }
    }
}

impl<T: Scalar> Layer<T> for AnyLayer<T> {
    fn kind(&self) -> &'static str {
        self.inner().kind()
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        self.inner_mut().forward(input, mode)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.inner_mut().backward(grad_output)
    }

    fn params(&self) -> Option<&LayerParams<T>> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        self.inner_mut().params_mut()
    }
}

/// Named layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T: Scalar = f32> {
    layers: Vec<(String, AnyLayer<T>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: AnyLayer<T>) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &AnyLayer<T>)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut AnyLayer<T>)> {
        self.layers.iter_mut().map(|(n, l)| (n.as_str(), l))
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let mut x = input.clone();
        for (name, layer) in &mut self.layers {
            x = layer.forward(&x, mode).map_err(|e| with_layer(name, e))?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = grad_output.clone();
        for (name, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g).map_err(|e| with_layer(name, e))?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<T>> {
        self.layers.iter_mut().filter_map(|(_, l)| l.params_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|(_, l)| l.params())
            .map(LayerParams::num_params)
            .sum()
    }
}

fn with_layer(name: &str, err: TensorError) -> TensorError {
    match err {
        TensorError::NonFinite { context, index } => TensorError::NonFinite {
            context: format!("{name}: {context}"),
            index,
        },
        TensorError::Config(msg) => TensorError::Config(format!("{name}: {msg}")),
        other => other,
    }
}
