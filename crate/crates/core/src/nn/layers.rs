use rand::Rng;

use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Square-kernel, stride-1, zero-padded ("same") convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    /// Uniform init with bound `gain / sqrt(fan_in)`; bias starts at zero.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, Some(b), self.kernel / 2)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (3.0 / inputs as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[outputs, inputs], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}
