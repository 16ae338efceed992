use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::gemm;
use super::{NdError, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected network with a linear output layer.
///
/// Parameters are stored flat as `[w0, b0, w1, b1, ...]` where `wi` is
/// `in x out` and `bi` is `1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(widths, activation);
        for layer in 0..mlp.n_layers() {
            let bound = 1.0 / (widths[layer].max(1) as f64).sqrt();
            for p in &mut mlp.params[2 * layer..2 * layer + 2] {
                p.data_mut()
                    .iter_mut()
                    .for_each(|x| *x = rng.gen_range(-bound..=bound));
            }
        }
        mlp
    }

    /// Like [`Mlp::new`] but with the output layer drawn from `±out_bound`.
    pub fn with_small_output<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        out_bound: f64,
        rng: &mut R,
    ) -> Self {
        let mut mlp = Self::new(widths, activation, rng);
        let last = mlp.n_layers() - 1;
        for p in &mut mlp.params[2 * last..] {
            p.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-out_bound..=out_bound));
        }
        mlp
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let params = widths
            .windows(2)
            .flat_map(|w| {
                [
                    Tensor::zeros(vec![w[0], w[1]]),
                    Tensor::zeros(vec![1, w[1]]),
                ]
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            activation,
            params,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params[2 * layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.params[2 * layer + 1]
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NdError> {
        if x.cols() != self.input_width() {
            return Err(NdError::Shape {
                context: "Mlp input",
                expected: vec![self.input_width()],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NdError> {
        self.check_input(x)?;
        let n = x.rows();
        let mut h = x.data().to_vec();
        for layer in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let (w, b) = (&self.params[2 * layer], &self.params[2 * layer + 1]);
            let mut out = vec![0.0; n * fan_out];
            for row in out.chunks_mut(fan_out.max(1)) {
                row.copy_from_slice(b.data());
            }
            gemm(n, fan_in, fan_out, &h, false, w.data(), false, &mut out, true);
            if layer + 1 < self.n_layers() {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = out;
        }
        Tensor::matrix(n, self.output_width(), h)
    }

    /// Single-row convenience wrapper around [`Mlp::predict`].
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>, NdError> {
        Ok(self.predict(&Tensor::row(x))?.into_data())
    }

    /// Places the parameters on `tape` so that several forward passes can
    /// share them and accumulate into one gradient.
    pub fn bind(&self, tape: &mut Tape) -> MlpBinding {
        MlpBinding {
            vars: self.params.iter().map(|p| tape.param(p)).collect(),
            widths: self.widths.clone(),
            activation: self.activation,
        }
    }

    /// Binds and runs a single forward pass.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, MlpBinding), NdError> {
        let b = self.bind(tape);
        let y = b.forward(tape, x)?;
        Ok((y, b))
    }
}

/// Parameters of an [`Mlp`] as recorded on one tape.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    vars: Vec<Var>,
    widths: Vec<usize>,
    activation: Activation,
}

impl MlpBinding {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NdError> {
        let xin = tape.value(x);
        if xin.cols() != self.widths[0] {
            return Err(NdError::Shape {
                context: "Mlp input",
                expected: vec![self.widths[0]],
                got: xin.shape().to_vec(),
            });
        }
        let n_layers = self.widths.len() - 1;
        let mut h = x;
        for layer in 0..n_layers {
            let z = tape.matmul(h, self.vars[2 * layer]);
            h = tape.add_row(z, self.vars[2 * layer + 1]);
            if layer + 1 < n_layers {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adds the tape's gradients into `mlp`'s parameter tensors.
    pub fn accumulate_grads(&self, tape: &Tape, mlp: &mut Mlp) -> Result<(), NdError> {
        if mlp.params.len() != self.vars.len() {
            return Err(NdError::ParamCount {
                expected: self.vars.len(),
                got: mlp.params.len(),
            });
        }
        for (p, &v) in mlp.params.iter_mut().zip(&self.vars) {
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.numel()])?,
            }
        }
        Ok(())
    }
}

/// Polyak averaging: `target <- tau * target + (1 - tau) * source`.
pub fn polyak_update(target: &mut Mlp, source: &Mlp, tau: f64) {
    for (t, s) in target.params.iter_mut().zip(&source.params) {
        t.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(t, s)| *t = tau * *t + (1.0 - tau) * s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_output_last_bias() {
        let mut mlp = Mlp::zeros(&[3, 4, 2], Activation::Relu);
        mlp.bias_mut(1).data_mut().copy_from_slice(&[0.5, -1.5]);
        let y = mlp.predict_one(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.5]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut mlp = Mlp::zeros(&[2, 2], Activation::Tanh);
        mlp.weight_mut(0)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mlp.predict_one(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 8, 1], Activation::Relu, &mut rng);
        assert!(matches!(
            mlp.predict_one(&[1.0, 2.0]),
            Err(NdError::Shape { .. })
        ));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0]));
        assert!(mlp.forward(&mut tape, x).is_err());
    }

    #[test]
    fn tape_forward_equals_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[3, 16, 16, 2], Activation::Tanh, &mut rng);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, _) = mlp.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), mlp.predict(&x).unwrap().data());
    }

    #[test]
    fn polyak_mixes_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng);
        let b = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng);
        let mut t = a.clone();
        polyak_update(&mut t, &b, 0.9);
        for ((pt, pa), pb) in t.params().iter().zip(a.params()).zip(b.params()) {
            for ((x, y), z) in pt.data().iter().zip(pa.data()).zip(pb.data()) {
                assert!((x - (0.9 * y + 0.1 * z)).abs() <= 1e-12);
            }
        }
    }
}
