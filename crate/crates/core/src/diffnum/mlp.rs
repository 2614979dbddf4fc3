use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffnum::tape::{GradTape, NodeId, ParamKind};
use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub fn grad_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected network: `layer_dims = [in, h1, ..., out]`, weights stored
/// row-major `[out, in]` per layer, hidden activation on all but the last
/// layer, `output_activation` on the last.
#[derive(Debug)]
pub struct Mlp {
    uid: u64,
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    hidden_activation: Activation,
    output_activation: Activation,
}

impl Clone for Mlp {
    /// Clones get a fresh uid: a clone is a distinct parameter set (e.g. a
    /// target network), so its gradients must not alias the source's.
    fn clone(&self) -> Self {
        Mlp {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }
}

impl Mlp {
    /// Random init: weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn new(
        layer_dims: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::dims("Mlp::new", "at least 2 layer dims", layer_dims.len()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::dims("Mlp::new", "nonzero dims", format!("{layer_dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in layer_dims.windows(2) {
            let (din, dout) = (win[0], win[1]);
            let bound = 1.0 / (din as f32).sqrt();
            let data: Vec<f32> = (0..din * dout).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Tensor::matrix(dout, din, data)?);
            biases.push(Tensor::vector(vec![0.0; dout]));
        }
        Ok(Mlp {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            layer_dims,
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    /// Build from explicit parameters (used by tests and checkpoint loading).
    pub fn from_params(
        layer_dims: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_dims.len() < 2
            || weights.len() != layer_dims.len() - 1
            || biases.len() != layer_dims.len() - 1
        {
            return Err(Error::dims(
                "Mlp::from_params",
                format!("{} layers", layer_dims.len().saturating_sub(1)),
                format!("{} weights / {} biases", weights.len(), biases.len()),
            ));
        }
        for (i, win) in layer_dims.windows(2).enumerate() {
            if weights[i].shape() != [win[1], win[0]] {
                return Err(Error::dims(
                    "Mlp::from_params weight",
                    format!("[{}, {}]", win[1], win[0]),
                    format!("{:?}", weights[i].shape()),
                ));
            }
            if biases[i].shape() != [win[1]] {
                return Err(Error::dims(
                    "Mlp::from_params bias",
                    format!("[{}]", win[1]),
                    format!("{:?}", biases[i].shape()),
                ));
            }
        }
        Ok(Mlp {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            layer_dims,
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    /// Number of parameter scalars.
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum::<usize>()
            + self.biases.iter().map(Tensor::numel).sum::<usize>()
    }

    /// Parameter-wise equality (exact bits).
    pub fn params_equal(&self, other: &Mlp) -> bool {
        self.layer_dims == other.layer_dims
            && self.weights == other.weights
            && self.biases == other.biases
    }

    fn activation_for_layer(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Plain forward pass; input is `[batch, in]` (or a vector, one row).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.last_dim() != self.input_dim() {
            return Err(Error::dims("mlp_forward", self.input_dim(), input.last_dim()));
        }
        let batch = input.rows();
        let mut cur = input.clone();
        for layer in 0..self.num_layers() {
            let (din, dout) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
            let mut y = vec![0.0f32; batch * dout];
            for r in 0..batch {
                y[r * dout..(r + 1) * dout].copy_from_slice(self.biases[layer].data());
            }
            crate::diffnum::linalg::matmul_xwt(
                cur.data(),
                self.weights[layer].data(),
                &mut y,
                batch,
                din,
                dout,
            );
            let act = self.activation_for_layer(layer);
            if act != Activation::Identity {
                for v in y.iter_mut() {
                    *v = act.apply(*v);
                }
            }
            cur = Tensor::matrix(batch, dout, y)?;
        }
        Ok(cur)
    }

    /// Convenience single-row forward.
    pub fn forward_vec(&self, input: &[f32]) -> Result<Vec<f32>> {
        Ok(self.forward(&Tensor::vector(input.to_vec()))?.into_data())
    }

    /// Forward pass recorded on `tape`, registering this net's parameters.
    pub fn forward_taped(&self, tape: &mut GradTape, input: NodeId) -> Result<NodeId> {
        if tape.value(input).last_dim() != self.input_dim() {
            return Err(Error::dims(
                "mlp_forward",
                self.input_dim(),
                tape.value(input).last_dim(),
            ));
        }
        let mut cur = input;
        for layer in 0..self.num_layers() {
            let w = tape.param((self.uid, layer, ParamKind::Weight), &self.weights[layer]);
            let b = tape.param((self.uid, layer, ParamKind::Bias), &self.biases[layer]);
            cur = tape.linear(cur, w, b)?;
            cur = tape.activation(cur, self.activation_for_layer(layer));
        }
        Ok(cur)
    }

    /// target <- tau * online + (1 - tau) * target
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f32) {
        debug_assert_eq!(self.layer_dims, online.layer_dims);
        for layer in 0..self.num_layers() {
            for (t, o) in self.weights[layer]
                .data_mut()
                .iter_mut()
                .zip(online.weights[layer].data())
            {
                *t = tau * o + (1.0 - tau) * *t;
            }
            for (t, o) in self.biases[layer]
                .data_mut()
                .iter_mut()
                .zip(online.biases[layer].data())
            {
                *t = tau * o + (1.0 - tau) * *t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn identity_weight_passes_input_through() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let net = Mlp::from_params(
            vec![3, 3],
            vec![eye],
            vec![Tensor::vector(vec![0.0; 3])],
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap();
        let x = vec![0.3, -1.2, 2.5];
        assert_eq!(net.forward_vec(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let net = Mlp::from_params(
            vec![2, 3],
            vec![Tensor::matrix(3, 2, vec![0.0; 6]).unwrap()],
            vec![Tensor::vector(vec![1.0, -2.0, 0.5])],
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward_vec(&[9.0, -9.0]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        // Independent re-computation of a 2-layer tanh net with plain loops.
        let mut rng = rng_for(11, "mlp-oracle");
        let net = Mlp::new(vec![4, 5, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x: Vec<f32> = (0..4).map(|i| 0.1 * i as f32 - 0.2).collect();

        let mut h = vec![0.0f32; 5];
        for o in 0..5 {
            let mut acc = net.bias(0).data()[o];
            for i in 0..4 {
                acc += net.weight(0).data()[o * 4 + i] * x[i];
            }
            h[o] = acc.tanh();
        }
        let mut y = vec![0.0f32; 2];
        for o in 0..2 {
            let mut acc = net.bias(1).data()[o];
            for (i, hv) in h.iter().enumerate() {
                acc += net.weight(1).data()[o * 5 + i] * hv;
            }
            y[o] = acc;
        }

        let got = net.forward_vec(&x).unwrap();
        for (g, e) in got.iter().zip(&y) {
            let rel = (g - e).abs() / e.abs().max(1e-6);
            assert!(rel < 1e-6, "got {g}, expected {e}");
        }
    }

    #[test]
    fn forward_rejects_bad_input_dim() {
        let mut rng = rng_for(1, "mlp");
        let net = Mlp::new(vec![3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(
            net.forward_vec(&[1.0, 2.0]),
            Err(crate::error::Error::Dimension { .. })
        ));
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = rng_for(2, "mlp");
        let net = Mlp::new(vec![3, 8, 1], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
        let x = [0.5, -0.5, 0.25];
        assert_eq!(net.forward_vec(&x).unwrap(), net.forward_vec(&x).unwrap());
    }

    #[test]
    fn soft_update_moves_by_tau() {
        let mut rng = rng_for(3, "mlp");
        let online = Mlp::new(vec![2, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut target = Mlp::new(vec![2, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let before = target.weight(0).data().to_vec();
        let tau = 0.005;
        target.soft_update_from(&online, tau);
        for ((t, b), o) in target.weight(0).data().iter().zip(&before).zip(online.weight(0).data()) {
            let expect = tau * o + (1.0 - tau) * b;
            assert!((t - expect).abs() < 1e-7);
        }
    }
}
