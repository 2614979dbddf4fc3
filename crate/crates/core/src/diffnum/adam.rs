use crate::diffnum::mlp::Mlp;
use crate::diffnum::tape::GradientMap;
use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment buffers for one net, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    /// Zero-initialized state shaped like `net`'s parameters, interleaved
    /// (weight, bias) per layer.
    pub fn new(net: &Mlp) -> Self {
        let mut m = Vec::new();
        for layer in 0..net.num_layers() {
            m.push(vec![0.0; net.weight(layer).numel()]);
            m.push(vec![0.0; net.bias(layer).numel()]);
        }
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update on a flat parameter slice.
fn update_slice(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, h: &AdamHyper) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Apply one Adam step to every parameter of `net` using gradients from
/// `grads`. Increments the state's step counter.
pub fn adam_step(net: &mut Mlp, grads: &GradientMap, state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if state.m.len() != 2 * net.num_layers() {
        return Err(Error::dims("adam_step", 2 * net.num_layers(), state.m.len()));
    }
    state.step += 1;
    let t = state.step;
    for layer in 0..net.num_layers() {
        let gw = grads
            .weight(net, layer)
            .ok_or_else(|| Error::contract(format!("missing weight gradient for layer {layer}")))?
            .clone();
        let gb = grads
            .bias(net, layer)
            .ok_or_else(|| Error::contract(format!("missing bias gradient for layer {layer}")))?
            .clone();
        check_shape("adam_step weight", net.weight(layer), &gw)?;
        check_shape("adam_step bias", net.bias(layer), &gb)?;
        let (mw, rest) = state.m[2 * layer..].split_first_mut().unwrap();
        let mb = &mut rest[0];
        let (vw, rest) = state.v[2 * layer..].split_first_mut().unwrap();
        let vb = &mut rest[0];
        update_slice(net.weight_mut(layer).data_mut(), gw.data(), mw, vw, t, h);
        update_slice(net.bias_mut(layer).data_mut(), gb.data(), mb, vb, t, h);
    }
    Ok(())
}

fn check_shape(op: &'static str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::dims(
            op,
            format!("{:?}", p.shape()),
            format!("{:?}", g.shape()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::mlp::Activation;
    use crate::diffnum::tape::GradTape;
    use crate::diffnum::tensor::Tensor;
    use crate::seeding::rng_for;

    fn scalar_net(p: f32) -> Mlp {
        Mlp::from_params(
            vec![1, 1],
            vec![Tensor::matrix(1, 1, vec![p]).unwrap()],
            vec![Tensor::vector(vec![0.0])],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
    }

    /// grads for loss = (w*1 + b - target)^2 via the tape
    fn quad_grads(net: &Mlp, target: f32) -> GradientMap {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let y = net.forward_taped(&mut tape, x).unwrap();
        let t = tape.constant(Tensor::matrix(1, 1, vec![target]).unwrap());
        let diff = tape.sub(y, t).unwrap();
        let loss = tape.mean_sq_all(diff);
        tape.gradient(loss, &[net]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut rng = rng_for(4, "adam");
        let mut net = Mlp::new(vec![2, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let before_w = net.weight(0).clone();

        // Loss that ignores the net's output entirely -> zero grads for it.
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let _y = net.forward_taped(&mut tape, x).unwrap();
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mean_sq_all(c);
        let grads = tape.gradient(loss, &[&net]).unwrap();

        let mut state = AdamState::new(&net);
        adam_step(&mut net, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(net.weight(0), &before_w);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // minimize (p - 3)^2 with p entering as w*1.
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net);
        let h = AdamHyper::with_lr(0.1);
        for _ in 0..500 {
            let grads = quad_grads(&net, 3.0);
            adam_step(&mut net, &grads, &mut state, &h).unwrap();
        }
        let p = net.weight(0).data()[0] + net.bias(0).data()[0];
        assert!((p - 3.0).abs() < 1e-2, "p = {p}");
    }

    #[test]
    fn first_step_magnitude_is_bias_corrected_lr() {
        // With g = 1 on the first step: m_hat = 1, v_hat = 1, so the update is
        // exactly lr / (1 + eps).
        let mut p = vec![0.0f32];
        let g = vec![1.0f32];
        let mut m = vec![0.0f32];
        let mut v = vec![0.0f32];
        let h = AdamHyper::with_lr(0.05);
        update_slice(&mut p, &g, &mut m, &mut v, 1, &h);
        let expect = -h.lr / (1.0 + h.eps);
        assert!((p[0] - expect).abs() < 1e-9, "got {}", p[0]);
    }
}
