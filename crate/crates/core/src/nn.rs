//! Minimal dense-network machinery: affine layers with ReLU/identity
//! activations, hand-derived reverse-mode gradients, and an AdamW optimizer
//! with a cosine-annealed learning rate.
//!
//! This is deliberately not a general autodiff system. The architectures in
//! this crate are fixed stacks of dense layers, so gradients are written out
//! directly and checked against finite differences in the tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation.
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `act(W x + b)` with `W` stored row-major (out × in).
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl Layer {
    fn forward_into(&self, x: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        out.clear();
        for r in 0..self.out_dim {
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            let mut z = self.b[r];
            for (wi, xi) in row.iter().zip(x) {
                z += wi * xi;
            }
            pre.push(z);
            out.push(self.act.apply(z));
        }
    }
}

/// A stack of dense layers with chained dimensions.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Intermediate activations of a forward pass, kept for the backward pass.
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pres: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    /// `(d_w, d_b)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetGrads {
    pub fn zeros_of(net: &DenseNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, o) in w.iter_mut().zip(ow) {
                *a += o;
            }
            for (a, o) in b.iter_mut().zip(ob) {
                *a += o;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in self.layers.iter_mut() {
            for v in w.iter_mut() {
                *v *= s;
            }
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    fn append_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }
}

impl DenseNet {
    /// Builds a network with the given layer dimensions and activations.
    /// `dims` has one more entry than `acts`. Weights are initialized
    /// uniformly in ±sqrt(6 / (fan_in + fan_out)), biases at zero.
    pub fn new<R: Rng>(dims: &[usize], acts: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "dims must chain with acts");
        let mut layers = Vec::with_capacity(acts.len());
        for (i, &act) in acts.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
                act,
            });
        }
        DenseNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        Ok(cur)
    }

    /// Forward pass keeping every intermediate needed by [`DenseNet::backward_cached`].
    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            let mut out = Vec::new();
            layer.forward_into(&cur, &mut pre, &mut out);
            inputs.push(std::mem::replace(&mut cur, out));
            pres.push(pre);
        }
        Ok(ForwardCache { inputs, pres, output: cur })
    }

    /// Exact reverse-mode gradients of the forward map. Returns the parameter
    /// gradients and the gradient with respect to the network input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let cache = self.forward_cached(input)?;
        self.backward_cached(&cache, upstream)
    }

    /// Backward pass reusing a cached forward.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
    ) -> Result<(NetGrads, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dim(format!(
                "upstream gradient has length {}, network output is {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut grads = NetGrads::zeros_of(self);
        let mut delta = upstream.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pres[li];
            let x = &cache.inputs[li];
            // d/d pre = upstream * act'(pre)
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= layer.act.deriv(z);
            }
            let (dw, db) = &mut grads.layers[li];
            let mut dx = vec![0.0; layer.in_dim];
            for r in 0..layer.out_dim {
                let dr = delta[r];
                db[r] += dr;
                let wrow = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
                let dwrow = &mut dw[r * layer.in_dim..(r + 1) * layer.in_dim];
                for c in 0..layer.in_dim {
                    dwrow[c] += dr * x[c];
                    dx[c] += dr * wrow[c];
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dim(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in self.layers.iter_mut() {
            let wn = l.w.len();
            l.w.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> NetCheckpoint {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        NetCheckpoint {
            dims,
            acts: self.layers.iter().map(|l| l.act).collect(),
            params: self.flat_params(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        if ck.dims.len() != ck.acts.len() + 1 || ck.acts.is_empty() {
            return Err(Error::Schema(
                "checkpoint dims do not chain with activations".into(),
            ));
        }
        if ck.dims.iter().any(|&d| d == 0) {
            return Err(Error::Schema("checkpoint has a zero-width layer".into()));
        }
        let layers: Vec<Layer> = ck
            .acts
            .iter()
            .enumerate()
            .map(|(i, &act)| Layer {
                w: vec![0.0; ck.dims[i] * ck.dims[i + 1]],
                b: vec![0.0; ck.dims[i + 1]],
                in_dim: ck.dims[i],
                out_dim: ck.dims[i + 1],
                act,
            })
            .collect();
        let mut net = DenseNet { layers };
        if ck.params.len() != net.param_count() {
            return Err(Error::Schema(format!(
                "checkpoint holds {} parameters, shapes require {}",
                ck.params.len(),
                net.param_count()
            )));
        }
        if ck.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("checkpoint contains non-finite parameters".into()));
        }
        net.set_flat_params(&ck.params)?;
        Ok(net)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dim(format!(
                "input has length {}, first layer expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Serializable form of a [`DenseNet`]: layer shapes, activation tags and the
/// flat parameter array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub dims: Vec<usize>,
    pub acts: Vec<Activation>,
    pub params: Vec<f64>,
}

/// Concatenates the flat parameters of several networks, in order.
pub fn collect_flat_params(nets: &[&DenseNet]) -> Vec<f64> {
    let mut out = Vec::new();
    for n in nets {
        out.extend(n.flat_params());
    }
    out
}

/// Writes a flat parameter vector back into several networks, in order.
pub fn assign_flat_params(nets: &mut [&mut DenseNet], flat: &[f64]) -> Result<()> {
    let total: usize = nets.iter().map(|n| n.param_count()).sum();
    if flat.len() != total {
        return Err(Error::Dim(format!(
            "expected {} parameters across nets, got {}",
            total,
            flat.len()
        )));
    }
    let mut off = 0;
    for n in nets.iter_mut() {
        let c = n.param_count();
        n.set_flat_params(&flat[off..off + c])?;
        off += c;
    }
    Ok(())
}

/// Concatenates per-net gradients in the same order as [`collect_flat_params`].
pub fn collect_flat_grads(grads: &[&NetGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        g.append_flat(&mut out);
    }
    out
}

/// AdamW with decoupled weight decay and a cosine-annealed learning rate.
///
/// The effective rate for step `i` (0-based, `i < total_steps`) is
/// `base_lr * 0.5 * (1 + cos(pi * i / (total_steps - 1)))`, i.e. the first
/// step runs at the base rate and the last scheduled step at zero.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    total_steps: usize,
    base_lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(param_count: usize, base_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        AdamW {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            total_steps,
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Cosine-annealed learning rate for a given 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base_lr;
        }
        let t = step as f64 / (self.total_steps - 1) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// One update. Rejects non-finite gradients and stepping past the
    /// schedule.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dim(format!(
                "optimizer holds {} parameters, got params={} grads={}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if self.step >= self.total_steps {
            return Err(Error::Numeric(format!(
                "optimizer stepped past its schedule of {} steps",
                self.total_steps
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {i} on step {}",
                self.step
            )));
        }
        let lr = self.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = DenseNet::new(&[3, 3], &[Activation::Identity], &mut rng(0));
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        net.layers[0].w = w;
        let out = net.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(out, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let mut net = DenseNet::new(&[2, 2], &[Activation::Relu], &mut rng(1));
        net.layers[0].w = vec![-1.0, 0.0, 0.0, -1.0];
        net.layers[0].b = vec![0.0, 0.0];
        let out = net.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_computation() {
        let mut net = DenseNet::new(&[2, 2, 1], &[Activation::Relu, Activation::Identity], &mut rng(2));
        net.layers[0].w = vec![1.0, 2.0, -3.0, 0.5];
        net.layers[0].b = vec![0.1, -0.2];
        net.layers[1].w = vec![2.0, -1.0];
        net.layers[1].b = vec![0.3];
        let x = [0.4, -0.6];
        // layer 1 pre: [1*0.4 + 2*(-0.6) + 0.1, -3*0.4 + 0.5*(-0.6) - 0.2] = [-0.7, -1.7]
        // relu -> [0, 0]; layer 2: 0.3
        let out = net.forward(&x).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);

        net.layers[0].b = vec![1.0, 2.0];
        // pre: [1*0.4 + 2*(-0.6) + 1.0, -3*0.4 + 0.5*(-0.6) + 2.0] = [0.2, 0.5]
        // relu -> [0.2, 0.5]; out = 2*0.2 - 1*0.5 + 0.3 = 0.2
        let out = net.forward(&x).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn linear_weight_gradient_is_input() {
        // y = w . x, single identity layer, scalar output
        let mut net = DenseNet::new(&[3, 1], &[Activation::Identity], &mut rng(3));
        net.layers[0].w = vec![0.7, -0.1, 0.4];
        net.layers[0].b = vec![0.0];
        let x = [2.0, 3.0, -1.0];
        let (grads, _) = net.backward(&x, &[1.0]).unwrap();
        assert_eq!(grads.layers[0].0, vec![2.0, 3.0, -1.0]);
        assert_eq!(grads.layers[0].1, vec![1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNet::new(&[4, 5, 2], &[Activation::Relu, Activation::Identity], &mut rng(4));
        let (grads, dx) = net.backward(&[0.3, -0.2, 0.9, 0.1], &[0.0, 0.0]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        for (w, b) in &grads.layers {
            assert!(w.iter().all(|&v| v == 0.0));
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    /// Scalar loss L = sum(out * upstream); central finite differences on
    /// every parameter and input coordinate.
    fn finite_diff_check(net: &DenseNet, x: &[f64], upstream: &[f64]) {
        let h = 1e-5;
        let loss = |n: &DenseNet, x: &[f64]| -> f64 {
            n.forward(x)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(o, u)| o * u)
                .sum()
        };
        let (grads, dx) = net.backward(x, upstream).unwrap();
        let flat_analytic = collect_flat_grads(&[&grads]);
        let base = net.flat_params();
        for i in 0..base.len() {
            let mut np = net.clone();
            let mut p = base.clone();
            p[i] += h;
            np.set_flat_params(&p).unwrap();
            let up = loss(&np, x);
            p[i] -= 2.0 * h;
            np.set_flat_params(&p).unwrap();
            let down = loss(&np, x);
            let fd = (up - down) / (2.0 * h);
            let a = flat_analytic[i];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!(
                (fd - a).abs() / denom < 1e-4,
                "param {i}: fd={fd} analytic={a}"
            );
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let up = loss(net, &xp);
            xp[i] -= 2.0 * h;
            let down = loss(net, &xp);
            let fd = (up - down) / (2.0 * h);
            let a = dx[i];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!((fd - a).abs() / denom < 1e-4, "input {i}: fd={fd} analytic={a}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(5);
        for case in 0..20 {
            let dims: Vec<usize> = match case % 3 {
                0 => vec![3, 8, 2],
                1 => vec![5, 16, 16, 1],
                _ => vec![2, 4, 3],
            };
            let acts: Vec<Activation> = (0..dims.len() - 1)
                .map(|i| {
                    if i + 2 == dims.len() {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    }
                })
                .collect();
            let net = DenseNet::new(&dims, &acts, &mut r);
            let x: Vec<f64> = (0..dims[0]).map(|_| r.random_range(-2.0..2.0)).collect();
            let upstream: Vec<f64> = (0..*dims.last().unwrap())
                .map(|_| r.random_range(-1.0..1.0))
                .collect();
            finite_diff_check(&net, &x, &upstream);
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = DenseNet::new(&[6, 12, 4], &[Activation::Relu, Activation::Identity], &mut rng(6));
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.37 - 1.0).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = DenseNet::new(&[4, 7, 3], &[Activation::Relu, Activation::Identity], &mut rng(9));
        let b = DenseNet::new(&[4, 7, 3], &[Activation::Relu, Activation::Identity], &mut rng(9));
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        // f(w) = (w - 3)^2, grad = 2 (w - 3)
        let mut w = vec![0.0];
        let mut opt = AdamW::new(1, 0.1, 0.0, 200);
        for _ in 0..200 {
            let g = vec![2.0 * (w[0] - 3.0)];
            opt.step(&mut w, &g).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.1, "w = {}", w[0]);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut w = vec![1.25, -0.5];
        let mut opt = AdamW::new(2, 0.01, 0.0, 10);
        opt.step(&mut w, &[0.0, 0.0]).unwrap();
        assert_eq!(w, vec![1.25, -0.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let opt = AdamW::new(1, 0.5, 0.0, 100);
        assert!((opt.lr_at(0) - 0.5).abs() < 1e-15);
        assert!(opt.lr_at(99) <= 0.5 * 1e-3);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut w = vec![0.0];
        let mut opt = AdamW::new(1, 0.1, 0.0, 5);
        let err = opt.step(&mut w, &[f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn stepping_past_schedule_rejected() {
        let mut w = vec![0.0];
        let mut opt = AdamW::new(1, 0.1, 0.0, 1);
        opt.step(&mut w, &[0.1]).unwrap();
        assert!(opt.step(&mut w, &[0.1]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng(11));
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::new(&[5, 9, 2], &[Activation::Relu, Activation::Identity], &mut rng(12));
        let ck = net.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&json).unwrap();
        let net2 = DenseNet::from_checkpoint(&back).unwrap();
        assert_eq!(net.flat_params(), net2.flat_params());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng(13));
        let mut ck = net.checkpoint();
        ck.params.pop();
        assert!(DenseNet::from_checkpoint(&ck).is_err());
        let mut ck2 = net.checkpoint();
        ck2.params[0] = f64::INFINITY;
        assert!(DenseNet::from_checkpoint(&ck2).is_err());
    }
}
