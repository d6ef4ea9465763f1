//! Fully connected policy network `pi(z | W)`.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix in
//! row-major `(out, in)` order followed by the bias. Hidden layers use the
//! configured activation, the output layer is linear.
//!
//! Besides forward evaluation and first-order gradients, the network exposes
//! a reverse-over-forward pass ([`Mlp::second_order_vjp`]) that
//! differentiates a Jacobian-vector product. This supplies the mixed second
//! derivatives needed to differentiate through gradient-ascent steps on the
//! input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Incompatible(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(&self, h: f64) -> f64 {
        match self {
            Activation::Tanh => h.tanh(),
            Activation::Identity => h,
        }
    }

    /// First and second derivative expressed through the activation output.
    #[inline]
    fn derivs_from_output(&self, a: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let d1 = 1.0 - a * a;
                (d1, -2.0 * a * d1)
            }
            Activation::Identity => (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Layer activations from a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Forward pass carrying a tangent direction alongside the activations.
#[derive(Debug, Clone)]
pub struct TangentTrace {
    acts: Vec<Vec<f64>>,
    tangents: Vec<Vec<f64>>,
}

impl TangentTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// `J(z) v` at the traced input.
    pub fn output_tangent(&self) -> &[f64] {
        self.tangents.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderGrad {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
    pub tangent: Vec<f64>,
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn new(dims: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|d| *d == 0) {
            return Err(Error::Contract(format!("invalid layer dims {dims:?}")));
        }
        let expected = param_count(&dims);
        if params.len() != expected {
            return Err(Error::Contract(format!(
                "{} parameters for dims {dims:?}, expected {expected}",
                params.len()
            )));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::Contract("non-finite network parameter".into()));
        }
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    /// LeCun-normal weights (`std = 1/sqrt(fan_in)`) and zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).unwrap();
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self::new(dims.to_vec(), activation, params)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.dims.clone(), self.activation, params)
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(weight offset, bias offset)` of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.dims[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (start, start + self.dims[l] * self.dims[l + 1])
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "policy input has {} entries, expected {}",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn act_for(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    fn affine(&self, l: usize, x: &[f64], with_bias: bool) -> Vec<f64> {
        let (wo, bo) = self.offsets(l);
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[wo..wo + n_in * n_out];
        (0..n_out)
            .map(|i| {
                let row = &w[i * n_in..(i + 1) * n_in];
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                if with_bias {
                    dot + self.params[bo + i]
                } else {
                    dot
                }
            })
            .collect()
    }

    pub fn trace(&self, z: &[f64]) -> Result<Trace> {
        self.check_input(z)?;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(z.to_vec());
        for l in 0..self.n_layers() {
            let act = self.act_for(l);
            let mut h = self.affine(l, acts.last().unwrap(), true);
            h.iter_mut().for_each(|v| *v = act.apply(*v));
            acts.push(h);
        }
        Ok(Trace { acts })
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(z)?.acts.pop().unwrap())
    }

    /// Reverse pass of `<upstream, pi(z)>`. Adds `scale * dW` into
    /// `grad_params` when given and returns the input gradient.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grad_params: Option<&mut [f64]>, scale: f64) -> Vec<f64> {
        let mut grad_params = grad_params;
        let mut bar = upstream.to_vec();
        for l in (0..self.n_layers()).rev() {
            let act = self.act_for(l);
            let out = &trace.acts[l + 1];
            let input = &trace.acts[l];
            for (b, a) in bar.iter_mut().zip(out) {
                *b *= act.derivs_from_output(*a).0;
            }
            let (wo, bo) = self.offsets(l);
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            if let Some(g) = grad_params.as_deref_mut() {
                for i in 0..n_out {
                    let hb = scale * bar[i];
                    if hb != 0.0 {
                        let row = &mut g[wo + i * n_in..wo + (i + 1) * n_in];
                        row.iter_mut().zip(input).for_each(|(r, x)| *r += hb * x);
                    }
                    g[bo + i] += hb;
                }
            }
            let w = &self.params[wo..wo + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for i in 0..n_out {
                let hb = bar[i];
                if hb != 0.0 {
                    w[i * n_in..(i + 1) * n_in]
                        .iter()
                        .zip(prev.iter_mut())
                        .for_each(|(wij, p)| *p += wij * hb);
                }
            }
            bar = prev;
        }
        bar
    }

    /// Gradient of `<upstream, pi(z)>` with respect to all parameters.
    pub fn grad_params(&self, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(z)?;
        self.check_output(upstream)?;
        let mut g = vec![0.0; self.num_params()];
        self.backward(&trace, upstream, Some(&mut g), 1.0);
        Ok(g)
    }

    /// Gradient of `<upstream, pi(z)>` with respect to the input.
    pub fn grad_input(&self, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(z)?;
        self.check_output(upstream)?;
        Ok(self.backward(&trace, upstream, None, 1.0))
    }

    fn check_output(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.output_dim() {
            return Err(Error::Contract(format!(
                "output cotangent has {} entries, expected {}",
                v.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass together with the Jacobian-vector product `J(z) v`.
    pub fn tangent_trace(&self, z: &[f64], v: &[f64]) -> Result<TangentTrace> {
        self.check_input(z)?;
        self.check_input(v)?;
        let mut acts = vec![z.to_vec()];
        let mut tangents = vec![v.to_vec()];
        for l in 0..self.n_layers() {
            let act = self.act_for(l);
            let mut h = self.affine(l, acts.last().unwrap(), true);
            let mut hd = self.affine(l, tangents.last().unwrap(), false);
            for (a, t) in h.iter_mut().zip(hd.iter_mut()) {
                *a = act.apply(*a);
                *t *= act.derivs_from_output(*a).0;
            }
            acts.push(h);
            tangents.push(hd);
        }
        Ok(TangentTrace { acts, tangents })
    }

    /// Reverse pass through [`Mlp::tangent_trace`]: gradients of
    /// `<cot_y, pi(z)> + <cot_ydot, J(z) v>` with respect to the parameters
    /// (accumulated as `scale * dW` into `grad_params`), the input `z` and
    /// the tangent `v`.
    pub fn backward_tangent(
        &self,
        trace: &TangentTrace,
        cot_y: &[f64],
        cot_ydot: &[f64],
        grad_params: Option<&mut [f64]>,
        scale: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut grad_params = grad_params;
        let mut a_bar = cot_y.to_vec();
        let mut t_bar = cot_ydot.to_vec();
        for l in (0..self.n_layers()).rev() {
            let act = self.act_for(l);
            let out = &trace.acts[l + 1];
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            // pre-activation tangent recovered from the post-activation one
            let mut h_bar = vec![0.0; n_out];
            let mut hd_bar = vec![0.0; n_out];
            let pre_tangent = self.affine(l, &trace.tangents[l], false);
            for i in 0..n_out {
                let (d1, d2) = act.derivs_from_output(out[i]);
                h_bar[i] = a_bar[i] * d1 + t_bar[i] * pre_tangent[i] * d2;
                hd_bar[i] = t_bar[i] * d1;
            }
            let (wo, bo) = self.offsets(l);
            let input = &trace.acts[l];
            let input_t = &trace.tangents[l];
            if let Some(g) = grad_params.as_deref_mut() {
                for i in 0..n_out {
                    let (hb, hdb) = (scale * h_bar[i], scale * hd_bar[i]);
                    let row = &mut g[wo + i * n_in..wo + (i + 1) * n_in];
                    for j in 0..n_in {
                        row[j] += hb * input[j] + hdb * input_t[j];
                    }
                    g[bo + i] += hb;
                }
            }
            let w = &self.params[wo..wo + n_in * n_out];
            let mut prev_a = vec![0.0; n_in];
            let mut prev_t = vec![0.0; n_in];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    prev_a[j] += row[j] * h_bar[i];
                    prev_t[j] += row[j] * hd_bar[i];
                }
            }
            a_bar = prev_a;
            t_bar = prev_t;
        }
        (a_bar, t_bar)
    }

    /// Mixed second-order contraction: gradients of
    /// `<cot_y, pi(z)> + <cot_ydot, J(z) v>` with respect to `W`, `z` and
    /// `v`. With `cot_y = 0` the parameter part is `d/dW [cot_ydot^T J v]`.
    pub fn second_order_vjp(&self, z: &[f64], v: &[f64], cot_y: &[f64], cot_ydot: &[f64]) -> Result<SecondOrderGrad> {
        self.check_output(cot_y)?;
        self.check_output(cot_ydot)?;
        let trace = self.tangent_trace(z, v)?;
        let mut params = vec![0.0; self.num_params()];
        let (input, tangent) = self.backward_tangent(&trace, cot_y, cot_ydot, Some(&mut params), 1.0);
        Ok(SecondOrderGrad {
            params,
            input,
            tangent,
        })
    }
}
