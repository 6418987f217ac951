//! Deterministic MLP control law mapping an observation to `(v, θ)`.
//!
//! Hidden layers use `tanh`. The final linear layer produces two values: a
//! speed logit squashed to `v_max · sigmoid(z)` and a raw heading.
//!
//! Flat parameter layout, layer by layer: the weight matrix in row-major
//! `[out][in]` order followed by the bias vector `[out]`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Control, ControlSource, Scenario, State};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 32];
pub const OUTPUT_DIM: usize = 2;

/// Observation length for `k` users: position, relative positions, backlogs.
pub fn observation_dim(k: usize) -> usize {
    2 + 3 * k
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// `[input, hidden..., output]`.
    pub sizes: Vec<usize>,
}

impl LayerSpec {
    pub fn new(input: usize, hidden: &[usize]) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(OUTPUT_DIM);
        LayerSpec { sizes }
    }

    /// Default architecture for `k` users.
    pub fn for_users(k: usize) -> Self {
        Self::new(observation_dim(k), &DEFAULT_HIDDEN)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(n_in, n_out, weight_offset, bias_offset)` per layer.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let w_off = off;
            let b_off = w_off + n_in * n_out;
            off = b_off + n_out;
            (n_in, n_out, w_off, b_off)
        })
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::usage(format!("bad layer sizes {:?}", self.sizes)));
        }
        if *self.sizes.last().unwrap() != OUTPUT_DIM {
            return Err(Error::usage("policy must have two outputs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub spec: LayerSpec,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(spec: LayerSpec) -> Self {
        let n = spec.num_params();
        PolicyParams {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(spec: LayerSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.num_params() {
            return Err(Error::usage(format!(
                "expected {} parameters, got {}",
                spec.num_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("non-finite parameter"));
        }
        Ok(PolicyParams { spec, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of users this architecture was built for.
    pub fn num_users(&self) -> Option<usize> {
        let n = self.spec.input_dim();
        (n >= 2 && (n - 2).is_multiple_of(3)).then(|| (n - 2) / 3)
    }
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_params(seed: u64, k: usize) -> Result<PolicyParams> {
    if k == 0 {
        return Err(Error::usage("need at least one user"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_params_with(&mut rng, LayerSpec::for_users(k)))
}

pub fn init_params_with<R: Rng + ?Sized>(rng: &mut R, spec: LayerSpec) -> PolicyParams {
    let mut p = PolicyParams::zeros(spec);
    let layers: Vec<_> = p.spec.offsets().collect();
    for (n_in, n_out, w_off, _) in layers {
        let bound = 1.0 / (n_in as f64).sqrt();
        for w in &mut p.values[w_off..w_off + n_in * n_out] {
            *w = rng.random_range(-bound..bound);
        }
    }
    p
}

/// Normalized observation: `q·2/L`, `(w_i − q)·2/L` per user, `d_i / D_i`.
/// Users with zero demand report a zero backlog entry.
pub fn observe(x: &State, scn: &Scenario) -> Vec<f64> {
    let k = scn.num_users();
    let s = 2.0 / scn.area_side;
    let mut obs = Vec::with_capacity(observation_dim(k));
    obs.push(x.q[0] * s);
    obs.push(x.q[1] * s);
    for w in &scn.users {
        obs.push((w[0] - x.q[0]) * s);
        obs.push((w[1] - x.q[1]) * s);
    }
    for (d, dem) in x.d.iter().zip(&scn.demands) {
        obs.push(if *dem > 0.0 { d / dem } else { 0.0 });
    }
    obs
}

/// Pulls an observation-space gradient back to state space. The observation
/// map is affine, so this does not depend on the state.
pub fn observe_vjp(obs_grad: &[f64], scn: &Scenario, out: &mut [f64]) {
    let k = scn.num_users();
    let s = 2.0 / scn.area_side;
    let mut gq = [obs_grad[0] * s, obs_grad[1] * s];
    for i in 0..k {
        gq[0] -= obs_grad[2 + 2 * i] * s;
        gq[1] -= obs_grad[3 + 2 * i] * s;
    }
    out[0] += gq[0];
    out[1] += gq[1];
    for i in 0..k {
        let dem = scn.demands[i];
        if dem > 0.0 {
            out[2 + i] += obs_grad[2 + 2 * k + i] / dem;
        }
    }
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    logits: [f64; 2],
    scratch: Vec<f64>,
}

#[inline]
/// `v_max · sigmoid(z)`, kept strictly inside `(0, v_max)` where the
/// sigmoid saturates in floating point.
fn speed(z: f64, v_max: f64) -> f64 {
    (v_max * sigmoid(z)).clamp(0.0f64.next_up(), v_max.next_down())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dims(params: &PolicyParams, obs: &[f64]) -> Result<()> {
    if obs.len() != params.spec.input_dim() {
        return Err(Error::usage(format!(
            "observation has length {}, policy expects {}",
            obs.len(),
            params.spec.input_dim()
        )));
    }
    if params.values.len() != params.spec.num_params() {
        return Err(Error::usage("parameter vector does not match layer spec"));
    }
    Ok(())
}

pub fn forward_cached(
    params: &PolicyParams,
    obs: &[f64],
    v_max: f64,
    cache: &mut ForwardCache,
) -> Result<Control> {
    check_dims(params, obs)?;
    let spec = &params.spec;
    let n_hidden = spec.num_layers() - 1;
    cache.acts.resize_with(n_hidden + 1, Vec::new);
    cache.acts[0].clear();
    cache.acts[0].extend_from_slice(obs);

    let p = &params.values;
    for (l, (n_in, n_out, w_off, b_off)) in spec.offsets().enumerate() {
        let w = &p[w_off..w_off + n_in * n_out];
        let b = &p[b_off..b_off + n_out];
        let last = l == n_hidden;
        let mut out = std::mem::take(&mut cache.scratch);
        out.clear();
        {
            let input = &cache.acts[l];
            out.extend(w.chunks_exact(n_in).zip(b).map(|(row, bias)| {
                let z = bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                if last {
                    z
                } else {
                    z.tanh()
                }
            }));
        }
        if last {
            cache.logits = [out[0], out[1]];
            cache.scratch = out;
        } else {
            cache.scratch = std::mem::replace(&mut cache.acts[l + 1], out);
        }
    }
    Ok(Control {
        v: speed(cache.logits[0], v_max),
        theta: cache.logits[1],
    })
}

pub fn forward(params: &PolicyParams, obs: &[f64], v_max: f64) -> Result<Control> {
    forward_cached(params, obs, v_max, &mut ForwardCache::default())
}

/// Backward pass for the forward pass recorded in `cache`.
///
/// Adds `upstreamᵀ ∂π/∂params` into `param_grad` and writes
/// `upstreamᵀ ∂π/∂obs` into `obs_grad`.
pub fn backward_accumulate(
    params: &PolicyParams,
    cache: &ForwardCache,
    v_max: f64,
    upstream: [f64; 2],
    param_grad: &mut [f64],
    obs_grad: &mut [f64],
) {
    let spec = &params.spec;
    let p = &params.values;
    let s = sigmoid(cache.logits[0]);
    let mut delta = vec![upstream[0] * v_max * s * (1.0 - s), upstream[1]];
    let layers: Vec<_> = spec.offsets().collect();
    for (l, &(n_in, n_out, w_off, b_off)) in layers.iter().enumerate().rev() {
        let input = &cache.acts[l];
        let w = &p[w_off..w_off + n_in * n_out];
        let (gw, gb) = param_grad[w_off..b_off + n_out].split_at_mut(n_in * n_out);
        for (o, &dz) in delta.iter().enumerate() {
            gb[o] += dz;
            if dz != 0.0 {
                for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += dz * x;
                }
            }
        }
        let mut prev = vec![0.0; n_in];
        for (row, &dz) in w.chunks_exact(n_in).zip(&delta) {
            if dz != 0.0 {
                for (acc, a) in prev.iter_mut().zip(row) {
                    *acc += dz * a;
                }
            }
        }
        if l > 0 {
            for (g, a) in prev.iter_mut().zip(input) {
                *g *= 1.0 - a * a;
            }
            delta = prev;
        } else {
            obs_grad.copy_from_slice(&prev);
        }
    }
}

/// Vector-Jacobian products of the policy output with respect to the
/// parameters and to the observation.
pub fn vjp(
    params: &PolicyParams,
    obs: &[f64],
    v_max: f64,
    upstream: [f64; 2],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cache = ForwardCache::default();
    forward_cached(params, obs, v_max, &mut cache)?;
    let mut pg = vec![0.0; params.len()];
    let mut og = vec![0.0; obs.len()];
    backward_accumulate(params, &cache, v_max, upstream, &mut pg, &mut og);
    Ok((pg, og))
}

/// Borrowed policy acting as a control source during rollouts.
#[derive(Debug)]
pub struct NeuralPolicy<'a> {
    params: &'a PolicyParams,
    cache: ForwardCache,
}

impl<'a> NeuralPolicy<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        NeuralPolicy {
            params,
            cache: ForwardCache::default(),
        }
    }
}

impl ControlSource for NeuralPolicy<'_> {
    fn control(&mut self, t: usize, _: &State, obs: &[f64], scn: &Scenario) -> Result<Control> {
        let u = forward_cached(self.params, obs, scn.v_max, &mut self.cache)?;
        if !(u.v.is_finite() && u.theta.is_finite()) {
            return Err(Error::numeric(t, "policy produced a non-finite control"));
        }
        Ok(u)
    }
}

pub const CHECKPOINT_FORMAT: &str = "aav-policy/1";

/// On-disk checkpoint: a JSON document with a header and the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub num_users: usize,
    pub layer_sizes: Vec<usize>,
    pub seed: Option<u64>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, seed: Option<u64>) -> Result<Self> {
        let num_users = params
            .num_users()
            .ok_or_else(|| Error::usage("input width does not correspond to a user count"))?;
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            num_users,
            layer_sizes: params.spec.sizes.clone(),
            seed,
            params: params.values.clone(),
        })
    }

    pub fn into_params(self) -> Result<PolicyParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.layer_sizes.first() != Some(&observation_dim(self.num_users)) {
            return Err(Error::Config(
                "checkpoint input width does not match its user count".into(),
            ));
        }
        PolicyParams::from_values(LayerSpec { sizes: self.layer_sizes }, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
