//! Feedforward flow network with tanh hidden layers and a log-flow head,
//! plus the flat parameter-vector algebra used by the training loops.
//!
//! Parameters live outside the network in a [`ParamVector`]; the network
//! only carries its topology. Layer `l` occupies a contiguous block: an
//! `out x in` row-major weight matrix followed by `out` biases.

use std::fs;
use std::io::Write;
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{State, Task};
use crate::error::{Error, Result};

/// Log-flows are clamped to this range before exponentiation.
pub const LOG_FLOW_CLAMP: f64 = 30.0;

const CHECKPOINT_MAGIC: &str = "pgflow-ckpt v1";

/// Flat parameter vector. Length is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::contract(format!(
                "parameter length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += a * x` in place.
    pub fn axpy_assign(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_len(x)?;
        for (y, xi) in self.0.iter_mut().zip(&x.0) {
            *y += a * xi;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, a: f64) {
        for y in &mut self.0 {
            *y *= a;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `a * x + y`
pub fn param_axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_len(y)?;
    Ok(ParamVector(x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect()))
}

/// `x - y`
pub fn param_sub(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_len(y)?;
    Ok(ParamVector(x.0.iter().zip(&y.0).map(|(a, b)| a - b).collect()))
}

pub fn param_add(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_len(y)?;
    Ok(ParamVector(x.0.iter().zip(&y.0).map(|(a, b)| a + b).collect()))
}

pub fn param_scale(a: f64, x: &ParamVector) -> ParamVector {
    ParamVector(x.0.iter().map(|v| a * v).collect())
}

pub fn param_norm(x: &ParamVector) -> f64 {
    x.norm()
}

/// One-hot row block, one-hot column block, and for GridWorld a trailing
/// terminal-mark bit.
pub fn encode_state(task: &Task, s: &State) -> Result<Vec<f64>> {
    if !task.in_bounds(s) {
        return Err(Error::contract(format!("cannot encode out-of-bounds state {s}")));
    }
    let mut v = vec![0.0; encoding_dim(task)];
    v[s.row] = 1.0;
    v[task.rows() + s.col] = 1.0;
    if task.kind().action_count() == 3 && s.done {
        v[task.rows() + task.cols()] = 1.0;
    }
    Ok(v)
}

pub fn encoding_dim(task: &Task) -> usize {
    let extra = usize::from(task.kind().action_count() == 3);
    task.rows() + task.cols() + extra
}

/// Network topology. Hidden layers use tanh; the output layer is linear and
/// read as log edge-flows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNet {
    sizes: Vec<usize>,
}

/// Activations retained by a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l]` the post-activation output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Raw (unclamped) output pre-activations.
    raw_out: Vec<f64>,
}

impl ForwardCache {
    pub fn log_flows(&self) -> Vec<f64> {
        self.raw_out.iter().map(|z| z.clamp(-LOG_FLOW_CLAMP, LOG_FLOW_CLAMP)).collect()
    }

    pub fn flows(&self) -> Vec<f64> {
        self.raw_out.iter().map(|z| z.clamp(-LOG_FLOW_CLAMP, LOG_FLOW_CLAMP).exp()).collect()
    }
}

impl FlowNet {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Param(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(FlowNet { sizes })
    }

    /// `[encoding_dim, hidden..., action_count]` for the given task.
    pub fn for_task(task: &Task, hidden: &[usize]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(encoding_dim(task));
        sizes.extend_from_slice(hidden);
        sizes.push(task.action_count());
        FlowNet::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                v.push(rng.gen_range(-bound..bound));
            }
        }
        ParamVector(v)
    }

    fn check(&self, params: &ParamVector, input: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if input.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "expected input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, params: &ParamVector, input: &[f64]) -> Result<ForwardCache> {
        self.check(params, input)?;
        let p = params.as_slice();
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        let mut raw_out = Vec::new();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &p[offset..offset + n_in * n_out];
            let b = &p[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let x = &acts[l];
            let mut z = b.to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                *zj += acc;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite pre-activation in layer {l}")));
            }
            if l + 1 == n_layers {
                raw_out = z;
                acts.push(Vec::new());
            } else {
                for v in &mut z {
                    *v = v.tanh();
                }
                acts.push(z);
            }
        }
        Ok(ForwardCache { acts, raw_out })
    }

    /// Clamped log edge-flows.
    pub fn log_flows(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, input)?.log_flows())
    }

    /// Edge flows `F(s, a) = exp(clamped log-flow)`, strictly positive.
    pub fn edge_flows(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, input)?.flows())
    }

    /// Gradient of `<cotangent, log-flows>` with respect to the parameters.
    pub fn backprop(&self, params: &ParamVector, input: &[f64], cotangent: &[f64]) -> Result<ParamVector> {
        let cache = self.forward_cached(params, input)?;
        let mut grad = ParamVector::zeros(self.param_count());
        self.backprop_into(params, &cache, cotangent, &mut grad)?;
        Ok(grad)
    }

    /// Accumulate the gradient of `<cotangent, log-flows>` into `grad`.
    pub fn backprop_into(
        &self,
        params: &ParamVector,
        cache: &ForwardCache,
        cotangent: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::contract(format!(
                "cotangent has length {}, network outputs {}",
                cotangent.len(),
                self.output_dim()
            )));
        }
        if grad.len() != self.param_count() || params.len() != self.param_count() {
            return Err(Error::contract("gradient buffer has the wrong length"));
        }
        let p = params.as_slice();
        let g = grad.as_mut_slice();
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += (self.sizes[l] + 1) * self.sizes[l + 1];
        }
        // d(loss)/d(pre-activation) of the current layer
        let mut delta: Vec<f64> = cotangent
            .iter()
            .zip(&cache.raw_out)
            .map(|(c, z)| if z.abs() > LOG_FLOW_CLAMP { 0.0 } else { *c })
            .collect();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let base = offsets[l];
            let x = &cache.acts[l];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &mut g[base + j * n_in..base + (j + 1) * n_in];
                for (gi, xi) in row.iter_mut().zip(x) {
                    *gi += d * xi;
                }
                g[base + n_in * n_out + j] += d;
            }
            if l == 0 {
                break;
            }
            let w = &p[base..base + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &w[j * n_in..(j + 1) * n_in];
                for (pi, wi) in prev.iter_mut().zip(row) {
                    *pi += d * wi;
                }
            }
            // tanh'(z) = 1 - tanh(z)^2
            for (pi, a) in prev.iter_mut().zip(x) {
                *pi *= 1.0 - a * a;
            }
            delta = prev;
        }
        Ok(())
    }

    /// Write a checkpoint: one ASCII header line followed by the parameters as
    /// little-endian `f64` in flat order.
    pub fn save_checkpoint(&self, path: &Path, params: &ParamVector, seed: u64) -> Result<()> {
        let bytes = self.checkpoint_bytes(params, seed)?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn checkpoint_bytes(&self, params: &ParamVector, seed: u64) -> Result<Vec<u8>> {
        if params.len() != self.param_count() {
            return Err(Error::contract("checkpoint parameters do not match the network"));
        }
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        let header = format!(
            "{CHECKPOINT_MAGIC} layers={} activation=tanh seed={seed} count={}\n",
            sizes.join(","),
            params.len()
        );
        let mut out = header.into_bytes();
        out.reserve(params.len() * 8);
        for v in params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(FlowNet, ParamVector, u64)> {
        let bytes = fs::read(path)?;
        FlowNet::parse_checkpoint(&bytes)
    }

    pub fn parse_checkpoint(bytes: &[u8]) -> Result<(FlowNet, ParamVector, u64)> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let rest = header.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| bad("bad magic"))?;
        let (mut sizes, mut seed, mut count, mut activation) = (None, None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("malformed header field"))?;
            match k {
                "layers" => {
                    sizes = Some(
                        v.split(',')
                            .map(|s| s.parse::<usize>().map_err(|_| bad("bad layer size")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "activation" => activation = Some(v.to_string()),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "count" => count = Some(v.parse::<usize>().map_err(|_| bad("bad count"))?),
                _ => return Err(bad(&format!("unknown field `{k}`"))),
            }
        }
        if activation.as_deref() != Some("tanh") {
            return Err(bad("unsupported activation"));
        }
        let net = FlowNet::new(sizes.ok_or_else(|| bad("missing layers"))?)?;
        let count = count.ok_or_else(|| bad("missing count"))?;
        if count != net.param_count() {
            return Err(bad("count does not match layers"));
        }
        let body = &bytes[nl + 1..];
        if body.len() != count * 8 {
            return Err(bad("truncated body"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((net, ParamVector(values), seed.ok_or_else(|| bad("missing seed"))?))
    }
}
