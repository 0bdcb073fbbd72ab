use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub size: usize,
    pub activation: Activation,
}

/// Dense network layout. Parameters are stored layer by layer, each layer as
/// its row-major `input×output` weight matrix followed by the output bias.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl Arch {
    /// Hidden layers share `hidden_activation`; the output layer is linear.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_activation: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&size| LayerSpec {
                size,
                activation: hidden_activation,
            })
            .collect();
        layers.push(LayerSpec {
            size: output,
            activation: Activation::Linear,
        });
        Arch { input, layers }
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.size)
    }

    /// `(fan_in, fan_out, offset)` for each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut fan_in = self.input;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            out.push((fan_in, layer.size, offset));
            offset += fan_in * layer.size + layer.size;
            fan_in = layer.size;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o, _)| i * o + o)
            .sum()
    }

    /// Scaled-uniform (Glorot) initialisation with zero biases. The output
    /// layer's weights are additionally multiplied by `output_scale`.
    pub fn init<R: Rng + ?Sized>(&self, output_scale: f64, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let shapes = self.layer_shapes();
        let last = shapes.len().saturating_sub(1);
        for (k, &(fan_in, fan_out, offset)) in shapes.iter().enumerate() {
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if k == last {
                limit *= output_scale;
            }
            for w in &mut params[offset..offset + fan_in * fan_out] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        params
    }

    /// Batched forward pass over `x` (`batch×input`).
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check(params, x.ncols())?;
        let mut h = x.to_owned();
        for ((fan_in, fan_out, offset), spec) in self.layer_shapes().into_iter().zip(&self.layers) {
            let (w, b) = layer_views(params, fan_in, fan_out, offset);
            let mut z = h.dot(&w);
            z += &b;
            let act = spec.activation;
            if act != Activation::Linear {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward(params, view)?.into_raw_vec_and_offset().0)
    }

    /// Records the forward pass on `tape`. Returns the output node and one
    /// `(weights, bias)` pair of parameter leaves per layer.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &[f64],
        x: Var,
    ) -> Result<(Var, Vec<(Var, Var)>), NnError> {
        self.check(params, tape.value(x).ncols())?;
        let mut h = x;
        let mut leaves = Vec::with_capacity(self.layers.len());
        for ((fan_in, fan_out, offset), spec) in self.layer_shapes().into_iter().zip(&self.layers) {
            let (w, b) = layer_views(params, fan_in, fan_out, offset);
            let wv = tape.param(w.to_owned());
            let bv = tape.param(b.insert_axis(Axis(0)).to_owned());
            let z = tape.matmul(h, wv);
            let z = tape.add_row(z, bv);
            h = match spec.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
                Activation::Linear => z,
            };
            leaves.push((wv, bv));
        }
        Ok((h, leaves))
    }

    /// Gathers the gradients of the parameter leaves returned by
    /// [`Arch::forward_tape`] into one flat vector in parameter order.
    pub fn flatten_grads(&self, grads: &Gradients, leaves: &[(Var, Var)]) -> GradientVector {
        let mut values = vec![0.0; self.param_count()];
        for (&(fan_in, fan_out, offset), &(wv, bv)) in self.layer_shapes().iter().zip(leaves) {
            if let Some(gw) = grads.get(wv) {
                for (dst, src) in values[offset..offset + fan_in * fan_out].iter_mut().zip(gw.iter()) {
                    *dst = *src;
                }
            }
            if let Some(gb) = grads.get(bv) {
                let start = offset + fan_in * fan_out;
                for (dst, src) in values[start..start + fan_out].iter_mut().zip(gb.iter()) {
                    *dst = *src;
                }
            }
        }
        GradientVector { values }
    }

    fn check(&self, params: &[f64], input: usize) -> Result<(), NnError> {
        if input != self.input {
            return Err(NnError::InputShape {
                expected: self.input,
                got: input,
            });
        }
        if params.len() != self.param_count() {
            return Err(NnError::ParamCount {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }
}

fn layer_views(
    params: &[f64],
    fan_in: usize,
    fan_out: usize,
    offset: usize,
) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w_end = offset + fan_in * fan_out;
    let w = ArrayView2::from_shape((fan_in, fan_out), &params[offset..w_end]).expect("weight view");
    let b = ArrayView1::from(&params[w_end..w_end + fan_out]);
    (w, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales in place so the L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.values.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Hyperparameters for building a fresh actor-critic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub actor_output_scale: f64,
    pub critic_output_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            actor_output_scale: 0.01,
            critic_output_scale: 1.0,
        }
    }
}

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Actor (policy) and critic (value) parameters with their layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParameters {
    pub actor_weights: Vec<f64>,
    pub critic_weights: Vec<f64>,
    pub actor_arch: Arch,
    pub critic_arch: Arch,
    pub version: u32,
}

impl PolicyParameters {
    pub fn new<R: Rng + ?Sized>(
        obs_len: usize,
        action_count: usize,
        config: &NetworkConfig,
        rng: &mut R,
    ) -> Self {
        let actor_arch = Arch::mlp(obs_len, &config.hidden, action_count, config.activation);
        let critic_arch = Arch::mlp(obs_len, &config.hidden, 1, config.activation);
        let actor_weights = actor_arch.init(config.actor_output_scale, rng);
        let critic_weights = critic_arch.init(config.critic_output_scale, rng);
        PolicyParameters {
            actor_weights,
            critic_weights,
            actor_arch,
            critic_arch,
            version: PARAMS_FORMAT_VERSION,
        }
    }

    pub fn zeros(obs_len: usize, action_count: usize, hidden: &[usize]) -> Self {
        let actor_arch = Arch::mlp(obs_len, hidden, action_count, Activation::Tanh);
        let critic_arch = Arch::mlp(obs_len, hidden, 1, Activation::Tanh);
        PolicyParameters {
            actor_weights: vec![0.0; actor_arch.param_count()],
            critic_weights: vec![0.0; critic_arch.param_count()],
            actor_arch,
            critic_arch,
            version: PARAMS_FORMAT_VERSION,
        }
    }

    pub fn obs_len(&self) -> usize {
        self.actor_arch.input
    }

    pub fn action_count(&self) -> usize {
        self.actor_arch.output()
    }

    /// Checks both parameter counts against their layouts and that all values are finite.
    pub fn validate(&self) -> Result<(), NnError> {
        for (arch, w) in [
            (&self.actor_arch, &self.actor_weights),
            (&self.critic_arch, &self.critic_weights),
        ] {
            if arch.param_count() != w.len() {
                return Err(NnError::ParamCount {
                    expected: arch.param_count(),
                    got: w.len(),
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Divergence("non-finite parameter".into()));
            }
        }
        Ok(())
    }
}

/// Softmax policy output over a discrete action set.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        ActionDistribution {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    pub fn uniform(n: usize) -> Self {
        ActionDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, action: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[action] = 1.0;
        ActionDistribution { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs[action]
    }

    /// Inverse-CDF sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // Rounding left `acc` just below 1; take the last action with mass.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (a, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = a;
            }
        }
        best
    }

    /// Entries in `[0, 1]` summing to one within `1e-9`.
    pub fn is_valid(&self) -> bool {
        let sum: f64 = self.probs.iter().sum();
        !self.probs.is_empty()
            && self.probs.iter().all(|p| (0.0..=1.0).contains(p))
            && (sum - 1.0).abs() <= 1e-9
    }
}

pub fn forward_policy(params: &PolicyParameters, obs: &[f64]) -> Result<ActionDistribution, NnError> {
    let logits = params.actor_arch.forward_one(&params.actor_weights, obs)?;
    Ok(ActionDistribution::from_logits(&logits))
}

pub fn forward_value(params: &PolicyParameters, obs: &[f64]) -> Result<f64, NnError> {
    let out = params.critic_arch.forward_one(&params.critic_weights, obs)?;
    Ok(out[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_give_uniform() {
        let d = ActionDistribution::from_logits(&[0.0; 5]);
        for p in &d.probs {
            assert_abs_diff_eq!(*p, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let d = ActionDistribution::from_logits(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        let denom = e + 4.0;
        assert_abs_diff_eq!(d.probs[0], e / denom, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs[1], 1.0 / denom, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs[0], 0.405, epsilon = 1e-3);
        assert_abs_diff_eq!(d.probs[4], 0.149, epsilon = 1e-3);
    }

    #[test]
    fn zero_network_is_uniform_and_zero_valued() {
        let params = PolicyParameters::zeros(7, 5, &[8, 8]);
        let obs = [0.3, 1.0, 0.0, -2.0, 0.5, 1.0, 1.0];
        let d = forward_policy(&params, &obs).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(forward_value(&params, &obs).unwrap(), 0.0);
    }

    #[test]
    fn output_bias_only_network_returns_bias_on_zero_input() {
        let mut params = PolicyParameters::zeros(4, 3, &[6]);
        let n = params.critic_weights.len();
        params.critic_weights[n - 1] = 1.75;
        assert_eq!(forward_value(&params, &[0.0; 4]).unwrap(), 1.75);
    }

    #[test]
    fn value_matches_hand_rolled_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = Arch::mlp(3, &[4, 2], 1, Activation::Tanh);
        let p = arch.init(1.0, &mut rng);
        let x = [0.5, -1.0, 2.0];

        // Independent triple loop.
        let mut h: Vec<f64> = x.to_vec();
        let mut off = 0;
        for (k, (fi, fo)) in [(3usize, 4usize), (4, 2), (2, 1)].into_iter().enumerate() {
            let mut z = vec![0.0; fo];
            for j in 0..fo {
                let mut acc = p[off + fi * fo + j];
                for i in 0..fi {
                    acc += h[i] * p[off + i * fo + j];
                }
                z[j] = if k < 2 { acc.tanh() } else { acc };
            }
            off += fi * fo + fo;
            h = z;
        }
        let got = arch.forward_one(&p, &x).unwrap();
        assert_abs_diff_eq!(got[0], h[0], epsilon = 1e-14);
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let params = PolicyParameters::zeros(4, 3, &[6]);
        assert!(matches!(
            forward_policy(&params, &[0.0; 5]),
            Err(NnError::InputShape { expected: 4, got: 5 })
        ));
        assert!(forward_value(&params, &[0.0; 3]).is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let arch = Arch::mlp(306, &[64, 64], 5, Activation::Tanh);
        assert_eq!(arch.param_count(), 306 * 64 + 64 + 64 * 64 + 64 + 64 * 5 + 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParameters::new(306, 5, &NetworkConfig::default(), &mut rng);
        p.validate().unwrap();
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParameters::new(10, 4, &NetworkConfig::default(), &mut rng);
        let obs: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let a = forward_policy(&p, &obs).unwrap();
        let b = forward_policy(&p, &obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_respects_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = ActionDistribution::point_mass(5, 3);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), 3);
        }
    }
}
