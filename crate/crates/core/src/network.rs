//! Feedforward networks and their parameter-space symmetries.
//!
//! An [`MlpSpec`] fixes the architecture; a flat [`ParamVector`] holds every
//! weight and bias. Packing is layer-major, and within a layer the weight
//! matrix `W` (shape `out × in`, row-major) precedes the bias vector.
//!
//! Layer `i` computes `l_i = nl_i(W_i l_{i-1} + b_i)`. Hidden units can be
//! permuted (weight-space symmetry), relu-type layers can be rescaled
//! (scaling symmetry), and [`ParamVector::canonicalize`] picks one
//! representative per permutation orbit by sorting hidden biases. Nothing in
//! the crate canonicalizes implicitly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::tensor::{softmax_in_place, Nonlinearity, Tape, Tensor, Var};

/// Layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Leaky relu with negative-side slope in (0, 1).
    LeakyRelu(f64),
    Tanh,
    /// Only valid on the last layer.
    Softmax,
}

impl Activation {
    fn apply_in_place(self, xs: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => xs.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::LeakyRelu(s) => xs.iter_mut().for_each(|x| {
                if *x <= 0.0 {
                    *x *= s
                }
            }),
            Activation::Tanh => xs.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Softmax => softmax_in_place(xs),
        }
    }

    /// True when `nl(αx) = α·nl(x)` for `α > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_) | Activation::Identity)
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky-relu",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }
}

/// One dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerJson", into = "LayerJson")]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
    /// Layers without a bias contribute only `W`.
    pub bias: bool,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        LayerSpec {
            input_width,
            output_width,
            activation,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn n_params(&self) -> usize {
        self.input_width * self.output_width + if self.bias { self.output_width } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.input_width >= 1 && self.output_width >= 1,
            "layer widths must be >= 1, got {}x{}",
            self.input_width,
            self.output_width
        );
        if let Activation::LeakyRelu(s) = self.activation {
            ensure!(s > 0.0 && s < 1.0, "leaky-relu slope must be in (0,1), got {s}");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    #[serde(rename = "in")]
    input: usize,
    out: usize,
    act: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    bias: bool,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl TryFrom<LayerJson> for LayerSpec {
    type Error = Error;

    fn try_from(j: LayerJson) -> Result<Self> {
        let activation = match j.act.as_str() {
            "identity" | "linear" => Activation::Identity,
            "relu" => Activation::Relu,
            "leaky-relu" | "leaky_relu" => Activation::LeakyRelu(j.slope.unwrap_or(0.01)),
            "tanh" => Activation::Tanh,
            "softmax" => Activation::Softmax,
            other => return Err(Error::config(format!("unknown activation `{other}`"))),
        };
        if j.slope.is_some() && !matches!(activation, Activation::LeakyRelu(_)) {
            return Err(Error::config("`slope` only applies to leaky-relu"));
        }
        let layer = LayerSpec {
            input_width: j.input,
            output_width: j.out,
            activation,
            bias: j.bias,
        };
        layer.validate()?;
        Ok(layer)
    }
}

impl From<LayerSpec> for LayerJson {
    fn from(l: LayerSpec) -> Self {
        LayerJson {
            input: l.input_width,
            out: l.output_width,
            act: l.activation.name().to_string(),
            slope: match l.activation {
                Activation::LeakyRelu(s) => Some(s),
                _ => None,
            },
            bias: l.bias,
        }
    }
}

/// Offsets of one layer inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub weights: usize,
    pub bias: Option<usize>,
    pub end: usize,
}

/// Network architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecJson", into = "SpecJson")]
pub struct MlpSpec {
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecJson {
    layers: Vec<LayerSpec>,
}

impl TryFrom<SpecJson> for MlpSpec {
    type Error = Error;

    fn try_from(j: SpecJson) -> Result<Self> {
        MlpSpec::new(j.layers).map_err(|e| Error::Config(e.to_string()))
    }
}

impl From<MlpSpec> for SpecJson {
    fn from(s: MlpSpec) -> Self {
        SpecJson { layers: s.layers }
    }
}

/// Per-layer dropout masks over input units; `None` keeps every unit.
pub type LayerMasks = [Option<Vec<f64>>];

impl MlpSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        ensure!(!layers.is_empty(), "a network needs at least one layer");
        for (i, l) in layers.iter().enumerate() {
            l.validate()?;
            if i + 1 < layers.len() {
                ensure!(
                    l.output_width == layers[i + 1].input_width,
                    "layer {i} outputs {} units but layer {} takes {}",
                    l.output_width,
                    i + 1,
                    layers[i + 1].input_width
                );
                ensure!(
                    l.activation != Activation::Softmax,
                    "softmax is only allowed on the last layer"
                );
            }
        }
        Ok(MlpSpec { layers })
    }

    /// Chain of widths with one activation for every hidden layer and another
    /// for the output layer, e.g. `[1, 16, 1]`.
    pub fn from_widths(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        ensure!(widths.len() >= 2, "need at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                LayerSpec::new(widths[i], widths[i + 1], act)
            })
            .collect();
        MlpSpec::new(layers)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width
    }

    pub fn is_classifier(&self) -> bool {
        self.layers[self.layers.len() - 1].activation == Activation::Softmax
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::n_params).sum()
    }

    pub fn offsets(&self, layer: usize) -> LayerOffsets {
        let start: usize = self.layers[..layer].iter().map(LayerSpec::n_params).sum();
        let l = &self.layers[layer];
        let w_end = start + l.input_width * l.output_width;
        LayerOffsets {
            weights: start,
            bias: l.bias.then_some(w_end),
            end: start + l.n_params(),
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        ensure!(
            theta.len() == self.n_params(),
            "parameter vector has {} values, architecture needs {}",
            theta.len(),
            self.n_params()
        );
        Ok(())
    }

    /// Network output for one input; softmax heads return probabilities.
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.forward_masked(theta, x, None)
    }

    /// Forward pass with `W_i · diag(z_i)` for each supplied mask `z_i`.
    pub fn forward_masked(&self, theta: &[f64], x: &[f64], masks: Option<&LayerMasks>) -> Result<Vec<f64>> {
        self.forward_impl(theta, x, masks, false)
    }

    /// Forward pass that stops before a final softmax, returning logits.
    /// Identical to [`MlpSpec::forward_masked`] for regression heads.
    pub fn forward_logits(&self, theta: &[f64], x: &[f64], masks: Option<&LayerMasks>) -> Result<Vec<f64>> {
        self.forward_impl(theta, x, masks, true)
    }

    fn forward_impl(&self, theta: &[f64], x: &[f64], masks: Option<&LayerMasks>, logits: bool) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        ensure!(
            x.len() == self.input_width(),
            "input has {} values, network takes {}",
            x.len(),
            self.input_width()
        );
        if let Some(m) = masks {
            ensure!(m.len() == self.n_layers(), "need one mask slot per layer");
        }
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let off = self.offsets(i);
            let (n_in, n_out) = (layer.input_width, layer.output_width);
            let mask = masks.and_then(|m| m[i].as_deref());
            if let Some(z) = mask {
                ensure!(z.len() == n_in, "mask for layer {i} has {} entries, expected {n_in}", z.len());
            }
            let w = &theta[off.weights..off.weights + n_in * n_out];
            let mut next: Vec<f64> = (0..n_out)
                .map(|r| {
                    let row = &w[r * n_in..(r + 1) * n_in];
                    let mut s = 0.0;
                    for c in 0..n_in {
                        let z = mask.map_or(1.0, |z| z[c]);
                        s += row[c] * z * current[c];
                    }
                    s + off.bias.map_or(0.0, |b| theta[b + r])
                })
                .collect();
            if !(logits && i + 1 == self.n_layers() && layer.activation == Activation::Softmax) {
                layer.activation.apply_in_place(&mut next);
            }
            current = next;
        }
        Ok(current)
    }

    /// Records the batched forward pass on `tape`.
    ///
    /// `inputs` is an `[n, input_width]` matrix; the result is
    /// `[n, output_width]`. When `logits` is true the final softmax (if any)
    /// is left off so callers can take a stable log-softmax.
    pub fn graph(&self, tape: &mut Tape, theta: Var, inputs: Var, masks: Option<&LayerMasks>, logits: bool) -> Var {
        let mut current = inputs;
        let n_layers = self.n_layers();
        for (i, layer) in self.layers.iter().enumerate() {
            let off = self.offsets(i);
            let (n_in, n_out) = (layer.input_width, layer.output_width);
            let mut w = tape.slice(theta, off.weights, &[n_out, n_in]);
            if let Some(z) = masks.and_then(|m| m.get(i)).and_then(|z| z.as_deref()) {
                let tiled: Vec<f64> = (0..n_out).flat_map(|_| z.iter().copied()).collect();
                let mask = tape.constant(Tensor::new(vec![n_out, n_in], tiled).unwrap_or_default());
                w = tape.mul(w, mask);
            }
            let mut pre = tape.matmul_t(current, w);
            if let Some(b) = off.bias {
                let bias = tape.slice(theta, b, &[n_out]);
                pre = tape.add_row(pre, bias);
            }
            current = match layer.activation {
                Activation::Identity => pre,
                Activation::Relu => tape.activation(pre, Nonlinearity::Relu),
                Activation::LeakyRelu(s) => tape.activation(pre, Nonlinearity::LeakyRelu(s)),
                Activation::Tanh => tape.activation(pre, Nonlinearity::Tanh),
                Activation::Softmax if logits && i + 1 == n_layers => pre,
                Activation::Softmax => tape.softmax_rows(pre),
            };
        }
        current
    }

    /// Fan-in scaled normal initialisation: every coordinate of layer `i`
    /// drawn from `N(0, 1/input_width_i)`.
    pub fn init_fan_in<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            let s = 1.0 / (l.input_width as f64).sqrt();
            theta.extend((0..l.n_params()).map(|_| s * rng::standard_normal(rng)));
        }
        theta
    }

    /// Independent Bernoulli(`keep`) masks over each layer's input units.
    pub fn sample_masks<R: rand::Rng + ?Sized>(&self, keep: &[f64], rng: &mut R) -> Vec<Option<Vec<f64>>> {
        self.layers
            .iter()
            .zip(keep)
            .map(|(l, &p)| {
                (p < 1.0).then(|| {
                    (0..l.input_width)
                        .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                        .collect()
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkJson {
    spec: MlpSpec,
    theta: Vec<f64>,
}

/// Flat network parameters tied to an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    spec: Arc<MlpSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: Arc<MlpSpec>, values: Vec<f64>) -> Result<Self> {
        spec.check_theta(&values)?;
        Ok(ParamVector { spec, values })
    }

    pub fn zeros(spec: Arc<MlpSpec>) -> Self {
        let n = spec.n_params();
        ParamVector {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn init_fan_in<R: rand::Rng + ?Sized>(spec: Arc<MlpSpec>, rng: &mut R) -> Self {
        let values = spec.init_fan_in(rng);
        ParamVector { spec, values }
    }

    pub fn spec(&self) -> &Arc<MlpSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.spec.forward(&self.values, x)
    }

    /// `W_i` as a row-major `out × in` slice.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let off = self.spec.offsets(layer);
        let l = &self.spec.layers[layer];
        &self.values[off.weights..off.weights + l.input_width * l.output_width]
    }

    /// `b_i`, empty for bias-free layers.
    pub fn bias(&self, layer: usize) -> &[f64] {
        let off = self.spec.offsets(layer);
        match off.bias {
            Some(b) => &self.values[b..off.end],
            None => &[],
        }
    }

    /// `{"spec": …, "theta": […]}`, the on-disk form of a dense network.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&NetworkJson {
            spec: (*self.spec).clone(),
            theta: self.values.clone(),
        })
        .expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: NetworkJson = serde_json::from_str(s)?;
        ParamVector::new(Arc::new(j.spec), j.theta)
    }

    /// Per-layer `(W, b)` as owned row-major matrices.
    pub fn unpack(&self) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
        (0..self.spec.n_layers())
            .map(|i| {
                let n_in = self.spec.layers[i].input_width;
                let rows = self.weights(i).chunks(n_in).map(<[f64]>::to_vec).collect();
                (rows, self.bias(i).to_vec())
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unpack`].
    pub fn pack(spec: Arc<MlpSpec>, layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        ensure!(layers.len() == spec.n_layers(), "expected {} layers", spec.n_layers());
        let mut values = Vec::with_capacity(spec.n_params());
        for (w, b) in layers {
            values.extend(w.iter().flatten());
            values.extend(b);
        }
        ParamVector::new(spec, values)
    }

    fn check_hidden(&self, layer: usize) -> Result<()> {
        ensure!(
            layer + 1 < self.spec.n_layers(),
            "layer {layer} is not a hidden layer of a {}-layer network",
            self.spec.n_layers()
        );
        Ok(())
    }

    /// New unit `j` of hidden `layer` takes old unit `permutation[j]`.
    ///
    /// Rows of `W_layer`, entries of `b_layer` and columns of `W_{layer+1}`
    /// move together, so the network function is unchanged.
    pub fn permute_hidden_units(&self, layer: usize, permutation: &[usize]) -> Result<Self> {
        self.check_hidden(layer)?;
        let width = self.spec.layers[layer].output_width;
        ensure!(
            permutation.len() == width,
            "permutation has {} entries for {width} units",
            permutation.len()
        );
        let mut seen = vec![false; width];
        for &p in permutation {
            ensure!(p < width && !seen[p], "permutation {permutation:?} is not a bijection");
            seen[p] = true;
        }

        let mut out = self.values.clone();
        let n_in = self.spec.layers[layer].input_width;
        let off = self.spec.offsets(layer);
        for (new, &old) in permutation.iter().enumerate() {
            let src = off.weights + old * n_in;
            let dst = off.weights + new * n_in;
            out[dst..dst + n_in].copy_from_slice(&self.values[src..src + n_in]);
            if let Some(b) = off.bias {
                out[b + new] = self.values[b + old];
            }
        }
        let next = self.spec.offsets(layer + 1);
        let n_next = self.spec.layers[layer + 1].output_width;
        for r in 0..n_next {
            let row = next.weights + r * width;
            for (new, &old) in permutation.iter().enumerate() {
                out[row + new] = self.values[row + old];
            }
        }
        Ok(ParamVector {
            spec: self.spec.clone(),
            values: out,
        })
    }

    /// Multiplies `W_layer`, `b_layer` by `alpha` and `W_{layer+1}` by `1/alpha`.
    ///
    /// Requires a relu or leaky-relu layer, where this leaves the network
    /// function unchanged.
    pub fn scale_layers(&self, layer: usize, alpha: f64) -> Result<Self> {
        self.check_hidden(layer)?;
        let act = self.spec.layers[layer].activation;
        ensure!(
            matches!(act, Activation::Relu | Activation::LeakyRelu(_)),
            "scaling symmetry needs a relu-type layer, layer {layer} is {}",
            act.name()
        );
        self.rescale_unchecked(layer, alpha)
    }

    /// [`ParamVector::scale_layers`] without the activation check. For
    /// non-homogeneous activations the result is a different function.
    pub fn rescale_unchecked(&self, layer: usize, alpha: f64) -> Result<Self> {
        self.check_hidden(layer)?;
        ensure!(alpha > 0.0 && alpha.is_finite(), "scale must be positive, got {alpha}");
        let mut out = self.values.clone();
        let off = self.spec.offsets(layer);
        out[off.weights..off.end].iter_mut().for_each(|v| *v *= alpha);
        let next = self.spec.offsets(layer + 1);
        let next_w_end = next.bias.unwrap_or(next.end);
        out[next.weights..next_w_end].iter_mut().for_each(|v| *v /= alpha);
        Ok(ParamVector {
            spec: self.spec.clone(),
            values: out,
        })
    }

    /// Sorts every hidden layer's units by ascending bias.
    ///
    /// Ties break on the first entry of the unit's weight row, then on the
    /// original index. Layers are processed from the input side, so a layer's
    /// first weight entries already reflect the previous layer's ordering.
    pub fn canonicalize(&self) -> Self {
        let mut current = self.clone();
        for layer in 0..self.spec.n_layers().saturating_sub(1) {
            let width = self.spec.layers[layer].output_width;
            let n_in = self.spec.layers[layer].input_width;
            let bias = current.bias(layer).to_vec();
            let w = current.weights(layer).to_vec();
            let mut order: Vec<usize> = (0..width).collect();
            order.sort_by(|&a, &b| {
                let ba = bias.get(a).copied().unwrap_or(0.0);
                let bb = bias.get(b).copied().unwrap_or(0.0);
                ba.total_cmp(&bb)
                    .then(w[a * n_in].total_cmp(&w[b * n_in]))
                    .then(a.cmp(&b))
            });
            current = current
                .permute_hidden_units(layer, &order)
                .expect("sorted order is a bijection over hidden units");
        }
        current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn identity_layer() -> Arc<MlpSpec> {
        Arc::new(MlpSpec::new(vec![LayerSpec::new(2, 2, Activation::Identity)]).unwrap())
    }

    #[test]
    fn identity_network_passes_input_through() {
        let spec = identity_layer();
        let theta = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(spec.forward(&theta, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let spec = MlpSpec::new(vec![LayerSpec::new(2, 2, Activation::Relu)]).unwrap();
        let theta = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(spec.forward(&theta, &[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let spec = MlpSpec::from_widths(&[3, 5, 4], Activation::Tanh, Activation::Softmax).unwrap();
        let theta = spec.init_fan_in(&mut stream(0, "t"));
        let p = spec.forward(&theta, &[0.3, -2.0, 9.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(MlpSpec::new(vec![]).is_err());
        assert!(MlpSpec::new(vec![LayerSpec::new(1, 3, Activation::Tanh), LayerSpec::new(2, 1, Activation::Identity)]).is_err());
        assert!(MlpSpec::new(vec![LayerSpec::new(1, 3, Activation::Softmax), LayerSpec::new(3, 1, Activation::Identity)]).is_err());
        assert!(MlpSpec::new(vec![LayerSpec::new(0, 3, Activation::Tanh)]).is_err());
        assert!(MlpSpec::new(vec![LayerSpec::new(1, 3, Activation::LeakyRelu(1.5))]).is_err());
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let spec = identity_layer();
        assert!(matches!(spec.forward(&[0.0; 6], &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(spec.forward(&[0.0; 5], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn json_round_trip_and_format() {
        let s = MlpSpec::from_json(r#"{"layers":[{"in":1,"out":16,"act":"tanh"},{"in":16,"out":1,"act":"identity"}]}"#).unwrap();
        assert_eq!(s.n_params(), 16 + 16 + 16 + 1);
        assert_eq!(MlpSpec::from_json(&s.to_json()).unwrap(), s);
        let leaky = MlpSpec::from_json(r#"{"layers":[{"in":1,"out":1,"act":"leaky-relu","slope":0.2,"bias":false}]}"#).unwrap();
        assert_eq!(leaky.layers()[0].activation, Activation::LeakyRelu(0.2));
        assert_eq!(leaky.n_params(), 1);
        assert!(MlpSpec::from_json(r#"{"layers":[{"in":1,"out":1,"act":"gelu"}]}"#).is_err());
        assert!(MlpSpec::from_json(r#"{"layers":[{"in":1,"out":1,"act":"tanh","extra":1}]}"#).is_err());
    }

    #[test]
    fn network_json_round_trip() {
        let spec = Arc::new(MlpSpec::from_widths(&[2, 3, 2], Activation::Tanh, Activation::Softmax).unwrap());
        let net = ParamVector::init_fan_in(spec, &mut stream(3, "t"));
        assert_eq!(ParamVector::from_json(&net.to_json()).unwrap(), net);
        assert!(ParamVector::from_json(r#"{"spec":{"layers":[{"in":1,"out":1,"act":"identity"}]},"theta":[1.0]}"#).is_err());
    }

    #[test]
    fn packing_order_is_layer_major_weights_then_bias() {
        let spec = Arc::new(MlpSpec::from_widths(&[2, 3, 1], Activation::Relu, Activation::Identity).unwrap());
        let theta = ParamVector::new(spec.clone(), (0..spec.n_params()).map(|v| v as f64).collect()).unwrap();
        assert_eq!(theta.weights(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(theta.bias(0), &[6.0, 7.0, 8.0]);
        assert_eq!(theta.weights(1), &[9.0, 10.0, 11.0]);
        assert_eq!(theta.bias(1), &[12.0]);
        let round = ParamVector::pack(spec, &theta.unpack()).unwrap();
        assert_eq!(round, theta);
    }

    #[test]
    fn permutation_must_be_bijective_and_hidden() {
        let spec = Arc::new(MlpSpec::from_widths(&[2, 3, 1], Activation::Relu, Activation::Identity).unwrap());
        let theta = ParamVector::init_fan_in(spec, &mut stream(0, "t"));
        assert!(theta.permute_hidden_units(0, &[0, 0, 1]).is_err());
        assert!(theta.permute_hidden_units(0, &[0, 1]).is_err());
        assert!(theta.permute_hidden_units(1, &[0]).is_err());
        assert_eq!(theta.permute_hidden_units(0, &[0, 1, 2]).unwrap(), theta);
    }

    #[test]
    fn scaling_checks_activation_and_sign() {
        let tanh = Arc::new(MlpSpec::from_widths(&[1, 4, 1], Activation::Tanh, Activation::Identity).unwrap());
        let theta = ParamVector::init_fan_in(tanh, &mut stream(0, "t"));
        assert!(theta.scale_layers(0, 2.0).is_err());
        let relu = Arc::new(MlpSpec::from_widths(&[1, 4, 1], Activation::Relu, Activation::Identity).unwrap());
        let theta = ParamVector::init_fan_in(relu, &mut stream(0, "t"));
        assert!(theta.scale_layers(0, 0.0).is_err());
        assert!(theta.scale_layers(0, -1.0).is_err());
        assert_eq!(theta.scale_layers(0, 1.0).unwrap(), theta);
    }

    #[test]
    fn canonicalize_sorts_biases() {
        let spec = Arc::new(MlpSpec::from_widths(&[1, 3, 1], Activation::Tanh, Activation::Identity).unwrap());
        // W0 = (0.1, 0.2, 0.3), b0 = (3, 1, 2), W1 = (1, 2, 3), b1 = 0.5
        let theta = ParamVector::new(spec, vec![0.1, 0.2, 0.3, 3.0, 1.0, 2.0, 1.0, 2.0, 3.0, 0.5]).unwrap();
        let c = theta.canonicalize();
        assert_eq!(c.bias(0), &[1.0, 2.0, 3.0]);
        assert_eq!(c.weights(0), &[0.2, 0.3, 0.1]);
        assert_eq!(c.weights(1), &[2.0, 3.0, 1.0]);
        for x in [-1.0, 0.0, 0.7] {
            let a = theta.forward(&[x]).unwrap()[0];
            let b = c.forward(&[x]).unwrap()[0];
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.canonicalize(), c);
    }

    #[test]
    fn canonicalize_breaks_bias_ties_by_first_weight() {
        let spec = Arc::new(MlpSpec::from_widths(&[1, 2, 1], Activation::Tanh, Activation::Identity).unwrap());
        let theta = ParamVector::new(spec, vec![0.9, -0.4, 1.0, 1.0, 5.0, 6.0, 0.0]).unwrap();
        let c = theta.canonicalize();
        assert_eq!(c.weights(0), &[-0.4, 0.9]);
        assert_eq!(c.weights(1), &[6.0, 5.0]);
    }
}
