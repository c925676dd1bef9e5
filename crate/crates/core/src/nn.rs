//! Differentiable primitives: named parameter tensors, dense layers, binary
//! cross-entropy, the ADAM optimizer, and a finite-difference gradient
//! checker. All training math is f64 so gradient checking is decisive.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// A named, shaped, flat array of trainable values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: shape {shape:?} wants {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        Ok(Self { name, shape, values })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape, values: vec![0.0; len] }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// View a rank-2 tensor as a matrix.
    pub fn view2(&self) -> Result<ArrayView2<'_, f64>> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {:?}, expected rank 2",
                self.name, self.shape
            )));
        }
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.values)
            .map_err(|e| Error::ShapeMismatch(format!("tensor {}: {e}", self.name)))
    }

    /// View a rank-1 tensor as a vector.
    pub fn view1(&self) -> Result<ArrayView1<'_, f64>> {
        if self.shape.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {:?}, expected rank 1",
                self.name, self.shape
            )));
        }
        Ok(ArrayView1::from(&self.values[..]))
    }

    /// A rank-1, length-1 tensor as a scalar.
    pub fn scalar(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has {} values, expected a scalar",
                self.name,
                self.values.len()
            )));
        }
        Ok(self.values[0])
    }
}

/// Ordered collection of parameter tensors, keyed by name.
///
/// This is the single storage for a model's trainable state; anything that
/// shares weights (the attention-on-feature head) shares by referring to the
/// same tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: ParamTensor) {
        self.tensors.insert(tensor.name().to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in name order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn view2(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.get(name)?.view2()
    }

    pub fn view1(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        self.get(name)?.view1()
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)?.scalar()
    }

    /// Total number of scalar values across all tensors.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Per-parameter gradients; keys mirror a [`ParamStore`] exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradientMap {
    /// Zero gradients matching the layout of `params`.
    pub fn zeros_like(params: &ParamStore) -> Self {
        let grads = params
            .iter()
            .map(|t| (t.name().to_string(), vec![0.0; t.len()]))
            .collect();
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.grads
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::NotFound(format!("gradient {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("gradient {name}")))
    }

    /// Add `delta` element-wise into the gradient of `name`.
    pub fn add_to(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.len() != delta.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {name}: {} values vs delta of {}",
                slot.len(),
                delta.len()
            )));
        }
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Element-wise `self += other`; key sets must match exactly.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient maps differ: {} vs {} parameters",
                self.grads.len(),
                other.grads.len()
            )));
        }
        for (name, theirs) in &other.grads {
            self.add_to(name, theirs)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.grads.values_mut() {
            for g in v.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// ADAM moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|t| (t.name().to_string(), vec![0.0; t.len()]))
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Optimizer hyperparameters. Betas and epsilon default to the standard
/// ADAM values; the learning rate defaults to 0.001.
#[derive(Debug, Clone)]
pub struct Hyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 25,
            max_epochs: 30,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `activation(W x + b)` for a rank-2 weight tensor and rank-1 bias.
pub fn dense(
    input: &[f64],
    weights: &ParamTensor,
    bias: &ParamTensor,
    activation: Activation,
) -> Result<Vec<f64>> {
    let w = weights.view2()?;
    let b = bias.view1()?;
    if w.ncols() != input.len() || w.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "dense: weights {:?} vs input [{}] and bias [{}]",
            weights.shape(),
            input.len(),
            b.len()
        )));
    }
    let x = ArrayView1::from(input);
    let z = w.dot(&x);
    Ok(z.iter().zip(b.iter()).map(|(zi, bi)| activation.apply(zi + bi)).collect())
}

/// Binary cross-entropy of a single prediction against a {0, 1} label.
pub fn bce_loss(prediction: f64, label: u8) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    if !prediction.is_finite() {
        return Err(Error::NonFinite(format!("prediction {prediction}")));
    }
    let p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(if label == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// Mean BCE over many (prediction, label) pairs.
pub fn bce_loss_mean(pairs: &[(f64, u8)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySequence("bce_loss_mean over zero pairs".into()));
    }
    let mut total = 0.0;
    for &(p, y) in pairs {
        total += bce_loss(p, y)?;
    }
    Ok(total / pairs.len() as f64)
}

/// d(loss)/d(prediction). Zero where the clamp is active, consistent with
/// the loss being locally constant there.
pub fn bce_grad(prediction: f64, label: u8) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&prediction) {
        return Ok(0.0);
    }
    Ok(if label == 1 {
        -1.0 / prediction
    } else {
        1.0 / (1.0 - prediction)
    })
}

/// One ADAM update with bias correction. Validates everything before
/// mutating, so a failure leaves parameters and state untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradientMap,
    state: &mut AdamState,
    hyper: &Hyper,
) -> Result<()> {
    hyper.validate()?;
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient map has {} parameters, store has {}",
            grads.len(),
            params.len()
        )));
    }
    for tensor in params.iter() {
        let g = grads.get(tensor.name())?;
        if g.len() != tensor.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {}: {} values vs parameter {}",
                tensor.name(),
                g.len(),
                tensor.len()
            )));
        }
        if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {} at index {idx}",
                tensor.name()
            )));
        }
        if !state.m.contains_key(tensor.name()) {
            return Err(Error::NotFound(format!("ADAM state for parameter {}", tensor.name())));
        }
    }

    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("validated above");
        let g = grads.get(name).expect("validated above");
        let theta = params.get_mut(name).expect("validated above").values_mut();
        for i in 0..g.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    /// Parameters whose worst relative error exceeded the tolerance.
    pub failures: Vec<String>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare an analytic gradient against central differences of `loss_fn`:
/// `(f(theta+h) - f(theta-h)) / 2h`, relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` per coordinate.
///
/// `params` is perturbed in place and restored bit-exactly before returning.
pub fn grad_check<F>(
    loss_fn: F,
    analytic: &GradientMap,
    params: &mut ParamStore,
    perturbation: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(perturbation > 0.0) {
        return Err(Error::Config(format!("perturbation must be > 0, got {perturbation}")));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut per_param = BTreeMap::new();
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;

    for name in &names {
        let len = params.get(name)?.len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let original = params.get(name)?.values()[i];

            params.get_mut(name)?.values_mut()[i] = original + perturbation;
            let plus = loss_fn(params)?;
            params.get_mut(name)?.values_mut()[i] = original - perturbation;
            let minus = loss_fn(params)?;
            params.get_mut(name)?.values_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * perturbation);
            let a = analytic.get(name)?[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        if worst > tolerance {
            failures.push(name.clone());
        }
        max_rel = max_rel.max(worst);
        per_param.insert(name.clone(), worst);
    }

    Ok(GradCheckReport { per_param, failures, max_rel_error: max_rel, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParamTensor {
        ParamTensor::new(name, shape, values).unwrap()
    }

    #[test]
    fn dense_zero_weights_sigmoid_is_half() {
        let w = ParamTensor::zeros("w", vec![3, 4]);
        let b = ParamTensor::zeros("b", vec![3]);
        let out = dense(&[1.0, -2.0, 0.5, 3.0], &w, &b, Activation::Sigmoid).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn dense_identity_passthrough() {
        let eye = tensor("w", vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = ParamTensor::zeros("b", vec![3]);
        let input = [0.25, -1.5, 2.0];
        let out = dense(&input, &eye, &b, Activation::Identity).unwrap();
        assert_eq!(out, input.to_vec());
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w_vals: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_vals: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = tensor("w", vec![3, 4], w_vals.clone());
        let b = tensor("b", vec![3], b_vals.clone());
        let out = dense(&input, &w, &b, Activation::Tanh).unwrap();

        for r in 0..3 {
            let mut z = b_vals[r];
            for c in 0..4 {
                z += w_vals[r * 4 + c] * input[c];
            }
            assert!((out[r] - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let w = ParamTensor::zeros("w", vec![3, 4]);
        let b = ParamTensor::zeros("b", vec![3]);
        match dense(&[1.0, 2.0], &w, &b, Activation::Identity) {
            Err(Error::ShapeMismatch(msg)) => {
                assert!(msg.contains("[3, 4]") && msg.contains("[2]"), "{msg}");
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn bce_analytic_values() {
        assert!((bce_loss(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_grad(0.25, 0).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!(bce_loss(0.5, 2).is_err());
    }

    #[test]
    fn bce_monotone_to_zero() {
        let mut prev = f64::INFINITY;
        for p in [0.6, 0.9, 0.99, 0.9999, 1.0 - 1e-9] {
            let loss = bce_loss(p, 1).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn bce_grad_matches_finite_difference() {
        let h = 1e-7;
        for (p, label) in [(0.25, 0u8), (0.25, 1), (0.8, 0), (0.8, 1)] {
            let numeric = (bce_loss(p + h, label).unwrap() - bce_loss(p - h, label).unwrap()) / (2.0 * h);
            let analytic = bce_grad(p, label).unwrap();
            assert!((numeric - analytic).abs() < 1e-5, "p={p} label={label}");
        }
    }

    proptest! {
        // Convexity in p: midpoint value never exceeds the chord.
        #[test]
        fn bce_is_convex(p1 in 0.001f64..0.999, p2 in 0.001f64..0.999, label in 0u8..2) {
            let mid = bce_loss((p1 + p2) / 2.0, label).unwrap();
            let chord = (bce_loss(p1, label).unwrap() + bce_loss(p2, label).unwrap()) / 2.0;
            prop_assert!(mid <= chord + 1e-12);
        }

        // First ADAM step from fresh state is bounded by lr for any gradient scale.
        #[test]
        fn adam_first_step_bounded(mag in -8.0f64..8.0, sign in prop::bool::ANY) {
            let g = 10f64.powf(mag) * if sign { 1.0 } else { -1.0 };
            let mut params = ParamStore::new();
            params.insert(tensor("x", vec![1], vec![1.0]));
            let mut grads = GradientMap::zeros_like(&params);
            grads.get_mut("x").unwrap()[0] = g;
            let mut state = AdamState::new(&params);
            let hyper = Hyper::default();
            adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
            let update = (params.get("x").unwrap().values()[0] - 1.0).abs();
            prop_assert!(update <= hyper.learning_rate * (1.0 + 1e-6));
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut params = ParamStore::new();
        params.insert(tensor("x", vec![1], vec![0.0]));
        let mut grads = GradientMap::zeros_like(&params);
        grads.get_mut("x").unwrap()[0] = 3.7; // |g| >> epsilon
        let mut state = AdamState::new(&params);
        let hyper = Hyper::default();
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        let update = params.get("x").unwrap().values()[0];
        assert!((update + hyper.learning_rate).abs() <= hyper.learning_rate * 1e-6);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ParamStore::new();
        params.insert(tensor("x", vec![2], vec![1.5, -2.5]));
        let grads = GradientMap::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &Hyper::default()).unwrap();
        assert_eq!(params.get("x").unwrap().values(), &[1.5, -2.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_three_steps_match_reference_recurrence() {
        // Reference: direct transcription of the ADAM recurrences on a
        // quadratic f(x) = 0.5 * (x - 3)^2, gradient x - 3.
        let hyper = Hyper::default();
        let (mut m, mut v, mut x_ref) = (0.0f64, 0.0f64, 10.0f64);
        let mut reference = Vec::new();
        for t in 1..=3 {
            let g = x_ref - 3.0;
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - hyper.beta1.powi(t));
            let v_hat = v / (1.0 - hyper.beta2.powi(t));
            x_ref -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
            reference.push(x_ref);
        }

        let mut params = ParamStore::new();
        params.insert(tensor("x", vec![1], vec![10.0]));
        let mut state = AdamState::new(&params);
        for want in reference {
            let x = params.get("x").unwrap().values()[0];
            let mut grads = GradientMap::zeros_like(&params);
            grads.get_mut("x").unwrap()[0] = x - 3.0;
            adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
            let got = params.get("x").unwrap().values()[0];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_parameter() {
        let mut params = ParamStore::new();
        params.insert(tensor("layer.weight", vec![2], vec![0.0, 0.0]));
        let mut grads = GradientMap::zeros_like(&params);
        grads.get_mut("layer.weight").unwrap()[1] = f64::NAN;
        let mut state = AdamState::new(&params);
        match adam_step(&mut params, &grads, &mut state, &Hyper::default()) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("layer.weight"), "{msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        // Nothing was mutated.
        assert_eq!(state.step_count(), 0);
        assert_eq!(params.get("layer.weight").unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_exact_for_linear() {
        let mut params = ParamStore::new();
        params.insert(tensor("w", vec![3], vec![0.4, -1.2, 2.0]));
        // loss = c . w with constant c
        let c = [1.5, -0.5, 0.25];
        let loss = move |p: &ParamStore| -> Result<f64> {
            Ok(p.get("w")?.values().iter().zip(&c).map(|(w, ci)| w * ci).sum())
        };
        let mut analytic = GradientMap::zeros_like(&params);
        analytic.get_mut("w").unwrap().copy_from_slice(&c);
        let report = grad_check(loss, &analytic, &mut params, 1e-5, 1e-10).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-10);
        // Parameters restored bit-exactly.
        assert_eq!(params.get("w").unwrap().values(), &[0.4, -1.2, 2.0]);
    }

    #[test]
    fn grad_check_reports_corrupted_entry() {
        let mut params = ParamStore::new();
        params.insert(tensor("good", vec![1], vec![0.7]));
        params.insert(tensor("bad", vec![1], vec![-0.3]));
        let loss = |p: &ParamStore| -> Result<f64> {
            let a = p.get("good")?.values()[0];
            let b = p.get("bad")?.values()[0];
            Ok(a * a + b * b)
        };
        let mut analytic = GradientMap::zeros_like(&params);
        analytic.get_mut("good").unwrap()[0] = 2.0 * 0.7;
        analytic.get_mut("bad").unwrap()[0] = 2.0 * (-0.3) * 2.0; // doubled on purpose
        let report = grad_check(loss, &analytic, &mut params, 1e-5, 1e-6).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures, vec!["bad".to_string()]);
    }

    #[test]
    fn param_tensor_validates_shape_and_values() {
        assert!(ParamTensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(ParamTensor::new("x", vec![2], vec![0.0, f64::INFINITY]).is_err());
    }
}
