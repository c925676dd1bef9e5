//! LSTM sequence layers and the complete utterance classifier.
//!
//! A [`Model`] is one or two LSTM layers (uni- or bi-directional) followed by
//! one of the nine pooling heads. Forward passes cache gate activations so
//! backpropagation through time can produce exact analytic gradients; every
//! configuration is validated against finite differences in the test suites.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_vec_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::{bce_grad, bce_loss, sigmoid, GradientMap, ParamStore, ParamTensor};
use crate::pooling::{
    attention_weights_feature, attention_weights_prediction, pool_feature_backward,
    pool_prediction, pool_prediction_backward, AttentionHead, PoolingKind,
};

/// Per-frame hidden states. Stored as a T x N matrix whose row t is h_t, so
/// frames are contiguous; N is the (possibly concatenated) channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    data: Array2<f64>,
}

impl HiddenSequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::EmptySequence("hidden sequence must be at least 1 x 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hidden state entry".into()));
        }
        Ok(Self { data })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    /// Number of hidden channels per frame.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Hidden state at frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        self.data.row(t).to_slice().expect("row-major layout")
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Per-gate LSTM weights: input kernels W (N x d), recurrent kernels U
/// (N x N), biases b (N). Gate order is input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Array2<f64>,
    pub w_f: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_g: Array2<f64>,
    pub u_i: Array2<f64>,
    pub u_f: Array2<f64>,
    pub u_o: Array2<f64>,
    pub u_g: Array2<f64>,
    pub b_i: Array1<f64>,
    pub b_f: Array1<f64>,
    pub b_o: Array1<f64>,
    pub b_g: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        Self {
            w_i: Array2::zeros((hidden, input_dim)),
            w_f: Array2::zeros((hidden, input_dim)),
            w_o: Array2::zeros((hidden, input_dim)),
            w_g: Array2::zeros((hidden, input_dim)),
            u_i: Array2::zeros((hidden, hidden)),
            u_f: Array2::zeros((hidden, hidden)),
            u_o: Array2::zeros((hidden, hidden)),
            u_g: Array2::zeros((hidden, hidden)),
            b_i: Array1::zeros(hidden),
            b_f: Array1::zeros(hidden),
            b_o: Array1::zeros(hidden),
            b_g: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_i.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.hidden(), self.input_dim());
        let ws = [&self.w_i, &self.w_f, &self.w_o, &self.w_g];
        let us = [&self.u_i, &self.u_f, &self.u_o, &self.u_g];
        let bs = [&self.b_i, &self.b_f, &self.b_o, &self.b_g];
        for w in ws {
            if w.dim() != (n, d) {
                return Err(Error::ShapeMismatch(format!(
                    "input kernel {:?} vs expected ({n}, {d})",
                    w.dim()
                )));
            }
        }
        for u in us {
            if u.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "recurrent kernel {:?} vs expected ({n}, {n})",
                    u.dim()
                )));
            }
        }
        for b in bs {
            if b.len() != n {
                return Err(Error::ShapeMismatch(format!("bias [{}] vs expected [{n}]", b.len())));
            }
        }
        let finite = ws.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && us.iter().all(|u| u.iter().all(|v| v.is_finite()))
            && bs.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("LSTM parameter".into()));
        }
        Ok(())
    }

    fn views(&self) -> GateViews<'_> {
        GateViews {
            w: [self.w_i.view(), self.w_f.view(), self.w_o.view(), self.w_g.view()],
            u: [self.u_i.view(), self.u_f.view(), self.u_o.view(), self.u_g.view()],
            b: [
                self.b_i.as_slice().expect("contiguous"),
                self.b_f.as_slice().expect("contiguous"),
                self.b_o.as_slice().expect("contiguous"),
                self.b_g.as_slice().expect("contiguous"),
            ],
        }
    }
}

/// Borrowed per-gate views, so the same kernels run whether parameters live
/// in an [`LstmParams`] or a model's [`ParamStore`]. Order: i, f, o, g.
struct GateViews<'a> {
    w: [ArrayView2<'a, f64>; 4],
    u: [ArrayView2<'a, f64>; 4],
    b: [&'a [f64]; 4],
}

const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

impl<'a> GateViews<'a> {
    fn from_store(store: &'a ParamStore, prefix: &str) -> Result<Self> {
        let view_w = |g: &str| store.view2(&format!("{prefix}.w_{g}"));
        let view_u = |g: &str| store.view2(&format!("{prefix}.u_{g}"));
        Ok(Self {
            w: [view_w("i")?, view_w("f")?, view_w("o")?, view_w("g")?],
            u: [view_u("i")?, view_u("f")?, view_u("o")?, view_u("g")?],
            b: [
                store.get(&format!("{prefix}.b_i"))?.values(),
                store.get(&format!("{prefix}.b_f"))?.values(),
                store.get(&format!("{prefix}.b_o"))?.values(),
                store.get(&format!("{prefix}.b_g"))?.values(),
            ],
        })
    }

    fn hidden(&self) -> usize {
        self.w[0].nrows()
    }

    fn input_dim(&self) -> usize {
        self.w[0].ncols()
    }
}

/// Cached activations from one directional LSTM pass: post-nonlinearity gate
/// values i/f/o/g, cell states c, hidden states h, all T x N.
pub(crate) struct LstmTrace {
    gates: [Array2<f64>; 4],
    c: Array2<f64>,
    pub(crate) h: Array2<f64>,
}

/// Gradients from one directional backward pass, gate order i, f, o, g.
struct LstmGrads {
    dw: [Array2<f64>; 4],
    du: [Array2<f64>; 4],
    db: [Array1<f64>; 4],
    dx: Option<Array2<f64>>,
}

/// One full directional pass over `input` (T x d).
fn lstm_run(input: ArrayView2<'_, f64>, gates: &GateViews<'_>) -> Result<LstmTrace> {
    let t_len = input.nrows();
    let d = input.ncols();
    let n = gates.hidden();
    if d != gates.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {d} channels, LSTM expects {}",
            gates.input_dim()
        )));
    }
    if t_len == 0 {
        return Err(Error::EmptySequence("lstm_run needs at least one frame".into()));
    }

    // Input projections for the whole sequence at once, biases folded in.
    let mut z: [Array2<f64>; 4] = std::array::from_fn(|k| {
        let mut zk = input.dot(&gates.w[k].t());
        let bias = ArrayView2::from_shape((1, n), gates.b[k]).expect("bias view");
        zk += &bias;
        zk
    });

    let mut c = Array2::zeros((t_len, n));
    let mut h = Array2::zeros((t_len, n));
    let mut h_prev = Array1::zeros(n);
    let mut c_prev: Array1<f64> = Array1::zeros(n);

    for t in 0..t_len {
        for k in 0..4 {
            let mut row = z[k].row_mut(t);
            general_mat_vec_mul(1.0, &gates.u[k], &h_prev, 1.0, &mut row);
        }
        for ch in 0..n {
            let i = sigmoid(z[0][(t, ch)]);
            let f = sigmoid(z[1][(t, ch)]);
            let o = sigmoid(z[2][(t, ch)]);
            let g = z[3][(t, ch)].tanh();
            let c_t = f * c_prev[ch] + i * g;
            z[0][(t, ch)] = i;
            z[1][(t, ch)] = f;
            z[2][(t, ch)] = o;
            z[3][(t, ch)] = g;
            c[(t, ch)] = c_t;
            h[(t, ch)] = o * c_t.tanh();
        }
        h_prev.assign(&h.row(t));
        c_prev.assign(&c.row(t));
    }

    Ok(LstmTrace { gates: z, c, h })
}

/// Backpropagation through time for one directional pass.
/// `dh_out` carries d(loss)/d(h_t) per frame; `want_dx` controls whether the
/// gradient with respect to the layer input is produced.
fn lstm_backprop(
    input: ArrayView2<'_, f64>,
    gates: &GateViews<'_>,
    trace: &LstmTrace,
    dh_out: ArrayView2<'_, f64>,
    want_dx: bool,
) -> LstmGrads {
    let t_len = input.nrows();
    let n = gates.hidden();
    let mut dpre: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((t_len, n)));
    let mut dh = Array1::zeros(n);
    let mut dh_next: Array1<f64> = Array1::zeros(n);
    let mut dc_next: Array1<f64> = Array1::zeros(n);

    for t in (0..t_len).rev() {
        dh.assign(&dh_out.row(t));
        dh += &dh_next;
        for ch in 0..n {
            let i = trace.gates[0][(t, ch)];
            let f = trace.gates[1][(t, ch)];
            let o = trace.gates[2][(t, ch)];
            let g = trace.gates[3][(t, ch)];
            let tc = trace.c[(t, ch)].tanh();
            let dh_ch = dh[ch];

            dpre[2][(t, ch)] = dh_ch * tc * o * (1.0 - o);
            let dc = dh_ch * o * (1.0 - tc * tc) + dc_next[ch];
            let c_prev = if t > 0 { trace.c[(t - 1, ch)] } else { 0.0 };
            dpre[1][(t, ch)] = dc * c_prev * f * (1.0 - f);
            dpre[0][(t, ch)] = dc * g * i * (1.0 - i);
            dpre[3][(t, ch)] = dc * i * (1.0 - g * g);
            dc_next[ch] = dc * f;
        }
        for k in 0..4 {
            let row = dpre[k].row(t);
            let beta = if k == 0 { 0.0 } else { 1.0 };
            general_mat_vec_mul(1.0, &gates.u[k].t(), &row, beta, &mut dh_next);
        }
    }

    let dw = std::array::from_fn(|k| dpre[k].t().dot(&input));
    let du = std::array::from_fn(|k| {
        if t_len > 1 {
            dpre[k].slice(s![1.., ..]).t().dot(&trace.h.slice(s![..t_len - 1, ..]))
        } else {
            Array2::zeros((n, n))
        }
    });
    let db = std::array::from_fn(|k| dpre[k].sum_axis(Axis(0)));
    let dx = want_dx.then(|| {
        let mut dx = dpre[0].dot(&gates.w[0]);
        for k in 1..4 {
            dx += &dpre[k].dot(&gates.w[k]);
        }
        dx
    });

    LstmGrads { dw, du, db, dx }
}

/// One LSTM step: gates i, f, o are sigmoid, candidate g is tanh,
/// `c_t = f * c_prev + i * g`, `h_t = o * tanh(c_t)`.
pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let (n, d) = (params.hidden(), params.input_dim());
    if x.len() != d || h_prev.len() != n || c_prev.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "lstm_cell: x [{}], h_prev [{}], c_prev [{}] vs expected d={d}, N={n}",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    if h_prev.iter().chain(c_prev).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lstm_cell state".into()));
    }
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    let gates = params.views();
    for ch in 0..n {
        let mut z = [gates.b[0][ch], gates.b[1][ch], gates.b[2][ch], gates.b[3][ch]];
        for k in 0..4 {
            for (j, &xv) in x.iter().enumerate() {
                z[k] += gates.w[k][(ch, j)] * xv;
            }
            for (j, &hv) in h_prev.iter().enumerate() {
                z[k] += gates.u[k][(ch, j)] * hv;
            }
        }
        let (i, f, o, g) = (sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), z[3].tanh());
        c[ch] = f * c_prev[ch] + i * g;
        h[ch] = o * c[ch].tanh();
    }
    Ok((h, c))
}

/// Run an LSTM left to right over a T x d input with zero initial state.
pub fn lstm_forward(input: ArrayView2<'_, f64>, params: &LstmParams) -> Result<HiddenSequence> {
    params.validate()?;
    let trace = lstm_run(input, &params.views())?;
    HiddenSequence::new(trace.h)
}

/// Bidirectional pass: rows of the result are `[h_fwd_t, h_bwd_t]` where the
/// backward half is a forward run of `bwd` over the time-reversed input,
/// reversed back into input time.
pub fn bilstm_forward(
    input: ArrayView2<'_, f64>,
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<HiddenSequence> {
    fwd.validate()?;
    bwd.validate()?;
    if fwd.input_dim() != bwd.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "direction input dims differ: {} vs {}",
            fwd.input_dim(),
            bwd.input_dim()
        )));
    }
    let h_f = lstm_run(input, &fwd.views())?.h;
    let h_b_rev = lstm_run(input.slice(s![..;-1, ..]), &bwd.views())?.h;
    HiddenSequence::new(join_directions(&h_f, &h_b_rev))
}

/// Rows: `[h_fwd_t, h_bwd_(T-1-t)]` where `h_bwd` rows are in reversed time.
/// The output is freshly allocated in row-major order.
fn join_directions(h_f: &Array2<f64>, h_b_rev: &Array2<f64>) -> Array2<f64> {
    let t_len = h_f.nrows();
    let (nf, nb) = (h_f.ncols(), h_b_rev.ncols());
    let mut joined = Array2::zeros((t_len, nf + nb));
    joined.slice_mut(s![.., ..nf]).assign(h_f);
    joined.slice_mut(s![.., nf..]).assign(&h_b_rev.slice(s![..;-1, ..]));
    joined
}

/// Frame-level predictions y_t = sigmoid(w . h_t + b), one shared scalar
/// head across all frames.
pub fn frame_predictions(h: &HiddenSequence, head_weights: &[f64], head_bias: f64) -> Result<Vec<f64>> {
    if head_weights.len() != h.dim() {
        return Err(Error::ShapeMismatch(format!(
            "head has {} weights, hidden states have {} channels",
            head_weights.len(),
            h.dim()
        )));
    }
    Ok((0..h.num_frames())
        .map(|t| {
            let z: f64 = h.frame(t).iter().zip(head_weights).map(|(x, w)| x * w).sum();
            sigmoid(z + head_bias)
        })
        .collect())
}

/// Utterance-level prediction from a pooled feature vector.
pub fn utterance_from_feature(pooled: &[f64], head_weights: &[f64], head_bias: f64) -> Result<f64> {
    if head_weights.len() != pooled.len() {
        return Err(Error::ShapeMismatch(format!(
            "head has {} weights, pooled feature has {} channels",
            head_weights.len(),
            pooled.len()
        )));
    }
    let z: f64 = pooled.iter().zip(head_weights).map(|(x, w)| x * w).sum();
    Ok(sigmoid(z + head_bias))
}

/// Direction of the LSTM layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uni,
    Bi,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(Direction::Uni),
            "bi" => Ok(Direction::Bi),
            other => Err(Error::Config(format!("unknown direction {other:?}; use uni or bi"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Uni => "uni",
            Direction::Bi => "bi",
        }
    }
}

/// Architecture description: up to two LSTM layers, a total unit count per
/// layer (split evenly across directions when bidirectional), and the
/// pooling head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub units: usize,
    pub direction: Direction,
    pub pooling: PoolingKind,
    pub input_dim: usize,
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        units: usize,
        direction: Direction,
        pooling: PoolingKind,
        input_dim: usize,
    ) -> Result<Self> {
        let config = Self { n_layers, units, direction, pooling, input_dim };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::Config(format!("n_layers must be 1 or 2, got {}", self.n_layers)));
        }
        if self.units == 0 {
            return Err(Error::Config("units must be at least 1".into()));
        }
        if self.direction == Direction::Bi && self.units % 2 != 0 {
            return Err(Error::Config(format!(
                "bidirectional units must split evenly per direction, got {}",
                self.units
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Parameter prefixes of layer `l`, one entry per direction.
    fn layer_prefixes(&self, layer: usize) -> Vec<String> {
        match self.direction {
            Direction::Uni => vec![format!("lstm{layer}")],
            Direction::Bi => vec![format!("lstm{layer}.fwd"), format!("lstm{layer}.bwd")],
        }
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.units
        }
    }

    fn units_per_direction(&self) -> usize {
        match self.direction {
            Direction::Uni => self.units,
            Direction::Bi => self.units / 2,
        }
    }

    /// Expected (name, shape) of every trainable tensor, sorted by name.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let n = self.units_per_direction();
        for layer in 0..self.n_layers {
            let d = self.layer_input_dim(layer);
            for prefix in self.layer_prefixes(layer) {
                for gate in GATE_NAMES {
                    layout.push((format!("{prefix}.w_{gate}"), vec![n, d]));
                    layout.push((format!("{prefix}.u_{gate}"), vec![n, n]));
                    layout.push((format!("{prefix}.b_{gate}"), vec![n]));
                }
            }
        }
        layout.push(("head.w".to_string(), vec![self.units]));
        layout.push(("head.b".to_string(), vec![1]));
        if self.pooling == PoolingKind::PredAttention {
            layout.push(("attn.w".to_string(), vec![self.units]));
            layout.push(("attn.b".to_string(), vec![1]));
        }
        layout.sort_by(|a, b| a.0.cmp(&b.0));
        layout
    }
}

/// Seeded weight initialization: input and dense weights are Glorot-uniform,
/// recurrent kernels orthogonal, biases zero except the forget gate at 1.
fn glorot_values(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Orthogonal n x n matrix from modified Gram-Schmidt on a Gaussian sample.
fn orthogonal_matrix(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let normal = StandardNormal;
    loop {
        let mut q = Array2::from_shape_fn((n, n), |_| normal.sample(rng));
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let proj: f64 = (0..n).map(|r| q[(r, j)] * q[(r, k)]).sum();
                for r in 0..n {
                    q[(r, j)] -= proj * q[(r, k)];
                }
            }
            let norm: f64 = (0..n).map(|r| q[(r, j)] * q[(r, j)]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for r in 0..n {
                q[(r, j)] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

/// What the model caches during a forward pass so that `backward` can run.
pub(crate) struct ForwardTrace {
    /// One trace per layer, one or two directions each.
    layers: Vec<Vec<LstmTrace>>,
    /// Output of each layer in input time order (T x units).
    outputs: Vec<Array2<f64>>,
    head: HeadTrace,
    pub(crate) score: f64,
}

enum HeadTrace {
    Feature {
        pooled: Vec<f64>,
        attention: Option<Vec<f64>>,
    },
    Prediction {
        y_seq: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
}

/// The complete classifier: configuration plus a single parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Seeded initialization; identical (config, seed) pairs produce
    /// bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = config.units_per_direction();
        for layer in 0..config.n_layers {
            let d = config.layer_input_dim(layer);
            for prefix in config.layer_prefixes(layer) {
                for gate in GATE_NAMES {
                    let w = glorot_values(&mut rng, d, n, n * d);
                    params.insert(ParamTensor::new(format!("{prefix}.w_{gate}"), vec![n, d], w)?);
                    let u = orthogonal_matrix(&mut rng, n);
                    params.insert(ParamTensor::new(
                        format!("{prefix}.u_{gate}"),
                        vec![n, n],
                        u.into_raw_vec_and_offset().0,
                    )?);
                    let bias = if gate == "f" { vec![1.0; n] } else { vec![0.0; n] };
                    params.insert(ParamTensor::new(format!("{prefix}.b_{gate}"), vec![n], bias)?);
                }
            }
        }
        let head_w = glorot_values(&mut rng, config.units, 1, config.units);
        params.insert(ParamTensor::new("head.w", vec![config.units], head_w)?);
        params.insert(ParamTensor::new("head.b", vec![1], vec![0.0])?);
        if config.pooling == PoolingKind::PredAttention {
            let attn_w = glorot_values(&mut rng, config.units, 1, config.units);
            params.insert(ParamTensor::new("attn.w", vec![config.units], attn_w)?);
            params.insert(ParamTensor::new("attn.b", vec![1], vec![0.0])?);
        }
        Ok(Model { config, params })
    }

    /// Rebuild a model from existing parameters, validating the layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let expected = config.param_layout();
        if params.len() != expected.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter store has {} tensors, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let tensor = params.get(name)?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: shape {:?} vs expected {shape:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Utterance score in (0, 1).
    pub fn score(&self, features: &FeatureMatrix) -> Result<f64> {
        Ok(forward_parts(&self.config, &self.params, features)?.score)
    }

    /// Hidden states of the last LSTM layer.
    pub fn forward_hidden(&self, features: &FeatureMatrix) -> Result<HiddenSequence> {
        let trace = forward_parts(&self.config, &self.params, features)?;
        HiddenSequence::new(trace.outputs.last().expect("at least one layer").clone())
    }

    /// BCE loss against a binary label plus analytic gradients for every
    /// trainable parameter.
    pub fn loss_and_grad(&self, features: &FeatureMatrix, label: u8) -> Result<(f64, GradientMap)> {
        let trace = forward_parts(&self.config, &self.params, features)?;
        let loss = bce_loss(trace.score, label)?;
        let d_score = bce_grad(trace.score, label)?;
        let grads = backward_parts(&self.config, &self.params, features, &trace, d_score)?;
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let file = File::open(path)
            .map_err(|e| Error::NotFound(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }

    /// Checkpoint format: magic "RAEC", version u16, serialized config, then
    /// each tensor as (name u16+bytes, rank u8, dims u32 each, f64 LE values)
    /// in name order. Round-trips bit-exactly.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"RAEC")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&[self.config.n_layers as u8])?;
        w.write_all(&(self.config.units as u32).to_le_bytes())?;
        w.write_all(&[match self.config.direction {
            Direction::Uni => 0u8,
            Direction::Bi => 1u8,
        }])?;
        let pooling = self.config.pooling.canonical_name().as_bytes();
        w.write_all(&(pooling.len() as u16).to_le_bytes())?;
        w.write_all(pooling)?;
        w.write_all(&(self.config.input_dim as u32).to_le_bytes())?;

        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for tensor in self.params.iter() {
            let name = tensor.name().as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[tensor.shape().len() as u8])?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &v in tensor.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Model> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RAEC" {
            return Err(Error::Format("bad magic: not a RAEC checkpoint".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b1 = [0u8; 1];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b1)?;
        let n_layers = b1[0] as usize;
        r.read_exact(&mut b4)?;
        let units = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b1)?;
        let direction = match b1[0] {
            0 => Direction::Uni,
            1 => Direction::Bi,
            other => return Err(Error::Format(format!("bad direction byte {other}"))),
        };
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let pooling = PoolingKind::parse(
            std::str::from_utf8(&name).map_err(|_| Error::Format("pooling name not UTF-8".into()))?,
        )?;
        r.read_exact(&mut b4)?;
        let input_dim = u32::from_le_bytes(b4) as usize;
        let config = ModelConfig::new(n_layers, units, direction, pooling, input_dim)?;

        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut params = ParamStore::new();
        let mut b8 = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
            r.read_exact(&mut b1)?;
            let rank = b1[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b4)?;
                shape.push(u32::from_le_bytes(b4) as usize);
            }
            let len = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                values.push(f64::from_le_bytes(b8));
            }
            params.insert(ParamTensor::new(name, shape, values)?);
        }
        Model::from_parts(config, params)
    }
}

/// Forward pass as a free function of (config, params) so that gradient
/// checking can evaluate the loss under perturbed parameters.
pub(crate) fn forward_parts(
    config: &ModelConfig,
    params: &ParamStore,
    features: &FeatureMatrix,
) -> Result<ForwardTrace> {
    if features.num_bands() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} bands, model expects {}",
            features.num_bands(),
            config.input_dim
        )));
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let input = if layer == 0 {
            features.view()
        } else {
            outputs[layer - 1].view()
        };
        let prefixes = config.layer_prefixes(layer);
        match config.direction {
            Direction::Uni => {
                let gates = GateViews::from_store(params, &prefixes[0])?;
                let trace = lstm_run(input, &gates)?;
                outputs.push(trace.h.clone());
                layers.push(vec![trace]);
            }
            Direction::Bi => {
                let fwd = GateViews::from_store(params, &prefixes[0])?;
                let bwd = GateViews::from_store(params, &prefixes[1])?;
                let trace_f = lstm_run(input, &fwd)?;
                let trace_b = lstm_run(input.slice(s![..;-1, ..]), &bwd)?;
                outputs.push(join_directions(&trace_f.h, &trace_b.h));
                layers.push(vec![trace_f, trace_b]);
            }
        }
    }

    let hidden = HiddenSequence::new(outputs.last().expect("n_layers >= 1").clone())?;
    let head_w = params.get("head.w")?.values().to_vec();
    let head_b = params.scalar("head.b")?;

    let (head, score) = if config.pooling.on_feature() {
        let shared = AttentionHead::new(head_w.clone(), head_b);
        let (pooled, attention) = if config.pooling == PoolingKind::FeatAttention {
            let a = attention_weights_feature(&hidden, &shared)?;
            let mut pooled = vec![0.0; hidden.dim()];
            for (t, &a_t) in a.iter().enumerate() {
                for (p, &x) in pooled.iter_mut().zip(hidden.frame(t)) {
                    *p += a_t * x;
                }
            }
            (pooled, Some(a))
        } else {
            (crate::pooling::pool_feature(config.pooling, &hidden, None)?, None)
        };
        let pre: f64 =
            pooled.iter().zip(&head_w).map(|(x, w)| x * w).sum::<f64>() + head_b;
        let score = sigmoid(pre);
        (HeadTrace::Feature { pooled, attention }, score)
    } else {
        let y_seq = frame_predictions(&hidden, &head_w, head_b)?;
        let (weights, score) = if config.pooling == PoolingKind::PredAttention {
            let attn = AttentionHead::new(params.get("attn.w")?.values().to_vec(), params.scalar("attn.b")?);
            let w = attention_weights_prediction(&hidden, &attn)?;
            let num: f64 = y_seq.iter().zip(&w).map(|(y, wt)| y * wt).sum();
            let den: f64 = w.iter().sum();
            (Some(w), num / den)
        } else {
            (None, pool_prediction(config.pooling, &y_seq, None, None)?)
        };
        (HeadTrace::Prediction { y_seq, weights }, score)
    };

    Ok(ForwardTrace { layers, outputs, head, score })
}

/// Backward pass matching [`forward_parts`]; `d_score` is d(loss)/d(score).
pub(crate) fn backward_parts(
    config: &ModelConfig,
    params: &ParamStore,
    features: &FeatureMatrix,
    trace: &ForwardTrace,
    d_score: f64,
) -> Result<GradientMap> {
    let mut grads = GradientMap::zeros_like(params);
    let hidden = HiddenSequence::new(trace.outputs.last().expect("n_layers >= 1").clone())?;
    let head_w = params.get("head.w")?.values().to_vec();
    let head_b = params.scalar("head.b")?;
    let (t_len, n) = (hidden.num_frames(), hidden.dim());

    // Head + pooling backward: produce dH for the last layer.
    let mut dh_top: Array2<f64> = Array2::zeros((t_len, n));
    match &trace.head {
        HeadTrace::Feature { pooled, attention } => {
            let y = trace.score;
            let ds = d_score * y * (1.0 - y);
            let dw: Vec<f64> = pooled.iter().map(|&p| ds * p).collect();
            grads.add_to("head.w", &dw)?;
            grads.add_to("head.b", &[ds])?;
            let dh_pool: Vec<f64> = head_w.iter().map(|&w| ds * w).collect();
            let shared = AttentionHead::new(head_w.clone(), head_b);
            let pool_grads = pool_feature_backward(
                config.pooling,
                &hidden,
                Some(&shared),
                attention.as_deref(),
                &dh_pool,
            )?;
            dh_top += &pool_grads.dh;
            if config.pooling == PoolingKind::FeatAttention {
                grads.add_to("head.w", &pool_grads.d_head_w)?;
                grads.add_to("head.b", &[pool_grads.d_head_b])?;
            }
        }
        HeadTrace::Prediction { y_seq, weights } => {
            let attn = if config.pooling == PoolingKind::PredAttention {
                Some(AttentionHead::new(
                    params.get("attn.w")?.values().to_vec(),
                    params.scalar("attn.b")?,
                ))
            } else {
                None
            };
            let pool_grads = pool_prediction_backward(
                config.pooling,
                y_seq,
                attn.as_ref(),
                Some(&hidden),
                weights.as_deref(),
                trace.score,
                d_score,
            )?;
            let mut dw = vec![0.0; n];
            let mut db = 0.0;
            for (t, (&dy, &y_t)) in pool_grads.dy.iter().zip(y_seq).enumerate() {
                let ds_t = dy * y_t * (1.0 - y_t);
                db += ds_t;
                let frame = hidden.frame(t);
                for (gw, &x) in dw.iter_mut().zip(frame) {
                    *gw += ds_t * x;
                }
                for (slot, &w) in dh_top.row_mut(t).iter_mut().zip(&head_w) {
                    *slot += ds_t * w;
                }
            }
            grads.add_to("head.w", &dw)?;
            grads.add_to("head.b", &[db])?;
            if let Some(extra) = pool_grads.dh_extra {
                dh_top += &extra;
                grads.add_to("attn.w", &pool_grads.d_attn_w)?;
                grads.add_to("attn.b", &[pool_grads.d_attn_b])?;
            }
        }
    }

    // BPTT top-down through the layers.
    let mut dh_layer = dh_top;
    for layer in (0..config.n_layers).rev() {
        let input = if layer == 0 {
            features.view()
        } else {
            trace.outputs[layer - 1].view()
        };
        let want_dx = layer > 0;
        let prefixes = config.layer_prefixes(layer);
        let dx = match config.direction {
            Direction::Uni => {
                let gates = GateViews::from_store(params, &prefixes[0])?;
                let lg = lstm_backprop(input, &gates, &trace.layers[layer][0], dh_layer.view(), want_dx);
                store_lstm_grads(&mut grads, &prefixes[0], &lg)?;
                lg.dx
            }
            Direction::Bi => {
                let half = config.units_per_direction();
                let fwd = GateViews::from_store(params, &prefixes[0])?;
                let bwd = GateViews::from_store(params, &prefixes[1])?;
                let dh_f = dh_layer.slice(s![.., ..half]);
                let dh_b_rev = dh_layer.slice(s![..;-1, half..]);
                let lg_f =
                    lstm_backprop(input, &fwd, &trace.layers[layer][0], dh_f, want_dx);
                let lg_b = lstm_backprop(
                    input.slice(s![..;-1, ..]),
                    &bwd,
                    &trace.layers[layer][1],
                    dh_b_rev,
                    want_dx,
                );
                store_lstm_grads(&mut grads, &prefixes[0], &lg_f)?;
                store_lstm_grads(&mut grads, &prefixes[1], &lg_b)?;
                match (lg_f.dx, lg_b.dx) {
                    (Some(mut dx_f), Some(dx_b_rev)) => {
                        dx_f += &dx_b_rev.slice(s![..;-1, ..]);
                        Some(dx_f)
                    }
                    _ => None,
                }
            }
        };
        if let Some(dx) = dx {
            dh_layer = dx;
        }
    }

    Ok(grads)
}

fn store_lstm_grads(grads: &mut GradientMap, prefix: &str, lg: &LstmGrads) -> Result<()> {
    for (k, gate) in GATE_NAMES.iter().enumerate() {
        grads.add_to(
            &format!("{prefix}.w_{gate}"),
            lg.dw[k].as_slice().expect("standard layout"),
        )?;
        grads.add_to(
            &format!("{prefix}.u_{gate}"),
            lg.du[k].as_slice().expect("standard layout"),
        )?;
        grads.add_to(
            &format!("{prefix}.b_{gate}"),
            lg.db[k].as_slice().expect("standard layout"),
        )?;
    }
    Ok(())
}
