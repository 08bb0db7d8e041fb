//! Desk-scale differentiable classifiers (logistic regression and a
//! one-hidden-layer relu MLP), masked weighted binary cross-entropy with
//! logits, and Adam with optional amsgrad. All numerics in f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            output_dim,
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input_dim,
            hidden_dim,
            output_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Logistic => self.input_dim * self.output_dim + self.output_dim,
            ModelKind::Mlp1 => {
                self.input_dim * self.hidden_dim
                    + self.hidden_dim
                    + self.hidden_dim * self.output_dim
                    + self.output_dim
            }
        }
    }
}

/// Flat parameter vector plus Adam moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_vhat_max: Vec<f64>,
    pub step_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub amsgrad: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            amsgrad: true,
        }
    }
}

/// Per-task positive-class loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub pos_weight: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(n_tasks: usize) -> Self {
        Self {
            pos_weight: vec![1.0; n_tasks],
        }
    }
}

/// Glorot-uniform weights, zero biases, zero optimizer state.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.param_count();
    let mut params = vec![0.0; n];

    let mut fill = |params: &mut [f64], offset: usize, fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut params[offset..offset + fan_in * fan_out] {
            *w = (rng.random::<f64>() * 2.0 - 1.0) * bound;
        }
    };
    match spec.kind {
        ModelKind::Logistic => fill(&mut params, 0, spec.input_dim, spec.output_dim),
        ModelKind::Mlp1 => {
            fill(&mut params, 0, spec.input_dim, spec.hidden_dim);
            let off = spec.input_dim * spec.hidden_dim + spec.hidden_dim;
            fill(&mut params, off, spec.hidden_dim, spec.output_dim);
        }
    }
    ModelState {
        adam_m: vec![0.0; n],
        adam_v: vec![0.0; n],
        adam_vhat_max: vec![0.0; n],
        step_count: 0,
        params,
    }
}

// Layout: [w1 (in x hid or in x out, row-major by input), b1, (w2, b2)]
fn layout(spec: &ModelSpec) -> (usize, usize, usize, usize) {
    match spec.kind {
        ModelKind::Logistic => {
            let w = spec.input_dim * spec.output_dim;
            (0, w, 0, 0)
        }
        ModelKind::Mlp1 => {
            let w1 = spec.input_dim * spec.hidden_dim;
            let b1 = w1;
            let w2 = b1 + spec.hidden_dim;
            let b2 = w2 + spec.hidden_dim * spec.output_dim;
            (0, b1, w2, b2)
        }
    }
}

/// Logits for a row-major feature matrix (rows x input_dim).
pub fn forward(state: &ModelState, spec: &ModelSpec, features: &[f64]) -> Result<Vec<f64>, NnError> {
    if features.len() % spec.input_dim != 0 {
        return Err(NnError::DimMismatch(format!(
            "feature length {} not a multiple of input_dim {}",
            features.len(),
            spec.input_dim
        )));
    }
    let rows = features.len() / spec.input_dim;
    match spec.kind {
        ModelKind::Logistic => {
            let (w_off, b_off, _, _) = layout(spec);
            let mut logits = vec![0.0; rows * spec.output_dim];
            for r in 0..rows {
                let x = &features[r * spec.input_dim..(r + 1) * spec.input_dim];
                for o in 0..spec.output_dim {
                    let mut z = state.params[b_off + o];
                    for (i, xi) in x.iter().enumerate() {
                        z += xi * state.params[w_off + i * spec.output_dim + o];
                    }
                    logits[r * spec.output_dim + o] = z;
                }
            }
            Ok(logits)
        }
        ModelKind::Mlp1 => {
            let (hidden, logits) = mlp_forward_full(state, spec, features, rows);
            drop(hidden);
            Ok(logits)
        }
    }
}

// Returns (post-relu hidden activations, logits).
fn mlp_forward_full(
    state: &ModelState,
    spec: &ModelSpec,
    features: &[f64],
    rows: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (w1, b1, w2, b2) = layout(spec);
    let mut hidden = vec![0.0; rows * spec.hidden_dim];
    let mut logits = vec![0.0; rows * spec.output_dim];
    for r in 0..rows {
        let x = &features[r * spec.input_dim..(r + 1) * spec.input_dim];
        let h = &mut hidden[r * spec.hidden_dim..(r + 1) * spec.hidden_dim];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut z = state.params[b1 + j];
            for (i, xi) in x.iter().enumerate() {
                z += xi * state.params[w1 + i * spec.hidden_dim + j];
            }
            *hj = z.max(0.0);
        }
        for o in 0..spec.output_dim {
            let mut z = state.params[b2 + o];
            for (j, hj) in h.iter().enumerate() {
                z += hj * state.params[w2 + j * spec.output_dim + o];
            }
            logits[r * spec.output_dim + o] = z;
        }
    }
    (hidden, logits)
}

/// pos_weight[t] = n_neg / n_pos, with 1.0 as the degenerate fallback.
pub fn pos_weights_from_counts(counts: &[(usize, usize, usize)]) -> LossWeights {
    LossWeights {
        pos_weight: counts
            .iter()
            .map(|&(pos, neg, _)| {
                if pos == 0 || neg == 0 {
                    1.0
                } else {
                    neg as f64 / pos as f64
                }
            })
            .collect(),
    }
}

fn softplus(z: f64) -> f64 {
    // stable log(1 + e^z)
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Masked weighted BCE-with-logits, mean over unmasked elements.
/// Returns the scalar loss and its gradient w.r.t. the logits.
pub fn wbce_loss(
    logits: &[f64],
    labels: &[f64],
    mask: &[f64],
    weights: &LossWeights,
) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    assert_eq!(logits.len(), mask.len());
    let n_tasks = weights.pos_weight.len();
    assert_eq!(logits.len() % n_tasks, 0);

    let active: f64 = mask.iter().sum();
    let denom = active.max(1.0);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (idx, (&z, (&y, &m))) in logits.iter().zip(labels.iter().zip(mask.iter())).enumerate() {
        if m == 0.0 {
            continue;
        }
        let w = weights.pos_weight[idx % n_tasks];
        loss += m * (w * y * softplus(-z) + (1.0 - y) * softplus(z));
        grad[idx] = m * (-w * y * sigmoid(-z) + (1.0 - y) * sigmoid(z)) / denom;
    }
    (loss / denom, grad)
}

/// Sum per-environment (loss, gradient) pairs.
pub fn env_sum_loss(per_env: &[(f64, Vec<f64>)]) -> Result<(f64, Vec<f64>), NnError> {
    let first_len = per_env
        .first()
        .map(|(_, g)| g.len())
        .ok_or_else(|| NnError::DimMismatch("no environments".into()))?;
    let mut total_loss = 0.0;
    let mut total_grad = vec![0.0; first_len];
    for (loss, grad) in per_env {
        if grad.len() != first_len {
            return Err(NnError::DimMismatch(format!(
                "gradient length {} != {first_len}",
                grad.len()
            )));
        }
        total_loss += loss;
        for (t, g) in total_grad.iter_mut().zip(grad) {
            *t += g;
        }
    }
    Ok((total_loss, total_grad))
}

/// Reverse-mode gradients w.r.t. all parameters given upstream gradients
/// on the logits.
pub fn backward(
    state: &ModelState,
    spec: &ModelSpec,
    features: &[f64],
    dloss_dlogits: &[f64],
) -> Result<Vec<f64>, NnError> {
    if features.len() % spec.input_dim != 0 {
        return Err(NnError::DimMismatch("bad feature length".into()));
    }
    let rows = features.len() / spec.input_dim;
    if dloss_dlogits.len() != rows * spec.output_dim {
        return Err(NnError::DimMismatch("bad logit gradient length".into()));
    }
    let mut grads = vec![0.0; spec.param_count()];
    match spec.kind {
        ModelKind::Logistic => {
            let (w_off, b_off, _, _) = layout(spec);
            for r in 0..rows {
                let x = &features[r * spec.input_dim..(r + 1) * spec.input_dim];
                let dz = &dloss_dlogits[r * spec.output_dim..(r + 1) * spec.output_dim];
                for o in 0..spec.output_dim {
                    grads[b_off + o] += dz[o];
                    for (i, xi) in x.iter().enumerate() {
                        grads[w_off + i * spec.output_dim + o] += xi * dz[o];
                    }
                }
            }
        }
        ModelKind::Mlp1 => {
            let (w1, b1, w2, b2) = layout(spec);
            let (hidden, _) = mlp_forward_full(state, spec, features, rows);
            for r in 0..rows {
                let x = &features[r * spec.input_dim..(r + 1) * spec.input_dim];
                let h = &hidden[r * spec.hidden_dim..(r + 1) * spec.hidden_dim];
                let dz = &dloss_dlogits[r * spec.output_dim..(r + 1) * spec.output_dim];
                let mut dh = vec![0.0; spec.hidden_dim];
                for o in 0..spec.output_dim {
                    grads[b2 + o] += dz[o];
                    for (j, hj) in h.iter().enumerate() {
                        grads[w2 + j * spec.output_dim + o] += hj * dz[o];
                        dh[j] += state.params[w2 + j * spec.output_dim + o] * dz[o];
                    }
                }
                for (j, dhj) in dh.iter().enumerate() {
                    if h[j] <= 0.0 {
                        continue; // relu gate
                    }
                    grads[b1 + j] += dhj;
                    for (i, xi) in x.iter().enumerate() {
                        grads[w1 + i * spec.hidden_dim + j] += xi * dhj;
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// One Adam update with coupled L2 weight decay and optional amsgrad.
pub fn adam_step(state: &mut ModelState, grads: &[f64], cfg: &OptimConfig) -> Result<(), NnError> {
    if grads.len() != state.params.len() {
        return Err(NnError::DimMismatch(format!(
            "grads length {} != params length {}",
            grads.len(),
            state.params.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = grads[i] + cfg.weight_decay * state.params[i];
        state.adam_m[i] = cfg.beta1 * state.adam_m[i] + (1.0 - cfg.beta1) * g;
        state.adam_v[i] = cfg.beta2 * state.adam_v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.adam_m[i] / bc1;
        let v_hat = state.adam_v[i] / bc2;
        let denom = if cfg.amsgrad {
            if v_hat > state.adam_vhat_max[i] {
                state.adam_vhat_max[i] = v_hat;
            }
            state.adam_vhat_max[i]
        } else {
            v_hat
        };
        state.params[i] -= cfg.learning_rate * m_hat / (denom.sqrt() + cfg.epsilon);
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 4] = b"OODC";
const CKPT_VERSION: u16 = 1;

/// Checkpoint layout, little-endian throughout:
/// magic `OODC`, version u16, kind u8 (0 logistic, 1 mlp1),
/// input_dim u32, hidden_dim u32, output_dim u32, step_count u64,
/// then params, adam_m, adam_v, adam_vhat_max as f64 arrays.
pub fn save_checkpoint(state: &ModelState, spec: &ModelSpec, path: &Path) -> Result<(), NnError> {
    let mut f = fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&[match spec.kind {
        ModelKind::Logistic => 0u8,
        ModelKind::Mlp1 => 1u8,
    }])?;
    f.write_all(&(spec.input_dim as u32).to_le_bytes())?;
    f.write_all(&(spec.hidden_dim as u32).to_le_bytes())?;
    f.write_all(&(spec.output_dim as u32).to_le_bytes())?;
    f.write_all(&state.step_count.to_le_bytes())?;
    for arr in [&state.params, &state.adam_m, &state.adam_v, &state.adam_vhat_max] {
        for v in arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, ModelSpec), NnError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 31 || &bytes[0..4] != CKPT_MAGIC {
        return Err(NnError::BadCheckpoint("bad magic or truncated header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(NnError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let kind = match bytes[6] {
        0 => ModelKind::Logistic,
        1 => ModelKind::Mlp1,
        k => return Err(NnError::BadCheckpoint(format!("unknown model kind {k}"))),
    };
    let rd_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let spec = ModelSpec {
        kind,
        input_dim: rd_u32(7),
        hidden_dim: rd_u32(11),
        output_dim: rd_u32(15),
    };
    let step_count = u64::from_le_bytes(bytes[19..27].try_into().unwrap());
    let n = spec.param_count();
    let expected = 27 + 4 * n * 8;
    if bytes.len() != expected {
        return Err(NnError::BadCheckpoint(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let read_arr = |start: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let o = start + i * 8;
                f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
            })
            .collect()
    };
    let state = ModelState {
        params: read_arr(27),
        adam_m: read_arr(27 + n * 8),
        adam_v: read_arr(27 + 2 * n * 8),
        adam_vhat_max: read_arr(27 + 3 * n * 8),
        step_count,
    };
    Ok((state, spec))
}
