//! Minimal reverse-mode gradient engine over named tensors.
//!
//! A [`Tape`] records tensor-level primitive applications eagerly; calling
//! [`Tape::backward`] on a scalar loss runs the exact reverse sweep in a
//! fixed single-threaded order, so training runs are bit-reproducible per
//! seed. Parameters are named, carry a frozen flag, and are partitioned by
//! that flag at optimizer time only: gradients always flow through frozen
//! parameters so upstream adapters receive signal.
//!
//! Everything is double precision; the wire format (see `comms`) is the one
//! place single precision appears.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic header of the checkpoint container format.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MACPCK01";

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by op '{0}'")]
    NonFinite(&'static str),
    #[error("trainable parameter '{0}' has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("bad checkpoint magic: expected {CHECKPOINT_MAGIC:?}, got {0:?}")]
    BadMagic([u8; 8]),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named tensor with a gradient slot and a frozen flag; the unit of
/// parameter-efficient partitioning. Frozen protects the value from
/// optimizer updates, never from differentiation.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered parameter container; insertion order is the canonical iteration
/// order everywhere (updates, checkpoints, counting), which keeps runs
/// reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId, AdError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AdError::DuplicateParam(name));
        }
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Param { name, value, grad: None, frozen });
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(existing) => existing.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    /// (total, trainable) element counts over all parameters.
    pub fn count_elements(&self) -> (usize, usize) {
        let total = self.params.iter().map(|p| p.value.numel()).sum();
        let trainable = self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum();
        (total, trainable)
    }

    /// Sets the frozen flag on every parameter whose name matches the
    /// predicate; returns how many were left trainable.
    pub fn freeze_where<F: Fn(&str) -> bool>(&mut self, frozen: F) -> usize {
        let mut trainable = 0;
        for p in &mut self.params {
            p.frozen = frozen(&p.name);
            if !p.frozen {
                trainable += 1;
            }
        }
        trainable
    }

    /// Writes the self-describing checkpoint container; values are
    /// little-endian IEEE-754 doubles so loading restores bitwise-equal
    /// parameters.
    pub fn save(&self, path: &Path) -> Result<(), AdError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name)?;
            f.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
            for &d in &p.value.shape {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            f.write_all(&[p.frozen as u8])?;
            for &v in &p.value.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AdError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AdError::BadMagic(magic));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 20 {
                return Err(AdError::Corrupt(format!("absurd name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| AdError::Corrupt(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(AdError::Corrupt(format!("absurd rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let mut frozen = [0u8];
            r.read_exact(&mut frozen)?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(name, Tensor::new(shape, data), frozen[0] != 0)?;
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AdError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// A differentiable tensor primitive recorded on the tape.
pub trait TapeOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError>;

    /// Gradient of the loss with respect to each input, given the gradient
    /// with respect to the output. `None` entries mean "no gradient flows
    /// to this input".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, AdError>;
}

/// Handle to a value held by a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

struct Node {
    op: Option<Box<dyn TapeOp>>,
    inputs: Vec<Value>,
    param: Option<ParamId>,
}

/// Eager-forward tape. Values are produced in topological order by
/// construction; backward walks the records in reverse.
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new(), check_finite: false }
    }

    /// Turns on per-op finiteness validation (used by `grad_check`).
    pub fn with_finite_checks() -> Self {
        Self { values: Vec::new(), nodes: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a leaf holding the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        self.values.push(store.value(id).clone());
        self.nodes.push(Node { op: None, inputs: Vec::new(), param: Some(id) });
        Value(self.values.len() - 1)
    }

    /// Registers a leaf constant (no gradient is accumulated for it).
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.values.push(t);
        self.nodes.push(Node { op: None, inputs: Vec::new(), param: None });
        Value(self.values.len() - 1)
    }

    pub fn tensor(&self, v: Value) -> &Tensor {
        &self.values[v.0]
    }

    /// Runs an op forward and records it.
    pub fn apply(&mut self, op: Box<dyn TapeOp>, inputs: &[Value]) -> Result<Value, AdError> {
        let out = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.values[v.0]).collect();
            op.forward(&refs)?
        };
        if self.check_finite && !out.all_finite() {
            return Err(AdError::NonFinite(op.name()));
        }
        self.values.push(out);
        self.nodes.push(Node { op: Some(op), inputs: inputs.to_vec(), param: None });
        Ok(Value(self.values.len() - 1))
    }

    /// Exact reverse-mode sweep from a scalar loss. Gradients of parameter
    /// leaves are accumulated into the store (frozen ones included); the
    /// full per-value gradient vector is returned for inspection.
    pub fn backward(&self, loss: Value, store: &mut ParamStore) -> Result<Vec<Option<Tensor>>, AdError> {
        let lt = &self.values[loss.0];
        if !lt.is_scalar() {
            return Err(AdError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if let Some(op) = &self.nodes[i].op {
                let gins = {
                    let refs: Vec<&Tensor> =
                        self.nodes[i].inputs.iter().map(|v| &self.values[v.0]).collect();
                    op.backward(&refs, &self.values[i], &gout)?
                };
                debug_assert_eq!(gins.len(), self.nodes[i].inputs.len());
                for (vin, gin) in self.nodes[i].inputs.iter().zip(gins) {
                    if let Some(g) = gin {
                        match &mut grads[vin.0] {
                            Some(existing) => existing.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            grads[i] = Some(gout);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[i]) {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(grads)
    }
}

/// AdamW hyperparameters. The weight decay is decoupled from the moment
/// estimates, matching the update `p -= lr * (m_hat / (sqrt(v_hat) + eps)
/// + lambda * p)`.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Per-parameter first/second moment estimates plus the shared step count.
/// Frozen parameters keep zero moments; they are never touched.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, t: 0, config }
    }
}

/// One decoupled-weight-decay Adam step over the non-frozen parameters.
/// Frozen parameters are bitwise untouched; the step counter advances
/// regardless.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<(), AdError> {
    assert_eq!(state.m.len(), store.len(), "optimizer state does not match store");
    state.t += 1;
    let t = state.t as i32;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for idx in 0..store.len() {
        let p = store.get_mut(ParamId(idx));
        if p.frozen {
            continue;
        }
        let grad = p.grad.as_ref().ok_or_else(|| AdError::MissingGrad(p.name.clone()))?;
        debug_assert_eq!(grad.shape(), p.value.shape());
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let gd = grad.data();
        let pd = p.value.data.as_mut_slice();
        for i in 0..pd.len() {
            let g = gd[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let old = pd[i];
            pd[i] = old - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * old;
        }
    }
    Ok(())
}

/// Cosine annealing: `0.5 * lr0 * (1 + cos(pi * step / total))`, clamped
/// at the end of the schedule.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    assert!(total >= 1, "schedule length must be at least 1");
    let s = step.min(total) as f64;
    let lr = 0.5 * lr0 * (1.0 + (std::f64::consts::PI * s / total as f64).cos());
    lr.max(0.0)
}

/// Central-finite-difference validation of the reverse sweep: rebuilds the
/// tape via `build` for every perturbed parameter element and returns the
/// maximum relative error `|analytic - numeric| / max(1e-12, |analytic| +
/// |numeric|)` over all parameters that received a gradient.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Value, AdError>,
{
    store.zero_grads();
    let mut tape = Tape::with_finite_checks();
    let loss = build(&mut tape, store)?;
    if !tape.tensor(loss).is_scalar() {
        return Err(AdError::NonScalarLoss(tape.tensor(loss).shape().to_vec()));
    }
    tape.backward(loss, store)?;
    let analytic: Vec<Option<Tensor>> = store.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |store: &ParamStore| -> Result<f64, AdError> {
        let mut tape = Tape::with_finite_checks();
        let loss = build(&mut tape, store)?;
        Ok(tape.tensor(loss).item())
    };

    let mut max_rel = 0.0_f64;
    for idx in 0..store.len() {
        let Some(agrad) = analytic[idx].clone() else { continue };
        for i in 0..agrad.numel() {
            let old = store.get(ParamId(idx)).value.data()[i];
            store.get_mut(ParamId(idx)).value.data_mut()[i] = old + eps;
            let lp = eval(store)?;
            store.get_mut(ParamId(idx)).value.data_mut()[i] = old - eps;
            let lm = eval(store)?;
            store.get_mut(ParamId(idx)).value.data_mut()[i] = old;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = agrad.data()[i];
            let rel = (a - numeric).abs() / (1e-12_f64).max(a.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
