use indexmap::IndexMap;
use rand::Rng;

use super::tape::ParamGrads;
use super::tensor::Tensor;
use super::KernelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with AdamW moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    index: IndexMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    has_grad: bool,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId, KernelError> {
        if self.index.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        let n = value.len();
        self.index.insert(name.to_string(), id);
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        self.first_moment.push(vec![0.0; n]);
        self.second_moment.push(vec![0.0; n]);
        Ok(id)
    }

    /// Affine weight `[fan_in, fan_out]` drawn from `U(±1/√fan_in)`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, KernelError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn insert_filled(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> Result<ParamId, KernelError> {
        self.insert(name, Tensor::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.index
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .expect("param id")
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.index
            .iter()
            .map(move |(name, &id)| (id, name.as_str(), &self.values[id.0]))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.has_grad = false;
    }

    /// Adds gradients gathered from one or more tapes.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<(), KernelError> {
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                let dst = self
                    .grads
                    .get_mut(i)
                    .ok_or_else(|| KernelError::ShapeMismatch(format!("unknown param {i}")))?;
                if dst.len() != g.len() {
                    return Err(KernelError::ShapeMismatch(format!(
                        "gradient for {} has {} entries, expected {}",
                        self.index.get_index(i).map_or("?", |(k, _)| k.as_str()),
                        g.len(),
                        dst.len()
                    )));
                }
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        self.has_grad = true;
        Ok(())
    }

    /// Replaces all values by those of `other`, matched by name.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), KernelError> {
        if other.len() != self.len() {
            return Err(KernelError::CheckpointMismatch(format!(
                "{} parameters in checkpoint, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (name, &id) in &self.index {
            let src = other
                .id(name)
                .ok_or_else(|| KernelError::CheckpointMismatch(format!("missing {name}")))?;
            let v = other.value(src);
            if v.len() != self.values[id.0].len() {
                return Err(KernelError::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    v.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = v.clone();
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate from `lr_init` down to `lr_min` over `t_max` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub t_max: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.t_max == 0 {
            return self.lr_init;
        }
        let t = step.min(self.t_max) as f64 / self.t_max as f64;
        self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update with decoupled weight decay; returns the learning rate used.
    pub fn step(
        &self,
        store: &mut ParamStore,
        schedule: &CosineSchedule,
    ) -> Result<f64, KernelError> {
        if !store.has_grad {
            return Err(KernelError::MissingGradient);
        }
        let lr = schedule.lr_at(store.step);
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.values.len() {
            let p = store.values[i].data_mut();
            let g = &store.grads[i];
            let m = &mut store.first_moment[i];
            let v = &mut store.second_moment[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * self.weight_decay * p[j];
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.has_grad = false;
        Ok(lr)
    }
}
