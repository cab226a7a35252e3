use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ModalitySpecific,
    Shared,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    velocity: Option<Tensor>,
}

/// Named learnable tensors plus their gradient and momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value,
            grad: None,
            velocity: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Add the gradients a tape holds for its parameter handles.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for &id in tape.params_used() {
            let var = tape.param_var(id).expect("registered parameter");
            if let Some(g) = tape.grad(var) {
                match &mut self.params[id.0].grad {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    /// L2 norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr_specific: f64,
    pub lr_shared: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradient when its global L2 norm exceeds this; 0 disables.
    pub clip_norm: f64,
}

impl SgdConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::ModalitySpecific => self.lr_specific,
            ParamGroup::Shared => self.lr_shared,
        }
    }
}

/// One SGD update with momentum and L2 weight decay:
/// `v = momentum * v + grad + weight_decay * param`, `param -= lr * v`.
///
/// Every parameter must carry a gradient. With `clip_norm > 0` the gradients
/// are first scaled so their joint L2 norm is at most `clip_norm`.
pub fn sgd_step(store: &mut ParamStore, cfg: &SgdConfig) -> Result<()> {
    if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let scale = if cfg.clip_norm > 0.0 {
        let norm = store.grad_norm();
        if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    for p in &mut store.params {
        let lr = cfg.lr(p.group);
        let grad = p.grad.as_ref().expect("checked above");
        let vel = p
            .velocity
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((v, w), g) in vel
            .data_mut()
            .iter_mut()
            .zip(p.value.data_mut().iter_mut())
            .zip(grad.data())
        {
            *v = cfg.momentum * *v + scale * g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
        p.value.check_finite(&format!("sgd update of {}", p.name))?;
    }
    Ok(())
}
