use crate::error::{DiffError, Result};
use crate::store::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Bias-corrected ADAM state for one parameter store. The step counter
/// increments exactly once per [`adam_update`] call.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    m: Tensor,
    v: Tensor,
}

impl AdamState {
    /// Zero moments for every trainable entry of `store`.
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut slots = Vec::new();
        let mut index = HashMap::new();
        for entry in store.iter().filter(|e| e.trainable) {
            index.insert(entry.name.clone(), slots.len());
            slots.push(Slot {
                name: entry.name.clone(),
                m: Tensor::zeros(entry.tensor.shape().to_vec()),
                v: Tensor::zeros(entry.tensor.shape().to_vec()),
            });
        }
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            slots,
            index,
        }
    }

    pub fn defaults(store: &ParamStore) -> Self {
        AdamState::new(store, 0.9, 0.999, 1e-8)
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.index.get(name).map(|&i| (&self.slots[i].m, &self.slots[i].v))
    }

    pub fn iter_moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.m, &s.v))
    }

    /// Replaces the moments for `name`; used by checkpoint restore.
    pub fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| DiffError::ParamStore(format!("no ADAM slot for '{name}'")))?;
        if m.shape() != self.slots[i].m.shape() || v.shape() != self.slots[i].v.shape() {
            return Err(DiffError::shape(
                "adam_set_moments",
                format!("moment shapes {:?}/{:?} do not match slot '{name}'", m.shape(), v.shape()),
            ));
        }
        self.slots[i].m = m;
        self.slots[i].v = v;
        Ok(())
    }
}

/// One bias-corrected ADAM step. Gradients may cover any subset of the
/// trainable parameters; entries without a gradient keep their moments.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    // Iterate in store order so the update sequence is deterministic.
    let names: Vec<String> = params
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let Some(grad) = grads.get(&name) else {
            continue;
        };
        let slot_idx = *state
            .index
            .get(&name)
            .ok_or_else(|| DiffError::ParamStore(format!("no ADAM slot for '{name}'")))?;
        let param = params
            .get_mut(&name)
            .expect("name listed from the same store");
        if grad.shape() != param.shape() {
            return Err(DiffError::shape(
                "adam_update",
                format!(
                    "grad shape {:?} != param shape {:?} for '{name}'",
                    grad.shape(),
                    param.shape()
                ),
            ));
        }
        let slot = &mut state.slots[slot_idx];
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        let gm = grad.data();
        let md = slot.m.data_mut();
        let vd = slot.v.data_mut();
        let pd = param.data_mut();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * gm[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * gm[i] * gm[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
