use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named model parameter. `trainable` controls whether it receives a
/// gradient slot when bound to a tape; `freeze_row0` keeps an embedding
/// table's padding row pinned at zero through every optimizer step.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
    pub freeze_row0: bool,
}

/// Ordered registry of model parameters. The order is the contract: Adam
/// state, tape bindings and checkpoints all align with it.
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    items: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { items: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        self.add_full(name, value, trainable, false)
    }

    pub fn add_full(
        &mut self,
        name: impl Into<String>,
        value: Tensor<F>,
        trainable: bool,
        freeze_row0: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.items.len());
        self.items.push(Param { name, value, trainable, freeze_row0 });
        ParamId(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.items[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.items.iter_mut()
    }

    /// Number of scalar values the optimizer will update.
    pub fn trainable_count(&self) -> usize {
        self.items.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Insert every parameter into a tape: gradient leaves for trainable
    /// parameters, constants for frozen ones.
    pub fn bind(&self, tape: &mut Tape<F>) -> Binding {
        let nodes = self
            .items
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Binding { nodes }
    }

    /// Pull gradients off a tape after backward, aligned with this set.
    /// Frozen row 0 of an embedding table is zeroed here so no later step
    /// can move the padding vector.
    pub fn collect_grads(&self, tape: &Tape<F>, binding: &Binding) -> Vec<Option<Vec<F>>> {
        self.items
            .iter()
            .zip(&binding.nodes)
            .map(|(p, &node)| {
                if !p.trainable {
                    return None;
                }
                let mut g = tape.grad(node).map(|g| g.to_vec()).unwrap_or_else(|| {
                    vec![F::zero(); p.value.numel()]
                });
                if p.freeze_row0 {
                    let cols = p.value.cols();
                    for v in g.iter_mut().take(cols) {
                        *v = F::zero();
                    }
                }
                Some(g)
            })
            .collect()
    }
}

/// Per-tape node handles for one [`ParamSet`], in registry order.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Binding { nodes }
    }
}

/// Adam state: first/second moments per parameter plus the shared step
/// counter. Moments are zero-initialized at t = 0 and t advances by exactly
/// one per step.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    /// Defaults follow the standard Transformer recipe.
    pub fn new(params: &ParamSet<F>) -> Self {
        Self::with_hyper(params, 0.9, 0.98, 1e-9)
    }

    pub fn with_hyper(params: &ParamSet<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        let v = params.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        AdamState { beta1, beta2, eps, t: 0, m, v }
    }

    /// One Adam update with bias correction:
    /// m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; p <- p - lr m_hat/(sqrt(v_hat)+eps).
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Option<Vec<F>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: {} gradient slots for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (ob1, ob2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let (ic1, ic2) = (F::of(1.0 / c1), F::of(1.0 / c2));
        let (lrf, epsf) = (F::of(lr), F::of(self.eps));

        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = &mut params.items[idx];
            if g.len() != p.value.numel() {
                return Err(Error::contract(format!(
                    "adam: gradient length {} vs parameter {} ({})",
                    g.len(),
                    p.value.numel(),
                    p.name
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, (&gi, pv)) in g.iter().zip(p.value.data_mut().iter_mut()).enumerate() {
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let m_hat = m[i] * ic1;
                let v_hat = v[i] * ic2;
                *pv = *pv - lrf * m_hat / (v_hat.sqrt() + epsf);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("theta", Tensor::scalar(value), true);
        ps
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = single_param(1.0);
        let mut adam = AdamState::new(&ps);
        for _ in 0..5 {
            adam.step(&mut ps, &[Some(vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(ps.get(ParamId(0)).value.data(), &[1.0]);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // At t=1 the bias-corrected m_hat = g and v_hat = g^2, so the update
        // is lr * g / (|g| + eps) which is lr * sign(g) up to eps.
        let mut ps = single_param(1.0);
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &[Some(vec![2.0])], 0.1).unwrap();
        let theta = ps.get(ParamId(0)).value.data()[0];
        assert!((theta - 0.9).abs() < 1e-9, "theta {theta}");
    }

    #[test]
    fn repeated_identical_gradient_does_not_grow_steps() {
        let mut ps = single_param(1.0);
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &[Some(vec![0.5])], 0.1).unwrap();
        let after1 = ps.get(ParamId(0)).value.data()[0];
        let d1 = (1.0 - after1).abs();
        adam.step(&mut ps, &[Some(vec![0.5])], 0.1).unwrap();
        let after2 = ps.get(ParamId(0)).value.data()[0];
        let d2 = (after1 - after2).abs();
        assert!(d2 <= d1 * (1.0 + 1e-6), "step grew: {d1} -> {d2}");
    }

    #[test]
    fn frozen_row0_receives_no_gradient() {
        let mut ps = ParamSet::new();
        let table = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let id = ps.add_full("emb", table, true, true);

        let mut tape = Tape::new();
        let binding = ps.bind(&mut tape);
        let rows = tape.gather_rows(binding.node(id), &[0, 1]).unwrap();
        let loss = tape.sum_all(rows).unwrap();
        tape.backward(loss).unwrap();

        let grads = ps.collect_grads(&tape, &binding);
        assert_eq!(grads[0].as_ref().unwrap(), &vec![0.0, 0.0, 1.0, 1.0]);

        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &grads, 0.5).unwrap();
        let row0 = &ps.get(id).value.data()[..2];
        assert_eq!(row0, &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut ps = single_param(1.0);
        let mut adam = AdamState::new(&ps);
        assert!(adam.step(&mut ps, &[Some(vec![1.0, 2.0])], 0.1).is_err());
    }
}
