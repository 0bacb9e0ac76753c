//! SGD with classic momentum and L2 weight decay folded into the gradient:
//! `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.

use stdmmf_tensor::{EntryKind, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per store entry; empty for buffers (running statistics).
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .entries()
            .iter()
            .map(|e| if e.kind == EntryKind::Parameter { vec![0.0; e.numel()] } else { Vec::new() })
            .collect();
        Sgd { learning_rate, momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for (entry, v) in store.entries_mut().iter_mut().zip(&mut self.velocity) {
            if entry.kind != EntryKind::Parameter {
                continue;
            }
            // an entry the last backward pass never reached has zero gradient
            let grad = |i: usize| entry.grad.get(i).copied().unwrap_or(0.0);
            for (i, (p, vi)) in entry.data.iter_mut().zip(v.iter_mut()).enumerate() {
                *vi = mu * *vi + (grad(i) + wd * *p);
                *p -= lr * *vi;
            }
        }
    }
}
