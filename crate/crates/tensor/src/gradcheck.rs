//! Central-difference gradient checking against [`Graph::backward`].

use rand::Rng;

use crate::graph::{Graph, Mode, Var};
use crate::store::{EntryKind, ParamId, ParamStore};
use crate::TensorError;

/// Magnitudes below this are treated as this value when forming a relative error, so that
/// two gradients that are both numerically zero do not produce 0/0.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Picks `count` random trainable scalars among entries whose name starts with `prefix`.
pub fn sample_scalars<R: Rng + ?Sized>(store: &ParamStore, prefix: &str, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| {
            let e = store.entry(id);
            e.kind == EntryKind::Parameter && e.name.starts_with(prefix)
        })
        .collect();
    if ids.is_empty() {
        return Vec::new();
    }
    let total: usize = ids.iter().map(|&id| store.entry(id).numel()).sum();
    (0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for &id in &ids {
                let n = store.entry(id).numel();
                if k < n {
                    return (id, k);
                }
                k -= n;
            }
            unreachable!()
        })
        .collect()
}

/// Compares analytic gradients of the scalar built by `loss` with central differences of
/// step `step` at each `(entry, index)` in `picks`. Stored gradients are cleared first and
/// left holding the analytic gradient afterwards.
pub fn check<F>(store: &mut ParamStore, mode: Mode, picks: &[(ParamId, usize)], step: f64, mut loss: F) -> Result<Vec<GradSample>, TensorError>
where
    F: FnMut(&mut Graph) -> Result<Var, TensorError>,
{
    store.zero_grad();
    {
        let mut g = Graph::new(store, mode);
        let root = loss(&mut g)?;
        g.backward(root)?;
    }
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(id, i)| {
            let gr = store.grad(id);
            if gr.is_empty() {
                0.0
            } else {
                gr[i]
            }
        })
        .collect();
    let eval_mode = Mode { grad: false, ..mode };
    let mut eval = |store: &mut ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new(store, eval_mode);
        let root = loss(&mut g)?;
        Ok(g.scalar(root))
    };
    let mut out = Vec::with_capacity(picks.len());
    for (&(id, i), &a) in picks.iter().zip(&analytic) {
        let orig = store.data(id)[i];
        store.data_mut(id)[i] = orig + step;
        let plus = eval(store)?;
        store.data_mut(id)[i] = orig - step;
        let minus = eval(store)?;
        store.data_mut(id)[i] = orig;
        out.push(GradSample { name: store.entry(id).name.clone(), index: i, analytic: a, numeric: (plus - minus) / (2.0 * step) });
    }
    Ok(out)
}
