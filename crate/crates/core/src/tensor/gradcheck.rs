//! Finite-difference verification of analytic gradients.
//!
//! `gradient_check` runs one backward pass, then perturbs randomly sampled
//! parameter elements with central differences and compares. It reports the
//! maximum relative error per parameter and overall; it never fails by
//! itself, so callers decide the tolerance.

use crate::error::Result;
use crate::params::{PId, ParamStore};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};

/// Worst observed mismatch for one parameter.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub samples: usize,
    pub max_rel: f64,
    /// Element index and (analytic, numeric) pair behind `max_rel`.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: Vec<ParamReport>,
    pub samples: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn worst_param(&self) -> Option<&ParamReport> {
        self.per_param
            .iter()
            .filter(|p| p.samples > 0)
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic parameter gradients of a scalar-valued forward pass
/// against central finite differences on `samples` randomly chosen parameter
/// elements. The forward closure must be deterministic: it is re-evaluated
/// 2x per sample with perturbed parameter values.
pub fn gradient_check(
    store: &mut ParamStore,
    mut forward: impl FnMut(&mut Tape<'_>) -> Result<Var>,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport> {
    let analytic: Vec<(PId, Vec<f64>)> = {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape)?;
        let grads = tape.backward(loss)?;
        store
            .ids()
            .map(|id| {
                let g = grads
                    .wrt_param(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
                (id, g)
            })
            .collect()
    };

    let mut report: Vec<ParamReport> = analytic
        .iter()
        .map(|(id, _)| ParamReport {
            name: store.name(*id).to_string(),
            samples: 0,
            max_rel: 0.0,
            worst: None,
        })
        .collect();

    let total_elems: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    let mut rng = Rng::new(seed);
    let mut max_rel = 0.0f64;
    let drawn = samples.min(total_elems * 4);
    for _ in 0..drawn {
        // Weight the draw by element count so large tensors are not starved.
        let mut pick = rng.below(total_elems);
        let mut slot = 0;
        while pick >= analytic[slot].1.len() {
            pick -= analytic[slot].1.len();
            slot += 1;
        }
        let (id, ref grads) = analytic[slot];

        let center = store.value(id).data()[pick];
        let eval = |store: &mut ParamStore, forward: &mut dyn FnMut(&mut Tape<'_>) -> Result<Var>, x: f64| -> Result<f64> {
            store.value_mut(id).data_mut()[pick] = x;
            let mut tape = Tape::new(store);
            let loss = forward(&mut tape)?;
            tape.value(loss).item()
        };
        let plus = eval(store, &mut forward, center + h)?;
        let minus = eval(store, &mut forward, center - h)?;
        store.value_mut(id).data_mut()[pick] = center;

        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(grads[pick], numeric);
        let r = &mut report[slot];
        r.samples += 1;
        if rel > r.max_rel || r.worst.is_none() {
            r.max_rel = rel;
            r.worst = Some((pick, grads[pick], numeric));
        }
        max_rel = max_rel.max(rel);
    }

    Ok(GradReport { per_param: report, samples: drawn, max_rel })
}
