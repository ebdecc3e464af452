//! Finite-difference gradient checking.
//!
//! Always runs at `f64`: the comparison needs more headroom than f32 rounding
//! leaves when the central-difference step is 1e-4.

use super::{Tape, TensorId};

/// A parameter fed into a checked function: values plus shape.
#[derive(Debug, Clone)]
pub struct CheckParam {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckParam {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        CheckParam { data, shape }
    }
}

/// Compare analytic and central-difference gradients of `build` with respect
/// to every entry of every parameter.
///
/// `build` must be deterministic: it is re-evaluated 2x per parameter entry.
/// Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<B>(build: B, params: &[CheckParam], eps: f64) -> f64
where
    B: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    assert!(eps > 0.0, "grad_check: eps must be positive");

    let run = |values: &[Vec<f64>]| -> (Tape<f64>, Vec<TensorId>, TensorId) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = values
            .iter()
            .zip(params)
            .map(|(v, p)| tape.leaf(v.clone(), p.shape.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids);
        (tape, ids, loss)
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();

    // Analytic pass.
    let (mut tape, ids, loss) = run(&base);
    assert_eq!(
        tape.tensor(loss).numel(),
        1,
        "grad_check: loss must be scalar"
    );
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();

    // Numeric passes.
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.data.len() {
            let mut plus = base.clone();
            plus[pi][i] += eps;
            let (tp, _, lp) = run(&plus);
            let fp = tp.value(lp);

            let mut minus = base.clone();
            minus[pi][i] -= eps;
            let (tm, _, lm) = run(&minus);
            let fm = tm.value(lm);

            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[pi][i] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
