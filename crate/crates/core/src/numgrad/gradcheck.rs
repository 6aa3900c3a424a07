//! Central finite-difference checks against the tape's reverse-mode
//! gradients. Both functions return the worst relative error, with the
//! denominator floored at 1e-6 so exact zeros do not blow up.

use super::{Gradients, ParamStore, Tape, Var};

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;

fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6)
}

/// Perturbs every entry of every `(rows, cols, values)` input of `build`.
pub fn input_grad_error(inputs: &[(usize, usize, Vec<f64>)], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |k: usize, i: usize, delta: f64| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, (r, c, v))| {
                let mut v = v.clone();
                if j == k {
                    v[i] += delta;
                }
                t.input(*r, *c, v)
            })
            .collect();
        let l = build(&mut t, &vs);
        t.scalar(l)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(r, c, v)| tape.input(*r, *c, v.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (k, (_, _, v)) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]);
        for (i, a) in analytic.iter().enumerate() {
            let numeric = (run(k, i, STEP) - run(k, i, -STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(numeric, *a));
        }
    }
    worst
}

/// Perturbs every entry of every parameter in `store`. `loss` builds the
/// scalar loss on a fresh tape from the given store.
pub fn param_grad_error(store: &ParamStore, loss: impl Fn(&ParamStore, &mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let l = loss(store, &mut tape);
    tape.backward(l).expect("scalar loss");
    let grads: Gradients = tape.param_grads(store.len());
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = loss(s, &mut t);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let zeros = vec![0.0; store.get(id).len()];
        let g = grads.get(id).unwrap_or(&zeros).to_vec();
        for (i, a) in g.iter().enumerate() {
            let orig = probe.get(id).values()[i];
            probe.get_mut(id).values_mut()[i] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(id).values_mut()[i] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(id).values_mut()[i] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * STEP), *a));
        }
    }
    worst
}
