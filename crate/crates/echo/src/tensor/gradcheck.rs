//! Finite-difference gradient verification, always in `f64`.
//!
//! Every differentiable building block is checked against central differences
//! by the test suites; this module holds the shared machinery.

use super::{ParamStore, Tape, Tensor, Var};

/// Relative error with a small absolute floor so exact zeros compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Maximum relative error between tape gradients and central differences for
/// a scalar-valued function of the given inputs. Checks at most 64 coordinates
/// per input (deterministically strided), which keeps large tensors cheap.
pub fn check_grad<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &vars);
    assert_eq!(tape.value(root).len(), 1, "gradcheck root must be scalar");
    tape.backward(root);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let r = f(&mut t, &vs);
        t.value(r).item()
    };

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let n = x.len();
        let step = (n / 64).max(1);
        for j in (0..n).step_by(step) {
            let h = 1e-5 * x.data()[j].abs().max(1.0);
            let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
            let mut hi = x.clone();
            hi.data_mut()[j] += h;
            xs[i] = hi;
            let fp = eval(&xs);
            let mut lo = x.clone();
            lo.data_mut()[j] -= h;
            xs[i] = lo;
            let fm = eval(&xs);
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], fd));
        }
    }
    worst
}

/// Like [`check_grad`] but differentiates a loss with respect to every
/// parameter registered in `store`. Used to validate whole layers and models.
pub fn check_grad_params<F>(store: &mut ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store);
    assert_eq!(tape.value(root).len(), 1, "gradcheck root must be scalar");
    tape.backward(root);
    let grads = tape.param_grads();

    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let base = store.get(id).clone();
        let n = base.len();
        let step = (n / 64).max(1);
        for j in (0..n).step_by(step) {
            let h = 1e-5 * base.data()[j].abs().max(1.0);
            let mut hi = base.clone();
            hi.data_mut()[j] += h;
            store.set(id, hi);
            let fp = {
                let mut t = Tape::new();
                let r = f(&mut t, store);
                t.value(r).item()
            };
            let mut lo = base.clone();
            lo.data_mut()[j] -= h;
            store.set(id, lo);
            let fm = {
                let mut t = Tape::new();
                let r = f(&mut t, store);
                t.value(r).item()
            };
            store.set(id, base.clone());
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], fd));
        }
    }
    worst
}

/// Convert an `f32` parameter store to `f64` with the same names and shapes.
/// Gradient suites run the production architecture at double precision.
pub fn store_to_f64(src: &ParamStore<f32>) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (_, name, t) in src.iter() {
        out.register(name, Tensor::from_vec(t.shape(), t.to_f64_vec()));
    }
    out
}
