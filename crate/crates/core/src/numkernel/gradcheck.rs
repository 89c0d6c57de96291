//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    Activation, AttentionHead, EncoderBlock, Glu, GraphConv, Gru, GruCell, LayerNorm, Linear, Mlp, SelectiveScan,
};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::KernelError;

/// Denominator floor for the relative error `|a − n| / max(|a|, |n|, floor)`.
/// Keeps entries whose true gradient is ~0 from dividing roundoff by ~0.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `eps`, for every entry of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, KernelError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, KernelError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        t.check_finite()?;
        Ok(t.scalar(o))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but also perturbs every parameter in `store`, so
/// a layer is checked with respect to its inputs and its weights.
pub fn check_layer_gradients<F>(
    f: F,
    store: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var, KernelError>,
{
    let mut report = check_gradients(|t, v| f(t, store, v), inputs, eps)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads, store.len());

    let eval = |s: &ParamStore| -> Result<f64, KernelError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, s, &vs)?;
        t.check_finite()?;
        Ok(t.scalar(o))
    };
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let g = analytic.grads[id.index()].clone();
        for j in 0..store.value(id).len() {
            let x0 = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = x0 + eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[j] = x0 - eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = g.as_ref().map_or(0.0, |v| v[j]);
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Worst result of one layer over all draws.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: String,
    pub report: GradCheckReport,
}

type LayerFn = Box<dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var, KernelError>>;
type LayerCase = (String, Box<dyn Fn(&mut ParamStore, &mut ChaCha8Rng) -> (Vec<Tensor>, LayerFn)>);

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn boxed<F>(f: F) -> LayerFn
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var, KernelError> + 'static,
{
    Box::new(f)
}

fn layer_cases() -> Vec<LayerCase> {
    let mut cases: Vec<LayerCase> = vec![
        (
            "linear".into(),
            Box::new(|s, r| {
                let l = Linear::new(s, r, "l", 3, 4).unwrap();
                (vec![uniform(r, 2, 3)], boxed(move |t, s, v| l.forward(t, s, v[0])))
            }),
        ),
        (
            "glu".into(),
            Box::new(|s, r| {
                let g = Glu::new(s, r, "g", 3, 4).unwrap();
                (vec![uniform(r, 2, 3)], boxed(move |t, s, v| g.forward(t, s, v[0])))
            }),
        ),
        (
            "layer_norm".into(),
            Box::new(|s, r| {
                let l = LayerNorm::new(s, "ln", 5).unwrap();
                (vec![uniform(r, 3, 5)], boxed(move |t, s, v| l.forward(t, s, v[0])))
            }),
        ),
        (
            "gru_cell".into(),
            Box::new(|s, r| {
                let c = GruCell::new(s, r, "c", 3, 4).unwrap();
                (
                    vec![uniform(r, 2, 3), uniform(r, 2, 4)],
                    boxed(move |t, s, v| c.forward(t, s, v[0], v[1])),
                )
            }),
        ),
        (
            "gru".into(),
            Box::new(|s, r| {
                let g = Gru::new(s, r, "g", 3, 4, 2).unwrap();
                ((0..4).map(|_| uniform(r, 2, 3)).collect(), boxed(move |t, s, v| g.forward(t, s, v)))
            }),
        ),
        (
            "attention_head".into(),
            Box::new(|s, r| {
                let h = AttentionHead::new(s, r, "a", 5, 3).unwrap();
                let mask = Tensor::matrix(2, 4, vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
                (
                    vec![uniform(r, 2, 3), uniform(r, 4, 3), uniform(r, 4, 3)],
                    boxed(move |t, s, v| h.forward(t, s, v[0], v[1], v[2], 3, Some(&mask))),
                )
            }),
        ),
        (
            "selective_scan".into(),
            Box::new(|s, r| {
                let sc = SelectiveScan::new(s, r, "s", 3, 2).unwrap();
                (
                    (0..4).map(|_| uniform(r, 2, 3)).collect(),
                    boxed(move |t, s, v| {
                        let ys = sc.forward(t, s, v)?;
                        t.concat_cols(&ys)
                    }),
                )
            }),
        ),
        (
            "encoder_block".into(),
            Box::new(|s, r| {
                let b = EncoderBlock::new(s, r, "b", 4).unwrap();
                (vec![uniform(r, 3, 4)], boxed(move |t, s, v| b.forward(t, s, v[0])))
            }),
        ),
        (
            "softmax".into(),
            Box::new(|_, r| (vec![uniform(r, 2, 4)], boxed(|t, _, v| t.softmax_rows(v[0], None)))),
        ),
        (
            "log_softmax".into(),
            Box::new(|_, r| (vec![uniform(r, 2, 4)], boxed(|t, _, v| Ok(t.log_softmax_rows(v[0]))))),
        ),
    ];
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::Gelu,
        Activation::Tanh,
        Activation::Sigmoid,
    ] {
        cases.push((
            format!("mlp/{act:?}").to_lowercase(),
            Box::new(move |s, r| {
                let m = Mlp::new(s, r, "m", &[3, 5, 2], act, act).unwrap();
                (vec![uniform(r, 2, 3)], boxed(move |t, s, v| m.forward(t, s, v[0])))
            }),
        ));
    }
    for act in [Activation::Relu, Activation::Identity] {
        cases.push((
            format!("graph_conv/{act:?}").to_lowercase(),
            Box::new(move |s, r| {
                let g = GraphConv::new(s, r, "g", 3, 4, act).unwrap();
                let adj = Tensor::matrix(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
                (vec![uniform(r, 3, 3)], boxed(move |t, s, v| g.forward(t, s, v[0], &adj)))
            }),
        ));
    }
    cases
}

/// Checks every layer against central differences with respect to inputs
/// and parameters over `draws` random draws. Parameters are jittered off
/// their structured init first. With `detach_output` set, each layer's
/// output is replaced by a constant copy of itself, a deliberately broken
/// backward pass that the check must catch.
pub fn layer_suite(draws: u64, eps: f64, detach_output: bool) -> Result<Vec<LayerCheck>, KernelError> {
    let mut out = Vec::new();
    for (name, build) in layer_cases() {
        let mut worst = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
        };
        for draw in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
            let mut store = ParamStore::new();
            let (inputs, f) = build(&mut store, &mut rng);
            let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
            for id in ids {
                for v in store.value_mut(id).data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let (rows, cols) = {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                let y = f(&mut t, &store, &vs)?;
                t.dims(y)
            };
            // random projection so no output entry is invisible to the check
            let proj = uniform(&mut rng, rows, cols);
            let r = check_layer_gradients(
                |t, s, v| {
                    let mut y = f(t, s, v)?;
                    if detach_output {
                        y = t.constant(t.value(y).clone());
                    }
                    let w = t.constant(proj.clone());
                    let p = t.mul(y, w)?;
                    Ok(t.sum(p))
                },
                &store,
                &inputs,
                eps,
            )?;
            worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
            worst.checked += r.checked;
        }
        out.push(LayerCheck { layer: name, report: worst });
    }
    Ok(out)
}
