//! Central finite-difference gradient checking.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Upper bound on checked entries per tensor; larger tensors are strided.
    pub max_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-4,
            max_per_param: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    /// Compares taped gradients of `f` with central differences for every
    /// parameter in `params`. `f` must read parameters via `tape.param`.
    pub fn run<Fun>(&self, params: &ParamStore<f64>, f: Fun) -> Result<GradCheckReport>
    where
        Fun: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        let grads = tape.backward(loss)?;

        let eval = |p: &ParamStore<f64>| -> Result<f64> {
            let mut t = Tape::inference();
            let l = f(&mut t, p)?;
            Ok(t.value(l).item())
        };

        let mut report = GradCheckReport::default();
        let mut probe = params.clone();
        for (name, value) in params.iter() {
            let n = value.len();
            let stride = n.div_ceil(self.max_per_param.max(1)).max(1);
            for i in (0..n).step_by(stride) {
                let orig = value.data()[i];
                probe.get_mut(name).expect("cloned").data_mut()[i] = orig + self.eps;
                let up = eval(&probe)?;
                probe.get_mut(name).expect("cloned").data_mut()[i] = orig - self.eps;
                let down = eval(&probe)?;
                probe.get_mut(name).expect("cloned").data_mut()[i] = orig;

                let numeric = (up - down) / (2.0 * self.eps);
                let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
                let err = relative_error(analytic, numeric, self.floor);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    if err >= report.max_rel_err {
                        report.worst = Some((name.clone(), i));
                    }
                }
            }
        }
        Ok(report)
    }
}

type Case = (
    &'static str,
    ParamStore<f64>,
    Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>,
);

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v);
    }
    s
}

/// Reduces `out` to a scalar through a fixed random weighting so that every
/// output entry contributes a distinct sensitivity.
fn project(t: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(out, wv)?;
    Ok(t.sum(p))
}

fn p(t: &mut Tape<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    t.param(name, s.get(name).expect("param"))
}

fn unary(name: &'static str, shape: &[usize], out_shape: &[usize], rng: &mut (impl Rng + ?Sized), f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Case {
    let w = Tensor::randn(out_shape.to_vec(), 1.0, rng);
    let a = Tensor::randn(shape.to_vec(), 1.0, rng);
    (
        name,
        store(vec![("a", a)]),
        Box::new(move |t, s| {
            let a = p(t, s, "a");
            let y = f(t, a)?;
            project(t, y, &w)
        }),
    )
}

fn binary(
    name: &'static str,
    sa: &[usize],
    sb: &[usize],
    out_shape: &[usize],
    rng: &mut (impl Rng + ?Sized),
    f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Case {
    let w = Tensor::randn(out_shape.to_vec(), 1.0, rng);
    let a = Tensor::randn(sa.to_vec(), 1.0, rng);
    let b = Tensor::randn(sb.to_vec(), 1.0, rng);
    (
        name,
        store(vec![("a", a), ("b", b)]),
        Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a"), p(t, s, "b"));
            let y = f(t, a, b)?;
            project(t, y, &w)
        }),
    )
}

/// Builds one small random problem per differentiable operation.
fn cases<R: Rng>(rng: &mut R) -> Vec<Case> {
    let mut out: Vec<Case> = vec![
        binary("matmul", &[3, 4], &[4, 5], &[3, 5], rng, |t, a, b| t.matmul(a, b)),
        binary("matmul_nt", &[3, 4], &[5, 4], &[3, 5], rng, |t, a, b| t.matmul_nt(a, b)),
        binary("add", &[3, 4], &[3, 4], &[3, 4], rng, |t, a, b| t.add(a, b)),
        binary("sub", &[3, 4], &[3, 4], &[3, 4], rng, |t, a, b| t.sub(a, b)),
        binary("mul", &[3, 4], &[3, 4], &[3, 4], rng, |t, a, b| t.mul(a, b)),
        binary("add_row", &[3, 4], &[4], &[3, 4], rng, |t, a, b| t.add_row(a, b)),
        binary("concat_rows", &[2, 3], &[3, 3], &[5, 3], rng, |t, a, b| t.concat_rows(&[a, b])),
        binary("concat_cols", &[3, 2], &[3, 3], &[3, 5], rng, |t, a, b| t.concat_cols(&[a, b])),
        unary("scale", &[3, 4], &[3, 4], rng, |t, a| Ok(t.scale(a, -1.7))),
        unary("exp", &[3, 4], &[3, 4], rng, |t, a| Ok(t.exp(a))),
        unary("gelu", &[3, 4], &[3, 4], rng, |t, a| Ok(t.gelu(a))),
        unary("softmax_rows", &[3, 5], &[3, 5], rng, |t, a| Ok(t.softmax_rows(a))),
        unary("rotary", &[4, 6], &[4, 6], rng, |t, a| t.rotary(a, &[0.0, 1.0, 1.0, 7.0], 10000.0)),
        unary("gather_rows", &[4, 3], &[5, 3], rng, |t, a| t.gather_rows(a, &[2, 0, 2, 3, 1])),
        unary("slice_cols", &[3, 5], &[3, 2], rng, |t, a| t.slice_cols(a, 1, 2)),
        unary("shift_rows", &[5, 3], &[5, 3], rng, |t, a| Ok(t.shift_rows(a, 2))),
        unary("reshape", &[3, 4], &[2, 6], rng, |t, a| t.reshape(a, &[2, 6])),
        unary("group_mean_rows", &[6, 3], &[2, 3], rng, |t, a| t.group_mean_rows(a, 3)),
    ];

    let w = Tensor::randn(vec![4, 6], 1.0, rng);
    let lnp = store(vec![
        ("x", Tensor::randn(vec![4, 6], 1.0, rng)),
        ("g", Tensor::randn(vec![6], 1.0, rng)),
        ("b", Tensor::randn(vec![6], 1.0, rng)),
    ]);
    out.push((
        "layer_norm",
        lnp,
        Box::new(move |t, s| {
            let (x, g, b) = (p(t, s, "x"), p(t, s, "g"), p(t, s, "b"));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            project(t, y, &w)
        }),
    ));
    out.push((
        "sum",
        store(vec![("a", Tensor::randn(vec![3, 4], 1.0, rng))]),
        Box::new(|t, s| {
            let a = p(t, s, "a");
            let e = t.exp(a);
            Ok(t.sum(e))
        }),
    ));
    out.push((
        "mean",
        store(vec![("a", Tensor::randn(vec![3, 4], 1.0, rng))]),
        Box::new(|t, s| {
            let a = p(t, s, "a");
            let e = t.exp(a);
            Ok(t.mean(e))
        }),
    ));

    let counts = Tensor::from_f64([3, 4], &[0., 1., 2., 0., 5., 3., 1., 0., 0., 0., 4., 2.]).expect("shape");
    let mask = Tensor::from_f64([3, 4], &[1., 1., 1., 0., 1., 1., 1., 1., 1., 0., 1., 1.]).expect("shape");
    let m2 = mask.clone();
    out.push((
        "poisson_nll",
        store(vec![("eta", Tensor::randn(vec![3, 4], 1.0, rng))]),
        Box::new(move |t, s| {
            let e = p(t, s, "eta");
            t.poisson_nll(e, &counts, &m2)
        }),
    ));
    let target = Tensor::randn(vec![3, 4], 1.0, rng);
    out.push((
        "mse",
        store(vec![("x", Tensor::randn(vec![3, 4], 1.0, rng))]),
        Box::new(move |t, s| {
            let x = p(t, s, "x");
            t.mse(x, &target, &mask)
        }),
    ));
    out.push((
        "cosine_alignment",
        store(vec![
            ("s", Tensor::randn(vec![4, 5], 1.0, rng)),
            ("t", Tensor::randn(vec![4, 5], 1.0, rng)),
        ]),
        Box::new(|t, st| {
            let (a, b) = (p(t, st, "s"), p(t, st, "t"));
            t.cosine_alignment(a, b)
        }),
    ));
    out
}

/// Finite-difference check of every differentiable tape operation on random
/// inputs, returning one report per operation.
pub fn op_suite<R: Rng>(rng: &mut R) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let checker = GradCheck::default();
    cases(rng)
        .into_iter()
        .map(|(name, params, f)| Ok((name, checker.run(&params, f)?)))
        .collect()
}
