//! Central finite-difference verification of analytic gradients.
//!
//! Each registered case builds a function of a few input tensors on a fresh
//! `f64` graph. The analytic gradient of `sum(output * R)` for a random
//! projection `R` is compared element by element against
//! `(f(x + h) - f(x - h)) / 2h`, evaluated with forward passes only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, LstmCell, LstmState, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Denominator floor so that gradients that are zero up to rounding do not
/// produce spurious relative errors.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable function instance with concrete inputs.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
    /// Cap on perturbed elements per input; `None` checks every element.
    pub max_elems: Option<usize>,
}

pub type CaseGen = fn(&mut ChaCha8Rng) -> Case;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: scale the analytic gradient of the named check by 1.1.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0x6a17,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = project(&mut g, out, weights)?;
    Ok(g.value(loss).item())
}

/// Returns `(max relative error, elements checked)` for one case.
pub fn check_case(
    case: &Case,
    rng: &mut ChaCha8Rng,
    step: f64,
    corrupt: bool,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let weights = Tensor::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0));
    let loss = project(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let numel = inputs[i].numel();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let elems: Vec<usize> = match case.max_elems {
            Some(cap) if cap < numel => (0..cap).map(|_| rng.gen_range(0..numel)).collect(),
            _ => (0..numel).collect(),
        };
        for j in elems {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + step;
            let plus = evaluate(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = orig - step;
            let minus = evaluate(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let mut a = analytic.data()[j];
            if corrupt {
                a *= 1.1;
            }
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Runs `instances` random instances of one registered check.
pub fn run_check(name: &str, gen: CaseGen, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fxhash(name));
    let corrupt = opts.corrupt.as_deref() == Some(name);
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for _ in 0..opts.instances {
        let case = gen(&mut rng);
        let (err, n) = check_case(&case, &mut rng, opts.step, corrupt)?;
        worst = worst.max(err);
        elements += n;
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances: opts.instances,
        elements,
        max_rel_err: worst,
        passed: worst < opts.tolerance,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

// ---- random inputs -----------------------------------------------------

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(inputs: Vec<Tensor<f64>>, build: BuildFn) -> Case {
    Case {
        inputs,
        build,
        max_elems: None,
    }
}

// ---- primitive registry -----------------------------------------------

fn conv2d_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![
            uniform(rng, &[1, 2, 6, 6], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
    )
}

fn conv2d_transpose_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![
            uniform(rng, &[1, 3, 3, 3], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[2], -1.0, 1.0),
        ],
        Box::new(|g, v| g.conv2d_transpose(v[0], v[1], v[2], 2, 1, 1)),
    )
}

fn batch_norm_train_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![
            uniform(rng, &[4, 3, 2, 2], -2.0, 2.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -1.0, 1.0),
        ],
        Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
    )
}

fn batch_norm_eval_case(rng: &mut ChaCha8Rng) -> Case {
    let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
    case(
        vec![
            uniform(rng, &[2, 3, 2, 2], -2.0, 2.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -1.0, 1.0),
        ],
        Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    )
}

fn leaky_relu_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![away_from_zero(rng, &[3, 4])],
        Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))),
    )
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[3, 4], -4.0, 4.0)],
        Box::new(|g, v| Ok(g.sigmoid(v[0]))),
    )
}

fn tanh_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[3, 4], -3.0, 3.0)],
        Box::new(|g, v| Ok(g.tanh(v[0]))),
    )
}

fn linear_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[4, 5], -1.0, 1.0),
            uniform(rng, &[5], -1.0, 1.0),
        ],
        Box::new(|g, v| g.linear(v[0], v[1], v[2])),
    )
}

fn lstm_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, d, h) = (2, 3, 4);
    case(
        vec![
            uniform(rng, &[3, n, d], -1.0, 1.0),
            uniform(rng, &[n, h], -0.5, 0.5),
            uniform(rng, &[n, h], -0.5, 0.5),
            uniform(rng, &[d + h, 4 * h], -0.7, 0.7),
            uniform(rng, &[4 * h], -0.5, 0.5),
        ],
        Box::new(move |g, v| {
            let cell = LstmCell {
                weight: v[3],
                bias: v[4],
                hidden: h,
            };
            let mut state = LstmState { h: v[1], c: v[2] };
            for t in 0..3 {
                let xt = g.slice_rows(v[0], t, 1)?;
                let xt = g.reshape(xt, &[n, d])?;
                state = g.lstm_step(xt, state, &cell)?;
            }
            g.concat_cols(state.h, state.c)
        }),
    )
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Case {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    case(
        vec![uniform(rng, &[4, 5], -3.0, 3.0)],
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
    )
}

fn add_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| g.add(v[0], v[1])),
    )
}

fn sub_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| g.sub(v[0], v[1])),
    )
}

fn mul_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| g.mul(v[0], v[1])),
    )
}

fn scale_case(rng: &mut ChaCha8Rng) -> Case {
    let c = rng.gen_range(-2.0..2.0);
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(move |g, v| Ok(g.scale(v[0], c))),
    )
}

fn square_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| Ok(g.square(v[0]))),
    )
}

fn sum_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| Ok(g.sum(v[0]))),
    )
}

fn mean_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| Ok(g.mean(v[0]))),
    )
}

fn reshape_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 6], -1.0, 1.0)],
        Box::new(|g, v| {
            let r = g.reshape(v[0], &[3, 4])?;
            let sq = g.square(r);
            Ok(sq)
        }),
    )
}

fn slice_cols_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[3, 5], -1.0, 1.0)],
        Box::new(|g, v| g.slice_cols(v[0], 1, 3)),
    )
}

fn concat_cols_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
        Box::new(|g, v| g.concat_cols(v[0], v[1])),
    )
}

fn slice_rows_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[4, 2, 3], -1.0, 1.0)],
        Box::new(|g, v| g.slice_rows(v[0], 1, 2)),
    )
}

fn gather_rows_case(rng: &mut ChaCha8Rng) -> Case {
    let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    case(
        vec![uniform(rng, &[4, 3], -1.0, 1.0)],
        Box::new(move |g, v| g.gather_rows(v[0], &idx)),
    )
}

fn mean_rows_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[4, 3], -1.0, 1.0)],
        Box::new(|g, v| Ok(g.mean_rows(v[0]))),
    )
}

fn mse_case(rng: &mut ChaCha8Rng) -> Case {
    case(
        vec![uniform(rng, &[2, 3, 2], 0.0, 1.0), uniform(rng, &[2, 3, 2], 0.0, 1.0)],
        Box::new(|g, v| g.mse(v[0], v[1])),
    )
}

/// Every primitive op with a registered check, in report order.
pub const PRIMITIVES: &[(&str, CaseGen)] = &[
    ("conv2d", conv2d_case),
    ("conv2d_transpose", conv2d_transpose_case),
    ("batch_norm_train", batch_norm_train_case),
    ("batch_norm_eval", batch_norm_eval_case),
    ("leaky_relu", leaky_relu_case),
    ("sigmoid", sigmoid_case),
    ("tanh", tanh_case),
    ("linear", linear_case),
    ("lstm_step_x3", lstm_case),
    ("softmax_cross_entropy", cross_entropy_case),
    ("add", add_case),
    ("sub", sub_case),
    ("mul", mul_case),
    ("scale", scale_case),
    ("square", square_case),
    ("sum", sum_case),
    ("mean", mean_case),
    ("reshape", reshape_case),
    ("slice_cols", slice_cols_case),
    ("concat_cols", concat_cols_case),
    ("slice_rows", slice_rows_case),
    ("gather_rows", gather_rows_case),
    ("mean_rows", mean_rows_case),
    ("mse", mse_case),
];

/// All registered checks: primitives followed by the training losses.
pub fn registry() -> Vec<(&'static str, CaseGen)> {
    let mut all = PRIMITIVES.to_vec();
    all.extend_from_slice(crate::losses::GRADCHECK_CASES);
    all
}

/// Runs every registered check.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    registry()
        .into_iter()
        .map(|(name, gen)| run_check(name, gen, opts))
        .collect()
}
