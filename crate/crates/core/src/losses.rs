//! Training objectives: cross reconstruction, gait similarity, the three
//! identification losses, and their weighted sum.
//!
//! Squared norms are averaged over elements rather than summed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{uniform, Case, CaseGen};
use crate::model::running_means;
use crate::tensor::Scalar;

/// Per-step weight `w_t` of the incremental identification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScheme {
    /// `w_t = t^2`
    Squared,
    /// `w_t = 1`
    Uniform,
}

impl WeightScheme {
    pub fn weight(self, t: usize) -> f64 {
        match self {
            Self::Squared => (t * t) as f64,
            Self::Uniform => 1.0,
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Squared => "t2",
            Self::Uniform => "uniform",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "t2" | "t^2" | "squared" => Ok(Self::Squared),
            "1" | "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown w_t scheme {other:?} (t2, uniform)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub scheme: WeightScheme,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 0.1,
            lambda_s: 0.005,
            scheme: WeightScheme::Squared,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0 && self.lambda_s >= 0.0) || !self.lambda_r.is_finite() || !self.lambda_s.is_finite() {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Linear classifier `C` already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub weight: Var,
    pub bias: Var,
}

impl Classifier {
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        g.linear(features, self.weight, self.bias)
    }
}

/// Mean over `pairs` of the per-pixel squared error between
/// `decode(f_a[t1], f_g[t2])` and `frames[t2]`.
///
/// `f_a`, `f_g` and `frames` share their leading axis; pair entries index it.
pub fn cross_reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_a: Var,
    f_g: Var,
    frames: Var,
    pairs: &[(usize, usize)],
    mut decode: impl FnMut(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let n = g.shape(frames)[0];
    if g.shape(f_a)[0] != n || g.shape(f_g)[0] != n {
        return Err(Error::contract("cross reconstruction: features and frames disagree in length"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("cross reconstruction: empty clip"));
    }
    if pairs.iter().any(|&(a, b)| a >= n || b >= n) {
        return Err(Error::contract("cross reconstruction: pair index out of range"));
    }
    let (t1, t2): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let appearance = g.gather_rows(f_a, &t1)?;
    let pose = g.gather_rows(f_g, &t2)?;
    let targets = g.gather_rows(frames, &t2)?;
    let decoded = decode(g, appearance, pose)?;
    g.mse(decoded, targets)
}

/// Squared distance (element mean) between the temporal means of two pose
/// sequences `[n1, d]` and `[n2, d]`.
pub fn gait_similarity_loss<T: Scalar>(g: &mut Graph<T>, seq1: Var, seq2: Var) -> Result<Var> {
    if g.shape(seq1).len() != 2 || g.shape(seq1)[1..] != g.shape(seq2)[1..] {
        return Err(Error::contract(format!(
            "gait similarity: sequences {:?} and {:?}",
            g.shape(seq1),
            g.shape(seq2)
        )));
    }
    let m1 = g.mean_rows(seq1);
    let m2 = g.mean_rows(seq2);
    let diff = g.sub(m1, m2)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

fn check_sequence<T: Scalar>(g: &Graph<T>, h_seq: &[Var], labels: &[usize]) -> Result<()> {
    let Some(&first) = h_seq.first() else {
        return Err(Error::contract("identification loss: empty sequence"));
    };
    if g.shape(first).len() != 2 || g.shape(first)[0] != labels.len() {
        return Err(Error::contract(format!(
            "identification loss: outputs {:?} for {} labels",
            g.shape(first),
            labels.len()
        )));
    }
    Ok(())
}

/// Cross-entropy of the classifier on the final output `h_n`, averaged over
/// the batch rows.
pub fn id_single_loss<T: Scalar>(g: &mut Graph<T>, h_seq: &[Var], labels: &[usize], cls: &Classifier) -> Result<Var> {
    check_sequence(g, h_seq, labels)?;
    let logits = cls.logits(g, *h_seq.last().unwrap())?;
    g.softmax_cross_entropy(logits, labels)
}

/// Cross-entropy on the mean of all outputs.
pub fn id_avg_loss<T: Scalar>(g: &mut Graph<T>, h_seq: &[Var], labels: &[usize], cls: &Classifier) -> Result<Var> {
    check_sequence(g, h_seq, labels)?;
    let mean = *running_means(g, h_seq)?.last().unwrap();
    let logits = cls.logits(g, mean)?;
    g.softmax_cross_entropy(logits, labels)
}

/// `(1/n) sum_t w_t CE(C(f_gait^t))` over the running means of the outputs.
pub fn id_inc_avg_loss<T: Scalar>(
    g: &mut Graph<T>,
    h_seq: &[Var],
    labels: &[usize],
    cls: &Classifier,
    scheme: WeightScheme,
) -> Result<Var> {
    check_sequence(g, h_seq, labels)?;
    let n = h_seq.len();
    let means = running_means(g, h_seq)?;
    let mut total: Option<Var> = None;
    for (i, f) in means.into_iter().enumerate() {
        let logits = cls.logits(g, f)?;
        let ce = g.softmax_cross_entropy(logits, labels)?;
        let term = g.scale(ce, T::from_f64(scheme.weight(i + 1) / n as f64));
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Loss terms of one training step. A missing term contributes nothing.
#[derive(Clone, Copy, Debug)]
pub struct Components {
    pub id: Var,
    pub xrecon: Option<Var>,
    pub gaitsim: Option<Var>,
}

/// `id + lambda_r * xrecon + lambda_s * gaitsim`, refusing non-finite terms.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, parts: &Components, w: &LossWeights, step: usize) -> Result<Var> {
    let named = [("id", Some(parts.id)), ("xrecon", parts.xrecon), ("gaitsim", parts.gaitsim)];
    for (name, var) in named {
        if let Some(v) = var {
            if g.value(v).numel() != 1 {
                return Err(Error::contract(format!("{name} loss is not a scalar")));
            }
            if !g.value(v).item().is_finite() {
                return Err(Error::NonFinite {
                    component: name.to_string(),
                    step,
                });
            }
        }
    }
    let mut total = parts.id;
    if let Some(x) = parts.xrecon {
        let s = g.scale(x, T::from_f64(w.lambda_r));
        total = g.add(total, s)?;
    }
    if let Some(s) = parts.gaitsim {
        let s = g.scale(s, T::from_f64(w.lambda_s));
        total = g.add(total, s)?;
    }
    Ok(total)
}

// ---- finite-difference cases ---------------------------------------------

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

fn xrecon_case(rng: &mut ChaCha8Rng) -> Case {
    let n = 4;
    let pairs: Vec<(usize, usize)> = (0..4).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    Case {
        inputs: vec![
            uniform(rng, &[n, 3], -1.0, 1.0),
            uniform(rng, &[n, 2], -1.0, 1.0),
            uniform(rng, &[n, 1, 2, 2], 0.0, 1.0),
            uniform(rng, &[5, 4], -1.0, 1.0),
            uniform(rng, &[4], -0.5, 0.5),
        ],
        build: Box::new(move |g, v| {
            let (w, b) = (v[3], v[4]);
            cross_reconstruction_loss(g, v[0], v[1], v[2], &pairs, |g, a, p| {
                let z = g.concat_cols(a, p)?;
                let y = g.linear(z, w, b)?;
                let y = g.sigmoid(y);
                let m = g.shape(y)[0];
                g.reshape(y, &[m, 1, 2, 2])
            })
        }),
        max_elems: None,
    }
}

fn gaitsim_case(rng: &mut ChaCha8Rng) -> Case {
    Case {
        inputs: vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[5, 4], -1.0, 1.0)],
        build: Box::new(|g, v| gait_similarity_loss(g, v[0], v[1])),
        max_elems: None,
    }
}

type IdLossFn = fn(&mut Graph<f64>, &[Var], &[usize], &Classifier) -> Result<Var>;

fn id_case(rng: &mut ChaCha8Rng, loss: IdLossFn) -> Case {
    let (steps, batch, hidden, k) = (3, 2, 4, 5);
    let mut inputs: Vec<_> = (0..steps).map(|_| uniform(rng, &[batch, hidden], -1.0, 1.0)).collect();
    inputs.push(uniform(rng, &[hidden, k], -1.0, 1.0));
    inputs.push(uniform(rng, &[k], -0.5, 0.5));
    let y = labels(rng, batch, k);
    Case {
        inputs,
        build: Box::new(move |g, v| {
            let cls = Classifier {
                weight: v[steps],
                bias: v[steps + 1],
            };
            loss(g, &v[..steps], &y, &cls)
        }),
        max_elems: None,
    }
}

fn id_single_case(rng: &mut ChaCha8Rng) -> Case {
    id_case(rng, id_single_loss)
}

fn id_avg_case(rng: &mut ChaCha8Rng) -> Case {
    id_case(rng, id_avg_loss)
}

fn id_inc_avg_case(rng: &mut ChaCha8Rng) -> Case {
    id_case(rng, |g, h, y, c| id_inc_avg_loss(g, h, y, c, WeightScheme::Squared))
}

fn total_case(rng: &mut ChaCha8Rng) -> Case {
    Case {
        inputs: vec![
            uniform(rng, &[1], 0.0, 3.0),
            uniform(rng, &[1], 0.0, 1.0),
            uniform(rng, &[1], 0.0, 1.0),
        ],
        build: Box::new(|g, v| {
            let parts = Components {
                id: v[0],
                xrecon: Some(v[1]),
                gaitsim: Some(v[2]),
            };
            total_loss(g, &parts, &LossWeights::default(), 0)
        }),
        max_elems: None,
    }
}

/// Loss checks appended to the primitive registry.
pub const GRADCHECK_CASES: &[(&str, CaseGen)] = &[
    ("cross_reconstruction_loss", xrecon_case),
    ("gait_similarity_loss", gaitsim_case),
    ("id_single_loss", id_single_case),
    ("id_avg_loss", id_avg_case),
    ("id_inc_avg_loss", id_inc_avg_case),
    ("total_loss", total_case),
];
