//! Encoder/decoder with an appearance/pose feature split, the stacked LSTM
//! aggregator, and the identity classifier.
//!
//! Canonical parameter names (`i` runs over layers):
//!
//! ```text
//! enc.conv{0..3}.weight [C_i, C_{i-1}, 3, 3]   enc.conv{i}.bias [C_i]
//! enc.bn{0..3}.{gamma,beta,running_mean,running_var} [C_i]
//! enc.head.weight [8*C_3, d_a+d_g]             enc.head.bias [d_a+d_g]
//! dec.fc.weight [d_a+d_g, 8*C_3]               dec.fc.bias [8*C_3]
//! dec.bn0.*  [C_3]
//! dec.deconv{0..2}.weight [C_{3-i}, C_{2-i}, 3, 3], dec.bn{1..3}.*
//! dec.deconv3.weight [C_0, 3, 3, 3]            dec.deconv3.bias [3]
//! lstm.l{j}.weight [in_j + H, 4H]              lstm.l{j}.bias [4H]
//! cls.weight [H, K]                            cls.bias [K]
//! ```
//!
//! Batches of sequences are laid out time-major: row `t * B + b`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, LstmCell, LstmState, Var};
use crate::error::{Error, Result};
use crate::frame::{Frame, CHANNELS, FRAME_LEN, HEIGHT, WIDTH};
use crate::losses::Classifier;
use crate::params::{is_buffer_name, ParamStore};
use crate::ppm::RgbImage;
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Spatial size after four stride-2 layers.
const CODE_H: usize = HEIGHT / 16;
const CODE_W: usize = WIDTH / 16;
const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_g: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
    pub lstm_layers: usize,
    /// Number of training subjects `K`.
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_a: 128,
            d_g: 64,
            channels: [32, 64, 128, 256],
            hidden: 256,
            lstm_layers: 3,
            n_classes: 10,
        }
    }
}

enum Init {
    Uniform(f64),
    Const(f64),
    /// LSTM bias: uniform with the forget block pinned.
    LstmBias(f64, usize),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_g == 0 || self.hidden == 0 || self.lstm_layers == 0 || self.channels.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("the classifier needs at least 2 subjects".into()));
        }
        Ok(())
    }

    fn code_len(&self) -> usize {
        self.channels[3] * CODE_H * CODE_W
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let bound = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let bn = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: String, c: usize| {
            out.push((format!("{prefix}.gamma"), vec![c], Init::Const(1.0)));
            out.push((format!("{prefix}.beta"), vec![c], Init::Const(0.0)));
            out.push((format!("{prefix}.running_mean"), vec![c], Init::Const(0.0)));
            out.push((format!("{prefix}.running_var"), vec![c], Init::Const(1.0)));
        };
        let ch = self.channels;
        let kk = KERNEL * KERNEL;
        let mut prev = CHANNELS;
        for (i, &c) in ch.iter().enumerate() {
            out.push((format!("enc.conv{i}.weight"), vec![c, prev, KERNEL, KERNEL], bound(prev * kk)));
            out.push((format!("enc.conv{i}.bias"), vec![c], bound(prev * kk)));
            bn(&mut out, format!("enc.bn{i}"), c);
            prev = c;
        }
        let feat = self.d_a + self.d_g;
        let code = self.code_len();
        out.push(("enc.head.weight".into(), vec![code, feat], bound(code)));
        out.push(("enc.head.bias".into(), vec![feat], bound(code)));
        out.push(("dec.fc.weight".into(), vec![feat, code], bound(feat)));
        out.push(("dec.fc.bias".into(), vec![code], bound(feat)));
        bn(&mut out, "dec.bn0".into(), ch[3]);
        for i in 0..4 {
            let cin = ch[3 - i];
            let cout = if i < 3 { ch[2 - i] } else { CHANNELS };
            out.push((format!("dec.deconv{i}.weight"), vec![cin, cout, KERNEL, KERNEL], bound(cout * kk)));
            out.push((format!("dec.deconv{i}.bias"), vec![cout], bound(cout * kk)));
            if i < 3 {
                bn(&mut out, format!("dec.bn{}", i + 1), cout);
            }
        }
        let h = self.hidden;
        for j in 0..self.lstm_layers {
            let input = if j == 0 { self.d_g } else { h };
            let b = 1.0 / (h as f64).sqrt();
            out.push((format!("lstm.l{j}.weight"), vec![input + h, 4 * h], Init::Uniform(b)));
            out.push((format!("lstm.l{j}.bias"), vec![4 * h], Init::LstmBias(b, h)));
        }
        out.push(("cls.weight".into(), vec![h, self.n_classes], bound(h)));
        out.push(("cls.bias".into(), vec![self.n_classes], bound(h)));
        out
    }

    /// Canonical `(name, shape)` list in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Fresh parameters: fan-in uniform weights, unit batch-norm scales,
    /// LSTM forget-gate bias 1.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in self.layout() {
            let value = match init {
                Init::Const(c) => Tensor::full(&shape, T::from_f64(c)),
                Init::Uniform(b) => Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-b..b))),
                Init::LstmBias(b, h) => Tensor::from_fn(&shape, |i| {
                    let v = rng.gen_range(-b..b);
                    T::from_f64(if (h..2 * h).contains(&i) { FORGET_BIAS } else { v })
                }),
            };
            store.insert(name, value)?;
        }
        Ok(store)
    }

    /// Recover the configuration from checkpoint shapes and verify that the
    /// store holds exactly the canonical parameter set.
    pub fn infer<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            store
                .get(name)
                .map(|t| t.shape().to_vec())
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let mut channels = [0; 4];
        for (i, c) in channels.iter_mut().enumerate() {
            *c = shape(&format!("enc.conv{i}.weight"))?[0];
        }
        let head = shape("enc.head.weight")?;
        let l0 = shape("lstm.l0.weight")?;
        let cls = shape("cls.weight")?;
        let bad = || Error::Checkpoint("inconsistent parameter shapes".into());
        if head.len() != 2 || l0.len() != 2 || cls.len() != 2 || l0[1] % 4 != 0 {
            return Err(bad());
        }
        let hidden = l0[1] / 4;
        let d_g = l0[0].checked_sub(hidden).filter(|&d| d > 0).ok_or_else(bad)?;
        let d_a = head[1].checked_sub(d_g).filter(|&d| d > 0).ok_or_else(bad)?;
        let lstm_layers = (0..).take_while(|j| store.contains(&format!("lstm.l{j}.weight"))).count();
        let cfg = Self {
            d_a,
            d_g,
            channels,
            hidden,
            lstm_layers,
            n_classes: cls[1],
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = cfg.param_shapes();
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, s) in expected {
            let got = shape(&name)?;
            if got != s {
                return Err(Error::Checkpoint(format!("{name}: shape {got:?}, expected {s:?}")));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, recorded for the running averages.
    Train,
    /// Running statistics; nothing is recorded.
    Eval,
}

/// A parameter store placed on one graph.
pub struct Bound<'s, T> {
    pub config: ModelConfig,
    store: &'s ParamStore<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    /// Batch statistics gathered in train mode, keyed by batch-norm prefix.
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Scalar> Bound<'s, T> {
    /// `differentiable` decides whether trainable tensors become graph
    /// parameters or constants.
    pub fn bind(g: &mut Graph<T>, config: &ModelConfig, store: &'s ParamStore<T>, mode: Mode, differentiable: bool) -> Self {
        let mut vars = HashMap::new();
        for p in store.iter().filter(|p| p.trainable()) {
            let v = if differentiable {
                g.param(p.value.clone())
            } else {
                g.constant(p.value.clone())
            };
            vars.insert(p.name.clone(), v);
        }
        Self {
            config: config.clone(),
            store,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Trainable `(name, var)` pairs.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn classifier(&self) -> Classifier {
        Classifier {
            weight: self.var("cls.weight"),
            bias: self.var("cls.bias"),
        }
    }

    fn bn_act(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"));
        let beta = self.var(&format!("{prefix}.beta"));
        let eps = T::from_f64(BN_EPS);
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                self.stats.push((prefix.to_string(), stats));
                y
            }
            Mode::Eval => {
                let rm = self.store.get(&format!("{prefix}.running_mean"))?.data();
                let rv = self.store.get(&format!("{prefix}.running_var"))?.data();
                g.batch_norm_eval(x, gamma, beta, rm, rv, eps)?
            }
        };
        Ok(g.leaky_relu(y, T::from_f64(LEAKY_SLOPE)))
    }

    /// Frames `[N, 3, 64, 32]` to `(f_a [N, d_a], f_g [N, d_g])`.
    pub fn encode(&mut self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let n = match *g.shape(x) {
            [n, CHANNELS, HEIGHT, WIDTH] => n,
            ref s => {
                return Err(Error::contract(format!(
                    "encoder expects [N, {CHANNELS}, {HEIGHT}, {WIDTH}], got {s:?}"
                )))
            }
        };
        let mut h = x;
        for i in 0..4 {
            let w = self.var(&format!("enc.conv{i}.weight"));
            let b = self.var(&format!("enc.conv{i}.bias"));
            h = g.conv2d(h, w, b, STRIDE, PAD)?;
            h = self.bn_act(g, h, &format!("enc.bn{i}"))?;
        }
        let flat = g.reshape(h, &[n, self.config.code_len()])?;
        let feat = g.linear(flat, self.var("enc.head.weight"), self.var("enc.head.bias"))?;
        let f_a = g.slice_cols(feat, 0, self.config.d_a)?;
        let f_g = g.slice_cols(feat, self.config.d_a, self.config.d_g)?;
        Ok((f_a, f_g))
    }

    /// `(f_a [N, d_a], f_g [N, d_g])` to frames `[N, 3, 64, 32]` in `(0, 1)`.
    pub fn decode(&mut self, g: &mut Graph<T>, f_a: Var, f_g: Var) -> Result<Var> {
        let (sa, sg) = (g.shape(f_a).to_vec(), g.shape(f_g).to_vec());
        if sa.len() != 2 || sg.len() != 2 || sa[1] != self.config.d_a || sg[1] != self.config.d_g || sa[0] != sg[0] {
            return Err(Error::contract(format!(
                "decoder expects [N, {}] and [N, {}], got {sa:?} and {sg:?}",
                self.config.d_a, self.config.d_g
            )));
        }
        let n = sa[0];
        let z = g.concat_cols(f_a, f_g)?;
        let code = g.linear(z, self.var("dec.fc.weight"), self.var("dec.fc.bias"))?;
        let mut h = g.reshape(code, &[n, self.config.channels[3], CODE_H, CODE_W])?;
        h = self.bn_act(g, h, "dec.bn0")?;
        for i in 0..4 {
            let w = self.var(&format!("dec.deconv{i}.weight"));
            let b = self.var(&format!("dec.deconv{i}.bias"));
            h = g.conv2d_transpose(h, w, b, STRIDE, PAD, 1)?;
            if i < 3 {
                h = self.bn_act(g, h, &format!("dec.bn{}", i + 1))?;
            }
        }
        Ok(g.sigmoid(h))
    }

    /// Runs the stacked LSTM over `steps` time-major blocks of `batch` rows of
    /// `f_g` and returns the top-layer output `h_t` of every step.
    pub fn lstm_outputs(&mut self, g: &mut Graph<T>, f_g: Var, steps: usize, batch: usize) -> Result<Vec<Var>> {
        if steps == 0 || batch == 0 {
            return Err(Error::contract("aggregation needs a non-empty sequence"));
        }
        if g.shape(f_g) != [steps * batch, self.config.d_g] {
            return Err(Error::contract(format!(
                "aggregation expects [{}, {}], got {:?}",
                steps * batch,
                self.config.d_g,
                g.shape(f_g)
            )));
        }
        let h = self.config.hidden;
        let cells: Vec<LstmCell> = (0..self.config.lstm_layers)
            .map(|j| LstmCell {
                weight: self.var(&format!("lstm.l{j}.weight")),
                bias: self.var(&format!("lstm.l{j}.bias")),
                hidden: h,
            })
            .collect();
        let mut states: Vec<LstmState> = cells
            .iter()
            .map(|_| LstmState {
                h: g.constant(Tensor::zeros(&[batch, h])),
                c: g.constant(Tensor::zeros(&[batch, h])),
            })
            .collect();
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = g.slice_rows(f_g, t * batch, batch)?;
            for (state, cell) in states.iter_mut().zip(&cells) {
                *state = g.lstm_step(x, *state, cell)?;
                x = state.h;
            }
            outputs.push(x);
        }
        Ok(outputs)
    }
}

/// `f_1 = h_1`, `f_t = ((t - 1) f_{t-1} + h_t) / t`.
pub fn running_means<T: Scalar>(g: &mut Graph<T>, hs: &[Var]) -> Result<Vec<Var>> {
    let mut out: Vec<Var> = Vec::with_capacity(hs.len());
    for (i, &h) in hs.iter().enumerate() {
        let f = match out.last() {
            None => h,
            Some(&prev) => {
                let t = (i + 1) as f64;
                let kept = g.scale(prev, T::from_f64(t - 1.0));
                let sum = g.add(kept, h)?;
                g.scale(sum, T::from_f64(1.0 / t))
            }
        };
        out.push(f);
    }
    Ok(out)
}

/// Exponential moving average of batch statistics into the running buffers.
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::ONE - m;
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let buf = store.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
    Ok(())
}

fn frames_tensor<T: Scalar>(frames: &[&Frame]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(frames.len() * FRAME_LEN);
    for f in frames {
        data.extend(f.pixels().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[frames.len(), CHANNELS, HEIGHT, WIDTH], data)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    t.data().chunks(t.row_len()).map(<[f32]>::to_vec).collect()
}

fn to_frames(t: &Tensor<f32>) -> Result<Vec<Frame>> {
    t.data().chunks(FRAME_LEN).map(|c| Frame::new(c.to_vec())).collect()
}

/// One feature vector per frame.
pub type Rows = Vec<Vec<f32>>;

/// Trained or freshly initialised network with `f32` parameters.
#[derive(Clone, Debug)]
pub struct GaitNet {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl GaitNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(params: ParamStore<f32>) -> Result<Self> {
        let config = ModelConfig::infer(&params)?;
        Ok(Self { config, params })
    }

    fn bind<'s>(&'s self, g: &mut Graph<f32>) -> Bound<'s, f32> {
        Bound::bind(g, &self.config, &self.params, Mode::Eval, false)
    }

    /// Eval-mode features of each frame.
    pub fn encode(&self, frames: &[Frame]) -> Result<(Rows, Rows)> {
        if frames.is_empty() {
            return Err(Error::contract("encode needs at least one frame"));
        }
        let mut g = Graph::new();
        let mut net = self.bind(&mut g);
        let refs: Vec<&Frame> = frames.iter().collect();
        let x = g.constant(frames_tensor(&refs)?);
        let (fa, fg) = net.encode(&mut g, x)?;
        Ok((rows(g.value(fa)), rows(g.value(fg))))
    }

    pub fn decode(&self, f_a: &[Vec<f32>], f_g: &[Vec<f32>]) -> Result<Vec<Frame>> {
        if f_a.is_empty() || f_a.len() != f_g.len() {
            return Err(Error::contract("decode needs matching, non-empty feature lists"));
        }
        let pack = |v: &[Vec<f32>], d: usize| -> Result<Tensor<f32>> {
            if v.iter().any(|r| r.len() != d) {
                return Err(Error::contract(format!("feature dimension must be {d}")));
            }
            Tensor::new(&[v.len(), d], v.concat())
        };
        let mut g = Graph::new();
        let mut net = self.bind(&mut g);
        let a = g.constant(pack(f_a, self.config.d_a)?);
        let p = g.constant(pack(f_g, self.config.d_g)?);
        let out = net.decode(&mut g, a, p)?;
        to_frames(g.value(out))
    }

    /// Decoded cells for appearance sources `rows` against pose sources
    /// `cols`. Row 0 uses `f_a = 0`, column 0 uses `f_g = 0`.
    pub fn cross_decode_grid(&self, rows_src: &[Frame], cols_src: &[Frame]) -> Result<Vec<Vec<Frame>>> {
        let mut appearance = vec![vec![0.0; self.config.d_a]];
        let mut pose = vec![vec![0.0; self.config.d_g]];
        if !rows_src.is_empty() {
            appearance.extend(self.encode(rows_src)?.0);
        }
        if !cols_src.is_empty() {
            pose.extend(self.encode(cols_src)?.1);
        }
        let mut fa = Vec::new();
        let mut fg = Vec::new();
        for a in &appearance {
            for p in &pose {
                fa.push(a.clone());
                fg.push(p.clone());
            }
        }
        let cells = self.decode(&fa, &fg)?;
        Ok(cells.chunks(pose.len()).map(<[Frame]>::to_vec).collect())
    }

    /// Top-layer outputs `h_t` and running means `f_gait^t` for one sequence
    /// of pose features.
    pub fn aggregate(&self, pose_seq: &[Vec<f32>]) -> Result<(Rows, Rows)> {
        if pose_seq.is_empty() {
            return Err(Error::contract("aggregate needs a non-empty sequence"));
        }
        if pose_seq.iter().any(|r| r.len() != self.config.d_g) {
            return Err(Error::contract(format!("pose features must have {} dims", self.config.d_g)));
        }
        let mut g = Graph::new();
        let mut net = self.bind(&mut g);
        let fg = g.constant(Tensor::new(&[pose_seq.len(), self.config.d_g], pose_seq.concat())?);
        let hs = net.lstm_outputs(&mut g, fg, pose_seq.len(), 1)?;
        let means = running_means(&mut g, &hs)?;
        let collect = |vs: &[Var]| vs.iter().map(|&v| g.value(v).data().to_vec()).collect();
        Ok((collect(&hs), collect(&means)))
    }

    /// `f_gait` at the last frame of a clip, all layers in eval mode.
    pub fn gait_signature(&self, frames: &[Frame]) -> Result<Vec<f32>> {
        if frames.is_empty() {
            return Err(Error::contract("gait signature of an empty clip"));
        }
        let (_, fg) = self.encode(frames)?;
        let (_, means) = self.aggregate(&fg)?;
        Ok(means.into_iter().last().unwrap())
    }
}

/// Frame-by-frame gait signature: one encoder pass and one LSTM step per
/// frame, carrying the recurrent state and running mean between calls.
pub struct GaitStream<'n> {
    net: &'n GaitNet,
    state: Vec<(Tensor<f32>, Tensor<f32>)>,
    mean: Vec<f32>,
    frames: usize,
}

impl<'n> GaitStream<'n> {
    pub fn new(net: &'n GaitNet) -> Self {
        let h = net.config.hidden;
        Self {
            net,
            state: vec![(Tensor::zeros(&[1, h]), Tensor::zeros(&[1, h])); net.config.lstm_layers],
            mean: vec![0.0; h],
            frames: 0,
        }
    }

    /// Feed one frame and return the signature so far.
    pub fn push(&mut self, frame: &Frame) -> Result<&[f32]> {
        let mut g = Graph::new();
        let mut net = self.net.bind(&mut g);
        let x = g.constant(frames_tensor(&[frame])?);
        let (_, mut h) = net.encode(&mut g, x)?;
        let mut next = Vec::with_capacity(self.state.len());
        for (j, (h0, c0)) in self.state.iter().enumerate() {
            let cell = LstmCell {
                weight: net.var(&format!("lstm.l{j}.weight")),
                bias: net.var(&format!("lstm.l{j}.bias")),
                hidden: self.net.config.hidden,
            };
            let prev = LstmState {
                h: g.constant(h0.clone()),
                c: g.constant(c0.clone()),
            };
            let s = g.lstm_step(h, prev, &cell)?;
            next.push((g.value(s.h).clone(), g.value(s.c).clone()));
            h = s.h;
        }
        self.frames += 1;
        let t = self.frames as f32;
        for (m, &v) in self.mean.iter_mut().zip(g.value(h).data()) {
            *m = ((t - 1.0) * *m + v) / t;
        }
        self.state = next;
        Ok(&self.mean)
    }
}

/// Lay a grid of frames out as one image with 1-pixel gaps.
pub fn mosaic(grid: &[Vec<Frame>]) -> RgbImage {
    let n_rows = grid.len();
    let n_cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let mut img = RgbImage::new(n_cols.max(1) * (WIDTH + 1) - 1, n_rows.max(1) * (HEIGHT + 1) - 1);
    for (r, row) in grid.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            let cell = frame.to_rgb();
            for y in 0..HEIGHT {
                for x in 0..WIDTH {
                    img.put(c * (WIDTH + 1) + x, r * (HEIGHT + 1) + y, cell.get(x, y));
                }
            }
        }
    }
    img
}

/// True for names that the optimiser updates.
pub fn is_trainable(name: &str) -> bool {
    !is_buffer_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_matches_whole_clip_signature() {
        let net = GaitNet::new(tiny(), 4).unwrap();
        let frames: Vec<Frame> = (0..5).map(frame).collect();
        let whole = net.gait_signature(&frames).unwrap();
        let mut stream = GaitStream::new(&net);
        let mut last = Vec::new();
        for f in &frames {
            last = stream.push(f).unwrap().to_vec();
        }
        for (a, b) in whole.iter().zip(&last) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            d_a: 3,
            d_g: 2,
            channels: [2, 2, 3, 3],
            hidden: 4,
            lstm_layers: 3,
            n_classes: 3,
        }
    }

    fn frame(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new((0..FRAME_LEN).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_layout_names_are_unique_and_complete() {
        let cfg = ModelConfig::default();
        let shapes = cfg.param_shapes();
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
        let find = |n: &str| shapes.iter().find(|(m, _)| m == n).unwrap().1.clone();
        assert_eq!(find("enc.head.weight"), vec![256 * 8, 192]);
        assert_eq!(find("lstm.l0.weight"), vec![64 + 256, 1024]);
        assert_eq!(find("lstm.l2.weight"), vec![512, 1024]);
        assert_eq!(find("dec.deconv3.weight"), vec![32, 3, 3, 3]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let store: ParamStore<f32> = tiny().init_params(1).unwrap();
        let b = store.get("lstm.l1.bias").unwrap().data();
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[..4].iter().all(|&v| v.abs() <= 0.5));
    }

    #[test]
    fn config_is_recovered_from_shapes() {
        for cfg in [tiny(), ModelConfig { n_classes: 7, d_a: 5, ..tiny() }] {
            let store: ParamStore<f32> = cfg.init_params(0).unwrap();
            assert_eq!(ModelConfig::infer(&store).unwrap(), cfg);
        }
        let mut store: ParamStore<f32> = ParamStore::new();
        for (name, shape) in tiny().param_shapes() {
            if name != "cls.bias" {
                store.insert(name, Tensor::zeros(&shape)).unwrap();
            }
        }
        assert!(ModelConfig::infer(&store).is_err());
    }

    #[test]
    fn shapes_round_trip_through_the_autoencoder() {
        let net = GaitNet::new(tiny(), 3).unwrap();
        let frames = vec![frame(1), frame(2)];
        let (fa, fg) = net.encode(&frames).unwrap();
        assert_eq!((fa.len(), fa[0].len(), fg[0].len()), (2, 3, 2));
        let out = net.decode(&fa, &fg).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        let zeros = net.decode(&[vec![0.0; 3]], &[vec![0.0; 2]]).unwrap();
        assert!(zeros[0].pixels().iter().all(|v| v.is_finite()));
        assert!(net.decode(&[vec![0.0; 2]], &[vec![0.0; 2]]).is_err());
        // eval mode is deterministic
        assert_eq!(net.encode(&frames).unwrap(), (fa, fg));
    }

    #[test]
    fn encoder_rejects_wrong_geometry() {
        let cfg = tiny();
        let store: ParamStore<f64> = cfg.init_params(0).unwrap();
        let mut g = Graph::new();
        let mut net = Bound::bind(&mut g, &cfg, &store, Mode::Eval, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(net.encode(&mut g, x).is_err());
    }

    #[test]
    fn grid_has_zero_row_and_column() {
        let net = GaitNet::new(tiny(), 4).unwrap();
        let rows_src = vec![frame(5), frame(6), frame(7)];
        let cols_src = vec![frame(8), frame(9), frame(10), frame(11)];
        let grid = net.cross_decode_grid(&rows_src, &cols_src).unwrap();
        assert_eq!(grid.len(), 4);
        assert!(grid.iter().all(|r| r.len() == 5));
        let (fa, _) = net.encode(&rows_src).unwrap();
        let (_, fg) = net.encode(&cols_src).unwrap();
        let direct = net.decode(&[fa[1].clone()], &[fg[2].clone()]).unwrap();
        assert_eq!(grid[2][3], direct[0]);
        let corner = net.decode(&[vec![0.0; 3]], &[vec![0.0; 2]]).unwrap();
        assert_eq!(grid[0][0], corner[0]);
        let img = mosaic(&grid);
        assert_eq!((img.width, img.height), (5 * 33 - 1, 4 * 65 - 1));
    }

    #[test]
    fn running_means_match_direct_means() {
        let net = GaitNet::new(tiny(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq: Vec<Vec<f32>> = (0..12).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let (hs, means) = net.aggregate(&seq).unwrap();
        assert_eq!(means[0], hs[0]);
        for t in 0..hs.len() {
            for j in 0..4 {
                let direct: f64 = hs[..=t].iter().map(|h| h[j] as f64).sum::<f64>() / (t + 1) as f64;
                assert!((means[t][j] as f64 - direct).abs() < 1e-6);
            }
        }
        assert!(net.aggregate(&[]).is_err());
    }

    #[test]
    fn zero_lstm_gives_zero_gait_feature() {
        let mut net = GaitNet::new(tiny(), 1).unwrap();
        for p in net.params.iter_mut().filter(|p| p.name.starts_with("lstm.")) {
            p.value.data_mut().fill(0.0);
        }
        let seq = vec![vec![0.3, -1.0]; 6];
        let (hs, means) = net.aggregate(&seq).unwrap();
        assert!(hs.iter().chain(&means).all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn signature_is_pure_and_has_hidden_dims() {
        let net = GaitNet::new(tiny(), 2).unwrap();
        let before = net.params.clone();
        let clip = vec![frame(1), frame(2), frame(3)];
        let s1 = net.gait_signature(&clip).unwrap();
        let s2 = net.gait_signature(&clip).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 4);
        assert_eq!(net.params, before);
        assert!(net.gait_signature(&[]).is_err());
        assert_eq!(ModelConfig::default().hidden, 256);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let cfg = tiny();
        let mut store: ParamStore<f64> = cfg.init_params(0).unwrap();
        let stats = vec![(
            "enc.bn0".to_string(),
            BatchStats {
                mean: vec![1.0, 2.0],
                var: vec![3.0, 5.0],
            },
        )];
        update_running_stats(&mut store, &stats).unwrap();
        assert_eq!(store.get("enc.bn0.running_mean").unwrap().data(), &[0.1, 0.2]);
        let rv = store.get("enc.bn0.running_var").unwrap().data();
        assert!((rv[0] - 1.2).abs() < 1e-12 && (rv[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn train_mode_records_every_batch_norm() {
        let cfg = tiny();
        let store: ParamStore<f64> = cfg.init_params(0).unwrap();
        let mut g = Graph::new();
        let mut net = Bound::bind(&mut g, &cfg, &store, Mode::Train, true);
        let x = g.constant(Tensor::full(&[2, 3, 64, 32], 0.5));
        let (fa, fg) = net.encode(&mut g, x).unwrap();
        net.decode(&mut g, fa, fg).unwrap();
        let names: Vec<&str> = net.stats.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["enc.bn0", "enc.bn1", "enc.bn2", "enc.bn3", "dec.bn0", "dec.bn1", "dec.bn2", "dec.bn3"]);
    }
}
