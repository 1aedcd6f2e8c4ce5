//! Joint training of encoder, decoder, LSTM and classifier.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{Disentangle, IdLoss, RunConfig};
use crate::data::{batch_condition_pairs, sample_batch, DatasetIndex, FrameBank};
use crate::error::{Error, Result};
use crate::losses::{
    cross_reconstruction_loss, gait_similarity_loss, id_avg_loss, id_inc_avg_loss, id_single_loss, total_loss,
    Components, LossWeights,
};
use crate::model::{update_running_stats, Bound, GaitNet, Mode};
use crate::optim::AdamState;
use crate::params::{load_checkpoint, save_checkpoint};
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,step,total,id,xrecon,gaitsim";

/// One batch laid out for [`batch_loss`].
pub struct BatchInput<T> {
    /// `[steps * batch, 3, 64, 32]`, time-major.
    pub frames: Tensor<T>,
    pub steps: usize,
    pub batch: usize,
    /// Class label of each window.
    pub labels: Vec<usize>,
    /// Cross-reconstruction pairs as row indices into `frames`.
    pub cross_pairs: Vec<(usize, usize)>,
    /// Gait-similarity pairs as window indices.
    pub gait_pairs: Vec<(usize, usize)>,
}

/// Which loss terms a run uses and how they are weighted.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub weights: LossWeights,
    pub disentangle: Disentangle,
    pub id_loss: IdLoss,
}

impl Objective {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            weights: cfg.weights,
            disentangle: cfg.disentangle,
            id_loss: cfg.id_loss,
        }
    }
}

/// Total loss of one batch and its components.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &mut Bound<T>,
    input: &BatchInput<T>,
    objective: &Objective,
    step: usize,
) -> Result<(Var, Components)> {
    let (steps, batch) = (input.steps, input.batch);
    let x = g.constant(input.frames.clone());
    let (f_a, f_g) = net.encode(g, x)?;

    let hs = net.lstm_outputs(g, f_g, steps, batch)?;
    let cls = net.classifier();
    let id = match objective.id_loss {
        IdLoss::Single => id_single_loss(g, &hs, &input.labels, &cls)?,
        IdLoss::Avg => id_avg_loss(g, &hs, &input.labels, &cls)?,
        IdLoss::IncAvg => id_inc_avg_loss(g, &hs, &input.labels, &cls, objective.weights.scheme)?,
    };

    let xrecon = if objective.disentangle.xrecon() {
        Some(cross_reconstruction_loss(g, f_a, f_g, x, &input.cross_pairs, |g, a, p| {
            net.decode(g, a, p)
        })?)
    } else {
        None
    };

    let gaitsim = if objective.disentangle.gaitsim() && !input.gait_pairs.is_empty() {
        let mut acc: Option<Var> = None;
        for &(w1, w2) in &input.gait_pairs {
            let rows = |w: usize| (0..steps).map(|t| t * batch + w).collect::<Vec<_>>();
            let s1 = g.gather_rows(f_g, &rows(w1))?;
            let s2 = g.gather_rows(f_g, &rows(w2))?;
            let term = gait_similarity_loss(g, s1, s2)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Some(g.scale(acc.unwrap(), T::from_f64(1.0 / input.gait_pairs.len() as f64)))
    } else {
        None
    };

    let parts = Components { id, xrecon, gaitsim };
    let total = total_loss(g, &parts, &objective.weights, step)?;
    Ok((total, parts))
}

/// Loss values logged for one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub id: f64,
    pub xrecon: Option<f64>,
    pub gaitsim: Option<f64>,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.total,
            self.id,
            opt(self.xrecon),
            opt(self.gaitsim)
        )
    }
}

/// Optimisation steps in one epoch: enough batches to cover every eligible
/// clip once on average.
pub fn steps_per_epoch(eligible: usize, batch_clips: usize) -> usize {
    eligible.div_ceil(batch_clips).max(1)
}

/// Seed stream for model initialisation, kept apart from batch sampling.
const INIT_SALT: u64 = 0x1d_5eed;

pub struct Trainer {
    pub config: RunConfig,
    pub net: GaitNet,
    labels: BTreeMap<u32, usize>,
    adam: HashMap<String, AdamState<f32>>,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, index: &DatasetIndex) -> Result<Self> {
        config.validate()?;
        let labels = index.label_map();
        let net = GaitNet::new(config.model(labels.len()), config.seed ^ INIT_SALT)?;
        let adam = net
            .params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| (p.name.clone(), AdamState::new(p.value.numel(), config.adam)))
            .collect();
        Ok(Self {
            config: config.clone(),
            net,
            labels,
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
        })
    }

    pub fn labels(&self) -> &BTreeMap<u32, usize> {
        &self.labels
    }

    /// Draw a batch from `index` and lay it out.
    pub fn next_batch(&mut self, index: &DatasetIndex, bank: &FrameBank) -> Result<BatchInput<f32>> {
        let cfg = &self.config;
        let batch = sample_batch(index, cfg.batch_clips, cfg.window, &mut self.rng)?;
        let (steps, b) = (cfg.window, batch.windows.len());
        let labels = batch
            .windows
            .iter()
            .map(|w| {
                self.labels
                    .get(&w.subject_id)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("subject {} has no training label", w.subject_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cross_pairs = Vec::new();
        if cfg.disentangle.xrecon() {
            for w in 0..b {
                for _ in 0..cfg.cross_pairs {
                    let t1 = self.rng.gen_range(0..steps);
                    let t2 = self.rng.gen_range(0..steps);
                    cross_pairs.push((t1 * b + w, t2 * b + w));
                }
            }
        }
        let gait_pairs = if cfg.disentangle.gaitsim() {
            batch_condition_pairs(&batch, &mut self.rng)
        } else {
            Vec::new()
        };
        Ok(BatchInput {
            frames: bank.time_major(&batch.windows),
            steps,
            batch: b,
            labels,
            cross_pairs,
            gait_pairs,
        })
    }

    /// One Adam step on a prepared batch.
    pub fn step_on(&mut self, input: &BatchInput<f32>, epoch: usize) -> Result<StepRecord> {
        let objective = Objective::from_config(&self.config);
        let mut g = Graph::new();
        let (grads, stats, record) = {
            let mut bound = Bound::bind(&mut g, &self.net.config, &self.net.params, Mode::Train, true);
            let (total, parts) = batch_loss(&mut g, &mut bound, input, &objective, self.step)?;
            let value = |v: Var| g.value(v).item() as f64;
            let record = StepRecord {
                epoch,
                step: self.step,
                total: value(total),
                id: value(parts.id),
                xrecon: parts.xrecon.map(value),
                gaitsim: parts.gaitsim.map(value),
            };
            let mut grads = g.backward(total)?;
            let named: Vec<(String, Tensor<f32>)> = bound
                .vars()
                .filter_map(|(name, v)| grads.take(v).map(|t| (name.to_string(), t)))
                .collect();
            (named, std::mem::take(&mut bound.stats), record)
        };
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    component: format!("gradient of {name}"),
                    step: self.step,
                });
            }
            let state = self.adam.get_mut(&name).expect("optimizer state for every trainable tensor");
            crate::optim::adam_update(self.net.params.get_mut(&name)?, &grad, state)?;
        }
        update_running_stats(&mut self.net.params, &stats)?;
        self.step += 1;
        Ok(record)
    }

    pub fn train_step(&mut self, index: &DatasetIndex, bank: &FrameBank, epoch: usize) -> Result<StepRecord> {
        let input = self.next_batch(index, bank)?;
        self.step_on(&input, epoch)
    }
}

pub struct TrainOutcome {
    pub net: GaitNet,
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Subject id to classifier label.
    pub labels: BTreeMap<u32, usize>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_e{epoch:04}.gnt"))
}

/// The highest-epoch checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_e") && n.ends_with(".gnt"))
        })
        .collect();
    found.sort();
    found
        .pop()
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", dir.display())))
}

/// Load a model from a checkpoint file or a run directory.
pub fn load_model(path: &Path) -> Result<GaitNet> {
    let file = if path.is_dir() { latest_checkpoint(path)? } else { path.to_path_buf() };
    GaitNet::from_params(load_checkpoint(&file)?)
}

/// Train on the eligible clips of `index` for `cfg.epochs` epochs.
///
/// With an output directory the resolved configuration, a CSV loss log and
/// checkpoints (epoch 0, every `save_every` epochs, and the last epoch) are
/// written there. A non-finite loss aborts the run; checkpoints already on
/// disk are kept.
pub fn train(cfg: &RunConfig, index: &DatasetIndex, bank: &FrameBank, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, index)?;
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;
            let f = File::create(dir.join(LOG_FILE)).map_err(|e| Error::io("creating training log", e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("writing training log", e))?;
            Some(w)
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    let save = |net: &GaitNet, epoch: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out {
            let p = checkpoint_path(dir, epoch);
            save_checkpoint(&p, &net.params)?;
            checkpoints.push(p);
        }
        Ok(())
    };
    save(&trainer.net, 0, &mut checkpoints)?;

    let per_epoch = steps_per_epoch(index.eligible().len(), cfg.batch_clips);
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        for _ in 0..per_epoch {
            let record = match trainer.train_step(index, bank, epoch) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(w) = log_file.as_mut() {
                        let _ = w.flush();
                    }
                    return Err(e);
                }
            };
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", record.csv_line()).map_err(|e| Error::io("writing training log", e))?;
            }
            log::debug!("{}", record.csv_line());
            log.push(record);
        }
        let last = epoch == cfg.epochs;
        if last || (cfg.save_every > 0 && epoch % cfg.save_every == 0) {
            save(&trainer.net, epoch, &mut checkpoints)?;
        }
        if let Some(r) = log.last() {
            log::info!("epoch {epoch}/{}: total {:.4} id {:.4}", cfg.epochs, r.total, r.id);
        }
    }
    if let Some(w) = log_file.as_mut() {
        w.flush().map_err(|e| Error::io("writing training log", e))?;
    }
    Ok(TrainOutcome {
        labels: trainer.labels.clone(),
        net: trainer.net,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::model::ModelConfig;
    use crate::params::ParamStore;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_a: 3,
            d_g: 2,
            channels: [2, 2, 2, 2],
            hidden: 3,
            lstm_layers: 3,
            n_classes: 2,
        }
    }

    fn micro_batch(rng: &mut ChaCha8Rng) -> BatchInput<f64> {
        let (steps, batch) = (3, 2);
        BatchInput {
            frames: Tensor::from_fn(&[steps * batch, 3, 64, 32], |_| rng.gen_range(0.0..1.0)),
            steps,
            batch,
            labels: vec![0, 1],
            cross_pairs: vec![(0, 4), (3, 1), (5, 5), (2, 0)],
            gait_pairs: vec![(0, 1)],
        }
    }

    fn loss_at(store: &ParamStore<f64>, cfg: &ModelConfig, input: &BatchInput<f64>, obj: &Objective) -> f64 {
        let mut g = Graph::new();
        let mut net = Bound::bind(&mut g, cfg, store, Mode::Train, false);
        let (total, _) = batch_loss(&mut g, &mut net, input, obj, 0).unwrap();
        g.value(total).item()
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store: ParamStore<f64> = cfg.init_params(5).unwrap();
        let input = micro_batch(&mut rng);
        let obj = Objective {
            weights: LossWeights {
                lambda_r: 1.0,
                lambda_s: 1.0,
                ..LossWeights::default()
            },
            disentangle: Disentangle::XReconGaitSim,
            id_loss: IdLoss::IncAvg,
        };
        let mut g = Graph::new();
        let (analytic, names) = {
            let mut net = Bound::bind(&mut g, &cfg, &store, Mode::Train, true);
            let (total, _) = batch_loss(&mut g, &mut net, &input, &obj, 0).unwrap();
            let grads = g.backward(total).unwrap();
            let names = ["enc.conv0.weight", "enc.conv2.weight", "enc.head.weight", "dec.deconv1.weight", "lstm.l0.weight"];
            let a: Vec<Tensor<f64>> = names.iter().map(|n| grads.get(net.var(n)).unwrap().clone()).collect();
            (a, names)
        };
        let h = 1e-5;
        for (name, grad) in names.iter().zip(&analytic) {
            for _ in 0..4 {
                let j = rng.gen_range(0..grad.numel());
                let orig = store.get(name).unwrap().data()[j];
                store.get_mut(name).unwrap().data_mut()[j] = orig + h;
                let plus = loss_at(&store, &cfg, &input, &obj);
                store.get_mut(name).unwrap().data_mut()[j] = orig - h;
                let minus = loss_at(&store, &cfg, &input, &obj);
                store.get_mut(name).unwrap().data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(grad.data()[j], numeric);
                assert!(err < 1e-2, "{name}[{j}]: analytic {} numeric {numeric}", grad.data()[j]);
            }
        }
    }

    #[test]
    fn single_condition_batches_skip_gait_similarity() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store: ParamStore<f64> = cfg.init_params(1).unwrap();
        let mut input = micro_batch(&mut rng);
        input.gait_pairs.clear();
        let obj = Objective {
            weights: LossWeights::default(),
            disentangle: Disentangle::XReconGaitSim,
            id_loss: IdLoss::IncAvg,
        };
        let mut g = Graph::new();
        let mut net = Bound::bind(&mut g, &cfg, &store, Mode::Train, false);
        let (total, parts) = batch_loss(&mut g, &mut net, &input, &obj, 0).unwrap();
        assert!(parts.gaitsim.is_none());
        assert!(g.value(total).item().is_finite());
        let expect = g.value(parts.id).item() + 0.1 * g.value(parts.xrecon.unwrap()).item();
        assert!((g.value(total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_batch_aborts_the_step() {
        use crate::data::ClipEntry;
        let entry = |s: u32| ClipEntry {
            clip_id: format!("s{s:03}_NM_00"),
            subject_id: s,
            condition: "NM".into(),
            n_frames: 20,
            fields: Vec::new(),
        };
        let index = DatasetIndex::from_entries(Path::new("."), vec![entry(0), entry(1)]);
        let cfg = RunConfig {
            d_a: 3,
            d_g: 2,
            channels: [2, 2, 2, 2],
            hidden: 3,
            batch_clips: 2,
            window: 2,
            ..RunConfig::default()
        };
        let mut trainer = Trainer::new(&cfg, &index).unwrap();
        let before = trainer.net.params.clone();
        let mut frames = Tensor::zeros(&[4, 3, 64, 32]);
        frames.data_mut()[7] = f32::NAN;
        let input = BatchInput {
            frames,
            steps: 2,
            batch: 2,
            labels: vec![0, 1],
            cross_pairs: vec![(0, 2), (1, 3)],
            gait_pairs: Vec::new(),
        };
        let err = trainer.step_on(&input, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(!err.is_validation());
        assert_eq!(trainer.net.params, before);
    }

    #[test]
    fn epochs_cover_the_clips() {
        assert_eq!(steps_per_epoch(80, 32), 3);
        assert_eq!(steps_per_epoch(64, 32), 2);
        assert_eq!(steps_per_epoch(0, 32), 1);
    }
}
