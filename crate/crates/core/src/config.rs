//! Run configuration as line-oriented `key=value` text.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{clip_ordinals, split_train_test, DatasetIndex};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

/// Which disentanglement terms join the identification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disentangle {
    None,
    XRecon,
    XReconGaitSim,
}

impl Disentangle {
    pub fn xrecon(self) -> bool {
        self != Self::None
    }

    pub fn gaitsim(self) -> bool {
        self == Self::XReconGaitSim
    }
}

impl fmt::Display for Disentangle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::XRecon => "xrecon",
            Self::XReconGaitSim => "xrecon+gaitsim",
        })
    }
}

impl FromStr for Disentangle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "xrecon" => Ok(Self::XRecon),
            "xrecon+gaitsim" => Ok(Self::XReconGaitSim),
            other => Err(Error::Config(format!(
                "unknown disentangle setting {other:?} (none, xrecon, xrecon+gaitsim)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdLoss {
    Single,
    Avg,
    IncAvg,
}

impl fmt::Display for IdLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "id-single",
            Self::Avg => "id-avg",
            Self::IncAvg => "id-inc-avg",
        })
    }
}

impl FromStr for IdLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "id-single" | "single" => Ok(Self::Single),
            "id-avg" | "avg" => Ok(Self::Avg),
            "id-inc-avg" | "inc-avg" => Ok(Self::IncAvg),
            other => Err(Error::Config(format!(
                "unknown identification loss {other:?} (id-single, id-avg, id-inc-avg)"
            ))),
        }
    }
}

/// How a dataset is divided into training and evaluation clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holdout {
    /// The lowest `train_subjects` subject ids train; the rest are held out.
    Subjects,
    /// The first `train_clips` clips of every subject and condition train;
    /// later clips are held out.
    Clips,
}

impl fmt::Display for Holdout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Subjects => "subjects",
            Self::Clips => "clips",
        })
    }
}

impl FromStr for Holdout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "subjects" => Ok(Self::Subjects),
            "clips" => Ok(Self::Clips),
            other => Err(Error::Config(format!("unknown holdout {other:?} (subjects, clips)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub d_a: usize,
    pub d_g: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
    pub lstm_layers: usize,
    pub adam: AdamConfig,
    pub batch_clips: usize,
    pub window: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub disentangle: Disentangle,
    pub id_loss: IdLoss,
    /// Ordered `(t1, t2)` cross-reconstruction pairs per window and step.
    pub cross_pairs: usize,
    pub holdout: Holdout,
    pub train_subjects: usize,
    pub train_clips: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 saves only the first and last.
    pub save_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            d_a: m.d_a,
            d_g: m.d_g,
            channels: m.channels,
            hidden: m.hidden,
            lstm_layers: m.lstm_layers,
            adam: AdamConfig::default(),
            batch_clips: 32,
            window: 20,
            epochs: 50,
            weights: LossWeights::default(),
            disentangle: Disentangle::XReconGaitSim,
            id_loss: IdLoss::IncAvg,
            cross_pairs: 4,
            holdout: Holdout::Subjects,
            train_subjects: 10,
            train_clips: 2,
            seed: 0,
            save_every: 10,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "out",
    "d_a",
    "d_g",
    "channels",
    "hidden",
    "lstm_layers",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_clips",
    "window",
    "epochs",
    "lambda_r",
    "lambda_s",
    "w_t",
    "disentangle",
    "id_loss",
    "cross_pairs",
    "holdout",
    "train_subjects",
    "train_clips",
    "seed",
    "save_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn model(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            d_a: self.d_a,
            d_g: self.d_g,
            channels: self.channels,
            hidden: self.hidden,
            lstm_layers: self.lstm_layers,
            n_classes,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value.trim()),
            "out" => self.out = PathBuf::from(value.trim()),
            "d_a" => self.d_a = parse(key, value)?,
            "d_g" => self.d_g = parse(key, value)?,
            "channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_>>()?;
                self.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config("channels needs four comma-separated widths".into()))?;
            }
            "hidden" => self.hidden = parse(key, value)?,
            "lstm_layers" => self.lstm_layers = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "batch_clips" => self.batch_clips = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda_r" => self.weights.lambda_r = parse(key, value)?,
            "lambda_s" => self.weights.lambda_s = parse(key, value)?,
            "w_t" => self.weights.scheme = value.parse()?,
            "disentangle" => self.disentangle = value.parse()?,
            "id_loss" => self.id_loss = value.parse()?,
            "cross_pairs" => self.cross_pairs = parse(key, value)?,
            "holdout" => self.holdout = value.parse()?,
            "train_subjects" => self.train_subjects = parse(key, value)?,
            "train_clips" => self.train_clips = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "save_every" => self.save_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `self`. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.model(2).validate()?;
        self.weights.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("optimizer settings out of range");
        }
        if self.batch_clips < 2 {
            return bad("batch_clips must be at least 2 (batch norm needs two samples)");
        }
        if self.window == 0 || self.window > crate::data::MIN_CLIP_LEN {
            return bad("window must be between 1 and 20 frames");
        }
        if self.disentangle.xrecon() && self.cross_pairs == 0 {
            return bad("cross_pairs must be positive when cross reconstruction is on");
        }
        match self.holdout {
            Holdout::Subjects if self.train_subjects < 2 => return bad("train_subjects must be at least 2"),
            Holdout::Clips if self.train_clips == 0 => return bad("train_clips must be at least 1"),
            _ => {}
        }
        Ok(())
    }

    /// Training and held-out parts of `index`.
    pub fn split(&self, index: &DatasetIndex) -> Result<(DatasetIndex, DatasetIndex)> {
        match self.holdout {
            Holdout::Subjects => split_train_test(index, self.train_subjects),
            Holdout::Clips => {
                let ordinal = clip_ordinals(index);
                let train_ids: BTreeSet<&str> = index
                    .clips()
                    .iter()
                    .zip(&ordinal)
                    .filter(|(_, &k)| k < self.train_clips)
                    .map(|(c, _)| c.clip_id.as_str())
                    .collect();
                let train = index.filter(|c| train_ids.contains(c.clip_id.as_str()));
                let test = index.filter(|c| !train_ids.contains(c.clip_id.as_str()));
                if train.eligible().is_empty() || test.eligible().is_empty() {
                    return Err(Error::invalid(format!(
                        "train_clips={} leaves an empty training or held-out set",
                        self.train_clips
                    )));
                }
                Ok((train, test))
            }
        }
    }

    /// Resolved configuration, one `key=value` per line in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let c = self.channels;
        let values: Vec<String> = vec![
            self.dataset.display().to_string(),
            self.out.display().to_string(),
            self.d_a.to_string(),
            self.d_g.to_string(),
            format!("{},{},{},{}", c[0], c[1], c[2], c[3]),
            self.hidden.to_string(),
            self.lstm_layers.to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.batch_clips.to_string(),
            self.window.to_string(),
            self.epochs.to_string(),
            self.weights.lambda_r.to_string(),
            self.weights.lambda_s.to_string(),
            self.weights.scheme.to_string(),
            self.disentangle.to_string(),
            self.id_loss.to_string(),
            self.cross_pairs.to_string(),
            self.holdout.to_string(),
            self.train_subjects.to_string(),
            self.train_clips.to_string(),
            self.seed.to_string(),
            self.save_every.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::WeightScheme;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.adam.lr, 1e-4);
        assert_eq!(c.adam.beta1, 0.9);
        assert_eq!((c.batch_clips, c.window), (32, 20));
        assert_eq!((c.weights.lambda_r, c.weights.lambda_s), (0.1, 0.005));
        assert_eq!(c.weights.scheme, WeightScheme::Squared);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig {
            channels: [8, 16, 32, 64],
            disentangle: Disentangle::XRecon,
            id_loss: IdLoss::Single,
            ..RunConfig::default()
        };
        c.adam.lr = 3e-4;
        c.weights.scheme = WeightScheme::Uniform;
        c.holdout = Holdout::Clips;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn bad_lines_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("epochs=ten").is_err());
        assert!(c.apply_text("nonsense=1").is_err());
        assert!(c.apply_text("epochs").is_err());
        assert!(c.apply_text("channels=1,2,3").is_err());
        c.apply_text("# comment\n\nepochs = 3\n").unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn validation_catches_bad_values() {
        let ok = RunConfig::default();
        for (k, v) in [("train_clips", "0"), ("window", "21"), ("batch_clips", "1"), ("lr", "0"), ("lambda_s", "-1"), ("d_g", "0")] {
            let mut c = ok.clone();
            c.holdout = Holdout::Clips;
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn clip_holdout_keeps_every_subject_on_both_sides() {
        use crate::data::ClipEntry;
        let mut clips = Vec::new();
        for s in 0..3u32 {
            for cond in ["NM", "CL"] {
                for k in 0..4 {
                    clips.push(ClipEntry {
                        clip_id: format!("s{s:03}_{cond}_{k:02}"),
                        subject_id: s,
                        condition: cond.into(),
                        n_frames: 20,
                        fields: Vec::new(),
                    });
                }
            }
        }
        let index = DatasetIndex::from_entries(Path::new("."), clips);
        let mut c = RunConfig {
            holdout: Holdout::Clips,
            train_clips: 1,
            ..RunConfig::default()
        };
        let (train, test) = c.split(&index).unwrap();
        assert_eq!((train.clips().len(), test.clips().len()), (6, 18));
        assert!(train.clips().iter().all(|e| e.clip_id.ends_with("_00")));
        assert_eq!(train.subjects(), test.subjects());
        c.train_clips = 4;
        assert!(c.split(&index).is_err());
        c.holdout = Holdout::Subjects;
        c.train_subjects = 2;
        let (train, test) = c.split(&index).unwrap();
        assert_eq!((train.subjects(), test.subjects()), (vec![0, 1], vec![2]));
    }
}
