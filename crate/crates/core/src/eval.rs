//! Gallery/probe matching, biometric metrics and the ablation runner.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use crate::config::{Disentangle, IdLoss, RunConfig};
use crate::data::{clip_ordinals, ClipEntry, DatasetIndex, FrameBank};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::model::GaitNet;
use crate::train::train;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("cosine: lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// A clip's gait signature with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub clip_id: String,
    pub subject_id: u32,
    pub features: Vec<f64>,
}

/// Cosine similarities of probes (rows) against gallery entries (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub probe_ids: Vec<String>,
    pub probe_subjects: Vec<u32>,
    pub gallery_ids: Vec<String>,
    pub gallery_subjects: Vec<u32>,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(probe_subjects: Vec<u32>, gallery_subjects: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if values.len() != probe_subjects.len() * gallery_subjects.len() {
            return Err(Error::contract("score matrix shape does not match its labels"));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract("scores must lie in [-1, 1]"));
        }
        let ids = |n: usize, p: &str| (0..n).map(|i| format!("{p}{i}")).collect();
        Ok(Self {
            probe_ids: ids(probe_subjects.len(), "p"),
            gallery_ids: ids(gallery_subjects.len(), "g"),
            probe_subjects,
            gallery_subjects,
            values,
        })
    }

    pub fn from_signatures(probes: &[Signature], gallery: &[Signature]) -> Result<Self> {
        let mut values = Vec::with_capacity(probes.len() * gallery.len());
        for p in probes {
            for g in gallery {
                values.push(cosine_similarity(&p.features, &g.features)?);
            }
        }
        Ok(Self {
            probe_ids: probes.iter().map(|s| s.clip_id.clone()).collect(),
            probe_subjects: probes.iter().map(|s| s.subject_id).collect(),
            gallery_ids: gallery.iter().map(|s| s.clip_id.clone()).collect(),
            gallery_subjects: gallery.iter().map(|s| s.subject_id).collect(),
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.probe_subjects.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_subjects.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols()..(r + 1) * self.cols()]
    }

    /// Same-subject and cross-subject scores.
    pub fn genuine_impostor(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut gen, mut imp) = (Vec::new(), Vec::new());
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                if self.probe_subjects[r] == self.gallery_subjects[c] {
                    gen.push(self.get(r, c));
                } else {
                    imp.push(self.get(r, c));
                }
            }
        }
        (gen, imp)
    }

    /// Header row of gallery clip ids, then one row per probe.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe");
        for g in &self.gallery_ids {
            s.push(',');
            s.push_str(g);
        }
        s.push('\n');
        for r in 0..self.rows() {
            s.push_str(&self.probe_ids[r]);
            for v in self.row(r) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Gallery columns of row `r` ordered by descending score, ties by index.
pub fn ranked_gallery(scores: &ScoreMatrix, r: usize) -> Vec<usize> {
    let row = scores.row(r);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

pub fn rank_k_accuracy(scores: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("rank-k needs k >= 1"));
    }
    if scores.rows() == 0 || scores.cols() == 0 {
        return Err(Error::invalid("rank-k of an empty score matrix"));
    }
    let hits = (0..scores.rows())
        .filter(|&r| {
            ranked_gallery(scores, r)
                .iter()
                .take(k)
                .any(|&c| scores.gallery_subjects[c] == scores.probe_subjects[r])
        })
        .count();
    Ok(hits as f64 / scores.rows() as f64)
}

/// True when `count` of `total` impostors accepted stays within `far`.
fn within_far(count: usize, total: usize, far: f64) -> bool {
    count as f64 / total as f64 <= far
}

/// Fraction of genuine scores at or above the threshold θ, where θ is the
/// smallest observed score with at most a `far` fraction of impostor scores
/// at or above it. If no observed score qualifies nothing is accepted.
pub fn tdr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::invalid("TDR@FAR needs genuine and impostor scores"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::invalid(format!("FAR must lie in (0, 1), got {far}")));
    }
    if genuine.iter().chain(impostor).any(|v| v.is_nan()) {
        return Err(Error::invalid("TDR@FAR of NaN scores"));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    // Largest number of impostors that may pass.
    let allowed = (0..=imp.len()).rev().find(|&m| within_far(m, imp.len(), far)).unwrap_or(0);
    if allowed == imp.len() {
        return Ok(1.0);
    }
    // Any threshold above this score admits at most `allowed` impostors;
    // the smallest observed such threshold accepts exactly the genuine
    // scores above it.
    let cut = imp[allowed];
    Ok(genuine.iter().filter(|&&s| s > cut).count() as f64 / genuine.len() as f64)
}

/// Clip filter. `None` fields match everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selector {
    pub subjects: Option<BTreeSet<u32>>,
    pub conditions: Option<BTreeSet<String>>,
    pub clip_ids: Option<BTreeSet<String>>,
    /// Positions among the clips of one subject and condition.
    pub ordinals: Option<Range<usize>>,
}

impl Selector {
    /// `ordinal` is the clip's position within its subject and condition.
    pub fn matches(&self, c: &ClipEntry, ordinal: usize) -> bool {
        self.subjects.as_ref().is_none_or(|s| s.contains(&c.subject_id))
            && self.conditions.as_ref().is_none_or(|s| s.contains(&c.condition))
            && self.clip_ids.as_ref().is_none_or(|s| s.contains(&c.clip_id))
            && self.ordinals.as_ref().is_none_or(|r| r.contains(&ordinal))
    }

    pub fn condition(tag: &str) -> Self {
        Self {
            conditions: Some([tag.to_string()].into()),
            ..Self::default()
        }
    }

    pub fn with_subjects(mut self, subjects: impl IntoIterator<Item = u32>) -> Self {
        self.subjects = Some(subjects.into_iter().collect());
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub name: String,
    pub gallery: Selector,
    pub probe: Selector,
    pub ranks: Vec<usize>,
    pub fars: Vec<f64>,
}

impl Protocol {
    /// Gallery in condition `gallery`, probes in condition `probe`. When the
    /// two conditions agree, each subject's first clip is the gallery and
    /// its later clips are probes.
    pub fn condition_change(gallery: &str, probe: &str) -> Self {
        let (mut g, mut p) = (Selector::condition(gallery), Selector::condition(probe));
        if gallery == probe {
            g.ordinals = Some(0..1);
            p.ordinals = Some(1..usize::MAX);
        }
        Self {
            name: format!("{gallery}-{probe}"),
            gallery: g,
            probe: p,
            ranks: vec![1, 5],
            fars: vec![0.01, 0.05],
        }
    }

    pub fn restrict_subjects(mut self, subjects: &[u32]) -> Self {
        self.gallery = self.gallery.with_subjects(subjects.iter().copied());
        self.probe = self.probe.with_subjects(subjects.iter().copied());
        self
    }

    /// Eligible gallery and probe clip indices, checked for validity.
    pub fn select(&self, index: &DatasetIndex) -> Result<(Vec<usize>, Vec<usize>)> {
        let ordinals = clip_ordinals(index);
        let pick = |s: &Selector| -> Vec<usize> {
            index
                .eligible()
                .into_iter()
                .filter(|&i| s.matches(index.clip(i), ordinals[i]))
                .collect()
        };
        let (gallery, probe) = (pick(&self.gallery), pick(&self.probe));
        self.validate_sets(index, &gallery, &probe)?;
        Ok((gallery, probe))
    }

    fn validate_sets(&self, index: &DatasetIndex, gallery: &[usize], probe: &[usize]) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("protocol {}: {m}", self.name)));
        if self.ranks.contains(&0) || self.fars.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return fail("ranks must be >= 1 and FARs in (0, 1)".into());
        }
        if gallery.is_empty() || probe.is_empty() {
            return fail(format!("{} gallery and {} probe clips", gallery.len(), probe.len()));
        }
        let g: BTreeSet<usize> = gallery.iter().copied().collect();
        if let Some(&i) = probe.iter().find(|i| g.contains(i)) {
            return fail(format!("clip {} is both gallery and probe", index.clip(i).clip_id));
        }
        let enrolled: BTreeSet<u32> = gallery.iter().map(|&i| index.clip(i).subject_id).collect();
        if let Some(&i) = probe.iter().find(|&&i| !enrolled.contains(&index.clip(i).subject_id)) {
            return fail(format!("probe subject {} has no gallery clip", index.clip(i).subject_id));
        }
        Ok(())
    }
}

/// `(protocol, metric, value)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub protocol: String,
    pub metrics: Vec<(String, f64)>,
}

impl Report {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|(m, _)| m == metric).map(|&(_, v)| v)
    }

    pub fn csv_rows(&self) -> String {
        self.metrics
            .iter()
            .map(|(m, v)| format!("{},{m},{v}\n", self.protocol))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("protocol,metric,value\n{}", self.csv_rows())
    }
}

/// Metrics of `protocol` over a finished score matrix.
pub fn score_report(protocol: &Protocol, scores: &ScoreMatrix) -> Result<Report> {
    let mut metrics = Vec::new();
    for &k in &protocol.ranks {
        metrics.push((format!("rank-{k}"), rank_k_accuracy(scores, k)?));
    }
    if !protocol.fars.is_empty() {
        let (gen, imp) = scores.genuine_impostor();
        for &far in &protocol.fars {
            let value = if imp.is_empty() { f64::NAN } else { tdr_at_far(&gen, &imp, far)? };
            metrics.push((format!("tdr@far={far}"), value));
        }
    }
    Ok(Report {
        protocol: protocol.name.clone(),
        metrics,
    })
}

pub fn clip_signature(net: &GaitNet, index: &DatasetIndex, i: usize) -> Result<Signature> {
    let frames = index.load_clip(i)?;
    let clip = index.clip(i);
    Ok(Signature {
        clip_id: clip.clip_id.clone(),
        subject_id: clip.subject_id,
        features: net.gait_signature(&frames)?.into_iter().map(f64::from).collect(),
    })
}

/// Signatures for every gallery and probe clip, scores and metrics.
pub fn run_protocol(protocol: &Protocol, index: &DatasetIndex, net: &GaitNet) -> Result<(Report, ScoreMatrix)> {
    let (gallery, probe) = protocol.select(index)?;
    let sign = |ids: &[usize]| ids.iter().map(|&i| clip_signature(net, index, i)).collect::<Result<Vec<_>>>();
    let scores = ScoreMatrix::from_signatures(&sign(&probe)?, &sign(&gallery)?)?;
    Ok((score_report(protocol, &scores)?, scores))
}

/// Mean per-pixel squared error of plain reconstruction over the first
/// `frames_per_clip` frames of each listed clip.
pub fn reconstruction_mse(net: &GaitNet, index: &DatasetIndex, clips: &[usize], frames_per_clip: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for &i in clips {
        let frames: Vec<Frame> = index.load_clip(i)?.into_iter().take(frames_per_clip).collect();
        if frames.is_empty() {
            continue;
        }
        let (fa, fg) = net.encode(&frames)?;
        for (out, target) in net.decode(&fa, &fg)?.iter().zip(&frames) {
            total += out.mse(target);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("reconstruction error over no frames"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub disentangle: Disentangle,
    pub id_loss: IdLoss,
    pub rank1: f64,
}

pub const ABLATION_HEADER: &str = "disentangle,id_loss,rank1";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.disentangle, r.id_loss, r.rank1);
    }
    s
}

/// The full grid of disentanglement settings against identification losses.
pub fn full_grid() -> Vec<(Disentangle, IdLoss)> {
    let mut cells = Vec::new();
    for d in [Disentangle::None, Disentangle::XRecon, Disentangle::XReconGaitSim] {
        for l in [IdLoss::Single, IdLoss::Avg, IdLoss::IncAvg] {
            cells.push((d, l));
        }
    }
    cells
}

/// Train one model per cell from the same seed and epoch budget and report
/// rank-1 on `protocol` over `eval_index`.
pub fn run_ablation(
    base: &RunConfig,
    train_index: &DatasetIndex,
    bank: &FrameBank,
    eval_index: &DatasetIndex,
    protocol: &Protocol,
    cells: &[(Disentangle, IdLoss)],
) -> Result<Vec<AblationRow>> {
    protocol.select(eval_index)?;
    let mut rows = Vec::with_capacity(cells.len());
    for &(disentangle, id_loss) in cells {
        let cfg = RunConfig {
            disentangle,
            id_loss,
            ..base.clone()
        };
        let outcome = train(&cfg, train_index, bank, None)?;
        let (report, _) = run_protocol(protocol, eval_index, &outcome.net)?;
        let rank1 = report.get("rank-1").unwrap_or(f64::NAN);
        log::info!("ablation {disentangle} {id_loss}: rank-1 {rank1:.3}");
        rows.push(AblationRow {
            disentangle,
            id_loss,
            rank1,
        });
    }
    Ok(rows)
}
