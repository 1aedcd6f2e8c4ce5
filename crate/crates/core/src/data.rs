//! On-disk dataset layout, clip index, and window sampling.
//!
//! ```text
//! root/manifest.tsv                 clip_id  subject_id  condition  n_frames  [key=value ...]
//! root/<clip_id>/frame_00000.ppm    P6, 32x64, maxval 255
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::{Frame, CHANNELS, FRAME_LEN, HEIGHT, WIDTH};
use crate::ppm;
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "manifest.tsv";
/// Clips shorter than this are listed but never used for training.
pub const MIN_CLIP_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipEntry {
    pub clip_id: String,
    pub subject_id: u32,
    pub condition: String,
    pub n_frames: usize,
    /// Optional generator record, in manifest order.
    pub fields: Vec<(String, String)>,
}

pub fn frame_path(root: &Path, clip_id: &str, t: usize) -> PathBuf {
    root.join(clip_id).join(format!("frame_{t:05}.ppm"))
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\') && s != "." && s != ".."
}

pub fn format_manifest(entries: &[ClipEntry]) -> String {
    let mut out = String::from("# clip_id\tsubject_id\tcondition\tn_frames\tfields\n");
    for e in entries {
        write!(out, "{}\t{}\t{}\t{}", e.clip_id, e.subject_id, e.condition, e.n_frames).unwrap();
        for (k, v) in &e.fields {
            write!(out, "\t{k}={v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ClipEntry>> {
    let mut entries = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(bad(format!("expected at least 4 tab-separated columns, got {}", cols.len())));
        }
        let clip_id = cols[0].to_string();
        if !valid_token(&clip_id) {
            return Err(bad(format!("invalid clip id {clip_id:?}")));
        }
        if !ids.insert(clip_id.clone()) {
            return Err(bad(format!("duplicate clip id {clip_id}")));
        }
        let subject_id = cols[1]
            .parse()
            .map_err(|_| bad(format!("subject id {:?} is not a non-negative integer", cols[1])))?;
        let condition = cols[2].to_string();
        if !valid_token(&condition) {
            return Err(bad(format!("invalid condition {condition:?}")));
        }
        let n_frames = cols[3]
            .parse()
            .map_err(|_| bad(format!("frame count {:?} is not a non-negative integer", cols[3])))?;
        let fields = cols[4..]
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| bad(format!("field {kv:?} is not key=value")))
            })
            .collect::<Result<_>>()?;
        entries.push(ClipEntry {
            clip_id,
            subject_id,
            condition,
            n_frames,
            fields,
        });
    }
    Ok(entries)
}

/// Streams clips to disk and writes the manifest last.
pub struct DatasetWriter {
    root: PathBuf,
    entries: Vec<ClipEntry>,
}

impl DatasetWriter {
    /// Refuses a non-empty `root` unless `force`, in which case its contents
    /// are removed first.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        let io = |e| Error::io(format!("preparing {}", root.display()), e);
        if root.exists() {
            let mut children = fs::read_dir(root).map_err(io)?.peekable();
            if children.peek().is_some() {
                if !force {
                    return Err(Error::invalid(format!(
                        "{} exists and is not empty (use --force to overwrite)",
                        root.display()
                    )));
                }
                for child in children {
                    let path = child.map_err(io)?.path();
                    if path.is_dir() {
                        fs::remove_dir_all(&path).map_err(io)?;
                    } else {
                        fs::remove_file(&path).map_err(io)?;
                    }
                }
            }
        } else {
            fs::create_dir_all(root).map_err(io)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn add_clip(&mut self, entry: ClipEntry, frames: &[Frame]) -> Result<()> {
        if !valid_token(&entry.clip_id) || !valid_token(&entry.condition) {
            return Err(Error::invalid(format!("invalid clip id or condition in {entry:?}")));
        }
        if entry.n_frames != frames.len() {
            return Err(Error::contract("n_frames must equal the number of frames"));
        }
        if self.entries.iter().any(|e| e.clip_id == entry.clip_id) {
            return Err(Error::invalid(format!("duplicate clip id {}", entry.clip_id)));
        }
        let dir = self.root.join(&entry.clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (t, frame) in frames.iter().enumerate() {
            ppm::write(&frame_path(&self.root, &entry.clip_id, t), &frame.to_rgb())?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST);
        fs::write(&path, format_manifest(&self.entries))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

/// Immutable clip listing. Frames are read on demand.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    clips: Vec<ClipEntry>,
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::NoManifest(root.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let clips = parse_manifest(&text, &path)?;
        for clip in &clips {
            for t in 0..clip.n_frames {
                let f = frame_path(root, &clip.clip_id, t);
                if !f.is_file() {
                    return Err(Error::Image {
                        path: f,
                        reason: "missing frame file".into(),
                    });
                }
            }
            if clip.n_frames < MIN_CLIP_LEN {
                log::warn!(
                    "clip {} has {} frames (< {MIN_CLIP_LEN}); excluded from training",
                    clip.clip_id,
                    clip.n_frames
                );
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            clips,
        })
    }

    /// An index over an explicit clip list, for tests and subsets.
    pub fn from_entries(root: &Path, clips: Vec<ClipEntry>) -> Self {
        Self {
            root: root.to_path_buf(),
            clips,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Every listed clip, including ones too short for training.
    pub fn clips(&self) -> &[ClipEntry] {
        &self.clips
    }

    pub fn clip(&self, i: usize) -> &ClipEntry {
        &self.clips[i]
    }

    pub fn find(&self, clip_id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.clip_id == clip_id)
    }

    /// Positions of clips long enough for training.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.clips[i].n_frames >= MIN_CLIP_LEN)
            .collect()
    }

    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.clips.iter().map(|c| c.subject_id).collect();
        set.into_iter().collect()
    }

    /// Dense labels `0..K` for the subjects of this index, in id order.
    pub fn label_map(&self) -> BTreeMap<u32, usize> {
        self.subjects().into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    }

    pub fn filter(&self, keep: impl Fn(&ClipEntry) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            clips: self.clips.iter().filter(|c| keep(c)).cloned().collect(),
        }
    }

    pub fn load_frame(&self, i: usize, t: usize) -> Result<Frame> {
        let clip = &self.clips[i];
        let path = frame_path(&self.root, &clip.clip_id, t);
        let img = ppm::read(&path)?;
        Frame::from_rgb(&img).map_err(|e| Error::Image {
            path,
            reason: e.to_string(),
        })
    }

    pub fn load_clip(&self, i: usize) -> Result<Vec<Frame>> {
        (0..self.clips[i].n_frames).map(|t| self.load_frame(i, t)).collect()
    }
}

/// A crop of consecutive frames from one clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// Position in the index the window was drawn from.
    pub clip: usize,
    pub start: usize,
    pub len: usize,
    pub subject_id: u32,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub windows: Vec<Window>,
}

fn window_at(index: &DatasetIndex, clip: usize, len: usize, rng: &mut impl Rng) -> Window {
    let entry = index.clip(clip);
    Window {
        clip,
        start: rng.gen_range(0..=entry.n_frames - len),
        len,
        subject_id: entry.subject_id,
        condition: entry.condition.clone(),
    }
}

/// `n_clips` windows of `window` frames from distinct clips.
pub fn sample_batch(index: &DatasetIndex, n_clips: usize, window: usize, rng: &mut impl Rng) -> Result<Batch> {
    if window == 0 || window > MIN_CLIP_LEN {
        return Err(Error::invalid(format!("window must be in 1..={MIN_CLIP_LEN}")));
    }
    let eligible = index.eligible();
    if eligible.len() < n_clips || n_clips == 0 {
        return Err(Error::invalid(format!(
            "batch needs {n_clips} eligible clips but the index has {}; lower the batch clips setting",
            eligible.len()
        )));
    }
    let picks = sample(rng, eligible.len(), n_clips);
    let windows = picks
        .into_iter()
        .map(|k| window_at(index, eligible[k], window, rng))
        .collect();
    Ok(Batch { windows })
}

/// Two windows of one subject under distinct, uniformly chosen conditions.
pub fn pair_conditions(
    index: &DatasetIndex,
    subject_id: u32,
    window: usize,
    rng: &mut impl Rng,
) -> Result<(Window, Window)> {
    let mut by_condition: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in index.eligible() {
        let c = index.clip(i);
        if c.subject_id == subject_id {
            by_condition.entry(c.condition.as_str()).or_default().push(i);
        }
    }
    if by_condition.len() < 2 {
        return Err(Error::invalid(format!(
            "subject {subject_id} has clips in {} condition(s); need 2",
            by_condition.len()
        )));
    }
    let groups: Vec<&Vec<usize>> = by_condition.values().collect();
    let pick = sample(rng, groups.len(), 2);
    let (a, b) = (groups[pick.index(0)], groups[pick.index(1)]);
    let ca = a[rng.gen_range(0..a.len())];
    let cb = b[rng.gen_range(0..b.len())];
    Ok((window_at(index, ca, window, rng), window_at(index, cb, window, rng)))
}

/// Gait-similarity pairs inside a batch: for each subject whose windows span
/// at least two conditions, one pair of window positions with distinct
/// conditions, chosen uniformly over condition pairs and then windows.
pub fn batch_condition_pairs(batch: &Batch, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut by_subject: BTreeMap<u32, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, w) in batch.windows.iter().enumerate() {
        by_subject
            .entry(w.subject_id)
            .or_default()
            .entry(w.condition.as_str())
            .or_default()
            .push(i);
    }
    let mut pairs = Vec::new();
    for conds in by_subject.values() {
        if conds.len() < 2 {
            continue;
        }
        let groups: Vec<&Vec<usize>> = conds.values().collect();
        let pick = sample(rng, groups.len(), 2);
        let (a, b) = (groups[pick.index(0)], groups[pick.index(1)]);
        pairs.push((a[rng.gen_range(0..a.len())], b[rng.gen_range(0..b.len())]));
    }
    pairs
}

/// First `n_train` subjects (by id) for training, the rest for testing.
pub fn split_train_test(index: &DatasetIndex, n_train: usize) -> Result<(DatasetIndex, DatasetIndex)> {
    let subjects = index.subjects();
    if n_train == 0 || n_train >= subjects.len() {
        return Err(Error::invalid(format!(
            "n_train_subjects must be in 1..{}, got {n_train}",
            subjects.len()
        )));
    }
    let train: BTreeSet<u32> = subjects[..n_train].iter().copied().collect();
    Ok((
        index.filter(|c| train.contains(&c.subject_id)),
        index.filter(|c| !train.contains(&c.subject_id)),
    ))
}

/// Position of each clip among the clips of its subject and condition, in
/// manifest order.
pub fn clip_ordinals(index: &DatasetIndex) -> Vec<usize> {
    let mut seen: BTreeMap<(u32, &str), usize> = BTreeMap::new();
    index
        .clips()
        .iter()
        .map(|c| {
            let k = seen.entry((c.subject_id, c.condition.as_str())).or_insert(0);
            *k += 1;
            *k - 1
        })
        .collect()
}

/// All eligible clips of an index held in memory as 8-bit values.
pub struct FrameBank {
    clips: Vec<Option<Vec<u8>>>,
}

impl FrameBank {
    pub fn load(index: &DatasetIndex) -> Result<Self> {
        let mut clips = vec![None; index.clips().len()];
        for i in index.eligible() {
            let mut bytes = Vec::with_capacity(index.clip(i).n_frames * FRAME_LEN);
            for frame in index.load_clip(i)? {
                bytes.extend(frame.pixels().iter().map(|&v| (v * 255.0).round() as u8));
            }
            clips[i] = Some(bytes);
        }
        Ok(Self { clips })
    }

    /// Quantised values of frame `t` of clip `clip`.
    pub fn frame_bytes(&self, clip: usize, t: usize) -> &[u8] {
        let bytes = self.clips[clip].as_ref().expect("clip is held in the bank");
        &bytes[t * FRAME_LEN..(t + 1) * FRAME_LEN]
    }

    /// Frames of `windows` as one time-major stack: row `t * B + b` holds
    /// frame `t` of window `b`.
    pub fn time_major<T: Scalar>(&self, windows: &[Window]) -> Tensor<T> {
        let steps = windows.first().map_or(0, |w| w.len);
        assert!(windows.iter().all(|w| w.len == steps), "windows must share a length");
        let mut data = Vec::with_capacity(steps * windows.len() * FRAME_LEN);
        for t in 0..steps {
            for w in windows {
                data.extend(self.frame_bytes(w.clip, w.start + t).iter().map(|&b| T::from_f64(b as f64 / 255.0)));
            }
        }
        let shape = [steps * windows.len(), CHANNELS, HEIGHT, WIDTH];
        Tensor::new(&shape, data).expect("consistent stack")
    }
}
