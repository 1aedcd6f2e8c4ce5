//! Procedural frontal-view stick-figure walker.
//!
//! Identity lives in [`GaitParams`]; clothing, colour and carried objects live
//! in [`AppearanceParams`]. Rendering is a pure function of the spec and time.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClipEntry, DatasetWriter};
use crate::error::{Error, Result};
use crate::frame::{Frame, CHANNELS, FRAME_LEN, HEIGHT, WIDTH};

/// One value per articulated joint family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limbs {
    pub hip: f64,
    pub knee: f64,
    pub shoulder: f64,
    pub elbow: f64,
}

impl Limbs {
    fn to_array(self) -> [f64; 4] {
        [self.hip, self.knee, self.shoulder, self.elbow]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaitParams {
    /// Cycles per second.
    pub stride_frequency: f64,
    /// Swing amplitudes in radians.
    pub amplitudes: Limbs,
    pub phases: Limbs,
    /// Vertical pelvis bob in pixels.
    pub torso_bob: f64,
}

impl GaitParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.stride_frequency) {
            return Err(Error::invalid(format!(
                "stride frequency {} outside [0.5, 2.0] Hz",
                self.stride_frequency
            )));
        }
        if self
            .amplitudes
            .to_array()
            .iter()
            .any(|a| !(0.0..=PI / 2.0).contains(a))
        {
            return Err(Error::invalid("limb amplitudes must lie in [0, pi/2]"));
        }
        if !(self.torso_bob >= 0.0) || self.phases.to_array().iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("torso bob and phases must be finite, bob >= 0"));
        }
        Ok(())
    }

    /// Distance to another gait for the identity-separation rule: the largest
    /// gap over frequency and the four amplitudes.
    pub fn separation(&self, other: &GaitParams) -> f64 {
        let amp = self
            .amplitudes
            .to_array()
            .iter()
            .zip(other.amplitudes.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        amp.max((self.stride_frequency - other.stride_frequency).abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coat {
    /// Fraction of the thigh covered below the pelvis.
    pub extent: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bag {
    /// Horizontal offset from the pelvis in body units; sign picks the side.
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceParams {
    /// Limb stroke width in pixels at unit scale.
    pub limb_thickness: f64,
    pub body_color: [f64; 3],
    pub coat: Option<Coat>,
    pub bag: Option<Bag>,
}

impl AppearanceParams {
    pub fn validate(&self) -> Result<()> {
        let colour_ok = |c: &[f64; 3]| c.iter().all(|v| *v > 0.0 && *v <= 1.0);
        if !(self.limb_thickness > 0.0 && self.limb_thickness <= 8.0) {
            return Err(Error::invalid("limb thickness must be in (0, 8] pixels"));
        }
        if !colour_ok(&self.body_color) || self.coat.is_some_and(|c| !colour_ok(&c.color)) {
            return Err(Error::invalid("colours must lie in (0, 1]"));
        }
        if self.coat.is_some_and(|c| !(0.0..=1.0).contains(&c.extent)) {
            return Err(Error::invalid("coat extent must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkerSpec {
    pub subject_id: u32,
    pub gait: GaitParams,
    pub appearance: AppearanceParams,
    pub speed_multiplier: f64,
    /// Picks where in the gait cycle the clip starts.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Nm,
    Cl,
    Bg,
    Fast,
    Slow,
}

impl Condition {
    pub const ALL: [Condition; 5] = [Self::Nm, Self::Cl, Self::Bg, Self::Fast, Self::Slow];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Nm => "NM",
            Self::Cl => "CL",
            Self::Bg => "BG",
            Self::Fast => "FAST",
            Self::Slow => "SLOW",
        }
    }

    pub fn speed(self) -> f64 {
        match self {
            Self::Fast => 1.3,
            Self::Slow => 0.7,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown condition {s:?} (NM, CL, BG, FAST, SLOW)")))
    }
}

// Body geometry in body units, y pointing down, origin at the pelvis.
const NECK_Y: f64 = -16.0;
const HEAD_Y: f64 = -21.0;
const HEAD_RADIUS: f64 = 4.0;
const HIP_HALF_WIDTH: f64 = 2.5;
const SHOULDER_HALF_WIDTH: f64 = 3.5;
const THIGH: f64 = 12.0;
const SHIN: f64 = 12.0;
const UPPER_ARM: f64 = 9.0;
const FOREARM: f64 = 8.0;
const ARM_SPLAY: f64 = 0.15;
const ANCHOR: (f64, f64) = (WIDTH as f64 / 2.0, 35.0);
const BASE_SCALE: f64 = 0.9;
const MAX_GROWTH: f64 = 1.25;
/// Scale gained per leg length walked towards the camera.
const APPROACH: f64 = 0.025;
const BAG_COLOR: [f64; 3] = [0.45, 0.3, 0.2];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// The 13 skeleton joints in image coordinates (pixel centres at `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Skeleton {
    pub head: Point,
    pub neck: Point,
    pub pelvis: Point,
    pub hips: [Point; 2],
    pub knees: [Point; 2],
    pub ankles: [Point; 2],
    pub elbows: [Point; 2],
    pub hands: [Point; 2],
    /// Pixels per body unit at this instant.
    pub scale: f64,
}

impl Skeleton {
    pub fn joints(&self) -> [Point; 13] {
        [
            self.head,
            self.neck,
            self.pelvis,
            self.hips[0],
            self.hips[1],
            self.knees[0],
            self.knees[1],
            self.ankles[0],
            self.ankles[1],
            self.elbows[0],
            self.elbows[1],
            self.hands[0],
            self.hands[1],
        ]
    }
}

fn unit_from_seed(seed: u64) -> f64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Phase of the gait cycle at frame `t`, including the seed's start shift.
pub fn cycle_phase(spec: &WalkerSpec, t: f64, fps: f64) -> f64 {
    TAU * spec.gait.stride_frequency * spec.speed_multiplier * t / fps + TAU * unit_from_seed(spec.seed)
}

/// Joint angles for the left side; the right side is half a cycle later.
fn swing(gait: &GaitParams, phase: f64, side: usize) -> Limbs {
    let p = phase + side as f64 * PI;
    let a = gait.amplitudes;
    let o = gait.phases;
    Limbs {
        hip: a.hip * (p + o.hip).sin(),
        knee: a.knee * (p + o.knee).sin(),
        shoulder: a.shoulder * (p + o.shoulder).sin(),
        elbow: a.elbow * (p + o.elbow).sin(),
    }
}

/// Analytic joint positions of `spec` at frame `t`.
pub fn skeleton(spec: &WalkerSpec, t: f64, fps: f64) -> Skeleton {
    let gait = &spec.gait;
    let phase = cycle_phase(spec, t, fps);
    // Two steps per cycle, each roughly 2 sin(hip amplitude) leg lengths.
    let walked = 4.0 * gait.amplitudes.hip.sin() * gait.stride_frequency * spec.speed_multiplier * t / fps;
    let scale = BASE_SCALE * (1.0 + APPROACH * walked).min(MAX_GROWTH);
    let bob = gait.torso_bob * (2.0 * (phase + gait.phases.hip)).sin();
    let pelvis = Point {
        x: ANCHOR.0,
        y: ANCHOR.1 + bob,
    };
    let at = |dx: f64, dy: f64| Point {
        x: pelvis.x + dx * scale,
        y: pelvis.y + dy * scale,
    };
    let limb = |from: Point, angle: f64, len: f64| Point {
        x: from.x + angle.sin() * len * scale,
        y: from.y + angle.cos() * len * scale,
    };
    let mut hips = [pelvis; 2];
    let mut knees = [pelvis; 2];
    let mut ankles = [pelvis; 2];
    let mut elbows = [pelvis; 2];
    let mut hands = [pelvis; 2];
    for side in 0..2 {
        let sign = if side == 0 { -1.0 } else { 1.0 };
        let s = swing(gait, phase, side);
        hips[side] = at(sign * HIP_HALF_WIDTH, 0.0);
        knees[side] = limb(hips[side], s.hip, THIGH);
        ankles[side] = limb(knees[side], s.hip + s.knee, SHIN);
        let shoulder = at(sign * SHOULDER_HALF_WIDTH, NECK_Y);
        let upper = sign * ARM_SPLAY + s.shoulder;
        elbows[side] = limb(shoulder, upper, UPPER_ARM);
        hands[side] = limb(elbows[side], upper + s.elbow, FOREARM);
    }
    Skeleton {
        head: at(0.0, HEAD_Y),
        neck: at(0.0, NECK_Y),
        pelvis,
        hips,
        knees,
        ankles,
        elbows,
        hands,
        scale,
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let u = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.x - a.x - u * abx, p.y - a.y - u * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Signed distance to a convex polygon given counter-clockwise in screen space.
fn polygon_distance(p: Point, poly: &[Point]) -> f64 {
    let mut inside = f64::NEG_INFINITY;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let len = (ex * ex + ey * ey).sqrt();
        // outward normal for this winding
        let d = ((p.x - a.x) * ey - (p.y - a.y) * ex) / len;
        inside = inside.max(d);
    }
    inside
}

enum Shape {
    Capsule(Point, Point, f64),
    Disc(Point, f64),
    Polygon(Vec<Point>),
}

impl Shape {
    /// Pixel coverage with a one-pixel linear ramp across the edge.
    fn coverage(&self, p: Point) -> f64 {
        let edge = match self {
            Shape::Capsule(a, b, r) => segment_distance(p, *a, *b) - r,
            Shape::Disc(c, r) => ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt() - r,
            Shape::Polygon(poly) => polygon_distance(p, poly),
        };
        (0.5 - edge).clamp(0.0, 1.0)
    }
}

fn layers(gait_of: &WalkerSpec, appearance: &AppearanceParams, t: f64, fps: f64) -> Vec<(Shape, [f64; 3])> {
    let sk = skeleton(gait_of, t, fps);
    let s = sk.scale;
    let r = appearance.limb_thickness * s / 2.0;
    let body = appearance.body_color;
    let mut out = Vec::with_capacity(16);
    for side in 0..2 {
        out.push((Shape::Capsule(sk.hips[side], sk.knees[side], r), body));
        out.push((Shape::Capsule(sk.knees[side], sk.ankles[side], r), body));
    }
    out.push((Shape::Capsule(sk.neck, sk.pelvis, r * 1.4), body));
    out.push((
        Shape::Capsule(
            Point { x: sk.neck.x - SHOULDER_HALF_WIDTH * s, y: sk.neck.y },
            Point { x: sk.neck.x + SHOULDER_HALF_WIDTH * s, y: sk.neck.y },
            r,
        ),
        body,
    ));
    if let Some(coat) = appearance.coat {
        let top = 4.0 * s + r;
        let bottom = 5.5 * s + r;
        let hem = sk.pelvis.y + coat.extent * THIGH * s;
        let poly = vec![
            Point { x: sk.neck.x - top, y: sk.neck.y },
            Point { x: sk.pelvis.x - bottom, y: hem },
            Point { x: sk.pelvis.x + bottom, y: hem },
            Point { x: sk.neck.x + top, y: sk.neck.y },
        ];
        out.push((Shape::Polygon(poly), coat.color));
    }
    if let Some(bag) = appearance.bag {
        let x = sk.pelvis.x + bag.offset * s;
        out.push((
            Shape::Capsule(
                Point { x, y: sk.pelvis.y - 2.0 * s },
                Point { x, y: sk.pelvis.y + 3.0 * s },
                3.0 * s,
            ),
            BAG_COLOR,
        ));
    }
    for side in 0..2 {
        let shoulder = Point {
            x: sk.neck.x + if side == 0 { -1.0 } else { 1.0 } * SHOULDER_HALF_WIDTH * s,
            y: sk.neck.y,
        };
        out.push((Shape::Capsule(shoulder, sk.elbows[side], r * 0.9), body));
        out.push((Shape::Capsule(sk.elbows[side], sk.hands[side], r * 0.9), body));
    }
    out.push((Shape::Disc(sk.head, HEAD_RADIUS * s), body));
    out
}

fn rasterize(shapes: &[(Shape, [f64; 3])]) -> Frame {
    let mut pixels = vec![0.0f32; FRAME_LEN];
    let plane = HEIGHT * WIDTH;
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let p = Point {
                x: x as f64 + 0.5,
                y: y as f64 + 0.5,
            };
            let mut rgb = [0.0f64; 3];
            for (shape, colour) in shapes {
                let cov = shape.coverage(p);
                if cov > 0.0 {
                    for c in 0..CHANNELS {
                        rgb[c] = colour[c] * cov + rgb[c] * (1.0 - cov);
                    }
                }
            }
            for c in 0..CHANNELS {
                pixels[c * plane + y * WIDTH + x] = rgb[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Frame::new(pixels).expect("rasterizer output is in range")
}

pub fn render_frame(spec: &WalkerSpec, t: usize, fps: f64) -> Frame {
    hybrid_render(spec, spec, t, fps)
}

/// Motion of `gait_of` (gait, speed and start phase) dressed in the
/// appearance of `appearance_of`.
pub fn hybrid_render(gait_of: &WalkerSpec, appearance_of: &WalkerSpec, t: usize, fps: f64) -> Frame {
    rasterize(&layers(gait_of, &appearance_of.appearance, t as f64, fps))
}

/// Manifest key/value encoding of a spec.
pub fn spec_fields(spec: &WalkerSpec, fps: f64) -> Vec<(String, String)> {
    let g = &spec.gait;
    let a = &spec.appearance;
    let rgb = |c: [f64; 3]| format!("{},{},{}", c[0], c[1], c[2]);
    let mut f: Vec<(String, String)> = vec![
        ("fps".into(), fps.to_string()),
        ("seed".into(), spec.seed.to_string()),
        ("speed".into(), spec.speed_multiplier.to_string()),
        ("freq".into(), g.stride_frequency.to_string()),
    ];
    for (name, v) in ["hip", "knee", "shoulder", "elbow"]
        .iter()
        .zip(g.amplitudes.to_array())
    {
        f.push((format!("amp_{name}"), v.to_string()));
    }
    for (name, v) in ["hip", "knee", "shoulder", "elbow"]
        .iter()
        .zip(g.phases.to_array())
    {
        f.push((format!("phase_{name}"), v.to_string()));
    }
    f.push(("bob".into(), g.torso_bob.to_string()));
    f.push(("thickness".into(), a.limb_thickness.to_string()));
    f.push(("color".into(), rgb(a.body_color)));
    if let Some(coat) = a.coat {
        f.push(("coat_extent".into(), coat.extent.to_string()));
        f.push(("coat_color".into(), rgb(coat.color)));
    }
    if let Some(bag) = a.bag {
        f.push(("bag_offset".into(), bag.offset.to_string()));
    }
    f
}

/// Inverse of [`spec_fields`]; returns the spec and its frame rate.
pub fn spec_from_fields(subject_id: u32, fields: &[(String, String)]) -> Result<(WalkerSpec, f64)> {
    let get = |k: &str| fields.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let num = |k: &str| -> Result<f64> {
        get(k)
            .ok_or_else(|| Error::invalid(format!("missing field {k}")))?
            .parse()
            .map_err(|_| Error::invalid(format!("bad number in field {k}")))
    };
    let rgb = |k: &str| -> Result<[f64; 3]> {
        let parts: Vec<f64> = get(k)
            .ok_or_else(|| Error::invalid(format!("missing field {k}")))?
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad colour in field {k}")))?;
        parts
            .try_into()
            .map_err(|_| Error::invalid(format!("field {k} needs three components")))
    };
    let limbs = |prefix: &str| -> Result<Limbs> {
        Ok(Limbs {
            hip: num(&format!("{prefix}_hip"))?,
            knee: num(&format!("{prefix}_knee"))?,
            shoulder: num(&format!("{prefix}_shoulder"))?,
            elbow: num(&format!("{prefix}_elbow"))?,
        })
    };
    let coat = match get("coat_extent") {
        Some(_) => Some(Coat {
            extent: num("coat_extent")?,
            color: rgb("coat_color")?,
        }),
        None => None,
    };
    let bag = match get("bag_offset") {
        Some(_) => Some(Bag {
            offset: num("bag_offset")?,
        }),
        None => None,
    };
    let seed = get("seed")
        .ok_or_else(|| Error::invalid("missing field seed"))?
        .parse()
        .map_err(|_| Error::invalid("bad seed"))?;
    let spec = WalkerSpec {
        subject_id,
        gait: GaitParams {
            stride_frequency: num("freq")?,
            amplitudes: limbs("amp")?,
            phases: limbs("phase")?,
            torso_bob: num("bob")?,
        },
        appearance: AppearanceParams {
            limb_thickness: num("thickness")?,
            body_color: rgb("color")?,
            coat,
            bag,
        },
        speed_multiplier: num("speed")?,
        seed,
    };
    Ok((spec, num("fps")?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub n_subjects: usize,
    pub conditions: Vec<Condition>,
    pub clips_per_condition: usize,
    pub clip_len: usize,
    pub seed: u64,
    pub fps: f64,
    /// Minimum [`GaitParams::separation`] between any two subjects.
    pub margin: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            conditions: vec![Condition::Nm, Condition::Cl],
            clips_per_condition: 4,
            clip_len: 40,
            seed: 0,
            fps: 15.0,
            margin: 0.05,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::invalid("need at least 2 subjects"));
        }
        if self.clip_len < 20 {
            return Err(Error::invalid("clip length must be at least 20 frames"));
        }
        if self.conditions.is_empty() || self.clips_per_condition == 0 {
            return Err(Error::invalid("need at least one condition and one clip per condition"));
        }
        let mut seen = self.conditions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.conditions.len() {
            return Err(Error::invalid("conditions must be distinct"));
        }
        if !(self.fps > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::invalid("fps must be positive and margin non-negative"));
        }
        Ok(())
    }
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0)]
}

pub fn sample_gait(rng: &mut ChaCha8Rng) -> GaitParams {
    GaitParams {
        stride_frequency: rng.gen_range(0.8..1.6),
        amplitudes: Limbs {
            hip: rng.gen_range(0.25..0.6),
            knee: rng.gen_range(0.1..0.6),
            shoulder: rng.gen_range(0.15..0.6),
            elbow: rng.gen_range(0.05..0.5),
        },
        phases: Limbs {
            hip: rng.gen_range(0.0..TAU),
            knee: rng.gen_range(0.0..TAU),
            shoulder: rng.gen_range(0.0..TAU),
            elbow: rng.gen_range(0.0..TAU),
        },
        torso_bob: rng.gen_range(0.0..2.0),
    }
}

/// Baseline look of a subject, used for NM and as the starting point of
/// every other condition.
pub fn sample_appearance(rng: &mut ChaCha8Rng) -> AppearanceParams {
    AppearanceParams {
        limb_thickness: rng.gen_range(2.0..4.0),
        body_color: colour(rng),
        coat: None,
        bag: None,
    }
}

fn condition_appearance(base: &AppearanceParams, cond: Condition, rng: &mut ChaCha8Rng) -> AppearanceParams {
    let mut a = *base;
    match cond {
        Condition::Cl => {
            a.limb_thickness = rng.gen_range(2.0..4.0);
            a.coat = Some(Coat {
                extent: rng.gen_range(0.3..0.8),
                color: colour(rng),
            });
        }
        Condition::Bg => {
            let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            a.bag = Some(Bag {
                offset: side * rng.gen_range(5.0..8.0),
            });
        }
        Condition::Nm | Condition::Fast | Condition::Slow => {}
    }
    a
}

/// Sample subjects with pairwise separated gaits.
pub fn sample_subject_gaits(n: usize, margin: f64, rng: &mut ChaCha8Rng) -> Result<Vec<GaitParams>> {
    let mut gaits: Vec<GaitParams> = Vec::with_capacity(n);
    let mut attempts = 0;
    while gaits.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(Error::invalid(format!(
                "could not place {n} subjects at margin {margin}; lower the margin"
            )));
        }
        let g = sample_gait(rng);
        if gaits.iter().all(|h| h.separation(&g) >= margin) {
            gaits.push(g);
        }
    }
    Ok(gaits)
}

/// Build every clip spec without touching the disk: `(clip_id, condition, spec)`.
pub fn plan_dataset(cfg: &GenerateConfig) -> Result<Vec<(String, Condition, WalkerSpec)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gaits = sample_subject_gaits(cfg.n_subjects, cfg.margin, &mut rng)?;
    let mut plan = Vec::new();
    for (subject, gait) in gaits.iter().enumerate() {
        let base = sample_appearance(&mut rng);
        for &cond in &cfg.conditions {
            let appearance = condition_appearance(&base, cond, &mut rng);
            for k in 0..cfg.clips_per_condition {
                let spec = WalkerSpec {
                    subject_id: subject as u32,
                    gait: *gait,
                    appearance,
                    speed_multiplier: cond.speed(),
                    seed: rng.gen(),
                };
                plan.push((format!("s{subject:03}_{}_{k:02}", cond.tag()), cond, spec));
            }
        }
    }
    Ok(plan)
}

/// Render and write a synthetic dataset; returns the number of clips written.
pub fn generate_dataset(cfg: &GenerateConfig, root: &Path, force: bool) -> Result<usize> {
    let plan = plan_dataset(cfg)?;
    let mut writer = DatasetWriter::create(root, force)?;
    for (clip_id, cond, spec) in &plan {
        let frames: Vec<Frame> = (0..cfg.clip_len).map(|t| render_frame(spec, t, cfg.fps)).collect();
        let entry = ClipEntry {
            clip_id: clip_id.clone(),
            subject_id: spec.subject_id,
            condition: cond.tag().to_string(),
            n_frames: frames.len(),
            fields: spec_fields(spec, cfg.fps),
        };
        writer.add_clip(entry, &frames)?;
    }
    writer.finish()?;
    log::info!("wrote {} clips to {}", plan.len(), root.display());
    Ok(plan.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::support_iou;

    fn spec(seed: u64) -> WalkerSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WalkerSpec {
            subject_id: 0,
            gait: sample_gait(&mut rng),
            appearance: sample_appearance(&mut rng),
            speed_multiplier: 1.0,
            seed,
        }
    }

    #[test]
    fn rendering_is_pure() {
        let s = spec(3);
        assert_eq!(render_frame(&s, 7, 15.0), render_frame(&s, 7, 15.0));
    }

    #[test]
    fn background_is_exactly_zero_and_figure_present() {
        let f = render_frame(&spec(1), 0, 15.0);
        let support = f.support();
        let lit = support.iter().filter(|s| **s).count();
        assert!(lit > 60 && lit < HEIGHT * WIDTH / 2, "lit pixels {lit}");
        // corners are far from the figure
        for c in 0..CHANNELS {
            assert_eq!(f.get(c, 0, 0), 0.0);
            assert_eq!(f.get(c, 0, WIDTH - 1), 0.0);
        }
        // soft edges: some fractional values exist
        assert!(f.pixels().iter().any(|&v| v > 0.0 && v < 0.2));
    }

    #[test]
    fn zero_motion_is_static() {
        let mut s = spec(5);
        s.gait.amplitudes = Limbs { hip: 0.0, knee: 0.0, shoulder: 0.0, elbow: 0.0 };
        let with_bob = render_frame(&s, 0, 15.0);
        assert!((0..30).any(|t| render_frame(&s, t, 15.0) != with_bob));
        s.gait.torso_bob = 0.0;
        let first = render_frame(&s, 0, 15.0);
        for t in 1..30 {
            assert_eq!(render_frame(&s, t, 15.0), first);
        }
    }

    #[test]
    fn colour_change_keeps_support() {
        let a = spec(9);
        let mut b = a;
        b.appearance.body_color = [0.9, 0.3, 0.5];
        for t in [0, 4, 11] {
            let fa = render_frame(&a, t, 15.0);
            let fb = render_frame(&b, t, 15.0);
            assert_ne!(fa, fb);
            assert!(support_iou(&fa.support(), &fb.support()) >= 0.99);
        }
    }

    /// Joint positions recomputed from the sinusoid definition directly.
    fn oracle_knee_and_hand(s: &WalkerSpec, t: f64, fps: f64) -> (Point, Point) {
        let g = &s.gait;
        let omega_t = 2.0 * PI * g.stride_frequency * s.speed_multiplier * t / fps;
        let shift = cycle_phase(s, 0.0, fps);
        let hip_angle = g.amplitudes.hip * (omega_t + shift + g.phases.hip).sin();
        let sh = g.amplitudes.shoulder * (omega_t + shift + g.phases.shoulder).sin();
        let el = g.amplitudes.elbow * (omega_t + shift + g.phases.elbow).sin();
        let sk = skeleton(s, t, fps);
        let knee = Point {
            x: sk.hips[0].x + hip_angle.sin() * THIGH * sk.scale,
            y: sk.hips[0].y + hip_angle.cos() * THIGH * sk.scale,
        };
        let upper = -ARM_SPLAY + sh;
        let shoulder_x = sk.neck.x - SHOULDER_HALF_WIDTH * sk.scale;
        let elbow = Point {
            x: shoulder_x + upper.sin() * UPPER_ARM * sk.scale,
            y: sk.neck.y + upper.cos() * UPPER_ARM * sk.scale,
        };
        let hand = Point {
            x: elbow.x + (upper + el).sin() * FOREARM * sk.scale,
            y: elbow.y + (upper + el).cos() * FOREARM * sk.scale,
        };
        (knee, hand)
    }

    #[test]
    fn hybrid_uses_gait_source_trajectories() {
        let a = spec(11);
        let mut b = spec(12);
        b.speed_multiplier = 1.3;
        assert_eq!(hybrid_render(&a, &a, 6, 15.0), render_frame(&a, 6, 15.0));
        // the joints of hybrid(A, B) are A's joints regardless of B
        for t in [0.0, 3.0, 17.0] {
            let (knee, hand) = oracle_knee_and_hand(&a, t, 15.0);
            let sk = skeleton(&a, t, 15.0);
            for (got, want) in [(sk.knees[0], knee), (sk.hands[0], hand)] {
                assert!((got.x - want.x).abs() < 0.5 && (got.y - want.y).abs() < 0.5);
            }
        }
        // same shape parameters, different colour: the hybrid's support is A's
        let mut c = a;
        c.appearance.body_color = b.appearance.body_color;
        let h = hybrid_render(&a, &c, 9, 15.0);
        let r = render_frame(&a, 9, 15.0);
        assert!(support_iou(&h.support(), &r.support()) >= 0.99);
        // and differs from the appearance donor rendered with its own motion
        let donor = render_frame(&b, 9, 15.0);
        assert!(support_iou(&h.support(), &donor.support()) < 0.99);
    }

    #[test]
    fn occluders_do_not_move_joints() {
        let a = spec(21);
        let mut b = a;
        b.appearance.coat = Some(Coat { extent: 0.7, color: [0.2, 0.6, 0.9] });
        b.appearance.bag = Some(Bag { offset: 6.0 });
        b.appearance.limb_thickness = 3.7;
        for t in 0..20 {
            assert_eq!(skeleton(&a, t as f64, 15.0), skeleton(&b, t as f64, 15.0));
        }
        assert_ne!(render_frame(&a, 3, 15.0), render_frame(&b, 3, 15.0));
    }

    #[test]
    fn figure_stays_inside_the_frame() {
        let mut s = spec(2);
        s.gait.amplitudes = Limbs { hip: PI / 2.0, knee: 0.6, shoulder: 0.6, elbow: 0.5 };
        s.gait.stride_frequency = 2.0;
        s.speed_multiplier = 1.3;
        for t in 0..200 {
            let sk = skeleton(&s, t as f64, 15.0);
            for j in sk.joints() {
                assert!(j.y > 0.0 && j.y < HEIGHT as f64, "joint leaves frame at t={t}");
            }
        }
    }

    #[test]
    fn sampled_subjects_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gaits = sample_subject_gaits(40, 0.05, &mut rng).unwrap();
        for i in 0..gaits.len() {
            gaits[i].validate().unwrap();
            for j in 0..i {
                assert!(gaits[i].separation(&gaits[j]) >= 0.05);
            }
        }
    }

    #[test]
    fn plan_shares_gait_across_conditions() {
        let cfg = GenerateConfig {
            n_subjects: 3,
            conditions: vec![Condition::Nm, Condition::Cl, Condition::Fast],
            clips_per_condition: 2,
            ..GenerateConfig::default()
        };
        let plan = plan_dataset(&cfg).unwrap();
        assert_eq!(plan.len(), 18);
        for (_, cond, s) in &plan {
            let first = plan.iter().find(|(_, _, o)| o.subject_id == s.subject_id).unwrap();
            assert_eq!(first.2.gait, s.gait);
            assert_eq!(s.speed_multiplier, cond.speed());
            assert_eq!(s.appearance.coat.is_some(), *cond == Condition::Cl);
        }
    }

    #[test]
    fn fields_round_trip() {
        let mut s = spec(8);
        s.appearance.coat = Some(Coat { extent: 0.5, color: [0.3, 0.4, 0.5] });
        s.appearance.bag = Some(Bag { offset: -6.5 });
        let (back, fps) = spec_from_fields(0, &spec_fields(&s, 12.5)).unwrap();
        assert_eq!(back, s);
        assert_eq!(fps, 12.5);
    }

    #[test]
    fn config_validation() {
        let ok = GenerateConfig::default();
        assert!(ok.validate().is_ok());
        assert!(GenerateConfig { n_subjects: 1, ..ok.clone() }.validate().is_err());
        assert!(GenerateConfig { clip_len: 19, ..ok.clone() }.validate().is_err());
        assert!("cl".parse::<Condition>().unwrap() == Condition::Cl);
        assert!("XX".parse::<Condition>().is_err());
    }
}
