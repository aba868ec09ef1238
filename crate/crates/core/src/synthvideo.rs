//! Deterministic synthetic video generator for temporally mirrored motion.
//!
//! Ten action classes form five mirror pairs: with zero pixel noise, reversing
//! a clip of one class yields, frame for frame, a valid clip of its partner.
//! Per-frame content is identical across a pair, so any model that ignores
//! frame order cannot beat chance on the pair. Triplet datasets for visual
//! similarity matching are generated from the same machinery.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_batch;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Object intensity on the [0,1] gray scale.
const FOREGROUND: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionClass {
    MoveLeftToRight,
    MoveRightToLeft,
    MoveTopToBottom,
    MoveBottomToTop,
    FallThenRest,
    RiseThenRest,
    Approach,
    Recede,
    Grow,
    Shrink,
}

impl ActionClass {
    pub const ALL: [ActionClass; 10] = [
        ActionClass::MoveLeftToRight,
        ActionClass::MoveRightToLeft,
        ActionClass::MoveTopToBottom,
        ActionClass::MoveBottomToTop,
        ActionClass::FallThenRest,
        ActionClass::RiseThenRest,
        ActionClass::Approach,
        ActionClass::Recede,
        ActionClass::Grow,
        ActionClass::Shrink,
    ];

    /// The temporally mirrored partner class.
    pub fn mirror(self) -> ActionClass {
        use ActionClass::*;
        match self {
            MoveLeftToRight => MoveRightToLeft,
            MoveRightToLeft => MoveLeftToRight,
            MoveTopToBottom => MoveBottomToTop,
            MoveBottomToTop => MoveTopToBottom,
            FallThenRest => RiseThenRest,
            RiseThenRest => FallThenRest,
            Approach => Recede,
            Recede => Approach,
            Grow => Shrink,
            Shrink => Grow,
        }
    }

    /// The canonical member of this class's mirror pair; the partner's clips
    /// are generated by reversing canonical trajectories.
    fn canonical(self) -> (ActionClass, bool) {
        use ActionClass::*;
        match self {
            MoveRightToLeft => (MoveLeftToRight, true),
            MoveBottomToTop => (MoveTopToBottom, true),
            RiseThenRest => (FallThenRest, true),
            Recede => (Approach, true),
            Shrink => (Grow, true),
            other => (other, false),
        }
    }

    pub fn name(self) -> &'static str {
        use ActionClass::*;
        match self {
            MoveLeftToRight => "move_left_to_right",
            MoveRightToLeft => "move_right_to_left",
            MoveTopToBottom => "move_top_to_bottom",
            MoveBottomToTop => "move_bottom_to_top",
            FallThenRest => "fall_then_rest",
            RiseThenRest => "rise_then_rest",
            Approach => "approach",
            Recede => "recede",
            Grow => "grow",
            Shrink => "shrink",
        }
    }
}

/// Full parameterization of one clip's motion. `start` holds the canonical
/// trajectory's starting offsets; mirrored classes reuse their partner's
/// parameterization and reverse the frame order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub class: ActionClass,
    pub object_size: i64,
    pub speed: i64,
    pub start: [i64; 2],
    pub noise_amp: f64,
    pub background: f64,
}

/// One rendered clip plus everything needed to regenerate it bit-exactly.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub clip: Tensor,
    pub label: usize,
    pub class: ActionClass,
    pub spec: MotionSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<ActionClass>,
    #[serde(default = "default_train")]
    pub train_per_class: usize,
    #[serde(default = "default_val")]
    pub val_per_class: usize,
    #[serde(default = "default_test")]
    pub test_per_class: usize,
    #[serde(default = "default_size")]
    pub object_size: i64,
    #[serde(default = "default_speed")]
    pub speed: i64,
    #[serde(default = "default_noise")]
    pub noise_amp: f64,
    #[serde(default = "default_background")]
    pub background: f64,
}

fn default_frames() -> usize {
    8
}
fn default_extent() -> usize {
    32
}
fn default_classes() -> Vec<ActionClass> {
    vec![ActionClass::MoveLeftToRight, ActionClass::MoveRightToLeft]
}
fn default_train() -> usize {
    1000
}
fn default_val() -> usize {
    125
}
fn default_test() -> usize {
    250
}
fn default_size() -> i64 {
    6
}
fn default_speed() -> i64 {
    2
}
fn default_noise() -> f64 {
    0.05
}
fn default_background() -> f64 {
    0.1
}

impl Default for DatasetConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(*c) {
                return Err(Error::Config(format!("duplicate class {:?}", c.name())));
            }
        }
        if self.object_size < 1 {
            return Err(Error::Config("object_size must be >= 1".into()));
        }
        if self.speed < 0 {
            return Err(Error::Config("speed must be >= 0".into()));
        }
        Ok(())
    }

    pub fn label_of(&self, class: ActionClass) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| Error::Config(format!("class {:?} not in dataset class list", class.name())))
    }

    fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x: i64,
    y: i64,
    size: i64,
}

/// Object placements per frame; approach/recede carry a stationary anchor
/// square at the left margin of the mover's row.
fn trajectory(spec: &MotionSpec, cfg: &DatasetConfig) -> Result<Vec<Vec<Rect>>> {
    let t = cfg.frames as i64;
    let (canon, reversed) = spec.class.canonical();
    let size = spec.object_size;
    let v = spec.speed;
    let [x0, y0] = spec.start;
    let mut frames: Vec<Vec<Rect>> = Vec::with_capacity(cfg.frames);

    for step in 0..t {
        let rects = match canon {
            ActionClass::MoveLeftToRight => vec![Rect {
                x: x0 + v * step,
                y: y0,
                size,
            }],
            ActionClass::MoveTopToBottom => vec![Rect {
                x: x0,
                y: y0 + v * step,
                size,
            }],
            ActionClass::FallThenRest => {
                let floor = cfg.height as i64 - size;
                vec![Rect {
                    x: x0,
                    y: (y0 + v * step).min(floor),
                    size,
                }]
            }
            ActionClass::Approach => {
                let anchor = Rect {
                    x: 1,
                    y: y0,
                    size,
                };
                vec![
                    anchor,
                    Rect {
                        x: x0 - v * step,
                        y: y0,
                        size,
                    },
                ]
            }
            ActionClass::Grow => {
                let s = size + v * step;
                vec![Rect {
                    x: x0 - s / 2,
                    y: y0 - s / 2,
                    size: s,
                }]
            }
            _ => unreachable!("canonical() returns canonical classes only"),
        };
        frames.push(rects);
    }

    // class-specific well-formedness
    match canon {
        ActionClass::FallThenRest => {
            if v == 0 {
                return Err(Error::Config("fall_then_rest needs speed >= 1".into()));
            }
            let floor = cfg.height as i64 - size;
            let hit = (floor - y0 + v - 1) / v; // first frame at the floor
            if y0 >= floor || hit > t - 2 {
                return Err(Error::Config(format!(
                    "fall_then_rest from y={y0} never rests within {t} frames"
                )));
            }
        }
        ActionClass::Approach => {
            let closest = x0 - v * (t - 1);
            if closest < 1 + size + 1 {
                return Err(Error::Config(format!(
                    "approach trajectory from x={x0} collides with the anchor"
                )));
            }
        }
        _ => {}
    }

    for rects in &frames {
        for r in rects {
            if r.x < 0
                || r.y < 0
                || r.size < 1
                || r.x + r.size > cfg.width as i64
                || r.y + r.size > cfg.height as i64
            {
                return Err(Error::Config(format!(
                    "trajectory for {:?} leaves the {}x{} frame (rect at x={} y={} size={})",
                    spec.class.name(),
                    cfg.width,
                    cfg.height,
                    r.x,
                    r.y,
                    r.size
                )));
            }
        }
    }

    if reversed {
        frames.reverse();
    }
    Ok(frames)
}

/// Renders a clip: gray canvas, bright squares, optional uniform pixel noise,
/// replicated to 3 channels. Deterministic given (spec, seed).
pub fn gen_sample(spec: &MotionSpec, cfg: &DatasetConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let frames = trajectory(spec, cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    let mut clip = Tensor::zeros(&cfg.clip_shape());
    let mut noise = SeededRng::derive(seed, "noise");
    {
        let data = clip.data_mut();
        for (t, rects) in frames.iter().enumerate() {
            let mut gray = vec![spec.background; h * w];
            for r in rects {
                for py in r.y..r.y + r.size {
                    for px in r.x..r.x + r.size {
                        gray[py as usize * w + px as usize] = FOREGROUND;
                    }
                }
            }
            if spec.noise_amp > 0.0 {
                for g in gray.iter_mut() {
                    *g += noise.uniform(-spec.noise_amp, spec.noise_amp);
                }
            }
            let base = t * h * w * 3;
            for (i, g) in gray.iter().enumerate() {
                data[base + i * 3] = *g;
                data[base + i * 3 + 1] = *g;
                data[base + i * 3 + 2] = *g;
            }
        }
    }
    Ok(VideoSample {
        clip,
        label: cfg.label_of(spec.class)?,
        class: spec.class,
        spec: spec.clone(),
        seed,
    })
}

/// Draws a valid motion spec for the class. Mirror pairs share one sampling
/// routine over canonical parameters, so object shape, size and intensity
/// are identically distributed across a pair.
pub fn sample_spec(class: ActionClass, cfg: &DatasetConfig, rng: &mut SeededRng) -> Result<MotionSpec> {
    let t = cfg.frames as i64;
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let size = cfg.object_size;
    let v = cfg.speed;
    let (canon, _) = class.canonical();
    let span = v * (t - 1);

    let draw = |rng: &mut SeededRng, lo: i64, hi: i64, what: &str| -> Result<i64> {
        if hi < lo {
            return Err(Error::Config(format!(
                "no valid {what} range for {:?} at {w}x{h}, size {size}, speed {v}, {t} frames",
                class.name()
            )));
        }
        Ok(lo + rng.below((hi - lo + 1) as usize) as i64)
    };

    let start = match canon {
        ActionClass::MoveLeftToRight => [
            draw(rng, 0, w - size - span, "x start")?,
            draw(rng, 0, h - size, "y start")?,
        ],
        ActionClass::MoveTopToBottom => [
            draw(rng, 0, w - size, "x start")?,
            draw(rng, 0, h - size - span, "y start")?,
        ],
        ActionClass::FallThenRest => {
            let floor = h - size;
            // must reach the floor by frame t-2: y0 >= floor - v*(t-2)
            let lo = (floor - v * (t - 2)).max(0);
            [draw(rng, 0, w - size, "x start")?, draw(rng, lo, floor - v, "y start")?]
        }
        ActionClass::Approach => {
            // anchor at x=1; mover ends at least one pixel to its right
            let lo = 1 + size + 1 + span;
            [draw(rng, lo, w - size, "x start")?, draw(rng, 0, h - size, "y start")?]
        }
        ActionClass::Grow => {
            let smax = size + span;
            let lo = smax / 2 + 1;
            [
                draw(rng, lo, w - smax + smax / 2 - 1, "x center")?,
                draw(rng, lo, h - smax + smax / 2 - 1, "y center")?,
            ]
        }
        _ => unreachable!(),
    };

    Ok(MotionSpec {
        class,
        object_size: size,
        speed: v,
        start,
        noise_amp: cfg.noise_amp,
        background: cfg.background,
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[VideoSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn gen_split(cfg: &DatasetConfig, per_class: usize, split_seed: u64) -> Result<Vec<VideoSample>> {
    // draw all specs sequentially (cheap), render in parallel
    let mut jobs = Vec::with_capacity(cfg.classes.len() * per_class);
    for class in &cfg.classes {
        for k in 0..per_class {
            let sample_seed = SeededRng::derive_seed(split_seed, &format!("{}/{k}", class.name()));
            let mut rng = SeededRng::derive(sample_seed, "spec");
            let spec = sample_spec(*class, cfg, &mut rng)?;
            jobs.push((spec, sample_seed));
        }
    }
    let rendered: Vec<Result<VideoSample>> =
        map_batch(&jobs, |(spec, seed)| gen_sample(spec, cfg, *seed));
    rendered.into_iter().collect()
}

/// Balanced train/val/test splits with disjoint seed streams.
pub fn gen_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        train: gen_split(cfg, cfg.train_per_class, SeededRng::derive_seed(seed, "train"))?,
        val: gen_split(cfg, cfg.val_per_class, SeededRng::derive_seed(seed, "val"))?,
        test: gen_split(cfg, cfg.test_per_class, SeededRng::derive_seed(seed, "test"))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VsmAnswer {
    Ref1,
    Ref2,
    None,
}

/// Two reference clips of distinct classes plus a query; the answer names the
/// reference sharing the query's class, or `None` when neither does.
#[derive(Clone, Debug)]
pub struct VsmTriplet {
    pub ref1: VideoSample,
    pub ref2: VideoSample,
    pub query: VideoSample,
    pub answer: VsmAnswer,
}

/// Exactly round(n * positive_ratio) positive triplets (answers split evenly
/// between the two references), the remainder negative. Reference and query
/// samples come from independent seed streams.
pub fn gen_vsm_dataset(
    cfg: &DatasetConfig,
    n: usize,
    positive_ratio: f64,
    seed: u64,
) -> Result<Vec<VsmTriplet>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&positive_ratio) {
        return Err(Error::Config(format!(
            "positive_ratio must be in [0,1], got {positive_ratio}"
        )));
    }
    if cfg.classes.len() < 2 {
        return Err(Error::Config("triplets need at least two classes".into()));
    }
    let n_pos = (n as f64 * positive_ratio).round() as usize;
    if n_pos < n && cfg.classes.len() < 3 {
        return Err(Error::Config(
            "negative triplets need at least three classes".into(),
        ));
    }

    let jobs: Vec<usize> = (0..n).collect();
    let triplets: Vec<Result<VsmTriplet>> = map_batch(&jobs, |&i| {
        let mut class_rng = SeededRng::derive(seed, &format!("triplet/{i}/classes"));
        let k = cfg.classes.len();
        let c1 = cfg.classes[class_rng.below(k)];
        let c2 = loop {
            let c = cfg.classes[class_rng.below(k)];
            if c != c1 {
                break c;
            }
        };
        let positive = i < n_pos;
        let (query_class, answer) = if positive {
            if i % 2 == 0 {
                (c1, VsmAnswer::Ref1)
            } else {
                (c2, VsmAnswer::Ref2)
            }
        } else {
            let c = loop {
                let c = cfg.classes[class_rng.below(k)];
                if c != c1 && c != c2 {
                    break c;
                }
            };
            (c, VsmAnswer::None)
        };

        let make = |role: &str, class: ActionClass| -> Result<VideoSample> {
            let s = SeededRng::derive_seed(seed, &format!("triplet/{i}/{role}"));
            let mut rng = SeededRng::derive(s, "spec");
            let spec = sample_spec(class, cfg, &mut rng)?;
            gen_sample(&spec, cfg, s)
        };
        Ok(VsmTriplet {
            ref1: make("ref1", c1)?,
            ref2: make("ref2", c2)?,
            query: make("query", query_class)?,
            answer,
        })
    });
    triplets.into_iter().collect()
}

/// Frames in reverse temporal order.
pub fn reverse_clip(clip: &Tensor) -> Tensor {
    let shape = clip.shape().to_vec();
    let frame = shape[1..].iter().product::<usize>();
    let t = shape[0];
    let mut out = Tensor::zeros(&shape);
    for f in 0..t {
        out.data_mut()[f * frame..(f + 1) * frame]
            .copy_from_slice(&clip.data()[(t - 1 - f) * frame..(t - f) * frame]);
    }
    out
}

/// Reorders frames so output frame i is input frame perm[i].
pub fn permute_frames(clip: &Tensor, perm: &[usize]) -> Tensor {
    let shape = clip.shape().to_vec();
    let frame = shape[1..].iter().product::<usize>();
    assert_eq!(perm.len(), shape[0]);
    let mut out = Tensor::zeros(&shape);
    for (i, &src) in perm.iter().enumerate() {
        out.data_mut()[i * frame..(i + 1) * frame]
            .copy_from_slice(&clip.data()[src * frame..(src + 1) * frame]);
    }
    out
}

// ── on-disk layout ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    split: String,
    label: usize,
    class_name: String,
    seed: u64,
    spec: MotionSpec,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    seed: u64,
    entries: Vec<ManifestEntry>,
}

/// One tensor file per clip plus a JSON manifest.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let clips = dir.join("clips");
    fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
    let mut entries = Vec::new();
    for (split, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for (i, s) in samples.iter().enumerate() {
            let file = format!("clips/{split}_{:05}_{}.tsr", i, s.class.name());
            s.clip.save(&dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                split: split.to_string(),
                label: s.label,
                class_name: s.class.name().to_string(),
                seed: s.seed,
                spec: s.spec.clone(),
            });
        }
    }
    let manifest = Manifest {
        config: ds.config.clone(),
        seed: ds.seed,
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[derive(Serialize, Deserialize)]
struct VsmEntry {
    ref1: String,
    ref2: String,
    query: String,
    answer: VsmAnswer,
    ref1_class: String,
    ref2_class: String,
    query_class: String,
}

#[derive(Serialize, Deserialize)]
struct VsmManifest {
    config: DatasetConfig,
    seed: u64,
    positive_ratio: f64,
    entries: Vec<VsmEntry>,
}

/// Triplet layout: three tensor files per triplet plus a JSON manifest with
/// {ref1, ref2, query, answer} per entry.
pub fn save_vsm_dataset(
    triplets: &[VsmTriplet],
    cfg: &DatasetConfig,
    seed: u64,
    positive_ratio: f64,
    dir: &Path,
) -> Result<()> {
    let clips = dir.join("clips");
    fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
    let mut entries = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let names = [
            (format!("clips/{i:05}_ref1.tsr"), &t.ref1),
            (format!("clips/{i:05}_ref2.tsr"), &t.ref2),
            (format!("clips/{i:05}_query.tsr"), &t.query),
        ];
        for (file, sample) in &names {
            sample.clip.save(&dir.join(file))?;
        }
        entries.push(VsmEntry {
            ref1: names[0].0.clone(),
            ref2: names[1].0.clone(),
            query: names[2].0.clone(),
            answer: t.answer,
            ref1_class: t.ref1.class.name().to_string(),
            ref2_class: t.ref2.class.name().to_string(),
            query_class: t.query.class.name().to_string(),
        });
    }
    let manifest = VsmManifest {
        config: cfg.clone(),
        seed,
        positive_ratio,
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut ds = Dataset {
        config: manifest.config,
        seed: manifest.seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for e in manifest.entries {
        let clip = Tensor::load(&dir.join(&e.file))?;
        let sample = VideoSample {
            clip,
            label: e.label,
            class: e.spec.class,
            spec: e.spec,
            seed: e.seed,
        };
        match e.split.as_str() {
            "train" => ds.train.push(sample),
            "val" => ds.val.push(sample),
            "test" => ds.test.push(sample),
            other => return Err(Error::Data(format!("unknown split {other:?} in manifest"))),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_config() -> DatasetConfig {
        DatasetConfig {
            noise_amp: 0.0,
            classes: ActionClass::ALL.to_vec(),
            ..DatasetConfig::default()
        }
    }

    fn spec_for(class: ActionClass, cfg: &DatasetConfig, seed: u64) -> MotionSpec {
        let mut rng = SeededRng::derive(seed, "spec");
        sample_spec(class, cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_speed_gives_identical_frames() {
        let cfg = DatasetConfig {
            speed: 0,
            noise_amp: 0.0,
            ..noiseless_config()
        };
        let spec = spec_for(ActionClass::MoveLeftToRight, &cfg, 1);
        let s = gen_sample(&spec, &cfg, 1).unwrap();
        let frame = cfg.height * cfg.width * 3;
        let first = &s.clip.data()[..frame];
        for t in 1..cfg.frames {
            assert_eq!(&s.clip.data()[t * frame..(t + 1) * frame], first);
        }
    }

    #[test]
    fn every_mirror_pair_reverses_exactly() {
        let cfg = noiseless_config();
        for class in [
            ActionClass::MoveLeftToRight,
            ActionClass::MoveTopToBottom,
            ActionClass::FallThenRest,
            ActionClass::Approach,
            ActionClass::Grow,
        ] {
            let spec = spec_for(class, &cfg, 7);
            let forward = gen_sample(&spec, &cfg, 7).unwrap();
            let mirrored = MotionSpec {
                class: class.mirror(),
                ..spec
            };
            let backward = gen_sample(&mirrored, &cfg, 7).unwrap();
            assert_eq!(
                reverse_clip(&forward.clip),
                backward.clip,
                "reversal mismatch for {:?}",
                class.name()
            );
        }
    }

    #[test]
    fn centroid_moves_by_speed_for_horizontal_motion() {
        let cfg = noiseless_config();
        let spec = spec_for(ActionClass::MoveLeftToRight, &cfg, 3);
        let s = gen_sample(&spec, &cfg, 3).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let centroid = |t: usize| -> (f64, f64) {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let v = s.clip.data()[((t * h + y) * w + x) * 3];
                    if v > 0.5 {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        for t in 0..cfg.frames - 1 {
            let (x0, y0) = centroid(t);
            let (x1, y1) = centroid(t + 1);
            assert!((x1 - x0 - cfg.speed as f64).abs() < 1e-9);
            assert!((y1 - y0).abs() < 1e-9);
        }
    }

    #[test]
    fn mirrored_pairs_share_frame_multisets() {
        let cfg = noiseless_config();
        for class in [ActionClass::MoveLeftToRight, ActionClass::Approach, ActionClass::Grow] {
            let spec = spec_for(class, &cfg, 13);
            let forward = gen_sample(&spec, &cfg, 13).unwrap();
            let mirrored = MotionSpec {
                class: class.mirror(),
                ..spec
            };
            let backward = gen_sample(&mirrored, &cfg, 13).unwrap();
            let frame = cfg.height * cfg.width * 3;
            let multiset = |clip: &Tensor| {
                let mut frames: Vec<Vec<u64>> = (0..cfg.frames)
                    .map(|t| {
                        clip.data()[t * frame..(t + 1) * frame]
                            .iter()
                            .map(|v| v.to_bits())
                            .collect()
                    })
                    .collect();
                frames.sort();
                frames
            };
            assert_eq!(multiset(&forward.clip), multiset(&backward.clip));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = DatasetConfig {
            noise_amp: 0.05,
            ..noiseless_config()
        };
        let spec = spec_for(ActionClass::Recede, &cfg, 21);
        let a = gen_sample(&spec, &cfg, 21).unwrap();
        let b = gen_sample(&spec, &cfg, 21).unwrap();
        assert_eq!(a.clip, b.clip);
    }

    #[test]
    fn out_of_bounds_spec_is_rejected() {
        let cfg = noiseless_config();
        let spec = MotionSpec {
            class: ActionClass::MoveLeftToRight,
            object_size: 6,
            speed: 8,
            start: [20, 0],
            noise_amp: 0.0,
            background: 0.1,
        };
        assert!(matches!(gen_sample(&spec, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_is_balanced_and_round_trips() {
        let cfg = DatasetConfig {
            classes: vec![ActionClass::MoveLeftToRight, ActionClass::MoveRightToLeft],
            train_per_class: 10,
            val_per_class: 2,
            test_per_class: 3,
            ..DatasetConfig::default()
        };
        let ds = gen_dataset(&cfg, 5).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.train.iter().filter(|s| s.label == 0).count(), 10);

        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        let entries = manifest["entries"].as_array().unwrap();
        assert_eq!(
            entries.iter().filter(|e| e["split"] == "train").count(),
            20
        );
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.train[0].clip, ds.train[0].clip);
        assert_eq!(back.test.len(), 6);
    }

    #[test]
    fn dataset_regeneration_matches() {
        let cfg = DatasetConfig {
            train_per_class: 3,
            val_per_class: 1,
            test_per_class: 1,
            ..DatasetConfig::default()
        };
        let a = gen_dataset(&cfg, 9).unwrap();
        let b = gen_dataset(&cfg, 9).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn vsm_ratio_is_exact() {
        let cfg = DatasetConfig {
            classes: ActionClass::ALL.to_vec(),
            ..DatasetConfig::default()
        };
        let all_pos = gen_vsm_dataset(&cfg, 50, 1.0, 1).unwrap();
        assert!(all_pos.iter().all(|t| t.answer != VsmAnswer::None));
        let mixed = gen_vsm_dataset(&cfg, 1000, 0.8, 2).unwrap();
        let positives = mixed.iter().filter(|t| t.answer != VsmAnswer::None).count();
        assert_eq!(positives, 800);
        for t in &mixed {
            assert_ne!(t.ref1.class, t.ref2.class);
            let in_refs = t.query.class == t.ref1.class || t.query.class == t.ref2.class;
            assert_eq!(t.answer == VsmAnswer::None, !in_refs);
            if t.answer == VsmAnswer::Ref1 {
                assert_eq!(t.query.class, t.ref1.class);
            }
            if t.answer == VsmAnswer::Ref2 {
                assert_eq!(t.query.class, t.ref2.class);
            }
        }
    }

    #[test]
    fn vsm_negatives_require_three_classes() {
        let cfg = DatasetConfig::default(); // two classes
        assert!(gen_vsm_dataset(&cfg, 10, 0.5, 1).is_err());
        assert!(gen_vsm_dataset(&cfg, 10, 1.0, 1).is_ok());
    }
}
