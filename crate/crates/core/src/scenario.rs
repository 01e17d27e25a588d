//! Synthetic task streams: labeled and unlabeled data per task, recurring
//! classes, and out-of-distribution samples mixed into the unlabeled pool.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor2;

pub const STREAM_MAGIC: &[u8; 4] = b"SCL1";
pub const STREAM_VERSION: u16 = 1;

const SPLIT_LABELED: u64 = 0;
const SPLIT_UNLABELED: u64 = 1;
const SPLIT_TEST: u64 = 2;
const SPLIT_OOD: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub class_universe: usize,
    pub ood_classes: usize,
    pub classes_per_task: usize,
    pub repetition_rate: f64,
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    pub ood_fraction: f64,
    pub image_side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            num_tasks: 6,
            class_universe: 24,
            ood_classes: 6,
            classes_per_task: 4,
            repetition_rate: 0.5,
            labeled_per_class: 100,
            unlabeled_per_class: 200,
            test_per_class: 50,
            ood_fraction: 0.2,
            image_side: 16,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

pub(crate) const STREAM_KEYS: [&str; 12] = [
    "class_universe",
    "classes_per_task",
    "image_side",
    "labeled_per_class",
    "noise_sigma",
    "num_tasks",
    "ood_classes",
    "ood_fraction",
    "repetition_rate",
    "seed",
    "test_per_class",
    "unlabeled_per_class",
];

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl StreamSpec {
    /// Key/value pairs in canonical (sorted) key order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = vec![
            ("class_universe", self.class_universe.to_string()),
            ("classes_per_task", self.classes_per_task.to_string()),
            ("image_side", self.image_side.to_string()),
            ("labeled_per_class", self.labeled_per_class.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("num_tasks", self.num_tasks.to_string()),
            ("ood_classes", self.ood_classes.to_string()),
            ("ood_fraction", self.ood_fraction.to_string()),
            ("repetition_rate", self.repetition_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("unlabeled_per_class", self.unlabeled_per_class.to_string()),
        ];
        kv.sort_by_key(|(k, _)| *k);
        kv
    }

    /// Sets one field; returns false when `key` is not a stream key.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_tasks" => self.num_tasks = parse_value(key, value)?,
            "class_universe" => self.class_universe = parse_value(key, value)?,
            "ood_classes" => self.ood_classes = parse_value(key, value)?,
            "classes_per_task" => self.classes_per_task = parse_value(key, value)?,
            "repetition_rate" => self.repetition_rate = parse_value(key, value)?,
            "labeled_per_class" => self.labeled_per_class = parse_value(key, value)?,
            "unlabeled_per_class" => self.unlabeled_per_class = parse_value(key, value)?,
            "test_per_class" => self.test_per_class = parse_value(key, value)?,
            "ood_fraction" => self.ood_fraction = parse_value(key, value)?,
            "image_side" => self.image_side = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn canonical_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut spec = StreamSpec::default();
        let mut seen = BTreeSet::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed spec line {line:?}")))?;
            if !spec.set_key(k.trim(), v)? {
                return Err(Error::Config(format!("unknown spec key {k:?}")));
            }
            seen.insert(k.trim().to_string());
        }
        if seen.len() != STREAM_KEYS.len() {
            return Err(Error::Config("spec block is missing keys".into()));
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_tasks == 0
            || self.class_universe == 0
            || self.classes_per_task == 0
            || self.labeled_per_class == 0
            || self.unlabeled_per_class == 0
            || self.test_per_class == 0
            || self.image_side == 0
        {
            return fail("all counts except ood_classes must be at least 1".into());
        }
        if self.classes_per_task > self.class_universe {
            return fail(format!(
                "classes_per_task {} exceeds class_universe {}",
                self.classes_per_task, self.class_universe
            ));
        }
        if !(0.0..=1.0).contains(&self.repetition_rate) {
            return fail(format!("repetition_rate {} outside [0, 1]", self.repetition_rate));
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return fail(format!("ood_fraction {} outside [0, 1)", self.ood_fraction));
        }
        if self.ood_fraction > 0.0 && self.ood_classes == 0 {
            return fail("ood_fraction > 0 needs at least one OOD class".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.image_side * self.image_side
    }

    /// OOD samples added to an unlabeled pool holding `in_dist` samples, so
    /// that they make up `ood_fraction` of the pool.
    pub fn ood_count(&self, in_dist: usize) -> usize {
        if self.ood_fraction <= 0.0 {
            return 0;
        }
        (self.ood_fraction * in_dist as f64 / (1.0 - self.ood_fraction)).round() as usize
    }
}

/// Parameters of one class's image generator: two Gaussian-windowed
/// oriented gratings on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub centers: [(f64, f64); 2],
    pub widths: [f64; 2],
    pub orientation: f64,
    pub frequency: f64,
    pub phase: f64,
    pub noise_sigma: f64,
}

impl ClassPrototype {
    pub fn new(stream_seed: u64, class_id: u32, side: usize, noise_sigma: f64) -> Self {
        let mut rng = rng::stream(&[tag::PROTOTYPE, stream_seed, class_id as u64]);
        let lo = side as f64 * 0.2;
        let hi = side as f64 * 0.8;
        let mut center = || (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let centers = [center(), center()];
        let scale = side as f64 / 16.0;
        ClassPrototype {
            class_id,
            centers,
            widths: [rng.gen_range(1.8..3.5) * scale, rng.gen_range(1.8..3.5) * scale],
            orientation: rng.gen_range(0.0..PI),
            frequency: rng.gen_range(0.08..0.3) / scale,
            phase: rng.gen_range(0.0..2.0 * PI),
            noise_sigma,
        }
    }

    /// Renders one draw: jittered geometry, random contrast, pixel noise,
    /// clamped to `[0, 1]`.
    pub fn sample<R: Rng>(&self, side: usize, rng: &mut R) -> Vec<f64> {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let jitter: Vec<(f64, f64)> = self
            .centers
            .iter()
            .map(|&(r, c)| (r + 0.8 * normal(), c + 0.8 * normal()))
            .collect();
        let theta = self.orientation + 0.08 * normal();
        let phase = self.phase + 0.3 * normal();
        let contrast = 0.75 + 0.1 * normal();
        let (ct, st) = (theta.cos(), theta.sin());
        let mut img = vec![0.0; side * side];
        for r in 0..side {
            for c in 0..side {
                let (y, x) = (r as f64, c as f64);
                let wave = 0.5 + 0.5 * (2.0 * PI * self.frequency * (x * ct + y * st) + phase).cos();
                let mut env = 0.0;
                for (&(cy, cx), &w) in jitter.iter().zip(&self.widths) {
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    env += (-d2 / (2.0 * w * w)).exp();
                }
                img[r * side + c] = contrast * env.min(1.0) * wave;
            }
        }
        if self.noise_sigma > 0.0 {
            for v in &mut img {
                *v += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }
}

/// Draws image `index` of `split` for `proto` within `task`; a pure function
/// of its arguments.
pub fn sample_class_image(proto: &ClassPrototype, side: usize, stream_seed: u64, task: u64, split: u64, index: u64) -> Vec<f64> {
    let mut rng = rng::stream(&[tag::IMAGE, stream_seed, proto.class_id as u64, task, split, index]);
    proto.sample(side, &mut rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub task_id: u32,
    pub class_set: Vec<u32>,
    pub labeled: Tensor2,
    pub labels: Vec<u32>,
    pub unlabeled: Tensor2,
    unlabeled_truth: Vec<u32>,
}

impl Experience {
    pub fn new(
        task_id: u32,
        class_set: Vec<u32>,
        labeled: Tensor2,
        labels: Vec<u32>,
        unlabeled: Tensor2,
        unlabeled_truth: Vec<u32>,
    ) -> Self {
        Experience {
            task_id,
            class_set,
            labeled,
            labels,
            unlabeled,
            unlabeled_truth,
        }
    }

    /// Withheld labels of the unlabeled pool. Diagnostics only; the training
    /// path never calls this.
    pub fn unlabeled_ground_truth(&self) -> &[u32] {
        &self.unlabeled_truth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub experiences: Vec<Experience>,
}

/// Held-out labeled samples of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSplit {
    pub task_id: u32,
    pub images: Tensor2,
    pub labels: Vec<u32>,
}

/// Chooses the class set of every task.
pub fn plan_classes(spec: &StreamSpec) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let mut rng = rng::stream(&[tag::CLASS_PLAN, spec.seed]);
    let mut fresh: Vec<u32> = (0..spec.class_universe as u32).collect();
    fresh.shuffle(&mut rng);
    let mut fresh = fresh.into_iter();
    let mut seen: Vec<u32> = Vec::new();
    let k = spec.classes_per_task;
    let mut plan = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let wanted = if t == 0 {
            0
        } else {
            crate::wsn::capacity(spec.repetition_rate, k)
        };
        let n_rep = wanted.min(seen.len());
        let mut set: Vec<u32> = seen.choose_multiple(&mut rng, n_rep).copied().collect();
        for _ in n_rep..k {
            let c = fresh.next().ok_or_else(|| {
                Error::Spec(format!(
                    "class universe of {} exhausted at task {t}",
                    spec.class_universe
                ))
            })?;
            set.push(c);
        }
        set.sort_unstable();
        for &c in &set {
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen.sort_unstable();
        plan.push(set);
    }
    Ok(plan)
}

fn prototypes(spec: &StreamSpec) -> Vec<ClassPrototype> {
    (0..(spec.class_universe + spec.ood_classes) as u32)
        .map(|c| ClassPrototype::new(spec.seed, c, spec.image_side, spec.noise_sigma))
        .collect()
}

fn render(spec: &StreamSpec, protos: &[ClassPrototype], draws: &[(u32, u64, u64, u64)]) -> Tensor2 {
    let side = spec.image_side;
    let rows = crate::par::map(draws, |&(class, task, split, index)| {
        sample_class_image(&protos[class as usize], side, spec.seed, task, split, index)
    });
    Tensor2::from_vec(draws.len(), side * side, rows.concat()).expect("images are finite")
}

/// Generates the full stream; a pure function of `spec`.
pub fn build_stream(spec: &StreamSpec) -> Result<TaskStream> {
    let plan = plan_classes(spec)?;
    let protos = prototypes(spec);
    let mut experiences = Vec::with_capacity(plan.len());
    for (t, class_set) in plan.into_iter().enumerate() {
        let task = t as u64;
        let mut order_rng = rng::stream(&[tag::SHUFFLE, spec.seed, task]);

        let mut labeled_draws = Vec::new();
        for &c in &class_set {
            for i in 0..spec.labeled_per_class {
                labeled_draws.push((c, task, SPLIT_LABELED, i as u64));
            }
        }
        labeled_draws.shuffle(&mut order_rng);

        let mut unlabeled_draws = Vec::new();
        for &c in &class_set {
            for i in 0..spec.unlabeled_per_class {
                unlabeled_draws.push((c, task, SPLIT_UNLABELED, i as u64));
            }
        }
        let n_ood = spec.ood_count(unlabeled_draws.len());
        for i in 0..n_ood {
            let c = spec.class_universe as u32 + order_rng.gen_range(0..spec.ood_classes as u32);
            unlabeled_draws.push((c, task, SPLIT_OOD, i as u64));
        }
        unlabeled_draws.shuffle(&mut order_rng);

        let labeled = render(spec, &protos, &labeled_draws);
        let unlabeled = render(spec, &protos, &unlabeled_draws);
        experiences.push(Experience {
            task_id: t as u32,
            labels: labeled_draws.iter().map(|d| d.0).collect(),
            unlabeled_truth: unlabeled_draws.iter().map(|d| d.0).collect(),
            class_set,
            labeled,
            unlabeled,
        });
    }
    Ok(TaskStream {
        spec: spec.clone(),
        experiences,
    })
}

/// Held-out split of one task; draw indices never overlap training draws.
pub fn test_split(spec: &StreamSpec, experience: &Experience) -> TestSplit {
    let protos = prototypes(spec);
    let task = experience.task_id as u64;
    let draws: Vec<_> = experience
        .class_set
        .iter()
        .flat_map(|&c| (0..spec.test_per_class as u64).map(move |i| (c, task, SPLIT_TEST, i)))
        .collect();
    TestSplit {
        task_id: experience.task_id,
        images: render(spec, &protos, &draws),
        labels: draws.iter().map(|d| d.0).collect(),
    }
}

pub fn test_splits(stream: &TaskStream) -> Vec<TestSplit> {
    stream
        .experiences
        .iter()
        .map(|e| test_split(&stream.spec, e))
        .collect()
}

impl TaskStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STREAM_MAGIC);
        w.u16(STREAM_VERSION);
        w.text(&self.spec.canonical_text());
        for e in &self.experiences {
            w.u32(e.task_id);
            w.u32s(&e.class_set);
            w.tensor(&e.labeled);
            w.u32s(&e.labels);
            w.tensor(&e.unlabeled);
            w.u32s(&e.unlabeled_truth);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != STREAM_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected SCL1")));
        }
        let version = r.u16()?;
        if version != STREAM_VERSION {
            return Err(Error::format(4, format!("unsupported stream version {version}")));
        }
        let spec_at = r.offset();
        let spec = StreamSpec::from_canonical_text(&r.text()?)
            .map_err(|e| Error::format(spec_at, e.to_string()))?;
        let mut experiences = Vec::with_capacity(spec.num_tasks);
        for i in 0..spec.num_tasks {
            r.set_context(format!("experience {i}"));
            let task_id = r.u32()?;
            let class_set = r.u32s()?;
            let labeled = r.tensor()?;
            let labels = r.u32s()?;
            let unlabeled = r.tensor()?;
            let unlabeled_truth = r.u32s()?;
            if labels.len() != labeled.rows() || unlabeled_truth.len() != unlabeled.rows() {
                return Err(r.fail("label count does not match tensor rows"));
            }
            experiences.push(Experience {
                task_id,
                class_set,
                labeled,
                labels,
                unlabeled,
                unlabeled_truth,
            });
        }
        r.set_context("");
        if !r.is_at_end() {
            return Err(r.fail("trailing bytes after the last experience"));
        }
        Ok(TaskStream { spec, experiences })
    }

    /// SHA-256 of the serialized stream, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    std::fs::write(path, stream.to_bytes())?;
    Ok(())
}

pub fn load_stream(path: &Path) -> Result<TaskStream> {
    TaskStream::from_bytes(&std::fs::read(path)?)
}
