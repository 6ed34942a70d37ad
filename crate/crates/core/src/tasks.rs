//! Procedural datasets for localization, classification and segmentation.
//!
//! Every sample is a pure function of `(config, seed, index)`. Training
//! samples use indices `0..n_train`; test samples start at [`TEST_OFFSET`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encode::BBox;
use crate::error::{Error, Result};
use crate::loss::Target;
use crate::rng::{Rng, StreamKind};
use crate::tensor::Tensor;

/// First index of the test split.
pub const TEST_OFFSET: u32 = 1 << 31;

/// Smallest generated rectangle side, in pixels.
pub const MIN_BOX_PX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Localization,
    Classification,
    Segmentation,
}

impl TaskFamily {
    pub fn code(self) -> u8 {
        match self {
            TaskFamily::Localization => 0,
            TaskFamily::Classification => 1,
            TaskFamily::Segmentation => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub distractors: usize,
    /// Scales the per-sample randomness of class gratings (0 = none).
    pub jitter: f64,
}

impl TaskConfig {
    pub fn new(family: TaskFamily) -> Self {
        let classes = match family {
            TaskFamily::Classification => 5,
            _ => 1,
        };
        Self {
            family,
            height: 48,
            width: 48,
            channels: 1,
            classes,
            n_train: 1000,
            n_test: 200,
            noise: 0.1,
            distractors: if family == TaskFamily::Classification { 0 } else { 2 },
            jitter: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be at least 1".into());
        }
        if self.n_train as u64 > TEST_OFFSET as u64 || self.n_test as u64 > TEST_OFFSET as u64 {
            return bad("split sizes exceed the index space".into());
        }
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.family == TaskFamily::Classification && self.classes < 2 {
            return bad(format!("classification needs classes >= 2, got {}", self.classes));
        }
        let min_side = match self.family {
            TaskFamily::Localization => 2 * MIN_BOX_PX,
            _ => 16,
        };
        if self.height < min_side || self.width < min_side {
            return bad(format!("image must be at least {min_side}x{min_side}"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be finite and >= 0, got {}", self.jitter));
        }
        Ok(())
    }

    /// Label of a classification sample.
    pub fn class_of(&self, index: u32) -> usize {
        index as usize % self.classes.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleTarget {
    Box(BBox),
    Class(usize),
    /// `(1, h, w)` binary mask.
    Mask(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    /// `(c, h, w)`, values in `[0, 1]`.
    pub image: Tensor,
    pub target: SampleTarget,
}

pub fn gen_sample(config: &TaskConfig, seed: u64, index: u32) -> Result<TaskSample> {
    config.validate()?;
    let mut rng = Rng::for_kind(seed, StreamKind::Data, index);
    let (h, w, c) = (config.height, config.width, config.channels);
    let mut plane = vec![0.0; h * w];
    let target = match config.family {
        TaskFamily::Localization => {
            plane.iter_mut().for_each(|p| *p = 0.2);
            let bw = rng.int_inclusive(MIN_BOX_PX as i64, (w / 2) as i64) as usize;
            let bh = rng.int_inclusive(MIN_BOX_PX as i64, (h / 2) as i64) as usize;
            let x0 = rng.int_inclusive(0, (w - bw) as i64) as usize;
            let y0 = rng.int_inclusive(0, (h - bh) as i64) as usize;
            let level = rng.uniform_range(0.6, 1.0);
            for i in y0..y0 + bh {
                plane[i * w + x0..i * w + x0 + bw].iter_mut().for_each(|p| *p = level);
            }
            add_distractors(&mut plane, h, w, config.distractors, &mut rng);
            SampleTarget::Box(BBox::from_corners(
                x0 as f64 / w as f64,
                y0 as f64 / h as f64,
                (x0 + bw) as f64 / w as f64,
                (y0 + bh) as f64 / h as f64,
            ))
        }
        TaskFamily::Classification => {
            let class = config.class_of(index);
            let j = config.jitter;
            let theta = PI * class as f64 / config.classes as f64 + j * 0.12 * rng.normal();
            let cycles = 4.0 + j * 0.4 * rng.normal();
            let phase = j * rng.uniform_range(0.0, 2.0 * PI);
            let (ct, st) = (theta.cos(), theta.sin());
            for i in 0..h {
                for jx in 0..w {
                    let u = (jx as f64 * ct + i as f64 * st) / w as f64;
                    plane[i * w + jx] = 0.5 + 0.3 * (2.0 * PI * cycles * u + phase).sin();
                }
            }
            add_distractors(&mut plane, h, w, config.distractors, &mut rng);
            SampleTarget::Class(class)
        }
        TaskFamily::Segmentation => {
            plane.iter_mut().for_each(|p| *p = 0.2);
            let ry = rng.uniform_range(3.0, h as f64 / 6.0);
            let rx = rng.uniform_range(3.0, w as f64 / 6.0);
            let r = rx.max(ry) + 1.0;
            let cy = rng.uniform_range(r, h as f64 - r);
            let cx = rng.uniform_range(r, w as f64 - r);
            let angle = rng.uniform_range(0.0, PI);
            let level = rng.uniform_range(0.6, 0.9);
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut mask = vec![0.0; h * w];
            for i in 0..h {
                for jx in 0..w {
                    let (dx, dy) = (jx as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                    let (u, v) = (dx * ca + dy * sa, -dx * sa + dy * ca);
                    let rho = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                    // Soft edge about one pixel wide.
                    let edge = 1.0 / (1.0 + ((rho - 1.0) * rx.min(ry) * 2.0).exp());
                    plane[i * w + jx] += (level - 0.2) * edge;
                    mask[i * w + jx] = if rho <= 1.0 { 1.0 } else { 0.0 };
                }
            }
            add_distractors(&mut plane, h, w, config.distractors, &mut rng);
            SampleTarget::Mask(Tensor::new([1, h, w], mask)?)
        }
    };
    if config.noise > 0.0 {
        for p in &mut plane {
            *p += config.noise * rng.normal();
        }
    }
    plane.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    let data = (0..c).flat_map(|_| plane.iter().copied()).collect();
    Ok(TaskSample {
        image: Tensor::new([c, h, w], data)?,
        target,
    })
}

/// Bright disks of radius 2 at random positions.
fn add_distractors(plane: &mut [f64], h: usize, w: usize, count: usize, rng: &mut Rng) {
    for _ in 0..count {
        let cy = rng.uniform_range(2.0, h as f64 - 2.0);
        let cx = rng.uniform_range(2.0, w as f64 - 2.0);
        let level = rng.uniform_range(0.6, 1.0);
        for i in 0..h {
            for j in 0..w {
                let d2 = (j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2);
                if d2 <= 4.0 {
                    plane[i * w + j] = level;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A materialized list of samples with their generating indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub seed: u64,
    pub indices: Vec<u32>,
    pub samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn generate(config: &TaskConfig, seed: u64, split: Split) -> Result<Self> {
        let indices: Vec<u32> = match split {
            Split::Train => (0..config.n_train as u32).collect(),
            Split::Test => (0..config.n_test as u32).map(|i| TEST_OFFSET + i).collect(),
        };
        Self::from_indices(config, seed, indices)
    }

    pub fn from_indices(config: &TaskConfig, seed: u64, indices: Vec<u32>) -> Result<Self> {
        config.validate()?;
        let samples = indices
            .iter()
            .map(|&i| gen_sample(config, seed, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            seed,
            indices,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples into an image batch and a loss target.
    pub fn batch(&self, which: &[usize]) -> Result<(Tensor, Target)> {
        if which.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let images: Vec<&Tensor> = which.iter().map(|&i| &self.samples[i].image).collect();
        let x = Tensor::stack(&images)?;
        let target = targets_of(which.iter().map(|&i| &self.samples[i].target))?;
        Ok((x, target))
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.samples
            .iter()
            .filter_map(|s| match s.target {
                SampleTarget::Box(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .filter_map(|s| match s.target {
                SampleTarget::Class(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    pub fn masks(&self) -> Vec<Tensor> {
        self.samples
            .iter()
            .filter_map(|s| match &s.target {
                SampleTarget::Mask(m) => Some(m.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Collects per-sample targets of one kind into a batched loss target.
pub fn targets_of<'a>(targets: impl Iterator<Item = &'a SampleTarget>) -> Result<Target> {
    let targets: Vec<&SampleTarget> = targets.collect();
    match targets.first() {
        None => Err(Error::Empty("targets")),
        Some(SampleTarget::Box(_)) => {
            let mut data = Vec::with_capacity(targets.len() * 4);
            for t in &targets {
                match t {
                    SampleTarget::Box(b) => data.extend(b.to_array()),
                    _ => return Err(Error::InvalidArgument("mixed target kinds".into())),
                }
            }
            Ok(Target::Boxes(Tensor::new([targets.len(), 4], data)?))
        }
        Some(SampleTarget::Class(_)) => targets
            .iter()
            .map(|t| match t {
                SampleTarget::Class(c) => Ok(*c),
                _ => Err(Error::InvalidArgument("mixed target kinds".into())),
            })
            .collect::<Result<Vec<_>>>()
            .map(Target::Labels),
        Some(SampleTarget::Mask(_)) => {
            let masks = targets
                .iter()
                .map(|t| match t {
                    SampleTarget::Mask(m) => Ok(m),
                    _ => Err(Error::InvalidArgument("mixed target kinds".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Target::Masks(Tensor::stack(&masks)?))
        }
    }
}

/// Epoch-shuffled mini-batches over a dataset.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(Self {
            data,
            batch_size,
            rng: Rng::for_kind(seed, StreamKind::Batching, 0),
            order: Vec::new(),
            pos: 0,
        })
    }

    /// Next batch of sample positions; a new permutation starts whenever the
    /// current one runs out.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn next_batch(&mut self) -> Result<(Tensor, Target)> {
        let which = self.next_indices();
        self.data.batch(&which)
    }
}

/// Index sets of a few-shot protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotSplit {
    pub base: Vec<u32>,
    pub novel_train: Vec<u32>,
    pub novel_test: Vec<u32>,
}

/// Base-class training indices, `k` training indices per novel class and the
/// remaining novel indices for testing. Novel samples are drawn from indices
/// below `n_train + n_test`, shuffled per class.
pub fn few_shot_split(
    config: &TaskConfig,
    seed: u64,
    base_classes: &[usize],
    novel_classes: &[usize],
    k: usize,
) -> Result<FewShotSplit> {
    config.validate()?;
    if config.family != TaskFamily::Classification {
        return Err(Error::InvalidConfig("few-shot splits need a classification task".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(c) = base_classes.iter().find(|c| novel_classes.contains(c)) {
        return Err(Error::InvalidArgument(format!("class {c} is both base and novel")));
    }
    if let Some(c) = base_classes.iter().chain(novel_classes).find(|&&c| c >= config.classes) {
        return Err(Error::InvalidArgument(format!("class {c} out of range")));
    }
    let base = (0..config.n_train as u32)
        .filter(|&i| base_classes.contains(&config.class_of(i)))
        .collect();
    let pool_end = (config.n_train + config.n_test) as u32;
    let mut rng = Rng::for_kind(seed, StreamKind::Split, 0);
    let (mut novel_train, mut novel_test) = (Vec::new(), Vec::new());
    for &c in novel_classes {
        let mut pool: Vec<u32> = (0..pool_end).filter(|&i| config.class_of(i) == c).collect();
        if k >= pool.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} leaves no test samples for class {c} ({} available)",
                pool.len()
            )));
        }
        rng.shuffle(&mut pool);
        novel_train.extend_from_slice(&pool[..k]);
        novel_test.extend_from_slice(&pool[k..]);
    }
    Ok(FewShotSplit {
        base,
        novel_train,
        novel_test,
    })
}
