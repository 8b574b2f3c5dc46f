//! Synthetic teacher-student classification tasks and the on-disk dataset
//! format.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::Component;
use crate::error::{Error, Result};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;
use crate::vit::{init_params, predict, ViTConfig, ViTParams};

pub const DATASET_MAGIC: &[u8; 8] = b"APLADS1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Labelled `channels × S × S` images with a split tag each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.len() || self.splits.len() != self.len() {
            return Err(Error::data("images, labels and split tags differ in length"));
        }
        let shape = [self.channels, self.image_size, self.image_size];
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            if img.shape() != shape {
                return Err(Error::data(format!(
                    "record {i}: image shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            if label >= self.num_classes {
                return Err(Error::data(format!(
                    "record {i}: label {label} outside 0..{}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Checks that images fit a model configuration.
    pub fn check_model(&self, cfg: &ViTConfig) -> Result<()> {
        if self.channels != cfg.channels
            || self.image_size != cfg.image_size
            || self.num_classes != cfg.num_classes
        {
            return Err(Error::config(format!(
                "dataset is {}×{}×{} with {} classes; model expects {}×{}×{} with {}",
                self.channels,
                self.image_size,
                self.image_size,
                self.num_classes,
                cfg.channels,
                cfg.image_size,
                cfg.image_size,
                cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Per-class counts over the whole dataset.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn default_scale() -> f64 {
    0.1
}

fn default_tie_gap() -> f64 {
    0.05
}

fn default_max_tries() -> usize {
    100
}

fn default_perturb() -> Component {
    Component::WO
}

/// Recipe for a teacher-student dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default = "default_perturb")]
    pub perturb: Component,
    /// Standard deviation of the re-randomized component.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Minimum top-2 teacher logit gap of an accepted sample.
    #[serde(default = "default_tie_gap")]
    pub tie_gap: f64,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, train: usize, val: usize, test: usize) -> Self {
        SynthSpec {
            seed,
            perturb: default_perturb(),
            scale: default_scale(),
            tie_gap: default_tie_gap(),
            max_tries: default_max_tries(),
            train,
            val,
            test,
        }
    }
}

/// A frozen teacher and the student initialization that differs from it only
/// in the perturbed component.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub teacher: ViTParams,
    pub student: ViTParams,
    pub perturbation: Component,
    pub sample_seed: u64,
}

const TEACHER_ATTEMPTS: u64 = 10;
const CALIBRATION_PROBES: usize = 256;
/// Smallest accepted share of any class, as a fraction of the uniform share.
const MIN_CLASS_SHARE: f64 = 0.4;

fn gaussian_image(cfg: &ViTConfig, rng: &mut Rng) -> Tensor {
    let s = cfg.image_size;
    Tensor::from_fn(&[cfg.channels, s, s], |_| rng.normal() as f32 as f64)
}

fn perturb(params: &mut ViTParams, which: Component, scale: f64, rng: &mut Rng) {
    for (name, t) in params.named_mut() {
        if !which.owns(&name) {
            continue;
        }
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let center = leaf == "gamma" || leaf.starts_with("ls");
        for x in t.data_mut() {
            let base = if center { *x } else { 0.0 };
            *x = base + scale * rng.normal();
        }
    }
}

/// Rescales the classifier so that, over `probes`, every class logit has
/// zero mean and the centered logits have unit standard deviation.
fn calibrate_head(teacher: &mut ViTParams, cfg: &ViTConfig, probes: &[Tensor]) -> Result<()> {
    let logits = predict(probes, teacher, cfg)?;
    let (n, c) = logits.dims2();
    let means: Vec<f64> = (0..c)
        .map(|j| (0..n).map(|i| logits.at(i, j)).sum::<f64>() / n as f64)
        .collect();
    let var = (0..n)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| (logits.at(i, j) - means[j]).powi(2))
        .sum::<f64>()
        / (n * c) as f64;
    if var.is_nan() || var <= 0.0 {
        return Err(Error::Generation("teacher logits do not depend on the input".into()));
    }
    let s = 1.0 / var.sqrt();
    for w in teacher.w_pred.data_mut() {
        *w *= s;
    }
    for (b, m) in teacher.b_pred.data_mut().iter_mut().zip(&means) {
        *b = (*b - m) * s;
    }
    Ok(())
}

fn top2_gap(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    let second = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != best)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, row[best] - second)
}

/// Draws a teacher, labels Gaussian images with its argmax, and returns the
/// matching student initialization. Splits are contiguous: train, val, test.
pub fn gen_teacher_task(cfg: &ViTConfig, spec: &SynthSpec) -> Result<(TeacherTask, Dataset)> {
    let cfg = cfg.base();
    cfg.validate()?;
    if spec.train == 0 || spec.val == 0 || spec.test == 0 {
        return Err(Error::config("every split needs at least one sample"));
    }
    if spec.scale.is_nan() || spec.scale <= 0.0 || spec.tie_gap < 0.0 || spec.max_tries == 0 {
        return Err(Error::config("synth settings need scale > 0, tie_gap >= 0, max_tries >= 1"));
    }
    let base = init_params(&cfg, &mut Rng::new(spec.seed))?;
    let count = spec.train + spec.val + spec.test;
    let mut last_hist = Vec::new();
    for attempt in 0..TEACHER_ATTEMPTS {
        let mut teacher = base.clone();
        let mut prng = Rng::new(mix_seed(spec.seed ^ 0x7eac_4e00 ^ attempt));
        perturb(&mut teacher, spec.perturb, spec.scale, &mut prng);

        let probes: Vec<Tensor> = (0..CALIBRATION_PROBES).map(|_| gaussian_image(&cfg, &mut prng)).collect();
        calibrate_head(&mut teacher, &cfg, &probes)?;
        let c = cfg.num_classes;

        let sample_seed = mix_seed(spec.seed ^ 0x5a3b_1e00 ^ attempt);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = Rng::new(sample_seed.wrapping_add(i as u64));
            let mut accepted = None;
            for _ in 0..spec.max_tries {
                let img = gaussian_image(&cfg, &mut rng);
                let out = predict(std::slice::from_ref(&img), &teacher, &cfg)?;
                let (label, gap) = top2_gap(out.data());
                if gap >= spec.tie_gap {
                    accepted = Some((img, label));
                    break;
                }
            }
            let (img, label) = accepted.ok_or_else(|| {
                Error::Generation(format!(
                    "sample {i}: no draw cleared the tie gap {} in {} tries",
                    spec.tie_gap, spec.max_tries
                ))
            })?;
            images.push(img);
            labels.push(label);
        }
        let splits = (0..count)
            .map(|i| match i {
                i if i < spec.train => Split::Train,
                i if i < spec.train + spec.val => Split::Val,
                _ => Split::Test,
            })
            .collect();
        let data = Dataset {
            channels: cfg.channels,
            image_size: cfg.image_size,
            num_classes: c,
            images,
            labels,
            splits,
        };
        let hist = data.histogram();
        let floor = MIN_CLASS_SHARE * count as f64 / c as f64;
        if hist.iter().all(|&h| h as f64 >= floor) {
            let mut student = base.clone();
            student.w_pred = teacher.w_pred.clone();
            student.b_pred = teacher.b_pred.clone();
            let task = TeacherTask {
                teacher,
                student,
                perturbation: spec.perturb,
                sample_seed,
            };
            return Ok((task, data));
        }
        last_hist = hist;
    }
    Err(Error::Generation(format!(
        "no balanced teacher in {TEACHER_ATTEMPTS} attempts; last class histogram {last_hist:?}"
    )))
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    data.validate()?;
    let mut buf = Vec::with_capacity(24 + data.len() * (5 + 4 * data.channels * data.image_size.pow(2)));
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [data.len(), data.channels, data.image_size, data.num_classes] {
        let v = u32::try_from(v).map_err(|_| Error::data(format!("header field {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..data.len() {
        buf.push(data.splits[i].tag());
        buf.extend_from_slice(&(data.labels[i] as u32).to_le_bytes());
        for &x in data.images[i].data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("file truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic; not a dataset file"));
    }
    let count = r.u32("count")? as usize;
    let channels = r.u32("channels")? as usize;
    let size_at = r.pos;
    let image_size = r.u32("image size")? as usize;
    let num_classes = r.u32("class count")? as usize;
    if channels == 0 || image_size == 0 || num_classes == 0 {
        return Err(Error::format(size_at as u64, "zero channels, image size or class count"));
    }
    let pixels = channels * image_size * image_size;
    let record = 5 + 4 * pixels;
    let remaining = bytes.len() - r.pos;
    if remaining != count * record {
        return Err(Error::format(
            (r.pos + (remaining / record) * record) as u64,
            format!("expected {count} records of {record} bytes, found {remaining} bytes"),
        ));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut splits = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos;
        let tag = r.take(1, "split tag")?[0];
        let split = Split::from_tag(tag)
            .ok_or_else(|| Error::format(at as u64, format!("record {i}: unknown split tag {tag}")))?;
        let label = r.u32("label")? as usize;
        if label >= num_classes {
            return Err(Error::data(format!(
                "record {i}: label {label} outside 0..{num_classes}"
            )));
        }
        let raw = r.take(4 * pixels, "pixels")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        images.push(Tensor::new(vec![channels, image_size, image_size], data)?);
        labels.push(label);
        splits.push(split);
    }
    Ok(Dataset {
        channels,
        image_size,
        num_classes,
        images,
        labels,
        splits,
    })
}
