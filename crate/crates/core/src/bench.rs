//! Balanced accuracy, synthetic suites, directory ingestion and the
//! three-row ablation harness (stain augmentation × probing mode).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{lab_pixel_to_rgb, rgb_pixel_to_lab, StainAugConfig};
use crate::encoder::{forward, EncoderConfig, EncoderParams, TokenSequence};
use crate::error::{Error, Result};
use crate::heads::{predict_all, train_head, HeadMode, HeadTrainConfig};
use crate::numkernel::RngStream;
use crate::params::{fingerprint, Checkpoint};
use crate::raster::{is_raster_path, read_raster, Raster};
use crate::ssl::{encoder_from_checkpoint, SslConfig, SslState};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// JSON schema for [`BenchReport`].
pub const REPORT_SCHEMA: &str = include_str!("../schema/bench_report.schema.json");

/// Per-class recalls plus their mean over classes with non-zero support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub bacc: f64,
    /// `None` for classes absent from `y_true`.
    pub recalls: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
}

pub fn balanced_accuracy_detail(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<BalancedAccuracy> {
    if y_true.is_empty() {
        return Err(Error::Parameter("balanced accuracy of an empty set".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&y| y >= classes) {
        return Err(Error::Parameter(format!("label {bad} outside [0, {classes})")));
    }
    let mut support = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let recalls: Vec<Option<f64>> = support
        .iter()
        .zip(&correct)
        .map(|(&s, &c)| (s > 0).then(|| c as f64 / s as f64))
        .collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    let excluded_classes = (0..classes).filter(|&c| support[c] == 0).collect();
    Ok(BalancedAccuracy {
        bacc: present.iter().sum::<f64>() / present.len() as f64,
        recalls,
        excluded_classes,
    })
}

/// Mean per-class recall; classes without support are left out of the mean.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<f64> {
    balanced_accuracy_detail(y_true, y_pred, classes).map(|b| b.bacc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ItemSource {
    Inline(Raster),
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub source_id: String,
    pub label: usize,
    pub source: ItemSource,
}

impl LabeledItem {
    pub fn raster(&self) -> Result<Raster> {
        match &self.source {
            ItemSource::Inline(r) => Ok(r.clone()),
            ItemSource::Path(p) => read_raster(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledItem>,
    pub split: Option<Split>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        self.items.iter().for_each(|i| c[i.label] += 1);
        c
    }

    fn subset(&self, idx: &[usize], split: Split) -> LabeledDataset {
        LabeledDataset {
            class_names: self.class_names.clone(),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            split: Some(split),
        }
    }
}

/// Train, validation and test splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub name: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl TaskSplits {
    /// Fingerprint of split membership and labels.
    pub fn split_hash(&self) -> String {
        let ids = |d: &LabeledDataset| -> Vec<(String, usize)> {
            d.items.iter().map(|i| (i.source_id.clone(), i.label)).collect()
        };
        fingerprint(&(ids(&self.train), ids(&self.val), ids(&self.test)))
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }
}

/// Stratified 60/20/20 split, grouping items by source id so that no source
/// straddles two splits. A source takes the label of its first item.
pub fn split_dataset(ds: &LabeledDataset, name: &str, seed: u64) -> Result<TaskSplits> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in ds.items.iter().enumerate() {
        by_source.entry(it.source_id.as_str()).or_default().push(i);
    }
    let mut per_class: Vec<Vec<&str>> = vec![Vec::new(); ds.num_classes()];
    for (src, idx) in &by_source {
        per_class[ds.items[idx[0]].label].push(src);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, sources) in per_class.iter_mut().enumerate() {
        RngStream::new(seed, 0x5350_4c54).substream(c as u64).shuffle(sources);
        let n = sources.len();
        let n_val = ((n as f64) * 0.2).round() as usize;
        let n_test = ((n as f64) * 0.2).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        for (k, src) in sources.iter().enumerate() {
            let target = if k < n_train {
                &mut train
            } else if k < n_train + n_val {
                &mut val
            } else {
                &mut test
            };
            target.extend(by_source[src].iter().copied());
        }
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Parameter(format!(
            "{name}: too few sources for a train/val/test split"
        )));
    }
    Ok(TaskSplits {
        name: name.to_string(),
        train: ds.subset(&train, Split::Train),
        val: ds.subset(&val, Split::Val),
        test: ds.subset(&test, Split::Test),
    })
}

/// Where the class signal lives in a synthetic suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Class-dependent mean colour.
    Global,
    /// Class-dependent texture in one marked token region; the multiset of
    /// textures in every image is class-independent.
    Local,
    /// Class-dependent texture orientation everywhere; train and validation
    /// stains correlate with the class, the test split gets a stain shift.
    Shifted,
}

/// Deserializes from `kind` plus any subset of the other fields; missing
/// fields take the defaults of that kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartialSuiteSpec")]
pub struct SuiteSpec {
    pub kind: SignalKind,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub token_size: usize,
    /// Per-pixel, per-channel Gaussian noise (8-bit units).
    pub pixel_noise: f64,
    /// Texture amplitude (8-bit units).
    pub amplitude: f64,
    /// Per-image stain variability, LAB units.
    pub stain_sigma: f64,
    /// Magnitude of the class-correlated LAB stain offset in train/val
    /// ([`SignalKind::Shifted`]) or of the class colour offset in RGB
    /// ([`SignalKind::Global`]).
    pub class_offset: f64,
    /// LAB offset applied to every test image ([`SignalKind::Shifted`]).
    pub test_shift: [f64; 3],
}

impl SuiteSpec {
    pub fn new(kind: SignalKind) -> Self {
        let base = SuiteSpec {
            kind,
            classes: 2,
            per_class: 150,
            image_size: 64,
            token_size: 16,
            pixel_noise: 12.0,
            amplitude: 30.0,
            stain_sigma: 1.0,
            class_offset: 22.0,
            test_shift: [0.0; 3],
        };
        match kind {
            SignalKind::Global => base,
            // Wide per-image stain noise drowns the small trace the marker
            // token leaves in any global summary.
            SignalKind::Local => SuiteSpec {
                stain_sigma: 8.0,
                ..base
            },
            SignalKind::Shifted => SuiteSpec {
                amplitude: 8.0,
                stain_sigma: 4.0,
                class_offset: 0.0,
                test_shift: [0.0, 9.0, -9.0],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.classes < 2 || self.classes > PATTERNS {
            return bad(format!("classes must lie in [2, {PATTERNS}]"));
        }
        if self.per_class < 5 {
            return bad("per_class must be at least 5".into());
        }
        if self.token_size < 4 || self.token_size % 4 != 0 || self.image_size % self.token_size != 0 {
            return bad("token_size must be a multiple of 4 dividing image_size".into());
        }
        let n = (self.image_size / self.token_size).pow(2);
        if self.kind == SignalKind::Local && n < self.classes + 1 {
            return bad("local suites need more tokens than classes".into());
        }
        if ![self.pixel_noise, self.amplitude, self.stain_sigma, self.class_offset]
            .iter()
            .chain(&self.test_shift)
            .all(|v| v.is_finite())
            || self.pixel_noise < 0.0
            || self.stain_sigma < 0.0
        {
            return bad("suite magnitudes must be finite, noise non-negative".into());
        }
        Ok(())
    }

    pub fn task_name(&self) -> &'static str {
        match self.kind {
            SignalKind::Global => "global",
            SignalKind::Local => "local",
            SignalKind::Shifted => "shifted",
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSuiteSpec {
    kind: SignalKind,
    classes: Option<usize>,
    per_class: Option<usize>,
    image_size: Option<usize>,
    token_size: Option<usize>,
    pixel_noise: Option<f64>,
    amplitude: Option<f64>,
    stain_sigma: Option<f64>,
    class_offset: Option<f64>,
    test_shift: Option<[f64; 3]>,
}

impl TryFrom<PartialSuiteSpec> for SuiteSpec {
    type Error = String;

    fn try_from(p: PartialSuiteSpec) -> std::result::Result<Self, String> {
        let d = SuiteSpec::new(p.kind);
        Ok(SuiteSpec {
            kind: p.kind,
            classes: p.classes.unwrap_or(d.classes),
            per_class: p.per_class.unwrap_or(d.per_class),
            image_size: p.image_size.unwrap_or(d.image_size),
            token_size: p.token_size.unwrap_or(d.token_size),
            pixel_noise: p.pixel_noise.unwrap_or(d.pixel_noise),
            amplitude: p.amplitude.unwrap_or(d.amplitude),
            stain_sigma: p.stain_sigma.unwrap_or(d.stain_sigma),
            class_offset: p.class_offset.unwrap_or(d.class_offset),
            test_shift: p.test_shift.unwrap_or(d.test_shift),
        })
    }
}

const PATTERNS: usize = 4;
const TISSUE_RGB: [f64; 3] = [212.0, 145.0, 185.0];
const MARKER_RGB: [f64; 3] = [120.0, 70.0, 160.0];

/// Zero-mean ±1 texture with period 4 on any token whose side is a multiple of 4.
fn pattern(kind: usize, x: usize, y: usize) -> f64 {
    let on = match kind {
        0 => (y / 2) % 2 == 0,
        1 => (x / 2) % 2 == 0,
        2 => (x / 2 + y / 2) % 2 == 0,
        _ => ((x + y) / 2) % 2 == 0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

struct Canvas {
    size: usize,
    token: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    /// Tissue-coloured canvas with per-token brightness and per-pixel noise.
    fn tissue(spec: &SuiteSpec, base: [f64; 3], rng: &mut RngStream) -> Canvas {
        let size = spec.image_size;
        let token = spec.token_size;
        let grid = size / token;
        let offsets: Vec<f64> = (0..grid * grid).map(|_| rng.normal(0.0, 6.0)).collect();
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let o = offsets[(y / token) * grid + x / token];
                px.push([0, 1, 2].map(|c| base[c] + o + rng.normal(0.0, spec.pixel_noise)));
            }
        }
        Canvas { size, token, px }
    }

    fn token_origin(&self, t: usize) -> (usize, usize) {
        let grid = self.size / self.token;
        ((t % grid) * self.token, (t / grid) * self.token)
    }

    fn recolor_token(&mut self, t: usize, from: [f64; 3], to: [f64; 3]) {
        let (x0, y0) = self.token_origin(t);
        for y in y0..y0 + self.token {
            for x in x0..x0 + self.token {
                let p = &mut self.px[y * self.size + x];
                for c in 0..3 {
                    p[c] += to[c] - from[c];
                }
            }
        }
    }

    fn add_pattern(&mut self, t: usize, kind: usize, amplitude: f64) {
        let (x0, y0) = self.token_origin(t);
        for y in 0..self.token {
            for x in 0..self.token {
                let v = amplitude * pattern(kind, x, y);
                self.px[(y0 + y) * self.size + x0 + x].iter_mut().for_each(|c| *c += v);
            }
        }
    }

    /// Quantizes, optionally shifting every pixel in LAB first.
    fn finish(self, lab_shift: [f64; 3]) -> Raster {
        let shift = lab_shift != [0.0; 3];
        let mut out = Raster::filled(self.size, self.size, [0, 0, 0]);
        for (i, p) in self.px.iter().enumerate() {
            let mut rgb = p.map(|v| v.round().clamp(0.0, 255.0) as u8);
            if shift {
                let lab = rgb_pixel_to_lab(rgb);
                rgb = lab_pixel_to_rgb([0, 1, 2].map(|c| lab[c] + lab_shift[c]));
            }
            out.set(i % self.size, i / self.size, rgb);
        }
        out
    }
}

fn class_direction(c: usize, classes: usize) -> (f64, f64) {
    let theta = std::f64::consts::TAU * c as f64 / classes as f64;
    (theta.cos(), theta.sin())
}

fn natural_stain(spec: &SuiteSpec, rng: &mut RngStream) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.normal(0.0, spec.stain_sigma))
}

/// One raster of class `c`; `test` selects the shifted test stain.
fn synth_image(spec: &SuiteSpec, c: usize, test: bool, rng: &mut RngStream) -> Raster {
    let n = (spec.image_size / spec.token_size).pow(2);
    let stain = natural_stain(spec, rng);
    match spec.kind {
        SignalKind::Global => {
            let (u, v) = class_direction(c, spec.classes);
            let base = [
                TISSUE_RGB[0] + spec.class_offset * u,
                TISSUE_RGB[1],
                TISSUE_RGB[2] + spec.class_offset * v,
            ];
            Canvas::tissue(spec, base, rng).finish(stain)
        }
        SignalKind::Local => {
            let mut canvas = Canvas::tissue(spec, TISSUE_RGB, rng);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            canvas.recolor_token(order[0], TISSUE_RGB, MARKER_RGB);
            for k in 0..spec.classes {
                canvas.add_pattern(order[k], (c + k) % spec.classes, spec.amplitude);
            }
            canvas.finish(stain)
        }
        SignalKind::Shifted => {
            let mut canvas = Canvas::tissue(spec, TISSUE_RGB, rng);
            for t in 0..n {
                canvas.add_pattern(t, c, spec.amplitude);
            }
            let offset = if test {
                spec.test_shift
            } else {
                let (u, v) = class_direction(c, spec.classes);
                [0.0, spec.class_offset * u, spec.class_offset * v]
            };
            canvas.finish([0, 1, 2].map(|k| stain[k] + offset[k]))
        }
    }
}

/// Reproducible labelled suite, split 60/20/20 per class. Test items of a
/// shifted suite are rendered with the test stain.
pub fn make_synthetic_suite(rng: &RngStream, spec: &SuiteSpec) -> Result<TaskSplits> {
    spec.validate()?;
    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let index: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.per_class).map(move |k| (c, k)))
        .collect();
    let skeleton = LabeledDataset {
        class_names: class_names.clone(),
        items: index
            .iter()
            .map(|&(c, k)| LabeledItem {
                source_id: format!("{}-{c}-{k:04}", spec.task_name()),
                label: c,
                source: ItemSource::Path(PathBuf::new()),
            })
            .collect(),
        split: None,
    };
    let position: BTreeMap<String, usize> = skeleton
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.source_id.clone(), i))
        .collect();
    let mut splits = split_dataset(&skeleton, spec.task_name(), rng.substream(0).next_u64())?;
    let render = |d: &mut LabeledDataset, test: bool| {
        d.items.par_iter_mut().for_each(|it| {
            let mut item_rng = rng.substream(1 + position[&it.source_id] as u64);
            it.source = ItemSource::Inline(synth_image(spec, it.label, test, &mut item_rng));
        });
    };
    render(&mut splits.train, false);
    render(&mut splits.val, false);
    render(&mut splits.test, true);
    Ok(splits)
}

/// Per-image LAB stain spread of the pretraining corpus, wider than a single
/// suite's so the corpus mixes many acquisition sites. With a narrower
/// spread the images are nearly identical in global statistics and the
/// self-distillation targets collapse to uniform.
pub const CORPUS_STAIN_SIGMA: f64 = 8.0;

/// Unlabelled pretraining images drawn from the local and shifted
/// generators, without class-correlated colour.
pub fn pretraining_corpus(seed: u64, n: usize, image_size: usize, token_size: usize) -> Result<Vec<Raster>> {
    let specs = [(SignalKind::Local, 30.0), (SignalKind::Shifted, 12.0)].map(|(k, amplitude)| SuiteSpec {
        image_size,
        token_size,
        amplitude,
        ..SuiteSpec::new(k)
    });
    specs[0].validate()?;
    let root = RngStream::new(seed, 0x636f_7270);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.substream(i as u64);
            let spec = &specs[i % 2];
            let c = rng.below(spec.classes as u64) as usize;
            let clean = SuiteSpec {
                class_offset: 0.0,
                stain_sigma: CORPUS_STAIN_SIGMA,
                ..spec.clone()
            };
            synth_image(&clean, c, false, &mut rng)
        })
        .collect())
}

/// Result of scanning a class-per-subdirectory tree.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: LabeledDataset,
    /// Class directories without any raster file.
    pub excluded_classes: Vec<String>,
}

/// `root/<class_name>/*.{ppm,png,tif,...}`; sorted class names define ids and
/// files are enumerated in sorted order. Every file is decoded once so
/// unreadable ones are reported together.
pub fn ingest_directory(root: &Path) -> Result<Ingested> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut class_names = Vec::new();
    let mut excluded_classes = Vec::new();
    let mut items = Vec::new();
    for dir in &class_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_raster_path(p))
            .collect();
        if files.is_empty() {
            log::warn!("class directory {} holds no rasters; excluded", dir.display());
            excluded_classes.push(name);
            continue;
        }
        files.sort();
        let label = class_names.len();
        class_names.push(name.clone());
        items.extend(files.into_iter().map(|p| LabeledItem {
            source_id: format!(
                "{name}/{}",
                p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
            ),
            label,
            source: ItemSource::Path(p),
        }));
    }
    let failures: Vec<String> = items
        .par_iter()
        .filter_map(|it| match it.raster() {
            Ok(_) => None,
            Err(e) => Some(e.to_string()),
        })
        .collect();
    if !failures.is_empty() {
        return Err(Error::Unreadable(failures));
    }
    Ok(Ingested {
        dataset: LabeledDataset {
            class_names,
            items,
            split: None,
        },
        excluded_classes,
    })
}

/// Frozen-encoder token sequences for every item, in item order.
pub fn embed_dataset(ds: &LabeledDataset, encoder: &EncoderParams) -> Result<Vec<(TokenSequence, usize)>> {
    ds.items
        .par_iter()
        .map(|it| Ok((forward(&it.raster()?, encoder)?, it.label)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub head_mode: HeadMode,
    pub staining_aug: bool,
    pub seed: u64,
    pub bacc: f64,
    pub per_class_recalls: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub split_hash: String,
    pub best_epoch: usize,
}

/// Trains a head on frozen embeddings of `train` (selecting on `val`) and
/// scores it on `test`.
pub fn evaluate_task(
    splits: &TaskSplits,
    encoder: &EncoderParams,
    mode: HeadMode,
    head: &HeadTrainConfig,
    staining_aug: bool,
) -> Result<TaskResult> {
    let train = embed_dataset(&splits.train, encoder)?;
    let val = embed_dataset(&splits.val, encoder)?;
    let test = embed_dataset(&splits.test, encoder)?;
    evaluate_embedded(&splits.name, &splits.split_hash(), splits.num_classes(), [&train, &val, &test], mode, head, staining_aug)
}

fn evaluate_embedded(
    task: &str,
    split_hash: &str,
    classes: usize,
    [train, val, test]: [&[(TokenSequence, usize)]; 3],
    mode: HeadMode,
    head: &HeadTrainConfig,
    staining_aug: bool,
) -> Result<TaskResult> {
    let trained = train_head(train, val, mode, head)?;
    let preds = predict_all(test, &trained.params)?;
    let truth: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    let detail = balanced_accuracy_detail(&truth, &preds, classes)?;
    Ok(TaskResult {
        task: task.to_string(),
        head_mode: mode,
        staining_aug,
        seed: head.seed,
        bacc: detail.bacc,
        per_class_recalls: detail.recalls,
        excluded_classes: detail.excluded_classes,
        split_hash: split_hash.to_string(),
        best_epoch: trained.best_epoch,
    })
}

/// A task evaluated by the ablation harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum TaskSource {
    Synthetic { spec: SuiteSpec },
    Directory { name: String, path: PathBuf },
}

impl TaskSource {
    pub fn name(&self) -> String {
        match self {
            TaskSource::Synthetic { spec } => spec.task_name().to_string(),
            TaskSource::Directory { name, .. } => name.clone(),
        }
    }

    pub fn load(&self, seed: u64) -> Result<TaskSplits> {
        match self {
            TaskSource::Synthetic { spec } => make_synthetic_suite(&RngStream::new(seed, 0x7375_6974), spec),
            TaskSource::Directory { name, path } => {
                let ing = ingest_directory(path)?;
                split_dataset(&ing.dataset, name, seed)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSource>,
    pub encoder: EncoderConfig,
    pub ssl: SslConfig,
    pub pretrain_steps: usize,
    pub corpus_size: usize,
    pub head: HeadTrainConfig,
    /// Pretrained encoders; when both are absent they are trained in-run,
    /// one pair per seed.
    pub noaug_checkpoint: Option<PathBuf>,
    pub aug_checkpoint: Option<PathBuf>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
            tasks: vec![
                TaskSource::Synthetic {
                    spec: SuiteSpec::new(SignalKind::Shifted),
                },
                TaskSource::Synthetic {
                    spec: SuiteSpec::new(SignalKind::Local),
                },
            ],
            encoder: EncoderConfig::default(),
            ssl: ablation_ssl(),
            pretrain_steps: 200,
            corpus_size: 64,
            head: HeadTrainConfig::default(),
            noaug_checkpoint: None,
            aug_checkpoint: None,
        }
    }
}

/// Default SSL settings with the LAB mean jitter widened to the corpus stain
/// spread, so augmented views span the variation between sites.
pub fn ablation_ssl() -> SslConfig {
    let mut ssl = SslConfig::default();
    ssl.stain.lab.mean_sigma = [CORPUS_STAIN_SIGMA; 3];
    ssl
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.tasks.is_empty() {
            return Err(Error::Config("ablation needs at least one seed and one task".into()));
        }
        if self.noaug_checkpoint.is_some() != self.aug_checkpoint.is_some() {
            return Err(Error::Config(
                "give both noaug_checkpoint and aug_checkpoint, or neither".into(),
            ));
        }
        self.encoder.validate()?;
        self.ssl.validate()?;
        self.head.validate()
    }
}

/// The three evaluated configurations, in table order.
pub const ABLATION_ROWS: [(bool, HeadMode); 3] = [
    (false, HeadMode::Linear),
    (true, HeadMode::Linear),
    (true, HeadMode::AttnPool),
];

/// Reference average BACC of the three rows at full scale (percent). Context
/// only: these depend on a corpus and compute budget far beyond this harness.
pub const REFERENCE_ROW_BACC: [f64; 3] = [81.3, 83.6, 86.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowTaskScore {
    pub task: String,
    pub bacc_mean: f64,
    pub bacc_per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub staining_aug: bool,
    pub head_mode: HeadMode,
    /// Unweighted mean over tasks of the seed-mean BACC.
    pub bacc: f64,
    pub per_task: Vec<RowTaskScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub label: String,
    pub value: f64,
    pub formatted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceContext {
    pub row_bacc_percent: Vec<f64>,
    pub reproducible: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub kind: String,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub results: Vec<TaskResult>,
    pub ablation_rows: Vec<AblationRow>,
    pub deltas: Vec<Delta>,
    pub reference: Option<ReferenceContext>,
}

impl BenchReport {
    pub fn single(result: TaskResult, config_fingerprint: String) -> Self {
        BenchReport {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: "probe".into(),
            config_fingerprint,
            seeds: vec![result.seed],
            results: vec![result],
            ablation_rows: Vec::new(),
            deltas: Vec::new(),
            reference: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, aug: bool, mode: HeadMode) -> Option<&AblationRow> {
        self.ablation_rows
            .iter()
            .find(|r| r.staining_aug == aug && r.head_mode == mode)
    }

    /// Seed-mean BACC of one row on one task.
    pub fn row_task(&self, aug: bool, mode: HeadMode, task: &str) -> Option<f64> {
        self.row(aug, mode)?
            .per_task
            .iter()
            .find(|t| t.task == task)
            .map(|t| t.bacc_mean)
    }
}

/// `(2.3↑)`-style delta in percentage points.
pub fn format_delta(delta: f64) -> String {
    let pts = delta * 100.0;
    let arrow = if pts > 0.0 {
        "↑"
    } else if pts < 0.0 {
        "↓"
    } else {
        "="
    };
    format!("({:.1}{arrow})", pts.abs())
}

/// Pretrains one encoder on the synthetic corpus; returns its EMA teacher.
pub fn pretrain_encoder(
    encoder: &EncoderConfig,
    ssl: &SslConfig,
    staining_aug: bool,
    steps: usize,
    corpus_size: usize,
    seed: u64,
) -> Result<EncoderParams> {
    let mut cfg = ssl.clone();
    if !staining_aug {
        cfg.stain = StainAugConfig::disabled();
    }
    let corpus = pretraining_corpus(seed, corpus_size, encoder.image_size, encoder.token_size)?;
    let mut state = SslState::new(encoder, &cfg, seed)?;
    state.run(&corpus, steps, seed, |_, _| {})?;
    Ok(state.teacher.encoder)
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    encoder_from_checkpoint(&Checkpoint::read(path)?)
}

/// Evaluates the three rows on every task for every seed. Rows of one seed
/// share data splits and head seeds.
pub fn run_ablation(cfg: &AblationConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let fixed = match (&cfg.noaug_checkpoint, &cfg.aug_checkpoint) {
        (Some(a), Some(b)) => Some((load_encoder(a)?, load_encoder(b)?)),
        _ => None,
    };
    let per_seed: Vec<Vec<TaskResult>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<TaskResult>> {
            let (noaug, aug) = match &fixed {
                Some(pair) => pair.clone(),
                None => {
                    let pair: Vec<EncoderParams> = [false, true]
                        .par_iter()
                        .map(|&a| pretrain_encoder(&cfg.encoder, &cfg.ssl, a, cfg.pretrain_steps, cfg.corpus_size, seed))
                        .collect::<Result<_>>()?;
                    (pair[0].clone(), pair[1].clone())
                }
            };
            let head = HeadTrainConfig {
                seed,
                ..cfg.head.clone()
            };
            let mut out = Vec::new();
            for task in &cfg.tasks {
                let splits = task.load(seed)?;
                let hash = splits.split_hash();
                let classes = splits.num_classes();
                let embedded: Vec<[Vec<(TokenSequence, usize)>; 3]> = [&noaug, &aug]
                    .par_iter()
                    .map(|enc| -> Result<_> {
                        Ok([
                            embed_dataset(&splits.train, enc)?,
                            embed_dataset(&splits.val, enc)?,
                            embed_dataset(&splits.test, enc)?,
                        ])
                    })
                    .collect::<Result<_>>()?;
                let rows: Vec<TaskResult> = ABLATION_ROWS
                    .par_iter()
                    .map(|&(aug_row, mode)| {
                        let e = &embedded[aug_row as usize];
                        evaluate_embedded(&splits.name, &hash, classes, [&e[0], &e[1], &e[2]], mode, &head, aug_row)
                    })
                    .collect::<Result<_>>()?;
                out.extend(rows);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let results: Vec<TaskResult> = per_seed.into_iter().flatten().collect();
    let task_names: Vec<String> = cfg.tasks.iter().map(|t| t.name()).collect();
    let ablation_rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .map(|&(aug, mode)| {
            let per_task: Vec<RowTaskScore> = task_names
                .iter()
                .map(|task| {
                    let per_seed: Vec<f64> = results
                        .iter()
                        .filter(|r| &r.task == task && r.staining_aug == aug && r.head_mode == mode)
                        .map(|r| r.bacc)
                        .collect();
                    RowTaskScore {
                        task: task.clone(),
                        bacc_mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                        bacc_per_seed: per_seed,
                    }
                })
                .collect();
            AblationRow {
                staining_aug: aug,
                head_mode: mode,
                bacc: per_task.iter().map(|t| t.bacc_mean).sum::<f64>() / per_task.len() as f64,
                per_task,
            }
        })
        .collect();
    let d1 = ablation_rows[1].bacc - ablation_rows[0].bacc;
    let d2 = ablation_rows[2].bacc - ablation_rows[1].bacc;
    let deltas = vec![
        Delta {
            label: "staining augmentation (row 2 - row 1)".into(),
            value: d1,
            formatted: format_delta(d1),
        },
        Delta {
            label: "attention pooling (row 3 - row 2)".into(),
            value: d2,
            formatted: format_delta(d2),
        },
    ];
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "ablation".into(),
        config_fingerprint: fingerprint(cfg),
        seeds: cfg.seeds.clone(),
        results,
        ablation_rows,
        deltas,
        reference: Some(ReferenceContext {
            row_bacc_percent: REFERENCE_ROW_BACC.to_vec(),
            reproducible: false,
            note: "full-scale reference values; this harness checks row ordering only".into(),
        }),
    })
}

/// Evaluation of one frozen encoder over tasks, head modes and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSource>,
    pub modes: Vec<HeadMode>,
    pub head: HeadTrainConfig,
    /// Recorded in each result; says how the encoder was pretrained.
    pub staining_aug: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seeds: vec![0],
            tasks: vec![TaskSource::Synthetic {
                spec: SuiteSpec::new(SignalKind::Local),
            }],
            modes: vec![HeadMode::Linear, HeadMode::AttnPool],
            head: HeadTrainConfig::default(),
            staining_aug: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.tasks.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("bench needs at least one seed, task and head mode".into()));
        }
        self.head.validate()
    }
}

/// Results ordered by seed, then task, then mode. Each (seed, task) pair is
/// embedded once and shared by all modes.
pub fn run_bench(cfg: &BenchConfig, encoder: &EncoderParams) -> Result<BenchReport> {
    cfg.validate()?;
    let jobs: Vec<(u64, &TaskSource)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.tasks.iter().map(move |t| (s, t)))
        .collect();
    let per_job: Vec<Vec<TaskResult>> = jobs
        .par_iter()
        .map(|&(seed, task)| -> Result<Vec<TaskResult>> {
            let splits = task.load(seed)?;
            let hash = splits.split_hash();
            let e = [
                embed_dataset(&splits.train, encoder)?,
                embed_dataset(&splits.val, encoder)?,
                embed_dataset(&splits.test, encoder)?,
            ];
            let head = HeadTrainConfig {
                seed,
                ..cfg.head.clone()
            };
            cfg.modes
                .par_iter()
                .map(|&mode| {
                    evaluate_embedded(
                        &splits.name,
                        &hash,
                        splits.num_classes(),
                        [&e[0], &e[1], &e[2]],
                        mode,
                        &head,
                        cfg.staining_aug,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "bench".into(),
        config_fingerprint: fingerprint(cfg),
        seeds: cfg.seeds.clone(),
        results: per_job.into_iter().flatten().collect(),
        ablation_rows: Vec::new(),
        deltas: Vec::new(),
        reference: None,
    })
}

impl BenchReport {
    /// Mean BACC over seeds for one task and mode.
    pub fn mean_bacc(&self, task: &str, mode: HeadMode) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.task == task && r.head_mode == mode)
            .map(|r| r.bacc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Plain-text table of the ablation rows with deltas.
pub fn render_table(report: &BenchReport) -> String {
    let mut s = String::from("staining_aug  head       bacc_avg  delta      reference\n");
    for (i, row) in report.ablation_rows.iter().enumerate() {
        let delta = if i == 0 {
            String::new()
        } else {
            report.deltas.get(i - 1).map(|d| d.formatted.clone()).unwrap_or_default()
        };
        let reference = report
            .reference
            .as_ref()
            .and_then(|r| r.row_bacc_percent.get(i))
            .map(|v| format!("{v:.1}"))
            .unwrap_or_default();
        s.push_str(&format!(
            "{:<13} {:<10} {:>8.1}  {:<10} {}\n",
            if row.staining_aug { "yes" } else { "no" },
            row.head_mode.as_str(),
            100.0 * row.bacc,
            delta,
            reference
        ));
    }
    s.push_str("reference values are not reproducible at this scale; only the row ordering is checked\n");
    s
}

/// SVG bar chart of per-row average BACC.
pub fn render_svg(report: &BenchReport) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let rows = &report.ablation_rows;
    let bar_w = (w - 2.0 * pad) / (rows.len().max(1) as f64) * 0.6;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = h - pad,
        x1 = w - pad
    );
    for (i, row) in rows.iter().enumerate() {
        let slot = (w - 2.0 * pad) / rows.len() as f64;
        let x = pad + slot * i as f64 + (slot - bar_w) / 2.0;
        let bh = (h - 2.0 * pad) * row.bacc.clamp(0.0, 1.0);
        let y = h - pad - bh;
        let label = format!(
            "{} + {}",
            if row.staining_aug { "aug" } else { "no aug" },
            row.head_mode.as_str()
        );
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"#7b4f9d\"/>\n\
             <text x=\"{cx:.1}\" y=\"{ty:.1}\" font-size=\"12\" text-anchor=\"middle\">{v:.1}</text>\n\
             <text x=\"{cx:.1}\" y=\"{ly:.1}\" font-size=\"11\" text-anchor=\"middle\">{label}</text>\n",
            cx = x + bar_w / 2.0,
            ty = y - 4.0,
            v = 100.0 * row.bacc,
            ly = h - pad + 16.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
