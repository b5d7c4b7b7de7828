//! Teacher/student workflow: pseudo-label unlabeled images with a trained
//! teacher, then train a fresh student on strongly perturbed inputs (colour
//! distortion and CutMix) with feature alignment to a frozen copy of the
//! teacher's encoder.

mod perturb;

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::depthdata::{
    read_manifest, read_rgb, save_dataset, DataError, DepthFormat, DepthMap, RgbImage, SamplePair,
};
use crate::model::{forward, init, ModelError, ModelState};
use crate::train::{check_dataset, labeled_items, Batcher, Item, TrainConfig, TrainError, TrainLog, Trainer};

pub use perturb::{
    apply_color_factors, color_distort, cutmix_apply, cutmix_apply_depth, sample_cutmix_mask,
    ColorFactors, CutMixMask,
};

const PAIR_SALT: u64 = 0x7061_6972_0000_0003;
const UNLABELED_SALT: u64 = 0x756e_6c61_6200_0004;
pub const PROVENANCE_FILE: &str = "provenance.txt";

#[derive(Debug, thiserror::Error)]
pub enum SemisupError {
    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),
    #[error("invalid cutmix mask: {0}")]
    InvalidMask(String),
    #[error("cutmix infeasible: {0}")]
    Infeasible(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image `{id}`: {source}")]
    Image { id: String, source: ModelError },
    #[error("pseudo-labels come from teacher {found}, not {expected}")]
    TeacherMismatch { expected: String, found: String },
    #[error("bad provenance file: {0}")]
    Provenance(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SemisupError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    /// Maximum fractional deviation of each colour factor from 1.
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
    pub cutmix_prob: f64,
    /// Bounds on the pasted rectangle's share of the image, `0 < lo <= hi < 1`.
    pub cutmix_area_range: (f64, f64),
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            brightness_jitter: 0.4,
            contrast_jitter: 0.4,
            saturation_jitter: 0.4,
            cutmix_prob: 0.5,
            cutmix_area_range: (0.1, 0.5),
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    /// No colour change and no CutMix: the student sees clean images.
    pub fn clean(seed: u64) -> Self {
        Self {
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            saturation_jitter: 0.0,
            cutmix_prob: 0.0,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SemisupError::InvalidSpec(m));
        for (name, v) in [
            ("brightness_jitter", self.brightness_jitter),
            ("contrast_jitter", self.contrast_jitter),
            ("saturation_jitter", self.saturation_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.cutmix_prob) {
            return bad(format!("cutmix_prob {} outside [0, 1]", self.cutmix_prob));
        }
        let (lo, hi) = self.cutmix_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("cutmix_area_range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub id: String,
    pub image: RgbImage,
    pub depth: DepthMap,
}

/// Teacher predictions on clean unlabeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
    /// Fingerprint of the teacher that produced every entry.
    pub teacher_checkpoint_id: String,
}

pub fn generate_pseudo_labels(
    teacher: &ModelState,
    unlabeled: &[(String, RgbImage)],
) -> Result<PseudoLabelSet> {
    let entries = unlabeled
        .par_iter()
        .map(|(id, image)| {
            let depth = forward(teacher, image)
                .map_err(|source| SemisupError::Image { id: id.clone(), source })?;
            Ok(PseudoLabel { id: id.clone(), image: image.clone(), depth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelSet { entries, teacher_checkpoint_id: teacher.fingerprint() })
}

fn provenance_text(set: &PseudoLabelSet, spec: Option<&PerturbationSpec>) -> String {
    let mut s = String::new();
    writeln!(s, "teacher_checkpoint_id {}", set.teacher_checkpoint_id).unwrap();
    writeln!(s, "entries {}", set.entries.len()).unwrap();
    if let Some(p) = spec {
        writeln!(s, "brightness_jitter {}", p.brightness_jitter).unwrap();
        writeln!(s, "contrast_jitter {}", p.contrast_jitter).unwrap();
        writeln!(s, "saturation_jitter {}", p.saturation_jitter).unwrap();
        writeln!(s, "cutmix_prob {}", p.cutmix_prob).unwrap();
        writeln!(s, "cutmix_area_range {} {}", p.cutmix_area_range.0, p.cutmix_area_range.1).unwrap();
        writeln!(s, "perturbation_seed {}", p.seed).unwrap();
    }
    s
}

/// Writes the set as a dataset directory (PFM labels) plus a provenance file.
pub fn save_pseudo_labels(
    set: &PseudoLabelSet,
    dir: impl AsRef<Path>,
    spec: Option<&PerturbationSpec>,
) -> Result<()> {
    let dir = dir.as_ref();
    let samples = set
        .entries
        .iter()
        .map(|e| SamplePair::new(e.id.clone(), e.image.clone(), e.depth.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    save_dataset(dir, &samples, DepthFormat::Pfm)?;
    let path = dir.join(PROVENANCE_FILE);
    crate::write_atomic(&path, provenance_text(set, spec).as_bytes())
        .map_err(|source| DataError::Io { path, source })?;
    Ok(())
}

pub fn load_pseudo_labels(dir: impl AsRef<Path>) -> Result<PseudoLabelSet> {
    let dir = dir.as_ref();
    let path = dir.join(PROVENANCE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io { path, source })?;
    let teacher_checkpoint_id = text
        .lines()
        .find_map(|l| l.strip_prefix("teacher_checkpoint_id "))
        .ok_or_else(|| SemisupError::Provenance("missing teacher_checkpoint_id".into()))?
        .trim()
        .to_string();
    let manifest = read_manifest(dir)?;
    let entries = (0..manifest.entries.len())
        .map(|i| {
            let s = manifest.load(i)?;
            Ok(PseudoLabel { id: s.id, image: s.image, depth: s.depth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelSet { entries, teacher_checkpoint_id })
}

/// Reads unlabeled images: the RGB column of a dataset manifest if `dir`
/// has one, otherwise every `.png` in `dir` sorted by file name.
pub fn load_unlabeled(dir: impl AsRef<Path>) -> Result<Vec<(String, RgbImage)>> {
    let dir = dir.as_ref();
    if dir.join(crate::depthdata::MANIFEST_FILE).exists() {
        let m = read_manifest(dir)?;
        return m
            .entries
            .iter()
            .map(|e| Ok((e.id.clone(), read_rgb(dir.join(&e.rgb_path))?)))
            .collect();
    }
    let read_dir = std::fs::read_dir(dir)
        .map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<_> = read_dir
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_rgb(&p)?))
        })
        .collect()
}

/// How many labeled and unlabeled batches make up one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interleave {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for Interleave {
    fn default() -> Self {
        Self { labeled: 1, unlabeled: 1 }
    }
}

/// Perturbed input and its composited target for one unlabeled draw.
pub fn perturb_unlabeled(
    set: &PseudoLabelSet,
    index: usize,
    spec: &PerturbationSpec,
    draw_index: u64,
) -> Result<(RgbImage, DepthMap)> {
    let entry = &set.entries[index];
    let mut rng = perturb::stream(spec.seed, PAIR_SALT, draw_index);
    let (mut image, mut target) = (Cow::Borrowed(&entry.image), Cow::Borrowed(&entry.depth));
    if spec.cutmix_prob > 0.0 && rng.gen::<f64>() < spec.cutmix_prob {
        let partner = &set.entries[rng.gen_range(0..set.entries.len())];
        let mask = sample_cutmix_mask(entry.image.shape(), spec, draw_index)?;
        image = Cow::Owned(cutmix_apply(&entry.image, &partner.image, &mask)?);
        target = Cow::Owned(cutmix_apply_depth(&entry.depth, &partner.depth, &mask)?);
    }
    Ok((color_distort(&image, spec, draw_index), target.into_owned()))
}

/// Labels `unlabeled` with the teacher, then trains a fresh student.
pub fn train_student(
    teacher: &ModelState,
    labeled: &[SamplePair],
    unlabeled: &[(String, RgbImage)],
    spec: &PerturbationSpec,
    config: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    let pseudo = generate_pseudo_labels(teacher, unlabeled)?;
    train_student_with_labels(teacher, labeled, &pseudo, spec, config, Interleave::default())
}

/// Student stage on precomputed pseudo-labels. The student starts from
/// `init(teacher config, config.seed)`. Labeled batches use L1 against
/// ground truth; unlabeled batches use L1 against the (composited)
/// pseudo-label plus `lambda_feat` times feature alignment with the
/// teacher's encoder, both on the perturbed input. `max_steps` counts
/// batches of either kind.
pub fn train_student_with_labels(
    teacher: &ModelState,
    labeled: &[SamplePair],
    pseudo: &PseudoLabelSet,
    spec: &PerturbationSpec,
    config: &TrainConfig,
    interleave: Interleave,
) -> Result<(ModelState, TrainLog)> {
    spec.validate()?;
    let expected = teacher.fingerprint();
    if pseudo.teacher_checkpoint_id != expected {
        return Err(SemisupError::TeacherMismatch {
            expected,
            found: pseudo.teacher_checkpoint_id.clone(),
        });
    }
    let student = init(&teacher.config, config.seed)?;
    let mut trainer = Trainer::new(&student, config, Some(teacher))?;
    if config.max_steps == 0 {
        return Ok(trainer.finish());
    }
    check_dataset(&student, labeled)?;
    for e in &pseudo.entries {
        if e.image.shape() != student.config.input_size {
            return Err(SemisupError::Image {
                id: e.id.clone(),
                source: ModelError::SizeMismatch {
                    expected: student.config.input_size,
                    got: e.image.shape(),
                },
            });
        }
    }
    let rounds: Vec<bool> = {
        let l = if labeled.is_empty() { 0 } else { interleave.labeled };
        let u = if pseudo.entries.is_empty() { 0 } else { interleave.unlabeled };
        std::iter::repeat_n(true, l).chain(std::iter::repeat_n(false, u)).collect()
    };
    if rounds.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let mut lab = Batcher::new(labeled.len(), config.batch_size, config.seed);
    let mut unl = Batcher::new(pseudo.entries.len(), config.batch_size, config.seed ^ UNLABELED_SALT);
    let mut draw = 0u64;
    for &is_labeled in rounds.iter().cycle() {
        if trainer.steps_done() >= config.max_steps {
            break;
        }
        if is_labeled {
            let idx = lab.next_batch();
            trainer.step(&labeled_items(labeled, &idx, false))?;
        } else {
            let idx = unl.next_batch();
            let mut items = Vec::with_capacity(idx.len());
            for i in idx {
                let (image, target) = perturb_unlabeled(pseudo, i, spec, draw)?;
                draw += 1;
                items.push(Item { image: Cow::Owned(image), target: Cow::Owned(target), align: true });
            }
            trainer.step(&items)?;
        }
    }
    Ok(trainer.finish())
}
