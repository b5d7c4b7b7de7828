//! Supervised fine-tuning: L1 depth loss, optional feature alignment against
//! a frozen encoder, AdamW, and a finite-difference gradient checker.

mod adamw;
mod gradcheck;
mod loss;

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depthdata::{DepthMap, RgbImage, SamplePair};
use crate::model::network::{decode, decode_backward, encode, encode_backward};
use crate::model::{check_input, ModelError, ModelState, Params};

pub use adamw::{adamw_step, OptimizerState};
pub use gradcheck::{
    check_gradients, grad_check, grad_check_with, GradCheckConfig, LossSelector, Objective,
};
pub use loss::{feature_align_loss, l1_loss};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("joint validity mask is empty")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample `{id}`: {source}")]
    Sample { id: String, source: ModelError },
    #[error("step {step}: {source}")]
    Step { step: u64, source: Box<TrainError> },
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Weight of the feature-alignment term.
    pub lambda_feat: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 16,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            lambda_feat: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.lambda_feat >= 0.0 && self.lambda_feat.is_finite()) {
            return bad("lambda_feat must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total_loss: f64,
    pub l1_loss: f64,
    pub feat_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Token pairs where either feature vector was all zeros (cosine taken as 0).
    pub degenerate_tokens: u64,
}

pub const TRAIN_LOG_HEADER: &str = "step,total_loss,l1_loss,feat_loss,wall_time_s";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{:e},{:e},{:e},{:.6}",
                r.step, r.total_loss, r.l1_loss, r.feat_loss, r.wall_time_s
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::write_atomic(path, self.to_csv().as_bytes())
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }

    /// Equality ignoring wall-clock times.
    pub fn same_losses(&self, other: &TrainLog) -> bool {
        self.degenerate_tokens == other.degenerate_tokens
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.total_loss.to_bits() == b.total_loss.to_bits()
                    && a.l1_loss.to_bits() == b.l1_loss.to_bits()
                    && a.feat_loss.to_bits() == b.feat_loss.to_bits()
            })
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.total_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.total_loss)
    }
}

/// Seeded epoch shuffler. The last batch of an epoch may be short.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), pos: 0, batch, rng: ChaCha8Rng::seed_from_u64(seed) };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SampleTerms {
    pub l1: f64,
    pub feat: f64,
    pub degenerate: usize,
}

/// Loss terms for one sample and, when `grads` is given, accumulation of
/// `weight` times the gradient of `l1_weight * l1 + lambda * feat`.
pub(crate) fn sample_terms(
    state: &ModelState,
    image: &RgbImage,
    target: &DepthMap,
    l1_weight: f64,
    align: Option<(&[f64], f64)>,
    grads: Option<(&mut Params, f64)>,
) -> Result<SampleTerms> {
    let cfg = &state.config;
    check_input(cfg, image)?;
    if target.shape() != cfg.input_size {
        return Err(TrainError::ShapeMismatch(format!(
            "target {:?} vs model input {:?}",
            target.shape(),
            cfg.input_size
        )));
    }
    let enc = encode(&state.params, cfg, image.data());
    let dec = decode(&state.params, cfg, &enc.feat);
    let (l1, d_l1) = loss::l1_loss_grad(&dec.depth, target)?;
    let mut terms = SampleTerms { l1, ..Default::default() };
    let mut d_align = None;
    if let Some((frozen, lambda)) = align {
        if frozen.len() != enc.feat.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "frozen features hold {} values, student {}",
                frozen.len(),
                enc.feat.len()
            )));
        }
        let (feat, g, degenerate) = loss::feature_align_grad(&enc.feat, frozen, cfg.embed_dim);
        terms.feat = feat;
        terms.degenerate = degenerate;
        d_align = Some((g, lambda));
    }
    if !(terms.l1.is_finite() && terms.feat.is_finite()) {
        return Err(TrainError::NonFiniteLoss);
    }
    if let Some((grads, weight)) = grads {
        let d_depth: Vec<f64> = d_l1.iter().map(|g| g * l1_weight * weight).collect();
        let mut d_feat = decode_backward(&state.params, cfg, &enc.feat, &dec, &d_depth, grads);
        if let Some((g, lambda)) = d_align {
            for (d, a) in d_feat.iter_mut().zip(&g) {
                *d += weight * lambda * a;
            }
        }
        encode_backward(&state.params, cfg, &enc, &d_feat, grads);
    }
    Ok(terms)
}

/// Frozen-encoder token features for `image`.
pub(crate) fn frozen_features(frozen: &ModelState, image: &RgbImage) -> Result<Vec<f64>> {
    check_input(&frozen.config, image)?;
    Ok(encode(&frozen.params, &frozen.config, image.data()).feat)
}

pub(crate) fn check_frozen(student: &ModelState, frozen: &ModelState) -> Result<()> {
    let (a, b) = (&student.config, &frozen.config);
    if a.grid() != b.grid() || a.embed_dim != b.embed_dim || a.input_size != b.input_size {
        return Err(TrainError::ShapeMismatch(format!(
            "frozen encoder grid {:?}x{} does not match student {:?}x{}",
            b.grid(),
            b.embed_dim,
            a.grid(),
            a.embed_dim
        )));
    }
    Ok(())
}

/// One training example as seen by the optimizer.
pub(crate) struct Item<'a> {
    pub image: Cow<'a, RgbImage>,
    pub target: Cow<'a, DepthMap>,
    pub align: bool,
}

/// Single-writer optimisation loop shared by `finetune` and the student stage.
pub(crate) struct Trainer<'a> {
    pub state: ModelState,
    opt: OptimizerState,
    config: &'a TrainConfig,
    frozen: Option<&'a ModelState>,
    pub log: TrainLog,
    start: Instant,
}

impl<'a> Trainer<'a> {
    pub(crate) fn new(
        state: &ModelState,
        config: &'a TrainConfig,
        frozen: Option<&'a ModelState>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(f) = frozen {
            check_frozen(state, f)?;
        }
        Ok(Self {
            opt: OptimizerState::new(&state.params),
            state: state.clone(),
            config,
            frozen,
            log: TrainLog::default(),
            start: Instant::now(),
        })
    }

    pub(crate) fn steps_done(&self) -> u64 {
        self.opt.step
    }

    pub(crate) fn step(&mut self, items: &[Item<'_>]) -> Result<()> {
        let step = self.opt.step + 1;
        self.try_step(items).map_err(|e| TrainError::Step { step, source: Box::new(e) })
    }

    fn try_step(&mut self, items: &[Item<'_>]) -> Result<()> {
        let weight = 1.0 / items.len() as f64;
        let lambda = self.config.lambda_feat;
        let mut grads = self.state.params.zeros_like();
        let (mut l1, mut feat) = (0.0, 0.0);
        for item in items {
            let frozen_feat = match (item.align, self.frozen) {
                (true, Some(f)) => Some(frozen_features(f, &item.image)?),
                _ => None,
            };
            let terms = sample_terms(
                &self.state,
                &item.image,
                &item.target,
                1.0,
                frozen_feat.as_deref().map(|f| (f, lambda)),
                Some((&mut grads, weight)),
            )?;
            l1 += terms.l1 * weight;
            feat += terms.feat * weight;
            self.log.degenerate_tokens += terms.degenerate as u64;
        }
        adamw_step(&mut self.state.params, &grads, &mut self.opt, self.config)?;
        let record = StepRecord {
            step: self.opt.step,
            total_loss: l1 + lambda * feat,
            l1_loss: l1,
            feat_loss: feat,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        if record.step % 100 == 0 {
            log::info!("step {} loss {:.5}", record.step, record.total_loss);
        }
        self.log.records.push(record);
        Ok(())
    }

    pub(crate) fn finish(self) -> (ModelState, TrainLog) {
        if self.log.degenerate_tokens > 0 {
            log::warn!(
                "{} zero-norm token pairs scored as cosine 0",
                self.log.degenerate_tokens
            );
        }
        (self.state, self.log)
    }
}

pub(crate) fn check_dataset(state: &ModelState, dataset: &[SamplePair]) -> Result<()> {
    for s in dataset {
        if s.shape() != state.config.input_size {
            return Err(TrainError::Sample {
                id: s.id.clone(),
                source: ModelError::SizeMismatch {
                    expected: state.config.input_size,
                    got: s.shape(),
                },
            });
        }
    }
    Ok(())
}

pub(crate) fn labeled_items<'a>(dataset: &'a [SamplePair], idx: &[usize], align: bool) -> Vec<Item<'a>> {
    idx.iter()
        .map(|&i| Item {
            image: Cow::Borrowed(&dataset[i].image),
            target: Cow::Borrowed(&dataset[i].depth),
            align,
        })
        .collect()
}

/// Runs `config.max_steps` AdamW steps over seeded shuffled batches of
/// `dataset`. With a frozen encoder every sample also gets the
/// feature-alignment term.
pub fn finetune(
    state: &ModelState,
    dataset: &[SamplePair],
    config: &TrainConfig,
    frozen: Option<&ModelState>,
) -> Result<(ModelState, TrainLog)> {
    let mut trainer = Trainer::new(state, config, frozen)?;
    if config.max_steps == 0 {
        return Ok(trainer.finish());
    }
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_dataset(state, dataset)?;
    let mut batcher = Batcher::new(dataset.len(), config.batch_size, config.seed);
    while trainer.steps_done() < config.max_steps {
        let idx = batcher.next_batch();
        trainer.step(&labeled_items(dataset, &idx, frozen.is_some()))?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthdata::synthetic_dataset;
    use crate::model::{init, ModelConfig};

    fn data(n: usize) -> Vec<SamplePair> {
        let cfg = ModelConfig::tiny();
        synthetic_dataset(n, None, cfg.input_size, 3).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { learning_rate: 1e-3, batch_size: 3, max_steps: 6, ..Default::default() }
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 3e-5);
        assert_eq!(c.batch_size, 16);
        c.validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..c.clone() },
            TrainConfig { beta1: 1.0, ..c.clone() },
            TrainConfig { beta2: -0.1, ..c.clone() },
            TrainConfig { epsilon: 0.0, ..c.clone() },
            TrainConfig { batch_size: 0, ..c.clone() },
            TrainConfig { lambda_feat: -1.0, ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn batcher_covers_epoch_with_short_tail() {
        let mut b = Batcher::new(7, 3, 11);
        let epoch: Vec<usize> = (0..3).flat_map(|_| b.next_batch()).collect();
        let mut sorted = epoch.clone();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        assert_eq!(b.next_batch().len(), 3);
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = init(&ModelConfig::tiny(), 5).unwrap();
        let cfg = TrainConfig { max_steps: 0, ..Default::default() };
        let (out, log) = finetune(&s, &data(4), &cfg, None).unwrap();
        assert_eq!(out, s);
        assert!(log.records.is_empty());
    }

    #[test]
    fn deterministic_and_logged() {
        let s = init(&ModelConfig::tiny(), 5).unwrap();
        let d = data(7);
        let (a, la) = finetune(&s, &d, &quick(), None).unwrap();
        let (b, lb) = finetune(&s, &d, &quick(), None).unwrap();
        assert_eq!(a, b);
        assert!(la.same_losses(&lb));
        assert_eq!(la.records.len(), 6);
        assert!(la.records.windows(2).all(|w| w[0].step < w[1].step));
        assert!(la.records.iter().all(|r| r.feat_loss == 0.0 && r.total_loss == r.l1_loss));
        let csv = la.to_csv();
        assert!(csv.starts_with(TRAIN_LOG_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn frozen_encoder_adds_alignment() {
        let s = init(&ModelConfig::tiny(), 5).unwrap();
        let frozen = init(&ModelConfig::tiny(), 6).unwrap();
        let (_, log) = finetune(&s, &data(4), &quick(), Some(&frozen)).unwrap();
        let r = &log.records[0];
        assert!(r.feat_loss > 0.0);
        assert!((r.total_loss - (r.l1_loss + 0.1 * r.feat_loss)).abs() < 1e-15);
    }

    #[test]
    fn wrong_size_sample_names_id() {
        let s = init(&ModelConfig::tiny(), 5).unwrap();
        let d = synthetic_dataset(2, None, (16, 16), 1).unwrap();
        match finetune(&s, &d, &quick(), None) {
            Err(TrainError::Sample { id, .. }) => assert_eq!(id, d[0].id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_target_mask_reports_step() {
        let s = init(&ModelConfig::tiny(), 5).unwrap();
        let (h, w) = s.config.input_size;
        let bad = SamplePair::new(
            "blank",
            RgbImage::filled(h, w, [0.5; 3]).unwrap(),
            DepthMap::new(h, w, vec![0.0; h * w]).unwrap(),
        )
        .unwrap();
        match finetune(&s, &[bad], &quick(), None) {
            Err(TrainError::Step { step: 1, source }) => {
                assert!(matches!(*source, TrainError::EmptyMask))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_decreases_on_tiny_set() {
        let s = init(&ModelConfig::tiny(), 2).unwrap();
        let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 4, max_steps: 150, ..Default::default() };
        let (_, log) = finetune(&s, &data(4), &cfg, None).unwrap();
        assert!(log.final_loss().unwrap() < 0.5 * log.initial_loss().unwrap());
    }
}
