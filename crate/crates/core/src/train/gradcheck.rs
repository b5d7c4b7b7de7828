use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_terms, Result, TrainError};
use crate::depthdata::SamplePair;
use crate::model::{FeatureMap, ModelState};

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn param(&self, index: usize) -> f64;
    fn set_param(&mut self, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    fn gradient(&self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Parameters probed; all of them when the model is smaller.
    pub probes: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to round-off are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { probes: 256, step: 1e-5, seed: 0, floor: 1e-6 }
    }
}

/// Maximum relative error `|a - n| / max(|a|, |n|, floor)` between analytic
/// and central-difference gradients over a seeded parameter subset.
pub fn check_gradients<O: Objective>(obj: &mut O, config: &GradCheckConfig) -> Result<f64> {
    let total = obj.num_params();
    if config.probes == 0 || total == 0 {
        return Err(TrainError::GradCheck("no parameters selected".into()));
    }
    let analytic = obj.gradient()?;
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let indices: Vec<usize> = if config.probes >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut v = rand::seq::index::sample(&mut rng, total, config.probes).into_vec();
        v.sort_unstable();
        v
    };
    let mut worst = 0.0f64;
    for i in indices {
        let orig = obj.param(i);
        obj.set_param(i, orig + config.step);
        let plus = obj.loss()?;
        obj.set_param(i, orig - config.step);
        let minus = obj.loss()?;
        obj.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * config.step);
        if !numeric.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
        if err > worst {
            log::debug!("param {i}: analytic {a:e} numeric {numeric:e}");
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Which loss `grad_check` differentiates.
#[derive(Debug, Clone, Copy)]
pub enum LossSelector<'a> {
    L1,
    /// Feature alignment alone, against the given frozen features.
    FeatureAlign(&'a FeatureMap),
    /// `l1 + lambda * feature_align`.
    Combined { frozen: &'a FeatureMap, lambda: f64 },
}

struct ModelObjective<'a> {
    state: ModelState,
    sample: &'a SamplePair,
    l1_weight: f64,
    align: Option<(&'a [f64], f64)>,
}

impl Objective for ModelObjective<'_> {
    fn num_params(&self) -> usize {
        self.state.params.num_params()
    }

    fn param(&self, index: usize) -> f64 {
        self.state.params.get_flat(index)
    }

    fn set_param(&mut self, index: usize, value: f64) {
        self.state.params.set_flat(index, value);
    }

    fn loss(&self) -> Result<f64> {
        let t = sample_terms(
            &self.state, &self.sample.image, &self.sample.depth, self.l1_weight, self.align, None,
        )?;
        let lambda = self.align.map_or(0.0, |(_, l)| l);
        Ok(self.l1_weight * t.l1 + lambda * t.feat)
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let mut grads = self.state.params.zeros_like();
        sample_terms(
            &self.state,
            &self.sample.image,
            &self.sample.depth,
            self.l1_weight,
            self.align,
            Some((&mut grads, 1.0)),
        )?;
        Ok(grads.tensors().iter().flat_map(|t| t.data.iter().copied()).collect())
    }
}

pub fn grad_check(state: &ModelState, sample: &SamplePair, selector: LossSelector<'_>) -> Result<f64> {
    grad_check_with(state, sample, selector, &GradCheckConfig::default())
}

pub fn grad_check_with(
    state: &ModelState,
    sample: &SamplePair,
    selector: LossSelector<'_>,
    config: &GradCheckConfig,
) -> Result<f64> {
    let (l1_weight, frozen) = match selector {
        LossSelector::L1 => (1.0, None),
        LossSelector::FeatureAlign(f) => (0.0, Some((f, 1.0))),
        LossSelector::Combined { frozen, lambda } => (1.0, Some((frozen, lambda))),
    };
    if let Some((f, _)) = frozen {
        if f.grid() != state.config.grid() || f.dim() != state.config.embed_dim {
            return Err(TrainError::ShapeMismatch(format!(
                "frozen features {:?}x{} do not fit the model grid {:?}x{}",
                f.grid(),
                f.dim(),
                state.config.grid(),
                state.config.embed_dim
            )));
        }
    }
    let mut obj = ModelObjective {
        state: state.clone(),
        sample,
        l1_weight,
        align: frozen.map(|(f, l)| (f.tokens(), l)),
    };
    check_gradients(&mut obj, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthdata::synthetic_dataset;
    use crate::model::{encode, init, ModelConfig};

    /// pred_i = w . x_i + b against fixed targets, L1 loss.
    struct Linear {
        theta: Vec<f64>,
        xs: Vec<Vec<f64>>,
        ys: Vec<f64>,
    }

    impl Linear {
        fn residuals(&self) -> Vec<f64> {
            let d = self.theta.len() - 1;
            self.xs
                .iter()
                .zip(&self.ys)
                .map(|(x, y)| {
                    x.iter().zip(&self.theta[..d]).map(|(a, b)| a * b).sum::<f64>() + self.theta[d] - y
                })
                .collect()
        }
    }

    impl Objective for Linear {
        fn num_params(&self) -> usize {
            self.theta.len()
        }
        fn param(&self, i: usize) -> f64 {
            self.theta[i]
        }
        fn set_param(&mut self, i: usize, v: f64) {
            self.theta[i] = v;
        }
        fn loss(&self) -> Result<f64> {
            let r = self.residuals();
            Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
        }
        fn gradient(&self) -> Result<Vec<f64>> {
            let r = self.residuals();
            let d = self.theta.len() - 1;
            let n = r.len() as f64;
            let mut g = vec![0.0; d + 1];
            for (x, ri) in self.xs.iter().zip(&r) {
                let s = ri.signum() / n;
                for k in 0..d {
                    g[k] += s * x[k];
                }
                g[d] += s;
            }
            Ok(g)
        }
    }

    #[test]
    fn linear_model_is_exact() {
        let d = 300;
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| (0..d).map(|k| ((i * 31 + k * 7) % 13) as f64 / 13.0 - 0.5).collect())
            .collect();
        let theta = vec![0.0; d + 1];
        // residuals are -y, bounded well away from the kink
        let ys: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 + i as f64 } else { -1.0 - i as f64 }).collect();
        let mut m = Linear { theta, xs, ys };
        let err = check_gradients(&mut m, &GradCheckConfig::default()).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn zero_probe_request_is_an_error() {
        let mut m = Linear { theta: vec![0.0; 3], xs: vec![vec![1.0, 2.0]], ys: vec![1.0] };
        let cfg = GradCheckConfig { probes: 0, ..Default::default() };
        assert!(matches!(check_gradients(&mut m, &cfg), Err(TrainError::GradCheck(_))));
    }

    #[test]
    fn tiny_transformer_all_losses() {
        let cfg = ModelConfig::tiny();
        let state = init(&cfg, 9).unwrap();
        let frozen_state = init(&cfg, 10).unwrap();
        let sample = &synthetic_dataset(1, None, cfg.input_size, 4).unwrap()[0];
        let frozen = encode(&frozen_state, &sample.image).unwrap();
        for sel in [
            LossSelector::L1,
            LossSelector::FeatureAlign(&frozen),
            LossSelector::Combined { frozen: &frozen, lambda: 0.1 },
        ] {
            let err = grad_check(&state, sample, sel).unwrap();
            assert!(err <= 1e-4, "{sel:?}: {err}");
        }
    }

    #[test]
    fn frozen_shape_mismatch() {
        let cfg = ModelConfig::tiny();
        let state = init(&cfg, 9).unwrap();
        let sample = &synthetic_dataset(1, None, cfg.input_size, 4).unwrap()[0];
        let wrong = FeatureMap::new((1, 1), 3, vec![1.0; 3]).unwrap();
        assert!(grad_check(&state, sample, LossSelector::FeatureAlign(&wrong)).is_err());
    }
}
