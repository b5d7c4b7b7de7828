//! Median scaling and the relative-depth error metrics.
//!
//! Every metric is evaluated on the joint validity mask (pixels valid in both
//! the prediction and the ground truth); `N` is the joint-valid count.

use rayon::prelude::*;

use crate::depthdata::DepthMap;

/// Default threshold for δ₁.
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("no pixel is valid in both prediction and ground truth")]
    EmptyMask,
    #[error("prediction median {0} is not positive")]
    NonPositiveMedian(f64),
    #[error("{preds} predictions for {gts} ground-truth frames ({ids} ids)")]
    LengthMismatch { preds: usize, gts: usize, ids: usize },
    #[error("case has no frames")]
    NoFrames,
    #[error("frame `{id}`: {source}")]
    Frame {
        id: String,
        #[source]
        source: Box<MetricError>,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Where the median-scaling factor is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Scaling {
    /// Each frame is scaled by its own median ratio.
    #[default]
    PerFrame,
    /// One factor from the medians over all joint-valid pixels of the case.
    PerSequence,
}

impl std::str::FromStr for Scaling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per-frame" => Ok(Scaling::PerFrame),
            "per-sequence" => Ok(Scaling::PerSequence),
            other => Err(format!("unknown scaling `{other}` (per-frame|per-sequence)")),
        }
    }
}

impl std::fmt::Display for Scaling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scaling::PerFrame => "per-frame",
            Scaling::PerSequence => "per-sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPrediction {
    pub values: DepthMap,
    pub scale_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub id: String,
    pub abs_rel: f64,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub case_name: String,
    pub n_frames: usize,
    /// Unweighted mean over frames.
    pub abs_rel: f64,
    /// Unweighted mean over frames.
    pub delta1: f64,
    pub per_frame: Vec<FrameMetrics>,
}

fn check_shapes(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch { pred: pred.shape(), gt: gt.shape() });
    }
    Ok(())
}

/// (pred, gt) values on the joint-valid mask, in pixel order.
fn joint_pairs<'a>(pred: &'a DepthMap, gt: &'a DepthMap) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.values()
        .iter()
        .zip(pred.valid())
        .zip(gt.values().iter().zip(gt.valid()))
        .filter(|((_, pv), (_, gv))| **pv && **gv)
        .map(|((p, _), (g, _))| (*p, *g))
}

/// Median with the mean of the two central order statistics for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        Some(upper)
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(0.5 * (lower_max + upper))
    }
}

fn joint_medians(pairs: impl Iterator<Item = (f64, f64)>) -> Result<(f64, f64)> {
    let (mut p, mut g): (Vec<f64>, Vec<f64>) = pairs.unzip();
    let mp = median(&mut p).ok_or(MetricError::EmptyMask)?;
    let mg = median(&mut g).ok_or(MetricError::EmptyMask)?;
    Ok((mp, mg))
}

fn scale_factor(pred_median: f64, gt_median: f64) -> Result<f64> {
    if !(pred_median > 0.0) {
        return Err(MetricError::NonPositiveMedian(pred_median));
    }
    Ok(gt_median / pred_median)
}

/// Multiplies the prediction by `median(gt) / median(pred)`, both medians taken
/// over the joint-valid pixels.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<ScaledPrediction> {
    check_shapes(pred, gt)?;
    let (mp, mg) = joint_medians(joint_pairs(pred, gt))?;
    let scale_factor = scale_factor(mp, mg)?;
    Ok(ScaledPrediction { values: pred.scaled(scale_factor), scale_factor })
}

/// Mean of `|gt - pred| / gt` over the joint-valid pixels.
pub fn abs_rel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (sum, n) = joint_pairs(pred, gt)
        .fold((0.0, 0usize), |(s, n), (p, g)| (s + (g - p).abs() / g, n + 1));
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Fraction of joint-valid pixels with `max(gt/pred, pred/gt) < threshold`
/// (strict).
pub fn delta_acc(pred: &DepthMap, gt: &DepthMap, threshold: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (hits, n) = joint_pairs(pred, gt).fold((0usize, 0usize), |(h, n), (p, g)| {
        let ratio = (g / p).max(p / g);
        (h + usize::from(ratio < threshold), n + 1)
    });
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(hits as f64 / n as f64)
}

fn frame_metrics(id: &str, scaled: &DepthMap, gt: &DepthMap) -> Result<FrameMetrics> {
    let wrap = |source| MetricError::Frame { id: id.to_string(), source: Box::new(source) };
    Ok(FrameMetrics {
        id: id.to_string(),
        abs_rel: abs_rel(scaled, gt).map_err(wrap)?,
        delta1: delta_acc(scaled, gt, DELTA1_THRESHOLD).map_err(wrap)?,
    })
}

/// Median-scales each prediction, computes Abs. Rel. and δ₁ per frame, and
/// averages them over frames. Frames are evaluated in parallel; the
/// aggregation order is the input order.
pub fn evaluate_case(
    case_name: &str,
    ids: &[String],
    preds: &[DepthMap],
    gts: &[DepthMap],
    scaling: Scaling,
) -> Result<EvalResult> {
    if preds.len() != gts.len() || ids.len() != gts.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
            ids: ids.len(),
        });
    }
    if gts.is_empty() {
        return Err(MetricError::NoFrames);
    }
    let frame_err = |id: &str, source| MetricError::Frame { id: id.to_string(), source: Box::new(source) };
    let sequence_factor = match scaling {
        Scaling::PerFrame => None,
        Scaling::PerSequence => {
            for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
                check_shapes(p, g).map_err(|e| frame_err(id, e))?;
            }
            let pairs = preds.iter().zip(gts).flat_map(|(p, g)| joint_pairs(p, g));
            let (mp, mg) = joint_medians(pairs)?;
            Some(scale_factor(mp, mg)?)
        }
    };
    let per_frame = ids
        .par_iter()
        .zip(preds.par_iter().zip(gts.par_iter()))
        .map(|(id, (pred, gt))| {
            let scaled = match sequence_factor {
                Some(k) => {
                    check_shapes(pred, gt).map_err(|e| frame_err(id, e))?;
                    pred.scaled(k)
                }
                None => median_scale(pred, gt).map_err(|e| frame_err(id, e))?.values,
            };
            frame_metrics(id, &scaled, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    let abs_rel = per_frame.iter().map(|f| f.abs_rel).sum::<f64>() / n;
    let delta1 = per_frame.iter().map(|f| f.delta1).sum::<f64>() / n;
    Ok(EvalResult {
        case_name: case_name.to_string(),
        n_frames: per_frame.len(),
        abs_rel,
        delta1,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(values: &[f64]) -> DepthMap {
        DepthMap::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn median_interpolates_even_counts() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn median_scale_hand_example() {
        let s = median_scale(&map(&[1.0, 2.0, 3.0, 4.0]), &map(&[2.0, 4.0, 6.0, 8.0])).unwrap();
        assert_eq!(s.scale_factor, 2.0);
        assert_eq!(s.values.values(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn median_scale_exact_multiple_and_identity() {
        let gt = map(&[0.8, 1.6, 3.2, 0.4, 12.8]);
        let half = gt.scaled(0.5);
        assert_eq!(median_scale(&half, &gt).unwrap().values, gt);
        let same = median_scale(&gt, &gt).unwrap();
        assert_eq!(same.scale_factor, 1.0);
        assert_eq!(same.values, gt);
    }

    #[test]
    fn median_scale_uses_joint_mask() {
        let pred = DepthMap::new(1, 3, vec![1.0, 100.0, 1.0]).unwrap();
        let gt = DepthMap::new(1, 3, vec![2.0, 0.0, 2.0]).unwrap();
        assert_eq!(median_scale(&pred, &gt).unwrap().scale_factor, 2.0);
    }

    #[test]
    fn median_scale_errors() {
        let a = DepthMap::new(1, 2, vec![1.0, 0.0]).unwrap();
        let b = DepthMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(median_scale(&a, &b).unwrap_err(), MetricError::EmptyMask);
        assert!(matches!(
            median_scale(&map(&[1.0]), &map(&[1.0, 2.0])),
            Err(MetricError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn abs_rel_examples() {
        assert_eq!(abs_rel(&map(&[1.0, 1.0]), &map(&[2.0, 1.0])).unwrap(), 0.25);
        let g = map(&[0.3, 0.9, 7.0]);
        assert_eq!(abs_rel(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn delta_examples() {
        let g = map(&[0.3, 0.9, 7.0]);
        assert_eq!(delta_acc(&g, &g, 1.25).unwrap(), 1.0);
        assert_eq!(delta_acc(&map(&[1.0]), &map(&[1.3]), 1.25).unwrap(), 0.0);
        assert_eq!(delta_acc(&map(&[1.0]), &map(&[1.25]), 1.25).unwrap(), 0.0);
        assert_eq!(delta_acc(&map(&[1.25]), &map(&[1.0]), 1.25).unwrap(), 0.0);
        assert_eq!(delta_acc(&g, &g, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_identical_frames() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let gts = vec![map(&[1.0, 2.0]), map(&[3.0, 5.0, 8.0])];
        for scaling in [Scaling::PerFrame, Scaling::PerSequence] {
            let r = evaluate_case("c", &ids, &gts, &gts, scaling).unwrap();
            assert_eq!(r.abs_rel, 0.0);
            assert_eq!(r.delta1, 1.0);
            assert_eq!(r.n_frames, 2);
        }
    }

    #[test]
    fn evaluate_averages_frames() {
        // frame 1: pred {1,1} gt {2,1}: scale by median(gt)/median(pred) = 1.5
        //   scaled {1.5,1.5}: (0.5/2 + 0.5/1)/2 = 0.375
        // frame 2: pred {1,3}, gt {1,1}: factor 1/2 -> {0.5,1.5}: (0.5 + 0.5)/2 = 0.5
        let ids = vec!["f1".to_string(), "f2".to_string()];
        let preds = vec![map(&[1.0, 1.0]), map(&[1.0, 3.0])];
        let gts = vec![map(&[2.0, 1.0]), map(&[1.0, 1.0])];
        let r = evaluate_case("c", &ids, &preds, &gts, Scaling::PerFrame).unwrap();
        assert_eq!(r.per_frame[0].abs_rel, 0.375);
        assert_eq!(r.per_frame[1].abs_rel, 0.5);
        assert_eq!(r.abs_rel, 0.4375);
    }

    #[test]
    fn evaluate_two_frame_mean_of_hand_values() {
        // both frames already share the gt median, so the factor is 1:
        // f1 pred {1.5, 2.5} vs gt {2, 2}: (0.25 + 0.25) / 2 = 0.25
        // f2 pred {1.9, 2.1} vs gt {2, 2}: (0.05 + 0.05) / 2 = 0.05
        let ids = vec!["f1".to_string(), "f2".to_string()];
        let preds = vec![map(&[1.5, 2.5]), map(&[1.9, 2.1])];
        let gts = vec![map(&[2.0, 2.0]), map(&[2.0, 2.0])];
        let r = evaluate_case("c", &ids, &preds, &gts, Scaling::PerFrame).unwrap();
        assert!((r.per_frame[0].abs_rel - 0.25).abs() < 1e-15);
        assert!((r.per_frame[1].abs_rel - 0.05).abs() < 1e-15);
        assert!((r.abs_rel - 0.15).abs() < 1e-15);
    }

    #[test]
    fn evaluate_reports_failing_frame() {
        let ids = vec!["good".to_string(), "bad".to_string()];
        let preds = vec![map(&[1.0]), DepthMap::new(1, 1, vec![0.0]).unwrap()];
        let gts = vec![map(&[1.0]), map(&[1.0])];
        match evaluate_case("c", &ids, &preds, &gts, Scaling::PerFrame) {
            Err(MetricError::Frame { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            evaluate_case("c", &ids[..1], &preds, &gts, Scaling::PerFrame),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn per_sequence_uses_one_factor() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let preds = vec![map(&[1.0]), map(&[3.0])];
        let gts = vec![map(&[2.0]), map(&[2.0])];
        // pooled medians: pred 2, gt 2 -> factor 1
        let r = evaluate_case("c", &ids, &preds, &gts, Scaling::PerSequence).unwrap();
        assert_eq!(r.per_frame[0].abs_rel, 0.5);
        assert_eq!(r.per_frame[1].abs_rel, 0.5);
        let r = evaluate_case("c", &ids, &preds, &gts, Scaling::PerFrame).unwrap();
        assert_eq!(r.abs_rel, 0.0);
    }

    fn arb_pair() -> impl Strategy<Value = (DepthMap, DepthMap)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0.05f64..20.0, h * w),
                proptest::collection::vec(0.05f64..20.0, h * w),
            )
                .prop_map(move |(p, g)| {
                    (DepthMap::new(h, w, p).unwrap(), DepthMap::new(h, w, g).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn scaled_median_matches_gt_median((pred, gt) in arb_pair()) {
            let s = median_scale(&pred, &gt).unwrap();
            let mut a = s.values.values().to_vec();
            let mut b = gt.values().to_vec();
            let (ma, mb) = (median(&mut a).unwrap(), median(&mut b).unwrap());
            prop_assert!((ma - mb).abs() <= 1e-12 * mb);
        }

        #[test]
        fn abs_rel_nonnegative_zero_iff_equal((pred, gt) in arb_pair()) {
            let v = abs_rel(&pred, &gt).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, pred.values() == gt.values());
            prop_assert_eq!(abs_rel(&gt, &gt).unwrap(), 0.0);
        }

        #[test]
        fn delta_symmetric_and_monotone((pred, gt) in arb_pair()) {
            let mut last = 0.0;
            for t in [1.05, 1.25, 1.5625, 1.953125] {
                let a = delta_acc(&pred, &gt, t).unwrap();
                prop_assert_eq!(a, delta_acc(&gt, &pred, t).unwrap());
                prop_assert!(a >= last);
                prop_assert!((0.0..=1.0).contains(&a));
                last = a;
            }
        }
    }
}
