use super::{Result, TrainError};
use crate::depthdata::DepthMap;
use crate::model::FeatureMap;

fn joint_l1(pred: &[f64], pred_valid: Option<&[bool]>, gt: &DepthMap) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, (g, gv))) in pred.iter().zip(gt.values().iter().zip(gt.valid())).enumerate() {
        if *gv && pred_valid.is_none_or(|m| m[i]) {
            sum += (p - g).abs();
            n += 1;
        }
    }
    (sum, n)
}

/// Mean absolute difference over the joint-valid pixels.
pub fn l1_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(TrainError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (sum, n) = joint_l1(pred.values(), Some(pred.valid()), gt);
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// L1 loss of a dense (all-valid) prediction and its gradient. The
/// subgradient at a zero residual is 0.
pub(crate) fn l1_loss_grad(pred: &[f64], gt: &DepthMap) -> Result<(f64, Vec<f64>)> {
    let (sum, n) = joint_l1(pred, None, gt);
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    let inv = 1.0 / n as f64;
    let grad = pred
        .iter()
        .zip(gt.values().iter().zip(gt.valid()))
        .map(|(p, (g, gv))| {
            if !*gv {
                0.0
            } else if p > g {
                inv
            } else if p < g {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum * inv, grad))
}

/// `1 - mean cosine similarity` between corresponding tokens, in `[0, 2]`.
/// A token pair where either vector is all zeros contributes cosine 0.
pub fn feature_align_loss(student: &FeatureMap, frozen: &FeatureMap) -> Result<f64> {
    check_features(student, frozen)?;
    Ok(feature_align_grad(student.tokens(), frozen.tokens(), student.dim()).0)
}

pub(crate) fn check_features(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.grid() != b.grid() || a.dim() != b.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "feature grids {:?}x{} vs {:?}x{}",
            a.grid(),
            a.dim(),
            b.grid(),
            b.dim()
        )));
    }
    Ok(())
}

/// Loss, gradient with respect to the student tokens, and the number of
/// degenerate (zero-norm) token pairs.
pub(crate) fn feature_align_grad(student: &[f64], frozen: &[f64], dim: usize) -> (f64, Vec<f64>, usize) {
    let tokens = student.len() / dim;
    let inv_t = 1.0 / tokens as f64;
    let mut cos_sum = 0.0;
    let mut grad = vec![0.0; student.len()];
    let mut degenerate = 0;
    for ((s, f), g) in student
        .chunks_exact(dim)
        .zip(frozen.chunks_exact(dim))
        .zip(grad.chunks_exact_mut(dim))
    {
        let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ns == 0.0 || nf == 0.0 {
            degenerate += 1;
            continue;
        }
        let dot: f64 = s.iter().zip(f).map(|(a, b)| a * b).sum();
        let cos = dot / (ns * nf);
        cos_sum += cos;
        // d(-cos/T)/ds = -(f/(|s||f|) - cos * s/|s|^2) / T
        for ((gv, sv), fv) in g.iter_mut().zip(s).zip(f) {
            *gv = -inv_t * (fv / (ns * nf) - cos * sv / (ns * ns));
        }
    }
    (1.0 - cos_sum * inv_t, grad, degenerate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(tokens: Vec<f64>, dim: usize) -> FeatureMap {
        let n = tokens.len() / dim;
        FeatureMap::new((1, n), dim, tokens).unwrap()
    }

    #[test]
    fn l1_examples() {
        let gt = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l1_loss(&gt, &gt).unwrap(), 0.0);
        let shifted = DepthMap::new(2, 2, vec![1.25, 2.25, 3.25, 4.25]).unwrap();
        assert_eq!(l1_loss(&shifted, &gt).unwrap(), 0.25);
        let masked = DepthMap::new(2, 2, vec![0.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l1_loss(&shifted, &masked).unwrap(), 0.25);
        let none = DepthMap::new(1, 1, vec![0.0]).unwrap();
        assert!(matches!(l1_loss(&none, &none), Err(TrainError::EmptyMask)));
    }

    #[test]
    fn l1_matches_brute_force() {
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let p: Vec<f64> = (0..16).map(|_| 0.1 + 5.0 * next()).collect();
            let g: Vec<f64> = (0..16).map(|_| 0.1 + 5.0 * next()).collect();
            let mut brute = 0.0;
            for i in 0..16 {
                brute += (p[i] - g[i]).abs();
            }
            brute /= 16.0;
            let got = l1_loss(
                &DepthMap::new(4, 4, p.clone()).unwrap(),
                &DepthMap::new(4, 4, g.clone()).unwrap(),
            )
            .unwrap();
            assert!((got - brute).abs() <= 1e-12 * brute);
        }
    }

    #[test]
    fn l1_subgradient_zero_at_kink() {
        let gt = DepthMap::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (_, g) = l1_loss_grad(&[1.0, 2.5, 2.0], &gt).unwrap();
        assert_eq!(g, vec![0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn align_examples() {
        let a = fm(vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0], 3);
        let neg = fm(a.tokens().iter().map(|v| -v).collect(), 3);
        assert!(feature_align_loss(&a, &a).unwrap().abs() < 1e-15);
        assert!((feature_align_loss(&a, &neg).unwrap() - 2.0).abs() < 1e-15);
        let x = fm(vec![1.0, 0.0, 0.0, 1.0], 2);
        let y = fm(vec![0.0, 3.0, -2.0, 0.0], 2);
        assert!((feature_align_loss(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn align_zero_token_counts_as_orthogonal() {
        let a = fm(vec![0.0, 0.0, 1.0, 0.0], 2);
        let b = fm(vec![1.0, 0.0, 1.0, 0.0], 2);
        let (loss, grad, degenerate) = feature_align_grad(a.tokens(), b.tokens(), 2);
        assert_eq!(degenerate, 1);
        assert!((loss - 0.5).abs() < 1e-15);
        assert_eq!(&grad[..2], &[0.0, 0.0]);
    }

    #[test]
    fn align_shape_mismatch() {
        let a = fm(vec![1.0, 0.0], 2);
        let b = fm(vec![1.0, 0.0, 0.0], 3);
        assert!(matches!(feature_align_loss(&a, &b), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn align_gradient_matches_differences() {
        let s = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let f = vec![1.0, 0.5, -0.2, -0.3, 0.8, 0.9];
        let (_, g, _) = feature_align_grad(&s, &f, 3);
        for i in 0..s.len() {
            let h = 1e-6;
            let mut a = s.clone();
            let mut b = s.clone();
            a[i] += h;
            b[i] -= h;
            let num = (feature_align_grad(&a, &f, 3).0 - feature_align_grad(&b, &f, 3).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }
    }
}
