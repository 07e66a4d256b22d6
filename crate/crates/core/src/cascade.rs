//! The hierarchical decision rule fusing the two experts.
//!
//! The textured detector is consulted first: a textured verdict is final
//! and yields COSMETIC_LENS. Only on the non-textured branch does the
//! lens detector pick between SOFT_LENS and NO_LENS. Both experts always
//! score every image; the lens score on the textured branch is kept for
//! diagnostics only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, ExpertModel};
use crate::datamodel::{ExpertKind, LabelClass};
use crate::ingestion::ImageTensor;

/// Decision thresholds on the experts' positive-class probabilities.
/// Scores at or above the threshold resolve to the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeThresholds {
    pub t_textured: f64,
    pub t_lens: f64,
}

impl Default for CascadeThresholds {
    fn default() -> Self {
        CascadeThresholds {
            t_textured: 0.5,
            t_lens: 0.5,
        }
    }
}

impl CascadeThresholds {
    pub fn new(t_textured: f64, t_lens: f64) -> Result<Self, CascadeError> {
        let th = CascadeThresholds { t_textured, t_lens };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<(), CascadeError> {
        for (name, v) in [("t_textured", self.t_textured), ("t_lens", self.t_lens)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CascadeError::InvalidThreshold {
                    name,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Three-class verdict plus both expert scores and which expert fixed the
/// label. COSMETIC_LENS if and only if the textured detector decided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeDecision {
    pub label: LabelClass,
    pub p_textured: f64,
    pub p_lens: f64,
    pub deciding_expert: ExpertKind,
}

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("threshold {name} must be inside (0, 1), got {value}")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("probability {name} out of [0, 1]: {value}")]
    OutOfRangeProbability { name: &'static str, value: f64 },
    #[error("expert kind mismatch: expected ({expected_first}, {expected_second}), got ({got_first}, {got_second})")]
    KindMismatch {
        expected_first: ExpertKind,
        expected_second: ExpertKind,
        got_first: ExpertKind,
        got_second: ExpertKind,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Pure decision rule over the two positive-class scores.
pub fn cascade_decide(
    p_textured: f64,
    p_lens: f64,
    thresholds: &CascadeThresholds,
) -> Result<CascadeDecision, CascadeError> {
    thresholds.validate()?;
    for (name, v) in [("p_textured", p_textured), ("p_lens", p_lens)] {
        if !(0.0..=1.0).contains(&v) || v.is_nan() {
            return Err(CascadeError::OutOfRangeProbability { name, value: v });
        }
    }
    let (label, deciding_expert) = if p_textured >= thresholds.t_textured {
        (LabelClass::CosmeticLens, ExpertKind::TexturedDetector)
    } else if p_lens >= thresholds.t_lens {
        (LabelClass::SoftLens, ExpertKind::LensDetector)
    } else {
        (LabelClass::NoLens, ExpertKind::LensDetector)
    };
    Ok(CascadeDecision {
        label,
        p_textured,
        p_lens,
        deciding_expert,
    })
}

/// Scores every input with both experts (unconditionally) and applies the
/// decision rule, preserving input order.
pub fn cascade_predict(
    expert_textured: &ExpertModel<f32>,
    expert_lens: &ExpertModel<f32>,
    batch: &[ImageTensor],
    thresholds: &CascadeThresholds,
) -> Result<Vec<CascadeDecision>, CascadeError> {
    if expert_textured.kind != ExpertKind::TexturedDetector
        || expert_lens.kind != ExpertKind::LensDetector
    {
        return Err(CascadeError::KindMismatch {
            expected_first: ExpertKind::TexturedDetector,
            expected_second: ExpertKind::LensDetector,
            got_first: expert_textured.kind,
            got_second: expert_lens.kind,
        });
    }
    thresholds.validate()?;
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let textured_scores = expert_textured.predict_probs(batch)?;
    let lens_scores = expert_lens.predict_probs(batch)?;
    textured_scores
        .iter()
        .zip(&lens_scores)
        .map(|(t, l)| cascade_decide(t[1] as f64, l[1] as f64, thresholds))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    #[test]
    fn quadrant_truth_table_holds_for_sampled_thresholds() {
        // 25 threshold pairs over (0,1)^2; in each quadrant of
        // (p_textured vs t, p_lens vs t) the verdicts are COSMETIC,
        // COSMETIC, SOFT, NO.
        for i in 0..5 {
            for j in 0..5 {
                let th = CascadeThresholds::new(
                    0.1 + 0.18 * i as f64,
                    0.1 + 0.18 * j as f64,
                )
                .unwrap();
                let hi_t = th.t_textured + (1.0 - th.t_textured) / 2.0;
                let lo_t = th.t_textured / 2.0;
                let hi_l = th.t_lens + (1.0 - th.t_lens) / 2.0;
                let lo_l = th.t_lens / 2.0;

                let cases = [
                    (hi_t, hi_l, LabelClass::CosmeticLens),
                    (hi_t, lo_l, LabelClass::CosmeticLens),
                    (lo_t, hi_l, LabelClass::SoftLens),
                    (lo_t, lo_l, LabelClass::NoLens),
                ];
                for (pt, pl, expected) in cases {
                    let d = cascade_decide(pt, pl, &th).unwrap();
                    assert_eq!(d.label, expected, "pt={pt} pl={pl} th={th:?}");
                    assert_eq!(
                        d.label == LabelClass::CosmeticLens,
                        d.deciding_expert == ExpertKind::TexturedDetector
                    );
                }
            }
        }
    }

    #[test]
    fn default_threshold_examples() {
        let th = CascadeThresholds::default();
        assert_eq!(cascade_decide(0.9, 0.1, &th).unwrap().label, LabelClass::CosmeticLens);
        assert_eq!(cascade_decide(0.1, 0.9, &th).unwrap().label, LabelClass::SoftLens);
        assert_eq!(cascade_decide(0.1, 0.1, &th).unwrap().label, LabelClass::NoLens);
        // textured expert dominates even with a high lens score
        assert_eq!(cascade_decide(0.9, 0.9, &th).unwrap().label, LabelClass::CosmeticLens);
        // ties resolve to the positive class
        assert_eq!(cascade_decide(0.5, 0.0, &th).unwrap().label, LabelClass::CosmeticLens);
        assert_eq!(cascade_decide(0.0, 0.5, &th).unwrap().label, LabelClass::SoftLens);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let th = CascadeThresholds::default();
        assert!(cascade_decide(-0.1, 0.5, &th).is_err());
        assert!(cascade_decide(0.5, 1.5, &th).is_err());
        assert!(cascade_decide(f64::NAN, 0.5, &th).is_err());
        assert!(CascadeThresholds::new(0.0, 0.5).is_err());
        assert!(CascadeThresholds::new(0.5, 1.0).is_err());
    }

    #[test]
    fn raising_p_textured_never_revokes_cosmetic() {
        let th = CascadeThresholds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = rng.gen::<f64>();
            let q: f64 = rng.gen::<f64>();
            let pl = rng.gen::<f64>();
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            let d_lo = cascade_decide(lo, pl, &th).unwrap();
            let d_hi = cascade_decide(hi, pl, &th).unwrap();
            if d_lo.label == LabelClass::CosmeticLens {
                assert_eq!(d_hi.label, LabelClass::CosmeticLens);
            }
        }
    }

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor {
            data: Array3::from_shape_simple_fn((size, size, 3), || rng.gen_range(-1.0..1.0f32)),
            source_id: format!("r{seed}"),
        }
    }

    #[test]
    fn predict_scores_all_inputs_and_matches_pointwise_decisions() {
        let cfg = BackboneConfig {
            input_size: 64,
            width_scale: 0.125,
            init_seed: 3,
            ..Default::default()
        };
        let tex = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        let lens = build_backbone::<f32>(
            &BackboneConfig { init_seed: 4, ..cfg.clone() },
            ExpertKind::LensDetector,
        )
        .unwrap();
        let th = CascadeThresholds::default();
        let batch: Vec<ImageTensor> = (0..5).map(|i| random_image(64, i)).collect();

        let decisions = cascade_predict(&tex, &lens, &batch, &th).unwrap();
        assert_eq!(decisions.len(), 5);

        // pointwise equality with independently computed expert scores
        let pt = tex.predict_probs(&batch).unwrap();
        let pl = lens.predict_probs(&batch).unwrap();
        for (i, d) in decisions.iter().enumerate() {
            let alone = cascade_decide(pt[i][1] as f64, pl[i][1] as f64, &th).unwrap();
            assert_eq!(d, &alone);
            assert!(d.p_textured >= 0.0 && d.p_lens >= 0.0);
        }

        // swapped expert arguments are a kind mismatch
        let err = cascade_predict(&lens, &tex, &batch, &th);
        assert!(matches!(err, Err(CascadeError::KindMismatch { .. })));

        // empty batch yields an empty list
        assert!(cascade_predict(&tex, &lens, &[], &th).unwrap().is_empty());
    }
}
