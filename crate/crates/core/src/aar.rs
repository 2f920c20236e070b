//! Adaptive attention re-scaling.
//!
//! Confidence is the top softmax probability of the pass-1 logits. Below
//! `p_thr` the image-column pre-softmax scores of the last row are multiplied
//! by `lambda_t = lambda_min * p + lambda_max * (1 - p)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, NumericSite, Result};
use crate::model::{softmax_row, Hook, RowHook};
use crate::vtc::LayerRange;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AarConfig {
    pub p_thr: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `None` means every layer.
    #[serde(default)]
    pub layer_range: Option<LayerRange>,
}

impl Default for AarConfig {
    fn default() -> Self {
        Self {
            p_thr: 0.25,
            lambda_min: 1.0,
            lambda_max: 1.5,
            layer_range: None,
        }
    }
}

impl AarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_thr) {
            return Err(Error::config(
                "aar.p_thr",
                format!("{} is outside [0, 1]", self.p_thr),
            ));
        }
        if !(self.lambda_min >= 1.0) || !self.lambda_min.is_finite() {
            return Err(Error::config(
                "aar.lambda_min",
                "must be a finite value >= 1",
            ));
        }
        if !(self.lambda_max >= self.lambda_min) || !self.lambda_max.is_finite() {
            return Err(Error::config(
                "aar.lambda_max",
                "must be finite and >= lambda_min",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDecision {
    pub p_t: f64,
    pub triggered: bool,
    pub lambda_t: f64,
}

pub fn read_confidence(logits: &[f64]) -> Result<f64> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(NumericSite::Logits));
    }
    let p = softmax_row(logits)?;
    Ok(p.into_iter().fold(0.0, f64::max))
}

pub fn compute_lambda(p: f64, cfg: &AarConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("confidence {p} is outside [0, 1]")));
    }
    Ok(cfg.lambda_min * p + cfg.lambda_max * (1.0 - p))
}

/// Gate on `p_t < p_thr`; untriggered steps record `lambda_t = 1`.
pub fn decide(p_t: f64, cfg: &AarConfig) -> Result<ScaleDecision> {
    let triggered = p_t < cfg.p_thr;
    let lambda_t = if triggered {
        compute_lambda(p_t, cfg)?
    } else {
        1.0
    };
    Ok(ScaleDecision {
        p_t,
        triggered,
        lambda_t,
    })
}

/// Scales the first `image_slots` scores by `lambda_t`.
pub fn apply_aar(scores: &[f64], image_slots: usize, lambda_t: f64) -> Result<Vec<f64>> {
    let mut out = scores.to_vec();
    scale_in_place(&mut out, image_slots, lambda_t)?;
    Ok(out)
}

fn scale_in_place(scores: &mut [f64], image_slots: usize, lambda_t: f64) -> Result<()> {
    if image_slots > scores.len() {
        return Err(Error::domain(format!(
            "{image_slots} image slots exceed row length {}",
            scores.len()
        )));
    }
    if !(lambda_t >= 1.0) || !lambda_t.is_finite() {
        return Err(Error::domain(format!(
            "lambda {lambda_t} must be finite and >= 1"
        )));
    }
    if lambda_t != 1.0 {
        scores[..image_slots]
            .iter_mut()
            .for_each(|s| *s *= lambda_t);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AarHook {
    pub lambda_t: f64,
}

impl RowHook for AarHook {
    fn apply(&self, _layer: usize, _head: usize, image_row: &mut [f64]) -> Result<()> {
        let n = image_row.len();
        scale_in_place(image_row, n, self.lambda_t)
    }
}

/// Pre-softmax hook for one triggered step.
pub fn aar_hook(cfg: &AarConfig, num_layers: usize, lambda_t: f64) -> Hook {
    let layers = cfg
        .layer_range
        .map(LayerRange::range)
        .unwrap_or(0..num_layers);
    Hook::new(layers, Arc::new(AarHook { lambda_t }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_examples() {
        assert!((read_confidence(&[0.3; 4]).unwrap() - 0.25).abs() < 1e-15);
        let p = read_confidence(&[50.0, 0.0, 0.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
        let p = read_confidence(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
        assert!(matches!(
            read_confidence(&[1.0, f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn lambda_examples() {
        let cfg = AarConfig::default();
        assert_eq!(compute_lambda(1.0, &cfg).unwrap(), 1.0);
        assert_eq!(compute_lambda(0.0, &cfg).unwrap(), 1.5);
        assert!((compute_lambda(0.25, &cfg).unwrap() - 1.375).abs() < 1e-12);
        assert!(compute_lambda(-0.1, &cfg).is_err());
        assert!(compute_lambda(1.1, &cfg).is_err());
    }

    #[test]
    fn gate_records_unit_lambda() {
        let cfg = AarConfig::default();
        let d = decide(0.3, &cfg).unwrap();
        assert!(!d.triggered);
        assert_eq!(d.lambda_t, 1.0);
        let d = decide(0.2, &cfg).unwrap();
        assert!(d.triggered);
        assert!((d.lambda_t - 1.4).abs() < 1e-12);
        let zero = AarConfig { p_thr: 0.0, ..cfg };
        assert!(!decide(0.0, &zero).unwrap().triggered);
    }

    #[test]
    fn scaling_example() {
        let s = apply_aar(&[1.0, 2.0, 0.5], 2, 2.0).unwrap();
        assert_eq!(s, vec![2.0, 4.0, 0.5]);
        let p = softmax_row(&s).unwrap();
        // e^2, e^4, e^0.5 over their sum
        let z = 2f64.exp() + 4f64.exp() + 0.5f64.exp();
        let expect = [2f64.exp() / z, 4f64.exp() / z, 0.5f64.exp() / z];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.1161).abs() < 5e-5);
        assert!((p[1] - 0.8580).abs() < 5e-5);
        assert!((p[2] - 0.0259).abs() < 5e-5);
        assert_eq!(apply_aar(&[1.0, 2.0], 2, 1.0).unwrap(), vec![1.0, 2.0]);
        assert!(apply_aar(&[1.0], 2, 1.5).is_err());
        assert!(apply_aar(&[1.0, 2.0], 1, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AarConfig::default().validate().is_ok());
        let bad = AarConfig {
            lambda_max: 0.9,
            ..AarConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AarConfig {
            p_thr: 1.2,
            ..AarConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
