//! Analytic cost of a tree Allreduce with and without quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduction-speed ratio measured for standard dithering.
pub const OMEGA_STANDARD: f64 = 1.0;
/// Reduction-speed ratio measured for exponential dithering on one
/// accelerator with 25 MB buffers; hardware specific.
pub const OMEGA_EXPONENTIAL: f64 = 1.0 / 79.0;
/// Default payload size for measurements, in bytes.
pub const DEFAULT_SIZE: f64 = 25.0 * 1024.0 * 1024.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Propagation delay, seconds.
    pub alpha: f64,
    /// Bandwidth, bytes/s.
    pub beta: f64,
    /// Native reduction speed, bytes/s.
    pub gamma: f64,
    /// Quantized over native reduction speed, so the quantized reduction
    /// runs at `omega * gamma`.
    pub omega: f64,
    /// Uncompressed over compressed size.
    pub rho: f64,
    /// Gradient size `S`, bytes.
    pub size: f64,
    pub workers: usize,
    /// Quantize plus dequantize time per byte of `S`.
    pub delta: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 5.4e9,
            gamma: 2e12,
            omega: OMEGA_EXPONENTIAL,
            rho: 4.0,
            size: DEFAULT_SIZE,
            workers: 16,
            delta: 0.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.workers < 2 {
            return Err(Error::invalid_arg("the cost model needs at least 2 workers"));
        }
        let positive = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("omega", self.omega),
            ("size", self.size),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid_arg(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("delta", self.delta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid_arg(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.rho.is_finite() && self.rho >= 1.0) {
            return Err(Error::invalid_arg(format!("rho must be at least 1, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn size_hat(&self) -> f64 {
        self.size / self.rho
    }

    pub fn gamma_hat(&self) -> f64 {
        self.omega * self.gamma
    }

    fn log_n(&self) -> f64 {
        (self.workers as f64).log2()
    }
}

/// `2 log N alpha + 2 log N S / beta + log N S / gamma`
pub fn baseline_cost(p: &CostParams) -> Result<f64> {
    p.validate()?;
    let l = p.log_n();
    Ok(2.0 * l * p.alpha + 2.0 * l * p.size / p.beta + l * p.size / p.gamma)
}

/// `2 log N alpha + 2 log N S^ / beta + log N S^ / gamma^ + delta S`
pub fn quantized_cost(p: &CostParams) -> Result<f64> {
    p.validate()?;
    let l = p.log_n();
    let sh = p.size_hat();
    Ok(2.0 * l * p.alpha + 2.0 * l * sh / p.beta + l * sh / p.gamma_hat() + p.delta * p.size)
}

/// Bandwidths for which quantization pays off (with `delta = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", content = "beta_max", rename_all = "lowercase")]
pub enum Threshold {
    /// Faster for every bandwidth.
    Always,
    /// Faster iff `beta < beta_max`.
    Below(f64),
    /// Never strictly faster.
    Never,
}

impl Threshold {
    pub fn admits(&self, beta: f64) -> bool {
        match *self {
            Threshold::Always => true,
            Threshold::Below(b) => beta < b,
            Threshold::Never => false,
        }
    }
}

pub fn speedup_threshold(omega: f64, rho: f64, gamma: f64) -> Result<Threshold> {
    if !(omega > 0.0 && omega.is_finite() && gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid_arg("omega and gamma must be positive"));
    }
    if !(rho.is_finite() && rho >= 1.0) {
        return Err(Error::invalid_arg("rho must be at least 1"));
    }
    // quantization wins iff 2(rho - 1) / beta > (1 - omega rho) / (omega gamma)
    let gain = 2.0 * (rho - 1.0);
    let penalty = 1.0 - omega * rho;
    Ok(if gain == 0.0 {
        if penalty < 0.0 {
            Threshold::Always
        } else {
            Threshold::Never
        }
    } else if penalty <= 0.0 {
        Threshold::Always
    } else {
        Threshold::Below(gain * omega / penalty * gamma)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub baseline: f64,
    pub quantized: f64,
    /// `baseline / quantized`.
    pub speedup: f64,
    pub threshold: Threshold,
    /// Whether the quantized Allreduce is strictly faster.
    pub faster: bool,
}

pub fn predict(p: &CostParams) -> Result<Prediction> {
    let baseline = baseline_cost(p)?;
    let quantized = quantized_cost(p)?;
    Ok(Prediction {
        baseline,
        quantized,
        speedup: baseline / quantized,
        threshold: speedup_threshold(p.omega, p.rho, p.gamma)?,
        faster: quantized < baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> CostParams {
        CostParams {
            alpha: 0.0,
            beta: 1e18,
            gamma: 1.0,
            omega: 1.0,
            rho: 1.0,
            size: 1.0,
            workers: 2,
            delta: 0.0,
        }
    }

    #[test]
    fn baseline_terms() {
        assert!((baseline_cost(&params()).unwrap() - 1.0).abs() < 1e-12);
        let p16 = CostParams {
            workers: 16,
            alpha: 0.5,
            beta: 3.0,
            ..params()
        };
        let p2 = CostParams { workers: 2, ..p16 };
        let r = baseline_cost(&p16).unwrap() / baseline_cost(&p2).unwrap();
        assert!((r - 4.0).abs() < 1e-12);
        let big = CostParams { size: 2.0, beta: 3.0, ..params() };
        let small = CostParams { beta: 3.0, ..params() };
        assert!((baseline_cost(&big).unwrap() - 2.0 * baseline_cost(&small).unwrap()).abs() < 1e-12);
        assert!(baseline_cost(&CostParams { workers: 1, ..params() }).is_err());
    }

    #[test]
    fn quantized_limits() {
        let p = CostParams { beta: 7.0, alpha: 0.1, ..params() };
        assert_eq!(quantized_cost(&p).unwrap(), baseline_cost(&p).unwrap());
        let p = CostParams { rho: 4.0, beta: 7.0, workers: 8, ..params() };
        assert!((quantized_cost(&p).unwrap() - baseline_cost(&p).unwrap() / 4.0).abs() < 1e-12);
        let with = CostParams { delta: 0.3, size: 5.0, ..p };
        let without = CostParams { size: 5.0, ..p };
        let added = quantized_cost(&with).unwrap() - quantized_cost(&without).unwrap();
        assert!((added - 1.5).abs() < 1e-12);
    }

    #[test]
    fn headline_thresholds() {
        assert_eq!(speedup_threshold(1.0, 4.0, 1.0).unwrap(), Threshold::Always);
        let Threshold::Below(b) = speedup_threshold(1.0 / 79.0, 4.0, 1.0).unwrap() else {
            panic!("expected a bound");
        };
        assert!((b - 0.08).abs() <= 1e-12 * 0.08);
        let Threshold::Below(b) = speedup_threshold(1.0 / 79.0, 4.0, 2e12).unwrap() else {
            panic!("expected a bound");
        };
        assert!((b - 160e9).abs() <= 1e-12 * 160e9);
        assert!(b > 53.9e9);
        assert_eq!(speedup_threshold(1.0, 1.0, 1.0).unwrap(), Threshold::Never);
        assert_eq!(speedup_threshold(2.0, 1.0, 1.0).unwrap(), Threshold::Always);
        assert_eq!(speedup_threshold(0.25, 4.0, 1.0).unwrap(), Threshold::Always);
    }

    #[test]
    fn predict_examples() {
        let p = predict(&params()).unwrap();
        assert_eq!(p.speedup, 1.0);
        assert!(!p.faster);
        let pcie = CostParams {
            beta: 5.4e9,
            gamma: 2e12,
            omega: OMEGA_EXPONENTIAL,
            rho: 4.0,
            workers: 16,
            ..params()
        };
        let p = predict(&pcie).unwrap();
        assert!(p.faster && p.threshold.admits(5.4e9) && p.speedup > 1.0);
    }

    proptest! {
        #[test]
        fn closed_form_matches_direct_comparison(
            lb in 6.0f64..13.0,
            lg in 9.0f64..13.0,
            omega in 0.005f64..2.0,
            rho in 1.0f64..8.0,
            workers in 2usize..64,
        ) {
            let p = CostParams {
                alpha: 1e-6,
                beta: 10f64.powf(lb),
                gamma: 10f64.powf(lg),
                omega,
                rho,
                size: 1e8,
                workers,
                delta: 0.0,
            };
            let pr = predict(&p).unwrap();
            let gap = (pr.baseline - pr.quantized).abs() / pr.baseline;
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(pr.faster, pr.threshold.admits(p.beta));
        }

        #[test]
        fn quantized_cost_monotone(
            omega in 0.01f64..2.0,
            rho in 1.0f64..8.0,
            bump in 1.0f64..3.0,
        ) {
            let p = CostParams { omega, rho, ..CostParams::default() };
            let base = quantized_cost(&p).unwrap();
            let faster_reduce = CostParams { omega: omega * bump, ..p };
            let smaller = CostParams { rho: rho * bump, ..p };
            prop_assert!(quantized_cost(&faster_reduce).unwrap() <= base);
            prop_assert!(quantized_cost(&smaller).unwrap() <= base);
        }
    }
}
