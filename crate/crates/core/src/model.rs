//! Dose-response mean functions.
//!
//! Every family is written in the form `θ0 + θ1 · f0(d; θ_nl)` where possible,
//! with the nonlinear shape parameters last in `theta`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interior constant of the linear-in-log model `θ0 + θ1 log(5d + 1)`.
pub const LINLOG_SCALE: f64 = 5.0;

/// Branch point of the double-logistic family.
pub const DOUBLE_LOGISTIC_SPLIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Emax,
    LinearLog,
    Linear,
    Quadratic,
    Logistic,
    Exponential,
    DoubleLogistic,
    Step,
    TruncatedLogistic,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 9] = [
        ModelFamily::Emax,
        ModelFamily::LinearLog,
        ModelFamily::Linear,
        ModelFamily::Quadratic,
        ModelFamily::Logistic,
        ModelFamily::Exponential,
        ModelFamily::DoubleLogistic,
        ModelFamily::Step,
        ModelFamily::TruncatedLogistic,
    ];

    pub fn arity(self) -> usize {
        match self {
            ModelFamily::Emax => 3,
            ModelFamily::LinearLog => 2,
            ModelFamily::Linear => 2,
            ModelFamily::Quadratic => 3,
            ModelFamily::Logistic => 4,
            ModelFamily::Exponential => 3,
            ModelFamily::DoubleLogistic => 8,
            ModelFamily::Step => 3,
            ModelFamily::TruncatedLogistic => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelFamily::Emax => "emax",
            ModelFamily::LinearLog => "linear_log",
            ModelFamily::Linear => "linear",
            ModelFamily::Quadratic => "quadratic",
            ModelFamily::Logistic => "logistic",
            ModelFamily::Exponential => "exponential",
            ModelFamily::DoubleLogistic => "double_logistic",
            ModelFamily::Step => "step",
            ModelFamily::TruncatedLogistic => "truncated_logistic",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            ModelFamily::Emax => "E0 + Emax*d/(ED50 + d)",
            ModelFamily::LinearLog => "t0 + t1*log(5d + 1)",
            ModelFamily::Linear => "t0 + t1*d",
            ModelFamily::Quadratic => "t0 + t1*d + t2*d^2",
            ModelFamily::Logistic => "E0 + Emax/(1 + exp((ED50 - d)/delta))",
            ModelFamily::Exponential => "E0 + E1*exp(d/delta)",
            ModelFamily::DoubleLogistic => {
                "[a1 + b1/(1+exp(s1(m1-d)))] I(d<=0.5) + [a2 + b2/(1+exp(s2(d-m2)))] I(d>0.5)"
            }
            ModelFamily::Step => "offset + jump*I(d >= threshold)",
            ModelFamily::TruncatedLogistic => "E0 + Emax/(1 + exp((ED50 - d)/delta))",
        }
    }

    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            ModelFamily::Emax => &["e0", "emax", "ed50"],
            ModelFamily::LinearLog | ModelFamily::Linear => &["theta0", "theta1"],
            ModelFamily::Quadratic => &["theta0", "theta1", "theta2"],
            ModelFamily::Logistic | ModelFamily::TruncatedLogistic => &["e0", "emax", "ed50", "delta"],
            ModelFamily::Exponential => &["e0", "e1", "delta"],
            ModelFamily::DoubleLogistic => &["a1", "b1", "s1", "m1", "a2", "b2", "s2", "m2"],
            ModelFamily::Step => &["offset", "jump", "threshold"],
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| Error::contract(format!("unknown model family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseModel {
    family: ModelFamily,
    theta: Vec<f64>,
}

impl DoseResponseModel {
    /// Validates arity, finiteness and the positivity constraints of the
    /// user-facing parameterisation (ED50 > 0, slopes > 0).
    pub fn new(family: ModelFamily, theta: Vec<f64>) -> Result<Self> {
        let model = Self::unchecked(family, theta)?;
        let t = &model.theta;
        let positive = |idx: usize, name: &str| -> Result<()> {
            if t[idx] > 0.0 {
                Ok(())
            } else {
                Err(Error::contract(format!("{family}: {name} must be positive, got {}", t[idx])))
            }
        };
        match family {
            ModelFamily::Emax => positive(2, "ED50")?,
            ModelFamily::Logistic | ModelFamily::TruncatedLogistic => {
                positive(2, "ED50")?;
                positive(3, "delta")?;
            }
            ModelFamily::Exponential => positive(2, "delta")?,
            _ => {}
        }
        Ok(model)
    }

    /// Arity and finiteness only. Fitted Emax models may carry a negative ED50.
    pub(crate) fn unchecked(family: ModelFamily, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != family.arity() {
            return Err(Error::contract(format!(
                "{family} takes {} parameters, got {}",
                family.arity(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("{family}: parameters must be finite")));
        }
        if family == ModelFamily::Emax && theta[2] == 0.0 {
            return Err(Error::contract("emax: ED50 must be nonzero"));
        }
        Ok(Self { family, theta })
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn evaluate(&self, d: f64) -> f64 {
        let t = &self.theta;
        match self.family {
            ModelFamily::Emax => t[0] + t[1] * d / (t[2] + d),
            ModelFamily::LinearLog => t[0] + t[1] * (LINLOG_SCALE * d + 1.0).ln(),
            ModelFamily::Linear => t[0] + t[1] * d,
            ModelFamily::Quadratic => t[0] + t[1] * d + t[2] * d * d,
            ModelFamily::Logistic | ModelFamily::TruncatedLogistic => {
                t[0] + t[1] / (1.0 + ((t[2] - d) / t[3]).exp())
            }
            ModelFamily::Exponential => t[0] + t[1] * (d / t[2]).exp(),
            ModelFamily::DoubleLogistic => {
                if d <= DOUBLE_LOGISTIC_SPLIT {
                    t[0] + t[1] / (1.0 + (t[2] * (t[3] - d)).exp())
                } else {
                    t[4] + t[5] / (1.0 + (t[6] * (d - t[7])).exp())
                }
            }
            ModelFamily::Step => {
                if d >= t[2] {
                    t[0] + t[1]
                } else {
                    t[0]
                }
            }
        }
    }

    pub fn evaluate_at(&self, doses: &[f64]) -> Vec<f64> {
        doses.iter().map(|&d| self.evaluate(d)).collect()
    }
}

impl fmt::Display for DoseResponseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.family)?;
        for (i, v) in self.theta.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(")")
    }
}

/// Preset models: the five standard candidates and the eight simulation truths.
pub mod catalog {
    use super::{DoseResponseModel, ModelFamily};

    pub const DOSES: [f64; 5] = [0.0, 0.05, 0.20, 0.60, 1.00];
    pub const SIGMA: f64 = 1.478;

    fn model(family: ModelFamily, theta: &[f64]) -> DoseResponseModel {
        DoseResponseModel::new(family, theta.to_vec()).expect("catalog parameters are valid")
    }

    pub fn emax() -> DoseResponseModel {
        model(ModelFamily::Emax, &[0.2, 0.7, 0.2])
    }

    pub fn linear_log() -> DoseResponseModel {
        model(ModelFamily::LinearLog, &[0.2, 0.6 / 6f64.ln()])
    }

    pub fn linear() -> DoseResponseModel {
        model(ModelFamily::Linear, &[0.2, 0.6])
    }

    pub fn quadratic() -> DoseResponseModel {
        model(ModelFamily::Quadratic, &[0.2, 2.049, -1.749])
    }

    pub fn logistic() -> DoseResponseModel {
        model(ModelFamily::Logistic, &[0.193, 0.607, 0.4, 0.09])
    }

    /// Emax, linear-log, linear, quadratic, logistic, in that order.
    pub fn candidates() -> Vec<DoseResponseModel> {
        vec![emax(), linear_log(), linear(), quadratic(), logistic()]
    }

    pub const TRUE_MODEL_NAMES: [&str; 8] = [
        "emax2",
        "emax3",
        "exponential1",
        "exponential2",
        "quadratic2",
        "double_logistic",
        "step",
        "truncated_logistic",
    ];

    pub fn true_model(name: &str) -> Option<DoseResponseModel> {
        let m = match name {
            "emax2" => model(ModelFamily::Emax, &[0.2, 0.6, 0.1]),
            "emax3" => model(ModelFamily::Emax, &[0.2, 0.55, 0.01]),
            "exponential1" => model(ModelFamily::Exponential, &[0.183, 0.017, 1.0 / (2.0 * 6f64.ln())]),
            "exponential2" => model(ModelFamily::Exponential, &[0.19924, 0.00076, 0.15]),
            "quadratic2" => model(ModelFamily::Quadratic, &[0.2, 2.4, -2.4]),
            "double_logistic" => model(
                ModelFamily::DoubleLogistic,
                &[0.198, 0.61, 18.0, 0.3, 0.499, 0.309, 18.0, 0.7],
            ),
            "step" => model(ModelFamily::Step, &[0.2, 0.6, 0.6]),
            "truncated_logistic" => model(ModelFamily::TruncatedLogistic, &[0.2, 0.682, 0.8, 0.1]),
            "flat" => flat(0.2),
            _ => return None,
        };
        Some(m)
    }

    /// Constant mean: the global null hypothesis.
    pub fn flat(level: f64) -> DoseResponseModel {
        model(ModelFamily::Linear, &[level, 0.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn emax2_profile_at_design_doses() {
        let m = catalog::true_model("emax2").unwrap();
        let got: Vec<f64> = m.evaluate_at(&catalog::DOSES).into_iter().map(round2).collect();
        assert_eq!(got, vec![0.20, 0.40, 0.60, 0.71, 0.75]);
    }

    #[test]
    fn boundary_conventions() {
        assert_eq!(catalog::linear().evaluate(0.0), 0.2);
        let step = catalog::true_model("step").unwrap();
        assert!((step.evaluate(0.6) - 0.8).abs() < 1e-15);
        assert!((step.evaluate(0.5999) - 0.2).abs() < 1e-15);
        let dl = catalog::true_model("double_logistic").unwrap();
        let left = 0.198 + 0.61 / (1.0 + (18.0f64 * (0.3 - 0.5)).exp());
        assert_eq!(dl.evaluate(0.5), left);
        // near-continuous at the branch point
        assert!((dl.evaluate(0.5) - dl.evaluate(0.5 + 1e-12)).abs() < 0.01);
    }

    #[test]
    fn arity_is_checked() {
        assert!(DoseResponseModel::new(ModelFamily::Emax, vec![0.0, 1.0]).is_err());
        assert!(DoseResponseModel::new(ModelFamily::Emax, vec![0.0, 1.0, -0.1]).is_err());
        assert!(DoseResponseModel::new(ModelFamily::Logistic, vec![0.0, 1.0, 0.3, 0.0]).is_err());
        assert!(DoseResponseModel::unchecked(ModelFamily::Emax, vec![0.0, 1.0, -0.1]).is_ok());
    }

    #[test]
    fn family_tags_round_trip() {
        for f in ModelFamily::ALL {
            assert_eq!(f.tag().parse::<ModelFamily>().unwrap(), f);
            assert_eq!(f.parameter_names().len(), f.arity());
        }
    }

    fn closed_form(name: &str, d: f64) -> f64 {
        let i = |c: bool| if c { 1.0 } else { 0.0 };
        match name {
            "emax" => 0.2 + 0.7 * d / (0.2 + d),
            "linear_log" => 0.2 + 0.6 / 6f64.ln() * (5.0 * d + 1.0).ln(),
            "linear" => 0.2 + 0.6 * d,
            "quadratic" => 0.2 + 2.049 * d - 1.749 * d * d,
            "logistic" => 0.193 + 0.607 / (1.0 + ((0.4 - d) / 0.09).exp()),
            "exponential1" => 0.183 + 0.017 * (2.0 * d * 6f64.ln()).exp(),
            "double_logistic" => {
                (0.198 + 0.61 / (1.0 + (18.0 * (0.3 - d)).exp())) * i(d <= 0.5)
                    + (0.499 + 0.309 / (1.0 + (18.0 * (d - 0.7)).exp())) * i(d > 0.5)
            }
            "step" => 0.2 + 0.6 * i(d >= 0.6),
            "truncated_logistic" => 0.2 + 0.682 / (1.0 + (10.0 * (0.8 - d)).exp()),
            _ => unreachable!(),
        }
    }

    proptest! {
        #[test]
        fn matches_closed_forms(d in 0.0f64..1.0) {
            let models = [
                ("emax", catalog::emax()),
                ("linear_log", catalog::linear_log()),
                ("linear", catalog::linear()),
                ("quadratic", catalog::quadratic()),
                ("logistic", catalog::logistic()),
                ("exponential1", catalog::true_model("exponential1").unwrap()),
                ("double_logistic", catalog::true_model("double_logistic").unwrap()),
                ("step", catalog::true_model("step").unwrap()),
                ("truncated_logistic", catalog::true_model("truncated_logistic").unwrap()),
            ];
            for (name, m) in models {
                let want = closed_form(name, d);
                let got = m.evaluate(d);
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{name} at {d}: {got} vs {want}");
            }
        }
    }
}
