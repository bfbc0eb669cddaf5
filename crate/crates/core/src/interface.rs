//! The attention interface: how the effective spatial attention at each
//! decode step is derived from the model's own attention and an external one.

use std::fmt;

use crate::error::{Error, Result};

/// Simplex tolerance used by every attention contract.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector over the `L` image regions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector(Vec<f64>);

impl AttentionVector {
    /// Validates that `weights` is a simplex: entries in `[0, 1]`, sum 1 within 1e-9.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights)?;
        Ok(Self(weights))
    }

    /// Wraps without validation; callers guarantee the simplex property.
    pub(crate) fn new_unchecked(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every entry strictly inside `(0, 1]` (exactly 1 only when `L == 1`).
    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&w| w > 0.0)
    }
}

/// Checks the simplex contract on a raw slice.
pub fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Contract("empty attention vector".into()));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::Contract(format!("attention weight {bad} outside [0, 1]")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("attention sums to {sum}, not 1")));
    }
    Ok(())
}

/// `1/L` everywhere.
pub fn uniform_attention(l: usize) -> Result<AttentionVector> {
    if l == 0 {
        return Err(Error::Domain("uniform attention over zero regions".into()));
    }
    Ok(AttentionVector(vec![1.0 / l as f64; l]))
}

/// Which rule governs the attention at each decode step.
#[derive(Clone, Debug, PartialEq)]
pub enum InterfaceMethod {
    /// The model's own attention.
    SelfAttending,
    /// The external vector at every step.
    Unlimited(AttentionVector),
    /// The external vector for steps `t <= steps` (1-based), then the model's.
    Limited { alpha: AttentionVector, steps: usize },
    /// `(α_model + φ·α_ext) / (φ + 1)` at every step.
    Additive { alpha: AttentionVector, phi: f64 },
    /// `1/L` at every step.
    ControlUniform,
}

impl InterfaceMethod {
    pub fn additive(alpha: AttentionVector, phi: f64) -> Result<Self> {
        if !phi.is_finite() || phi < 0.0 {
            return Err(Error::Domain(format!("additive weight {phi} must be finite and >= 0")));
        }
        Ok(Self::Additive { alpha, phi })
    }

    /// Short label used in reports: `self`, `unlimited`, `limited-6`, `additive-3`, `control`.
    pub fn label(&self) -> String {
        match self {
            Self::SelfAttending => "self".into(),
            Self::Unlimited(_) => "unlimited".into(),
            Self::Limited { steps, .. } => format!("limited-{steps}"),
            Self::Additive { phi, .. } => format!("additive-{}", format_phi(*phi)),
            Self::ControlUniform => "control".into(),
        }
    }

    pub fn external(&self) -> Option<&AttentionVector> {
        match self {
            Self::Unlimited(a) | Self::Limited { alpha: a, .. } | Self::Additive { alpha: a, .. } => Some(a),
            Self::SelfAttending | Self::ControlUniform => None,
        }
    }

    /// Coefficient of the model's attention inside the effective attention at
    /// step `t`; the derivative used when backpropagating through the interface.
    pub fn model_weight(&self, t: usize) -> f64 {
        match self {
            Self::SelfAttending => 1.0,
            Self::Unlimited(_) | Self::ControlUniform => 0.0,
            Self::Limited { steps, .. } => {
                if t <= *steps {
                    0.0
                } else {
                    1.0
                }
            }
            Self::Additive { phi, .. } => 1.0 / (phi + 1.0),
        }
    }
}

fn format_phi(phi: f64) -> String {
    if phi.fract() == 0.0 {
        format!("{}", phi as i64)
    } else {
        format!("{phi}")
    }
}

/// Method specification without the external vector, as selected on the
/// command line or in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MethodSpec {
    SelfAttending,
    Unlimited,
    Limited(usize),
    Additive(f64),
    Control,
}

impl MethodSpec {
    /// Bind an external vector (ignored by `SelfAttending` and `Control`).
    pub fn bind(self, alpha: Option<&AttentionVector>) -> Result<InterfaceMethod> {
        let need = || {
            alpha
                .cloned()
                .ok_or_else(|| Error::Domain(format!("method {self} needs an external attention vector")))
        };
        Ok(match self {
            Self::SelfAttending => InterfaceMethod::SelfAttending,
            Self::Control => InterfaceMethod::ControlUniform,
            Self::Unlimited => InterfaceMethod::Unlimited(need()?),
            Self::Limited(steps) => InterfaceMethod::Limited { alpha: need()?, steps },
            Self::Additive(phi) => InterfaceMethod::additive(need()?, phi)?,
        })
    }

    pub fn needs_external(self) -> bool {
        !matches!(self, Self::SelfAttending | Self::Control)
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SelfAttending => write!(f, "self"),
            Self::Unlimited => write!(f, "unlimited"),
            Self::Limited(i) => write!(f, "limited-{i}"),
            Self::Additive(phi) => write!(f, "additive-{}", format_phi(*phi)),
            Self::Control => write!(f, "control"),
        }
    }
}

impl serde::Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = Error;

    /// Parses the labels produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("unknown method {s:?}"));
        match s {
            "self" => Ok(Self::SelfAttending),
            "unlimited" => Ok(Self::Unlimited),
            "control" => Ok(Self::Control),
            _ => {
                if let Some(i) = s.strip_prefix("limited-") {
                    i.parse().map(Self::Limited).map_err(|_| bad())
                } else if let Some(phi) = s.strip_prefix("additive-") {
                    let phi: f64 = phi.parse().map_err(|_| bad())?;
                    if !phi.is_finite() || phi < 0.0 {
                        return Err(bad());
                    }
                    Ok(Self::Additive(phi))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// The attention actually used at step `t` (1-based).
pub fn effective_attention(
    t: usize,
    alpha_model: &[f64],
    method: &InterfaceMethod,
) -> Result<AttentionVector> {
    check_simplex(alpha_model)?;
    if let Some(ext) = method.external() {
        if ext.len() != alpha_model.len() {
            return Err(Error::Dimension(format!(
                "external attention has {} regions, model attention {}",
                ext.len(),
                alpha_model.len()
            )));
        }
    }
    Ok(effective_attention_unchecked(t, alpha_model, method))
}

pub(crate) fn effective_attention_unchecked(
    t: usize,
    alpha_model: &[f64],
    method: &InterfaceMethod,
) -> AttentionVector {
    let out = match method {
        InterfaceMethod::SelfAttending => alpha_model.to_vec(),
        InterfaceMethod::Unlimited(ext) => ext.0.clone(),
        InterfaceMethod::Limited { alpha, steps } => {
            if t <= *steps {
                alpha.0.clone()
            } else {
                alpha_model.to_vec()
            }
        }
        InterfaceMethod::Additive { alpha, phi } => {
            let denom = phi + 1.0;
            alpha_model
                .iter()
                .zip(&alpha.0)
                .map(|(m, e)| (m + phi * e) / denom)
                .collect()
        }
        InterfaceMethod::ControlUniform => vec![1.0 / alpha_model.len() as f64; alpha_model.len()],
    };
    AttentionVector(out)
}
