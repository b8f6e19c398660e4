//! Binary cross-entropy and soft-Dice objectives with analytic gradients.
//!
//! Both operate on one sample at a time. BCE is averaged over pixels; Dice uses
//! sums over all pixels of the sample with `+1` smoothing, so an empty
//! prediction of an empty mask scores a loss of zero.

use serde::{Deserialize, Serialize};

use crate::tensor::{sigmoid, Tensor, TensorError};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "bcel", alias = "bce")]
    Bce,
    #[serde(rename = "dice", alias = "dl")]
    Dice,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Bce => "BCEL",
            LossKind::Dice => "DL",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bcel",
            LossKind::Dice => "dice",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bcel" | "bce" => Ok(LossKind::Bce),
            "dice" | "dl" => Ok(LossKind::Dice),
            other => Err(format!("unknown loss kind {other:?} (expected bcel or dice)")),
        }
    }
}

/// Scalar loss together with its gradient with respect to the prediction
/// (probabilities or logits, depending on which entry point produced it).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

fn check_shapes(p: &Tensor, y: &Tensor) -> Result<(), TensorError> {
    if p.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            axis: "prediction/target",
            expected: p.len(),
            found: y.len(),
        });
    }
    Ok(())
}

pub fn bce_loss(p: &Tensor, y: &Tensor) -> Result<LossValue, TensorError> {
    check_shapes(p, y)?;
    let n = p.len() as f64;
    let mut total = 0.0;
    let grad = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pi, &yi)| {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
            (pc - yi) / (pc * (1.0 - pc)) / n
        })
        .collect();
    Ok(LossValue {
        value: total / n,
        grad: Tensor::new(p.shape().to_vec(), grad)?,
    })
}

struct DiceSums {
    intersection: f64,
    target: f64,
    prediction: f64,
}

impl DiceSums {
    fn new(p: &[f64], y: &[f64]) -> Self {
        let mut s = DiceSums {
            intersection: 0.0,
            target: 0.0,
            prediction: 0.0,
        };
        for (&pi, &yi) in p.iter().zip(y) {
            s.intersection += yi * pi;
            s.target += yi;
            s.prediction += pi;
        }
        s
    }

    fn numerator(&self) -> f64 {
        2.0 * self.intersection + 1.0
    }

    fn denominator(&self) -> f64 {
        self.target + self.prediction + 1.0
    }

    fn loss(&self) -> f64 {
        1.0 - self.numerator() / self.denominator()
    }

    /// ∂loss/∂p_i = -(2·y_i·den - num) / den²
    fn grad(&self, yi: f64) -> f64 {
        let den = self.denominator();
        -(2.0 * yi * den - self.numerator()) / (den * den)
    }
}

pub fn dice_loss(p: &Tensor, y: &Tensor) -> Result<LossValue, TensorError> {
    check_shapes(p, y)?;
    let sums = DiceSums::new(p.data(), y.data());
    let grad = y.data().iter().map(|&yi| sums.grad(yi)).collect();
    Ok(LossValue {
        value: sums.loss(),
        grad: Tensor::new(p.shape().to_vec(), grad)?,
    })
}

pub fn loss(kind: LossKind, p: &Tensor, y: &Tensor) -> Result<LossValue, TensorError> {
    match kind {
        LossKind::Bce => bce_loss(p, y),
        LossKind::Dice => dice_loss(p, y),
    }
}

/// `ln σ(z)` and `ln(1 - σ(z))` without overflow.
fn log_sigmoid_pair(z: f64) -> (f64, f64) {
    // ln σ(z) = -softplus(-z), ln(1-σ(z)) = -softplus(z)
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    (-softplus(-z), -softplus(z))
}

/// σ(z)·(1 - σ(z)) computed from `e^{-|z|}` so it underflows cleanly to zero.
fn sigmoid_slope(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Sigmoid followed by the chosen loss, fused for stability. The returned
/// gradient is with respect to the logits.
///
/// Values and gradients agree with `loss(kind, sigmoid(z), y)` chained through
/// the sigmoid, including the BCE probability clamp.
pub fn loss_from_logits(logits: &Tensor, y: &Tensor, kind: LossKind) -> Result<LossValue, TensorError> {
    check_shapes(logits, y)?;
    match kind {
        LossKind::Bce => {
            let n = logits.len() as f64;
            let lo = (BCE_EPS / (1.0 - BCE_EPS)).ln();
            let hi = -lo;
            let mut total = 0.0;
            let grad = logits
                .data()
                .iter()
                .zip(y.data())
                .map(|(&z, &yi)| {
                    if (lo..=hi).contains(&z) {
                        let (log_p, log_q) = log_sigmoid_pair(z);
                        total -= yi * log_p + (1.0 - yi) * log_q;
                        (sigmoid(z) - yi) / n
                    } else {
                        // The clamp is active: loss is flat in p, but the chain
                        // through the sigmoid still carries the clamped slope.
                        let pc = sigmoid(z).clamp(BCE_EPS, 1.0 - BCE_EPS);
                        total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
                        (pc - yi) / (pc * (1.0 - pc)) / n * sigmoid_slope(z)
                    }
                })
                .collect();
            Ok(LossValue {
                value: total / n,
                grad: Tensor::new(logits.shape().to_vec(), grad)?,
            })
        }
        LossKind::Dice => {
            let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
            let sums = DiceSums::new(&p, y.data());
            let grad = logits
                .data()
                .iter()
                .zip(y.data())
                .map(|(&z, &yi)| sums.grad(yi) * sigmoid_slope(z))
                .collect();
            Ok(LossValue {
                value: sums.loss(),
                grad: Tensor::new(logits.shape().to_vec(), grad)?,
            })
        }
    }
}
