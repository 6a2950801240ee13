//! Tail-aware selection: `s_a = y_reg,a + ln(cap) 1[logit_a >= 0] + rho_a`,
//! chosen algorithm `argmin_a s_a` with ties to the lowest index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{argmin, TailPrior};

/// Which terms of the score are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Regression + catastrophe penalty + tail prior.
    #[default]
    Full,
    /// Regression + catastrophe penalty.
    NoPrior,
    /// Regression + tail prior.
    NoCatastrophe,
    /// Regression output alone.
    RegressionOnly,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 4] = [
        SelectionMode::Full,
        SelectionMode::NoPrior,
        SelectionMode::NoCatastrophe,
        SelectionMode::RegressionOnly,
    ];

    pub fn uses_catastrophe(self) -> bool {
        matches!(self, SelectionMode::Full | SelectionMode::NoPrior)
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, SelectionMode::Full | SelectionMode::NoCatastrophe)
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Full => "full",
            SelectionMode::NoPrior => "no-prior",
            SelectionMode::NoCatastrophe => "no-catastrophe",
            SelectionMode::RegressionOnly => "regression-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: usize,
    pub scores: Vec<f64>,
    /// `sigmoid(logit)` per algorithm; empty without a catastrophe head.
    pub catastrophe_probability: Vec<f64>,
    /// Algorithms that received the catastrophe penalty.
    pub penalized: Vec<bool>,
}

/// Scores every algorithm and returns the argmin.
///
/// The catastrophe threshold `sigmoid(logit) >= 0.5` is evaluated as
/// `logit >= 0`. A missing logit vector drops the penalty term.
pub fn select(
    y_reg: &[f64],
    y_cat_logits: Option<&[f64]>,
    prior: &TailPrior,
    cap: f64,
    mode: SelectionMode,
) -> Result<SelectionResult> {
    let a = y_reg.len();
    if a == 0 {
        return Err(Error::Input("empty regression output".into()));
    }
    if y_cat_logits.is_some_and(|l| l.len() != a) || prior.rho.len() != a {
        return Err(Error::Input(format!(
            "portfolio size mismatch: {a} regression outputs, {} logits, {} prior entries",
            y_cat_logits.map_or(0, <[f64]>::len),
            prior.rho.len()
        )));
    }
    let logits = y_cat_logits.filter(|_| mode.uses_catastrophe());
    if logits.is_some() && !(cap > 1.0) {
        return Err(Error::Input(format!("catastrophe penalty needs cap > 1, got {cap}")));
    }
    let penalty = cap.ln();
    let penalized: Vec<bool> = match logits {
        Some(l) => l.iter().map(|&x| x >= 0.0).collect(),
        None => vec![false; a],
    };
    let scores: Vec<f64> = (0..a)
        .map(|i| {
            let mut s = y_reg[i];
            if penalized[i] {
                s += penalty;
            }
            if mode.uses_prior() {
                s += prior.rho[i];
            }
            s
        })
        .collect();
    Ok(SelectionResult {
        chosen: argmin(&scores),
        scores,
        catastrophe_probability: y_cat_logits
            .map(|l| l.iter().map(|&x| crate::autodiff::sigmoid(x)).collect())
            .unwrap_or_default(),
        penalized,
    })
}
