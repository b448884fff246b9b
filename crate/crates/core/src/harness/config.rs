use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outlier::DEFAULT_SIGMA_MULT;
use crate::quant::Bits;

/// Which weights a configuration quantizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// The four projection linears: in, x, dt, out.
    #[default]
    Mlp,
    /// The projections plus conv kernel, embedding and LM head.
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Scope::Mlp),
            "all" => Ok(Scope::All),
            _ => Err(Error::invalid(format!("unknown scope {s:?}; expected mlp or all"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Mlp => "mlp",
            Scope::All => "all",
        })
    }
}

/// Taps whose outlier channels the zeroing ablation removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationScope {
    /// Output of the input projection only.
    In,
    /// Outputs of all four projection linears.
    #[default]
    All,
}

impl FromStr for AblationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(AblationScope::In),
            "all" => Ok(AblationScope::All),
            _ => Err(Error::invalid(format!("unknown ablation scope {s:?}; expected in or all"))),
        }
    }
}

impl fmt::Display for AblationScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationScope::In => "in",
            AblationScope::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGranularity {
    /// One scale per output channel.
    #[default]
    PerChannel,
    PerTensor,
}

/// One experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigDoc", into = "ConfigDoc")]
pub struct QuantConfig {
    pub wbits: Option<Bits>,
    pub abits: Option<Bits>,
    pub scope: Scope,
    pub smooth_alpha: Option<f32>,
    pub ablate_outliers: bool,
    pub ablate_scope: AblationScope,
    pub sigma_mult: f32,
    pub weights: WeightGranularity,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::fp()
    }
}

impl QuantConfig {
    /// The unquantized baseline.
    pub fn fp() -> Self {
        Self {
            wbits: None,
            abits: None,
            scope: Scope::Mlp,
            smooth_alpha: None,
            ablate_outliers: false,
            ablate_scope: AblationScope::All,
            sigma_mult: DEFAULT_SIGMA_MULT,
            weights: WeightGranularity::PerChannel,
        }
    }

    /// Parse `WnAm` notation (`FP`, `W8`, `W4`, `W8A8`, ...) with a scope.
    pub fn parse(notation: &str, scope: Scope) -> Result<Self> {
        let (wbits, abits) = parse_notation(notation)?;
        Self {
            wbits,
            abits,
            scope,
            ..Self::fp()
        }
        .validated()
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.smooth_alpha = Some(alpha);
        self
    }

    pub fn with_ablation(mut self, scope: AblationScope) -> Self {
        self.ablate_outliers = true;
        self.ablate_scope = scope;
        self
    }

    pub fn validated(self) -> Result<Self> {
        if self.abits.is_some() && self.wbits.is_none() {
            return Err(Error::invalid("activation quantization requires weight bits"));
        }
        if self.abits == Some(Bits::Int4) {
            return Err(Error::invalid("activation bits must be 8"));
        }
        if let Some(a) = self.smooth_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("smoothing alpha {a} outside [0, 1]")));
            }
        }
        if !(self.sigma_mult > 0.0 && self.sigma_mult.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma multiplier {} must be positive",
                self.sigma_mult
            )));
        }
        Ok(self)
    }

    /// `FP`, `W8`, `W8A8`, ...
    pub fn notation(&self) -> String {
        match (self.wbits, self.abits) {
            (None, _) => "FP".to_string(),
            (Some(w), None) => format!("W{}", w.count()),
            (Some(w), Some(a)) => format!("W{}A{}", w.count(), a.count()),
        }
    }

    /// Whether building this configuration needs calibration statistics.
    pub fn needs_stats(&self) -> bool {
        self.abits.is_some() || self.ablate_outliers || self.smooth_alpha.is_some()
    }

    /// The seven-row grid: baseline and W8, W4, W8A8 for both scopes.
    pub fn standard_grid() -> Vec<QuantConfig> {
        let mut out = vec![QuantConfig::fp()];
        for n in ["W8", "W4", "W8A8"] {
            for scope in [Scope::Mlp, Scope::All] {
                out.push(QuantConfig::parse(n, scope).expect("valid notation"));
            }
        }
        out
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.notation())?;
        if self.wbits.is_some() {
            write!(f, " ({})", self.scope)?;
        }
        if let Some(a) = self.smooth_alpha {
            write!(f, " alpha={a}")?;
        }
        if self.ablate_outliers {
            write!(f, " ablate={}", self.ablate_scope)?;
        }
        Ok(())
    }
}

fn parse_notation(s: &str) -> Result<(Option<Bits>, Option<Bits>)> {
    let bad = || Error::invalid(format!("bad quantization notation {s:?}; expected e.g. FP, W8, W4, W8A8"));
    let upper = s.trim().to_ascii_uppercase();
    if matches!(upper.as_str(), "FP" | "FP32" | "NONE" | "BASELINE") {
        return Ok((None, None));
    }
    let rest = upper.strip_prefix('W').ok_or_else(bad)?;
    let (w, a) = match rest.split_once('A') {
        Some((w, a)) => (w, Some(a)),
        None => (rest, None),
    };
    let bits = |t: &str| -> Result<Bits> { Bits::try_from(t.parse::<u8>().map_err(|_| bad())?) };
    Ok((Some(bits(w)?), a.map(bits).transpose()?))
}

/// Wire form used in grid files and reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    config: String,
    #[serde(default)]
    scope: Scope,
    #[serde(default)]
    alpha: Option<f32>,
    #[serde(default)]
    ablate: bool,
    #[serde(default)]
    ablate_scope: AblationScope,
    #[serde(default = "default_sigma")]
    sigma_mult: f32,
    #[serde(default)]
    weights: WeightGranularity,
}

fn default_sigma() -> f32 {
    DEFAULT_SIGMA_MULT
}

impl TryFrom<ConfigDoc> for QuantConfig {
    type Error = Error;

    fn try_from(d: ConfigDoc) -> Result<Self> {
        let (wbits, abits) = parse_notation(&d.config)?;
        QuantConfig {
            wbits,
            abits,
            scope: d.scope,
            smooth_alpha: d.alpha,
            ablate_outliers: d.ablate,
            ablate_scope: d.ablate_scope,
            sigma_mult: d.sigma_mult,
            weights: d.weights,
        }
        .validated()
    }
}

impl From<QuantConfig> for ConfigDoc {
    fn from(c: QuantConfig) -> Self {
        ConfigDoc {
            config: c.notation(),
            scope: c.scope,
            alpha: c.smooth_alpha,
            ablate: c.ablate_outliers,
            ablate_scope: c.ablate_scope,
            sigma_mult: c.sigma_mult,
            weights: c.weights,
        }
    }
}
