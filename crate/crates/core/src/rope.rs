//! Rotary position embedding and its long-context extensions.
//!
//! Pairs are interleaved: lanes `(2j, 2j+1)` rotate together by
//! `m * theta_j` where `theta_j = base^(-2j/d)`. The extensions only change
//! how that angle is computed:
//!
//! * `Pi`   - position interpolation, `m` becomes `m / alpha`.
//! * `Ntk`  - NTK-aware scaling, `base` is replaced by a larger base.
//! * `Yarn` - per-pair blend of interpolated and original frequencies through
//!   a ramp over the pair wavelength, plus an attention-logit scale.
//!
//! All angles are computed in f64 on demand.

use std::f64::consts::PI as PI_F64;
use std::fmt;

use crate::error::{Error, Result};

// ── Base configuration ──────────────────────────────────────────────────

/// Head dimension and base frequency shared by every variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    base: f64,
}

impl RopeConfig {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be even and >= 2, got {head_dim}"
            )));
        }
        if !base.is_finite() || base <= 1.0 {
            return Err(Error::Config(format!("base must be > 1, got {base}")));
        }
        Ok(Self { head_dim, base })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Number of rotated lane pairs, `d / 2`.
    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// `base^(-2j/d)`.
    pub fn theta(&self, j: usize) -> Result<f64> {
        self.check_pair(j)?;
        Ok(theta_for_base(self.base, self.head_dim, j))
    }

    fn check_pair(&self, j: usize) -> Result<()> {
        if j >= self.pairs() {
            return Err(Error::Index {
                what: "pair",
                index: j,
                limit: self.pairs(),
            });
        }
        Ok(())
    }
}

fn theta_for_base(base: f64, head_dim: usize, j: usize) -> f64 {
    base.powf(-2.0 * j as f64 / head_dim as f64)
}

// ── Variants ────────────────────────────────────────────────────────────

/// A positional-encoding scheme applied to queries and keys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotaryVariant {
    Rope {
        config: RopeConfig,
    },
    Pi {
        config: RopeConfig,
        alpha: f64,
    },
    Ntk {
        config: RopeConfig,
        new_base: f64,
    },
    /// `ramp_low` and `ramp_high` are wavelength thresholds in tokens. Pairs
    /// whose wavelength is at most `ramp_low` keep their original frequency,
    /// pairs at or above `ramp_high` are fully interpolated.
    Yarn {
        config: RopeConfig,
        alpha: f64,
        ramp_low: f64,
        ramp_high: f64,
        temperature: f64,
    },
}

impl RotaryVariant {
    pub fn rope(config: RopeConfig) -> Self {
        Self::Rope { config }
    }

    pub fn pi(config: RopeConfig, alpha: f64) -> Result<Self> {
        let v = Self::Pi { config, alpha };
        v.validate()?;
        Ok(v)
    }

    pub fn ntk(config: RopeConfig, new_base: f64) -> Result<Self> {
        let v = Self::Ntk { config, new_base };
        v.validate()?;
        Ok(v)
    }

    /// NTK-aware base for stretching the context by `scale`:
    /// `base * scale^(d / (d - 2))`, which divides the lowest frequency by
    /// exactly `scale` while leaving `theta_0` untouched.
    pub fn ntk_for_scale(config: RopeConfig, scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale < 1.0 {
            return Err(Error::InvalidVariant(format!(
                "ntk scale must be >= 1, got {scale}"
            )));
        }
        let d = config.head_dim as f64;
        let new_base = if config.head_dim == 2 {
            config.base
        } else {
            config.base * scale.powf(d / (d - 2.0))
        };
        Self::ntk(config, new_base)
    }

    pub fn yarn(
        config: RopeConfig,
        alpha: f64,
        ramp_low: f64,
        ramp_high: f64,
        temperature: f64,
    ) -> Result<Self> {
        let v = Self::Yarn {
            config,
            alpha,
            ramp_low,
            ramp_high,
            temperature,
        };
        v.validate()?;
        Ok(v)
    }

    /// YaRN with the usual defaults for a model trained on
    /// `original_context` tokens: full interpolation for wavelengths of at
    /// least one context, none below 1/32 of a context, and logit scale
    /// `0.1 * ln(alpha) + 1`.
    pub fn yarn_default(config: RopeConfig, alpha: f64, original_context: usize) -> Result<Self> {
        if original_context == 0 {
            return Err(Error::InvalidVariant(
                "yarn original context must be positive".into(),
            ));
        }
        if !alpha.is_finite() || alpha < 1.0 {
            return Err(Error::InvalidVariant(format!(
                "yarn alpha must be >= 1, got {alpha}"
            )));
        }
        let l = original_context as f64;
        Self::yarn(config, alpha, l / 32.0, l, default_yarn_temperature(alpha))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Rope { .. } => Ok(()),
            Self::Pi { alpha, .. } => check_alpha(alpha),
            Self::Ntk { config, new_base } => {
                if !new_base.is_finite() || new_base < config.base {
                    return Err(Error::InvalidVariant(format!(
                        "ntk new_base {new_base} must be >= original base {}",
                        config.base
                    )));
                }
                Ok(())
            }
            Self::Yarn {
                alpha,
                ramp_low,
                ramp_high,
                temperature,
                ..
            } => {
                check_alpha(alpha)?;
                if !(ramp_low.is_finite() && ramp_high.is_finite())
                    || ramp_low <= 0.0
                    || ramp_low >= ramp_high
                {
                    return Err(Error::InvalidVariant(format!(
                        "yarn ramp needs 0 < ramp_low < ramp_high, got {ramp_low}..{ramp_high}"
                    )));
                }
                if !temperature.is_finite() || temperature <= 0.0 {
                    return Err(Error::InvalidVariant(format!(
                        "yarn temperature must be > 0, got {temperature}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn config(&self) -> RopeConfig {
        match *self {
            Self::Rope { config }
            | Self::Pi { config, .. }
            | Self::Ntk { config, .. }
            | Self::Yarn { config, .. } => config,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.config().head_dim
    }

    /// Same scheme on a different head dimension, keeping every other knob.
    pub fn with_head_dim(&self, head_dim: usize) -> Result<Self> {
        let config = RopeConfig::new(head_dim, self.config().base)?;
        let mut v = *self;
        match &mut v {
            Self::Rope { config: c }
            | Self::Pi { config: c, .. }
            | Self::Ntk { config: c, .. }
            | Self::Yarn { config: c, .. } => *c = config,
        }
        v.validate()?;
        Ok(v)
    }

    /// Short stable name used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Rope { .. } => "rope",
            Self::Pi { .. } => "pi",
            Self::Ntk { .. } => "ntk",
            Self::Yarn { .. } => "yarn",
        }
    }

    /// YaRN ramp weight for pair `j`: 1 keeps the original frequency, 0 is
    /// fully interpolated. Linear in rotations-per-context between the two
    /// wavelength thresholds. Other variants report 1.
    pub fn ramp_weight(&self, j: usize) -> Result<f64> {
        let config = self.config();
        let theta = config.theta(j)?;
        Ok(match *self {
            Self::Yarn {
                ramp_low,
                ramp_high,
                ..
            } => yarn_ramp(theta, ramp_low, ramp_high),
            _ => 1.0,
        })
    }

    /// Pair frequency before any position rescaling: the original `θ_j` for
    /// Rope and Pi, the rebased one for Ntk, the blended one for Yarn.
    pub fn frequency(&self, j: usize) -> Result<f64> {
        let config = self.config();
        let theta = config.theta(j)?;
        Ok(match *self {
            Self::Rope { .. } | Self::Pi { .. } => theta,
            Self::Ntk { new_base, .. } => theta_for_base(new_base, config.head_dim, j),
            Self::Yarn {
                alpha,
                ramp_low,
                ramp_high,
                ..
            } => {
                let r = yarn_ramp(theta, ramp_low, ramp_high);
                (1.0 - r) * (theta / alpha) + r * theta
            }
        })
    }

    /// Rotation angle for pair `j` at position `m`.
    pub fn effective_angle(&self, m: usize, j: usize) -> Result<f64> {
        let config = self.config();
        let theta = config.theta(j)?;
        let m = m as f64;
        Ok(match *self {
            Self::Rope { .. } => m * theta,
            Self::Pi { alpha, .. } => (m / alpha) * theta,
            Self::Ntk { new_base, .. } => m * theta_for_base(new_base, config.head_dim, j),
            Self::Yarn {
                alpha,
                ramp_low,
                ramp_high,
                ..
            } => {
                let r = yarn_ramp(theta, ramp_low, ramp_high);
                if r == 0.0 {
                    (m / alpha) * theta
                } else if r == 1.0 {
                    m * theta
                } else {
                    m * ((1.0 - r) * (theta / alpha) + r * theta)
                }
            }
        })
    }

    /// Rotates `h` as a fresh vector.
    pub fn rotate(&self, h: &[f64], m: usize) -> Result<Vec<f64>> {
        let mut out = h.to_vec();
        self.rotate_in_place(&mut out, m)?;
        Ok(out)
    }

    pub fn rotate_in_place(&self, h: &mut [f64], m: usize) -> Result<()> {
        let d = self.head_dim();
        if h.len() != d {
            return Err(Error::Shape(format!(
                "hidden vector has {} lanes, variant expects {d}",
                h.len()
            )));
        }
        for j in 0..d / 2 {
            let (sin, cos) = self.effective_angle(m, j)?.sin_cos();
            let (a, b) = (h[2 * j], h[2 * j + 1]);
            h[2 * j] = a * cos - b * sin;
            h[2 * j + 1] = b * cos + a * sin;
        }
        Ok(())
    }

    /// Multiplier on attention logits. Only defined for YaRN.
    pub fn yarn_attention_scale(&self) -> Result<f64> {
        match *self {
            Self::Yarn { temperature, .. } => Ok(1.0 / temperature),
            _ => Err(Error::InvalidVariant(format!(
                "attention scale is only defined for yarn, not {}",
                self.kind()
            ))),
        }
    }

    /// Logit multiplier used by attention: the YaRN scale, or 1.
    pub fn logit_scale(&self) -> f64 {
        self.yarn_attention_scale().unwrap_or(1.0)
    }

    /// `(sin, cos)` for every pair at each position, row-major
    /// `[positions.len(), d/2]`.
    pub fn rotation_table(&self, positions: &[usize]) -> RotationTable {
        let pairs = self.config().pairs();
        let mut sin_cos = Vec::with_capacity(positions.len() * pairs);
        for &m in positions {
            for j in 0..pairs {
                // j < pairs by construction
                let angle = self.effective_angle(m, j).expect("pair in range");
                sin_cos.push(angle.sin_cos());
            }
        }
        RotationTable { pairs, sin_cos }
    }
}

impl fmt::Display for RotaryVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Rope { config } => write!(f, "rope(d={},b={})", config.head_dim, config.base),
            Self::Pi { config, alpha } => {
                write!(f, "pi(d={},b={},alpha={alpha})", config.head_dim, config.base)
            }
            Self::Ntk { config, new_base } => write!(
                f,
                "ntk(d={},b={},new_base={new_base})",
                config.head_dim, config.base
            ),
            Self::Yarn {
                config,
                alpha,
                ramp_low,
                ramp_high,
                temperature,
            } => write!(
                f,
                "yarn(d={},b={},alpha={alpha},ramp={ramp_low}..{ramp_high},t={temperature})",
                config.head_dim, config.base
            ),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 1.0 {
        return Err(Error::InvalidVariant(format!(
            "alpha must be >= 1, got {alpha}"
        )));
    }
    Ok(())
}

/// `1 / t = 0.1 * ln(alpha) + 1`, returned as `t`.
pub fn default_yarn_temperature(alpha: f64) -> f64 {
    1.0 / (0.1 * alpha.ln() + 1.0)
}

fn yarn_ramp(theta: f64, ramp_low: f64, ramp_high: f64) -> f64 {
    let wavelength = 2.0 * PI_F64 / theta;
    let r = (ramp_high / wavelength - 1.0) / (ramp_high / ramp_low - 1.0);
    r.clamp(0.0, 1.0)
}

// ── Precomputed rotations ───────────────────────────────────────────────

/// Per-position `(sin, cos)` pairs for one forward pass.
#[derive(Debug, Clone)]
pub struct RotationTable {
    pairs: usize,
    sin_cos: Vec<(f64, f64)>,
}

impl RotationTable {
    pub fn len(&self) -> usize {
        self.sin_cos.len() / self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.sin_cos.is_empty()
    }

    fn row(&self, i: usize) -> &[(f64, f64)] {
        &self.sin_cos[i * self.pairs..(i + 1) * self.pairs]
    }

    /// Rotates the vector at table row `i` forward.
    pub fn apply(&self, i: usize, h: &mut [f64]) {
        for (j, &(sin, cos)) in self.row(i).iter().enumerate() {
            let (a, b) = (h[2 * j], h[2 * j + 1]);
            h[2 * j] = a * cos - b * sin;
            h[2 * j + 1] = b * cos + a * sin;
        }
    }

    /// Applies the transpose (inverse) rotation, used to pull gradients back.
    pub fn apply_inverse(&self, i: usize, h: &mut [f64]) {
        for (j, &(sin, cos)) in self.row(i).iter().enumerate() {
            let (a, b) = (h[2 * j], h[2 * j + 1]);
            h[2 * j] = a * cos + b * sin;
            h[2 * j + 1] = b * cos - a * sin;
        }
    }
}

// ── Hidden vectors ──────────────────────────────────────────────────────

/// Finite lanes of one head, interpreted as interleaved pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenVector(Vec<f64>);

impl HiddenVector {
    pub fn new(lanes: Vec<f64>) -> Result<Self> {
        if lanes.is_empty() || !lanes.len().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "hidden vector needs an even, non-zero lane count, got {}",
                lanes.len()
            )));
        }
        if lanes.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("hidden vector has non-finite lanes".into()));
        }
        Ok(Self(lanes))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn rotated(&self, variant: &RotaryVariant, m: usize) -> Result<Self> {
        variant.rotate(&self.0, m).map(Self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, b: f64) -> RopeConfig {
        RopeConfig::new(d, b).unwrap()
    }

    #[test]
    fn theta_examples() {
        assert_eq!(cfg(4, 10_000.0).theta(0).unwrap(), 1.0);
        assert!((cfg(4, 10_000.0).theta(1).unwrap() - 0.01).abs() < 1e-15);
        assert!((cfg(4, 1_000_000.0).theta(1).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(
            cfg(4, 10_000.0).theta(2),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn config_rejects_bad_inputs() {
        assert!(RopeConfig::new(3, 10_000.0).is_err());
        assert!(RopeConfig::new(0, 10_000.0).is_err());
        assert!(RopeConfig::new(4, 1.0).is_err());
        assert!(RopeConfig::new(4, f64::NAN).is_err());
    }

    #[test]
    fn variant_invariants() {
        let c = cfg(8, 10_000.0);
        assert!(RotaryVariant::pi(c, 0.5).is_err());
        assert!(RotaryVariant::ntk(c, 5_000.0).is_err());
        assert!(RotaryVariant::yarn(c, 4.0, 10.0, 10.0, 1.0).is_err());
        assert!(RotaryVariant::yarn(c, 4.0, 1.0, 10.0, 0.0).is_err());
        assert!(RotaryVariant::pi(c, 1.0).is_ok());
        assert!(RotaryVariant::ntk(c, 10_000.0).is_ok());
    }

    #[test]
    fn angle_examples() {
        let rope = RotaryVariant::rope(cfg(4, 10_000.0));
        assert_eq!(rope.effective_angle(0, 0).unwrap(), 0.0);
        let pi = RotaryVariant::pi(cfg(4, 10_000.0), 16.0).unwrap();
        assert_eq!(pi.effective_angle(16, 0).unwrap(), 1.0);
        assert_eq!(
            pi.effective_angle(16, 0).unwrap(),
            rope.effective_angle(1, 0).unwrap()
        );
        let ntk = RotaryVariant::ntk(cfg(4, 10_000.0), 1_000_000.0).unwrap();
        assert_eq!(ntk.effective_angle(1, 0).unwrap(), 1.0);
    }

    #[test]
    fn rotate_examples() {
        let rope = RotaryVariant::rope(cfg(2, 10_000.0));
        let out = rope.rotate(&[1.0, 0.0], 1).unwrap();
        assert!((out[0] - 1f64.cos()).abs() < 1e-15);
        assert!((out[1] - 1f64.sin()).abs() < 1e-15);
        assert!((out[0] - 0.5403).abs() < 1e-4 && (out[1] - 0.8415).abs() < 1e-4);

        let h = [0.3, -1.2, 0.7, 2.0];
        let rope4 = RotaryVariant::rope(cfg(4, 10_000.0));
        let pi2 = RotaryVariant::pi(cfg(4, 10_000.0), 2.0).unwrap();
        assert_eq!(rope4.rotate(&h, 0).unwrap(), h.to_vec());
        assert_eq!(pi2.rotate(&h, 4).unwrap(), rope4.rotate(&h, 2).unwrap());
        assert!(matches!(rope4.rotate(&h[..2], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn yarn_scale_examples() {
        let c = cfg(8, 10_000.0);
        let y1 = RotaryVariant::yarn(c, 4.0, 4.0, 128.0, 1.0).unwrap();
        assert_eq!(y1.yarn_attention_scale().unwrap(), 1.0);
        let y2 = RotaryVariant::yarn(c, 4.0, 4.0, 128.0, 2.0).unwrap();
        assert_eq!(y2.yarn_attention_scale().unwrap(), 0.5);
        let y16 = RotaryVariant::yarn_default(c, 16.0, 128).unwrap();
        let expected = 0.1 * 16f64.ln() + 1.0;
        assert!((y16.yarn_attention_scale().unwrap() - expected).abs() < 1e-12);
        assert!((y16.yarn_attention_scale().unwrap() - 1.2773).abs() < 1e-4);
        assert!(matches!(
            RotaryVariant::rope(c).yarn_attention_scale(),
            Err(Error::InvalidVariant(_))
        ));
    }

    #[test]
    fn yarn_ramp_endpoints() {
        // d=8, b=10000: wavelengths 2pi, 20pi, 200pi, 2000pi.
        let y = RotaryVariant::yarn(cfg(8, 10_000.0), 4.0, 10.0, 1000.0, 1.0).unwrap();
        assert_eq!(y.ramp_weight(0).unwrap(), 1.0);
        assert_eq!(y.ramp_weight(3).unwrap(), 0.0);
        let mid = y.ramp_weight(1).unwrap();
        let expected = (1000.0 / (20.0 * PI_F64) - 1.0) / (100.0 - 1.0);
        assert!((mid - expected).abs() < 1e-12);
    }

    #[test]
    fn ntk_for_scale_divides_lowest_frequency() {
        let c = cfg(8, 10_000.0);
        let ntk = RotaryVariant::ntk_for_scale(c, 4.0).unwrap();
        let lowest = ntk.effective_angle(1, 3).unwrap();
        assert!((lowest - c.theta(3).unwrap() / 4.0).abs() < 1e-15);
        assert_eq!(ntk.effective_angle(5, 0).unwrap(), 5.0);
    }

    #[test]
    fn table_matches_rotate() {
        let v = RotaryVariant::yarn_default(cfg(8, 500.0), 4.0, 64).unwrap();
        let positions = [0, 3, 17, 200];
        let table = v.rotation_table(&positions);
        let h = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
        for (i, &m) in positions.iter().enumerate() {
            let mut a = h;
            table.apply(i, &mut a);
            assert_eq!(a.to_vec(), v.rotate(&h, m).unwrap());
            table.apply_inverse(i, &mut a);
            for (x, y) in a.iter().zip(h) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hidden_vector_checks() {
        assert!(HiddenVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(HiddenVector::new(vec![1.0]).is_err());
        let h = HiddenVector::new(vec![1.0, 0.0]).unwrap();
        let r = h
            .rotated(&RotaryVariant::rope(cfg(2, 10_000.0)), 0)
            .unwrap();
        assert_eq!(r, h);
    }
}
