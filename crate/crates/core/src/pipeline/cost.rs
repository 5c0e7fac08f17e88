//! Latency model calibrated against reference per-stage measurements.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Fp16,
    Fp8,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(Self::Fp16),
            "fp8" => Ok(Self::Fp8),
            _ => Err(Error::UnknownProfile(s.to_string())),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fp16 => "fp16",
            Self::Fp8 => "fp8",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibRow {
    pub name: String,
    pub variant: String,
    pub profile: Profile,
    pub keep_ratio: Option<f64>,
    pub patches: f64,
    pub vit_ms: f64,
    pub input_tokens: f64,
    pub prefill_ms: f64,
    pub extend_one_ms: f64,
    pub decode_ms: f64,
    pub selection_ms: Option<f64>,
    pub total_ms: f64,
    pub speedup: f64,
    pub accuracy: f64,
}

impl CalibRow {
    pub fn speculative(&self) -> bool {
        matches!(self.variant.as_str(), "eagle" | "litevlm")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fp8Multipliers {
    pub vit: f64,
    pub prefill: f64,
    pub decode: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostCalibration {
    pub generated_tokens: f64,
    pub accepted_per_iteration: f64,
    pub selection_ms: f64,
    pub fp8_multipliers: Fp8Multipliers,
    pub rows: Vec<CalibRow>,
}

/// Counters the latency model consumes; averages are fine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyInputs {
    pub patches: f64,
    pub input_tokens: f64,
    pub generated_tokens: f64,
    pub iterations: f64,
    pub speculative: bool,
    pub selection: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub vit_ms: f64,
    pub prefill_ms: f64,
    /// Decode latency per generated token.
    pub extend_one_ms: f64,
    pub decode_ms: f64,
    pub selection_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Extrapolate {
    Linear,
    Clamp,
}

/// Piecewise-linear curve through sorted, de-duplicated points.
#[derive(Debug, Clone)]
struct Curve {
    pts: Vec<(f64, f64)>,
    mode: Extrapolate,
}

impl Curve {
    fn new(mut pts: Vec<(f64, f64)>, mode: Extrapolate) -> Result<Self> {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 == b.0);
        if pts.is_empty() {
            return Err(Error::Config("calibration curve has no points".into()));
        }
        Ok(Self { pts, mode })
    }

    fn at(&self, x: f64) -> f64 {
        let p = &self.pts;
        if p.len() == 1 {
            return p[0].1;
        }
        let seg = |i: usize| {
            let ((x0, y0), (x1, y1)) = (p[i], p[i + 1]);
            y0 + (x - x0) * (y1 - y0) / (x1 - x0)
        };
        if x <= p[0].0 {
            return if self.mode == Extrapolate::Clamp { p[0].1 } else { seg(0) };
        }
        let last = p.len() - 1;
        if x >= p[last].0 {
            return if self.mode == Extrapolate::Clamp { p[last].1 } else { seg(last - 1) };
        }
        let i = p.windows(2).position(|w| x >= w[0].0 && x <= w[1].0).expect("x inside range");
        seg(i)
    }
}

impl CostCalibration {
    /// The calibration shipped with the crate.
    pub fn shipped() -> Self {
        Self::from_json(include_str!("../../data/latency_calibration.json")).expect("valid calibration")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.generated_tokens <= 0.0 || c.accepted_per_iteration < 1.0 {
            return Err(Error::Config("calibration token statistics out of range".into()));
        }
        c.fp16_row("baseline")?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    fn fp16_row(&self, variant: &str) -> Result<&CalibRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.profile == Profile::Fp16)
            .ok_or_else(|| Error::Config(format!("calibration lacks an fp16 {variant} row")))
    }

    pub fn baseline_total_ms(&self) -> f64 {
        self.fp16_row("baseline").map(|r| r.total_ms).unwrap_or(f64::NAN)
    }

    fn rows_of(&self, profile: Profile) -> impl Iterator<Item = &CalibRow> {
        self.rows.iter().filter(move |r| r.profile == profile)
    }

    /// Per-generated-token decode cost of a row.
    fn per_token(&self, r: &CalibRow) -> f64 {
        r.decode_ms / self.generated_tokens
    }

    fn fp16_curves(&self, speculative: bool) -> Result<[Curve; 3]> {
        let rows: Vec<&CalibRow> = self.rows_of(Profile::Fp16).collect();
        let vit = Curve::new(rows.iter().map(|r| (r.patches, r.vit_ms)).collect(), Extrapolate::Linear)?;
        let prefill = Curve::new(rows.iter().map(|r| (r.input_tokens, r.prefill_ms)).collect(), Extrapolate::Clamp)?;
        let decode = Curve::new(
            rows.iter()
                .filter(|r| r.speculative() == speculative)
                .map(|r| (r.input_tokens, self.per_token(r)))
                .collect(),
            Extrapolate::Clamp,
        )?;
        Ok([vit, prefill, decode])
    }

    /// Ratio fp8/fp16 per stage: fitted at the fp8 measurement when the
    /// calibration has one for this decode mode, the nominal multiplier
    /// otherwise.
    fn fp8_factors(&self, speculative: bool, fp16: &[Curve; 3]) -> [f64; 3] {
        let m = self.fp8_multipliers;
        let mut f = [1.0 / m.vit, 1.0 / m.prefill, 1.0 / m.decode];
        if let Some(r) = self.rows_of(Profile::Fp8).next() {
            f[0] = r.vit_ms / fp16[0].at(r.patches);
            f[1] = r.prefill_ms / fp16[1].at(r.input_tokens);
        }
        if let Some(r) = self.rows_of(Profile::Fp8).find(|r| r.speculative() == speculative) {
            f[2] = self.per_token(r) / fp16[2].at(r.input_tokens);
        }
        f
    }

    pub fn model_latency(&self, m: &LatencyInputs, profile: Profile) -> Result<StageLatency> {
        let curves = self.fp16_curves(m.speculative)?;
        let f = match profile {
            Profile::Fp16 => [1.0; 3],
            Profile::Fp8 => self.fp8_factors(m.speculative, &curves),
        };
        let vit_ms = curves[0].at(m.patches) * f[0];
        let prefill_ms = curves[1].at(m.input_tokens) * f[1];
        let per_token = curves[2].at(m.input_tokens) * f[2];
        let decode_ms = if m.speculative {
            m.iterations * per_token * self.accepted_per_iteration
        } else {
            m.generated_tokens * per_token
        };
        let selection_ms = if m.selection { self.selection_ms } else { 0.0 };
        Ok(StageLatency {
            vit_ms,
            prefill_ms,
            extend_one_ms: if m.generated_tokens > 0.0 { decode_ms / m.generated_tokens } else { per_token },
            decode_ms,
            selection_ms,
            total_ms: vit_ms + prefill_ms + decode_ms + selection_ms,
        })
    }

    /// The counters of a calibration row, with decode iterations implied by
    /// the calibrated acceptance for speculative rows.
    pub fn row_inputs(&self, r: &CalibRow) -> LatencyInputs {
        let g = self.generated_tokens;
        LatencyInputs {
            patches: r.patches,
            input_tokens: r.input_tokens,
            generated_tokens: g,
            iterations: if r.speculative() { g / self.accepted_per_iteration } else { g },
            speculative: r.speculative(),
            selection: r.selection_ms.is_some(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_reproduces_its_total() {
        let c = CostCalibration::shipped();
        for r in &c.rows {
            let l = c.model_latency(&c.row_inputs(r), r.profile).unwrap();
            assert!((l.vit_ms - r.vit_ms).abs() < 1e-9, "{} vit {}", r.name, l.vit_ms);
            assert!((l.prefill_ms - r.prefill_ms).abs() < 1e-9, "{} prefill", r.name);
            assert!((l.decode_ms - r.decode_ms).abs() < 1e-9, "{} decode", r.name);
            assert!((l.total_ms - r.total_ms).abs() < 1e-9, "{} total {}", r.name, l.total_ms);
            assert!((l.extend_one_ms - r.extend_one_ms).abs() < 0.1, "{} extend", r.name);
        }
    }

    #[test]
    fn curves_interpolate_and_extrapolate() {
        let c = Curve::new(vec![(12.0, 136.9), (3.5, 45.1), (12.0, 136.9)], Extrapolate::Linear).unwrap();
        assert!((c.at(7.75) - (45.1 + 136.9) / 2.0).abs() < 1e-9);
        assert!(c.at(1.0) < 45.1);
        let c = Curve::new(vec![(858.0, 54.2), (3214.0, 163.2)], Extrapolate::Clamp).unwrap();
        assert_eq!(c.at(100.0), 54.2);
        assert_eq!(c.at(5000.0), 163.2);
    }

    #[test]
    fn fp8_is_cheaper_and_profiles_parse() {
        let c = CostCalibration::shipped();
        let m = c.row_inputs(&c.rows[0]);
        let a = c.model_latency(&m, Profile::Fp16).unwrap();
        let b = c.model_latency(&m, Profile::Fp8).unwrap();
        assert!(b.total_ms < a.total_ms);
        assert!((a.decode_ms / b.decode_ms - 1.6).abs() < 1e-9);
        assert_eq!("FP8".parse::<Profile>().unwrap(), Profile::Fp8);
        assert!(matches!("int4".parse::<Profile>(), Err(Error::UnknownProfile(_))));
    }
}
