//! Energy and CO₂-equivalent accounting for training runs.
//!
//! Converts per-run joules to kWh, computes savings between model variants,
//! and applies a grid emission factor to express those savings in grams of
//! CO₂ equivalent. All arithmetic is plain f64; regenerating a report from
//! the same samples is byte-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOULES_PER_KWH: f64 = 3_600_000.0;

#[derive(Debug, Error)]
pub enum GreenError {
    #[error("energy must be nonnegative, got {0} J")]
    NegativeEnergy(f64),
    #[error("wall time must be nonnegative, got {0} s")]
    NegativeWallTime(f64),
    #[error("device power must be positive, got {0} W")]
    NonPositivePower(f64),
    #[error("baseline energy must be positive, got {0} J")]
    NonPositiveBaseline(f64),
    #[error("emission factor must be positive, got {0} kg CO2e/kWh")]
    NonPositiveEmissionFactor(f64),
    #[error("report has no row for baseline variant '{0}'")]
    MissingBaseline(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergySourceKind {
    /// Joules supplied by an external meter or profiler.
    Measured,
    /// Joules estimated as wall time × an assumed device power.
    Estimated,
}

/// One run's energy figure with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub run_id: String,
    pub joules: f64,
    pub source: EnergySourceKind,
    pub wall_seconds: f64,
    pub assumed_power_watts: Option<f64>,
}

impl EnergySample {
    pub fn measured(run_id: &str, joules: f64, wall_seconds: f64) -> Result<Self, GreenError> {
        if joules < 0.0 {
            return Err(GreenError::NegativeEnergy(joules));
        }
        if wall_seconds < 0.0 {
            return Err(GreenError::NegativeWallTime(wall_seconds));
        }
        Ok(Self {
            run_id: run_id.to_string(),
            joules,
            source: EnergySourceKind::Measured,
            wall_seconds,
            assumed_power_watts: None,
        })
    }

    /// Estimation mode: joules are wall_seconds × power by construction.
    pub fn estimated(run_id: &str, wall_seconds: f64, power_watts: f64) -> Result<Self, GreenError> {
        if wall_seconds < 0.0 {
            return Err(GreenError::NegativeWallTime(wall_seconds));
        }
        if power_watts <= 0.0 {
            return Err(GreenError::NonPositivePower(power_watts));
        }
        Ok(Self {
            run_id: run_id.to_string(),
            joules: wall_seconds * power_watts,
            source: EnergySourceKind::Estimated,
            wall_seconds,
            assumed_power_watts: Some(power_watts),
        })
    }
}

/// Grid-average greenhouse-gas intensity of electricity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionFactor {
    /// kg CO₂e per kWh.
    pub value: f64,
    pub region_year_label: String,
}

impl EmissionFactor {
    pub fn new(value: f64, region_year_label: &str) -> Result<Self, GreenError> {
        if value <= 0.0 {
            return Err(GreenError::NonPositiveEmissionFactor(value));
        }
        Ok(Self {
            value,
            region_year_label: region_year_label.to_string(),
        })
    }
}

impl Default for EmissionFactor {
    fn default() -> Self {
        Self {
            value: 0.166,
            region_year_label: "EU grid 2023".to_string(),
        }
    }
}

/// j / 3,600,000.
pub fn joules_to_kwh(joules: f64) -> Result<f64, GreenError> {
    if joules < 0.0 {
        return Err(GreenError::NegativeEnergy(joules));
    }
    Ok(joules / JOULES_PER_KWH)
}

/// Absolute per-run energy difference in kWh.
pub fn delta_energy(e_baseline_kwh: f64, e_other_kwh: f64) -> f64 {
    (e_baseline_kwh - e_other_kwh).abs()
}

/// Avoided emissions in grams CO₂e for an energy delta in kWh.
pub fn co2_equivalent_grams(delta_kwh: f64, ef: &EmissionFactor) -> f64 {
    delta_kwh * ef.value * 1000.0
}

/// 100·(E_baseline − E_variant)/E_baseline, in percent.
pub fn efficiency_gain_percent(e_baseline_j: f64, e_variant_j: f64) -> Result<f64, GreenError> {
    if e_baseline_j <= 0.0 {
        return Err(GreenError::NonPositiveBaseline(e_baseline_j));
    }
    Ok(100.0 * (e_baseline_j - e_variant_j) / e_baseline_j)
}

/// One variant's row in the green report. Savings are expressed against the
/// next-larger variant in the report's order, mirroring how the annual
/// savings are read off a size-ordered table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenRow {
    pub variant: String,
    pub run_id: String,
    pub joules: f64,
    pub kwh: f64,
    pub source: EnergySourceKind,
    pub wall_seconds: f64,
    pub assumed_power_watts: Option<f64>,
    pub savings_vs_next_larger_kwh: Option<f64>,
    pub co2e_savings_grams: Option<f64>,
    pub efficiency_gain_vs_baseline_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenReport {
    pub schema_version: u32,
    pub emission_factor: EmissionFactor,
    /// Annual figures assume this many training runs per year.
    pub runs_per_year: u32,
    pub baseline_variant: String,
    pub rows: Vec<GreenRow>,
}

impl GreenReport {
    /// Build a report from `(variant, sample)` pairs ordered from smallest
    /// to largest model. The baseline variant anchors the efficiency-gain
    /// column; savings pair each variant with the next-larger one.
    pub fn from_samples(
        samples: &[(String, EnergySample)],
        baseline_variant: &str,
        ef: &EmissionFactor,
    ) -> Result<Self, GreenError> {
        let baseline = samples
            .iter()
            .find(|(variant, _)| variant == baseline_variant)
            .ok_or_else(|| GreenError::MissingBaseline(baseline_variant.to_string()))?;
        let baseline_joules = baseline.1.joules;
        if baseline_joules <= 0.0 {
            return Err(GreenError::NonPositiveBaseline(baseline_joules));
        }

        let mut rows = Vec::with_capacity(samples.len());
        for (i, (variant, sample)) in samples.iter().enumerate() {
            let kwh = joules_to_kwh(sample.joules)?;
            let (savings, co2e) = match samples.get(i + 1) {
                Some((_, larger)) => {
                    let delta = delta_energy(joules_to_kwh(larger.joules)?, kwh);
                    (Some(delta), Some(co2_equivalent_grams(delta, ef)))
                }
                None => (None, None),
            };
            rows.push(GreenRow {
                variant: variant.clone(),
                run_id: sample.run_id.clone(),
                joules: sample.joules,
                kwh,
                source: sample.source,
                wall_seconds: sample.wall_seconds,
                assumed_power_watts: sample.assumed_power_watts,
                savings_vs_next_larger_kwh: savings,
                co2e_savings_grams: co2e,
                efficiency_gain_vs_baseline_percent: efficiency_gain_percent(
                    baseline_joules,
                    sample.joules,
                )?,
            });
        }
        Ok(Self {
            schema_version: 1,
            emission_factor: ef.clone(),
            runs_per_year: 1,
            baseline_variant: baseline_variant.to_string(),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,run_id,joules,kwh,source,wall_seconds,assumed_power_watts,\
             savings_vs_next_larger_kwh,co2e_savings_grams,efficiency_gain_vs_baseline_percent\n",
        );
        for row in &self.rows {
            let source = match row.source {
                EnergySourceKind::Measured => "measured",
                EnergySourceKind::Estimated => "estimated",
            };
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                row.variant,
                row.run_id,
                row.joules,
                row.kwh,
                source,
                row.wall_seconds,
                opt(row.assumed_power_watts),
                opt(row.savings_vs_next_larger_kwh),
                opt(row.co2e_savings_grams),
                row.efficiency_gain_vs_baseline_percent,
            ));
        }
        out
    }
}
