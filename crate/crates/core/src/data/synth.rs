use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SampleRow, FAULT_TYPES, FEATURES, RESISTANCE_IDS, WINDOW, ZONES};
use crate::error::{Error, Result};

/// Knobs of the synthetic fault generator. The defaults are the frozen,
/// tuned values; changing them changes the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Rows for every `(fault_type, zone)` cell unless `counts` is given.
    pub rows_per_cell: usize,
    /// Optional `[fault_type][zone]` row counts.
    pub counts: Option<Vec<Vec<usize>>>,
    pub noise_scale: f64,
    /// Spread of the per-class mean signature.
    pub class_separation: f64,
    /// Spread of the per-zone mean shift.
    pub zone_separation: f64,
    /// Amplitude of the class sinusoids.
    pub oscillation: f64,
    pub ar_coefficient: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rows_per_cell: 276,
            counts: None,
            noise_scale: 1.0,
            class_separation: 0.35,
            zone_separation: 0.6,
            oscillation: 1.0,
            ar_coefficient: 0.6,
        }
    }
}

impl GeneratorConfig {
    pub fn cell_rows(&self, fault: usize, zone: usize) -> usize {
        match &self.counts {
            Some(c) => c[fault][zone],
            None => self.rows_per_cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.counts {
            if c.len() != FAULT_TYPES || c.iter().any(|z| z.len() != ZONES) {
                return Err(Error::Parameter(format!(
                    "counts must be a {FAULT_TYPES}×{ZONES} table"
                )));
            }
        }
        for f in 0..FAULT_TYPES {
            for z in 0..ZONES {
                if self.cell_rows(f, z) == 0 {
                    return Err(Error::Parameter(format!("cell ({f}, {z}) has no rows")));
                }
            }
        }
        let finite = [
            self.noise_scale,
            self.class_separation,
            self.zone_separation,
            self.oscillation,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("generator scales must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::Parameter("ar_coefficient must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

struct ClassSignature {
    mean: Vec<f64>,
    amp: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Rows ordered by `(fault_type, zone)`; inside a cell the series is one
/// continuous signal, with a fresh resistance level every `WINDOW` rows.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Vec<SampleRow>> {
    cfg.validate()?;
    let mut structure = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes: Vec<ClassSignature> = (0..FAULT_TYPES)
        .map(|c| {
            // each class owns a base frequency; channels mix it with its octave
            let base = 0.03 + 0.02 * c as f64;
            ClassSignature {
                mean: (0..FEATURES).map(|_| cfg.class_separation * normal(&mut structure)).collect(),
                amp: (0..FEATURES)
                    .map(|_| cfg.oscillation * structure.gen_range(0.5..1.5))
                    .collect(),
                freq: (0..FEATURES)
                    .map(|f| base * if f % 3 == 0 { 2.0 } else { 1.0 })
                    .collect(),
                phase: (0..FEATURES)
                    .map(|_| structure.gen_range(0.0..std::f64::consts::TAU))
                    .collect(),
            }
        })
        .collect();
    let zone_shift: Vec<Vec<f64>> = (0..ZONES)
        .map(|_| (0..FEATURES).map(|_| cfg.zone_separation * normal(&mut structure)).collect())
        .collect();
    let zone_noise: Vec<f64> = (0..ZONES).map(|z| cfg.noise_scale * (0.8 + 0.15 * z as f64)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let phi = cfg.ar_coefficient;
    let innov = (1.0 - phi * phi).sqrt();
    let mut rows = Vec::new();
    for (c, sig) in classes.iter().enumerate() {
        for z in 0..ZONES {
            let n = cfg.cell_rows(c, z);
            let mut noise: Vec<f64> = (0..FEATURES).map(|_| normal(&mut rng)).collect();
            let mut resistance = 0;
            let mut gain = 1.0;
            for t in 0..n {
                if t % WINDOW == 0 {
                    resistance = rng.gen_range(0..RESISTANCE_IDS);
                    gain = 0.7 + 0.6 * resistance as f64 / (RESISTANCE_IDS - 1) as f64;
                }
                let features = (0..FEATURES)
                    .map(|f| {
                        noise[f] = phi * noise[f] + innov * normal(&mut rng);
                        let wave = (std::f64::consts::TAU * sig.freq[f] * t as f64 + sig.phase[f]).sin();
                        let v = gain * (sig.mean[f] + sig.amp[f] * wave) + zone_shift[z][f] + zone_noise[z] * noise[f];
                        v as f32
                    })
                    .collect();
                rows.push(SampleRow {
                    features,
                    fault_type: c,
                    zone: z,
                    resistance_id: resistance,
                });
            }
        }
    }
    Ok(rows)
}
