//! Energy and emissions accounting for timed workloads.
//!
//! Power is modeled rather than sensed: a constant-wattage [`PowerModel`]
//! turns a measured wall-clock duration into a [`PowerTrace`], which is
//! integrated and multiplied by a regional emission factor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOULES_PER_KWH: f64 = 3.6e6;

/// Batch sizes swept by default.
pub const DEFAULT_BATCH_SIZES: [usize; 3] = [1, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since the start of the run.
    pub t: f64,
    pub p_cpu: f64,
    pub p_gpu: f64,
    pub p_ram: f64,
}

impl PowerSample {
    pub fn total(&self) -> f64 {
        self.p_cpu + self.p_gpu + self.p_ram
    }
}

/// Samples with strictly increasing timestamps and non-negative powers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    samples: Vec<PowerSample>,
}

impl PowerTrace {
    pub fn new(samples: Vec<PowerSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Trace(format!("need at least 2 samples, got {}", samples.len())));
        }
        for (k, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || ![s.p_cpu, s.p_gpu, s.p_ram].iter().all(|p| p.is_finite() && *p >= 0.0) {
                return Err(Error::Trace(format!("sample {k} has a non-finite time or negative power")));
            }
        }
        if let Some(k) = samples.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(Error::Trace(format!("timestamps not increasing at sample {}", k + 1)));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].t - self.samples[0].t
    }

    /// Trapezoidal energy in joules per component: (cpu, gpu, ram).
    pub fn component_joules(&self) -> (f64, f64, f64) {
        let mut e = (0.0, 0.0, 0.0);
        for w in self.samples.windows(2) {
            let dt = w[1].t - w[0].t;
            e.0 += 0.5 * dt * (w[0].p_cpu + w[1].p_cpu);
            e.1 += 0.5 * dt * (w[0].p_gpu + w[1].p_gpu);
            e.2 += 0.5 * dt * (w[0].p_ram + w[1].p_ram);
        }
        e
    }

    pub fn joules(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].total() + w[1].total()))
            .sum()
    }
}

/// Energy of a trace in kWh.
pub fn integrate_energy(trace: &PowerTrace) -> f64 {
    trace.joules() / JOULES_PER_KWH
}

/// kg CO₂ per kWh by region code.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmissionFactorRegistry {
    factors: BTreeMap<String, f64>,
}

impl EmissionFactorRegistry {
    pub fn new(factors: BTreeMap<String, f64>) -> Result<Self> {
        for (region, f) in &factors {
            if !(f.is_finite() && *f > 0.0) {
                return Err(Error::Config(format!("emission factor for {region} must be positive, got {f}")));
            }
        }
        Ok(Self { factors })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::new(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.factors)?)
    }

    /// Six illustrative regions. Edit or replace these; they are not
    /// authoritative grid figures.
    pub fn example() -> Self {
        Self::from_json(include_str!("../data/emission_factors.json")).expect("bundled registry parses")
    }

    pub fn factor(&self, region: &str) -> Result<f64> {
        self.factors
            .get(region)
            .copied()
            .ok_or_else(|| Error::UnknownRegion(region.to_string()))
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        self.factors.keys().map(String::as_str)
    }
}

/// `energy_kwh × factor(region)`.
pub fn emissions(energy_kwh: f64, region: &str, registry: &EmissionFactorRegistry) -> Result<f64> {
    Ok(energy_kwh * registry.factor(region)?)
}

/// Constant component wattages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub cpu_w: f64,
    pub gpu_w: f64,
    pub ram_w: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            cpu_w: 42.5,
            gpu_w: 0.0,
            ram_w: 3.0,
        }
    }
}

impl PowerModel {
    pub fn trace(&self, duration_s: f64) -> Result<PowerTrace> {
        let s = |t| PowerSample {
            t,
            p_cpu: self.cpu_w,
            p_gpu: self.gpu_w,
            p_ram: self.ram_w,
        };
        PowerTrace::new(vec![s(0.0), s(duration_s)])
    }
}

/// A measured wall-clock duration for one method at one batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub model_name: String,
    pub batch_size: usize,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub region: String,
    pub model_name: String,
    pub batch_size: usize,
    pub duration_s: f64,
    pub energy_kwh: f64,
    pub emissions_kg: f64,
    pub emissions_rate_kg_per_s: f64,
    pub cpu_power_w: f64,
    pub gpu_power_w: f64,
    pub ram_power_w: f64,
}

/// Runs each workload once per batch size, one at a time, and records the
/// wall-clock duration.
pub fn measure<F>(workloads: &mut [(String, F)], batch_sizes: &[usize]) -> Result<Vec<Timing>>
where
    F: FnMut(usize) -> Result<()>,
{
    let mut out = Vec::new();
    for (name, run) in workloads.iter_mut() {
        for &b in batch_sizes {
            let start = Instant::now();
            run(b)?;
            out.push(Timing {
                model_name: name.clone(),
                batch_size: b,
                duration_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(out)
}

/// One record per (timing, region). Pure, so recorded timings replay to
/// identical records.
pub fn assemble(
    timings: &[Timing],
    regions: &[String],
    registry: &EmissionFactorRegistry,
    power: &PowerModel,
) -> Result<Vec<EmissionRecord>> {
    let mut out = Vec::with_capacity(timings.len() * regions.len());
    for t in timings {
        let energy = integrate_energy(&power.trace(t.duration_s)?);
        for region in regions {
            let kg = emissions(energy, region, registry)?;
            out.push(EmissionRecord {
                region: region.clone(),
                model_name: t.model_name.clone(),
                batch_size: t.batch_size,
                duration_s: t.duration_s,
                energy_kwh: energy,
                emissions_kg: kg,
                emissions_rate_kg_per_s: kg / t.duration_s,
                cpu_power_w: power.cpu_w,
                gpu_power_w: power.gpu_w,
                ram_power_w: power.ram_w,
            });
        }
    }
    Ok(out)
}

/// [`measure`] followed by [`assemble`].
pub fn sweep<F>(
    workloads: &mut [(String, F)],
    batch_sizes: &[usize],
    regions: &[String],
    registry: &EmissionFactorRegistry,
    power: &PowerModel,
) -> Result<(Vec<Timing>, Vec<EmissionRecord>)>
where
    F: FnMut(usize) -> Result<()>,
{
    let timings = measure(workloads, batch_sizes)?;
    let records = assemble(&timings, regions, registry, power)?;
    Ok((timings, records))
}

/// Mean over regions for each (model, batch size), in first-seen order,
/// labelled with region `"mean"`.
pub fn region_means(records: &[EmissionRecord]) -> Vec<EmissionRecord> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<&EmissionRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.model_name.clone(), r.batch_size);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let k = g.len() as f64;
            let mean = |f: fn(&EmissionRecord) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / k;
            EmissionRecord {
                region: "mean".into(),
                model_name: key.0,
                batch_size: key.1,
                duration_s: mean(|r| r.duration_s),
                energy_kwh: mean(|r| r.energy_kwh),
                emissions_kg: mean(|r| r.emissions_kg),
                emissions_rate_kg_per_s: mean(|r| r.emissions_rate_kg_per_s),
                cpu_power_w: mean(|r| r.cpu_power_w),
                gpu_power_w: mean(|r| r.gpu_power_w),
                ram_power_w: mean(|r| r.ram_power_w),
            }
        })
        .collect()
}

pub fn write_emissions_csv<W: Write>(records: &[EmissionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_emissions_csv<R: Read>(input: R) -> Result<Vec<EmissionRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| Error::Parse {
                row: e.position().map(|p| p.line() as usize).unwrap_or(0),
                column: String::new(),
                msg: e.to_string(),
            })
        })
        .collect()
}
