//! From a building's power series to a heterogeneous ensemble and its stage costs.

use std::io::{Read, Write};

use chrono::{DateTime, FixedOffset, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{project_to_interior_simplex, StochasticMatrix, DEFAULT_INTERIOR_EPS};
use crate::solver::{StageCosts, UnitProfile};

/// Power level (kW) of each Markov state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StatePowerMap(Vec<f64>);

impl StatePowerMap {
    pub fn new(power: Vec<f64>) -> Result<Self> {
        if power.is_empty() {
            return invalid("power map is empty");
        }
        if let Some(p) = power.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return invalid(format!("state power {p} must be finite and non-negative"));
        }
        Ok(StatePowerMap(power))
    }

    pub fn power(&self) -> &[f64] {
        &self.0
    }

    pub fn states(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for StatePowerMap {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        StatePowerMap::new(v)
    }
}

impl From<StatePowerMap> for Vec<f64> {
    fn from(m: StatePowerMap) -> Self {
        m.0
    }
}

/// Metered power samples with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSeries {
    timestamps: Vec<DateTime<FixedOffset>>,
    power_kw: Vec<f64>,
}

impl PowerSeries {
    pub fn new(timestamps: Vec<DateTime<FixedOffset>>, power_kw: Vec<f64>) -> Result<Self> {
        if timestamps.len() != power_kw.len() {
            return invalid(format!("{} timestamps for {} readings", timestamps.len(), power_kw.len()));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return invalid(format!("timestamps not strictly increasing at row {}", w + 1));
        }
        if let Some(p) = power_kw.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return invalid(format!("power reading {p} must be finite and non-negative"));
        }
        Ok(PowerSeries { timestamps, power_kw })
    }

    /// Evenly spaced synthetic timestamps; handy when only the readings matter.
    pub fn from_readings(power_kw: Vec<f64>) -> Result<Self> {
        let start = DateTime::parse_from_rfc3339("2000-01-01T00:00:00Z").expect("valid literal");
        let timestamps = (0..power_kw.len())
            .map(|k| start + chrono::Duration::minutes(15 * k as i64))
            .collect();
        PowerSeries::new(timestamps, power_kw)
    }

    pub fn power_kw(&self) -> &[f64] {
        &self.power_kw
    }

    pub fn timestamps(&self) -> &[DateTime<FixedOffset>] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.power_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power_kw.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binning {
    #[default]
    EqualWidth,
    Quantile,
}

/// Maps readings to states `0..S`, nondecreasing in power.
///
/// Equal-width bins split `[min, max]` evenly and report bin centers. Quantile
/// bins hold (nearly) equal counts and report the median of their members;
/// when there are at most `S` distinct readings each gets its own state.
pub fn discretize_power(series: &PowerSeries, states: usize, binning: Binning) -> Result<(Vec<usize>, StatePowerMap)> {
    if series.len() < 2 {
        return invalid("power series needs at least 2 readings");
    }
    if states < 2 {
        return invalid(format!("need at least 2 states, got {states}"));
    }
    let x = series.power_kw();
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    match binning {
        Binning::EqualWidth => {
            if hi <= lo {
                return Err(Error::DegenerateBins(format!("constant series at {lo} kW")));
            }
            let width = (hi - lo) / states as f64;
            let seq = x
                .iter()
                .map(|&v| (((v - lo) / width).floor() as usize).min(states - 1))
                .collect();
            let centers = (0..states).map(|k| lo + (k as f64 + 0.5) * width).collect();
            Ok((seq, StatePowerMap::new(centers)?))
        }
        Binning::Quantile => {
            let mut sorted = x.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mut distinct = sorted.clone();
            distinct.dedup();
            // upper edges (inclusive) of each bin
            let edges: Vec<f64> = if distinct.len() <= states {
                distinct.clone()
            } else {
                let n = sorted.len();
                (1..=states).map(|k| sorted[(k * n).div_ceil(states) - 1]).collect()
            };
            let state_of = |v: f64| edges.partition_point(|&e| e < v).min(states - 1);
            let seq: Vec<usize> = x.iter().map(|&v| state_of(v)).collect();
            let mut members = vec![Vec::new(); states];
            for &v in &sorted {
                members[state_of(v)].push(v);
            }
            let power = members
                .iter()
                .enumerate()
                .map(|(k, m)| match m.len() {
                    0 => *edges.get(k).unwrap_or(&hi),
                    len if len % 2 == 1 => m[len / 2],
                    len => 0.5 * (m[len / 2 - 1] + m[len / 2]),
                })
                .collect();
            Ok((seq, StatePowerMap::new(power)?))
        }
    }
}

/// Laplace-smoothed transition counts: `(count(i -> j) + alpha) / (count(i -> .) + alpha S)`.
pub fn estimate_transition_matrix(states: &[usize], state_count: usize, alpha: f64) -> Result<StochasticMatrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("smoothing must be positive, got {alpha}"));
    }
    if state_count < 2 {
        return invalid(format!("need at least 2 states, got {state_count}"));
    }
    if let Some(s) = states.iter().find(|&&s| s >= state_count) {
        return invalid(format!("state {s} out of range for {state_count} states"));
    }
    let mut counts = vec![vec![0.0; state_count]; state_count];
    for w in states.windows(2) {
        counts[w[0]][w[1]] += 1.0;
    }
    let rows = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum::<f64>() + alpha * state_count as f64;
            row.into_iter().map(|c| (c + alpha) / total).collect()
        })
        .collect();
    StochasticMatrix::from_rows(rows)
}

/// Adds uniform `[0, magnitude]` noise to every entry, then projects each row
/// onto the interior of the simplex. Magnitude zero returns `base` untouched.
pub fn perturb_default(base: &StochasticMatrix, magnitude: f64, seed: u64) -> Result<StochasticMatrix> {
    perturb_with(base, magnitude, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn perturb_with(base: &StochasticMatrix, magnitude: f64, rng: &mut ChaCha8Rng) -> Result<StochasticMatrix> {
    if !(0.0..1.0).contains(&magnitude) {
        return invalid(format!("noise magnitude must lie in [0, 1), got {magnitude}"));
    }
    if base.as_slice().iter().any(|&p| p <= 0.0) {
        return invalid("base matrix must be interior");
    }
    if magnitude == 0.0 {
        return Ok(base.clone());
    }
    let rows = base
        .rows()
        .map(|row| {
            let noisy: Vec<f64> = row.iter().map(|p| p + rng.random_range(0.0..=magnitude)).collect();
            project_to_interior_simplex(&noisy, DEFAULT_INTERIOR_EPS).map(|p| p.into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    StochasticMatrix::from_rows(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub units: usize,
    pub noise_magnitude: f64,
    pub gamma_range: [f64; 2],
    pub seed: u64,
    /// Draw a fresh discomfort weight for every stage instead of one per state.
    #[serde(default)]
    pub resample_gamma_per_stage: bool,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.gamma_range;
        if self.units == 0 {
            return invalid("ensemble needs at least one unit");
        }
        if !(0.0..1.0).contains(&self.noise_magnitude) {
            return invalid(format!("noise magnitude must lie in [0, 1), got {}", self.noise_magnitude));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return invalid(format!("gamma range [{lo}, {hi}] must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// `spec.units` profiles over `stages` decision stages, each with one
/// perturbed copy of `base` reused at every stage.
pub fn generate_ensemble(base: &StochasticMatrix, spec: &EnsembleSpec, stages: usize) -> Result<Vec<UnitProfile>> {
    spec.validate()?;
    if stages == 0 {
        return invalid("need at least one decision stage");
    }
    let [lo, hi] = spec.gamma_range;
    let s = base.size();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.units)
        .map(|n| {
            let default = perturb_with(base, spec.noise_magnitude, &mut rng)?;
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..s).map(|_| rng.random_range(lo..=hi)).collect() };
            let gamma = if spec.resample_gamma_per_stage {
                (0..stages).map(|_| draw(&mut rng)).collect()
            } else {
                vec![draw(&mut rng); stages]
            };
            UnitProfile::new(n as u64, vec![default; stages], gamma)
        })
        .collect()
}

/// Electricity price per stage, constant or one rate per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TariffSchedule {
    pub rate_usd_per_kwh: Rate,
    #[serde(default = "default_stage_duration")]
    pub stage_duration_h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Constant(f64),
    PerStage(Vec<f64>),
}

fn default_stage_duration() -> f64 {
    0.25
}

impl TariffSchedule {
    pub fn constant(rate: f64) -> Self {
        TariffSchedule { rate_usd_per_kwh: Rate::Constant(rate), stage_duration_h: default_stage_duration() }
    }

    fn rate(&self, stage: usize, stage_count: usize) -> Result<f64> {
        let r = match &self.rate_usd_per_kwh {
            Rate::Constant(r) => *r,
            Rate::PerStage(rates) if rates.len() == stage_count => rates[stage],
            Rate::PerStage(rates) => {
                return invalid(format!("tariff has {} rates for {stage_count} stages", rates.len()));
            }
        };
        if !(r >= 0.0 && r.is_finite()) {
            return invalid(format!("rate {r} must be finite and non-negative"));
        }
        Ok(r)
    }
}

/// `q[l][i] = power_i * rate_l * stage_duration` for `stage_count` stages.
pub fn build_stage_costs(power: &StatePowerMap, tariff: &TariffSchedule, stage_count: usize) -> Result<StageCosts> {
    let d = tariff.stage_duration_h;
    if !(d > 0.0 && d.is_finite()) {
        return invalid(format!("stage duration must be positive, got {d}"));
    }
    let q = (0..stage_count)
        .map(|l| {
            let rate = tariff.rate(l, stage_count)?;
            Ok(power.power().iter().map(|p| p * rate * d).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    StageCosts::new(q)
}

#[derive(Deserialize)]
struct PowerRecord {
    timestamp: String,
    power_kw: f64,
}

fn parse_timestamp(raw: &str) -> Result<DateTime<FixedOffset>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Ok(t);
    }
    // naive local times are read as UTC
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .map(|t| t.and_utc().fixed_offset())
        .ok_or_else(|| Error::InvalidArgument(format!("unparseable timestamp {raw:?}")))
}

/// Reads `timestamp,power_kw` CSV.
pub fn read_power_csv<R: Read>(input: R) -> Result<PowerSeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["timestamp", "power_kw"] {
        return invalid(format!("expected header timestamp,power_kw, found {}", headers.iter().collect::<Vec<_>>().join(",")));
    }
    let mut timestamps = Vec::new();
    let mut power = Vec::new();
    for record in reader.deserialize() {
        let r: PowerRecord = record?;
        timestamps.push(parse_timestamp(&r.timestamp)?);
        power.push(r.power_kw);
    }
    PowerSeries::new(timestamps, power)
}

/// Output of the ingest step: the building's Markov model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovModel {
    #[serde(rename = "S")]
    pub states: usize,
    pub binning: Binning,
    pub smoothing: f64,
    pub state_power_kw: StatePowerMap,
    pub default: StochasticMatrix,
    /// Fraction of readings in each state; used to draw initial states.
    pub occupancy: Vec<f64>,
}

/// Discretizes the series and estimates the smoothed chain in one go.
pub fn build_markov_model(series: &PowerSeries, states: usize, binning: Binning, smoothing: f64) -> Result<MarkovModel> {
    let (seq, power) = discretize_power(series, states, binning)?;
    let default = estimate_transition_matrix(&seq, states, smoothing)?;
    let mut occupancy = vec![0.0; states];
    for &s in &seq {
        occupancy[s] += 1.0 / seq.len() as f64;
    }
    Ok(MarkovModel { states, binning, smoothing, state_power_kw: power, default, occupancy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UnitRecord {
    id: u64,
    default: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
}

/// Ensemble JSON with one stage-invariant default per unit and a gamma row per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    #[serde(rename = "S")]
    states: usize,
    #[serde(rename = "L")]
    stage_count: usize,
    units: Vec<UnitRecord>,
}

impl EnsembleFile {
    /// Only stage-invariant defaults can be written in this format.
    pub fn from_units(units: &[UnitProfile]) -> Result<Self> {
        let Some(first) = units.first() else {
            return invalid("ensemble is empty");
        };
        let records = units
            .iter()
            .map(|u| {
                let d = u.default_matrix(0);
                if u.defaults().iter().any(|m| m != d) {
                    return invalid(format!("unit {} has stage-varying defaults", u.id));
                }
                Ok(UnitRecord { id: u.id, default: d.to_rows(), gamma: u.gamma_table().to_vec() })
            })
            .collect::<Result<_>>()?;
        Ok(EnsembleFile { states: first.states(), stage_count: first.stages() + 1, units: records })
    }

    pub fn into_units(self) -> Result<Vec<UnitProfile>> {
        let stages = self.stage_count.checked_sub(1).filter(|&s| s > 0).ok_or_else(|| {
            Error::InvalidArgument(format!("L = {} leaves no decision stage", self.stage_count))
        })?;
        self.units
            .into_iter()
            .map(|r| {
                let m = StochasticMatrix::from_rows(r.default)?;
                if m.size() != self.states {
                    return invalid(format!("unit {} has {} states, file says {}", r.id, m.size(), self.states));
                }
                if r.gamma.len() != stages {
                    return invalid(format!("unit {} has {} gamma rows for {stages} stages", r.id, r.gamma.len()));
                }
                UnitProfile::new(r.id, vec![m; stages], r.gamma)
            })
            .collect()
    }
}

pub fn read_json<T: serde::de::DeserializeOwned, R: Read>(input: R) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(input))?)
}

pub fn write_json<T: Serialize, W: Write>(value: &T, out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
