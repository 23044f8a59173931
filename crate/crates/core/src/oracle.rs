//! Operating-mode reference emission engine.
//!
//! Rates are binned by vehicle specific power (VSP) and speed class, scaled
//! by multiplicative modifiers for vehicle type, fuel, model year and
//! weather. A driving cycle's total is computed the way a cycle-level
//! emission simulator does it: tally the time spent in each operating mode,
//! evaluate a one-hour run, then scale linearly to the cycle's duration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{FactorVector, Fuel, VehicleType};

/// Seconds of operation the mode distribution is evaluated over before scaling.
pub const ONE_HOUR_S: f64 = 3600.0;

/// 25 mph and 50 mph in m/s.
const SPEED_CLASS_EDGES: [f64; 2] = [11.176, 22.352];

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("driving cycle must contain at least one speed")]
    EmptyCycle,
    #[error("driving cycle speed {value} at index {index} is negative or not finite")]
    InvalidSpeed { index: usize, value: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("rate table: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A fixed-step speed series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingCycle {
    speeds: Vec<f64>,
    dt: f64,
}

impl DrivingCycle {
    pub fn new(speeds: Vec<f64>, dt: f64) -> Result<Self, OracleError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(OracleError::InvalidStep(dt));
        }
        if speeds.is_empty() {
            return Err(OracleError::EmptyCycle);
        }
        if let Some((index, &value)) = speeds
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(OracleError::InvalidSpeed { index, value });
        }
        Ok(Self { speeds, dt })
    }

    /// `n` copies of `v`.
    pub fn constant(v: f64, n: usize, dt: f64) -> Result<Self, OracleError> {
        Self::new(vec![v; n], dt)
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    /// Duration in seconds; every recorded speed accounts for one step.
    pub fn duration(&self) -> f64 {
        self.speeds.len() as f64 * self.dt
    }

    /// The `(speed, acceleration)` state of every step. The first step holds
    /// the initial speed; step `i > 0` applies `(s[i] - s[i-1]) / dt` at `s[i-1]`.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        std::iter::once((self.speeds[0], 0.0)).chain(
            self.speeds
                .windows(2)
                .map(move |w| (w[0], (w[1] - w[0]) / self.dt)),
        )
    }

    pub fn concat(&self, other: &DrivingCycle) -> Result<Self, OracleError> {
        if self.dt != other.dt {
            return Err(OracleError::InvalidStep(other.dt));
        }
        let mut speeds = self.speeds.clone();
        speeds.extend_from_slice(&other.speeds);
        Self::new(speeds, self.dt)
    }

    /// Two-column `t_s,v_mps` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,v_mps\n");
        for (i, v) in self.speeds.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i as f64 * self.dt, v);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, OracleError> {
        let mut times = Vec::new();
        let mut speeds = Vec::new();
        // `#` lines may appear anywhere, including before the header
        let body = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .skip(1);
        for (lineno, line) in body {
            let line = line.trim();
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| OracleError::Table(format!("line {}: expected t_s,v_mps", lineno + 1)))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| OracleError::Table(format!("line {}: {e}", lineno + 1)))
            };
            times.push(parse(t)?);
            speeds.push(parse(v)?);
        }
        let dt = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
        Self::new(speeds, dt)
    }
}

/// Coefficients of `VSP = v·(a·mass_factor + g·grade/100 + g·rolling) + aero·v³` (kW/tonne).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VspCoefficients {
    pub mass_factor: f64,
    pub gravity: f64,
    pub rolling: f64,
    pub aero: f64,
}

impl Default for VspCoefficients {
    fn default() -> Self {
        Self {
            mass_factor: 1.1,
            gravity: 9.81,
            rolling: 0.0135,
            aero: 0.000302,
        }
    }
}

/// Vehicle specific power in kW/tonne.
pub fn vsp(v: f64, a: f64, grade: f64, c: &VspCoefficients) -> f64 {
    v * (a * c.mass_factor + c.gravity * (grade / 100.0) + c.gravity * c.rolling) + c.aero * v * v * v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BinKind {
    Braking,
    Idle,
    /// Speed class (1-based) and VSP bracket `[vsp_lo, vsp_hi)`.
    Running { speed_class: u8, vsp_lo: f64, vsp_hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpModeBin {
    pub id: u16,
    pub kind: BinKind,
    /// g CO₂/s for the reference vehicle (2019 gasoline passenger car, mild weather).
    pub base_rate: f64,
}

/// Multiplicative rate modifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modifiers {
    pub vtype: BTreeMap<VehicleType, f64>,
    pub fuel: BTreeMap<Fuel, f64>,
    /// Fractional increase per model year older than `age_reference`.
    pub age_slope: f64,
    pub age_reference: i32,
    pub temp_reference: f64,
    pub temp_span: f64,
    pub temp_gain: f64,
    pub humidity_reference: f64,
    pub humidity_span: f64,
    pub humidity_gain: f64,
}

impl Default for Modifiers {
    fn default() -> Self {
        Self {
            vtype: BTreeMap::from([
                (VehicleType::Motorcycle, 0.35),
                (VehicleType::PassengerCar, 1.0),
                (VehicleType::PassengerTruck, 1.3),
                (VehicleType::LightCommercialTruck, 1.45),
                (VehicleType::TransitBus, 3.6),
            ]),
            fuel: BTreeMap::from([(Fuel::Gasoline, 1.0), (Fuel::Diesel, 0.82)]),
            age_slope: 0.022,
            age_reference: 2019,
            temp_reference: 70.0,
            temp_span: 40.0,
            temp_gain: 0.06,
            humidity_reference: 50.0,
            humidity_span: 65.0,
            humidity_gain: 0.03,
        }
    }
}

impl Modifiers {
    pub fn vtype_multiplier(&self, v: VehicleType) -> f64 {
        self.vtype.get(&v).copied().unwrap_or(1.0)
    }

    pub fn fuel_multiplier(&self, f: Fuel) -> f64 {
        self.fuel.get(&f).copied().unwrap_or(1.0)
    }

    pub fn age_multiplier(&self, year: i32) -> f64 {
        1.0 + self.age_slope * (self.age_reference - year).max(0) as f64
    }

    pub fn weather_multiplier(&self, temp: f64, humidity: f64) -> f64 {
        let t = (temp - self.temp_reference) / self.temp_span;
        let h = (humidity - self.humidity_reference) / self.humidity_span;
        1.0 + self.temp_gain * t * t + self.humidity_gain * h
    }

    pub fn combined(&self, x: &FactorVector) -> f64 {
        self.vtype_multiplier(x.vtype)
            * self.fuel_multiplier(x.fuel)
            * self.age_multiplier(x.age)
            * self.weather_multiplier(x.temp, x.humidity)
    }
}

pub const BRAKING_BIN: u16 = 0;
pub const IDLE_BIN: u16 = 1;

/// Operating-mode rate table. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpModeTable {
    bins: Vec<OpModeBin>,
    pub vsp: VspCoefficients,
    pub modifiers: Modifiers,
    /// Accelerations at or below this are braking (m/s²).
    pub braking_accel: f64,
    /// Speeds below this are idling (m/s).
    pub idle_speed: f64,
    pub speed_class_edges: [f64; 2],
}

/// VSP bracket edges shared by every speed class.
const BRACKET_EDGES: [f64; 9] = [0.0, 3.0, 6.0, 9.0, 12.0, 18.0, 24.0, 30.0, f64::INFINITY];

impl Default for OpModeTable {
    fn default() -> Self {
        let mut bins = vec![
            OpModeBin {
                id: BRAKING_BIN,
                kind: BinKind::Braking,
                base_rate: 1.0,
            },
            OpModeBin {
                id: IDLE_BIN,
                kind: BinKind::Idle,
                base_rate: 1.0,
            },
        ];
        for class in 1..=3u8 {
            let class_factor = 1.0 + 0.05 * f64::from(class - 1);
            let mut lo = f64::NEG_INFINITY;
            for (k, &hi) in std::iter::once(&0.0).chain(&BRACKET_EDGES[1..]).enumerate() {
                let rate = class_factor * bracket_level(lo, hi);
                bins.push(OpModeBin {
                    id: u16::from(class) * 10 + k as u16,
                    kind: BinKind::Running {
                        speed_class: class,
                        vsp_lo: lo,
                        vsp_hi: hi,
                    },
                    base_rate: rate,
                });
                lo = hi;
            }
        }
        Self {
            bins,
            vsp: VspCoefficients::default(),
            modifiers: Modifiers::default(),
            braking_accel: -2.0,
            idle_speed: 0.5,
            speed_class_edges: SPEED_CLASS_EDGES,
        }
    }
}

/// Rate level of a VSP bracket relative to idle; grows with the bracket
/// midpoint and saturates for the open top bracket.
fn bracket_level(lo: f64, hi: f64) -> f64 {
    const NEGATIVE: f64 = 1.15;
    const SLOPE: f64 = 0.095;
    if hi <= 0.0 {
        return NEGATIVE;
    }
    let mid = if hi.is_finite() { 0.5 * (lo + hi) } else { lo + 3.0 };
    NEGATIVE + SLOPE * mid
}

impl OpModeTable {
    pub fn new(
        bins: Vec<OpModeBin>,
        vsp: VspCoefficients,
        modifiers: Modifiers,
    ) -> Result<Self, OracleError> {
        let table = Self {
            bins,
            vsp,
            modifiers,
            ..Self::default()
        };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<(), OracleError> {
        let idle = self
            .bin(IDLE_BIN)
            .ok_or_else(|| OracleError::Table("missing idle bin".into()))?
            .base_rate;
        if self.bin(BRAKING_BIN).is_none() {
            return Err(OracleError::Table("missing braking bin".into()));
        }
        for b in &self.bins {
            if !(b.base_rate > 0.0 && b.base_rate.is_finite()) {
                return Err(OracleError::Table(format!("bin {} rate must be positive", b.id)));
            }
            if b.base_rate < idle {
                return Err(OracleError::Table(format!("bin {} rate below idle", b.id)));
            }
        }
        for class in 1..=3u8 {
            let mut brackets: Vec<_> = self
                .bins
                .iter()
                .filter_map(|b| match b.kind {
                    BinKind::Running {
                        speed_class,
                        vsp_lo,
                        vsp_hi,
                    } if speed_class == class => Some((vsp_lo, vsp_hi, b.base_rate)),
                    _ => None,
                })
                .collect();
            brackets.sort_by(|a, b| a.0.total_cmp(&b.0));
            let covers = brackets.first().map(|b| b.0) == Some(f64::NEG_INFINITY)
                && brackets.last().map(|b| b.1) == Some(f64::INFINITY)
                && brackets.windows(2).all(|w| w[0].1 == w[1].0);
            if !covers {
                return Err(OracleError::Table(format!(
                    "speed class {class} brackets do not tile the VSP axis"
                )));
            }
            if brackets.windows(2).any(|w| w[1].2 < w[0].2) {
                return Err(OracleError::Table(format!(
                    "speed class {class} rates are not ordered by VSP"
                )));
            }
        }
        Ok(())
    }

    pub fn bins(&self) -> &[OpModeBin] {
        &self.bins
    }

    pub fn bin(&self, id: u16) -> Option<&OpModeBin> {
        self.bins.iter().find(|b| b.id == id)
    }

    fn speed_class(&self, v: f64) -> u8 {
        if v < self.speed_class_edges[0] {
            1
        } else if v < self.speed_class_edges[1] {
            2
        } else {
            3
        }
    }

    /// Operating mode of applying `a` at speed `v` on `grade`.
    pub fn op_mode_of(&self, v: f64, a: f64, grade: f64) -> u16 {
        if a <= self.braking_accel {
            return BRAKING_BIN;
        }
        if v < self.idle_speed {
            return IDLE_BIN;
        }
        let class = self.speed_class(v);
        let power = vsp(v, a, grade, &self.vsp);
        self.bins
            .iter()
            .find_map(|b| match b.kind {
                BinKind::Running {
                    speed_class,
                    vsp_lo,
                    vsp_hi,
                } if speed_class == class && power >= vsp_lo && power < vsp_hi => Some(b.id),
                _ => None,
            })
            // NaN power only; the brackets tile the real line.
            .unwrap_or(IDLE_BIN)
    }

    /// Emission rate of `bin` under `x`, g/s.
    pub fn rate(&self, bin: u16, x: &FactorVector) -> f64 {
        let base = self.bin(bin).map_or(f64::NAN, |b| b.base_rate);
        base * self.modifiers.combined(x)
    }

    pub fn idling_rate(&self, x: &FactorVector) -> f64 {
        self.rate(IDLE_BIN, x)
    }

    /// Rate of applying `a` at `v` under `x`, g/s.
    pub fn rate_at(&self, v: f64, a: f64, x: &FactorVector) -> f64 {
        self.rate(self.op_mode_of(v, a, x.grade), x)
    }

    /// Fraction of the cycle's steps spent in each operating mode.
    pub fn op_mode_distribution(&self, tau: &DrivingCycle, grade: f64) -> BTreeMap<u16, f64> {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for (v, a) in tau.steps() {
            *counts.entry(self.op_mode_of(v, a, grade)).or_default() += 1;
        }
        let n = tau.len() as f64;
        counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
    }

    /// Total grams over the cycle: a one-hour run under the cycle's mode
    /// distribution, scaled linearly to the cycle's duration.
    pub fn cycle_emission(&self, tau: &DrivingCycle, x: &FactorVector) -> f64 {
        let hourly: f64 = ONE_HOUR_S
            * self
                .op_mode_distribution(tau, x.grade)
                .into_iter()
                .map(|(bin, p)| p * self.rate(bin, x))
                .sum::<f64>();
        hourly * tau.duration() / ONE_HOUR_S
    }

    /// Rate table as CSV: `bin_id,kind,speed_class,vsp_lo,vsp_hi,base_rate`.
    pub fn rates_csv(&self) -> String {
        let mut out = String::from("bin_id,kind,speed_class,vsp_lo,vsp_hi,base_rate\n");
        for b in &self.bins {
            let (kind, class, lo, hi) = match b.kind {
                BinKind::Braking => ("braking", 0, f64::NEG_INFINITY, f64::INFINITY),
                BinKind::Idle => ("idle", 0, f64::NEG_INFINITY, f64::INFINITY),
                BinKind::Running {
                    speed_class,
                    vsp_lo,
                    vsp_hi,
                } => ("running", speed_class, vsp_lo, vsp_hi),
            };
            let _ = writeln!(out, "{},{kind},{class},{lo},{hi},{}", b.id, b.base_rate);
        }
        out
    }

    /// Modifiers as CSV: `dimension,key,value`.
    pub fn modifiers_csv(&self) -> String {
        let m = &self.modifiers;
        let mut out = String::from("dimension,key,value\n");
        for (k, v) in &m.vtype {
            let _ = writeln!(out, "vtype,{k},{v}");
        }
        for (k, v) in &m.fuel {
            let _ = writeln!(out, "fuel,{k},{v}");
        }
        for (k, v) in [
            ("slope", m.age_slope),
            ("reference", f64::from(m.age_reference)),
        ] {
            let _ = writeln!(out, "age,{k},{v}");
        }
        for (k, v) in [
            ("temp_reference", m.temp_reference),
            ("temp_span", m.temp_span),
            ("temp_gain", m.temp_gain),
            ("humidity_reference", m.humidity_reference),
            ("humidity_span", m.humidity_span),
            ("humidity_gain", m.humidity_gain),
        ] {
            let _ = writeln!(out, "weather,{k},{v}");
        }
        out
    }

    pub fn from_csv(rates: &str, modifiers: &str) -> Result<Self, OracleError> {
        let mut bins = Vec::new();
        for (lineno, line) in data_lines(rates) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(OracleError::Table(format!("rates line {lineno}: expected 6 fields")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| OracleError::Table(format!("rates line {lineno}: {e}")))
            };
            let id = f[0]
                .parse::<u16>()
                .map_err(|e| OracleError::Table(format!("rates line {lineno}: {e}")))?;
            let kind = match f[1] {
                "braking" => BinKind::Braking,
                "idle" => BinKind::Idle,
                "running" => BinKind::Running {
                    speed_class: f[2]
                        .parse()
                        .map_err(|e| OracleError::Table(format!("rates line {lineno}: {e}")))?,
                    vsp_lo: num(f[3])?,
                    vsp_hi: num(f[4])?,
                },
                other => {
                    return Err(OracleError::Table(format!(
                        "rates line {lineno}: unknown bin kind `{other}`"
                    )))
                }
            };
            bins.push(OpModeBin {
                id,
                kind,
                base_rate: num(f[5])?,
            });
        }

        let mut m = Modifiers {
            vtype: BTreeMap::new(),
            fuel: BTreeMap::new(),
            ..Modifiers::default()
        };
        for (lineno, line) in data_lines(modifiers) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(OracleError::Table(format!("modifiers line {lineno}: expected 3 fields")));
            }
            let value = f[2]
                .parse::<f64>()
                .map_err(|e| OracleError::Table(format!("modifiers line {lineno}: {e}")))?;
            let bad = || OracleError::Table(format!("modifiers line {lineno}: unknown key `{}`", f[1]));
            match (f[0], f[1]) {
                ("vtype", k) => {
                    m.vtype.insert(k.parse().map_err(|_| bad())?, value);
                }
                ("fuel", k) => {
                    m.fuel.insert(k.parse().map_err(|_| bad())?, value);
                }
                ("age", "slope") => m.age_slope = value,
                ("age", "reference") => m.age_reference = value as i32,
                ("weather", "temp_reference") => m.temp_reference = value,
                ("weather", "temp_span") => m.temp_span = value,
                ("weather", "temp_gain") => m.temp_gain = value,
                ("weather", "humidity_reference") => m.humidity_reference = value,
                ("weather", "humidity_span") => m.humidity_span = value,
                ("weather", "humidity_gain") => m.humidity_gain = value,
                _ => return Err(bad()),
            }
        }
        Self::new(bins, VspCoefficients::default(), m)
    }

    /// Writes `rates.csv` and `modifiers.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), OracleError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rates.csv"), self.rates_csv())?;
        std::fs::write(dir.join("modifiers.csv"), self.modifiers_csv())?;
        Ok(())
    }

    /// Reads a table exported by [`OpModeTable::export`]; embedded defaults when absent.
    pub fn import_or_default(dir: Option<&Path>) -> Result<Self, OracleError> {
        let Some(dir) = dir else {
            return Ok(Self::default());
        };
        let rates = dir.join("rates.csv");
        let mods = dir.join("modifiers.csv");
        if !rates.exists() && !mods.exists() {
            return Ok(Self::default());
        }
        Self::from_csv(
            &std::fs::read_to_string(rates)?,
            &std::fs::read_to_string(mods)?,
        )
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{FactorGrid, VehicleType};

    fn car() -> FactorVector {
        FactorVector::new(0.0, 60.0, 55.0, VehicleType::PassengerCar, Fuel::Gasoline, 2019).unwrap()
    }

    #[test]
    fn vsp_values() {
        let c = VspCoefficients::default();
        assert_eq!(vsp(0.0, 2.0, 0.0, &c), 0.0);
        assert_eq!(vsp(0.0, -3.0, 10.0, &c), 0.0);
        assert!(vsp(10.0, 0.0, 5.0, &c) > vsp(10.0, 0.0, 0.0, &c));
        // 15·(1·1.1 + 9.81·0.0135) + 0.000302·15³
        let expected = 15.0 * (1.1 + 0.132435) + 0.000302 * 3375.0;
        assert!((vsp(15.0, 1.0, 0.0, &c) - expected).abs() < 1e-12);
        assert!((vsp(15.0, 1.0, 0.0, &c) - 19.505775).abs() < 1e-9);
    }

    #[test]
    fn op_mode_rules() {
        let t = OpModeTable::default();
        assert_eq!(t.op_mode_of(0.0, 0.0, 0.0), IDLE_BIN);
        assert_eq!(t.op_mode_of(0.3, 1.0, 25.0), IDLE_BIN);
        assert_eq!(t.op_mode_of(20.0, -3.0, 0.0), BRAKING_BIN);
        assert_eq!(t.op_mode_of(20.0, -2.0, 0.0), BRAKING_BIN);
        // v = 10, a = 0.5: VSP = 10·(0.55 + 0.132435) + 0.302 = 7.12635 → class 1, [6, 9)
        let p = vsp(10.0, 0.5, 0.0, &t.vsp);
        assert!((p - 7.12635).abs() < 1e-9);
        assert_eq!(t.op_mode_of(10.0, 0.5, 0.0), 13);
        // class 2 bracket [0,3): v = 15, a = 0 → VSP ≈ 3.0058 → [3,6)
        assert_eq!(t.op_mode_of(15.0, 0.0, 0.0), 22);
        assert_eq!(t.op_mode_of(25.0, 3.0, 10.0), 38);
        assert_eq!(t.op_mode_of(25.0, -1.0, -10.0), 30);
    }

    #[test]
    fn rate_orderings() {
        let t = OpModeTable::default();
        let x = car();
        let bus = FactorVector {
            vtype: VehicleType::TransitBus,
            ..x
        };
        for b in t.bins() {
            assert!(t.rate(b.id, &bus) > t.rate(b.id, &x));
            assert!(t.rate(b.id, &x) >= t.idling_rate(&x));
        }
        let truck = FactorVector {
            vtype: VehicleType::PassengerTruck,
            ..x
        };
        let diesel = FactorVector {
            fuel: Fuel::Diesel,
            ..truck
        };
        assert!(t.rate(22, &diesel) < t.rate(22, &truck));
        let old = FactorVector { age: 2009, ..x };
        let ratio = t.rate(22, &old) / t.rate(22, &x);
        assert!((1.0..=1.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn idle_is_positive_minimum_for_every_scenario() {
        let t = OpModeTable::default();
        let g = FactorGrid::default();
        let min_base = t.bins().iter().map(|b| b.base_rate).fold(f64::INFINITY, f64::min);
        assert_eq!(min_base, t.bin(IDLE_BIN).unwrap().base_rate);
        for x in g.scenarios() {
            let idle = t.idling_rate(&x);
            assert!(idle > 0.0);
            assert_eq!(idle, t.rate(IDLE_BIN, &x));
        }
    }

    #[test]
    fn weather_span_within_ten_percent() {
        let m = Modifiers::default();
        let vals: Vec<f64> = crate::factors::TEMP_HUMIDITY_PAIRS
            .iter()
            .map(|&(t, h)| m.weather_multiplier(t, h))
            .collect();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min > 1.0 && max / min <= 1.10, "{}", max / min);
    }

    #[test]
    fn constant_cycle_emission() {
        let t = OpModeTable::default();
        let x = car();
        let tau = DrivingCycle::constant(10.0, 7, 1.0).unwrap();
        let r = t.rate_at(10.0, 0.0, &x);
        assert!((t.cycle_emission(&tau, &x) - 7.0 * r).abs() < 1e-12 * r * 7.0);
        let half = DrivingCycle::constant(10.0, 7, 0.5).unwrap();
        assert!((t.cycle_emission(&half, &x) - 3.5 * r).abs() < 1e-12 * r * 7.0);
    }

    #[test]
    fn six_step_cycle_matches_hand_sum() {
        let t = OpModeTable::default();
        let x = car();
        let tau = DrivingCycle::new(vec![10.0, 10.0, 10.0, 10.0, 10.0, 11.0], 1.0).unwrap();
        let cruise = t.rate(t.op_mode_of(10.0, 0.0, 0.0), &x);
        let accel = t.rate(t.op_mode_of(10.0, 1.0, 0.0), &x);
        assert_ne!(cruise, accel);
        let hand = 5.0 * cruise + accel;
        assert!((t.cycle_emission(&tau, &x) - hand).abs() <= 1e-12 * hand);
    }

    #[test]
    fn repeated_cycle_doubles() {
        let t = OpModeTable::default();
        let x = car();
        let tau = DrivingCycle::constant(12.0, 9, 1.0).unwrap();
        let twice = tau.concat(&tau).unwrap();
        let e = t.cycle_emission(&tau, &x);
        assert!((t.cycle_emission(&twice, &x) - 2.0 * e).abs() < 1e-12 * e);
    }

    #[test]
    fn csv_roundtrip() {
        let t = OpModeTable::default();
        let back = OpModeTable::from_csv(&t.rates_csv(), &t.modifiers_csv()).unwrap();
        assert_eq!(back, t);
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(OpModeTable::import_or_default(Some(dir.path())).unwrap(), t);
        t.export(dir.path()).unwrap();
        assert_eq!(OpModeTable::import_or_default(Some(dir.path())).unwrap(), t);
    }

    #[test]
    fn table_rejects_rate_below_idle() {
        let t = OpModeTable::default();
        let mut bins = t.bins().to_vec();
        bins[5].base_rate = 0.5;
        assert!(OpModeTable::new(bins, t.vsp, t.modifiers.clone()).is_err());
    }

    #[test]
    fn cycle_validation() {
        assert!(matches!(DrivingCycle::new(vec![], 1.0), Err(OracleError::EmptyCycle)));
        assert!(DrivingCycle::new(vec![1.0, -0.1], 1.0).is_err());
        assert!(DrivingCycle::new(vec![1.0], 0.0).is_err());
        let c = DrivingCycle::new(vec![0.0, 1.5, 2.0], 1.0).unwrap();
        assert_eq!(DrivingCycle::from_csv(&c.to_csv()).unwrap(), c);
        let commented = format!("# run 7\n{}# end\n", c.to_csv());
        assert_eq!(DrivingCycle::from_csv(&commented).unwrap(), c);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn speeds() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0..30.0f64, 1..40)
        }

        proptest! {
            #[test]
            fn concatenation_is_additive(mut a in speeds(), b in speeds(), grade in -25.0..25.0f64) {
                let t = OpModeTable::default();
                let x = FactorVector { grade, ..car() };
                // match the boundary speed
                a.push(b[0]);
                let ta = DrivingCycle::new(a, 1.0).unwrap();
                let tb = DrivingCycle::new(b, 1.0).unwrap();
                let joined = ta.concat(&tb).unwrap();
                let sum = t.cycle_emission(&ta, &x) + t.cycle_emission(&tb, &x);
                let whole = t.cycle_emission(&joined, &x);
                prop_assert!((whole - sum).abs() <= 1e-9 * sum);
            }

            #[test]
            fn emission_at_least_idling(s in speeds(), grade in -25.0..25.0f64) {
                let t = OpModeTable::default();
                let x = FactorVector { grade, ..car() };
                let tau = DrivingCycle::new(s, 1.0).unwrap();
                let floor = tau.duration() * t.idling_rate(&x);
                prop_assert!(t.cycle_emission(&tau, &x) >= floor * (1.0 - 1e-12));
            }

            #[test]
            fn rate_monotone_in_accel(v in 0.0..33.0f64, a1 in -2.0..3.0f64, a2 in -2.0..3.0f64, grade in -25.0..25.0f64) {
                let t = OpModeTable::default();
                let x = FactorVector { grade, ..car() };
                let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
                prop_assert!(t.rate_at(v, lo, &x) <= t.rate_at(v, hi, &x));
            }

            #[test]
            fn deterministic(s in speeds()) {
                let t = OpModeTable::default();
                let tau = DrivingCycle::new(s, 1.0).unwrap();
                prop_assert_eq!(t.cycle_emission(&tau, &car()).to_bits(), t.cycle_emission(&tau, &car()).to_bits());
            }
        }
    }
}
