//! The emission input space: vehicle/environment factors, the discretized
//! extraction grid, and the affine normalization used by the surrogate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical extraction step in seconds.
pub const CANONICAL_DT: f64 = 1.0;

/// Physical bounds of the six continuous inputs, in the order
/// `(v, a, grade, temp, humidity, age)`.
pub const INPUT_BOUNDS: [(f64, f64); 6] = [
    (0.0, 33.0),
    (-4.5, 3.0),
    (-25.0, 25.0),
    (28.0, 90.0),
    (25.0, 90.0),
    (2009.0, 2019.0),
];

pub const INPUT_NAMES: [&str; 6] = ["speed", "accel", "grade", "temp", "humidity", "age"];

/// Temperature (°F) / relative humidity (%) pairs covered by the extraction grid.
pub const TEMP_HUMIDITY_PAIRS: [(f64, f64); 21] = [
    (28.1996, 80.2873),
    (30.0000, 56.0000),
    (33.0000, 32.0000),
    (37.0000, 89.0000),
    (37.6286, 67.6447),
    (43.0000, 47.0000),
    (46.1619, 80.2282),
    (53.6926, 58.5524),
    (55.0000, 33.0000),
    (55.6191, 75.1602),
    (60.0000, 68.0000),
    (65.0137, 62.8505),
    (69.9007, 82.7532),
    (70.0000, 25.0000),
    (71.4719, 46.6703),
    (72.0000, 54.0000),
    (79.0944, 62.6927),
    (82.0000, 49.0000),
    (82.8811, 26.8811),
    (87.0000, 80.0000),
    (89.0000, 38.0000),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("{name} = {value} outside [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("motorcycles only run on gasoline")]
    InvalidPair,
    #[error("unknown {kind} token `{token}`")]
    UnknownToken { kind: &'static str, token: String },
    #[error("grid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleType {
    Motorcycle,
    PassengerCar,
    PassengerTruck,
    LightCommercialTruck,
    TransitBus,
}

impl VehicleType {
    pub const ALL: [VehicleType; 5] = [
        VehicleType::Motorcycle,
        VehicleType::PassengerCar,
        VehicleType::PassengerTruck,
        VehicleType::LightCommercialTruck,
        VehicleType::TransitBus,
    ];

    pub fn token(self) -> &'static str {
        match self {
            VehicleType::Motorcycle => "motorcycle",
            VehicleType::PassengerCar => "passenger_car",
            VehicleType::PassengerTruck => "passenger_truck",
            VehicleType::LightCommercialTruck => "light_commercial_truck",
            VehicleType::TransitBus => "transit_bus",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for VehicleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for VehicleType {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.token() == s)
            .ok_or_else(|| FactorError::UnknownToken {
                kind: "vehicle type",
                token: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fuel {
    Gasoline,
    Diesel,
}

impl Fuel {
    pub const ALL: [Fuel; 2] = [Fuel::Gasoline, Fuel::Diesel];

    pub fn token(self) -> &'static str {
        match self {
            Fuel::Gasoline => "gasoline",
            Fuel::Diesel => "diesel",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Fuel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Fuel {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.token() == s)
            .ok_or_else(|| FactorError::UnknownToken {
                kind: "fuel",
                token: s.to_string(),
            })
    }
}

/// A `(vehicle type, fuel)` combination; keys one network of the surrogate family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VehicleClass {
    pub vtype: VehicleType,
    pub fuel: Fuel,
}

impl VehicleClass {
    pub fn new(vtype: VehicleType, fuel: Fuel) -> Result<Self, FactorError> {
        if vtype == VehicleType::Motorcycle && fuel == Fuel::Diesel {
            return Err(FactorError::InvalidPair);
        }
        Ok(Self { vtype, fuel })
    }

    /// The nine valid classes, motorcycle first.
    pub fn all() -> Vec<VehicleClass> {
        VehicleType::ALL
            .into_iter()
            .flat_map(|vtype| Fuel::ALL.into_iter().map(move |fuel| (vtype, fuel)))
            .filter_map(|(vtype, fuel)| VehicleClass::new(vtype, fuel).ok())
            .collect()
    }
}

impl fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.vtype, self.fuel)
    }
}

/// Parses the `vtype/fuel` form written by `Display`.
impl FromStr for VehicleClass {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (v, f) = s.split_once('/').ok_or_else(|| FactorError::UnknownToken {
            kind: "vehicle class",
            token: s.to_string(),
        })?;
        VehicleClass::new(v.parse()?, f.parse()?)
    }
}

/// Non-dynamics emission inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    /// Road grade, percent.
    pub grade: f64,
    /// Ambient temperature, °F.
    pub temp: f64,
    /// Relative humidity, percent.
    pub humidity: f64,
    pub vtype: VehicleType,
    pub fuel: Fuel,
    /// Model year.
    pub age: i32,
}

impl FactorVector {
    pub fn new(
        grade: f64,
        temp: f64,
        humidity: f64,
        vtype: VehicleType,
        fuel: Fuel,
        age: i32,
    ) -> Result<Self, FactorError> {
        let x = Self {
            grade,
            temp,
            humidity,
            vtype,
            fuel,
            age,
        };
        x.validate()?;
        Ok(x)
    }

    pub fn class(&self) -> VehicleClass {
        VehicleClass {
            vtype: self.vtype,
            fuel: self.fuel,
        }
    }

    pub fn validate(&self) -> Result<(), FactorError> {
        VehicleClass::new(self.vtype, self.fuel)?;
        for (i, value) in [(2, self.grade), (3, self.temp), (4, self.humidity), (5, self.age as f64)] {
            check_bound(i, value)?;
        }
        Ok(())
    }
}

/// A speed/acceleration pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    pub v: f64,
    pub a: f64,
}

impl DynamicsPoint {
    /// Whether applying `a` for `dt` keeps the speed non-negative.
    pub fn is_valid(&self, dt: f64) -> bool {
        self.v >= 0.0 && self.v + self.a * dt >= -1e-9
    }
}

fn check_bound(index: usize, value: f64) -> Result<(), FactorError> {
    let (min, max) = INPUT_BOUNDS[index];
    if !(min..=max).contains(&value) {
        return Err(FactorError::OutOfRange {
            name: INPUT_NAMES[index],
            value,
            min,
            max,
        });
    }
    Ok(())
}

/// Affine map of `(v, a, grade, temp, humidity, age)` onto `[-1, 1]^6`.
pub fn normalize(x: &FactorVector, d: &DynamicsPoint) -> Result<[f64; 6], FactorError> {
    let raw = continuous_inputs(x, d);
    for (i, &value) in raw.iter().enumerate() {
        check_bound(i, value)?;
    }
    Ok(normalize_raw(&raw, &INPUT_BOUNDS))
}

/// Inverse of [`normalize`]; returns raw values in input order.
pub fn denormalize(z: &[f64; 6]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for i in 0..6 {
        let (min, max) = INPUT_BOUNDS[i];
        let half = 0.5 * (max - min);
        out[i] = z[i] * half + (min + half);
    }
    out
}

pub fn continuous_inputs(x: &FactorVector, d: &DynamicsPoint) -> [f64; 6] {
    [d.v, d.a, x.grade, x.temp, x.humidity, x.age as f64]
}

/// Unchecked affine normalization with caller-supplied bounds.
pub fn normalize_raw(raw: &[f64; 6], bounds: &[(f64, f64); 6]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for i in 0..6 {
        let (min, max) = bounds[i];
        let half = 0.5 * (max - min);
        out[i] = (raw[i] - (min + half)) / half;
    }
    out
}

/// The discretization swept by the extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGrid {
    pub speeds: Vec<f64>,
    pub accels: Vec<f64>,
    pub grades: Vec<f64>,
    pub temp_humidity: Vec<(f64, f64)>,
    pub ages: Vec<i32>,
    pub classes: Vec<VehicleClass>,
    pub dt: f64,
}

impl Default for FactorGrid {
    fn default() -> Self {
        Self {
            // 0.0 ..= 32.5 in 0.5 steps; 66 values
            speeds: (0..66).map(|i| i as f64 * 0.5).collect(),
            // -4.5 ..= 3.0 in 0.1 steps; 76 values
            accels: (-45..=30).map(|i| i as f64 / 10.0).collect(),
            grades: (-5..=5).map(|i| i as f64 * 5.0).collect(),
            temp_humidity: TEMP_HUMIDITY_PAIRS.to_vec(),
            ages: (2009..=2019).collect(),
            classes: VehicleClass::all(),
            dt: CANONICAL_DT,
        }
    }
}

/// Optional overrides read from a key-value (TOML) grid file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridOverrides {
    speed_min: Option<f64>,
    speed_step: Option<f64>,
    speed_count: Option<usize>,
    accel_min: Option<f64>,
    accel_step: Option<f64>,
    accel_count: Option<usize>,
    grades: Option<Vec<f64>>,
    temp_humidity: Option<Vec<[f64; 2]>>,
    ages: Option<Vec<i32>>,
    classes: Option<Vec<String>>,
    dt: Option<f64>,
}

fn arithmetic(min: f64, step: f64, count: usize) -> Vec<f64> {
    // Values are generated from integer multiples so the grid is reproducible bit for bit.
    (0..count).map(|i| min + i as f64 * step).collect()
}

impl FactorGrid {
    pub fn from_toml_str(text: &str) -> Result<Self, FactorError> {
        let o: GridOverrides = toml::from_str(text).map_err(|e| FactorError::Config(e.to_string()))?;
        let mut grid = FactorGrid::default();
        if o.speed_min.is_some() || o.speed_step.is_some() || o.speed_count.is_some() {
            grid.speeds = arithmetic(
                o.speed_min.unwrap_or(0.0),
                o.speed_step.unwrap_or(0.5),
                o.speed_count.unwrap_or(66),
            );
        }
        if o.accel_min.is_some() || o.accel_step.is_some() || o.accel_count.is_some() {
            grid.accels = arithmetic(
                o.accel_min.unwrap_or(-4.5),
                o.accel_step.unwrap_or(0.1),
                o.accel_count.unwrap_or(76),
            );
        }
        if let Some(g) = o.grades {
            grid.grades = g;
        }
        if let Some(th) = o.temp_humidity {
            grid.temp_humidity = th.into_iter().map(|[t, h]| (t, h)).collect();
        }
        if let Some(ages) = o.ages {
            grid.ages = ages;
        }
        if let Some(classes) = o.classes {
            grid.classes = classes
                .iter()
                .map(|c| {
                    let (vt, fu) = c
                        .split_once('/')
                        .ok_or_else(|| FactorError::Config(format!("class `{c}` is not vtype/fuel")))?;
                    VehicleClass::new(vt.parse()?, fu.parse()?)
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(dt) = o.dt {
            grid.dt = dt;
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_file(path: &Path) -> Result<Self, FactorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FactorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), FactorError> {
        if !(self.dt > 0.0) {
            return Err(FactorError::Config("dt must be positive".into()));
        }
        for &v in &self.speeds {
            check_bound(0, v)?;
        }
        for &a in &self.accels {
            check_bound(1, a)?;
        }
        for &g in &self.grades {
            check_bound(2, g)?;
        }
        for &(t, h) in &self.temp_humidity {
            check_bound(3, t)?;
            check_bound(4, h)?;
        }
        for &y in &self.ages {
            check_bound(5, y as f64)?;
        }
        Ok(())
    }

    /// Valid `(v, a)` pairs, speed-major then acceleration ascending.
    pub fn dynamics(&self) -> impl Iterator<Item = DynamicsPoint> + '_ {
        self.speeds.iter().flat_map(move |&v| {
            self.accels
                .iter()
                .map(move |&a| DynamicsPoint { v, a })
                .filter(move |d| d.is_valid(self.dt))
        })
    }

    pub fn dynamics_count(&self) -> usize {
        self.dynamics().count()
    }

    pub fn excluded_dynamics_count(&self) -> usize {
        self.speeds.len() * self.accels.len() - self.dynamics_count()
    }

    pub fn scenario_count(&self) -> usize {
        self.classes.len() * self.ages.len() * self.grades.len() * self.temp_humidity.len()
    }

    /// Scenario by index. Order is class-major, then age, grade, and
    /// temperature/humidity pair, so a contiguous index range stays within
    /// as few vehicle classes as possible.
    pub fn scenario(&self, index: usize) -> Option<FactorVector> {
        if index >= self.scenario_count() {
            return None;
        }
        let n_th = self.temp_humidity.len();
        let n_gr = self.grades.len();
        let n_age = self.ages.len();
        let th = index % n_th;
        let gr = (index / n_th) % n_gr;
        let age = (index / (n_th * n_gr)) % n_age;
        let class = index / (n_th * n_gr * n_age);
        let (temp, humidity) = self.temp_humidity[th];
        let c = self.classes[class];
        Some(FactorVector {
            grade: self.grades[gr],
            temp,
            humidity,
            vtype: c.vtype,
            fuel: c.fuel,
            age: self.ages[age],
        })
    }

    pub fn scenarios(&self) -> impl Iterator<Item = FactorVector> + '_ {
        (0..self.scenario_count()).filter_map(move |i| self.scenario(i))
    }

    /// Indices of all scenarios belonging to `class`.
    pub fn scenario_range_for(&self, class: VehicleClass) -> Option<std::ops::Range<usize>> {
        let pos = self.classes.iter().position(|&c| c == class)?;
        let per_class = self.ages.len() * self.grades.len() * self.temp_humidity.len();
        Some(pos * per_class..(pos + 1) * per_class)
    }

    /// `per_class` evenly spaced scenario indices (bin midpoints) inside the
    /// range of each listed class. Classes absent from the grid are skipped.
    pub fn stratified_scenarios(&self, classes: &[VehicleClass], per_class: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &c in classes {
            let Some(r) = self.scenario_range_for(c) else {
                continue;
            };
            let len = r.len();
            let k = per_class.min(len);
            out.extend((0..k).map(|i| r.start + (2 * i + 1) * len / (2 * k)));
        }
        out
    }

    /// Total extraction records for the full grid.
    pub fn record_count(&self) -> u64 {
        self.dynamics_count() as u64 * self.scenario_count() as u64
    }
}

/// Enumerates the valid `(v, a)` pairs of `grid`.
pub fn enumerate_dynamics(grid: &FactorGrid) -> Vec<DynamicsPoint> {
    grid.dynamics().collect()
}

/// Enumerates every valid factor combination of `grid`.
pub fn enumerate_scenarios(grid: &FactorGrid) -> Vec<FactorVector> {
    grid.scenarios().collect()
}
