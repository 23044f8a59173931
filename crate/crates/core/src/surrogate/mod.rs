//! Per-class tanh networks trained on extracted records, with an idling floor.
//!
//! A [`SurrogateFamily`] maps each [`VehicleClass`] to one [`MlpParameters`]
//! entry. Predictions are `max(e_NN, e_idling(x))`, where the floor comes from
//! the `(v = 0, a = 0)` records seen in training, or from the reference table
//! for scenarios that were not in the data.

mod mlp;
mod poly;

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mlp::{forward, grad_inputs, MlpParameters, HIDDEN, INPUTS, TRAINABLE};
pub use poly::{PolynomialModel, MONOMIALS};

use crate::dataset::EmissionRecord;
use crate::factors::{continuous_inputs, DynamicsPoint, FactorVector, Fuel, VehicleClass, VehicleType};
use crate::oracle::OpModeTable;
use mlp::ParamGrad;

pub const MODEL_MAGIC: &[u8; 4] = b"NMNN";
pub const MODEL_VERSION: u8 = 1;
/// Lower clamp on training targets, grams.
pub const TARGET_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("non-finite input")]
    NonFinite,
    #[error("no model for {0}")]
    UnknownClass(VehicleClass),
    #[error("no idling floor for scenario and no reference fallback")]
    NoFloor,
    #[error("empty batch or dataset")]
    Empty,
    #[error("length mismatch: {0} predictions, {1} targets")]
    LengthMismatch(usize, usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_finite: Box<MlpParameters>,
        log: TrainLog,
    },
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model file version {0}")]
    Version(u8),
    #[error("least-squares system is singular")]
    Singular,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch by cosine annealing; equal to
    /// `learning_rate` for a constant schedule.
    pub final_learning_rate: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1024,
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            init_scale: 0.97,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.final_learning_rate > 0.0 && self.final_learning_rate.is_finite()) {
            return bad("final learning rate must be positive");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("init scale must be positive");
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.learning_rate;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.final_learning_rate + (self.learning_rate - self.final_learning_rate) * cos
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Full-pass train MAPE before the first update.
    pub initial_mape: f64,
    /// Mean minibatch MAPE per epoch, index 0 is the first epoch.
    pub epoch_mape: Vec<f64>,
    /// Full-pass train MAPE of the returned parameters.
    pub final_mape: f64,
    pub samples: usize,
}

impl TrainLog {
    /// Running minimum of the per-epoch loss.
    pub fn monotone_trend(&self) -> Vec<f64> {
        let mut best = self.initial_mape;
        self.epoch_mape
            .iter()
            .map(|&m| {
                best = best.min(m);
                best
            })
            .collect()
    }
}

/// `(1/N)·Σ |e_i − f_i| / max(e_i, ε) × 100`.
pub fn mape_loss(predictions: &[f64], targets: &[f64]) -> Result<f64, SurrogateError> {
    if predictions.len() != targets.len() {
        return Err(SurrogateError::LengthMismatch(predictions.len(), targets.len()));
    }
    if targets.is_empty() {
        return Err(SurrogateError::Empty);
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(f, e)| {
            let e = e.max(TARGET_EPSILON);
            (e - f).abs() / e
        })
        .sum();
    Ok(100.0 * sum / targets.len() as f64)
}

struct Adam {
    m: [f64; TRAINABLE],
    v: [f64; TRAINABLE],
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self {
            m: [0.0; TRAINABLE],
            v: [0.0; TRAINABLE],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64; TRAINABLE], grad: &[f64; TRAINABLE], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..TRAINABLE {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Glorot-uniform weights times `init_scale`, zero hidden biases, unit output bias,
/// output scale set to the mean target.
fn initial_parameters(cfg: &TrainConfig, mean_target: f64, rng: &mut ChaCha8Rng) -> MlpParameters {
    let mut m = MlpParameters::zeros();
    let mut draw = |fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        cfg.init_scale * rng.gen_range(-limit..limit)
    };
    for row in m.w1.iter_mut() {
        for w in row.iter_mut() {
            *w = draw(INPUTS, HIDDEN);
        }
    }
    for row in m.w2.iter_mut() {
        for w in row.iter_mut() {
            *w = draw(HIDDEN, HIDDEN);
        }
    }
    for w in m.w3.iter_mut() {
        *w = draw(HIDDEN, 1);
    }
    m.b3 = 1.0;
    m.output_scale = mean_target;
    m
}

fn full_mape(m: &MlpParameters, z: &[[f64; INPUTS]], targets: &[f64]) -> f64 {
    let sum: f64 = z
        .iter()
        .zip(targets)
        .map(|(z, e)| (e - m.forward_normalized(z)).abs() / e)
        .sum();
    100.0 * sum / targets.len() as f64
}

/// Trains the network for `class` on the matching records of `data`.
pub fn train(
    class: VehicleClass,
    data: &[EmissionRecord],
    cfg: &TrainConfig,
) -> Result<(MlpParameters, TrainLog), SurrogateError> {
    cfg.validate()?;
    let rows: Vec<&EmissionRecord> = data.iter().filter(|r| r.x.class() == class).collect();
    if rows.is_empty() {
        return Err(SurrogateError::Empty);
    }
    let mut m = MlpParameters::zeros();
    let z: Vec<[f64; INPUTS]> = rows
        .iter()
        .map(|r| m.normalize(&continuous_inputs(&r.x, &DynamicsPoint { v: r.v, a: r.a })))
        .collect();
    if z.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFinite);
    }
    let targets: Vec<f64> = rows.iter().map(|r| r.e.max(TARGET_EPSILON)).collect();
    let mean_target = targets.iter().sum::<f64>() / targets.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    m = initial_parameters(cfg, mean_target, &mut rng);
    let mut log = TrainLog {
        initial_mape: full_mape(&m, &z, &targets),
        samples: targets.len(),
        ..TrainLog::default()
    };

    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut last_finite = m.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = ParamGrad::default();
            let scale = 100.0 / batch.len() as f64;
            for &i in batch {
                let act = m.activations(&z[i]);
                let err = act.out - targets[i];
                epoch_sum += err.abs() / targets[i];
                let d_out = scale * err.signum() / targets[i];
                m.backward(&act, d_out, &mut grad);
            }
            let mut p = m.flat();
            adam.step(&mut p, &grad.0, lr);
            m.set_flat(&p);
        }
        let epoch_mape = 100.0 * epoch_sum / targets.len() as f64;
        if !epoch_mape.is_finite() || !m.is_finite() {
            return Err(SurrogateError::Diverged {
                epoch,
                last_finite: Box::new(last_finite),
                log,
            });
        }
        log.epoch_mape.push(epoch_mape);
        last_finite.clone_from(&m);
    }
    log.final_mape = full_mape(&m, &z, &targets);
    Ok((m, log))
}

/// Bitwise identity of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct ScenarioKey {
    grade: u64,
    temp: u64,
    humidity: u64,
    vtype: u8,
    fuel: u8,
    age: i32,
}

impl ScenarioKey {
    fn of(x: &FactorVector) -> Self {
        let bits = |f: f64| (f + 0.0).to_bits();
        Self {
            grade: bits(x.grade),
            temp: bits(x.temp),
            humidity: bits(x.humidity),
            vtype: x.vtype.code(),
            fuel: x.fuel.code(),
            age: x.age,
        }
    }

    fn factors(&self) -> Result<FactorVector, SurrogateError> {
        let vtype = VehicleType::from_code(self.vtype).ok_or_else(|| SurrogateError::Format("vehicle type code".into()))?;
        let fuel = Fuel::from_code(self.fuel).ok_or_else(|| SurrogateError::Format("fuel code".into()))?;
        Ok(FactorVector {
            grade: f64::from_bits(self.grade),
            temp: f64::from_bits(self.temp),
            humidity: f64::from_bits(self.humidity),
            vtype,
            fuel,
            age: self.age,
        })
    }
}

/// `e_idling(x)`: tabulated per scenario, with an optional reference table for misses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdlingFloor {
    table: BTreeMap<ScenarioKey, f64>,
    fallback: Option<OpModeTable>,
}

impl IdlingFloor {
    /// Tabulates the `(v = 0, a = 0)` records of `data`.
    pub fn from_records(data: &[EmissionRecord], fallback: Option<OpModeTable>) -> Self {
        let table = data
            .iter()
            .filter(|r| r.v == 0.0 && r.a == 0.0)
            .map(|r| (ScenarioKey::of(&r.x), r.e))
            .collect();
        Self { table, fallback }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn fallback(&self) -> Option<&OpModeTable> {
        self.fallback.as_ref()
    }

    pub fn value(&self, x: &FactorVector) -> Result<f64, SurrogateError> {
        if let Some(e) = self.table.get(&ScenarioKey::of(x)) {
            return Ok(*e);
        }
        match &self.fallback {
            Some(oracle) => Ok(oracle.idling_rate(x)),
            None => Err(SurrogateError::NoFloor),
        }
    }
}

/// One network per vehicle class plus the idling floor. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurrogateFamily {
    entries: BTreeMap<VehicleClass, MlpParameters>,
    pub floor: IdlingFloor,
    /// Free-form text stored in the model file.
    pub metadata: String,
}

impl SurrogateFamily {
    pub fn new(entries: BTreeMap<VehicleClass, MlpParameters>, floor: IdlingFloor) -> Self {
        Self {
            entries,
            floor,
            metadata: String::new(),
        }
    }

    pub fn entries(&self) -> &BTreeMap<VehicleClass, MlpParameters> {
        &self.entries
    }

    pub fn entry(&self, class: VehicleClass) -> Result<&MlpParameters, SurrogateError> {
        self.entries.get(&class).ok_or(SurrogateError::UnknownClass(class))
    }

    /// Whether every valid class has a network.
    pub fn is_complete(&self) -> bool {
        VehicleClass::all().iter().all(|c| self.entries.contains_key(c))
    }

    /// `max(e_NN, e_idling(x))` in grams.
    pub fn predict(&self, v: f64, a: f64, x: &FactorVector) -> Result<f64, SurrogateError> {
        let e_nn = forward(self.entry(x.class())?, v, a, x)?;
        Ok(e_nn.max(self.floor.value(x)?))
    }

    /// Prediction with its partial derivatives in `v` and `a`. On the floor
    /// both derivatives are zero.
    pub fn predict_with_grad(&self, v: f64, a: f64, x: &FactorVector) -> Result<(f64, f64, f64), SurrogateError> {
        let m = self.entry(x.class())?;
        let (e_nn, g) = m.value_and_grad_raw(&continuous_inputs(x, &DynamicsPoint { v, a }))?;
        let floor = self.floor.value(x)?;
        if e_nn >= floor {
            Ok((e_nn, g[0], g[1]))
        } else {
            Ok((floor, 0.0, 0.0))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        for (class, m) in &self.entries {
            out.push(class.vtype.code());
            out.push(class.fuel.code());
            for p in m.flat() {
                put(&mut out, p);
            }
            for p in m.input_min.iter().chain(&m.input_max) {
                put(&mut out, *p);
            }
            put(&mut out, m.output_scale);
        }
        out.extend_from_slice(&(self.floor.table.len() as u64).to_le_bytes());
        for (k, e) in &self.floor.table {
            for bits in [k.grade, k.temp, k.humidity] {
                out.extend_from_slice(&bits.to_le_bytes());
            }
            out.push(k.vtype);
            out.push(k.fuel);
            out.extend_from_slice(&k.age.to_le_bytes());
            put(&mut out, *e);
        }
        match &self.floor.fallback {
            None => out.push(0),
            Some(oracle) => {
                out.push(1);
                for text in [oracle.rates_csv(), oracle.modifiers_csv()] {
                    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
                    out.extend_from_slice(text.as_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SurrogateError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(SurrogateError::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(SurrogateError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let (vt, fu) = (r.u8()?, r.u8()?);
            let vtype = VehicleType::from_code(vt).ok_or_else(|| SurrogateError::Format("vehicle type code".into()))?;
            let fuel = Fuel::from_code(fu).ok_or_else(|| SurrogateError::Format("fuel code".into()))?;
            let class = VehicleClass::new(vtype, fuel).map_err(|e| SurrogateError::Format(e.to_string()))?;
            let mut m = MlpParameters::zeros();
            let mut p = [0.0; TRAINABLE];
            for v in p.iter_mut() {
                *v = r.f64()?;
            }
            m.set_flat(&p);
            for v in m.input_min.iter_mut() {
                *v = r.f64()?;
            }
            for v in m.input_max.iter_mut() {
                *v = r.f64()?;
            }
            m.output_scale = r.f64()?;
            if !m.is_finite() {
                return Err(SurrogateError::Format(format!("non-finite parameters for {class}")));
            }
            if entries.insert(class, m).is_some() {
                return Err(SurrogateError::Format(format!("duplicate entry {class}")));
            }
        }
        let floors = r.u64()? as usize;
        let mut table = BTreeMap::new();
        for _ in 0..floors {
            let key = ScenarioKey {
                grade: r.u64()?,
                temp: r.u64()?,
                humidity: r.u64()?,
                vtype: r.u8()?,
                fuel: r.u8()?,
                age: i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")),
            };
            key.factors()?;
            table.insert(key, r.f64()?);
        }
        let fallback = match r.u8()? {
            0 => None,
            1 => {
                let rates = r.string()?;
                let modifiers = r.string()?;
                Some(OpModeTable::from_csv(&rates, &modifiers).map_err(|e| SurrogateError::Format(e.to_string()))?)
            }
            other => return Err(SurrogateError::Format(format!("fallback flag {other}"))),
        };
        let metadata = r.string()?;
        if r.pos != bytes.len() {
            return Err(SurrogateError::Format("trailing bytes".into()));
        }
        Ok(Self {
            entries,
            floor: IdlingFloor { table, fallback },
            metadata,
        })
    }

    /// Writes the model file atomically; returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<u64, SurrogateError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SurrogateError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SurrogateError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SurrogateError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SurrogateError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SurrogateError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, SurrogateError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String, SurrogateError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SurrogateError::Format("invalid utf-8".into()))
    }
}

/// Trains one entry per class present in `data` and tabulates the floor.
/// Entries train in parallel.
pub fn train_family(
    data: &[EmissionRecord],
    cfg: &TrainConfig,
    fallback: Option<OpModeTable>,
) -> Result<(SurrogateFamily, BTreeMap<VehicleClass, TrainLog>), SurrogateError> {
    use rayon::prelude::*;
    let mut classes: Vec<VehicleClass> = data.iter().map(|r| r.x.class()).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(SurrogateError::Empty);
    }
    let trained: Vec<(VehicleClass, MlpParameters, TrainLog)> = classes
        .par_iter()
        .map(|&c| train(c, data, cfg).map(|(m, log)| (c, m, log)))
        .collect::<Result<_, _>>()?;
    let mut entries = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (c, m, log) in trained {
        entries.insert(c, m);
        logs.insert(c, log);
    }
    Ok((SurrogateFamily::new(entries, IdlingFloor::from_records(data, fallback)), logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car() -> VehicleClass {
        VehicleClass::new(VehicleType::PassengerCar, Fuel::Gasoline).unwrap()
    }

    fn x(grade: f64) -> FactorVector {
        FactorVector::new(grade, 60.0, 55.0, VehicleType::PassengerCar, Fuel::Gasoline, 2015).unwrap()
    }

    fn oracle_records(n_grades: usize) -> Vec<EmissionRecord> {
        let oracle = OpModeTable::default();
        let mut out = Vec::new();
        for g in 0..n_grades {
            let xv = x(-10.0 + 20.0 * g as f64 / (n_grades.max(2) - 1) as f64);
            for vi in 0..34 {
                for ai in 0..16 {
                    let v = vi as f64;
                    let a = -4.5 + 0.5 * ai as f64;
                    if v + a < 0.0 {
                        continue;
                    }
                    out.push(EmissionRecord {
                        v,
                        a,
                        x: xv,
                        e: oracle.rate_at(v, a, &xv),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mape_loss(&[110.0, 90.0], &[100.0, 100.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(mape_loss(&[200.0], &[100.0]).unwrap(), 100.0);
        assert!(matches!(mape_loss(&[], &[]), Err(SurrogateError::Empty)));
        assert!(matches!(mape_loss(&[1.0], &[]), Err(SurrogateError::LengthMismatch(1, 0))));
        // clamped target
        assert_eq!(mape_loss(&[1e-6], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig {
            epochs: 11,
            learning_rate: 1e-2,
            final_learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(0), 1e-2);
        assert!((c.learning_rate_at(10) - 1e-4).abs() < 1e-15);
        assert_eq!(TrainConfig::default().learning_rate_at(150), 1e-3);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let data = oracle_records(3);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            final_learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (m1, log) = train(car(), &data, &cfg).unwrap();
        assert!(log.final_mape < log.initial_mape);
        assert_eq!(log.epoch_mape.len(), 30);
        let trend = log.monotone_trend();
        assert!(trend.last().unwrap() < &log.initial_mape);
        let (m2, _) = train(car(), &data, &cfg).unwrap();
        assert_eq!(m1.flat().map(f64::to_bits), m2.flat().map(f64::to_bits));
    }

    #[test]
    fn training_errors() {
        let data = oracle_records(1);
        let bus = VehicleClass::new(VehicleType::TransitBus, Fuel::Diesel).unwrap();
        assert!(matches!(train(bus, &data, &TrainConfig::default()), Err(SurrogateError::Empty)));
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e300,
            final_learning_rate: 1e300,
            batch_size: 8,
            ..TrainConfig::default()
        };
        match train(car(), &data, &cfg) {
            Err(SurrogateError::Diverged { last_finite, .. }) => assert!(last_finite.is_finite()),
            Ok((m, _)) => assert!(m.is_finite()),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn floor_truncates_and_zeroes_gradient() {
        let mut m = MlpParameters::zeros();
        m.b3 = 0.1;
        m.w3[0] = 0.05;
        m.w1[0][0] = 1.0;
        let oracle = OpModeTable::default();
        let fam = SurrogateFamily::new(BTreeMap::from([(car(), m)]), IdlingFloor::from_records(&[], Some(oracle.clone())));
        let xv = x(0.0);
        let floor = oracle.idling_rate(&xv);
        assert_eq!(fam.predict(20.0, -4.0, &xv).unwrap(), floor);
        assert_eq!(fam.predict_with_grad(20.0, -4.0, &xv).unwrap(), (floor, 0.0, 0.0));
        assert!(fam.predict(0.0, 0.0, &xv).unwrap() >= floor);
        let bus = FactorVector::new(0.0, 60.0, 55.0, VehicleType::TransitBus, Fuel::Diesel, 2015).unwrap();
        assert!(matches!(fam.predict(1.0, 0.0, &bus), Err(SurrogateError::UnknownClass(_))));
        let bare = SurrogateFamily::new(fam.entries().clone(), IdlingFloor::default());
        assert!(matches!(bare.predict(1.0, 0.0, &xv), Err(SurrogateError::NoFloor)));
    }

    #[test]
    fn floor_prefers_table() {
        let data = vec![EmissionRecord {
            v: 0.0,
            a: 0.0,
            x: x(0.0),
            e: 0.75,
        }];
        let f = IdlingFloor::from_records(&data, Some(OpModeTable::default()));
        assert_eq!(f.len(), 1);
        assert_eq!(f.value(&x(0.0)).unwrap(), 0.75);
        assert_eq!(f.value(&x(1.0)).unwrap(), OpModeTable::default().idling_rate(&x(1.0)));
    }

    #[test]
    fn bytes_roundtrip_and_corruption() {
        let data = oracle_records(2);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (mut fam, _) = train_family(&data, &cfg, Some(OpModeTable::default())).unwrap();
        fam.metadata = "{\"seed\":0}".into();
        let bytes = fam.to_bytes();
        let back = SurrogateFamily::from_bytes(&bytes).unwrap();
        assert_eq!(back, fam);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SurrogateFamily::from_bytes(&bad), Err(SurrogateError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(SurrogateFamily::from_bytes(&bad), Err(SurrogateError::Version(9))));
        assert!(SurrogateFamily::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("family.nmnn");
        let fam = SurrogateFamily::new(BTreeMap::from([(car(), MlpParameters::zeros())]), IdlingFloor::default());
        let size = fam.save(&path).unwrap();
        assert_eq!(size, fs::metadata(&path).unwrap().len());
        assert_eq!(SurrogateFamily::load(&path).unwrap(), fam);
        assert!(SurrogateFamily::load(&dir.path().join("missing")).is_err());
    }
}
