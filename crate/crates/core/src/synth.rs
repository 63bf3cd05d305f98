//! Seeded generator of longitudinal diabetes records with planted,
//! learnable prescription dynamics.
//!
//! Each patient carries a latent severity that follows an AR(1) process
//! over medication steps, `s_k = ρ·s_{k−1} + z_k`. The regimen sits on a
//! ring of drug combinations. At step `k` the prescriber sees the
//! innovation `z_k` through independent noise `η_k ~ N(0, r²)`: the regimen
//! steps up the ring when `z_k + η_k > t`, down when `< −t`, and stays
//! otherwise, with `t` chosen so the stay probability is exactly `p_stay`.
//! Visits between medication steps emit diagnosis codes (a severity
//! "thermometer", markers of the current regimen, diabetes codes, a Zipf
//! tail of noise codes) and sparse measurements that read out the severity.
//! Recovering `z_k` needs both the current and the previous severity, so
//! the signal is only available to models that see the history.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, Zipf};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::ehr::{DrugClass, DrugSet, EventKind, EventRecord};
use crate::error::{Error, Result};

/// Diagnosis families whose presence probability rises with severity, one
/// per threshold.
const THERMOMETER_CODES: [&str; 13] = [
    "N18", "H36", "G63", "I10", "E78", "I25", "I63", "L97", "E66", "I70", "N08", "H28", "G99",
];

/// One marker family per drug class, emitted while the class is taken.
const REGIMEN_MARKERS: [&str; 7] = ["Z79", "Z91", "Z92", "Z86", "Z87", "Z88", "Z95"];

const NOISE_LETTERS: [char; 11] = ['J', 'K', 'M', 'A', 'B', 'D', 'F', 'S', 'T', 'W', 'X'];

/// `(code, mean, sd, severity loading)` of each measurement channel.
const CHANNELS: [(&str, f64, f64, f64); 12] = [
    ("FPG", 7.5, 1.8, 0.8),
    ("HBA1C", 7.2, 1.2, 0.8),
    ("SBP", 132.0, 15.0, 0.5),
    ("DBP", 80.0, 9.0, 0.0),
    ("BMI", 25.5, 3.5, 0.0),
    ("TG", 1.9, 0.8, 0.5),
    ("TC", 4.9, 0.9, 0.0),
    ("LDL", 2.9, 0.8, 0.0),
    ("HDL", 1.2, 0.3, -0.5),
    ("CR", 80.0, 20.0, 0.5),
    ("UA", 330.0, 80.0, 0.0),
    ("ALT", 25.0, 12.0, 0.0),
];

/// Default regimen ring: 20 positions over 13 distinct combinations,
/// neighbours always differ. Stationary class frequencies are Insulin 0.50,
/// AGIs 0.25, Biguanides 0.25, Sulfonylureas 0.15, Glinide 0.15, TZDs 0.05,
/// DPP-4 0.
pub fn default_ring() -> Vec<DrugSet> {
    use DrugClass::*;
    let ring: [&[DrugClass]; 20] = [
        &[Insulin],
        &[Insulin, AGIs],
        &[AGIs],
        &[Biguanides],
        &[Insulin],
        &[Biguanides, Sulfonylureas],
        &[Sulfonylureas],
        &[Insulin, Sulfonylureas],
        &[Insulin],
        &[AGIs, Glinide],
        &[Glinide],
        &[Insulin, Glinide],
        &[Insulin],
        &[Biguanides, AGIs],
        &[AGIs],
        &[TZDs],
        &[Insulin],
        &[Insulin, Biguanides],
        &[Insulin],
        &[Biguanides],
    ];
    ring.iter().map(|c| DrugSet::from_classes(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub patients: usize,
    pub seed: u64,
    /// Earliest first visit; first visits spread over `start_spread_days`.
    pub start: NaiveDate,
    pub start_spread_days: u64,
    /// Inclusive range of days between consecutive visits.
    pub visit_interval: (u64, u64),
    /// Probability that a visit carries a prescription.
    pub p_med_visit: f64,
    /// Inclusive range of medication days of an eligible patient.
    pub med_days: (usize, usize),
    /// Inclusive range of medication days of a too-short history.
    pub short_med_days: (usize, usize),
    pub p_eligible: f64,
    /// Probability that a visit day has measurements.
    pub p_meas: f64,
    /// Probability that a channel is read on a measurement day.
    pub p_channel: f64,
    pub p_stay: f64,
    /// AR(1) coefficient of the severity.
    pub rho: f64,
    /// Standard deviation of the prescriber's view of the innovation.
    pub decision_noise: f64,
    /// Slope of the thermometer codes' logistic presence curves.
    pub code_slope: f64,
    pub marker_rate: f64,
    pub marker_false_rate: f64,
    pub diabetes_code_rate: f64,
    pub noise_codes: usize,
    /// Mean number of noise codes per visit.
    pub noise_rate: f64,
    pub ring: Vec<DrugSet>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            patients: 2000,
            seed: 1,
            start: NaiveDate::from_ymd_opt(2008, 1, 1).expect("valid date"),
            start_spread_days: 3 * 365,
            visit_interval: (14, 28),
            p_med_visit: 0.85,
            med_days: (12, 24),
            short_med_days: (3, 10),
            p_eligible: 0.9,
            p_meas: 0.13,
            p_channel: 0.6,
            p_stay: 0.645,
            rho: 0.7,
            decision_noise: 0.3,
            code_slope: 4.0,
            marker_rate: 0.35,
            marker_false_rate: 0.02,
            diabetes_code_rate: 0.6,
            noise_codes: 120,
            noise_rate: 2.0,
            ring: default_ring(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::Config("patients must be >= 1".into()));
        }
        let probs = [
            ("p_med_visit", self.p_med_visit),
            ("p_eligible", self.p_eligible),
            ("p_meas", self.p_meas),
            ("p_channel", self.p_channel),
            ("p_stay", self.p_stay),
            ("marker_rate", self.marker_rate),
            ("marker_false_rate", self.marker_false_rate),
            ("diabetes_code_rate", self.diabetes_code_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} is not a probability")));
            }
        }
        if self.p_med_visit == 0.0 {
            return Err(Error::Config("p_med_visit must be positive".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config(format!("rho={} must lie in (-1, 1)", self.rho)));
        }
        if !(self.decision_noise >= 0.0 && self.decision_noise.is_finite()) {
            return Err(Error::Config("decision_noise must be >= 0".into()));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::Config("noise_rate must be >= 0".into()));
        }
        let (a, b) = self.visit_interval;
        if a == 0 || a > b {
            return Err(Error::Config(format!("bad visit interval {a}..{b}")));
        }
        for (name, (lo, hi)) in [("med_days", self.med_days), ("short_med_days", self.short_med_days)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("bad {name} range {lo}..{hi}")));
            }
        }
        if self.ring.len() < 3 {
            return Err(Error::Config("regimen ring needs at least 3 positions".into()));
        }
        for (i, c) in self.ring.iter().enumerate() {
            if c.is_empty() || *c == self.ring[(i + 1) % self.ring.len()] {
                return Err(Error::Config(format!(
                    "ring position {i} is empty or equals its successor"
                )));
            }
        }
        Ok(())
    }

    /// Decision threshold `t` such that `P(|z + η| ≤ t) = p_stay` with
    /// `z ~ N(0,1)`, `η ~ N(0, r²)`.
    pub fn threshold(&self) -> f64 {
        if self.p_stay >= 1.0 {
            return f64::INFINITY;
        }
        let std = StdNormal::new(0.0, 1.0).expect("standard normal");
        (1.0 + self.decision_noise.powi(2)).sqrt() * std.inverse_cdf(0.5 + self.p_stay / 2.0)
    }

    /// Standard deviation of the stationary severity.
    pub fn severity_sd(&self) -> f64 {
        (1.0 / (1.0 - self.rho * self.rho)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    /// Enough medication days and a diabetes diagnosis.
    pub eligible: bool,
    pub diabetic: bool,
    /// Per medication step.
    pub severity: Vec<f64>,
    pub innovation: Vec<f64>,
    pub ring_position: Vec<usize>,
    pub combos: Vec<String>,
    /// −1, 0 or +1 ring move into each step (0 for the first).
    pub moves: Vec<i8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EmissionCounts {
    pub diagnosis_rows: usize,
    pub medication_rows: usize,
    pub measurement_rows: usize,
    pub visit_days: usize,
    pub medication_days: usize,
    pub measurement_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTruth {
    pub config: GenConfig,
    pub threshold: f64,
    pub ring: Vec<String>,
    /// Distinct combinations of the ring, in first-appearance order.
    pub planted_combos: Vec<String>,
    pub emitted: EmissionCounts,
    pub patients: Vec<PatientTruth>,
}

impl GenTruth {
    /// `(stays, transitions)` over non-first steps of eligible patients.
    pub fn stay_counts(&self) -> (usize, usize) {
        let mut stays = 0;
        let mut total = 0;
        for p in self.patients.iter().filter(|p| p.eligible) {
            for &m in p.moves.iter().skip(1) {
                total += 1;
                stays += usize::from(m == 0);
            }
        }
        (stays, total)
    }

    pub fn stay_rate(&self) -> f64 {
        let (s, t) = self.stay_counts();
        s as f64 / t.max(1) as f64
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn noise_code(i: usize) -> String {
    format!(
        "{}{:02}",
        NOISE_LETTERS[i % NOISE_LETTERS.len()],
        i / NOISE_LETTERS.len()
    )
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

struct Emitter<'a> {
    cfg: &'a GenConfig,
    sev_sd: f64,
    zipf: Option<Zipf<f64>>,
    noise: Option<Poisson<f64>>,
    std: Normal<f64>,
}

impl Emitter<'_> {
    /// Events of one visit day at severity `s` while taking `regimen`.
    #[allow(clippy::too_many_arguments)]
    fn visit(
        &self,
        rng: &mut ChaCha8Rng,
        pid: &str,
        date: NaiveDate,
        s: f64,
        regimen: DrugSet,
        first: bool,
        diabetic: bool,
        out: &mut Vec<EventRecord>,
        counts: &mut EmissionCounts,
    ) {
        let cfg = self.cfg;
        let mut dx = |code: String, out: &mut Vec<EventRecord>| {
            out.push(EventRecord {
                patient_id: pid.to_string(),
                date,
                kind: EventKind::Diagnosis,
                code,
                value: None,
            });
            counts.diagnosis_rows += 1;
        };
        if first || rng.random_bool(cfg.diabetes_code_rate) {
            let code = if !diabetic {
                "R73.0"
            } else {
                ["E11.9", "E11.65", "E14.9"][rng.random_range(0..3)]
            };
            dx(code.to_string(), out);
        }
        for (j, fam) in THERMOMETER_CODES.iter().enumerate() {
            let theta = -3.0 + 0.5 * j as f64;
            let p = crate::numerics::sigmoid(cfg.code_slope * (s / self.sev_sd * 1.5 - theta));
            if rng.random_bool(p) {
                dx(format!("{fam}.{}", rng.random_range(0..10)), out);
            }
        }
        for class in DrugClass::ALL {
            let rate = if regimen.contains(class) {
                cfg.marker_rate
            } else {
                cfg.marker_false_rate
            };
            if rng.random_bool(rate) {
                dx(
                    format!("{}.{}", REGIMEN_MARKERS[class.ordinal()], rng.random_range(0..10)),
                    out,
                );
            }
        }
        if let (Some(zipf), Some(poisson)) = (&self.zipf, &self.noise) {
            let n = poisson.sample(rng) as usize;
            for _ in 0..n {
                let i = zipf.sample(rng) as usize - 1;
                dx(format!("{}.{}", noise_code(i), rng.random_range(0..10)), out);
            }
        }
        if rng.random_bool(cfg.p_meas) {
            let mut any = false;
            for &(code, mean, sd, load) in &CHANNELS {
                if !rng.random_bool(cfg.p_channel) {
                    continue;
                }
                let e: f64 = self.std.sample(rng);
                let v = mean + sd * (load * s / self.sev_sd + (1.0 - load * load).sqrt() * e);
                out.push(EventRecord {
                    patient_id: pid.to_string(),
                    date,
                    kind: EventKind::Measurement,
                    code: code.to_string(),
                    value: Some(round3(v)),
                });
                counts.measurement_rows += 1;
                any = true;
            }
            counts.measurement_days += usize::from(any);
        }
    }
}

/// Generates the event log of `config.patients` patients plus the latent
/// truth behind it.
pub fn generate(config: &GenConfig) -> Result<(Vec<EventRecord>, GenTruth)> {
    config.validate()?;
    let t = config.threshold();
    let emitter = Emitter {
        cfg: config,
        sev_sd: config.severity_sd(),
        zipf: (config.noise_codes > 0).then(|| Zipf::new(config.noise_codes as f64, 1.1).expect("valid zipf")),
        noise: (config.noise_rate > 0.0 && config.noise_codes > 0)
            .then(|| Poisson::new(config.noise_rate).expect("valid poisson")),
        std: Normal::new(0.0, 1.0).expect("standard normal"),
    };
    let ring_len = config.ring.len();
    let mut events = Vec::new();
    let mut counts = EmissionCounts::default();
    let mut patients = Vec::with_capacity(config.patients);
    for idx in 0..config.patients {
        let mut rng = patient_rng(config.seed, idx);
        let pid = format!("P{idx:06}");
        let eligible = rng.random_bool(config.p_eligible);
        let (diabetic, n_med) = if eligible {
            (true, rng.random_range(config.med_days.0..=config.med_days.1))
        } else if rng.random_bool(0.5) {
            (false, rng.random_range(config.med_days.0..=config.med_days.1))
        } else {
            (
                true,
                rng.random_range(config.short_med_days.0..=config.short_med_days.1),
            )
        };
        let mut date = config.start + Days::new(rng.random_range(0..=config.start_spread_days));
        let mut truth = PatientTruth {
            patient_id: pid.clone(),
            eligible,
            diabetic,
            severity: Vec::with_capacity(n_med),
            innovation: Vec::with_capacity(n_med),
            ring_position: Vec::with_capacity(n_med),
            combos: Vec::with_capacity(n_med),
            moves: Vec::with_capacity(n_med),
        };
        let mut s: f64 = emitter.std.sample(&mut rng) * config.severity_sd();
        let mut z = s;
        let mut pos = rng.random_range(0..ring_len);
        let mut mv = 0i8;
        let mut regimen = DrugSet::EMPTY;
        let mut first = true;
        let mut k = 0;
        while k < n_med {
            let is_med = rng.random_bool(config.p_med_visit);
            emitter.visit(
                &mut rng,
                &pid,
                date,
                s,
                regimen,
                first,
                diabetic,
                &mut events,
                &mut counts,
            );
            counts.visit_days += 1;
            first = false;
            if is_med {
                let combo = config.ring[pos];
                for class in combo.classes() {
                    events.push(EventRecord {
                        patient_id: pid.clone(),
                        date,
                        kind: EventKind::Medication,
                        code: class.name().to_string(),
                        value: None,
                    });
                    counts.medication_rows += 1;
                }
                counts.medication_days += 1;
                truth.severity.push(s);
                truth.innovation.push(z);
                truth.ring_position.push(pos);
                truth.combos.push(combo.to_string());
                truth.moves.push(mv);
                regimen = combo;
                k += 1;
                // state of the next medication step
                z = emitter.std.sample(&mut rng);
                s = config.rho * s + z;
                let seen = z + config.decision_noise * emitter.std.sample(&mut rng);
                mv = if seen > t {
                    1
                } else if seen < -t {
                    -1
                } else {
                    0
                };
                pos = (pos as i64 + i64::from(mv)).rem_euclid(ring_len as i64) as usize;
            }
            date = date + Days::new(rng.random_range(config.visit_interval.0..=config.visit_interval.1));
        }
        patients.push(truth);
    }
    let mut planted = Vec::new();
    for c in &config.ring {
        let name = c.to_string();
        if !planted.contains(&name) {
            planted.push(name);
        }
    }
    let truth = GenTruth {
        config: config.clone(),
        threshold: t,
        ring: config.ring.iter().map(DrugSet::to_string).collect(),
        planted_combos: planted,
        emitted: counts,
        patients,
    };
    Ok((events, truth))
}

/// Accuracy ceilings of the true generating rule on the combination task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesCeiling {
    /// Non-first medication steps, for a predictor that knows the ring
    /// position and the exact innovation `z_k` (only `η_k` is unknown).
    pub transition: f64,
    /// First prescriptions: the most frequent ring combination.
    pub head: f64,
}

/// Computes the ceiling by integrating the decision rule over `z ~ N(0,1)`.
pub fn bayes_ceiling(config: &GenConfig) -> Result<BayesCeiling> {
    config.validate()?;
    let n = config.ring.len();
    let mut freq: BTreeMap<DrugSet, usize> = BTreeMap::new();
    for &c in &config.ring {
        *freq.entry(c).or_default() += 1;
    }
    let head = *freq.values().max().expect("non-empty ring") as f64 / n as f64;
    let t = config.threshold();
    if t.is_infinite() {
        return Ok(BayesCeiling { transition: 1.0, head });
    }
    let std = StdNormal::new(0.0, 1.0).expect("standard normal");
    let r = config.decision_noise;
    // P(up), P(down) given z
    let probs = |z: f64| -> (f64, f64) {
        if r == 0.0 {
            (f64::from(u8::from(z > t)), f64::from(u8::from(z < -t)))
        } else {
            (1.0 - std.cdf((t - z) / r), std.cdf((-t - z) / r))
        }
    };
    let (lo, hi, steps) = (-9.0, 9.0, 36_000);
    let dz = (hi - lo) / steps as f64;
    let mut total = 0.0;
    for pos in 0..n {
        let (prev, next) = (config.ring[(pos + n - 1) % n], config.ring[(pos + 1) % n]);
        let stay_combo = config.ring[pos];
        let mut acc = 0.0;
        for i in 0..=steps {
            let z = lo + i as f64 * dz;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            let (up, down) = probs(z);
            let stay = (1.0 - up - down).max(0.0);
            let mut by_combo: Vec<(DrugSet, f64)> = vec![(stay_combo, stay)];
            for (c, p) in [(next, up), (prev, down)] {
                match by_combo.iter_mut().find(|(k, _)| *k == c) {
                    Some(e) => e.1 += p,
                    None => by_combo.push((c, p)),
                }
            }
            let best = by_combo.iter().map(|(_, p)| *p).fold(0.0, f64::max);
            acc += w * best * std.pdf(z);
        }
        total += acc * dz;
    }
    Ok(BayesCeiling {
        transition: (total / n as f64).min(1.0),
        head,
    })
}

/// Ceiling on non-first steps; see [`bayes_ceiling`].
pub fn bayes_rate(config: &GenConfig) -> Result<f64> {
    Ok(bayes_ceiling(config)?.transition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{ingest_reader, write_events_csv};

    fn small(patients: usize, seed: u64) -> GenConfig {
        GenConfig {
            patients,
            seed,
            ..GenConfig::default()
        }
    }

    fn csv_bytes(events: &[EventRecord]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_events_csv(&mut buf, events).unwrap();
        buf
    }

    #[test]
    fn ring_shape() {
        let ring = default_ring();
        assert_eq!(ring.len(), 20);
        let distinct: std::collections::BTreeSet<_> = ring.iter().collect();
        assert_eq!(distinct.len(), 13);
        GenConfig::default().validate().unwrap();
        // class frequencies close to the target class imbalance
        let target = [0.2286, 0.1434, 0.1406, 0.0327, 0.2642, 0.0015, 0.4868];
        for class in DrugClass::ALL {
            let f = ring.iter().filter(|c| c.contains(class)).count() as f64 / 20.0;
            assert!((f - target[class.ordinal()]).abs() <= 0.05, "{class}: {f}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(small(0, 1).validate().is_err());
        assert!(GenConfig {
            p_stay: 1.5,
            ..small(1, 1)
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            rho: 1.0,
            ..small(1, 1)
        }
        .validate()
        .is_err());
        let mut ring = default_ring();
        ring[1] = ring[0];
        assert!(GenConfig { ring, ..small(1, 1) }.validate().is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, ta) = generate(&small(30, 7)).unwrap();
        let (b, tb) = generate(&small(30, 7)).unwrap();
        assert_eq!(csv_bytes(&a), csv_bytes(&b));
        assert_eq!(ta.to_json(), tb.to_json());
        let (c, _) = generate(&small(30, 8)).unwrap();
        assert_ne!(csv_bytes(&a), csv_bytes(&c));
    }

    #[test]
    fn patients_are_generated_independently() {
        let (_, t10) = generate(&small(10, 3)).unwrap();
        let (_, t20) = generate(&small(20, 3)).unwrap();
        assert_eq!(t10.patients[..], t20.patients[..10]);
    }

    #[test]
    fn forced_twelve_medication_days_pass_the_cohort_rule() {
        let cfg = GenConfig {
            patients: 1,
            p_eligible: 1.0,
            med_days: (12, 12),
            ..GenConfig::default()
        };
        let (events, truth) = generate(&cfg).unwrap();
        assert_eq!(truth.patients[0].combos.len(), 12);
        let ing = ingest_reader(csv_bytes(&events).as_slice()).unwrap();
        assert_eq!(ing.rejected, 0);
        assert!(crate::preprocess::is_eligible(&ing.timelines[0], 10));
    }

    #[test]
    fn stay_rate_and_clean_ingest() {
        let (events, truth) = generate(&small(800, 11)).unwrap();
        let (_, n) = truth.stay_counts();
        assert!(n > 10_000);
        // binomial sd at n≈12k is ≈0.0044
        assert!((truth.stay_rate() - 0.645).abs() < 0.015, "{}", truth.stay_rate());
        let ing = ingest_reader(csv_bytes(&events).as_slice()).unwrap();
        assert_eq!(ing.rejected, 0);
        assert_eq!(ing.rows, events.len());
        assert_eq!(
            events.len(),
            truth.emitted.diagnosis_rows + truth.emitted.medication_rows + truth.emitted.measurement_rows
        );
        // every move changes the combination
        for p in &truth.patients {
            for k in 1..p.combos.len() {
                assert_eq!(p.moves[k] == 0, p.combos[k] == p.combos[k - 1]);
            }
        }
        let meas_ratio = truth.emitted.measurement_days as f64 / truth.emitted.medication_days as f64;
        assert!((0.08..0.25).contains(&meas_ratio), "{meas_ratio}");
    }

    #[test]
    fn threshold_matches_stay_probability() {
        let cfg = GenConfig::default();
        let t = cfg.threshold();
        let std = StdNormal::new(0.0, (1.0f64 + 0.09).sqrt()).unwrap();
        assert!((std.cdf(t) - std.cdf(-t) - 0.645).abs() < 1e-9);
    }

    #[test]
    fn ceilings() {
        let noiseless = GenConfig {
            decision_noise: 0.0,
            ..GenConfig::default()
        };
        assert!((bayes_rate(&noiseless).unwrap() - 1.0).abs() < 1e-6);
        let persistent = GenConfig {
            p_stay: 1.0,
            ..GenConfig::default()
        };
        assert_eq!(bayes_rate(&persistent).unwrap(), 1.0);
        let c = bayes_ceiling(&GenConfig::default()).unwrap();
        assert!(c.transition > 0.645 && c.transition < 1.0, "{c:?}");
        assert!((c.head - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ceiling_matches_simulated_rule() {
        let cfg = GenConfig::default();
        let c = bayes_ceiling(&cfg).unwrap();
        let t = cfg.threshold();
        let std = StdNormal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = cfg.ring.len();
        let (mut hits, trials) = (0usize, 200_000);
        for _ in 0..trials {
            let pos = rng.random_range(0..n);
            let z: f64 = normal.sample(&mut rng);
            let seen = z + cfg.decision_noise * normal.sample(&mut rng);
            let actual = if seen > t {
                cfg.ring[(pos + 1) % n]
            } else if seen < -t {
                cfg.ring[(pos + n - 1) % n]
            } else {
                cfg.ring[pos]
            };
            let up = 1.0 - std.cdf((t - z) / cfg.decision_noise);
            let down = std.cdf((-t - z) / cfg.decision_noise);
            let mut opts = vec![(cfg.ring[pos], 1.0 - up - down)];
            for (cmb, p) in [(cfg.ring[(pos + 1) % n], up), (cfg.ring[(pos + n - 1) % n], down)] {
                match opts.iter_mut().find(|(k, _)| *k == cmb) {
                    Some(e) => e.1 += p,
                    None => opts.push((cmb, p)),
                }
            }
            let guess = opts.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
            hits += usize::from(guess == actual);
        }
        let sim = hits as f64 / trials as f64;
        assert!((sim - c.transition).abs() < 0.005, "{sim} vs {}", c.transition);
    }
}
