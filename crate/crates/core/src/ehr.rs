//! Domain types, code vocabularies and ingestion of the raw event log.
//!
//! The event log is a UTF-8 CSV file with the header
//! `patient_id,date,kind,code,value`. `kind` is one of `diagnosis`,
//! `medication` or `measurement`; `value` is present exactly for
//! measurements. Medication codes are drug-class names (see [`DrugClass`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EVENT_HEADER: [&str; 5] = ["patient_id", "date", "kind", "code", "value"];

/// Rows rejected above this fraction make ingestion fail.
pub const MAX_REJECT_RATE: f64 = 0.5;

/// Default number of retained 3-digit ICD codes.
pub const DEFAULT_ICD_CAPACITY: usize = 350;

/// Default number of measurement channels.
pub const DEFAULT_MEAS_CAPACITY: usize = 124;

/// Upper bound on distinct nonempty drug combinations.
pub const MAX_COMBOS: usize = 127;

/// The seven hypoglycemia drug classes. The ordinal is the bit position
/// used by [`DrugSet`] and the output unit of the multi-label head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DrugClass {
    Biguanides = 0,
    Sulfonylureas = 1,
    Glinide = 2,
    TZDs = 3,
    AGIs = 4,
    DPP4 = 5,
    Insulin = 6,
}

impl DrugClass {
    pub const COUNT: usize = 7;

    pub const ALL: [DrugClass; 7] = [
        DrugClass::Biguanides,
        DrugClass::Sulfonylureas,
        DrugClass::Glinide,
        DrugClass::TZDs,
        DrugClass::AGIs,
        DrugClass::DPP4,
        DrugClass::Insulin,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DrugClass::Biguanides => "Biguanides",
            DrugClass::Sulfonylureas => "Sulfonylureas",
            DrugClass::Glinide => "Glinide",
            DrugClass::TZDs => "TZDs",
            DrugClass::AGIs => "AGIs",
            DrugClass::DPP4 => "DPP-4",
            DrugClass::Insulin => "Insulin",
        }
    }
}

impl fmt::Display for DrugClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DrugClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let class = match norm.as_str() {
            "biguanides" | "biguanide" => DrugClass::Biguanides,
            "sulfonylureas" | "sulfonylurea" => DrugClass::Sulfonylureas,
            "glinide" | "glinides" => DrugClass::Glinide,
            "tzds" | "tzd" | "thiazolidinediones" => DrugClass::TZDs,
            "agis" | "agi" | "alphaglucosidaseinhibitors" => DrugClass::AGIs,
            "dpp4" | "dipeptidylpeptidase4" => DrugClass::DPP4,
            "insulin" => DrugClass::Insulin,
            _ => return Err(Error::Data(format!("unknown drug class {s:?}"))),
        };
        Ok(class)
    }
}

/// A set of drug classes packed into 7 bits (multi-hot label).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct DrugSet(u8);

impl DrugSet {
    pub const EMPTY: DrugSet = DrugSet(0);

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits >= 1 << DrugClass::COUNT {
            return Err(Error::Data(format!("drug bit pattern {bits:#x} exceeds 7 bits")));
        }
        Ok(DrugSet(bits))
    }

    pub fn from_classes(classes: &[DrugClass]) -> Self {
        classes.iter().fold(DrugSet::EMPTY, |s, &c| s.with(c))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, class: DrugClass) -> Self {
        DrugSet(self.0 | (1 << class.ordinal()))
    }

    pub fn union(self, other: DrugSet) -> Self {
        DrugSet(self.0 | other.0)
    }

    pub fn contains(self, class: DrugClass) -> bool {
        self.0 & (1 << class.ordinal()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn classes(self) -> impl Iterator<Item = DrugClass> {
        DrugClass::ALL.into_iter().filter(move |&c| self.contains(c))
    }

    /// Multi-hot encoding in ordinal order.
    pub fn to_vec(self) -> [f64; 7] {
        let mut out = [0.0; 7];
        for (i, slot) in out.iter_mut().enumerate() {
            if self.0 & (1 << i) != 0 {
                *slot = 1.0;
            }
        }
        out
    }
}

impl fmt::Display for DrugSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.classes().map(DrugClass::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for DrugSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(DrugSet::EMPTY);
        }
        s.split('+')
            .map(|part| part.parse::<DrugClass>())
            .try_fold(DrugSet::EMPTY, |acc, c| Ok(acc.with(c?)))
    }
}

/// Index into [`DrugComboVocab`]; `None` is the reserved UNKNOWN bucket.
pub type ComboLabel = Option<usize>;

/// Distinct nonempty drug combinations observed in training labels, in
/// first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DrugComboVocab {
    patterns: Vec<DrugSet>,
    index: HashMap<DrugSet, usize>,
}

impl DrugComboVocab {
    pub fn from_patterns(patterns: Vec<DrugSet>) -> Result<Self> {
        let mut index = HashMap::with_capacity(patterns.len());
        for (i, &p) in patterns.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Data("empty drug combination in vocabulary".into()));
            }
            if index.insert(p, i).is_some() {
                return Err(Error::Data(format!("duplicate drug combination {p}")));
            }
        }
        if patterns.len() > MAX_COMBOS {
            return Err(Error::Data("more than 127 drug combinations".into()));
        }
        Ok(Self { patterns, index })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[DrugSet] {
        &self.patterns
    }

    pub fn encode(&self, pattern: DrugSet) -> ComboLabel {
        self.index.get(&pattern).copied()
    }

    pub fn decode(&self, index: usize) -> Option<DrugSet> {
        self.patterns.get(index).copied()
    }

    pub fn to_text(&self) -> String {
        self.patterns.iter().map(|p| format!("{p}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let patterns = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<DrugSet>>>()?;
        Self::from_patterns(patterns)
    }
}

/// Builds the combination vocabulary from training labels.
pub fn build_combo_vocab(labels: &[DrugSet]) -> Result<DrugComboVocab> {
    let mut patterns = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &label in labels {
        if label.is_empty() {
            return Err(Error::Data("zero drug label passed to combination vocabulary".into()));
        }
        if seen.insert(label) {
            patterns.push(label);
        }
    }
    DrugComboVocab::from_patterns(patterns)
}

/// Truncates an ICD-10 code to its 3-character family, uppercased.
pub fn map_icd_3digit(code: &str) -> String {
    code.trim().chars().take(3).collect::<String>().to_uppercase()
}

/// Retained 3-digit ICD codes, most frequent first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IcdVocab {
    capacity: usize,
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl IcdVocab {
    pub fn from_codes(capacity: usize, codes: Vec<String>) -> Result<Self> {
        if codes.len() > capacity {
            return Err(Error::Data(format!(
                "{} ICD codes exceed capacity {capacity}",
                codes.len()
            )));
        }
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate ICD code {c}")));
            }
        }
        Ok(Self { capacity, codes, index })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn dim(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn to_text(&self) -> String {
        self.codes.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn from_text(capacity: usize, text: &str) -> Result<Self> {
        let codes = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::from_codes(capacity, codes)
    }
}

/// Counts, per 3-digit code, the patient-day groups containing it.
pub fn icd_day_counts(timelines: &[PatientTimeline]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in timelines {
        for day in &t.days {
            let mut day_codes: Vec<String> = day
                .events
                .iter()
                .filter(|e| e.kind == EventKind::Diagnosis)
                .map(|e| map_icd_3digit(&e.code))
                .collect();
            day_codes.sort();
            day_codes.dedup();
            for c in day_codes {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Orders codes by descending count, ties lexicographic, keeping `k`.
pub fn top_k_codes(counts: &BTreeMap<String, usize>, k: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(c, _)| c.clone()).collect()
}

/// Keeps the `capacity` most frequent 3-digit codes (frequency = number of
/// patient-day groups containing the code).
pub fn build_icd_vocab(timelines: &[PatientTimeline], capacity: usize) -> Result<IcdVocab> {
    if capacity == 0 {
        return Err(Error::Config("ICD vocabulary capacity must be >= 1".into()));
    }
    let counts = icd_day_counts(timelines);
    if counts.len() < capacity {
        log::warn!(
            "only {} distinct ICD codes available for capacity {capacity}",
            counts.len()
        );
    }
    IcdVocab::from_codes(capacity, top_k_codes(&counts, capacity))
}

/// Population statistics of one measurement channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn is_constant(&self) -> bool {
        self.std == 0.0
    }
}

/// Measurement channels with their normalization statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementVocab {
    codes: Vec<String>,
    index: HashMap<String, usize>,
    stats: Vec<ChannelStats>,
}

impl MeasurementVocab {
    /// Channels with unset statistics (μ = 0, σ = 0).
    pub fn from_codes(codes: Vec<String>) -> Result<Self> {
        let stats = vec![ChannelStats { mean: 0.0, std: 0.0 }; codes.len()];
        Self::with_stats(codes, stats)
    }

    pub fn with_stats(codes: Vec<String>, stats: Vec<ChannelStats>) -> Result<Self> {
        if codes.len() != stats.len() {
            return Err(Error::Data("measurement codes and stats differ in length".into()));
        }
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if c.contains(',') {
                return Err(Error::Data(format!("measurement code {c:?} contains a comma")));
            }
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate measurement code {c}")));
            }
        }
        for s in &stats {
            if !(s.std >= 0.0) || !s.mean.is_finite() || !s.std.is_finite() {
                return Err(Error::Data("invalid channel statistics".into()));
            }
        }
        Ok(Self { codes, index, stats })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    pub fn channel(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn constant_channels(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.stats[i].is_constant()).collect()
    }

    /// Lines of `code,μ,σ` with round-trip decimal precision.
    pub fn to_text(&self) -> String {
        self.codes
            .iter()
            .zip(&self.stats)
            .map(|(c, s)| format!("{c},{},{}\n", s.mean, s.std))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut codes = Vec::new();
        let mut stats = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!("bad measurement vocab line {line:?}")));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number in vocab line {line:?}")))
            };
            codes.push(parts[0].trim().to_string());
            stats.push(ChannelStats {
                mean: parse(parts[1])?,
                std: parse(parts[2])?,
            });
        }
        Self::with_stats(codes, stats)
    }
}

/// Selects the `capacity` measurement codes observed on the most
/// patient-days (ties lexicographic). Statistics are left unset.
pub fn build_measurement_vocab(timelines: &[PatientTimeline], capacity: usize) -> Result<MeasurementVocab> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in timelines {
        for day in &t.days {
            let mut codes: Vec<&str> = day
                .events
                .iter()
                .filter(|e| e.kind == EventKind::Measurement)
                .map(|e| e.code.as_str())
                .collect();
            codes.sort_unstable();
            codes.dedup();
            for c in codes {
                *counts.entry(c.to_string()).or_insert(0) += 1;
            }
        }
    }
    MeasurementVocab::from_codes(top_k_codes(&counts, capacity))
}

/// Computes μ and population σ (divide by n) per channel over every
/// observed value. Channels never observed get μ = 0, σ = 0.
pub fn build_measurement_stats(timelines: &[PatientTimeline], vocab: &MeasurementVocab) -> Result<MeasurementVocab> {
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); vocab.len()];
    for t in timelines {
        for day in &t.days {
            for e in &day.events {
                if e.kind != EventKind::Measurement {
                    continue;
                }
                if let (Some(ch), Some(v)) = (vocab.channel(&e.code), e.value) {
                    values[ch].push(v);
                }
            }
        }
    }
    let stats = values
        .iter()
        .enumerate()
        .map(|(ch, vals)| {
            if vals.is_empty() {
                log::warn!("measurement channel {} never observed", vocab.codes()[ch]);
                return ChannelStats { mean: 0.0, std: 0.0 };
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            ChannelStats { mean, std: var.sqrt() }
        })
        .collect();
    MeasurementVocab::with_stats(vocab.codes().to_vec(), stats)
}

/// The three vocabularies a dataset or model is tied to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabularies {
    pub icd: IcdVocab,
    pub meas: MeasurementVocab,
    pub combos: DrugComboVocab,
}

impl Vocabularies {
    /// Hex SHA-256 over sizes and the canonical text of every vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "icd:{}:{}\n{}meas:{}\n{}combo:{}\n{}",
            self.icd.capacity(),
            self.icd.len(),
            self.icd.to_text(),
            self.meas.len(),
            self.meas.to_text(),
            self.combos.len(),
            self.combos.to_text()
        ));
        hex::encode(h.finalize())
    }

    /// Width of one visit vector: ICD dims plus measurement channels.
    pub fn visit_width(&self) -> usize {
        self.icd.len() + self.meas.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Diagnosis,
    Medication,
    Measurement,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "diagnosis",
            EventKind::Medication => "medication",
            EventKind::Measurement => "measurement",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" => Ok(EventKind::Diagnosis),
            "medication" => Ok(EventKind::Medication),
            "measurement" => Ok(EventKind::Measurement),
            other => Err(Error::Data(format!("unknown event kind {other:?}"))),
        }
    }
}

/// One row of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    pub kind: EventKind,
    pub code: String,
    pub value: Option<f64>,
}

impl EventRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Data("empty patient id".into()));
        }
        if self.code.is_empty() {
            return Err(Error::Data("empty code".into()));
        }
        match (self.kind, self.value) {
            (EventKind::Measurement, Some(v)) if v.is_finite() => Ok(()),
            (EventKind::Measurement, Some(_)) => Err(Error::Data("non-finite measurement".into())),
            (EventKind::Measurement, None) => Err(Error::Data("measurement without value".into())),
            (_, Some(_)) => Err(Error::Data(format!("{} row carries a value", self.kind))),
            (EventKind::Medication, None) => self.code.parse::<DrugClass>().map(|_| ()),
            (EventKind::Diagnosis, None) => Ok(()),
        }
    }
}

/// All events of one patient on one date.
#[derive(Debug, Clone, PartialEq)]
pub struct DayGroup {
    pub date: NaiveDate,
    pub events: Vec<EventRecord>,
}

/// Events of one patient grouped by strictly ascending date.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub days: Vec<DayGroup>,
}

impl PatientTimeline {
    pub fn event_count(&self) -> usize {
        self.days.iter().map(|d| d.events.len()).sum()
    }
}

fn event_order(a: &EventRecord, b: &EventRecord) -> std::cmp::Ordering {
    a.kind
        .cmp(&b.kind)
        .then_with(|| a.code.cmp(&b.code))
        .then_with(|| a.value.partial_cmp(&b.value).unwrap_or(std::cmp::Ordering::Equal))
}

/// Groups events into per-patient timelines ordered by patient id. Events
/// within a day are put in canonical order, so downstream results do not
/// depend on row order.
pub fn timelines_from_events(events: impl IntoIterator<Item = EventRecord>) -> Vec<PatientTimeline> {
    let mut by_patient: BTreeMap<String, BTreeMap<NaiveDate, Vec<EventRecord>>> = BTreeMap::new();
    for e in events {
        by_patient
            .entry(e.patient_id.clone())
            .or_default()
            .entry(e.date)
            .or_default()
            .push(e);
    }
    by_patient
        .into_iter()
        .map(|(patient_id, days)| PatientTimeline {
            patient_id,
            days: days
                .into_iter()
                .map(|(date, mut events)| {
                    events.sort_by(event_order);
                    DayGroup { date, events }
                })
                .collect(),
        })
        .collect()
}

/// Result of reading an event log.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub timelines: Vec<PatientTimeline>,
    pub rows: usize,
    pub rejected: usize,
    /// Up to the first 20 rejection messages.
    pub diagnostics: Vec<String>,
}

fn parse_row(record: &csv::StringRecord) -> Result<EventRecord> {
    if record.len() != 5 {
        return Err(Error::Data(format!("expected 5 fields, found {}", record.len())));
    }
    let date = NaiveDate::parse_from_str(record[1].trim(), "%Y-%m-%d")
        .map_err(|e| Error::Data(format!("bad date {:?}: {e}", &record[1])))?;
    let kind: EventKind = record[2].parse()?;
    let raw_value = record[4].trim();
    let value = if raw_value.is_empty() {
        None
    } else {
        Some(
            raw_value
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("non-numeric value {raw_value:?}")))?,
        )
    };
    let event = EventRecord {
        patient_id: record[0].trim().to_string(),
        date,
        kind,
        code: record[3].trim().to_string(),
        value,
    };
    event.validate()?;
    Ok(event)
}

pub fn ingest_reader<R: Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields != EVENT_HEADER {
        return Err(Error::Data(format!(
            "header {:?} does not match {}",
            fields,
            EVENT_HEADER.join(",")
        )));
    }
    let mut events = Vec::new();
    let mut rows = 0;
    let mut rejected = 0;
    let mut diagnostics = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        rows += 1;
        let line = i + 2;
        let parsed = rec
            .map_err(|e| Error::Data(format!("malformed csv: {e}")))
            .and_then(|r| parse_row(&r));
        match parsed {
            Ok(e) => events.push(e),
            Err(err) => {
                rejected += 1;
                if diagnostics.len() < 20 {
                    diagnostics.push(format!("line {line}: {err}"));
                }
            }
        }
    }
    if rows > 0 && rejected as f64 / rows as f64 > MAX_REJECT_RATE {
        return Err(Error::Data(format!(
            "{rejected} of {rows} rows rejected; first: {}",
            diagnostics.first().map(String::as_str).unwrap_or("")
        )));
    }
    for d in &diagnostics {
        log::warn!("rejected {d}");
    }
    Ok(Ingested {
        timelines: timelines_from_events(events),
        rows,
        rejected,
        diagnostics,
    })
}

pub fn ingest_events(path: &Path) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file))
}

pub fn write_events_csv<W: Write>(writer: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    w.write_record(EVENT_HEADER).map_err(to_err)?;
    for e in events {
        let date = e.date.format("%Y-%m-%d").to_string();
        let value = e.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            e.patient_id.as_str(),
            date.as_str(),
            e.kind.as_str(),
            e.code.as_str(),
            value.as_str(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(pid: &str, date: &str, kind: EventKind, code: &str, value: Option<f64>) -> EventRecord {
        EventRecord {
            patient_id: pid.into(),
            date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            kind,
            code: code.into(),
            value,
        }
    }

    #[test]
    fn icd_mapping() {
        assert_eq!(map_icd_3digit("E11.901"), "E11");
        assert_eq!(map_icd_3digit("E14"), "E14");
        assert_eq!(map_icd_3digit("i10.x02"), "I10");
        assert_eq!(map_icd_3digit("k5"), "K5");
    }

    #[test]
    fn empty_file_with_header() {
        let ing = ingest_reader("patient_id,date,kind,code,value\n".as_bytes()).unwrap();
        assert!(ing.timelines.is_empty());
        assert_eq!(ing.rows, 0);
    }

    #[test]
    fn groups_rows_by_date() {
        let csv = "patient_id,date,kind,code,value\n\
                   p1,2015-06-15,measurement,FPG,8.13\n\
                   p1,2015-06-15,diagnosis,E14,\n\
                   p1,2015-08-24,medication,Biguanides,\n";
        let ing = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(ing.timelines.len(), 1);
        assert_eq!(ing.timelines[0].days.len(), 2);
        assert_eq!(ing.rejected, 0);
    }

    #[test]
    fn bad_rows_are_rejected_not_fatal() {
        let csv = "patient_id,date,kind,code,value\n\
                   p1,2015-06-15,measurement,FPG,high\n\
                   p1,2015-06-15,diagnosis,E14,\n\
                   p1,2015-06-16,diagnosis,E11,\n";
        let ing = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(ing.rejected, 1);
        assert_eq!(ing.timelines[0].event_count(), 2);
        assert!(ing.diagnostics[0].contains("line 2"));
    }

    #[test]
    fn majority_rejection_is_fatal() {
        let csv = "patient_id,date,kind,code,value\n\
                   p1,2015-13-15,diagnosis,E14,\n\
                   p1,2015-06-15,measurement,FPG,\n\
                   p1,2015-06-16,diagnosis,E11,\n";
        assert!(ingest_reader(csv.as_bytes()).is_err());
    }

    #[test]
    fn wrong_header_is_an_error() {
        assert!(ingest_reader("pid,date,kind,code,value\n".as_bytes()).is_err());
    }

    #[test]
    fn icd_vocab_top_k_and_ties() {
        let mut events = Vec::new();
        for (code, n) in [("A01", 5), ("B01", 3), ("C01", 1)] {
            for d in 0..n {
                events.push(ev(
                    "p",
                    &format!("2015-01-{:02}", d + 1),
                    EventKind::Diagnosis,
                    code,
                    None,
                ));
            }
        }
        let tl = timelines_from_events(events);
        let v = build_icd_vocab(&tl, 2).unwrap();
        assert_eq!(v.codes(), ["A01", "B01"]);

        let events = (0..5)
            .flat_map(|d| {
                let date = format!("2015-01-{:02}", d + 1);
                [
                    ev("p", &date, EventKind::Diagnosis, "B01", None),
                    ev("p", &date, EventKind::Diagnosis, "A01", None),
                ]
            })
            .collect::<Vec<_>>();
        let v = build_icd_vocab(&timelines_from_events(events), 1).unwrap();
        assert_eq!(v.codes(), ["A01"]);
    }

    #[test]
    fn icd_vocab_counts_days_not_rows() {
        let events = vec![
            ev("p", "2015-01-01", EventKind::Diagnosis, "A01.1", None),
            ev("p", "2015-01-01", EventKind::Diagnosis, "A01.2", None),
            ev("p", "2015-01-01", EventKind::Diagnosis, "A01.3", None),
            ev("p", "2015-01-02", EventKind::Diagnosis, "B01", None),
            ev("q", "2015-01-02", EventKind::Diagnosis, "B01", None),
        ];
        let counts = icd_day_counts(&timelines_from_events(events));
        assert_eq!(counts["A01"], 1);
        assert_eq!(counts["B01"], 2);
    }

    #[test]
    fn short_vocab_when_few_codes() {
        let events = vec![ev("p", "2015-01-01", EventKind::Diagnosis, "A01", None)];
        let v = build_icd_vocab(&timelines_from_events(events), 350).unwrap();
        assert_eq!(v.len(), 1);
        assert!(build_icd_vocab(&[], 0).is_err());
    }

    #[test]
    fn measurement_stats_population_convention() {
        let events = vec![
            ev("p", "2015-01-01", EventKind::Measurement, "FPG", Some(2.0)),
            ev("p", "2015-01-02", EventKind::Measurement, "FPG", Some(4.0)),
            ev("p", "2015-01-02", EventKind::Measurement, "BMI", Some(5.0)),
        ];
        let tl = timelines_from_events(events);
        let vocab = MeasurementVocab::from_codes(vec!["FPG".into(), "BMI".into(), "HDL".into()]).unwrap();
        let v = build_measurement_stats(&tl, &vocab).unwrap();
        assert_eq!(v.stats()[0], ChannelStats { mean: 3.0, std: 1.0 });
        assert_eq!(v.stats()[1], ChannelStats { mean: 5.0, std: 0.0 });
        assert!(v.stats()[2].is_constant());
        assert_eq!(v.constant_channels(), vec![1, 2]);
    }

    #[test]
    fn combo_vocab_first_appearance() {
        let big = DrugSet::from_classes(&[DrugClass::Biguanides]);
        let big_sulf = DrugSet::from_classes(&[DrugClass::Biguanides, DrugClass::Sulfonylureas]);
        let v = build_combo_vocab(&[big, big_sulf, big]).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode(big), Some(0));
        assert_eq!(v.encode(big_sulf), Some(1));
        assert_eq!(v.encode(DrugSet::from_classes(&[DrugClass::Insulin])), None);
        assert_eq!(build_combo_vocab(&[big, big, big]).unwrap().len(), 1);
        assert!(build_combo_vocab(&[DrugSet::EMPTY]).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let m = MeasurementVocab::with_stats(
            vec!["FPG".into(), "HBA1C".into()],
            vec![
                ChannelStats {
                    mean: 0.1 + 0.2,
                    std: 1.0 / 3.0,
                },
                ChannelStats { mean: -7.25, std: 0.0 },
            ],
        )
        .unwrap();
        assert_eq!(MeasurementVocab::from_text(&m.to_text()).unwrap(), m);
        let icd = IcdVocab::from_codes(350, vec!["E11".into(), "I10".into()]).unwrap();
        assert_eq!(IcdVocab::from_text(350, &icd.to_text()).unwrap(), icd);
        let combos = build_combo_vocab(&[
            DrugSet::from_classes(&[DrugClass::DPP4]),
            DrugSet::from_classes(&[DrugClass::Insulin, DrugClass::AGIs]),
        ])
        .unwrap();
        assert_eq!(DrugComboVocab::from_text(&combos.to_text()).unwrap(), combos);
    }

    #[test]
    fn drug_class_ordinals() {
        assert_eq!(DrugClass::ALL.len(), 7);
        for (i, c) in DrugClass::ALL.iter().enumerate() {
            assert_eq!(c.ordinal(), i);
            assert_eq!(c.name().parse::<DrugClass>().unwrap(), *c);
        }
    }

    #[test]
    fn csv_write_then_ingest() {
        let events = vec![
            ev("p1", "2015-06-15", EventKind::Measurement, "FPG", Some(8.13)),
            ev("p1", "2015-06-15", EventKind::Diagnosis, "E14", None),
            ev("p1", "2015-06-15", EventKind::Medication, "Biguanides", None),
        ];
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &events).unwrap();
        let ing = ingest_reader(buf.as_slice()).unwrap();
        assert_eq!(ing.rejected, 0);
        assert_eq!(ing.timelines, timelines_from_events(events));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn icd_mapping_idempotent(code in "[A-Za-z][0-9]{0,2}(\\.[0-9a-z]{1,3})?") {
                let once = map_icd_3digit(&code);
                prop_assert_eq!(map_icd_3digit(&once), once);
            }

            #[test]
            fn combo_round_trip(bits in proptest::collection::vec(1u8..128, 1..60)) {
                let labels: Vec<DrugSet> = bits.iter().map(|&b| DrugSet::from_bits(b).unwrap()).collect();
                let vocab = build_combo_vocab(&labels).unwrap();
                prop_assert!(vocab.len() <= MAX_COMBOS);
                for (i, &p) in vocab.patterns().iter().enumerate() {
                    prop_assert_eq!(vocab.encode(p), Some(i));
                    prop_assert_eq!(vocab.decode(i), Some(p));
                }
            }

            #[test]
            fn icd_vocab_row_order_independent(
                rows in proptest::collection::vec((0u8..4, 1u32..6, 0u8..6), 1..40),
                k in 1usize..5,
            ) {
                let events: Vec<EventRecord> = rows.iter().map(|&(p, d, c)| ev(
                    &format!("p{p}"),
                    &format!("2015-01-{:02}", d),
                    EventKind::Diagnosis,
                    &format!("A{:02}", c),
                    None,
                )).collect();
                let mut reversed = events.clone();
                reversed.reverse();
                let a = build_icd_vocab(&timelines_from_events(events), k).unwrap();
                let b = build_icd_vocab(&timelines_from_events(reversed), k).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
