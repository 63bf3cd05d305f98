//! From patient timelines to model-ready case sequences.
//!
//! A patient's medication days become the outer steps of a sequence. Outer
//! step `j` owns the aligned days in the half-open window
//! `(date_{j-1}, date_j]` (for the first step: every day up to `date_1`),
//! truncated to the most recent `l_inner` days. One case is emitted per
//! medication day `k`; it sees the last `min(k, l_outer)` outer steps and is
//! labelled with the drugs prescribed on day `k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{
    map_icd_3digit, ComboLabel, DrugClass, DrugComboVocab, DrugSet, EventKind, IcdVocab, MeasurementVocab,
    PatientTimeline,
};
use crate::error::{Error, Result};

pub const DEFAULT_L_OUTER: usize = 20;
pub const DEFAULT_L_INNER: usize = 20;
pub const DEFAULT_MIN_MED_LEN: usize = 10;
pub const DIABETES_CODES: [&str; 5] = ["E10", "E11", "E12", "E13", "E14"];

/// Whether previously prescribed drug classes are part of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    WithPrev,
    WithoutPrev,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::WithPrev => "with_prev",
            Mode::WithoutPrev => "without_prev",
        }
    }

    pub fn prev_width(self) -> usize {
        match self {
            Mode::WithPrev => DrugClass::COUNT,
            Mode::WithoutPrev => 0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "with_prev" => Ok(Mode::WithPrev),
            "without_prev" => Ok(Mode::WithoutPrev),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// How binary code dimensions are combined across inner steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeAgg {
    Max,
    Count,
}

/// How measurement dimensions are combined across inner steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasAgg {
    /// Average over the steps where the channel was observed.
    MaskedMean,
    Max,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggSpec {
    pub codes: CodeAgg,
    pub meas: MeasAgg,
}

impl Default for AggSpec {
    fn default() -> Self {
        Self {
            codes: CodeAgg::Max,
            meas: MeasAgg::MaskedMean,
        }
    }
}

impl fmt::Display for AggSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes = match self.codes {
            CodeAgg::Max => "max",
            CodeAgg::Count => "count",
        };
        let meas = match self.meas {
            MeasAgg::MaskedMean => "masked_mean",
            MeasAgg::Max => "max",
            MeasAgg::Count => "count",
        };
        write!(f, "{codes}/{meas}")
    }
}

impl FromStr for AggSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, m) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("aggregation spec {s:?} is not codes/meas")))?;
        let codes = match c.trim() {
            "max" => CodeAgg::Max,
            "count" => CodeAgg::Count,
            other => return Err(Error::Config(format!("unknown code aggregation {other:?}"))),
        };
        let meas = match m.trim() {
            "masked_mean" => MeasAgg::MaskedMean,
            "max" => MeasAgg::Max,
            "count" => MeasAgg::Count,
            other => return Err(Error::Config(format!("unknown measurement aggregation {other:?}"))),
        };
        Ok(Self { codes, meas })
    }
}

/// One patient-day feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitVector {
    pub icd: Vec<f64>,
    /// Normalized values, zero where unobserved.
    pub meas: Vec<f64>,
    pub meas_mask: Vec<bool>,
}

impl VisitVector {
    pub fn zeros(icd_len: usize, meas_len: usize) -> Self {
        Self {
            icd: vec![0.0; icd_len],
            meas: vec![0.0; meas_len],
            meas_mask: vec![false; meas_len],
        }
    }

    pub fn width(&self) -> usize {
        self.icd.len() + self.meas.len()
    }

    pub fn observed_channels(&self) -> usize {
        self.meas_mask.iter().filter(|&&m| m).count()
    }
}

/// Z-score of one reading; constant channels map to 0.
pub fn normalize(value: f64, mean: f64, std: f64) -> Result<f64> {
    if !value.is_finite() || !mean.is_finite() || !std.is_finite() {
        return Err(Error::NonFinite(format!("normalize({value}, {mean}, {std})")));
    }
    if std < 0.0 {
        return Err(Error::Data(format!("negative standard deviation {std}")));
    }
    if std == 0.0 {
        return Ok(0.0);
    }
    Ok((value - mean) / std)
}

/// Normalizes the observed channels and imputes zero (the population mean)
/// everywhere else.
pub fn impute_missing(partial: &BTreeMap<String, f64>, vocab: &MeasurementVocab) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut values = vec![0.0; vocab.len()];
    let mut mask = vec![false; vocab.len()];
    for (code, &v) in partial {
        let ch = vocab
            .channel(code)
            .ok_or_else(|| Error::Data(format!("unknown measurement channel {code:?}")))?;
        let s = vocab.stats()[ch];
        values[ch] = normalize(v, s.mean, s.std)?;
        mask[ch] = true;
    }
    Ok((values, mask))
}

/// One patient-day before vocabulary encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDay {
    pub date: NaiveDate,
    /// 3-digit ICD codes.
    pub codes: BTreeSet<String>,
    /// Same-day readings averaged per channel.
    pub meas: BTreeMap<String, f64>,
    pub drugs: DrugSet,
}

impl RawDay {
    pub fn has_diabetes_code(&self) -> bool {
        self.codes.iter().any(|c| DIABETES_CODES.contains(&c.as_str()))
    }
}

/// Collapses each date of a timeline into one [`RawDay`].
pub fn align_raw(timeline: &PatientTimeline) -> Vec<RawDay> {
    timeline
        .days
        .iter()
        .map(|day| {
            let mut codes = BTreeSet::new();
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            let mut drugs = DrugSet::EMPTY;
            for e in &day.events {
                match e.kind {
                    EventKind::Diagnosis => {
                        codes.insert(map_icd_3digit(&e.code));
                    }
                    EventKind::Medication => {
                        if let Ok(c) = e.code.parse::<DrugClass>() {
                            drugs = drugs.with(c);
                        }
                    }
                    EventKind::Measurement => {
                        if let Some(v) = e.value {
                            let slot = sums.entry(e.code.clone()).or_insert((0.0, 0));
                            slot.0 += v;
                            slot.1 += 1;
                        }
                    }
                }
            }
            RawDay {
                date: day.date,
                codes,
                meas: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
                drugs,
            }
        })
        .collect()
}

/// Encodes a raw day against the vocabularies; codes outside the
/// vocabularies are dropped.
pub fn encode_day(raw: &RawDay, icd: &IcdVocab, meas: &MeasurementVocab) -> Result<VisitVector> {
    let mut icd_vec = vec![0.0; icd.len()];
    for c in &raw.codes {
        if let Some(d) = icd.dim(c) {
            icd_vec[d] = 1.0;
        }
    }
    let known: BTreeMap<String, f64> = raw
        .meas
        .iter()
        .filter(|(k, _)| meas.channel(k).is_some())
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let (values, mask) = impute_missing(&known, meas)?;
    Ok(VisitVector {
        icd: icd_vec,
        meas: values,
        meas_mask: mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDay {
    pub date: NaiveDate,
    pub visit: VisitVector,
    pub drugs: DrugSet,
}

/// Patient-day alignment: one entry per date carrying at least one event.
pub fn align_patient_day(
    timeline: &PatientTimeline,
    icd: &IcdVocab,
    meas: &MeasurementVocab,
) -> Result<Vec<AlignedDay>> {
    align_raw(timeline)
        .iter()
        .map(|raw| {
            Ok(AlignedDay {
                date: raw.date,
                visit: encode_day(raw, icd, meas)?,
                drugs: raw.drugs,
            })
        })
        .collect()
}

/// Cohort criteria: at least one diabetes code (E10–E14) and strictly more
/// than `min_med_len` medication days.
pub fn is_eligible(timeline: &PatientTimeline, min_med_len: usize) -> bool {
    let days = align_raw(timeline);
    let med_days = days.iter().filter(|d| !d.drugs.is_empty()).count();
    days.iter().any(RawDay::has_diabetes_code) && med_days > min_med_len
}

pub fn select_cohort(timelines: Vec<PatientTimeline>, min_med_len: usize) -> Result<Vec<PatientTimeline>> {
    let cohort: Vec<PatientTimeline> = timelines.into_iter().filter(|t| is_eligible(t, min_med_len)).collect();
    if cohort.is_empty() {
        return Err(Error::Data("cohort is empty after applying selection criteria".into()));
    }
    Ok(cohort)
}

/// Combines inner-step vectors into one outer-step input.
pub fn aggregate(inner: &[VisitVector], agg: AggSpec) -> Result<VisitVector> {
    let first = inner
        .first()
        .ok_or_else(|| Error::Data("cannot aggregate an empty window".into()))?;
    let (ni, nm) = (first.icd.len(), first.meas.len());
    if inner.iter().any(|v| v.icd.len() != ni || v.meas.len() != nm) {
        return Err(Error::Data("inconsistent visit vector widths".into()));
    }
    let mut out = VisitVector::zeros(ni, nm);
    for v in inner {
        for (o, &x) in out.icd.iter_mut().zip(&v.icd) {
            match agg.codes {
                CodeAgg::Max => *o = o.max(x),
                CodeAgg::Count => *o += x,
            }
        }
    }
    for ch in 0..nm {
        let observed = inner.iter().filter(|v| v.meas_mask[ch]);
        let count = observed.clone().count();
        if count == 0 {
            continue;
        }
        out.meas_mask[ch] = true;
        out.meas[ch] = match agg.meas {
            MeasAgg::MaskedMean => observed.map(|v| v.meas[ch]).sum::<f64>() / count as f64,
            MeasAgg::Max => observed.map(|v| v.meas[ch]).fold(f64::NEG_INFINITY, f64::max),
            MeasAgg::Count => count as f64,
        };
    }
    Ok(out)
}

/// Where a case sits in its patient's medication sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Head,
    Mid,
    Tail,
}

/// One medication step together with the days sandwiched before it.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub date: NaiveDate,
    pub inner_steps: Vec<VisitVector>,
    pub aggregated: VisitVector,
    /// Drugs of the previous medication step; empty for the first.
    pub prev_drugs: DrugSet,
    /// Drugs prescribed at this step (the label of the case ending here).
    pub drugs: DrugSet,
}

impl OuterStep {
    pub fn new(
        date: NaiveDate,
        inner_steps: Vec<VisitVector>,
        agg: AggSpec,
        prev_drugs: DrugSet,
        drugs: DrugSet,
    ) -> Result<Self> {
        let aggregated = aggregate(&inner_steps, agg)?;
        Ok(Self {
            date,
            inner_steps,
            aggregated,
            prev_drugs,
            drugs,
        })
    }
}

/// Label and position of the case ending at outer step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseMeta {
    pub step: usize,
    pub label_dc: DrugSet,
    pub label_dcc: ComboLabel,
    pub position: Position,
}

/// A borrowed view of one training/evaluation case.
#[derive(Debug, Clone, Copy)]
pub struct CaseSequence<'a> {
    pub patient_id: &'a str,
    /// Index of the predicted outer step within the patient.
    pub step: usize,
    /// The last `min(k, l_outer)` outer steps; the final one is predicted.
    pub outer_steps: &'a [OuterStep],
    pub label_dc: DrugSet,
    pub label_dcc: ComboLabel,
    pub position: Position,
}

impl CaseSequence<'_> {
    pub fn last(&self) -> &OuterStep {
        self.outer_steps.last().expect("case has at least one outer step")
    }
}

/// All medication steps of one patient and the cases built on them.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSeq {
    pub patient_id: String,
    pub steps: Vec<OuterStep>,
    pub cases: Vec<CaseMeta>,
}

impl PatientSeq {
    /// First outer-step index seen by the case ending at `step`.
    pub fn window_start(step: usize, l_outer: usize) -> usize {
        (step + 1).saturating_sub(l_outer)
    }

    pub fn case(&self, i: usize, l_outer: usize) -> CaseSequence<'_> {
        let meta = self.cases[i];
        let start = Self::window_start(meta.step, l_outer);
        CaseSequence {
            patient_id: &self.patient_id,
            step: meta.step,
            outer_steps: &self.steps[start..=meta.step],
            label_dc: meta.label_dc,
            label_dcc: meta.label_dcc,
            position: meta.position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseParams {
    pub l_outer: usize,
    pub l_inner: usize,
    pub agg: AggSpec,
}

impl Default for CaseParams {
    fn default() -> Self {
        Self {
            l_outer: DEFAULT_L_OUTER,
            l_inner: DEFAULT_L_INNER,
            agg: AggSpec::default(),
        }
    }
}

/// Builds outer steps from aligned days. Medication steps are the days with
/// drugs on or after `first_diagnosis`.
pub fn build_steps(days: &[AlignedDay], first_diagnosis: NaiveDate, params: &CaseParams) -> Result<Vec<OuterStep>> {
    if params.l_outer == 0 || params.l_inner == 0 {
        return Err(Error::Config("l_outer and l_inner must be >= 1".into()));
    }
    let mut steps = Vec::new();
    let mut window_begin = 0;
    let mut prev = DrugSet::EMPTY;
    for (i, day) in days.iter().enumerate() {
        if day.drugs.is_empty() || day.date < first_diagnosis {
            continue;
        }
        let window = &days[window_begin..=i];
        let keep = window.len().min(params.l_inner);
        let inner: Vec<VisitVector> = window[window.len() - keep..].iter().map(|d| d.visit.clone()).collect();
        steps.push(OuterStep::new(day.date, inner, params.agg, prev, day.drugs)?);
        prev = day.drugs;
        window_begin = i + 1;
    }
    Ok(steps)
}

/// Builds every case of one cohort patient.
pub fn build_cases(
    timeline: &PatientTimeline,
    icd: &IcdVocab,
    meas: &MeasurementVocab,
    combos: &DrugComboVocab,
    params: &CaseParams,
) -> Result<PatientSeq> {
    let raw = align_raw(timeline);
    let first_diagnosis = raw.iter().find(|d| d.has_diabetes_code()).map(|d| d.date);
    let steps = match first_diagnosis {
        Some(date) => {
            let aligned = raw
                .iter()
                .map(|r| {
                    Ok(AlignedDay {
                        date: r.date,
                        visit: encode_day(r, icd, meas)?,
                        drugs: r.drugs,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            build_steps(&aligned, date, params)?
        }
        None => Vec::new(),
    };
    let cases = case_metas(&steps, combos);
    Ok(PatientSeq {
        patient_id: timeline.patient_id.clone(),
        steps,
        cases,
    })
}

/// One case per outer step. A single-step patient is a Head case.
pub fn case_metas(steps: &[OuterStep], combos: &DrugComboVocab) -> Vec<CaseMeta> {
    let t = steps.len();
    steps
        .iter()
        .enumerate()
        .map(|(k, s)| CaseMeta {
            step: k,
            label_dc: s.drugs,
            label_dcc: combos.encode(s.drugs),
            position: if k == 0 {
                Position::Head
            } else if k + 1 == t {
                Position::Tail
            } else {
                Position::Mid
            },
        })
        .collect()
}

/// Patient-level train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitPart {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        }
    }
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(SplitPart::Train),
            "validation" | "val" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl DatasetSplit {
    pub fn part_of(&self, patient_id: &str) -> Option<SplitPart> {
        if self.train.contains(patient_id) {
            Some(SplitPart::Train)
        } else if self.validation.contains(patient_id) {
            Some(SplitPart::Validation)
        } else if self.test.contains(patient_id) {
            Some(SplitPart::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle of the sorted patient ids, then contiguous slicing into
/// train, validation and test. Validation and test sizes are rounded to the
/// nearest patient; train takes the remainder.
pub fn split_by_patient(patient_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::Data(format!("cohort of {n} patients is too small to split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = (n as f64 * ratios[1]).round() as usize;
    let n_test = (n as f64 * ratios[2]).round() as usize;
    if n_val + n_test > n {
        return Err(Error::Config("split ratios leave no training patients".into()));
    }
    let n_train = n - n_val - n_test;
    Ok(DatasetSplit {
        train: ids[..n_train].iter().cloned().collect(),
        validation: ids[n_train..n_train + n_val].iter().cloned().collect(),
        test: ids[n_train + n_val..].iter().cloned().collect(),
        ratios,
        seed,
    })
}
