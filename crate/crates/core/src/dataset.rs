//! The preprocessed dataset: cohort selection, splitting, vocabularies
//! built on the training split, per-patient sequences, and a versioned
//! binary container for all of it.
//!
//! Byte layout (little-endian; `str` is a u32 byte length then UTF-8;
//! `n` is a u32 count):
//!
//! ```text
//! magic    8 bytes  "MEDPDSET"
//! version  u32      1
//! header   str      key=value lines: mode, l_outer, l_inner, agg,
//!                   min_med_len, split_seed, split, icd_len, meas_len, combos
//! icd_cap  u32
//! icd      str      one 3-digit code per line, dimension order
//! meas     str      "code,mean,std" per line, channel order
//! combos   str      one combination per line, label order
//! config   str      effective run configuration
//! 3 × part          train, validation, test
//!   n patients
//!     id       str
//!     n steps
//!       date     str  YYYY-MM-DD
//!       drugs    u8   class bits
//!       prev     u8   class bits
//!       n inner
//!         n icd  then (u32 dim, f64 value) pairs
//!         n meas then (u32 channel, f64 value) pairs, observed channels only
//! ```
//!
//! Aggregated step vectors and case metadata are recomputed on load, so
//! they can never disagree with the stored inner steps.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde_json::json;

use crate::codec::{parse_kv, Reader, Writer};
use crate::config::RunConfig;
use crate::ehr::{
    build_combo_vocab, build_icd_vocab, build_measurement_stats, build_measurement_vocab, DrugClass, DrugComboVocab,
    DrugSet, IcdVocab, MeasurementVocab, PatientTimeline, Vocabularies,
};
use crate::error::{Error, Result};
use crate::preprocess::{
    build_cases, case_metas, select_cohort, split_by_patient, CaseParams, DatasetSplit, Mode, OuterStep, PatientSeq,
    SplitPart, VisitVector,
};

pub const DATASET_MAGIC: &[u8; 8] = b"MEDPDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub params: CaseParams,
    pub min_med_len: usize,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
    pub vocabs: Vocabularies,
    pub run_config: String,
    pub train: Vec<PatientSeq>,
    pub validation: Vec<PatientSeq>,
    pub test: Vec<PatientSeq>,
}

/// Runs cohort selection, the patient split, vocabulary construction on
/// the training patients, and case construction for everyone.
pub fn build_dataset(timelines: Vec<PatientTimeline>, cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let params = cfg.case_params();
    let mut cohort = select_cohort(timelines, cfg.min_med_len)?;
    cohort.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let ids: Vec<String> = cohort.iter().map(|t| t.patient_id.clone()).collect();
    let split = split_by_patient(&ids, cfg.split, cfg.seed)?;
    let train_tl: Vec<PatientTimeline> = cohort
        .iter()
        .filter(|t| split.train.contains(&t.patient_id))
        .cloned()
        .collect();
    let icd = build_icd_vocab(&train_tl, cfg.icd_capacity)?;
    let meas = build_measurement_stats(&train_tl, &build_measurement_vocab(&train_tl, cfg.meas_capacity)?)?;
    let unlabelled = DrugComboVocab::default();
    let mut seqs = cohort
        .iter()
        .map(|t| build_cases(t, &icd, &meas, &unlabelled, &params))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<DrugSet> = seqs
        .iter()
        .filter(|s| split.train.contains(&s.patient_id))
        .flat_map(|s| s.steps.iter().map(|st| st.drugs))
        .collect();
    let combos = build_combo_vocab(&labels)?;
    for s in &mut seqs {
        s.cases = case_metas(&s.steps, &combos);
    }
    let mut ds = Dataset {
        mode: cfg.mode,
        params,
        min_med_len: cfg.min_med_len,
        split_seed: cfg.seed,
        split_ratios: cfg.split,
        vocabs: Vocabularies { icd, meas, combos },
        run_config: cfg.to_text(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for s in seqs {
        match split.part_of(&s.patient_id) {
            Some(SplitPart::Train) => ds.train.push(s),
            Some(SplitPart::Validation) => ds.validation.push(s),
            Some(SplitPart::Test) => ds.test.push(s),
            None => unreachable!("every cohort patient is split"),
        }
    }
    if ds.train.iter().all(|p| p.cases.is_empty()) {
        return Err(Error::Data("training split has no cases".into()));
    }
    Ok(ds)
}

fn visit_from_parts(
    icd_len: usize,
    meas_len: usize,
    icd: &[(usize, f64)],
    meas: &[(usize, f64)],
) -> Result<VisitVector> {
    let mut v = VisitVector::zeros(icd_len, meas_len);
    for &(i, x) in icd {
        *v.icd
            .get_mut(i)
            .ok_or_else(|| Error::Data(format!("icd dimension {i} out of range")))? = x;
    }
    for &(c, x) in meas {
        if c >= meas_len || !x.is_finite() {
            return Err(Error::Data(format!("bad measurement entry ({c}, {x})")));
        }
        v.meas[c] = x;
        v.meas_mask[c] = true;
    }
    Ok(v)
}

impl Dataset {
    pub fn part(&self, part: SplitPart) -> &[PatientSeq] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    pub fn split(&self) -> DatasetSplit {
        let ids = |v: &[PatientSeq]| v.iter().map(|p| p.patient_id.clone()).collect();
        DatasetSplit {
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
            ratios: self.split_ratios,
            seed: self.split_seed,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.vocabs.fingerprint()
    }

    fn header(&self) -> String {
        format!(
            "mode={}\nl_outer={}\nl_inner={}\nagg={}\nmin_med_len={}\nsplit_seed={}\nsplit={}/{}/{}\nicd_len={}\nmeas_len={}\ncombos={}\n",
            self.mode,
            self.params.l_outer,
            self.params.l_inner,
            self.params.agg,
            self.min_med_len,
            self.split_seed,
            self.split_ratios[0],
            self.split_ratios[1],
            self.split_ratios[2],
            self.vocabs.icd.len(),
            self.vocabs.meas.len(),
            self.vocabs.combos.len(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.str(&self.header())?;
        w.len_u32(self.vocabs.icd.capacity())?;
        w.str(&self.vocabs.icd.to_text())?;
        w.str(&self.vocabs.meas.to_text())?;
        w.str(&self.vocabs.combos.to_text())?;
        w.str(&self.run_config)?;
        for part in [&self.train, &self.validation, &self.test] {
            w.len_u32(part.len())?;
            for pat in part {
                w.str(&pat.patient_id)?;
                w.len_u32(pat.steps.len())?;
                for step in &pat.steps {
                    w.str(&step.date.format("%Y-%m-%d").to_string())?;
                    w.u8(step.drugs.bits());
                    w.u8(step.prev_drugs.bits());
                    w.len_u32(step.inner_steps.len())?;
                    for v in &step.inner_steps {
                        let nz: Vec<(usize, f64)> =
                            v.icd.iter().copied().enumerate().filter(|&(_, x)| x != 0.0).collect();
                        w.len_u32(nz.len())?;
                        for (i, x) in nz {
                            w.len_u32(i)?;
                            w.f64(x);
                        }
                        w.len_u32(v.observed_channels())?;
                        for (c, (&x, &m)) in v.meas.iter().zip(&v.meas_mask).enumerate() {
                            if m {
                                w.len_u32(c)?;
                                w.f64(x);
                            }
                        }
                    }
                }
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Data("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset version {version} (expected {DATASET_VERSION})"
            )));
        }
        let header = parse_kv(&r.str()?)?;
        let get = |k: &str| -> Result<&str> {
            header
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("dataset header lacks {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("dataset header: bad {k}")))
        };
        let mode: Mode = get("mode")?.parse()?;
        let params = CaseParams {
            l_outer: parse_usize("l_outer")?,
            l_inner: parse_usize("l_inner")?,
            agg: get("agg")?.parse()?,
        };
        let min_med_len = parse_usize("min_med_len")?;
        let split_seed: u64 = get("split_seed")?
            .parse()
            .map_err(|_| Error::Data("dataset header: bad split_seed".into()))?;
        let ratios: Vec<f64> = get("split")?
            .split('/')
            .map(|x| x.parse().map_err(|_| Error::Data("dataset header: bad split".into())))
            .collect::<Result<_>>()?;
        let split_ratios: [f64; 3] = ratios
            .try_into()
            .map_err(|_| Error::Data("dataset header: split needs three ratios".into()))?;
        let icd_cap = r.len_u32()?;
        let icd = IcdVocab::from_text(icd_cap, &r.str()?)?;
        let meas = MeasurementVocab::from_text(&r.str()?)?;
        let combos = DrugComboVocab::from_text(&r.str()?)?;
        if icd.len() != parse_usize("icd_len")?
            || meas.len() != parse_usize("meas_len")?
            || combos.len() != parse_usize("combos")?
        {
            return Err(Error::Data("dataset header disagrees with its vocabularies".into()));
        }
        let run_config = r.str()?;
        let (ni, nm) = (icd.len(), meas.len());
        let mut parts: Vec<Vec<PatientSeq>> = Vec::with_capacity(3);
        for _ in 0..3 {
            let n_pat = r.len_u32()?;
            let mut pats = Vec::with_capacity(n_pat.min(1 << 20));
            for _ in 0..n_pat {
                let patient_id = r.str()?;
                let n_steps = r.len_u32()?;
                let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
                for _ in 0..n_steps {
                    let date_text = r.str()?;
                    let date = NaiveDate::parse_from_str(&date_text, "%Y-%m-%d")
                        .map_err(|_| Error::Data(format!("bad step date {date_text:?}")))?;
                    let drugs = DrugSet::from_bits(r.u8()?)?;
                    let prev = DrugSet::from_bits(r.u8()?)?;
                    let n_inner = r.len_u32()?;
                    let mut inner = Vec::with_capacity(n_inner.min(1 << 16));
                    for _ in 0..n_inner {
                        let pairs = |r: &mut Reader<'_>| -> Result<Vec<(usize, f64)>> {
                            let n = r.len_u32()?;
                            (0..n).map(|_| Ok((r.len_u32()?, r.f64()?))).collect()
                        };
                        let icd_nz = pairs(&mut r)?;
                        let meas_obs = pairs(&mut r)?;
                        inner.push(visit_from_parts(ni, nm, &icd_nz, &meas_obs)?);
                    }
                    steps.push(OuterStep::new(date, inner, params.agg, prev, drugs)?);
                }
                let cases = case_metas(&steps, &combos);
                pats.push(PatientSeq {
                    patient_id,
                    steps,
                    cases,
                });
            }
            parts.push(pats);
        }
        r.expect_end()?;
        let test = parts.pop().expect("three parts");
        let validation = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(Dataset {
            mode,
            params,
            min_med_len,
            split_seed,
            split_ratios,
            vocabs: Vocabularies { icd, meas, combos },
            run_config,
            train,
            validation,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Plain JSONL mirror of the container: a header object, then one
    /// object per patient.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = json!({
            "format": "medpred-dataset",
            "version": DATASET_VERSION,
            "mode": self.mode.as_str(),
            "l_outer": self.params.l_outer,
            "l_inner": self.params.l_inner,
            "agg": self.params.agg.to_string(),
            "min_med_len": self.min_med_len,
            "split_seed": self.split_seed,
            "split": self.split_ratios,
            "icd_capacity": self.vocabs.icd.capacity(),
            "icd": self.vocabs.icd.codes(),
            "meas": self.vocabs.meas.codes().iter().zip(self.vocabs.meas.stats()).map(|(c, s)| json!({"code": c, "mean": s.mean, "std": s.std})).collect::<Vec<_>>(),
            "combos": self.vocabs.combos.patterns().iter().map(ToString::to_string).collect::<Vec<_>>(),
            "run_config": self.run_config,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for part in [SplitPart::Train, SplitPart::Validation, SplitPart::Test] {
            for pat in self.part(part) {
                let steps: Vec<_> = pat
                    .steps
                    .iter()
                    .map(|s| {
                        let inner: Vec<_> = s
                            .inner_steps
                            .iter()
                            .map(|v| {
                                let icd: Vec<usize> = v
                                    .icd
                                    .iter()
                                    .enumerate()
                                    .filter(|(_, &x)| x != 0.0)
                                    .map(|(i, _)| i)
                                    .collect();
                                let meas: Vec<_> = v
                                    .meas
                                    .iter()
                                    .zip(&v.meas_mask)
                                    .enumerate()
                                    .filter(|(_, (_, &m))| m)
                                    .map(|(c, (&x, _))| json!([c, x]))
                                    .collect();
                                json!({"icd": icd, "meas": meas})
                            })
                            .collect();
                        json!({
                            "date": s.date.format("%Y-%m-%d").to_string(),
                            "drugs": s.drugs.to_string(),
                            "prev_drugs": s.prev_drugs.to_string(),
                            "inner": inner,
                        })
                    })
                    .collect();
                let cases: Vec<_> = pat
                    .cases
                    .iter()
                    .map(|c| json!({"step": c.step, "label_dcc": c.label_dcc, "position": format!("{:?}", c.position)}))
                    .collect();
                let line = json!({
                    "split": part.as_str(),
                    "patient_id": pat.patient_id,
                    "steps": steps,
                    "cases": cases,
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn stats(&self) -> CohortStats {
        let mut s = CohortStats::default();
        for (i, part) in [SplitPart::Train, SplitPart::Validation, SplitPart::Test]
            .into_iter()
            .enumerate()
        {
            for pat in self.part(part) {
                s.patients[i] += 1;
                s.cases[i] += pat.cases.len();
                for step in &pat.steps {
                    for v in &step.inner_steps {
                        s.window_days += 1;
                        s.diagnosis_days += usize::from(v.icd.iter().any(|&x| x != 0.0));
                        s.measurement_days += usize::from(v.meas_mask.iter().any(|&m| m));
                    }
                }
                for (k, step) in pat.steps.iter().enumerate() {
                    for class in step.drugs.classes() {
                        s.class_days[class.ordinal()] += 1;
                    }
                    if k == 0 {
                        s.head_cases += 1;
                    } else {
                        s.transitions += 1;
                        s.repeats += usize::from(step.drugs == step.prev_drugs);
                    }
                }
            }
        }
        s.combos = self.vocabs.combos.len();
        s
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Counts behind the cohort overview tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CohortStats {
    /// Train, validation, test.
    pub patients: [usize; 3],
    pub cases: [usize; 3],
    /// Aligned days inside case windows.
    pub window_days: usize,
    pub diagnosis_days: usize,
    pub measurement_days: usize,
    pub head_cases: usize,
    pub transitions: usize,
    /// Non-first medication days repeating the previous combination.
    pub repeats: usize,
    pub class_days: [usize; DrugClass::COUNT],
    pub combos: usize,
}

impl CohortStats {
    pub fn total_patients(&self) -> usize {
        self.patients.iter().sum()
    }

    pub fn total_cases(&self) -> usize {
        self.cases.iter().sum()
    }

    /// Share of non-first medication days that repeat the previous one.
    pub fn stay_rate(&self) -> f64 {
        self.repeats as f64 / self.transitions.max(1) as f64
    }

    /// Previous-prescription accuracy over every medication day, first
    /// days counted as misses.
    pub fn prev_average_accuracy(&self) -> f64 {
        self.repeats as f64 / self.total_cases().max(1) as f64
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let n = self.total_patients().max(1) as f64;
        let cases = self.total_cases();
        let _ = writeln!(
            out,
            "Cohort: {} patients (train {}, validation {}, test {}), {} cases, {} combinations",
            self.total_patients(),
            self.patients[0],
            self.patients[1],
            self.patients[2],
            cases,
            self.combos
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>12}",
            "Per day, per patient", "Total", "Per patient"
        );
        for (name, v) in [
            ("Diagnosis days", self.diagnosis_days),
            ("Medication days", cases),
            ("Measurement days", self.measurement_days),
            ("All visit days", self.window_days),
        ] {
            let _ = writeln!(out, "{:<22} {:>10} {:>12.2}", name, v, v as f64 / n);
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>10} {:>9}",
            "Previous prescription", "Hit", "Sample", "Ratio"
        );
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>10} {:>9.4}",
            "Repeat (non-first)",
            self.repeats,
            self.transitions,
            self.stay_rate()
        );
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>10} {:>9.4}",
            "Average",
            self.repeats,
            cases,
            self.prev_average_accuracy()
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<22} {:>10} {:>9}", "Drug class", "Days", "Ratio");
        for class in DrugClass::ALL {
            let d = self.class_days[class.ordinal()];
            let _ = writeln!(
                out,
                "{:<22} {:>10} {:>9.4}",
                class.name(),
                d,
                d as f64 / cases.max(1) as f64
            );
        }
        out
    }
}
