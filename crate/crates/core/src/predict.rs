//! Next-prescription prediction for one patient's event history.
//!
//! The last date in the history is the day being prescribed for: its
//! diagnoses and measurements are part of the input, any medication events
//! on it are ignored. Earlier medication days form the preceding outer
//! steps.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::ehr::{timelines_from_events, DrugClass, DrugSet, EventRecord};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Prediction, Task};
use crate::preprocess::{align_patient_day, build_steps, CaseParams, CaseSequence, Mode, Position};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictOutput {
    pub patient_id: String,
    pub date: String,
    pub task: String,
    /// Outer steps seen by the model, the predicted day included.
    pub steps: usize,
    /// Empty when the model abstains.
    pub ranking: Vec<Ranked>,
}

impl PredictOutput {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "patient {} on {} ({} task, {} steps)",
            self.patient_id, self.date, self.task, self.steps
        );
        if self.ranking.is_empty() {
            let _ = writeln!(
                out,
                "no prediction (the baseline abstains without a known previous combination)"
            );
        }
        for (i, r) in self.ranking.iter().enumerate() {
            let _ = writeln!(out, "{:>2}. {:<40} {:.4}", i + 1, r.label, r.probability);
        }
        out
    }
}

/// Case parameters the checkpoint was trained with.
fn case_params(ckpt: &Checkpoint) -> Result<CaseParams> {
    let spec = ckpt.model.spec();
    let agg = if ckpt.run_config.trim().is_empty() {
        CaseParams::default().agg
    } else {
        RunConfig::from_text(&ckpt.run_config)?.agg
    };
    Ok(CaseParams {
        l_outer: spec.l_outer,
        l_inner: spec.l_inner,
        agg,
    })
}

/// Ranks drug classes (class task, all seven) or drug combinations
/// (combination task, the `top_k` most likely).
pub fn predict_history(ckpt: &Checkpoint, events: &[EventRecord], top_k: usize) -> Result<PredictOutput> {
    let mut timelines = timelines_from_events(events.iter().cloned());
    if timelines.len() != 1 {
        return Err(Error::Data(format!(
            "history must hold exactly one patient, found {}",
            timelines.len()
        )));
    }
    let timeline = timelines.remove(0);
    let vocabs = &ckpt.vocabs;
    let mut days = align_patient_day(&timeline, &vocabs.icd, &vocabs.meas)?;
    let query = days.last_mut().expect("a timeline has at least one day");
    let date = query.date;
    // any nonempty set marks the query day as the step to predict
    query.drugs = DrugSet::from_classes(&DrugClass::ALL);
    let first = days[0].date;
    let mut steps = build_steps(&days, first, &case_params(ckpt)?)?;
    let spec = ckpt.model.spec();
    if spec.mode == Mode::WithPrev && steps.len() < 2 {
        return Err(Error::Data(
            "insufficient history: a model using previous medications needs at least one earlier medication day".into(),
        ));
    }
    let last = steps.last_mut().expect("query step exists");
    last.drugs = DrugSet::EMPTY;
    let n = steps.len();
    let window = &steps[n.saturating_sub(spec.l_outer)..];
    let case = CaseSequence {
        patient_id: &timeline.patient_id,
        step: n - 1,
        outer_steps: window,
        label_dc: DrugSet::EMPTY,
        label_dcc: None,
        position: if n == 1 { Position::Head } else { Position::Mid },
    };
    let pred = ckpt.model.predict(&case, false, Some(&vocabs.combos))?;
    let mut ranking: Vec<Ranked> = match (&pred, spec.task) {
        (Prediction::Abstain, _) => Vec::new(),
        (Prediction::Probs(p), Task::Dc) => DrugClass::ALL
            .iter()
            .zip(p)
            .map(|(c, &probability)| Ranked {
                label: c.name().to_string(),
                probability,
            })
            .collect(),
        (Prediction::Probs(p), Task::Dcc) => p
            .iter()
            .enumerate()
            .map(|(i, &probability)| Ranked {
                label: vocabs
                    .combos
                    .decode(i)
                    .map_or_else(|| format!("#{i}"), |c| c.to_string()),
                probability,
            })
            .collect(),
    };
    // stable sort keeps label order among ties
    ranking.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    if spec.task == Task::Dcc {
        ranking.truncate(top_k);
    }
    Ok(PredictOutput {
        patient_id: timeline.patient_id.clone(),
        date: date.format("%Y-%m-%d").to_string(),
        task: spec.task.as_str().to_string(),
        steps: window.len(),
        ranking,
    })
}
