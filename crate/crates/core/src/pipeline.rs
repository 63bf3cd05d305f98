//! End-to-end steps shared by the command-line tool and the experiment
//! suites: events to dataset, dataset to checkpoint, checkpoint to report.

use crate::config::RunConfig;
use crate::dataset::{build_dataset, Dataset};
use crate::ehr::{ingest_reader, write_events_csv, EventRecord, Ingested};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Report, REPORT_SCHEMA_VERSION};
use crate::models::{Checkpoint, Model, ModelSpec, TrainMeta};
use crate::preprocess::SplitPart;
use crate::train::{train_model, TrainLog};

pub fn events_to_csv(events: &[EventRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_events_csv(&mut buf, events)?;
    Ok(buf)
}

/// Ingests CSV bytes and builds the dataset; the ingest result is returned
/// for its row and reject counts.
pub fn dataset_from_csv(csv: &[u8], cfg: &RunConfig) -> Result<(Dataset, Ingested)> {
    let mut ing = ingest_reader(csv)?;
    let timelines = std::mem::take(&mut ing.timelines);
    Ok((build_dataset(timelines, cfg)?, ing))
}

/// Checks that `cfg` does not alter the settings the dataset was built with.
pub fn check_lineage(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    let built = RunConfig::from_text(&ds.run_config)?;
    if built.lineage_text() != cfg.lineage_text() {
        return Err(Error::Config(format!(
            "settings conflict with the dataset's lineage\ndataset:\n{}requested:\n{}",
            built.lineage_text(),
            cfg.lineage_text()
        )));
    }
    Ok(())
}

/// Trains `cfg.model` for `cfg.task` on the dataset's training split with
/// validation-loss model selection.
pub fn fit(ds: &Dataset, cfg: &RunConfig) -> Result<(Checkpoint, TrainLog)> {
    check_lineage(ds, cfg)?;
    let mut spec = ModelSpec::new(cfg.model, cfg.task, ds.mode, &ds.vocabs)?;
    spec.hidden = cfg.hidden;
    spec.l_outer = ds.params.l_outer;
    spec.l_inner = ds.params.l_inner;
    spec.dropout = cfg.dropout;
    spec.validate()?;
    let model = Model::new(spec, cfg.seed)?;
    let tc = cfg.train_config_for(cfg.model);
    let out = train_model(model, &ds.train, &ds.validation, &tc)?;
    let meta = TrainMeta {
        seed: cfg.seed,
        epochs_run: out.log.epochs.len(),
        best_epoch: out.log.best_epoch,
    };
    let ckpt = Checkpoint {
        model: out.model,
        vocabs: ds.vocabs.clone(),
        run_config: cfg.to_text(),
        meta,
    };
    Ok((ckpt, out.log))
}

/// Evaluates a checkpoint on one split; refuses a checkpoint trained on a
/// dataset with different vocabularies or case settings.
pub fn report(ds: &Dataset, ckpt: &Checkpoint, part: SplitPart) -> Result<Report> {
    if ckpt.fingerprint() != ds.fingerprint() {
        return Err(Error::Fingerprint {
            expected: ds.fingerprint(),
            found: ckpt.fingerprint(),
        });
    }
    let spec = ckpt.model.spec();
    if spec.mode != ds.mode || spec.l_outer != ds.params.l_outer || spec.l_inner != ds.params.l_inner {
        return Err(Error::Data(
            "checkpoint and dataset disagree on mode or sequence lengths".into(),
        ));
    }
    if !ckpt.run_config.trim().is_empty() {
        let built = RunConfig::from_text(&ds.run_config)?;
        let trained = RunConfig::from_text(&ckpt.run_config)?;
        if built.lineage_text() != trained.lineage_text() {
            return Err(Error::Data(
                "checkpoint was trained on a dataset with different settings".into(),
            ));
        }
    }
    let patients = ds.part(part);
    let (auc, accuracy) = evaluate_model(&ckpt.model, patients, &ds.vocabs.combos)?;
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        model: spec.kind.as_str().to_string(),
        task: spec.task.as_str().to_string(),
        mode: spec.mode.as_str().to_string(),
        split: part.as_str().to_string(),
        cases: patients.iter().map(|p| p.cases.len()).sum(),
        vocab_fingerprint: ds.fingerprint(),
        run_config: ckpt.run_config.clone(),
        auc,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, Task};
    use crate::synth::generate;

    fn small() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("patients", "40"),
            ("seed", "2"),
            ("epochs", "1"),
            ("hidden", "4"),
            ("logreg_epochs", "2"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let (events, _) = generate(&cfg.gen_config()).unwrap();
        let (ds, ing) = dataset_from_csv(&events_to_csv(&events).unwrap(), &cfg).unwrap();
        assert_eq!(ing.rejected, 0);
        (cfg, ds)
    }

    #[test]
    fn fit_and_report_every_kind() {
        let (mut cfg, ds) = small();
        for kind in ModelKind::ALL {
            for task in [Task::Dc, Task::Dcc] {
                cfg.model = kind;
                cfg.task = task;
                let (ckpt, _) = fit(&ds, &cfg).unwrap();
                let r = report(&ds, &ckpt, SplitPart::Test).unwrap();
                assert_eq!(r.auc.is_some(), task == Task::Dc);
                assert_eq!(r.accuracy.is_some(), task == Task::Dcc);
                assert_eq!(r.run_config, cfg.to_text());
            }
        }
    }

    #[test]
    fn lineage_is_enforced() {
        let (mut cfg, ds) = small();
        cfg.set("l_outer", "5").unwrap();
        assert!(matches!(fit(&ds, &cfg), Err(Error::Config(_))));
        let (cfg, ds) = small();
        let (ckpt, _) = fit(&ds, &cfg).unwrap();
        let mut other_cfg = cfg.clone();
        other_cfg.set("icd_capacity", "10").unwrap();
        let (events, _) = generate(&other_cfg.gen_config()).unwrap();
        let (other, _) = dataset_from_csv(&events_to_csv(&events).unwrap(), &other_cfg).unwrap();
        assert!(matches!(
            report(&other, &ckpt, SplitPart::Test),
            Err(Error::Fingerprint { .. })
        ));
    }
}
