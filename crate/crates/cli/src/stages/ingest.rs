use std::collections::BTreeSet;
use std::time::Instant;

use demandmap_core::survey::{
    aggregate_clusters, parse_coordinates, parse_households, validate_survey, write_clusters, SurveyManifest,
};

use super::util::{clusters_csv, countries_csv, create_dir, write_csv, write_text, CountryRow};
use super::{Pipeline, Stage, StageOutcome, StageWork};
use crate::error::{PipelineError, Result};

pub fn run(p: &mut Pipeline) -> Result<StageOutcome> {
    let t0 = Instant::now();
    let started = chrono::Utc::now();
    let cfg = &p.cfg;
    if cfg.surveys.is_empty() {
        return Err(PipelineError::Config("no survey configured (survey.<country>=<manifest>)".into()));
    }
    let mut manifests = Vec::new();
    let mut inputs = Vec::new();
    for (country, path) in &cfg.surveys {
        let key = format!("survey.{country}");
        let path = cfg.require_file(Some(path), &key)?;
        let m = SurveyManifest::read(&path)?;
        for (label, file) in [("households", &m.households_csv), ("coords", &m.coords_csv)] {
            if !file.is_file() {
                return Err(PipelineError::Config(format!(
                    "{key}: {label} file {} not found",
                    file.display()
                )));
            }
            inputs.push((format!("{key}.{label}"), file.clone()));
        }
        inputs.push((key, path));
        manifests.push((country.clone(), m));
    }
    let (fingerprint, input_sums) = p.fingerprint(Stage::Ingest, &["survey."], &inputs)?;
    if let Some(skip) = p.try_skip(Stage::Ingest, &fingerprint)? {
        return Ok(skip);
    }
    let cfg = &p.cfg;
    let dir = cfg.stage_dir("ingest");
    create_dir(&dir)?;

    let mut all = Vec::new();
    let mut countries = Vec::new();
    let mut text = String::new();
    let mut warnings = 0u64;
    let mut seen = BTreeSet::new();
    for (country, m) in &manifests {
        let (rows, parse) = parse_households(m)?;
        let coords = parse_coordinates(m)?;
        let (records, agg_warnings) = aggregate_clusters(&rows, &coords)?;
        let validation = validate_survey(&records, m);
        text.push_str(&format!("[{country}]\n{}", validation.to_text()));
        text.push_str(&format!("parse_warnings={}\n", parse.warnings.len()));
        for w in parse.warnings.iter().chain(&agg_warnings) {
            text.push_str(&format!(
                "warning=line {} column {:?} value {:?}: {}\n",
                w.line, w.column, w.value, w.message
            ));
        }
        text.push('\n');
        warnings += (parse.warnings.len() + agg_warnings.len()) as u64;
        for r in records {
            if !seen.insert(r.cluster_id.clone()) {
                return Err(PipelineError::Data(format!(
                    "cluster id {} appears in more than one survey",
                    r.cluster_id
                )));
            }
            countries.push(CountryRow {
                cluster_id: r.cluster_id.clone(),
                country: country.clone(),
            });
            all.push(r);
        }
    }
    if all.is_empty() {
        return Err(PipelineError::Data("surveys produced no clusters".into()));
    }
    all.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
    countries.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));

    let clusters = clusters_csv(cfg);
    write_clusters(&clusters, &all)?;
    let country_path = countries_csv(cfg);
    write_csv(&country_path, &countries)?;
    let validation = dir.join("validation.txt");
    write_text(&validation, &format!("seed={}\n\n{text}", cfg.seed))?;

    let counts = [("clusters".to_string(), all.len() as u64), ("warnings".to_string(), warnings)].into();
    p.record(
        Stage::Ingest,
        StageWork {
            fingerprint,
            inputs: input_sums,
            outputs: vec![clusters, country_path, validation],
            counts,
        },
        started,
        t0,
    )
}
