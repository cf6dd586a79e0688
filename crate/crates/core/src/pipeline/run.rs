use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::artifacts::{create_dir, write_epoch_dir, write_image_dir, write_json, StageManifest, MANIFEST_FILE};
use super::config::{Baseline, ResolvedConfig, AUTO_CHANNEL};
use super::stages::{build_feature_table, cnn_cv, encode_images, feature_cv, fit_cnn, rank_channels};
use super::{PipelineError, StageError};
use crate::eval::{CvReport, CvSummary};
use crate::features::{write_importance_csv, ImportanceReport};
use crate::ingest::load_recording_dir;
use crate::nn::{manifest_path, save_model};
use crate::preprocess::{preprocess_recording, Epoch};

/// What a pipeline run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub channel: String,
    pub n_recordings: usize,
    pub n_epochs: usize,
    pub importance: Option<ImportanceReport>,
    pub cnn: CvSummary,
    pub baselines: Vec<(Baseline, CvSummary)>,
    pub model_path: Option<PathBuf>,
    pub report_path: PathBuf,
    pub manifest_path: PathBuf,
}

fn rel(stage: &str, file: &str) -> String {
    format!("{stage}/{file}")
}

fn manifest(dir: &Path, m: &StageManifest) -> Result<(), StageError> {
    write_json(&dir.join(MANIFEST_FILE), m)
}

/// Runs every stage in order; see the module docs for the output layout.
/// All randomness derives from `config.seed`, so identical configs and
/// inputs give identical reports.
pub fn run_pipeline(rc: &ResolvedConfig) -> Result<PipelineOutcome, PipelineError> {
    let cfg = &rc.config;
    let out = &cfg.output_dir;
    let seed = cfg.seed;
    create_dir(out).map_err(|e| e.at("setup"))?;
    let mut stage_manifests = Vec::new();

    // ingest
    let recordings = load_recording_dir(&cfg.input_dir).map_err(|e| StageError::from(e).at("ingest"))?;
    if recordings.is_empty() {
        return Err(StageError::Data(format!("no recordings found in {}", cfg.input_dir.display())).at("ingest"));
    }
    let dir = out.join("ingest");
    (|| {
        create_dir(&dir)?;
        let details: Vec<_> = recordings
            .iter()
            .map(|r| {
                json!({
                    "subject_id": r.subject_id,
                    "sample_rate_hz": r.sample_rate_hz,
                    "n_samples": r.len(),
                    "n_trials": r.markers.len(),
                    "channels": r.channel_ids(),
                })
            })
            .collect();
        manifest(
            &dir,
            &StageManifest::new("ingest", vec![cfg.input_dir.display().to_string()], vec![], json!({ "recordings": details })),
        )
    })()
    .map_err(|e| e.at("ingest"))?;
    stage_manifests.push(rel("ingest", MANIFEST_FILE));

    // preprocess
    let dir = out.join("preprocess");
    let epochs: Vec<Epoch> = recordings
        .par_iter()
        .map(|r| preprocess_recording(r, &rc.coefficients, &cfg.preprocess.filter))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| StageError::from(e).at("preprocess"))?
        .into_iter()
        .flatten()
        .collect();
    drop(recordings);
    write_epoch_dir(&epochs, &dir, cfg.preprocess.save_epochs).map_err(|e| e.at("preprocess"))?;
    stage_manifests.push(rel("preprocess", MANIFEST_FILE));

    // features, importance and channel selection
    let mut importance = None;
    let mut channel = cfg.gaf.channel.clone();
    let table = if cfg.features.enabled {
        let dir = out.join("features");
        let f = &cfg.features;
        let table = (|| {
            create_dir(&dir)?;
            let table = build_feature_table(&epochs)?;
            table.write_csv(&dir.join("features.csv"))?;
            let ranking = rank_channels(&table, &f.logreg, f.importance_repeats, seed)?;
            write_importance_csv(&ranking.report, &dir.join("importance.csv"))?;
            if channel == AUTO_CHANNEL {
                channel = ranking.channel.clone();
            }
            manifest(
                &dir,
                &StageManifest::new(
                    "features",
                    vec![rel("preprocess", MANIFEST_FILE)],
                    vec!["features.csv".into(), "importance.csv".into()],
                    json!({
                        "n_rows": table.rows.len(),
                        "n_features": table.names.len(),
                        "importance_model": "logreg",
                        "importance_repeats": f.importance_repeats,
                        "train_accuracy": ranking.train_accuracy,
                        "top_features": ranking.report.ranking.iter().take(5).collect::<Vec<_>>(),
                        "selected_channel": ranking.channel,
                    }),
                ),
            )?;
            importance = Some(ranking.report);
            Ok::<_, StageError>(table)
        })()
        .map_err(|e| e.at("features"))?;
        stage_manifests.push(rel("features", MANIFEST_FILE));
        Some(table)
    } else {
        None
    };

    // gaf
    let gaf = &cfg.gaf.settings;
    let images = encode_images(&epochs, &channel, gaf).map_err(|e| StageError::from(e).at("gaf"))?;
    drop(epochs);
    write_image_dir(&images, &channel, gaf, &out.join("gaf"), cfg.gaf.save_images).map_err(|e| e.at("gaf"))?;
    stage_manifests.push(rel("gaf", MANIFEST_FILE));

    // train
    let mut model_path = None;
    if cfg.model.save_model {
        let dir = out.join("model");
        let path = dir.join("model.gnn");
        (|| {
            create_dir(&dir)?;
            let inputs: Vec<&[f64]> = images.iter().map(|s| s.image.matrix.as_slice()).collect();
            let labels: Vec<usize> = images.iter().map(|s| s.task.index()).collect();
            let (net, history) = fit_cnn(&rc.network, &rc.train, &inputs, &labels, seed)?;
            save_model(&net, &path, json!({ "channel": channel, "gaf": gaf }))?;
            write_json(&dir.join("history.json"), &history)?;
            let weights_manifest = manifest_path(&path);
            let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            manifest(
                &dir,
                &StageManifest::new(
                    "train",
                    vec![rel("gaf", MANIFEST_FILE)],
                    vec![name(&path), name(&weights_manifest), "history.json".into()],
                    json!({
                        "n_images": images.len(),
                        "best_epoch": history.best_epoch,
                        "stopped_epoch": history.stopped_epoch,
                    }),
                ),
            )
        })()
        .map_err(|e| e.at("train"))?;
        stage_manifests.push(rel("model", MANIFEST_FILE));
        model_path = Some(path);
    }

    // eval
    let dir = out.join("eval");
    let e = &cfg.eval;
    let echo = json!({ "pipeline": cfg, "network": rc.network, "train": rc.train, "channel": channel });
    let (cnn, baselines, report_path) = (|| {
        create_dir(&dir)?;
        let cnn = cnn_cv(&images, &rc.network, &rc.train, e.k, e.stratified, seed)?;
        let report_path = dir.join("report.json");
        CvReport::new("cnn", e.k, e.stratified, seed, echo.clone(), cnn.clone()).write(&report_path)?;
        let mut outputs = vec!["report.json".to_string()];
        let mut baselines = Vec::new();
        if let Some(table) = &table {
            for &b in &e.baselines {
                let f = &cfg.features;
                let summary = feature_cv(table, b, &f.logreg, f.knn_k, e.k, e.stratified, seed)?;
                let name = format!("report_{}.json", b.name());
                CvReport::new(b.name(), e.k, e.stratified, seed, echo.clone(), summary.clone()).write(&dir.join(&name))?;
                outputs.push(name);
                baselines.push((b, summary));
            }
        }
        let mut accuracies = serde_json::Map::new();
        accuracies.insert("cnn".into(), json!(cnn.pooled.accuracy));
        for (b, s) in &baselines {
            accuracies.insert(b.name().into(), json!(s.pooled.accuracy));
        }
        let mut inputs = vec![rel("gaf", MANIFEST_FILE)];
        if table.is_some() {
            inputs.push(rel("features", "features.csv"));
        }
        manifest(
            &dir,
            &StageManifest::new(
                "eval",
                inputs,
                outputs,
                json!({ "k": e.k, "stratified": e.stratified, "pooled_accuracy": accuracies }),
            ),
        )?;
        Ok::<_, StageError>((cnn, baselines, report_path))
    })()
    .map_err(|e| e.at("eval"))?;
    stage_manifests.push(rel("eval", MANIFEST_FILE));

    let manifest_path = out.join(MANIFEST_FILE);
    write_json(
        &manifest_path,
        &StageManifest::new(
            "pipeline",
            vec![cfg.input_dir.display().to_string()],
            stage_manifests,
            json!({
                "seed": seed,
                "channel": channel,
                "n_epochs": images.len(),
                "cnn_pooled_accuracy": cnn.pooled.accuracy,
                "cnn_macro_accuracy": cnn.macro_accuracy,
            }),
        ),
    )
    .map_err(|e| e.at("setup"))?;

    Ok(PipelineOutcome {
        channel,
        n_recordings: images.iter().map(|s| s.subject_id.as_str()).collect::<std::collections::BTreeSet<_>>().len(),
        n_epochs: images.len(),
        importance,
        cnn,
        baselines,
        model_path,
        report_path,
        manifest_path,
    })
}
