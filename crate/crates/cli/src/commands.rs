use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use kanrec_core::checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
use kanrec_core::data::{split_continual, split_static, InteractionDataset, SplitView};
use kanrec_core::interpret::{compute_importance, GraphFormat};
use kanrec_core::metrics::{multi_hot, EvalReport};
use kanrec_core::model::{CfModel, ModelKind};
use kanrec_core::rng;
use kanrec_core::train::{continual_train, evaluate_test, train as fit, DeltaTracker, History};

use crate::config::RunConfig;
use crate::error::CliError;

const IMPORTANCE_CHUNK: usize = 256;

fn load_data(cfg: &RunConfig) -> Result<InteractionDataset, CliError> {
    let path = cfg.data_path()?;
    if !path.is_file() {
        return Err(CliError::Data(format!("file not found: {}", path.display())));
    }
    let data = InteractionDataset::load(path, &cfg.load_options()?)?;
    if data.n_interactions() == 0 {
        return Err(CliError::Data(format!("no interactions in {}", path.display())));
    }
    info!("{} users, {} items, {} interactions", data.n_users(), data.n_items(), data.n_interactions());
    Ok(data)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.output)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.output.display())))?;
    Ok(&cfg.output)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))
}

fn check_items(model: &CfModel, data: &InteractionDataset) -> Result<(), CliError> {
    if model.item_count() != data.n_items() {
        return Err(CliError::Data(format!(
            "dataset has {} items but the checkpoint expects {}",
            data.n_items(),
            model.item_count()
        )));
    }
    Ok(())
}

fn describe(model: &CfModel) -> String {
    let widths: Vec<String> = std::iter::once(model.layers()[0].n_in())
        .chain(model.layers().iter().map(|l| l.n_out()))
        .map(|w| w.to_string())
        .collect();
    format!("{} {} ({} parameters)", model.kind(), widths.join("-"), model.param_count())
}

fn write_history(dir: &Path, name: &str, history: &History) -> Result<(), CliError> {
    write(dir.join(name), history.to_csv())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let view = split_static(&data, cfg.split_ratios, cfg.seed)?;
    let mut model = CfModel::build(cfg.model_config(data.n_items()))?;
    println!("model: {}", describe(&model));
    let history = fit(&mut model, &view, &cfg.train_config(), None)?;
    let report = evaluate_test(&model, &view, &cfg.eval_ks, cfg.train.batch_size)?;

    let dir = output_dir(cfg)?;
    save_checkpoint(&model, dir.join("model.ckpt"))?;
    write_history(dir, "history.csv", &history)?;
    write(dir.join("run_config.json"), to_json(cfg)?)?;
    let eval = json!({
        "kind": model.kind().to_string(),
        "parameters": model.param_count(),
        "users": data.n_users(),
        "items": data.n_items(),
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_recall": history.best_val_recall,
        "test": report,
    });
    write(dir.join("eval.json"), to_json(&eval)?)?;

    println!(
        "epochs: {} (best {})",
        history.epochs.len(),
        history.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string())
    );
    print!("{}", report.to_table());
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    check_items(&model, &data)?;
    let view = split_static(&data, cfg.split_ratios, cfg.seed)?;
    let report: EvalReport = evaluate_test(&model, &view, &cfg.eval_ks, cfg.train.batch_size)?;
    let dir = output_dir(cfg)?;
    write(dir.join("eval.json"), to_json(&json!({ "kind": model.kind().to_string(), "test": report }))?)?;
    println!("model: {}", describe(&model));
    print!("{}", report.to_table());
    Ok(())
}

pub fn continual(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    if !data.has_timestamps() {
        return Err(CliError::Data("dataset has no timestamps; continual runs need a time column".into()));
    }
    let blocks = split_continual(&data, cfg.continual_base_fraction, cfg.continual_blocks, cfg.split_ratios, cfg.seed)?;
    let mut model = CfModel::build(cfg.model_config(data.n_items()))?;
    println!("model: {}", describe(&model));
    let track = cfg.trace_enabled.then_some(cfg.trace);
    let outcome = continual_train(&mut model, &blocks, &cfg.train_config(), cfg.continual_k, track)?;

    let dir = output_dir(cfg)?;
    write(dir.join("continual.json"), to_json(&outcome.report)?)?;
    let mut csv = String::new();
    for row in &outcome.report.a {
        let cells: Vec<String> = (0..outcome.report.a.len())
            .map(|j| row.get(j).map_or_else(String::new, |v| format!("{v:.17e}")))
            .collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    write(dir.join("a_matrix.csv"), csv)?;
    for (i, h) in outcome.histories.iter().enumerate() {
        write_history(dir, &format!("history_D{i}.csv"), h)?;
    }
    if let Some(trace) = &outcome.trace {
        trace.export_csv(&dir.join("trace"), &model.kind().to_string())?;
        println!("trace: {} snapshots, active fraction {:.4}", trace.snapshots.len(), trace.locality(0.1));
    }
    save_checkpoint(&model, dir.join("model.ckpt"))?;
    write(dir.join("run_config.json"), to_json(cfg)?)?;
    println!("R@{} after each block:", cfg.continual_k);
    print!("{}", outcome.report.to_table());
    Ok(())
}

fn training_rows(view: &SplitView) -> Vec<&[u32]> {
    (0..view.n_users()).map(|u| view.train(u)).filter(|r| !r.is_empty()).collect()
}

pub fn explain(cfg: &RunConfig, checkpoint: &Path, item: &str) -> Result<(), CliError> {
    let model = load_checkpoint_as(checkpoint, ModelKind::Kan)?;
    let data = load_data(cfg)?;
    check_items(&model, &data)?;
    let target = data.item_index(item).ok_or_else(|| CliError::Explain(format!("unknown item id `{item}`")))?;

    let view = split_static(&data, cfg.split_ratios, cfg.seed)?;
    let mut rows = training_rows(&view);
    if let Some(n) = cfg.explain_sample {
        rows.shuffle(&mut rng::stream(cfg.seed, "explain"));
        rows.truncate(n.max(1));
    }
    let reference = multi_hot(&rows, data.n_items());
    let labels = data.item_ids().to_vec();
    let graph = compute_importance(&model, reference.view(), Some(&labels), IMPORTANCE_CHUNK)?;
    let pruned = graph.prune(cfg.explain_tau1, cfg.explain_tau2);
    let ranked = pruned.explain_item(target, cfg.explain_top)?;

    let dir = output_dir(cfg)?;
    pruned.export(GraphFormat::Dot, dir.join("graph.dot"))?;
    pruned.export(GraphFormat::Json, dir.join("graph.json"))?;

    let mut text = format!(
        "item {item}: {} of {} edges kept (tau1 {}, tau2 {}), reference users {}\n",
        pruned.unpruned_edges(),
        pruned.layers.iter().map(|l| l.scores.len()).sum::<usize>(),
        cfg.explain_tau1,
        cfg.explain_tau2,
        rows.len()
    );
    if ranked.is_empty() {
        text.push_str("no surviving paths\n");
    } else {
        let _ = writeln!(text, "{:<6}{:<24}{:>14}{:>10}", "rank", "item", "strength", "paths");
        for (r, e) in ranked.iter().enumerate() {
            let _ = writeln!(text, "{:<6}{:<24}{:>14.6e}{:>10}", r + 1, e.label, e.strength, e.paths);
        }
    }
    write(dir.join("explanation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn trace(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let view = split_static(&data, cfg.split_ratios, cfg.seed)?;
    let mut model = CfModel::build(cfg.model_config(data.n_items()))?;
    println!("model: {}", describe(&model));
    let mut tracker = DeltaTracker::new(&model, cfg.trace)?;
    let history = fit(&mut model, &view, &cfg.train_config(), Some(&mut tracker))?;
    let trace = tracker.into_trace();

    let dir = output_dir(cfg)?;
    let files = trace.export_csv(&dir.join("trace"), &model.kind().to_string())?;
    write_history(dir, "history.csv", &history)?;
    let locality = trace.locality(0.1);
    let summary = json!({
        "kind": model.kind().to_string(),
        "snapshots": trace.snapshots.len(),
        "active_fraction_at_0.1": locality,
    });
    write(dir.join("trace_summary.json"), to_json(&summary)?)?;
    println!("{} snapshots written to {}", files.len(), dir.join("trace").display());
    println!("mean fraction of tracked parameters above 10% of the step's largest delta: {locality:.4}");
    Ok(())
}
