//! One function per subcommand. Each reads the inputs it names, writes
//! only to paths it was given, and reports progress on stdout; anything
//! that goes wrong bubbles up as a one-line error.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use compat_reason_core::autodiff::Graph;
use compat_reason_core::colorfeat::{build_color_feature, color_histogram};
use compat_reason_core::compatnet::{
    forward_record, load_checkpoint, predict_judgment, save_checkpoint, softmax, CompatModel,
};
use compat_reason_core::evalharness::{
    evaluate, sweep_alpha, sweep_formulations, write_plot_json, write_report_csv,
    ExperimentConfig,
};
use compat_reason_core::explain::TemplateTable;
use compat_reason_core::gradcheck::{check_first_order, check_second_order};
use compat_reason_core::reasoning::{f_vector, positive_contrib, predict_reason};
use compat_reason_core::record::{
    read_ndjson_file, write_ndjson_file, Judgment, OutfitRecord, Reason,
};
use compat_reason_core::synthdata::generate_dataset;
use compat_reason_core::training::train;

use crate::config::CliConfig;
use crate::pixels::load_pixels;

/// Generate a labeled corpus and write one NDJSON file per split.
pub fn gen_data(config: &CliConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let splits = generate_dataset(&config.data, seed).context("generating dataset")?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    for (name, records) in
        [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)]
    {
        let path = out_dir.join(format!("{name}.ndjson"));
        write_ndjson_file(&path, records)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!(
        "wrote {} train / {} val / {} test records to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out_dir.display()
    );
    Ok(())
}

/// Turn an image or pixel list into the quantized color feature.
pub fn featurize(input: &Path, out: Option<&Path>) -> Result<()> {
    let pixels = load_pixels(input)?;
    let histogram = color_histogram(&pixels).context("quantizing pixels")?;
    let feature = build_color_feature(&histogram);
    let body = serde_json::to_string_pretty(&serde_json::json!({
        "pixels": pixels.len(),
        "feature": feature,
    }))?;
    match out {
        Some(path) => std::fs::write(path, body + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => println!("{body}"),
    }
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<OutfitRecord>> {
    let records = read_ndjson_file(path)
        .with_context(|| format!("cannot load records from {}", path.display()))?;
    if records.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(records)
}

/// Train on an NDJSON corpus and save the checkpoint.
pub fn run_train(
    config: &CliConfig,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let train_records = load_records(data)?;
    let val_records = val.map(load_records).transpose()?;
    let outcome = train(
        &train_records,
        val_records.as_deref(),
        &config.model,
        &config.train,
    )
    .context("training")?;
    for metrics in outcome
        .metrics
        .iter()
        .step_by(config.train.lr_drop_every.max(1))
        .chain(outcome.metrics.last())
    {
        let mut line = format!("epoch {:>4}  loss {:.4}", metrics.epoch, metrics.loss);
        if let Some(acc) = metrics.judgment_acc {
            write!(line, "  val judgment {acc:.1}").unwrap();
        }
        if let Some(acc) = metrics.reason_acc {
            write!(line, "  val reason {acc:.1}").unwrap();
        }
        println!("{line}");
    }
    if let Some(best) = outcome.best_val_epoch {
        println!("best validation epoch: {best}");
    }
    save_checkpoint(&outcome.model, out)
        .with_context(|| format!("cannot write checkpoint {}", out.display()))?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

/// Score a checkpoint against a labeled corpus; the numbers land in a CSV.
pub fn run_eval(checkpoint: &Path, data: &Path, out: &Path, eval_batch: usize) -> Result<()> {
    let model = load_model(checkpoint)?;
    let records = load_records(data)?;
    let metrics = evaluate(&model, &records, eval_batch).context("evaluating")?;
    let reason = metrics
        .reason_accuracy
        .map(|v| v.to_string())
        .unwrap_or_default();
    let csv = format!(
        "n,judgment_acc,reason_acc\n{},{},{}\n",
        metrics.n, metrics.judgment_accuracy, reason
    );
    std::fs::write(out, csv).with_context(|| format!("cannot write {}", out.display()))?;
    match metrics.reason_accuracy {
        Some(r) => println!(
            "{} records: judgment {:.1}%, reason {:.1}%",
            metrics.n, metrics.judgment_accuracy, r
        ),
        None => println!(
            "{} records: judgment {:.1}%, reason n/a",
            metrics.n, metrics.judgment_accuracy
        ),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<CompatModel> {
    load_checkpoint(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))
}

/// Judge one record: verdict, reason, the rendered sentence, and the
/// per-factor score table behind the choice.
pub fn run_explain(
    checkpoint: &Path,
    record_path: &Path,
    index: usize,
    templates: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let records = load_records(record_path)?;
    let record = records.get(index).with_context(|| {
        format!("record index {index} out of range ({} records)", records.len())
    })?;
    let table = match templates {
        Some(path) => TemplateTable::from_file(path)
            .with_context(|| format!("cannot load templates from {}", path.display()))?,
        None => TemplateTable::builtin(),
    };

    let partition = model.config.partition();
    let mut g = Graph::new();
    let pass = forward_record(&mut g, &model, record).context("forward pass")?;
    let logits = g.value(pass.y).data().to_vec();
    let judgment = predict_judgment(&logits);
    let reason = predict_reason(&mut g, pass.x, pass.y, &partition).context("scoring reasons")?;
    let probs = softmax(&logits);
    let sentence = table
        .generate(judgment, reason, &record.attributes)
        .context("rendering explanation")?;

    let mut report = String::new();
    writeln!(report, "outfit:   {}", record.outfit_id).unwrap();
    writeln!(
        report,
        "judgment: {judgment} (good {:.3} / normal {:.3} / bad {:.3})",
        probs[Judgment::Good.index()],
        probs[Judgment::Normal.index()],
        probs[Judgment::Bad.index()]
    )
    .unwrap();
    match reason {
        Some(reason) => writeln!(report, "reason:   {reason}").unwrap(),
        None => writeln!(report, "reason:   none (normal outfit)").unwrap(),
    }
    writeln!(report, "\n{sentence}\n").unwrap();

    writeln!(report, "{:<12}{:>10}{:>10}{:>10}", "", "color", "print", "design").unwrap();
    for class in Judgment::ALL {
        let row = positive_contrib(&mut g, pass.x, pass.y, class, &partition)
            .context("scoring contributions")?
            .values(&g);
        writeln!(
            report,
            "{:<12}{:>10.4}{:>10.4}{:>10.4}",
            format!("C+({class})"),
            row[Reason::Color.index()],
            row[Reason::Print.index()],
            row[Reason::Design.index()]
        )
        .unwrap();
    }
    if judgment != Judgment::Normal {
        let f = f_vector(&mut g, pass.x, pass.y, judgment, &partition)
            .context("scoring difference")?
            .values(&g);
        writeln!(
            report,
            "{:<12}{:>10.4}{:>10.4}{:>10.4}",
            format!("F({judgment})"),
            f[Reason::Color.index()],
            f[Reason::Print.index()],
            f[Reason::Design.index()]
        )
        .unwrap();
    }

    match out {
        Some(path) => std::fs::write(path, &report)
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => print!("{report}"),
    }
    Ok(())
}

fn experiment_config(config: &CliConfig) -> ExperimentConfig {
    ExperimentConfig {
        data: config.data.clone(),
        data_seed: config.sweep.data_seed,
        model: config.model,
        train: config.train.clone(),
        repetitions: config.sweep.repetitions,
        eval_batch: config.sweep.eval_batch,
    }
}

fn write_report(
    report: &compat_reason_core::evalharness::RunReport,
    out: &Path,
    plot_json: Option<&Path>,
) -> Result<()> {
    write_report_csv(out, report).with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {} settings to {}", report.settings.len(), out.display());
    if let Some(path) = plot_json {
        write_plot_json(path, report)
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!("wrote plot data to {}", path.display());
    }
    Ok(())
}

/// Sweep regularizer weights over the configured grid.
pub fn run_sweep_alpha(config: &CliConfig, out: &Path, plot_json: Option<&Path>) -> Result<()> {
    let experiment = experiment_config(config);
    let report = sweep_alpha(
        &config.sweep.alphas,
        &config.sweep.regularizers,
        &experiment,
    )
    .context("alpha sweep")?;
    write_report(&report, out, plot_json)
}

/// Compare the reason formulations on unregularized models.
pub fn run_sweep_formulations(
    config: &CliConfig,
    out: &Path,
    plot_json: Option<&Path>,
) -> Result<()> {
    let experiment = experiment_config(config);
    let report = sweep_formulations(&experiment).context("formulation sweep")?;
    write_report(&report, out, plot_json)
}

const FIRST_ORDER_TOL: f64 = 1e-5;
const SECOND_ORDER_TOL: f64 = 1e-4;

/// Compare analytic gradients against central finite differences on random
/// programs; any drift beyond tolerance is a failure.
pub fn run_selfcheck(base_seed: u64, seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!("selfcheck needs at least one seed");
    }
    let mut worst_first = 0.0f64;
    let mut worst_second = 0.0f64;
    let mut coords = 0usize;
    for seed in base_seed..base_seed + seeds {
        let first = check_first_order(seed, 16, 3, 1e-5);
        let second = check_second_order(seed, 16, 3, 1e-5, 6);
        worst_first = worst_first.max(first.max_rel_err);
        worst_second = worst_second.max(second.max_rel_err);
        coords += first.coords + second.coords;
    }
    println!(
        "first order:  worst rel err {worst_first:.2e} over {seeds} seeds (tolerance {FIRST_ORDER_TOL:.0e})"
    );
    println!(
        "second order: worst rel err {worst_second:.2e} over {seeds} seeds (tolerance {SECOND_ORDER_TOL:.0e})"
    );
    println!("{coords} coordinates compared");
    if worst_first > FIRST_ORDER_TOL || worst_second > SECOND_ORDER_TOL {
        bail!(
            "gradient check failed: first order {worst_first:.2e} (tolerance {FIRST_ORDER_TOL:.0e}), second order {worst_second:.2e} (tolerance {SECOND_ORDER_TOL:.0e})"
        );
    }
    println!("gradients agree with finite differences");
    Ok(())
}

/// `COMPAT_REASON_THREADS` caps worker parallelism. All current paths are
/// single-threaded, so the cap is only validated, never exceeded.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("COMPAT_REASON_THREADS") {
        Ok(value) => {
            let n: usize = value
                .parse()
                .ok()
                .filter(|n| *n >= 1)
                .with_context(|| {
                    format!("COMPAT_REASON_THREADS={value:?} is not a positive integer")
                })?;
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}
