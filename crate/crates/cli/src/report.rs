//! `export-report`: a Markdown summary of whatever a run directory holds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::CliError;
use crate::rundir::{RunDir, RUN_FILE};

fn read_json(path: &Path) -> Result<Option<Value>, CliError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::RunDir(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn num(v: &Value) -> String {
    v.as_f64().map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into())
}

pub fn export(run: &RunDir, output: &str) -> Result<String, CliError> {
    let record = read_json(&run.file(RUN_FILE))?
        .ok_or_else(|| CliError::RunDir(format!("{} has no {RUN_FILE}", run.path.display())))?;
    let mut md = String::new();
    let mut summary = json!({"config_digest": record["config_digest"]});
    writeln!(md, "# Run report\n").unwrap();
    writeln!(md, "Config digest: `{}`\n", record["config_digest"].as_str().unwrap_or("?")).unwrap();

    if let Some(split) = read_json(&run.file("split.json"))? {
        writeln!(md, "## Split\n").unwrap();
        writeln!(
            md,
            "{} examples, train {} / validation {} (ratio {}, seed {}).\n",
            split["total"], split["train_size"], split["val_size"], split["ratio"], split["seed"]
        )
        .unwrap();
        summary["split"] = split;
    }

    let mut evals: Vec<_> = fs::read_dir(&run.path)
        .map_err(|e| CliError::io(&run.path, e))?
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_prefix("eval-")?.strip_suffix(".json")?.to_string();
            Some((stem, e.path()))
        })
        .collect();
    evals.sort();
    if !evals.is_empty() {
        writeln!(md, "## Evaluations\n").unwrap();
        writeln!(md, "| run | n | accuracy | macro-F1 | fallback rate |").unwrap();
        writeln!(md, "|---|---|---|---|---|").unwrap();
        let mut rows = serde_json::Map::new();
        for (name, path) in evals {
            let Some(r) = read_json(&path)? else { continue };
            writeln!(
                md,
                "| {name} | {} | {} | {} | {} |",
                r["n_examples"],
                num(&r["accuracy"]),
                num(&r["macro_f1"]),
                num(&r["fallback_rate"])
            )
            .unwrap();
            rows.insert(
                name,
                json!({"accuracy": r["accuracy"], "macro_f1": r["macro_f1"], "n_examples": r["n_examples"]}),
            );
        }
        md.push('\n');
        summary["evaluations"] = Value::Object(rows);
    }

    if let Ok(csv) = fs::read_to_string(run.file("sweep.csv")) {
        writeln!(md, "## Demonstration sweep\n").unwrap();
        let mut lines = csv.lines();
        if let Some(header) = lines.next() {
            let cols: Vec<_> = header.split(',').collect();
            writeln!(md, "| {} |", cols.join(" | ")).unwrap();
            writeln!(md, "|{}", "---|".repeat(cols.len())).unwrap();
            for line in lines {
                writeln!(md, "| {} |", line.split(',').collect::<Vec<_>>().join(" | ")).unwrap();
            }
        }
        md.push('\n');
    }

    if let Some(opt) = read_json(&run.file("optimizer_report.json"))? {
        let c = &opt["config"];
        let b = &opt["best"];
        writeln!(md, "## Prompt optimization\n").unwrap();
        writeln!(
            md,
            "instructions={} fewshot-sets={} max-demos={} trials={}\n",
            c["num_instructions"], c["num_fewshot_sets"], c["max_bootstrapped_demos"], c["num_trials"]
        )
        .unwrap();
        writeln!(
            md,
            "Best cell: instruction {}, demo set {}; trial score {}, validation accuracy {}.\n",
            b["instruction_index"],
            b["demo_set_index"],
            num(&b["trial_score"]),
            num(&b["full_val_score"])
        )
        .unwrap();
        summary["optimizer"] = json!({"config": c, "best_full_val_score": b["full_val_score"]});
    }

    if let Some(ens) = read_json(&run.file("ensemble_train.json"))? {
        writeln!(md, "## Ensemble\n").unwrap();
        writeln!(md, "| model | solo accuracy |").unwrap();
        writeln!(md, "|---|---|").unwrap();
        if let Some(solo) = ens["solo_accuracies"].as_object() {
            for (m, a) in solo {
                writeln!(md, "| {m} | {} |", num(a)).unwrap();
            }
        }
        writeln!(
            md,
            "\nMajority vote {}; {} meta-model cross-validated {}.\n",
            num(&ens["majority_accuracy"]),
            ens["kind"].as_str().unwrap_or("?"),
            num(&ens["cross_validated_accuracy"])
        )
        .unwrap();
        summary["ensemble"] = ens;
    }

    let out = run.write(output, &md)?;
    let json_name = Path::new(output).with_extension("json");
    run.write_json(json_name.to_str().unwrap_or("report.json"), &summary)?;
    Ok(format!("wrote {}", out.display()))
}
