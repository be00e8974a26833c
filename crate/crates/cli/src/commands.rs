//! One function per subcommand. Each returns the one-line summary printed
//! on success.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mateloc::channel::ScenarioSpec;
use mateloc::checkpoint::{load_checkpoint, save_checkpoint};
use mateloc::dataset::{generate_dataset, load_dataset, save_dataset, Dataset, Role};
use mateloc::evaluation::{evaluate_with, EvalResult};
use mateloc::experiment::{dataset_seeds, mode_label, rows_to_csv, Lab, LabConfig, ModelKind};
use mateloc::model::ReferencePool;
use mateloc::training::{default_probe_mode, gradcheck_model, train, Probe};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{Command, RunManifest};
use crate::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Runs `manifest` for `command` (and experiment `name`).
pub fn dispatch(command: Command, name: Option<&str>, manifest: &RunManifest) -> Result<String, CliError> {
    if manifest.command != command {
        return Err(CliError::Usage(format!(
            "manifest is for `{}`, not `{}`",
            manifest.command.name(),
            command.name()
        )));
    }
    if command == Command::Experiment {
        // Fail on an unknown protocol before anything is written.
        manifest.experiment.experiment(name.unwrap_or_default())?;
    }
    manifest.check_inputs()?;
    prepare_output(manifest)?;
    match command {
        Command::GenScenario => gen_scenario(manifest),
        Command::GenDataset => gen_dataset(manifest),
        Command::Train => train_cmd(manifest),
        Command::Eval => eval_cmd(manifest),
        Command::Experiment => experiment_cmd(manifest, name.unwrap_or_default()),
        Command::Gradcheck => gradcheck_cmd(manifest),
    }
}

/// Creates the output directory and writes the effective config. A
/// directory that already holds a run is refused.
fn prepare_output(m: &RunManifest) -> Result<(), CliError> {
    let out = &m.output_dir;
    let effective = out.join(EFFECTIVE_CONFIG);
    if effective.exists() {
        return Err(CliError::Runtime(format!("{} already holds a run; choose a new output_dir", out.display())));
    }
    fs::create_dir_all(out)?;
    fs::write(effective, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_scenario(path: &Path) -> Result<ScenarioSpec, CliError> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: ScenarioSpec = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        key: format!("{}:{}", path.display(), e.path()),
        message: e.inner().to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Dataset>, CliError> {
    paths.iter().map(|p| load_dataset(p).map_err(CliError::from)).collect()
}

fn gen_scenario(m: &RunManifest) -> Result<String, CliError> {
    let g = &m.generate;
    let dir = m.output_dir.join("scenarios");
    for &id in &g.ids {
        let spec = ScenarioSpec::procedural(id, m.seed.wrapping_add(u64::from(id)), g.num_antennas, g.num_subcarriers);
        write_json(&dir.join(format!("scenario_{id}.json")), &spec)?;
    }
    Ok(format!("wrote {} scenario specs to {}", g.ids.len(), dir.display()))
}

fn gen_dataset(m: &RunManifest) -> Result<String, CliError> {
    let dir = m.output_dir.join("datasets");
    fs::create_dir_all(&dir)?;
    let mut total = 0;
    for path in &m.scenarios {
        let spec = read_scenario(path)?;
        let (train_seed, test_seed) = dataset_seeds(m.seed, spec.id);
        let train = generate_dataset(&spec, m.generate.train_samples, Role::Training, train_seed)?;
        let test = generate_dataset(&spec, m.generate.test_samples, Role::Testing, test_seed)?;
        save_dataset(&train, &dir.join(format!("scenario_{}_train.alds", spec.id)))?;
        save_dataset(&test, &dir.join(format!("scenario_{}_test.alds", spec.id)))?;
        total += train.len() + test.len();
    }
    Ok(format!("wrote {} datasets ({total} samples) to {}", 2 * m.scenarios.len(), dir.display()))
}

fn train_cmd(m: &RunManifest) -> Result<String, CliError> {
    let config = m.model.as_ref().expect("validated manifest has a model");
    let pools = load_all(&m.datasets.train)?.into_iter().map(ReferencePool::new).collect::<Result<Vec<_>, _>>()?;
    let tests = load_all(&m.datasets.test)?;
    let mode = default_probe_mode(config, 1.0);
    let mut probes = Vec::new();
    for t in &tests {
        if let Some(pool) = pools.iter().find(|p| p.id() == t.id()) {
            probes.push(Probe { reference: pool, test: t.samples(), mode, options: m.eval.options });
        }
    }
    let refs: Vec<&ReferencePool> = pools.iter().collect();
    let (model, log) = train(config, &m.train, &refs, &probes)?;
    let ids: Vec<u32> = pools.iter().map(ReferencePool::id).collect();
    let last = log.rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    let metadata = json!({ "seed": m.seed, "steps": m.train.steps, "train_scenarios": ids, "final_loss": last });
    let ckpt = m.output_dir.join("model");
    save_checkpoint(&model, metadata, &ckpt)?;
    fs::write(m.output_dir.join("train_log.csv"), log.to_csv())?;
    Ok(format!(
        "trained {} on scenarios {ids:?} for {} steps, final loss {last:.4e}, checkpoint {}",
        model.name(),
        m.train.steps,
        ckpt.with_extension("json").display()
    ))
}

fn records_csv(r: &EvalResult) -> String {
    let mut s = String::from("index,truth_x,truth_y,centers,pred_x,pred_y,error_m\n");
    for rec in &r.records {
        let centers: Vec<String> = rec.centers.iter().map(|c| format!("{} {}", c.x, c.y)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            rec.index,
            rec.truth.x,
            rec.truth.y,
            centers.join(";"),
            rec.prediction.x,
            rec.prediction.y,
            rec.error
        );
    }
    s
}

fn eval_cmd(m: &RunManifest) -> Result<String, CliError> {
    let (model, _) = load_checkpoint(m.eval.checkpoint.as_ref().expect("validated manifest has a checkpoint"))?;
    let coarse = match &m.eval.coarse_checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => model.clone(),
    };
    let reference = ReferencePool::new(load_dataset(&m.datasets.train[0])?)?;
    let test = load_dataset(&m.datasets.test[0])?;
    if reference.id() != test.id() {
        return Err(CliError::Runtime(format!(
            "reference set is scenario {} but the test set is scenario {}",
            reference.id(),
            test.id()
        )));
    }
    let mode = m.eval.mode.unwrap_or_else(|| default_probe_mode(&model.config, 1.0));
    let r = evaluate_with(&coarse, &model, &reference, test.samples(), mode, &m.eval.options)?;
    fs::write(m.output_dir.join("eval_records.csv"), records_csv(&r))?;
    write_json(&m.output_dir.join("eval_summary.json"), &r.summary)?;
    let s = r.summary;
    Ok(format!(
        "{} on scenario {} [{}]: mean {:.4} m, p10 {:.4} m, p90 {:.4} m over {} samples",
        model.name(),
        test.id(),
        mode_label(&mode),
        s.mean,
        s.p10,
        s.p90,
        s.count
    ))
}

fn build_lab(m: &RunManifest) -> Result<Lab, CliError> {
    let mut config: LabConfig = m.experiment.lab.clone();
    let mut lab = if !m.datasets.train.is_empty() {
        Lab::from_datasets(config, load_all(&m.datasets.train)?, load_all(&m.datasets.test)?)?
    } else {
        if !m.scenarios.is_empty() {
            config.scenarios = m.scenarios.iter().map(|p| read_scenario(p)).collect::<Result<_, _>>()?;
        }
        Lab::generate(config)?
    };
    for entry in &m.experiment.checkpoints {
        let (model, _) = load_checkpoint(&entry.checkpoint)?;
        lab.insert_model(entry.kind, &entry.train_scenarios, entry.sampling, model);
    }
    Ok(lab)
}

fn experiment_cmd(m: &RunManifest, name: &str) -> Result<String, CliError> {
    let exp = m.experiment.experiment(name)?;
    let mut lab = build_lab(m)?;
    let rows = lab.run(&exp)?;
    let csv = m.output_dir.join(format!("{name}.csv"));
    fs::write(&csv, rows_to_csv(&rows))?;
    let logs = m.output_dir.join("logs");
    fs::create_dir_all(&logs)?;
    for (label, log) in &lab.logs {
        fs::write(logs.join(format!("{label}.csv")), log.to_csv())?;
    }
    Ok(format!("{name}: {} rows written to {}", rows.len(), csv.display()))
}

#[derive(Serialize)]
struct GradcheckEntry {
    model: String,
    probes: usize,
    max_rel_error: f64,
    passed: bool,
}

fn gradcheck_cmd(m: &RunManifest) -> Result<String, CliError> {
    let g = &m.gradcheck;
    let spec = match m.scenarios.first() {
        Some(p) => read_scenario(p)?,
        None => ScenarioSpec::desk_family().remove(0),
    };
    let data = generate_dataset(&spec, g.samples, Role::Training, m.seed)?;
    let pool = ReferencePool::new(data)?;
    let lab = LabConfig::default();
    let models = if g.models.is_empty() {
        let lab = Lab::from_datasets(lab, Vec::new(), Vec::new())?;
        [ModelKind::Mateformer, ModelKind::Icl, ModelKind::D2lRaw].map(|k| lab.model_config(k)).to_vec()
    } else {
        g.models.clone()
    };
    let mut entries = Vec::new();
    for config in &models {
        let report = gradcheck_model(config, &pool, g.groups, g.probes, m.seed)?;
        entries.push(GradcheckEntry {
            model: config.name().to_string(),
            probes: report.total_probes(),
            max_rel_error: report.max_rel_error,
            passed: report.max_rel_error < g.tolerance,
        });
    }
    write_json(&m.output_dir.join("gradcheck.json"), &entries)?;
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let detail: Vec<String> = entries.iter().map(|e| format!("{} {:.2e}", e.model, e.max_rel_error)).collect();
    let line = format!("max relative gradient error {worst:.3e} ({}), gate {:.0e}", detail.join(", "), g.tolerance);
    if entries.iter().all(|e| e.passed) {
        Ok(format!("PASS {line}"))
    } else {
        Err(CliError::Gate(format!("FAIL {line}")))
    }
}
