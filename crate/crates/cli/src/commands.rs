//! One function per subcommand. Each writes its artifacts under the run
//! directory and returns a short JSON summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};

use drdm_core::bundle::TensorBundle;
use drdm_core::engine::{trace_csv, GradFixture};
use drdm_core::nn::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use drdm_core::schedule::{schedule_csv, schedule_table};
use drdm_core::TrainedModel;
use serde_json::{json, Value};

use crate::config::{parse_output, parse_sign, ExperimentConfig};
use crate::error::{io_err, CliError};
use crate::pipeline::{
    ladder_bundle, read_ladders, run_metrics, sample_tiles, score, train_model, Dataset,
};
use crate::report::{write_csv, LevelAccumulator, MetricsReport, RunMetrics};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";
pub const RUN_JSON: &str = "run.json";

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

/// Create the run directory and drop the resolved-config snapshot into it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    Ok(out)
}

fn trace_enabled() -> bool {
    std::env::var("DRDM_TRACE").is_ok_and(|v| v == "1")
}

pub fn synth(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let out = prepare(cfg)?;
    let data = Dataset::synthesize(cfg)?;
    let dir = out.join("data");
    let mut consistency = Vec::new();
    for (i, city) in data.cities.iter().enumerate() {
        city.to_bundle().save(&dir.join(format!("city-{i}")))?;
        consistency.push(city.traffic.max_consistency_error()?);
    }
    let summary = json!({
        "command": "synth",
        "data": dir,
        "cities": data.cities.len(),
        "tiles": data.tiles.len(),
        "train_tiles": data.train.len(),
        "validation_tiles": data.validation.len(),
        "peak": data.peak,
        "max_consistency_error": consistency,
    });
    write_json(&out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}

pub fn train(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let out = prepare(cfg)?;
    let data = Dataset::resolve(cfg)?;
    let (model, report) = train_model(cfg, &data, cfg.run.seed)?;
    let ckpt = out.join("checkpoint");
    model.to_bundle().save(&ckpt)?;
    let summary = json!({
        "command": "train",
        "checkpoint": ckpt,
        "seed": cfg.run.seed,
        "parameters": model.net.params.parameter_count(),
        "stages": model.plan.k(),
        "report": report,
    });
    write_json(&out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}

fn load_model(path: &Path) -> Result<TrainedModel, CliError> {
    Ok(TrainedModel::from_bundle(&TensorBundle::load(path)?)?)
}

fn default_checkpoint(cfg: &ExperimentConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.out_dir().join("checkpoint"), Path::to_path_buf)
}

fn write_metrics(out: &Path, variant: &str, run: RunMetrics) -> Result<MetricsReport, CliError> {
    write_json(&out.join(RUN_JSON), &run)?;
    let report = MetricsReport::aggregate(variant, vec![run])?;
    write_csv(&out.join(METRICS_CSV), std::slice::from_ref(&report))?;
    Ok(report)
}

pub fn sample(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Value, CliError> {
    let ckpt = default_checkpoint(cfg, checkpoint);
    let model = load_model(&ckpt)?;
    let out = prepare(cfg)?;
    let data = Dataset::resolve(cfg)?;
    let ids = data.held_out(cfg);
    if ids.is_empty() {
        return Err(CliError::Usage("no held-out tiles to sample; raise data.validation_fraction".into()));
    }
    let trace = trace_enabled();
    let (samples, per_run) = sample_tiles(&model, &data, &ids, cfg.run.seed, trace)?;
    if trace {
        let dir = out.join("trace");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for s in &samples {
            write_text(&dir.join(format!("tile-{}.csv", s.tile)), &trace_csv(&s.output.trace))?;
        }
    }
    let generated: Vec<_> = samples.iter().map(|s| (s.tile, s.output.levels.clone())).collect();
    let truth = ids
        .iter()
        .map(|&i| Ok((i, drdm_core::engine::stage_ladder(&model.plan, &data.tiles[i].fine)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    ladder_bundle("generated", &generated, &data).save(&out.join("samples"))?;
    ladder_bundle("truth", &truth, &data).save(&out.join("truth"))?;
    let levels = score(&model.plan, &data, &samples, &cfg.eval.metrics)?;
    let run = run_metrics(cfg.run.seed, levels, &samples, None, Some(per_run));
    let report = write_metrics(&out, "default", run)?;
    let summary = json!({
        "command": "sample",
        "checkpoint": ckpt,
        "tiles": ids.len(),
        "samples": out.join("samples"),
        "metrics": report.rows,
    });
    write_json(&out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}

pub fn eval(cfg: &ExperimentConfig, generated: Option<&Path>, truth: Option<&Path>) -> Result<Value, CliError> {
    let g_path = generated.map_or_else(|| cfg.out_dir().join("samples"), Path::to_path_buf);
    let t_path = truth.map_or_else(|| cfg.out_dir().join("truth"), Path::to_path_buf);
    let g_bundle = TensorBundle::load(&g_path)?;
    let t_bundle = TensorBundle::load(&t_path)?;
    let out = prepare(cfg)?;
    let peak = t_bundle.meta["peak"]
        .as_f64()
        .ok_or_else(|| CliError::Usage(format!("{} does not record a peak", t_path.display())))?;
    let gen = read_ladders(&g_bundle)?;
    let tru = read_ladders(&t_bundle)?;
    let mut accs: Vec<LevelAccumulator> = Vec::new();
    for (tile, g_levels) in &gen {
        let (_, t_levels) = tru
            .iter()
            .find(|(i, _)| i == tile)
            .ok_or_else(|| CliError::Usage(format!("tile {tile} is missing from the truth bundle")))?;
        // generated ladders may start below the coarsest truth level (refinement output)
        let offset = t_levels
            .len()
            .checked_sub(g_levels.len())
            .ok_or_else(|| CliError::Usage(format!("tile {tile} has more generated than true levels")))?;
        if accs.is_empty() {
            accs = g_levels.iter().map(|g| LevelAccumulator::new(g.level.clone(), peak)).collect();
        }
        for (j, g) in g_levels.iter().enumerate() {
            accs[j].add(g, &t_levels[offset + j])?;
        }
    }
    let levels = accs.iter().map(|a| a.finish(&cfg.eval.metrics)).collect();
    let run = RunMetrics {
        seed: cfg.run.seed,
        levels,
        forward_passes: 0,
        train_s_per_epoch: None,
        sample_s_per_run: None,
    };
    let report = write_metrics(&out, "default", run)?;
    let summary = json!({"command": "eval", "generated": g_path, "truth": t_path, "metrics": report.rows});
    write_json(&out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}

/// Refine the tiles of a ladder bundle from one of its levels (the coarsest
/// by default) down to the finest plan level.
pub fn refine(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    coarse: &Path,
    level: Option<&str>,
) -> Result<Value, CliError> {
    let model = load_model(&default_checkpoint(cfg, checkpoint))?;
    let bundle = TensorBundle::load(coarse)?;
    let ladders = read_ladders(&bundle)?;
    let out = prepare(cfg)?;
    let data = Dataset::resolve(cfg)?;
    let mut refined = Vec::new();
    let mut scored = Vec::new();
    let mut passes = 0;
    for (tile, grids) in &ladders {
        let start = match level {
            Some(label) => grids
                .iter()
                .find(|g| g.level.label == label)
                .ok_or_else(|| CliError::Usage(format!("level `{label}` is not in {}", coarse.display())))?,
            None => grids.first().ok_or_else(|| CliError::Usage("empty ladder".into()))?,
        };
        let stage = model
            .plan
            .stages
            .iter()
            .position(|l| l.same_resolution(&start.level))
            .map(|i| i + 1)
            .ok_or_else(|| CliError::Usage(format!("level {} is not a stage of the checkpoint plan", start.level.label)))?;
        let t = data
            .tiles
            .get(*tile)
            .ok_or_else(|| CliError::Usage(format!("tile {tile} does not exist in the configured data")))?;
        let mut predictor = model.predictor(&t.context)?;
        let output = drdm_core::refine_zero_shot(
            &mut predictor,
            start,
            &model.plan,
            &model.spec,
            t.fine.shape(),
            &model.normalizer,
            crate::pipeline::tile_seed(cfg.run.seed, *tile),
            &Default::default(),
        )?;
        passes = output.forward_passes;
        refined.push((*tile, vec![output.finest().clone()]));
        if stage < model.plan.k() {
            scored.push(crate::pipeline::TileSample { tile: *tile, output });
        }
    }
    ladder_bundle("refined", &refined, &data).save(&out.join("refined"))?;
    let mut summary = json!({
        "command": "refine",
        "coarse": coarse,
        "tiles": refined.len(),
        "forward_passes": passes,
        "refined": out.join("refined"),
    });
    if !scored.is_empty() {
        let levels = score(&model.plan, &data, &scored, &cfg.eval.metrics)?;
        let report = write_metrics(&out, "refine", run_metrics(cfg.run.seed, levels, &scored, None, None))?;
        summary["metrics"] = json!(report.rows);
    }
    write_json(&out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let out = prepare(cfg)?;
    let plan = cfg.build_plan().map_err(|e| CliError::Config(vec![e]))?;
    let spec = cfg.spec();
    let rows = schedule_table(&plan, &spec)?;
    let path = out.join("schedule.csv");
    write_text(&path, &schedule_csv(&rows))?;
    let summary = json!({
        "command": "schedule",
        "csv": path,
        "spec": spec.label(),
        "boundaries": plan.boundaries,
        "stages": plan.stages.iter().map(|l| &l.label).collect::<Vec<_>>(),
    });
    write_json(&out.join(REPORT_JSON), &summary)?;
    Ok(summary)
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let out = prepare(cfg)?;
    let output = parse_output(&cfg.model.output).unwrap_or(drdm_core::OutputMode::Data);
    let sign = parse_sign(&cfg.model.prior_sign).unwrap_or(drdm_core::PriorSign::Eq11);
    let fixture = GradFixture::new(cfg.run.seed, output, sign)?;
    let report = fixture.check(DEFAULT_STEP, DEFAULT_TOLERANCE)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    if !report.passed() {
        return Err(CliError::GradCheck(report.failing().into_iter().map(String::from).collect()));
    }
    Ok(json!({
        "command": "gradcheck",
        "blocks": report.blocks.len(),
        "worst": report.worst(),
    }))
}

/// Train and sample every variant of a preset for every seed, in process.
pub fn ablate(cfg: &ExperimentConfig, preset: Option<&str>, seeds: Option<&[u64]>) -> Result<Value, CliError> {
    let name = preset.unwrap_or(&cfg.ablate.preset);
    let variants = crate::ablate::preset(name)
        .ok_or_else(|| CliError::Usage(format!("unknown ablation preset `{name}`")))?;
    let seeds = seeds.unwrap_or(&cfg.ablate.seeds);
    if seeds.is_empty() {
        return Err(CliError::Usage("ablation needs at least one seed".into()));
    }
    let out = prepare(cfg)?;
    let data = Dataset::resolve(cfg)?;
    let ids = data.held_out(cfg);
    if ids.is_empty() {
        return Err(CliError::Usage("no held-out tiles to evaluate".into()));
    }
    let mut reports = Vec::new();
    for v in &variants {
        let mut vcfg = cfg.clone();
        (v.apply)(&mut vcfg);
        vcfg.validate()?;
        let mut runs = Vec::new();
        for &seed in seeds {
            let (model, train_report) = train_model(&vcfg, &data, seed)?;
            let (samples, per_run) = sample_tiles(&model, &data, &ids, seed, false)?;
            let levels = score(&model.plan, &data, &samples, &vcfg.eval.metrics)?;
            let run = run_metrics(seed, levels, &samples, Some(&train_report), Some(per_run));
            let dir = out.join(&v.label).join(format!("seed-{seed}"));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_json(&dir.join(RUN_JSON), &run)?;
            runs.push(run);
        }
        reports.push(MetricsReport::aggregate(&v.label, runs)?);
    }
    write_csv(&out.join(METRICS_CSV), &reports)?;
    write_json(&out.join(REPORT_JSON), &reports)?;
    Ok(json!({
        "command": "ablate",
        "preset": name,
        "seeds": seeds,
        "variants": reports
            .iter()
            .map(|r| json!({"variant": r.variant, "finest_mae": r.finest().and_then(|f| f.mae)}))
            .collect::<Vec<_>>(),
    }))
}

/// Combine the `run.json` files of per-seed child runs into one report.
pub fn aggregate_seeds(out: &Path, seed_dirs: &[(u64, PathBuf)]) -> Result<Option<MetricsReport>, CliError> {
    let mut runs = Vec::new();
    for (_, dir) in seed_dirs {
        let path = dir.join(RUN_JSON);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        runs.push(serde_json::from_str::<RunMetrics>(&text)?);
    }
    let report = MetricsReport::aggregate("default", runs)?;
    write_csv(&out.join(METRICS_CSV), std::slice::from_ref(&report))?;
    write_json(&out.join(REPORT_JSON), &report)?;
    Ok(Some(report))
}
