//! In-memory building blocks behind the commands.

use std::path::Path;
use std::time::Instant;

use drdm_core::bundle::TensorBundle;
use drdm_core::engine::{stage_ladder, SampleOptions, SampleOutput, TrainReport, TrainSample};
use drdm_core::synth::{generate_city, split_tiles, tiles};
use drdm_core::{
    refine_zero_shot, rrdp_sample, train, Denoiser, Normalizer, RgpPlan, SpatioTemporalGrid, SyntheticCity, Tile,
    TrainedModel,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{LevelAccumulator, RunMetrics};

/// All tiles of every city plus a fixed train/validation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cities: Vec<SyntheticCity>,
    pub tiles: Vec<Tile>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Largest finest-level value over all cities.
    pub peak: f64,
}

impl Dataset {
    pub fn from_cities(cities: Vec<SyntheticCity>, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let mut all = Vec::new();
        for c in &cities {
            all.extend(tiles(c, cfg.data.tile)?);
        }
        // the split depends on the data seed only, so held-out tiles stay fixed across run seeds
        let (train, validation) = split_tiles(all.len(), cfg.data.validation_fraction, cfg.city.seed);
        if train.is_empty() {
            return Err(CliError::Usage("the split leaves no training tiles".into()));
        }
        let peak = cities.iter().map(|c| c.psnr_peak).fold(0.0, f64::max);
        Ok(Self {
            cities,
            tiles: all,
            train,
            validation,
            peak,
        })
    }

    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let cities = (0..cfg.data.cities as u64)
            .map(|i| generate_city(&cfg.city, cfg.city.seed + i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_cities(cities, cfg)
    }

    /// Load `dir` as one city bundle, or `dir/city-0`, `dir/city-1`, … if present.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let mut cities = Vec::new();
        if dir.join("city-0").is_dir() {
            let mut i = 0;
            while dir.join(format!("city-{i}")).is_dir() {
                cities.push(SyntheticCity::from_bundle(&TensorBundle::load(&dir.join(format!("city-{i}")))?)?);
                i += 1;
            }
        } else {
            cities.push(SyntheticCity::from_bundle(&TensorBundle::load(dir)?)?);
        }
        Self::from_cities(cities, cfg)
    }

    pub fn resolve(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        if cfg.data.bundle.is_empty() {
            Self::synthesize(cfg)
        } else {
            Self::load(Path::new(&cfg.data.bundle), cfg)
        }
    }

    /// Validation tiles, capped by `eval.held_out_tiles` when that is non-zero.
    pub fn held_out(&self, cfg: &ExperimentConfig) -> Vec<usize> {
        let cap = match cfg.eval.held_out_tiles {
            0 => self.validation.len(),
            n => n.min(self.validation.len()),
        };
        self.validation[..cap].to_vec()
    }
}

pub fn train_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
) -> Result<(TrainedModel, TrainReport), CliError> {
    let plan = cfg.build_plan().map_err(|e| CliError::Config(vec![e]))?;
    let spec = cfg.spec();
    let normalizer = Normalizer::fit(data.train.iter().map(|&i| &data.tiles[i].fine))?;
    let samples = data
        .train
        .iter()
        .map(|&i| {
            let t = &data.tiles[i];
            TrainSample::new(t.context.clone(), &t.fine, &plan, &spec, &normalizer)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut net = Denoiser::new(cfg.denoiser_config(&plan), seed)?;
    let report = train(&mut net, &samples, &plan, &spec, &cfg.train_config(seed))?;
    Ok((
        TrainedModel {
            net,
            normalizer,
            plan,
            spec,
        },
        report,
    ))
}

/// Per-tile sampling seed, distinct for every tile under one run seed.
pub fn tile_seed(seed: u64, tile: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(tile as u64)
}

#[derive(Debug, Clone)]
pub struct TileSample {
    pub tile: usize,
    pub output: SampleOutput,
}

pub fn sample_tiles(
    model: &TrainedModel,
    data: &Dataset,
    tile_ids: &[usize],
    seed: u64,
    trace: bool,
) -> Result<(Vec<TileSample>, f64), CliError> {
    let options = SampleOptions {
        trace,
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut out = Vec::with_capacity(tile_ids.len());
    for &i in tile_ids {
        let tile = &data.tiles[i];
        let mut predictor = model.predictor(&tile.context)?;
        let output = rrdp_sample(
            &mut predictor,
            &model.plan,
            &model.spec,
            tile.fine.shape(),
            &model.normalizer,
            tile_seed(seed, i),
            &options,
        )?;
        out.push(TileSample { tile: i, output });
    }
    let per_run = t0.elapsed().as_secs_f64() / tile_ids.len().max(1) as f64;
    Ok((out, per_run))
}

/// Refine every tile from its own true grid at plan stage `stage` (1-based).
pub fn refine_tiles(
    model: &TrainedModel,
    data: &Dataset,
    tile_ids: &[usize],
    stage: usize,
    seed: u64,
) -> Result<Vec<TileSample>, CliError> {
    tile_ids
        .iter()
        .map(|&i| {
            let tile = &data.tiles[i];
            let coarse = stage_ladder(&model.plan, &tile.fine)?.swap_remove(stage - 1);
            let mut predictor = model.predictor(&tile.context)?;
            let output = refine_zero_shot(
                &mut predictor,
                &coarse,
                &model.plan,
                &model.spec,
                tile.fine.shape(),
                &model.normalizer,
                tile_seed(seed, i),
                &SampleOptions::default(),
            )?;
            Ok(TileSample { tile: i, output })
        })
        .collect()
}

/// Score the stage outputs of each sample against the true ladder of its tile.
/// Samples that ran only the last stages are scored on those stages.
pub fn score(
    plan: &RgpPlan,
    data: &Dataset,
    samples: &[TileSample],
    metrics: &[String],
) -> Result<Vec<crate::report::LevelMetrics>, CliError> {
    let mut accs: Vec<LevelAccumulator> = plan
        .stages
        .iter()
        .map(|l| LevelAccumulator::new(l.clone(), data.peak))
        .collect();
    let mut used = vec![false; accs.len()];
    for s in samples {
        let truth = stage_ladder(plan, &data.tiles[s.tile].fine)?;
        let offset = truth.len() - s.output.levels.len();
        for (j, pred) in s.output.levels.iter().enumerate() {
            accs[offset + j].add(pred, &truth[offset + j])?;
            used[offset + j] = true;
        }
    }
    Ok(accs
        .iter()
        .zip(used)
        .filter(|(_, u)| *u)
        .map(|(a, _)| a.finish(metrics))
        .collect())
}

pub fn run_metrics(
    seed: u64,
    levels: Vec<crate::report::LevelMetrics>,
    samples: &[TileSample],
    train: Option<&TrainReport>,
    sample_s: Option<f64>,
) -> RunMetrics {
    RunMetrics {
        seed,
        levels,
        forward_passes: samples.first().map_or(0, |s| s.output.forward_passes),
        train_s_per_epoch: train.map(|r| r.seconds_per_epoch),
        sample_s_per_run: sample_s,
    }
}

/// Generated or true ladders for a set of tiles, as one bundle.
pub fn ladder_bundle(kind: &str, grids: &[(usize, Vec<SpatioTemporalGrid>)], data: &Dataset) -> TensorBundle {
    let levels: Vec<_> = grids.first().map(|(_, g)| g.iter().map(|x| x.level.clone()).collect()).unwrap_or_default();
    let origins: Vec<_> = grids.iter().map(|(i, _)| data.tiles[*i].origin).collect();
    let ids: Vec<usize> = grids.iter().map(|(i, _)| *i).collect();
    let mut b = TensorBundle::with_meta(serde_json::json!({
        "kind": kind,
        "levels": levels,
        "tiles": ids,
        "origins": origins,
        "peak": data.peak,
    }));
    for (i, ladder) in grids {
        for g in ladder {
            b.insert_f64(format!("tile-{i}/{}", g.level.label), &g.data);
        }
    }
    b
}

/// Inverse of [`ladder_bundle`].
pub fn read_ladders(b: &TensorBundle) -> Result<Vec<(usize, Vec<SpatioTemporalGrid>)>, CliError> {
    let levels: Vec<drdm_core::ResolutionLevel> = serde_json::from_value(b.meta["levels"].clone())?;
    let ids: Vec<usize> = serde_json::from_value(b.meta["tiles"].clone())?;
    ids.into_iter()
        .map(|i| {
            let grids = levels
                .iter()
                .map(|l| {
                    let data = b
                        .get_f64(&format!("tile-{i}/{}", l.label))?
                        .into_dimensionality::<ndarray::Ix3>()
                        .map_err(|_| CliError::Usage(format!("tile-{i}/{} is not 3-D", l.label)))?;
                    Ok(SpatioTemporalGrid::new(l.clone(), data))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok((i, grids))
        })
        .collect()
}
