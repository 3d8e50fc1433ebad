//! TOML experiment configuration.
//!
//! Every section has defaults, so an empty file is a valid config. Loading
//! checks every key before anything runs and reports all problems together.

use std::path::{Path, PathBuf};

use drdm_core::nn::{DenoiserConfig, OutputMode, PriorSign, SgdConfig};
use drdm_core::schedule::{plan_rgp, Adding, Denoising, Intensity, RgpPlan, ScheduleSpec, SigmaForm, Strategy};
use drdm_core::{CityConfig, PriorSource, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of a saved city bundle; empty means synthesize from `[city]`.
    pub bundle: String,
    /// Number of synthetic cities, seeded `seed, seed + 1, …`.
    pub cities: usize,
    pub tile: usize,
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            bundle: String::new(),
            cities: 1,
            tile: 8,
            validation_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub spatial: Vec<usize>,
    pub temporal: Vec<usize>,
    pub n_steps: usize,
    pub strategy: String,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            spatial: vec![4, 2, 1],
            temporal: vec![2, 1],
            n_steps: 300,
            strategy: "fine_greedy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub intensity: String,
    pub adding: String,
    pub denoising: String,
    pub sigma_form: String,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            intensity: "sn".into(),
            adding: "sa".into(),
            denoising: "sd".into(),
            sigma_form: "ddpm_posterior".into(),
            alpha_min: 1e-4,
            alpha_max: 1.0 - 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    /// Fusion latent width; 0 turns the prior pathway off.
    pub fusion_dim: usize,
    pub prior_sign: String,
    pub output: String,
    pub use_tpe: bool,
    pub use_spe: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 16,
            fusion_dim: 32,
            prior_sign: "eq11".into(),
            output: "data".into(),
            use_tpe: true,
            use_spe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// `true` (teacher forcing) or `generated`.
    pub prior_source: String,
    /// Cap on the per-step signal-to-noise loss weight; 0 weights steps equally.
    pub snr_cap: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            lr: 1e-2,
            momentum: 0.9,
            clip_norm: 1.0,
            prior_source: "true".into(),
            snr_cap: drdm_core::engine::DEFAULT_SNR_CAP,
        }
    }
}

pub const KNOWN_METRICS: [&str; 4] = ["mae", "rmse", "sp_rmse", "psnr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    /// Cap on evaluated validation tiles; 0 evaluates all of them.
    pub held_out_tiles: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: KNOWN_METRICS.iter().map(|s| s.to_string()).collect(),
            held_out_tiles: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub preset: String,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            preset: String::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub city: CityConfig,
    pub data: DataSection,
    pub plan: PlanSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub run: RunSection,
}

const SECTIONS: [&str; 9] = ["city", "data", "plan", "schedule", "model", "train", "eval", "ablate", "run"];

fn section<T>(name: &str, doc: &toml::Table, problems: &mut Vec<String>) -> T
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut base = toml::Table::try_from(T::default()).expect("defaults serialize");
    match doc.get(name) {
        None => {}
        Some(toml::Value::Table(user)) => {
            for (k, v) in user {
                if !base.contains_key(k) {
                    problems.push(format!("unknown key `{name}.{k}`"));
                    continue;
                }
                let mut probe = base.clone();
                probe.insert(k.clone(), v.clone());
                match probe.clone().try_into::<T>() {
                    Ok(_) => base = probe,
                    Err(e) => problems.push(format!("`{name}.{k}`: {}", e.message().trim())),
                }
            }
        }
        Some(_) => problems.push(format!("`{name}` must be a table")),
    }
    base.try_into().unwrap_or_default()
}

fn city_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(items) => items.iter().map(city_value).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn city_section(doc: &toml::Table, problems: &mut Vec<String>) -> CityConfig {
    let mut cfg = CityConfig::default();
    match doc.get("city") {
        None => {}
        Some(toml::Value::Table(user)) => {
            for (k, v) in user {
                if let Err(e) = cfg.set(k, &city_value(v)) {
                    problems.push(format!("city: {e}"));
                }
            }
        }
        Some(_) => problems.push("`city` must be a table".into()),
    }
    cfg
}

fn parse_field<T: std::str::FromStr>(what: &str, text: &str, problems: &mut Vec<String>) -> Option<T> {
    match text.parse() {
        Ok(v) => Some(v),
        Err(_) => {
            problems.push(format!("`{what}`: unrecognised value `{text}`"));
            None
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(vec![e.to_string()]))?;
        let mut problems = Vec::new();
        for key in doc.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                problems.push(format!("unknown section `{key}`"));
            }
        }
        let cfg = Self {
            city: city_section(&doc, &mut problems),
            data: section("data", &doc, &mut problems),
            plan: section("plan", &doc, &mut problems),
            schedule: section("schedule", &doc, &mut problems),
            model: section("model", &doc, &mut problems),
            train: section("train", &doc, &mut problems),
            eval: section("eval", &doc, &mut problems),
            ablate: section("ablate", &doc, &mut problems),
            run: section("run", &doc, &mut problems),
        };
        cfg.check(&mut problems);
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        self.check(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    fn check(&self, problems: &mut Vec<String>) {
        if let Err(e) = self.city.validate() {
            problems.push(format!("city: {e}"));
        }
        let d = &self.data;
        if d.cities == 0 {
            problems.push("`data.cities` must be >= 1".into());
        }
        if d.tile == 0 || self.city.h_fine % d.tile != 0 || self.city.w_fine % d.tile != 0 {
            problems.push(format!(
                "`data.tile` {} must divide the {}x{} city",
                d.tile, self.city.h_fine, self.city.w_fine
            ));
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            problems.push("`data.validation_fraction` must be in [0, 1)".into());
        }
        match self.build_plan() {
            Ok(plan) => {
                for l in &plan.stages {
                    if d.tile > 0 && d.tile % l.spatial != 0 {
                        problems.push(format!("`data.tile` {} is not divisible by spatial factor {}", d.tile, l.spatial));
                    }
                    if self.city.t_fine % l.temporal != 0 {
                        problems.push(format!("city t_fine {} is not divisible by temporal factor {}", self.city.t_fine, l.temporal));
                    }
                }
            }
            Err(e) => problems.push(e),
        }
        for (what, text) in [
            ("schedule.intensity", &self.schedule.intensity),
            ("schedule.adding", &self.schedule.adding),
            ("schedule.denoising", &self.schedule.denoising),
            ("schedule.sigma_form", &self.schedule.sigma_form),
        ] {
            let ok = match what {
                "schedule.intensity" => text.parse::<Intensity>().is_ok(),
                "schedule.adding" => text.parse::<Adding>().is_ok(),
                "schedule.denoising" => text.parse::<Denoising>().is_ok(),
                _ => text.parse::<SigmaForm>().is_ok(),
            };
            if !ok {
                problems.push(format!("`{what}`: unrecognised value `{text}`"));
            }
        }
        let s = &self.schedule;
        if !(s.alpha_min > 0.0 && s.alpha_min < s.alpha_max && s.alpha_max < 1.0) {
            problems.push("schedule clamp must satisfy 0 < alpha_min < alpha_max < 1".into());
        }
        if self.model.width == 0 {
            problems.push("`model.width` must be >= 1".into());
        }
        if parse_sign(&self.model.prior_sign).is_none() {
            problems.push(format!("`model.prior_sign`: unrecognised value `{}`", self.model.prior_sign));
        }
        if parse_output(&self.model.output).is_none() {
            problems.push(format!("`model.output`: unrecognised value `{}`", self.model.output));
        }
        let t = &self.train;
        if t.batch == 0 {
            problems.push("`train.batch` must be >= 1".into());
        }
        if !(t.lr > 0.0) {
            problems.push("`train.lr` must be positive".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            problems.push("`train.momentum` must be in [0, 1)".into());
        }
        if t.clip_norm < 0.0 {
            problems.push("`train.clip_norm` must be >= 0".into());
        }
        if !(t.snr_cap >= 0.0) {
            problems.push("`train.snr_cap` must be >= 0".into());
        }
        if parse_source(&t.prior_source).is_none() {
            problems.push(format!("`train.prior_source`: unrecognised value `{}`", t.prior_source));
        }
        for m in &self.eval.metrics {
            if !KNOWN_METRICS.contains(&m.as_str()) {
                problems.push(format!("`eval.metrics`: unknown metric `{m}`"));
            }
        }
        if !self.ablate.preset.is_empty() && crate::ablate::preset(&self.ablate.preset).is_none() {
            problems.push(format!("`ablate.preset`: unknown preset `{}`", self.ablate.preset));
        }
        if self.run.out.is_empty() {
            problems.push("`run.out` must not be empty".into());
        }
    }

    pub fn build_plan(&self) -> Result<RgpPlan, String> {
        let mut problems = Vec::new();
        let strategy: Option<Strategy> = parse_field("plan.strategy", &self.plan.strategy, &mut problems);
        let strategy = strategy.ok_or_else(|| problems.join("; "))?;
        plan_rgp(&self.plan.spatial, &self.plan.temporal, self.plan.n_steps, strategy).map_err(|e| format!("plan: {e}"))
    }

    pub fn spec(&self) -> ScheduleSpec {
        let s = &self.schedule;
        let mut spec = ScheduleSpec::new(
            s.intensity.parse().unwrap_or(Intensity::SN),
            s.adding.parse().unwrap_or(Adding::SA),
            s.denoising.parse().unwrap_or(Denoising::SD),
        );
        spec.sigma_form = s.sigma_form.parse().unwrap_or(SigmaForm::DdpmPosterior);
        spec.alpha_clamp = (s.alpha_min, s.alpha_max);
        spec
    }

    pub fn denoiser_config(&self, plan: &RgpPlan) -> DenoiserConfig {
        let mut factors: Vec<usize> = plan.stages.iter().map(|l| l.spatial).collect();
        factors.dedup();
        DenoiserConfig {
            width: self.model.width,
            fusion_dim: (self.model.fusion_dim > 0).then_some(self.model.fusion_dim),
            surface_classes: self.city.surface_classes,
            aoi_classes: self.city.aoi_classes,
            poi_dim: self.city.poi_dim,
            tile: (self.data.tile, self.data.tile),
            spatial_factors: factors,
            use_tpe: self.model.use_tpe,
            use_spe: self.model.use_spe,
            output: parse_output(&self.model.output).unwrap_or(OutputMode::Data),
            prior_sign: parse_sign(&self.model.prior_sign).unwrap_or(PriorSign::Eq11),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            optimizer: SgdConfig {
                lr: t.lr,
                momentum: t.momentum,
                clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            },
            prior_source: parse_source(&t.prior_source).unwrap_or_default(),
            snr_cap: (t.snr_cap > 0.0).then_some(t.snr_cap),
            seed,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out)
    }

    /// Fully resolved config, including every default, as TOML.
    pub fn to_toml(&self) -> String {
        let mut doc = toml::Table::new();
        doc.insert("city".into(), toml::Value::Table(city_table(&self.city)));
        let mut put = |name: &str, v: toml::Table| {
            doc.insert(name.into(), toml::Value::Table(v));
        };
        put("data", toml::Table::try_from(&self.data).expect("serializable"));
        put("plan", toml::Table::try_from(&self.plan).expect("serializable"));
        put("schedule", toml::Table::try_from(&self.schedule).expect("serializable"));
        put("model", toml::Table::try_from(&self.model).expect("serializable"));
        put("train", toml::Table::try_from(&self.train).expect("serializable"));
        put("eval", toml::Table::try_from(&self.eval).expect("serializable"));
        put("ablate", toml::Table::try_from(&self.ablate).expect("serializable"));
        put("run", toml::Table::try_from(&self.run).expect("serializable"));
        toml::to_string(&doc).expect("toml output")
    }
}

fn city_table(c: &CityConfig) -> toml::Table {
    let mut t = toml::Table::new();
    for line in c.to_text().lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let (k, v) = (k.trim(), v.trim());
        let value = match k {
            "ladder" => toml::Value::String(v.to_string()),
            "weights" | "amplitudes" => toml::Value::Array(
                v.split(',')
                    .filter_map(|x| x.trim().parse::<f64>().ok())
                    .map(toml::Value::Float)
                    .collect(),
            ),
            _ => match v.parse::<i64>() {
                Ok(i) => toml::Value::Integer(i),
                Err(_) => v.parse::<f64>().map(toml::Value::Float).unwrap_or_else(|_| toml::Value::String(v.into())),
            },
        };
        t.insert(k.to_string(), value);
    }
    t
}

pub fn parse_sign(s: &str) -> Option<PriorSign> {
    match s.to_ascii_lowercase().as_str() {
        "eq11" | "plus" | "+" => Some(PriorSign::Eq11),
        "eq9" | "minus" | "-" => Some(PriorSign::Eq9),
        _ => None,
    }
}

pub fn parse_output(s: &str) -> Option<OutputMode> {
    match s.to_ascii_lowercase().as_str() {
        "data" => Some(OutputMode::Data),
        "noise" => Some(OutputMode::Noise),
        _ => None,
    }
}

pub fn parse_source(s: &str) -> Option<PriorSource> {
    match s.to_ascii_lowercase().as_str() {
        "true" => Some(PriorSource::True),
        "generated" => Some(PriorSource::Generated),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn every_bad_key_is_reported() {
        let text = "[plan]\nbogus = 1\nn_steps = \"many\"\n[model]\nprior_sign = \"sideways\"\n[extra]\nx = 1\n[city]\nh_fine = \"big\"\n";
        let CliError::Config(problems) = ExperimentConfig::from_toml(text).unwrap_err() else {
            panic!("expected a config error");
        };
        let joined = problems.join("\n");
        for needle in ["plan.bogus", "plan.n_steps", "model.prior_sign", "extra", "h_fine"] {
            assert!(joined.contains(needle), "{needle} missing from {joined}");
        }
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.plan.strategy = "uniform".into();
        cfg.city.noise = 0.125;
        cfg.model.fusion_dim = 0;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_fusion_dim_turns_prior_off() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.fusion_dim = 0;
        let plan = cfg.build_plan().unwrap();
        assert!(!cfg.denoiser_config(&plan).prior_enabled());
    }
}
