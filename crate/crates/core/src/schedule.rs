//! Diffusion-step bookkeeping: partitioning steps into resolution stages,
//! noise-intensity and noise-adding schedules, and the reverse-step variance.
//!
//! Stage `k` (1-based, coarsest first) owns the half-open step interval
//! `[N_k, N_{k-1})` with `N_0 = N` and `N_K = 0`. Within a stage, `β` is the
//! scheduled noise quantity and `α = 1 − β` is the cumulative signal factor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{
    coarsen_array, Aggregation, MultiScaleTraffic, ResolutionLevel, SpatioTemporalGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    CoarseGreedy,
    FineGreedy,
    /// One stage at the finest level, used by the canonical chain.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intensity {
    /// Continuous: β = n / N over the whole chain.
    CN,
    /// Segmented: β rises from 0 to 1 inside every stage.
    SN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adding {
    /// Every stage noises the finest data, aggregated to the stage resolution.
    CA,
    /// Every stage noises its own ladder level.
    SA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Denoising {
    /// The previous stage's terminal state is carried into the next stage.
    CD,
    /// Each stage restarts from fresh Gaussian noise.
    SD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaForm {
    /// `sqrt(1 − α̂(m−1)) (1 − α(m−1)) / (1 − α(m))`, config value `paper`
    #[serde(rename = "paper")]
    Printed,
    /// `sqrt((1 − α̂(m)) (1 − α(m−1)) / (1 − α(m)))`
    DdpmPosterior,
}

macro_rules! parse_enum {
    ($ty:ty, $($text:literal => $val:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($val),)+
                    other => Err(invalid(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

parse_enum!(Strategy, "uniform" => Strategy::Uniform, "coarse_greedy" => Strategy::CoarseGreedy,
    "fine_greedy" => Strategy::FineGreedy, "single" => Strategy::Single);
parse_enum!(Intensity, "cn" => Intensity::CN, "sn" => Intensity::SN);
parse_enum!(Adding, "ca" => Adding::CA, "sa" => Adding::SA);
parse_enum!(Denoising, "cd" => Denoising::CD, "sd" => Denoising::SD);
parse_enum!(SigmaForm, "paper" => SigmaForm::Printed, "ddpm_posterior" => SigmaForm::DdpmPosterior);

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::CoarseGreedy => "coarse_greedy",
            Strategy::FineGreedy => "fine_greedy",
            Strategy::Single => "single",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub intensity: Intensity,
    pub adding: Adding,
    pub denoising: Denoising,
    pub alpha_clamp: (f64, f64),
    pub sigma_form: SigmaForm,
}

pub const DEFAULT_ALPHA_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

impl ScheduleSpec {
    pub fn new(intensity: Intensity, adding: Adding, denoising: Denoising) -> Self {
        Self {
            intensity,
            adding,
            denoising,
            alpha_clamp: DEFAULT_ALPHA_CLAMP,
            sigma_form: SigmaForm::DdpmPosterior,
        }
    }

    /// The combination the multi-stage model is designed around.
    pub fn segmented() -> Self {
        Self::new(Intensity::SN, Adding::SA, Denoising::SD)
    }

    /// The combination of an ordinary single-chain diffusion model.
    pub fn canonical() -> Self {
        Self::new(Intensity::CN, Adding::CA, Denoising::CD)
    }

    pub fn all_combinations() -> Vec<Self> {
        let mut out = Vec::with_capacity(8);
        for i in [Intensity::CN, Intensity::SN] {
            for a in [Adding::CA, Adding::SA] {
                for d in [Denoising::CD, Denoising::SD] {
                    out.push(Self::new(i, a, d));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_clamp;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(invalid(format!(
                "alpha clamp must satisfy 0 < min < max < 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{:?},{:?},{:?}", self.intensity, self.adding, self.denoising)
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::segmented()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgpPlan {
    pub n_steps: usize,
    /// `[N_1, …, N_K]`, strictly decreasing, last entry 0.
    pub boundaries: Vec<usize>,
    /// Resolution of each stage, coarsest first.
    pub stages: Vec<ResolutionLevel>,
    pub strategy: Strategy,
}

impl RgpPlan {
    /// A single finest-level stage spanning all `n_steps`.
    pub fn single(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("a chain needs at least one step"));
        }
        Ok(Self {
            n_steps,
            boundaries: vec![0],
            stages: vec![ResolutionLevel::finest().with_index(1)],
            strategy: Strategy::Single,
        })
    }

    pub fn k(&self) -> usize {
        self.stages.len()
    }

    /// Step interval `[lo, hi)` of stage `k` (1-based).
    pub fn interval(&self, k: usize) -> (usize, usize) {
        let hi = if k == 1 {
            self.n_steps
        } else {
            self.boundaries[k - 2]
        };
        (self.boundaries[k - 1], hi)
    }

    pub fn stage_level(&self, k: usize) -> &ResolutionLevel {
        &self.stages[k - 1]
    }

    /// The `K − 1` boundaries at which intermediate levels are extracted.
    pub fn intermediate_boundaries(&self) -> &[usize] {
        &self.boundaries[..self.boundaries.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries.len() != self.stages.len() || self.stages.is_empty() {
            return Err(invalid("plan needs one boundary per stage"));
        }
        if *self.boundaries.last().expect("non-empty") != 0 {
            return Err(invalid("last boundary must be 0"));
        }
        let mut prev = self.n_steps;
        for &b in &self.boundaries {
            if b >= prev {
                return Err(invalid(format!(
                    "boundaries must be strictly decreasing below N = {}: {:?}",
                    self.n_steps, self.boundaries
                )));
            }
            prev = b;
        }
        Ok(())
    }
}

fn even_boundaries(n: usize, parts: usize) -> Vec<usize> {
    (1..parts)
        .map(|j| ((n * (parts - j)) as f64 / parts as f64).round() as usize)
        .collect()
}

/// Partition `n` steps into resolution stages.
///
/// `spatial` and `temporal` list the factors coarsest first; each should end at 1.
pub fn plan_rgp(spatial: &[usize], temporal: &[usize], n: usize, strategy: Strategy) -> Result<RgpPlan> {
    if spatial.is_empty() || temporal.is_empty() {
        return Err(invalid("both level lists must be non-empty"));
    }
    if spatial.iter().chain(temporal).any(|&f| f == 0) {
        return Err(invalid("level factors must be >= 1"));
    }
    if spatial.windows(2).any(|w| w[0] <= w[1]) || temporal.windows(2).any(|w| w[0] <= w[1]) {
        return Err(invalid("level lists must be strictly decreasing (coarsest first)"));
    }
    let (ns, nt) = (spatial.len(), temporal.len());
    let (boundaries, picks): (Vec<usize>, Vec<(usize, usize)>) = match strategy {
        Strategy::FineGreedy | Strategy::CoarseGreedy => {
            let k = ns.max(nt);
            let mut b = even_boundaries(n, k);
            b.push(0);
            let picks = (1..=k)
                .map(|i| {
                    if strategy == Strategy::FineGreedy {
                        (i.min(ns), i.min(nt))
                    } else {
                        ((i + ns).saturating_sub(k).max(1), (i + nt).saturating_sub(k).max(1))
                    }
                })
                .collect();
            (b, picks)
        }
        Strategy::Uniform => {
            let sb = even_boundaries(n, ns);
            let tb = even_boundaries(n, nt);
            let mut b: Vec<usize> = sb.iter().chain(&tb).copied().collect();
            b.sort_unstable_by(|a, c| c.cmp(a));
            b.dedup();
            b.push(0);
            let mut hi = n;
            let mut picks = Vec::with_capacity(b.len());
            for &lo in &b {
                let si = 1 + sb.iter().filter(|&&x| x >= hi).count();
                let ti = 1 + tb.iter().filter(|&&x| x >= hi).count();
                picks.push((si, ti));
                hi = lo;
            }
            (b, picks)
        }
        Strategy::Single => return Err(invalid("use RgpPlan::single for a one-stage chain")),
    };
    if boundaries.len() < 2 {
        return Err(invalid(format!(
            "a multi-resolution plan needs K >= 2 stages, got {}",
            boundaries.len()
        )));
    }
    let stages = picks
        .iter()
        .enumerate()
        .map(|(i, &(si, ti))| ResolutionLevel::new(spatial[si - 1], temporal[ti - 1]).with_index(i + 1))
        .collect();
    let plan = RgpPlan {
        n_steps: n,
        boundaries,
        stages,
        strategy,
    };
    if plan.validate().is_err() || (1..=plan.k()).any(|k| {
        let (lo, hi) = plan.interval(k);
        hi - lo < 2
    }) {
        return Err(invalid(format!(
            "N = {n} is too small to give each of {} stages at least 2 steps",
            plan.k()
        )));
    }
    Ok(plan)
}

/// Stage owning step `n ∈ [0, N)`.
pub fn stage_of(plan: &RgpPlan, n: usize) -> Result<usize> {
    if n >= plan.n_steps {
        return Err(Error::StepOutOfRange {
            step: n,
            limit: plan.n_steps.saturating_sub(1),
        });
    }
    Ok(plan
        .boundaries
        .iter()
        .position(|&b| n >= b)
        .expect("last boundary is 0")
        + 1)
}

/// β at level `m ∈ [lo, hi]` inside stage `k`.
pub fn stage_beta(plan: &RgpPlan, spec: &ScheduleSpec, k: usize, m: usize) -> f64 {
    let (lo, hi) = plan.interval(k);
    let n = plan.n_steps as f64;
    match (spec.intensity, spec.adding) {
        (Intensity::SN, _) => (m - lo) as f64 / (hi - lo) as f64,
        (Intensity::CN, Adding::CA) => m as f64 / n,
        (Intensity::CN, Adding::SA) => (m - lo) as f64 / n,
    }
}

/// α = 1 − β with the interior clamp; exact 0 and 1 pass through unclamped.
pub fn alpha_from_beta(spec: &ScheduleSpec, beta: f64) -> f64 {
    if beta <= 0.0 {
        1.0
    } else if beta >= 1.0 {
        0.0
    } else {
        (1.0 - beta).clamp(spec.alpha_clamp.0, spec.alpha_clamp.1)
    }
}

pub fn stage_alpha(plan: &RgpPlan, spec: &ScheduleSpec, k: usize, m: usize) -> f64 {
    alpha_from_beta(spec, stage_beta(plan, spec, k, m))
}

/// α clamped into the open interval, for formulas that divide by `1 − α` or `α`.
pub fn interior(spec: &ScheduleSpec, alpha: f64) -> f64 {
    alpha.clamp(spec.alpha_clamp.0, spec.alpha_clamp.1)
}

/// Global β at step `n ∈ [0, N]`; step `N` belongs to stage 1.
pub fn noise_level(plan: &RgpPlan, spec: &ScheduleSpec, n: usize) -> Result<f64> {
    if n > plan.n_steps {
        return Err(Error::StepOutOfRange {
            step: n,
            limit: plan.n_steps,
        });
    }
    let k = if n == plan.n_steps { 1 } else { stage_of(plan, n)? };
    Ok(stage_beta(plan, spec, k, n))
}

pub fn alpha(plan: &RgpPlan, spec: &ScheduleSpec, n: usize) -> Result<f64> {
    Ok(alpha_from_beta(spec, noise_level(plan, spec, n)?))
}

/// Noise scale injected by the reverse step that leaves level `m ∈ [1, N]`
/// and lands on level `m − 1`. Zero on the last step of every stage.
pub fn sigma(plan: &RgpPlan, spec: &ScheduleSpec, m: usize) -> Result<f64> {
    if m == 0 || m > plan.n_steps {
        return Err(Error::StepOutOfRange {
            step: m,
            limit: plan.n_steps,
        });
    }
    let k = stage_of(plan, m - 1)?;
    let (lo, _) = plan.interval(k);
    if m - 1 == lo {
        return Ok(0.0);
    }
    let a = |j: usize| interior(spec, stage_alpha(plan, spec, k, j));
    let (a_m, a_prev) = (a(m), a(m - 1));
    Ok(match spec.sigma_form {
        SigmaForm::Printed => {
            let hat_prev = (a_prev / a(m - 2)).min(1.0);
            (1.0 - hat_prev).sqrt() * (1.0 - a_prev) / (1.0 - a_m)
        }
        SigmaForm::DdpmPosterior => {
            let hat = (a_m / a_prev).min(1.0);
            ((1.0 - hat) * (1.0 - a_prev) / (1.0 - a_m)).max(0.0).sqrt()
        }
    })
}

/// Clean grid that stage `k`'s forward process interpolates away from.
///
/// SA returns the ladder's own level at the stage resolution (sum units).
/// CA aggregates the finest grid to the stage resolution and divides by the
/// block cardinality, i.e. the per-cell mean of the finest data.
pub fn noising_start(
    plan: &RgpPlan,
    spec: &ScheduleSpec,
    k: usize,
    ladder: &MultiScaleTraffic,
) -> Result<SpatioTemporalGrid> {
    if k == 0 || k > plan.k() {
        return Err(invalid(format!("stage {k} not in plan with K = {}", plan.k())));
    }
    let level = plan.stage_level(k);
    match spec.adding {
        Adding::SA => {
            let g = ladder
                .at(level)
                .ok_or_else(|| Error::MissingLevel(level.label.clone()))?;
            Ok(g.clone())
        }
        Adding::CA => {
            let fine = ladder.finest();
            let data = coarsen_array(&fine.data, level.temporal, level.spatial, Aggregation::Mean)?;
            Ok(SpatioTemporalGrid {
                level: level.clone(),
                data,
                t0: fine.t0,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub n: usize,
    pub stage: usize,
    pub beta: f64,
    pub alpha: f64,
    /// Noise injected by the reverse step arriving at `n`; 0 at `n = N`.
    pub sigma: f64,
}

/// One row per step `n ∈ [0, N]`.
pub fn schedule_table(plan: &RgpPlan, spec: &ScheduleSpec) -> Result<Vec<ScheduleRow>> {
    (0..=plan.n_steps)
        .map(|n| {
            let stage = if n == plan.n_steps { 1 } else { stage_of(plan, n)? };
            let sigma = if n < plan.n_steps { sigma(plan, spec, n + 1)? } else { 0.0 };
            Ok(ScheduleRow {
                n,
                stage,
                beta: noise_level(plan, spec, n)?,
                alpha: alpha(plan, spec, n)?,
                sigma,
            })
        })
        .collect()
}

pub fn schedule_csv(rows: &[ScheduleRow]) -> String {
    let mut s = String::from("n,stage,beta,alpha,sigma\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.n, r.stage, r.beta, r.alpha, r.sigma));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s3t4() -> RgpPlan {
        plan_rgp(&[16, 2, 1], &[24, 4, 2, 1], 600, Strategy::FineGreedy).unwrap()
    }

    #[test]
    fn fine_greedy_s3t4() {
        let p = s3t4();
        assert_eq!(p.boundaries, vec![450, 300, 150, 0]);
        let got: Vec<(usize, usize)> = p.stages.iter().map(|l| (l.temporal, l.spatial)).collect();
        assert_eq!(got, vec![(24, 16), (4, 2), (2, 1), (1, 1)]);
    }

    #[test]
    fn coarse_greedy_pins_short_dimension_late() {
        let p = plan_rgp(&[16, 2, 1], &[24, 4, 2, 1], 600, Strategy::CoarseGreedy).unwrap();
        assert_eq!(p.boundaries, vec![450, 300, 150, 0]);
        let spatial: Vec<usize> = p.stages.iter().map(|l| l.spatial).collect();
        assert_eq!(spatial, vec![16, 16, 2, 1]);
    }

    #[test]
    fn uniform_plans() {
        let p = plan_rgp(&[2, 1], &[2, 1], 100, Strategy::Uniform).unwrap();
        assert_eq!(p.boundaries, vec![50, 0]);
        assert_eq!(p.interval(1), (50, 100));
        assert_eq!(p.interval(2), (0, 50));
        let p = plan_rgp(&[4, 2, 1], &[2, 1], 400, Strategy::Uniform).unwrap();
        assert_eq!(p.boundaries, vec![267, 200, 133, 0]);
        let got: Vec<(usize, usize)> = p.stages.iter().map(|l| (l.spatial, l.temporal)).collect();
        assert_eq!(got, vec![(4, 2), (2, 2), (2, 1), (1, 1)]);
    }

    #[test]
    fn single_level_rejected() {
        assert!(plan_rgp(&[1], &[1], 100, Strategy::FineGreedy).is_err());
        assert!(plan_rgp(&[1], &[1], 100, Strategy::Uniform).is_err());
        assert!(plan_rgp(&[4, 2, 1], &[1], 5, Strategy::FineGreedy).is_err());
    }

    #[test]
    fn stage_lookup() {
        let p = s3t4();
        assert_eq!(stage_of(&p, 0).unwrap(), 4);
        assert_eq!(stage_of(&p, 449).unwrap(), 2);
        assert_eq!(stage_of(&p, 450).unwrap(), 1);
        assert_eq!(stage_of(&p, 599).unwrap(), 1);
        assert!(stage_of(&p, 600).is_err());
    }

    #[test]
    fn cn_values() {
        let p = s3t4();
        let cn = ScheduleSpec::canonical();
        assert_eq!(alpha(&p, &cn, 0).unwrap(), 1.0);
        assert_eq!(noise_level(&p, &cn, 300).unwrap(), 0.5);
        assert_eq!(alpha(&p, &cn, 300).unwrap(), 0.5);
        assert_eq!(alpha(&p, &cn, 600).unwrap(), 0.0);
        assert_eq!(alpha(&p, &cn, 599).unwrap(), 1.0 - 599.0 / 600.0);
    }

    #[test]
    fn sn_boundaries_are_clean() {
        let p = s3t4();
        let sn = ScheduleSpec::segmented();
        for b in [450, 300, 150, 0] {
            assert_eq!(noise_level(&p, &sn, b).unwrap(), 0.0);
        }
        assert_eq!(noise_level(&p, &sn, 600).unwrap(), 1.0);
        assert_eq!(stage_beta(&p, &sn, 2, 450), 1.0);
    }

    #[test]
    fn sigma_terminal_is_zero() {
        let p = s3t4();
        for spec in ScheduleSpec::all_combinations() {
            for b in [450, 300, 150, 0] {
                assert_eq!(sigma(&p, &spec, b + 1).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn sigma_matches_direct_formula() {
        let mut spec = ScheduleSpec::canonical();
        spec.sigma_form = SigmaForm::Printed;
        let p2 = RgpPlan::single(2).unwrap();
        assert_eq!(sigma(&p2, &spec, 1).unwrap(), 0.0);
        let p4 = RgpPlan::single(4).unwrap();
        let (a0, a1, a2) = (1.0 - 1e-4, 0.75, 0.5);
        let direct = (1.0f64 - a1 / a0).sqrt() * (1.0 - a1) / (1.0 - a2);
        assert!((sigma(&p4, &spec, 2).unwrap() - direct).abs() < 1e-15);
        spec.sigma_form = SigmaForm::DdpmPosterior;
        let direct = ((1.0f64 - a2 / a1) * (1.0 - a1) / (1.0 - a2)).sqrt();
        assert!((sigma(&p4, &spec, 2).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn table_rows() {
        let p = plan_rgp(&[2, 1], &[2, 1], 10, Strategy::FineGreedy).unwrap();
        let rows = schedule_table(&p, &ScheduleSpec::segmented()).unwrap();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[5].beta, 0.0);
        assert_eq!(rows[10].beta, 1.0);
        let csv = schedule_csv(&rows);
        assert!(csv.starts_with("n,stage,beta,alpha,sigma\n"));
    }
}
