//! End-to-end acceptance checks, one numbered criterion each.
//!
//! Runs without the libtest harness so that every criterion prints exactly one
//! `PASS`/`FAIL` line whatever the others do. The training studies (6 to 9)
//! share models, so they run in one process in a fixed order.

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use drdm_cli::pipeline::{refine_tiles, sample_tiles, score, train_model, Dataset};
use drdm_cli::ExperimentConfig;
use drdm_core::engine::{hnap_forward, reverse_update, NoisePredictor, Query};
use drdm_core::grid::{coarsen_array, upsample_array};
use drdm_core::guidance::{fuse_noise, prior_noise, residual_decompose, FusionParams, PriorNoise};
use drdm_core::metrics::{mae, psnr, rmse, rv_coefficient};
use drdm_core::nn::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use drdm_core::schedule::{noise_level, plan_rgp, stage_beta, stage_of};
use drdm_core::synth::generate_city;
use drdm_core::{
    canonical_sample, rrdp_sample, Adding, Aggregation, CityConfig, Intensity, Normalizer, OraclePredictor, OutputMode,
    PriorSign, Replication, ResolutionLevel, RgpPlan, SampleOptions, ScheduleSpec, SpatioTemporalGrid, Strategy,
    TrainedModel,
};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || r.sample(StandardNormal))
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn random_plan(r: &mut ChaCha8Rng) -> RgpPlan {
    loop {
        let depth_s = r.gen_range(2..5);
        let depth_t = r.gen_range(2..5);
        let mut s: Vec<usize> = (0..depth_s).map(|i| 1 << i).rev().collect();
        let mut t: Vec<usize> = (0..depth_t).map(|i| 1 << i).rev().collect();
        s[0] *= r.gen_range(1..3);
        t[0] *= r.gen_range(1..3);
        let n = r.gen_range(40..800);
        let strategy = [Strategy::FineGreedy, Strategy::CoarseGreedy, Strategy::Uniform][r.gen_range(0..3)];
        if let Ok(p) = plan_rgp(&s, &t, n, strategy) {
            return p;
        }
    }
}

/// Stage intervals from the boundary list, recomputed independently.
fn intervals(plan: &RgpPlan) -> Vec<(usize, usize)> {
    let mut hi = plan.n_steps;
    plan.boundaries
        .iter()
        .map(|&lo| {
            let iv = (lo, hi);
            hi = lo;
            iv
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let mut problems = Vec::new();
    for trial in 0..10 {
        let plan = random_plan(&mut r);
        let ivs = intervals(&plan);
        // tiling: contiguous, non-empty, covering [0, N)
        let covered: usize = ivs.iter().map(|(lo, hi)| hi - lo).sum();
        if covered != plan.n_steps || ivs.last().map(|iv| iv.0) != Some(0) || ivs.iter().any(|(lo, hi)| lo >= hi) {
            problems.push(format!("plan {trial}: intervals {ivs:?} do not tile [0, {})", plan.n_steps));
        }
        for n in 0..plan.n_steps {
            let expect = ivs.iter().position(|&(lo, hi)| lo <= n && n < hi).unwrap() + 1;
            if stage_of(&plan, n).unwrap() != expect {
                problems.push(format!("plan {trial}: step {n} assigned to the wrong stage"));
                break;
            }
        }
        for intensity in [Intensity::CN, Intensity::SN] {
            let spec = ScheduleSpec::new(intensity, Adding::CA, drdm_core::Denoising::CD);
            let spec_sa = ScheduleSpec::new(intensity, Adding::SA, drdm_core::Denoising::SD);
            for (k, &(lo, hi)) in ivs.iter().enumerate() {
                let k = k + 1;
                let mut prev = f64::NEG_INFINITY;
                for m in lo..=hi {
                    let b = stage_beta(&plan, &spec, k, m);
                    let expect = match intensity {
                        Intensity::SN => (m - lo) as f64 / (hi - lo) as f64,
                        Intensity::CN => m as f64 / plan.n_steps as f64,
                    };
                    if b != expect {
                        problems.push(format!("plan {trial} {intensity:?}: beta({k}, {m}) = {b}, expected {expect}"));
                    }
                    if b < prev {
                        problems.push(format!("plan {trial} {intensity:?}: beta not monotone at {m}"));
                    }
                    prev = b;
                    let b_sa = stage_beta(&plan, &spec_sa, k, m);
                    if !(0.0..=1.0).contains(&b_sa) {
                        problems.push(format!("plan {trial} {intensity:?}/SA: beta {b_sa} out of range"));
                    }
                }
                if intensity == Intensity::SN {
                    if stage_beta(&plan, &spec, k, lo) != 0.0 || stage_beta(&plan, &spec, k, hi) != 1.0 {
                        problems.push(format!("plan {trial}: SN endpoints of stage {k} are not exactly 0 and 1"));
                    }
                    if noise_level(&plan, &spec, lo).unwrap() != 0.0 {
                        problems.push(format!("plan {trial}: SN boundary {lo} is not clean"));
                    }
                }
            }
            let end = noise_level(&plan, &spec, plan.n_steps).unwrap();
            let start = noise_level(&plan, &spec, 0).unwrap();
            if end != 1.0 || start != 0.0 {
                problems.push(format!("plan {trial} {intensity:?}: chain endpoints {start}, {end}"));
            }
        }
    }
    let n = problems.len();
    outcome(n == 0, if n == 0 { "10 random plans, CN and SN".into() } else { problems.swap_remove(0) })
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut worst_identity = 0.0f64;
    let mut worst_forms = 0.0f64;
    let mut ok = true;
    let mut detail = String::new();
    for _ in 0..50 {
        let shape = (2, 3, 4);
        let x0 = gaussian(&mut r, shape) * 3.0;
        let h = gaussian(&mut r, shape) * 3.0;
        let eps = gaussian(&mut r, shape);
        let alpha: f64 = r.gen_range(0.01..0.99);
        let d = residual_decompose(&x0, &h, alpha, &eps).unwrap();
        // ε = Δε − ε̂
        for (a, b) in d.reconstructed_eps().iter().zip(eps.iter()) {
            worst_identity = worst_identity.max((a - b).abs() / b.abs().max(1.0));
        }
        // both algebraic forms of the noisy state; the residual form
        // omits the prior component entirely
        let direct = &x0 * alpha.sqrt() + &eps * (1.0 - alpha).sqrt();
        let resid = (&x0 - &h) * alpha.sqrt() + (&eps + &(&h * (alpha / (1.0 - alpha)).sqrt())) * (1.0 - alpha).sqrt();
        for (a, b) in direct.iter().zip(resid.iter()) {
            worst_forms = worst_forms.max((a - b).abs() / a.abs().max(1.0));
        }
        for (a, b) in d.state_residual(alpha).iter().zip(direct.iter()) {
            worst_forms = worst_forms.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    if worst_identity > 1e-9 || worst_forms > 1e-9 {
        ok = false;
        let _ = write!(detail, "decomposition error {worst_identity:e} / {worst_forms:e}; ");
    }

    // prior noise is homogeneous of degree one in the coarse field
    let coarse_level = ResolutionLevel::new(2, 2);
    let fine_level = ResolutionLevel::finest();
    for _ in 0..20 {
        let c = gaussian(&mut r, (2, 2, 2));
        let s: f64 = r.gen_range(-4.0..4.0);
        let alpha: f64 = r.gen_range(0.05..0.95);
        let g = SpatioTemporalGrid::new(coarse_level.clone(), c.clone());
        let gs = SpatioTemporalGrid::new(coarse_level.clone(), &c * s);
        let p = prior_noise(&g, alpha, 2, &fine_level, (4, 4, 4), Replication::ReplicateMean).unwrap();
        let ps = prior_noise(&gs, alpha, 2, &fine_level, (4, 4, 4), Replication::ReplicateMean).unwrap();
        // independent value: replicate-mean spreads each coarse sum over its 8 cells
        for ((t, h, w), v) in p.tensor.indexed_iter() {
            let expect = c[[t / 2, h / 2, w / 2]] / 8.0 * (alpha / (1.0 - alpha)).sqrt();
            if !close(*v, expect, 1e-12) {
                ok = false;
                let _ = write!(detail, "prior value {v} vs {expect}; ");
                break;
            }
        }
        for (a, b) in ps.tensor.iter().zip(p.tensor.iter()) {
            if !close(*a, s * b, 1e-12) && (a - s * b).abs() > 1e-12 {
                ok = false;
                let _ = write!(detail, "prior homogeneity broken; ");
                break;
            }
        }
    }

    // identity-bypass fusion is exactly additive
    for d in [1, 8, 32] {
        let params = FusionParams::bypass(d, Array1::linspace(-1.0, 1.0, d), Array1::linspace(0.5, 2.0, d)).unwrap();
        let e = gaussian(&mut r, (3, 4, 4));
        let p = gaussian(&mut r, (3, 4, 4));
        let prior = PriorNoise {
            tensor: p.clone(),
            source_level: 1,
            alpha_used: 0.3,
        };
        if fuse_noise(&e, &prior, &params).unwrap() != &e + &p {
            ok = false;
            let _ = write!(detail, "bypass fusion at D = {d} is not e + p; ");
        }
    }
    if ok {
        detail = format!("identity {worst_identity:.1e}, forms {worst_forms:.1e}; homogeneity and bypass exact");
    }
    outcome(ok, detail)
}

/// Replaces the network with the noise that was actually added.
struct TrueNoise<'a> {
    eps: &'a Array3<f64>,
}

impl NoisePredictor for TrueNoise<'_> {
    fn prior_sign(&self) -> Option<PriorSign> {
        None
    }

    fn predict(&mut self, _q: &Query) -> drdm_core::Result<Array3<f64>> {
        Ok(self.eps.clone())
    }
}

fn small_city() -> (drdm_core::MultiScaleTraffic, RgpPlan) {
    let cfg = CityConfig {
        h_fine: 8,
        w_fine: 8,
        t_fine: 8,
        ladder: vec![
            ResolutionLevel::new(4, 2),
            ResolutionLevel::new(2, 1),
            ResolutionLevel::new(1, 1),
        ],
        ..CityConfig::default()
    };
    let city = generate_city(&cfg, 5).unwrap();
    let plan = plan_rgp(&[4, 2, 1], &[2, 1], 60, Strategy::FineGreedy).unwrap();
    (city.traffic, plan)
}

fn criterion_3() -> Outcome {
    let (ladder, plan) = small_city();
    let mut r = rng(303);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for spec in ScheduleSpec::all_combinations() {
        let mut drawn = 0;
        while drawn < 5 {
            let n = r.gen_range(0..plan.n_steps);
            let k = stage_of(&plan, n).unwrap();
            let alpha = drdm_core::schedule::stage_alpha(&plan, &spec, k, n);
            if !(alpha > 0.0 && alpha < 1.0) {
                continue;
            }
            drawn += 1;
            let start = drdm_core::schedule::noising_start(&plan, &spec, k, &ladder).unwrap();
            let eps = gaussian(&mut r, start.data.dim());
            let state = hnap_forward(&ladder, &plan, &spec, n, &eps).unwrap();
            let mut oracle = TrueNoise { eps: &eps };
            let q = Query {
                stage: k,
                step: n,
                alpha,
                x: &state.x.data,
                prior_field: None,
            };
            let sigma_hat = oracle.predict(&q).unwrap();
            let back = reverse_update(&state.x.data, &sigma_hat, alpha, 1.0, &spec, None);
            for (a, b) in back.iter().zip(start.data.iter()) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
            cases += 1;
        }
    }
    outcome(worst <= 1e-5, format!("{cases} cases, worst relative error {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    let mut failing = Vec::new();
    let mut blocks = 0;
    for (output, sign) in [(OutputMode::Data, PriorSign::Eq11), (OutputMode::Noise, PriorSign::Eq9)] {
        let fixture = drdm_core::engine::GradFixture::new(7, output, sign).unwrap();
        let report = fixture.check(DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        blocks += report.blocks.len();
        if let Some(w) = report.worst() {
            worst = worst.max(w.max_rel_error);
        }
        failing.extend(report.failing().into_iter().map(|s| format!("{output:?}/{s}")));
    }
    outcome(
        failing.is_empty(),
        if failing.is_empty() {
            format!("{blocks} blocks on a 2x4x4 fixture, worst relative error {worst:.2e}")
        } else {
            format!("failing blocks {failing:?}")
        },
    )
}

fn rv_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let sa = a.dot(&a.t());
    let sb = b.dot(&b.t());
    let tr = |x: &Array2<f64>, y: &Array2<f64>| x.dot(y).diag().sum();
    tr(&sa, &sb) / (tr(&sa, &sa) * tr(&sb, &sb)).sqrt()
}

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut problems = Vec::new();
    for _ in 0..20 {
        let x = gaussian(&mut r, (2, 3, 3)) * 10.0;
        let (ft, fs) = (r.gen_range(1..4), r.gen_range(1..4));
        // coarse sums spread evenly then re-summed
        let up = upsample_array(&x, ft, fs, Replication::ReplicateMean);
        let back = coarsen_array(&up, ft, fs, Aggregation::Sum).unwrap();
        if back.iter().zip(x.iter()).any(|(a, b)| !close(*a, *b, 1e-12)) {
            problems.push("replicate-mean then sum does not round trip".to_string());
        }
        let up = upsample_array(&x, ft, fs, Replication::ReplicateValue);
        let back = coarsen_array(&up, ft, fs, Aggregation::Mean).unwrap();
        if back.iter().zip(x.iter()).any(|(a, b)| !close(*a, *b, 1e-12)) {
            problems.push("replicate-value then mean does not round trip".to_string());
        }
    }
    let level = ResolutionLevel::finest();
    for _ in 0..1000 {
        let a = SpatioTemporalGrid::new(level.clone(), gaussian(&mut r, (2, 3, 3)) * 5.0);
        let b = SpatioTemporalGrid::new(level.clone(), gaussian(&mut r, (2, 3, 3)) * 5.0);
        if mae(&a, &b).unwrap() > rmse(&a, &b).unwrap() + 1e-12 {
            problems.push("MAE exceeded RMSE".to_string());
            break;
        }
    }
    for _ in 0..100 {
        let a = Array2::from_shape_simple_fn((6, 3), || r.sample::<f64, _>(StandardNormal));
        let b = Array2::from_shape_simple_fn((6, 4), || r.sample::<f64, _>(StandardNormal));
        let s = r.gen_range(0.1..5.0) * if r.gen_bool(0.5) { -1.0 } else { 1.0 };
        let ab = rv_coefficient(a.view(), b.view()).unwrap();
        let ba = rv_coefficient(b.view(), a.view()).unwrap();
        let scaled = rv_coefficient((&a * s).view(), b.view()).unwrap();
        if !(0.0..=1.0).contains(&ab) || !close(ab, ba, 1e-12) || !close(ab, scaled, 1e-10) {
            problems.push(format!("RV bounds/symmetry/scale broken: {ab} {ba} {scaled}"));
            break;
        }
        if !close(ab, rv_oracle(&a, &b), 1e-10) {
            problems.push(format!("RV {ab} disagrees with the row-space formula {}", rv_oracle(&a, &b)));
            break;
        }
    }
    // integer data shifted by the peak: MSE equals peak², so exactly 0 dB
    let truth = Array3::from_shape_fn((2, 4, 4), |(t, h, w)| (t * 16 + h * 4 + w) as f64);
    let t = SpatioTemporalGrid::new(level.clone(), truth.clone());
    let p = SpatioTemporalGrid::new(level, truth + 2.0);
    let db = psnr(&p, &t, 2.0).unwrap();
    if db != 0.0 {
        problems.push(format!("PSNR 0 dB case gave {db}"));
    }
    let n = problems.len();
    outcome(n == 0, if n == 0 { "round trips exact, 1000 MAE/RMSE pairs, RV oracle, 0 dB".into() } else { problems.swap_remove(0) })
}

/// Counts every call before handing it to the wrapped predictor.
struct Counting<P> {
    inner: P,
    calls: usize,
}

impl<P: NoisePredictor> NoisePredictor for Counting<P> {
    fn prior_sign(&self) -> Option<PriorSign> {
        self.inner.prior_sign()
    }

    fn predict(&mut self, q: &Query) -> drdm_core::Result<Array3<f64>> {
        self.calls += 1;
        self.inner.predict(q)
    }
}

fn criterion_10() -> Outcome {
    let (ladder, plan) = small_city();
    let spec = ScheduleSpec::segmented();
    let fine = ladder.finest().clone();
    let norm = Normalizer::fit([&fine]).unwrap();
    let starts: Vec<Array3<f64>> = drdm_core::engine::stage_ladder(&plan, &fine)
        .unwrap()
        .iter()
        .map(|g| norm.normalize(g))
        .collect();
    let mut staged = Counting {
        inner: OraclePredictor {
            starts: starts.clone(),
            sign: Some(PriorSign::Eq11),
        },
        calls: 0,
    };
    let out = rrdp_sample(&mut staged, &plan, &spec, fine.shape(), &norm, 3, &SampleOptions::default()).unwrap();
    let mut single = Counting {
        inner: OraclePredictor {
            starts: vec![starts.last().unwrap().clone()],
            sign: None,
        },
        calls: 0,
    };
    let canon = canonical_sample(&mut single, plan.n_steps, fine.shape(), &norm, 3, &SampleOptions::default()).unwrap();
    let k = plan.k();
    let ok = staged.calls == out.forward_passes
        && single.calls == canon.forward_passes
        && staged.calls == plan.n_steps
        && staged.calls < k * single.calls;
    outcome(
        ok,
        format!(
            "K = {k}, N = {}: staged {} passes (engine reports {}), canonical {} (engine reports {}), bound {}",
            plan.n_steps,
            staged.calls,
            out.forward_passes,
            single.calls,
            canon.forward_passes,
            k * single.calls
        ),
    )
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_11() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_drdm");
    let tmp = tempfile::tempdir().unwrap();
    let mut bundles = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let data_cfg = tmp.path().join(format!("{run}.toml"));
        let text = format!(
            "[city]\nh_fine = 16\nw_fine = 16\nt_fine = 8\n\n[data]\nbundle = {:?}\ntile = 8\n\
             validation_fraction = 0.25\n\n[plan]\nn_steps = 30\n\n[model]\nwidth = 6\nfusion_dim = 4\n\n\
             [train]\nepochs = 2\nbatch = 2\n",
            out.join("data").to_string_lossy()
        );
        std::fs::write(&data_cfg, text).unwrap();
        for cmd in ["synth", "train", "sample"] {
            let status = Command::new(exe)
                .args([cmd, "--config"])
                .arg(&data_cfg)
                .args(["--seed", "11", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                return outcome(false, format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        let mut files = Vec::new();
        for sub in ["data", "checkpoint", "samples"] {
            files.extend(files_under(&out.join(sub)).into_iter().map(|(n, b)| (format!("{sub}/{n}"), b)));
        }
        bundles.push(files);
    }
    let same = bundles[0] == bundles[1];
    let bytes: usize = bundles[0].iter().map(|(_, b)| b.len()).sum();
    outcome(same && !bundles[0].is_empty(), format!("{} files, {bytes} bytes compared", bundles[0].len()))
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Shared setting of the training studies: a 32 x 32 city with 48 time steps,
/// three resolution stages and 300 diffusion steps.
fn study_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.cities = STUDY_CITIES;
    cfg.data.tile = 8;
    cfg.data.validation_fraction = 0.25;
    cfg.plan.spatial = vec![4, 2, 1];
    cfg.plan.temporal = vec![2, 1];
    cfg.plan.n_steps = 300;
    cfg.train.epochs = STUDY_EPOCHS;
    cfg.validate().unwrap();
    cfg
}

const STUDY_CITIES: usize = 6;
const STUDY_EPOCHS: usize = 150;

struct Trained {
    model: TrainedModel,
    /// Stage-output MAE on the evaluation tiles, coarse to fine.
    mae: Vec<f64>,
}

struct Study {
    data: Dataset,
    eval_ids: Vec<usize>,
    log: String,
}

impl Study {
    fn new() -> Self {
        let cfg = study_config();
        let data = Dataset::synthesize(&cfg).unwrap();
        let eval_ids = data.validation.clone();
        Self {
            data,
            eval_ids,
            log: String::new(),
        }
    }

    fn run(&mut self, label: &str, edit: impl Fn(&mut ExperimentConfig)) -> Vec<Trained> {
        let mut cfg = study_config();
        edit(&mut cfg);
        cfg.validate().unwrap();
        SEEDS
            .iter()
            .map(|&seed| {
                let t0 = Instant::now();
                let (model, _) = train_model(&cfg, &self.data, seed).unwrap();
                let (samples, _) = sample_tiles(&model, &self.data, &self.eval_ids, seed, false).unwrap();
                let mae = score(&model.plan, &self.data, &samples, &["mae".into()])
                    .unwrap()
                    .iter()
                    .map(|l| l.mae.unwrap())
                    .collect::<Vec<_>>();
                let _ = writeln!(
                    self.log,
                    "  {label:<12} seed {seed}: stage MAE {:?} ({:.0} s)",
                    mae.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
                    t0.elapsed().as_secs_f64()
                );
                Trained { model, mae }
            })
            .collect()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn finest(t: &[Trained]) -> f64 {
    mean(t.iter().map(|m| *m.mae.last().unwrap()))
}

fn criterion_6(segmented: &[Trained], canonical: &[Trained]) -> Outcome {
    let k = segmented[0].mae.len();
    let mut wins = 0;
    let mut parts = Vec::new();
    for (s, c) in segmented.iter().zip(canonical) {
        // intermediate states: the outputs at the boundaries between stages
        let better = (0..k - 1).all(|j| s.mae[j] < c.mae[j]);
        wins += usize::from(better);
        parts.push(format!(
            "{}",
            (0..k - 1).map(|j| format!("{:.3}<{:.3}", s.mae[j], c.mae[j])).collect::<Vec<_>>().join(",")
        ));
    }
    outcome(wins == SEEDS.len(), format!("{wins}/{} seeds; boundaries {}", SEEDS.len(), parts.join(" | ")))
}

fn criterion_7(fine_greedy: &[Trained], uniform: &[Trained]) -> Outcome {
    let (f, u) = (finest(fine_greedy), finest(uniform));
    outcome(f <= u, format!("finest MAE fine_greedy {f:.4} vs uniform {u:.4}"))
}

fn criterion_8(prior: &[Trained], off: &[Trained], d8: &[Trained]) -> Outcome {
    let (p, o, e) = (finest(prior), finest(off), finest(d8));
    outcome(p < o, format!("finest MAE D=32 {p:.4} vs off {o:.4} (D=8 {e:.4}, not asserted)"))
}

fn criterion_9(study: &Study, sampled: &Trained) -> Outcome {
    let (model, ids) = (&sampled.model, &study.eval_ids);
    let base = *sampled.mae.last().unwrap();
    let mut ok = ids.len() >= 20;
    let mut parts = vec![format!("{} tiles, sampled {base:.4}", ids.len())];
    for stage in 1..model.plan.k() {
        let refined = refine_tiles(model, &study.data, ids, stage, 0).unwrap();
        let r = score(&model.plan, &study.data, &refined, &["mae".into()]).unwrap();
        let fine = r.last().unwrap().mae.unwrap();
        ok &= fine < base;
        parts.push(format!("from {} {fine:.4}", model.plan.stage_level(stage).label));
    }
    outcome(ok, parts.join(", "))
}

fn report(number: usize, name: &str, started: Instant, o: &Outcome) -> bool {
    println!(
        "{} criterion {number:>2} {name}: {} [{:.1} s]",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    o.passed
}

fn main() {
    // honour `cargo test -- <filter>` loosely: any filter that does not
    // mention the target skips the whole suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let quick: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "schedule", criterion_1),
        (2, "algebra", criterion_2),
        (3, "inversion oracle", criterion_3),
        (4, "gradient check", criterion_4),
        (5, "aggregation and metrics", criterion_5),
        (10, "forward-pass budget", criterion_10),
        (11, "determinism", criterion_11),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in quick {
        let t0 = Instant::now();
        if !report(n, name, t0, &f()) {
            failed.push(n);
        }
    }

    let t0 = Instant::now();
    let mut study = Study::new();
    let segmented = study.run("sn_sa_sd", |_| {});
    let canonical = study.run("cn_ca_cd", |c| {
        c.schedule.intensity = "cn".into();
        c.schedule.adding = "ca".into();
        c.schedule.denoising = "cd".into();
    });
    if !report(6, "noise schedules", t0, &criterion_6(&segmented, &canonical)) {
        failed.push(6);
    }
    let t0 = Instant::now();
    let uniform = study.run("uniform", |c| c.plan.strategy = "uniform".into());
    if !report(7, "resolution plans", t0, &criterion_7(&segmented, &uniform)) {
        failed.push(7);
    }
    let t0 = Instant::now();
    let off = study.run("prior_off", |c| c.model.fusion_dim = 0);
    let d8 = study.run("prior_d8", |c| c.model.fusion_dim = 8);
    if !report(8, "prior noise", t0, &criterion_8(&segmented, &off, &d8)) {
        failed.push(8);
    }
    let t0 = Instant::now();
    if !report(9, "zero-shot refinement", t0, &criterion_9(&study, &segmented[0])) {
        failed.push(9);
    }
    print!("{}", study.log);

    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
