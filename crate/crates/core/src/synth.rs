//! Synthetic cities: an urban context plus finest-level traffic produced by a
//! fixed environment-to-traffic law, and the multi-scale ladder built from it.
//!
//! Generation law, for finest cell `(t, i, j)`:
//!
//! ```text
//! profile_a(t)   = 1 + amp[a] * sin(2π t / period + 1.3 a)
//! population     = profile_{aoi(i,j)}(t) * density(i,j)
//! z              = w1 * population + w2 * mean_d poi(d,i,j) + w3 * surface_factor(i,j)
//!                  + bias + noise * (u(i,j) + amp[aoi(i,j)] * v(t,i,j))
//! traffic        = softplus(z)
//! ```
//!
//! `u` and `v` are box-blurred Gaussian fields rescaled to unit standard
//! deviation. The time-varying part is scaled by the local diurnal amplitude,
//! so a configuration with all amplitudes zero yields time-constant traffic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, ArrayD, Axis as NdAxis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::TensorBundle;
use crate::error::{invalid, Error, Result};
use crate::grid::{coarsen_array, Aggregation, MultiScaleTraffic, ResolutionLevel, SpatioTemporalGrid};
use crate::metrics::rv_coefficient;
use crate::rng::{self, streams};

/// Keys accepted in a city configuration file.
pub const CITY_KEYS: &[&str] = &[
    "h_fine",
    "w_fine",
    "t_fine",
    "ladder",
    "aoi_classes",
    "surface_classes",
    "aoi_rects",
    "poi_dim",
    "weights",
    "bias",
    "amplitudes",
    "period",
    "noise",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityConfig {
    pub h_fine: usize,
    pub w_fine: usize,
    pub t_fine: usize,
    /// Coarsest first; the last entry must be the finest level `(1, 1)`.
    pub ladder: Vec<ResolutionLevel>,
    /// Includes the background class 0.
    pub aoi_classes: usize,
    pub surface_classes: usize,
    pub aoi_rects: usize,
    pub poi_dim: usize,
    /// Population, POI intensity and surface weights.
    pub weights: [f64; 3],
    pub bias: f64,
    /// Diurnal amplitude per AoI class.
    pub amplitudes: Vec<f64>,
    /// Diurnal period in finest time steps.
    pub period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            h_fine: 32,
            w_fine: 32,
            t_fine: 48,
            ladder: vec![
                ResolutionLevel::new(4, 2).with_label("cell"),
                ResolutionLevel::new(2, 1).with_label("grid100"),
                ResolutionLevel::new(1, 1).with_label("grid50"),
            ],
            aoi_classes: 4,
            surface_classes: 4,
            aoi_rects: 8,
            poi_dim: 4,
            weights: [1.2, 0.5, 0.8],
            bias: -1.0,
            amplitudes: vec![0.3, 0.8, 0.5, 0.9],
            period: 24.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl CityConfig {
    /// Parse the plain-text `key = value` format. `#` starts a comment.
    ///
    /// Keys absent from the text keep their defaults. Unknown keys and
    /// malformed values are all collected into one error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut problems = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    map.insert(k.trim().to_string(), v.trim().to_string());
                }
                None => problems.push(format!("line {}: expected `key = value`", lineno + 1)),
            }
        }
        let mut cfg = Self::default();
        for (k, v) in &map {
            if let Err(e) = cfg.set(k, v) {
                problems.push(e);
            }
        }
        if !problems.is_empty() {
            return Err(invalid(problems.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key/value pair. Used by both the text parser and the harness.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let bad = |what: &str| format!("key `{key}`: cannot parse `{value}` as {what}");
        match key {
            "h_fine" => self.h_fine = value.parse().map_err(|_| bad("integer"))?,
            "w_fine" => self.w_fine = value.parse().map_err(|_| bad("integer"))?,
            "t_fine" => self.t_fine = value.parse().map_err(|_| bad("integer"))?,
            "aoi_classes" => self.aoi_classes = value.parse().map_err(|_| bad("integer"))?,
            "surface_classes" => self.surface_classes = value.parse().map_err(|_| bad("integer"))?,
            "aoi_rects" => self.aoi_rects = value.parse().map_err(|_| bad("integer"))?,
            "poi_dim" => self.poi_dim = value.parse().map_err(|_| bad("integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "bias" => self.bias = value.parse().map_err(|_| bad("number"))?,
            "period" => self.period = value.parse().map_err(|_| bad("number"))?,
            "noise" => self.noise = value.parse().map_err(|_| bad("number"))?,
            "weights" => {
                let w = parse_list(value).map_err(|_| bad("number list"))?;
                if w.len() != 3 {
                    return Err(format!("key `weights`: expected 3 values, got {}", w.len()));
                }
                self.weights = [w[0], w[1], w[2]];
            }
            "amplitudes" => self.amplitudes = parse_list(value).map_err(|_| bad("number list"))?,
            "ladder" => self.ladder = parse_ladder(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.h_fine == 0 || self.w_fine == 0 || self.t_fine == 0 {
            problems.push("grid extents must be positive".to_string());
        }
        if self.ladder.len() < 2 {
            problems.push(format!("ladder needs K >= 2 levels, got {}", self.ladder.len()));
        }
        if let Some(last) = self.ladder.last() {
            if last.spatial != 1 || last.temporal != 1 {
                problems.push("last ladder level must be the finest (1:1)".into());
            }
        }
        for pair in self.ladder.windows(2) {
            if pair[0].spatial < pair[1].spatial || pair[0].temporal < pair[1].temporal {
                problems.push(format!(
                    "ladder must run coarse to fine: {} before {}",
                    pair[0].label, pair[1].label
                ));
            }
        }
        for l in &self.ladder {
            if let Err(e) = l.shape_for((self.t_fine, self.h_fine, self.w_fine)) {
                problems.push(format!("level {}: {e}", l.label));
            }
        }
        if self.aoi_classes < 1 || self.surface_classes < 1 {
            problems.push("class counts must be >= 1".into());
        }
        if self.amplitudes.len() != self.aoi_classes {
            problems.push(format!(
                "amplitudes has {} entries but aoi_classes = {}",
                self.amplitudes.len(),
                self.aoi_classes
            ));
        }
        if self.poi_dim == 0 {
            problems.push("poi_dim must be >= 1".into());
        }
        if !(self.period > 0.0) {
            problems.push("period must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ladder: Vec<String> = self
            .ladder
            .iter()
            .map(|l| format!("{}:{}:{}", l.label, l.spatial, l.temporal))
            .collect();
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(s, "h_fine = {}", self.h_fine);
        let _ = writeln!(s, "w_fine = {}", self.w_fine);
        let _ = writeln!(s, "t_fine = {}", self.t_fine);
        let _ = writeln!(s, "ladder = {}", ladder.join(", "));
        let _ = writeln!(s, "aoi_classes = {}", self.aoi_classes);
        let _ = writeln!(s, "surface_classes = {}", self.surface_classes);
        let _ = writeln!(s, "aoi_rects = {}", self.aoi_rects);
        let _ = writeln!(s, "poi_dim = {}", self.poi_dim);
        let _ = writeln!(s, "weights = {}", list(&self.weights));
        let _ = writeln!(s, "bias = {}", self.bias);
        let _ = writeln!(s, "amplitudes = {}", list(&self.amplitudes));
        let _ = writeln!(s, "period = {}", self.period);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn fine_shape(&self) -> (usize, usize, usize) {
        (self.t_fine, self.h_fine, self.w_fine)
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// `label:spatial:temporal` or `spatial:temporal`, comma separated.
pub fn parse_ladder(value: &str) -> std::result::Result<Vec<ResolutionLevel>, String> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
        let (label, s, t) = match parts.as_slice() {
            [s, t] => (None, *s, *t),
            [l, s, t] => (Some(*l), *s, *t),
            _ => return Err(format!("ladder entry `{item}`: expected [label:]spatial:temporal")),
        };
        let s: usize = s
            .parse()
            .map_err(|_| format!("ladder entry `{item}`: bad spatial factor"))?;
        let t: usize = t
            .parse()
            .map_err(|_| format!("ladder entry `{item}`: bad temporal factor"))?;
        if s == 0 || t == 0 {
            return Err(format!("ladder entry `{item}`: factors must be >= 1"));
        }
        let mut level = ResolutionLevel::new(s, t);
        if let Some(l) = label {
            level.label = l.to_string();
        }
        out.push(level);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrbanContext {
    /// House and road classes, `H x W`.
    pub surface: Array2<usize>,
    pub aoi: Array2<usize>,
    /// POI embedding, `d x H x W`.
    pub poi: Array3<f64>,
    /// Population history, `T x H x W`.
    pub population: Array3<f64>,
    pub surface_classes: usize,
    pub aoi_classes: usize,
}

impl UrbanContext {
    pub fn poi_dim(&self) -> usize {
        self.poi.dim().0
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        self.aoi.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.aoi.dim();
        if self.surface.dim() != hw
            || (self.poi.dim().1, self.poi.dim().2) != hw
            || (self.population.dim().1, self.population.dim().2) != hw
        {
            return Err(invalid("context fields disagree on the spatial shape"));
        }
        if self.surface.iter().any(|&c| c >= self.surface_classes)
            || self.aoi.iter().any(|&c| c >= self.aoi_classes)
        {
            return Err(invalid("context class value out of range"));
        }
        if self.population.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("population history".into()));
        }
        Ok(())
    }

    /// Spatial window `[i0, i0+h) x [j0, j0+w)` over all time steps.
    pub fn window(&self, i0: usize, j0: usize, h: usize, w: usize) -> UrbanContext {
        UrbanContext {
            surface: self.surface.slice(s![i0..i0 + h, j0..j0 + w]).to_owned(),
            aoi: self.aoi.slice(s![i0..i0 + h, j0..j0 + w]).to_owned(),
            poi: self.poi.slice(s![.., i0..i0 + h, j0..j0 + w]).to_owned(),
            population: self.population.slice(s![.., i0..i0 + h, j0..j0 + w]).to_owned(),
            surface_classes: self.surface_classes,
            aoi_classes: self.aoi_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub config: CityConfig,
    pub context: UrbanContext,
    pub traffic: MultiScaleTraffic,
    pub seed: u64,
    /// Maximum finest-level traffic value.
    pub psnr_peak: f64,
}

/// Round through `f32` so that saved bundles reload bit-identically.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Box mean of radius `r` along one axis, averaging only in-bounds cells.
fn box_blur_axis(a: &Array3<f64>, axis: usize, r: usize) -> Array3<f64> {
    let n = a.shape()[axis];
    let mut out = Array3::<f64>::zeros(a.dim());
    for (idx, o) in out.indexed_iter_mut() {
        let c = [idx.0, idx.1, idx.2][axis];
        let lo = c.saturating_sub(r);
        let hi = (c + r).min(n - 1);
        let mut acc = 0.0;
        for p in lo..=hi {
            let mut q = [idx.0, idx.1, idx.2];
            q[axis] = p;
            acc += a[q];
        }
        *o = acc / (hi - lo + 1) as f64;
    }
    out
}

fn box_blur(a: &Array3<f64>, axes: &[usize], r: usize) -> Array3<f64> {
    let mut out = a.clone();
    for &ax in axes {
        out = box_blur_axis(&out, ax, r);
    }
    out
}

fn unit_std(mut a: Array3<f64>) -> Array3<f64> {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    a.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
    a
}

/// Surface-class contribution: open land 0, building classes weigh most.
pub fn surface_factor(class: usize, classes: usize) -> f64 {
    match (class, classes) {
        (0, _) => 0.0,
        (c, 4) => [0.0, 0.6, 0.3, 1.0][c],
        (c, n) => c as f64 / (n - 1).max(1) as f64,
    }
}

pub fn generate_city(config: &CityConfig, seed: u64) -> Result<SyntheticCity> {
    config.validate()?;
    let (t_len, h, w) = config.fine_shape();

    let mut aoi_rng = rng::stream(seed, streams::AOI);
    let mut aoi = Array2::<usize>::zeros((h, w));
    let (min_side_h, max_side_h) = ((h / 8).max(1), (h * 7 / 16).max(2));
    let (min_side_w, max_side_w) = ((w / 8).max(1), (w * 7 / 16).max(2));
    for _ in 0..config.aoi_rects {
        let rh = aoi_rng.gen_range(min_side_h..=max_side_h).min(h);
        let rw = aoi_rng.gen_range(min_side_w..=max_side_w).min(w);
        let i0 = aoi_rng.gen_range(0..=h - rh);
        let j0 = aoi_rng.gen_range(0..=w - rw);
        let class = if config.aoi_classes > 1 {
            aoi_rng.gen_range(1..config.aoi_classes)
        } else {
            0
        };
        aoi.slice_mut(s![i0..i0 + rh, j0..j0 + rw]).fill(class);
    }

    let mut surf_rng = rng::stream(seed, streams::SURFACE);
    let mut surface = Array2::<usize>::zeros((h, w));
    if config.surface_classes >= 3 {
        let roads = (h.max(w) / 10).max(1);
        for _ in 0..roads {
            let r = surf_rng.gen_range(0..h);
            surface.row_mut(r).fill(1);
            let c = surf_rng.gen_range(0..w);
            surface.column_mut(c).fill(2);
        }
    }
    let building = config.surface_classes - 1;
    for v in surface.iter_mut() {
        let u: f64 = surf_rng.gen();
        if *v == 0 && u < 0.2 && building > 0 {
            *v = building;
        }
    }

    let mut poi_rng = rng::stream(seed, streams::POI);
    let raw_poi = Array3::from_shape_fn((config.poi_dim, h, w), |(_, i, j)| {
        poi_rng.gen::<f64>() * (1.0 + aoi[[i, j]] as f64)
    });
    let poi = box_blur(&raw_poi, &[1, 2], 1).mapv(f32_round);

    let mut pop_rng = rng::stream(seed, streams::POPULATION);
    let raw_density = Array3::from_shape_fn((1, h, w), |_| pop_rng.gen::<f64>());
    let density = box_blur(&raw_density, &[1, 2], 2).mapv(|v| 2.0 * v);
    let population = Array3::from_shape_fn((t_len, h, w), |(t, i, j)| {
        let a = aoi[[i, j]];
        let phase = 1.3 * a as f64;
        let profile = 1.0
            + config.amplitudes[a]
                * (2.0 * std::f64::consts::PI * t as f64 / config.period + phase).sin();
        f32_round(profile * density[[0, i, j]])
    });

    let mut noise_rng = rng::stream(seed, streams::NOISE);
    let u = unit_std(box_blur(&rng::normal_array(&mut noise_rng, (1, h, w)), &[1, 2], 2));
    let v = unit_std(box_blur(
        &rng::normal_array(&mut noise_rng, (t_len, h, w)),
        &[0, 1, 2],
        2,
    ));

    let [w1, w2, w3] = config.weights;
    let poi_mean = poi.mean_axis(NdAxis(0)).expect("poi_dim >= 1");
    let fine = Array3::from_shape_fn((t_len, h, w), |(t, i, j)| {
        let a = aoi[[i, j]];
        let z = w1 * population[[t, i, j]]
            + w2 * poi_mean[[i, j]]
            + w3 * surface_factor(surface[[i, j]], config.surface_classes)
            + config.bias
            + config.noise * (u[[0, i, j]] + config.amplitudes[a] * v[[t, i, j]]);
        f32_round(softplus(z))
    });

    let context = UrbanContext {
        surface,
        aoi,
        poi,
        population,
        surface_classes: config.surface_classes,
        aoi_classes: config.aoi_classes,
    };
    let fine_grid = SpatioTemporalGrid::new(ResolutionLevel::finest(), fine);
    let psnr_peak = fine_grid.data.iter().cloned().fold(0.0, f64::max);
    let mut traffic = build_ladder(&fine_grid, &config.ladder)?;
    // Stored bundles hold f32; round the aggregates too so a reload is exact.
    for g in &mut traffic.levels {
        g.data.mapv_inplace(f32_round);
    }
    Ok(SyntheticCity {
        config: config.clone(),
        context,
        traffic,
        seed,
        psnr_peak,
    })
}

/// Sum-aggregate the finest grid to every level of `spec` (coarse to fine).
pub fn build_ladder(fine: &SpatioTemporalGrid, spec: &[ResolutionLevel]) -> Result<MultiScaleTraffic> {
    if spec.len() < 2 {
        return Err(invalid(format!("a ladder needs K >= 2 levels, got {}", spec.len())));
    }
    let last = spec.last().expect("non-empty");
    if last.spatial != 1 || last.temporal != 1 {
        return Err(invalid("the last ladder level must have factors (1, 1)"));
    }
    let mut levels = Vec::with_capacity(spec.len());
    for (k, level) in spec.iter().enumerate() {
        let data = coarsen_array(&fine.data, level.temporal, level.spatial, Aggregation::Sum)?;
        levels.push(SpatioTemporalGrid {
            level: level.clone().with_index(k + 1),
            data,
            t0: fine.t0,
        });
    }
    MultiScaleTraffic::new(levels)
}

/// RV-coefficient between two levels of a ladder, on time-flattened matrices.
///
/// The coarser grid is replicated onto the finer spatial grid so both
/// matrices have one row per fine cell and one column per time step of their
/// own level. Columns are centred across space before comparison.
pub fn cross_scale_rv(coarse: &SpatioTemporalGrid, fine: &SpatioTemporalGrid) -> Result<f64> {
    let rs = coarse.level.spatial / fine.level.spatial.max(1);
    if rs == 0 || coarse.level.spatial % fine.level.spatial != 0 {
        return Err(invalid("cross_scale_rv: first grid must be spatially coarser"));
    }
    let up = crate::grid::upsample_array(&coarse.data, 1, rs, crate::grid::Replication::ReplicateMean);
    let a = time_flatten(&up);
    let b = time_flatten(&fine.data);
    rv_coefficient(a.view(), b.view())
}

fn time_flatten(data: &Array3<f64>) -> Array2<f64> {
    let (t, h, w) = data.dim();
    let mut m = Array2::from_shape_fn((h * w, t), |(r, c)| data[[c, r / w, r % w]]);
    for mut col in m.columns_mut() {
        let mean = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - mean);
    }
    m
}

/// A disjoint spatial patch of a city with all time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub origin: (usize, usize),
    pub context: UrbanContext,
    pub fine: SpatioTemporalGrid,
}

/// Cut a city into non-overlapping `size x size` tiles, row-major.
pub fn tiles(city: &SyntheticCity, size: usize) -> Result<Vec<Tile>> {
    let fine = city.traffic.finest();
    let (_, h, w) = fine.shape();
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(invalid(format!("tile size {size} does not divide {h}x{w}")));
    }
    let mut out = Vec::new();
    for i0 in (0..h).step_by(size) {
        for j0 in (0..w).step_by(size) {
            out.push(Tile {
                origin: (i0, j0),
                context: city.context.window(i0, j0, size, size),
                fine: SpatioTemporalGrid::new(
                    ResolutionLevel::finest(),
                    fine.data.slice(s![.., i0..i0 + size, j0..j0 + size]).to_owned(),
                ),
            });
        }
    }
    Ok(out)
}

/// Seeded shuffle of tile indices into `(train, validation)`.
pub fn split_tiles(count: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut r = rng::stream(seed, streams::SPLIT);
    for i in (1..count).rev() {
        let j = r.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = ((count as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(count);
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn classes_to_f64(a: &Array2<usize>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

fn classes_from(t: ArrayD<f64>, name: &str) -> Result<Array2<usize>> {
    let t = t
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| invalid(format!("tensor {name} is not 2-D")))?;
    Ok(t.mapv(|v| v as usize))
}

fn grid3(t: ArrayD<f64>, name: &str) -> Result<Array3<f64>> {
    t.into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| invalid(format!("tensor {name} is not 3-D")))
}

impl SyntheticCity {
    pub fn to_bundle(&self) -> TensorBundle {
        let meta = serde_json::json!({
            "kind": "city",
            "seed": self.seed,
            "psnr_peak": self.psnr_peak,
            "config": self.config.to_text(),
            "surface_classes": self.context.surface_classes,
            "aoi_classes": self.context.aoi_classes,
            "levels": self.traffic.levels.iter().map(|g| &g.level).collect::<Vec<_>>(),
        });
        let mut b = TensorBundle::with_meta(meta);
        b.insert_f64("context/surface", &classes_to_f64(&self.context.surface));
        b.insert_f64("context/aoi", &classes_to_f64(&self.context.aoi));
        b.insert_f64("context/poi", &self.context.poi);
        b.insert_f64("context/population", &self.context.population);
        for g in &self.traffic.levels {
            b.insert_f64(format!("traffic/{}", g.level.label), &g.data);
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let meta = &b.meta;
        let text = meta["config"]
            .as_str()
            .ok_or_else(|| invalid("city bundle lacks its config"))?;
        let config = CityConfig::parse(text)?;
        let seed = meta["seed"].as_u64().unwrap_or(config.seed);
        let psnr_peak = meta["psnr_peak"].as_f64().unwrap_or(1.0);
        let levels: Vec<ResolutionLevel> = serde_json::from_value(meta["levels"].clone())
            .map_err(|e| invalid(format!("city bundle levels: {e}")))?;
        let context = UrbanContext {
            surface: classes_from(b.get_f64("context/surface")?, "context/surface")?,
            aoi: classes_from(b.get_f64("context/aoi")?, "context/aoi")?,
            poi: grid3(b.get_f64("context/poi")?, "context/poi")?,
            population: grid3(b.get_f64("context/population")?, "context/population")?,
            surface_classes: config.surface_classes,
            aoi_classes: config.aoi_classes,
        };
        let mut grids = Vec::new();
        for level in levels {
            let name = format!("traffic/{}", level.label);
            let data = grid3(b.get_f64(&name)?, &name)?;
            grids.push(SpatioTemporalGrid::new(level, data));
        }
        Ok(Self {
            config,
            context,
            traffic: MultiScaleTraffic::new(grids)?,
            seed,
            psnr_peak,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    // frozen from the default city, seed 0
    const GOLDEN_CELL_GRID100_RV: f64 = 0.804045039724;

    fn small() -> CityConfig {
        CityConfig {
            h_fine: 8,
            w_fine: 8,
            t_fine: 8,
            ladder: vec![ResolutionLevel::new(2, 2), ResolutionLevel::finest()],
            aoi_rects: 3,
            ..CityConfig::default()
        }
    }

    /// RV from explicit Gram matrices: tr(AA'BB') / sqrt(tr((AA')^2) tr((BB')^2)).
    fn rv_brute(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let (ga, gb) = (a.dot(&a.t()), b.dot(&b.t()));
        let tr = |x: &Array2<f64>, y: &Array2<f64>| (x * &y.t()).sum();
        tr(&ga, &gb) / (tr(&ga, &ga) * tr(&gb, &gb)).sqrt()
    }

    #[test]
    fn neighbouring_scales_agree_on_default_city() {
        let city = generate_city(&CityConfig::default(), 0).unwrap();
        let (cell, grid100) = (&city.traffic.levels[0], &city.traffic.levels[1]);
        let rv = cross_scale_rv(cell, grid100).unwrap();
        let up = crate::grid::upsample_array(&cell.data, 1, 2, crate::grid::Replication::ReplicateMean);
        let brute = rv_brute(&time_flatten(&up), &time_flatten(&grid100.data));
        assert!((rv - brute).abs() < 1e-9, "{rv} vs {brute}");
        assert!(rv >= 0.5);
        assert!((rv - GOLDEN_CELL_GRID100_RV).abs() < 1e-9, "{rv}");
    }

    #[test]
    fn deterministic() {
        let a = generate_city(&small(), 3).unwrap();
        let b = generate_city(&small(), 3).unwrap();
        assert_eq!(a.to_bundle().blob(), b.to_bundle().blob());
        let c = generate_city(&small(), 4).unwrap();
        assert_ne!(a.to_bundle().blob(), c.to_bundle().blob());
    }

    #[test]
    fn flat_profiles_give_constant_traffic() {
        let cfg = CityConfig {
            amplitudes: vec![0.0; 4],
            ..small()
        };
        let city = generate_city(&cfg, 1).unwrap();
        for g in &city.traffic.levels {
            let first = g.data.index_axis(NdAxis(0), 0).to_owned();
            for t in 0..g.shape().0 {
                assert_eq!(g.data.index_axis(NdAxis(0), t), first);
            }
        }
    }

    #[test]
    fn ladder_from_ones() {
        let fine = SpatioTemporalGrid::new(ResolutionLevel::finest(), Array3::ones((2, 2, 2)));
        let ladder = build_ladder(&fine, &[ResolutionLevel::new(2, 2), ResolutionLevel::finest()]).unwrap();
        assert_eq!(ladder.levels[0].data, Array3::from_elem((1, 1, 1), 8.0));
        assert_eq!(ladder.levels[1].data, Array3::<f64>::ones((2, 2, 2)));
        assert!(build_ladder(&fine, &[ResolutionLevel::finest()]).is_err());
        assert!(build_ladder(&fine, &[ResolutionLevel::finest(), ResolutionLevel::new(2, 2)]).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = CityConfig::default();
        assert_eq!(CityConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_reports_every_bad_key() {
        let err = CityConfig::parse("h_fine = x\nfoo = 1\nbar = 2\n").unwrap_err().to_string();
        assert!(err.contains("h_fine") && err.contains("foo") && err.contains("bar"), "{err}");
    }

    #[test]
    fn non_divisible_ladder_rejected() {
        let cfg = CityConfig {
            h_fine: 9,
            ..small()
        };
        assert!(generate_city(&cfg, 0).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let city = generate_city(&small(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        city.to_bundle().save(dir.path()).unwrap();
        let back = SyntheticCity::from_bundle(&TensorBundle::load(dir.path()).unwrap()).unwrap();
        assert_eq!(back.config, city.config);
        assert_eq!(back.context, city.context);
        assert_eq!(back.traffic.levels[0].level, city.traffic.levels[0].level);
        assert_eq!(back.traffic, city.traffic);
        assert_eq!(back, city);
    }

    #[test]
    fn tiles_cover_city() {
        let city = generate_city(&small(), 2).unwrap();
        let t = tiles(&city, 4).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[3].origin, (4, 4));
        assert_eq!(t[3].fine.data[[0, 0, 0]], city.traffic.finest().data[[0, 4, 4]]);
        let (train, val) = split_tiles(10, 0.3, 0);
        assert_eq!(val.len(), 3);
        assert_eq!(train.len() + val.len(), 10);
        assert!(train.iter().all(|i| !val.contains(i)));
    }
}
