//! Resolution-aware spatiotemporal grids and the aggregation operators that
//! move traffic between resolution levels.
//!
//! All grids are `T x H x W`, time outermost. A [`ResolutionLevel`] records the
//! integer coarsening factors of a grid relative to the finest level, so a grid
//! at spatial factor 4 and temporal factor 2 holds `T/2 x H/4 x W/4` cells.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Axis, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolutionLevel {
    /// 1-based position in a ladder (coarsest = 1); 0 when the level is free-standing.
    pub index: usize,
    /// Cells per side aggregated into one cell of this level.
    pub spatial: usize,
    /// Finest time steps aggregated into one step of this level.
    pub temporal: usize,
    pub label: String,
}

impl ResolutionLevel {
    pub fn new(spatial: usize, temporal: usize) -> Self {
        Self {
            index: 0,
            spatial,
            temporal,
            label: format!("s{spatial}t{temporal}"),
        }
    }

    pub fn finest() -> Self {
        Self::new(1, 1)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    /// Number of finest cells aggregated into one cell of this level.
    pub fn cardinality(&self) -> usize {
        self.temporal * self.spatial * self.spatial
    }

    pub fn same_resolution(&self, other: &ResolutionLevel) -> bool {
        self.spatial == other.spatial && self.temporal == other.temporal
    }

    /// Shape of a grid at this level given the finest `(T, H, W)`.
    pub fn shape_for(&self, fine: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (t, h, w) = fine;
        check_divisible(Axis::Time, t, self.temporal)?;
        check_divisible(Axis::Height, h, self.spatial)?;
        check_divisible(Axis::Width, w, self.spatial)?;
        Ok((t / self.temporal, h / self.spatial, w / self.spatial))
    }
}

fn check_divisible(axis: Axis, extent: usize, factor: usize) -> Result<()> {
    if factor == 0 || extent % factor != 0 {
        return Err(Error::NotDivisible {
            axis,
            extent,
            factor,
        });
    }
    Ok(())
}

/// How [`coarsen`] combines the cells of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Sum,
    Mean,
}

/// How [`upsample`] fills the cells of a block from one coarse value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replication {
    /// Divide by the block cardinality before copying, so sum-coarsening inverts it.
    ReplicateMean,
    /// Copy the coarse value unchanged.
    ReplicateValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalGrid {
    pub level: ResolutionLevel,
    pub data: Array3<f64>,
    /// Start index of the first time step, in finest time units.
    pub t0: usize,
}

impl SpatioTemporalGrid {
    pub fn new(level: ResolutionLevel, data: Array3<f64>) -> Self {
        Self { level, data, t0: 0 }
    }

    pub fn zeros(level: ResolutionLevel, shape: (usize, usize, usize)) -> Self {
        Self::new(level, Array3::zeros(shape))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_same_shape(&self, other: &SpatioTemporalGrid) -> Result<()> {
        ensure_same_shape(&self.data, &other.data)
    }

    /// Ground-truth grids must be finite and nonnegative.
    pub fn validate_ground_truth(&self) -> Result<()> {
        for (idx, &v) in self.data.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!(
                    "ground truth {} cell {idx:?} = {v}",
                    self.level.label
                )));
            }
        }
        Ok(())
    }

    /// Time-mean map `H x W`.
    pub fn time_mean(&self) -> Array2<f64> {
        let (t, h, w) = self.shape();
        let mut out = Array2::<f64>::zeros((h, w));
        for ti in 0..t {
            out += &self.data.index_axis(ndarray::Axis(0), ti);
        }
        out / t.max(1) as f64
    }
}

pub(crate) fn ensure_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Raw block aggregation on an array.
pub fn coarsen_array(
    data: &Array3<f64>,
    factor_t: usize,
    factor_s: usize,
    mode: Aggregation,
) -> Result<Array3<f64>> {
    let (t, h, w) = data.dim();
    check_divisible(Axis::Time, t, factor_t)?;
    check_divisible(Axis::Height, h, factor_s)?;
    check_divisible(Axis::Width, w, factor_s)?;
    let (ct, ch, cw) = (t / factor_t, h / factor_s, w / factor_s);
    let mut out = Array3::<f64>::zeros((ct, ch, cw));
    for ((ti, hi, wi), &v) in data.indexed_iter() {
        out[[ti / factor_t, hi / factor_s, wi / factor_s]] += v;
    }
    if mode == Aggregation::Mean {
        let card = (factor_t * factor_s * factor_s) as f64;
        out.mapv_inplace(|v| v / card);
    }
    Ok(out)
}

/// Raw block replication on an array.
pub fn upsample_array(
    data: &Array3<f64>,
    factor_t: usize,
    factor_s: usize,
    mode: Replication,
) -> Array3<f64> {
    let (t, h, w) = data.dim();
    let card = (factor_t * factor_s * factor_s) as f64;
    Array3::from_shape_fn((t * factor_t, h * factor_s, w * factor_s), |(ti, hi, wi)| {
        let v = data[[ti / factor_t, hi / factor_s, wi / factor_s]];
        match mode {
            Replication::ReplicateMean => v / card,
            Replication::ReplicateValue => v,
        }
    })
}

/// Aggregate `factor_t x factor_s x factor_s` blocks into single cells.
pub fn coarsen(
    grid: &SpatioTemporalGrid,
    factor_t: usize,
    factor_s: usize,
    mode: Aggregation,
) -> Result<SpatioTemporalGrid> {
    if factor_t == 0 || factor_s == 0 {
        return Err(invalid("coarsening factors must be >= 1"));
    }
    let data = coarsen_array(&grid.data, factor_t, factor_s, mode)?;
    let level = ResolutionLevel::new(
        grid.level.spatial * factor_s,
        grid.level.temporal * factor_t,
    );
    Ok(SpatioTemporalGrid {
        level,
        data,
        t0: grid.t0,
    })
}

/// Replicate every cell into a `factor_t x factor_s x factor_s` block.
pub fn upsample(
    grid: &SpatioTemporalGrid,
    factor_t: usize,
    factor_s: usize,
    mode: Replication,
) -> Result<SpatioTemporalGrid> {
    if factor_t == 0 || factor_s == 0 {
        return Err(invalid("upsampling factors must be >= 1"));
    }
    if grid.level.temporal % factor_t != 0 || grid.level.spatial % factor_s != 0 {
        return Err(invalid(format!(
            "cannot refine level {} by (t={factor_t}, s={factor_s})",
            grid.level.label
        )));
    }
    let data = upsample_array(&grid.data, factor_t, factor_s, mode);
    let level = ResolutionLevel::new(
        grid.level.spatial / factor_s,
        grid.level.temporal / factor_t,
    );
    Ok(SpatioTemporalGrid {
        level,
        data,
        t0: grid.t0,
    })
}

/// Bring a coarser grid to `target`'s resolution by block replication.
pub fn align_to(
    grid: &SpatioTemporalGrid,
    target: &ResolutionLevel,
    mode: Replication,
) -> Result<SpatioTemporalGrid> {
    let src = &grid.level;
    if src.spatial % target.spatial != 0 || src.temporal % target.temporal != 0 {
        return Err(Error::MissingLevel(format!(
            "{} is not an integer coarsening of {}",
            src.label, target.label
        )));
    }
    let mut out = upsample(
        grid,
        src.temporal / target.temporal,
        src.spatial / target.spatial,
        mode,
    )?;
    out.level = target.clone();
    Ok(out)
}

/// Ordered ladder of grids from coarsest (`levels[0]`, k = 1) to finest (k = K).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleTraffic {
    pub levels: Vec<SpatioTemporalGrid>,
}

impl MultiScaleTraffic {
    pub fn new(levels: Vec<SpatioTemporalGrid>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(invalid(format!(
                "a ladder needs K >= 2 levels, got {}",
                levels.len()
            )));
        }
        for pair in levels.windows(2) {
            let (c, f) = (&pair[0].level, &pair[1].level);
            if c.spatial < f.spatial || c.temporal < f.temporal {
                return Err(invalid(format!(
                    "ladder must run coarse to fine: {} before {}",
                    c.label, f.label
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &SpatioTemporalGrid {
        self.levels.last().expect("ladder is never empty")
    }

    /// Grid at the given resolution, if present.
    pub fn at(&self, level: &ResolutionLevel) -> Option<&SpatioTemporalGrid> {
        self.levels.iter().find(|g| g.level.same_resolution(level))
    }

    /// Largest relative deviation between each level and the sum-aggregate of its finer neighbour.
    pub fn max_consistency_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for pair in self.levels.windows(2) {
            let (c, f) = (&pair[0], &pair[1]);
            let ft = c.level.temporal / f.level.temporal;
            let fs = c.level.spatial / f.level.spatial;
            let agg = coarsen_array(&f.data, ft, fs, Aggregation::Sum)?;
            ensure_same_shape(&agg, &c.data)?;
            for (a, b) in agg.iter().zip(c.data.iter()) {
                let scale = a.abs().max(b.abs()).max(1e-12);
                worst = worst.max((a - b).abs() / scale);
            }
        }
        Ok(worst)
    }
}
