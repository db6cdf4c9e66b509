//! Counting metrics: GAME(l), RMSE, and the relative L1 distance histogram
//! between real and pseudo features.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Point;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A predicted density map with the ground-truth head points of its image.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    /// `h×w` or `1×h×w`.
    pub density: Tensor,
    /// Head points in image pixels.
    pub points: Vec<Point>,
    /// Image pixels per density-map cell.
    pub stride: usize,
}

impl EvalRecord {
    pub fn new(density: Tensor, points: Vec<Point>, stride: usize) -> Self {
        EvalRecord {
            density,
            points,
            stride,
        }
    }

    pub fn map_size(&self) -> Result<(usize, usize)> {
        match self.density.shape() {
            [1, h, w] | [h, w] => Ok((*h, *w)),
            s => Err(Error::dim(format!("density map must be 1×H×W, got {s:?}"))),
        }
    }

    pub fn predicted(&self) -> f64 {
        self.density.sum()
    }

    pub fn truth(&self) -> f64 {
        self.points.len() as f64
    }

    /// Map cell holding an image point, clamped to the map.
    fn cell(&self, p: &Point, h: usize, w: usize) -> (usize, usize) {
        let s = self.stride.max(1) as f64;
        let clamp = |v: f64, n: usize| ((v / s).floor().max(0.0) as usize).min(n - 1);
        (clamp(p[1], h), clamp(p[0], w))
    }
}

/// Start of each of `parts` bands over `n` cells: equal floor extents, the
/// remainder going to the last band. The final entry is `n`.
fn bands(n: usize, parts: usize) -> Vec<usize> {
    let step = n / parts;
    let mut b: Vec<usize> = (0..parts).map(|i| i * step).collect();
    b.push(n);
    b
}

fn band_of(bounds: &[usize], v: usize) -> usize {
    bounds[1..].iter().position(|&end| v < end).unwrap_or(bounds.len() - 2)
}

/// Grid Average Mean Absolute Error at level `l`: per image, the sum over a
/// `2^l × 2^l` grid of absolute regional count errors; averaged over images.
pub fn game(records: &[EvalRecord], level: u32) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("game over an empty record set"));
    }
    let parts = 1usize
        .checked_shl(level)
        .ok_or_else(|| Error::dim(format!("game level {level} too large")))?;
    let mut total = 0.0;
    for r in records {
        let (h, w) = r.map_size()?;
        if h < parts || w < parts {
            return Err(Error::dim(format!(
                "{h}×{w} map is smaller than the {parts}×{parts} grid of level {level}"
            )));
        }
        let rows = bands(h, parts);
        let cols = bands(w, parts);
        let mut pred = vec![0.0; parts * parts];
        let d = r.density.data();
        for i in 0..h {
            let bi = band_of(&rows, i);
            for j in 0..w {
                pred[bi * parts + band_of(&cols, j)] += d[i * w + j];
            }
        }
        let mut truth = vec![0.0; parts * parts];
        for p in &r.points {
            let (i, j) = r.cell(p, h, w);
            truth[band_of(&rows, i) * parts + band_of(&cols, j)] += 1.0;
        }
        total += pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>();
    }
    Ok(total / records.len() as f64)
}

/// Root mean square error of total counts.
pub fn rmse(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("rmse over an empty record set"));
    }
    let sq: f64 = records
        .iter()
        .map(|r| (r.predicted() - r.truth()).powi(2))
        .sum();
    Ok((sq / records.len() as f64).sqrt())
}

/// Mean absolute error of total counts.
pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("mae over an empty record set"));
    }
    let s: f64 = records.iter().map(|r| (r.predicted() - r.truth()).abs()).sum();
    Ok(s / records.len() as f64)
}

/// Whether GAME(0) agrees with the mean absolute count error.
pub fn game_equals_mae_check(records: &[EvalRecord]) -> Result<bool> {
    let g = game(records, 0)?;
    let m = mae(records)?;
    Ok((g - m).abs() <= 1e-9 * m.abs().max(1.0))
}

/// GAME(0..=3) and RMSE of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricTable {
    pub game: [f64; 4],
    pub rmse: f64,
}

impl MetricTable {
    pub fn compute(records: &[EvalRecord]) -> Result<Self> {
        let mut game_v = [0.0; 4];
        for (l, v) in game_v.iter_mut().enumerate() {
            *v = game(records, l as u32)?;
        }
        Ok(MetricTable {
            game: game_v,
            rmse: rmse(records)?,
        })
    }

    /// `(metric, level, value)` rows; RMSE has an empty level.
    pub fn rows(&self) -> Vec<(&'static str, Option<u32>, f64)> {
        let mut rows: Vec<_> = (0..4)
            .map(|l| ("GAME", Some(l as u32), self.game[l]))
            .collect();
        rows.push(("RMSE", None, self.rmse));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,level,value\n");
        for (m, l, v) in self.rows() {
            let level = l.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{m},{level},{v}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>10} {:>10} {:>10}",
            "GAME(0)", "GAME(1)", "GAME(2)", "GAME(3)", "RMSE"
        );
        let _ = writeln!(
            s,
            "{:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            self.game[0], self.game[1], self.game[2], self.game[3], self.rmse
        );
        s
    }
}

/// Distribution of relative L1 distances between real and pseudo features.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Percentage of samples per bin; sums to 100.
    pub percent: Vec<f64>,
    /// Per-sample ratios in input order.
    pub ratios: Vec<f64>,
}

impl Histogram {
    pub fn median(&self) -> f64 {
        median(&self.ratios)
    }

    /// Percentage of samples with ratio below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        let n = self.ratios.iter().filter(|&&r| r < x).count();
        100.0 * n as f64 / self.ratios.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,percent\n");
        for (i, p) in self.percent.iter().enumerate() {
            let lo = i as f64 * self.bin_width;
            let _ = writeln!(s, "{lo},{},{p}", lo + self.bin_width);
        }
        s
    }

    /// One line per bin with a bar of `#` (one per 2%).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.percent.iter().enumerate() {
            let lo = i as f64 * self.bin_width;
            let bar = "#".repeat((p / 2.0).round() as usize);
            let _ = writeln!(s, "[{lo:.3}, {:.3}) {p:6.2}% {bar}", lo + self.bin_width);
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-sample `L1(real − pseudo) / mean_samples(L1(real))`, bucketed into
/// bins of `bin_width` starting at zero.
pub fn relative_l1_histogram(real: &[Tensor], pseudo: &[Tensor], bin_width: f64) -> Result<Histogram> {
    if real.len() != pseudo.len() || real.is_empty() {
        return Err(Error::dim(format!(
            "{} real vs {} pseudo feature sets",
            real.len(),
            pseudo.len()
        )));
    }
    if !(bin_width > 0.0) {
        return Err(Error::contract(format!("bin width must be positive, got {bin_width}")));
    }
    let avg = real.iter().map(Tensor::l1_norm).sum::<f64>() / real.len() as f64;
    if avg == 0.0 || !avg.is_finite() {
        return Err(Error::numeric(format!("average real-feature L1 norm is {avg}")));
    }
    let mut ratios = Vec::with_capacity(real.len());
    for (r, p) in real.iter().zip(pseudo) {
        if r.shape() != p.shape() {
            return Err(Error::dim(format!("feature {:?} vs {:?}", r.shape(), p.shape())));
        }
        let d: f64 = r.data().iter().zip(p.data()).map(|(a, b)| (a - b).abs()).sum();
        ratios.push(d / avg);
    }
    let bins = ratios
        .iter()
        .map(|r| (r / bin_width).floor() as usize + 1)
        .max()
        .unwrap_or(1);
    let mut counts = vec![0usize; bins];
    for r in &ratios {
        counts[(r / bin_width).floor() as usize] += 1;
    }
    let n = ratios.len() as f64;
    Ok(Histogram {
        bin_width,
        percent: counts.iter().map(|&c| 100.0 * c as f64 / n).collect(),
        ratios,
    })
}
