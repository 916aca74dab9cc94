//! Image-quality metrics and rank aggregation over ablation models.
//!
//! [`ssim`] is the Gaussian-windowed structural similarity index averaged over
//! windows centred in the mask; [`hfen`] is the relative L2 error between
//! Laplacian-of-Gaussian filtered images. Both pad with half-sample symmetric
//! reflection.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::raster::{BinaryMask, ParamBounds, ParametricMaps, ScalarMap};
use crate::{Error, Result};

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const LOG_RADIUS: usize = 7;
const LOG_SIGMA: f64 = 1.5;

/// Channel names used in reports, in PD/T1/T2 order.
pub const MAP_NAMES: [&str; 3] = ["pd", "t1", "t2"];

/// Default SSIM dynamic range per channel: the parameter bounds.
pub fn default_dynamic_ranges() -> [f64; 3] {
    let b = ParamBounds::default();
    [b.pd_max, b.t1_max, b.t2_max]
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

fn filter_rows(values: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        for x in 0..width {
            out[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * row[reflect(x as isize + k as isize - r, width)])
                .sum();
        }
    }
    out
}

fn filter_cols(values: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * values[reflect(y as isize + k as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

fn separable(values: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    filter_cols(&filter_rows(values, width, height, taps), width, height, taps)
}

fn check_pair(candidate: &ScalarMap, reference: &ScalarMap, mask: &BinaryMask) -> Result<()> {
    candidate.grid().ensure_same(reference.grid(), "candidate vs reference")?;
    candidate.grid().ensure_same(mask.grid(), "candidate vs mask")?;
    if mask.count() == 0 {
        return Err(Error::Metric("mask is empty".into()));
    }
    Ok(())
}

/// Mean local SSIM over windows centred on masked voxels.
pub fn ssim(candidate: &ScalarMap, reference: &ScalarMap, mask: &BinaryMask, dynamic_range: f64) -> Result<f64> {
    check_pair(candidate, reference, mask)?;
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::Metric(format!("dynamic range {dynamic_range} must be > 0")));
    }
    let grid = candidate.grid();
    let (w, h) = (grid.width, grid.height);
    let mut taps = gaussian_taps(SSIM_RADIUS, SSIM_SIGMA);
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let x = candidate.values();
    let y = reference.values();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = separable(x, w, h, &taps);
    let my = separable(y, w, h, &taps);
    let sxx = separable(&xx, w, h, &taps);
    let syy = separable(&yy, w, h, &taps);
    let sxy = separable(&xy, w, h, &taps);

    let c1 = (K1 * dynamic_range).powi(2);
    let c2 = (K2 * dynamic_range).powi(2);
    let voxels = mask.indices();
    let sum: f64 = voxels
        .iter()
        .map(|&v| {
            let (ux, uy) = (mx[v], my[v]);
            let vx = sxx[v] - ux * ux;
            let vy = syy[v] - uy * uy;
            let cov = sxy[v] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(sum / voxels.len() as f64)
}

/// Applies the zero-sum 15x15 Laplacian-of-Gaussian kernel.
pub fn log_filter(map: &ScalarMap) -> Vec<f64> {
    let grid = map.grid();
    let (w, h) = (grid.width, grid.height);
    let g = gaussian_taps(LOG_RADIUS, LOG_SIGMA);
    let norm = g.iter().sum::<f64>().powi(2);
    let s2 = LOG_SIGMA * LOG_SIGMA;
    let a: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, v)| (i as f64 - LOG_RADIUS as f64).powi(2) * v)
        .collect();
    // mean of the unshifted kernel, removed so the kernel sums to zero
    let sum_a: f64 = a.iter().sum();
    let sum_g: f64 = g.iter().sum();
    let size = (2 * LOG_RADIUS + 1) as f64;
    let offset = (2.0 * sum_a * sum_g - 2.0 * s2 * sum_g * sum_g) / (s2 * s2 * norm) / (size * size);
    let ones = vec![1.0; g.len()];

    let values = map.values();
    let ra = filter_rows(values, w, h, &a);
    let rg = filter_rows(values, w, h, &g);
    let gx_a = filter_cols(&ra, w, h, &g);
    let ax_g = filter_cols(&rg, w, h, &a);
    let gg = filter_cols(&rg, w, h, &g);
    let box_sum = separable(values, w, h, &ones);
    let scale = 1.0 / (s2 * s2 * norm);
    (0..values.len())
        .map(|i| scale * (gx_a[i] + ax_g[i] - 2.0 * s2 * gg[i]) - offset * box_sum[i])
        .collect()
}

/// `||LoG(candidate) - LoG(reference)|| / ||LoG(reference)||` over the mask.
pub fn hfen(candidate: &ScalarMap, reference: &ScalarMap, mask: &BinaryMask) -> Result<f64> {
    check_pair(candidate, reference, mask)?;
    let lc = log_filter(candidate);
    let lr = log_filter(reference);
    let (mut num, mut den, mut energy) = (0.0, 0.0, 0.0);
    for v in mask.indices() {
        num += (lc[v] - lr[v]).powi(2);
        den += lr[v] * lr[v];
        energy += reference.values()[v].powi(2);
    }
    // a flat reference leaves only rounding noise after filtering
    if !(den > 1e-24 * energy) {
        return Err(Error::ZeroReferenceEnergy);
    }
    Ok((num / den).sqrt())
}

/// Scores of one map (or synthesized contrast) for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub map: String,
    pub ssim: f64,
    pub hfen: f64,
    pub baseline_ssim: f64,
    pub baseline_hfen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub rows: Vec<ReportRow>,
}

const TSV_COLUMNS: [&str; 6] = ["model", "map", "ssim", "hfen", "baseline_ssim", "baseline_hfen"];

impl MetricReport {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            rows: Vec::new(),
        }
    }

    /// Scores `candidate` and `baseline` maps against `reference` on all three channels.
    pub fn for_maps(
        model: impl Into<String>,
        candidate: &ParametricMaps,
        baseline: &ParametricMaps,
        reference: &ParametricMaps,
        mask: &BinaryMask,
        dynamic_ranges: [f64; 3],
    ) -> Result<Self> {
        let mut report = Self::new(model);
        let (c, b, r) = (candidate.channels(), baseline.channels(), reference.channels());
        for k in 0..3 {
            report.push_scored(MAP_NAMES[k], c[k], b[k], r[k], mask, dynamic_ranges[k])?;
        }
        Ok(report)
    }

    pub fn push_scored(
        &mut self,
        map: &str,
        candidate: &ScalarMap,
        baseline: &ScalarMap,
        reference: &ScalarMap,
        mask: &BinaryMask,
        dynamic_range: f64,
    ) -> Result<()> {
        self.rows.push(ReportRow {
            map: map.to_string(),
            ssim: ssim(candidate, reference, mask, dynamic_range)?,
            hfen: hfen(candidate, reference, mask)?,
            baseline_ssim: ssim(baseline, reference, mask, dynamic_range)?,
            baseline_hfen: hfen(baseline, reference, mask)?,
        });
        Ok(())
    }

    pub fn row(&self, map: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.map == map)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = TSV_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.model, r.map, r.ssim, r.hfen, r.baseline_ssim, r.baseline_hfen
            );
        }
        out
    }

    /// Parses a report table; every data row must name the same model.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Schema("empty report".into()))?;
        if header.split('\t').collect::<Vec<_>>() != TSV_COLUMNS {
            return Err(Error::Schema(format!("unexpected header {header:?}")));
        }
        let mut model = None;
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != TSV_COLUMNS.len() {
                return Err(Error::Schema(format!("row {} has {} cells", n + 1, cells.len())));
            }
            match &model {
                None => model = Some(cells[0].to_string()),
                Some(m) if m != cells[0] => {
                    return Err(Error::Schema(format!("row {} names model {} but expected {m}", n + 1, cells[0])))
                }
                _ => {}
            }
            let num = |i: usize| -> Result<f64> {
                cells[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("row {}: {} = {:?} is not a number", n + 1, TSV_COLUMNS[i], cells[i])))
            };
            rows.push(ReportRow {
                map: cells[1].to_string(),
                ssim: num(2)?,
                hfen: num(3)?,
                baseline_ssim: num(4)?,
                baseline_hfen: num(5)?,
            });
        }
        let model = model.ok_or_else(|| Error::Schema("report has no rows".into()))?;
        Ok(Self { model, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedModel {
    pub model: String,
    pub total: usize,
}

/// Competition ranks (1 = best, ties share the lowest rank).
fn min_ranks(values: &[f64], higher_is_better: bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| {
            1 + values
                .iter()
                .filter(|&&o| if higher_is_better { o > v } else { o < v })
                .count()
        })
        .collect()
}

/// Ranks models on SSIM and HFEN of each of the PD/T1/T2 maps and returns
/// them sorted by rank sum, lowest first. Rows for other maps are ignored.
pub fn rank_models(reports: &[MetricReport]) -> Result<Vec<RankedModel>> {
    if reports.len() < 2 {
        return Err(Error::Metric("ranking needs at least two models".into()));
    }
    let mut seen = BTreeSet::new();
    for r in reports {
        if !seen.insert(r.model.as_str()) {
            return Err(Error::Metric(format!("model {} appears twice", r.model)));
        }
    }
    let mut totals = vec![0usize; reports.len()];
    for map in MAP_NAMES {
        let mut cells = Vec::with_capacity(reports.len());
        for r in reports {
            let row = r
                .row(map)
                .ok_or_else(|| Error::Metric(format!("model {} has no {map} row", r.model)))?;
            cells.push((row.ssim, row.hfen));
        }
        let ssims: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let hfens: Vec<f64> = cells.iter().map(|c| c.1).collect();
        for (t, (a, b)) in totals
            .iter_mut()
            .zip(min_ranks(&ssims, true).into_iter().zip(min_ranks(&hfens, false)))
        {
            *t += a + b;
        }
    }
    let mut ranked: Vec<RankedModel> = reports
        .iter()
        .zip(totals)
        .map(|(r, total)| RankedModel {
            model: r.model.clone(),
            total,
        })
        .collect();
    ranked.sort_by_key(|r| r.total);
    Ok(ranked)
}
