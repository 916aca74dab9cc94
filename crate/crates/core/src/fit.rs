//! Voxelwise least-squares estimation of PD/T1/T2 from a contrast series.
//!
//! The cost is `sum_i (s_i - M_i(pd, t1, t2))^2`. PD enters every supported
//! model linearly, so for fixed (T1, T2) it has the closed form
//! `pd* = <s, f> / <f, f>` with `f` the unit-PD model values. A log-spaced
//! (T1, T2) grid search with that inner solve gives the starting point for a
//! bounded Gauss-Newton refinement of all three parameters.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::models::AcquisitionSpec;
use crate::raster::{BinaryMask, ParamBounds, ParametricMaps, ScalarMap};
use crate::{Error, Result};

/// Log-spaced search axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogGrid {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl LogGrid {
    pub fn points(&self) -> Vec<f64> {
        let (lo, hi) = (self.min.ln(), self.max.ln());
        (0..self.count)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.count - 1) as f64).exp())
            .collect()
    }

    /// Geometric centre of the axis.
    pub fn midpoint(&self) -> f64 {
        (self.min * self.max).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    pub t1_grid: LogGrid,
    pub t2_grid: LogGrid,
    pub pd_max: f64,
    pub refine_iters: usize,
    /// Relative step size below which refinement stops.
    pub tol: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        let bounds = ParamBounds::default();
        Self {
            t1_grid: LogGrid {
                count: 64,
                min: 50.0,
                max: bounds.t1_max,
            },
            t2_grid: LogGrid {
                count: 64,
                min: 10.0,
                max: bounds.t2_max,
            },
            pd_max: bounds.pd_max,
            refine_iters: 20,
            tol: 1e-6,
        }
    }
}

impl FitSettings {
    pub fn validate(&self, bounds: &ParamBounds) -> Result<()> {
        for (name, g, max) in [
            ("t1_grid", &self.t1_grid, bounds.t1_max),
            ("t2_grid", &self.t2_grid, bounds.t2_max),
        ] {
            if g.count < 2 {
                return Err(Error::Fit(format!("{name} needs at least 2 points")));
            }
            if !(g.min > 0.0 && g.min < g.max && g.max <= max) {
                return Err(Error::Fit(format!(
                    "{name} range [{}, {}] must be increasing, positive and within {max}",
                    g.min, g.max
                )));
            }
        }
        if !(self.pd_max > 0.0 && self.pd_max <= bounds.pd_max) {
            return Err(Error::Fit(format!("pd_max {} outside (0, {}]", self.pd_max, bounds.pd_max)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Fit("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Result of a single-voxel fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub pd: f64,
    pub t1: f64,
    pub t2: f64,
    /// Residual sum of squares at the returned parameters.
    pub residual: f64,
    /// False when no spec constrains T1 (or the signal is identically zero);
    /// `t1` is then the grid midpoint.
    pub t1_identified: bool,
    pub t2_identified: bool,
}

fn variant_rank(spec: &AcquisitionSpec) -> u8 {
    match spec {
        AcquisitionSpec::SatRecovery { .. } => 0,
        AcquisitionSpec::SpinEchoDecay { .. } => 1,
        AcquisitionSpec::IrSpgr { .. } => 2,
        AcquisitionSpec::SpinEchoT2w { .. } => 3,
        AcquisitionSpec::T2Flair { .. } => 4,
    }
}

fn spec_key(spec: &AcquisitionSpec) -> (u8, [f64; 5]) {
    let params = match *spec {
        AcquisitionSpec::SatRecovery { tr } => [tr, 0.0, 0.0, 0.0, 0.0],
        AcquisitionSpec::SpinEchoDecay { te } => [te, 0.0, 0.0, 0.0, 0.0],
        AcquisitionSpec::IrSpgr { tr, te, tp, td, flip_deg } => [tr, te, tp, td, flip_deg],
        AcquisitionSpec::SpinEchoT2w { tr, te, flip_deg } => [tr, te, flip_deg, 0.0, 0.0],
        AcquisitionSpec::T2Flair { tr, te, ti, .. } => [tr, te, ti, 0.0, 0.0],
    };
    (variant_rank(spec), params)
}

fn cmp_specs(a: &AcquisitionSpec, b: &AcquisitionSpec) -> Ordering {
    let (ra, pa) = spec_key(a);
    let (rb, pb) = spec_key(b);
    ra.cmp(&rb).then_with(|| {
        pa.iter()
            .zip(&pb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Voxel fitter for a fixed series of acquisitions.
///
/// Signals are reordered into a canonical spec order before any sum is
/// formed, so the result does not depend on the order the series was given in.
#[derive(Debug, Clone)]
pub struct Fitter {
    /// Specs in canonical order.
    specs: Vec<AcquisitionSpec>,
    /// `order[k]` is the caller's index of canonical spec `k`.
    order: Vec<usize>,
    settings: FitSettings,
    t1_points: Vec<f64>,
    t2_points: Vec<f64>,
    t1_identified: bool,
    t2_identified: bool,
    /// Unit-PD model values, one row of `specs.len()` per grid point.
    table: Vec<f64>,
    /// Squared norm of each table row.
    norms: Vec<f64>,
}

impl Fitter {
    pub fn new(specs: &[AcquisitionSpec], settings: FitSettings) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Fit("empty contrast series".into()));
        }
        settings.validate(&ParamBounds::default())?;
        for spec in specs {
            spec.validate()?;
            if !spec.is_pd_linear() {
                return Err(Error::Fit(format!("{} is not linear in PD", spec.name())));
            }
        }
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.sort_by(|&a, &b| cmp_specs(&specs[a], &specs[b]));
        let specs: Vec<AcquisitionSpec> = order.iter().map(|&i| specs[i]).collect();

        let t1_identified = specs.iter().any(|s| s.sensitivity().0);
        let t2_identified = specs.iter().any(|s| s.sensitivity().1);
        let t1_points = if t1_identified {
            settings.t1_grid.points()
        } else {
            vec![settings.t1_grid.midpoint()]
        };
        let t2_points = if t2_identified {
            settings.t2_grid.points()
        } else {
            vec![settings.t2_grid.midpoint()]
        };
        let n = specs.len();
        let mut table = Vec::with_capacity(t1_points.len() * t2_points.len() * n);
        let mut norms = Vec::with_capacity(t1_points.len() * t2_points.len());
        for &t1 in &t1_points {
            for &t2 in &t2_points {
                let row: Vec<f64> = specs.iter().map(|s| s.signal(1.0, t1, t2)).collect();
                norms.push(row.iter().map(|v| v * v).sum());
                table.extend(row);
            }
        }
        if norms.iter().all(|&v| v == 0.0) {
            return Err(Error::Fit("all model values are zero on the search grid".into()));
        }
        Ok(Self {
            specs,
            order,
            settings,
            t1_points,
            t2_points,
            t1_identified,
            t2_identified,
            table,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Caller-ordered signals to canonical order. Equal specs are ordered by
    /// signal value so duplicated acquisitions also sum in a fixed order.
    fn canonical(&self, signals: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.order.iter().map(|&i| signals[i]).collect();
        let mut start = 0;
        while start < out.len() {
            let mut end = start + 1;
            while end < out.len() && cmp_specs(&self.specs[start], &self.specs[end]).is_eq() {
                end += 1;
            }
            out[start..end].sort_by(f64::total_cmp);
            start = end;
        }
        out
    }

    fn rss(&self, s: &[f64], pd: f64, t1: f64, t2: f64) -> f64 {
        self.specs
            .iter()
            .zip(s)
            .map(|(spec, &v)| {
                let r = v - spec.signal(pd, t1, t2);
                r * r
            })
            .sum()
    }

    fn check(&self, signals: &[f64]) -> Result<()> {
        if signals.len() != self.specs.len() {
            return Err(Error::Fit(format!(
                "{} signals for {} acquisitions",
                signals.len(),
                self.specs.len()
            )));
        }
        if let Some(i) = signals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(())
    }

    fn grid_search_canonical(&self, s: &[f64]) -> VoxelFit {
        let n = self.specs.len();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let mut best = (f64::INFINITY, 0.0, 0usize);
        for (g, (row, &ff)) in self.table.chunks_exact(n).zip(&self.norms).enumerate() {
            if ff == 0.0 {
                continue;
            }
            let sf: f64 = row.iter().zip(s).map(|(f, v)| f * v).sum();
            let pd = (sf / ff).clamp(0.0, self.settings.pd_max);
            let rss = ss - 2.0 * pd * sf + pd * pd * ff;
            if rss < best.0 {
                best = (rss, pd, g);
            }
        }
        let (_, pd, g) = best;
        let t1 = self.t1_points[g / self.t2_points.len()];
        let t2 = self.t2_points[g % self.t2_points.len()];
        VoxelFit {
            pd,
            t1,
            t2,
            residual: self.rss(s, pd, t1, t2),
            t1_identified: self.t1_identified,
            t2_identified: self.t2_identified,
        }
    }

    /// Coarse grid-search incumbent only.
    pub fn grid_search(&self, signals: &[f64]) -> Result<VoxelFit> {
        self.check(signals)?;
        Ok(self.grid_search_canonical(&self.canonical(signals)))
    }

    /// Grid search followed by bounded Gauss-Newton refinement.
    pub fn fit(&self, signals: &[f64]) -> Result<VoxelFit> {
        self.check(signals)?;
        let s = self.canonical(signals);
        if s.iter().all(|&v| v == 0.0) {
            return Ok(VoxelFit {
                pd: 0.0,
                t1: self.settings.t1_grid.midpoint(),
                t2: self.settings.t2_grid.midpoint(),
                residual: 0.0,
                t1_identified: false,
                t2_identified: false,
            });
        }
        let start = self.grid_search_canonical(&s);
        Ok(self.refine(&s, start))
    }

    fn refine(&self, s: &[f64], start: VoxelFit) -> VoxelFit {
        let st = &self.settings;
        let lo = Vector3::new(0.0, st.t1_grid.min, st.t2_grid.min);
        let hi = Vector3::new(st.pd_max, st.t1_grid.max, st.t2_grid.max);
        let active = [true, self.t1_identified, self.t2_identified];
        let mut p = Vector3::new(start.pd, start.t1, start.t2);
        let mut rss = start.residual;

        for _ in 0..st.refine_iters {
            // normal equations in relative units per parameter
            let scale = p.map(|v| v.abs().max(1.0));
            let mut jtj = Matrix3::zeros();
            let mut jtr = Vector3::zeros();
            for (spec, &v) in self.specs.iter().zip(s) {
                let (m, d) = spec.signal_and_partials(p[0], p[1], p[2]);
                let j = Vector3::new(d[0] * scale[0], d[1] * scale[1], d[2] * scale[2]);
                jtj += j * j.transpose();
                jtr += j * (v - m);
            }
            for k in 0..3 {
                if !active[k] {
                    jtj.set_row(k, &Vector3::zeros().transpose());
                    jtj.set_column(k, &Vector3::zeros());
                    jtj[(k, k)] = 1.0;
                    jtr[k] = 0.0;
                }
            }
            let trace = jtj.trace().max(f64::MIN_POSITIVE);
            let mut step = None;
            for damping in [0.0, 1e-12, 1e-9, 1e-6, 1e-3] {
                let system = jtj + Matrix3::identity() * (damping * trace);
                if let Some(chol) = system.cholesky() {
                    step = Some(chol.solve(&jtr).component_mul(&scale));
                    break;
                }
            }
            let Some(mut delta) = step else { break };

            let mut accepted = None;
            for _ in 0..12 {
                let trial = (p + delta).zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
                let trial_rss = self.rss(s, trial[0], trial[1], trial[2]);
                if trial_rss < rss {
                    accepted = Some((trial, trial_rss));
                    break;
                }
                delta *= 0.5;
            }
            let Some((next, next_rss)) = accepted else { break };
            let rel = (next - p)
                .zip_map(&p, |d, v| d.abs() / v.abs().max(1e-12))
                .max();
            p = next;
            rss = next_rss;
            if rel < st.tol {
                break;
            }
        }
        VoxelFit {
            pd: p[0],
            t1: p[1],
            t2: p[2],
            residual: rss,
            ..start
        }
    }
}

/// Fits one voxel. See [`Fitter::fit`].
pub fn fit_voxel(signals: &[f64], specs: &[AcquisitionSpec], settings: &FitSettings) -> Result<VoxelFit> {
    if signals.is_empty() {
        return Err(Error::Fit("empty contrast series".into()));
    }
    if signals.len() != specs.len() {
        return Err(Error::Fit(format!(
            "{} signals for {} acquisitions",
            signals.len(),
            specs.len()
        )));
    }
    Fitter::new(specs, *settings)?.fit(signals)
}

/// Voxelwise fit inside `mask`; background voxels are 0 in all channels.
pub fn fit_map(
    contrasts: &[ScalarMap],
    specs: &[AcquisitionSpec],
    mask: &BinaryMask,
    settings: &FitSettings,
) -> Result<ParametricMaps> {
    if contrasts.is_empty() {
        return Err(Error::Fit("empty contrast series".into()));
    }
    if contrasts.len() != specs.len() {
        return Err(Error::Fit(format!(
            "{} contrasts for {} acquisitions",
            contrasts.len(),
            specs.len()
        )));
    }
    let grid = *mask.grid();
    for (i, c) in contrasts.iter().enumerate() {
        c.grid().ensure_same(&grid, &format!("contrast {i} vs mask"))?;
    }
    let fitter = Fitter::new(specs, *settings)?;
    let fits = (0..grid.len())
        .into_par_iter()
        .map(|v| {
            if !mask.values()[v] {
                return Ok([0.0; 3]);
            }
            let signals: Vec<f64> = contrasts.iter().map(|c| c.values()[v]).collect();
            let f = fitter.fit(&signals)?;
            Ok([f.pd, f.t1, f.t2])
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    ParametricMaps::from_channels(
        grid,
        fits.iter().map(|f| f[0]).collect(),
        fits.iter().map(|f| f[1]).collect(),
        fits.iter().map(|f| f[2]).collect(),
    )
}
