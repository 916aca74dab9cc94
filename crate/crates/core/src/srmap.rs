//! MAP super-resolution of parameter maps.
//!
//! The objective for candidate HR maps `q` is
//!
//! ```text
//! L(q) = sum_i mean_mask( A_i(M_i(q)) - C_i )^2 / sigma^2
//!      + alpha * sum_j Var_mask( z(W_j) - z(G_j(q)) )
//! ```
//!
//! where `C_i` are the observed LR contrasts, `A_i` the noiseless
//! acquisition, `W_j` the HR guide images, `M_i`/`G_j` the forward models and
//! `z` a z-score over the mask. By default `A_i` is the magnitude of the
//! masked Fourier reconstruction, which is exactly how [`crate::degrade::phi`]
//! forms the observations; [`DataModel::Lowpass`] swaps in the linear
//! real-valued low-pass projection instead.
//!
//! Both terms are sums of squares, so [`solve_sr`] defaults to a projected
//! Levenberg-Marquardt iteration with matrix-free conjugate gradients in
//! per-channel scaled variables. Projected gradient descent with an Armijo
//! line search is available as [`SolverMethod::ProjectedGradient`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::degrade::{make_center_mask, DegradeSpec, Lowpass, MaskedFourier};
use crate::models::{AcquisitionSpec, RELAXATION_FLOOR_MS};
use crate::raster::{BinaryMask, ParamBounds, ParametricMaps, ScalarMap};
use crate::{Error, Result};

/// An observed LR contrast together with the model that predicts it.
#[derive(Debug, Clone)]
pub struct LrContrast {
    pub image: ScalarMap,
    pub acquisition: AcquisitionSpec,
    pub degrade: DegradeSpec,
}

/// An HR weighted image used as structural guidance.
#[derive(Debug, Clone)]
pub struct Guide {
    pub name: String,
    pub image: ScalarMap,
    pub acquisition: AcquisitionSpec,
}

/// Which of the two standard HR guides take part in a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideSubset {
    None,
    T1w,
    T2w,
    Both,
}

impl GuideSubset {
    /// Guide names included, in canonical order.
    pub fn names(self) -> &'static [&'static str] {
        match self {
            GuideSubset::None => &[],
            GuideSubset::T1w => &["t1w"],
            GuideSubset::T2w => &["t2w"],
            GuideSubset::Both => &["t1w", "t2w"],
        }
    }
}

impl fmt::Display for GuideSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuideSubset::None => "none",
            GuideSubset::T1w => "t1w",
            GuideSubset::T2w => "t2w",
            GuideSubset::Both => "both",
        })
    }
}

impl FromStr for GuideSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuideSubset::None),
            "t1w" => Ok(GuideSubset::T1w),
            "t2w" => Ok(GuideSubset::T2w),
            "both" => Ok(GuideSubset::Both),
            other => Err(Error::config(
                "guides",
                format!("unknown guide subset {other:?} (expected none, t1w, t2w or both)"),
            )),
        }
    }
}

/// How predicted HR contrasts are mapped to the LR observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataModel {
    /// `|IDFT(mask * DFT(x))|`, the noiseless acquisition.
    #[default]
    Magnitude,
    /// Real part of the Hermitian-symmetric low-pass projection.
    Lowpass,
}

impl fmt::Display for DataModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataModel::Magnitude => "magnitude",
            DataModel::Lowpass => "lowpass",
        })
    }
}

impl FromStr for DataModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(DataModel::Magnitude),
            "lowpass" => Ok(DataModel::Lowpass),
            other => Err(Error::config("data_model", format!("unknown data model {other:?}"))),
        }
    }
}

/// Box constraints of the solver, per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverBounds {
    pub upper: ParamBounds,
    /// Lower bound for T1 and T2 (ms). PD is bounded below by 0.
    pub relaxation_floor: f64,
}

impl Default for SolverBounds {
    fn default() -> Self {
        Self {
            upper: ParamBounds::default(),
            relaxation_floor: 1.0,
        }
    }
}

impl SolverBounds {
    fn lower(&self) -> [f64; 3] {
        [0.0, self.relaxation_floor, self.relaxation_floor]
    }

    fn upper(&self) -> [f64; 3] {
        [self.upper.pd_max, self.upper.t1_max, self.upper.t2_max]
    }
}

#[derive(Debug, Clone)]
enum Operator {
    Magnitude(MaskedFourier),
    Lowpass(Lowpass),
}

impl Operator {
    fn new(model: DataModel, spec: &DegradeSpec, grid: &crate::raster::ImageGrid) -> Result<Self> {
        Ok(match model {
            DataModel::Magnitude => Operator::Magnitude(MaskedFourier::new(grid, spec)?),
            DataModel::Lowpass => Operator::Lowpass(Lowpass::new(grid, spec)?),
        })
    }

    /// Prediction on the full grid, plus the unit phase of the complex
    /// reconstruction for the magnitude model.
    fn predict(&self, synth: &[f64]) -> (Vec<f64>, Option<Vec<Complex64>>) {
        match self {
            Operator::Lowpass(op) => (op.apply(synth), None),
            Operator::Magnitude(op) => {
                let z = op.forward(synth);
                let mag: Vec<f64> = z.iter().map(|c| c.norm()).collect();
                let phase = z
                    .iter()
                    .zip(&mag)
                    .map(|(c, &m)| if m > 0.0 { c / m } else { Complex64::new(0.0, 0.0) })
                    .collect();
                (mag, Some(phase))
            }
        }
    }

    fn jvp(&self, ds: &[f64], phase: Option<&[Complex64]>) -> Vec<f64> {
        match (self, phase) {
            (Operator::Lowpass(op), _) => op.apply(ds),
            (Operator::Magnitude(op), Some(u)) => op
                .forward(ds)
                .iter()
                .zip(u)
                .map(|(z, u)| (u.conj() * z).re)
                .collect(),
            (Operator::Magnitude(_), None) => unreachable!("magnitude model always records a phase"),
        }
    }

    fn vjp(&self, w: &[f64], phase: Option<&[Complex64]>) -> Vec<f64> {
        match (self, phase) {
            (Operator::Lowpass(op), _) => op.apply(w),
            (Operator::Magnitude(op), Some(u)) => op.adjoint(w.iter().zip(u).map(|(w, u)| u * *w).collect()),
            (Operator::Magnitude(_), None) => unreachable!("magnitude model always records a phase"),
        }
    }
}

/// One MAP solve instance.
#[derive(Debug, Clone)]
pub struct SrProblem {
    q_init: ParametricMaps,
    lr_contrasts: Vec<LrContrast>,
    guides: Vec<Guide>,
    mask: BinaryMask,
    alpha: f64,
    sigma: f64,
    bounds: SolverBounds,
    data_model: DataModel,
    // derived
    voxels: Vec<usize>,
    operators: Vec<Operator>,
    /// Fraction of k-space kept by each contrast's mask.
    kept: Vec<f64>,
    /// z-scored guides over the mask, in `voxels` order, held at single precision.
    normalized_guides: Vec<Vec<f64>>,
}

/// Guide normalisation: zero mean, unit population variance over the mask,
/// rounded to f32 so any `a * W + b` rescaling (a > 0) of the input yields the
/// same normalised image.
fn normalize_guide(values: &[f64], voxels: &[usize]) -> Option<Vec<f64>> {
    let n = voxels.len() as f64;
    let mean = voxels.iter().map(|&v| values[v]).sum::<f64>() / n;
    let var = voxels.iter().map(|&v| (values[v] - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs() {
        return None;
    }
    Some(
        voxels
            .iter()
            .map(|&v| ((values[v] - mean) / sd) as f32 as f64)
            .collect(),
    )
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidProblem(format!("alpha={alpha} must be >= 0")));
    }
    Ok(())
}

impl SrProblem {
    pub fn new(
        q_init: ParametricMaps,
        lr_contrasts: Vec<LrContrast>,
        guides: Vec<Guide>,
        mask: BinaryMask,
        alpha: f64,
        sigma: f64,
    ) -> Result<Self> {
        let grid = *mask.grid();
        q_init.grid().ensure_same(&grid, "q_init vs mask")?;
        check_alpha(alpha)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidProblem(format!("sigma={sigma} must be > 0")));
        }
        let voxels = mask.indices();
        if voxels.is_empty() {
            return Err(Error::InvalidProblem("mask is empty".into()));
        }
        let mut kept = Vec::with_capacity(lr_contrasts.len());
        for (i, c) in lr_contrasts.iter().enumerate() {
            c.image.grid().ensure_same(&grid, &format!("LR contrast {i}"))?;
            c.acquisition.validate()?;
            c.degrade.validate()?;
            kept.push(make_center_mask(&grid, &c.degrade).count() as f64 / grid.len() as f64);
        }
        let mut normalized_guides = Vec::with_capacity(guides.len());
        for (index, g) in guides.iter().enumerate() {
            g.image.grid().ensure_same(&grid, &format!("guide {index}"))?;
            g.acquisition.validate()?;
            normalized_guides.push(
                normalize_guide(g.image.values(), &voxels).ok_or(Error::ZeroVarianceGuide { index })?,
            );
        }
        let mut problem = Self {
            q_init,
            lr_contrasts,
            guides,
            mask,
            alpha,
            sigma,
            bounds: SolverBounds::default(),
            data_model: DataModel::default(),
            voxels,
            operators: Vec::new(),
            kept,
            normalized_guides,
        };
        problem.build_operators()?;
        Ok(problem)
    }

    fn build_operators(&mut self) -> Result<()> {
        let grid = *self.mask.grid();
        self.operators = self
            .lr_contrasts
            .iter()
            .map(|c| Operator::new(self.data_model, &c.degrade, &grid))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn with_bounds(mut self, bounds: SolverBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(self)
    }

    pub fn with_data_model(mut self, model: DataModel) -> Result<Self> {
        self.data_model = model;
        self.build_operators()?;
        Ok(self)
    }

    pub fn q_init(&self) -> &ParametricMaps {
        &self.q_init
    }

    pub fn lr_contrasts(&self) -> &[LrContrast] {
        &self.lr_contrasts
    }

    pub fn guides(&self) -> &[Guide] {
        &self.guides
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn bounds(&self) -> &SolverBounds {
        &self.bounds
    }

    pub fn data_model(&self) -> DataModel {
        self.data_model
    }

    fn check_maps(&self, q: &ParametricMaps) -> Result<()> {
        q.grid().ensure_same(self.mask.grid(), "maps vs problem")
    }

    /// Per-contrast RMS over the mask of the predicted minus observed LR contrast.
    pub fn contrast_rms(&self, q: &ParametricMaps) -> Result<Vec<f64>> {
        self.check_maps(q)?;
        let eval = self.evaluate(&Channels::from_maps(q))?;
        let n = self.voxels.len() as f64;
        Ok(eval
            .contrasts
            .iter()
            .map(|c| (c.residual.iter().map(|r| r * r).sum::<f64>() / n).sqrt())
            .collect())
    }

    /// Predicted LR contrasts of `q`, zero outside the mask.
    pub fn predicted_contrasts(&self, q: &ParametricMaps) -> Result<Vec<ScalarMap>> {
        self.check_maps(q)?;
        let eval = self.evaluate(&Channels::from_maps(q))?;
        eval.contrasts
            .iter()
            .zip(&self.lr_contrasts)
            .map(|(c, lr)| {
                let mut values = vec![0.0; self.mask.grid().len()];
                for (&v, r) in self.voxels.iter().zip(&c.residual) {
                    values[v] = r + lr.image.values()[v];
                }
                lr.image.with_values(values)
            })
            .collect()
    }
}

/// Full-grid channel vectors of a candidate.
#[derive(Clone, Debug)]
struct Channels {
    pd: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl Channels {
    fn from_maps(q: &ParametricMaps) -> Self {
        Self {
            pd: q.pd.values().to_vec(),
            t1: q.t1.values().to_vec(),
            t2: q.t2.values().to_vec(),
        }
    }

    fn to_maps(&self, template: &ParametricMaps) -> Result<ParametricMaps> {
        ParametricMaps::new(
            template.pd.with_values(self.pd.clone())?,
            template.t1.with_values(self.t1.clone())?,
            template.t2.with_values(self.t2.clone())?,
        )
    }
}

struct ContrastEval {
    /// Predicted minus observed, in mask order.
    residual: Vec<f64>,
    phase: Option<Vec<Complex64>>,
    partials: Vec<[f64; 3]>,
}

struct GuideEval {
    z: Vec<f64>,
    sd: f64,
    /// Demeaned `z(W) - z(G(q))`.
    rho: Vec<f64>,
    partials: Vec<[f64; 3]>,
    degenerate: bool,
}

/// Objective terms and the quantities needed to linearise them at one point.
struct Evaluation {
    contrasts: Vec<ContrastEval>,
    guides: Vec<GuideEval>,
    data: f64,
    guide: f64,
    total: f64,
}

fn model_on_mask(spec: &AcquisitionSpec, ch: &Channels, voxels: &[usize]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let mut values = Vec::with_capacity(voxels.len());
    let mut partials = Vec::with_capacity(voxels.len());
    for &v in voxels {
        let (t1, t2) = (ch.t1[v], ch.t2[v]);
        for t in [t1, t2] {
            if !(t >= RELAXATION_FLOOR_MS) {
                return Err(Error::RelaxationFloor {
                    index: v,
                    value: t,
                    floor: RELAXATION_FLOOR_MS,
                });
            }
        }
        let (s, d) = spec.signal_and_partials(ch.pd[v], t1, t2);
        values.push(s);
        partials.push(d);
    }
    Ok((values, partials))
}

impl SrProblem {
    fn n(&self) -> usize {
        self.voxels.len()
    }

    fn scatter(&self, values: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mask.grid().len()];
        for (&v, &s) in self.voxels.iter().zip(values) {
            full[v] = s;
        }
        full
    }

    fn eval_contrast(&self, ch: &Channels, c: &LrContrast, op: &Operator) -> Result<ContrastEval> {
        let (values, partials) = model_on_mask(&c.acquisition, ch, &self.voxels)?;
        let (predicted, phase) = op.predict(&self.scatter(&values));
        let observed = c.image.values();
        let residual = self.voxels.iter().map(|&v| predicted[v] - observed[v]).collect();
        Ok(ContrastEval {
            residual,
            phase,
            partials,
        })
    }

    fn eval_guide(&self, ch: &Channels, g: &Guide, target: &[f64]) -> Result<GuideEval> {
        let n = self.n() as f64;
        let (values, partials) = model_on_mask(&g.acquisition, ch, &self.voxels)?;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        // a constant synthesized guide has no defined z-score; treat it as zero
        let degenerate = !(sd > 0.0) || sd <= 1e-12 * mean.abs();
        let z: Vec<f64> = if degenerate {
            vec![0.0; values.len()]
        } else {
            values.iter().map(|w| (w - mean) / sd).collect()
        };
        let diff: Vec<f64> = target.iter().zip(&z).map(|(a, b)| a - b).collect();
        let diff_mean = diff.iter().sum::<f64>() / n;
        Ok(GuideEval {
            z,
            sd,
            rho: diff.iter().map(|d| d - diff_mean).collect(),
            partials,
            degenerate,
        })
    }

    fn evaluate(&self, ch: &Channels) -> Result<Evaluation> {
        let contrasts = self
            .lr_contrasts
            .par_iter()
            .zip(&self.operators)
            .map(|(c, op)| self.eval_contrast(ch, c, op))
            .collect::<Result<Vec<_>>>()?;
        let guides = self
            .guides
            .par_iter()
            .zip(&self.normalized_guides)
            .map(|(g, target)| self.eval_guide(ch, g, target))
            .collect::<Result<Vec<_>>>()?;
        let n = self.n() as f64;
        let sigma_sq = self.sigma * self.sigma;
        let data: f64 = contrasts
            .iter()
            .map(|c| c.residual.iter().map(|r| r * r).sum::<f64>() / n / sigma_sq)
            .sum();
        let guide: f64 = guides
            .iter()
            .map(|g| g.rho.iter().map(|r| r * r).sum::<f64>() / n)
            .sum();
        let total = if self.alpha == 0.0 { data } else { data + self.alpha * guide };
        Ok(Evaluation {
            contrasts,
            guides,
            data,
            guide,
            total,
        })
    }

    fn data_weight(&self) -> f64 {
        1.0 / (self.sigma * (self.n() as f64).sqrt())
    }

    fn guide_weight(&self) -> f64 {
        (self.alpha / self.n() as f64).sqrt()
    }

    fn guides_active(&self) -> bool {
        self.alpha != 0.0 && !self.guides.is_empty()
    }
}

/// `(A w)` where `A = d z / d W` is the symmetric Jacobian of the z-score.
fn zscore_jacobian(g: &GuideEval, w: &[f64]) -> Vec<f64> {
    if g.degenerate {
        return vec![0.0; w.len()];
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let proj = w.iter().zip(&g.z).map(|(a, b)| a * b).sum::<f64>() / n;
    w.iter()
        .zip(&g.z)
        .map(|(wv, zv)| (wv - mean - zv * proj) / g.sd)
        .collect()
}

/// Least-squares view of the objective: `total = |R|^2` with residual blocks
/// per contrast and per guide, linearised at one evaluation, in variables
/// `u_c = q_c / scale_c` laid out channel-major over masked voxels.
struct Linearization<'a> {
    problem: &'a SrProblem,
    eval: &'a Evaluation,
    scales: [f64; 3],
}

impl Linearization<'_> {
    fn residuals(&self) -> Vec<Vec<f64>> {
        let p = self.problem;
        let mut out: Vec<Vec<f64>> = self
            .eval
            .contrasts
            .iter()
            .map(|c| c.residual.iter().map(|r| r * p.data_weight()).collect())
            .collect();
        if p.guides_active() {
            out.extend(
                self.eval
                    .guides
                    .iter()
                    .map(|g| g.rho.iter().map(|r| r * p.guide_weight()).collect()),
            );
        }
        out
    }

    fn directional(&self, partials: &[[f64; 3]], v: &[f64]) -> Vec<f64> {
        let n = partials.len();
        partials
            .iter()
            .enumerate()
            .map(|(k, d)| (0..3).map(|c| d[c] * self.scales[c] * v[c * n + k]).sum())
            .collect()
    }

    fn accumulate(&self, partials: &[[f64; 3]], upstream: &[f64], out: &mut [f64]) {
        let n = partials.len();
        for (k, (d, u)) in partials.iter().zip(upstream).enumerate() {
            for c in 0..3 {
                out[c * n + k] += d[c] * self.scales[c] * u;
            }
        }
    }

    fn jvp(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let p = self.problem;
        let mut out: Vec<Vec<f64>> = self
            .eval
            .contrasts
            .par_iter()
            .zip(&p.operators)
            .map(|(c, op)| {
                let ds = p.scatter(&self.directional(&c.partials, v));
                let full = op.jvp(&ds, c.phase.as_deref());
                p.voxels.iter().map(|&vx| full[vx] * p.data_weight()).collect()
            })
            .collect();
        if p.guides_active() {
            out.extend(self.eval.guides.iter().map(|g| {
                zscore_jacobian(g, &self.directional(&g.partials, v))
                    .into_iter()
                    .map(|x| -x * p.guide_weight())
                    .collect::<Vec<f64>>()
            }));
        }
        out
    }

    fn vjp(&self, w: &[Vec<f64>]) -> Vec<f64> {
        let p = self.problem;
        let n = p.n();
        let pieces: Vec<Vec<f64>> = self
            .eval
            .contrasts
            .par_iter()
            .zip(&p.operators)
            .zip(w)
            .map(|((c, op), wi)| {
                let scaled: Vec<f64> = wi.iter().map(|x| x * p.data_weight()).collect();
                let full = op.vjp(&p.scatter(&scaled), c.phase.as_deref());
                let upstream: Vec<f64> = p.voxels.iter().map(|&vx| full[vx]).collect();
                let mut out = vec![0.0; 3 * n];
                self.accumulate(&c.partials, &upstream, &mut out);
                out
            })
            .collect();
        let mut out = vec![0.0; 3 * n];
        for piece in &pieces {
            for (o, x) in out.iter_mut().zip(piece) {
                *o += x;
            }
        }
        if p.guides_active() {
            for (g, wj) in self.eval.guides.iter().zip(&w[p.lr_contrasts.len()..]) {
                let upstream: Vec<f64> = zscore_jacobian(g, wj)
                    .into_iter()
                    .map(|x| -x * p.guide_weight())
                    .collect();
                self.accumulate(&g.partials, &upstream, &mut out);
            }
        }
        out
    }

    /// Gradient of the total objective in scaled variables.
    fn gradient(&self) -> Vec<f64> {
        self.vjp(&self.residuals()).into_iter().map(|x| 2.0 * x).collect()
    }

    /// Per-voxel 3x3 blocks approximating the diagonal of `J^T J`.
    fn block_diagonal(&self) -> Vec<Matrix3<f64>> {
        let p = self.problem;
        let s = Vector3::new(self.scales[0], self.scales[1], self.scales[2]);
        let mut blocks = vec![Matrix3::zeros(); p.n()];
        let dw = p.data_weight().powi(2);
        for (c, kept) in self.eval.contrasts.iter().zip(&p.kept) {
            for (b, d) in blocks.iter_mut().zip(&c.partials) {
                let g = Vector3::new(d[0], d[1], d[2]).component_mul(&s);
                *b += g * g.transpose() * (dw * kept);
            }
        }
        if p.guides_active() {
            let gw = p.guide_weight().powi(2);
            for g in self.eval.guides.iter().filter(|g| !g.degenerate) {
                for (b, d) in blocks.iter_mut().zip(&g.partials) {
                    let h = Vector3::new(d[0], d[1], d[2]).component_mul(&s) / g.sd;
                    *b += h * h.transpose() * gw;
                }
            }
        }
        blocks
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(J^T J + lambda D) x = rhs` over the `free` variables by
/// block-Jacobi preconditioned CG; fixed variables stay at zero.
fn damped_cg(
    lin: &Linearization<'_>,
    blocks: &[Matrix3<f64>],
    free: &[bool],
    lambda: f64,
    rhs: &[f64],
    max_iters: usize,
    rel_tol: f64,
) -> Vec<f64> {
    let n = blocks.len();
    let mean_diag = blocks.iter().map(|b| b.trace()).sum::<f64>() / (3 * n) as f64;
    let floor = 1e-9 * mean_diag.max(f64::MIN_POSITIVE);
    let damping: Vec<[f64; 3]> = blocks
        .iter()
        .map(|b| [0, 1, 2].map(|c| lambda * (b[(c, c)] + floor)))
        .collect();
    let inverses: Vec<Matrix3<f64>> = blocks
        .iter()
        .zip(&damping)
        .enumerate()
        .map(|(k, (b, d))| {
            let mut m = b + Matrix3::from_diagonal(&Vector3::new(d[0], d[1], d[2]));
            for c in (0..3).filter(|&c| !free[c * n + k]) {
                m.row_mut(c).fill(0.0);
                m.column_mut(c).fill(0.0);
                m[(c, c)] = 1.0;
            }
            let mut inv = m
                .try_inverse()
                .unwrap_or_else(|| Matrix3::from_diagonal(&Vector3::new(1.0 / d[0], 1.0 / d[1], 1.0 / d[2])));
            for c in (0..3).filter(|&c| !free[c * n + k]) {
                inv.row_mut(c).fill(0.0);
                inv.column_mut(c).fill(0.0);
            }
            inv
        })
        .collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = lin.vjp(&lin.jvp(v));
        for k in 0..n {
            for c in 0..3 {
                let i = c * n + k;
                out[i] = if free[i] { out[i] + damping[k][c] * v[i] } else { 0.0 };
            }
        }
        out
    };
    let precondition = |r: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; 3 * n];
        for (k, m) in inverses.iter().enumerate() {
            let y = m * Vector3::new(r[k], r[n + k], r[2 * n + k]);
            for c in 0..3 {
                out[c * n + k] = y[c];
            }
        }
        out
    };

    let mut x = vec![0.0; 3 * n];
    let mut r: Vec<f64> = rhs.iter().zip(free).map(|(v, f)| if *f { *v } else { 0.0 }).collect();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let target = rel_tol * dot(&r, &r).sqrt();
    for _ in 0..max_iters {
        if dot(&r, &r).sqrt() <= target {
            break;
        }
        let hp = apply(&p);
        let curvature = dot(&p, &hp);
        if !(curvature > 0.0) {
            break;
        }
        let step = rz / curvature;
        for i in 0..3 * n {
            x[i] += step * p[i];
            r[i] -= step * hp[i];
        }
        z = precondition(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..3 * n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// `sum_i MSE(C_i, A_i(M_i(q))) / sigma^2` over the mask.
pub fn data_loss(q: &ParametricMaps, problem: &SrProblem) -> Result<f64> {
    problem.check_maps(q)?;
    Ok(problem.evaluate(&Channels::from_maps(q))?.data)
}

/// `sum_j Var(z(W_j) - z(G_j(q)))` over the mask.
pub fn guide_loss(q: &ParametricMaps, problem: &SrProblem) -> Result<f64> {
    problem.check_maps(q)?;
    Ok(problem.evaluate(&Channels::from_maps(q))?.guide)
}

/// `data_loss + alpha * guide_loss`.
pub fn total_objective(q: &ParametricMaps, problem: &SrProblem) -> Result<f64> {
    problem.check_maps(q)?;
    Ok(problem.evaluate(&Channels::from_maps(q))?.total)
}

/// Gradient of the total objective with respect to each channel; zero
/// outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub d_pd: ScalarMap,
    pub d_t1: ScalarMap,
    pub d_t2: ScalarMap,
}

pub fn objective_gradient(q: &ParametricMaps, problem: &SrProblem) -> Result<ObjectiveGradient> {
    problem.check_maps(q)?;
    let eval = problem.evaluate(&Channels::from_maps(q))?;
    let lin = Linearization {
        problem,
        eval: &eval,
        scales: [1.0; 3],
    };
    let g = lin.gradient();
    let n = problem.n();
    let grid = *q.grid();
    let channel = |c: usize, label: &str| {
        let mut full = vec![0.0; grid.len()];
        for (k, &v) in problem.voxels.iter().enumerate() {
            full[v] = g[c * n + k];
        }
        ScalarMap::new(grid, full, label, "")
    };
    Ok(ObjectiveGradient {
        d_pd: channel(0, "dL/dPD")?,
        d_t1: channel(1, "dL/dT1")?,
        d_t2: channel(2, "dL/dT2")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    /// Damped Gauss-Newton steps solved by conjugate gradients; a step is
    /// kept only if it lowers the objective, otherwise the damping grows.
    #[default]
    LevenbergMarquardt,
    /// Projected gradient steps with Barzilai-Borwein lengths and Armijo
    /// backtracking.
    ProjectedGradient,
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMethod::LevenbergMarquardt => "levenberg_marquardt",
            SolverMethod::ProjectedGradient => "projected_gradient",
        })
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "levenberg_marquardt" | "lm" => Ok(SolverMethod::LevenbergMarquardt),
            "projected_gradient" | "pgd" => Ok(SolverMethod::ProjectedGradient),
            other => Err(Error::config("method", format!("unknown solver method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub method: SolverMethod,
    pub max_iters: usize,
    /// Length of the first projected-gradient trial step, as a fraction of
    /// the channel scales.
    pub step: f64,
    /// Relative objective decrease below which an iteration counts as stalled.
    pub tol: f64,
    /// Consecutive stalled iterations that end the solve.
    pub patience: usize,
    /// Per-channel divisors for PD/T1/T2; `None` uses the masked means of
    /// the initial maps.
    pub param_scales: Option<[f64; 3]>,
    pub armijo: f64,
    /// Step halvings (gradient) or damping increases (LM) per iteration.
    pub max_backtracks: usize,
    /// Initial LM damping relative to the curvature diagonal.
    pub damping: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            method: SolverMethod::default(),
            max_iters: 2000,
            step: 1e-2,
            tol: 1e-7,
            patience: 3,
            param_scales: None,
            armijo: 1e-4,
            max_backtracks: 40,
            damping: 1.0,
            cg_iters: 60,
            cg_tol: 1e-3,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::InvalidProblem(format!("{field} {reason}")));
        if self.max_iters < 1 {
            return bad("max_iters", "must be >= 1");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step", "must be > 0");
        }
        if !(self.tol >= 0.0) {
            return bad("tol", "must be >= 0");
        }
        if let Some(s) = self.param_scales {
            if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("param_scales", "must be positive");
            }
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("armijo", "must lie in (0, 1)");
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return bad("damping", "must be > 0");
        }
        if self.cg_iters < 1 {
            return bad("cg_iters", "must be >= 1");
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return bad("cg_tol", "must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Relative decrease stayed below `tol` for `patience` iterations, or the
    /// projected step vanished.
    Converged,
    MaxIterations,
    /// No decreasing step was found; the best iterate so far is returned.
    LineSearchFailed,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::LineSearchFailed => "line_search_failed",
        })
    }
}

/// Objective components at one iterate. Iteration 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub data_loss: f64,
    pub guide_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub maps: ParametricMaps,
    pub status: SolveStatus,
    pub history: Vec<IterationRecord>,
}

impl SolveOutcome {
    /// Tab-separated convergence log with a header line.
    pub fn history_tsv(&self) -> String {
        let mut out = String::from("iter\tdata_loss\tguide_loss\ttotal\n");
        for r in &self.history {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.iter, r.data_loss, r.guide_loss, r.total));
        }
        out
    }
}

fn masked_mean(map: &ScalarMap, voxels: &[usize]) -> f64 {
    voxels.iter().map(|&v| map.values()[v]).sum::<f64>() / voxels.len() as f64
}

/// Iterate state shared by both methods.
struct Iterate {
    u: Vec<f64>,
    ch: Channels,
    eval: Evaluation,
}

struct Space<'a> {
    problem: &'a SrProblem,
    scales: [f64; 3],
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Space<'_> {
    fn n(&self) -> usize {
        self.problem.n()
    }

    fn to_scaled(&self, ch: &Channels) -> Vec<f64> {
        let mut u = Vec::with_capacity(3 * self.n());
        for (c, values) in [&ch.pd, &ch.t1, &ch.t2].into_iter().enumerate() {
            u.extend(self.problem.voxels.iter().map(|&v| values[v] / self.scales[c]));
        }
        u
    }

    fn unscale(&self, u: &[f64], template: &Channels) -> Channels {
        let n = self.n();
        let mut ch = template.clone();
        for (c, values) in [&mut ch.pd, &mut ch.t1, &mut ch.t2].into_iter().enumerate() {
            for (k, &v) in self.problem.voxels.iter().enumerate() {
                values[v] = u[c * n + k] * self.scales[c];
            }
        }
        ch
    }

    fn project(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect()
    }

    fn lin<'e>(&'e self, eval: &'e Evaluation) -> Linearization<'e> {
        Linearization {
            problem: self.problem,
            eval,
            scales: self.scales,
        }
    }

    fn try_point(&self, u: Vec<f64>, template: &Channels) -> Result<Iterate> {
        let ch = self.unscale(&u, template);
        let eval = self.problem.evaluate(&ch)?;
        Ok(Iterate { u, ch, eval })
    }
}

fn record(iter: usize, eval: &Evaluation) -> IterationRecord {
    IterationRecord {
        iter,
        data_loss: eval.data,
        guide_loss: eval.guide,
        total: eval.total,
    }
}

/// Minimises the total objective starting from `problem.q_init()`.
pub fn solve_sr(problem: &SrProblem, settings: &SolverSettings) -> Result<SolveOutcome> {
    settings.validate()?;
    let q0 = problem.q_init();
    let voxels = &problem.voxels;
    let lower = problem.bounds.lower();
    let upper = problem.bounds.upper();
    for (c, map) in q0.channels().iter().enumerate() {
        if let Some(&v) = voxels
            .iter()
            .find(|&&v| !(map.values()[v] >= lower[c] && map.values()[v] <= upper[c]))
        {
            return Err(Error::InvalidProblem(format!(
                "initial {} value {} at voxel {v} outside [{}, {}]",
                map.label,
                map.values()[v],
                lower[c],
                upper[c]
            )));
        }
    }
    let scales = match settings.param_scales {
        Some(s) => s,
        None => {
            let s = [
                masked_mean(&q0.pd, voxels),
                masked_mean(&q0.t1, voxels),
                masked_mean(&q0.t2, voxels),
            ];
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidProblem(format!("channel means {s:?} cannot serve as scales")));
            }
            s
        }
    };
    let n = voxels.len();
    let space = Space {
        problem,
        scales,
        lo: (0..3 * n).map(|i| lower[i / n] / scales[i / n]).collect(),
        hi: (0..3 * n).map(|i| upper[i / n] / scales[i / n]).collect(),
    };
    let ch = Channels::from_maps(q0);
    let eval = problem.evaluate(&ch)?;
    let start = Iterate {
        u: space.to_scaled(&ch),
        ch,
        eval,
    };
    let (end, status, history) = match settings.method {
        SolverMethod::LevenbergMarquardt => levenberg_marquardt(&space, start, settings)?,
        SolverMethod::ProjectedGradient => projected_gradient(&space, start, settings)?,
    };
    Ok(SolveOutcome {
        maps: end.ch.to_maps(q0)?,
        status,
        history,
    })
}

type Run = (Iterate, SolveStatus, Vec<IterationRecord>);

fn relative_decrease(before: f64, after: f64) -> f64 {
    (before - after) / before.abs().max(f64::MIN_POSITIVE)
}

fn levenberg_marquardt(space: &Space<'_>, start: Iterate, settings: &SolverSettings) -> Result<Run> {
    let mut cur = start;
    let mut history = vec![record(0, &cur.eval)];
    let mut lambda = settings.damping;
    let mut stalled = 0;
    for iter in 1..=settings.max_iters {
        let lin = space.lin(&cur.eval);
        let rhs: Vec<f64> = lin.vjp(&lin.residuals()).into_iter().map(|x| -x).collect();
        if rhs.iter().all(|x| *x == 0.0) {
            return Ok((cur, SolveStatus::Converged, history));
        }
        let blocks = lin.block_diagonal();
        // variables on a bound whose descent direction points outward are held fixed
        let free: Vec<bool> = (0..rhs.len())
            .map(|i| !((cur.u[i] <= space.lo[i] && rhs[i] <= 0.0) || (cur.u[i] >= space.hi[i] && rhs[i] >= 0.0)))
            .collect();
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let step = damped_cg(&lin, &blocks, &free, lambda, &rhs, settings.cg_iters, settings.cg_tol);
            let trial_u = space.project(&cur.u.iter().zip(&step).map(|(a, b)| a + b).collect::<Vec<_>>());
            if trial_u == cur.u {
                return Ok((cur, SolveStatus::Converged, history));
            }
            let trial = space.try_point(trial_u, &cur.ch)?;
            if trial.eval.total < cur.eval.total {
                accepted = Some(trial);
                break;
            }
            lambda *= 4.0;
        }
        let Some(next) = accepted else {
            return Ok((cur, SolveStatus::LineSearchFailed, history));
        };
        lambda = (lambda / 3.0).max(1e-12);
        let rel = relative_decrease(cur.eval.total, next.eval.total);
        cur = next;
        history.push(record(iter, &cur.eval));
        stalled = if rel < settings.tol { stalled + 1 } else { 0 };
        if stalled >= settings.patience.max(1) {
            return Ok((cur, SolveStatus::Converged, history));
        }
    }
    Ok((cur, SolveStatus::MaxIterations, history))
}

fn projected_gradient(space: &Space<'_>, start: Iterate, settings: &SolverSettings) -> Result<Run> {
    let mut cur = start;
    let mut history = vec![record(0, &cur.eval)];
    let mut g = space.lin(&cur.eval).gradient();
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut t = if gmax > 0.0 { settings.step / gmax } else { settings.step };
    let mut stalled = 0;
    for iter in 1..=settings.max_iters {
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let trial_u = space.project(&cur.u.iter().zip(&g).map(|(u, g)| u - t * g).collect::<Vec<_>>());
            if trial_u == cur.u {
                return Ok((cur, SolveStatus::Converged, history));
            }
            let decrease: f64 = g.iter().zip(trial_u.iter().zip(&cur.u)).map(|(g, (a, b))| g * (a - b)).sum();
            let trial = space.try_point(trial_u, &cur.ch)?;
            if trial.eval.total <= cur.eval.total + settings.armijo * decrease {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            return Ok((cur, SolveStatus::LineSearchFailed, history));
        };
        let next_g = space.lin(&next.eval).gradient();
        // Barzilai-Borwein trial length for the next iteration
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..next.u.len() {
            let s = next.u[i] - cur.u[i];
            ss += s * s;
            sy += s * (next_g[i] - g[i]);
        }
        t = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (t * 2.0).min(1e12) };
        let rel = relative_decrease(cur.eval.total, next.eval.total);
        cur = next;
        g = next_g;
        history.push(record(iter, &cur.eval));
        stalled = if rel < settings.tol { stalled + 1 } else { 0 };
        if stalled >= settings.patience.max(1) {
            return Ok((cur, SolveStatus::Converged, history));
        }
    }
    Ok((cur, SolveStatus::MaxIterations, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::phi;
    use crate::models::{evaluate_masked, standard_contrast_set, GUIDE_T1W, GUIDE_T2W};
    use crate::raster::ImageGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Smooth random maps on a disk-shaped mask.
    fn smooth_maps(n: usize, seed: u64) -> (ParametricMaps, BinaryMask) {
        let g = ImageGrid::square(n).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (a, b, c): (f64, f64, f64) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let mut pd = vec![0.0; g.len()];
        let mut t1 = vec![0.0; g.len()];
        let mut t2 = vec![0.0; g.len()];
        let mut mask = vec![false; g.len()];
        for y in 0..n {
            for x in 0..n {
                let u = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
                let v = 2.0 * (y as f64 + 0.5) / n as f64 - 1.0;
                if u * u + v * v < 0.8 {
                    let i = g.index(x, y);
                    mask[i] = true;
                    pd[i] = 80.0 + 10.0 * (a * u + b * v).sin();
                    t1[i] = 900.0 + 300.0 * (c * u - v).cos();
                    t2[i] = 90.0 + 20.0 * (u * v + a);
                }
            }
        }
        (
            ParametricMaps::from_channels(g, pd, t1, t2).unwrap(),
            BinaryMask::new(g, mask).unwrap(),
        )
    }

    fn observed(q: &ParametricMaps, mask: &BinaryMask, spec: DegradeSpec) -> Vec<LrContrast> {
        standard_contrast_set()
            .into_iter()
            .map(|acq| LrContrast {
                image: phi(&evaluate_masked(&acq, q, mask).unwrap(), &spec).unwrap(),
                acquisition: acq,
                degrade: spec,
            })
            .collect()
    }

    fn guides_of(q: &ParametricMaps, mask: &BinaryMask) -> Vec<Guide> {
        [("t1w", GUIDE_T1W), ("t2w", GUIDE_T2W)]
            .into_iter()
            .map(|(name, acq)| Guide {
                name: name.into(),
                image: evaluate_masked(&acq, q, mask).unwrap(),
                acquisition: acq,
            })
            .collect()
    }

    fn consistent_problem(q: &ParametricMaps, mask: &BinaryMask, alpha: f64) -> SrProblem {
        let lr = observed(q, mask, DegradeSpec::noiseless(0.5, 0.5));
        SrProblem::new(q.clone(), lr, guides_of(q, mask), mask.clone(), alpha, 0.1).unwrap()
    }

    #[test]
    fn zero_residual_data_loss() {
        let (q, mask) = smooth_maps(16, 1);
        let p = consistent_problem(&q, &mask, 1000.0);
        assert_eq!(data_loss(&q, &p).unwrap(), 0.0);
        assert!(guide_loss(&q, &p).unwrap() < 1e-12);
        assert!(p.contrast_rms(&q).unwrap().iter().all(|r| *r == 0.0));
    }

    #[test]
    fn constant_residual_data_loss() {
        let (q, mask) = smooth_maps(16, 2);
        let acq = AcquisitionSpec::SatRecovery { tr: 500.0 };
        let spec = DegradeSpec::noiseless(1.0, 1.0);
        let synth = evaluate_masked(&acq, &q, &mask).unwrap();
        let r = 0.05;
        let image = synth.map(|v| v - r).unwrap();
        for model in [DataModel::Magnitude, DataModel::Lowpass] {
            let p = SrProblem::new(
                q.clone(),
                vec![LrContrast { image: image.clone(), acquisition: acq, degrade: spec }],
                vec![],
                mask.clone(),
                0.0,
                0.1,
            )
            .unwrap()
            .with_data_model(model)
            .unwrap();
            let loss = data_loss(&q, &p).unwrap();
            assert!((loss - r * r / 0.01).abs() < 1e-10, "{model}: {loss}");
        }
    }

    fn guide_only(q: &ParametricMaps, mask: &BinaryMask, image: ScalarMap) -> SrProblem {
        SrProblem::new(
            q.clone(),
            vec![],
            vec![Guide { name: "g".into(), image, acquisition: GUIDE_T1W }],
            mask.clone(),
            1.0,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn guide_loss_affine_cases() {
        let (q, mask) = smooth_maps(16, 3);
        let w = evaluate_masked(&GUIDE_T1W, &q, &mask).unwrap();
        let same = guide_only(&q, &mask, w.clone());
        assert!(guide_loss(&q, &same).unwrap() < 1e-12);
        let shifted = guide_only(&q, &mask, w.map(|v| v + 17.0).unwrap());
        assert!(guide_loss(&q, &shifted).unwrap() < 1e-12);
        let negated = guide_only(&q, &mask, w.map(|v| -v).unwrap());
        assert!((guide_loss(&q, &negated).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn guide_rescaling_is_bit_exact() {
        let (q, mask) = smooth_maps(16, 3);
        let (other, _) = smooth_maps(16, 4);
        let w = evaluate_masked(&GUIDE_T1W, &other, &mask).unwrap();
        let base = guide_only(&q, &mask, w.clone());
        for (a, b) in [(2.0, 0.0), (1.0, 5.0), (0.5, -3.0)] {
            let scaled = guide_only(&q, &mask, w.map(|v| a * v + b).unwrap());
            assert_eq!(guide_loss(&q, &scaled).unwrap(), guide_loss(&q, &base).unwrap());
            assert_eq!(objective_gradient(&q, &scaled).unwrap(), objective_gradient(&q, &base).unwrap());
        }
    }

    #[test]
    fn zero_variance_guide_rejected() {
        let (q, mask) = smooth_maps(16, 3);
        let flat = ScalarMap::filled(*q.grid(), 3.0, "flat", "");
        let err = SrProblem::new(
            q,
            vec![],
            vec![Guide { name: "g".into(), image: flat, acquisition: GUIDE_T1W }],
            mask,
            1.0,
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ZeroVarianceGuide { index: 0 }));
    }

    #[test]
    fn alpha_weighting_and_guide_duplication() {
        let (q, mask) = smooth_maps(16, 4);
        let (other, _) = smooth_maps(16, 5);
        let p = consistent_problem(&other, &mask, 1000.0);
        let d = data_loss(&q, &p).unwrap();
        let h = guide_loss(&q, &p).unwrap();
        assert_eq!(total_objective(&q, &p).unwrap(), d + 1000.0 * h);
        let p0 = p.clone().with_alpha(0.0).unwrap();
        assert_eq!(total_objective(&q, &p0).unwrap(), d);

        let g0 = p.guides()[0].clone();
        let single = SrProblem::new(q.clone(), vec![], vec![g0.clone()], mask.clone(), 1.0, 0.1).unwrap();
        let doubled = SrProblem::new(q.clone(), vec![], vec![g0.clone(), g0], mask, 1.0, 0.1).unwrap();
        let one = guide_loss(&q, &single).unwrap();
        assert!((guide_loss(&q, &doubled).unwrap() - 2.0 * one).abs() < 1e-12);
    }

    fn directional_check(p: &SrProblem, q: &ParametricMaps, seed: u64) {
        let grad = objective_gradient(q, p).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let scales = [80.0, 900.0, 90.0];
        let mask = p.mask();
        for _ in 0..5 {
            let dir: Vec<[f64; 3]> = (0..q.grid().len())
                .map(|v| {
                    if mask.values()[v] {
                        [0, 1, 2].map(|c| scales[c] * rng.random_range(-1.0..1.0))
                    } else {
                        [0.0; 3]
                    }
                })
                .collect();
            let h = 1e-4;
            let shift = |sign: f64| {
                let ch = |c: usize, m: &ScalarMap| {
                    m.values().iter().zip(&dir).map(|(v, d)| v + sign * h * d[c]).collect::<Vec<_>>()
                };
                ParametricMaps::from_channels(*q.grid(), ch(0, &q.pd), ch(1, &q.t1), ch(2, &q.t2)).unwrap()
            };
            let fd = (total_objective(&shift(1.0), p).unwrap() - total_objective(&shift(-1.0), p).unwrap()) / (2.0 * h);
            let analytic: f64 = dir
                .iter()
                .enumerate()
                .map(|(v, d)| d[0] * grad.d_pd.values()[v] + d[1] * grad.d_t1.values()[v] + d[2] * grad.d_t2.values()[v])
                .sum();
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(fd.abs()), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn gradient_matches_directional_differences() {
        let (q, mask) = smooth_maps(16, 6);
        let (other, _) = smooth_maps(16, 7);
        let p = consistent_problem(&other, &mask, 1000.0);
        directional_check(&p, &q, 9);
        directional_check(&p.with_data_model(DataModel::Lowpass).unwrap(), &q, 10);
    }

    #[test]
    fn gradient_zero_outside_mask_and_at_exact_fit() {
        let (q, mask) = smooth_maps(16, 8);
        let p = consistent_problem(&q, &mask, 0.0);
        let grad = objective_gradient(&q, &p).unwrap();
        for m in [&grad.d_pd, &grad.d_t1, &grad.d_t2] {
            assert!(m.values().iter().all(|v| v.abs() < 1e-8));
        }
        let (other, _) = smooth_maps(16, 9);
        let p = consistent_problem(&other, &mask, 1000.0);
        let grad = objective_gradient(&q, &p).unwrap();
        for (v, &inside) in mask.values().iter().enumerate() {
            if !inside {
                assert_eq!(grad.d_pd.values()[v], 0.0);
                assert_eq!(grad.d_t1.values()[v], 0.0);
                assert_eq!(grad.d_t2.values()[v], 0.0);
            }
        }
    }

    #[test]
    fn stationary_start_is_returned() {
        let (q, mask) = smooth_maps(16, 10);
        let p = consistent_problem(&q, &mask, 0.0);
        for method in [SolverMethod::LevenbergMarquardt, SolverMethod::ProjectedGradient] {
            let out = solve_sr(&p, &SolverSettings { method, ..SolverSettings::default() }).unwrap();
            assert_eq!(out.maps, q);
            assert_eq!(out.status, SolveStatus::Converged);
        }
    }

    #[test]
    fn descent_and_feasibility_without_guides() {
        let (truth, mask) = smooth_maps(16, 11);
        let (start, _) = smooth_maps(16, 12);
        let lr = observed(&truth, &mask, DegradeSpec::noiseless(0.5, 0.5));
        let p = SrProblem::new(start.masked(&mask).unwrap(), lr, vec![], mask.clone(), 0.0, 0.1).unwrap();
        for method in [SolverMethod::LevenbergMarquardt, SolverMethod::ProjectedGradient] {
            let settings = SolverSettings { method, max_iters: 30, ..SolverSettings::default() };
            let out = solve_sr(&p, &settings).unwrap();
            assert!(out.history.len() > 1);
            for w in out.history.windows(2) {
                assert!(w[1].total <= w[0].total);
            }
            assert!(data_loss(&out.maps, &p).unwrap() < data_loss(p.q_init(), &p).unwrap());
            let b = p.bounds();
            for &v in &mask.indices() {
                assert!(out.maps.pd.values()[v] >= 0.0 && out.maps.pd.values()[v] <= b.upper.pd_max);
                assert!(out.maps.t1.values()[v] >= b.relaxation_floor && out.maps.t1.values()[v] <= b.upper.t1_max);
                assert!(out.maps.t2.values()[v] >= b.relaxation_floor && out.maps.t2.values()[v] <= b.upper.t2_max);
            }
            for (v, &inside) in mask.values().iter().enumerate() {
                if !inside {
                    assert_eq!(out.maps.pd.values()[v], 0.0);
                }
            }
        }
    }

    #[test]
    fn guided_solve_recovers_consistent_truth() {
        let (truth, mask) = smooth_maps(16, 13);
        let lr = observed(&truth, &mask, DegradeSpec::noiseless(0.5, 0.5));
        let start = ParametricMaps::uniform(*truth.grid(), 80.0, 900.0, 90.0).unwrap().masked(&mask).unwrap();
        let p = SrProblem::new(start, lr, guides_of(&truth, &mask), mask, 1000.0, 0.1).unwrap();
        let out = solve_sr(&p, &SolverSettings { max_iters: 100, ..SolverSettings::default() }).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.total < 1e-3 * out.history[0].total, "{:?}", last);
    }

    #[test]
    fn history_log_format() {
        let (q, mask) = smooth_maps(16, 14);
        let p = consistent_problem(&q, &mask, 0.0);
        let out = solve_sr(&p, &SolverSettings::default()).unwrap();
        let text = out.history_tsv();
        assert!(text.starts_with("iter\tdata_loss\tguide_loss\ttotal\n0\t0\t"));
    }

    #[test]
    fn enum_tokens() {
        for g in [GuideSubset::None, GuideSubset::T1w, GuideSubset::T2w, GuideSubset::Both] {
            assert_eq!(g.to_string().parse::<GuideSubset>().unwrap(), g);
        }
        assert_eq!(GuideSubset::Both.names(), ["t1w", "t2w"]);
        assert!("t3w".parse::<GuideSubset>().unwrap_err().is_config());
        for m in [DataModel::Magnitude, DataModel::Lowpass] {
            assert_eq!(m.to_string().parse::<DataModel>().unwrap(), m);
        }
        for m in [SolverMethod::LevenbergMarquardt, SolverMethod::ProjectedGradient] {
            assert_eq!(m.to_string().parse::<SolverMethod>().unwrap(), m);
        }
    }

    #[test]
    fn invalid_problems() {
        let (q, mask) = smooth_maps(16, 13);
        assert!(SrProblem::new(q.clone(), vec![], vec![], mask.clone(), -1.0, 0.1).is_err());
        assert!(SrProblem::new(q.clone(), vec![], vec![], mask.clone(), 1.0, 0.0).is_err());
        let small = BinaryMask::full(ImageGrid::square(8).unwrap());
        assert!(SrProblem::new(q.clone(), vec![], vec![], small, 1.0, 0.1).is_err());
        let p = SrProblem::new(q, vec![], vec![], mask, 1.0, 0.1).unwrap();
        for bad in [
            SolverSettings { max_iters: 0, ..SolverSettings::default() },
            SolverSettings { step: 0.0, ..SolverSettings::default() },
            SolverSettings { cg_tol: 1.5, ..SolverSettings::default() },
            SolverSettings { param_scales: Some([1.0, -1.0, 1.0]), ..SolverSettings::default() },
        ] {
            assert!(solve_sr(&p, &bad).is_err());
        }
    }
}
