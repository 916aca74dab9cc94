//! Closed-form MR signal equations.
//!
//! Every variant maps a voxel's (PD, T1, T2) to a real signal. Partial
//! derivatives are analytic; the solver and the fitter both rely on them.

use std::fmt;

use rayon::prelude::*;

use crate::raster::{BinaryMask, ParametricMaps, ScalarMap};
use crate::{Error, Result};

/// Relaxation times below this (ms) are rejected at evaluated voxels.
pub const RELAXATION_FLOOR_MS: f64 = 1e-3;

/// Acquisition parameters selecting one forward model. Times in ms, flip
/// angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcquisitionSpec {
    /// `PD (1 - e^{-TR/T1})`
    SatRecovery { tr: f64 },
    /// `PD e^{-TE/T2}`
    SpinEchoDecay { te: f64 },
    /// Inversion-recovery spoiled gradient echo.
    IrSpgr {
        tr: f64,
        te: f64,
        tp: f64,
        td: f64,
        flip_deg: f64,
    },
    /// Spin echo with a refocusing angle written as `180 - flip`.
    SpinEchoT2w { tr: f64, te: f64, flip_deg: f64 },
    /// Fluid-attenuated inversion recovery. The bare equation carries no PD
    /// factor; `scale_by_pd` multiplies it in.
    T2Flair {
        tr: f64,
        te: f64,
        ti: f64,
        scale_by_pd: bool,
    },
}

/// Standard T1-weighted guide (IR-SPGR, 6.6/2.6/450/0 ms, 12 degrees).
pub const GUIDE_T1W: AcquisitionSpec = AcquisitionSpec::IrSpgr {
    tr: 6.6,
    te: 2.6,
    tp: 450.0,
    td: 0.0,
    flip_deg: 12.0,
};

/// Standard T2-weighted guide (SE, 5211/146 ms, 160 degrees).
pub const GUIDE_T2W: AcquisitionSpec = AcquisitionSpec::SpinEchoT2w {
    tr: 5211.0,
    te: 146.0,
    flip_deg: 160.0,
};

const STANDARD_TR: [f64; 6] = [360.0, 540.0, 810.0, 1215.0, 1822.0, 2733.0];
const STANDARD_TE: [f64; 6] = [10.0, 20.0, 40.0, 80.0, 160.0, 320.0];

/// The 12-contrast series used to fit LR maps: six saturation-recovery
/// images followed by six spin-echo decay images.
pub fn standard_contrast_set() -> Vec<AcquisitionSpec> {
    STANDARD_TR
        .iter()
        .map(|&tr| AcquisitionSpec::SatRecovery { tr })
        .chain(STANDARD_TE.iter().map(|&te| AcquisitionSpec::SpinEchoDecay { te }))
        .collect()
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidAcquisition(msg));
        let times: Vec<(&str, f64)> = match *self {
            Self::SatRecovery { tr } => vec![("tr", tr)],
            Self::SpinEchoDecay { te } => vec![("te", te)],
            Self::IrSpgr { tr, te, tp, td, .. } => vec![("tr", tr), ("te", te), ("tp", tp), ("td", td)],
            Self::SpinEchoT2w { tr, te, .. } => vec![("tr", tr), ("te", te)],
            Self::T2Flair { tr, te, ti, .. } => vec![("tr", tr), ("te", te), ("ti", ti)],
        };
        for (name, t) in times {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("{name}={t} must be a finite time >= 0"));
            }
        }
        if let Self::IrSpgr { flip_deg, .. } | Self::SpinEchoT2w { flip_deg, .. } = *self {
            if !(flip_deg > 0.0 && flip_deg < 180.0) {
                return bad(format!("flip={flip_deg} must lie in (0, 180) degrees"));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SatRecovery { .. } => "sat_recovery",
            Self::SpinEchoDecay { .. } => "spin_echo_decay",
            Self::IrSpgr { .. } => "ir_spgr",
            Self::SpinEchoT2w { .. } => "spin_echo_t2w",
            Self::T2Flair { .. } => "t2_flair",
        }
    }

    /// Whether the signal scales linearly with PD.
    pub fn is_pd_linear(&self) -> bool {
        !matches!(self, Self::T2Flair { scale_by_pd: false, .. })
    }

    /// Which relaxation times the signal depends on: `(t1, t2)`.
    pub fn sensitivity(&self) -> (bool, bool) {
        match *self {
            Self::SatRecovery { tr } => (tr > 0.0, false),
            Self::SpinEchoDecay { te } => (false, te > 0.0),
            Self::IrSpgr { .. } => (true, true),
            Self::SpinEchoT2w { tr, te, .. } => (tr != te, te > 0.0),
            Self::T2Flair { te, .. } => (true, te > 0.0),
        }
    }

    /// Signal of a single voxel. Relaxation times must be positive.
    #[inline]
    pub fn signal(&self, pd: f64, t1: f64, t2: f64) -> f64 {
        self.signal_and_partials(pd, t1, t2).0
    }

    /// Signal and `[d/dPD, d/dT1, d/dT2]` of a single voxel.
    pub fn signal_and_partials(&self, pd: f64, t1: f64, t2: f64) -> (f64, [f64; 3]) {
        match *self {
            Self::SatRecovery { tr } => {
                let e1 = (-tr / t1).exp();
                let unit = 1.0 - e1;
                (pd * unit, [unit, -pd * e1 * tr / (t1 * t1), 0.0])
            }
            Self::SpinEchoDecay { te } => {
                let e2 = (-te / t2).exp();
                (pd * e2, [e2, 0.0, pd * e2 * te / (t2 * t2)])
            }
            Self::IrSpgr {
                tr,
                te,
                tp,
                td,
                flip_deg,
            } => {
                let c = flip_deg.to_radians().cos();
                let inv_t1_sq = 1.0 / (t1 * t1);
                let e = (-tr / t1).exp();
                let de = e * tr * inv_t1_sq;
                let denom = 1.0 - c * e;
                let ratio = (1.0 - e) / denom;
                let dratio = (c - 1.0) / (denom * denom) * de;
                let e2 = (-te / t2).exp();
                let de2 = e2 * te / (t2 * t2);
                let ed = (-td / t1).exp();
                let ded = ed * td * inv_t1_sq;
                let ep = (-tp / t1).exp();
                let dep = ep * tp * inv_t1_sq;
                // unit-PD steady state
                let mz = ratio * e2;
                let unit = -mz * ed + (1.0 - ed) * ep + (1.0 - ep);
                let d_unit_t1 =
                    -e2 * (dratio * ed + ratio * ded) + (-ded * ep + (1.0 - ed) * dep) - dep;
                let d_unit_t2 = -ratio * ed * de2;
                (pd * unit, [unit, pd * d_unit_t1, pd * d_unit_t2])
            }
            Self::SpinEchoT2w { tr, te, flip_deg } => {
                let beta = (180.0 - flip_deg).to_radians();
                let (s, c) = beta.sin_cos();
                let dt = tr - te;
                let e = (-dt / t1).exp();
                let de = e * dt / (t1 * t1);
                let denom = 1.0 - c * e;
                let ratio = s * (1.0 - e) / denom;
                let dratio = s * (c - 1.0) / (denom * denom) * de;
                let e2 = (-te / t2).exp();
                let de2 = e2 * te / (t2 * t2);
                let unit = ratio * e2;
                (pd * unit, [unit, pd * dratio * e2, pd * ratio * de2])
            }
            Self::T2Flair {
                tr,
                te,
                ti,
                scale_by_pd,
            } => {
                let inv_t1_sq = 1.0 / (t1 * t1);
                let ei = (-ti / t1).exp();
                let er = (-tr / t1).exp();
                let e2 = (-te / t2).exp();
                let bracket = 1.0 - 2.0 * ei + er;
                let dbracket = -2.0 * ei * ti * inv_t1_sq + er * tr * inv_t1_sq;
                let unit = bracket * e2;
                let d_t1 = dbracket * e2;
                let d_t2 = bracket * e2 * te / (t2 * t2);
                if scale_by_pd {
                    (pd * unit, [unit, pd * d_t1, pd * d_t2])
                } else {
                    (unit, [0.0, d_t1, d_t2])
                }
            }
        }
    }

    fn check_voxel(index: usize, t1: f64, t2: f64) -> Result<()> {
        for v in [t1, t2] {
            if !(v >= RELAXATION_FLOOR_MS) {
                return Err(Error::RelaxationFloor {
                    index,
                    value: v,
                    floor: RELAXATION_FLOOR_MS,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for AcquisitionSpec {
    /// Config record form, e.g. `model=sat_recovery tr=360`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model={}", self.name())?;
        match *self {
            Self::SatRecovery { tr } => write!(f, " tr={tr}"),
            Self::SpinEchoDecay { te } => write!(f, " te={te}"),
            Self::IrSpgr {
                tr,
                te,
                tp,
                td,
                flip_deg,
            } => write!(f, " tr={tr} te={te} tp={tp} td={td} flip={flip_deg}"),
            Self::SpinEchoT2w { tr, te, flip_deg } => write!(f, " tr={tr} te={te} flip={flip_deg}"),
            Self::T2Flair {
                tr,
                te,
                ti,
                scale_by_pd,
            } => {
                write!(f, " tr={tr} te={te} ti={ti}")?;
                if scale_by_pd {
                    write!(f, " scale_by_pd=true")?;
                }
                Ok(())
            }
        }
    }
}

/// Splits a record line into `key=value` pairs.
pub(crate) fn record_pairs(line: &str) -> Result<Vec<(&str, &str)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .ok_or_else(|| Error::config(tok, "expected key=value"))
        })
        .collect()
}

impl std::str::FromStr for AcquisitionSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let pairs = record_pairs(line)?;
        let get = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let num = |key: &str| -> Result<f64> {
            let raw = get(key).ok_or_else(|| Error::config(key, format!("missing in `{line}`")))?;
            raw.parse::<f64>()
                .map_err(|_| Error::config(key, format!("`{raw}` is not a number")))
        };
        let model = get("model").ok_or_else(|| Error::config("model", format!("missing in `{line}`")))?;
        let (spec, allowed): (Self, &[&str]) = match model {
            "sat_recovery" => (Self::SatRecovery { tr: num("tr")? }, &["tr"]),
            "spin_echo_decay" => (Self::SpinEchoDecay { te: num("te")? }, &["te"]),
            "ir_spgr" => (
                Self::IrSpgr {
                    tr: num("tr")?,
                    te: num("te")?,
                    tp: num("tp")?,
                    td: num("td")?,
                    flip_deg: num("flip")?,
                },
                &["tr", "te", "tp", "td", "flip"],
            ),
            "spin_echo_t2w" => (
                Self::SpinEchoT2w {
                    tr: num("tr")?,
                    te: num("te")?,
                    flip_deg: num("flip")?,
                },
                &["tr", "te", "flip"],
            ),
            "t2_flair" => {
                let scale_by_pd = match get("scale_by_pd") {
                    None | Some("false") => false,
                    Some("true") => true,
                    Some(other) => return Err(Error::config("scale_by_pd", format!("`{other}` is not true/false"))),
                };
                (
                    Self::T2Flair {
                        tr: num("tr")?,
                        te: num("te")?,
                        ti: num("ti")?,
                        scale_by_pd,
                    },
                    &["tr", "te", "ti", "scale_by_pd"],
                )
            }
            other => return Err(Error::config("model", format!("unknown model `{other}`"))),
        };
        for (k, _) in &pairs {
            if *k != "model" && *k != "name" && *k != "reference" && !allowed.contains(k) {
                return Err(Error::config(*k, format!("not a parameter of {model}")));
            }
        }
        spec.validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        Ok(spec)
    }
}

/// Per-voxel partial derivatives of a model output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelJacobian {
    pub d_pd: ScalarMap,
    pub d_t1: ScalarMap,
    pub d_t2: ScalarMap,
}

fn label_for(spec: &AcquisitionSpec) -> String {
    spec.name().to_string()
}

/// Evaluates `spec` on every voxel of `q`.
pub fn evaluate(spec: &AcquisitionSpec, q: &ParametricMaps) -> Result<ScalarMap> {
    evaluate_region(spec, q, None)
}

/// Evaluates `spec` inside `mask`; voxels outside are 0 and are not checked.
pub fn evaluate_masked(spec: &AcquisitionSpec, q: &ParametricMaps, mask: &BinaryMask) -> Result<ScalarMap> {
    q.grid().ensure_same(mask.grid(), "evaluate")?;
    evaluate_region(spec, q, Some(mask))
}

fn evaluate_region(spec: &AcquisitionSpec, q: &ParametricMaps, mask: Option<&BinaryMask>) -> Result<ScalarMap> {
    spec.validate()?;
    let (pd, t1, t2) = (q.pd.values(), q.t1.values(), q.t2.values());
    let values = (0..pd.len())
        .into_par_iter()
        .map(|i| {
            if mask.is_some_and(|m| !m.values()[i]) {
                return Ok(0.0);
            }
            AcquisitionSpec::check_voxel(i, t1[i], t2[i])?;
            Ok(spec.signal(pd[i], t1[i], t2[i]))
        })
        .collect::<Result<Vec<f64>>>()?;
    ScalarMap::new(*q.grid(), values, label_for(spec), "a.u.")
}

/// Analytic Jacobian of `spec` on every voxel.
pub fn jacobian(spec: &AcquisitionSpec, q: &ParametricMaps) -> Result<ModelJacobian> {
    jacobian_region(spec, q, None)
}

/// Jacobian inside `mask`; zero outside.
pub fn jacobian_masked(spec: &AcquisitionSpec, q: &ParametricMaps, mask: &BinaryMask) -> Result<ModelJacobian> {
    q.grid().ensure_same(mask.grid(), "jacobian")?;
    jacobian_region(spec, q, Some(mask))
}

fn jacobian_region(spec: &AcquisitionSpec, q: &ParametricMaps, mask: Option<&BinaryMask>) -> Result<ModelJacobian> {
    spec.validate()?;
    let (pd, t1, t2) = (q.pd.values(), q.t1.values(), q.t2.values());
    let partials = (0..pd.len())
        .into_par_iter()
        .map(|i| {
            if mask.is_some_and(|m| !m.values()[i]) {
                return Ok([0.0; 3]);
            }
            AcquisitionSpec::check_voxel(i, t1[i], t2[i])?;
            Ok(spec.signal_and_partials(pd[i], t1[i], t2[i]).1)
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    let grid = *q.grid();
    let channel = |c: usize, name: &str| {
        ScalarMap::new(
            grid,
            partials.iter().map(|p| p[c]).collect(),
            format!("d{}/d{name}", spec.name()),
            "",
        )
    };
    Ok(ModelJacobian {
        d_pd: channel(0, "pd")?,
        d_t1: channel(1, "t1")?,
        d_t2: channel(2, "t2")?,
    })
}
