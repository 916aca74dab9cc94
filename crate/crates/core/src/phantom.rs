//! Ellipse-based 2D brain phantom and the synthetic data pipeline built on it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::degrade::{phi, DegradeSpec};
use crate::fit::{fit_map, FitSettings};
use crate::models::{evaluate_masked, standard_contrast_set, AcquisitionSpec, GUIDE_T1W, GUIDE_T2W};
use crate::raster::{BinaryMask, ImageGrid, ParamBounds, ParametricMaps};
use crate::srmap::{Guide, GuideSubset, LrContrast, SrProblem};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
    Lesion,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [Tissue::Background, Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Lesion];

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
            Tissue::Lesion => "lesion",
        }
    }
}

impl fmt::Display for Tissue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tissue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tissue::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidPhantom(format!("unknown tissue class {s:?}")))
    }
}

/// PD (a.u.), T1 and T2 (ms) of one tissue class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueValues {
    pub pd: f64,
    pub t1: f64,
    pub t2: f64,
}

/// Ellipse in normalised coordinates: the grid spans `[-1, 1]` on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub rotation_deg: f64,
}

impl Ellipse {
    pub const fn new(cx: f64, cy: f64, ax: f64, ay: f64, rotation_deg: f64) -> Self {
        Self {
            cx,
            cy,
            ax,
            ay,
            rotation_deg,
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let x = c * du + s * dv;
        let y = -s * du + c * dv;
        (x / self.ax).powi(2) + (y / self.ay).powi(2) <= 1.0
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.ax, self.ay, self.rotation_deg];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPhantom("non-finite ellipse parameter".into()));
        }
        if !(self.ax > 0.0 && self.ay > 0.0) {
            return Err(Error::InvalidPhantom(format!("ellipse axes ({}, {}) must be positive", self.ax, self.ay)));
        }
        let reach = self.ax.max(self.ay);
        if self.cx.abs() + reach > 1.0 || self.cy.abs() + reach > 1.0 {
            return Err(Error::InvalidPhantom(format!(
                "ellipse centred at ({}, {}) extends beyond the grid",
                self.cx, self.cy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: ImageGrid,
    /// Painted in order, later entries over earlier ones.
    pub tissues: Vec<(Ellipse, Tissue)>,
    pub csf: TissueValues,
    pub gm: TissueValues,
    pub wm: TissueValues,
    pub lesion: TissueValues,
    /// Relative amplitude of the smooth intra-tissue modulation.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Skull-stripped axial slice: CSF rim, cortex, white matter, deep grey
    /// nuclei, ventricles and three small lesions.
    pub fn standard(grid: ImageGrid, seed: u64) -> Self {
        use Tissue::*;
        let tissues = vec![
            (Ellipse::new(0.0, 0.0, 0.80, 0.92, 0.0), Csf),
            (Ellipse::new(0.0, 0.0, 0.74, 0.86, 0.0), Gm),
            (Ellipse::new(0.0, 0.02, 0.60, 0.72, 0.0), Wm),
            (Ellipse::new(-0.24, 0.06, 0.09, 0.13, 10.0), Gm),
            (Ellipse::new(0.24, 0.06, 0.09, 0.13, -10.0), Gm),
            (Ellipse::new(-0.11, -0.08, 0.06, 0.24, 18.0), Csf),
            (Ellipse::new(0.11, -0.08, 0.06, 0.24, -18.0), Csf),
            (Ellipse::new(0.33, -0.38, 0.06, 0.045, 30.0), Lesion),
            (Ellipse::new(-0.36, 0.34, 0.04, 0.04, 0.0), Lesion),
            (Ellipse::new(0.06, 0.48, 0.03, 0.06, -20.0), Lesion),
        ];
        Self {
            grid,
            tissues,
            csf: TissueValues { pd: 100.0, t1: 4000.0, t2: 1800.0 },
            gm: TissueValues { pd: 85.0, t1: 1100.0, t2: 95.0 },
            wm: TissueValues { pd: 70.0, t1: 600.0, t2: 80.0 },
            lesion: TissueValues { pd: 90.0, t1: 1400.0, t2: 200.0 },
            texture_amplitude: 0.05,
            seed,
        }
    }

    pub fn values(&self, tissue: Tissue) -> Option<TissueValues> {
        match tissue {
            Tissue::Background => None,
            Tissue::Csf => Some(self.csf),
            Tissue::Gm => Some(self.gm),
            Tissue::Wm => Some(self.wm),
            Tissue::Lesion => Some(self.lesion),
        }
    }

    pub fn values_mut(&mut self, tissue: Tissue) -> Option<&mut TissueValues> {
        match tissue {
            Tissue::Background => None,
            Tissue::Csf => Some(&mut self.csf),
            Tissue::Gm => Some(&mut self.gm),
            Tissue::Wm => Some(&mut self.wm),
            Tissue::Lesion => Some(&mut self.lesion),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tissues.is_empty() {
            return Err(Error::InvalidPhantom("no ellipses".into()));
        }
        for (e, _) in &self.tissues {
            e.validate()?;
        }
        if !(0.0..0.5).contains(&self.texture_amplitude) {
            return Err(Error::InvalidPhantom(format!(
                "texture amplitude {} must lie in [0, 0.5)",
                self.texture_amplitude
            )));
        }
        let b = ParamBounds::default();
        let grow = 1.0 + self.texture_amplitude;
        for t in &Tissue::ALL[1..] {
            let v = self.values(*t).expect("tissue class has values");
            let ok = v.pd >= 0.0
                && v.pd * grow <= b.pd_max
                && v.t1 * (2.0 - grow) >= 1.0
                && v.t1 * grow <= b.t1_max
                && v.t2 * (2.0 - grow) >= 1.0
                && v.t2 * grow <= b.t2_max;
            if !ok {
                return Err(Error::InvalidPhantom(format!(
                    "{t} values {v:?} leave the parameter bounds once textured"
                )));
            }
        }
        Ok(())
    }
}

/// Random degree-2 polynomial with coefficient magnitudes summing to 1, so
/// its range over `[-1, 1]^2` stays inside `[-1, 1]`.
#[derive(Debug, Clone, Copy)]
struct Texture([f64; 6]);

impl Texture {
    fn random(rng: &mut ChaCha20Rng) -> Self {
        let mut c = [0.0f64; 6];
        for v in c.iter_mut().skip(1) {
            *v = rng.random_range(-1.0..1.0);
        }
        // constant term keeps the field roughly centred
        c[0] = rng.random_range(-0.2..0.2);
        let total: f64 = c.iter().map(|v| v.abs()).sum();
        Self(c.map(|v| v / total))
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        let c = &self.0;
        c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v
    }
}

/// Rasterises the spec into ground-truth maps and the tissue mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ParametricMaps, BinaryMask)> {
    spec.validate()?;
    let grid = spec.grid;
    let (w, h) = (grid.width, grid.height);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    // one texture per (tissue, channel), drawn in a fixed order
    let textures: Vec<[Texture; 3]> = Tissue::ALL
        .iter()
        .map(|_| [0, 1, 2].map(|_| Texture::random(&mut rng)))
        .collect();

    let mut pd = vec![0.0; grid.len()];
    let mut t1 = vec![0.0; grid.len()];
    let mut t2 = vec![0.0; grid.len()];
    let mut mask = vec![false; grid.len()];
    for y in 0..h {
        let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let Some(tissue) = spec
                .tissues
                .iter()
                .rev()
                .find(|(e, _)| e.contains(u, v))
                .map(|(_, t)| *t)
            else {
                continue;
            };
            let Some(vals) = spec.values(tissue) else { continue };
            let tex = &textures[tissue as usize];
            let modulate = |k: usize| 1.0 + spec.texture_amplitude * tex[k].eval(u, v);
            let i = grid.index(x, y);
            pd[i] = vals.pd * modulate(0);
            t1[i] = vals.t1 * modulate(1);
            t2[i] = vals.t2 * modulate(2);
            mask[i] = true;
        }
    }
    let mask = BinaryMask::new(grid, mask)?;
    if mask.count() == 0 {
        return Err(Error::InvalidPhantom("phantom covers no voxels".into()));
    }
    Ok((ParametricMaps::from_channels(grid, pd, t1, t2)?, mask))
}

/// Everything one SR experiment needs, derived from ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub q_h: ParametricMaps,
    pub mask: BinaryMask,
    pub lr_contrasts: Vec<LrContrast>,
    pub q_l: ParametricMaps,
    /// Named `t1w` and `t2w`.
    pub guides: Vec<Guide>,
}

/// Noise seed of the `index`-th contrast derived from the base seed.
pub fn contrast_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Synthesises the 12 standard contrasts, degrades each with its own noise
/// realisation, fits `Q_l` and evaluates the two HR guides.
pub fn synthesize_dataset(
    q_h: &ParametricMaps,
    mask: &BinaryMask,
    degrade: &DegradeSpec,
    fit_settings: &FitSettings,
) -> Result<Dataset> {
    degrade.validate()?;
    let specs = standard_contrast_set();
    let lr_contrasts = specs
        .par_iter()
        .enumerate()
        .map(|(i, acq)| {
            let spec = degrade.with_seed(contrast_seed(degrade.seed, i));
            let hr = evaluate_masked(acq, q_h, mask)?;
            Ok(LrContrast {
                image: phi(&hr, &spec)?.relabel(format!("c_lr_{i:02}"), "a.u."),
                acquisition: *acq,
                degrade: spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = lr_contrasts.iter().map(|c| c.image.clone()).collect();
    let q_l = fit_map(&images, &specs, mask, fit_settings)?;
    let guides = standard_guides(q_h, mask)?;
    Ok(Dataset {
        q_h: q_h.clone(),
        mask: mask.clone(),
        lr_contrasts,
        q_l,
        guides,
    })
}

/// The T1w and T2w guide acquisitions by name.
pub fn guide_acquisition(name: &str) -> Option<AcquisitionSpec> {
    match name {
        "t1w" => Some(GUIDE_T1W),
        "t2w" => Some(GUIDE_T2W),
        _ => None,
    }
}

fn standard_guides(q_h: &ParametricMaps, mask: &BinaryMask) -> Result<Vec<Guide>> {
    ["t1w", "t2w"]
        .into_iter()
        .map(|name| {
            let acquisition = guide_acquisition(name).expect("standard guide");
            Ok(Guide {
                name: name.to_string(),
                image: evaluate_masked(&acquisition, q_h, mask)?.relabel(format!("guide_{name}"), "a.u."),
                acquisition,
            })
        })
        .collect()
}

impl Dataset {
    pub fn guides_for(&self, subset: GuideSubset) -> Vec<Guide> {
        subset
            .names()
            .iter()
            .filter_map(|n| self.guides.iter().find(|g| g.name == *n).cloned())
            .collect()
    }

    /// SR problem starting from `Q_l` with the selected guides.
    pub fn problem(&self, subset: GuideSubset, alpha: f64, sigma: f64) -> Result<SrProblem> {
        SrProblem::new(
            self.q_l.clone(),
            self.lr_contrasts.clone(),
            self.guides_for(subset),
            self.mask.clone(),
            alpha,
            sigma,
        )
    }
}
