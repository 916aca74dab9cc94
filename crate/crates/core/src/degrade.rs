//! k-space degradation.
//!
//! [`phi`] simulates a low-resolution acquisition: orthonormal DFT, additive
//! complex Gaussian noise, a centred rectangular sampling mask, inverse DFT
//! and magnitude. [`lowpass`] is the noiseless linear counterpart used when
//! predicting LR images inside the objective; it keeps only the part of the
//! mask that is closed under `k -> -k`, which makes it a real orthogonal
//! projection (idempotent and self-adjoint).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::models::record_pairs;
use crate::raster::{BinaryMask, ComplexImage, ImageGrid, ScalarMap};
use crate::{Error, Result};

/// Mask geometry and noise level of a degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeSpec {
    /// Fraction of k-space extent kept along x, in (0, 1].
    pub keep_x: f64,
    /// Fraction of k-space extent kept along y, in (0, 1].
    pub keep_y: f64,
    /// Standard deviation of the complex noise per k-space sample
    /// (`E|eps|^2 = sigma^2`), in orthonormal-DFT units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DegradeSpec {
    /// Quarter of central k-space, sigma 0.1.
    fn default() -> Self {
        Self {
            keep_x: 0.5,
            keep_y: 0.5,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn noiseless(keep_x: f64, keep_y: f64) -> Self {
        Self {
            keep_x,
            keep_y,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("keep_x", self.keep_x), ("keep_y", self.keep_y)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidDegrade(format!("{name}={f} must lie in (0, 1]")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidDegrade(format!("sigma={} must be >= 0", self.sigma)));
        }
        Ok(())
    }

    /// Same geometry and noise level with a different seed.
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

impl fmt::Display for DegradeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "keep_x={} keep_y={} sigma={} seed={}",
            self.keep_x, self.keep_y, self.sigma, self.seed
        )
    }
}

impl FromStr for DegradeSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut spec = DegradeSpec::default();
        for (key, value) in record_pairs(line)? {
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::config(key, format!("`{value}` is not a number")))
            };
            match key {
                "keep_x" => spec.keep_x = num()?,
                "keep_y" => spec.keep_y = num()?,
                "sigma" => spec.sigma = num()?,
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| Error::config(key, format!("`{value}` is not a u64")))?
                }
                other => return Err(Error::config(other, "unknown degrade key")),
            }
        }
        spec.validate().map_err(|e| Error::config("degrade", e.to_string()))?;
        Ok(spec)
    }
}

/// Kept frequencies along one axis, indexed in natural (unshifted) DFT order.
///
/// In centred order (DC at `n / 2`) the block spans `ceil(frac * n)` samples
/// starting at `n / 2 - m / 2`.
fn axis_keep(n: usize, frac: f64) -> Vec<bool> {
    let m = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let start = n / 2 - m / 2;
    (0..n)
        .map(|k| {
            let centred = (k + n / 2) % n;
            centred >= start && centred < start + m
        })
        .collect()
}

/// Restricts an axis mask to frequencies whose mirror is also kept.
fn symmetric_core(keep: &[bool]) -> Vec<bool> {
    let n = keep.len();
    (0..n).map(|k| keep[k] && keep[(n - k) % n]).collect()
}

/// Centred rectangular k-space mask in centred (fft-shifted) layout.
pub fn make_center_mask(grid: &ImageGrid, spec: &DegradeSpec) -> BinaryMask {
    let (w, h) = (grid.width, grid.height);
    let kx = axis_keep(w, spec.keep_x);
    let ky = axis_keep(h, spec.keep_y);
    // centred index c corresponds to natural index (c + n - n/2) % n
    let unshift = |c: usize, n: usize| (c + n - n / 2) % n;
    let values = (0..h)
        .flat_map(|cy| {
            let (kx, ky) = (&kx, &ky);
            (0..w).map(move |cx| ky[unshift(cy, h)] && kx[unshift(cx, w)])
        })
        .collect();
    BinaryMask::new(*grid, values).expect("mask sized from grid")
}

/// Orthonormal 2D DFT on a row-major buffer.
#[derive(Clone)]
pub struct Fft2d {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2d")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl Fft2d {
    pub fn new(grid: &ImageGrid) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width: grid.width,
            height: grid.height,
            row_fwd: planner.plan_fft_forward(grid.width),
            row_inv: planner.plan_fft_inverse(grid.width),
            col_fwd: planner.plan_fft_forward(grid.height),
            col_inv: planner.plan_fft_inverse(grid.height),
            scale: 1.0 / (grid.len() as f64).sqrt(),
        }
    }

    fn run(&self, data: &mut [Complex64], rows: &dyn Fft<f64>, cols: &dyn Fft<f64>) {
        let (w, h) = (self.width, self.height);
        assert_eq!(data.len(), w * h);
        rows.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            cols.process(&mut column);
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
        for v in data.iter_mut() {
            *v *= self.scale;
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, self.row_fwd.as_ref(), self.col_fwd.as_ref());
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, self.row_inv.as_ref(), self.col_inv.as_ref());
    }
}

/// Orthonormal forward DFT of a real image.
pub fn fft2(image: &ScalarMap) -> ComplexImage {
    let mut out = ComplexImage::from_real(image);
    Fft2d::new(image.grid()).forward(out.values_mut());
    out
}

/// Orthonormal inverse DFT.
pub fn ifft2(kspace: &ComplexImage) -> ComplexImage {
    let mut out = kspace.clone();
    Fft2d::new(kspace.grid()).inverse(out.values_mut());
    out
}

/// Simulated LR acquisition of `image`; returns the magnitude image.
pub fn phi(image: &ScalarMap, spec: &DegradeSpec) -> Result<ScalarMap> {
    spec.validate()?;
    let grid = *image.grid();
    let fft = Fft2d::new(&grid);
    let mut k: Vec<Complex64> = image.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut k);
    if spec.sigma > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.sigma / std::f64::consts::SQRT_2)
            .map_err(|e| Error::InvalidDegrade(e.to_string()))?;
        for v in k.iter_mut() {
            let re = normal.sample(&mut rng);
            let im = normal.sample(&mut rng);
            *v += Complex64::new(re, im);
        }
    }
    let kx = axis_keep(grid.width, spec.keep_x);
    let ky = axis_keep(grid.height, spec.keep_y);
    apply_axis_masks(&mut k, &kx, &ky);
    fft.inverse(&mut k);
    image.with_values(k.iter().map(|c| c.norm()).collect())
}

fn apply_axis_masks(k: &mut [Complex64], kx: &[bool], ky: &[bool]) {
    let w = kx.len();
    for (i, v) in k.iter_mut().enumerate() {
        if !(kx[i % w] && ky[i / w]) {
            *v = Complex64::new(0.0, 0.0);
        }
    }
}

/// Reusable noiseless low-pass projection for one grid and mask geometry.
#[derive(Debug, Clone)]
pub struct Lowpass {
    grid: ImageGrid,
    fft: Fft2d,
    keep_x: Vec<bool>,
    keep_y: Vec<bool>,
}

impl Lowpass {
    pub fn new(grid: &ImageGrid, spec: &DegradeSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            grid: *grid,
            fft: Fft2d::new(grid),
            keep_x: symmetric_core(&axis_keep(grid.width, spec.keep_x)),
            keep_y: symmetric_core(&axis_keep(grid.height, spec.keep_y)),
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    /// Same geometry as `other` (the noise level is irrelevant here).
    pub fn same_geometry(&self, other: &Lowpass) -> bool {
        self.grid == other.grid && self.keep_x == other.keep_x && self.keep_y == other.keep_y
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.grid.len());
        let mut k: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut k);
        apply_axis_masks(&mut k, &self.keep_x, &self.keep_y);
        self.fft.inverse(&mut k);
        k.iter().map(|c| c.re).collect()
    }
}

/// The noiseless acquisition `x -> IDFT(mask * DFT(x))` with the full
/// centred mask, kept complex. Its magnitude is `phi` at sigma = 0.
#[derive(Debug, Clone)]
pub struct MaskedFourier {
    grid: ImageGrid,
    fft: Fft2d,
    keep_x: Vec<bool>,
    keep_y: Vec<bool>,
}

impl MaskedFourier {
    pub fn new(grid: &ImageGrid, spec: &DegradeSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            grid: *grid,
            fft: Fft2d::new(grid),
            keep_x: axis_keep(grid.width, spec.keep_x),
            keep_y: axis_keep(grid.height, spec.keep_y),
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    /// Applies the operator to a real image.
    pub fn forward(&self, input: &[f64]) -> Vec<Complex64> {
        assert_eq!(input.len(), self.grid.len());
        let k: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.apply(k)
    }

    /// Adjoint of [`forward`](Self::forward) as a map from real images into
    /// complex images under the real inner product `Re<a, b>`.
    pub fn adjoint(&self, input: Vec<Complex64>) -> Vec<f64> {
        self.apply(input).iter().map(|c| c.re).collect()
    }

    fn apply(&self, mut k: Vec<Complex64>) -> Vec<Complex64> {
        assert_eq!(k.len(), self.grid.len());
        self.fft.forward(&mut k);
        apply_axis_masks(&mut k, &self.keep_x, &self.keep_y);
        self.fft.inverse(&mut k);
        k
    }
}

/// Noiseless low-pass of `image` (real part), sigma ignored.
pub fn lowpass(image: &ScalarMap, spec: &DegradeSpec) -> Result<ScalarMap> {
    let op = Lowpass::new(image.grid(), spec)?;
    image.with_values(op.apply(image.values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(grid: ImageGrid, seed: u64) -> ScalarMap {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        ScalarMap::new(grid, values, "r", "").unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn masked_fourier_magnitude_is_noiseless_phi() {
        let g = ImageGrid::square(16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.0..10.0)).collect();
        let map = ScalarMap::new(g, x.clone(), "x", "").unwrap();
        let spec = DegradeSpec::noiseless(0.5, 0.5);
        let op = MaskedFourier::new(&g, &spec).unwrap();
        let mag: Vec<f64> = op.forward(&x).iter().map(|c| c.norm()).collect();
        let reference = phi(&map, &spec).unwrap();
        for (a, b) in mag.iter().zip(reference.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_fourier_adjoint_identity() {
        let g = ImageGrid::new(12, 10, 1.0, 1.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let op = MaskedFourier::new(&g, &DegradeSpec::noiseless(0.5, 0.4)).unwrap();
        let x: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<Complex64> = (0..g.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let lhs: f64 = op.forward(&x).iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum();
        let rhs: f64 = x.iter().zip(op.adjoint(y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn full_mask_is_all_ones() {
        let g = ImageGrid::square(8).unwrap();
        assert_eq!(make_center_mask(&g, &DegradeSpec::noiseless(1.0, 1.0)).count(), 64);
    }

    #[test]
    fn quarter_mask_even_grid() {
        let g = ImageGrid::square(8).unwrap();
        let m = make_center_mask(&g, &DegradeSpec::noiseless(0.5, 0.5));
        assert_eq!(m.count(), 16);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(x, y), (2..6).contains(&x) && (2..6).contains(&y));
            }
        }
    }

    #[test]
    fn ceil_rule_on_odd_grid() {
        let g = ImageGrid::square(9).unwrap();
        let m = make_center_mask(&g, &DegradeSpec::noiseless(0.5, 0.5));
        assert_eq!(m.count(), 25);
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(m.get(x, y), (2..7).contains(&x) && (2..7).contains(&y));
            }
        }
        // symmetric about the DC bin at (4, 4)
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(m.get(x, y), m.get(8 - x, 8 - y));
            }
        }
    }

    #[test]
    fn identity_without_truncation_or_noise() {
        let g = ImageGrid::new(6, 5, 1.0, 1.0).unwrap();
        let img = random_map(g, 3);
        let out = phi(&img, &DegradeSpec::noiseless(1.0, 1.0)).unwrap();
        for (a, b) in out.values().iter().zip(img.values()) {
            assert!((a - b.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_survives() {
        let g = ImageGrid::square(16).unwrap();
        let img = ScalarMap::filled(g, 3.5, "c", "");
        for keep in [0.1, 0.5, 0.8] {
            let out = phi(&img, &DegradeSpec::noiseless(keep, keep)).unwrap();
            assert!(out.values().iter().all(|v| (v - 3.5).abs() < 1e-12));
            let lp = lowpass(&img, &DegradeSpec::noiseless(keep, keep)).unwrap();
            assert!(lp.values().iter().all(|v| (v - 3.5).abs() < 1e-12));
        }
    }

    #[test]
    fn high_frequency_sinusoid_removed() {
        let g = ImageGrid::square(32).unwrap();
        // frequency 12 cycles/width, the kept block spans -8..7
        let values = (0..32 * 32)
            .map(|i| (2.0 * std::f64::consts::PI * 12.0 * (i % 32) as f64 / 32.0).cos())
            .collect();
        let img = ScalarMap::new(g, values, "s", "").unwrap();
        let out = phi(&img, &DegradeSpec::noiseless(0.5, 0.5)).unwrap();
        assert!(out.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn phi_is_deterministic_per_seed() {
        let g = ImageGrid::square(16).unwrap();
        let img = random_map(g, 1);
        let spec = DegradeSpec { seed: 99, ..DegradeSpec::default() };
        let a = phi(&img, &spec).unwrap();
        let b = phi(&img, &spec).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = phi(&img, &spec.with_seed(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lowpass_projection_properties() {
        for (w, h, keep) in [(64, 64, 0.5), (9, 12, 0.4), (10, 7, 0.75)] {
            let g = ImageGrid::new(w, h, 1.0, 1.0).unwrap();
            let spec = DegradeSpec::noiseless(keep, keep);
            let op = Lowpass::new(&g, &spec).unwrap();
            let x = random_map(g, 11);
            let y = random_map(g, 12);
            let px = op.apply(x.values());
            let ppx = op.apply(&px);
            assert!(px.iter().zip(&ppx).all(|(a, b)| (a - b).abs() < 1e-10));
            let py = op.apply(y.values());
            assert!((dot(&px, y.values()) - dot(x.values(), &py)).abs() < 1e-10);
            assert!(dot(&px, &px).sqrt() <= dot(x.values(), x.values()).sqrt());
        }
    }

    #[test]
    fn phi_matches_lowpass_magnitude_for_positive_smooth_image() {
        let g = ImageGrid::square(32).unwrap();
        let values = (0..32 * 32)
            .map(|i| {
                let (x, y) = ((i % 32) as f64, (i / 32) as f64);
                10.0 + (2.0 * std::f64::consts::PI * x / 32.0).cos() + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * y / 32.0).sin()
            })
            .collect();
        let img = ScalarMap::new(g, values, "s", "").unwrap();
        let spec = DegradeSpec::noiseless(0.5, 0.5);
        let a = phi(&img, &spec).unwrap();
        let b = lowpass(&img, &spec).unwrap();
        for (p, l) in a.values().iter().zip(b.values()) {
            assert!((p - l.abs()).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_record_round_trip() {
        let spec = DegradeSpec { keep_x: 0.5, keep_y: 0.25, sigma: 0.1, seed: 42 };
        assert_eq!(spec.to_string().parse::<DegradeSpec>().unwrap(), spec);
        assert!("keep_x=0".parse::<DegradeSpec>().is_err());
        assert!("keep_x=0.5 sigma=-1".parse::<DegradeSpec>().is_err());
        assert!("foo=1".parse::<DegradeSpec>().is_err());
    }

    #[test]
    fn fft_round_trip_and_parseval() {
        let g = ImageGrid::new(12, 10, 1.0, 1.0).unwrap();
        let img = random_map(g, 5);
        let k = fft2(&img);
        let energy_k: f64 = k.values().iter().map(|c| c.norm_sqr()).sum();
        let energy_x = dot(img.values(), img.values());
        assert!((energy_k - energy_x).abs() < 1e-10 * energy_x);
        let back = ifft2(&k);
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }
}
