//! Raster storage shared by every stage: grids, real and complex images,
//! binary masks, PD/T1/T2 map bundles and the on-disk `.qmap` format.
//!
//! A map on disk is a pair of files. `<name>.qhdr` is UTF-8 text with one
//! `key=value` per line (`width`, `height`, `spacing_x`, `spacing_y`, `label`,
//! `units`, `dtype=f32le`, `order=row-major`). `<name>.qmap` holds
//! `width * height` little-endian binary32 values, row-major, no padding.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex64;

use crate::{Error, Result};

/// Voxel grid of a 2D slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    /// mm per voxel along x
    pub spacing_x: f64,
    /// mm per voxel along y
    pub spacing_y: f64,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, spacing_x: f64, spacing_y: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidGrid(format!(
                "dimensions {width}x{height}, both must be at least 2"
            )));
        }
        if !(spacing_x > 0.0 && spacing_x.is_finite() && spacing_y > 0.0 && spacing_y.is_finite())
        {
            return Err(Error::InvalidGrid(format!(
                "spacing ({spacing_x}, {spacing_y}) must be positive"
            )));
        }
        Ok(Self {
            width,
            height,
            spacing_x,
            spacing_y,
        })
    }

    /// Unit-spaced grid.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub(crate) fn ensure_same(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {}x{} ({}, {}) vs {}x{} ({}, {})",
                self.width,
                self.height,
                self.spacing_x,
                self.spacing_y,
                other.width,
                other.height,
                other.spacing_x,
                other.spacing_y
            )))
        }
    }
}

/// A real-valued image on a grid: a parameter map or a weighted contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    grid: ImageGrid,
    values: Vec<f64>,
    pub label: String,
    pub units: String,
}

impl ScalarMap {
    pub fn new(
        grid: ImageGrid,
        values: Vec<f64>,
        label: impl Into<String>,
        units: impl Into<String>,
    ) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            grid,
            values,
            label: label.into(),
            units: units.into(),
        })
    }

    pub fn filled(grid: ImageGrid, value: f64, label: impl Into<String>, units: impl Into<String>) -> Self {
        assert!(value.is_finite());
        Self {
            grid,
            values: vec![value; grid.len()],
            label: label.into(),
            units: units.into(),
        }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[self.grid.index(x, y)]
    }

    /// New map on the same grid with the same label/units but different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, values, self.label.clone(), self.units.clone())
    }

    pub fn relabel(mut self, label: impl Into<String>, units: impl Into<String>) -> Self {
        self.label = label.into();
        self.units = units.into();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Binary mask, used both for brain masks and k-space sampling masks.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: ImageGrid,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: ImageGrid, values: Vec<bool>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn full(grid: ImageGrid) -> Self {
        Self {
            grid,
            values: vec![true; grid.len()],
        }
    }

    pub fn empty(grid: ImageGrid) -> Self {
        Self {
            grid,
            values: vec![false; grid.len()],
        }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[self.grid.index(x, y)]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Indices of set voxels in row-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }

    pub fn to_map(&self) -> ScalarMap {
        ScalarMap {
            grid: self.grid,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
            label: "mask".into(),
            units: "".into(),
        }
    }

    /// Interprets a stored 0/1 map as a mask; any other value is rejected.
    pub fn from_map(map: &ScalarMap) -> Result<Self> {
        let values = map
            .values()
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v == 1.0 {
                    Ok(true)
                } else if v == 0.0 {
                    Ok(false)
                } else {
                    Err(Error::InvalidMaps(format!(
                        "mask value {v} at index {index} is not 0 or 1"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(*map.grid(), values)
    }
}

/// Complex image, the intermediate of k-space processing.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    grid: ImageGrid,
    values: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(grid: ImageGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    pub fn from_real(map: &ScalarMap) -> Self {
        Self {
            grid: *map.grid(),
            values: map.values().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.im).collect()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }
}

/// Upper bounds on the three parameter channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBounds {
    pub pd_max: f64,
    pub t1_max: f64,
    pub t2_max: f64,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            pd_max: 160.0,
            t1_max: 4300.0,
            t2_max: 2000.0,
        }
    }
}

/// Co-registered PD (a.u.), T1 (ms) and T2 (ms) maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    pub pd: ScalarMap,
    pub t1: ScalarMap,
    pub t2: ScalarMap,
}

impl ParametricMaps {
    pub fn new(pd: ScalarMap, t1: ScalarMap, t2: ScalarMap) -> Result<Self> {
        pd.grid().ensure_same(t1.grid(), "pd vs t1")?;
        pd.grid().ensure_same(t2.grid(), "pd vs t2")?;
        if let Some(i) = pd.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidMaps(format!("negative pd at voxel {i}")));
        }
        Ok(Self { pd, t1, t2 })
    }

    /// Builds maps from raw channel vectors with the conventional labels.
    pub fn from_channels(grid: ImageGrid, pd: Vec<f64>, t1: Vec<f64>, t2: Vec<f64>) -> Result<Self> {
        Self::new(
            ScalarMap::new(grid, pd, "PD", "a.u.")?,
            ScalarMap::new(grid, t1, "T1", "ms")?,
            ScalarMap::new(grid, t2, "T2", "ms")?,
        )
    }

    /// Uniform maps over the whole grid.
    pub fn uniform(grid: ImageGrid, pd: f64, t1: f64, t2: f64) -> Result<Self> {
        let n = grid.len();
        Self::from_channels(grid, vec![pd; n], vec![t1; n], vec![t2; n])
    }

    pub fn grid(&self) -> &ImageGrid {
        self.pd.grid()
    }

    pub fn channels(&self) -> [&ScalarMap; 3] {
        [&self.pd, &self.t1, &self.t2]
    }

    /// Checks positivity of relaxation times inside `mask` and the upper bounds everywhere.
    pub fn validate(&self, mask: &BinaryMask, bounds: &ParamBounds) -> Result<()> {
        self.grid().ensure_same(mask.grid(), "maps vs mask")?;
        for (name, map, max) in [
            ("pd", &self.pd, bounds.pd_max),
            ("t1", &self.t1, bounds.t1_max),
            ("t2", &self.t2, bounds.t2_max),
        ] {
            if let Some(i) = map.values().iter().position(|&v| v > max) {
                return Err(Error::InvalidMaps(format!(
                    "{name} value {} at voxel {i} exceeds bound {max}",
                    map.values()[i]
                )));
            }
        }
        for (name, map) in [("t1", &self.t1), ("t2", &self.t2)] {
            let bad = map
                .values()
                .iter()
                .zip(mask.values())
                .position(|(&v, &m)| m && v <= 0.0);
            if let Some(i) = bad {
                return Err(Error::InvalidMaps(format!(
                    "{name} is non-positive at masked voxel {i}"
                )));
            }
        }
        Ok(())
    }

    /// Each channel masked with fill 0.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Self> {
        Self::new(
            apply_mask(&self.pd, mask, 0.0)?,
            apply_mask(&self.t1, mask, 0.0)?,
            apply_mask(&self.t2, mask, 0.0)?,
        )
    }
}

/// Output equals `map` where the mask is set and `fill` elsewhere.
pub fn apply_mask(map: &ScalarMap, mask: &BinaryMask, fill: f64) -> Result<ScalarMap> {
    map.grid().ensure_same(mask.grid(), "apply_mask")?;
    if !fill.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let values = map
        .values()
        .iter()
        .zip(mask.values())
        .map(|(&v, &m)| if m { v } else { fill })
        .collect();
    map.with_values(values)
}

/// Resolves the header and payload paths of a map, accepting the base name
/// or either file of the pair.
pub fn map_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("qmap") | Some("qhdr") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut hdr = base.clone().into_os_string();
    hdr.push(".qhdr");
    let mut payload = base.into_os_string();
    payload.push(".qmap");
    (PathBuf::from(hdr), PathBuf::from(payload))
}

fn header_text(map: &ScalarMap) -> Result<String> {
    for (key, value) in [("label", &map.label), ("units", &map.units)] {
        if value.contains('\n') || value.contains('\r') {
            return Err(Error::MalformedHeader {
                path: PathBuf::new(),
                reason: format!("{key} contains a line break"),
            });
        }
    }
    let g = map.grid();
    Ok(format!(
        "width={}\nheight={}\nspacing_x={}\nspacing_y={}\nlabel={}\nunits={}\ndtype=f32le\norder=row-major\n",
        g.width, g.height, g.spacing_x, g.spacing_y, map.label, map.units
    ))
}

/// Writes `<name>.qhdr` and `<name>.qmap`, replacing existing files.
pub fn write_map(map: &ScalarMap, path: impl AsRef<Path>) -> Result<()> {
    let (hdr_path, payload_path) = map_paths(path.as_ref());
    let header = header_text(map).map_err(|e| match e {
        Error::MalformedHeader { reason, .. } => Error::MalformedHeader {
            path: hdr_path.clone(),
            reason,
        },
        other => other,
    })?;
    let mut payload = Vec::with_capacity(map.values().len() * 4);
    for (index, &v) in map.values().iter().enumerate() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(Error::OutOfRange { index, value: v });
        }
        payload.extend_from_slice(&single.to_le_bytes());
    }
    fs::write(&hdr_path, header).map_err(|e| Error::io(&hdr_path, e))?;
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    Ok(())
}

const HEADER_KEYS: [&str; 8] = [
    "width",
    "height",
    "spacing_x",
    "spacing_y",
    "label",
    "units",
    "dtype",
    "order",
];

fn parse_header(text: &str, path: &Path) -> Result<(ImageGrid, String, String)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("line `{line}` is not key=value")))?;
        if !HEADER_KEYS.contains(&key) {
            return Err(malformed(format!("unknown key `{key}`")));
        }
        if fields.insert(key, value).is_some() {
            return Err(malformed(format!("duplicate key `{key}`")));
        }
    }
    if let Some(missing) = HEADER_KEYS.iter().find(|k| !fields.contains_key(*k)) {
        return Err(malformed(format!("missing key `{missing}`")));
    }
    if fields["dtype"] != "f32le" {
        return Err(malformed(format!("unsupported dtype `{}`", fields["dtype"])));
    }
    if fields["order"] != "row-major" {
        return Err(malformed(format!("unsupported order `{}`", fields["order"])));
    }
    let int = |key: &str| {
        fields[key]
            .parse::<usize>()
            .map_err(|_| malformed(format!("{key} `{}` is not an integer", fields[key])))
    };
    let real = |key: &str| {
        fields[key]
            .parse::<f64>()
            .map_err(|_| malformed(format!("{key} `{}` is not a number", fields[key])))
    };
    let grid = ImageGrid::new(int("width")?, int("height")?, real("spacing_x")?, real("spacing_y")?)
        .map_err(|e| malformed(e.to_string()))?;
    Ok((grid, fields["label"].to_string(), fields["units"].to_string()))
}

/// Reads a map written by [`write_map`].
pub fn read_map(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let (hdr_path, payload_path) = map_paths(path.as_ref());
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let (grid, label, units) = parse_header(&text, &hdr_path)?;
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = grid.len() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            path: payload_path,
            expected,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ScalarMap::new(grid, values, label, units)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::from_map(&read_map(path)?)
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_map(&mask.to_map(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> ImageGrid {
        ImageGrid::new(w, h, 1.0, 1.0).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(ImageGrid::new(1, 4, 1.0, 1.0).is_err());
        assert!(ImageGrid::new(4, 4, 0.0, 1.0).is_err());
        assert!(ImageGrid::new(4, 4, 1.0, -2.0).is_err());
    }

    #[test]
    fn scalar_map_rejects_nan_and_bad_length() {
        let g = grid(2, 2);
        assert!(matches!(
            ScalarMap::new(g, vec![0.0; 3], "x", ""),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            ScalarMap::new(g, vec![0.0, f64::NAN, 0.0, 0.0], "x", ""),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn ramp_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(4, 4);
        let map = ScalarMap::new(g, (0..16).map(|i| i as f64 * 0.25).collect(), "ramp", "a.u.").unwrap();
        let path = dir.path().join("ramp");
        write_map(&map, &path).unwrap();
        let back = read_map(&path).unwrap();
        assert_eq!(back, map);
        // both file names resolve to the same pair
        assert_eq!(read_map(dir.path().join("ramp.qmap")).unwrap(), map);
    }

    #[test]
    fn zeros_payload_and_header_lines() {
        let dir = tempfile::tempdir().unwrap();
        let map = ScalarMap::filled(grid(2, 2), 0.0, "T1", "ms");
        let path = dir.path().join("z.qmap");
        write_map(&map, &path).unwrap();
        let payload = fs::read(dir.path().join("z.qmap")).unwrap();
        assert_eq!(payload, vec![0u8; 16]);
        let header = fs::read_to_string(dir.path().join("z.qhdr")).unwrap();
        let lines: Vec<&str> = header.lines().collect();
        assert!(lines.contains(&"label=T1"));
        assert!(lines.contains(&"units=ms"));
        assert!(lines.contains(&"dtype=f32le"));
        assert!(lines.contains(&"order=row-major"));
    }

    #[test]
    fn overwrite_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        write_map(&ScalarMap::filled(grid(3, 3), 1.0, "a", ""), &path).unwrap();
        let second = ScalarMap::filled(grid(2, 2), 5.0, "b", "ms");
        write_map(&second, &path).unwrap();
        assert_eq!(read_map(&path).unwrap(), second);
    }

    #[test]
    fn size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(
            dir.path().join("bad.qhdr"),
            "width=3\nheight=3\nspacing_x=1\nspacing_y=1\nlabel=x\nunits=\ndtype=f32le\norder=row-major\n",
        )
        .unwrap();
        fs::write(dir.path().join("bad.qmap"), vec![0u8; 8 * 4]).unwrap();
        assert!(matches!(
            read_map(&path),
            Err(Error::PayloadSize { expected: 36, actual: 32, .. })
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan");
        write_map(&ScalarMap::filled(grid(2, 2), 1.0, "x", ""), &path).unwrap();
        let mut bytes = fs::read(dir.path().join("nan.qmap")).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(dir.path().join("nan.qmap"), bytes).unwrap();
        assert!(matches!(read_map(&path), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn malformed_headers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = "width=2\nheight=2\nspacing_x=1\nspacing_y=1\nlabel=x\nunits=\n";
        let cases = [
            format!("{base}dtype=f64le\norder=row-major\n"),
            format!("{base}dtype=f32le\norder=col-major\n"),
            format!("{base}dtype=f32le\n"),
            format!("{base}dtype=f32le\norder=row-major\nextra=1\n"),
            format!("{base}dtype=f32le\norder=row-major\nwidth=2\n"),
            "width=two\nheight=2\nspacing_x=1\nspacing_y=1\nlabel=x\nunits=\ndtype=f32le\norder=row-major\n".to_string(),
            "garbage line\n".to_string(),
        ];
        for (i, text) in cases.iter().enumerate() {
            let path = dir.path().join(format!("h{i}"));
            fs::write(dir.path().join(format!("h{i}.qhdr")), text).unwrap();
            fs::write(dir.path().join(format!("h{i}.qmap")), vec![0u8; 16]).unwrap();
            assert!(
                matches!(read_map(&path), Err(Error::MalformedHeader { .. })),
                "case {i} accepted"
            );
        }
    }

    #[test]
    fn overflowing_value_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let map = ScalarMap::new(grid(2, 2), vec![0.0, 1e300, 0.0, 0.0], "x", "").unwrap();
        assert!(matches!(
            write_map(&map, dir.path().join("o")),
            Err(Error::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn mask_application() {
        let g = grid(4, 4);
        let map = ScalarMap::filled(g, 7.0, "c", "");
        assert_eq!(apply_mask(&map, &BinaryMask::full(g), 0.0).unwrap(), map);
        assert!(apply_mask(&map, &BinaryMask::empty(g), 0.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let checker = BinaryMask::new(g, (0..16).map(|i| (i % 4 + i / 4) % 2 == 0).collect()).unwrap();
        let out = apply_mask(&map, &checker, 0.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (x + y) % 2 == 0 { 7.0 } else { 0.0 };
                assert_eq!(out.get(x, y), expect);
            }
        }
        assert!(apply_mask(&map, &BinaryMask::full(grid(2, 2)), 0.0).is_err());
    }

    #[test]
    fn validation_rejects_nonpositive_relaxation_inside_mask() {
        let g = grid(2, 2);
        let maps = ParametricMaps::from_channels(
            g,
            vec![50.0; 4],
            vec![800.0, 0.0, 800.0, 800.0],
            vec![80.0; 4],
        )
        .unwrap();
        let full = BinaryMask::full(g);
        assert!(maps.validate(&full, &ParamBounds::default()).is_err());
        let partial = BinaryMask::new(g, vec![true, false, true, true]).unwrap();
        maps.validate(&partial, &ParamBounds::default()).unwrap();
        let over = ParametricMaps::uniform(g, 200.0, 800.0, 80.0).unwrap();
        assert!(over.validate(&full, &ParamBounds::default()).is_err());
        assert!(ParametricMaps::uniform(g, -1.0, 800.0, 80.0).is_err());
    }

    #[test]
    fn mask_map_round_trip() {
        let g = grid(3, 2);
        let mask = BinaryMask::new(g, vec![true, false, true, true, false, false]).unwrap();
        assert_eq!(BinaryMask::from_map(&mask.to_map()).unwrap(), mask);
        let bad = ScalarMap::filled(g, 0.5, "mask", "");
        assert!(BinaryMask::from_map(&bad).is_err());
    }

    proptest! {
        #[test]
        fn write_read_identity(
            w in 2usize..9,
            h in 2usize..9,
            seed in proptest::collection::vec(-1.0e30f32..1.0e30f32, 64),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let g = grid(w, h);
            let values: Vec<f64> = seed.iter().cycle().take(g.len()).map(|&v| v as f64).collect();
            let map = ScalarMap::new(g, values, "p", "u").unwrap();
            let path = dir.path().join("p");
            write_map(&map, &path).unwrap();
            let back = read_map(&path).unwrap();
            prop_assert_eq!(back.values().len(), map.values().len());
            for (a, b) in back.values().iter().zip(map.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn apply_mask_idempotent(bits in proptest::collection::vec(any::<bool>(), 16), fill in -5.0f64..5.0) {
            let g = grid(4, 4);
            let mask = BinaryMask::new(g, bits).unwrap();
            let map = ScalarMap::new(g, (0..16).map(|i| i as f64).collect(), "m", "").unwrap();
            let once = apply_mask(&map, &mask, fill).unwrap();
            let twice = apply_mask(&once, &mask, fill).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
