//! Pipeline configuration and the `phantom`, `superres`, `evaluate` and
//! `rank` subcommands.
//!
//! The config file uses the same `key=value` lines as map headers, grouped
//! under `[section]` markers. Blank lines and lines starting with `#` are
//! ignored. Every key is optional:
//!
//! ```text
//! [paths]
//! data=run/        # phantom outputs read by superres and evaluate
//! sr=run/          # directory holding sr_*.qmap for evaluate
//!
//! [phantom]
//! size=128
//! seed=1
//! texture_amplitude=0.05
//!
//! [degrade]
//! keep_x=0.5
//! keep_y=0.5
//! sigma=0.1
//! seed=2
//!
//! [sr]
//! alpha=1000
//! guides=both
//! ```
//!
//! Subcommands read from `paths.data`/`paths.sr` when given and from the
//! output directory otherwise, so `phantom`, `superres` and `evaluate` can
//! share one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::degrade::DegradeSpec;
use crate::fit::FitSettings;
use crate::metrics::{default_dynamic_ranges, rank_models, MetricReport, RankedModel};
use crate::models::{evaluate_masked, standard_contrast_set, AcquisitionSpec};
use crate::phantom::{contrast_seed, generate_phantom, guide_acquisition, synthesize_dataset, PhantomSpec};
use crate::raster::{read_map, read_mask, write_map, write_mask, ImageGrid, ParamBounds, ParametricMaps};
use crate::srmap::{
    solve_sr, DataModel, Guide, GuideSubset, LrContrast, SolveOutcome, SolverMethod, SolverSettings, SrProblem,
};
use crate::{Error, Result};

pub const MAP_FILES: [&str; 3] = ["pd", "t1", "t2"];
pub const BASELINE_FILES: [&str; 3] = ["ql_pd", "ql_t1", "ql_t2"];
pub const SR_FILES: [&str; 3] = ["sr_pd", "sr_t1", "sr_t2"];
pub const MASK_FILE: &str = "mask";
pub const CONVERGENCE_LOG: &str = "convergence.tsv";
pub const REPORT_FILE: &str = "report.tsv";

pub fn lr_file(index: usize) -> String {
    format!("c_lr_{index:02}")
}

pub fn guide_file(name: &str) -> String {
    format!("guide_{name}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub sr: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    pub seed: u64,
    pub texture_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 128,
            seed: 1,
            texture_amplitude: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrConfig {
    pub alpha: f64,
    /// Noise level of the data term; defaults to the degradation sigma.
    pub sigma: Option<f64>,
    pub guides: GuideSubset,
    pub data_model: DataModel,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            alpha: 1000.0,
            sigma: None,
            guides: GuideSubset::Both,
            data_model: DataModel::default(),
        }
    }
}

/// T2-FLAIR acquisition synthesized from both map sets during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlairConfig {
    pub tr: f64,
    pub te: f64,
    pub ti: f64,
}

impl Default for FlairConfig {
    fn default() -> Self {
        Self {
            tr: 9000.0,
            te: 120.0,
            ti: 2370.0,
        }
    }
}

impl FlairConfig {
    pub fn acquisition(&self) -> AcquisitionSpec {
        AcquisitionSpec::T2Flair {
            tr: self.tr,
            te: self.te,
            ti: self.ti,
            scale_by_pd: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateConfig {
    pub model: String,
    pub dynamic_ranges: [f64; 3],
    pub flair: Option<FlairConfig>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            model: "sr".into(),
            dynamic_ranges: default_dynamic_ranges(),
            flair: Some(FlairConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub phantom: PhantomConfig,
    pub degrade: DegradeSpec,
    pub fit: FitSettings,
    pub sr: SrConfig,
    pub solver: SolverSettings,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            phantom: PhantomConfig::default(),
            degrade: DegradeSpec {
                seed: 2,
                ..DegradeSpec::default()
            },
            fit: FitSettings::default(),
            sr: SrConfig::default(),
            solver: SolverSettings::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

const SECTIONS: [&str; 8] = ["paths", "phantom", "degrade", "fit", "sr", "solver", "guides", "evaluate"];

fn parse_value<T: FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse {value:?}")))
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(field, format!("expected true or false, got {value:?}"))),
    }
}

fn parse_triple(field: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::config(field, "expected three comma-separated numbers"));
    }
    Ok([
        parse_value(field, parts[0])?,
        parse_value(field, parts[1])?,
        parse_value(field, parts[2])?,
    ])
}

/// Turns a validation failure of a sub-config into a config error.
fn as_config(field: &str, result: Result<()>) -> Result<()> {
    result.map_err(|e| if e.is_config() { e } else { Error::config(field, e.to_string()) })
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<(String, String), String> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(format!("[{name}]"), format!("unknown section on line {}", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", n + 1), format!("`{line}` is not key=value")));
            };
            let Some(sec) = &section else {
                return Err(Error::config(key.trim(), "key appears before any [section]"));
            };
            // trailing comments after values
            let value = value.split(" #").next().unwrap_or("").trim();
            let key = (sec.clone(), key.trim().to_string());
            if entries.contains_key(&key) {
                return Err(Error::config(format!("{}.{}", key.0, key.1), "duplicate key"));
            }
            entries.insert(key, value.to_string());
        }
        let mut config = Self::default();
        for ((sec, key), value) in &entries {
            config.set(sec, key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let field = format!("{section}.{key}");
        let f = field.as_str();
        match (section, key) {
            ("paths", "data") => self.paths.data = Some(PathBuf::from(value)),
            ("paths", "sr") => self.paths.sr = Some(PathBuf::from(value)),
            ("phantom", "size") => self.phantom.size = parse_value(f, value)?,
            ("phantom", "seed") => self.phantom.seed = parse_value(f, value)?,
            ("phantom", "texture_amplitude") => self.phantom.texture_amplitude = parse_value(f, value)?,
            ("degrade", "keep_x") => self.degrade.keep_x = parse_value(f, value)?,
            ("degrade", "keep_y") => self.degrade.keep_y = parse_value(f, value)?,
            ("degrade", "keep") => {
                let keep = parse_value(f, value)?;
                self.degrade.keep_x = keep;
                self.degrade.keep_y = keep;
            }
            ("degrade", "sigma") => self.degrade.sigma = parse_value(f, value)?,
            ("degrade", "seed") => self.degrade.seed = parse_value(f, value)?,
            ("fit", "t1_grid_count") => self.fit.t1_grid.count = parse_value(f, value)?,
            ("fit", "t1_grid_min") => self.fit.t1_grid.min = parse_value(f, value)?,
            ("fit", "t2_grid_count") => self.fit.t2_grid.count = parse_value(f, value)?,
            ("fit", "t2_grid_min") => self.fit.t2_grid.min = parse_value(f, value)?,
            ("fit", "refine_iters") => self.fit.refine_iters = parse_value(f, value)?,
            ("fit", "tol") => self.fit.tol = parse_value(f, value)?,
            ("sr", "alpha") => self.sr.alpha = parse_value(f, value)?,
            ("sr", "sigma") => self.sr.sigma = Some(parse_value(f, value)?),
            ("sr", "guides") | ("guides", "subset") => {
                self.sr.guides = value.parse().map_err(|_| {
                    Error::config(f, format!("unknown guide subset {value:?} (expected none, t1w, t2w or both)"))
                })?
            }
            ("sr", "data_model") => {
                self.sr.data_model = value
                    .parse()
                    .map_err(|_| Error::config(f, format!("unknown data model {value:?} (expected magnitude or lowpass)")))?
            }
            ("solver", "method") => {
                self.solver.method = value.parse::<SolverMethod>().map_err(|_| {
                    Error::config(f, format!("unknown method {value:?} (expected levenberg_marquardt or projected_gradient)"))
                })?
            }
            ("solver", "max_iters") => self.solver.max_iters = parse_value(f, value)?,
            ("solver", "step") => self.solver.step = parse_value(f, value)?,
            ("solver", "tol") => self.solver.tol = parse_value(f, value)?,
            ("solver", "patience") => self.solver.patience = parse_value(f, value)?,
            ("solver", "param_scales") => self.solver.param_scales = Some(parse_triple(f, value)?),
            ("solver", "armijo") => self.solver.armijo = parse_value(f, value)?,
            ("solver", "max_backtracks") => self.solver.max_backtracks = parse_value(f, value)?,
            ("solver", "damping") => self.solver.damping = parse_value(f, value)?,
            ("solver", "cg_iters") => self.solver.cg_iters = parse_value(f, value)?,
            ("solver", "cg_tol") => self.solver.cg_tol = parse_value(f, value)?,
            ("evaluate", "model") => {
                if value.is_empty() || value.contains(char::is_whitespace) {
                    return Err(Error::config(f, "model name must be non-empty without whitespace"));
                }
                self.evaluate.model = value.to_string()
            }
            ("evaluate", "dynamic_ranges") => self.evaluate.dynamic_ranges = parse_triple(f, value)?,
            ("evaluate", "flair") => {
                self.evaluate.flair = if parse_bool(f, value)? {
                    Some(self.evaluate.flair.unwrap_or_default())
                } else {
                    None
                }
            }
            ("evaluate", k @ ("flair_tr" | "flair_te" | "flair_ti")) => {
                let v = parse_value(f, value)?;
                let flair = self.evaluate.flair.get_or_insert_with(FlairConfig::default);
                match k {
                    "flair_tr" => flair.tr = v,
                    "flair_te" => flair.te = v,
                    _ => flair.ti = v,
                }
            }
            _ => return Err(Error::config(f, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantom.size < 16 {
            return Err(Error::config("phantom.size", "must be at least 16"));
        }
        if !(self.phantom.texture_amplitude >= 0.0 && self.phantom.texture_amplitude < 1.0) {
            return Err(Error::config("phantom.texture_amplitude", "must lie in [0, 1)"));
        }
        as_config("degrade", self.degrade.validate())?;
        as_config("fit", self.fit.validate(&ParamBounds::default()))?;
        if !(self.sr.alpha >= 0.0 && self.sr.alpha.is_finite()) {
            return Err(Error::config("sr.alpha", "must be >= 0"));
        }
        if !(self.sr_sigma() > 0.0 && self.sr_sigma().is_finite()) {
            return Err(Error::config("sr.sigma", "must be > 0 (set it explicitly when degrade.sigma is 0)"));
        }
        as_config("solver", self.solver.validate())?;
        if self.evaluate.dynamic_ranges.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("evaluate.dynamic_ranges", "must be positive"));
        }
        if let Some(flair) = &self.evaluate.flair {
            as_config("evaluate.flair", flair.acquisition().validate())?;
        }
        Ok(())
    }

    /// Applies a `--seed` override: the phantom gets `seed`, the noise `seed + 1`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.seed = seed;
        self.degrade.seed = seed.wrapping_add(1);
        self
    }

    pub fn sr_sigma(&self) -> f64 {
        self.sr.sigma.unwrap_or(self.degrade.sigma)
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let grid = ImageGrid::square(self.phantom.size)?;
        let mut spec = PhantomSpec::standard(grid, self.phantom.seed);
        spec.texture_amplitude = self.phantom.texture_amplitude;
        Ok(spec)
    }

    fn data_dir<'a>(&'a self, out: &'a Path) -> &'a Path {
        self.paths.data.as_deref().unwrap_or(out)
    }

    fn sr_dir<'a>(&'a self, out: &'a Path) -> &'a Path {
        self.paths.sr.as_deref().unwrap_or(out)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_maps(maps: &ParametricMaps, names: [&str; 3], dir: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    for (map, name) in maps.channels().into_iter().zip(names) {
        let path = dir.join(format!("{name}.qmap"));
        write_map(&map.clone().relabel(name, map.units.clone()), &path)?;
        written.push(path);
    }
    Ok(())
}

fn read_maps(dir: &Path, names: [&str; 3]) -> Result<ParametricMaps> {
    ParametricMaps::new(
        read_map(dir.join(names[0]))?,
        read_map(dir.join(names[1]))?,
        read_map(dir.join(names[2]))?,
    )
}

/// Generates the phantom and its synthetic dataset and writes every map into
/// `out`. Returns the written payload paths in a fixed order.
pub fn cmd_phantom(config: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (q_h, mask) = generate_phantom(&config.phantom_spec()?)?;
    let data = synthesize_dataset(&q_h, &mask, &config.degrade, &config.fit)?;
    ensure_dir(out)?;
    let mut written = Vec::new();
    write_maps(&q_h, MAP_FILES, out, &mut written)?;
    for (i, c) in data.lr_contrasts.iter().enumerate() {
        let path = out.join(format!("{}.qmap", lr_file(i)));
        write_map(&c.image, &path)?;
        written.push(path);
    }
    let path = out.join(format!("{MASK_FILE}.qmap"));
    write_mask(&mask, &path)?;
    written.push(path);
    for g in &data.guides {
        let path = out.join(format!("{}.qmap", guide_file(&g.name)));
        write_map(&g.image, &path)?;
        written.push(path);
    }
    write_maps(&data.q_l, BASELINE_FILES, out, &mut written)?;
    Ok(written)
}

/// Builds the SR problem from the files of a `phantom` run.
pub fn load_problem(config: &PipelineConfig, data_dir: &Path) -> Result<SrProblem> {
    let mask = read_mask(data_dir.join(MASK_FILE))?;
    let q_l = read_maps(data_dir, BASELINE_FILES)?;
    let lr_contrasts = standard_contrast_set()
        .into_iter()
        .enumerate()
        .map(|(i, acquisition)| {
            Ok(LrContrast {
                image: read_map(data_dir.join(lr_file(i)))?,
                acquisition,
                degrade: config.degrade.with_seed(contrast_seed(config.degrade.seed, i)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let guides = config
        .sr
        .guides
        .names()
        .iter()
        .map(|name| {
            Ok(Guide {
                name: name.to_string(),
                image: read_map(data_dir.join(guide_file(name)))?,
                acquisition: guide_acquisition(name).expect("standard guide name"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SrProblem::new(q_l, lr_contrasts, guides, mask, config.sr.alpha, config.sr_sigma())?
        .with_data_model(config.sr.data_model)
}

/// Solves the SR problem and writes `sr_*.qmap` plus the convergence log.
pub fn cmd_superres(config: &PipelineConfig, out: &Path) -> Result<SolveOutcome> {
    let problem = load_problem(config, config.data_dir(out))?;
    let outcome = solve_sr(&problem, &config.solver)?;
    ensure_dir(out)?;
    let mut written = Vec::new();
    write_maps(&outcome.maps, SR_FILES, out, &mut written)?;
    let log = out.join(CONVERGENCE_LOG);
    fs::write(&log, outcome.history_tsv()).map_err(|e| Error::io(&log, e))?;
    Ok(outcome)
}

/// Scores the SR maps and the `Q_l` baseline against the ground truth, plus
/// a synthesized FLAIR row when configured, and writes `report.tsv`.
pub fn cmd_evaluate(config: &PipelineConfig, out: &Path) -> Result<MetricReport> {
    let data_dir = config.data_dir(out);
    let mask = read_mask(data_dir.join(MASK_FILE))?;
    let reference = read_maps(data_dir, MAP_FILES)?;
    let baseline = read_maps(data_dir, BASELINE_FILES)?;
    let candidate = read_maps(config.sr_dir(out), SR_FILES)?;
    let mut report = MetricReport::for_maps(
        config.evaluate.model.clone(),
        &candidate,
        &baseline,
        &reference,
        &mask,
        config.evaluate.dynamic_ranges,
    )?;
    if let Some(flair) = &config.evaluate.flair {
        let acq = flair.acquisition();
        let truth = evaluate_masked(&acq, &reference, &mask)?;
        let inside: Vec<f64> = mask.indices().iter().map(|&v| truth.values()[v]).collect();
        let range = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - inside.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(range > 0.0) {
            return Err(Error::Metric("reference FLAIR is constant over the mask".into()));
        }
        report.push_scored(
            "flair",
            &evaluate_masked(&acq, &candidate, &mask)?,
            &evaluate_masked(&acq, &baseline, &mask)?,
            &truth,
            &mask,
            range,
        )?;
    }
    ensure_dir(out)?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Reads report files and ranks their models.
pub fn cmd_rank(paths: &[PathBuf]) -> Result<Vec<RankedModel>> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            MetricReport::from_tsv(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    rank_models(&reports)
}

pub fn ranking_table(ranked: &[RankedModel]) -> String {
    let mut out = String::from("rank\tmodel\ttotal\n");
    for (i, r) in ranked.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\n", i + 1, r.model, r.total));
    }
    out
}

/// Process exit code for a failed subcommand.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        2
    } else {
        1
    }
}
