//! End-to-end pipeline: configuration, run, report and the retention probe.
//!
//! Stages run in order: load → plan → encode → stitch → bank → global →
//! decode. Geometry is validated before any image is touched.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{encode_global, encode_patch, BackboneParams, PatchFeatureGrid};
use crate::decoder::{retention_score, run_decoder, validate_inject_layers, Trace};
use crate::dump;
use crate::exec::Exec;
use crate::fusion::{project, FusionParams, ProjectedTokens};
use crate::image::{synth_image, Image};
use crate::linalg::Matrix;
use crate::planner::{
    enumerate_windows, plan_scale, validate_cross_scale, GridConfig, PlanError, PlanRow, PlanTable, ScalePlan,
};
use crate::stack::{build_bank, StackBank};
use crate::stitch::{overlap_add, FeatureCanvas};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("geometry: {0}")]
    Geometry(#[from] PlanError),
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    fn stage(stage: &'static str, e: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }

    /// 2 for configuration errors, 3 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Desk-scale: 96 px canvas, 8 px patches, 32 px encoder input.
    Toy,
    /// 672 px canvas, 14 px patches, 336 px encoder input.
    PaperGeometry,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper-geometry" => Ok(Profile::PaperGeometry),
            other => Err(format!("unknown profile `{other}` (expected toy or paper-geometry)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackLength {
    /// `T_v` equals the global token count.
    DeriveFromGlobal,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub canvas_side: usize,
    pub patch_side: usize,
    pub min_token_width: usize,
    pub window_widths: Vec<f64>,

    pub encoder_seed: u64,
    pub d_vit: usize,
    pub encoder_layers: Vec<usize>,
    pub encoder_side: usize,
    pub low_side: usize,

    pub downsample: usize,
    pub stack_length: StackLength,

    pub d_llm: usize,
    pub decoder_layers: usize,
    pub mix_width: usize,
    pub inject_layers: Vec<usize>,
    /// One value for every layer, or one per decoder layer.
    pub residual_scales: Vec<f64>,
    pub fusion_seed: u64,
    pub text_tokens: usize,

    pub input: Option<PathBuf>,
    pub synth_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub report_format: ReportFormat,
    pub dump_canvases: bool,
    pub plan_only: bool,
}

/// Keys accepted in a config file, with a one-line description each.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("canvas_side", "canvas side S in pixels"),
    ("patch_side", "patch side p in pixels"),
    ("min_token_width", "smallest admissible window width d_min in tokens (even)"),
    ("window_widths", "comma-separated nominal window widths in pixels"),
    ("encoder_seed", "seed for the toy encoder parameters"),
    ("d_vit", "encoder feature width"),
    ("encoder_layers", "comma-separated encoder layer ids used for detail stacks"),
    ("encoder_side", "side every window is resized to before encoding"),
    ("low_side", "side of the low-resolution global view"),
    ("downsample", "phase subsampling factor f"),
    ("stack_length", "`derive` (T_v from the global view) or an explicit token count"),
    ("d_llm", "decoder width"),
    ("decoder_layers", "number of decoder layers"),
    ("mix_width", "causal token-mixing window of each decoder layer"),
    ("inject_layers", "comma-separated decoder layers that receive details; `none` for no injection"),
    ("residual_scale", "residual scale s_l: one value, or one per decoder layer"),
    ("fusion_seed", "seed for projector, decoder, router and text embeddings"),
    ("text_tokens", "number of text positions before the visual slice"),
    ("input", "path of a binary PPM input image; empty for a synthetic image"),
    ("synth_seed", "seed of the synthetic input image"),
    ("out", "output directory for CSV report files"),
    ("report_format", "`table` or `csv` on standard output"),
    ("dump_canvases", "`true` to write stitched canvases and the bank as binary dumps"),
    ("plan_only", "`true` to stop after the geometry stage"),
];

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        let toy = Self {
            canvas_side: 96,
            patch_side: 8,
            min_token_width: 2,
            window_widths: vec![32.0, 16.0],
            encoder_seed: 0,
            d_vit: 16,
            encoder_layers: vec![1, 2, 3],
            encoder_side: 32,
            low_side: 32,
            downsample: 2,
            stack_length: StackLength::DeriveFromGlobal,
            d_llm: 32,
            decoder_layers: 8,
            mix_width: 4,
            inject_layers: vec![2, 4, 6, 8],
            residual_scales: vec![0.0],
            fusion_seed: 0,
            text_tokens: 8,
            input: None,
            synth_seed: 0,
            out_dir: None,
            report_format: ReportFormat::Table,
            dump_canvases: false,
            plan_only: false,
        };
        match profile {
            Profile::Toy => toy,
            Profile::PaperGeometry => Self {
                canvas_side: 672,
                patch_side: 14,
                min_token_width: 8,
                window_widths: vec![336.0, 168.0],
                encoder_layers: vec![8, 16, 24],
                encoder_side: 336,
                low_side: 336,
                ..toy
            },
        }
    }

    /// Sets every seed (image, encoder, fusion) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth_seed = seed;
        self.encoder_seed = seed;
        self.fusion_seed = seed;
        self
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: idx + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: idx + 1 });
            }
            if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::UnknownKey {
                    line: idx + 1,
                    key: key.to_string(),
                });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let int = || value.parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
        let seed = || value.parse::<u64>().map_err(|_| bad("expected a non-negative integer"));
        let boolean = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("expected true or false")),
        };
        let ints = || parse_list::<usize>(value).map_err(|_| bad("expected comma-separated integers"));
        let reals = || parse_list::<f64>(value).map_err(|_| bad("expected comma-separated numbers"));
        match key {
            "canvas_side" => self.canvas_side = int()?,
            "patch_side" => self.patch_side = int()?,
            "min_token_width" => self.min_token_width = int()?,
            "window_widths" => self.window_widths = reals()?,
            "encoder_seed" => self.encoder_seed = seed()?,
            "d_vit" => self.d_vit = int()?,
            "encoder_layers" => self.encoder_layers = ints()?,
            "encoder_side" => self.encoder_side = int()?,
            "low_side" => self.low_side = int()?,
            "downsample" => self.downsample = int()?,
            "stack_length" => {
                self.stack_length = if value == "derive" {
                    StackLength::DeriveFromGlobal
                } else {
                    StackLength::Explicit(int()?)
                }
            }
            "d_llm" => self.d_llm = int()?,
            "decoder_layers" => self.decoder_layers = int()?,
            "mix_width" => self.mix_width = int()?,
            "inject_layers" => {
                self.inject_layers = if value == "none" { Vec::new() } else { ints()? };
            }
            "residual_scale" => self.residual_scales = reals()?,
            "fusion_seed" => self.fusion_seed = seed()?,
            "text_tokens" => self.text_tokens = int()?,
            "input" => self.input = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth_seed" => self.synth_seed = seed()?,
            "out" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "report_format" => {
                self.report_format = match value {
                    "table" => ReportFormat::Table,
                    "csv" => ReportFormat::Csv,
                    _ => return Err(bad("expected table or csv")),
                }
            }
            "dump_canvases" => self.dump_canvases = boolean()?,
            "plan_only" => self.plan_only = boolean()?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridConfig, ConfigError> {
        Ok(GridConfig::new(self.canvas_side, self.patch_side, self.min_token_width)?)
    }

    /// Plans every scale and checks them jointly.
    pub fn plans(&self) -> Result<(GridConfig, Vec<ScalePlan>), ConfigError> {
        let grid = self.grid()?;
        if self.window_widths.is_empty() {
            return Err(ConfigError::Invalid("at least one window width is required".into()));
        }
        let plans = self
            .window_widths
            .iter()
            .map(|&w| plan_scale(&grid, w))
            .collect::<Result<Vec<_>, _>>()?;
        validate_cross_scale(&plans, &grid)?;
        Ok((grid, plans))
    }

    /// Global token count `(low_side / p)²`.
    pub fn global_tokens(&self) -> usize {
        (self.low_side / self.patch_side.max(1)).pow(2)
    }

    pub fn target_len(&self) -> usize {
        match self.stack_length {
            StackLength::DeriveFromGlobal => self.global_tokens(),
            StackLength::Explicit(n) => n,
        }
    }

    /// Residual scale for decoder layer `l` (1-based).
    pub fn residual_scale(&self, l: usize) -> f64 {
        if self.residual_scales.len() == 1 {
            self.residual_scales[0]
        } else {
            self.residual_scales[l - 1]
        }
    }

    /// Fail-fast check of everything that can be checked without data.
    pub fn validate(&self) -> Result<(GridConfig, Vec<ScalePlan>), ConfigError> {
        let planned = self.plans()?;
        if self.plan_only {
            return Ok(planned);
        }
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let p = self.patch_side;
        if self.encoder_side == 0 || self.encoder_side % p != 0 {
            return invalid(format!("encoder_side {} is not a positive multiple of patch_side {p}", self.encoder_side));
        }
        if self.low_side == 0 || self.low_side % p != 0 {
            return invalid(format!("low_side {} is not a positive multiple of patch_side {p}", self.low_side));
        }
        if self.d_vit == 0 || self.d_llm == 0 {
            return invalid("feature widths must be positive".into());
        }
        if self.encoder_layers.is_empty() || self.encoder_layers.contains(&0) {
            return invalid("encoder_layers must be non-empty 1-based ids".into());
        }
        if self.downsample == 0 {
            return invalid("downsample must be at least 1".into());
        }
        if self.target_len() == 0 {
            return invalid("stack length must be at least 1".into());
        }
        if self.decoder_layers == 0 || self.mix_width == 0 {
            return invalid("decoder_layers and mix_width must be positive".into());
        }
        validate_inject_layers(&self.inject_layers, self.decoder_layers)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.residual_scales.len() == 1 || self.residual_scales.len() == self.decoder_layers) {
            return invalid(format!(
                "residual_scale needs 1 or {} values, found {}",
                self.decoder_layers,
                self.residual_scales.len()
            ));
        }
        if self.residual_scales.iter().any(|s| !s.is_finite()) {
            return invalid("residual scales must be finite".into());
        }
        Ok(planned)
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, T::Err> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackSummary {
    pub scale_id: usize,
    pub layer_id: usize,
    pub a: usize,
    pub b: usize,
    pub raw_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSummary {
    pub n_stack: usize,
    pub target_len: usize,
    pub d_vit: usize,
    pub factor: usize,
    pub n_scales: usize,
    pub n_layers: usize,
    pub stacks: Vec<StackSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub layer: usize,
    pub injected: bool,
    pub vis_norm: f64,
    pub delta_norm: f64,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub base_tokens: usize,
    pub plan: Vec<PlanRow>,
    pub bank: Option<BankSummary>,
    pub layers: Vec<LayerSummary>,
    /// Final visual slice vs. fused detail cosine, see [`retention_score`].
    pub retention: Option<f64>,
    /// `(stage, seconds)`; excluded from reproducibility comparisons.
    pub timings: Vec<(&'static str, f64)>,
}

impl RunReport {
    /// Recomputes every count from the config formulas.
    pub fn check_counts(&self, cfg: &PipelineConfig) -> Result<(), String> {
        let base = cfg.canvas_side / cfg.patch_side;
        if self.base_tokens != base {
            return Err(format!("T_base {} != {base}", self.base_tokens));
        }
        for r in &self.plan {
            let n_side = 2 * base / r.token_width - 1;
            let checks = [
                ("n_side", r.windows_per_side, n_side),
                ("n_win", r.window_count, n_side * n_side),
                ("n_tok", r.token_count, (2 * base - r.token_width).pow(2)),
                ("w_s", r.window_px, r.token_width * cfg.patch_side),
                ("delta_s", r.pixel_stride, r.token_width / 2 * cfg.patch_side),
            ];
            for (name, got, want) in checks {
                if got != want {
                    return Err(format!("{name} for t_s = {}: reported {got}, formula {want}", r.token_width));
                }
            }
        }
        if let Some(b) = &self.bank {
            let want = cfg.window_widths.len() * dedup_len(&cfg.encoder_layers) * cfg.downsample.pow(2);
            if b.n_stack != want || b.stacks.len() != want {
                return Err(format!("N_stack reported {}, formula {want}", b.n_stack));
            }
        }
        Ok(())
    }

    /// CSV report sections as `(file name, contents)`. Timings come last.
    pub fn sections(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut plan = format!("{}\n", PlanRow::CSV_HEADER);
        for r in &self.plan {
            let _ = writeln!(plan, "{}", r.csv());
        }
        out.push(("plan.csv", plan));
        if let Some(b) = &self.bank {
            out.push((
                "bank.csv",
                format!(
                    "n_stack,t_v,d_vit,f,n_scales,n_layers\n{},{},{},{},{},{}\n",
                    b.n_stack, b.target_len, b.d_vit, b.factor, b.n_scales, b.n_layers
                ),
            ));
            let mut s = String::from("scale,layer,a,b,raw_length\n");
            for st in &b.stacks {
                let _ = writeln!(s, "{},{},{},{},{}", st.scale_id, st.layer_id, st.a, st.b, st.raw_length);
            }
            out.push(("stacks.csv", s));
        }
        if !self.layers.is_empty() {
            let mut s = String::from("layer,injected,vis_norm,delta_norm,alpha\n");
            for l in &self.layers {
                let alpha: Vec<String> = l.alpha.iter().map(|a| a.to_string()).collect();
                let _ = writeln!(s, "{},{},{},{},{}", l.layer, l.injected, l.vis_norm, l.delta_norm, alpha.join(" "));
            }
            out.push(("trace.csv", s));
        }
        if let Some(r) = self.retention {
            out.push(("retention.csv", format!("final_visual_cosine\n{r}\n")));
        }
        let mut t = String::from("stage,seconds\n");
        for (stage, secs) in &self.timings {
            let _ = writeln!(t, "{stage},{secs}");
        }
        out.push(("timings.csv", t));
        out
    }

    /// Every section except timings, concatenated.
    pub fn deterministic_text(&self) -> String {
        self.sections()
            .into_iter()
            .filter(|(name, _)| *name != "timings.csv")
            .map(|(name, body)| format!("# {name}\n{body}"))
            .collect()
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in self.sections() {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "token grid: {0} x {0}", self.base_tokens)?;
        write!(f, "{}", PlanTable(&self.plan))?;
        if let Some(b) = &self.bank {
            writeln!(
                f,
                "\nbank: N_stack = {} ({} scales x {} layers x f^2 = {}), T_v = {}, d_vit = {}",
                b.n_stack,
                b.n_scales,
                b.n_layers,
                b.factor * b.factor,
                b.target_len,
                b.d_vit
            )?;
            let mut raw: Vec<usize> = b.stacks.iter().map(|s| s.raw_length).collect();
            raw.dedup();
            writeln!(f, "raw stack lengths: {raw:?}")?;
        }
        if !self.layers.is_empty() {
            writeln!(f, "\n{:>5} {:>8} {:>12} {:>12}  max alpha", "layer", "injected", "|vis|", "|delta|")?;
            for l in &self.layers {
                let max_alpha = l.alpha.iter().copied().fold(f64::NAN, f64::max);
                writeln!(
                    f,
                    "{:>5} {:>8} {:>12.6} {:>12.6}  {}",
                    l.layer,
                    l.injected,
                    l.vis_norm,
                    l.delta_norm,
                    if l.alpha.is_empty() { "-".to_string() } else { format!("{max_alpha:.6}") }
                )?;
            }
        }
        if let Some(r) = self.retention {
            writeln!(f, "\nfinal visual/fused-detail cosine: {r:.6}")?;
        }
        if !self.timings.is_empty() {
            writeln!(f)?;
            for (stage, secs) in &self.timings {
                writeln!(f, "{stage:>8}: {:.3} ms", secs * 1e3)?;
            }
        }
        Ok(())
    }
}

fn dedup_len(v: &[usize]) -> usize {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Everything before the decoder: the bank, global tokens and parameters.
pub struct Prepared {
    pub grid: GridConfig,
    pub plans: Vec<ScalePlan>,
    pub canvases: BTreeMap<(usize, usize), FeatureCanvas>,
    pub bank: StackBank,
    pub global: Matrix,
    pub text: Matrix,
    pub params: FusionParams,
    pub projected: ProjectedTokens,
    pub timings: Vec<(&'static str, f64)>,
}

struct Stopwatch {
    last: Instant,
    laps: Vec<(&'static str, f64)>,
}

impl Stopwatch {
    fn new() -> Self {
        Self {
            last: Instant::now(),
            laps: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.laps.push((stage, (now - self.last).as_secs_f64()));
        self.last = now;
    }
}

fn load_image(cfg: &PipelineConfig) -> Result<Image, PipelineError> {
    match &cfg.input {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| PipelineError::stage("load", format!("{}: {e}", path.display())))?;
            Image::read_ppm(std::io::BufReader::new(file)).map_err(|e| PipelineError::stage("load", e))
        }
        None => synth_image(cfg.synth_seed, cfg.canvas_side, cfg.patch_side).map_err(|e| PipelineError::stage("load", e)),
    }
}

/// Encodes every window of `plan` and resamples each grid to `t_s` tokens per side.
/// Returns one list of window grids per encoder layer, in `layer_ids` order.
pub fn encode_windows(
    canvas_img: &Image,
    plan: &ScalePlan,
    scale_id: usize,
    backbone: &BackboneParams,
    exec: Exec,
) -> Result<Vec<Vec<PatchFeatureGrid>>, PipelineError> {
    let rects = enumerate_windows(plan);
    let encoded = exec.map_slice(&rects, |rect| {
        let crop = canvas_img.crop(rect.top_px, rect.left_px, rect.side_px)?;
        let grids = encode_patch(&crop, backbone);
        Ok::<_, crate::image::ImageError>(
            grids
                .into_values()
                .map(|g| PatchFeatureGrid {
                    scale_id,
                    window: rect.index,
                    ..g.resampled(plan.token_width)
                })
                .collect::<Vec<_>>(),
        )
    });
    let mut per_layer: Vec<Vec<PatchFeatureGrid>> = vec![Vec::with_capacity(rects.len()); backbone.layer_ids.len()];
    for window in encoded {
        let window = window.map_err(|e| PipelineError::stage("encode", e))?;
        for (slot, g) in per_layer.iter_mut().zip(window) {
            slot.push(g);
        }
    }
    Ok(per_layer)
}

/// Runs every stage up to (not including) the decoder.
pub fn prepare(cfg: &PipelineConfig, exec: Exec) -> Result<Prepared, PipelineError> {
    let (grid, plans) = cfg.validate()?;
    let mut clock = Stopwatch::new();

    let image = load_image(cfg)?;
    let canvas_img = image.resize(cfg.canvas_side, cfg.canvas_side);
    clock.lap("load");

    let backbone = BackboneParams::new(
        cfg.encoder_seed,
        cfg.d_vit,
        &cfg.encoder_layers,
        cfg.patch_side,
        cfg.encoder_side,
    )
    .map_err(|e| PipelineError::stage("encode", e))?;
    let mut per_scale = Vec::with_capacity(plans.len());
    for (s, plan) in plans.iter().enumerate() {
        per_scale.push(encode_windows(&canvas_img, plan, s, &backbone, exec)?);
    }
    clock.lap("encode");

    let mut canvases = BTreeMap::new();
    for (s, (plan, layers)) in plans.iter().zip(&per_scale).enumerate() {
        for (grids, &layer) in layers.iter().zip(&backbone.layer_ids) {
            let c = overlap_add(grids, plan, exec).map_err(|e| PipelineError::Stage {
                stage: "stitch",
                message: format!("scale {s}, layer {layer}: {e}"),
            })?;
            canvases.insert((s, layer), c);
        }
    }
    clock.lap("stitch");

    let scales: Vec<usize> = (0..plans.len()).collect();
    let bank = build_bank(&canvases, &scales, &backbone.layer_ids, cfg.downsample, cfg.target_len(), exec)
        .map_err(|e| PipelineError::stage("bank", e))?;
    clock.lap("bank");

    let global = encode_global(&image, &backbone, cfg.low_side, cfg.low_side).map_err(|e| PipelineError::stage("global", e))?;
    clock.lap("global");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.fusion_seed);
    let mut params = FusionParams::random(cfg.d_vit, cfg.d_llm, cfg.decoder_layers, cfg.mix_width, &mut rng);
    for (idx, p) in params.injection.iter_mut().enumerate() {
        p.residual_scale = cfg.residual_scale(idx + 1);
    }
    let text = Matrix::random(cfg.text_tokens, cfg.d_llm, 1.0, &mut rng);
    let projected = project(&global, &bank, &params.projector, exec).map_err(|e| PipelineError::stage("project", e))?;
    clock.lap("project");

    Ok(Prepared {
        grid,
        plans,
        canvases,
        bank,
        global,
        text,
        params,
        projected,
        timings: clock.laps,
    })
}

fn plan_rows(grid: &GridConfig, plans: &[ScalePlan]) -> Vec<PlanRow> {
    plans.iter().map(|p| PlanRow::new(p, grid)).collect()
}

fn bank_summary(bank: &StackBank) -> BankSummary {
    BankSummary {
        n_stack: bank.len(),
        target_len: bank.target_len,
        d_vit: bank.dim(),
        factor: bank.factor,
        n_scales: bank.scales.len(),
        n_layers: bank.layers.len(),
        stacks: bank
            .stacks
            .iter()
            .map(|s| StackSummary {
                scale_id: s.scale_id,
                layer_id: s.layer_id,
                a: s.offset.a,
                b: s.offset.b,
                raw_length: s.raw_length,
            })
            .collect(),
    }
}

fn layer_summaries(trace: &Trace) -> Vec<LayerSummary> {
    trace
        .layers
        .iter()
        .map(|r| LayerSummary {
            layer: r.layer,
            injected: r.alpha.is_some(),
            vis_norm: r.vis_norm,
            delta_norm: r.delta_norm,
            alpha: r.alpha.clone().unwrap_or_default(),
        })
        .collect()
}

fn write_dumps(dir: &Path, prep: &Prepared) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for ((s, l), c) in &prep.canvases {
        let f = std::fs::File::create(dir.join(format!("canvas_s{s}_l{l}.bin")))?;
        dump::write_canvas(std::io::BufWriter::new(f), c)?;
    }
    let f = std::fs::File::create(dir.join("bank.bin"))?;
    dump::write_bank(std::io::BufWriter::new(f), &prep.bank)
}

/// Full pipeline. Writes CSV sections to `out_dir` when one is configured.
pub fn run(cfg: &PipelineConfig, exec: Exec) -> Result<RunReport, PipelineError> {
    let report = if cfg.plan_only {
        let started = Instant::now();
        let (grid, plans) = cfg.validate()?;
        RunReport {
            base_tokens: grid.base_tokens(),
            plan: plan_rows(&grid, &plans),
            bank: None,
            layers: Vec::new(),
            retention: None,
            timings: vec![("plan", started.elapsed().as_secs_f64())],
        }
    } else {
        let prep = prepare(cfg, exec)?;
        let started = Instant::now();
        let trace = run_decoder(prep.projected.clone(), &prep.text, &prep.params, &cfg.inject_layers)
            .map_err(|e| PipelineError::stage("decode", e))?;
        let retention = retention_score(&trace, &prep.params).map_err(|e| PipelineError::stage("decode", e))?;
        let mut timings = prep.timings.clone();
        timings.push(("decode", started.elapsed().as_secs_f64()));
        if cfg.dump_canvases {
            if let Some(dir) = &cfg.out_dir {
                write_dumps(dir, &prep).map_err(|e| PipelineError::stage("dump", e))?;
            }
        }
        RunReport {
            base_tokens: prep.grid.base_tokens(),
            plan: plan_rows(&prep.grid, &prep.plans),
            bank: Some(bank_summary(&prep.bank)),
            layers: layer_summaries(&trace),
            retention: Some(retention),
            timings,
        }
    };
    report.check_counts(cfg).map_err(|e| PipelineError::stage("report", e))?;
    if let Some(dir) = &cfg.out_dir {
        report.write_to(dir).map_err(|e| PipelineError::stage("report", e))?;
    }
    Ok(report)
}

/// One injection configuration compared against the no-injection baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub inject_layers: Vec<usize>,
    pub scores: Vec<f64>,
    pub baseline_scores: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ProbeRow {
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.scores)
    }

    pub fn baseline_mean_std(&self) -> (f64, f64) {
        mean_std(&self.baseline_scores)
    }

    pub fn mean_difference(&self) -> f64 {
        self.mean_std().0 - self.baseline_mean_std().0
    }

    /// Seeds where the injected arm scores strictly higher.
    pub fn wins(&self) -> usize {
        self.scores.iter().zip(&self.baseline_scores).filter(|(a, b)| a > b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("inject_layers,seeds,mean,std,baseline_mean,baseline_std,mean_diff,wins\n");
        for r in &self.rows {
            let (m, sd) = r.mean_std();
            let (bm, bsd) = r.baseline_mean_std();
            let layers: Vec<String> = r.inject_layers.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{m},{sd},{bm},{bsd},{},{}",
                layers.join(" "),
                self.seeds.len(),
                r.mean_difference(),
                r.wins()
            );
        }
        s
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>20} {:>20} {:>11} {:>7}",
            "inject_layers", "injected", "baseline", "mean diff", "wins"
        )?;
        for r in &self.rows {
            let (m, sd) = r.mean_std();
            let (bm, bsd) = r.baseline_mean_std();
            let layers: Vec<String> = r.inject_layers.iter().map(|l| l.to_string()).collect();
            writeln!(
                f,
                "{:<14} {:>9.6} ± {:<8.6} {:>9.6} ± {:<8.6} {:>11.6} {:>3}/{}",
                if layers.is_empty() { "none".to_string() } else { layers.join(",") },
                m,
                sd,
                bm,
                bsd,
                r.mean_difference(),
                r.wins(),
                self.seeds.len()
            )?;
        }
        Ok(())
    }
}

/// Paired traces per seed: each configuration in `inject_sets` against no
/// injection. Seed `k` sets every seed of `cfg` to `cfg.synth_seed + k`.
pub fn retention_sweep(
    cfg: &PipelineConfig,
    seeds: usize,
    inject_sets: &[Vec<usize>],
    exec: Exec,
) -> Result<ProbeReport, PipelineError> {
    if seeds < 2 {
        return Err(ConfigError::Invalid(format!("probe needs at least 2 seeds, got {seeds}")).into());
    }
    cfg.validate()?;
    for set in inject_sets {
        validate_inject_layers(set, cfg.decoder_layers).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| cfg.synth_seed + k).collect();
    let per_seed = exec.map_slice(&seed_list, |&seed| {
        let c = PipelineConfig {
            out_dir: None,
            dump_canvases: false,
            plan_only: false,
            ..cfg.clone()
        }
        .with_seed(seed);
        // the stages inside one seed stay sequential; seeds are the parallel axis
        let prep = prepare(&c, Exec::Sequential)?;
        let decode = |layers: &[usize]| {
            run_decoder(prep.projected.clone(), &prep.text, &prep.params, layers)
                .and_then(|t| retention_score(&t, &prep.params))
                .map_err(|e| PipelineError::stage("decode", e))
        };
        let baseline = decode(&[])?;
        let scores = inject_sets.iter().map(|s| decode(s)).collect::<Result<Vec<_>, _>>()?;
        Ok::<_, PipelineError>((baseline, scores))
    });
    let mut rows: Vec<ProbeRow> = inject_sets
        .iter()
        .map(|s| {
            let mut layers = s.clone();
            layers.sort_unstable();
            layers.dedup();
            ProbeRow {
                inject_layers: layers,
                scores: Vec::with_capacity(seeds),
                baseline_scores: Vec::with_capacity(seeds),
            }
        })
        .collect();
    for r in per_seed {
        let (baseline, scores) = r?;
        for (row, s) in rows.iter_mut().zip(scores) {
            row.scores.push(s);
            row.baseline_scores.push(baseline);
        }
    }
    Ok(ProbeReport { seeds: seed_list, rows })
}

/// [`retention_sweep`] with the configured injection layers only.
pub fn retention_probe(cfg: &PipelineConfig, seeds: usize, exec: Exec) -> Result<ProbeReport, PipelineError> {
    retention_sweep(cfg, seeds, std::slice::from_ref(&cfg.inject_layers), exec)
}
