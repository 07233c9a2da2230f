//! Per-study orchestration, batch processing and corpus evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::anatomy::{gate_liver, locate_anatomy, AnatomyMatch, GateDecision, SkeletonTemplate};
use crate::atlas::TemplateAtlas;
use crate::densitometry::{analyze, render_not_detected, render_report, DensityParams};
use crate::error::{Error, Result};
use crate::io::{decode_volume, read_mask, read_volume, write_mask};
use crate::matcher::{
    decide, place_template, soft_tissue_feature, soft_tissue_feature_smoothed, MatchResult,
    SearchConfig, SearchIndex, SearchOutcome, DEFAULT_TAU,
};
use crate::metrics::{density_error_stats, dice, roc_auc, sens_spec};
use crate::refine::{refine_boundary, remeasure, RefineParams};
use crate::volume::{BinaryMask, CtVolume};

pub const SUMMARY_FILE: &str = "batch_summary.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tau: f64,
    pub min_overlap: f64,
    pub search: SearchConfig,
    pub density: DensityParams,
    pub refine: RefineParams,
    pub workers: usize,
    /// Local directory or `http://` base URL.
    pub source: Option<String>,
    /// Input slices run head-to-feet.
    pub flip_z: bool,
    /// Gaussian width applied before feature extraction; 0 disables it.
    pub pre_smooth_mm: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            min_overlap: crate::anatomy::DEFAULT_MIN_OVERLAP,
            search: SearchConfig::default(),
            density: DensityParams::default(),
            refine: RefineParams::default(),
            workers: 1,
            source: None,
            flip_z: false,
            pre_smooth_mm: 0.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 18] = [
        "tau",
        "min_overlap",
        "scale_min",
        "scale_max",
        "scale_step",
        "coarse_step_mm",
        "visibility_floor",
        "mode_gate_sigma",
        "max_surface_dist_mm",
        "closing_mm",
        "erosion_mm",
        "histogram_sigma_bins",
        "mode_prominence",
        "mode_separation_hu",
        "workers",
        "source",
        "flip_z",
        "pre_smooth_mm",
    ];

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "tau" => self.tau = parse_value(key, v)?,
            "min_overlap" => self.min_overlap = parse_value(key, v)?,
            "scale_min" => self.search.scale_min = parse_value(key, v)?,
            "scale_max" => self.search.scale_max = parse_value(key, v)?,
            "scale_step" => self.search.scale_step = parse_value(key, v)?,
            "coarse_step_mm" => self.search.coarse_step_mm = parse_value(key, v)?,
            "visibility_floor" => self.search.visibility_floor = parse_value(key, v)?,
            "mode_gate_sigma" => self.refine.mode_gate_sigma = parse_value(key, v)?,
            "max_surface_dist_mm" => self.refine.max_surface_dist_mm = parse_value(key, v)?,
            "closing_mm" => self.refine.closing_mm = parse_value(key, v)?,
            "erosion_mm" => self.density.erosion_mm = parse_value(key, v)?,
            "histogram_sigma_bins" => self.density.smoothing_sigma = parse_value(key, v)?,
            "mode_prominence" => self.density.prominence = parse_value(key, v)?,
            "mode_separation_hu" => self.density.min_separation_hu = parse_value(key, v)?,
            "workers" => self.workers = parse_value(key, v)?,
            "source" => self.source = Some(v.to_string()),
            "flip_z" => self.flip_z = parse_value(key, v)?,
            "pre_smooth_mm" => self.pre_smooth_mm = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                )));
            };
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau.is_finite() && (-1.0..=1.0).contains(&self.tau)) {
            return bad(format!("tau must be in [-1, 1], got {}", self.tau));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return bad(format!("min_overlap must be in (0, 1], got {}", self.min_overlap));
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if !(self.pre_smooth_mm >= 0.0 && self.pre_smooth_mm.is_finite()) {
            return bad(format!("pre_smooth_mm must be >= 0, got {}", self.pre_smooth_mm));
        }
        let r = &self.refine;
        if !(r.mode_gate_sigma > 0.0 && r.max_surface_dist_mm >= 0.0 && r.closing_mm >= 0.0) {
            return bad("refinement distances must be >= 0 and mode_gate_sigma > 0".into());
        }
        let d = &self.density;
        if !(d.erosion_mm >= 0.0
            && d.smoothing_sigma >= 0.0
            && (0.0..=1.0).contains(&d.prominence)
            && d.min_separation_hu >= 0.0)
        {
            return bad("densitometry parameters out of range".into());
        }
        self.search
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StudyStatus {
    Ok,
    NoLiver,
    NotFound,
    RefineFallback,
    Error(String),
}

impl StudyStatus {
    pub fn name(&self) -> &'static str {
        match self {
            StudyStatus::Ok => "ok",
            StudyStatus::NoLiver => "no-liver",
            StudyStatus::NotFound => "not-found",
            StudyStatus::RefineFallback => "refine-fallback",
            StudyStatus::Error(_) => "error",
        }
    }

    pub const NAMES: [&'static str; 5] = ["ok", "no-liver", "not-found", "refine-fallback", "error"];
}

impl fmt::Display for StudyStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StudyStatus::Error(m) => write!(f, "error({m})"),
            s => f.write_str(s.name()),
        }
    }
}

/// Milliseconds per executed stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub gate_ms: Option<f64>,
    pub search_ms: Option<f64>,
    pub density_ms: Option<f64>,
    pub refine_ms: Option<f64>,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn stage_sum_ms(&self) -> f64 {
        [self.gate_ms, self.search_ms, self.density_ms, self.refine_ms]
            .iter()
            .flatten()
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub study_id: String,
    pub gate: Option<AnatomyMatch>,
    pub match_result: Option<MatchResult>,
    /// Detection score: the match score, the best rejected score, or -1
    /// when gated out.
    pub score: f64,
    pub report: String,
    /// Final segmentation on the input grid; empty when nothing was detected.
    pub mask: Option<BinaryMask>,
    pub mask_path: Option<PathBuf>,
    pub timings: StageTimings,
    pub status: StudyStatus,
}

impl StudyOutcome {
    fn failed(id: &str, message: String, total_ms: f64) -> Self {
        Self {
            study_id: id.to_string(),
            gate: None,
            match_result: None,
            score: -1.0,
            report: String::new(),
            mask: None,
            mask_path: None,
            timings: StageTimings {
                total_ms,
                ..StageTimings::default()
            },
            status: StudyStatus::Error(message),
        }
    }

    pub fn detected(&self) -> bool {
        matches!(self.status, StudyStatus::Ok | StudyStatus::RefineFallback)
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Atlas, skeleton and configuration with the template search index built
/// once for many studies.
#[derive(Debug, Clone)]
pub struct Pipeline {
    atlas: TemplateAtlas,
    skeleton: SkeletonTemplate,
    cfg: PipelineConfig,
    index: SearchIndex,
}

impl Pipeline {
    pub fn new(atlas: TemplateAtlas, skeleton: SkeletonTemplate, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let index = SearchIndex::new(&atlas, &cfg.search)?;
        Ok(Self {
            atlas,
            skeleton,
            cfg,
            index,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Gate, search, densitometry and refinement for one volume.
    pub fn run_study(&self, id: &str, vol: &CtVolume) -> StudyOutcome {
        study(id, vol, &self.atlas, &self.skeleton, &self.cfg, &self.index)
    }
}

/// One-off [`Pipeline::run_study`]; builds the search index for this call.
pub fn run_study(
    id: &str,
    vol: &CtVolume,
    atlas: &TemplateAtlas,
    skeleton: &SkeletonTemplate,
    cfg: &PipelineConfig,
) -> StudyOutcome {
    let start = Instant::now();
    match cfg.validate().and_then(|_| SearchIndex::new(atlas, &cfg.search)) {
        Ok(index) => study(id, vol, atlas, skeleton, cfg, &index),
        Err(e) => StudyOutcome::failed(id, e.to_string(), ms_since(start)),
    }
}

fn study(
    id: &str,
    vol: &CtVolume,
    atlas: &TemplateAtlas,
    skeleton: &SkeletonTemplate,
    cfg: &PipelineConfig,
    index: &SearchIndex,
) -> StudyOutcome {
    let start = Instant::now();
    let flipped;
    let vol = if cfg.flip_z {
        flipped = vol.flip_z();
        &flipped
    } else {
        vol
    };
    let mut out = StudyOutcome {
        study_id: id.to_string(),
        gate: None,
        match_result: None,
        score: -1.0,
        report: String::new(),
        mask: None,
        mask_path: None,
        timings: StageTimings::default(),
        status: StudyStatus::Ok,
    };
    let fail = |mut out: StudyOutcome, e: Error| {
        out.status = StudyStatus::Error(e.to_string());
        out.mask = None;
        out.report.clear();
        out.timings.total_ms = ms_since(start);
        out
    };
    let empty = || BinaryMask::empty(vol.grid().clone());

    let t = Instant::now();
    let anatomy = locate_anatomy(vol, skeleton);
    let gate = gate_liver(&anatomy, cfg.min_overlap);
    out.gate = Some(anatomy);
    out.timings.gate_ms = Some(ms_since(t));
    let z_range = match gate {
        Err(e) => return fail(out, e),
        Ok(GateDecision::Absent) => {
            out.status = StudyStatus::NoLiver;
            out.report = render_not_detected(-1.0);
            out.mask = Some(empty());
            out.timings.total_ms = ms_since(start);
            return out;
        }
        Ok(GateDecision::Present { z_range_mm }) => z_range_mm,
    };

    let t = Instant::now();
    let feat = if cfg.pre_smooth_mm > 0.0 {
        soft_tissue_feature_smoothed(vol, cfg.pre_smooth_mm)
    } else {
        soft_tissue_feature(vol)
    };
    let z0 = vol.grid().origin()[2];
    let outcome = feat.and_then(|f| index.search(&f, (z0 + z_range.0, z0 + z_range.1)));
    out.timings.search_ms = Some(ms_since(t));
    let m = match outcome {
        Err(e) => return fail(out, e),
        Ok(SearchOutcome::NotFound { best_score }) => {
            out.score = best_score;
            None
        }
        Ok(SearchOutcome::Found(m)) => {
            out.score = m.score;
            let hit = decide(m.score, cfg.tau);
            out.match_result = Some(m.clone());
            match hit {
                Err(e) => return fail(out, e),
                Ok(true) => Some(m),
                Ok(false) => None,
            }
        }
    };
    let Some(m) = m else {
        out.status = StudyStatus::NotFound;
        out.report = render_not_detected(out.score);
        out.mask = Some(empty());
        out.timings.total_ms = ms_since(start);
        return out;
    };
    let Some(tmpl) = atlas.get(&m.template_id) else {
        return fail(out, Error::invalid(format!("unknown template {}", m.template_id)));
    };

    let t = Instant::now();
    let placed = place_template(tmpl, vol.grid(), m.offset_mm, m.scale);
    let first = placed.and_then(|p| {
        if p.is_empty() {
            return Err(Error::invalid("placed template misses the volume"));
        }
        analyze(vol, &p, &cfg.density).map(|r| (p, r))
    });
    out.timings.density_ms = Some(ms_since(t));
    let (placed, first) = match first {
        Ok(v) => v,
        Err(e) => return fail(out, e),
    };

    let t = Instant::now();
    let refined = match refine_boundary(vol, &placed, &first, &cfg.refine) {
        Ok(r) => r,
        Err(e) => crate::refine::RefinementResult {
            final_mask: placed.clone(),
            added: BinaryMask::empty(vol.grid().clone()),
            excluded: BinaryMask::empty(vol.grid().clone()),
            iterations: 0,
            fallback: Some(e.to_string()),
        },
    };
    let report = if refined.is_fallback() {
        Ok(first)
    } else {
        remeasure(vol, &refined, &cfg.density)
    };
    out.timings.refine_ms = Some(ms_since(t));
    let report = match report {
        Ok(r) => r,
        Err(e) => return fail(out, e),
    };
    out.status = if refined.is_fallback() {
        StudyStatus::RefineFallback
    } else {
        StudyStatus::Ok
    };
    out.report = render_report(&report, &m, tmpl.shape_type());
    out.mask = Some(if cfg.flip_z {
        refined.final_mask.flip_z()
    } else {
        refined.final_mask
    });
    out.timings.total_ms = ms_since(start);
    out
}

/// Where batch studies come from.
#[derive(Debug, Clone, PartialEq)]
pub enum StudySource {
    /// Directory of `<id>.mvol` files.
    Local(PathBuf),
    /// Server exposing `GET /studies` and `GET /studies/<id>.mvol`.
    Http(String),
}

impl StudySource {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            StudySource::Http(s.trim_end_matches('/').to_string())
        } else {
            StudySource::Local(PathBuf::from(s))
        }
    }

    /// Study ids in ascending order.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = match self {
            StudySource::Local(dir) => {
                let entries = std::fs::read_dir(dir)
                    .map_err(|e| Error::Source(format!("{}: {e}", dir.display())))?;
                let mut ids = Vec::new();
                for entry in entries {
                    let entry = entry.map_err(|e| Error::Source(e.to_string()))?;
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if let Some(id) = name.strip_suffix(".mvol") {
                        if !id.ends_with(".mask") && !id.is_empty() {
                            ids.push(id.to_string());
                        }
                    }
                }
                ids
            }
            StudySource::Http(base) => {
                let url = format!("{base}/studies");
                let mut resp = ureq::get(&url)
                    .call()
                    .map_err(|e| Error::Source(format!("{url}: {e}")))?;
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| Error::Source(format!("{url}: {e}")))?;
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect()
            }
        };
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    pub fn fetch(&self, id: &str) -> Result<CtVolume> {
        match self {
            StudySource::Local(dir) => read_volume(dir.join(format!("{id}.mvol"))),
            StudySource::Http(base) => {
                let url = format!("{base}/studies/{id}.mvol");
                let resp = ureq::get(&url)
                    .call()
                    .map_err(|e| Error::Source(format!("{url}: {e}")))?;
                let mut bytes = Vec::new();
                resp.into_body()
                    .into_reader()
                    .read_to_end(&mut bytes)
                    .map_err(|e| Error::Source(format!("{url}: {e}")))?;
                decode_volume(&bytes)
            }
        }
    }
}

pub fn report_path(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join(format!("{id}.report.txt"))
}

pub fn mask_path(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join(format!("{id}.mask.mvol"))
}

/// Write the report and mask of a finished study. Failed studies write
/// nothing.
pub fn write_outcome(out_dir: &Path, outcome: &mut StudyOutcome) -> Result<()> {
    if let Some(mask) = &outcome.mask {
        let path = mask_path(out_dir, &outcome.study_id);
        write_mask(mask, &path)?;
        outcome.mask_path = Some(path);
    }
    if !outcome.report.is_empty() {
        let path = report_path(out_dir, &outcome.study_id);
        std::fs::write(&path, &outcome.report).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Compact per-study record kept by the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub id: String,
    pub status: StudyStatus,
    pub score: f64,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    /// Sorted by id.
    pub studies: Vec<StudyRecord>,
    pub wall_time_s: f64,
}

impl BatchSummary {
    pub fn count(&self, status: &str) -> usize {
        self.studies.iter().filter(|s| s.status.name() == status).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("studies = {}\n", self.studies.len()));
        for name in StudyStatus::NAMES {
            out.push_str(&format!("{name} = {}\n", self.count(name)));
        }
        out.push_str(&format!("wall_time_s = {:.3}\n", self.wall_time_s));
        let rate = if self.wall_time_s > 0.0 {
            self.studies.len() as f64 * 60.0 / self.wall_time_s
        } else {
            0.0
        };
        out.push_str(&format!("studies_per_min = {rate:.2}\n"));
        for s in &self.studies {
            out.push_str(&format!("study {} {}\n", s.id, s.status));
        }
        out
    }
}

/// Process every study in `source` with `cfg.workers` threads, writing
/// outputs and the summary to `out_dir`.
pub fn run_batch(source: &StudySource, pipeline: &Pipeline, out_dir: &Path) -> Result<BatchSummary> {
    let cfg = pipeline.config();
    let start = Instant::now();
    let ids = source.list()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let studies: Vec<StudyRecord> = pool.install(|| {
        ids.par_iter()
            .map(|id| {
                let t = Instant::now();
                let mut outcome = match source.fetch(id) {
                    Ok(vol) => pipeline.run_study(id, &vol),
                    Err(e) => StudyOutcome::failed(id, e.to_string(), ms_since(t)),
                };
                if let Err(e) = write_outcome(out_dir, &mut outcome) {
                    outcome.status = StudyStatus::Error(e.to_string());
                }
                log::info!("{id}: {} in {:.0} ms", outcome.status, outcome.timings.total_ms);
                StudyRecord {
                    id: id.clone(),
                    status: outcome.status,
                    score: outcome.score,
                    timings: outcome.timings,
                }
            })
            .collect()
    });
    let summary = BatchSummary {
        studies,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&path, summary.render()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: String,
    pub liver_present: bool,
    pub expected_mean_hu: Option<f64>,
    /// Truth mask, relative to the manifest's directory; None for `-`.
    pub truth_path: Option<PathBuf>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |m: &str| Error::format("manifest", format!("line {}: {m}", n + 1));
        if f.len() != 5 {
            return Err(err("expected `id kind liver_present expected_mean_hu path`"));
        }
        let liver_present = match f[2] {
            "yes" | "true" | "1" => true,
            "no" | "false" | "0" => false,
            _ => return Err(err("liver_present must be yes or no")),
        };
        let expected_mean_hu = match f[3] {
            "-" => None,
            v => Some(v.parse().map_err(|_| err("bad expected_mean_hu"))?),
        };
        out.push(ManifestEntry {
            id: f[0].to_string(),
            kind: f[1].to_string(),
            liver_present,
            expected_mean_hu,
            truth_path: (f[4] != "-").then(|| PathBuf::from(f[4])),
        });
    }
    Ok(out)
}

/// Fields the evaluator reads back from a report file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub detected: bool,
    pub score: f64,
    pub dominant_mean_hu: Option<f64>,
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let err = |m: &str| Error::format("report", m.to_string());
    let mut lines = text.lines();
    if lines.next() != Some("LIVER REPORT") {
        return Err(err("missing header"));
    }
    let detected = match lines.next() {
        Some("detected: yes") => true,
        Some("detected: no") => false,
        _ => return Err(err("missing detected line")),
    };
    let mut score = None;
    let mut means: BTreeMap<usize, f64> = BTreeMap::new();
    let mut dominant = None;
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["best_score:", s] => score = s.parse().ok(),
            ["template:", _, "type:", _, "score:", s] => score = s.parse().ok(),
            ["mode", i, "mean_hu", m, ..] => {
                let i = i.trim_end_matches(':').parse().map_err(|_| err("bad mode index"))?;
                means.insert(i, m.parse().map_err(|_| err("bad mode mean"))?);
            }
            ["dominant_mode:", i] => dominant = i.parse::<usize>().ok(),
            _ => {}
        }
    }
    let score = score.ok_or_else(|| err("missing score"))?;
    let dominant_mean_hu = if detected {
        let d = dominant.ok_or_else(|| err("missing dominant_mode"))?;
        Some(*means.get(&d).ok_or_else(|| err("dominant mode not listed"))?)
    } else {
        None
    };
    Ok(ParsedReport {
        detected,
        score,
        dominant_mean_hu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub dice_mean: f64,
    pub density_err_std_hu: f64,
    pub density_err_p95_hu: f64,
    pub density_err_max_hu: f64,
    pub n_studies: usize,
    pub n_skipped: usize,
}

impl EvalStats {
    /// `metric = value` lines; undefined metrics print as `nan`.
    pub fn render(&self) -> String {
        let rows = [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("auc", self.auc),
            ("dice_mean", self.dice_mean),
            ("density_err_std_hu", self.density_err_std_hu),
            ("density_err_p95_hu", self.density_err_p95_hu),
            ("density_err_max_hu", self.density_err_max_hu),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v:.4}\n"));
        }
        out.push_str(&format!("n_studies = {}\n", self.n_studies));
        out.push_str(&format!("n_skipped = {}\n", self.n_skipped));
        out
    }
}

/// Join manifest truth with the reports and masks in `outputs`. Studies
/// without a readable report are skipped.
pub fn evaluate(manifest: &Path, outputs: &Path) -> Result<EvalStats> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries = parse_manifest(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut seen = HashMap::new();
    for e in &entries {
        if seen.insert(e.id.as_str(), ()).is_some() {
            return Err(Error::format("manifest", format!("duplicate id {}", e.id)));
        }
    }
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut detections = Vec::new();
    let mut dices = Vec::new();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut skipped = 0;
    for e in &entries {
        let rp = report_path(outputs, &e.id);
        let Ok(report_text) = std::fs::read_to_string(&rp) else {
            log::warn!("skipping {}: no report", e.id);
            skipped += 1;
            continue;
        };
        let report = match parse_report(&report_text) {
            Ok(r) => r,
            Err(err) => {
                log::warn!("skipping {}: {err}", e.id);
                skipped += 1;
                continue;
            }
        };
        labels.push(e.liver_present);
        scores.push(report.score);
        detections.push(report.detected);
        if let (true, Some(t)) = (e.liver_present, &e.truth_path) {
            let t = if t.is_absolute() { t.clone() } else { base.join(t) };
            match (read_mask(&t), read_mask(mask_path(outputs, &e.id))) {
                (Ok(t), Ok(p)) => dices.push(dice(&p, &t)?),
                _ => log::warn!("no dice for {}: mask missing", e.id),
            }
        }
        if let (true, Some(want), Some(got)) =
            (e.liver_present, e.expected_mean_hu, report.dominant_mean_hu)
        {
            pred.push(got);
            truth.push(want);
        }
    }
    let (sensitivity, specificity) = sens_spec(&detections, &labels).unwrap_or((f64::NAN, f64::NAN));
    let auc = roc_auc(&scores, &labels).unwrap_or(f64::NAN);
    let dice_mean = if dices.is_empty() {
        f64::NAN
    } else {
        dices.iter().sum::<f64>() / dices.len() as f64
    };
    let (std, p95, max) = match density_error_stats(&pred, &truth) {
        Ok(s) => (s.std, s.p95, s.max),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(EvalStats {
        sensitivity,
        specificity,
        auc,
        dice_mean,
        density_err_std_hu: std,
        density_err_p95_hu: p95,
        density_err_max_hu: max,
        n_studies: labels.len(),
        n_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        let cfg = PipelineConfig::parse(
            "# calibration\ntau = 0.4\nworkers=3\nflip_z = true\n\nsource = http://x:1/\nscale_min = 0.9 # tighter\n",
        )
        .unwrap();
        assert_eq!(cfg.tau, 0.4);
        assert_eq!(cfg.workers, 3);
        assert!(cfg.flip_z);
        assert_eq!(cfg.source.as_deref(), Some("http://x:1/"));
        assert_eq!(cfg.search.scale_min, 0.9);
    }

    #[test]
    fn config_rejects_typos_and_bad_values() {
        for text in [
            "tua = 0.3",
            "tau 0.3",
            "workers = 0",
            "workers = -1",
            "flip_z = maybe",
            "pre_smooth_mm = -1",
            "scale_min = 2",
        ] {
            assert!(
                matches!(PipelineConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn every_key_is_settable() {
        for key in PipelineConfig::KEYS {
            let mut cfg = PipelineConfig::default();
            let v = match key {
                "workers" => "2",
                "flip_z" => "false",
                "source" => "dir",
                _ => "0.5",
            };
            cfg.set(key, v).unwrap();
        }
    }

    #[test]
    fn manifest_and_report_parsing() {
        let m = parse_manifest("a body yes 50.0 truth/a.mvol\nb head no - -\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].expected_mean_hu, Some(50.0));
        assert_eq!(m[1].truth_path, None);
        assert!(parse_manifest("a body maybe 1 x").is_err());

        let r = parse_report(
            "LIVER REPORT\ndetected: yes\ntemplate: I-a type: I score: 0.512\nvisible_fraction: 1.00\n\
             total_volume_ml: 1500.0\nmodes: 2\nmode 1: mean_hu 50.1 std_hu 9.9 volume_ml 1200.0 fraction 0.80\n\
             mode 2: mean_hu 24.0 std_hu 9.0 volume_ml 300.0 fraction 0.20\ndominant_mode: 1\n",
        )
        .unwrap();
        assert_eq!(
            r,
            ParsedReport {
                detected: true,
                score: 0.512,
                dominant_mean_hu: Some(50.1)
            }
        );
        let r = parse_report(&render_not_detected(-1.0)).unwrap();
        assert!(!r.detected);
        assert_eq!(r.score, -1.0);
    }

    #[test]
    fn summary_counts_statuses() {
        let rec = |id: &str, status| StudyRecord {
            id: id.into(),
            status,
            score: 0.0,
            timings: StageTimings::default(),
        };
        let s = BatchSummary {
            studies: vec![
                rec("a", StudyStatus::Ok),
                rec("b", StudyStatus::Error("404".into())),
                rec("c", StudyStatus::Ok),
            ],
            wall_time_s: 6.0,
        };
        let text = s.render();
        assert!(text.starts_with("studies = 3\nok = 2\nno-liver = 0\n"));
        assert!(text.contains("error = 1\n"));
        assert!(text.contains("studies_per_min = 30.00\n"));
        assert!(text.contains("study b error(404)\n"));
    }
}
