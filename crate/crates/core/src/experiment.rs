//! Seeded SNR / quality sweeps with CSV and plot-data output.
//!
//! One CSV row per (SNR, quality, seed) trial; each trial transmits every
//! evaluation image once and reports means over the images. Trials are
//! independent jobs run on a worker pool and merged in sweep order, so the
//! output does not depend on scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

use crate::channel::{ChannelConfig, ChannelKind};
use crate::codec::Quality;
use crate::data::{load_ppm_dir, procedural_corpus};
use crate::fec::{self, ParityCheckMatrix};
use crate::image::{Image, ImageError};
use crate::metrics::{ms_ssim, psnr, MetricsError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::pipeline::{transmit_image, PipelineConfig, PipelineError, StreamMode};

pub const CSV_HEADER: &str = "snr_db,cbr,psnr_db,ms_ssim,corruption_rate,seed";
pub const METRICS: [&str; 4] = ["cbr", "psnr_db", "ms_ssim", "corruption_rate"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

/// Parses TOML text into `T`, reporting the line of the first error.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ExperimentError::Parse {
            line,
            column,
            msg: e.message().trim().to_string(),
        }
    })
}

pub fn read_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Explicit list or inclusive arithmetic range.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl Axis {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            Axis::List(ref v) => Ok(v.clone()),
            Axis::Range { start, stop, step } => {
                if !(step > 0.0) || stop < start {
                    return Err(ExperimentError::Config("range needs step > 0 and stop >= start".into()));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
                Ok((0..n).map(|i| start + i as f64 * step).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub snr_db: Axis,
    pub quality: Vec<u32>,
    /// Trials per point; trial `i` uses seed `seed_base + i`.
    pub seeds: usize,
    pub seed_base: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            snr_db: Axis::Range {
                start: 2.0,
                stop: 12.0,
                step: 2.0,
            },
            quality: vec![50],
            seeds: 5,
            seed_base: 0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub power: f64,
    pub block_len: Option<usize>,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            kind: ChannelKind::Awgn,
            power: 1.0,
            block_len: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Parallel,
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub mode: Mode,
    /// `desk`, `full` or a base-matrix file.
    pub code: String,
    pub rate_adapt: bool,
    pub max_iter: usize,
    /// Trained model; without one a freshly initialized model is used.
    pub checkpoint: Option<PathBuf>,
    pub model_seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            mode: Mode::Parallel,
            code: "desk".into(),
            rate_adapt: true,
            max_iter: fec::DEFAULT_MAX_ITER,
            checkpoint: None,
            model_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of PPM images; procedural images otherwise.
    pub ppm_dir: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            ppm_dir: None,
            count: 8,
            size: 16,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotAxis {
    Snr,
    Quality,
    Cbr,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub csv: PathBuf,
    /// Directory for `<metric>.dat` files; none are written when absent.
    pub plot_dir: Option<PathBuf>,
    pub axis: PlotAxis,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            csv: "results.csv".into(),
            plot_dir: None,
            axis: PlotAxis::Snr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sweep: SweepSection,
    pub channel: ChannelSection,
    pub pipeline: PipelineSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        let snrs = self.sweep.snr_db.values()?;
        if snrs.is_empty() || self.sweep.quality.is_empty() || self.sweep.seeds == 0 {
            return bad("sweep needs at least one snr_db, quality and seed");
        }
        if snrs.iter().any(|s| s.is_nan()) {
            return bad("snr_db values must be numbers");
        }
        for &q in &self.sweep.quality {
            Quality::new(q).map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if self.data.ppm_dir.is_none() && (self.data.count == 0 || self.data.size == 0) {
            return bad("data.count and data.size must be positive");
        }
        let ch = self.channel_config(0.0, 0);
        ch.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    fn channel_config(&self, snr_db: f64, seed: u64) -> ChannelConfig {
        ChannelConfig {
            power: self.channel.power,
            block_len: self.channel.block_len,
            ..ChannelConfig::new(self.channel.kind, snr_db, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub snr_db: f64,
    pub quality: u32,
    pub cbr: f64,
    /// `f64::INFINITY` when every pixel is reconstructed exactly.
    pub psnr_db: f64,
    pub ms_ssim: f64,
    /// Fraction of images whose image stream raised the corruption flag.
    pub corruption_rate: f64,
    pub seed: u64,
}

/// Seed of image `index` within the trial seeded `trial_seed`.
pub fn image_seed(trial_seed: u64, index: usize) -> u64 {
    trial_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64
}

/// One trial: every image through the pipeline once, averaged.
pub fn run_trial(
    model: Option<&Model>,
    images: &[Image],
    cfg: &PipelineConfig,
    quality: u32,
    seed: u64,
) -> Result<MetricsRow> {
    let n = images.len() as f64;
    let (mut cbr, mut ps, mut ss, mut bad) = (0.0, 0.0, 0.0, 0usize);
    for (i, img) in images.iter().enumerate() {
        let t = transmit_image(model, img, cfg, image_seed(seed, i))?;
        cbr += t.frame.cbr();
        ps += psnr(img, &t.x_hat)?;
        ss += ms_ssim(img, &t.x_hat)?;
        bad += t.corrupted as usize;
    }
    Ok(MetricsRow {
        snr_db: cfg.channel.snr_db,
        quality,
        cbr: cbr / n,
        psnr_db: ps / n,
        ms_ssim: ss / n,
        corruption_rate: bad as f64 / n,
        seed,
    })
}

pub fn load_images(data: &DataSection) -> Result<Vec<Image>> {
    let images = match &data.ppm_dir {
        Some(dir) => load_ppm_dir(dir)?,
        None => procedural_corpus(data.count, data.size, data.seed),
    };
    if images.is_empty() {
        return Err(ExperimentError::Config("no evaluation images".into()));
    }
    Ok(images)
}

pub fn load_model(p: &PipelineSection) -> Result<Option<Model>> {
    if p.mode == Mode::Conventional {
        return Ok(None);
    }
    Ok(Some(match &p.checkpoint {
        Some(path) => Model::load(path)?.0,
        None => Model::new(ModelConfig::default(), p.model_seed)?,
    }))
}

/// Runs every trial of the sweep; rows are ordered by quality, SNR, seed.
pub fn run_sweep(cfg: &ExperimentConfig, model: Option<&Model>, images: &[Image]) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let code: ParityCheckMatrix = fec::load_code(&cfg.pipeline.code).map_err(PipelineError::from)?;
    let mode = match cfg.pipeline.mode {
        Mode::Parallel => StreamMode::Parallel,
        Mode::Conventional => StreamMode::ConventionalOnly,
    };
    let snrs = cfg.sweep.snr_db.values()?;
    let jobs: Vec<(u32, f64, u64)> = cfg
        .sweep
        .quality
        .iter()
        .flat_map(|&q| {
            snrs.iter()
                .flat_map(move |&s| (0..cfg.sweep.seeds as u64).map(move |i| (q, s, cfg.sweep.seed_base + i)))
        })
        .collect();
    let run = |&(q, snr, seed): &(u32, f64, u64)| -> Result<MetricsRow> {
        let pc = PipelineConfig {
            quality: Quality::new(q).map_err(PipelineError::from)?,
            code: code.clone(),
            channel: cfg.channel_config(snr, seed),
            mode,
            rate_adapt: cfg.pipeline.rate_adapt,
            max_iter: cfg.pipeline.max_iter,
        };
        run_trial(model, images, &pc, q, seed)
    };
    let workers = match cfg.sweep.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = run(&jobs[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn cell(v: f64, precision: usize) -> String {
    if v.is_finite() {
        format!("{v:.precision$}")
    } else {
        String::new()
    }
}

/// CSV text: header row, LF line endings, infinite PSNR as an empty cell.
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.snr_db,
            cell(r.cbr, 6),
            cell(r.psnr_db, 4),
            cell(r.ms_ssim, 6),
            cell(r.corruption_rate, 4),
            r.seed
        );
    }
    s
}

fn metric(r: &MetricsRow, name: &str) -> f64 {
    match name {
        "cbr" => r.cbr,
        "psnr_db" => r.psnr_db,
        "ms_ssim" => r.ms_ssim,
        _ => r.corruption_rate,
    }
}

/// Mean of each metric over seeds, one point per (quality, SNR) in row order.
fn point_means(rows: &[MetricsRow]) -> Vec<(u32, f64, Vec<MetricsRow>)> {
    let mut points: Vec<(u32, f64, Vec<MetricsRow>)> = Vec::new();
    for r in rows {
        match points.last_mut() {
            Some((q, s, group)) if *q == r.quality && *s == r.snr_db => group.push(*r),
            _ => points.push((r.quality, r.snr_db, vec![*r])),
        }
    }
    points
}

/// Two-column gnuplot data per metric: x then the mean over seeds. With
/// `PlotAxis::Snr` each quality is a separate block (`index` in gnuplot);
/// otherwise each SNR is.
pub fn plot_data(rows: &[MetricsRow], axis: PlotAxis) -> Vec<(String, String)> {
    let points = point_means(rows);
    let mean = |g: &[MetricsRow], m: &str| g.iter().map(|r| metric(r, m)).sum::<f64>() / g.len() as f64;
    METRICS
        .iter()
        .map(|&m| {
            let mut blocks: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for (q, snr, group) in &points {
                let (label, x) = match axis {
                    PlotAxis::Snr => (format!("quality {q}"), *snr),
                    PlotAxis::Quality => (format!("snr_db {snr}"), *q as f64),
                    PlotAxis::Cbr => (format!("snr_db {snr}"), mean(group, "cbr")),
                };
                let y = mean(group, m);
                match blocks.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, pts)) => pts.push((x, y)),
                    None => blocks.push((label, vec![(x, y)])),
                }
            }
            let x_name = match axis {
                PlotAxis::Snr => "snr_db",
                PlotAxis::Quality => "quality",
                PlotAxis::Cbr => "cbr",
            };
            let mut text = String::new();
            for (i, (label, pts)) in blocks.iter().enumerate() {
                if i > 0 {
                    text.push_str("\n\n");
                }
                let _ = writeln!(text, "# {label}\n# {x_name} {m}");
                for (x, y) in pts {
                    let _ = writeln!(text, "{} {}", cell(*x, 6), if y.is_finite() { format!("{y:.6}") } else { "inf".into() });
                }
            }
            (format!("{m}.dat"), text)
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads the data and model named by `cfg`, runs the sweep and writes the
/// CSV and plot-data files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let images = load_images(&cfg.data)?;
    let model = load_model(&cfg.pipeline)?;
    let rows = run_sweep(cfg, model.as_ref(), &images)?;
    write(&cfg.output.csv, &to_csv(&rows))?;
    if let Some(dir) = &cfg.output.plot_dir {
        std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (name, text) in plot_data(&rows, cfg.output.axis) {
            write(&dir.join(name), &text)?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conventional(snr: &str, quality: &str, seeds: usize) -> ExperimentConfig {
        parse_config(&format!(
            "[sweep]\nsnr_db = {snr}\nquality = {quality}\nseeds = {seeds}\nworkers = 2\n\
             [pipeline]\nmode = \"conventional\"\n[data]\ncount = 2\nsize = 16\n"
        ))
        .unwrap()
    }

    #[test]
    fn axis_ranges_are_inclusive() {
        let a = Axis::Range {
            start: 2.0,
            stop: 12.0,
            step: 2.0,
        };
        assert_eq!(a.values().unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        let a = Axis::Range {
            start: 0.0,
            stop: 1.0,
            step: 0.1,
        };
        assert_eq!(a.values().unwrap().len(), 11);
        assert!(Axis::Range {
            start: 0.0,
            stop: 1.0,
            step: 0.0
        }
        .values()
        .is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "[sweep]\nseeds = 3\nquality = \"high\"\n";
        match parse_config::<ExperimentConfig>(text) {
            Err(ExperimentError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "[sweep]\nseeds = 3\n\n[channel]\nfading = true\n";
        match parse_config::<ExperimentConfig>(text) {
            Err(ExperimentError::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("fading"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let text = "[sweep\n";
        assert!(matches!(parse_config::<ExperimentConfig>(text), Err(ExperimentError::Parse { line: 1, .. })));
    }

    #[test]
    fn defaults_and_full_config() {
        let c: ExperimentConfig = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let c: ExperimentConfig = parse_config(
            "[sweep]\nsnr_db = { start = 0, stop = 4, step = 2 }\nquality = [10, 90]\nseeds = 2\n\
             [channel]\nkind = \"rayleigh\"\nblock_len = 64\n\
             [pipeline]\ncode = \"full\"\nrate_adapt = false\n\
             [output]\ncsv = \"x.csv\"\naxis = \"cbr\"\n",
        )
        .unwrap();
        assert_eq!(c.sweep.snr_db.values().unwrap(), vec![0.0, 2.0, 4.0]);
        assert_eq!(c.channel.kind, ChannelKind::Rayleigh);
        assert_eq!(c.channel.block_len, Some(64));
        assert_eq!(c.output.axis, PlotAxis::Cbr);
        assert!(c.validate().is_ok());
        let bad: ExperimentConfig = parse_config("[sweep]\nquality = [0]\n").unwrap();
        assert!(matches!(bad.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn sweep_counts_rows_and_orders_them() {
        let cfg = conventional("{ start = 2, stop = 12, step = 2 }", "[10]", 5);
        let images = load_images(&cfg.data).unwrap();
        let rows = run_sweep(&cfg, None, &images).unwrap();
        assert_eq!(rows.len(), 30);
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 31);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(!csv.contains('\r'));
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.snr_db, 2.0 + 2.0 * (i / 5) as f64);
            assert_eq!(r.seed, (i % 5) as u64);
            assert!((0.0..=1.0).contains(&r.ms_ssim));
        }
    }

    #[test]
    fn infinite_psnr_is_an_empty_cell() {
        let row = MetricsRow {
            snr_db: 40.0,
            quality: 100,
            cbr: 0.5,
            psnr_db: f64::INFINITY,
            ms_ssim: 1.0,
            corruption_rate: 0.0,
            seed: 3,
        };
        assert_eq!(to_csv(&[row]).lines().nth(1).unwrap(), "40,0.500000,,1.000000,0.0000,3");
    }

    #[test]
    fn plot_files_have_one_block_per_quality() {
        let cfg = conventional("[4.0, 8.0]", "[10, 50]", 2);
        let images = load_images(&cfg.data).unwrap();
        let rows = run_sweep(&cfg, None, &images).unwrap();
        let files = plot_data(&rows, PlotAxis::Snr);
        assert_eq!(files.len(), 4);
        let (name, text) = &files[0];
        assert_eq!(name, "cbr.dat");
        assert_eq!(text.matches("# quality").count(), 2);
        let data: Vec<&str> = text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        assert_eq!(data.len(), 4);
        let first: f64 = data[0].split(' ').nth(1).unwrap().parse().unwrap();
        let mean = (rows[0].cbr + rows[1].cbr) / 2.0;
        assert!((first - mean).abs() < 1e-6);
    }
}
