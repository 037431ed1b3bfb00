//! Subcommand implementations. Each writes its outputs, the effective
//! configuration (`config.json`) and a run manifest (`format.json`) under
//! one output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stainseg_core::ck::{condition_masks, segment_ck, CkConfig, StainMatrix};
use stainseg_core::datamodel::{DatasetSplit, Domain, Example, ImagePatch, LabelMask, TC_NEGATIVE, TC_POSITIVE};
use stainseg_core::eval::{f1_scores, pooled_f1, predict_mask, score_report, AbsentClass, Concordance, F1Report};
use stainseg_core::synth::{make_splits, SplitSizes, SynthConfig};
use stainseg_core::train::{train_with, CheckpointRecord, Observer, StepReport, TrainConfig, TrainState};

use crate::args::{CkSegmentArgs, EvaluateArgs, PredictArgs, ScoreArgs, SynthArgs, TrainArgs};
use crate::checkpoint::{checkpoint_dir_name, config_hash, load_segmentation_model, save_checkpoint};
use crate::error::{CliError, CliResult};
use crate::io::{
    create_dir, file_stem, png_inputs, read_dataset, read_mask, read_patch, read_toml, write_dataset, write_json,
    write_mask, write_patch, FORMAT_VERSION,
};

pub const RUN_FORMAT: &str = "stainseg-run";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_MANIFEST_FILE: &str = "format.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SELECTION_FILE: &str = "selection.json";

/// Versioned description of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    /// Outputs relative to the run directory; directories end in `/`.
    pub outputs: Vec<String>,
}

fn finish_run<C: Serialize>(out: &Path, command: &str, config: &C, outputs: &[&str]) -> CliResult<()> {
    write_json(&out.join(CONFIG_FILE), config)?;
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        version: FORMAT_VERSION,
        command: command.into(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

fn config_or_default<C: Default + for<'de> Deserialize<'de>>(path: Option<&PathBuf>) -> CliResult<C> {
    path.map_or_else(|| Ok(C::default()), |p| read_toml(p))
}

fn require_inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    let files = png_inputs(path)?;
    if files.is_empty() {
        return Err(CliError::format(path, "no PNG files found"));
    }
    Ok(files)
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRunConfig {
    pub synth: SynthConfig,
    pub splits: SplitSizes,
}

pub fn synth(args: &SynthArgs, out: &Path) -> CliResult<()> {
    let mut cfg: SynthRunConfig = config_or_default(args.config.as_ref())?;
    let s = &mut cfg.synth;
    s.seed = args.seed.unwrap_or(s.seed);
    s.patch_size = args.patch_size.unwrap_or(s.patch_size);
    let z = &mut cfg.splits;
    z.train_a = args.train_a.unwrap_or(z.train_a);
    z.train_b = args.train_b.unwrap_or(z.train_b);
    z.test = args.test.unwrap_or(z.test);
    z.validation = args.validation.unwrap_or(z.validation);
    z.annotation_fraction = args.annotation_fraction.unwrap_or(z.annotation_fraction);
    let data = make_splits(&cfg.synth, &cfg.splits)?;
    write_dataset(out, &data)?;
    finish_run(out, "synth", &cfg, &[crate::io::MANIFEST_FILE, "images/", "masks/"])
}

// ---------------------------------------------------------------- ck-segment

#[derive(Deserialize)]
struct StainFile {
    rows: StainMatrix,
}

pub fn ck_segment(args: &CkSegmentArgs, out: &Path) -> CliResult<()> {
    let mut cfg: CkConfig = config_or_default(args.config.as_ref())?;
    if let Some(path) = &args.stains {
        cfg.stains = read_toml::<StainFile>(path)?.rows;
    }
    cfg.close_radius = args.close_radius.unwrap_or(cfg.close_radius);
    cfg.ck_channel = args.ck_channel.unwrap_or(cfg.ck_channel);
    cfg.min_density = args.min_density.unwrap_or(cfg.min_density);
    let files = require_inputs(&args.input)?;
    let dirs = ["masks", "negative", "positive"].map(|d| out.join(d));
    dirs.iter().try_for_each(|d| create_dir(d))?;
    for file in &files {
        let stem = file_stem(file);
        let patch = read_patch(file, &stem, Domain::B)?;
        let (negative, positive) = condition_masks(&segment_ck(&patch, &cfg)?);
        let name = format!("{stem}.png");
        // the binary mask uses the TC- encoding: 1 marks epithelium
        write_mask(&dirs[0].join(&name), &negative)?;
        write_mask(&dirs[1].join(&name), &negative)?;
        write_mask(&dirs[2].join(&name), &positive)?;
    }
    finish_run(out, "ck-segment", &cfg, &["masks/", "negative/", "positive/"])
}

// ---------------------------------------------------------------- train

/// Streams the training log and checkpoints to disk. The core reports a
/// generic failure when a hook fails; the actual error is kept here.
struct RunRecorder {
    out: PathBuf,
    log: BufWriter<File>,
    start: Instant,
    hash: String,
    failure: Option<CliError>,
}

impl RunRecorder {
    fn keep<T>(&mut self, result: CliResult<T>) -> stainseg_core::Result<()> {
        result.map(|_| ()).map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            stainseg_core::Error::InvalidInput(msg)
        })
    }

    fn log_step(&mut self, report: &StepReport) -> CliResult<()> {
        let l = &report.losses;
        let record = serde_json::json!({
            "iteration": report.iteration,
            "phase": report.phase,
            "gan_ab": l.gan_ab,
            "gan_ba": l.gan_ba,
            "cycle": l.cycle,
            "seg": l.seg,
            "total": l.total,
            "discriminator": report.discriminator,
            "wall_time_s": self.start.elapsed().as_secs_f64(),
        });
        let path = self.out.join(TRAIN_LOG_FILE);
        writeln!(self.log, "{record}").map_err(CliError::io(&path))
    }
}

impl Observer<f32> for RunRecorder {
    fn on_step(&mut self, _state: &TrainState<f32>, report: &StepReport) -> stainseg_core::Result<()> {
        let r = self.log_step(report);
        self.keep(r)
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>, record: &CheckpointRecord) -> stainseg_core::Result<()> {
        let path = self.out.join(TRAIN_LOG_FILE);
        let flushed = self.log.flush().map_err(CliError::io(&path));
        let r = flushed.and_then(|_| {
            let dir = self.out.join("checkpoints").join(checkpoint_dir_name(record.iteration));
            save_checkpoint(&dir, state, record, &self.hash)
        });
        self.keep(r)
    }

    fn on_synthetic(&mut self, examples: &[Example]) -> stainseg_core::Result<()> {
        let data = DatasetSplit { train_a: examples.to_vec(), ..DatasetSplit::default() };
        let r = write_dataset(&self.out.join("synthetic"), &data);
        self.keep(r)
    }
}

/// Model selection outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best_iteration: Option<u64>,
    /// Mean test F1 of the selected checkpoint.
    pub best_test_f1: Option<f64>,
    /// Checkpoint directory relative to the run directory.
    pub checkpoint: Option<String>,
    /// Validation scores of the selected model.
    pub validation: Option<F1Report>,
    pub checkpoints: Vec<CheckpointRecord>,
}

pub fn train(args: &TrainArgs, out: &Path) -> CliResult<()> {
    let mut cfg: TrainConfig = config_or_default(args.config.as_ref())?;
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.checkpoint_every = args.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    cfg.weights.lambda_seg = args.lambda_seg.unwrap_or(cfg.weights.lambda_seg);
    cfg.weights.lambda_cycle = args.lambda_cycle.unwrap_or(cfg.weights.lambda_cycle);
    cfg.g_lr = args.g_lr.unwrap_or(cfg.g_lr);
    cfg.d_lr = args.d_lr.unwrap_or(cfg.d_lr);
    cfg.validate()?;
    let data = read_dataset(&args.data)?;

    create_dir(out)?;
    let mut outputs = vec![TRAIN_LOG_FILE, "checkpoints/", SELECTION_FILE];
    if matches!(cfg.mode, stainseg_core::train::TrainMode::SegOnlySynth | stainseg_core::train::TrainMode::TwoStep) {
        outputs.push("synthetic/");
    }
    finish_run(out, "train", &cfg, &outputs)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let log = BufWriter::new(File::create(&log_path).map_err(CliError::io(&log_path))?);
    let mut recorder =
        RunRecorder { out: out.to_path_buf(), log, start: Instant::now(), hash: config_hash(&cfg), failure: None };
    let state = match train_with::<f32, _>(cfg, &data, &mut recorder) {
        Ok(state) => state,
        Err(e) => return Err(recorder.failure.take().unwrap_or(e.into())),
    };
    recorder.log.flush().map_err(CliError::io(&log_path))?;

    let validation = match (&state.best_iteration, data.validation.is_empty()) {
        (Some(_), false) => {
            Some(stainseg_core::eval::evaluate_model(&state.best_model()?, &data.validation, state.config.absent)?)
        }
        _ => None,
    };
    let selection = Selection {
        best_iteration: state.best_iteration,
        best_test_f1: state.best_f1,
        checkpoint: state.best_iteration.map(|i| format!("checkpoints/{}", checkpoint_dir_name(i))),
        validation,
        checkpoints: state.checkpoints.clone(),
    };
    write_json(&out.join(SELECTION_FILE), &selection)
}

// ---------------------------------------------------------------- predict

#[derive(Clone, Debug, Serialize)]
struct PredictConfig {
    checkpoint: PathBuf,
    input: PathBuf,
    tile: usize,
    overlap: usize,
}

const OVERLAY_ALPHA: f32 = 0.45;
const NEGATIVE_COLOR: [f32; 3] = [0.15, 0.35, 1.0];
const POSITIVE_COLOR: [f32; 3] = [1.0, 0.15, 0.1];

/// The image with TC- pixels tinted blue and TC+ pixels tinted red.
pub fn overlay(image: &ImagePatch, mask: &LabelMask) -> ImagePatch {
    let mut out = image.clone();
    for (px, label) in out.pixels.chunks_exact_mut(3).zip(&mask.labels) {
        let color = match *label {
            TC_NEGATIVE => NEGATIVE_COLOR,
            TC_POSITIVE => POSITIVE_COLOR,
            _ => continue,
        };
        for (v, c) in px.iter_mut().zip(color) {
            *v = (1.0 - OVERLAY_ALPHA) * *v + OVERLAY_ALPHA * c;
        }
    }
    out
}

pub fn predict(args: &PredictArgs, out: &Path) -> CliResult<()> {
    let model = load_segmentation_model(&args.checkpoint)?;
    let stride = model.spec.stride_product();
    if !args.tile.is_multiple_of(stride) {
        return Err(CliError::Usage(format!(
            "--tile must be a multiple of the model stride {stride}, got {}",
            args.tile
        )));
    }
    if args.overlap >= args.tile {
        return Err(CliError::Usage(format!("--overlap {} must be smaller than --tile {}", args.overlap, args.tile)));
    }
    let files = require_inputs(&args.input)?;
    let (masks, overlays) = (out.join("masks"), out.join("overlays"));
    create_dir(&masks)?;
    create_dir(&overlays)?;
    for file in &files {
        let stem = file_stem(file);
        let image = read_patch(file, &stem, Domain::A)?;
        let mask = predict_mask(&model, &image, args.tile, args.overlap)?;
        write_mask(&masks.join(format!("{stem}.png")), &mask)?;
        write_patch(&overlays.join(format!("{stem}.png")), &overlay(&image, &mask))?;
    }
    let cfg = PredictConfig {
        checkpoint: args.checkpoint.clone(),
        input: args.input.clone(),
        tile: args.tile,
        overlap: args.overlap,
    };
    finish_run(out, "predict", &cfg, &["masks/", "overlays/"])
}

// ---------------------------------------------------------------- score

#[derive(Serialize)]
struct ScoreRow<'a> {
    id: &'a str,
    tc_cnn: Option<f64>,
    tc_true: Option<f64>,
    status: &'static str,
}

fn read_masks(files: &[PathBuf]) -> CliResult<Vec<(String, LabelMask)>> {
    files.iter().map(|f| Ok((file_stem(f), read_mask(f, Domain::A)?))).collect()
}

fn score_rows(
    items: &[(String, LabelMask, Option<LabelMask>)],
) -> CliResult<(Vec<ScoreRow<'_>>, Option<Concordance>, Vec<stainseg_core::eval::ScoreBin>)> {
    let report = score_report(items)?;
    let by_id: BTreeMap<&str, _> = report.per_image.iter().map(|s| (s.id.as_str(), s)).collect();
    let rows = items
        .iter()
        .map(|(id, _, _)| match by_id.get(id.as_str()) {
            Some(s) => ScoreRow { id, tc_cnn: Some(s.tc_cnn), tc_true: s.tc_true, status: "ok" },
            None => ScoreRow { id, tc_cnn: None, tc_true: None, status: "no-epithelium" },
        })
        .collect();
    Ok((rows, report.concordance, report.bins))
}

#[derive(Serialize)]
struct ScoreConfig<'a> {
    masks: &'a Path,
}

pub fn score(args: &ScoreArgs, out: &Path) -> CliResult<()> {
    let masks = read_masks(&require_inputs(&args.masks)?)?;
    let items: Vec<_> = masks.into_iter().map(|(id, m)| (id, m, None)).collect();
    let (rows, _, _) = score_rows(&items)?;
    create_dir(out)?;
    write_csv(&out.join("scores.csv"), rows)?;
    finish_run(out, "score", &ScoreConfig { masks: &args.masks }, &["scores.csv"])
}

// ---------------------------------------------------------------- evaluate

#[derive(Serialize)]
struct F1Row<'a> {
    id: &'a str,
    other: Option<f64>,
    tc_negative: Option<f64>,
    tc_positive: Option<f64>,
    tc: Option<f64>,
    mean: f64,
    binary_mean: f64,
}

impl<'a> F1Row<'a> {
    fn new(id: &'a str, r: &F1Report) -> Self {
        Self {
            id,
            other: r.other,
            tc_negative: r.tc_negative,
            tc_positive: r.tc_positive,
            tc: r.tc,
            mean: r.mean,
            binary_mean: r.binary_mean,
        }
    }
}

#[derive(Serialize)]
struct ConcordanceFile {
    /// Images with a defined score in both masks.
    pairs: usize,
    unscoreable: usize,
    concordance: Option<Concordance>,
}

#[derive(Serialize)]
struct EvaluateConfig<'a> {
    pred: &'a Path,
    truth: &'a Path,
    absent: AbsentClass,
}

pub fn evaluate(args: &EvaluateArgs, out: &Path) -> CliResult<()> {
    let absent: AbsentClass = args.absent.into();
    let preds = read_masks(&require_inputs(&args.pred)?)?;
    let mut items = Vec::with_capacity(preds.len());
    for (id, pred) in preds {
        let truth_path = args.truth.join(format!("{id}.png"));
        if !truth_path.is_file() {
            return Err(CliError::format(&truth_path, format!("no reference mask for prediction {id}")));
        }
        let truth = read_mask(&truth_path, Domain::A)?;
        items.push((id, pred, Some(truth)));
    }
    let mut per_image = Vec::with_capacity(items.len());
    for (id, pred, truth) in &items {
        let truth = truth.as_ref().expect("reference present");
        per_image.push((id.as_str(), f1_scores(pred, truth, absent)?));
    }
    let pooled = pooled_f1(items.iter().map(|(_, p, t)| (p, t.as_ref().expect("reference present"))), absent)?;
    let (rows, concordance, bins) = score_rows(&items)?;

    create_dir(out)?;
    let f1_rows = per_image.iter().map(|(id, r)| F1Row::new(id, r)).chain([F1Row::new("pooled", &pooled)]);
    write_csv(&out.join("f1.csv"), f1_rows)?;
    let pairs = rows.iter().filter(|r| r.tc_true.is_some()).count();
    let unscoreable = rows.iter().filter(|r| r.tc_cnn.is_none()).count();
    write_json(&out.join("concordance.json"), &ConcordanceFile { pairs, unscoreable, concordance })?;
    write_csv(&out.join("bins.csv"), bins)?;
    write_csv(&out.join("scores.csv"), rows)?;
    let cfg = EvaluateConfig { pred: &args.pred, truth: &args.truth, absent };
    finish_run(out, "evaluate", &cfg, &["f1.csv", "concordance.json", "bins.csv", "scores.csv"])
}
