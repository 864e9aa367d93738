//! The `pianoflow` command line.

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

pub use config::{DataConfig, PathsConfig, RunConfig, SamplingConfig, REQUIRED_KEYS};

use crate::error::{arg_err, Error, Result};
use crate::flowgen::{condition_from_roll, train_stage2, Stage2Model};
use crate::metrics::{pd, rtf, windowed_eval};
use crate::midi::{
    make_toy_dataset, parse_midi_file, roll_from_events, synth_motion_from_roll, Clip, ClipFile, MotionSequence,
    PianoRoll, FRAME_RATE,
};
use crate::numcore::{rng, Tensor};
use crate::stage1::{acoustic_stand_in_with, train_stage1, Stage1Model};
use crate::streaming::{fuse_chunks, swf_generate, AfcStreamer, ChunkPlan, RollCondition};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pianoflow", version, about = "Piano-to-hand-motion generation pipeline")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print a JSON report on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the seeded toy dataset as clip files.
    SynthData,
    /// Train the wrist-trajectory stage.
    TrainStage1,
    /// Train the gesture flow stage on top of a trained stage 1.
    TrainStage2,
    /// Generate one fixed-length motion file.
    Generate(GenArgs),
    /// Generate chunk by chunk, emitting binary frame records.
    Stream(StreamArgs),
    /// Compare a predicted motion file against a reference.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Real-time factor measured when the prediction was generated.
        #[arg(long)]
        rtf: Option<f64>,
    },
    /// Summarize a Standard MIDI File, optionally writing it as a clip.
    ParseMidi {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct GenArgs {
    /// A `.mid` file or a clip file. Without it a fresh toy clip is
    /// synthesized and written next to the output as the reference.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of frames to generate (defaults to the input length).
    #[arg(long)]
    frames: Option<usize>,
    /// Motion file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct StreamArgs {
    #[command(flatten)]
    gen: GenArgs,
    /// Frame records destination; `-` for standard output.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Use the sliding-window cross-fade baseline instead of AFC.
    #[arg(long)]
    swf: bool,
}

/// Parses arguments, runs one subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(Error::Config(problems)) => {
            eprintln!("invalid configuration:");
            for p in problems {
                eprintln!("  - {p}");
            }
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let (cfg, warnings) = RunConfig::load(p)?;
            for w in warnings {
                log::warn!("{}: {w}", p.display());
            }
            Ok(cfg)
        }
    }
}

struct Reporter {
    json: bool,
    /// Human-readable lines go to stderr when stdout carries records.
    to_stderr: bool,
}

impl Reporter {
    fn emit(&self, value: serde_json::Value) -> Result<()> {
        let text = if self.json {
            serde_json::to_string_pretty(&value)?
        } else {
            human(&value)
        };
        if self.to_stderr {
            eprintln!("{text}");
        } else {
            println!("{text}");
        }
        Ok(())
    }
}

fn human(value: &serde_json::Value) -> String {
    match value.as_object() {
        Some(map) => map
            .iter()
            .map(|(k, v)| format!("{k}: {}", v.as_str().map_or_else(|| v.to_string(), str::to_string)))
            .collect::<Vec<_>>()
            .join("\n"),
        None => value.to_string(),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let records_to_stdout = matches!(&cli.command, Command::Stream(s) if s.records.as_deref() == Some(Path::new("-")));
    let rep = Reporter {
        json: cli.json,
        to_stderr: records_to_stdout,
    };
    match &cli.command {
        Command::SynthData => synth_data(&cfg, &rep),
        Command::TrainStage1 => cmd_train_stage1(&cfg, &rep),
        Command::TrainStage2 => cmd_train_stage2(&cfg, &rep),
        Command::Generate(a) => generate(&cfg, a, &rep),
        Command::Stream(a) => stream(&cfg, a, &rep),
        Command::Evaluate { pred, gt, rtf } => evaluate(&cfg, pred, gt, *rtf, &rep),
        Command::ParseMidi { file, out } => parse_midi(file, out.as_deref(), &rep),
    }
}

fn clip_path(cfg: &RunConfig, i: usize) -> PathBuf {
    cfg.paths.data_dir.join(format!("clip_{i:03}.clip"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn synth_data(cfg: &RunConfig, rep: &Reporter) -> Result<()> {
    let clips = make_toy_dataset(cfg.data.n_clips, cfg.data.clip_seconds, cfg.seed)?;
    std::fs::create_dir_all(&cfg.paths.data_dir)?;
    for (i, c) in clips.iter().enumerate() {
        ClipFile::from_clip(c).save(clip_path(cfg, i))?;
    }
    rep.emit(json!({
        "clips": clips.len(),
        "frames_per_clip": clips[0].roll.len(),
        "held_out": cfg.data.held_out,
        "dir": cfg.paths.data_dir,
    }))
}

fn load_clips(cfg: &RunConfig, range: std::ops::Range<usize>) -> Result<Vec<Clip>> {
    range
        .map(|i| {
            let p = clip_path(cfg, i);
            ClipFile::load(&p)
                .map_err(|e| Error::State(format!("cannot load {} ({e}); run synth-data first", p.display())))?
                .into_clip()
        })
        .collect()
}

fn split(cfg: &RunConfig) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n_train = cfg.data.n_clips - cfg.data.held_out;
    (0..n_train, n_train..cfg.data.n_clips)
}

fn cmd_train_stage1(cfg: &RunConfig, rep: &Reporter) -> Result<()> {
    let (train, test) = split(cfg);
    let clips = load_clips(cfg, train)?;
    let t = Instant::now();
    let (model, history) = train_stage1(&clips, &cfg.stage1, cfg.seed)?;
    let seconds = t.elapsed().as_secs_f64();
    ensure_parent(&cfg.paths.stage1)?;
    model.save(&cfg.paths.stage1)?;
    let mut heldout = Vec::new();
    for c in load_clips(cfg, test)? {
        let p = model.predict_wrists(&acoustic_stand_in_with(&c.roll, cfg.stage1.c_a))?;
        for hand in 0..2 {
            heldout.push(pd(&p.slice_cols(3 * hand, 3)?, &c.motion.wrist(hand))?);
        }
    }
    let mean_pd = if heldout.is_empty() { f64::NAN } else { heldout.iter().sum::<f64>() / heldout.len() as f64 };
    let last = history.last().copied();
    rep.emit(json!({
        "steps": history.len(),
        "final_loss": last.map(|r| r.total),
        "final_student_task": last.map(|r| r.student_task),
        "heldout_pd": heldout,
        "heldout_pd_mean": mean_pd,
        "seconds": seconds,
        "checkpoint": cfg.paths.stage1,
    }))
}

fn load_stage1(cfg: &RunConfig) -> Result<Stage1Model> {
    Stage1Model::load(cfg.stage1.clone(), &cfg.paths.stage1)
        .map_err(|e| Error::State(format!("stage-1 checkpoint unavailable: {e}")))
}

fn load_stage2(cfg: &RunConfig) -> Result<Stage2Model> {
    Stage2Model::load(cfg.stage2.clone(), &cfg.paths.stage2)
        .map_err(|e| Error::State(format!("stage-2 checkpoint unavailable: {e}")))
}

fn cmd_train_stage2(cfg: &RunConfig, rep: &Reporter) -> Result<()> {
    let stage1 = load_stage1(cfg)?;
    let clips = load_clips(cfg, split(cfg).0)?;
    let t = Instant::now();
    let (model, history) = train_stage2(&clips, &stage1, &cfg.stage2, cfg.seed)?;
    let seconds = t.elapsed().as_secs_f64();
    ensure_parent(&cfg.paths.stage2)?;
    model.save(&cfg.paths.stage2)?;
    let avg = |r: &[crate::flowgen::CfmRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len().max(1) as f64;
    let w = history.len().min(10);
    let (first, last) = (avg(&history[..w]), avg(&history[history.len() - w..]));
    rep.emit(json!({
        "steps": history.len(),
        "first10_loss": first,
        "last10_loss": last,
        "drop": 1.0 - last / first,
        "seconds": seconds,
        "checkpoint": cfg.paths.stage2,
    }))
}

/// The input roll, cropped to `frames`, plus the reference motion when known.
fn resolve_input(cfg: &RunConfig, args: &GenArgs) -> Result<(PianoRoll, Option<MotionSequence>)> {
    let (roll, motion) = match &args.input {
        Some(p) if p.extension().is_some_and(|e| e == "mid" || e == "midi") => {
            let parsed = parse_midi_file(&std::fs::read(p)?)?;
            let roll = roll_from_events(&parsed.events, parsed.duration_seconds())?;
            (roll, None)
        }
        Some(p) => {
            let f = ClipFile::load(p)?;
            let roll = f.roll.ok_or_else(|| arg_err!("{} has no piano roll", p.display()))?;
            (roll, Some(f.motion))
        }
        None => {
            let frames = args.frames.unwrap_or(crate::streaming::CHUNK_FRAMES);
            let seconds = frames as f64 / FRAME_RATE;
            let clip = make_toy_dataset(1, seconds, cfg.seed ^ 0x7e57)?.remove(0);
            (clip.roll, Some(clip.motion))
        }
    };
    let n = args.frames.unwrap_or(roll.len());
    if n == 0 || n > roll.len() {
        return Err(arg_err!("asked for {n} frames from an input of {}", roll.len()));
    }
    let motion = motion.map(|m| m.slice(0, n)).transpose()?;
    Ok((roll.slice(0, n)?, motion))
}

fn write_reference(cfg: &RunConfig, args: &GenArgs, roll: &PianoRoll, gt: &Option<MotionSequence>) -> Result<Option<PathBuf>> {
    match (args.input.is_none(), gt) {
        (true, Some(m)) => {
            let p = cfg.paths.out_dir.join("reference.clip");
            ensure_parent(&p)?;
            let clip = Clip {
                roll: roll.clone(),
                motion: m.clone(),
                seed: cfg.seed ^ 0x7e57,
            };
            ClipFile::from_clip(&clip).save(&p)?;
            Ok(Some(p))
        }
        _ => Ok(None),
    }
}

fn generate(cfg: &RunConfig, args: &GenArgs, rep: &Reporter) -> Result<()> {
    let stage1 = load_stage1(cfg)?;
    let stage2 = load_stage2(cfg)?;
    let (roll, gt) = resolve_input(cfg, args)?;
    let t = Instant::now();
    let cond = condition_from_roll(&stage1, &roll)?;
    let gestures = stage2.sample(&cond, &mut rng::stream(cfg.seed, 0))?;
    let wrists = stage1.predict_wrists(&acoustic_stand_in_with(&roll, cfg.stage1.c_a))?;
    let wall = t.elapsed().as_secs_f64();
    let motion = MotionSequence::new(wrists, gestures)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("generated.clip"));
    ensure_parent(&out)?;
    ClipFile::from_motion(&motion, cfg.seed).save(&out)?;
    let reference = write_reference(cfg, args, &roll, &gt)?;
    rep.emit(json!({
        "frames": motion.len(),
        "n_steps": cfg.stage2.n_steps,
        "seconds": wall,
        "rtf": rtf(wall, motion.len())?,
        "out": out,
        "reference": reference,
    }))
}

fn write_records(w: &mut dyn Write, first_index: usize, frames: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(frames.rows() * (4 + 4 * frames.cols()));
    for i in 0..frames.rows() {
        buf.extend_from_slice(&((first_index + i) as u32).to_le_bytes());
        for v in frames.row(i) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn stream(cfg: &RunConfig, args: &StreamArgs, rep: &Reporter) -> Result<()> {
    let stage1 = load_stage1(cfg)?;
    let stage2 = load_stage2(cfg)?;
    let (roll, gt) = resolve_input(cfg, &args.gen)?;
    let plan = ChunkPlan::new(cfg.sampling.chunk_frames, cfg.sampling.overlap_frames, roll.len())?;
    let mut sink: Option<Box<dyn Write>> = match &args.records {
        None => None,
        Some(p) if p == Path::new("-") => Some(Box::new(std::io::stdout().lock())),
        Some(p) => {
            ensure_parent(p)?;
            Some(Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)))
        }
    };
    let src = RollCondition {
        stage1: &stage1,
        roll: &roll,
    };
    let chunk_wrists = |start: usize, len: usize| -> Result<Tensor> {
        let part = roll.slice(start, len)?;
        stage1.predict_wrists(&acoustic_stand_in_with(&part, cfg.stage1.c_a))
    };
    let dims = stage2.dims();
    let n_steps = cfg.stage2.n_steps;
    let t = Instant::now();
    let (gestures, wrists) = if args.swf {
        let g = stage2.scale.denormalize(&swf_generate(&stage2, &src, plan, cfg.seed, n_steps, dims)?)?;
        let w = plan
            .chunks()
            .iter()
            .map(|&(s, l)| chunk_wrists(s, l))
            .collect::<Result<Vec<_>>>()?;
        let w = fuse_chunks(&w, plan)?;
        if let Some(s) = sink.as_mut() {
            write_records(s.as_mut(), 0, &g)?;
        }
        (g, w)
    } else {
        let mut streamer = AfcStreamer::new(plan, cfg.seed, n_steps, dims)?;
        let (mut gs, mut ws) = (Vec::new(), Vec::new());
        for &(start, len) in &plan.chunks() {
            let emitted = streamer.state().emitted;
            let frames = streamer
                .next_frames(&stage2, &src)?
                .ok_or_else(|| Error::State("stream ended early".into()))?;
            let frames = stage2.scale.denormalize(&frames)?;
            ws.push(chunk_wrists(start, len)?.slice_rows(0, frames.rows())?);
            if let Some(s) = sink.as_mut() {
                write_records(s.as_mut(), emitted, &frames)?;
            }
            gs.push(frames);
        }
        (
            Tensor::concat_rows(&gs.iter().collect::<Vec<_>>())?,
            Tensor::concat_rows(&ws.iter().collect::<Vec<_>>())?,
        )
    };
    let wall = t.elapsed().as_secs_f64();
    let motion = MotionSequence::new(wrists, gestures)?;
    let out = args.gen.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("stream.clip"));
    ensure_parent(&out)?;
    ClipFile::from_motion(&motion, cfg.seed).save(&out)?;
    let reference = write_reference(cfg, &args.gen, &roll, &gt)?;
    rep.emit(json!({
        "method": if args.swf { "swf" } else { "afc" },
        "frames": motion.len(),
        "chunks": plan.chunks().len(),
        "seconds": wall,
        "rtf": rtf(wall, motion.len())?,
        "out": out,
        "records": args.records,
        "reference": reference,
    }))
}

fn evaluate(cfg: &RunConfig, pred: &Path, gt: &Path, rtf: Option<f64>, rep: &Reporter) -> Result<()> {
    let p = ClipFile::load(pred)?.motion;
    let g = ClipFile::load(gt)?.motion;
    let mut report = windowed_eval(&p, &g, &cfg.eval)?;
    report.rtf = rtf;
    rep.emit(serde_json::to_value(&report)?)
}

fn parse_midi(file: &Path, out: Option<&Path>, rep: &Reporter) -> Result<()> {
    let parsed = parse_midi_file(&std::fs::read(file)?)?;
    let duration = parsed.duration_seconds();
    let frames = if duration > 0.0 {
        let roll = roll_from_events(&parsed.events, duration)?;
        if let Some(out) = out {
            let seed = 0;
            let clip = Clip {
                motion: synth_motion_from_roll(&roll, seed),
                roll,
                seed,
            };
            ensure_parent(out)?;
            ClipFile::from_clip(&clip).save(out)?;
        }
        clip_frames(duration)
    } else {
        if out.is_some() {
            return Err(arg_err!("{} has no notes to write", file.display()));
        }
        0
    };
    rep.emit(json!({
        "format": parsed.format,
        "tracks": parsed.tracks,
        "division": format!("{:?}", parsed.division),
        "notes": parsed.events.len(),
        "duration_seconds": duration,
        "frames": frames,
        "dropped_out_of_range": parsed.dropped_out_of_range,
        "dropped_zero_length": parsed.dropped_zero_length,
        "dangling": parsed.dangling,
    }))
}

fn clip_frames(duration: f64) -> usize {
    crate::midi::frame_count(duration)
}
