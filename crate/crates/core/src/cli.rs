//! The `mum` command line.
//!
//! Exit status: 0 on success, 1 on invalid arguments or data, 2 on I/O and
//! file-format errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augment::{cutout, mix_tiles, unmix_tiles, AugmentConfig, GroupLayout};
use crate::bbox::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::grid::{generate_masks, MixingMaskSet};
use crate::imageio::{contact_sheet, load_batch, save_png, save_tensor_png};
use crate::metrics::{ap50, compute_no};
use crate::rng::{derive_rng, rng_from_seed};
use crate::teacher::{decay_schedule, ema_update, load_checkpoint, save_checkpoint, PseudoLabel};
use crate::tensor::Tensor4;
use crate::trainer::{render_scene, run_training_with, stack_images, write_history_csv, StepOptions, TrainConfig, NUM_CLASSES};

/// Advisory range for the average number of tiles an object spans.
const NO_ADVISORY: (f64, f64) = (1.2, 2.5);

#[derive(Debug, Parser)]
#[command(name = "mum", version, about = "Tile mix/unmix augmentation and a toy semi-supervised detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random mixing mask set and write it as JSON.
    MaskGen {
        #[arg(long)]
        seed: u64,
        /// Images per group (N_G).
        #[arg(long)]
        group: usize,
        /// Tiles per image axis (N_T).
        #[arg(long)]
        tiles: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix the tiles of a group of PNG images with a mask file.
    Mix(ApplyArgs),
    /// Return mixed tiles to their source images with a mask file.
    Unmix(ApplyArgs),
    /// Mix then unmix and check the result is bit-identical to the input.
    RoundtripCheck(RoundtripArgs),
    /// Contact sheet of originals, their mixed versions, and a cutout view.
    Visualize(VisualizeArgs),
    /// One EMA update of a teacher checkpoint towards a student checkpoint.
    EmaStep(EmaArgs),
    /// Train the toy detector on synthetic scenes.
    TrainToy(TrainArgs),
    /// AP50 of predictions against ground truth (JSON files).
    Eval {
        /// JSON array (one entry per image) of arrays of {class_id, score, box}.
        #[arg(long)]
        preds: PathBuf,
        /// JSON array (one entry per image) of arrays of {class_id, box}.
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = NUM_CLASSES)]
        num_classes: usize,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average number of tiles each box overlaps.
    NoStat {
        /// JSON array of [x_min, y_min, x_max, y_max] boxes.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        tiles: usize,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 64)]
        height: u32,
    },
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Mask file from `mask-gen`; its group size must equal the number of images.
    #[arg(long)]
    pub mask: PathBuf,
    /// Directory for the output PNGs (`<stem>.png` per input, in order).
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Input PNGs. Without any, synthetic scenes are rendered from the seed.
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic scenes when no images are given.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Side of the synthetic scenes.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 4)]
    pub group: usize,
    #[arg(long, default_value_t = 4)]
    pub tiles: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 4)]
    pub group: usize,
    #[arg(long, default_value_t = 4)]
    pub tiles: usize,
    /// Draw tile boundaries.
    #[arg(long)]
    pub grid: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmaArgs {
    /// Teacher checkpoint prefix (`<prefix>.bin` + `<prefix>.json`).
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    /// Output checkpoint prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed decay; without it the decay comes from the ramp at `--step`.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    #[arg(long, default_value_t = 1000)]
    pub ramp_end: u64,
    #[arg(long, default_value_t = 0.5)]
    pub delta_init: f64,
    #[arg(long, default_value_t = 0.9996)]
    pub delta_final: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file of training keys; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Labeled data only (the teacher still tracks the student by EMA).
    #[arg(long)]
    pub supervised_only: bool,
    /// Keep the unsupervised branch but never mix tiles.
    #[arg(long)]
    pub no_mum: bool,
    /// Output directory for metrics, checkpoints and snapshots.
    #[arg(long)]
    pub out: PathBuf,
    /// Save a PNG of the mixed unlabeled batch every N steps (0: never).
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: u64,
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MaskGen { seed, group, tiles, out } => {
            let masks = generate_masks(&mut rng_from_seed(seed), group, tiles)?;
            masks.save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Mix(a) => apply_masks(&a, false),
        Command::Unmix(a) => apply_masks(&a, true),
        Command::RoundtripCheck(a) => roundtrip(&a),
        Command::Visualize(a) => visualize(&a),
        Command::EmaStep(a) => ema_step(&a),
        Command::TrainToy(a) => train(&a),
        Command::Eval {
            preds,
            gts,
            num_classes,
            out,
        } => {
            let preds: Vec<Vec<PseudoLabel>> = read_json(&preds)?;
            let gts: Vec<Vec<Annotation>> = read_json(&gts)?;
            let result = ap50(&preds, &gts, num_classes)?;
            emit_json(&result, out.as_deref())
        }
        Command::NoStat {
            boxes,
            tiles,
            width,
            height,
        } => {
            let boxes: Vec<BBox> = read_json(&boxes)?;
            let no = compute_no(&boxes, (width, height), tiles)?;
            println!("N_O = {no:.4} over {} boxes at {tiles}x{tiles} tiles", boxes.len());
            let (lo, hi) = NO_ADVISORY;
            let verdict = if (lo..=hi).contains(&no) { "inside" } else { "outside" };
            println!("advisory: {lo} <= N_O <= {hi} is a reasonable operating range; this value is {verdict} it");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn single_group_layout(batch: usize, masks: MixingMaskSet) -> Result<GroupLayout> {
    if masks.group_size() != batch {
        return Err(Error::invalid(format!(
            "--mask has group size {} but {batch} images were given",
            masks.group_size()
        )));
    }
    let tiles = masks.tiles_per_axis();
    GroupLayout::new(batch, batch, tiles, vec![masks])
}

fn apply_masks(a: &ApplyArgs, inverse: bool) -> Result<()> {
    let masks = MixingMaskSet::load(&a.mask)?;
    let batch = load_batch(&a.images)?;
    let layout = single_group_layout(batch.batch(), masks)?;
    let out = if inverse {
        unmix_tiles(&batch, &layout)?
    } else {
        mix_tiles(&batch, &layout)?
    };
    std::fs::create_dir_all(&a.out_dir)?;
    for (k, src) in a.images.iter().enumerate() {
        let name = src.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", src.display())))?;
        let path = a.out_dir.join(name).with_extension("png");
        save_tensor_png(&out, k, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_source(s: &SourceArgs) -> Result<Tensor4<f32>> {
    if !s.images.is_empty() {
        return load_batch(&s.images);
    }
    if s.count == 0 {
        return Err(Error::invalid("--count must be positive"));
    }
    let scenes = (0..s.count as u64)
        .map(|i| render_scene(&mut derive_rng(s.seed, &[1, i]), s.size))
        .collect::<Result<Vec<_>>>()?;
    stack_images(scenes.iter().map(|sc| sc.pixels.as_slice()), s.size)
}

fn roundtrip(a: &RoundtripArgs) -> Result<()> {
    let batch = load_source(&a.source)?;
    let layout = GroupLayout::random(&mut derive_rng(a.source.seed, &[2]), batch.batch(), a.group, a.tiles)?;
    let back = unmix_tiles(&mix_tiles(&batch, &layout)?, &layout)?;
    let same = back.data().iter().zip(batch.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    if !same {
        return Err(Error::Validation("MISMATCH: unmix(mix(x)) differs from x".into()));
    }
    println!("OK");
    Ok(())
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let batch = load_source(&a.source)?;
    let layout = GroupLayout::random(&mut derive_rng(a.source.seed, &[2]), batch.batch(), a.group, a.tiles)?;
    let mixed = mix_tiles(&batch, &layout)?;
    let aug = AugmentConfig::default();
    let cut = cutout(
        &batch,
        &mut derive_rng(a.source.seed, &[3]),
        aug.cutout_count.1,
        aug.cutout_size,
        aug.cutout_fill,
    )?;
    let grid = a.grid.then_some(a.tiles);
    let sheet = contact_sheet(&[&batch, &mixed, &cut], 4, grid)?;
    save_png(&sheet, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ema_step(a: &EmaArgs) -> Result<()> {
    let (teacher, manifest) = load_checkpoint(&a.teacher)?;
    let (student, _) = load_checkpoint(&a.student)?;
    let decay = match a.decay {
        Some(d) => d,
        None => decay_schedule(a.step, a.ramp_end, a.delta_init, a.delta_final)?,
    };
    let next = ema_update(&teacher, &student, decay)?;
    save_checkpoint(&a.out, &next, manifest.step + 1, decay)?;
    println!("decay {decay}; wrote {}.bin", a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut overrides = a.overrides.clone();
    if a.supervised_only {
        overrides.push("supervised_only=true".into());
    }
    if a.no_mum {
        overrides.push("mum_probability=0.0".into());
    }
    let cfg = base.with_overrides(&overrides)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string())?;
    let snap_dir = a.out.join("snapshots");
    if a.snapshot_every > 0 {
        std::fs::create_dir_all(&snap_dir)?;
    }

    let mut snapshot_error = None;
    let outcome = run_training_with(&cfg, &StepOptions::default(), |prep, log| {
        if a.snapshot_every == 0 || log.step % a.snapshot_every != 0 || snapshot_error.is_some() {
            return;
        }
        let Some(u) = &prep.unsupervised else { return };
        let result = (|| -> Result<()> {
            let mixed = match &u.layout {
                Some(l) => mix_tiles(&u.images, l)?,
                None => u.images.clone(),
            };
            let sheet = contact_sheet(&[&u.images, &mixed], 2, Some(cfg.tiles_per_axis))?;
            save_png(&sheet, &snap_dir.join(format!("step_{:06}.png", log.step)))
        })();
        if let Err(e) = result {
            snapshot_error = Some(e);
        }
    })?;
    if let Some(e) = snapshot_error {
        return Err(e);
    }

    let metrics = a.out.join("metrics.csv");
    write_history_csv(&outcome.history, &metrics)?;
    let delta = outcome.logs.last().map_or(cfg.delta_init, |l| l.delta);
    save_checkpoint(&a.out.join("student"), &outcome.state.student, outcome.state.step, delta)?;
    save_checkpoint(&a.out.join("teacher"), &outcome.state.teacher, outcome.state.step, delta)?;
    if let Some(row) = outcome.final_row() {
        println!(
            "step {}: l_s {:.4} l_u {:.4} AP50 teacher {:.4} student {:.4}",
            row.step, row.l_s, row.l_u, row.ap50_teacher, row.ap50_student
        );
    }
    println!("wrote {}", metrics.display());
    Ok(())
}
