//! `volseg`: train, run and evaluate the airway-segmentation Unet.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use volseg_core::augment::{self, AugmentConfig, Augmentation};
use volseg_core::config::{parse_config, RunConfig, ScanPaths};
use volseg_core::eval::{default_thresholds, froc, optimal_threshold};
use volseg_core::nn::{read_checkpoint, write_checkpoint};
use volseg_core::phantom::{generate, TreeSpec};
use volseg_core::report::{emit_froc_svg, froc_csv, froc_svg};
use volseg_core::rng::{self, Stream};
use volseg_core::trainer::{
    dice_at, eval_roi, evaluate_scan, pool_curves, predict, compare_setups, train, Datasets, PredictOptions, Scan,
};
use volseg_core::unet::Model;
use volseg_core::volume_io::{read_mask, read_volume, write_mask, write_volume, Mask};
use volseg_core::{Error, Result};
use volseg_cli::logging::Logger;
use volseg_cli::manifest::RunManifest;
use volseg_cli::output::OutputPolicy;

#[derive(Parser)]
#[command(name = "volseg", version, about = "3D Unet airway segmentation")]
struct Cli {
    /// Overrides the seed of the config file or command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs every kernel sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Omit timestamps from log lines.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `[output] dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probability map and segmentation of one CT.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        lung: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out_prob: PathBuf,
        #[arg(long)]
        out_seg: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        overlap: f64,
        #[arg(long, default_value_t = 30)]
        crop_margin: usize,
        #[arg(long)]
        mask_input: bool,
    },
    /// FROC and Dice of a checkpoint on the test scans of a config.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FROC curve of one probability map.
    Froc {
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        lung: PathBuf,
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long, default_value = "scan")]
        scan_id: String,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
    /// Write a synthetic phantom (ct, lung, truth, exclude + spec sidecar).
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "phantom")]
        prefix: String,
        #[command(flatten)]
        geometry: PhantomArgs,
    },
    /// Apply one random augmentation and write before/after volumes.
    AugmentPreview {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum)]
        kind: AugKind,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        max_angle: f64,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
    },
    /// Train and compare the five loss/augmentation setups on phantoms.
    Replicate {
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
}

#[derive(Args)]
struct PhantomArgs {
    /// Depth,height,width in voxels.
    #[arg(long, default_value = "40,32,32", value_delimiter = ',', num_args = 3)]
    dims: Vec<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    root_radius: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugKind {
    Rigid,
    Elastic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut log = Logger::new(!cli.no_timestamps).to_stderr();
    let code = match run(&cli, &mut log) {
        Ok(()) => 0,
        Err(e) => {
            log.error("command failed", &[("error", json!(e.to_string()))]);
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        None => Ok(()),
        Some(0) => Err(Error::config("--threads", "must be >= 1")),
        Some(1) => {
            volseg_core::par::set_parallel(false);
            Ok(())
        }
        Some(_n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(_n)
                .build_global()
                .map_err(|e| Error::config("--threads", e.to_string()))?;
            Ok(())
        }
    }
}

fn run(cli: &Cli, log: &mut Logger) -> Result<()> {
    configure_threads(cli.threads)?;
    let out = OutputPolicy {
        overwrite: cli.overwrite,
    };
    match &cli.cmd {
        Command::Train { config, out: dir } => cmd_train(cli, log, out, config, dir.as_deref()),
        Command::Predict {
            ckpt,
            input,
            lung,
            threshold,
            out_prob,
            out_seg,
            overlap,
            crop_margin,
            mask_input,
        } => {
            if !(0.0..=1.0).contains(threshold) {
                return Err(Error::config("--threshold", "must lie in [0, 1]"));
            }
            out.check(out_prob)?;
            out.check(out_seg)?;
            let model = Model::from_checkpoint_self(&read_checkpoint(ckpt)?)?;
            let ct = read_volume(input)?;
            let lung = read_mask(lung)?;
            let opts = PredictOptions {
                threshold: *threshold,
                overlap: *overlap,
                crop_margin: *crop_margin,
                mask_input: *mask_input,
            };
            let (prob, seg) = predict(&ct, &lung, &model, &opts)?;
            write_volume(&prob, out_prob)?;
            write_mask(&seg, out_seg)?;
            log.info("predicted", &[("voxels", json!(seg.count())), ("threshold", json!(threshold))]);
            Ok(())
        }
        Command::Evaluate { ckpt, config, out: dir } => cmd_evaluate(log, out, ckpt, config, dir),
        Command::Froc {
            prob,
            truth,
            lung,
            exclude,
            scan_id,
            out_csv,
            out_svg,
        } => {
            let prob = read_volume(prob)?;
            let scan = Scan {
                id: scan_id.clone(),
                ct: prob.clone(),
                lung: read_mask(lung)?,
                truth: read_mask(truth)?,
                exclude: exclude.as_ref().map(read_mask).transpose()?,
            };
            let c = froc(&prob, &scan.truth, &eval_roi(&scan), &default_thresholds())?;
            out.write(out_csv, froc_csv([(scan_id.as_str(), &c)]))?;
            if let Some(svg) = out_svg {
                out.write(svg, froc_svg(&c, scan_id)?)?;
            }
            let t = optimal_threshold(&c)?;
            log.info(
                "froc",
                &[("optimal_threshold", json!(t)), ("dice_at_optimal", json!(dice_at(&c, t)?))],
            );
            println!("optimal_threshold={t} dice={:.6}", dice_at(&c, t)?);
            Ok(())
        }
        Command::Phantom {
            out_dir,
            prefix,
            geometry,
        } => {
            let mut spec = TreeSpec {
                seed: cli.seed.unwrap_or(0),
                ..volseg_core::trainer::desk_tree()
            };
            if let Some(d) = geometry.depth {
                spec.depth = d;
            }
            if let Some(r) = geometry.root_radius {
                spec.root_radius = r;
            }
            if let Some(n) = geometry.noise_sd {
                spec.noise_sd = n;
            }
            let dims = [geometry.dims[0], geometry.dims[1], geometry.dims[2]];
            let p = generate(&spec, dims)?;
            out.create_dir(out_dir)?;
            let path = |s: &str| out_dir.join(format!("{prefix}_{s}.vol"));
            for s in ["ct", "lung", "truth", "exclude"] {
                out.check(&path(s))?;
            }
            write_volume(&p.image, path("ct"))?;
            write_mask(&p.lung, path("lung"))?;
            write_mask(&p.truth, path("truth"))?;
            write_mask(&p.exclude, path("exclude"))?;
            let sidecar = json!({ "spec": spec, "dims": dims, "segments": p.segments });
            out.write(
                &out_dir.join(format!("{prefix}.json")),
                serde_json::to_string_pretty(&sidecar).expect("json") + "\n",
            )?;
            log.info(
                "phantom",
                &[("truth_voxels", json!(p.truth.count())), ("lung_voxels", json!(p.lung.count()))],
            );
            Ok(())
        }
        Command::AugmentPreview {
            input,
            mask,
            kind,
            out_dir,
            max_angle,
            sigma,
        } => {
            let img = read_volume(input)?;
            let m = read_mask(mask)?;
            let cfg = AugmentConfig {
                max_angle_deg: *max_angle,
                elastic_sigma: *sigma,
                ..Default::default()
            };
            let aug = match kind {
                AugKind::Rigid => Augmentation::Rigid,
                AugKind::Elastic => Augmentation::Elastic,
            };
            let mut r = rng::stream(cli.seed.unwrap_or(0), Stream::Preview, 0, 0);
            let (img2, masks) = augment::augment(aug, &cfg, &mut r, &img, &[&m])?;
            out.create_dir(out_dir)?;
            let files = ["before_image.vol", "before_mask.vol", "after_image.vol", "after_mask.vol"];
            for f in files {
                out.check(&out_dir.join(f))?;
            }
            write_volume(&img, out_dir.join(files[0]))?;
            write_mask(&m, out_dir.join(files[1]))?;
            write_volume(&img2, out_dir.join(files[2]))?;
            write_mask(&masks[0], out_dir.join(files[3]))?;
            Ok(())
        }
        Command::Replicate {
            out_dir,
            seeds,
            max_epochs,
        } => cmd_replicate(cli, log, out, out_dir, seeds, *max_epochs),
    }
}

fn load_scan(p: &ScanPaths) -> Result<Scan> {
    let scan = Scan {
        id: p.id.clone(),
        ct: read_volume(&p.ct)?,
        lung: read_mask(&p.lung)?,
        truth: read_mask(&p.truth)?,
        exclude: p.exclude.as_ref().map(read_mask).transpose()?,
    };
    let dims = scan.ct.dims();
    let masks: [Option<&Mask>; 3] = [Some(&scan.lung), Some(&scan.truth), scan.exclude.as_ref()];
    if masks.iter().flatten().any(|m| m.dims() != dims) {
        return Err(Error::shape(format!("scan {}: volumes have different dims", p.id)));
    }
    Ok(scan)
}

fn scan_files(list: &[ScanPaths]) -> Vec<PathBuf> {
    list.iter()
        .flat_map(|s| [Some(s.ct.clone()), Some(s.lung.clone()), Some(s.truth.clone()), s.exclude.clone()])
        .flatten()
        .collect()
}

fn cmd_train(cli: &Cli, log: &mut Logger, out: OutputPolicy, config: &Path, dir: Option<&Path>) -> Result<()> {
    let mut rc: RunConfig = parse_config(config)?;
    if let Some(s) = cli.seed {
        rc.train.seed = s;
    }
    let dir = dir
        .map(Path::to_path_buf)
        .or(rc.output_dir.clone())
        .ok_or_else(|| Error::config("output.dir", "give --out or set [output] dir"))?;
    out.create_dir(&dir)?;
    let files = ["manifest.json", "model.ckpt", "losses.csv", "run.json", "train.log"];
    for f in files {
        out.check(&dir.join(f))?;
    }
    let log_file = std::fs::File::create(dir.join("train.log")).map_err(|e| Error::io(dir.join("train.log"), e))?;
    log.add_sink(Box::new(log_file));

    let mut inputs = vec![config.to_path_buf()];
    inputs.extend(scan_files(&rc.data.train));
    inputs.extend(scan_files(&rc.data.val));
    let mut manifest = RunManifest::new(
        std::env::args().collect(),
        serde_json::to_value(&rc).expect("config serializes"),
        rc.train.seed,
        &inputs,
    )?;
    manifest.write(&dir.join("manifest.json"))?;

    let train_scans = rc.data.train.iter().map(load_scan).collect::<Result<Vec<_>>>()?;
    let val_scans = rc.data.val.iter().map(load_scan).collect::<Result<Vec<_>>>()?;
    log.info(
        "train_start",
        &[
            ("train_scans", json!(train_scans.len())),
            ("val_scans", json!(val_scans.len())),
            ("seed", json!(rc.train.seed)),
        ],
    );
    let mut hook = |r: &volseg_core::trainer::EpochRecord| {
        log.info(
            "epoch_end",
            &[("epoch", json!(r.epoch)), ("train_loss", num(r.train_loss)), ("val_loss", num(r.val_loss))],
        );
    };
    let (ckpt, record) = train(&train_scans, &val_scans, &rc.train, Some(&mut hook))?;
    write_checkpoint(&ckpt, dir.join("model.ckpt"))?;
    out.write(&dir.join("losses.csv"), record.to_csv())?;
    out.write(
        &dir.join("run.json"),
        serde_json::to_string_pretty(&record).expect("record serializes") + "\n",
    )?;
    log.info(
        "train_end",
        &[
            ("best_epoch", json!(record.best_epoch)),
            ("best_validation_loss", num(record.best_validation_loss)),
            ("stopping_reason", serde_json::to_value(record.stopping_reason).expect("enum")),
        ],
    );
    manifest.finish();
    manifest.write(&dir.join("manifest.json"))
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or_else(|| Value::String(v.to_string()), Value::Number)
}

fn cmd_evaluate(log: &mut Logger, out: OutputPolicy, ckpt: &Path, config: &Path, dir: &Path) -> Result<()> {
    let rc = parse_config(config)?;
    if rc.data.test.is_empty() {
        return Err(Error::config("data.test", "needs at least one test scan"));
    }
    let model = Model::from_checkpoint(&read_checkpoint(ckpt)?, &rc.train.net)?;
    out.create_dir(dir)?;
    let opts = PredictOptions::from_train(&rc.train, 0.5);
    let thresholds = default_thresholds();
    let mut curves = Vec::new();
    for p in &rc.data.test {
        let scan = load_scan(p)?;
        curves.push((scan.id.clone(), evaluate_scan(&scan, &model, &opts, &thresholds)?));
    }
    let pooled = pool_curves(&curves.iter().map(|c| c.1.clone()).collect::<Vec<_>>())?;
    let t = optimal_threshold(&pooled)?;
    let dices = curves.iter().map(|c| dice_at(&c.1, t)).collect::<Result<Vec<_>>>()?;
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    out.write(&dir.join("froc.csv"), froc_csv(curves.iter().map(|(id, c)| (id.as_str(), c))))?;
    out.check(&dir.join("froc.svg"))?;
    emit_froc_svg(&pooled, "FROC (pooled test scans)", dir.join("froc.svg"))?;
    let mut summary = String::from("scan_id,threshold,dice\n");
    for ((id, _), d) in curves.iter().zip(&dices) {
        summary.push_str(&format!("{id},{t},{d:.6}\n"));
    }
    summary.push_str(&format!("mean,{t},{mean:.6}\n"));
    out.write(&dir.join("dice.csv"), summary)?;
    log.info("evaluate", &[("optimal_threshold", json!(t)), ("mean_dice", num(mean))]);
    println!("optimal_threshold={t} mean_dice={mean:.6}");
    Ok(())
}

fn cmd_replicate(
    cli: &Cli,
    log: &mut Logger,
    out: OutputPolicy,
    dir: &Path,
    seeds: &[u64],
    max_epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = volseg_core::trainer::desk_config();
    if let Some(m) = max_epochs {
        cfg.max_epochs = m;
    }
    let data: Datasets = volseg_core::trainer::desk_datasets(cli.seed.unwrap_or(0))?;
    out.create_dir(dir)?;
    out.check(&dir.join("summary.csv"))?;
    let mut progress = |name: &str, seed: u64, r: &volseg_core::trainer::RunRecord| {
        log.info(
            "run_end",
            &[
                ("setup", json!(name)),
                ("seed", json!(seed)),
                ("epochs", json!(r.epochs.len())),
                ("best_epoch", json!(r.best_epoch)),
            ],
        );
    };
    let report = compare_setups(&data, &cfg, seeds, Some(&mut progress))?;
    for row in &report.rows {
        let ids: Vec<String> = row.curves.iter().map(|(seed, id, _)| format!("{id}-seed{seed}")).collect();
        let csv = froc_csv(ids.iter().zip(&row.curves).map(|(id, c)| (id.as_str(), &c.2)));
        out.write(&dir.join(format!("{}_froc.csv", row.name)), csv)?;
        let pooled = pool_curves(&row.curves.iter().map(|c| c.2.clone()).collect::<Vec<_>>())?;
        out.write(&dir.join(format!("{}_froc.svg", row.name)), froc_svg(&pooled, &row.name)?)?;
    }
    out.write(&dir.join("summary.csv"), report.summary_csv())?;
    for (a, b, gap) in report.ordinal_checks() {
        let ok = gap >= -0.02;
        log.info(
            "ordinal_check",
            &[("better", json!(a)), ("worse", json!(b)), ("gap", num(gap)), ("holds", json!(ok))],
        );
    }
    print!("{}", report.summary_csv());
    Ok(())
}
