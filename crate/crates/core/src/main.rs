use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pixcon::checkpoint::Checkpoint;
use pixcon::data::{generate_dataset, load_dataset, rng_from_seed, summarize, write_dataset, Mask};
use pixcon::eval::{emit_plots, evaluate, run_ablation, write_report};
use pixcon::partition::{extract_boundary, partition_from_cam, partition_from_mask, Lattice};
use pixcon::sampling::{mine_keys_base, KeyList, ProjectedMap};
use pixcon::training::{train, RunOptions};
use pixcon::verify::{gradient_check, oracle_equivalence};
use pixcon::{Result, TrainConfig};

#[derive(Parser)]
#[command(name = "pixcon", version, about = "Pixel-level contrastive mask learning on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to disk.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes metrics.jsonl, eval.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Single-threaded, bit-stable execution.
        #[arg(long)]
        deterministic: bool,
        /// Dataset directory from generate-data (generated in memory otherwise).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; regenerated from the checkpoint's config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for report.json / report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one config axis over values and seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Figures from a training or sweep directory.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the loss against its reference and its gradient against
    /// finite differences; prints sampled key coordinates.
    CheckLoss {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        grad_instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write 3-level CAM partitions of validation RoIs as PGM images.
    DumpPseudoMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| pixcon::Error::Parse(format!("override '{o}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dump_keys(name: &str, list: &KeyList) {
    let coords: Vec<String> = list.locs.iter().map(|(r, c)| format!("({r},{c})")).collect();
    println!("{name} [{}]: {}", list.len(), coords.join(" "));
}

fn check_loss(instances: usize, grad_instances: usize, seed: u64) -> Result<bool> {
    let eq = oracle_equivalence(instances, seed);
    let eq_ok = eq <= 1e-6;
    println!(
        "oracle equivalence: {instances} instances, max abs error {eq:.3e} (limit 1e-6) {}",
        if eq_ok { "ok" } else { "FAIL" }
    );
    let gr = gradient_check(grad_instances, seed);
    let gr_ok = gr <= 1e-3;
    println!(
        "gradient check: {grad_instances} instances, max rel error {gr:.3e} (limit 1e-3) {}",
        if gr_ok { "ok" } else { "FAIL" }
    );

    // sampled keys of a 28x28 half mask over a random projected map
    let r = 28;
    let mask = Mask::from_fn(r, r, |_, c| c < r / 2);
    let lattice = Lattice::new(r, r)?;
    let mut rng = rng_from_seed(seed);
    let data = (0..r * r * 4).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect();
    let z = ProjectedMap::new(lattice, 4, data)?;
    let p = partition_from_mask(&mask)?;
    let b = extract_boundary(&mask)?;
    let keys = mine_keys_base(&z, &p, &b, 0.3, &mut rng)?;
    println!("sampled keys (28x28 half mask, sigma 0.3):");
    dump_keys("fg_easy", &keys.fg_easy);
    dump_keys("fg_hard", &keys.fg_hard);
    dump_keys("bg_easy", &keys.bg_easy);
    dump_keys("bg_hard", &keys.bg_hard);
    Ok(eq_ok && gr_ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref(), &[])?;
            if let Some(s) = seed {
                cfg.data_seed = s;
            }
            let ds = generate_dataset(&cfg, cfg.data_seed)?;
            write_dataset(&ds, &cfg, &out)?;
            summarize(&ds, &cfg, std::io::stdout()).ok();
        }
        Command::Train {
            config,
            out,
            deterministic,
            data,
            resume,
            overrides,
        } => {
            // execution is single-threaded either way; the flag is kept so
            // scripts can state the requirement explicitly
            let _ = deterministic;
            let cfg = load_config(config.as_deref(), &overrides)?;
            let dataset = match data {
                Some(d) => load_dataset(&d)?.0,
                None => generate_dataset(&cfg, cfg.data_seed)?,
            };
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train(
                &cfg,
                &dataset,
                &RunOptions {
                    out: Some(out.clone()),
                    resume,
                    verbose: true,
                },
            )?;
            if let Some(last) = outcome.evals.last() {
                write_report(last, &out)?;
                print!("{}", last.to_text());
            }
            println!(
                "{} steps, novel-mask audit trips: {}",
                outcome.records.len(),
                outcome.audit_trips
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = match data {
                Some(d) => load_dataset(&d)?.0,
                None => generate_dataset(&ck.config, ck.config.data_seed)?,
            };
            let report = evaluate(&ck, &dataset)?;
            print!("{}", report.to_text());
            if let Some(o) = out {
                write_report(&report, &o)?;
            }
        }
        Command::Ablate {
            axis,
            values,
            seeds,
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let matrix = run_ablation(&cfg, &axis, &values, &seeds, Some(&out), true)?;
            print!("{}", matrix.to_text());
        }
        Command::Plot { input, out } => {
            for p in emit_plots(&input, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::CheckLoss {
            instances,
            grad_instances,
            seed,
        } => return check_loss(instances, grad_instances, seed),
        Command::DumpPseudoMasks {
            checkpoint,
            out,
            limit,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.config;
            let model = ck.model()?;
            let ds = generate_dataset(cfg, cfg.data_seed)?;
            let samples =
                pixcon::data::extract_split(&ds.val, 0.0, cfg, &mut rng_from_seed(0))?;
            let preds = pixcon::eval::predict_rois(&model, &samples)?;
            std::fs::create_dir_all(&out).map_err(|e| pixcon::Error::io(&out, e))?;
            let r = cfg.roi_resolution;
            let lattice = Lattice::new(r, r)?;
            for (s, p) in samples.iter().zip(&preds).take(limit) {
                let levels = match partition_from_cam(&p.cam, lattice, cfg.delta) {
                    Ok(part) => part.render(),
                    Err(_) => vec![128u8; r * r],
                };
                let path = out.join(format!(
                    "scene_{:05}_{}_{}.pgm",
                    s.scene_id,
                    s.instance,
                    s.category.name()
                ));
                pixcon::data::write_pnm(&path, r, r, &levels, image::ExtendedColorType::L8)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
