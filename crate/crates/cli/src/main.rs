use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semaffine_core::harness::{
    ablate, eval_run, gradcheck_suite, parse_variants, train_run, RunConfig, SUITE_MODULES,
};
use semaffine_core::scene::{generate_scene, write_manifest, write_scene, ManifestEntry, Split};
use semaffine_core::{Error, Result};

#[derive(Parser)]
#[command(name = "semaffine", version, about = "Semantic-affine point cloud segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled scenes and a manifest listing them.
    Synth {
        /// Config file; only the scene keys are used.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of trailing scenes marked as validation [default: count / 5].
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train on a manifest; writes the checkpoint and `<out>.log`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset-level metrics of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITE_MODULES))]
        module: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train each variant for several seeds and compare validation mIoU.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "fc,mask,bn,adain,sa")]
        variants: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

fn synth(spec: PathBuf, out: PathBuf, count: usize, seed: u64, val: Option<usize>) -> Result<()> {
    let spec = RunConfig::load(&spec)?.scene;
    let val = val.unwrap_or(count / 5);
    if val > count {
        return Err(Error::Config(format!("--val {val} exceeds --count {count}")));
    }
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed + i as u64;
        let cloud = generate_scene(&spec, s)?;
        let path = out.join(format!("scene_{s:06}.scene"));
        write_scene(&path, &cloud, s)?;
        let split = if i + val >= count { Split::Val } else { Split::Train };
        entries.push(ManifestEntry { path, split });
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    println!("wrote {count} scenes, {val} for validation, to {}", manifest.display());
    Ok(())
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { spec, out, count, seed, val } => synth(spec, out, count, seed, val)?,
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train_run(&data, &cfg, &out)?;
            for r in &outcome.records {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val mIoU {:.4}  lr {:.3e}",
                    r.epoch, r.train_loss, r.val_miou, r.lr
                );
            }
            print!("{}", outcome.metrics);
        }
        Command::Eval { ckpt, data } => print!("{}", eval_run(&ckpt, &data)?),
        Command::Gradcheck { module, tol } => {
            let entries = gradcheck_suite(module.as_deref(), tol)?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:<4} {:<10} {:<32} max_rel_err={:.3e}",
                    e.module,
                    e.name,
                    e.report.max_rel_err()
                );
                if !e.passed() {
                    failed += 1;
                    for p in e.report.failures() {
                        println!("     {} entry {} rel_err={:.3e}", p.name, p.worst_index, p.max_rel_err);
                    }
                }
            }
            println!("{} checks, {failed} failed", entries.len());
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate { config, variants, seeds } => {
            let cfg = RunConfig::load(&config)?;
            let variants = parse_variants(&variants)?;
            let report = ablate(&cfg, &variants, seeds, |r| {
                eprintln!("{} seed {}: mIoU {:.4}", r.variant.name, r.seed, r.miou)
            })?;
            print!("{report}");
            let has = |n: &str| variants.iter().any(|v| v.name == n);
            for v in ["sa", "adain"].into_iter().filter(|v| has(v)) {
                if has("bn") {
                    let c = report.compare(v, "bn")?;
                    println!(
                        "{} vs {}: wins {}/{}, median improvement {:+.4}",
                        c.variant,
                        c.baseline,
                        c.wins,
                        c.improvements.len(),
                        c.median
                    );
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
