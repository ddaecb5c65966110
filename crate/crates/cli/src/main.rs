use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detail_fusion::image::synth_image;
use detail_fusion::pipeline::{
    retention_sweep, run, ConfigError, PipelineConfig, PipelineError, Profile, ReportFormat, CONFIG_KEYS,
};
use detail_fusion::Exec;

#[derive(Parser)]
#[command(name = "detail-fusion", version, about = "Multi-scale sliding-window detail fusion on a toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the window geometry for every scale.
    Plan(Common),
    /// Run the full pipeline and emit the report.
    Run(Common),
    /// Retention probe: injected vs. non-injected decoder over many seeds.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Number of seeds.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Injection sets to compare, separated by `;` (e.g. "8;2,4,6,8").
        /// Defaults to the configured injection layers.
        #[arg(long)]
        sweep: Option<String>,
        /// Residual scale for every layer during the probe.
        #[arg(long, default_value_t = 1.0)]
        residual_scale: f64,
    },
    /// Write a seeded synthetic image as binary PPM.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels; defaults to the profile's canvas side.
        #[arg(long)]
        side: Option<usize>,
        #[arg(long, value_parser = parse_profile, default_value = "toy")]
        profile: Profile,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// List the keys accepted in a config file.
    Keys,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file applied on top of the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the image, encoder and fusion seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV report files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after the geometry stage.
    #[arg(long)]
    plan_only: bool,
    /// Comma-separated decoder layers to inject at, or `none`.
    #[arg(long)]
    inject_layers: Option<String>,
    #[arg(long, value_parser = parse_profile, default_value = "toy")]
    profile: Profile,
    /// Run every stage on one thread.
    #[arg(long)]
    sequential: bool,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse()
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::profile(self.profile);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if self.plan_only {
            cfg.plan_only = true;
        }
        if let Some(layers) = &self.inject_layers {
            cfg.set("inject_layers", layers)?;
        }
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

fn print_report(cfg: &PipelineConfig, report: &detail_fusion::RunReport) {
    match cfg.report_format {
        ReportFormat::Table => print!("{report}"),
        ReportFormat::Csv => {
            for (name, body) in report.sections() {
                println!("# {name}");
                print!("{body}");
            }
        }
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Plan(common) => {
            let mut cfg = common.config()?;
            cfg.plan_only = true;
            let report = run(&cfg, common.exec())?;
            print_report(&cfg, &report);
        }
        Command::Run(common) => {
            let cfg = common.config()?;
            let report = run(&cfg, common.exec())?;
            print_report(&cfg, &report);
        }
        Command::Probe {
            common,
            seeds,
            sweep,
            residual_scale,
        } => {
            let mut cfg = common.config()?;
            cfg.residual_scales = vec![residual_scale];
            let sets = match sweep {
                None => vec![cfg.inject_layers.clone()],
                Some(spec) => spec
                    .split(';')
                    .map(|s| {
                        let mut c = cfg.clone();
                        c.set("inject_layers", s.trim()).map(|_| c.inject_layers)
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let report = retention_sweep(&cfg, seeds, &sets, common.exec())?;
            print!("{report}");
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)
                    .and_then(|_| std::fs::write(dir.join("probe.csv"), report.csv()))
                    .map_err(|e| PipelineError::Stage {
                        stage: "report",
                        message: e.to_string(),
                    })?;
            }
        }
        Command::Synth {
            seed,
            side,
            profile,
            out,
        } => {
            let cfg = PipelineConfig::profile(profile);
            let side = side.unwrap_or(cfg.canvas_side);
            let img = synth_image(seed, side, cfg.patch_side)
                .map_err(|e| PipelineError::Config(ConfigError::Invalid(e.to_string())))?;
            let write = || -> Result<(), detail_fusion::image::ImageError> {
                let f = std::fs::File::create(&out)?;
                img.write_ppm(std::io::BufWriter::new(f))
            };
            write().map_err(|e| PipelineError::Stage {
                stage: "synth",
                message: format!("{}: {e}", out.display()),
            })?;
            println!("wrote {side}x{side} image to {}", out.display());
        }
        Command::Keys => {
            for (key, doc) in CONFIG_KEYS {
                println!("{key:<16} {doc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
