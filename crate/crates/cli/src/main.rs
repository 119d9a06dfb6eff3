//! `tagnet` command-line harness.
//!
//! Exit codes: 0 success, 1 a verification failed, 2 usage or config error,
//! 3 training diverged, 4 any other runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tagnet::config::{BackboneConfig, InputSize};
use tagnet::graph::{Graph, Mode};
use tagnet::heatmap::write_heatmap;
use tagnet::metrics::MetricTable;
use tagnet::report::shape_table;
use tagnet::tensor::{read_tensor, write_tensor};
use tagnet::train::{overfit, AdamConfig};
use tagnet::verify::{self, SuiteOptions};
use tagnet::{synth, Error, MultiTaskNet, Tensor};

const DESK_INPUT: InputSize = InputSize {
    height: 64,
    width: 128,
};

#[derive(Parser, Debug)]
#[command(name = "tagnet", version, about = "Multi-task network: shapes, costs, gradients and desk-scale training")]
struct Cli {
    /// Network config (JSON). Defaults to the built-in full-size config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input size as HxW.
    #[arg(long, global = true, value_parser = parse_size)]
    input: Option<InputSize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for files written by the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Drop the high-resolution branch.
    #[arg(long, global = true)]
    no_branch: bool,
    /// Replace aggregation with the single-scale context head.
    #[arg(long, global = true)]
    no_agg: bool,
    /// Disable per-task channel attention.
    #[arg(long, global = true)]
    no_alpha: bool,
    /// Disable spatial attention.
    #[arg(long, global = true)]
    no_beta: bool,
    /// Disable both attention terms.
    #[arg(long, global = true)]
    no_tag: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the stage table; exits 1 if extents differ from the reference.
    Describe {
        #[arg(long)]
        json: bool,
        /// Also list every primitive layer.
        #[arg(long)]
        per_layer: bool,
    },
    /// Run one forward pass and dump features and heatmaps.
    Forward {
        /// Image tensor file (B×3×H×W); a synthetic scene is used otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Only the per-layer-kind suite, skipping the end-to-end check.
        #[arg(long)]
        per_layer: bool,
        /// Parameter elements probed per module end to end.
        #[arg(long, default_value_t = 5)]
        probes: usize,
        /// Corrupt the recorded gradient of an op (negative control).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Fit one fixed synthetic batch and write the loss curve.
    Overfit {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Relative-improvement report for metric tables.
    Metrics {
        /// Table files; the shipped tables are used when none are given.
        tables: Vec<PathBuf>,
        /// Exit 1 unless every printed value is reproduced.
        #[arg(long)]
        golden: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic scene fixture.
    Synth {
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

fn parse_size(s: &str) -> Result<InputSize, String> {
    InputSize::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<BackboneConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => BackboneConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => BackboneConfig::default(),
    };
    let t = &mut cfg.toggles;
    t.use_high_branch &= !cli.no_branch;
    t.use_aggregation &= !cli.no_agg;
    t.use_channel_attention &= !(cli.no_alpha || cli.no_tag);
    t.use_spatial_attention &= !(cli.no_beta || cli.no_tag);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf, Error> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn save(dir: &Path, name: &str, t: &Tensor) -> Result<(), Error> {
    write_tensor(std::io::BufWriter::new(fs::File::create(dir.join(name))?), t)
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let mut cfg = load_config(cli)?;
    match &cli.cmd {
        Command::Describe { json, per_layer } => {
            if let Some(s) = cli.input {
                cfg.input = s;
            }
            let (net, _) = MultiTaskNet::build(&cfg)?;
            let mut report = shape_table(&net, cfg.input)?;
            if !per_layer {
                report = report.without_layers();
            }
            let mismatches = report.reference_mismatches();
            if *json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
                if let Some(layers) = report.layers.as_ref().filter(|_| *per_layer) {
                    for l in layers {
                        println!(
                            "  {:<44} {:<8} {:>14} {:>16} {:?}",
                            l.name,
                            format!("{:?}", l.kind).to_lowercase(),
                            l.params,
                            l.macs,
                            l.output
                        );
                    }
                }
            }
            if cli.out.is_some() {
                let dir = out_dir(cli, "describe")?;
                fs::write(dir.join("describe.txt"), report.to_text())?;
                fs::write(dir.join("describe.json"), report.to_json())?;
            }
            if mismatches.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for m in &mismatches {
                    eprintln!("shape mismatch: {m}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Forward { image } => {
            let image = match image {
                Some(p) => read_tensor(std::io::BufReader::new(fs::File::open(p)?))?,
                None => synth::generate(cli.seed, cli.input.unwrap_or(DESK_INPUT), 1, &cfg)?.image,
            };
            let s = image.shape();
            if s.len() != 4 {
                return Err(Error::Format(format!("image tensor must be B×C×H×W, got {s:?}")));
            }
            cfg.input = InputSize::new(s[2], s[3]);
            let (net, store) = MultiTaskNet::init(&cfg, cli.seed)?;
            let mut g = Graph::new(&store, Mode::Eval);
            let x = g.input(image);
            let out = net.forward(&mut g, x)?;
            let dir = out_dir(cli, "forward")?;
            save(&dir, "h.tnsr", g.value(out.h))?;
            write_heatmap(&dir.join("h.pgm"), g.value(out.h))?;
            if let Some(b) = out.beta {
                save(&dir, "beta.tnsr", g.value(b))?;
            }
            for (i, kind) in cfg.tasks.iter().enumerate() {
                let n = kind.short_name();
                save(&dir, &format!("h_{n}.tnsr"), g.value(out.task_features[i]))?;
                write_heatmap(&dir.join(format!("h_{n}.pgm")), g.value(out.task_features[i]))?;
                save(&dir, &format!("pred_{n}.tnsr"), g.value(out.predictions[i]))?;
                if let Some(a) = out.alphas[i] {
                    save(&dir, &format!("alpha_{n}.tnsr"), g.value(a))?;
                }
            }
            let hs = g.shape(out.h);
            println!("h {:?}; wrote features and heatmaps to {}", hs, dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            per_layer,
            probes,
            inject_fault,
        } => {
            let opts = SuiteOptions {
                seed: cli.seed,
                fault: inject_fault.clone().map(|op| (op, 1.01)),
            };
            let mut results = verify::layer_suite(&opts)?;
            if !per_layer {
                results.extend(verify::end_to_end(&cfg, cli.input.unwrap_or(DESK_INPUT), *probes, &opts)?);
            }
            print!("{}", verify::render(&results));
            if cli.out.is_some() {
                let dir = out_dir(cli, "gradcheck")?;
                fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&results)?)?;
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                println!("all {} components pass", results.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(ExitCode::from(1))
            }
        }
        Command::Overfit { steps, lr } => {
            let size = cli.input.unwrap_or(DESK_INPUT);
            cfg.input = size;
            let (net, mut store) = MultiTaskNet::init(&cfg, cli.seed)?;
            let batch = synth::generate(cli.seed, size, 1, &cfg)?;
            let adam = AdamConfig {
                lr: *lr,
                ..AdamConfig::default()
            };
            let curve = overfit(&net, &mut store, &batch, *steps, adam, |p| {
                eprintln!("step {:>4}  lr {:.3e}  loss {:.6}", p.step, p.lr, p.total);
            })?;
            let dir = out_dir(cli, "overfit")?;
            fs::write(dir.join("loss_curve.csv"), curve.to_csv())?;
            println!(
                "initial {:.6}  final {:.6}  ratio {:.4}  curve {}",
                curve.initial(),
                curve.last(),
                curve.last() / curve.initial(),
                dir.join("loss_curve.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { tables, golden, json } => {
            let loaded: Vec<MetricTable> = if tables.is_empty() {
                vec![MetricTable::multitask_comparison(), MetricTable::architecture_ablations()]
            } else {
                tables
                    .iter()
                    .map(|p| {
                        MetricTable::from_json(&fs::read_to_string(p)?)
                            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
                    })
                    .collect::<Result<_, _>>()?
            };
            let mut ok = true;
            let mut reports = Vec::new();
            for t in &loaded {
                let r = t.report()?;
                ok &= r.all_match();
                if !json {
                    println!("{}", r.to_text());
                }
                reports.push(r);
            }
            if *json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            }
            if *golden && !ok {
                eprintln!("printed values not reproduced");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { batch } => {
            let size = cli.input.unwrap_or(DESK_INPUT);
            let scene = synth::generate(cli.seed, size, *batch, &cfg)?;
            let dir = out_dir(cli, "synth")?;
            scene.save(&dir, cli.seed, &cfg)?;
            println!("{} objects; fixture written to {}", scene.objects.len(), dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Diverged { .. } => 3,
                _ => 4,
            })
        }
    }
}
