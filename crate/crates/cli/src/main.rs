use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qdiffusion::qsim::AnsatzFamily;
use qdiffusion_cli::*;

#[derive(Parser)]
#[command(name = "qdiff", version, about = "Hybrid quantum-classical diffusion models on small images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `run.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Draw class-conditional samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        n: usize,
        /// Comma-separated class labels; overrides --n.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Compare generated samples with a real image folder.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Classifier checkpoint; trained on the real set and written here if missing.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        kid_subsets: usize,
        #[arg(long, default_value_t = 100)]
        kid_subset_size: usize,
        #[arg(long, default_value_t = 10)]
        is_splits: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Run a single variational circuit and print its readout.
    Qsim {
        #[arg(long, default_value = "hqconv")]
        family: AnsatzFamily,
        #[arg(long, default_value_t = 4)]
        qubits: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        inputs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        params: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print the parameter-shift Jacobian.
        #[arg(long)]
        jacobian: bool,
    },
    /// Per-channel pixel histograms of an image, sample directory or image folder.
    Histogram {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Write the synthetic four-class dataset as an image folder.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.12}")).collect::<Vec<_>>().join("\t")
}

fn run(cmd: Command) -> qdiffusion::Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            resume,
            quiet,
        } => {
            let opts = TrainOptions {
                config,
                seed,
                out,
                resume,
            };
            let s = cmd_train(&opts, |r| {
                if !quiet && (r.step % 50 == 0 || r.step == 1) {
                    eprintln!("step {:>6}  loss {:.5}  {:.1}s", r.step, r.loss, r.wall_time);
                }
            })?;
            println!("trained to step {}", s.steps);
            println!("log: {}", s.log.display());
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Sample {
            checkpoint,
            n,
            labels,
            seed,
            out,
            chunk,
        } => {
            let opts = SampleOptionsCli {
                checkpoint,
                out,
                seed,
                n,
                labels,
                chunk,
            };
            let s = cmd_sample(&opts, |done, total| eprintln!("sampled {done}/{total}"))?;
            println!("wrote {} images, manifest {}", s.n, s.manifest.display());
            println!("circuit evaluations: {}", s.circuit_evals);
        }
        Command::Evaluate {
            real,
            generated,
            classifier,
            out,
            seed,
            kid_subsets,
            kid_subset_size,
            is_splits,
            bins,
        } => {
            let r = cmd_evaluate(&EvaluateOptions {
                real,
                generated,
                classifier,
                out: out.clone(),
                seed,
                kid_subsets,
                kid_subset_size,
                is_splits,
                bins,
            })?;
            println!("fid       {:.6}", r.fid);
            println!("kid       {:.6} ± {:.6}", r.kid_mean, r.kid_std);
            println!("is        {:.4} ± {:.4}", r.is_mean, r.is_std);
            println!("accuracy  {:.4}", r.accuracy);
            for c in &r.per_class {
                println!("  {:<16} p {:.3} r {:.3} f1 {:.3} n {}", c.class, c.precision, c.recall, c.f1, c.support);
            }
            println!("report: {}", out.join(REPORT_FILE).display());
        }
        Command::Qsim {
            family,
            qubits,
            layers,
            inputs,
            params,
            seed,
            jacobian,
        } => {
            let o = cmd_qsim(&QsimOptions {
                family,
                qubits,
                layers,
                inputs,
                params,
                seed,
                jacobian,
            })?;
            println!("params\t{}", join(&o.params));
            println!("inputs\t{}", join(&o.inputs));
            println!("expectation_z\t{}", join(&o.expectations));
            if let Some(j) = o.jacobian {
                for (i, row) in j.iter().enumerate() {
                    println!("grad_z{i}\t{}", join(row));
                }
            }
        }
        Command::Histogram { input, out, bins } => {
            let hists = cmd_histogram(&input, &out, bins)?;
            for (name, h) in ["red", "green", "blue"].iter().zip(&hists) {
                println!("{name:<6} mean {:.4}  median {:.4}", h.mean, h.median);
            }
            println!("table: {}", out.display());
        }
        Command::MakeToyData {
            out,
            per_class,
            image_size,
            classes,
            seed,
        } => {
            let d = cmd_make_toy_data(&out, per_class, image_size, classes, seed)?;
            println!("wrote {} images in {} classes to {}", d.len(), d.num_classes(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
