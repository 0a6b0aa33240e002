use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brainage::grid::{warp, GridGeometry, ScalarVolume};
use brainage::io::{self, Volume, VolumeKind};
use brainage::lie::{exp, ExpConfig};
use brainage::metrics::evaluate;
use brainage::phantom::{make_subject, make_template, Cohort, Marker, PhantomSpec};
use brainage::register::{register, RegistrationConfig};
use brainage::runspec::{self, Mode, RunSpec};
use brainage::transport::{conjugation_oracle, pole_ladder};
use brainage::{Error, ErrorCategory, Result};
use clap::{Parser, Subcommand};

const THREADS_ENV: &str = "BRAINAGE_THREADS";

/// Longitudinal brain-aging synthesis with stationary velocity fields.
#[derive(Parser)]
#[command(name = "brainage", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom template, or a subject with --subject-seed.
    Phantom {
        #[arg(long)]
        age: f64,
        #[arg(long)]
        cohort: Cohort,
        #[arg(long, value_parser = parse_dims, default_value = "64,64,64")]
        dims: [usize; 3],
        #[arg(long)]
        subject_seed: Option<u64>,
        /// Marker blob as x,y,z,r in voxels (subjects only).
        #[arg(long, value_parser = parse_marker, requires = "subject_seed")]
        marker: Option<Marker>,
        #[arg(long)]
        ventricle_rate: Option<f64>,
        #[arg(long)]
        hippocampus_rate: Option<f64>,
        #[arg(long, default_value = "nifti")]
        format: io::Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a moving image to a fixed image, writing the SVF.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Registration config JSON; defaults apply to absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_svf: PathBuf,
    },
    /// Integrate an SVF into a displacement field.
    Exp {
        #[arg(long)]
        svf: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Integrate the negated SVF, giving the inverse deformation.
        #[arg(long)]
        inverse: bool,
    },
    /// Parallel transport an SVF u along v with the pole ladder.
    Transport {
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        v: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the conjugation displacement instead.
        #[arg(long)]
        oracle: bool,
    },
    /// Resample an image through a displacement field.
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        disp: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the image as a label map (nearest-neighbour).
        #[arg(long)]
        labels: bool,
    },
    /// Run the full pipeline from a run spec.
    Synthesize {
        #[arg(long)]
        spec: PathBuf,
        /// Run the ablation without parallel transport.
        #[arg(long)]
        no_pt: bool,
        /// Override the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail (exit 4) if any target's deformation folds.
        #[arg(long)]
        strict: bool,
    },
    /// Compare a prediction with ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, requires = "truth_labels")]
        pred_labels: Option<PathBuf>,
        #[arg(long, requires = "pred_labels")]
        truth_labels: Option<PathBuf>,
        /// JSON object mapping region names to label lists.
        #[arg(long, requires = "pred_labels")]
        regions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_list<const N: usize, T: std::str::FromStr>(s: &str) -> std::result::Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad number {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let n = parts.len();
    parts.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list::<3, usize>(s)
}

fn parse_marker(s: &str) -> std::result::Result<Marker, String> {
    let [x, y, z, r] = parse_list::<4, f64>(s)?;
    Ok(Marker { center: [x, y, z], radius: r })
}

/// Failure carrying the exit category.
struct Failure {
    category: ErrorCategory,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { category: e.category(), message: e.to_string() }
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::InputFormat | ErrorCategory::Io => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.into(), source })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
}

fn write_field(field: brainage::grid::VectorField, kind: VolumeKind, path: &Path) -> Result<()> {
    io::write_volume_auto(&Volume::Field(field, kind), path)
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Phantom { age, cohort, dims, subject_seed, marker, ventricle_rate, hippocampus_rate, format, out } => {
            let mut spec = PhantomSpec::new(GridGeometry::with_dims(dims)?, age, cohort);
            spec.ventricle_rate = ventricle_rate.unwrap_or(spec.ventricle_rate);
            spec.hippocampus_rate = hippocampus_rate.unwrap_or(spec.hippocampus_rate);
            let (image, labels) = match subject_seed {
                Some(seed) => make_subject(&spec.with_subject(seed, marker))?,
                None => make_template(&spec)?,
            };
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            io::write_volume(&Volume::Scalar(image), io::output_path(&out, "image", format), format)?;
            io::write_volume(&Volume::Scalar(labels), io::output_path(&out, "labels", format), format)?;
        }
        Command::Register { moving, fixed, config, out_svf } => {
            let cfg: RegistrationConfig = match config {
                Some(path) => read_json(&path)?,
                None => RegistrationConfig::default(),
            };
            let svf = register(&io::read_scalar(&moving)?, &io::read_scalar(&fixed)?, &cfg)?;
            write_field(svf, VolumeKind::Svf, &out_svf)?;
        }
        Command::Exp { svf, out, inverse } => {
            let v = io::read_field(&svf)?;
            let v = if inverse { v.neg() } else { v };
            write_field(exp(&v, &ExpConfig::default())?, VolumeKind::Displacement, &out)?;
        }
        Command::Transport { u, v, out, oracle } => {
            let (u, v) = (io::read_field(&u)?, io::read_field(&v)?);
            if oracle {
                let d = conjugation_oracle(&u, &v, &ExpConfig::default())?;
                write_field(d, VolumeKind::Displacement, &out)?;
            } else {
                write_field(pole_ladder(&u, &v)?, VolumeKind::Svf, &out)?;
            }
        }
        Command::Warp { image, disp, out, labels } => {
            let mut image = io::read_scalar(&image)?;
            if labels && !image.is_labels() {
                image = ScalarVolume::labels(image.geometry, image.values)?;
            }
            let warped = warp(&image, &io::read_field(&disp)?)?;
            io::write_volume_auto(&Volume::Scalar(warped), &out)?;
        }
        Command::Synthesize { spec: spec_path, no_pt, out, strict } => {
            let bytes = std::fs::read(&spec_path).map_err(|source| Error::Io { path: spec_path.clone(), source })?;
            let mut spec = RunSpec::from_json(&bytes)?;
            if no_pt {
                spec.mode = Mode::NoPt;
            }
            let base = spec_path.parent().unwrap_or(Path::new("."));
            if let Some(out) = out {
                spec.output_dir = std::path::absolute(&out).map_err(|source| Error::Io { path: out, source })?;
            }
            let output = runspec::run(&spec, base)?;
            for t in &output.manifest.targets {
                log::info!(
                    "target {} {}: min Jacobian {:.4}, ladder steps {}",
                    t.age,
                    t.cohort.as_str(),
                    t.min_jacobian,
                    t.ladder_steps
                );
            }
            if strict && output.manifest.any_flagged() {
                let ages: Vec<String> =
                    output.manifest.targets.iter().filter(|t| t.flagged).map(|t| t.age.to_string()).collect();
                return Err(Failure {
                    category: ErrorCategory::Numerical,
                    message: format!("non-positive Jacobian determinant at target ages {}", ages.join(", ")),
                });
            }
        }
        Command::Metrics { pred, truth, pred_labels, truth_labels, regions, out } => {
            let (pred, truth) = (io::read_scalar(&pred)?, io::read_scalar(&truth)?);
            let labels = match (pred_labels, truth_labels) {
                (Some(p), Some(t)) => Some((io::read_scalar(&p)?, io::read_scalar(&t)?)),
                _ => None,
            };
            let regions: BTreeMap<String, Vec<u32>> = match regions {
                Some(path) => read_json(&path)?,
                None => BTreeMap::new(),
            };
            let report = evaluate(&pred, &truth, labels.as_ref().map(|(p, t)| (p, t)), &regions)?;
            write_json(&report, &out)?;
        }
    }
    Ok(())
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        category: ErrorCategory::Usage,
        message: format!("{THREADS_ENV} must be a positive integer, got {value:?}"),
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| Failure {
        category: ErrorCategory::Usage,
        message: format!("cannot configure {threads} worker threads: {e}"),
    })
}

fn report(failure: Failure) -> ExitCode {
    let message = failure.message.replace('\n', " ");
    eprintln!("error[{}]: {message}", failure.category.as_str());
    ExitCode::from(exit_code(failure.category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&rendered).trim_start_matches("error: ");
            return report(Failure { category: ErrorCategory::Usage, message: first.to_string() });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(failure) = configure_threads() {
        return report(failure);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => report(failure),
    }
}
