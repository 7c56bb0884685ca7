use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forensic3d::features::DetectorPreset;
use forensic3d::geometry::{CameraIntrinsics, Point3};
use forensic3d::scene::ReportFormat;
use forensic3d::synth::{SynthParams, Trajectory};
use forensic3d_cli::commands::{self, MeasureEnds};
use forensic3d_cli::service::{serve, AppState};
use forensic3d_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "forensic3d", version, about = "Monocular video to 3D point cloud reconstruction for scene documentation")]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty project file.
    Init {
        project: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Millimetres per scene unit.
        #[arg(long)]
        metric_scale: Option<f64>,
        /// Creation timestamp; defaults to now (UTC).
        #[arg(long)]
        created: Option<String>,
    },
    /// Select keyframes from a directory of frames.
    Keyframes {
        frames_dir: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Record the keyframe statistics in this project.
        #[arg(long)]
        project: Option<PathBuf>,
    },
    /// Reconstruct every keyframe cluster into a point cloud.
    Reconstruct {
        frames_dir: Option<PathBuf>,
        /// Reuse a keyframes.json written by `keyframes` instead of
        /// selecting keyframes again.
        #[arg(long)]
        keyframes: Option<PathBuf>,
        /// Camera intrinsics JSON; defaults to intrinsics.json in the frames
        /// directory.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Register the cluster clouds in this project.
        #[arg(long)]
        project: Option<PathBuf>,
    },
    /// Remove statistical outliers from a cloud.
    Clean {
        cloud: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Align a data cloud onto a model cloud from picked correspondences.
    Align {
        data: PathBuf,
        model: PathBuf,
        /// File of "i j" lines: data point index, model point index.
        #[arg(long)]
        corr: PathBuf,
        /// Estimate a rigid transform instead of a similarity.
        #[arg(long)]
        rigid: bool,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        trim_fraction: Option<f64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Record the alignment in this project.
        #[arg(long)]
        project: Option<PathBuf>,
    },
    /// Measure a distance and record it in the project.
    Measure {
        project: PathBuf,
        #[arg(long, value_parser = parse_point, requires = "p2", conflicts_with = "annotations")]
        p1: Option<Point3>,
        #[arg(long, value_parser = parse_point, requires = "p1")]
        p2: Option<Point3>,
        /// Two annotation ids, "a,b".
        #[arg(long, value_parser = parse_id_pair)]
        annotations: Option<(u64, u64)>,
    },
    /// Add or delete an evidence annotation.
    Annotate {
        project: PathBuf,
        #[arg(long, value_parser = parse_point, required_unless_present = "delete", requires_all = ["label", "author"])]
        anchor: Option<Point3>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        author: Option<String>,
        #[arg(long, default_value = "")]
        comment: String,
        /// Defaults to now (UTC).
        #[arg(long)]
        timestamp: Option<String>,
        #[arg(long, conflicts_with = "anchor")]
        delete: Option<u64>,
    },
    /// Render the project report.
    Report {
        project: PathBuf,
        #[arg(long, default_value = "txt")]
        format: ReportFormat,
        /// Timestamp printed in the report; defaults to now (UTC).
        #[arg(long)]
        generated: Option<String>,
        /// Write to a file instead of standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic scene with rendered frames and ground truth.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 20)]
        cameras: usize,
        #[arg(long, default_value = "orbit")]
        trajectory: Trajectory,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 640)]
        width: usize,
        #[arg(long, default_value_t = 480)]
        height: usize,
        #[arg(long, default_value_t = 500.0)]
        focal: f64,
        /// Orbit: degrees between cameras.
        #[arg(long)]
        orbit_step: Option<f64>,
        /// Line: distance between cameras.
        #[arg(long)]
        line_step: Option<f64>,
        /// Skip rendering; write only the scene description.
        #[arg(long)]
        no_frames: bool,
    },
    /// Serve a project over HTTP on localhost.
    Serve {
        project: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

/// Flags shared by the pipeline stages. With `--config` the saved
/// configuration is the base and only explicit flags override it.
#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    detector: Option<DetectorPreset>,
    /// Keyframe inlier threshold t.
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    octaves: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    contrast: Option<f32>,
    #[arg(long)]
    ratio: Option<f32>,
    /// Keyframes per cluster (C).
    #[arg(long)]
    cluster_size: Option<usize>,
    /// Keyframes shared by consecutive clusters (O).
    #[arg(long)]
    cluster_overlap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl PipelineArgs {
    fn resolve(&self, frames_dir: Option<&Path>) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::new(
                self.detector.unwrap_or(DetectorPreset::SiftLike),
                PathBuf::from("output"),
                0,
            ),
        };
        if let Some(p) = self.detector {
            if self.config.is_some() && p != cfg.detector_preset {
                cfg.detector = forensic3d::features::DetectorConfig::preset(p);
            }
            cfg.detector_preset = p;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(dir) = frames_dir {
            cfg.frames_dir = Some(dir.to_path_buf());
        }
        if let Some(t) = self.threshold {
            cfg.keyframe.inlier_threshold = t;
        }
        if let Some(v) = self.octaves {
            cfg.detector.octaves = v;
        }
        if let Some(v) = self.layers {
            cfg.detector.layers_per_octave = v;
        }
        if let Some(v) = self.contrast {
            cfg.detector.contrast_threshold = v;
        }
        if let Some(v) = self.ratio {
            cfg.detector.ratio_test = v;
            cfg.sfm.ratio_test = v;
        }
        if let Some(v) = self.cluster_size {
            cfg.sfm.cluster_size = v;
        }
        if let Some(v) = self.cluster_overlap {
            cfg.sfm.cluster_overlap = v;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.keyframe.seed = seed;
            cfg.sfm.seed = seed;
        }
        Ok(cfg)
    }
}

fn parse_point(s: &str) -> Result<Point3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Point3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got '{s}'")),
    }
}

fn parse_id_pair(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected a,b, got '{s}'"))?;
    let id = |x: &str| x.trim().parse::<u64>().map_err(|e| format!("'{x}': {e}"));
    Ok((id(a)?, id(b)?))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Init {
            project,
            name,
            frames,
            metric_scale,
            created,
        } => {
            let created = created.unwrap_or_else(commands::now_utc);
            commands::run_init(&project, &name, frames.as_deref(), metric_scale, &created)?;
            println!("created {}", project.display());
        }
        Command::Keyframes {
            frames_dir,
            pipeline,
            project,
        } => {
            let cfg = pipeline.resolve(frames_dir.as_deref())?;
            let set = commands::run_keyframes(&cfg, project.as_deref())?;
            println!(
                "{} keyframes: {} of {} frames -> {}",
                cfg.detector_preset.name(),
                set.stats(),
                set.total_frames,
                cfg.output_dir.display()
            );
        }
        Command::Reconstruct {
            frames_dir,
            keyframes,
            intrinsics,
            pipeline,
            project,
        } => {
            let mut cfg = pipeline.resolve(frames_dir.as_deref())?;
            if let Some(path) = intrinsics {
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                let k: CameraIntrinsics = serde_json::from_str(&text)
                    .map_err(|e| CliError::data("malformed_intrinsics", format!("{}: {e}", path.display())))?;
                cfg.intrinsics = Some(k);
            }
            for o in commands::run_reconstruct(&cfg, keyframes.as_deref(), project.as_deref())? {
                match o.result {
                    Ok((ply, n)) => println!("cluster {}: {n} points -> {}", o.cluster_id, ply.display()),
                    Err(reason) => println!("cluster {}: failed ({reason})", o.cluster_id),
                }
            }
        }
        Command::Clean { cloud, k, alpha, pipeline } => {
            let mut cfg = pipeline.resolve(None)?;
            if pipeline.out.is_none() && pipeline.config.is_none() {
                cfg.output_dir = cloud.parent().map_or(PathBuf::from("."), Path::to_path_buf);
            }
            if let Some(k) = k {
                cfg.sor.k = k;
            }
            if let Some(a) = alpha {
                cfg.sor.alpha = a;
            }
            let (out, removed) = commands::run_clean(&cloud, &cfg)?;
            println!("removed {} points -> {}", removed.len(), out.display());
        }
        Command::Align {
            data,
            model,
            corr,
            rigid,
            max_iterations,
            trim_fraction,
            pipeline,
            project,
        } => {
            let mut cfg = pipeline.resolve(None)?;
            if let Some(v) = max_iterations {
                cfg.icp.max_iterations = v;
            }
            if let Some(v) = trim_fraction {
                cfg.icp.trim_fraction = v;
            }
            let r = commands::run_align(&data, &model, &corr, !rigid, &cfg, project.as_deref())?;
            println!(
                "rough rms {:.6}, final rms {:.6}, {} iterations, overlap {:.3}{} -> {}",
                r.rough_rms,
                r.final_rms,
                r.icp_iterations,
                r.overlap_fraction,
                if r.no_overlap { " (no overlap)" } else { "" },
                cfg.output_dir.join(commands::TRANSFORM_FILE).display()
            );
        }
        Command::Measure {
            project,
            p1,
            p2,
            annotations,
        } => {
            let ends = match (p1, p2, annotations) {
                (Some(a), Some(b), None) => MeasureEnds::Points(a, b),
                (None, None, Some((a, b))) => MeasureEnds::Annotations(a, b),
                _ => return Err(CliError::usage("usage", "give --p1 and --p2, or --annotations a,b")),
            };
            println!("{}", to_json(&commands::run_measure(&project, ends)?));
        }
        Command::Annotate {
            project,
            anchor,
            label,
            author,
            comment,
            timestamp,
            delete,
        } => {
            let a = match (delete, anchor) {
                (Some(id), _) => commands::run_delete_annotation(&project, id)?,
                (None, Some(anchor)) => {
                    let ts = timestamp.unwrap_or_else(commands::now_utc);
                    let (label, author) = (label.unwrap_or_default(), author.unwrap_or_default());
                    commands::run_annotate(&project, anchor, &label, &author, &comment, &ts)?
                }
                (None, None) => return Err(CliError::usage("usage", "give --anchor or --delete")),
            };
            println!("{}", to_json(&a));
        }
        Command::Report {
            project,
            format,
            generated,
            output,
        } => {
            let generated = generated.unwrap_or_else(commands::now_utc);
            let doc = commands::run_report(&project, format, &generated)?;
            match output {
                Some(path) => std::fs::write(&path, doc).map_err(|e| CliError::io(&path, e))?,
                None => print!("{doc}"),
            }
        }
        Command::Synth {
            out_dir,
            seed,
            points,
            cameras,
            trajectory,
            noise,
            width,
            height,
            focal,
            orbit_step,
            line_step,
            no_frames,
        } => {
            let defaults = SynthParams::default();
            let params = SynthParams {
                seed,
                n_points: points,
                n_cameras: cameras,
                trajectory,
                noise_px: noise,
                width,
                height,
                focal_px: focal,
                orbit_step_deg: orbit_step.unwrap_or(defaults.orbit_step_deg),
                line_step: line_step.unwrap_or(defaults.line_step),
                ..defaults
            };
            let scene = commands::run_synth(&params, &out_dir, !no_frames)?;
            println!(
                "{} points, {} cameras, diameter {:.4} -> {}",
                scene.points.len(),
                scene.cameras.len(),
                scene.diameter(),
                out_dir.display()
            );
        }
        Command::Serve { project, port, host } => {
            if !project.is_file() {
                return Err(CliError::data("project_not_found", format!("{} not found", project.display())));
            }
            let state = AppState::open(&project, Default::default())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::data("runtime", e.to_string()))?;
            rt.block_on(serve(state, (host, port).into()))
                .map_err(|e| CliError::data("serve", e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let reason = e.to_string();
            let first = reason.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::usage("usage", first).line());
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
