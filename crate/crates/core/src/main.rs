use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use posewarp::correspondence::{sinkhorn, sinkhorn_with_trace};
use posewarp::dataset::{
    make_identity_pool, make_pose_pool, sample_pairs_from_pools, write_dataset, Generator,
    GeneratorConfig,
};
use posewarp::error::{Error, Result};
use posewarp::mesh::{center_mesh, load_obj, save_obj, save_ply_colored};
use posewarp::refinement::BlendMode;
use posewarp::training::{
    correspondence_colors, evaluate, gradient_check_suite, load_manifest_samples, train, transfer,
    write_eval_csv, Checkpoint, TrainConfig,
};

/// Pose transfer between triangle meshes: optimal-transport correspondence,
/// barycentric warping, and conditional-normalization refinement.
#[derive(Parser)]
#[command(name = "posewarp", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic articulated-body dataset (OBJ files + manifest).
    GenerateData(GenerateArgs),
    /// Train the model on a dataset manifest.
    Train(TrainArgs),
    /// Transfer the pose of one mesh onto the identity of another.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint against ground truth and write a CSV report.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Solve one entropic transport problem from a cost matrix file.
    Sinkhorn(SinkhornArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for OBJ files and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Training pairs to generate.
    #[arg(long, default_value_t = 8)]
    train_pairs: usize,
    /// Test pairs to generate (0 skips the test manifest).
    #[arg(long, default_value_t = 0)]
    test_pairs: usize,
    /// Identity pool size.
    #[arg(long, default_value_t = 6)]
    identities: usize,
    /// Pose pool size.
    #[arg(long, default_value_t = 8)]
    poses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vertices per mesh; 20 + a multiple of `sides`.
    #[arg(long, default_value_t = 386)]
    vertices: usize,
    #[arg(long, default_value_t = 6)]
    sides: usize,
    /// Generate quadruped bodies instead of bipeds.
    #[arg(long)]
    quadruped: bool,
    /// Joint angle limit in radians.
    #[arg(long, default_value_t = 1.0)]
    joint_limit: f64,
    /// Give train and test disjoint identity pools.
    #[arg(long)]
    disjoint_identities: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_rec: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    i_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run batch samples in parallel (bit-identical to serial mode).
    #[arg(long)]
    parallel: bool,
    /// Divide all hidden widths by this factor (1 = full architecture).
    #[arg(long)]
    width_scale: Option<usize>,
    /// Ablation: freeze the blend weight at 1.
    #[arg(long)]
    blend_one: bool,
    /// Ablation: treat the warped mesh as the output (no refinement).
    #[arg(long)]
    warp_only: bool,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Identity mesh (supplies shape, vertex order, faces).
    #[arg(long)]
    identity: PathBuf,
    /// Pose mesh (supplies articulation).
    #[arg(long)]
    pose: PathBuf,
    /// Output OBJ path.
    #[arg(long)]
    output: PathBuf,
    /// Also write the coarse warped mesh.
    #[arg(long)]
    warped_output: Option<PathBuf>,
    /// Write a colored PLY showing the hard correspondence.
    #[arg(long)]
    correspondence: Option<PathBuf>,
    /// Override transport iterations at inference time.
    #[arg(long)]
    i_max: Option<usize>,
    /// Skip bounding-box centering of the inputs.
    #[arg(long)]
    no_center: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// CSV output path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    i_max: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct SinkhornArgs {
    /// Cost matrix as CSV/TSV (one row per line; `#` comments ignored).
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, default_value_t = 0.03)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Output CSV for the transport plan.
    #[arg(long)]
    output: PathBuf,
    /// Print per-iteration column-marginal error.
    #[arg(long)]
    trace: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenerateData(a) => generate_data(a)?,
        Cmd::Train(a) => run_train(a)?,
        Cmd::Transfer(a) => run_transfer(a)?,
        Cmd::Eval(a) => run_eval(a)?,
        Cmd::Gradcheck(a) => return run_gradcheck(a),
        Cmd::Sinkhorn(a) => run_sinkhorn(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let config = GeneratorConfig {
        total_vertices: a.vertices,
        sides: a.sides,
        quadruped: a.quadruped,
        joint_limit: a.joint_limit,
    };
    let generator = Generator::new(config)?;
    let ids = make_identity_pool(a.identities, a.seed);
    let poses = make_pose_pool(a.poses, a.seed, a.joint_limit);

    let (train_ids, test_ids) = if a.disjoint_identities && a.test_pairs > 0 {
        if a.identities < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 identities for disjoint pools".into(),
            ));
        }
        let split = a.identities.div_ceil(2);
        (&ids[..split], &ids[split..])
    } else {
        (&ids[..], &ids[..])
    };

    let train_samples = sample_pairs_from_pools(&generator, a.train_pairs, train_ids, &poses, a.seed)?;
    let path = write_dataset(&a.out, &generator, &train_samples, a.seed, "train_manifest.json")?;
    println!("wrote {} training pairs, manifest {}", train_samples.len(), path.display());

    if a.test_pairs > 0 {
        let test_dir = a.out.join("test");
        let test_samples =
            sample_pairs_from_pools(&generator, a.test_pairs, test_ids, &poses, a.seed ^ 0x7E57)?;
        let path = write_dataset(&test_dir, &generator, &test_samples, a.seed, "test_manifest.json")?;
        println!("wrote {} test pairs, manifest {}", test_samples.len(), path.display());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|source| Error::Io { path: path.clone(), source })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.manifest {
        cfg.manifest = Some(v);
    }
    if let Some(v) = a.checkpoint_dir {
        cfg.checkpoint_dir = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda_rec {
        cfg.lambda_rec = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.i_max {
        cfg.i_max = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.parallel {
        cfg.parallel = true;
    }
    if let Some(s) = a.width_scale {
        cfg.arch = cfg.arch.scaled_down(s);
    }
    if a.blend_one {
        cfg.blend_mode = BlendMode::ForceOne;
    }
    if a.warp_only {
        cfg.warp_only = true;
    }

    let ckpt = train(&cfg)?;
    let last = ckpt.loss_history.last().expect("at least one epoch");
    println!(
        "trained {} epochs: rec {:.6}, edge {:.6}, total {:.6}",
        ckpt.epoch, last.rec, last.edge, last.total
    );
    if let Some(dir) = &cfg.checkpoint_dir {
        println!("checkpoints in {}", dir.display());
    } else {
        println!("no --checkpoint-dir given; model was not saved");
    }
    Ok(())
}

fn run_transfer(a: TransferArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut m_id = load_obj(&a.identity)?;
    let mut m_pose = load_obj(&a.pose)?;
    if !a.no_center {
        m_id = center_mesh(&m_id);
        m_pose = center_mesh(&m_pose);
    }
    if let Some(i_max) = a.i_max {
        ckpt.train_config.i_max = i_max;
    }
    let (m_out, plan, m_warp) = transfer(&m_id, &m_pose, &ckpt)?;
    save_obj(&m_out, &a.output)?;
    println!(
        "wrote {} ({} vertices, row-sum error {:.2e}, column-marginal L1 {:.2e})",
        a.output.display(),
        m_out.vertex_count(),
        plan.row_sum_error(),
        plan.col_marginal_l1_error()
    );
    if let Some(path) = a.warped_output {
        save_obj(&m_warp, &path)?;
        println!("wrote warped mesh {}", path.display());
    }
    if let Some(path) = a.correspondence {
        let colors = correspondence_colors(&plan, &m_pose);
        save_ply_colored(&m_id, &colors, &path)?;
        println!("wrote correspondence PLY {}", path.display());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let samples = load_manifest_samples(&a.manifest)?;
    let summary = evaluate(&ckpt, &samples, a.i_max)?;
    write_eval_csv(&summary, &a.output)?;
    println!(
        "evaluated {} pairs: mean PMD {:.6} (x1e3), CD {:.6} (x1e3), EMD {:.6} (x1e2)",
        summary.per_pair.len(),
        summary.mean.pmd_scaled(),
        summary.mean.cd_scaled(),
        summary.mean.emd_scaled()
    );
    println!("report written to {}", a.output.display());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let items = gradient_check_suite(a.seed)?;
    let mut ok = true;
    for item in &items {
        println!(
            "{:24} max rel err {:.3e}  (tolerance {:.0e})  {}",
            item.name,
            item.max_rel_err,
            item.tolerance,
            if item.passed() { "PASS" } else { "FAIL" }
        );
        ok &= item.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn parse_cost_matrix(path: &PathBuf) -> Result<Array2<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(|c: char| c == ',' || c == '\t' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            row.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                path: path.clone(),
                line: idx + 1,
                msg: format!("non-numeric entry '{tok}'"),
            })?);
        }
        if let Some(prev) = rows.first() {
            if row.len() != prev.len() {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: idx + 1,
                    msg: format!("expected {} columns, found {}", prev.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("cost matrix file has no rows".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_fn((r, c), |(i, j)| rows[i][j]))
}

fn run_sinkhorn(a: SinkhornArgs) -> Result<()> {
    let cost = parse_cost_matrix(&a.cost)?;
    let plan = if a.trace {
        let (plan, trace) = sinkhorn_with_trace(&cost, a.epsilon, a.iterations)?;
        for (i, err) in trace.iter().enumerate() {
            println!("iteration {:4}: column-marginal L1 error {err:.6e}", i + 1);
        }
        plan
    } else {
        sinkhorn(&cost, a.epsilon, a.iterations)?
    };

    let mut out = String::new();
    for row in plan.matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(&a.output, out).map_err(|source| Error::Io { path: a.output.clone(), source })?;
    println!(
        "plan {}x{} written to {} (row-sum error {:.2e}, column-marginal L1 {:.2e})",
        plan.n_id(),
        plan.n_pose(),
        a.output.display(),
        plan.row_sum_error(),
        plan.col_marginal_l1_error()
    );
    Ok(())
}
