use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusekit_cli::error::{ToolError, ToolResult};
use fusekit_cli::fixture::FixtureSpec;
use fusekit_cli::recipe::{self, RecipeFile};
use fusekit_cli::run::{self, CompareArgs, DiagnoseOptions};
use fusekit_core::dtype::DType;

/// Checkpoint merging and merge diagnostics.
#[derive(Parser)]
#[command(name = "fusekit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge checkpoints into a fused checkpoint plus a run manifest.
    Merge(MergeCmd),
    /// Analyze a (base, secondary, fused) triple: spectra, angles, NSS,
    /// provenance, entropy, and stability reports.
    Diagnose(DiagnoseCmd),
    /// Run several merge methods on one pair and tabulate their
    /// diagnostics side by side.
    Compare(CompareCmd),
    /// Generate a synthetic MLP checkpoint pair for testing.
    GenFixture(GenFixtureCmd),
}

#[derive(Args, Clone)]
struct HyperFlags {
    /// Softmax smoothing constant.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    q_low: Option<f64>,
    #[arg(long)]
    q_high: Option<f64>,
    #[arg(long)]
    q_center: Option<f64>,
    /// IQR scale in the selection threshold.
    #[arg(long)]
    alpha: Option<f64>,
    /// Task-vector scaling for baseline methods.
    #[arg(long)]
    lambda: Option<f64>,
    /// Trim/select density for TIES and SCE.
    #[arg(long)]
    density: Option<f64>,
    /// DARE drop probability.
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Seed for randomized methods.
    #[arg(long)]
    seed: Option<u64>,
}

impl HyperFlags {
    fn apply(&self, file: &mut RecipeFile) {
        file.epsilon = self.epsilon.or(file.epsilon);
        file.q_low = self.q_low.or(file.q_low);
        file.q_high = self.q_high.or(file.q_high);
        file.q_center = self.q_center.or(file.q_center);
        file.alpha = self.alpha.or(file.alpha);
        file.lambda = self.lambda.or(file.lambda);
        file.density = self.density.or(file.density);
        file.drop_rate = self.drop_rate.or(file.drop_rate);
        file.seed = self.seed.or(file.seed);
    }
}

#[derive(Args)]
struct MergeCmd {
    /// Recipe JSON; flags override its fields.
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// scf-rkl | task-arithmetic | dare-linear | ties | dare-ties | sce
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Secondary checkpoint (repeatable).
    #[arg(long)]
    secondary: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// error | copy-secondary | skip
    #[arg(long)]
    unmatched_policy: Option<String>,
    /// Manifest path (default: <out>.manifest.json).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, env = "FUSEKIT_THREADS")]
    threads: Option<usize>,
    #[command(flatten)]
    hyper: HyperFlags,
}

#[derive(Args)]
struct DiagnoseCmd {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    secondary: PathBuf,
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Glob over tensor names for the spectral sweep.
    #[arg(long, default_value = "*")]
    selector: String,
    /// Singular-subspace dimension for angle/bound checks.
    #[arg(long, default_value_t = 16)]
    rank_k: usize,
}

#[derive(Args)]
struct CompareCmd {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    secondary: PathBuf,
    /// Comma-separated method list (≥ 2).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    rank_k: usize,
    #[arg(long, env = "FUSEKIT_THREADS")]
    threads: Option<usize>,
    #[command(flatten)]
    hyper: HyperFlags,
}

#[derive(Args)]
struct GenFixtureCmd {
    #[arg(long)]
    out_base: PathBuf,
    #[arg(long)]
    out_secondary: PathBuf,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    perturbation_scale: f64,
    /// F64 | F32 | F16 | BF16
    #[arg(long, default_value = "F32")]
    dtype: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> ToolResult<()> {
    match cli.command {
        Command::Merge(cmd) => {
            let mut file = match &cmd.recipe {
                Some(path) => RecipeFile::load(path)?,
                None => RecipeFile::default(),
            };
            if let Some(m) = cmd.method {
                file.method = Some(m);
            }
            if let Some(b) = cmd.base {
                file.base_path = Some(b);
            }
            if !cmd.secondary.is_empty() {
                file.secondary_paths = cmd.secondary;
            }
            if let Some(o) = cmd.out {
                file.output_path = Some(o);
            }
            if let Some(p) = cmd.unmatched_policy {
                file.unmatched_policy = Some(p);
            }
            if let Some(r) = cmd.report {
                file.report_path = Some(r);
            }
            if let Some(t) = cmd.threads {
                file.threads = Some(t);
            }
            cmd.hyper.apply(&mut file);
            let (recipe, echo) = recipe::resolve(file)?;
            run::cmd_merge(&recipe, &echo, true)
        }
        Command::Diagnose(cmd) => {
            run::cmd_diagnose(
                &cmd.base,
                &cmd.secondary,
                &cmd.fused,
                &cmd.out_dir,
                &DiagnoseOptions {
                    selector: cmd.selector,
                    rank_k: cmd.rank_k,
                },
            )?;
            Ok(())
        }
        Command::Compare(cmd) => {
            let mut overrides = RecipeFile::default();
            cmd.hyper.apply(&mut overrides);
            overrides.threads = cmd.threads;
            run::cmd_compare(&CompareArgs {
                base: cmd.base,
                secondary: cmd.secondary,
                methods: cmd.methods,
                out_dir: cmd.out_dir,
                overrides,
                rank_k: cmd.rank_k,
            })
        }
        Command::GenFixture(cmd) => {
            let dtype = DType::from_tag(&cmd.dtype.to_uppercase())
                .ok_or_else(|| ToolError::config(format!("unknown dtype '{}'", cmd.dtype)))?;
            run::cmd_gen_fixture(
                &FixtureSpec {
                    layers: cmd.layers,
                    width: cmd.width,
                    seed: cmd.seed,
                    perturbation_scale: cmd.perturbation_scale,
                    dtype,
                },
                &cmd.out_base,
                &cmd.out_secondary,
            )
        }
    }
}
