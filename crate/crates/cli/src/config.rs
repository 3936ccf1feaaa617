//! Run configuration: defaults, overridden by a TOML file, overridden by
//! flags. The fully resolved settings are echoed into every artifact so a
//! report always records exactly what produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spanfuse::model::{MlpKind, ModelConfig, NormKind};
use spanfuse::selection::{CutPlan, Group, Metric};
use spanfuse::solvers::{RegKind, SolverConfig, SolverKind, SolverSpec};
use spanfuse::{Error, Result};

use crate::CommonArgs;

/// Seed offset for mask-position draws, so masking never reuses the token
/// stream of a synthetic calibration set built from the same run seed.
const MASK_SEED_OFFSET: u64 = 0x4D41_534B; // "MASK"

/// Inline model dimensions for runs without a checkpoint. Every field has
/// a default, so a config file only needs to list what it changes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub mlp_kind: MlpKind,
    pub causal: bool,
    /// Weight seed; falls back to the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            norm_kind: NormKind::Rms,
            mlp_kind: MlpKind::GatedSilu,
            causal: true,
            seed: None,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self, run_seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            norm_kind: self.norm_kind,
            mlp_kind: self.mlp_kind,
            causal: self.causal,
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

/// Where the model comes from: a checkpoint on disk, or dimensions to
/// build a seeded one in memory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(ModelSpec),
}

/// On-disk configuration: flat keys named after the flags they mirror.
/// Everything is optional; flags win on conflict.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelSource>,
    pub calib: Option<PathBuf>,
    pub synthetic: Option<usize>,
    pub seq_len: Option<usize>,
    pub n: Option<usize>,
    pub groups: Option<String>,
    pub solver: Option<String>,
    pub metric: Option<String>,
    pub alpha: Option<f64>,
    pub reg: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub mask: Option<f64>,
    pub mask_token: Option<u32>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_verify: Option<bool>,
    pub cosine_exact: Option<bool>,
    pub verify_tolerance: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn parse_solver(s: &str) -> Result<SolverKind> {
    match s {
        "ls" => Ok(SolverKind::Ls),
        "ridge" => Ok(SolverKind::Ridge),
        "diag" => Ok(SolverKind::Diag),
        "ortho" => Ok(SolverKind::Ortho),
        "cosine" => Ok(SolverKind::CosineGd),
        other => Err(Error::Config(format!(
            "unknown solver {other:?} (expected ls, ridge, diag, ortho or cosine)"
        ))),
    }
}

fn parse_reg(s: &str) -> Result<RegKind> {
    match s {
        "none" => Ok(RegKind::None),
        "l1" => Ok(RegKind::L1),
        "l2" => Ok(RegKind::L2),
        other => Err(Error::Config(format!(
            "unknown regularizer {other:?} (expected none, l1 or l2)"
        ))),
    }
}

fn reg_name(reg: RegKind) -> &'static str {
    match reg {
        RegKind::None => "none",
        RegKind::L1 => "l1",
        RegKind::L2 => "l2",
    }
}

fn solver_name(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Ls => "ls",
        SolverKind::Ridge => "ridge",
        SolverKind::Diag => "diag",
        SolverKind::Ortho => "ortho",
        SolverKind::CosineGd => "cosine",
    }
}

/// Parses a cut plan written as `start:span,start:span`.
pub fn parse_groups(text: &str) -> Result<Vec<Group>> {
    text.split(',')
        .map(|part| {
            let (start, span) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Input(format!("bad group {part:?}, expected start:span")))?;
            let start = start
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Input(format!("bad group start {start:?}: {e}")))?;
            let span = span
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Input(format!("bad group span {span:?}: {e}")))?;
            Ok(Group::new(start, span))
        })
        .collect()
}

/// Fully resolved run settings after merging defaults, file and flags.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelSource,
    pub calib: Option<PathBuf>,
    pub synthetic: usize,
    pub seq_len: usize,
    pub n: usize,
    pub groups: Option<Vec<Group>>,
    pub solver: SolverKind,
    pub metric: Metric,
    pub alpha: f64,
    pub reg: RegKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask: f64,
    pub mask_token: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub verify: bool,
    pub cosine_exact: bool,
    pub verify_tolerance: f64,
}

impl Settings {
    pub fn resolve(args: &CommonArgs) -> Result<Settings> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        if args.calib.is_some() && args.synthetic.is_some() {
            return Err(Error::Input(
                "--calib and --synthetic both given; pick one calibration source".into(),
            ));
        }
        let model = match (&args.model, file.model) {
            (Some(path), _) => ModelSource::Path(path.clone()),
            (None, Some(source)) => source,
            (None, None) => ModelSource::Inline(ModelSpec::default()),
        };
        // A calibration file on either side suppresses the other side's
        // synthetic count, and vice versa: the flag layer wins as a whole.
        let (calib, synthetic) = match (&args.calib, args.synthetic) {
            (Some(path), _) => (Some(path.clone()), None),
            (None, Some(count)) => (None, Some(count)),
            (None, None) => (file.calib, file.synthetic),
        };
        let solver = match args.solver {
            Some(kind) => SolverKind::from(kind),
            None => file
                .solver
                .as_deref()
                .map(parse_solver)
                .transpose()?
                .unwrap_or(SolverKind::Ls),
        };
        let metric = match args.metric {
            Some(m) => Metric::from(m),
            None => file
                .metric
                .as_deref()
                .map(str::parse::<Metric>)
                .transpose()?
                .unwrap_or(Metric::Cosine),
        };
        let reg = match args.reg {
            Some(r) => RegKind::from(r),
            None => file
                .reg
                .as_deref()
                .map(parse_reg)
                .transpose()?
                .unwrap_or(RegKind::None),
        };
        let groups = match args.groups.as_deref().or(file.groups.as_deref()) {
            Some(text) => Some(parse_groups(text)?),
            None => None,
        };
        let settings = Settings {
            model,
            calib,
            synthetic: synthetic.unwrap_or(16),
            seq_len: file.seq_len.unwrap_or(128),
            n: args.n.or(file.n).unwrap_or(1),
            groups,
            solver,
            metric,
            alpha: args.alpha.or(file.alpha).unwrap_or(0.0),
            reg,
            epochs: args.epochs.or(file.epochs).unwrap_or(10),
            lr: args.lr.or(file.lr).unwrap_or(1e-4),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(1024),
            mask: args.mask.or(file.mask).unwrap_or(0.0),
            mask_token: file.mask_token.unwrap_or(0),
            seed: args.seed.or(file.seed).unwrap_or(0),
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("out")),
            verify: !(args.no_verify || file.no_verify.unwrap_or(false)),
            cosine_exact: file.cosine_exact.unwrap_or(false),
            verify_tolerance: file.verify_tolerance.unwrap_or(1e-3),
        };
        settings.check()?;
        Ok(settings)
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Input("span length --n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask) {
            return Err(Error::Input(format!(
                "mask fraction must lie in [0, 1], got {}",
                self.mask
            )));
        }
        if self.alpha < 0.0 || self.alpha.is_nan() {
            return Err(Error::Input(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// The estimation routine these settings describe.
    pub fn solver_spec(&self) -> Result<SolverSpec> {
        Ok(match self.solver {
            SolverKind::Ls => SolverSpec::Ls,
            SolverKind::Ridge => SolverSpec::Ridge { alpha: self.alpha },
            SolverKind::Diag => SolverSpec::Diagonal,
            SolverKind::Ortho => SolverSpec::Orthogonal,
            SolverKind::CosineGd => {
                let config = SolverConfig {
                    lr: self.lr,
                    batch_size: self.batch_size,
                    epochs: self.epochs,
                    seed: self.seed,
                    ..SolverConfig::default()
                };
                config.validate()?;
                SolverSpec::CosineGd {
                    config,
                    reg: self.reg,
                    alpha: self.alpha,
                    exact: self.cosine_exact,
                }
            }
        })
    }

    /// Seed for mask-position draws (see [`MASK_SEED_OFFSET`]).
    pub fn mask_seed(&self) -> u64 {
        self.seed ^ MASK_SEED_OFFSET
    }

    /// The plan from `--groups`, tagged with the configured metric.
    pub fn explicit_plan(&self) -> Option<CutPlan> {
        self.groups
            .as_ref()
            .map(|groups| CutPlan::new(groups.clone(), self.metric))
    }

    /// Snapshot of every resolved knob, embedded into each artifact.
    pub fn echo(&self, command: &str) -> EffectiveConfig {
        EffectiveConfig {
            command: command.to_string(),
            model: self.model.clone(),
            calib: self.calib.as_ref().map(|p| p.display().to_string()),
            synthetic: if self.calib.is_none() {
                Some(self.synthetic)
            } else {
                None
            },
            seq_len: self.seq_len,
            n: self.n,
            groups: self.groups.as_ref().map(|gs| {
                gs.iter()
                    .map(|g| format!("{}:{}", g.start, g.span))
                    .collect::<Vec<_>>()
                    .join(",")
            }),
            solver: solver_name(self.solver).to_string(),
            metric: self.metric.to_string(),
            alpha: self.alpha,
            reg: reg_name(self.reg).to_string(),
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            mask: self.mask,
            mask_token: self.mask_token,
            seed: self.seed,
            out: self.out.display().to_string(),
            verify: self.verify,
            verify_tolerance: self.verify_tolerance,
        }
    }
}

/// The resolved configuration as written into every JSON artifact: flat
/// keys named after the flags, serialized in a fixed order.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveConfig {
    pub command: String,
    pub model: ModelSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<usize>,
    pub seq_len: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<String>,
    pub solver: String,
    pub metric: String,
    pub alpha: f64,
    pub reg: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask: f64,
    pub mask_token: u32,
    pub seed: u64,
    pub out: String,
    pub verify: bool,
    pub verify_tolerance: f64,
}
