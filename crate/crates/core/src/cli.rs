//! Command-line interface. Every subcommand reads its inputs, runs one
//! library operation, writes its outputs plus a `<out>.meta.json` run record
//! (command, seed, config hash, version), and exits nonzero with a JSON error
//! on stderr when anything fails.
//!
//! Settings come from the command's defaults, then `--config` (a JSON object
//! merged key by key over the defaults), then flags. All randomness derives
//! from `--seed`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::affinity::{
    annotate_entropy, decode_records, encode_records, generate_assays, prefilter, train_affinity, AffinityConfig,
    AffinityInputs, AffinityModel, AffinityTrainConfig, AssayGenConfig, LabelKind,
};
use crate::complex::{decode_complex, encode_complex, generate_synthetic_complex, SyntheticGenConfig, TokenizedComplex};
use crate::distogram::{decode_distogram, encode_distogram, Distogram};
use crate::epinet::{
    decode_posterior, encode_posterior, iqr_calibration, marginal_stats, quantile_edges, sample_posterior,
    train_epinet, Epinet, EpinetConfig, EpinetExample, EpinetPosterior, EpinetTrainConfig,
};
use crate::error::Error;
use crate::metrics::{entropy_calibration, success_rates, PoseResult, ENTROPY_EDGES};
use crate::pairformer::{Pairformer, PairformerConfig};
use crate::pipeline::{evaluate_pose, infer, predict_pose, PoseEvaluation};
use crate::pocket::{crop, pocket_residues, PocketCrop, INITIAL_POCKET_CUTOFF};
use crate::posegen::{OptConfig, PoseFile};
use crate::rng;
use crate::select::{
    decode_pool, dmta_csv, dmta_simulate, emax_select, encode_pool, generate_cliff_pool, greedy_select,
    pathwise_update, CliffPoolConfig, DmtaConfig, ObservationNoise, SelectionPool, Strategy, SIGMA_OBS,
};
use crate::training::{desk_curriculum, train, ComplexFamily, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "coarsebind", version, about = "Coarse-grained binding structure, affinity and selection toolkit")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON settings merged over the command's defaults; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenerateKind {
    /// Complexes with reference coordinates, one file each.
    Complexes,
    /// Complexes plus an assay record file.
    Assays,
    /// A selection pool and the epinet that defines its model error.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectStrategy {
    Greedy,
    Emax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DmtaStrategy {
    All,
    Greedy,
    ContinualGreedy,
    ContinualEmax,
    StaticExternal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic inputs.
    Generate {
        #[arg(value_enum)]
        kind: GenerateKind,
        /// Directory for complexes and assays; pool file for pools.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train a distogram trunk with the staged curriculum.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict a distogram, optionally re-running on a pocket crop.
    Infer {
        #[arg(long)]
        complex: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Token budget of the pocket crop for the second pass.
        #[arg(long)]
        pocket_tokens: Option<usize>,
    },
    /// Budgeted pocket crop around the ligand.
    Crop {
        #[arg(long)]
        complex: PathBuf,
        /// Source of expected distances; reference coordinates when absent.
        #[arg(long)]
        distogram: Option<PathBuf>,
        #[arg(long, default_value_t = 196)]
        pocket_tokens: usize,
        /// Pocket cutoff in Å seeding the crop.
        #[arg(long, default_value_t = INITIAL_POCKET_CUTOFF)]
        cutoff: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarse pose from a distogram.
    Pose {
        #[arg(long)]
        distogram: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Score poses against reference structures.
    Metrics {
        /// JSON lines of {complex, distogram, pose, tokens?} paths, relative to the manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the affinity module on assay records.
    AffinityTrain {
        #[arg(long)]
        records: PathBuf,
        /// Directory of complex files named by complex id.
        #[arg(long)]
        complexes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train an epinet on the affinity module's residuals.
    EpinetTrain {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        complexes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        affinity: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw joint posterior sample paths.
    Sample {
        #[arg(long)]
        epinet: PathBuf,
        /// Pool file supplying latents and base predictions.
        #[arg(long, conflicts_with_all = ["complexes", "checkpoint", "affinity"])]
        pool: Option<PathBuf>,
        #[arg(long, requires_all = ["checkpoint", "affinity"])]
        complexes: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        affinity: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One batch from a posterior file.
    Select {
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long, value_enum, default_value_t = SelectStrategy::Emax)]
        strategy: SelectStrategy,
        #[arg(long, default_value_t = 5)]
        batch: usize,
        /// JSON lines of {id, y} readouts to condition on first.
        #[arg(long)]
        observed: Option<PathBuf>,
        #[arg(long, default_value_t = SIGMA_OBS)]
        sigma_obs: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated design-make-test-analyze cycles on a pool.
    Dmta {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        epinet: PathBuf,
        #[arg(long, value_enum, default_value_t = DmtaStrategy::All)]
        strategy: DmtaStrategy,
        /// JSON lines of {id, y} predictions for the static-external strategy.
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        sigma_obs: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate by H_LP bin (from metrics) or by IQR bin (from a posterior).
    Calibrate {
        #[arg(long, conflicts_with_all = ["posterior", "truths"])]
        metrics: Option<PathBuf>,
        #[arg(long, requires = "truths")]
        posterior: Option<PathBuf>,
        /// JSON lines of {id, y} measured affinities.
        #[arg(long)]
        truths: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage wall times over a set of complexes.
    Bench {
        #[arg(long)]
        complexes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        affinity: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed run: exit code and a structured message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    #[serde(skip)]
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(1, "config", message)
    }
}

/// Exit code for inputs (files or checkpoints) that do not exist.
pub const EXIT_MISSING: u8 = 2;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InvalidInput(_) => "invalid_input",
            Error::Parse { .. } => "parse",
            Error::Numeric { .. } => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                return Failure::new(EXIT_MISSING, "missing_input", e.to_string())
            }
            Error::Io(_) => "io",
        };
        Failure::new(1, kind, e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return u8::try_from(e.exit_code()).unwrap_or(2);
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", json!({ "error": f }));
            f.code
        }
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let seed = cli.seed.unwrap_or(0);
    let overrides = match &cli.config {
        Some(p) => Some(serde_json::from_slice::<Value>(&read(p, "config file")?).map_err(|e| Failure::config(e.to_string()))?),
        None => None,
    };
    let ctx = Ctx { seed, overrides };
    match &cli.command {
        Command::Generate { kind, out, count } => generate(&ctx, *kind, out, *count),
        Command::Train { out, steps } => cmd_train(&ctx, out, *steps),
        Command::Infer {
            complex,
            checkpoint,
            out,
            pocket_tokens,
        } => cmd_infer(&ctx, complex, checkpoint, out, *pocket_tokens),
        Command::Crop {
            complex,
            distogram,
            pocket_tokens,
            cutoff,
            out,
        } => cmd_crop(&ctx, complex, distogram.as_deref(), *pocket_tokens, *cutoff, out),
        Command::Pose { distogram, out, samples } => cmd_pose(&ctx, distogram, out, *samples),
        Command::Metrics { manifest, out } => cmd_metrics(&ctx, manifest, out),
        Command::AffinityTrain {
            records,
            complexes,
            checkpoint,
            out,
            steps,
        } => cmd_affinity_train(&ctx, records, complexes, checkpoint, out, *steps),
        Command::EpinetTrain {
            records,
            complexes,
            checkpoint,
            affinity,
            out,
            steps,
        } => cmd_epinet_train(&ctx, records, complexes, checkpoint, affinity, out, *steps),
        Command::Sample {
            epinet,
            pool,
            complexes,
            checkpoint,
            affinity,
            samples,
            out,
        } => cmd_sample(&ctx, epinet, pool.as_deref(), complexes.as_deref(), checkpoint.as_deref(), affinity.as_deref(), *samples, out),
        Command::Select {
            posterior,
            strategy,
            batch,
            observed,
            sigma_obs,
            out,
        } => cmd_select(&ctx, posterior, *strategy, *batch, observed.as_deref(), *sigma_obs, out),
        Command::Dmta {
            pool,
            epinet,
            strategy,
            external,
            cycles,
            batch,
            sigma_obs,
            samples,
            out,
        } => cmd_dmta(
            &ctx,
            pool,
            epinet,
            *strategy,
            external.as_deref(),
            DmtaOverrides {
                cycles: *cycles,
                batch: *batch,
                sigma_obs: *sigma_obs,
            },
            *samples,
            out,
        ),
        Command::Calibrate {
            metrics,
            posterior,
            truths,
            bins,
            out,
        } => cmd_calibrate(&ctx, metrics.as_deref(), posterior.as_deref(), truths.as_deref(), *bins, out),
        Command::Bench {
            complexes,
            checkpoint,
            affinity,
            samples,
            out,
        } => cmd_bench(&ctx, complexes, checkpoint, affinity.as_deref(), *samples, out),
    }
}

struct Ctx {
    seed: u64,
    overrides: Option<Value>,
}

impl Ctx {
    /// The command's defaults with the config file merged over them.
    fn settings<T: Serialize + DeserializeOwned>(&self, defaults: T) -> Outcome<T> {
        let Some(over) = &self.overrides else {
            return Ok(defaults);
        };
        let mut base = serde_json::to_value(defaults).map_err(|e| Failure::config(e.to_string()))?;
        merge(&mut base, over, "")?;
        serde_json::from_value(base).map_err(|e| Failure::config(e.to_string()))
    }

    fn meta(&self, out: &Path, command: &str, settings: &impl Serialize, inputs: &[&Path]) -> Outcome {
        let settings = serde_json::to_value(settings).map_err(|e| Failure::config(e.to_string()))?;
        let inputs: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
        let hashed = json!({ "command": command, "seed": self.seed, "settings": settings, "inputs": inputs });
        let digest = Sha256::digest(serde_json::to_vec(&hashed).expect("JSON values serialize"));
        let hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let record = json!({
            "command": command,
            "seed": self.seed,
            "config_hash": hash,
            "settings": settings,
            "inputs": inputs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let mut bytes = serde_json::to_vec_pretty(&record).expect("JSON values serialize");
        bytes.push(b'\n');
        write(&sibling(out, "meta.json"), &bytes)
    }
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Outcome {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Failure::config(format!("unknown config key {key}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// `<path>.<suffix>`, next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn read(path: &Path, what: &str) -> Outcome<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::new(EXIT_MISSING, "missing_input", format!("{what} not found: {}", path.display()))
        } else {
            Failure::new(1, "io", format!("cannot read {what} {}: {e}", path.display()))
        }
    })
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::new(1, "io", format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::new(1, "io", format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::new(1, "io", e.to_string()))?;
    bytes.push(b'\n');
    write(path, &bytes)
}

fn parse_json<T: DeserializeOwned>(bytes: &[u8], what: &str) -> Outcome<T> {
    serde_json::from_slice(bytes).map_err(|e| {
        let f: Failure = Error::from_json(&e, bytes).into();
        Failure::new(f.code, f.kind, format!("{what}: {}", f.message))
    })
}

fn load_complex(path: &Path) -> Outcome<TokenizedComplex> {
    Ok(decode_complex(&read(path, "complex")?)?)
}

fn load_distogram(path: &Path) -> Outcome<Distogram> {
    Ok(decode_distogram(&read(path, "distogram")?)?)
}

fn load_trunk(path: &Path) -> Outcome<Pairformer> {
    Ok(Pairformer::from_checkpoint(&read(path, "checkpoint")?)?)
}

fn load_affinity(path: &Path) -> Outcome<AffinityModel> {
    Ok(AffinityModel::from_checkpoint(&read(path, "affinity checkpoint")?)?)
}

fn load_epinet(path: &Path) -> Outcome<Epinet> {
    Ok(Epinet::from_checkpoint(&read(path, "epinet checkpoint")?)?)
}

fn load_pool(path: &Path) -> Outcome<SelectionPool> {
    Ok(decode_pool(&read(path, "pool")?)?)
}

fn load_posterior(path: &Path) -> Outcome<EpinetPosterior> {
    Ok(decode_posterior(&read(path, "posterior")?)?)
}

/// Every `*.json` complex in `dir`, keyed by complex id.
fn load_complex_dir(dir: &Path) -> Outcome<BTreeMap<String, TokenizedComplex>> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        let code = if e.kind() == std::io::ErrorKind::NotFound { EXIT_MISSING } else { 1 };
        Failure::new(code, "missing_input", format!("complex directory {}: {e}", dir.display()))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let c = load_complex(&p)?;
        if out.insert(c.id.clone(), c).is_some() {
            return Err(Failure::new(1, "invalid_input", format!("duplicate complex id in {}", dir.display())));
        }
    }
    Ok(out)
}

/// `{id, y}` records, as used for readouts, truths and external predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdValue {
    pub id: String,
    pub y: f64,
}

fn load_id_values(path: &Path, what: &str) -> Outcome<BTreeMap<String, f64>> {
    let rows: Vec<IdValue> = crate::codec::decode_jsonl(&read(path, what)?, |r: &IdValue| {
        if r.y.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{}: value must be finite", r.id)))
        }
    })?;
    let mut out = BTreeMap::new();
    for r in rows {
        if out.insert(r.id.clone(), r.y).is_some() {
            return Err(Failure::new(1, "invalid_input", format!("{what}: duplicate id {}", r.id)));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolSettings {
    pool: CliffPoolConfig,
    epinet: EpinetConfig,
}

fn generate(ctx: &Ctx, kind: GenerateKind, out: &Path, count: usize) -> Outcome {
    match kind {
        GenerateKind::Complexes => {
            let base = ctx.settings(SyntheticGenConfig::default())?;
            base.validate()?;
            for i in 0..count {
                let mut c = generate_synthetic_complex(&SyntheticGenConfig {
                    seed: rng::indexed(ctx.seed, i as u64),
                    ..base.clone()
                });
                c.id = format!("complex-{i:04}");
                write(&out.join(format!("{}.json", c.id)), &encode_complex(&c)?)?;
            }
            ctx.meta(out, "generate complexes", &json!({ "generator": base, "count": count }), &[])
        }
        GenerateKind::Assays => {
            // Same token width as the default trunk.
            let cfg = ctx.settings(AssayGenConfig {
                embedding_dim: SyntheticGenConfig::default().embedding_dim,
                ..Default::default()
            })?;
            let cfg = AssayGenConfig { seed: ctx.seed, ..cfg };
            let data = generate_assays(&cfg)?;
            for c in &data.complexes {
                write(&out.join("complexes").join(format!("{}.json", c.id)), &encode_complex(c)?)?;
            }
            write(&out.join("records.jsonl"), &encode_records(&data.records)?)?;
            ctx.meta(out, "generate assays", &cfg, &[])
        }
        GenerateKind::Pool => {
            let s = ctx.settings(PoolSettings {
                pool: CliffPoolConfig::default(),
                epinet: EpinetConfig {
                    latent_dim: 8,
                    ..Default::default()
                },
            })?;
            let model = Epinet::new(EpinetConfig { seed: ctx.seed, ..s.epinet.clone() })?;
            let pool = generate_cliff_pool(&CliffPoolConfig { seed: ctx.seed, ..s.pool }, &model)?;
            write(out, &encode_pool(&pool)?)?;
            write(&sibling(out, "epinet"), &model.to_checkpoint(json!({ "role": "pool model" }))?)?;
            ctx.meta(out, "generate pool", &s, &[])
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSettings {
    model: PairformerConfig,
    family: ComplexFamily,
    total_steps: usize,
    crop_tokens: usize,
    learning_rate: f64,
    heldout: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            model: PairformerConfig {
                channels: 16,
                n_layers: 2,
                ..Default::default()
            },
            family: ComplexFamily::default(),
            total_steps: 300,
            crop_tokens: 24,
            learning_rate: 3e-3,
            heldout: 16,
        }
    }
}

fn cmd_train(ctx: &Ctx, out: &Path, steps: Option<usize>) -> Outcome {
    let mut s = ctx.settings(TrainSettings::default())?;
    if let Some(n) = steps {
        s.total_steps = n;
    }
    s.model.seed = ctx.seed;
    if s.model.embedding_dim != s.family.embedding_dim {
        return Err(Failure::config("model.embedding_dim must equal family.embedding_dim"));
    }
    let cfg = TrainConfig {
        stages: desk_curriculum(s.total_steps, s.crop_tokens, s.learning_rate),
        family: s.family.clone(),
        seed: ctx.seed,
        heldout: s.heldout,
        heldout_crop: s.crop_tokens,
    };
    let (model, log) = train(Pairformer::new(s.model)?, &cfg)?;
    write(out, &model.to_checkpoint(json!({ "total_steps": s.total_steps }))?)?;
    write_json(&sibling(out, "log.json"), &log)?;
    ctx.meta(out, "train", &s, &[])
}

/// Distogram token `k` is token `tokens[k]` of the input complex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenMap {
    pub tokens: Vec<usize>,
    pub crop: Option<PocketCrop>,
}

fn cmd_infer(ctx: &Ctx, complex: &Path, checkpoint: &Path, out: &Path, pocket_tokens: Option<usize>) -> Outcome {
    let trunk = load_trunk(checkpoint)?;
    let c = load_complex(complex)?;
    if c.embedding_dim() != trunk.config.embedding_dim {
        return Err(Failure::config(format!(
            "complex embeddings have width {}, checkpoint expects {}",
            c.embedding_dim(),
            trunk.config.embedding_dim
        )));
    }
    let inf = infer(&c, &trunk, pocket_tokens)?;
    write(out, &encode_distogram(&inf.distogram)?)?;
    write_json(&sibling(out, "tokens.json"), &TokenMap { tokens: inf.tokens, crop: inf.crop })?;
    ctx.meta(out, "infer", &json!({ "pocket_tokens": pocket_tokens }), &[complex, checkpoint])
}

fn cmd_crop(ctx: &Ctx, complex: &Path, distogram: Option<&Path>, budget: usize, cutoff: f64, out: &Path) -> Outcome {
    let c = load_complex(complex)?;
    let expected = match distogram {
        Some(p) => {
            let d = load_distogram(p)?;
            if d.n_tokens() != c.len() {
                return Err(Failure::new(1, "invalid_input", "distogram and complex differ in token count"));
            }
            d.expected_distances()
        }
        None => c.true_distances()?,
    };
    let pocket = pocket_residues(&expected, &c.kinds(), cutoff)?;
    let result = crop(&c, budget, &pocket, &expected)?;
    write_json(out, &result)?;
    let mut inputs = vec![complex];
    inputs.extend(distogram);
    ctx.meta(out, "crop", &json!({ "pocket_tokens": budget, "cutoff": cutoff }), &inputs)
}

fn cmd_pose(ctx: &Ctx, distogram: &Path, out: &Path, samples: usize) -> Outcome {
    let mut cfg = ctx.settings(OptConfig::default())?;
    cfg.seed = ctx.seed;
    cfg.n_samples = samples;
    let d = load_distogram(distogram)?;
    let pose = predict_pose(&d, &cfg)?;
    write_json(out, &pose)?;
    ctx.meta(out, "pose", &cfg, &[distogram])
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    complex: PathBuf,
    distogram: PathBuf,
    pose: PathBuf,
    #[serde(default)]
    tokens: Option<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn cmd_metrics(ctx: &Ctx, manifest: &Path, out: &Path) -> Outcome {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let entries: Vec<ManifestEntry> = crate::codec::decode_jsonl(&read(manifest, "manifest")?, |_| Ok(()))?;
    let mut rows: Vec<PoseEvaluation> = Vec::with_capacity(entries.len());
    for e in &entries {
        let c = load_complex(&base.join(&e.complex))?;
        let d = load_distogram(&base.join(&e.distogram))?;
        let pose: PoseFile = parse_json(&read(&base.join(&e.pose), "pose file")?, "pose file")?;
        let tokens = match &e.tokens {
            Some(p) => parse_json::<TokenMap>(&read(&base.join(p), "token map")?, "token map")?.tokens,
            None => (0..d.n_tokens()).collect(),
        };
        rows.push(evaluate_pose(&c, &tokens, &d, &pose)?);
    }
    if rows.is_empty() {
        return Err(Failure::new(1, "invalid_input", "manifest lists no poses"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::new(1, "io", e.to_string());
    w.write_record(["id", "rmsd", "rmsd_symcorr", "lddt_pli", "H_LL", "H_LP", "H_PP"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.rmsd),
            format!("{:.6}", r.rmsd_symcorr),
            opt(r.lddt_pli),
            opt(r.h_ll),
            opt(r.h_lp),
            opt(r.h_pp),
        ])
        .map_err(csv_err)?;
    }
    write(out, &w.into_inner().map_err(|e| Failure::new(1, "io", e.to_string()))?)?;

    let results: Vec<PoseResult> = rows
        .iter()
        .map(|r| PoseResult {
            rmsd: r.rmsd_symcorr,
            lddt_pli: r.lddt_pli,
        })
        .collect();
    let scored: Vec<&PoseEvaluation> = rows.iter().filter(|r| r.h_lp.is_some()).collect();
    let calibration = if scored.is_empty() {
        None
    } else {
        let h: Vec<f64> = scored.iter().map(|r| r.h_lp.expect("filtered")).collect();
        let ok: Vec<bool> = scored.iter().map(|r| r.rmsd_symcorr < 2.0).collect();
        Some(entropy_calibration(&h, &ok, &ENTROPY_EDGES)?)
    };
    let summary = json!({
        "n": rows.len(),
        "success": success_rates(&results)?,
        "symmetry_fallbacks": rows.iter().filter(|r| r.symmetry_fallback).count(),
        "entropy_calibration": calibration,
    });
    write_json(&sibling(out, "summary.json"), &summary)?;
    ctx.meta(out, "metrics", &json!({}), &[manifest])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AffinitySettings {
    model: AffinityConfig,
    train: AffinityTrainConfig,
    /// Drop potent records whose predicted structure is uncertain.
    prefilter: bool,
    /// Regression offset; the mean quantitative label when absent.
    target_center: Option<f64>,
}

fn trunk_inputs(
    complexes: &BTreeMap<String, TokenizedComplex>,
    trunk: &Pairformer,
) -> Outcome<BTreeMap<String, AffinityInputs>> {
    complexes
        .iter()
        .map(|(id, c)| Ok((id.clone(), AffinityInputs::from_trunk(c, trunk)?)))
        .collect()
}

fn cmd_affinity_train(
    ctx: &Ctx,
    records: &Path,
    complexes: &Path,
    checkpoint: &Path,
    out: &Path,
    steps: Option<usize>,
) -> Outcome {
    let mut s = ctx.settings(AffinitySettings {
        model: AffinityConfig::default(),
        train: AffinityTrainConfig::default(),
        prefilter: true,
        target_center: None,
    })?;
    if let Some(n) = steps {
        s.train.steps = n;
    }
    let trunk = load_trunk(checkpoint)?;
    let mut recs = decode_records(&read(records, "records")?)?;
    let complexes_map = load_complex_dir(complexes)?;
    let mut missing_entropy = Vec::new();
    let mut removed = 0;
    if s.prefilter {
        annotate_entropy(&mut recs, &complexes_map, &trunk)?;
        let p = prefilter(&recs);
        missing_entropy = p.missing_entropy.clone();
        removed = p.removed;
        recs = p.kept;
    }
    let quant: Vec<f64> = recs.iter().filter(|r| r.label_kind == LabelKind::Continuous).map(|r| r.value).collect();
    let center = s
        .target_center
        .unwrap_or_else(|| if quant.is_empty() { 0.0 } else { quant.iter().sum::<f64>() / quant.len() as f64 });
    let model_cfg = AffinityConfig {
        latent_dim: trunk.config.channels,
        embedding_dim: trunk.config.embedding_dim,
        target_center: center,
        seed: ctx.seed,
        ..s.model
    };
    let inputs = trunk_inputs(&complexes_map, &trunk)?;
    let train_cfg = AffinityTrainConfig { seed: ctx.seed, ..s.train };
    let (model, log) = train_affinity(AffinityModel::new(model_cfg)?, &recs, &inputs, &train_cfg)?;
    write(out, &model.to_checkpoint(json!({ "records": recs.len() }))?)?;
    write_json(
        &sibling(out, "log.json"),
        &json!({ "losses": log.losses, "missing_entropy": missing_entropy, "removed": removed }),
    )?;
    s.target_center = Some(center);
    ctx.meta(out, "affinity-train", &s, &[records, complexes, checkpoint])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpinetSettings {
    model: EpinetConfig,
    train: EpinetTrainConfig,
}

/// Pooled latents and base predictions of the listed complexes.
fn latents(
    ids: &[String],
    complexes: &BTreeMap<String, TokenizedComplex>,
    trunk: &Pairformer,
    affinity: &AffinityModel,
) -> Outcome<(Array2<f64>, Vec<f64>)> {
    let width = affinity.config.channels;
    let mut g = Array2::zeros((ids.len(), width));
    let mut base = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let c = complexes
            .get(id)
            .ok_or_else(|| Failure::new(1, "invalid_input", format!("unknown complex {id}")))?;
        let o = affinity.forward(&AffinityInputs::from_trunk(c, trunk)?)?;
        for (k, v) in o.g.iter().enumerate() {
            g[[i, k]] = *v;
        }
        base.push(o.y_hat);
    }
    Ok((g, base))
}

fn cmd_epinet_train(
    ctx: &Ctx,
    records: &Path,
    complexes: &Path,
    checkpoint: &Path,
    affinity: &Path,
    out: &Path,
    steps: Option<usize>,
) -> Outcome {
    let mut s = ctx.settings(EpinetSettings {
        model: EpinetConfig::default(),
        train: EpinetTrainConfig::default(),
    })?;
    if let Some(n) = steps {
        s.train.steps = n;
    }
    let trunk = load_trunk(checkpoint)?;
    let aff = load_affinity(affinity)?;
    let complexes_map = load_complex_dir(complexes)?;
    let recs: Vec<_> = decode_records(&read(records, "records")?)?
        .into_iter()
        .filter(|r| r.label_kind == LabelKind::Continuous)
        .collect();
    let ids: Vec<String> = recs.iter().map(|r| r.complex_id.clone()).collect();
    let (g, base) = latents(&ids, &complexes_map, &trunk, &aff)?;
    let data: Vec<EpinetExample> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| EpinetExample {
            assay_id: r.assay_id.clone(),
            g: g.row(i).to_vec(),
            y_base: base[i],
            y: r.value,
        })
        .collect();
    let model = Epinet::new(EpinetConfig {
        latent_dim: aff.config.channels,
        seed: ctx.seed,
        ..s.model.clone()
    })?;
    let (model, losses) = train_epinet(model, &data, &EpinetTrainConfig { seed: ctx.seed, ..s.train })?;
    write(out, &model.to_checkpoint(json!({ "examples": data.len() }))?)?;
    write_json(&sibling(out, "log.json"), &json!({ "losses": losses }))?;
    ctx.meta(out, "epinet-train", &s, &[records, complexes, checkpoint, affinity])
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    ctx: &Ctx,
    epinet: &Path,
    pool: Option<&Path>,
    complexes: Option<&Path>,
    checkpoint: Option<&Path>,
    affinity: Option<&Path>,
    k: usize,
    out: &Path,
) -> Outcome {
    let model = load_epinet(epinet)?;
    let p = match (pool, complexes, checkpoint, affinity) {
        (Some(pool), ..) => load_pool(pool)?.posterior(&model, k, ctx.seed)?,
        (None, Some(dir), Some(ck), Some(aff)) => {
            let map = load_complex_dir(dir)?;
            let ids: Vec<String> = map.keys().cloned().collect();
            let (g, base) = latents(&ids, &map, &load_trunk(ck)?, &load_affinity(aff)?)?;
            sample_posterior(&model, &ids, g.view(), &base, k, ctx.seed)?
        }
        _ => return Err(Failure::config("sample needs --pool, or --complexes with --checkpoint and --affinity")),
    };
    write(out, &encode_posterior(&p)?)?;
    let inputs: Vec<&Path> = [Some(epinet), pool, complexes, checkpoint, affinity].into_iter().flatten().collect();
    ctx.meta(out, "sample", &json!({ "samples": k }), &inputs)
}

/// Column indices of `ids` in the posterior.
fn columns_of(p: &EpinetPosterior, values: &BTreeMap<String, f64>, what: &str) -> Outcome<Vec<(usize, f64)>> {
    let index: BTreeMap<&str, usize> = p.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    values
        .iter()
        .map(|(id, y)| {
            index
                .get(id.as_str())
                .map(|&c| (c, *y))
                .ok_or_else(|| Failure::new(1, "invalid_input", format!("{what}: {id} is not in the posterior")))
        })
        .collect()
}

fn cmd_select(
    ctx: &Ctx,
    posterior: &Path,
    strategy: SelectStrategy,
    batch: usize,
    observed: Option<&Path>,
    sigma_obs: f64,
    out: &Path,
) -> Outcome {
    let mut p = load_posterior(posterior)?;
    let mut excluded = Vec::new();
    if let Some(path) = observed {
        let obs = columns_of(&p, &load_id_values(path, "observations")?, "observations")?;
        p = pathwise_update(&p, &obs, sigma_obs, ObservationNoise::Sampled(rng::substream(ctx.seed, "select")))?;
        excluded = obs.iter().map(|o| o.0).collect();
    }
    let candidates: Vec<usize> = (0..p.n_items()).filter(|c| !excluded.contains(c)).collect();
    let q = p.columns(&candidates);
    let sel = match strategy {
        SelectStrategy::Emax => emax_select(&q, batch)?,
        SelectStrategy::Greedy => {
            let means: Vec<f64> = (0..q.n_items()).map(|c| marginal_stats(&q, c).map(|s| s.mean)).collect::<Result<_, _>>()?;
            greedy_select(&q.ids, &means, batch)?
        }
    };
    let ids: Vec<&String> = sel.indices.iter().map(|&i| &q.ids[i]).collect();
    write_json(out, &json!({ "strategy": format!("{strategy:?}").to_lowercase(), "selected": ids, "short": sel.short }))?;
    let mut inputs = vec![posterior];
    inputs.extend(observed);
    ctx.meta(out, "select", &json!({ "batch": batch, "sigma_obs": sigma_obs }), &inputs)
}

struct DmtaOverrides {
    cycles: Option<usize>,
    batch: Option<usize>,
    sigma_obs: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_dmta(
    ctx: &Ctx,
    pool: &Path,
    epinet: &Path,
    strategy: DmtaStrategy,
    external: Option<&Path>,
    o: DmtaOverrides,
    k: usize,
    out: &Path,
) -> Outcome {
    let mut cfg = ctx.settings(DmtaConfig::default())?;
    cfg.seed = ctx.seed;
    cfg.cycles = o.cycles.unwrap_or(cfg.cycles);
    cfg.batch_size = o.batch.unwrap_or(cfg.batch_size);
    cfg.sigma_obs = o.sigma_obs.unwrap_or(cfg.sigma_obs);
    let pool_data = load_pool(pool)?;
    let model = load_epinet(epinet)?;
    let external_preds = match external {
        Some(p) => {
            let v = load_id_values(p, "external predictions")?;
            let preds: Outcome<Vec<f64>> = pool_data
                .items()
                .iter()
                .map(|it| {
                    v.get(&it.id)
                        .copied()
                        .ok_or_else(|| Failure::new(1, "invalid_input", format!("no external prediction for {}", it.id)))
                })
                .collect();
            Some(preds?)
        }
        None => None,
    };
    let mut strategies = match strategy {
        DmtaStrategy::All => vec![Strategy::Greedy, Strategy::ContinualGreedy, Strategy::ContinualEmax],
        DmtaStrategy::Greedy => vec![Strategy::Greedy],
        DmtaStrategy::ContinualGreedy => vec![Strategy::ContinualGreedy],
        DmtaStrategy::ContinualEmax => vec![Strategy::ContinualEmax],
        DmtaStrategy::StaticExternal => vec![],
    };
    match (strategy, external_preds) {
        (DmtaStrategy::StaticExternal | DmtaStrategy::All, Some(v)) => strategies.push(Strategy::StaticExternal(v)),
        (DmtaStrategy::StaticExternal, None) => return Err(Failure::config("static-external needs --external")),
        _ => {}
    }
    let prior = pool_data.posterior(&model, k, ctx.seed)?;
    let runs = strategies
        .iter()
        .map(|s| dmta_simulate(&pool_data, &prior, s, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    write(out, &dmta_csv(&runs)?)?;
    let mut inputs = vec![pool, epinet];
    inputs.extend(external);
    ctx.meta(out, "dmta", &json!({ "dmta": cfg, "samples": k }), &inputs)
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    #[allow(dead_code)]
    id: String,
    #[allow(dead_code)]
    rmsd: f64,
    rmsd_symcorr: f64,
    #[serde(rename = "H_LP")]
    h_lp: Option<f64>,
}

fn cmd_calibrate(
    ctx: &Ctx,
    metrics: Option<&Path>,
    posterior: Option<&Path>,
    truths: Option<&Path>,
    bins: usize,
    out: &Path,
) -> Outcome {
    match (metrics, posterior, truths) {
        (Some(m), None, None) => {
            let bytes = read(m, "metrics table")?;
            let mut r = csv::ReaderBuilder::new().flexible(false).from_reader(bytes.as_slice());
            let mut h = Vec::new();
            let mut ok = Vec::new();
            for row in r.deserialize::<MetricsRow>() {
                let row = row.map_err(|e| Failure::new(1, "parse", format!("metrics table: {e}")))?;
                if let Some(v) = row.h_lp {
                    h.push(v);
                    ok.push(row.rmsd_symcorr < 2.0);
                }
            }
            let report = entropy_calibration(&h, &ok, &ENTROPY_EDGES)?;
            write_json(out, &json!({ "kind": "entropy", "report": report }))?;
            ctx.meta(out, "calibrate", &json!({ "kind": "entropy" }), &[m])
        }
        (None, Some(p), Some(t)) => {
            let post = load_posterior(p)?;
            let truth = load_id_values(t, "truths")?;
            let mut preds = Vec::new();
            let mut ys = Vec::new();
            let mut iqrs = Vec::new();
            for (c, id) in post.ids.iter().enumerate() {
                if let Some(&y) = truth.get(id) {
                    let s = marginal_stats(&post, c)?;
                    let iqr = s
                        .iqr
                        .ok_or_else(|| Failure::new(1, "invalid_input", "IQR needs at least 4 sample paths"))?;
                    preds.push(s.mean);
                    ys.push(y);
                    iqrs.push(iqr);
                }
            }
            let report = iqr_calibration(&preds, &ys, &iqrs, &quantile_edges(&iqrs, bins)?)?;
            write_json(out, &json!({ "kind": "iqr", "report": report }))?;
            ctx.meta(out, "calibrate", &json!({ "kind": "iqr", "bins": bins }), &[p, t])
        }
        _ => Err(Failure::config("calibrate needs --metrics, or --posterior with --truths")),
    }
}

fn cmd_bench(ctx: &Ctx, complexes: &Path, checkpoint: &Path, affinity: Option<&Path>, samples: usize, out: &Path) -> Outcome {
    let trunk = load_trunk(checkpoint)?;
    let aff = affinity.map(load_affinity).transpose()?;
    let map = load_complex_dir(complexes)?;
    let cfg = OptConfig {
        n_samples: samples,
        seed: ctx.seed,
        ..Default::default()
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::new(1, "io", e.to_string());
    w.write_record(["id", "n_tokens", "trunk_s", "pose_s", "affinity_s"]).map_err(csv_err)?;
    for (id, c) in &map {
        let t0 = Instant::now();
        let (d, pair) = trunk.predict_with_pair(c)?;
        let trunk_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        predict_pose(&d, &cfg)?;
        let pose_s = t1.elapsed().as_secs_f64();
        let affinity_s = match &aff {
            Some(m) => {
                let t2 = Instant::now();
                m.forward(&AffinityInputs::from_trunk_output(c, &d, &pair, None)?)?;
                Some(t2.elapsed().as_secs_f64())
            }
            None => None,
        };
        w.write_record([
            id.clone(),
            c.len().to_string(),
            format!("{trunk_s:.6}"),
            format!("{pose_s:.6}"),
            opt(affinity_s),
        ])
        .map_err(csv_err)?;
    }
    write(out, &w.into_inner().map_err(|e| Failure::new(1, "io", e.to_string()))?)?;
    let mut inputs = vec![complexes, checkpoint];
    inputs.extend(affinity);
    ctx.meta(out, "bench", &json!({ "samples": samples }), &inputs)
}
