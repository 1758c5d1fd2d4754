use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use dpmld::audit::{audit_baseline, audit_mechanism, grid_pairs, AdjacentPair};
use dpmld::data::{load_external, split};
use dpmld::gumbel::GumbelConfig;
use dpmld::model::ModelConfig;
use dpmld::privacy::{
    allocate_budget, BaselineConfig, NormalizationSpec, PrivacyBudget, RateBounds,
    DEFAULT_W_MAX, DEFAULT_W_MIN,
};
use dpmld::trainer::{
    allocation_report, BlockAllocation, EpochMetrics, Scheme, TrainConfig, Trainer, BLOCK_NAMES,
};

use crate::settings::{io_at, CliError, Result, Settings};

pub const METRICS_SCHEMA: &str = "dpmld-metrics/1";

/// Optimizer and schedule options shared by `train` and `benchmark`.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Training epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of the network weights [default: 0.01]
    #[arg(long)]
    pub lr_p: Option<f64>,
    /// Learning rate of the drop-rate logits [default: 0.001]
    #[arg(long)]
    pub lr_w: Option<f64>,
    /// Momentum of both optimizers [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Initial Gumbel-Softmax temperature [default: 1.0]
    #[arg(long)]
    pub tau_start: Option<f64>,
    /// Per-epoch temperature decay factor [default: 0.95]
    #[arg(long)]
    pub tau_decay: Option<f64>,
    /// Lowest temperature [default: 0.1]
    #[arg(long)]
    pub tau_floor: Option<f64>,
    /// Smallest allowed drop rate [default: 0.0001]
    #[arg(long)]
    pub w_min: Option<f64>,
    /// Largest allowed drop rate [default: 0.9999]
    #[arg(long)]
    pub w_max: Option<f64>,
    /// Drop rate every feature starts from [default: 0.5]
    #[arg(long)]
    pub init_rate: Option<f64>,
    /// Weight updates per mini-batch [default: 1]
    #[arg(long)]
    pub model_steps: Option<usize>,
    /// Rate updates per mini-batch [default: 1]
    #[arg(long)]
    pub rate_steps: Option<usize>,
    /// Fraction of samples used for training [default: 0.7]
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Tail mass trimmed from each feature range before normalizing [default: 0]
    #[arg(long)]
    pub norm_quantile: Option<f64>,
}

fn model_config(s: &mut Settings) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        // shape fields are taken from the data at training time
        eeg_channels: d.eeg_channels,
        timesteps: d.timesteps,
        om_dims: d.om_dims,
        vocab: s.get("vocab", None, d.vocab)?,
        window: s.get("window", None, d.window)?,
        d_model: s.get("d_model", None, d.d_model)?,
        d_k: s.get("d_k", None, d.d_k)?,
        d_ff: s.get("d_ff", None, d.d_ff)?,
        d_feat: s.get("d_feat", None, d.d_feat)?,
        eeg_layers: s.get("eeg_layers", None, d.eeg_layers)?,
        cross_layers: s.get("cross_layers", None, d.cross_layers)?,
        om_width: s.get("om_width", None, d.om_width)?,
        patch: s.get("patch", None, d.patch)?,
        om_hidden: s.get("om_hidden", None, d.om_hidden)?,
        classifier_hidden: s.get("classifier_hidden", None, d.classifier_hidden)?,
        classes: s.get("classes", None, d.classes)?,
    })
}

/// Resolves everything but the scheme and the seed.
pub fn resolve_config(s: &mut Settings, f: &TrainFlags) -> Result<TrainConfig<f64>> {
    let mut cfg = TrainConfig::new(Scheme::NonPrivate);
    cfg.epochs = s.get("epochs", f.epochs, cfg.epochs)?;
    cfg.batch_size = s.get("batch_size", f.batch_size, cfg.batch_size)?;
    cfg.lr_p = s.get("lr_p", f.lr_p, cfg.lr_p)?;
    cfg.lr_w = s.get("lr_w", f.lr_w, cfg.lr_w)?;
    cfg.momentum = s.get("momentum", f.momentum, cfg.momentum)?;
    let g = GumbelConfig::<f64>::default();
    cfg.gumbel = GumbelConfig {
        tau_start: s.get("tau_start", f.tau_start, g.tau_start)?,
        decay: s.get("tau_decay", f.tau_decay, g.decay)?,
        tau_floor: s.get("tau_floor", f.tau_floor, g.tau_floor)?,
    };
    let w_min = s.get("w_min", f.w_min, DEFAULT_W_MIN)?;
    let w_max = s.get("w_max", f.w_max, DEFAULT_W_MAX)?;
    cfg.rate_bounds = RateBounds::new(w_min, w_max)?;
    cfg.init_rate = s.get("init_rate", f.init_rate, cfg.init_rate)?;
    cfg.model_steps = s.get("model_steps", f.model_steps, cfg.model_steps)?;
    cfg.rate_steps = s.get("rate_steps", f.rate_steps, cfg.rate_steps)?;
    cfg.train_frac = s.get("train_frac", f.train_frac, cfg.train_frac)?;
    cfg.norm_quantile = s.get("norm_quantile", f.norm_quantile, cfg.norm_quantile)?;
    cfg.model = model_config(s)?;
    Ok(cfg)
}

pub fn element_wise(eps: f64) -> Result<Scheme<f64>> {
    Ok(Scheme::ElementWise {
        eps: PrivacyBudget::new(eps)?,
    })
}

pub fn uniform(mu: f64, eps: f64) -> Result<Scheme<f64>> {
    Ok(Scheme::Uniform {
        baseline: BaselineConfig::matched(mu, PrivacyBudget::new(eps)?)?,
    })
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file or directory (required here or in the config file)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory to create
    #[arg(long)]
    pub out: PathBuf,
    /// Total privacy budget of one release [default: 1.0]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seed for splitting, initialization and training [default: $DPMLD_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train without dropout or noise
    #[arg(long)]
    pub non_private: bool,
    /// Train the uniform scheme with this fixed drop rate
    #[arg(long)]
    pub uniform_mu: Option<f64>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    schema: &'a str,
    epoch: usize,
    train_acc: f64,
    test_acc: f64,
    train_loss: f64,
    test_loss: f64,
    macro_f1: f64,
    tau: f64,
    mean_w: [f64; 3],
    mean_b: [f64; 3],
}

fn metrics_line(m: &EpochMetrics) -> Result<String> {
    let rec = MetricsRecord {
        schema: METRICS_SCHEMA,
        epoch: m.epoch,
        train_acc: m.train_acc,
        test_acc: m.test_acc,
        train_loss: m.train_loss,
        test_loss: m.test_loss,
        macro_f1: m.macro_f1,
        tau: m.tau,
        mean_w: m.blocks.rate,
        mean_b: m.blocks.scale,
    };
    serde_json::to_string(&rec).map_err(|e| CliError::Other(e.into()))
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let data: PathBuf = s
        .get_opt("data", args.data.as_ref().map(|p| p.display().to_string()))?
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let eps = s.get("epsilon", args.epsilon, 1.0)?;
    let non_private = s.switch("non_private", args.non_private)?;
    let mu = s.get_opt("uniform_mu", args.uniform_mu)?;
    let seed = s.seed(args.seed)?;
    let mut cfg = resolve_config(&mut s, &args.flags)?;
    s.finish()?;
    cfg.seed = seed;
    cfg.scheme = match (non_private, mu) {
        (true, Some(_)) => {
            return Err(CliError::Config("non_private and uniform_mu exclude each other".into()))
        }
        (true, None) => Scheme::NonPrivate,
        (false, Some(mu)) => uniform(mu, eps)?,
        (false, None) => element_wise(eps)?,
    };
    cfg.validate()?;

    let dataset = load_external::<f64>(&data)?;
    let (train, test) = split(&dataset, cfg.train_frac, seed)?;
    let mut trainer = Trainer::new(cfg.clone(), &train, &test)?;

    let out = args.out.as_path();
    fs::create_dir_all(out).map_err(io_at(out))?;
    write_file(&out.join("config.txt"), &s.snapshot())?;
    let mpath = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&mpath).map_err(io_at(&mpath))?);
    let mut best = f64::NAN;
    for _ in 0..cfg.epochs {
        let m = trainer.run_epoch()?;
        writeln!(metrics, "{}", metrics_line(&m)?).map_err(io_at(&mpath))?;
        metrics.flush().map_err(io_at(&mpath))?;
        best = best.max(m.test_acc);
        println!(
            "epoch {:>3}  tau {:.3}  train_acc {:.4}  test_acc {:.4}  macro_f1 {:.4}  loss {:.4}",
            m.epoch, m.tau, m.train_acc, m.test_acc, m.macro_f1, m.train_loss
        );
    }
    drop(metrics);

    if trainer.bounds().is_none() {
        let raw = trainer.raw_features(trainer.train_set())?;
        let k = cfg.model.feature_len();
        let spec = NormalizationSpec::fit_quantiles(
            raw.chunks(k),
            cfg.norm_quantile,
            cfg.min_feature_width,
        )?;
        trainer.set_bounds(spec);
    }
    let features = trainer.features(trainer.train_set())?;
    let blocks = allocation(&trainer, &cfg.scheme, &features)?;
    write_file(&out.join("rates.csv"), &rates_csv(&trainer, &cfg.scheme)?)?;
    write_file(&out.join("allocation.csv"), &allocation_csv(&blocks, &cfg.scheme)?)?;
    write_file(&out.join("audit.txt"), &run_audit(&trainer, &cfg.scheme)?)?;

    for b in &blocks {
        println!(
            "block {:<3}  mean_w {:.4}  mean_b {:.4}  mean_abs_f {:.4}",
            b.name,
            b.mean_w(),
            b.mean_b(),
            b.mean_f()
        );
    }
    if cfg.epochs > 0 {
        println!("best test accuracy {best:.4}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_at(path))
}

fn scheme_rates(trainer: &Trainer<f64>, scheme: &Scheme<f64>) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let k = trainer.rates().len();
    Ok(match scheme {
        Scheme::ElementWise { eps } => {
            let budget = allocate_budget(trainer.rates(), *eps)?;
            (trainer.rates().rates(), budget.eps_prime, budget.scales)
        }
        Scheme::Uniform { baseline } => (
            vec![baseline.mu(); k],
            vec![baseline.eps_prime_uniform(); k],
            vec![baseline.scale(); k],
        ),
        Scheme::NonPrivate => (vec![0.0; k], vec![f64::INFINITY; k], vec![0.0; k]),
    })
}

fn allocation(
    trainer: &Trainer<f64>,
    scheme: &Scheme<f64>,
    features: &[f64],
) -> Result<Vec<BlockAllocation>> {
    let d = trainer.config().model.d_feat;
    if let Scheme::ElementWise { eps } = scheme {
        return Ok(allocation_report(trainer.rates(), *eps, features, d)?);
    }
    let (w, _, b) = scheme_rates(trainer, scheme)?;
    let k = w.len();
    let rows = (features.len() / k).max(1) as f64;
    let mut mean_abs = vec![0.0; k];
    for row in features.chunks(k) {
        for (m, v) in mean_abs.iter_mut().zip(row) {
            *m += v.abs() / rows;
        }
    }
    Ok(BLOCK_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| BlockAllocation {
            name,
            w: w[i * d..(i + 1) * d].to_vec(),
            b: b[i * d..(i + 1) * d].to_vec(),
            mean_abs_f: mean_abs[i * d..(i + 1) * d].to_vec(),
        })
        .collect())
}

fn rates_csv(trainer: &Trainer<f64>, scheme: &Scheme<f64>) -> Result<String> {
    let (w, ep, b) = scheme_rates(trainer, scheme)?;
    let d = trainer.config().model.d_feat;
    let mut out = String::from("feature,block,logit,w,eps_prime,b\n");
    for (i, logit) in trainer.rates().logits().iter().enumerate() {
        let logit = if matches!(scheme, Scheme::ElementWise { .. }) { *logit } else { f64::NAN };
        let _ = writeln!(out, "{i},{},{logit},{},{},{}", BLOCK_NAMES[i / d], w[i], ep[i], b[i]);
    }
    Ok(out)
}

fn allocation_csv(blocks: &[BlockAllocation], scheme: &Scheme<f64>) -> Result<String> {
    let mut out = String::from("feature,block,index,w,eps_prime,b,mean_abs_f\n");
    let mut feature = 0;
    for blk in blocks {
        for i in 0..blk.w.len() {
            let ep = match scheme {
                Scheme::NonPrivate => f64::INFINITY,
                _ => 1.0 / blk.b[i],
            };
            let _ = writeln!(
                out,
                "{feature},{},{i},{},{ep},{},{}",
                blk.name, blk.w[i], blk.b[i], blk.mean_abs_f[i]
            );
            feature += 1;
        }
    }
    Ok(out)
}

fn run_audit(trainer: &Trainer<f64>, scheme: &Scheme<f64>) -> Result<String> {
    match scheme {
        Scheme::ElementWise { eps } => {
            let mut rates = trainer.rates().rates();
            rates.sort_by(f64::total_cmp);
            rates.dedup();
            let pairs = [AdjacentPair::new(1.0, 0.0)?, AdjacentPair::new(0.0, 1.0)?];
            Ok(audit_mechanism(*eps, &rates, &pairs)?.to_text())
        }
        Scheme::Uniform { baseline } => Ok(audit_baseline(baseline, &grid_pairs(0.1)?)?.to_text()),
        Scheme::NonPrivate => Ok("format=dpmld-audit/1\nscheme=non-private\nclaimed_eps=inf\n\
             note=features are released unchanged; no finite budget holds\n"
            .into()),
    }
}
