use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rayon::prelude::*;

use dpmld::audit::{
    attach_monte_carlo, audit_baseline, audit_mechanism, grid_pairs, worst_case_pair,
    AdjacentPair, McConfig,
};
use dpmld::data::{generate, load_external, write_dataset, Format, GeneratorConfig};
use dpmld::privacy::{eps_prime, BaselineConfig, PrivacyBudget};
use dpmld::random::{stream, Stream};
use dpmld::trainer::{train, Scheme, TrainConfig};

use crate::settings::{io_at, sig9, CliError, NumList, Result, Settings};
use crate::train::{element_wise, resolve_config, uniform, write_file, TrainFlags};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Jsonl => "jsonl",
            DataFormat::Csv => "csv",
        })
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// key=value file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples [default: 3000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Generator seed [default: $DPMLD_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standard deviation of the EEG background noise [default: 0.5]
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Amplitude of the class-1 EEG burst [default: 4.0]
    #[arg(long)]
    pub burst_gain: Option<f64>,
    /// EEG channels [default: 8]
    #[arg(long)]
    pub eeg_channels: Option<usize>,
    /// OM feature rows [default: 4]
    #[arg(long)]
    pub om_dims: Option<usize>,
    /// Timesteps per sample [default: 128]
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Probability of label 1 [default: 0.5]
    #[arg(long)]
    pub class_balance: Option<f64>,
    /// On-disk format [default: jsonl]
    #[arg(long)]
    pub format: Option<DataFormat>,
}

pub fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let d = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        n_samples: s.get("n", a.n, d.n_samples)?,
        eeg_channels: s.get("eeg_channels", a.eeg_channels, d.eeg_channels)?,
        om_dims: s.get("om_dims", a.om_dims, d.om_dims)?,
        timesteps: s.get("timesteps", a.timesteps, d.timesteps)?,
        class_balance: s.get("class_balance", a.class_balance, d.class_balance)?,
        noise_sd: s.get("noise_sd", a.noise_sd, d.noise_sd)?,
        burst_gain: s.get("burst_gain", a.burst_gain, d.burst_gain)?,
        seed: s.seed(a.seed)?,
    };
    let format = s.get("format", a.format, DataFormat::Jsonl)?;
    s.finish()?;
    let samples = generate::<f64>(&cfg)?;
    let format = match format {
        DataFormat::Jsonl => Format::Jsonl,
        DataFormat::Csv => Format::Csv,
    };
    let extra: Vec<(String, String)> = s
        .snapshot()
        .lines()
        .filter(|l| !l.starts_with("format="))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (format!("generator.{k}"), v.to_string()))
        .collect();
    write_dataset(&a.out, &samples, format, &extra)?;
    let ones = samples.iter().filter(|x| x.label == 1).count();
    println!(
        "wrote {} samples ({} class 0, {ones} class 1) to {}",
        samples.len(),
        samples.len() - ones,
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct AllocateArgs {
    /// Total privacy budget
    #[arg(long)]
    pub epsilon: f64,
    /// Drop rates, comma separated or start:stop:step
    #[arg(long, default_value = "0.5")]
    pub w: NumList,
}

pub fn cmd_allocate(a: AllocateArgs) -> Result<()> {
    let eps = PrivacyBudget::new(a.epsilon)?;
    println!("epsilon {}  exp(epsilon) {}", sig9(a.epsilon), sig9(a.epsilon.exp()));
    println!("{:>12} {:>14} {:>14} {:>14}", "w", "eps_prime", "b", "identity");
    for &w in &a.w.0 {
        let ep = eps_prime(w, eps)?;
        let identity = w + (1.0 - w) * ep.exp();
        println!(
            "{:>12} {:>14} {:>14} {:>14}",
            sig9(w),
            sig9(ep),
            sig9(1.0 / ep),
            sig9(identity)
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// key=value file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Budget the mechanism is calibrated for [default: 1.0]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Drop rates to audit [default: 0.1:0.9:0.1]
    #[arg(long)]
    pub w: Option<NumList>,
    /// "worst", "grid" or a file of f1,f2 lines [default: grid]
    #[arg(long)]
    pub pairs: Option<String>,
    /// Spacing of the pair grid on [0, 1] [default: 0.05]
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Accept pairs outside [0, 1]; they are reported without a verdict
    #[arg(long)]
    pub extended: bool,
    /// Audit the uniform scheme with this drop rate instead
    #[arg(long)]
    pub uniform_mu: Option<f64>,
    /// Monte Carlo draws per checked entry, 0 to skip [default: 0]
    #[arg(long)]
    pub mc_draws: Option<usize>,
    /// Histogram bins of the Monte Carlo check [default: 200]
    #[arg(long)]
    pub mc_bins: Option<usize>,
    /// Bootstrap replicates of the Monte Carlo check [default: 200]
    #[arg(long)]
    pub mc_bootstrap: Option<usize>,
    /// Monte Carlo seed [default: $DPMLD_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Judge the measurements against this budget instead of the calibrated one
    #[arg(long)]
    pub claim: Option<f64>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_pairs(path: &str, extended: bool) -> Result<Vec<AdjacentPair<f64>>> {
    let p = PathBuf::from(path);
    let text = fs::read_to_string(&p).map_err(io_at(&p))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| CliError::Data(format!("{path}:{}: {m}", n + 1));
        let (a, b) = line.split_once(',').ok_or_else(|| bad("expected f1,f2".into()))?;
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| bad(format!("{x:?}: {e}")));
        let (a, b) = (num(a)?, num(b)?);
        let pair = if extended {
            AdjacentPair::extended(a, b)
        } else {
            AdjacentPair::new(a, b)
        };
        out.push(pair.map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

pub fn cmd_audit(a: AuditArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let eps = s.get("epsilon", a.epsilon, 1.0)?;
    let w = s.get("w", a.w, "0.1:0.9:0.1".parse().expect("valid range"))?;
    let pairs_arg = s.get("pairs", a.pairs, "grid".to_string())?;
    let step = s.get("grid_step", a.grid_step, 0.05)?;
    let extended = s.switch("extended", a.extended)?;
    let mu = s.get_opt("uniform_mu", a.uniform_mu)?;
    let mc = McConfig::default();
    let mc = McConfig {
        draws: s.get("mc_draws", a.mc_draws, 0)?,
        bins: s.get("mc_bins", a.mc_bins, mc.bins)?,
        bootstrap: s.get("mc_bootstrap", a.mc_bootstrap, mc.bootstrap)?,
        seed: s.seed(a.seed)?,
    };
    let claim = s.get_opt("claim", a.claim)?;
    s.finish()?;

    let pairs = match pairs_arg.as_str() {
        "worst" => vec![worst_case_pair(), AdjacentPair::new(0.0, 1.0)?],
        "grid" => grid_pairs(step)?,
        path => read_pairs(path, extended)?,
    };
    let budget = PrivacyBudget::new(eps)?;
    let mut report = match mu {
        Some(mu) => audit_baseline(&BaselineConfig::matched(mu, budget)?, &pairs)?,
        None => audit_mechanism(budget, &w.0, &pairs)?,
    };
    if let Some(c) = claim {
        report = report.with_claim(c);
    }
    if mc.draws > 0 {
        // the largest analytic loss for each rate gets the sampling check
        let mut worst: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
        for (i, e) in report.entries.iter().enumerate() {
            if e.exceeds.is_none() {
                continue;
            }
            let slot = worst.entry(e.w.to_bits()).or_insert((i, f64::NEG_INFINITY));
            if e.measured > slot.1 {
                *slot = (i, e.measured);
            }
        }
        let picked: Vec<usize> = worst.values().map(|&(i, _)| i).collect();
        let mut i = 0;
        attach_monte_carlo(
            &mut report,
            &mc,
            |_| {
                let hit = picked.contains(&i);
                i += 1;
                hit
            },
            &mut stream(mc.seed, Stream::Audit),
        )?;
    }
    let text = report.to_text();
    match &a.out {
        Some(p) => {
            write_file(p, &text)?;
            let header = text.split("\n\n").next().unwrap_or_default();
            println!("{header}");
        }
        None => print!("{text}"),
    }
    match report.violations() {
        0 => Ok(()),
        n => Err(CliError::AuditViolation(format!(
            "{n} entries exceed the claimed budget {}",
            report.claimed
        ))),
    }
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// key=value file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset shared by all runs; without it each seed generates its own
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Samples generated per seed when no dataset is given [default: 3000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Budgets to compare [default: 0.01,0.1,1.0]
    #[arg(long)]
    pub epsilons: Option<NumList>,
    /// Drop rates swept by the uniform scheme [default: 0.1:0.9:0.1]
    #[arg(long)]
    pub mus: Option<NumList>,
    /// Number of seeds per configuration [default: 5]
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First seed [default: $DPMLD_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the uniform sweep
    #[arg(long)]
    pub no_uniform: bool,
    /// Also write the table to this CSV file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Clone, Copy, Debug)]
enum Job {
    ElementWise(f64),
    Uniform(f64, f64),
    NonPrivate,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub scheme: &'static str,
    pub epsilon: f64,
    pub mu: f64,
    pub acc: Vec<f64>,
    pub f1: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

pub fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let data = s.get_opt("data", a.data.as_ref().map(|p| p.display().to_string()))?;
    let n = s.get("n", a.n, GeneratorConfig::default().n_samples)?;
    let epsilons = s.get("epsilons", a.epsilons, "0.01,0.1,1.0".parse().expect("valid list"))?;
    let mus = s.get("mus", a.mus, "0.1:0.9:0.1".parse().expect("valid range"))?;
    let seeds = s.get("seeds", a.seeds, 5)?;
    let first = s.seed(a.seed)?;
    let no_uniform = s.switch("no_uniform", a.no_uniform)?;
    let base = resolve_config(&mut s, &a.flags)?;
    s.finish()?;
    if seeds == 0 {
        return Err(CliError::Config("at least one seed is needed".into()));
    }

    let shared = match &data {
        Some(p) => Some(load_external::<f64>(&PathBuf::from(p))?),
        None => None,
    };
    let mut jobs = vec![Job::NonPrivate];
    for &e in &epsilons.0 {
        PrivacyBudget::new(e)?;
        jobs.push(Job::ElementWise(e));
        if !no_uniform {
            for &m in &mus.0 {
                uniform(m, e)?;
                jobs.push(Job::Uniform(e, m));
            }
        }
    }
    let runs: Vec<(usize, u64)> = (0..jobs.len())
        .flat_map(|j| (0..seeds as u64).map(move |k| (j, first + k)))
        .collect();
    eprintln!("{} training runs", runs.len());
    let results: Vec<(f64, f64)> = runs
        .par_iter()
        .map(|&(j, seed)| -> Result<(f64, f64)> {
            let mut cfg: TrainConfig<f64> = base.clone();
            cfg.seed = seed;
            cfg.scheme = match jobs[j] {
                Job::ElementWise(e) => element_wise(e)?,
                Job::Uniform(e, m) => uniform(m, e)?,
                Job::NonPrivate => Scheme::NonPrivate,
            };
            let generated;
            let dataset = match &shared {
                Some(d) => d,
                None => {
                    generated = generate::<f64>(&GeneratorConfig {
                        n_samples: n,
                        seed,
                        ..Default::default()
                    })?;
                    &generated
                }
            };
            let out = train(dataset, cfg)?;
            Ok((
                out.best_test_acc().unwrap_or(f64::NAN),
                out.best_macro_f1().unwrap_or(f64::NAN),
            ))
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<Row> = jobs
        .iter()
        .map(|job| {
            let (scheme, epsilon, mu) = match *job {
                Job::ElementWise(e) => ("element-wise", e, f64::NAN),
                Job::Uniform(e, m) => ("uniform", e, m),
                Job::NonPrivate => ("non-private", f64::INFINITY, 0.0),
            };
            Row { scheme, epsilon, mu, acc: Vec::new(), f1: Vec::new() }
        })
        .collect();
    for (&(j, _), &(acc, f1)) in runs.iter().zip(&results) {
        rows[j].acc.push(acc);
        rows[j].f1.push(f1);
    }
    let table = summarize(rows);
    let csv = table_csv(&table);
    print!("{csv}");
    if let Some(p) = &a.out {
        write_file(p, &csv)?;
    }
    for line in soft_checks(&table) {
        println!("{line}");
    }
    Ok(())
}

/// Keeps the best uniform drop rate per budget and orders the rows.
fn summarize(rows: Vec<Row>) -> Vec<Row> {
    let mut out: Vec<Row> = Vec::new();
    for r in rows {
        if r.scheme == "uniform" {
            let m = mean_sd(&r.acc).0;
            if let Some(prev) =
                out.iter_mut().find(|p| p.scheme == "uniform" && p.epsilon == r.epsilon)
            {
                if m > mean_sd(&prev.acc).0 {
                    *prev = r;
                }
                continue;
            }
        }
        out.push(r);
    }
    out
}

fn table_csv(rows: &[Row]) -> String {
    let mut out = String::from("scheme,epsilon,mu,seeds,acc_mean,acc_sd,f1_mean,f1_sd\n");
    for r in rows {
        let (am, asd) = mean_sd(&r.acc);
        let (fm, fsd) = mean_sd(&r.f1);
        let mu = if r.mu.is_nan() { String::new() } else { r.mu.to_string() };
        let _ = writeln!(
            out,
            "{},{},{mu},{},{am:.6},{asd:.6},{fm:.6},{fsd:.6}",
            r.scheme,
            r.epsilon,
            r.acc.len()
        );
    }
    out
}

/// Orderings one expects to see; reported, never enforced.
fn soft_checks(rows: &[Row]) -> Vec<String> {
    let find = |scheme: &str, e: f64| rows.iter().find(|r| r.scheme == scheme && r.epsilon == e);
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.scheme == "element-wise") {
        if let Some(u) = find("uniform", r.epsilon) {
            let (m, sd) = mean_sd(&r.acc);
            let (um, usd) = mean_sd(&u.acc);
            let ok = m + sd.max(usd) >= um;
            out.push(format!(
                "check element-wise >= uniform at epsilon {}: {:.4} vs {:.4} {}",
                r.epsilon,
                m,
                um,
                if ok { "ok" } else { "below" }
            ));
        }
    }
    out
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directory written by `train`
    #[arg(long)]
    pub run: PathBuf,
}

pub fn cmd_report(a: ReportArgs) -> Result<()> {
    let path = a.run.join("allocation.csv");
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "feature,block,index,w,eps_prime,b,mean_abs_f" {
        return Err(CliError::Data(format!("{}: unexpected header", path.display())));
    }
    let mut blocks: Vec<(String, String, Vec<[f64; 3]>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |m: &str| CliError::Data(format!("{}:{}: {m}", path.display(), n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let num = |i: usize| cols[i].parse::<f64>().map_err(|_| bad("not a number"));
        let (w, b, f) = (num(3)?, num(5)?, num(6)?);
        let row = format!("{},{w},{b},{f}\n", cols[2]);
        match blocks.last_mut() {
            Some((name, csv, vals)) if name == cols[1] => {
                csv.push_str(&row);
                vals.push([w, b, f]);
            }
            _ => blocks.push((
                cols[1].to_string(),
                format!("index,w,b,mean_abs_f\n{row}"),
                vec![[w, b, f]],
            )),
        }
    }
    println!("{:<6} {:>9} {:>10} {:>12}", "block", "mean_w", "mean_b", "mean_abs_f");
    for (name, csv, vals) in &blocks {
        write_file(&a.run.join(format!("report_{name}.csv")), csv)?;
        let mean = |j: usize| vals.iter().map(|v| v[j]).sum::<f64>() / vals.len() as f64;
        println!("{name:<6} {:>9.4} {:>10.4} {:>12.4}", mean(0), mean(1), mean(2));
    }
    Ok(())
}
