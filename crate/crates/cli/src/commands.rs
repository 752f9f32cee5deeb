use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;

use rail_core::config::{hash_text, OfflineConfig};
use rail_core::datasets::{load_demoset_file, save_demoset_file, DemoSet, Tier};
use rail_core::envs::{read_reference_returns, reference_returns, write_reference_returns, EnvId, EnvSpec};
use rail_core::evaluation::{
    evaluate_policy, grid_search_kth, mean, normalized_score, plot_csv, summary_table, tier_ablation, AblationRow,
    ScoreNormalizer, SweepCell, SIGMAS, TIER_MIXES,
};
use rail_core::experiments::{supplementary_mix, train_seed};
use rail_core::offline::{
    load_artifacts, load_policy, missing_artifacts, run_offline_with, write_artifacts, write_ndjson, OfflineArtifacts,
    CONFIG_FILE, DISC_FILE, POLICY_FILE,
};
use rail_core::online::{run_online, AdaptMode, OnlineConfig, OnlineInputs};
use rail_core::parallel::{self, Parallelism};
use rail_core::verify;

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{Cli, Command, EXIT_VERIFY};

pub const REFERENCE_EPISODES: usize = 100;

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub env: String,
    /// One of expert, medium, medium_replay_like, random.
    #[arg(long, required_unless_present = "mix", conflicts_with = "mix")]
    pub tier: Option<String>,
    /// Standard supplementary mix: me, me+m, me+m+mr, me+m+mr+r.
    #[arg(long)]
    pub mix: Option<String>,
    /// Episodes for a single tier (mixes have fixed sizes).
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefReturns {
    /// Defaults to every environment.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = REFERENCE_EPISODES)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOffline {
    /// key=value config file; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunOnline {
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value = "on")]
    pub adapt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shift threshold on kappa.
    #[arg(long, default_value_t = 0.4)]
    pub kth: f64,
    /// Expert demonstrations; defaults to the training config's expert_path.
    #[arg(long)]
    pub expert: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// One directory per method; the directory name labels the method.
    #[arg(long, required = true, num_args = 1..)]
    pub artifacts: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = SIGMAS)]
    pub sweep: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub runs: u64,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value = "off")]
    pub adapt: String,
    #[arg(long, default_value_t = 0.4)]
    pub kth: f64,
    /// Reference-returns file; computed on the fly when absent.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridKth {
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub runs: u64,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long)]
    pub expert: Option<PathBuf>,
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TierAblation {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = TIER_MIXES.map(String::from))]
    pub mixes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = SIGMAS)]
    pub sweep: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub runs: u64,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Verify {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bookkeeping shared by every subcommand.
struct Run<'a> {
    name: &'static str,
    started: Instant,
    args: &'a [String],
    config_path: Option<PathBuf>,
    config_hash: String,
    seed: Option<u64>,
}

impl Run<'_> {
    fn finish(self, out_dir: &Path, manifest_path: &Path, artifacts: Vec<PathBuf>) -> Result<()> {
        RunManifest {
            subcommand: self.name.to_string(),
            config_path: self.config_path,
            config_hash: self.config_hash,
            seed: self.seed,
            out_dir: out_dir.to_path_buf(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            args: self.args.to_vec(),
            artifacts,
        }
        .write_atomic(manifest_path)
    }
}

pub fn run(cli: &Cli, mode: Parallelism, args: &[String]) -> Result<u8> {
    let run = |name, config_path: Option<PathBuf>, config_hash: String, seed| Run {
        name,
        started: Instant::now(),
        args,
        config_path,
        config_hash,
        seed,
    };
    // Commands without a config file hash their resolved arguments instead.
    let arg_hash = |cmd: &dyn std::fmt::Debug| hash_text(&format!("{cmd:?}"));
    let root = &cli.out_root;
    match &cli.command {
        Command::GenData(c) => gen_data(c, root, run("gen-data", None, arg_hash(c), Some(c.seed)), mode),
        Command::RefReturns(c) => ref_returns(c, root, run("ref-returns", None, arg_hash(c), Some(c.seed)), mode),
        Command::TrainOffline(c) => train_offline(c, root, mode, |cfg| {
            run("train-offline", c.config.clone(), cfg.hash(), Some(cfg.seed))
        }),
        Command::RunOnline(c) => run_online_cmd(c, run("run-online", None, arg_hash(c), Some(c.seed))),
        Command::Evaluate(c) => evaluate(c, root, run("evaluate", None, arg_hash(c), None), mode),
        Command::GridKth(c) => grid_kth(c, run("grid-kth", None, arg_hash(c), None), mode),
        Command::TierAblation(c) => tier_ablation_cmd(c, root, mode, |cfg| {
            run("tier-ablation", c.config.clone(), cfg.hash(), None)
        }),
        Command::Verify(c) => verify_cmd(c, root, run("verify", None, arg_hash(c), None)),
    }
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn ndjson<T: serde::Serialize>(path: PathBuf, records: &[T]) -> Result<PathBuf> {
    write_ndjson(&path, records)?;
    Ok(path)
}

fn gen_data(c: &GenData, root: &Path, run: Run<'_>, mode: Parallelism) -> Result<u8> {
    let env: EnvId = c.env.parse()?;
    let spec = EnvSpec::new(env);
    let (label, set) = match (&c.tier, &c.mix) {
        (Some(t), _) => {
            let tier: Tier = t.parse()?;
            let set = rail_core::datasets::generate_tier_with(&spec, tier, c.episodes, c.seed, mode)?.set;
            (tier.to_string(), set)
        }
        (None, Some(m)) => (m.clone(), supplementary_mix(&spec, m, c.seed, mode)?),
        (None, None) => bail!("pass --tier or --mix"),
    };
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| root.join("data").join(format!("{env}-{label}-s{}.demo", c.seed)));
    ensure_parent(&out)?;
    save_demoset_file(&out, &set)?;
    println!("{}: {} episodes, {} samples", out.display(), set.episodes(), set.samples.len());
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    run.finish(&dir, &manifest_beside(&out), vec![out.clone()])?;
    Ok(0)
}

fn ref_returns(c: &RefReturns, root: &Path, run: Run<'_>, mode: Parallelism) -> Result<u8> {
    let envs = match &c.env {
        Some(e) => vec![e.parse::<EnvId>()?],
        None => EnvId::ALL.to_vec(),
    };
    let refs = envs
        .iter()
        .map(|&e| reference_returns(&EnvSpec::new(e), c.episodes, c.seed, mode))
        .collect::<rail_core::Result<Vec<_>>>()?;
    let out = c.out.clone().unwrap_or_else(|| root.join("reference_returns.txt"));
    ensure_parent(&out)?;
    let mut buf = Vec::new();
    write_reference_returns(&mut buf, &refs)?;
    fs::write(&out, &buf)?;
    for r in &refs {
        println!("{}: expert {:.3} random {:.3}", r.env, r.expert_return, r.random_return);
    }
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    run.finish(&dir, &manifest_beside(&out), vec![out.clone()])?;
    Ok(0)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<OfflineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => rail_core::Error::MissingArtifact(p.to_path_buf()),
                _ => e.into(),
            })?;
            OfflineConfig::parse(&text)?
        }
        None => OfflineConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn train_offline<'a>(
    c: &TrainOffline,
    root: &Path,
    mode: Parallelism,
    run: impl FnOnce(&OfflineConfig) -> Run<'a>,
) -> Result<u8> {
    let cfg = load_config(c.config.as_deref(), &c.set)?;
    let run = run(&cfg);
    let hash = cfg.hash();
    let out = c.out.clone().unwrap_or_else(|| root.join(format!("offline-{hash}")));
    let existing = out.join(CONFIG_FILE);
    if existing.exists() && !c.force {
        let previous = OfflineConfig::parse(&fs::read_to_string(&existing)?).map(|p| p.hash()).ok();
        if previous.as_deref() != Some(hash.as_str()) {
            return Err(rail_core::Error::HashCollision(out).into());
        }
        bail!("{} already holds this run; pass --force to overwrite", out.display());
    }
    let expert = load_demoset_file(&cfg.expert_path)?;
    let supp = load_demoset_file(&cfg.supp_path)?;
    let artifacts = run_offline_with(&cfg, &expert, &supp, mode)?;
    let mut written = write_artifacts(&out, &artifacts)?;
    written.sort();
    for (tier, w) in artifacts.tier_weights() {
        println!("mean omega {tier}: {w:.4}");
    }
    println!("artifacts in {}", out.display());
    run.finish(&out, &out.join(MANIFEST_FILE), written)?;
    Ok(0)
}

fn expert_for(config: &OfflineConfig, explicit: Option<&Path>) -> Result<DemoSet> {
    Ok(load_demoset_file(explicit.unwrap_or(&config.expert_path))?)
}

fn complete_artifacts(dir: &Path) -> Result<OfflineArtifacts> {
    let missing = missing_artifacts(dir);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        bail!("incomplete artifacts in {}; missing:\n  {}", dir.display(), list.join("\n  "));
    }
    Ok(load_artifacts(dir)?)
}

fn online_config(kth: f64) -> Result<OnlineConfig> {
    let cfg = OnlineConfig {
        kappa_threshold: kth,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn inputs<'a>(a: &'a OfflineArtifacts, expert: &'a DemoSet) -> Result<OnlineInputs<'a>> {
    Ok(rail_core::experiments::online_inputs(a, expert)?)
}

fn run_online_cmd(c: &RunOnline, run: Run<'_>) -> Result<u8> {
    let adapt: AdaptMode = c.adapt.parse()?;
    let cfg = online_config(c.kth)?;
    let a = complete_artifacts(&c.artifacts)?;
    let expert = expert_for(&a.config, c.expert.as_deref())?;
    let spec = EnvSpec::new(a.config.env_id);
    let result = run_online(inputs(&a, &expert)?, &spec, c.sigma, c.episodes, adapt, &cfg, c.seed)?;
    let out = c.out.clone().unwrap_or_else(|| {
        c.artifacts
            .join(format!("online-{adapt}-sigma{}-s{}", c.sigma, c.seed))
    });
    fs::create_dir_all(&out)?;
    let mut files = vec![
        ndjson(out.join("returns.ndjson"), &result.returns)?,
        ndjson(out.join("triggers.ndjson"), &result.trigger_log)?,
        ndjson(out.join("kappa.ndjson"), &result.kappa_log)?,
        ndjson(out.join("update_timing.ndjson"), &result.timing)?,
    ];
    let policy_path = out.join(POLICY_FILE);
    let mut w = std::io::BufWriter::new(fs::File::create(&policy_path)?);
    result.learner.policy.write_to(&mut w, &a.header("policy"))?;
    w.flush()?;
    files.push(policy_path);
    let disc_path = out.join(DISC_FILE);
    let mut w = std::io::BufWriter::new(fs::File::create(&disc_path)?);
    result.learner.disc.write_to(&mut w, &a.header("disc"))?;
    w.flush()?;
    files.push(disc_path);
    let r = result.episode_returns();
    println!(
        "{} episodes, mean return {:.3}, {} updates ({:.1} ms)",
        r.len(),
        mean(&r),
        result.update_count(),
        result.update_wall_ms()
    );
    run.finish(&out, &out.join(MANIFEST_FILE), files)?;
    Ok(0)
}

/// Score anchors from a reference file, or freshly computed.
fn normalizer(refs: Option<&Path>, env: EnvId, mode: Parallelism) -> Result<ScoreNormalizer> {
    let r = match refs {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_reference_returns(&mut BufReader::new(f))?
                .into_iter()
                .find(|r| r.env == env)
                .ok_or_else(|| anyhow::anyhow!("{} has no entry for {env}", p.display()))?
        }
        None => reference_returns(&EnvSpec::new(env), REFERENCE_EPISODES, 0, mode)?,
    };
    Ok(ScoreNormalizer::from_reference(&r)?)
}

fn method_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn evaluate(c: &Evaluate, root: &Path, run: Run<'_>, mode: Parallelism) -> Result<u8> {
    let adapt: AdaptMode = c.adapt.parse()?;
    let online = online_config(c.kth)?;
    let seeds: Vec<u64> = (0..c.runs).collect();
    let mut cells = Vec::new();
    let mut env = None;
    for dir in &c.artifacts {
        let (config, policy) = load_policy(dir)?;
        if env.is_some_and(|e| e != config.env_id) {
            bail!("artifact directories cover different environments");
        }
        env = Some(config.env_id);
        let spec = EnvSpec::new(config.env_id);
        let norm = normalizer(c.refs.as_deref(), config.env_id, mode)?;
        let label = method_label(dir);
        if adapt == AdaptMode::Off {
            cells.extend(rail_core::evaluation::noise_sweep(&label, &c.sweep, &seeds, &norm, mode, |sigma, seed| {
                evaluate_policy(&policy, &spec, sigma, c.episodes, seed, Parallelism::Sequential)
            })?);
        } else {
            let a = complete_artifacts(dir)?;
            let expert = expert_for(&a.config, None)?;
            let inp = inputs(&a, &expert)?;
            cells.extend(rail_core::evaluation::noise_sweep(&label, &c.sweep, &seeds, &norm, mode, |sigma, seed| {
                run_online(inp, &spec, sigma, c.episodes, adapt, &online, seed).map(|r| r.episode_returns())
            })?);
        }
    }
    let out = c.out.clone().unwrap_or_else(|| root.join("evaluate"));
    fs::create_dir_all(&out)?;
    let table = summary_table(&cells);
    print!("{table}");
    let files = vec![
        ndjson(out.join("sweep.ndjson"), &cells)?,
        write_text(&out.join("summary.txt"), &table)?,
        write_text(&out.join("plot.csv"), &plot_csv(&cells))?,
    ];
    run.finish(&out, &out.join(MANIFEST_FILE), files)?;
    Ok(0)
}

fn grid_kth(c: &GridKth, run: Run<'_>, mode: Parallelism) -> Result<u8> {
    let a = complete_artifacts(&c.artifacts)?;
    let expert = expert_for(&a.config, c.expert.as_deref())?;
    let spec = EnvSpec::new(a.config.env_id);
    let norm = normalizer(c.refs.as_deref(), a.config.env_id, mode)?;
    let inp = inputs(&a, &expert)?;
    let seeds: Vec<u64> = (0..c.runs).collect();
    let (rows, best) = grid_search_kth(&seeds, mode, |k, seed| {
        let cfg = OnlineConfig {
            kappa_threshold: k,
            ..Default::default()
        };
        let r = run_online(inp, &spec, c.sigma, c.episodes, AdaptMode::On, &cfg, seed)?;
        Ok((normalized_score(mean(&r.episode_returns()), &norm), r.update_count()))
    })?;
    let out = c.out.clone().unwrap_or_else(|| c.artifacts.join(format!("grid-sigma{}", c.sigma)));
    fs::create_dir_all(&out)?;
    let mut table = format!("{:>6} {:>10} {:>8} {:>8}\n", "kth", "mean", "std", "updates");
    let mut csv = String::from("curve,x,y,err\n");
    for r in &rows {
        let updates: usize = r.updates.iter().sum();
        table += &format!("{:>6.1} {:>10.2} {:>8.2} {:>8}\n", r.kappa_threshold, r.mean, r.std, updates);
        csv += &format!("grid,{:?},{:?},{:?}\n", r.kappa_threshold, r.mean, r.std);
    }
    table += &format!("best kth {best:.1}\n");
    print!("{table}");
    let files = vec![
        ndjson(out.join("grid.ndjson"), &rows)?,
        write_text(&out.join("summary.txt"), &table)?,
        write_text(&out.join("plot.csv"), &csv)?,
    ];
    run.finish(&out, &out.join(MANIFEST_FILE), files)?;
    Ok(0)
}

fn tier_ablation_cmd<'a>(
    c: &TierAblation,
    root: &Path,
    mode: Parallelism,
    run: impl FnOnce(&OfflineConfig) -> Run<'a>,
) -> Result<u8> {
    let base = load_config(c.config.as_deref(), &c.set)?;
    let run = run(&base);
    let spec = EnvSpec::new(base.env_id);
    let norm = normalizer(c.refs.as_deref(), base.env_id, mode)?;
    let seeds: Vec<u64> = (0..c.runs).collect();
    let mixes: Vec<&str> = c.mixes.iter().map(String::as_str).collect();
    let rows: Vec<AblationRow> = tier_ablation(&mixes, |mix| {
        // scores[seed][sigma]
        let scores = parallel::map(mode, &seeds, |&seed| {
            let (a, _) = train_seed(&base, mix, seed, Parallelism::Sequential)?;
            c.sweep
                .iter()
                .map(|&sigma| {
                    let r = evaluate_policy(&a.policy, &spec, sigma, c.episodes, seed, Parallelism::Sequential)?;
                    Ok(normalized_score(mean(&r), &norm))
                })
                .collect::<rail_core::Result<Vec<f64>>>()
        })
        .into_iter()
        .collect::<rail_core::Result<Vec<_>>>()?;
        Ok(c.sweep
            .iter()
            .enumerate()
            .map(|(j, &sigma)| SweepCell::new(mix, sigma, seeds.clone(), scores.iter().map(|s| s[j]).collect()))
            .collect())
    })?;
    let out = c.out.clone().unwrap_or_else(|| root.join(format!("tier-ablation-{}", base.hash())));
    fs::create_dir_all(&out)?;
    let cells: Vec<SweepCell> = rows.iter().flat_map(|r| r.cells.clone()).collect();
    let table = summary_table(&cells);
    print!("{table}");
    let files = vec![
        ndjson(out.join("ablation.ndjson"), &rows)?,
        write_text(&out.join("summary.txt"), &table)?,
        write_text(&out.join("plot.csv"), &plot_csv(&cells))?,
    ];
    run.finish(&out, &out.join(MANIFEST_FILE), files)?;
    Ok(0)
}

fn verify_cmd(c: &Verify, root: &Path, run: Run<'_>) -> Result<u8> {
    let checks = verify::run_all();
    let mut report = String::new();
    for ch in &checks {
        report += &format!("{} {}: {}\n", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    report += &if failed.is_empty() {
        format!("all {} checks passed\n", checks.len())
    } else {
        format!("failed: {}\n", failed.join(", "))
    };
    print!("{report}");
    let out = c.out.clone().unwrap_or_else(|| root.join("verify"));
    fs::create_dir_all(&out)?;
    let files = vec![write_text(&out.join("verify.txt"), &report)?];
    run.finish(&out, &out.join(MANIFEST_FILE), files)?;
    Ok(if failed.is_empty() { 0 } else { EXIT_VERIFY })
}
