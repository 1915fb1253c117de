//! Command-line front end: `gen-world`, `pretrain`, `train`, `eval`,
//! `oracle` and `stats`.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::embed::{pretrain, recall_at_k, EncoderParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::{
    bootstrap_test, encode_worlds, evaluate, final_eval_seed, oracle_baseline, read_games_csv, train, write_games_csv,
    write_metrics_csv, Agent, EvalReport, Statistic, TrainInputs, Variant,
};
use crate::worldgen::{load_worlds, save_worlds, GameWorld};
use checkpoint::{Checkpoint, Metadata};
use config::{split_worlds, Config};

pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const DQN_FILE: &str = "dqn.ckpt";
pub const DRRN_FILE: &str = "drrn.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "hrl", version, about = "Hierarchical RL agents for the image guessing game")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML config file, or a preset name (exp1, exp2, exp3, full).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World file from `gen-world`; generated from the config when absent.
    #[arg(long)]
    pub worlds: Option<PathBuf>,
    /// Proceed despite a config hash mismatch with a checkpoint.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and held-out worlds into one file.
    GenWorld {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the text and image encoders.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one agent variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Encoder checkpoint from `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Play held-out games with a trained agent.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Games to play; defaults to one per held-out world.
        #[arg(long)]
        games: Option<usize>,
        /// Per-game CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the first k questions, then guess once.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9,10")]
        rounds: Vec<usize>,
        /// Summary CSV, one row per k.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two per-game CSVs with a resampling test.
    Stats {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    world_hash: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    elapsed_secs: f64,
    summary: serde_json::Value,
    config: &'a Config,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld { config, seed, out } => gen_world(config.as_deref(), seed, &out),
        Command::Pretrain { common, seed, out } => cmd_pretrain(&common, seed, &out),
        Command::Train {
            common,
            seed,
            variant,
            checkpoint,
            out,
        } => cmd_train(&common, seed, variant, &checkpoint, &out),
        Command::Eval {
            common,
            checkpoint,
            seed,
            games,
            out,
        } => cmd_eval(&common, &checkpoint, seed, games, &out),
        Command::Oracle {
            common,
            checkpoint,
            rounds,
            out,
        } => cmd_oracle(&common, &checkpoint, &rounds, &out),
        Command::Stats { a, b, resamples, seed } => cmd_stats(&a, &b, resamples, seed),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Training and held-out worlds, from `--worlds` when given. A world file's
/// own generator settings replace those of the config.
fn worlds_for(cfg: &mut Config, path: Option<&Path>) -> Result<(Vec<GameWorld>, Vec<GameWorld>)> {
    let Some(path) = path else {
        return cfg.generate_worlds();
    };
    let (wcfg, worlds) = load_worlds(path)?;
    if wcfg != cfg.world {
        log::info!("using the generator settings stored in {}", path.display());
        cfg.world = wcfg;
    }
    let (tr, ev) = split_worlds(worlds);
    if tr.is_empty() || ev.is_empty() {
        return Err(Error::format(
            format!("world file {}", path.display()),
            "needs both training and held-out worlds",
        ));
    }
    cfg.data.train_worlds = tr.len();
    cfg.data.eval_worlds = ev.len();
    cfg.data.pretrain_worlds = cfg.data.pretrain_worlds.min(tr.len());
    Ok((tr, ev))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(path: &Path, m: &Manifest<'_>) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::format("manifest", e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn load_encoder(path: &Path, cfg: &Config, force: bool) -> Result<EncoderParams> {
    let ck = Checkpoint::load(path)?;
    ck.check_config(&cfg.world_hash(), force)?;
    let enc = ck.to_encoder()?;
    if enc.dims.embed_dim != cfg.world.embed_dim {
        return Err(Error::config(format!(
            "encoder embeds into {} dimensions but the worlds use {}",
            enc.dims.embed_dim, cfg.world.embed_dim
        )));
    }
    Ok(enc)
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn gen_world(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.world.seed = s;
    }
    let (mut tr, ev) = cfg.generate_worlds()?;
    let (n_tr, n_ev) = (tr.len(), ev.len());
    tr.extend(ev);
    save_worlds(out, &cfg.world, &tr)?;
    println!("wrote {n_tr} training and {n_ev} held-out worlds to {}", out.display());
    write_manifest(
        &manifest_beside(out),
        &Manifest {
            command: "gen-world",
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.full_hash(),
            world_hash: cfg.world_hash(),
            seed: cfg.world.seed,
            inputs: config.map(|p| display(&[p])).unwrap_or_default(),
            outputs: display(&[out]),
            elapsed_secs: t0.elapsed().as_secs_f64(),
            summary: serde_json::json!({ "train_worlds": n_tr, "eval_worlds": n_ev }),
            config: &cfg,
        },
    )
}

fn cmd_pretrain(common: &Common, seed: Option<u64>, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.pretrain.seed = s;
    }
    let (tr, ev) = worlds_for(&mut cfg, common.worlds.as_deref())?;
    create_dir(out)?;
    let mut enc = EncoderParams::init(cfg.encoder.clone(), &mut rng::substream(cfg.pretrain.seed, "encoder"))?;
    let report = pretrain(&tr[..cfg.data.pretrain_worlds], &mut enc, &cfg.pretrain)?;
    let mut recall = Vec::new();
    for n in 0..=cfg.world.pool_size {
        recall.push(recall_at_k(&ev, &enc, n, 1)?);
    }
    println!(
        "pretrained on {} worlds; held-out recall@1 with the full history {:.3}",
        cfg.data.pretrain_worlds,
        recall[cfg.world.pool_size]
    );
    let ck_path = out.join(ENCODER_FILE);
    let meta = Metadata {
        seed: cfg.pretrain.seed,
        iteration: report.losses.len() - 1,
        config_hash: cfg.world_hash(),
        variant: None,
    };
    Checkpoint::from_encoder(&enc, meta)?.save(&ck_path)?;
    let loss_path = out.join("pretrain_loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        text += &format!("{i},{l}\n");
    }
    write_text(&loss_path, &text)?;
    write_text(&out.join(CONFIG_FILE), &to_toml(&cfg)?)?;
    let inputs = common.worlds.as_deref().map(|p| display(&[p])).unwrap_or_default();
    write_manifest(
        &out.join(MANIFEST_FILE),
        &Manifest {
            command: "pretrain",
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.full_hash(),
            world_hash: cfg.world_hash(),
            seed: cfg.pretrain.seed,
            inputs,
            outputs: display(&[&ck_path, &loss_path]),
            elapsed_secs: t0.elapsed().as_secs_f64(),
            summary: serde_json::json!({
                "epochs": report.losses.len() - 1,
                "halted_at": report.halted_at,
                "final_loss": report.losses.last(),
                "heldout_recall_at_1_by_history": recall,
                "encoder_checksum": enc.params.checksum(),
            }),
            config: &cfg,
        },
    )
}

fn to_toml(cfg: &Config) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::format("config", e.to_string()))
}

fn cmd_train(common: &Common, seed: Option<u64>, variant: Option<Variant>, encoder: &Path, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(v) = variant {
        cfg.run.variant = v;
    }
    let (tr, ev) = worlds_for(&mut cfg, common.worlds.as_deref())?;
    let enc = load_encoder(encoder, &cfg, common.force)?;
    create_dir(out)?;
    let log_path = out.join("episodes.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let outcome = train(
        &cfg.run,
        &TrainInputs {
            train_worlds: &tr,
            eval_worlds: &ev,
            encoder: &enc,
        },
        Some(&mut log),
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let meta = Metadata {
        seed: cfg.run.seed,
        iteration: cfg.run.episodes,
        config_hash: cfg.full_hash(),
        variant: Some(cfg.run.variant.name().to_string()),
    };
    let paths = [
        out.join(ENCODER_FILE),
        out.join(DQN_FILE),
        out.join(DRRN_FILE),
        out.join("metrics.csv"),
        out.join("games.csv"),
        log_path.clone(),
    ];
    let mut enc_ck = Checkpoint::load(encoder)?;
    enc_ck.header.metadata.config_hash = cfg.world_hash();
    enc_ck.save(&paths[0])?;
    Checkpoint::from_dqn(&outcome.agent.dqn, meta.clone()).save(&paths[1])?;
    Checkpoint::from_drrn(&outcome.agent.drrn, meta).save(&paths[2])?;
    let mut rows: Vec<_> = outcome.curve.iter().map(EvalReport::metrics_row).collect();
    rows.push(outcome.final_report.metrics_row());
    write_metrics_csv(&paths[3], &rows)?;
    write_games_csv(&paths[4], &outcome.final_report.games)?;
    write_text(&out.join(CONFIG_FILE), &to_toml(&cfg)?)?;

    let fr = &outcome.final_report;
    let checksum = policy_checksum(&outcome.agent);
    println!(
        "{} seed {}: win rate {:.3}, avg turns {:.2} over {} held-out games; policy checksum {checksum}",
        cfg.run.variant, cfg.run.seed, fr.win_rate, fr.avg_turns, fr.n_games
    );
    let mut inputs = display(&[encoder]);
    inputs.extend(common.worlds.as_deref().map(|p| p.display().to_string()));
    let outputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let s = &outcome.stats;
    write_manifest(
        &out.join(MANIFEST_FILE),
        &Manifest {
            command: "train",
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.full_hash(),
            world_hash: cfg.world_hash(),
            seed: cfg.run.seed,
            inputs,
            outputs: display(&outputs),
            elapsed_secs: t0.elapsed().as_secs_f64(),
            summary: serde_json::json!({
                "variant": cfg.run.variant.name(),
                "win_rate": fr.win_rate,
                "avg_turns": fr.avg_turns,
                "mean_reward": fr.mean_reward,
                "games": fr.n_games,
                "policy_checksum": checksum,
                "steps": s.steps,
                "dqn_updates": s.dqn_updates,
                "drrn_updates": s.drrn_updates,
                "target_syncs": s.target_syncs,
                "dropped_items": s.dropped_items,
                "train_wins": s.train_wins,
            }),
            config: &cfg,
        },
    )
}

/// Digest of both policy networks.
pub fn policy_checksum(agent: &Agent) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for part in [
        agent.dqn.online.checksum(),
        agent.dqn.target.checksum(),
        agent.drrn.params.checksum(),
    ] {
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

fn cmd_eval(common: &Common, run_dir: &Path, seed: Option<u64>, games: Option<usize>, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let stored = Config::load(&run_dir.join(CONFIG_FILE))?;
    let dqn_ck = Checkpoint::load(&run_dir.join(DQN_FILE))?;
    let drrn_ck = Checkpoint::load(&run_dir.join(DRRN_FILE))?;
    let mut cfg = match common.config.as_deref() {
        Some(p) => {
            let cfg = Config::load(p)?;
            dqn_ck.check_config(&cfg.full_hash(), common.force)?;
            cfg
        }
        None => stored,
    };
    let (_, ev) = worlds_for(&mut cfg, common.worlds.as_deref())?;
    let enc = load_encoder(&run_dir.join(ENCODER_FILE), &cfg, common.force)?;
    let variant: Variant = match &dqn_ck.header.metadata.variant {
        Some(v) => v.parse()?,
        None => cfg.run.variant,
    };
    let agent = Agent {
        variant,
        dqn: dqn_ck.to_dqn()?,
        drrn: drrn_ck.to_drrn()?,
    };
    let encoded = encode_worlds(&ev, &enc)?;
    let n = games.unwrap_or(match cfg.run.final_eval_games {
        0 => encoded.len(),
        n => n,
    });
    let seed = seed.unwrap_or(cfg.run.seed);
    let report = evaluate(
        &agent,
        &enc,
        &encoded,
        &cfg.run.env,
        n,
        final_eval_seed(seed),
        dqn_ck.header.metadata.iteration,
    )?;
    write_games_csv(out, &report.games)?;
    println!(
        "{variant}: win rate {:.3}, avg turns {:.2}, mean reward {:.3} over {} games",
        report.win_rate, report.avg_turns, report.mean_reward, report.n_games
    );
    let mut inputs = display(&[run_dir]);
    inputs.extend(common.worlds.as_deref().map(|p| p.display().to_string()));
    write_manifest(
        &manifest_beside(out),
        &Manifest {
            command: "eval",
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.full_hash(),
            world_hash: cfg.world_hash(),
            seed,
            inputs,
            outputs: display(&[out]),
            elapsed_secs: t0.elapsed().as_secs_f64(),
            summary: serde_json::json!({
                "variant": variant.name(),
                "win_rate": report.win_rate,
                "avg_turns": report.avg_turns,
                "mean_reward": report.mean_reward,
                "games": report.n_games,
            }),
            config: &cfg,
        },
    )
}

fn cmd_oracle(common: &Common, encoder: &Path, rounds: &[usize], out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg = load_config(common.config.as_deref())?;
    let (_, ev) = worlds_for(&mut cfg, common.worlds.as_deref())?;
    let enc = load_encoder(encoder, &cfg, common.force)?;
    let mut rows = Vec::with_capacity(rounds.len());
    for &k in rounds {
        let report = oracle_baseline(&ev, &enc, k, &cfg.run.env)?;
        println!("oracle@{k}: win rate {:.3}", report.win_rate);
        rows.push(report.metrics_row());
    }
    write_metrics_csv(out, &rows)?;
    let mut inputs = display(&[encoder]);
    inputs.extend(common.worlds.as_deref().map(|p| p.display().to_string()));
    write_manifest(
        &manifest_beside(out),
        &Manifest {
            command: "oracle",
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.full_hash(),
            world_hash: cfg.world_hash(),
            seed: cfg.world.seed,
            inputs,
            outputs: display(&[out]),
            elapsed_secs: t0.elapsed().as_secs_f64(),
            summary: serde_json::json!({
                "rounds": rounds,
                "win_rate": rows.iter().map(|r| r.win_rate).collect::<Vec<_>>(),
            }),
            config: &cfg,
        },
    )
}

/// p-values for the win rate and the average turn count of two game logs.
pub fn compare_game_logs(a: &Path, b: &Path, resamples: usize, seed: u64) -> Result<[(Statistic, f64, f64, f64); 2]> {
    let ga = read_games_csv(a)?;
    let gb = read_games_csv(b)?;
    let mut out = [(Statistic::WinRate, 0.0, 0.0, 0.0), (Statistic::AvgTurns, 0.0, 0.0, 0.0)];
    for (slot, stat) in out.iter_mut().zip([Statistic::WinRate, Statistic::AvgTurns]) {
        let (va, vb) = (stat.values(&ga), stat.values(&gb));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let p = bootstrap_test(&va, &vb, resamples, &mut rng::substream(seed, "bootstrap"))?;
        *slot = (stat, mean(&va), mean(&vb), p);
    }
    Ok(out)
}

fn cmd_stats(a: &Path, b: &Path, resamples: usize, seed: u64) -> Result<()> {
    for (stat, ma, mb, p) in compare_game_logs(a, b, resamples, seed)? {
        let name = match stat {
            Statistic::WinRate => "win_rate",
            Statistic::AvgTurns => "avg_turns",
        };
        println!("{name}: {ma:.4} vs {mb:.4}, p = {p:.4}");
    }
    Ok(())
}
