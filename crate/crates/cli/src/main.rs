use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use semalign::harness::{
    emit_summary, evaluate, read_records, run_experiment, run_sweep, summary_text, write_records,
    write_summary_csv, ExperimentConfig, Method, MetricsRecord, Scenario, SweepAxis, CONFIG_KEYS,
};
use semalign::semantic::{generate_population, load_latent_set, save_latent_set, RealLatentSet};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value config file; flags override its entries"),
    );
    CONFIG_KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(Arg::new(*key).long(*key).value_name("VALUE"))
    })
}

fn cli() -> Command {
    Command::new("semalign")
        .about("Federated latent-space alignment over multi-user MIMO downlinks")
        .subcommand_required(true)
        .subcommand(
            config_args(Command::new("generate").about("Write synthetic latent sets, one directory per seed")).arg(
                Arg::new("out_dir")
                    .long("out-dir")
                    .value_name("DIR")
                    .required(true),
            ),
        )
        .subcommand(
            config_args(Command::new("align").about("Run the federated alignment for every seed"))
                .arg(
                    Arg::new("data_dir")
                        .long("data-dir")
                        .value_name("DIR")
                        .help("Use latent sets from `generate` instead of drawing new ones"),
                )
                .arg(
                    Arg::new("trace")
                        .long("trace")
                        .value_name("FILE")
                        .help("Round trace CSV of the first seed"),
                ),
        )
        .subcommand(
            config_args(Command::new("baseline").about("Run first_k, top_k or multilink for every seed")).arg(
                Arg::new("data_dir")
                    .long("data-dir")
                    .value_name("DIR"),
            ),
        )
        .subcommand(
            config_args(Command::new("sweep").about("Run the Cartesian product of the given axes")).arg(
                Arg::new("axis")
                    .long("axis")
                    .value_name("KEY=V1,V2")
                    .action(ArgAction::Append)
                    .required(true),
            ),
        )
        .subcommand(
            Command::new("report")
                .about("Summarize a results CSV")
                .arg(Arg::new("input").value_name("CSV").required(true))
                .arg(
                    Arg::new("csv")
                        .long("csv")
                        .action(ArgAction::SetTrue)
                        .help("Emit the summary as CSV"),
                ),
        )
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading config {path}"))?,
        None => ExperimentConfig::default(),
    };
    for key in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).with_context(|| format!("flag --{key}"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_writer(cfg: &ExperimentConfig) -> Result<Box<dyn Write>> {
    Ok(match &cfg.output {
        Some(path) => Box::new(io::BufWriter::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed{seed}"))
}

fn cmd_generate(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let root = PathBuf::from(m.get_one::<String>("out_dir").expect("required"));
    for &seed in &cfg.seeds {
        let dir = seed_dir(&root, seed);
        fs::create_dir_all(&dir)?;
        let pop = generate_population(&cfg.population(seed))?;
        save_latent_set(&pop.ap, dir.join("ap.semlat"))?;
        for (l, u) in pop.users.iter().enumerate() {
            save_latent_set(u, dir.join(format!("user{l}.semlat")))?;
        }
        eprintln!("wrote {} users to {}", pop.users.len(), dir.display());
    }
    fs::write(root.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn load_sets(dir: &Path, users: usize) -> Result<(RealLatentSet, Vec<RealLatentSet>)> {
    let ap = load_latent_set(dir.join("ap.semlat"))?.padded_to_even();
    let users = (0..users)
        .map(|l| {
            let p = dir.join(format!("user{l}.semlat"));
            load_latent_set(&p)
                .map(RealLatentSet::padded_to_even)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ap, users))
}

fn run_records(cfg: &ExperimentConfig, data_dir: Option<&String>, trace: Option<&String>) -> Result<Vec<MetricsRecord>> {
    if data_dir.is_none() && trace.is_none() {
        let report = run_experiment(cfg)?;
        for f in &report.failures {
            eprintln!("seed {} failed: {}", f.seed, f.message);
        }
        return Ok(report.records);
    }
    let mut records = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let start = Instant::now();
        let scenario = match data_dir {
            Some(dir) => {
                let (ap, users) = load_sets(&seed_dir(Path::new(dir), seed), cfg.users)?;
                Scenario::from_sets(cfg, &ap, &users, seed)
            }
            None => Scenario::prepare(cfg, seed),
        };
        let result = scenario.and_then(|s| evaluate(cfg, &s, start));
        match result {
            Ok((rec, out)) => {
                if let (0, Some(path), Some(ledger)) = (i, trace, out.ledger.as_ref()) {
                    ledger.write_round_trace(fs::File::create(path)?)?;
                }
                records.push(rec);
            }
            Err(e) => eprintln!("seed {seed} failed: {e}"),
        }
    }
    Ok(records)
}

fn finish(cfg: &ExperimentConfig, records: &[MetricsRecord]) -> Result<()> {
    write_records(records, output_writer(cfg)?)?;
    if records.is_empty() {
        bail!("every seed failed");
    }
    eprint!("{}", summary_text(&emit_summary(records)?));
    Ok(())
}

fn cmd_align(m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(m)?;
    cfg.method = Method::Federated;
    let records = run_records(&cfg, m.get_one("data_dir"), m.get_one("trace"))?;
    finish(&cfg, &records)
}

fn cmd_baseline(m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(m)?;
    if m.get_one::<String>("method").is_none() && cfg.method == Method::Federated {
        cfg.method = Method::FirstK;
    }
    if cfg.method == Method::Federated {
        bail!("`baseline` runs first_k, top_k or multilink; use `align` for the federated method");
    }
    let records = run_records(&cfg, m.get_one("data_dir"), None)?;
    finish(&cfg, &records)
}

fn cmd_sweep(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let axes = m
        .get_many::<String>("axis")
        .expect("required")
        .map(|a| SweepAxis::parse(a))
        .collect::<semalign::Result<Vec<_>>>()?;
    let report = run_sweep(&cfg, &axes, output_writer(&cfg)?)?;
    for (point, f) in &report.failures {
        eprintln!("point {point} seed {} failed: {}", f.seed, f.message);
    }
    eprintln!("{} rows written", report.rows);
    Ok(())
}

fn cmd_report(m: &ArgMatches) -> Result<()> {
    let path = m.get_one::<String>("input").expect("required");
    let records = read_records(fs::File::open(path).with_context(|| format!("opening {path}"))?)?;
    let rows = emit_summary(&records)?;
    if m.get_flag("csv") {
        write_summary_csv(&rows, io::stdout().lock())?;
    } else {
        print!("{}", summary_text(&rows));
    }
    Ok(())
}

fn main() -> Result<()> {
    let matches = cli().get_matches();
    match matches.subcommand() {
        Some(("generate", m)) => cmd_generate(m),
        Some(("align", m)) => cmd_align(m),
        Some(("baseline", m)) => cmd_baseline(m),
        Some(("sweep", m)) => cmd_sweep(m),
        Some(("report", m)) => cmd_report(m),
        _ => unreachable!("subcommand required"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_is_a_flag() {
        let cmd = cli();
        for sub in ["generate", "align", "baseline", "sweep"] {
            let s = cmd.find_subcommand(sub).unwrap();
            for key in CONFIG_KEYS {
                assert!(s.get_arguments().any(|a| a.get_long() == Some(key)), "{sub} lacks --{key}");
            }
        }
        cmd.debug_assert();
    }
}
