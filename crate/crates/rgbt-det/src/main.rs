//! Command-line entry points: gen-data, train, eval, ablate-k,
//! ablate-components. Every run configuration key is exposed as a long flag;
//! precedence is CLI flag > --config file > --profile defaults. All commands
//! echo their fully-resolved configuration.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use rgbt_det::ablate;
use rgbt_det::config::{RunConfig, KEYS};
use rgbt_det::data;
use rgbt_det::error::{Error, Result};
use rgbt_det::eval;
use rgbt_det::train;

fn with_config_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat `key = value` config file"),
        )
        .arg(
            Arg::new("profile")
                .long("profile")
                .value_name("NAME")
                .default_value("toy")
                .help("preset defaults: toy (CPU-scale) or paper (reference hyperparameters)"),
        );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name.replace('_', "-"))
                .value_name("VALUE")
                .help(k.help),
        );
    }
    cmd
}

/// profile defaults <- config file <- per-key CLI flags
fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let profile = m.get_one::<String>("profile").expect("has default");
    let mut cfg = RunConfig::by_profile(profile)?;
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cli() -> Command {
    Command::new("rgbt-det")
        .about("RGB-thermal object detection: synthetic data, training, evaluation, ablations")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_args(
            Command::new("gen-data")
                .about("Generate a synthetic paired-modality dataset")
                .arg(Arg::new("out").value_name("OUT_DIR").required(true)),
        ))
        .subcommand(with_config_args(
            Command::new("train")
                .about("Train a detector")
                .arg(Arg::new("data").long("data").value_name("DIR").required(true))
                .arg(
                    Arg::new("run-dir")
                        .long("run-dir")
                        .value_name("DIR")
                        .required(true),
                )
                .arg(Arg::new("resume").long("resume").value_name("CKPT"))
                .arg(
                    Arg::new("quiet")
                        .long("quiet")
                        .action(ArgAction::SetTrue)
                        .help("suppress per-step progress lines"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("eval")
                .about("Evaluate a checkpoint (or re-score saved detection files)")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("CKPT"),
                )
                .arg(Arg::new("data").long("data").value_name("DIR").required(true))
                .arg(Arg::new("out").long("out").value_name("DIR"))
                .arg(
                    Arg::new("detections")
                        .long("detections")
                        .value_name("DIR")
                        .help("skip inference and score these detection files"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("ablate-k")
                .about("Train/evaluate one model per group shuffle K")
                .arg(Arg::new("data").long("data").value_name("DIR").required(true))
                .arg(Arg::new("out").long("out").value_name("DIR").required(true))
                .arg(
                    Arg::new("k-list")
                        .long("k-list")
                        .value_name("LIST")
                        .help("comma list of K values; C means one group per channel"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("ablate-components")
                .about("Train/evaluate the 2x2 GSMA x MS grid")
                .arg(Arg::new("data").long("data").value_name("DIR").required(true))
                .arg(Arg::new("out").long("out").value_name("DIR").required(true)),
        ))
}

fn cmd_gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(p) = parent {
        if !p.exists() {
            return Err(Error::Usage(format!(
                "output parent directory {} does not exist",
                p.display()
            )));
        }
    }
    let meta = data::generate_dataset(&cfg.scene_spec(), cfg.n_train, cfg.n_test, &out)?;
    print!("{}", cfg.to_kv());
    println!(
        "generated {} train / {} test pairs under {} (anchors: {})",
        meta.n_train,
        meta.n_test,
        out.display(),
        if meta.anchors.is_some() { "k-means" } else { "defaults" }
    );
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let data_root = PathBuf::from(m.get_one::<String>("data").unwrap());
    let run_dir = PathBuf::from(m.get_one::<String>("run-dir").unwrap());
    let resume = m.get_one::<String>("resume").map(PathBuf::from);
    let quiet = m.get_flag("quiet");
    print!("{}", cfg.to_kv());
    let out = train::train(&cfg, &data_root, &run_dir, resume.as_deref(), quiet)?;
    println!(
        "trained {} steps in {:.1}s; first loss {:.4}, final loss {:.4}; checkpoint {}",
        out.steps_done,
        out.elapsed_secs,
        out.first_loss,
        out.final_loss,
        out.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let data_root = PathBuf::from(m.get_one::<String>("data").unwrap());
    print!("{}", cfg.to_kv());
    match m.get_one::<String>("detections") {
        Some(det_dir) => {
            let report = eval::evaluate_detections(Path::new(det_dir), &data_root, &cfg)?;
            print!("{}", eval::report_lines(&report, f64::NAN));
        }
        None => {
            let ckpt = m.get_one::<String>("checkpoint").ok_or_else(|| {
                Error::Usage("either --checkpoint or --detections is required".into())
            })?;
            let out_dir = m
                .get_one::<String>("out")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("eval_out"));
            let outcome = eval::evaluate_checkpoint(&cfg, Path::new(ckpt), &data_root, &out_dir)?;
            print!("{}", eval::report_lines(&outcome.report, outcome.images_per_sec));
            println!("detections: {}", outcome.detections_dir.display());
            println!("report: {}", outcome.report_path.display());
        }
    }
    Ok(())
}

fn cmd_ablate_k(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let data_root = PathBuf::from(m.get_one::<String>("data").unwrap());
    let out_dir = PathBuf::from(m.get_one::<String>("out").unwrap());
    let k_list: Vec<String> = match m.get_one::<String>("k-list") {
        Some(s) => s.split(',').map(|k| k.trim().to_string()).collect(),
        None => ablate::DEFAULT_K_LIST.iter().map(|s| s.to_string()).collect(),
    };
    print!("{}", cfg.to_kv());
    let rows = ablate::ablate_k(&cfg, &data_root, &out_dir, &k_list)?;
    print!("{}", ablate::format_table("group shuffle K sweep", &rows));
    Ok(())
}

fn cmd_ablate_components(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let data_root = PathBuf::from(m.get_one::<String>("data").unwrap());
    let out_dir = PathBuf::from(m.get_one::<String>("out").unwrap());
    print!("{}", cfg.to_kv());
    let rows = ablate::ablate_components(&cfg, &data_root, &out_dir)?;
    print!("{}", ablate::format_table("GSMA / MS component grid", &rows));
    Ok(())
}

fn main() {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen-data", m)) => cmd_gen_data(m),
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate-k", m)) => cmd_ablate_k(m),
        Some(("ablate-components", m)) => cmd_ablate_components(m),
        _ => unreachable!("subcommand required"),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
