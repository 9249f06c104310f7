//! Argument parsing and dispatch. Every `RunConfig` key is also a
//! `--kebab-case` flag on every subcommand.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::ablation::{run_ablation, write_outputs};
use crate::commands::{
    class_names, run_evaluate, run_export, run_make_seg, run_train, run_visualize, CliError, CliResult, Split,
};
use crate::config::{RunConfig, KEYS, OUTPUT_ROOT_ENV};

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, doc)| {
        cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(*doc)
                .help_heading("Run configuration"),
        )
    })
}

fn split_arg(default: &'static str) -> Arg {
    Arg::new("split")
        .long("split")
        .value_name("train|eval")
        .default_value(default)
}

pub fn command() -> Command {
    let checkpoint = || {
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .required(true)
    };
    Command::new("erasing")
        .about("Adversarial-erasing attention training for weakly supervised segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_flags(Command::new("train").about("Train localizer and adversarial networks")))
        .subcommand(with_config_flags(
            Command::new("make-seg")
                .about("Write segmentation masks and a manifest from a checkpoint")
                .arg(checkpoint())
                .arg(split_arg("train"))
                .arg(
                    Arg::new("unlabeled")
                        .long("unlabeled")
                        .action(ArgAction::SetTrue)
                        .help("ignore image labels; gate classes by predicted score"),
                ),
        ))
        .subcommand(with_config_flags(
            Command::new("evaluate")
                .about("Score a mask manifest against ground-truth masks")
                .arg(Arg::new("pred_manifest").long("pred-manifest").value_name("FILE").required(true))
                .arg(Arg::new("gt_root").long("gt-root").value_name("DIR").required(true)),
        ))
        .subcommand(with_config_flags(
            Command::new("ablate-alpha")
                .about("Train and evaluate once per (alpha, seed); tabulate and plot")
                .arg(Arg::new("alphas").long("alphas").value_name("LIST").default_value("0,0.05"))
                .arg(Arg::new("seeds").long("seeds").value_name("LIST").default_value("0,1,2"))
                .arg(
                    Arg::new("parallel")
                        .long("parallel")
                        .action(ArgAction::SetTrue)
                        .help("run independent trainings concurrently"),
                ),
        ))
        .subcommand(with_config_flags(
            Command::new("visualize")
                .about("Input, attention overlay, soft mask and erased image per class")
                .arg(checkpoint())
                .arg(Arg::new("ids").long("ids").value_name("LIST").required(true))
                .arg(split_arg("eval")),
        ))
        .subcommand(with_config_flags(
            Command::new("export-dataset")
                .about("Write a split in the VOC-style directory layout")
                .arg(split_arg("train"))
                .arg(Arg::new("dest").long("dest").value_name("DIR")),
        ))
}

/// Default, then file, then the output-root variable, then flags.
pub fn resolve_config(m: &ArgMatches, output_root: Option<&str>) -> CliResult<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    if let Some(root) = output_root.filter(|r| !r.is_empty()) {
        cfg.output_dir = PathBuf::from(root);
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {what} entry `{t}`")))
        })
        .collect()
}

fn required<'a>(m: &'a ArgMatches, id: &str) -> &'a str {
    m.get_one::<String>(id).expect("clap enforces required args")
}

fn dispatch(name: &str, m: &ArgMatches) -> CliResult<()> {
    let root = std::env::var(OUTPUT_ROOT_ENV).ok();
    let cfg = resolve_config(m, root.as_deref())?;
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    match name {
        "train" => {
            let r = run_train(&cfg, &out, true)?;
            println!("trained {} steps; checkpoint {}", r.steps, r.final_checkpoint.display());
            if let Some(rep) = r.report {
                print!("{}", rep.to_table());
            }
        }
        "make-seg" => {
            let split: Split = required(m, "split").parse()?;
            let dir = out.join(format!("seg_{}", split.name()));
            let s = run_make_seg(
                &cfg,
                Path::new(required(m, "checkpoint")),
                split,
                !m.get_flag("unlabeled"),
                &dir,
            )?;
            println!("wrote {} masks to {}", s.count, dir.display());
        }
        "evaluate" => {
            let r = run_evaluate(
                Path::new(required(m, "pred_manifest")),
                Path::new(required(m, "gt_root")),
                &class_names(&cfg),
                &out,
            )?;
            print!("{}", r.to_table());
        }
        "ablate-alpha" => {
            let alphas: Vec<f64> = parse_list("alpha", required(m, "alphas"))?;
            let seeds: Vec<u64> = parse_list("seed", required(m, "seeds"))?;
            let a = run_ablation(&cfg, &alphas, &seeds, &out, m.get_flag("parallel"))?;
            write_outputs(&a, &out)?;
            print!("{}", a.to_table());
        }
        "visualize" => {
            let split: Split = required(m, "split").parse()?;
            let ids: Vec<String> = required(m, "ids").split(',').map(|s| s.trim().to_string()).collect();
            for p in run_visualize(&cfg, Path::new(required(m, "checkpoint")), split, &ids, &out.join("visualize"))? {
                println!("{}", p.display());
            }
        }
        "export-dataset" => {
            let split: Split = required(m, "split").parse()?;
            let dest = m
                .get_one::<String>("dest")
                .map(PathBuf::from)
                .unwrap_or_else(|| out.join("dataset"));
            let n = run_export(&cfg, split, &dest)?;
            println!("exported {n} images to {}", dest.display());
        }
        other => return Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match dispatch(name, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches(args: &[&str]) -> ArgMatches {
        let m = command().try_get_matches_from(args).unwrap();
        m.subcommand().unwrap().1.clone()
    }

    #[test]
    fn every_key_has_a_flag() {
        let train = command().find_subcommand("train").unwrap().clone();
        for (key, _) in KEYS {
            let long = flag_name(key);
            assert!(train.get_arguments().any(|a| a.get_long() == Some(long.as_str())), "{long}");
        }
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "alpha = 0.2\nseed = 4\noutput_dir = from-file\n").unwrap();
        let f = file.to_str().unwrap();

        let m = matches(&["erasing", "train", "--config", f, "--alpha", "0.7"]);
        let cfg = resolve_config(&m, None).unwrap();
        assert_eq!(cfg.hp.alpha, 0.7);
        assert_eq!(cfg.hp.seed, 4);
        assert_eq!(cfg.hp.beta, RunConfig::default().hp.beta);
        assert_eq!(cfg.output_dir, PathBuf::from("from-file"));

        let cfg = resolve_config(&m, Some("/env/root")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/env/root"));
        let m = matches(&["erasing", "train", "--config", f, "--output-dir", "flag"]);
        assert_eq!(resolve_config(&m, Some("/env/root")).unwrap().output_dir, PathBuf::from("flag"));
    }

    #[test]
    fn precedence_holds_for_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("all.cfg");
        // a file value and a flag value for each key, all different from the default
        let mut from_file = RunConfig::default();
        let mut from_flag = RunConfig::default();
        crate::config::tests_support::perturb(&mut from_file, 1);
        crate::config::tests_support::perturb(&mut from_flag, 2);
        std::fs::write(&file, from_file.to_text()).unwrap();
        for (key, _) in KEYS {
            let flag_value = from_flag.get(key).unwrap();
            let long = format!("--{}", flag_name(key));
            let m = matches(&["erasing", "train", "--config", file.to_str().unwrap(), &long, &flag_value]);
            let cfg = resolve_config(&m, None).unwrap();
            assert_eq!(cfg.get(key).unwrap(), flag_value, "flag should win for {key}");
            let m = matches(&["erasing", "train", "--config", file.to_str().unwrap()]);
            let cfg = resolve_config(&m, None).unwrap();
            assert_eq!(cfg.get(key), from_file.get(key), "file should win for {key}");
            let m = matches(&["erasing", "train"]);
            let cfg = resolve_config(&m, None).unwrap();
            assert_eq!(cfg.get(key), RunConfig::default().get(key), "default for {key}");
        }
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["erasing", "train", "--no-such-flag", "1"]), 1);
        assert_eq!(run(["erasing"]), 1);
        assert_eq!(run(["erasing", "train", "--alpha", "lots"]), 1);
        assert_eq!(run(["erasing", "train", "--rho", "2"]), 1);
        assert_eq!(run(["erasing", "ablate-alpha", "--alphas", "0,x"]), 1);
    }
}
