use std::path::{Path, PathBuf};

use prefopt::datagen::sample_tuples;
use prefopt::experiments::{
    build_interpolation_instance, emit_report, run_degeneracy_probe, run_interpolation, run_preservation,
    run_training, to_json_17, Check, ExperimentReport, ProbeLambdas,
};
use prefopt::losses::gradcheck::{gradient_check, FD_TOL};
use prefopt::{BanditInstance, Execution, LossKind, PreferenceDataset};

use crate::config::{experiment_config, resolve_seed, train_config, FileConfig};
use crate::{
    CliError, Command, DegeneracyArgs, GenDataArgs, GradcheckArgs, SweepArgs, TrainArgs, EXIT_ABORT, EXIT_OK,
    EXIT_THRESHOLD,
};

pub fn run(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Interp(a) => sweep(a, run_interpolation),
        Command::Preserve(a) => sweep(a, run_preservation),
        Command::Degeneracy(a) => degeneracy(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenData(a) => gen_data(a),
    }
}

type Runner = fn(
    &[LossKind],
    Option<&[f64]>,
    &prefopt::experiments::ExperimentConfig,
    Execution,
) -> prefopt::Result<ExperimentReport>;

fn sweep(args: SweepArgs, runner: Runner) -> Result<i32, CliError> {
    let file = FileConfig::load(args.train.config.as_deref())?;
    let cfg = experiment_config(&args.train, &file)?;
    let methods = args.methods.map(|m| m.0).or(file.methods.clone()).unwrap_or_else(|| LossKind::PRESETS.to_vec());
    let lambdas = args.lambdas.map(|l| l.0).or(file.lambdas.clone());
    let report = runner(&methods, lambdas.as_deref(), &cfg, Execution::Parallel)?;
    finish(&report, &args.train.out)
}

fn degeneracy(args: DegeneracyArgs) -> Result<i32, CliError> {
    let file = FileConfig::load(args.train.config.as_deref())?;
    let cfg = experiment_config(&args.train, &file)?;
    let lambdas = ProbeLambdas { dpo: args.dpo_lambda, fdpo_js: args.fdpo_lambda, expo_reg: args.expo_reg_lambda };
    let report = run_degeneracy_probe(&args.ref_a.0, &args.ref_b.0, &lambdas, &cfg, Execution::Parallel)?;
    finish(&report, &args.train.out)
}

fn load_instance(path: Option<&Path>) -> Result<BanditInstance, CliError> {
    match path {
        None => Ok(build_interpolation_instance()),
        Some(p) => BanditInstance::load(p).map_err(|e| CliError::Validation(format!("--instance: {e}"))),
    }
}

fn train(args: TrainArgs) -> Result<i32, CliError> {
    let file = FileConfig::load(args.train.config.as_deref())?;
    let cfg = train_config(&args.train, &file)?;
    let instance = load_instance(args.instance.as_deref())?;
    let data = args
        .data
        .as_deref()
        .map(|p| PreferenceDataset::load(&instance, p).map_err(|e| CliError::Validation(format!("--data: {e}"))))
        .transpose()?;
    let methods = args.methods.map(|m| m.0).or(file.methods.clone()).unwrap_or_else(|| LossKind::PRESETS.to_vec());
    let lambdas = args.lambdas.map(|l| l.0).or(file.lambdas.clone()).unwrap_or_else(|| vec![0.1]);
    let report = run_training(&instance, &methods, &lambdas, &cfg, data.as_ref(), Execution::Parallel)?;
    for c in &report.cells {
        for p in &c.prompts {
            println!("{} lambda={} {}: policy {:?}", c.method, c.lambda, p.prompt_id, p.policy);
        }
    }
    finish(&report, &args.train.out)
}

fn describe(check: &Check) -> String {
    let mut s = check.name.clone();
    if let Some(m) = check.method {
        s.push_str(&format!(" [{m}"));
        if let Some(l) = check.lambda {
            s.push_str(&format!(" lambda={l}"));
        }
        s.push(']');
    }
    let conds: Vec<String> = check
        .conditions
        .iter()
        .map(|c| {
            let op = serde_json::to_value(c.op).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            format!("{}={:.4} {op} {}", c.quantity, c.measured, c.threshold)
        })
        .collect();
    format!("{s}: {}", conds.join(", "))
}

fn finish(report: &ExperimentReport, out: &Path) -> Result<i32, CliError> {
    let files = emit_report(report, out)?;
    for c in &report.cells {
        if let Some(e) = &c.error {
            eprintln!("aborted: {} lambda={}: {e}", c.method, c.lambda);
        }
    }
    for check in &report.checks {
        println!("{} {}", if check.passed { "PASS" } else { "FAIL" }, describe(check));
    }
    println!("wrote {}", files.directory.display());
    Ok(if report.aborted_cells() > 0 {
        EXIT_ABORT
    } else if !report.passed() {
        EXIT_THRESHOLD
    } else {
        EXIT_OK
    })
}

fn gradcheck(args: GradcheckArgs) -> Result<i32, CliError> {
    let seed = resolve_seed(args.seed, &FileConfig::default())?;
    let mut results = Vec::new();
    for &kind in &args.methods.0 {
        let r = gradient_check(kind, args.trials, seed)?;
        println!(
            "{} {kind}: worst relative error {:.3e} over {} trials (threshold {FD_TOL:e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.worst_relative_error,
            r.trials
        );
        results.push(r);
    }
    let dir = args.out.join("gradcheck");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Abort(format!("{}: {e}", dir.display())))?;
    let summary = serde_json::json!({
        "config": {"methods": args.methods.0, "trials": args.trials, "seed": seed},
        "results": results,
    });
    let path = dir.join("summary.json");
    write(&path, to_json_17(&summary)?)?;
    println!("wrote {}", path.display());
    Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_THRESHOLD })
}

fn gen_data(args: GenDataArgs) -> Result<i32, CliError> {
    let seed = resolve_seed(args.seed, &FileConfig::default())?;
    let instance = load_instance(args.instance.as_deref())?;
    let data = sample_tuples(&instance, args.n, args.pairs, seed)?;
    let pairs = serde_json::to_value(args.pairs).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let dir = args.out.join("gen-data").join(&instance.content_hash()[..16]);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Abort(format!("{}: {e}", dir.display())))?;
    let path: PathBuf = dir.join(format!("{pairs}_n{}_s{seed}.csv", args.n));
    data.save(&instance, &path)?;
    println!("wrote {} tuples to {}", data.len(), path.display());
    Ok(EXIT_OK)
}

fn write(path: &Path, mut text: String) -> Result<(), CliError> {
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Abort(format!("{}: {e}", path.display())))
}
