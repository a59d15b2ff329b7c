use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mr2_core::bounds::{evaluate_bounds, BoundConfig};
use mr2_core::eval_metrics::{evaluate, forward_dataset};
use mr2_core::gradcheck::run_suite;
use mr2_core::linalg::{conjugate_exponent, sq_norm};
use mr2_core::margin_schedule::{compute_gamma, compute_gamma_lp};
use mr2_core::model::head_norm_bound;
use mr2_core::trainer::{self, ablation_suite, summarize, summary_csv, ABLATION_ARMS};
use mr2_core::{datagen, Checkpoint, Dataset, Error, HeadKind, ModelParams, Objective, Split, SynthSpec, TrainConfig};

use crate::output::{emit, CliResult, Failure, Staged};
use crate::{AblateArgs, BoundsArgs, Command, EvalArgs, GammaArgs, GradcheckArgs, SynthArgs, TrainArgs};

pub fn dispatch(command: Command, seed: Option<u64>) -> CliResult {
    match command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a),
        Command::Bounds(a) => bounds(a, seed),
        Command::Gamma(a) => gamma(a),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Ablate(a) => ablate(a, seed),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

/// Invalid documents are data errors even when the core reports them as bad input.
fn as_format(e: Error, path: &Path) -> Failure {
    match e {
        Error::Input(m) | Error::Format(m) => Failure::Core(Error::Format(format!("{}: {m}", path.display()))),
        other => Failure::Core(other),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config = TrainConfig::from_toml(&read_text(path)?).map_err(|e| as_format(e, path))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(|e| as_format(e, path))?;
    Ok(config)
}

fn load_dataset(path: &Path, split: Split) -> CliResult<Dataset> {
    Dataset::read(path, split).map_err(|e| match e {
        Error::Io(io) => Failure::Core(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))),
        other => as_format(other, path),
    })
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::read(path).map_err(|e| match e {
        Error::Io(io) => Failure::Core(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))),
        other => as_format(other, path),
    })
}

fn check_compatible(model: &ModelParams, data: &Dataset, path: &Path) -> CliResult {
    let a = model.arch();
    if data.input_dim() != a.input_dim || data.num_classes != a.num_classes {
        return Err(Failure::Core(Error::Format(format!(
            "{}: dataset has d_in = {}, K = {} but the checkpoint expects d_in = {}, K = {}",
            path.display(),
            data.input_dim(),
            data.num_classes,
            a.input_dim,
            a.num_classes
        ))));
    }
    Ok(())
}

fn synth(a: SynthArgs, seed: Option<u64>) -> CliResult {
    let mut spec = SynthSpec::from_toml(&read_text(&a.config)?).map_err(|e| as_format(e, &a.config))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train, test) = datagen::generate(&spec).map_err(|e| as_format(e, &a.config))?;
    let mut staged = Staged::default();
    staged.add(&a.train_out, &train.to_bytes()?)?;
    staged.add(&a.test_out, &test.to_bytes()?)?;
    staged.commit()?;
    println!("train: {} samples, test: {} samples, K = {}, d_in = {}", train.len(), test.len(), train.num_classes, train.input_dim());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> CliResult {
    let config = load_config(&a.config, seed)?;
    let train_set = load_dataset(&a.data, Split::Train)?;
    let test_set = match &a.test {
        Some(p) => load_dataset(p, Split::Test)?,
        None => train_set.clone(),
    };
    if test_set.input_dim() != train_set.input_dim() || test_set.num_classes != train_set.num_classes {
        return Err(Failure::Core(Error::Format("train and test sets disagree on d_in or K".into())));
    }
    let out = trainer::train(&config, &train_set, &test_set)?;
    let checkpoint = Checkpoint::new(out.model, out.gamma, out.stats)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut staged = Staged::default();
    staged.add(&a.out, &checkpoint.to_bytes())?;
    staged.add(&log_path, out.log.to_csv().as_bytes())?;
    staged.commit()?;
    if let Some(last) = out.log.records.last() {
        println!("objective {}: final loss {:.6}, test accuracy {:.4}", config.objective, last.loss, last.test_acc);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, Split::Test)?;
    check_compatible(&checkpoint.model, &data, &a.data)?;
    let report = evaluate(&checkpoint.model, &data)?;
    if let Some(p) = &a.per_class {
        let mut staged = Staged::default();
        staged.add(p, report.per_class_csv().as_bytes())?;
        staged.commit()?;
    }
    emit(a.out.as_deref(), &report.to_csv())
}

fn bounds(a: BoundsArgs, seed: Option<u64>) -> CliResult {
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(Failure::Usage(format!("--delta must lie in (0, 1), got {}", a.delta)));
    }
    if a.draws == 0 {
        return Err(Failure::Usage("--draws must be positive".into()));
    }
    if a.p.is_nan() || a.p < 1.0 {
        return Err(Failure::Usage(format!("--p must be at least 1, got {}", a.p)));
    }
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, Split::Test)?;
    check_compatible(&checkpoint.model, &data, &a.data)?;
    let (mut features, logits) = forward_dataset(&checkpoint.model, &data.features)?;
    if checkpoint.model.arch().head == HeadKind::Cosine {
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            let n = sq_norm(row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    let lambda = head_norm_bound(&checkpoint.model, Some(conjugate_exponent(a.p)));
    let config = BoundConfig { delta: a.delta, p: a.p, draws: a.draws, seed: seed.unwrap_or(0) };
    let report = evaluate_bounds(&features, &logits, &data.labels, &checkpoint.gamma, lambda, &config)?;
    emit(a.out.as_deref(), &report.to_csv())
}

fn gamma(a: GammaArgs) -> CliResult {
    let m = if a.p == 2.0 { compute_gamma(&a.alpha, a.cbar) } else { compute_gamma_lp(&a.alpha, a.cbar, a.p) }?;
    let line: Vec<String> = m.gamma().iter().map(|g| format!("{g:.*}", a.digits)).collect();
    println!("{}", line.join(","));
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: Option<u64>) -> CliResult {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    if a.tolerance.is_nan() || a.tolerance <= 0.0 {
        return Err(Failure::Usage(format!("--tolerance must be positive, got {}", a.tolerance)));
    }
    let records = run_suite(a.instances, seed.unwrap_or(0))?;
    if let Some(p) = &a.out {
        let mut csv = String::from("loss_name,instance_id,rel_error,passed\n");
        for r in &records {
            let _ = writeln!(csv, "{},{},{:e},{}", r.loss_name, r.instance_id, r.rel_error, r.rel_error <= a.tolerance);
        }
        let mut staged = Staged::default();
        staged.add(p, csv.as_bytes())?;
        staged.commit()?;
    }
    let mut failed = 0;
    let mut names: Vec<&str> = Vec::new();
    for r in &records {
        if !names.contains(&r.loss_name) {
            names.push(r.loss_name);
        }
    }
    for name in names {
        let rs: Vec<f64> = records.iter().filter(|r| r.loss_name == name).map(|r| r.rel_error).collect();
        let worst = rs.iter().copied().fold(0.0, f64::max);
        let bad = rs.iter().filter(|&&e| e.is_nan() || e > a.tolerance).count();
        failed += bad;
        println!("{name}: {} instances, max relative error {worst:.3e}, {bad} above {:e}", rs.len(), a.tolerance);
    }
    if failed > 0 {
        return Err(Failure::Core(Error::Numeric(format!("{failed} gradient checks exceeded the tolerance"))));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> CliResult {
    let arms: Vec<Objective> = if a.arms.is_empty() {
        ABLATION_ARMS.to_vec()
    } else {
        a.arms.iter().map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|e: Error| Failure::Usage(format!("--arms: {e}")))?
    };
    let config = load_config(&a.config, seed)?;
    let seeds = if a.seeds.is_empty() { vec![config.seed] } else { a.seeds.clone() };
    let train_set = load_dataset(&a.data, Split::Train)?;
    let test_set = load_dataset(&a.test, Split::Test)?;
    if test_set.input_dim() != train_set.input_dim() || test_set.num_classes != train_set.num_classes {
        return Err(Failure::Core(Error::Format("train and test sets disagree on d_in or K".into())));
    }
    let results = ablation_suite(&config, &arms, &seeds, &train_set, &test_set)?;
    let mut staged = Staged::default();
    if let Some(p) = &a.runs_out {
        let mut csv = String::from("objective,seed,overall_acc,easy_acc,medium_acc,hard_acc,m_o_avg,m_c,spread_gap\n");
        for r in &results {
            let e = &r.report;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                r.objective, r.seed, e.overall_acc, e.easy_acc, e.medium_acc, e.hard_acc, e.m_o_avg, e.m_c, e.spread_gap()
            );
        }
        staged.add(p, csv.as_bytes())?;
    }
    let summary = summary_csv(&summarize(&results));
    match &a.out {
        Some(p) => {
            staged.add(p, summary.as_bytes())?;
            staged.commit()
        }
        None => {
            staged.commit()?;
            emit(None, &summary)
        }
    }
}
