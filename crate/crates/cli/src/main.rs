use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use exunet::checkpoint::Checkpoint;
use exunet::corpus::{Corpus, NoiseKind};
use exunet::experiment::{desk_corpora, run_desk, DeskConfig};
use exunet::metrics::{
    condition_grid, format_det, format_scores, parse_trials, ConditionResult, EvalOptions, EvalReport, Evaluator,
    ReportTable,
};
use exunet::model::{Mode, Model};
use exunet::trainer::{self, grad_check, GradCheckConfig, GradTerm, TrainConfig};

/// Synthetic-corpus speaker verification experiments.
///
/// Every output goes under the run directory:
///
///   corpus/{train,test}/   corpus/trials.txt
///   train/<name>/          model.ckpt, train_log.jsonl, loss_curve.csv, checkpoints/
///   eval/<system>/         report.json, conditions/, scores/, det/
///   gradcheck/report.json
///   report/                table.txt, table.json, det/
///   desk/results.json
#[derive(Parser, Debug)]
#[command(name = "exunet", version)]
struct Cli {
    #[arg(long, env = "EXUNET_RUN_DIR", global = true)]
    run_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize training and evaluation corpora, the noise pool and the trial list.
    Corpus(CorpusArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score the trial list under the clean and noisy condition grid.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Collect evaluation JSONs into one condition-by-system table.
    Report(ReportArgs),
    /// Train and evaluate the standard systems over several seeds.
    Desk(DeskArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 8)]
    utts: usize,
    #[arg(long, default_value_t = 20)]
    test_speakers: usize,
    #[arg(long, default_value_t = 5)]
    test_utts: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 1.5)]
    duration: f64,
    #[arg(long, default_value_t = 12)]
    noise_clips: usize,
    #[arg(long, default_value_t = 3.0)]
    noise_duration: f64,
    /// Nontarget trials per target trial.
    #[arg(long, default_value_t = 3)]
    nontargets: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// baseline, unet, exunet or exunet-l.
    #[arg(long)]
    mode: Option<String>,
    /// `key = value` file; see the trainer documentation for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run name under `train/`; defaults to the mode.
    #[arg(long)]
    name: Option<String>,
    /// Corpus directory; defaults to `corpus/train` in the run directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate; defaults to `train/<name>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training run name used for the default checkpoint and system label.
    #[arg(long)]
    name: Option<String>,
    /// Column label in reports.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Noise kinds of the condition grid.
    #[arg(long, value_delimiter = ',', default_value = "stationary,babble,impulsive")]
    kinds: Vec<String>,
    /// Corrupt enrollment utterances too.
    #[arg(long)]
    corrupt_enroll: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "baseline,unet,exunet")]
    modes: Vec<String>,
    /// cce, mse, apn, embmse, total or all.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    terms: Vec<String>,
    #[arg(long, default_value_t = 20)]
    n_params: usize,
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `report.json` files from `eval` or single-condition JSONs.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct DeskArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            report_error("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match (e.downcast_ref::<exunet::Error>(), e.downcast_ref::<std::io::Error>()) {
                (Some(x), _) => x.kind(),
                (None, Some(_)) => "io",
                (None, None) => "error",
            };
            report_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

/// `error: <kind>: <message>` on a single line.
fn report_error(kind: &str, msg: &str) {
    eprintln!("error: {kind}: {}", msg.replace(['\n', '\r'], " "));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run_dir = cli.run_dir.clone().ok_or_else(|| exunet::Error::Argument("no run directory; pass --run-dir or set EXUNET_RUN_DIR".into()))?;
    let out = Outputs { root: run_dir, force: cli.force };
    match cli.cmd {
        Command::Corpus(a) => cmd_corpus(&out, a),
        Command::Train(a) => cmd_train(&out, a),
        Command::Eval(a) => cmd_eval(&out, a),
        Command::Gradcheck(a) => cmd_gradcheck(&out, a),
        Command::Report(a) => cmd_report(&out, a),
        Command::Desk(a) => cmd_desk(&out, a),
    }
}

struct Outputs {
    root: PathBuf,
    force: bool,
}

impl Outputs {
    /// Claims `rel` under the run directory, refusing if it exists unless forced.
    fn claim(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let path = self.root.join(rel);
        if path.exists() {
            if !self.force {
                return Err(exunet::Error::Argument(format!("{} already exists; pass --force to overwrite", path.display())).into());
            }
            if path.is_dir() {
                fs::remove_dir_all(&path)?;
            } else {
                fs::remove_file(&path)?;
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_corpus(out: &Outputs, a: CorpusArgs) -> anyhow::Result<()> {
    let cfg = DeskConfig {
        train_speakers: a.speakers,
        train_utts: a.utts,
        test_speakers: a.test_speakers,
        test_utts: a.test_utts,
        duration_s: a.duration,
        noise_clips: a.noise_clips,
        noise_duration_s: a.noise_duration,
        corpus_seed: a.seed,
        nontargets_per_target: a.nontargets,
        ..DeskConfig::default()
    };
    let (train, test, trials) = desk_corpora(&cfg)?;
    let dir = out.claim("corpus")?;
    train.write_to(&dir.join("train"))?;
    test.write_to(&dir.join("test"))?;
    fs::write(dir.join("trials.txt"), exunet::metrics::format_trials(&trials))?;
    let n_target = trials.iter().filter(|t| t.target).count();
    println!(
        "corpus: {} training and {} test utterances, {} noise clips, {} trials ({} target)",
        train.utterances.len(),
        test.utterances.len(),
        train.noise.len(),
        trials.len(),
        n_target
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &a.mode {
        cfg.set("mode", m)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| exunet::Error::Config(format!("`{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(out: &Outputs, a: TrainArgs) -> anyhow::Result<()> {
    let corpus_dir = a.corpus.clone().unwrap_or_else(|| out.path("corpus/train"));
    let outcome = if let Some(ck) = &a.resume {
        let name = a.name.clone().ok_or_else(|| exunet::Error::Argument("--resume needs --name".into()))?;
        let corpus = Corpus::load(&corpus_dir)?;
        trainer::resume_training(&corpus, ck, &out.path(&format!("train/{name}")))?
    } else {
        let cfg = train_config(&a)?;
        let name = a.name.clone().or_else(|| a.mode.clone()).unwrap_or_else(|| cfg.mode.to_string());
        let corpus = Corpus::load(&corpus_dir)?;
        let n = cfg.model_config(corpus.manifest.speakers.len());
        println!("{name}: {} parameters", exunet::model::count_params(&n)?);
        let dir = out.claim(&format!("train/{name}"))?;
        trainer::train(&corpus, cfg, &dir)?
    };
    if let Some(last) = outcome.epochs.last() {
        println!("epoch {}: total loss {:.4} (cce {:.4}, mse {:.4}, apn {:.4})", last.epoch, last.total, last.cce, last.mse, last.apn);
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn cmd_eval(out: &Outputs, a: EvalArgs) -> anyhow::Result<()> {
    let ck_path = match (&a.checkpoint, &a.name) {
        (Some(p), _) => p.clone(),
        (None, Some(n)) => out.path(&format!("train/{n}/{}", trainer::FINAL_CHECKPOINT)),
        (None, None) => bail!(exunet::Error::Argument("pass --checkpoint or --name".into())),
    };
    let kinds = a.kinds.iter().map(|k| k.parse::<NoiseKind>()).collect::<exunet::Result<Vec<_>>>()?;
    let ck = Checkpoint::read(&ck_path)?;
    let model: Model<f32> = ck.model()?;
    let system = a.system.clone().or_else(|| a.name.clone()).unwrap_or_else(|| model.cfg.mode.to_string());
    let trials = parse_trials(&a.trials.clone().unwrap_or_else(|| out.path("corpus/trials.txt")))?;
    let corpus = Corpus::load(&a.corpus.clone().unwrap_or_else(|| out.path("corpus/test")))?;
    let dir = out.claim(&format!("eval/{system}"))?;

    let mut ev = Evaluator::new(&model, &corpus, EvalOptions { corrupt_enroll: a.corrupt_enroll, seed: a.seed })?;
    let conditions = condition_grid(&kinds);
    let (report, curves) = ev.evaluate(&system, &trials, &conditions)?;
    for sub in ["conditions", "scores", "det"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (res, (scores, det)) in report.conditions.iter().zip(&curves) {
        let tag = res.condition.tag();
        write_json(&dir.join(format!("conditions/{tag}.json")), res)?;
        fs::write(dir.join(format!("scores/{tag}.txt")), format_scores(&trials, scores))?;
        fs::write(dir.join(format!("det/{tag}.tsv")), format_det(det))?;
        println!("{tag:<16} EER {:6.2}%  minDCF {:.4}", 100.0 * res.eer, res.min_dcf);
    }
    write_json(&dir.join("report.json"), &report)?;
    println!("{:<16} EER {:6.2}%  minDCF {:.4}", "average", 100.0 * report.average.eer, report.average.min_dcf);
    Ok(())
}

fn cmd_gradcheck(out: &Outputs, a: GradcheckArgs) -> anyhow::Result<()> {
    let modes = a.modes.iter().map(|m| m.parse::<Mode>()).collect::<exunet::Result<Vec<_>>>()?;
    let terms: Vec<GradTerm> = if a.terms.iter().any(|t| t == "all") {
        GradTerm::ALL.to_vec()
    } else {
        a.terms.iter().map(|t| t.parse()).collect::<exunet::Result<_>>()?
    };
    let path = out.claim("gradcheck/report.json")?;
    let mut results = Vec::new();
    for &mode in &modes {
        let cfg = GradCheckConfig { n_params: a.n_params, h: a.h, tol: a.tol, seed: a.seed, ..GradCheckConfig::tiny(mode) };
        for &term in terms.iter().filter(|t| t.applies_to(mode)) {
            let r = grad_check(&cfg, term)?;
            println!(
                "{:<9} {:<7} params {:>3}  max rel err {:.3e}  {}",
                mode.to_string(),
                term.to_string(),
                r.checks.len(),
                r.max_rel_err,
                if r.passed { "PASS" } else { "FAIL" }
            );
            results.push(r);
        }
    }
    write_json(&path, &results)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{}/{}", r.mode, r.term)).collect();
    if !failed.is_empty() {
        return Err(anyhow!(exunet::Error::Numerical(format!("gradient check failed for {}", failed.join(", ")))));
    }
    Ok(())
}

fn read_results(path: &Path) -> anyhow::Result<Vec<ConditionResult>> {
    let text = fs::read_to_string(path).map_err(|_| exunet::Error::NotFound(path.to_path_buf()))?;
    if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        return Ok(r.conditions);
    }
    serde_json::from_str::<ConditionResult>(&text)
        .map(|r| vec![r])
        .map_err(|e| exunet::Error::Format(format!("{} is neither an evaluation report nor a condition result: {e}", path.display())).into())
}

fn cmd_report(out: &Outputs, a: ReportArgs) -> anyhow::Result<()> {
    let mut results = Vec::new();
    for p in &a.inputs {
        results.extend(read_results(p)?);
    }
    let table = ReportTable::from_results(&results)?;
    let dir = out.claim("report")?;
    fs::create_dir_all(&dir)?;
    let text = table.render();
    fs::write(dir.join("table.txt"), &text)?;
    write_json(&dir.join("table.json"), &table)?;
    for p in &a.inputs {
        let det = p.parent().unwrap_or(Path::new(".")).join("det");
        let Ok(entries) = fs::read_dir(&det) else { continue };
        let system = read_results(p)?.first().map(|r| r.system.clone()).unwrap_or_default();
        fs::create_dir_all(dir.join("det"))?;
        for e in entries {
            let e = e?;
            fs::copy(e.path(), dir.join("det").join(format!("{system}__{}", e.file_name().to_string_lossy())))?;
        }
    }
    print!("{text}");
    Ok(())
}

fn cmd_desk(out: &Outputs, a: DeskArgs) -> anyhow::Result<()> {
    let mut cfg = DeskConfig { seeds: a.seeds, ..DeskConfig::default() };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let path = out.claim("desk/results.json")?;
    let result = run_desk(&cfg, |r| println!("{:<15} seed {}  noisy EER {:6.2}%", r.system, r.seed, 100.0 * r.noisy_eer()))?;
    for s in &cfg.systems {
        let m = result.mean_noisy_eer(&s.name).unwrap_or(f64::NAN);
        println!("{:<15} mean noisy EER {:6.2}%", s.name, 100.0 * m);
    }
    write_json(&path, &result)?;
    Ok(())
}
