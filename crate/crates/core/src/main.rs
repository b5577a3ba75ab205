use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use llu::error::{LluError, Result};
use llu::eval::{evaluate, sample_shots, split_base_new, Evaluation, Report};
use llu::featio::{read_class_embeddings, read_feature_set, write_atomic, write_class_embeddings, write_feature_set};
use llu::gradcheck::{run_gradcheck, GradcheckOptions};
use llu::locality::DiracAlpha;
use llu::synth::{synth_dataset, SynthParams};
use llu::train::{ablation_preset, epochs_for_shots, train_with, InitScheme, TrainConfig, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "llu", version, about = "Localized latent updates on frozen image/text embeddings")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LLU_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test/classes triple.
    Synth(SynthArgs),
    /// Fit the adapters on labeled features.
    Train(TrainArgs),
    /// Zero-shot accuracy with or without a trained model.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarize a model file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.4)]
    sigma_image: f64,
    #[arg(long, default_value_t = 0.6)]
    sigma_text: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting configuration; the flags below override it.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Anchor cap for the image side; 0 keeps every training image.
    #[arg(long)]
    max_anchors: Option<usize>,
    /// smooth, constant, dirac or off.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    dirac_threshold: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<DiracAlpha>)]
    dirac_alpha: Option<DiracAlpha>,
    /// Defaults to a count chosen from the shots per class.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shared_adapter: bool,
    #[arg(long, value_parser = parse_from_str::<InitScheme>)]
    init: Option<InitScheme>,
    #[arg(long)]
    no_renorm: bool,
    /// Train on the first half of the classes only.
    #[arg(long)]
    split_base_new: bool,
    /// Subsample this many records per class before training.
    #[arg(long)]
    shots: Option<usize>,
}

fn parse_from_str<T: std::str::FromStr<Err = LluError>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: LluError| e.to_string())
}

impl TrainArgs {
    fn config(&self, max_shots: usize) -> Result<TrainConfig> {
        let mut cfg = ablation_preset(&self.preset)?;
        cfg.epochs = epochs_for_shots(max_shots);
        if let Some(v) = self.beta {
            cfg.mask.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.mask.gamma = v;
        }
        if let Some(v) = &self.mask {
            cfg.mask.mode = v.clone();
        }
        if let Some(v) = self.dirac_threshold {
            cfg.mask.dirac_threshold = v;
        }
        if let Some(v) = self.dirac_alpha {
            cfg.mask.dirac_alpha = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.max_anchors {
            cfg.max_anchors = (v > 0).then_some(v);
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.init {
            cfg.init = v;
        }
        cfg.shared_adapter |= self.shared_adapter;
        cfg.renorm &= !self.no_renorm;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Restrict {
    Base,
    New,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Omit for the frozen zero-shot baseline.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score base and new halves as separate closed sets and report H.
    #[arg(long)]
    split_base_new: bool,
    #[arg(long, value_enum, default_value_t = Restrict::All)]
    restrict: Restrict,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,8,32")]
    dim: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let p = SynthParams {
        dim: a.dim,
        n_classes: a.classes,
        shots_train: a.shots,
        n_test_per_class: a.test_per_class,
        sigma_image: a.sigma_image,
        sigma_text_offset: a.sigma_text,
        seed: a.seed,
    };
    p.validate()?;
    if p.is_crowded() {
        eprintln!("warning: dim {} is below the class count {}", p.dim, p.n_classes);
    }
    let data = synth_dataset(&p)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_feature_set(&data.train, a.out_dir.join("train.lluf"))?;
    write_feature_set(&data.test, a.out_dir.join("test.lluf"))?;
    write_class_embeddings(&data.classes, a.out_dir.join("classes.lluf"))?;
    println!(
        "wrote {} train / {} test records, {} classes, dim {} to {}",
        data.train.len(),
        data.test.len(),
        data.classes.len(),
        p.dim,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut features = read_feature_set(&a.train)?;
    let mut classes = read_class_embeddings(&a.classes)?;
    if features.n_classes() != classes.len() {
        return Err(LluError::InvalidSet(format!(
            "{} names {} classes, {} holds {}",
            a.train.display(),
            features.n_classes(),
            a.classes.display(),
            classes.len()
        )));
    }
    if a.split_base_new {
        let (base, _) = split_base_new(classes.len())?;
        features = features.restrict_to(&base)?;
        classes = classes.subset(&base)?;
    }
    let seed = a.seed.unwrap_or(0);
    if let Some(shots) = a.shots {
        features = sample_shots(&features, shots, seed)?;
    }
    let max_shots = features.class_counts().into_iter().max().unwrap_or(0);
    let cfg = a.config(max_shots)?;
    println!(
        "training on {} records, {} classes, dim {}, {} epochs",
        features.len(),
        classes.len(),
        features.dim(),
        cfg.epochs
    );
    let out = train_with(&features, &classes, &cfg, |epoch, loss| {
        println!("epoch {:>4}  lr {:.3e}  loss {:.6}", epoch + 1, cfg.learning_rate_at(epoch), loss);
    })?;
    out.model.save(&a.out)?;
    println!(
        "distance to identity: image {:.6e}, text {:.6e}",
        out.model.adapters.image().distance_to_identity(),
        out.model.adapters.text().distance_to_identity()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_row(name: &str, e: &Evaluation) {
    println!("{name:<6} {:>7} {:>9.2}", e.total(), 100.0 * e.accuracy());
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let test = read_feature_set(&a.test)?;
    let classes = read_class_embeddings(&a.classes)?;
    let model = a.model.as_deref().map(TrainedModel::load).transpose()?;
    let fingerprint = model.as_ref().map(TrainedModel::fingerprint).transpose()?;
    let names = classes.class_names();

    println!("{:<6} {:>7} {:>9}", "split", "n", "acc %");
    let report = if a.split_base_new || a.restrict != Restrict::All {
        let (base, new) = split_base_new(classes.len())?;
        let eb = matches!(a.restrict, Restrict::Base | Restrict::All)
            .then(|| evaluate(&test, model.as_ref(), &classes, Some(&base)))
            .transpose()?;
        let en = matches!(a.restrict, Restrict::New | Restrict::All)
            .then(|| evaluate(&test, model.as_ref(), &classes, Some(&new)))
            .transpose()?;
        match (&eb, &en) {
            (Some(b), Some(n)) => {
                print_row("base", b);
                print_row("new", n);
                let r = Report::from_base_new(b, n, names, fingerprint);
                println!("{:<6} {:>7} {:>9.2}", "H", "", 100.0 * r.h.unwrap_or(0.0));
                r
            }
            (Some(b), None) => {
                print_row("base", b);
                let mut r = Report::from_evaluation(b, names, fingerprint);
                r.base = Some(r.accuracy);
                r
            }
            (None, Some(n)) => {
                print_row("new", n);
                let mut r = Report::from_evaluation(n, names, fingerprint);
                r.new = Some(r.accuracy);
                r
            }
            (None, None) => unreachable!("restrict selects at least one half"),
        }
    } else {
        let e = evaluate(&test, model.as_ref(), &classes, None)?;
        print_row("all", &e);
        Report::from_evaluation(&e, names, fingerprint)
    };
    if let Some(path) = &a.report {
        write_atomic(path, report.to_json()?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let summary = run_gradcheck(&GradcheckOptions {
        dims: a.dim.clone(),
        classes: a.classes,
        batch: a.batch,
        trials: a.trials,
        tolerance: a.tolerance,
        epsilon: a.epsilon,
        seed: a.seed,
    })?;
    println!(
        "checked {} configurations (dims {:?}, {} trials per mask mode)",
        summary.cases.len(),
        a.dim,
        a.trials
    );
    println!("max relative error {:.3e} (tolerance {:e})", summary.max_error(), a.tolerance);
    let failures = summary.failures();
    for c in &failures {
        println!(
            "FAIL dim {} mode {} trial {} shared {} renorm {} lambda {} tau {} beta {:.4} gamma {:.4}: {:.3e}",
            c.dim, c.mode, c.trial, c.shared, c.renorm, c.lambda, c.tau, c.beta, c.gamma, c.max_rel_error
        );
    }
    println!("{}", if failures.is_empty() { "PASS" } else { "FAIL" });
    Ok(failures.is_empty())
}

/// The serialized name of a unit enum variant.
fn lowercase_name<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let m = TrainedModel::load(path)?;
    let c = &m.config;
    println!("dim              {}", m.dim());
    println!("tau              {}", m.tau.value());
    println!("renorm           {}", m.renorm);
    println!(
        "mask             {} (beta {}, gamma {}, dirac threshold {}, dirac alpha {})",
        m.mask.mode,
        m.mask.beta,
        m.mask.gamma,
        m.mask.dirac_threshold,
        lowercase_name(&m.mask.dirac_alpha)
    );
    println!("adapters         {}", if m.adapters.is_shared() { "shared" } else { "separate" });
    println!("anchors image    {}", m.anchors_image.len());
    println!("anchors text     {}", m.anchors_text.len());
    println!("classes          {}", m.class_names.join(", "));
    println!("distance image   {:.6e}", m.adapters.image().distance_to_identity());
    println!("distance text    {:.6e}", m.adapters.text().distance_to_identity());
    println!("lambda           {}", c.lambda);
    println!(
        "max anchors      {}",
        c.max_anchors.map_or("all".to_string(), |k| k.to_string())
    );
    println!("epochs           {}", c.epochs);
    println!("learning rate    {}", c.learning_rate);
    println!("momentum         {}", c.momentum);
    println!("batch            {}", c.batch_size);
    println!("init             {}", lowercase_name(&c.init));
    println!("seed             {}", c.seed);
    println!("config           {}", m.config_fingerprint());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LluError::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(&a.model).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
