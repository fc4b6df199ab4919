use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tch::{Device, Kind};

use vaece::conditioning::{cd_accuracy, CdModel, PairTensors};
use vaece::explain::{explain, Bundle, ExemplarPool, Method, ModelCritic, Target};
use vaece::harness::{
    curve_svg, emit_figures, grid_scatter_svg, run_grid, selection_report, train_cd_run, train_model, CdConfig,
    DatasetKind, ExperimentConfig, ExperimentData, ExplanationFigure, GridReport, GridSpec, ModelType, RunOutput,
    TrainData, TrainedModel, TrainingCurve,
};
use vaece::metrics::{exemplar_variant_experiment, representation_report, EacReport};
use vaece::mnist::{load_mnist, make_mnist_pairs, DEFAULT_PAIRS};
use vaece::seed::{derive_seed, resolve_seed};
use vaece::synthgen::{
    generate_change_pairs, generate_dataset, generate_eac_pairs, read_pairs, write_dataset, write_pairs, EacPairSpec,
    SplitCounts, SynthConfig,
};

#[derive(Parser)]
#[command(name = "vaece", about = "Train, explain and evaluate class-disentangled VAEs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset, change pairs and eac pair lists.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Line/class table (TOML); the built-in one otherwise.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        /// 1,000/200 images per class instead of 10,000/1,000.
        #[arg(long)]
        desk: bool,
        /// Multiplies the per-class counts.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Change pairs for CD training.
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, default_value_t = 90)]
        eac_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Line-augmentation change pairs from MNIST.
    GenMnistPairs {
        /// Directory with the IDX files.
        #[arg(long)]
        mnist: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PAIRS)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the model type in the config.
        #[arg(long)]
        model: Option<ModelType>,
        /// Override the budget scale.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Train the change discriminator.
    TrainCd {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding `<prefix>_a.bin`, `<prefix>_b.bin` and the manifest.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "change_train")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out pair accuracy of a trained change discriminator.
    CdEval {
        #[arg(long)]
        cd: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "change_test")]
        prefix: String,
    },
    /// Explain one test image.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// Index into the test split.
        #[arg(long)]
        query: usize,
        /// `auto`, `class:N`, or `image:N` (a test-split index).
        #[arg(long, default_value = "auto")]
        target: String,
        #[arg(long, default_value = "graph")]
        method: Method,
        /// Exemplar probability threshold; the config's value otherwise.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Representation metrics, eac and the exemplar-variant experiment.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// JSON list of eac pairs; skipped when absent.
        #[arg(long)]
        eac_pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        variant_queries: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyperparameter grid with eac-based selection.
    Grid {
        /// Base experiment config; the grid overrides the tuned weights.
        #[arg(long)]
        config: PathBuf,
        /// Grid spec (TOML); the full explored grid otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Validation eac pairs.
        #[arg(long)]
        eac_pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-draw plots from the JSON files in a run directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn device() -> Device {
    Device::cuda_if_available()
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&s)?)
}

fn load_cd(path: Option<&PathBuf>, dev: Device) -> Result<Option<CdModel>> {
    match path {
        Some(p) => Ok(Some(CdModel::load(p, dev).with_context(|| format!("loading CD {}", p.display()))?.0)),
        None => Ok(None),
    }
}

fn gen_data(
    out: &Path,
    synth_config: Option<&Path>,
    desk: bool,
    scale: f64,
    n_pairs: usize,
    n_eac: usize,
    seed: u64,
) -> Result<()> {
    let seed = resolve_seed(seed);
    let synth = match synth_config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    let counts = if desk { SplitCounts::DESK } else { SplitCounts::FULL }.scaled(scale);
    let ds = generate_dataset(&synth, counts, seed)?;
    write_dataset(out, &synth, &ds, seed)?;
    let train_pairs = generate_change_pairs(&synth, n_pairs, derive_seed(seed, &[0xC0]))?;
    write_pairs(out, "change_train", &train_pairs)?;
    let test_pairs = generate_change_pairs(&synth, (n_pairs / 10).max(1), derive_seed(seed, &[0xC1]))?;
    write_pairs(out, "change_test", &test_pairs)?;
    // Validation and test eac pairs come from different streams.
    write_json(&out.join("eac_val.json"), &generate_eac_pairs(&synth, n_eac, derive_seed(seed, &[0xE0])))?;
    write_json(&out.join("eac_test.json"), &generate_eac_pairs(&synth, n_eac, derive_seed(seed, &[0xE1])))?;
    println!(
        "wrote {} train / {} test images, {} + {} change pairs to {}",
        ds.train.len(),
        ds.test.len(),
        train_pairs.len(),
        test_pairs.len(),
        out.display()
    );
    Ok(())
}

fn gen_mnist_pairs(mnist: &Path, out: &Path, n: usize, seed: u64) -> Result<()> {
    let seed = resolve_seed(seed);
    let m = load_mnist(mnist)?;
    let train = make_mnist_pairs(&m.train.images, n, derive_seed(seed, &[0x3A]))?;
    write_pairs(out, "change_train", &train)?;
    let test = make_mnist_pairs(&m.test.images, (n / 6).max(1), derive_seed(seed, &[0x3B]))?;
    write_pairs(out, "change_test", &test)?;
    let pos = train.iter().filter(|p| p.label).count();
    println!("wrote {} train ({pos} positive) and {} test pairs to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path, model: Option<ModelType>, scale: Option<f64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(s) = scale {
        cfg.scale = s;
    }
    cfg.validate()?;
    let dev = device();
    let data = ExperimentData::load(&cfg.data)?;
    let cd = load_cd(cfg.data.cd_checkpoint.as_ref(), dev)?;
    let seed = cfg.resolved_seed();
    let td = data.train_data(cfg.model, cfg.effective_supervision(), seed)?;
    println!("training {} for {} steps on {} images", cfg.model, cfg.effective_steps(), td.len());
    let run = RunOutput {
        dir: Some(out.to_path_buf()),
    };
    let (_, curve) = train_model(&cfg, &td, data.n_classes, cd.as_ref(), dev, &run, |p| {
        println!("step {:>8} {}", p.step, p.losses);
    })?;
    std::fs::write(out.join("curve.svg"), curve_svg(&curve, &format!("{} training", cfg.model)))?;
    println!("checkpoint {}", run.checkpoint().unwrap().display());
    Ok(())
}

fn train_cd(config: &Path, pairs: &Path, prefix: &str, out: &Path) -> Result<()> {
    let cfg = CdConfig::load(config)?;
    let dev = device();
    let data = ExperimentData::load(&cfg.data)?;
    let mut pairs = read_pairs(pairs, prefix)?;
    pairs.truncate(cfg.effective_pairs());
    let td = TrainData::from_labeled(&data.train);
    println!("training CD for {} steps on {} images and {} pairs", cfg.effective_steps(), td.len(), pairs.len());
    train_cd_run(&cfg, &td, &pairs, data.n_classes, dev, Some(out), |step, ce, acc| {
        println!("step {step:>8} pair_ce={ce:.5} pair_acc={acc:.4}");
    })?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn cd_eval(cd: &Path, pairs: &Path, prefix: &str) -> Result<()> {
    let (cd, step) = CdModel::load(cd, device())?;
    let pairs = read_pairs(pairs, prefix)?;
    let acc = cd_accuracy(&cd, &PairTensors::from_pairs(&pairs, Kind::Float), 256);
    println!("CD after {step} steps: accuracy {acc:.4} on {} pairs", pairs.len());
    Ok(())
}

fn parse_target(s: &str, data: &ExperimentData) -> Result<Target> {
    if s == "auto" {
        return Ok(Target::Auto);
    }
    let (kind, n) = s.split_once(':').context("target must be auto, class:N or image:N")?;
    let n: usize = n.parse()?;
    match kind {
        "class" => Ok(Target::Class(n)),
        "image" => Ok(Target::Image(data.test.images.get(n).context("target index out of range")?.clone())),
        _ => bail!("unknown target kind {kind:?}"),
    }
}

fn explain_cmd(model: &Path, query: usize, target: &str, method: Method, threshold: Option<f64>, out: &Path) -> Result<()> {
    let dev = device();
    let tm = TrainedModel::load(model, dev)?;
    let mut params = tm.config.graph;
    if let Some(t) = threshold {
        params.t = t;
    }
    let data = ExperimentData::load(&tm.config.data)?;
    let cd = load_cd(tm.config.data.cd_checkpoint.as_ref(), dev)?;
    let critic = match (&tm.d, &cd) {
        (Some(d), Some(cd)) => Some(ModelCritic { d, cd, batch: 64 }),
        _ => None,
    };
    if method == Method::Graph && critic.is_none() {
        bail!("graph explanations need a VAE-CE model and its CD checkpoint");
    }
    let q = data.test.images.get(query).context("query index out of range")?;
    let target = parse_target(target, &data)?;
    let pool = ExemplarPool::from_model(&tm.model, &data.test.images, 256)?;
    let bundle = Bundle {
        model: &tm.model,
        critic: critic.as_ref().map(|c| c as _),
        pool: Some(&pool),
    };
    let e = explain(q, &target, &bundle, method, &params)?;
    std::fs::create_dir_all(out)?;
    let name = format!("query{query}_{method}");
    emit_figures(
        out,
        &[ExplanationFigure {
            name: name.clone(),
            query: q,
            explanation: &e,
        }],
        None,
        None,
    )?;
    write_json(&out.join(format!("{name}.json")), &e)?;
    println!("{} steps, changed {:?}; wrote {}", e.n_steps(), e.changed, out.join(format!("{name}.png")).display());
    Ok(())
}

fn evaluate(model: &Path, eac_pairs: Option<&Path>, variant_queries: usize, out: &Path) -> Result<()> {
    let dev = device();
    let tm = TrainedModel::load(model, dev)?;
    let data = ExperimentData::load(&tm.config.data)?;
    std::fs::create_dir_all(out)?;
    let rep = representation_report(&tm.model, &data.train, &data.test, 256, tm.seed)?;
    println!("{rep:?}");
    write_json(&out.join("representation.json"), &rep)?;
    let mut eac = None;
    if let Some(p) = eac_pairs {
        if data.kind != DatasetKind::Synthetic {
            bail!("eac needs the synthetic generating process");
        }
        let pairs: Vec<EacPairSpec> = read_json(p)?;
        let cd = load_cd(tm.config.data.cd_checkpoint.as_ref(), dev)?;
        let r = selection_report(&tm, cd.as_ref(), &pairs, &data.synth)?;
        for m in &r.methods {
            println!("eac-{} {:.4} +- {:.4}", m.method, m.mean, m.std);
        }
        eac = Some(r);
    }
    if data.kind == DatasetKind::Synthetic {
        let v = exemplar_variant_experiment(&tm.model, &data.test_points, &data.synth, variant_queries, tm.config.graph.t)?;
        println!("variant selection: near {:.3}, other {:.3}", v.p_near, v.p_other);
        write_json(&out.join("variant.json"), &v)?;
    }
    emit_figures(out, &[], eac.as_ref(), None)?;
    Ok(())
}

fn grid(config: &Path, spec: Option<&Path>, eac_pairs: &Path, out: &Path) -> Result<()> {
    let base = ExperimentConfig::load(config)?;
    let spec: GridSpec = match spec {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => GridSpec::full(),
    };
    let dev = device();
    let data = ExperimentData::load(&base.data)?;
    let pairs: Vec<EacPairSpec> = read_json(eac_pairs)?;
    let cd = load_cd(base.data.cd_checkpoint.as_ref(), dev)?;
    println!("{} configurations, {} runs", spec.configurations().len(), spec.total_runs());
    let report: GridReport = run_grid(
        &spec,
        base.resolved_seed(),
        |p, run, seed| {
            let mut cfg = p.apply(&base);
            cfg.seed = seed;
            let td = data.train_data(cfg.model, cfg.effective_supervision(), seed)?;
            let dir = out.join(format!("{}_{}_{}_{}_{}_run{run}", cfg.model, p.beta_y, p.alpha, p.alpha_d, p.alpha_p));
            let (tm, _) = train_model(&cfg, &td, data.n_classes, cd.as_ref(), dev, &RunOutput { dir: Some(dir) }, |_| {})?;
            Ok(selection_report(&tm, cd.as_ref(), &pairs, &data.synth)?.selection_score)
        },
        |r| match (r.score, &r.error) {
            (Some(s), _) => println!("{} run {}: {s:.4}", r.point.label(), r.run),
            (_, Some(e)) => println!("{} run {}: failed: {e}", r.point.label(), r.run),
            _ => {}
        },
    );
    for s in &report.selections {
        println!("selected {} (mean eac {:.4} over {} runs)", s.point.label(), s.mean, s.completed);
    }
    emit_figures(out, &[], None, Some(&report))?;
    Ok(())
}

fn plot(dir: &Path) -> Result<()> {
    let mut n = 0;
    let curve = dir.join("curve.json");
    if curve.exists() {
        let c: TrainingCurve = read_json(&curve)?;
        std::fs::write(dir.join("curve.svg"), curve_svg(&c, "training"))?;
        n += 1;
    }
    let eac = dir.join("eac.json");
    let eac: Option<EacReport> = if eac.exists() { Some(read_json(&eac)?) } else { None };
    let grid = dir.join("grid.json");
    if grid.exists() {
        let g: GridReport = read_json(&grid)?;
        std::fs::write(dir.join("grid.svg"), grid_scatter_svg(&g, "minimum eac of each run"))?;
        n += 1;
    }
    if eac.is_some() {
        emit_figures(dir, &[], eac.as_ref(), None)?;
        n += 1;
    }
    println!("drew {n} plots in {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData {
            out,
            synth_config,
            desk,
            scale,
            pairs,
            eac_pairs,
            seed,
        } => gen_data(&out, synth_config.as_deref(), desk, scale, pairs, eac_pairs, seed),
        Cmd::GenMnistPairs { mnist, out, n, seed } => gen_mnist_pairs(&mnist, &out, n, seed),
        Cmd::Train {
            config,
            out,
            model,
            scale,
        } => train(&config, &out, model, scale),
        Cmd::TrainCd {
            config,
            pairs,
            prefix,
            out,
        } => train_cd(&config, &pairs, &prefix, &out),
        Cmd::CdEval { cd, pairs, prefix } => cd_eval(&cd, &pairs, &prefix),
        Cmd::Explain {
            model,
            query,
            target,
            method,
            threshold,
            out,
        } => explain_cmd(&model, query, &target, method, threshold, &out),
        Cmd::Evaluate {
            model,
            eac_pairs,
            variant_queries,
            out,
        } => evaluate(&model, eac_pairs.as_deref(), variant_queries, &out),
        Cmd::Grid {
            config,
            spec,
            eac_pairs,
            out,
        } => grid(&config, spec.as_deref(), &eac_pairs, &out),
        Cmd::Plot { dir } => plot(&dir),
    }
}
