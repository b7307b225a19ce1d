//! `evmark` — synthesize data, train, evaluate, and inspect the RGB–event
//! marker recognizer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evmark_core::decoder::sample_permutations;
use evmark_core::event::{
    generate_dataset, load_sample, parse_event_csv, read_manifest, read_ppm, resize_bilinear,
    synthesize_frame, write_dataset, DatasetConfig, Degradation, SamplePair,
};
use evmark_core::hypergraph::FusionStrategy;
use evmark_core::model::{EvalMode, Model, ModelConfig};
use evmark_core::nn::{GradStore, Graph, ParamSet};
use evmark_core::train::{
    build_model, run_eval, run_training, Checkpoint, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "evmark",
    version,
    about = "Desk-scale RGB-event kilometer-marker recognizer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a labelled synthetic RGB + event dataset to disk.
    SynthData(SynthArgs),
    /// Train on a dataset manifest and write checkpoint + metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
    /// Predict the text on one RGB image + event stream pair.
    Infer(InferArgs),
    /// Finite-difference validation of the full model gradient.
    GradCheck(GradCheckArgs),
    /// Print the fused hypergraph built for one dataset sample.
    InspectHypergraph(InspectArgs),
    /// Sweep fusion strategies x inject layers x permutation counts.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (manifest.txt + img/ are created inside).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Sample-id prefix, e.g. "train" -> train-00042.
    #[arg(long, default_value = "sample")]
    prefix: String,
    #[arg(long, default_value = "0123456789K+")]
    charset: String,
    /// Disable the random degradation mix (all samples clean).
    #[arg(long)]
    clean: bool,
    /// Apply power-law darkening with this gamma to every RGB image.
    #[arg(long)]
    dark: Option<f64>,
    /// Apply Gaussian blur with this sigma to every RGB image.
    #[arg(long)]
    blur: Option<f64>,
    /// Skip writing per-sample event CSV files.
    #[arg(long)]
    no_events: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by synth-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and metrics.log.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (defaults apply to unset keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config override, e.g. --set epochs=5 (beats the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// rgb | event | fused.
    #[arg(long, default_value = "fused")]
    mode: String,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// RGB image (PPM).
    image: PathBuf,
    /// Event stream (CSV).
    events: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Sample id from the manifest.
    sample_id: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory for per-run artifacts and ablation.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 192)]
    train_samples: usize,
    #[arg(long, default_value_t = 64)]
    test_samples: usize,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_blocks: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::SynthData(a) => synth_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Infer(a) => infer(a),
        Cmd::GradCheck(a) => grad_check(a),
        Cmd::InspectHypergraph(a) => inspect_hypergraph(a),
        Cmd::Ablate(a) => ablate(a),
    }
}

fn load_dataset(manifest: &Path) -> Result<Vec<SamplePair>> {
    let entries = read_manifest(manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| {
            load_sample(base, e)
                .with_context(|| format!("loading sample `{}`", e.id))
                .map_err(Into::into)
        })
        .collect()
}

fn load_model(checkpoint: &Path) -> Result<(TrainConfig, ParamSet, Model)> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = TrainConfig::from_text(&ck.config_text)
        .context("checkpoint carries an unreadable config")?;
    let (mut params, model) = build_model(&cfg)?;
    ck.apply_params(&mut params)?;
    Ok((cfg, params, model))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut fixed = Vec::new();
    if let Some(gamma) = a.dark {
        fixed.push(Degradation::Dark { gamma });
    }
    if let Some(sigma) = a.blur {
        fixed.push(Degradation::Blur { sigma });
    }
    let cfg = DatasetConfig {
        n_samples: a.samples,
        seed: a.seed,
        id_prefix: a.prefix,
        charset: a.charset,
        degrade_mix: !a.clean && fixed.is_empty(),
        fixed,
        ..DatasetConfig::default()
    };
    let manifest = write_dataset(&a.out, &cfg, !a.no_events)?;
    println!("samples={} manifest={}", a.samples, manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set `{kv}` is not KEY=VALUE"))?;
        cfg.apply_kv(k.trim(), v.trim())?;
    }
    let samples = load_dataset(&a.data)?;
    let outcome = run_training(&samples, &cfg, &a.out, a.resume.as_deref(), None)?;
    println!(
        "steps={} final_loss={:.6} wall_secs={:.1}",
        outcome.steps, outcome.final_loss, outcome.wall_secs
    );
    println!("checkpoint={}", outcome.checkpoint.display());
    println!("metrics={}", outcome.metrics.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mode: EvalMode = a.mode.parse()?;
    let (_, params, model) = load_model(&a.checkpoint)?;
    let samples = load_dataset(&a.data)?;
    let report = run_eval(&model, &params, &samples, mode)?;
    let text = format!("mode={mode}\n{report}");
    println!("{text}");
    if let Some(path) = a.out {
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let (_, params, model) = load_model(&a.checkpoint)?;
    let (in_h, in_w) = (model.cfg.patch.input_h, model.cfg.patch.input_w);
    let mut rgb = read_ppm(&a.image)?;
    if rgb.h() != in_h || rgb.w() != in_w {
        rgb = resize_bilinear(&rgb, in_h, in_w)?;
    }
    let stream = parse_event_csv(&a.events)?;
    let (t0, t1) = match stream.events() {
        [] => (0, 0),
        evs => (evs[0].t, evs[evs.len() - 1].t),
    };
    let mut egray = synthesize_frame(&stream, t0, t1)?;
    if egray.h() != in_h || egray.w() != in_w {
        egray = resize_bilinear(&egray, in_h, in_w)?;
    }
    let pred = model.predict(&params, &rgb, &egray, EvalMode::Fused)?;
    println!("prediction={pred}");
    Ok(())
}

/// Full-model finite-difference check at reduced dimensions (8 tokens,
/// width 32, two blocks), one fusion strategy per gradient path.
fn grad_check(a: GradCheckArgs) -> Result<()> {
    use evmark_core::nn::grad_check_params;
    use rand::{Rng, SeedableRng};

    let mut worst: f64 = 0.0;
    for fusion in [
        FusionStrategy::HypergraphPrompt,
        FusionStrategy::HypergraphFusion,
        FusionStrategy::Concatenate,
        FusionStrategy::Addition,
    ] {
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("input_h", "8"),
            ("input_w", "32"),
            ("d_model", "32"),
            ("n_blocks", "2"),
            ("nhead", "2"),
            ("ffn_hidden", "48"),
            ("t_max", "4"),
            ("mlp_hidden", "40"),
            ("knn_k", "3"),
            ("inject_layers", "1,2"),
            ("seed", "11"),
        ] {
            cfg.apply_kv(k, v)?;
        }
        cfg.model.fusion = fusion;
        let (mut params, model) = build_model(&cfg)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let rgb = evmark_core::event::ImagePlane::new(
            8,
            32,
            3,
            (0..8 * 32 * 3).map(|_| rng.random_range(0.0..=1.0)).collect(),
        )?;
        let ev = evmark_core::event::ImagePlane::new(
            8,
            32,
            1,
            (0..8 * 32).map(|_| rng.random_range(0.0..=1.0)).collect(),
        )?;
        let perms = sample_permutations(4, 2, 5)?;

        let mut g = Graph::new(&params);
        let loss = model.sample_loss(&mut g, &rgb, &ev, "K15+", &perms)?;
        g.tape.backward(loss)?;
        let mut grads = GradStore::zeros_like(&params);
        g.collect_grads(&mut grads);
        drop(g);

        let max_rel = grad_check_params(
            &mut params,
            &grads,
            |p| {
                let mut g = Graph::new(p);
                let loss = model.sample_loss(&mut g, &rgb, &ev, "K15+", &perms)?;
                Ok(g.tape.value(loss).data()[0])
            },
            a.coords,
            1e-5,
            905,
        )?;
        println!("fusion={fusion} max_rel_err={max_rel:.3e}");
        worst = worst.max(max_rel);
    }
    if worst >= 1e-4 {
        bail!("gradient check failed: max relative error {worst:.3e} >= 1e-4");
    }
    println!("all gradient checks passed (worst {worst:.3e} < 1e-4)");
    Ok(())
}

fn inspect_hypergraph(a: InspectArgs) -> Result<()> {
    let (_, params, model) = load_model(&a.checkpoint)?;
    let entries = read_manifest(&a.data)?;
    let base = a.data.parent().unwrap_or(Path::new("."));
    let entry = entries
        .iter()
        .find(|e| e.id == a.sample_id)
        .with_context(|| format!("sample `{}` not in manifest", a.sample_id))?;
    let sample = load_sample(base, entry)?;

    let mut g = Graph::new(&params);
    let (_, hg) = model.image_tokens(&mut g, &sample.rgb, &sample.event_gray, EvalMode::Fused)?;
    let hg = hg.with_context(|| {
        format!("fusion strategy `{}` builds no hypergraph", model.cfg.fusion)
    })?;

    println!("sample={} label={}", sample.id, sample.label);
    println!("vertices={} edges={}", hg.n_vertices(), hg.n_edges());
    let degrees = hg.vertex_degrees();
    let (min, max) = degrees
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let mean = degrees.iter().sum::<f64>() / degrees.len() as f64;
    println!("vertex_degree min={min} mean={mean:.2} max={max}");
    for e in 0..hg.n_edges() {
        let members: Vec<String> = hg.edge(e).iter().map(|v| v.to_string()).collect();
        println!("edge {e}: {{{}}}", members.join(", "));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    if a.d_model % 32 != 0 {
        bail!("--d-model must be a multiple of 32");
    }
    let make_set = |prefix: &str, seed: u64, clean: bool, n: usize| -> Result<Vec<SamplePair>> {
        let cfg = DatasetConfig {
            n_samples: n,
            seed,
            id_prefix: prefix.into(),
            degrade_mix: !clean,
            ..DatasetConfig::default()
        };
        Ok(generate_dataset(&cfg)?.into_iter().map(|r| r.pair).collect())
    };
    let train_set = make_set("ab-train", a.seed, false, a.train_samples)?;
    let test_set = make_set("ab-test", a.seed + 1, true, a.test_samples)?;

    std::fs::create_dir_all(&a.out)?;
    let mut rows = vec![format!(
        "{:<18} {:<6} {:>2} {:>10} {:>8} {:>7}",
        "fusion", "inject", "K", "final_loss", "word_acc", "secs"
    )];
    for fusion in FusionStrategy::ALL {
        for inject_all in [false, true] {
            for k_perms in [1usize, 6] {
                let mut cfg = TrainConfig::default();
                cfg.model = ModelConfig::desk(fusion);
                cfg.apply_kv("d_model", &a.d_model.to_string())?;
                cfg.apply_kv("n_blocks", &a.n_blocks.to_string())?;
                cfg.apply_kv("ffn_hidden", &(4 * a.d_model).to_string())?;
                cfg.apply_kv("mlp_hidden", &(4 * a.d_model).to_string())?;
                cfg.model.inject_layers = if inject_all {
                    (1..=a.n_blocks).collect()
                } else {
                    vec![a.n_blocks]
                };
                cfg.batch_size = a.batch_size;
                cfg.epochs = a.epochs;
                cfg.seed = a.seed;
                cfg.k_perms = k_perms;
                let inject_desc = if inject_all { "all" } else { "last" };
                let run_dir = a.out.join(format!("run-{fusion}-{inject_desc}-k{k_perms}"));
                let outcome = run_training(&train_set, &cfg, &run_dir, None, None)?;
                let (mut params, model) = build_model(&cfg)?;
                Checkpoint::load(&outcome.checkpoint)?.apply_params(&mut params)?;
                let report = run_eval(&model, &params, &test_set, EvalMode::Fused)?;
                let row = format!(
                    "{:<18} {:<6} {:>2} {:>10.4} {:>8.4} {:>7.1}",
                    fusion.to_string(),
                    inject_desc,
                    k_perms,
                    outcome.final_loss,
                    report.word_acc,
                    outcome.wall_secs
                );
                println!("{row}");
                rows.push(row);
            }
        }
    }
    let table = rows.join("\n") + "\n";
    let table_path = a.out.join("ablation.txt");
    std::fs::write(&table_path, &table)?;
    println!("table={}", table_path.display());
    Ok(())
}
