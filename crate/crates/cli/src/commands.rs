use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use prototransfer::autodiff::Checkpoint;
use prototransfer::backbone::EmbeddingNetwork;
use prototransfer::config::RunConfig;
use prototransfer::data::{convert_directory, SampleFormat, Split};
use prototransfer::eval::{
    ablation_sweep, ablation_table, build_id, evaluate, markdown_table, write_ablation_csv, write_episodes_csv,
    write_markdown, write_summary_csv, AblationPoint, Adaptor, EvalSpec, ReportHeader, SweepSettings,
};
use prototransfer::fewshot::{proto_tune, train_pre_linear, train_protonet_supervised, Scope};
use prototransfer::gradcheck::{gradcheck, GradCheckConfig};
use prototransfer::protoclr::{train_protoclr, training_checkpoint};
use prototransfer::rng::{self, purpose};
use prototransfer::{Error, Result};
use rand::seq::SliceRandom;

use crate::args::*;
use crate::Failure;

/// Rows embedded per forward pass when scoring many images.
const EMBED_CHUNK: usize = 256;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| with_path(dir, e)),
        None => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).map_err(|e| with_path(path, e))?))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    ck.save(path)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_network(path: &Path, cfg: &RunConfig) -> Result<EmbeddingNetwork> {
    let net = EmbeddingNetwork::from_checkpoint(&Checkpoint::load(path)?)?;
    let (channels, size) = cfg.data.geometry();
    if (net.in_channels(), net.input_size()) != (channels, size) {
        return Err(Error::Geometry(format!(
            "{} expects {}x{}x{} images, data provides {channels}x{size}x{size}",
            path.display(),
            net.in_channels(),
            net.input_size(),
            net.input_size()
        )));
    }
    Ok(net)
}

fn header(cfg: &RunConfig, extra: &[(&str, String)]) -> ReportHeader {
    let generated = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut h = ReportHeader::new()
        .with("build", build_id())
        .with("generated_unix", generated.to_string())
        .with("ci95", "mean +- 1.96 * sample_std / sqrt(episodes)");
    for (k, v) in extra {
        h = h.with(*k, v.clone());
    }
    h.with("config", cfg.to_json().trim_end())
}

fn write_loss_log(path: &Path, losses: &[f32]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iter,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.max_iters {
        cfg.protoclr.max_iterations = m;
        cfg.supervised.protonet.iterations = m;
        cfg.supervised.pre_linear.epochs = m as usize;
    }
    let train = cfg.data.load(Split::Train)?;
    let mut net = cfg.init_network()?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    match a.method {
        Method::Protoclr => {
            let pipeline = cfg.pipeline()?;
            let ck_dir = (cfg.protoclr.checkpoint_every > 0).then(|| a.out.with_extension("checkpoints"));
            let every = a.progress_every;
            let outcome = train_protoclr(&train.unlabeled(), &mut net, &pipeline, &cfg.protoclr, ck_dir.as_deref(), |r, s| {
                if every > 0 && (r.iter + 1) % every == 0 {
                    eprintln!("iter {:>7}  loss {:.4}  acc {:.3}  smoothed {:.3}  lr {:.2e}", r.iter + 1, r.loss, r.acc, s, r.lr);
                }
            })?;
            let ck = match outcome.best {
                Some(ck) => ck,
                None => training_checkpoint(&net, &outcome.optimizer),
            };
            save(&ck, &a.out)?;
            let mut w = create(&log_path)?;
            outcome.log.write_csv(&mut w)?;
            w.flush()?;
            let log = &outcome.log;
            match (log.final_smoothed_acc(), log.best_iteration) {
                (Some(last), Some(best)) => println!(
                    "trained {} iterations{}: final smoothed accuracy {last:.4}, best {:.4} at iteration {}",
                    log.records.len(),
                    if log.stopped_early { " (early stop)" } else { "" },
                    log.best_smoothed_acc,
                    best + 1
                ),
                _ => println!("no iterations run; wrote the initial network"),
            }
        }
        Method::Protonet => {
            let losses = train_protonet_supervised(&train, &mut net, &cfg.supervised.protonet)?;
            save(&net.to_checkpoint(), &a.out)?;
            write_loss_log(&log_path, &losses)?;
            println!("trained {} episodes; final loss {:.4}", losses.len(), losses.last().copied().unwrap_or(f32::NAN));
        }
        Method::PreLinear => {
            let (_, losses) = train_pre_linear(&train, &mut net, &cfg.supervised.pre_linear)?;
            save(&net.to_checkpoint(), &a.out)?;
            write_loss_log(&log_path, &losses)?;
            println!("trained {} steps; final loss {:.4}", losses.len(), losses.last().copied().unwrap_or(f32::NAN));
        }
    }
    println!("checkpoint: {}\nlog: {}", a.out.display(), log_path.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.ways {
        cfg.eval.ways = v;
    }
    if let Some(v) = a.shots {
        cfg.eval.shots = v;
    }
    if let Some(v) = a.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = a.queries {
        cfg.eval.queries = v;
    }
    if let Some(v) = &a.adaptor {
        cfg.eval.adaptor = v.parse::<Adaptor>()?;
    }
    if let Some(v) = a.epochs {
        cfg.finetune.epochs = v;
    }
    cfg.validate()?;
    let adaptor = cfg.eval.adaptor;
    let net = match &a.checkpoint {
        Some(p) => Some(load_network(p, &cfg)?),
        None if matches!(adaptor, Adaptor::Oracle | Adaptor::Random) => None,
        None => return Err(Error::Config(format!("--checkpoint is required for the {adaptor} adaptor"))),
    };
    let dataset = cfg.data.load(split_of(a.split))?;
    let name = cfg.data.name();
    let mut reports = Vec::new();
    for &shots in &cfg.eval.shots {
        let spec = EvalSpec {
            ways: cfg.eval.ways,
            shots,
            queries: cfg.eval.queries,
            episodes: cfg.eval.episodes,
            adaptor,
            finetune: cfg.finetune,
            bn_mode: cfg.eval.bn_mode,
            seed: cfg.eval.seed,
        };
        let report = evaluate(net.as_ref(), &dataset, &spec, &name)?;
        write_episodes_csv(&report, create(&sibling(&a.out, &format!(".{shots}shot.episodes.csv")))?)?;
        reports.push(report);
    }
    let checkpoint = a.checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string());
    let h = header(&cfg, &[("checkpoint", checkpoint)]);
    write_summary_csv(&reports, &h, create(&a.out)?)?;
    write_markdown(&reports, &h, create(&a.out.with_extension("md"))?)?;
    print!("{}", markdown_table(&reports));
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(s) = a.scope {
        cfg.finetune.scope = match s {
            ScopeArg::Head => Scope::HeadOnly,
            ScopeArg::Full => Scope::FullModel,
        };
    }
    cfg.validate()?;
    if a.shots == 0 {
        return Err(Error::Config("--shots must be at least 1".into()));
    }
    let net = load_network(&a.checkpoint, &cfg)?;
    let ds = cfg.data.load(split_of(a.split))?;
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Config(format!("{} split is unlabeled", ds.split)))?;
    let mut r = rng::stream(cfg.eval.seed, &[purpose::FINETUNE, u64::MAX]);
    let (mut support, mut query) = (Vec::new(), Vec::new());
    for c in 0..ds.n_classes() {
        let mut ids = ds.class_samples(c).to_vec();
        if ids.len() < a.shots {
            return Err(Error::Contract {
                op: "finetune",
                detail: format!("class {:?} has {} images, need {}", ds.class_names()[c], ids.len(), a.shots),
            });
        }
        ids.shuffle(&mut r);
        support.extend_from_slice(&ids[..a.shots]);
        query.extend_from_slice(&ids[a.shots..]);
    }
    let support_labels: Vec<usize> = support.iter().map(|&i| labels[i]).collect();
    let bn = cfg.eval.bn_mode;
    let adapted = proto_tune(&net, &ds.tensor(&support)?, &support_labels, ds.n_classes(), &cfg.finetune, bn, &mut r)?;
    let mut predicted = Vec::with_capacity(query.len());
    for chunk in query.chunks(EMBED_CHUNK) {
        predicted.extend(adapted.predict(&net, &ds.tensor(chunk)?, bn)?.labels);
    }
    let tuned = adapted.net.as_ref().unwrap_or(&net);
    let mut ck = tuned.to_checkpoint();
    adapted.head.write_into(&mut ck, "head");
    save(&ck, &a.out)?;
    println!(
        "{}-way {}-shot adaptation on {} split: {} steps, final support loss {}",
        ds.n_classes(),
        a.shots,
        ds.split,
        adapted.steps,
        adapted.epoch_losses.last().map_or("-".to_string(), |l| format!("{l:.4}"))
    );
    if !query.is_empty() {
        let hits = predicted.iter().zip(&query).filter(|(p, &i)| **p == labels[i]).count();
        println!("held-out accuracy {:.4} on {} images", hits as f64 / query.len() as f64, query.len());
    }
    println!("classes (head row order): {}", ds.class_names().join(", "));
    println!("checkpoint: {}", a.out.display());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.max_iters {
        cfg.protoclr.max_iterations = m;
    }
    if let Some(w) = a.ways {
        cfg.eval.ways = w;
    }
    if let Some(e) = a.episodes {
        cfg.eval.episodes = e;
    }
    cfg.validate()?;
    let shots = a
        .shots
        .unwrap_or_else(|| cfg.eval.shots.iter().copied().max().expect("validated non-empty"));
    let finetune: &[bool] = match a.finetune {
        FinetuneGrid::Off => &[false],
        FinetuneGrid::On => &[true],
        FinetuneGrid::Both => &[false, true],
    };
    let mut grid = Vec::new();
    for &batch_size in &a.batch_sizes {
        for &queries in &a.queries {
            for &ft in finetune {
                grid.push(AblationPoint {
                    batch_size,
                    queries,
                    finetune: ft,
                });
            }
        }
    }
    let train = cfg.data.load(Split::Train)?.unlabeled();
    let test = cfg.data.load(Split::Test)?;
    let settings = SweepSettings {
        protoclr: cfg.protoclr.clone(),
        pipeline: cfg.pipeline()?,
        eval: EvalSpec {
            ways: cfg.eval.ways,
            shots,
            queries: cfg.eval.queries,
            episodes: cfg.eval.episodes,
            adaptor: Adaptor::Proto,
            finetune: cfg.finetune,
            bn_mode: cfg.eval.bn_mode,
            seed: cfg.eval.seed,
        },
        init_seed: cfg.backbone.seed,
    };
    let rows = ablation_sweep(&train, &test, &grid, &settings, |row| {
        eprintln!("{}: {:.2}% ±{:.2}", row.label, 100.0 * row.report.mean, 100.0 * row.report.ci95);
    })?;
    let h = header(&cfg, &[]);
    write_ablation_csv(&rows, &h, create(&a.out)?)?;
    let table = ablation_table(&rows);
    let mut md = create(&a.out.with_extension("md"))?;
    writeln!(md, "```")?;
    h.write(&mut md)?;
    writeln!(md, "```\n")?;
    md.write_all(table.as_bytes())?;
    md.flush()?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck_cmd(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let cfg = GradCheckConfig {
        seeds: (0..a.seeds).collect(),
        samples_per_tensor: a.samples,
        step: a.step,
        fault_scale: a.inject_fault,
        ..Default::default()
    };
    let report = gradcheck(&cfg)?;
    println!(
        "max relative error {:.3e} over {} coordinates ({} seeds, tolerance {:.0e})",
        report.max_error,
        report.comparisons.len(),
        a.seeds,
        report.tolerance
    );
    if report.passed() {
        return Ok(());
    }
    let w = report.worst().expect("failed report has comparisons");
    Err(Failure::numeric(format!(
        "gradient check failed: {} of {} coordinates exceed tolerance; worst {}[{}] seed {}: analytic {:.6e} vs numeric {:.6e}",
        report.failures().count(),
        report.comparisons.len(),
        w.param,
        w.index,
        w.seed,
        w.analytic,
        w.numeric
    )))
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    if let Some(c) = a.channels.filter(|c| *c != 1 && *c != 3) {
        return Err(Error::Config(format!("--channels must be 1 or 3, got {c}")));
    }
    if a.size == Some(0) {
        return Err(Error::Config("--size must be positive".into()));
    }
    let format = match a.format {
        FormatArg::Pgm => SampleFormat::Pnm,
        FormatArg::Ptt1 => SampleFormat::Ptt1,
    };
    let s = convert_directory(&a.input, &a.output, format, a.size, a.channels)?;
    println!("converted {} images in {} classes into {}", s.images, s.classes, a.output.display());
    Ok(())
}

pub fn defaults(a: DefaultsArgs) -> Result<()> {
    let text = RunConfig::default().to_json();
    match a.out {
        Some(path) => {
            let mut w = create(&path)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
