//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use prototransfer::augment::AugmentationPipeline;
use prototransfer::autodiff::Tensor;
use prototransfer::backbone::EmbeddingNetwork;
use prototransfer::data::{make_synthetic_dataset, Split, SyntheticSpec};
use prototransfer::eval::{
    ablation_sweep, confidence_interval, evaluate, generalization_gap, AblationPoint, Adaptor, EvalSpec, SweepSettings,
};
use prototransfer::fewshot::{init_head, train_protonet_supervised, ProtoNetConfig};
use prototransfer::gradcheck::{gradcheck, GradCheckConfig};
use prototransfer::protoclr::{protoclr_loss, train_protoclr, ProtoClrConfig};
use prototransfer::rng;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let cfg = GradCheckConfig {
        seeds: (0..5).collect(),
        ..Default::default()
    };
    let report = gradcheck(&cfg).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    check(
        report.passed() && secs <= 120.0,
        format!(
            "max relative error {:.3e} over {} coordinates, {secs:.0}s",
            report.max_error,
            report.comparisons.len()
        ),
    )
}

fn head_equivalence() -> Outcome {
    let mut r = rng::stream(2024, &[1]);
    let mut agree = 0;
    let total = 10_000;
    for _ in 0..total {
        let n = r.random_range(2..10usize);
        let d = r.random_range(1..16usize);
        let mut draw = |len: usize| -> Vec<f32> { (0..len).map(|_| r.random_range(-2.0f32..2.0)).collect() };
        let protos = Tensor::new(vec![n, d], draw(n * d)).unwrap();
        let z = Tensor::new(vec![1, d], draw(d)).unwrap();
        let dist = |k: usize| -> f64 {
            (0..d)
                .map(|j| (protos.data()[k * d + j] as f64 - z.data()[j] as f64).powi(2))
                .sum()
        };
        let nearest = (0..n).fold(0, |best, k| if dist(k) < dist(best) { k } else { best });
        let head = init_head(&protos).map_err(|e| e.to_string())?;
        if head.predict(&z).map_err(|e| e.to_string())?.labels[0] == nearest {
            agree += 1;
        }
    }
    check(agree == total, format!("{agree}/{total} instances agree"))
}

fn loss_oracles() -> Outcome {
    let (l50, _) = protoclr_loss(&Tensor::full(&[50, 4], 0.3), &Tensor::full(&[50, 3, 4], 0.3)).unwrap();
    let protos = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
    let queries = Tensor::new(vec![2, 1], vec![0.5, 2.0]).unwrap();
    let (_, rows) = protoclr_loss(&protos, &queries).unwrap();
    let ok = (l50 as f64 - 3.912023).abs() <= 1e-5 && (rows[0] as f64 - 0.126928).abs() <= 1e-6;
    check(ok, format!("N=50: {l50:.6}, scalar case: {:.6}", rows[0]))
}

fn label_blindness() -> Outcome {
    let run = |relabel: bool| {
        let mut ds = make_synthetic_dataset(&SyntheticSpec::default()).unwrap();
        if relabel {
            ds = ds.permute_labels(&[5, 2, 7, 0, 6, 1, 4, 3]).unwrap();
        }
        let mut net = EmbeddingNetwork::init_conv4(1, 16, 4).unwrap();
        let cfg = ProtoClrConfig {
            batch_size: 16,
            max_iterations: 20,
            seed: 4,
            ..Default::default()
        };
        let out = train_protoclr(&ds, &mut net, &AugmentationPipeline::synthetic(), &cfg, None, |_, _| {}).unwrap();
        let trajectory: Vec<(u32, u32)> = out.log.records.iter().map(|r| (r.loss.to_bits(), r.acc.to_bits())).collect();
        (trajectory, net.to_checkpoint().to_bytes())
    };
    let (a, b) = (run(false), run(true));
    check(a.0.len() == 20 && a == b, format!("{} iterations, trajectories and weights identical: {}", a.0.len(), a == b))
}

fn synthetic_end_to_end() -> Outcome {
    let started = Instant::now();
    let spec = SyntheticSpec::default();
    let train = make_synthetic_dataset(&spec).unwrap();
    let test = make_synthetic_dataset(&SyntheticSpec {
        sample_offset: 1000,
        ..spec
    })
    .unwrap();
    let mut net = EmbeddingNetwork::init_conv4(1, 16, 0).unwrap();
    let cfg = ProtoClrConfig {
        batch_size: 16,
        queries: 3,
        max_iterations: 2000,
        seed: 0,
        ..Default::default()
    };
    train_protoclr(&train.unlabeled(), &mut net, &AugmentationPipeline::synthetic(), &cfg, None, |_, _| {})
        .map_err(|e| e.to_string())?;
    let acc = |shots| evaluate(Some(&net), &test, &EvalSpec::new(5, shots, 600, Adaptor::Proto, 1), "synthetic");
    let (one, five) = (acc(1).map_err(|e| e.to_string())?, acc(5).map_err(|e| e.to_string())?);
    let secs = started.elapsed().as_secs_f64();
    check(
        one.mean >= 0.95 && five.mean >= 0.98 && secs <= 600.0,
        format!("1-shot {:.4}, 5-shot {:.4}, {secs:.0}s", one.mean, five.mean),
    )
}

fn noisy_spec(seed: u64, classes: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: classes,
        n_per_class: 50,
        noise_std: 0.2,
        jitter: 2,
        seed,
        ..Default::default()
    }
}

fn held_out(spec: &SyntheticSpec, sample_offset: usize) -> prototransfer::data::Dataset {
    let mut ds = make_synthetic_dataset(&SyntheticSpec {
        class_offset: 10_000,
        n_classes: 20,
        sample_offset,
        ..spec.clone()
    })
    .unwrap();
    ds.split = Split::Test;
    ds
}

fn batch_size_ablation() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let spec = noisy_spec(seed, 64);
        let train = make_synthetic_dataset(&spec).unwrap().unlabeled();
        let test = held_out(&spec, 1000);
        let settings = SweepSettings {
            protoclr: ProtoClrConfig {
                max_iterations: 300,
                seed,
                ..Default::default()
            },
            pipeline: AugmentationPipeline::synthetic(),
            eval: EvalSpec::new(5, 5, 600, Adaptor::Proto, 1),
            init_seed: seed,
        };
        let point = |batch_size, queries| AblationPoint {
            batch_size,
            queries,
            finetune: false,
        };
        let rows = ablation_sweep(&train, &test, &[point(50, 3), point(50, 1)], &settings, |_| {})
            .map_err(|e| e.to_string())?;
        let mean = |p: AblationPoint| rows.iter().find(|r| r.point == p).map(|r| r.report.mean).unwrap();
        let (n50q3, n50q1, n5q1) = (mean(point(50, 3)), mean(point(50, 1)), mean(point(5, 1)));
        ok &= n50q3 > n5q1 && n50q3 >= n50q1;
        notes.push(format!("seed {seed}: N50Q3 {n50q3:.4} N50Q1 {n50q1:.4} N5Q1 {n5q1:.4}"));
    }
    check(ok, notes.join("; "))
}

fn generalization_gaps() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let spec_eval = EvalSpec::new(5, 5, 600, Adaptor::Proto, 7);
    for seed in 0..3 {
        let spec = noisy_spec(seed, 16);
        let train = make_synthetic_dataset(&spec).unwrap();
        let test = held_out(&spec, 0);
        let pipeline = AugmentationPipeline::synthetic();

        let mut net = EmbeddingNetwork::init_conv4(1, 16, seed).unwrap();
        let cfg = ProtoClrConfig {
            max_iterations: 300,
            seed,
            ..Default::default()
        };
        train_protoclr(&train.unlabeled(), &mut net, &pipeline, &cfg, None, |_, _| {}).map_err(|e| e.to_string())?;
        let clr = generalization_gap(Some(&net), &train, &test, &spec_eval).map_err(|e| e.to_string())?;

        let mut net = EmbeddingNetwork::init_conv4(1, 16, seed).unwrap();
        let cfg = ProtoNetConfig {
            ways: 10,
            shots: 5,
            queries: 5,
            iterations: 300,
            seed,
            ..Default::default()
        };
        train_protonet_supervised(&train, &mut net, &cfg).map_err(|e| e.to_string())?;
        let sup = generalization_gap(Some(&net), &train, &test, &spec_eval).map_err(|e| e.to_string())?;

        ok &= clr.gap <= sup.gap;
        notes.push(format!("seed {seed}: protoclr {:.4} protonet {:.4}", clr.gap, sup.gap));
    }
    check(ok, notes.join("; "))
}

fn ci_formula() -> Outcome {
    let alternating: Vec<f64> = (0..600).map(|i| (i % 2) as f64).collect();
    let (m, h) = confidence_interval(&alternating).map_err(|e| e.to_string())?;
    check(m == 0.5 && (h - 0.04004).abs() <= 1e-4, format!("mean {m}, half-width {h:.6}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut artifacts = Vec::new();
    for threads in ["1", "4"] {
        for run in 0..2 {
            let stem = format!("t{threads}r{run}");
            let out = Command::new(env!("CARGO_BIN_EXE_prototransfer"))
                .current_dir(dir.path())
                .args(["--threads", threads, "pretrain", "--seed", "7", "--max-iters", "30", "--progress-every", "0"])
                .args(["-o", &format!("{stem}.ptt1")])
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(String::from_utf8_lossy(&out.stderr).into_owned());
            }
            let read = |ext: &str| fs::read(dir.path().join(format!("{stem}.{ext}"))).map_err(|e| e.to_string());
            artifacts.push((read("ptt1")?, read("csv")?));
        }
    }
    let same = artifacts.windows(2).all(|w| w[0] == w[1]);
    check(same, format!("{} runs byte-identical: {same}", artifacts.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("head-init equivalence", head_equivalence),
        ("loss oracles", loss_oracles),
        ("label-blindness", label_blindness),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("batch size and query ablation", batch_size_ablation),
        ("generalization gap", generalization_gaps),
        ("confidence interval formula", ci_formula),
        ("pretrain determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.0}s]", i + 1, started.elapsed().as_secs_f64());
    }
    println!("NOT RUN 10 extended Omniglot run: optional, needs the Omniglot images and hours of CPU time");
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
