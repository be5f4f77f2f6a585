//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `cargo test -p usg-cli --test acceptance` (several minutes on one core).

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use usg_cli::manifest::file_sha256;
use usg_core::dataset::DatasetError;
use usg_core::guidance::{sample_candidates, Candidate};
use usg_core::model::{ablate, majority_baseline, Batch, ModelObjective};
use usg_core::nn::{grad_check_objective, grad_check_report, softmax_rows, LayerSpec, ParamStore, Stack, Tensor};
use usg_core::phantom::{mix64, ImageSize};
use usg_core::{
    build_dataset, poor_starts, quat_distance, render, run_episodes, suggest, Dataset, DemoPlan, Experience,
    GuidanceConfig, Hyper, ModelConfig, ModelError, PhantomConfig, ProbeState, QualityModel, Quat, SourceFilter,
    Variant,
};

const TARGET_FRACTION: f64 = 0.378;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        ),
    });
    let line = format!(
        "[{}] {id}. {name}: {} ({:.1} s)\n",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        start.elapsed().as_secs_f64()
    );
    // written straight to the handle so it shows without --nocapture
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    std::io::stdout().flush().unwrap();
    out.pass
}

fn signed_input(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let h = mix64(seed.wrapping_mul(0x9e37) ^ i);
            let m = 0.5 + 0.5 * (h >> 11) as f32 / (1u64 << 53) as f32;
            if h & 1 == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let stacks = [
        (
            "linear",
            vec![LayerSpec::linear(5, 4), LayerSpec::linear(4, 3)],
            vec![3, 5],
        ),
        ("conv s1", vec![LayerSpec::conv3x3(2, 3, 1)], vec![2, 2, 6, 6]),
        ("conv s2", vec![LayerSpec::conv3x3(2, 3, 2)], vec![2, 2, 6, 6]),
        (
            "relu",
            vec![LayerSpec::linear(6, 8), LayerSpec::Relu, LayerSpec::linear(8, 2)],
            vec![4, 6],
        ),
        (
            "pool",
            vec![
                LayerSpec::conv3x3(1, 2, 1),
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::linear(18, 2),
            ],
            vec![2, 1, 6, 6],
        ),
        ("softmax", vec![LayerSpec::linear(4, 3), LayerSpec::Softmax], vec![3, 4]),
    ];
    let mut worst_nonlinear: f64 = 0.0;
    let mut linear = f64::NAN;
    for (i, (name, layers, shape)) in stacks.into_iter().enumerate() {
        let stack = Stack::new(name, layers);
        let mut params = ParamStore::new(i as u64);
        stack.init_params(&mut params).unwrap();
        let r = grad_check_report(&stack, &mut params, &signed_input(&shape, i as u64 + 1), 1e-3).unwrap();
        if name == "linear" {
            linear = r.max_relative_error;
        } else {
            worst_nonlinear = worst_nonlinear.max(r.max_relative_error);
        }
    }

    let phantom = PhantomConfig::with_image(16, 16, 1);
    let states = [
        ProbeState::upright(6.0),
        ProbeState::new(
            Quat::from_axis_angle([0.2, 1.0, 0.0], 0.3),
            [0.4, -0.2, 11.0, 3.0, -2.0, 1.0],
        )
        .unwrap(),
    ];
    let frames: Vec<_> = states
        .iter()
        .enumerate()
        .map(|(i, s)| render(s, &phantom, i as u64).unwrap())
        .collect();
    let model = QualityModel::build(ModelConfig::tiny(Variant::Net4), 11).unwrap();
    let batch = Batch {
        images: model.image_tensor(&frames.iter().collect::<Vec<_>>()).unwrap(),
        pf: model.pf_tensor(&states.iter().collect::<Vec<_>>()).unwrap(),
    };
    let objective = ModelObjective {
        model: &model,
        batch: &batch,
        labels: &[1, 0],
    };
    let mut params = model.params.clone();
    let composed = grad_check_objective(&objective, &mut params, 1e-3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: linear < 1e-4 && worst_nonlinear < 1e-2 && composed.max_relative_error < 1e-2 && secs < 30.0,
        detail: format!(
            "linear {linear:.2e}, worst layer {worst_nonlinear:.2e}, composed net4 {:.2e} over {} entries, {secs:.1} s",
            composed.max_relative_error, composed.checked
        ),
    }
}

fn usg(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_usg"))
        .args(args)
        .current_dir(dir)
        .env("USG_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .unwrap()
        .success()
}

/// Rollout logs end with a wall-clock column, which is dropped before comparing.
fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(model: &QualityModel, data: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut ok = true;
    for run in ["a", "b"] {
        ok &= usg(
            d,
            &[
                "gen-data",
                "--samples",
                "600",
                "--image",
                "32",
                "--seed",
                "9",
                "--out",
                &format!("{run}.usgd"),
            ],
        );
        ok &= usg(
            d,
            &[
                "train",
                "--data",
                &format!("{run}.usgd"),
                "--epochs",
                "2",
                "--seed",
                "9",
                "--out",
                &format!("{run}.usgm"),
            ],
        );
        ok &= usg(
            d,
            &[
                "guide",
                "--model",
                &format!("{run}.usgm"),
                "--data",
                &format!("{run}.usgd"),
                "--episodes",
                "3",
                "--steps",
                "3",
                "--seed",
                "9",
                "--out-dir",
                run,
            ],
        );
    }
    if !ok {
        return Outcome {
            pass: false,
            detail: "a command failed".into(),
        };
    }
    let h = |f: &str| file_sha256(&d.join(f)).unwrap();
    let data_same = h("a.usgd") == h("b.usgd");
    let model_same = h("a.usgm") == h("b.usgm");
    let mut guide_same = h("a/summary.json") == h("b/summary.json");
    for i in 0..3 {
        let read = |run: &str| std::fs::read_to_string(d.join(format!("{run}/episode_{i:03}.csv"))).unwrap();
        guide_same &= without_timing(&read("a")) == without_timing(&read("b"));
    }

    let exp = Experience::harvest(data, SourceFilter::All).unwrap();
    let mut suggest_same = true;
    for (i, s) in data.samples.iter().step_by(97).take(10).enumerate() {
        let cfg = GuidanceConfig::default().with_seed(i as u64);
        let a = suggest(model, &exp, &s.frame, &s.state, &cfg).unwrap();
        let b = suggest(model, &exp, &s.frame, &s.state, &cfg).unwrap();
        suggest_same &= a.pose.to_array().map(f64::to_bits) == b.pose.to_array().map(f64::to_bits)
            && a.wrench.map(f64::to_bits) == b.wrench.map(f64::to_bits)
            && a.q_best.to_bits() == b.q_best.to_bits()
            && a.candidate_index == b.candidate_index;
    }
    Outcome {
        pass: data_same && model_same && guide_same && suggest_same,
        detail: format!(
            "gen-data sha256 equal {data_same}, train sha256 equal {model_same}, guide logs equal {guide_same}, \
             suggest bitwise equal {suggest_same}"
        ),
    }
}

fn fraction(d: &Dataset) -> f64 {
    d.positives() as f64 / d.len() as f64
}

fn dataset_regime() -> Outcome {
    let d = build_dataset(
        &DemoPlan::standard(6000, 50),
        &PhantomConfig::default(),
        0,
        Some(TARGET_FRACTION),
    )
    .unwrap();
    let f = fraction(&d);
    let (train, val) = d.split(0.2, 0).unwrap();
    let (ft, fv) = (fraction(&train), fraction(&val));
    Outcome {
        pass: d.len() == 6000
            && (f - TARGET_FRACTION).abs() <= 0.01
            && (ft - f).abs() <= 0.05
            && (fv - f).abs() <= 0.05,
        detail: format!(
            "{} samples, positive fraction {f:.4}; train {ft:.4} ({}), val {fv:.4} ({})",
            d.len(),
            train.len(),
            val.len()
        ),
    }
}

struct Trained {
    model: QualityModel,
    data: Dataset,
}

fn training(slot: &mut Option<Trained>) -> Outcome {
    let data = build_dataset(
        &DemoPlan::standard(2000, 50),
        &PhantomConfig::default(),
        1,
        Some(TARGET_FRACTION),
    )
    .unwrap();
    let (train, val) = data.split(0.2, 1).unwrap();
    let mut runs = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 1..=3 {
        let start = Instant::now();
        let mut m = QualityModel::build(ModelConfig::desk(Variant::Net4), seed).unwrap();
        let hyper = Hyper {
            epochs: 20,
            lr: 0.001,
            batch: 20,
            seed,
        };
        let r = m.train(&train, Some(&val), &hyper).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        runs.push((r.final_evaluation.accuracy, m));
    }
    runs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let accs: Vec<String> = runs.iter().map(|r| format!("{:.4}", r.0)).collect();
    let (median, model) = runs.swap_remove(1);
    *slot = Some(Trained { model, data });
    Outcome {
        pass: median >= 0.85 && slowest < 600.0,
        detail: format!(
            "net4 64x64 val accuracy {} (median {median:.4}), slowest run {slowest:.0} s",
            accs.join(" ")
        ),
    }
}

fn ablation() -> Outcome {
    let side = 32;
    let data = build_dataset(
        &DemoPlan::standard(2000, 50),
        &PhantomConfig::with_image(side, side, 1),
        2,
        Some(TARGET_FRACTION),
    )
    .unwrap();
    let (train, val) = data.split(0.2, 2).unwrap();
    let base = ModelConfig::desk(Variant::Net4).with_image(ImageSize {
        height: side,
        width: side,
        channels: 1,
    });
    let hyper = Hyper {
        epochs: 20,
        seed: 100,
        ..Hyper::default()
    };
    let r = ablate(&base, &Variant::ALL, &train, &val, &hyper, 5).unwrap();
    let baseline = majority_baseline(&val);
    let complete = r.runs.len() == 20;
    let all_beat = Variant::ALL
        .iter()
        .all(|v| r.summary_of(*v).is_some_and(|s| s.mean > baseline));
    let means: Vec<String> = r
        .summary
        .iter()
        .map(|s| format!("{} {:.4}", s.variant, s.mean))
        .collect();
    let gap = r
        .net4_minus_net3
        .map(|g| format!("{:+.4} [{:+.4}, {:+.4}]", g.mean, g.lo, g.hi))
        .unwrap_or_else(|| "missing".into());
    Outcome {
        pass: complete && all_beat && r.net4_minus_net3.is_some(),
        detail: format!(
            "{} runs at 32x32; baseline {baseline:.4}; {}; net4 - net3 {gap}",
            r.runs.len(),
            means.join(", ")
        ),
    }
}

fn within_bounds(pose: Quat, wrench: &[f64; 6], current: &ProbeState, cfg: &GuidanceConfig) -> bool {
    let cur = current.wrench();
    wrench[2] >= 0.0
        && quat_distance(pose, current.pose()).unwrap() <= cfg.pose_bound
        && (0..6).all(|i| (wrench[i] - cur[i]).abs() <= cfg.force_bound[i])
}

fn guidance_correctness(t: &Trained) -> Outcome {
    let exp = Experience::harvest(&t.data, SourceFilter::All).unwrap();
    let n = t.data.len() as u64;
    let (mut exact, mut bounded, mut queries) = (0, 0, 0);
    for q in 0..100u64 {
        let s = &t.data.samples[(mix64(q ^ 0xacce) % n) as usize];
        let cfg = GuidanceConfig::default().with_seed(mix64(q));
        let got = suggest(&t.model, &exp, &s.frame, &s.state, &cfg).unwrap();

        // one candidate at a time through the head, against shared image features
        let img = t
            .model
            .image_features(&t.model.image_tensor(&[&s.frame]).unwrap())
            .unwrap();
        let set = sample_candidates(&exp, &s.state, &cfg).unwrap();
        let mut scored: HashMap<Candidate, f32> = HashMap::new();
        let mut best = (f32::NEG_INFINITY, 0);
        let mut all_ok = true;
        for (k, c) in set.candidates.iter().enumerate() {
            let state = c.state(&exp);
            all_ok &= within_bounds(state.pose(), &state.wrench(), &s.state, &cfg);
            let score = *scored.entry(*c).or_insert_with(|| {
                let (logits, _) = t
                    .model
                    .head_from_features(&img, &t.model.pf_tensor(&[&state]).unwrap())
                    .unwrap();
                softmax_rows(&logits).data()[1]
            });
            if score > best.0 {
                best = (score, k);
            }
        }
        queries += 1;
        exact += (got.candidate_index == best.1 && got.q_best == best.0 as f64) as usize;
        bounded += (all_ok && within_bounds(got.pose, &got.wrench, &s.state, &cfg)) as usize;
    }
    Outcome {
        pass: exact == queries && bounded == queries,
        detail: format!(
            "{exact}/{queries} equal the exhaustive argmax, {bounded}/{queries} within bounds with Fz >= 0"
        ),
    }
}

fn closed_loop(t: &Trained) -> Outcome {
    let exp = Experience::harvest(&t.data, SourceFilter::All).unwrap();
    let starts = poor_starts(&t.data, 20, 7).unwrap();
    let cfg = GuidanceConfig::default().with_seed(7);
    let (_, summary) = run_episodes(&t.model, &t.data.phantom, &exp, &starts, 10, &cfg).unwrap();

    let mut slowest: f64 = 0.0;
    for (i, s) in t.data.samples.iter().step_by(100).take(20).enumerate() {
        let start = Instant::now();
        let g = suggest(&t.model, &exp, &s.frame, &s.state, &cfg.with_seed(i as u64)).unwrap();
        assert_eq!(g.n_evaluated, 1000);
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    Outcome {
        pass: summary.success_rate >= 0.8 && slowest <= 1.0,
        detail: format!(
            "{}/{} episodes improved (mean oracle {:.3} -> {:.3}), slowest N=1000 suggest {:.1} ms",
            summary.improved,
            summary.episodes,
            summary.mean_start_score,
            summary.mean_final_score,
            slowest * 1e3
        ),
    }
}

fn serialization(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let dp = dir.path().join("d.usgd");
    let mp = dir.path().join("m.usgm");
    t.data.save(&dp).unwrap();
    t.model.save(&mp).unwrap();
    let d2 = Dataset::load(&dp).unwrap();
    let m2 = QualityModel::load(&mp).unwrap();
    let data_bytes = std::fs::read(&dp).unwrap();
    let model_bytes = std::fs::read(&mp).unwrap();
    let round_trip = d2.to_bytes() == data_bytes && m2.to_bytes() == model_bytes && d2 == t.data;

    let edit = |bytes: &[u8], f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.to_vec();
        f(&mut b);
        b
    };
    let flip_tail = |b: &mut Vec<u8>| {
        let n = b.len();
        b[n - 10] ^= 0x40;
    };
    let cut = |b: &mut Vec<u8>| b.truncate(b.len() - 7);
    let magic = |b: &mut Vec<u8>| b[0] ^= 0xff;
    let version = |b: &mut Vec<u8>| b[5] = b[5].wrapping_add(1);

    let data_errors = [
        matches!(
            Dataset::from_bytes(&edit(&data_bytes, &flip_tail)),
            Err(DatasetError::Checksum { .. })
        ),
        matches!(
            Dataset::from_bytes(&edit(&data_bytes, &cut)),
            Err(DatasetError::Truncated(_))
        ),
        matches!(
            Dataset::from_bytes(&edit(&data_bytes, &magic)),
            Err(DatasetError::BadMagic)
        ),
        matches!(
            Dataset::from_bytes(&edit(&data_bytes, &version)),
            Err(DatasetError::Version { .. })
        ),
    ];
    let model_errors = [
        matches!(
            QualityModel::from_bytes(&edit(&model_bytes, &flip_tail)),
            Err(ModelError::Checksum { .. })
        ),
        matches!(
            QualityModel::from_bytes(&edit(&model_bytes, &cut)),
            Err(ModelError::Truncated(_))
        ),
        matches!(
            QualityModel::from_bytes(&edit(&model_bytes, &magic)),
            Err(ModelError::BadMagic)
        ),
        matches!(
            QualityModel::from_bytes(&edit(&model_bytes, &version)),
            Err(ModelError::Version { .. })
        ),
    ];
    let classified = data_errors.iter().chain(&model_errors).filter(|x| **x).count();
    Outcome {
        pass: round_trip && classified == 8,
        detail: format!(
            "round trip bit-exact {round_trip} ({} + {} bytes), {classified}/8 corruptions classified",
            data_bytes.len(),
            model_bytes.len()
        ),
    }
}

fn main() {
    let started = Instant::now();
    let mut trained = None;
    let mut results = vec![
        report(1, "gradient fidelity", gradients),
        report(3, "dataset regime", dataset_regime),
        report(4, "training", || training(&mut trained)),
    ];
    match &trained {
        Some(t) => {
            results.push(report(2, "determinism", || determinism(&t.model, &t.data)));
            results.push(report(6, "guidance correctness", || guidance_correctness(t)));
            results.push(report(7, "closed-loop improvement", || closed_loop(t)));
            results.push(report(8, "serialization", || serialization(t)));
        }
        None => {
            for (id, name) in [
                (2, "determinism"),
                (6, "guidance correctness"),
                (7, "closed-loop improvement"),
                (8, "serialization"),
            ] {
                results.push(report(id, name, || Outcome {
                    pass: false,
                    detail: "no trained model (criterion 4 did not finish)".into(),
                }));
            }
        }
    }
    results.push(report(5, "ablation harness", ablation));
    let passed = results.iter().filter(|p| **p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
