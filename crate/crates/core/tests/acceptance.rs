//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criterion numbers given as arguments restrict
//! the run, e.g. `cargo test --test acceptance -- 1 6`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::Rng as _;

use common::{grads, median, normal, oracles, rng};
use doremi::moe::{allocate, balance_loss, eda_allocate, entropy_to_k, Allocation};
use doremi::pretrain::{ema_update, Pretrainer};
use doremi::sparse::{submanifold_conv, SparseConvKernel, SparseVoxelGrid};
use doremi::synth::{CorpusManifest, Split};
use doremi::tensor::Tensor;
use doremi::train::{
    evaluate, finetune, joint_train, pretrain_backbone, DoremiModel, PreparedCorpus, Task, TrainConfig, Variant,
};

const SEEDS: u64 = 5;
const GRAD_TOL: f64 = 1e-4;

type Verdict = (bool, String);

fn eda_oracle() -> Result<Verdict> {
    let start = Instant::now();
    let rows = 100_000;
    let (mut mismatches, mut worst) = (0usize, 0.0f64);
    for (ki, &kx) in [2usize, 4, 8].iter().enumerate() {
        let mut r = rng(10 + ki as u64);
        let mut data = Vec::with_capacity(rows * kx);
        for i in 0..rows {
            let scale = [0.05, 0.5, 2.0, 8.0][i % 4];
            data.extend((0..kx).map(|_| scale * r.random_range(-1.0..1.0)));
        }
        let logits = Tensor::new(vec![rows, kx], data)?;
        let d = eda_allocate(&logits, 1, kx)?;
        for i in 0..rows {
            let o = oracles::eda(logits.row(i), 1, kx);
            if d.k[i] != o.k || d.active[i] != o.active {
                mismatches += 1;
            }
            worst = worst.max((d.entropy[i] - o.h).abs());
            for j in 0..kx {
                let w = if o.active.contains(&j) { o.p[j] } else { 0.0 };
                worst = worst.max((d.probs.get2(i, j) - o.p[j]).abs()).max((d.weights.get2(i, j) - w).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        mismatches == 0 && worst <= 1e-12 && secs < 30.0,
        format!("3 x {rows} rows, {mismatches} discrete mismatches, max real diff {worst:.1e}, {secs:.1}s"),
    ))
}

fn count_mapping() -> Result<Verdict> {
    let mut ok = true;
    for kx in [2usize, 4, 8] {
        let h_max = (kx as f64).ln();
        ok &= entropy_to_k(0.0, kx, 1, kx) == 1 && entropy_to_k(h_max, kx, 1, kx) == kx;
        let mut prev = 0;
        for i in 0..=10_000 {
            let k = entropy_to_k(h_max * i as f64 / 10_000.0, kx, 1, kx);
            ok &= k >= prev;
            prev = k;
        }
    }
    Ok((ok, "K in {2,4,8}: endpoints and 10001-point sweep".into()))
}

fn balance_anchors() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for kx in [2usize, 4, 8] {
        let (mut even, mut collapsed) = (Vec::new(), Vec::new());
        for i in 0..kx * 5 {
            let mut row = vec![-60.0; kx];
            row[i % kx] = 60.0;
            even.push(row);
            let mut row = vec![-60.0; kx];
            row[0] = 60.0;
            collapsed.push(row);
        }
        let top1 = Allocation::Fixed { k: 1 };
        let e = balance_loss(&allocate(&Tensor::from_rows(&even)?, top1)?).loss;
        let c = balance_loss(&allocate(&Tensor::from_rows(&collapsed)?, top1)?).loss;
        worst = worst.max((e - 1.0).abs()).max((c - kx as f64).abs());
    }
    let errs = grads::balance(20);
    let grad = errs.iter().cloned().fold(0.0, f64::max);
    Ok((
        worst <= 1e-12 && grad <= GRAD_TOL,
        format!("anchor error {worst:.1e}, gate gradient rel error {grad:.1e} over {} configs", errs.len()),
    ))
}

fn gradient_suite() -> Result<Verdict> {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, suite) in grads::PATHS {
        let errs = suite(20);
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        ok &= errs.len() >= 20 && worst <= GRAD_TOL;
        parts.push(format!("{name} {worst:.0e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((ok && secs < 300.0, format!("{}; {secs:.1}s", parts.join(", "))))
}

fn sparse_vs_dense() -> Result<Verdict> {
    let side = 6;
    let mut r = rng(66);
    let mut worst = 0.0f64;
    let mut grids = 0;
    while grids < 200 {
        let density = r.random_range(0.05..0.9);
        let coords: Vec<[i32; 3]> = (0..side as i32)
            .flat_map(|x| (0..side as i32).flat_map(move |y| (0..side as i32).map(move |z| [x, y, z])))
            .filter(|_| r.random_bool(density))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let extent = [1, 3, 5][grids % 3];
        let (din, dout) = (r.random_range(1..4), r.random_range(1..4));
        let w = normal(&mut r, &[extent * extent * extent * din, dout], 1.0);
        let b = normal(&mut r, &[dout], 1.0);
        let x = normal(&mut r, &[coords.len(), din], 1.0);
        let grid = SparseVoxelGrid::new(coords.clone(), x.clone(), 0.1)?;
        let kernel = SparseConvKernel::new(extent, w.clone(), b.clone(), None)?;
        let out = submanifold_conv(&grid, &kernel)?;
        let want = oracles::dense_conv(side, &coords, &x, &w, b.data(), extent);
        worst = worst.max(out.features().max_abs_diff(&want));
        grids += 1;
    }
    Ok((worst <= 1e-12, format!("{grids} grids in 6^3, max diff {worst:.1e}")))
}

fn ema_closed_form() -> Result<Verdict> {
    let p = Pretrainer::new(TrainConfig::default().pretrain_config(), 0)?;
    let mut student = p.student.clone();
    for id in student.ids().collect::<Vec<_>>() {
        let shape = student.get(id).shape().to_vec();
        *student.get_mut(id) = normal(&mut rng(id.index() as u64), &shape, 1.0);
    }
    let mut teacher = p.teacher.clone();
    let m: f64 = 0.996;
    for _ in 0..100 {
        ema_update(&mut teacher, &student, m)?;
    }
    let w = m.powi(100);
    let mut worst = 0.0f64;
    for id in teacher.ids() {
        for ((t, t0), s) in teacher.get(id).data().iter().zip(p.teacher.get(id).data()).zip(student.get(id).data()) {
            worst = worst.max((t - (w * t0 + (1.0 - w) * s)).abs());
        }
    }
    Ok((worst <= 1e-12, format!("100 steps, m = {m}, max diff {worst:.1e}")))
}

/// Per-seed results of the shared training sweep.
#[derive(Default)]
struct Sweep {
    miou: BTreeMap<&'static str, Vec<f64>>,
    alpha: BTreeMap<&'static str, Vec<f64>>,
    /// (Re untouched, every expert moved) for each seed's full model.
    frozen: Vec<(bool, bool)>,
    zero_shot: Vec<f64>,
    finetuned: Vec<f64>,
    held_finite: bool,
    secs: BTreeMap<&'static str, f64>,
}

fn sweep() -> Result<Sweep> {
    let manifest = CorpusManifest::standard();
    let mut out = Sweep { held_finite: true, ..Sweep::default() };
    for seed in 0..SEEDS {
        let base = TrainConfig { seed, ..TrainConfig::default() };
        let corpus = PreparedCorpus::new(manifest.clone(), &base.backbone.geometry())?;
        let t = Instant::now();
        let pre = pretrain_backbone(&base, &manifest)?;
        *out.secs.entry("pretrain").or_default() += t.elapsed().as_secs_f64();
        let domains = corpus.training_domains();
        let eval_scenes = corpus.scenes(Split::Eval, &domains)?;
        for v in [Variant::Baseline, Variant::Re, Variant::ReDsr, Variant::Full, Variant::Native] {
            let cfg = v.apply(&base);
            let t = Instant::now();
            let trained = joint_train(&cfg, &corpus, Some(&pre))?;
            *out.secs.entry(v.name()).or_default() += t.elapsed().as_secs_f64();
            let ev = evaluate(&trained.model, &eval_scenes, Task::ClassContrast)?;
            out.miou.entry(v.name()).or_default().push(100.0 * ev.metrics.miou);
            if let Some(a) = ev.alpha()? {
                out.alpha.entry(v.name()).or_default().push(a);
            }
            eprintln!("  seed {seed} {:9} mIoU {:.2} alpha {:?}", v.name(), 100.0 * ev.metrics.miou, ev.alpha()?);
            if v != Variant::Full {
                continue;
            }
            let model = trained.model;
            let init = DoremiModel::build(&cfg, &domains, Some(&pre))?;
            let re_same = model.re_params().into_iter().all(|id| model.store.get(id) == init.store.get(id));
            let experts_moved = model
                .expert_params()
                .iter()
                .all(|e| e.iter().any(|&id| model.store.get(id) != init.store.get(id)));
            out.frozen.push((re_same, experts_moved));

            let held = *manifest.held_out.first().context("no held-out domain")?;
            let held_scenes = corpus.scenes(Split::Eval, &[held])?;
            let zero = evaluate(&model, &held_scenes, Task::Segmentation)?;
            let t = Instant::now();
            let tuned = finetune(&cfg, &model, &corpus, held, 10)?;
            *out.secs.entry("finetune").or_default() += t.elapsed().as_secs_f64();
            let after = evaluate(&tuned.model, &held_scenes, Task::Segmentation)?;
            out.held_finite &= zero.loss.is_finite() && after.loss.is_finite();
            out.zero_shot.push(100.0 * zero.metrics.miou);
            out.finetuned.push(100.0 * after.metrics.miou);
            eprintln!("  seed {seed} held-out zero-shot {:.2} finetuned {:.2}", 100.0 * zero.metrics.miou, 100.0 * after.metrics.miou);
        }
    }
    Ok(out)
}

fn frozen_re(s: &Sweep) -> Verdict {
    let ok = !s.frozen.is_empty() && s.frozen.iter().all(|&(a, b)| a && b);
    (ok, format!("30-epoch full runs, (Re bit-identical, all experts moved) per seed: {:?}", s.frozen))
}

fn balance_study(s: &Sweep) -> Verdict {
    let full = median(&s.alpha["full"]);
    let native = median(&s.alpha["native"]);
    let secs = s.secs["full"] + s.secs["native"] + s.secs["pretrain"];
    (
        full + 0.01 <= native && secs < 1800.0,
        format!("median alpha full {full:.4} vs fixed top-2 without balance {native:.4}; {:.0}s", secs),
    )
}

fn ablation_order(s: &Sweep) -> Verdict {
    let m = |k: &str| median(&s.miou[k]);
    let (b, re, dsr, full) = (m("baseline"), m("re"), m("re-dsr"), m("full"));
    let secs: f64 = ["pretrain", "baseline", "re", "re-dsr", "full"].iter().map(|k| s.secs[k]).sum();
    let ok = full >= dsr && dsr >= re && re >= b && full >= b + 1.0 && secs < 7200.0;
    (
        ok,
        format!("median mIoU full {full:.2}, re-dsr {dsr:.2}, re {re:.2}, baseline {b:.2}; {secs:.0}s"),
    )
}

fn unseen_domain(s: &Sweep) -> Verdict {
    let (z, f) = (median(&s.zero_shot), median(&s.finetuned));
    (
        s.held_finite && f >= z,
        format!("finite losses {}, median mIoU zero-shot {z:.2}, after 10 finetune epochs {f:.2}", s.held_finite),
    )
}

fn cli(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_doremi")).args(args).output()?;
    ensure!(out.status.success(), "doremi {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8(out.stdout)?)
}

fn cli_determinism(tmp: &Path) -> Result<Verdict> {
    let runs: Vec<_> = ["a", "b"].iter().map(|r| tmp.join("seed7").join(r)).collect();
    for dir in &runs {
        cli(&["--seed", "7", "--out", dir.to_str().context("path")?, "train"])?;
    }
    let mut same = Vec::new();
    for name in ["model.ckpt", "report.json", "utilization.csv", "config.toml"] {
        same.push((name, fs::read(runs[0].join(name))? == fs::read(runs[1].join(name))?));
    }
    Ok((same.iter().all(|s| s.1), format!("byte-identical: {same:?}")))
}

fn planted_routing(tmp: &Path) -> Result<Verdict> {
    let (domain, expert) = (1u32, 4usize);
    let dir = tmp.join("plant");
    fs::create_dir_all(&dir)?;
    let mut cfg = TrainConfig { epochs: 4, pretrain_epochs: 2, ..TrainConfig::default() };
    cfg.moe.as_mut().context("mixture config")?.allocation = Allocation::Fixed { k: 1 };
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?)?;
    let s = |p: &Path| p.to_str().map(str::to_owned).context("path");
    cli(&["--config", &s(&cfg_path)?, "--out", &s(&dir.join("model"))?, "train"])?;
    let model = s(&dir.join("model").join("model.ckpt"))?;
    cli(&[
        "--out",
        &s(&dir.join("analysis"))?,
        "analyze-experts",
        "--model",
        &model,
        "--plant",
        &format!("{domain}:{expert}"),
        "--plant-steps",
        "150",
        "--plant-step-size",
        "1.0",
        "--plant-scenes",
        "1",
    ])?;
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("analysis").join("analysis.json"))?)?;
    let layers = summary["utilization"].as_array().context("utilization")?;
    let mut worst_sum = 0.0f64;
    let mut margins = Vec::new();
    for layer in layers {
        let hist: BTreeMap<String, Vec<f64>> = serde_json::from_value(layer.clone())?;
        for h in hist.values() {
            worst_sum = worst_sum.max((h.iter().sum::<f64>() - 1.0).abs());
        }
        let h = hist.get(&domain.to_string()).context("planted domain missing")?;
        let rival = h.iter().enumerate().filter(|&(j, _)| j != expert).map(|(_, v)| *v).fold(0.0, f64::max);
        margins.push(h[expert] - rival);
    }
    if layers.is_empty() {
        bail!("no mixture layers");
    }
    let ok = worst_sum <= 1e-9 && margins.iter().all(|&m| m > 0.0);
    Ok((
        ok,
        format!("domain {domain} -> expert {expert}: margin per layer {margins:.3?}, max |sum - 1| {worst_sum:.1e}"),
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| only.is_empty() || only.contains(&i);
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Result<Verdict>, f64)> = Vec::new();
    let mut run = |i: usize, name: &'static str, f: &mut dyn FnMut() -> Result<Verdict>| {
        if want(i) {
            let t = Instant::now();
            let v = f();
            let secs = t.elapsed().as_secs_f64();
            report(i, name, &v, secs);
            results.push((i, name, v, secs));
        }
    };
    run(1, "entropy-driven allocation vs oracle", &mut eda_oracle);
    run(2, "entropy-to-count mapping", &mut count_mapping);
    run(3, "balance loss anchors and gate gradient", &mut balance_anchors);
    run(4, "gradient suite", &mut gradient_suite);
    run(6, "submanifold conv vs dense", &mut sparse_vs_dense);
    run(10, "teacher EMA closed form", &mut ema_closed_form);
    if [5, 7, 8, 9].iter().any(|&i| want(i)) {
        eprintln!("training sweep over {SEEDS} seeds");
        let t = Instant::now();
        let sweep = sweep();
        eprintln!("sweep took {:.0}s", t.elapsed().as_secs_f64());
        let checks: [(usize, &str, fn(&Sweep) -> Verdict); 4] = [
            (5, "frozen Re and moved experts", frozen_re),
            (7, "balance study alpha", balance_study),
            (8, "ablation ordering", ablation_order),
            (9, "unseen-domain protocol", unseen_domain),
        ];
        for (i, name, check) in checks {
            let v = match &sweep {
                Ok(s) => Ok(check(s)),
                Err(e) => Err(anyhow::anyhow!("sweep failed: {e:#}")),
            };
            run(i, name, &mut || match &v {
                Ok(v) => Ok(v.clone()),
                Err(e) => Err(anyhow::anyhow!("{e:#}")),
            });
        }
    }
    run(11, "CLI train determinism", &mut || cli_determinism(tmp.path()));
    run(12, "utilization histograms and planted routing", &mut || planted_routing(tmp.path()));

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    let mut failed = 0;
    for (i, name, v, secs) in &results {
        let pass = matches!(v, Ok((true, _)));
        failed += usize::from(!pass);
        println!("{} {i:>2} {name} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(i: usize, name: &str, v: &Result<Verdict>, secs: f64) {
    match v {
        Ok((pass, detail)) => println!("{} {i:>2} {name}: {detail} ({secs:.1}s)", if *pass { "PASS" } else { "FAIL" }),
        Err(e) => println!("FAIL {i:>2} {name}: error: {e:#} ({secs:.1}s)"),
    }
}
