//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`; exits non-zero if any criterion fails.

mod common;

use std::cell::Cell;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cdiffdet::data::{generate_synthetic, SynthConfig};
use cdiffdet::detector::{
    gradcheck_block, infer, infer_with, stream_rng, train_step, Denoiser, DetectorConfig, Model,
    Prediction, TrainState, BLOCKS,
};
use cdiffdet::diffusion::{
    epsilon_from_x0, normalize, Diffusion, NoiseSchedule, COSINE_OFFSET, DEFAULT_SCALE,
};
use cdiffdet::eval::{average_precision, Detection};
use cdiffdet::geometry::{assign_fpn_level, giou, iou, nms, BoxXyxy, BASE_SIZE};
use cdiffdet::head::{self, HeadConfig};
use cdiffdet::loss::hungarian;
use cdiffdet::nn::ParamStore;
use cdiffdet::tensor::gradcheck::GradCheckOptions;
use cdiffdet::{Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn schedule() -> Outcome {
    let s = e2s(NoiseSchedule::cosine(1000, COSINE_OFFSET))?;
    let ab = s.alpha_bars();
    ensure(ab.len() == 1001, format!("{} entries", ab.len()))?;
    ensure(ab[0] == 1.0, format!("alpha_bar[0] = {}", ab[0]))?;
    ensure(ab[1000] < 1e-3, format!("alpha_bar[T] = {:e}", ab[1000]))?;
    let bad = ab.windows(2).position(|w| w[1] >= w[0]);
    ensure(
        bad.is_none(),
        format!("not decreasing at t = {:?}", bad.map(|i| i + 1)),
    )?;
    Ok(format!("alpha_bar[T] = {:.3e}", ab[1000]))
}

fn diffusion_algebra() -> Outcome {
    let mut d = Diffusion::new(
        e2s(NoiseSchedule::cosine(1000, COSINE_OFFSET))?,
        DEFAULT_SCALE,
    );
    d.clamp = false;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let t = rng.random_range(2..=1000);
        let t_prev = rng.random_range(1..t);
        let x0 = Tensor::uniform(&[4], -2.0, 2.0, &mut rng);
        let eps = Tensor::randn(&[4], &mut rng);
        let xt = e2s(d.q_sample(&x0, t, &eps))?;
        let back = e2s(epsilon_from_x0(&xt, &x0, e2s(d.schedule.alpha_bar(t))?))?;
        let step = e2s(d.ddim_step(&xt, &x0, &eps, t, t_prev))?;
        let direct = e2s(d.q_sample(&x0, t_prev, &eps))?;
        worst = worst
            .max(back.max_abs_diff(&eps))
            .max(step.max_abs_diff(&direct));
    }
    ensure(worst < 1e-10, format!("worst error {worst:e}"))?;
    Ok(format!("worst error {worst:.1e} over 10^4 cases"))
}

fn hungarian_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..1000 {
        let cost = common::random_cost(&mut rng, case);
        let got = e2s(hungarian(&cost))?;
        let (total, pairs) = common::brute_force_assignment(&cost);
        ensure(
            got.total == total && got.pairs == pairs,
            format!("case {case} differs: {cost:?}"),
        )?;
    }
    Ok("1000 matrices up to 7x7 identical".into())
}

fn gradient_checks() -> Outcome {
    let mut worst = (0.0f64, "");
    for &name in BLOCKS {
        let r = e2s(gradcheck_block(name, 0, &GradCheckOptions::default()))?;
        ensure(
            r.passes(1e-4),
            format!("{name}: max relative error {:e}", r.max_rel_err),
        )?;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name);
        }
    }
    Ok(format!(
        "{} blocks, worst {:.1e} ({})",
        BLOCKS.len(),
        worst.0,
        worst.1
    ))
}

fn caf_single_key() -> Outcome {
    let cfg = HeadConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    e2s(head::init(&mut store, &cfg, &mut rng))?;
    let g = Graph::new();
    let p = store.bind(&g, false);
    for trial in 0..100 {
        let ctx = g.constant(Tensor::randn(&[2, cfg.context_dim], &mut rng));
        let a = g.constant(Tensor::randn(&[2, 16, cfg.dim], &mut rng));
        let b = g.constant(Tensor::randn(&[2, 16, cfg.dim], &mut rng));
        let ya = e2s(head::cross_attended(&p, &cfg, a, ctx))?.value();
        let yb = e2s(head::cross_attended(&p, &cfg, b, ctx))?.value();
        ensure(
            ya.data() == yb.data(),
            format!("trial {trial}: outputs differ"),
        )?;
    }
    Ok("100 trials bit-identical".into())
}

fn nms_and_ap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scene in 0..100 {
        let (boxes, scores) = common::random_nms_scene(&mut rng);
        for thr in [0.3, 0.5, 0.7] {
            ensure(
                nms(&boxes, &scores, thr) == common::nms_oracle(&boxes, &scores, thr),
                format!("nms scene {scene} thr {thr}"),
            )?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for scene in 0..100 {
        let (dets, gts) = common::random_ap_scene(&mut rng);
        for thr in [0.5, 0.75] {
            let d =
                (average_precision(&dets, &gts, thr) - common::ap_oracle(&dets, &gts, thr)).abs();
            ensure(
                d <= 1e-9,
                format!("ap scene {scene} thr {thr}: off by {d:e}"),
            )?;
            worst = worst.max(d);
        }
    }
    Ok(format!(
        "100 nms scenes exact, 100 ap scenes within {worst:.1e}"
    ))
}

fn geometry_values() -> Outcome {
    let a = BoxXyxy::new(0.0, 0.0, 2.0, 2.0);
    let b = BoxXyxy::new(1.0, 1.0, 3.0, 3.0);
    let (v, gv) = (iou(&a, &b), giou(&a, &b));
    ensure((v - 1.0 / 7.0).abs() < 1e-12, format!("iou {v}"))?;
    ensure((gv + 5.0 / 63.0).abs() < 1e-12, format!("giou {gv}"))?;
    let level = assign_fpn_level(&BoxXyxy::new(0.0, 0.0, 224.0, 224.0), BASE_SIZE);
    ensure(level == 4, format!("level {level}"))?;
    Ok(format!("iou {v:.12}, giou {gv:.12}, level {level}"))
}

struct Oracle {
    signal: Vec<[f64; 4]>,
    calls: Cell<usize>,
}

impl Denoiser for Oracle {
    fn predict(&self, _image: &Tensor, x_t: &Tensor, _t: usize) -> Result<Prediction> {
        self.calls.set(self.calls.get() + 1);
        let (n, m) = (x_t.shape()[1], self.signal.len());
        Ok(Prediction {
            x0_hat: Tensor::from_fn(&[1, n, 4], |i| self.signal[(i / 4) % m][i % 4]),
            logits: Tensor::from_fn(
                &[1, n, 3],
                |i| if i % 3 == (i / 3) % m { 8.0 } else { -8.0 },
            ),
        })
    }
}

fn oracle_inference() -> Outcome {
    let gt = [
        BoxXyxy::new(3.0, 5.0, 21.0, 30.0),
        BoxXyxy::new(30.0, 28.0, 61.0, 50.0),
        BoxXyxy::new(10.0, 40.0, 26.0, 60.0),
    ];
    let signal: Vec<[f64; 4]> = gt
        .iter()
        .map(|b| {
            let c = b.to_cxcywh();
            let unit =
                Tensor::new(&[4], vec![c.cx / 64.0, c.cy / 64.0, c.w / 64.0, c.h / 64.0]).unwrap();
            let d = normalize(&unit, DEFAULT_SCALE).into_data();
            [d[0], d[1], d[2], d[3]]
        })
        .collect();
    let image = Tensor::zeros(&[1, 3, 64, 64]);
    let mut worst = 0.0f64;
    for steps in [1, 2, 4] {
        let cfg = DetectorConfig {
            ddim_steps: steps,
            ..DetectorConfig::small()
        };
        let oracle = Oracle {
            signal: signal.clone(),
            calls: Cell::new(0),
        };
        let res = e2s(infer_with(
            &oracle,
            &cfg,
            &image,
            &mut ChaCha8Rng::seed_from_u64(5),
            false,
        ))?;
        ensure(
            oracle.calls.get() == steps,
            format!("{} calls for {steps} steps", oracle.calls.get()),
        )?;
        ensure(
            res.len() == gt.len(),
            format!("{} detections for {} objects", res.len(), gt.len()),
        )?;
        for (k, g) in gt.iter().enumerate() {
            let i = res
                .labels
                .iter()
                .position(|&l| l == k)
                .ok_or(format!("class {k} missing"))?;
            for (u, v) in g.to_array().iter().zip(res.boxes[i].to_array()) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    ensure(worst < 1e-9, format!("box error {worst:e}"))?;
    Ok(format!("ddim_steps 1/2/4, max box error {worst:.1e} px"))
}

/// Settings of the scaled convergence run.
fn convergence_config() -> DetectorConfig {
    let mut cfg = DetectorConfig::small();
    cfg.seed = 0;
    cfg.ddim_steps = 1;
    cfg.train.steps = 2000;
    cfg.train.batch_size = 8;
    cfg.train.lr = 5e-4;
    cfg.train.warmup = 100;
    cfg
}

/// Mean loss over the 20 steps ending at the given 1-based step.
fn window(losses: &[f64], end: usize) -> f64 {
    losses[end - 20..end].iter().sum::<f64>() / 20.0
}

fn convergence() -> Outcome {
    let cfg = convergence_config();
    assert_eq!((cfg.backbone.fpn_dim, cfg.num_proposals), (64, 64));
    let all = e2s(generate_synthetic(
        &SynthConfig {
            seed: 7,
            ..Default::default()
        },
        250,
    ))?;
    let (train, test) = (all.slice(0, 200), all.slice(200, 50));
    let start = Instant::now();
    let mut model = e2s(Model::init(cfg.clone()))?;
    let mut state = TrainState::new(&model.params);
    let mut losses = Vec::new();
    for _ in 0..cfg.train.steps {
        losses.push(e2s(train_step(&mut model, &mut state, &train))?.loss.total);
    }
    let mut dets = Vec::new();
    for s in &test.samples {
        let r = e2s(infer(
            &model,
            &s.image,
            &mut stream_rng(cfg.seed, s.id),
            false,
        ))?;
        for i in 0..r.len() {
            dets.push(Detection {
                image_id: s.id,
                category: r.labels[i],
                bbox: r.boxes[i],
                score: r.scores[i],
            });
        }
    }
    let elapsed = start.elapsed();
    let ap50 = average_precision(&dets, &test.ground_truth(), 0.5);
    let (early, late) = (window(&losses, 50), window(&losses, 2000));
    let ratio = late / early;
    let summary = format!(
        "AP50 {ap50:.4}, loss {early:.3} -> {late:.3} (ratio {ratio:.3}), {:.0} s",
        elapsed.as_secs_f64()
    );
    ensure(ap50 >= 0.5, format!("AP50 below 0.50; {summary}"))?;
    ensure(
        ratio < 0.25,
        format!("final loss not below 25% of the step-50 loss; {summary}"),
    )?;
    ensure(
        elapsed <= Duration::from_secs(30 * 60),
        format!("over 30 min; {summary}"),
    )?;
    Ok(summary)
}

fn cli(args: &[&str], threads: &str) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdiffdet"))
        .args(args)
        .env("CDIFFDET_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn determinism() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = work.path();
    let data = w.join("data");
    cli(
        &["synth", "--out", path(&data), "--n", "8", "--seed", "5"],
        "1",
    )?;
    let cfg = w.join("config.json");
    std::fs::write(&cfg, r#"{"num_proposals": 16, "ddim_steps": 2, "score_threshold": 0.001, "train": {"batch_size": 4}}"#).map_err(|e| e.to_string())?;
    let mut ckpts = Vec::new();
    let mut detections = Vec::new();
    // The two runs use different worker counts.
    for (run, threads) in [("a", "1"), ("b", "3")] {
        let t = w.join(format!("train_{run}"));
        cli(
            &[
                "train",
                "--out",
                path(&t),
                "--data",
                path(&data),
                "--config",
                path(&cfg),
                "--steps",
                "20",
                "--seed",
                "3",
            ],
            threads,
        )?;
        let ck = t.join("checkpoint.cdfd");
        let i = w.join(format!("infer_{run}"));
        cli(
            &[
                "infer",
                "--out",
                path(&i),
                "--checkpoint",
                path(&ck),
                "--data",
                path(&data),
            ],
            threads,
        )?;
        ckpts.push(std::fs::read(ck).map_err(|e| e.to_string())?);
        detections.push(std::fs::read(i.join("detections.json")).map_err(|e| e.to_string())?);
    }
    ensure(ckpts[0] == ckpts[1], "checkpoints differ")?;
    ensure(detections[0] == detections[1], "detections differ")?;
    let records: Vec<serde_json::Value> =
        serde_json::from_slice(&detections[0]).map_err(|e| e.to_string())?;
    ensure(!records.is_empty(), "no detections to compare")?;
    Ok(format!(
        "checkpoints ({} bytes) and {} detections identical",
        ckpts[0].len(),
        records.len()
    ))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("schedule", Duration::from_secs(1), schedule),
        (
            "diffusion algebra",
            Duration::from_secs(5),
            diffusion_algebra,
        ),
        (
            "hungarian vs brute force",
            Duration::from_secs(30),
            hungarian_oracle,
        ),
        ("gradient checks", Duration::from_secs(300), gradient_checks),
        (
            "cross-attention single key",
            Duration::from_secs(1),
            caf_single_key,
        ),
        ("nms and ap oracles", Duration::from_secs(30), nms_and_ap),
        ("geometry values", Duration::from_secs(1), geometry_values),
        (
            "oracle-head inference",
            Duration::from_secs(1),
            oracle_inference,
        ),
        (
            "scaled convergence",
            Duration::from_secs(30 * 60),
            convergence,
        ),
        ("determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let took = t.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > *budget => Err(format!(
                "{msg}; took {:.2} s, budget {} s",
                took.as_secs_f64(),
                budget.as_secs()
            )),
            o => o,
        };
        match outcome {
            Ok(msg) => println!(
                "PASS {:>2} {name}: {msg} [{:.2} s]",
                i + 1,
                took.as_secs_f64()
            ),
            Err(msg) => {
                failed += 1;
                println!(
                    "FAIL {:>2} {name}: {msg} [{:.2} s]",
                    i + 1,
                    took.as_secs_f64()
                );
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
