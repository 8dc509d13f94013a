//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p maskgrasp --test acceptance`.

#![allow(clippy::approx_constant)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use maskgrasp::attention::{
    language_vision_cross_attention, multi_head, single_head, text_self_attention,
    vision_segmentation_cross_attention, AttentionParams,
};
use maskgrasp::data::{read_dataset_from, write_dataset_to};
use maskgrasp::geometry::{
    evaluate_split, harmonic_mean, is_success, passes_thresholds, rotated_iou, SceneResult, Split,
};
use maskgrasp::gradcheck_suite::run_suite;
use maskgrasp::losses::{correspondence_loss_value, grasp_loss_value, mine_hard_negatives};
use maskgrasp::train::predict;
use maskgrasp::{
    evaluate_model, generate_dataset, init_params, train, Checkpoint, Execution, GeneratorConfig, GraspRect,
    LossConfig, QueryMode, Tape, TrainConfig,
};
use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(start.elapsed() < limit, || format!("took {:.1?}, limit {limit:?}", start.elapsed()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(None).map_err(|e| e.to_string())?;
    let worst = report.worst().unwrap();
    let max = report.max_rel_error();
    ensure(report.passed() && max < 1e-4, || {
        format!("{} failed with rel error {:.3e}", worst.name, worst.max_rel_error)
    })?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("{} checks, max rel error {max:.2e} ({})", report.checks.len(), worst.name))
}

fn attention_correctness() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut worst = 0.0f64;
    let mut track = |name: &str, seed: u64, got: &Mat, want: &Mat| -> Result<(), String> {
        let d = max_abs_diff(got, want);
        worst = worst.max(d);
        ensure(d < TOL, || format!("{name} instance {seed}: diff {d:.3e}"))
    };
    let stochastic = |w: &Mat| -> Result<(), String> {
        for row in w {
            let s: f64 = row.iter().sum();
            ensure(row.iter().all(|&x| x >= 0.0) && (s - 1.0).abs() < TOL, || format!("row sum {s}"))?;
        }
        Ok(())
    };
    for seed in 0..100u64 {
        let inst = Instance::random(seed);
        let (s, z) = with_tape(&inst, |t, [ft, _, _], p| text_self_attention(t, ft, p).unwrap());
        let (so, zo) = text_stream(&inst.f_text, &inst.text, inst.heads);
        track("text", seed, &z, &zo)?;
        track("text weights", seed, &s, &so)?;
        stochastic(&s)?;

        let inst = Instance::random(1000 + seed);
        for mode in [QueryMode::TextQuery, QueryMode::RegionQuery] {
            let (s, z) = with_tape(&inst, |t, [ft, fv, _], p| {
                language_vision_cross_attention(t, ft, fv, p, mode).unwrap()
            });
            let (so, zo) = match mode {
                QueryMode::TextQuery => vis_stream_text_query(&inst.f_text, &inst.f_vis, &inst.vis, inst.heads),
                QueryMode::RegionQuery => vis_stream_region_query(&inst.f_text, &inst.f_vis, &inst.vis, inst.heads),
            };
            track("vis", seed, &z, &zo)?;
            track("vis weights", seed, &s, &so)?;
            stochastic(&s)?;
        }

        let inst = Instance::random(2000 + seed);
        let (s, z) = with_tape(&inst, |t, [_, fv, fs], p| vision_segmentation_cross_attention(t, fv, fs, p).unwrap());
        let (so, zo) = seg_stream(&inst.f_vis, &inst.f_seg, &inst.seg, inst.heads);
        track("seg", seed, &z, &zo)?;
        track("seg weights", seed, &s, &so)?;
        stochastic(&s)?;

        let mut r = rng(4000 + seed);
        let d = r.random_range(2..9);
        let (nq, nk) = (r.random_range(1..6), r.random_range(1..6));
        let q = rand_mat(&mut r, nq, d, 2.0);
        let kv = rand_mat(&mut r, nk, d, 2.0);
        let mut stream = Stream::random(&mut r, d);
        stream.wo = (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect();
        let mut p = AttentionParams::zeroed(d, 1).unwrap();
        stream.load_into(&mut p.vis);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let (qv, kvv) = (tape.constant(to_tensor(&q)), tape.constant(to_tensor(&kv)));
        let (mh, mh_w) = multi_head(&mut tape, qv, kvv, kvv, &vars.vis, 1).unwrap();
        let (sh, sh_w) = single_head(&mut tape, qv, kvv, kvv, &vars.vis).unwrap();
        track("H=1 vs single head", seed, &from_tensor(tape.value(mh)), &from_tensor(tape.value(sh)))?;
        track("H=1 weights", seed, &from_tensor(&mh_w), &from_tensor(tape.value(sh_w)))?;
    }
    Ok(format!("400 stream instances + 100 head-equivalence instances, max diff {worst:.2e}"))
}

fn loss_correctness() -> Outcome {
    let mut r = rng(77);
    let mut worst = 0.0f64;
    for n in 0..1000 {
        let m = r.random_range(2..=16);
        let d = r.random_range(2..=8);
        let alpha = r.random_range(0.05..1.5);
        let zv = rand_mat(&mut r, m, d, 1.0);
        let zs = rand_mat(&mut r, m, d, 1.0);
        let (want, wi, wj) = correspondence(&zv, &zs, alpha);
        let cfg = LossConfig { alpha, ..LossConfig::default() };
        let got = correspondence_loss_value(&to_tensor(&zv), &to_tensor(&zs), &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() < 1e-12, || format!("L_cor instance {n}: {got} vs {want}"))?;
        let mined = mine_hard_negatives(&to_tensor(&zv), &to_tensor(&zs)).map_err(|e| e.to_string())?;
        ensure(mined == (wi, wj), || format!("mining differs on instance {n}"))?;
    }

    let cfg = LossConfig::default();
    let eye: Mat = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    let l0 = correspondence_loss_value(&to_tensor(&eye), &to_tensor(&eye), &cfg).unwrap();
    ensure(l0.abs() < 1e-12, || format!("orthonormal case {l0}"))?;
    let same = vec![vec![0.3, -1.2, 0.8]; 4];
    let l1 = correspondence_loss_value(&to_tensor(&same), &to_tensor(&same), &cfg).unwrap();
    ensure((l1 - 0.8).abs() < 1e-12, || format!("identical case {l1}"))?;

    let gt = GraspRect::new(0.5, 0.5, 0.3, 0.2, 45.0).unwrap();
    let exact = vec![vec![0.5, 0.5, 0.3, 0.2, 0.5f64.atanh()]];
    let l2 = grasp_loss_value(&to_tensor(&vec![vec![0.0, 0.0]]), &to_tensor(&exact), &[true], &[gt], &cfg).unwrap();
    ensure((l2 - std::f64::consts::LN_2).abs() < 1e-9 && (l2 - 0.69315).abs() < 1e-5, || format!("ln 2 case {l2}"))?;
    let off = vec![vec![1.0, 1.0, 0.8, 0.7, 0.0]];
    let l3 = grasp_loss_value(&to_tensor(&vec![vec![60.0, -60.0]]), &to_tensor(&off), &[true], &[gt], &cfg).unwrap();
    ensure((l3 - 0.875).abs() < 1e-9, || format!("0.875 case {l3}"))?;
    Ok(format!("1000 L_cor instances, max diff {worst:.2e}; hand cases 0, 0.8, {l2:.5}, {l3}"))
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = SmallRng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for n in 0..10_000 {
        let (a, b) = random_rect_pair(&mut rng);
        let exact = rotated_iou(&a, &b);
        let mc = mc_iou(&a, &b, 1000, &mut rng);
        worst = worst.max((exact - mc).abs());
        ensure((exact - mc).abs() < 5e-3, || format!("pair {n} {a:?} {b:?}: exact {exact} vs MC {mc}"))?;
    }
    let sq = GraspRect::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
    let shifted = GraspRect::new(0.5, 0.0, 1.0, 1.0, 0.0).unwrap();
    let turned = GraspRect::new(0.0, 0.0, 1.0, 1.0, 45.0).unwrap();
    let third = rotated_iou(&sq, &shifted);
    let diag = rotated_iou(&sq, &turned);
    ensure((third - 1.0 / 3.0).abs() < 1e-9, || format!("offset squares {third}"))?;
    ensure((diag - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, || format!("45° case {diag}"))?;
    ensure(
        passes_thresholds(0.30, 10.0) && !passes_thresholds(0.20, 10.0) && !passes_thresholds(0.30, 35.0),
        || "truth table".into(),
    )?;
    let tilted = GraspRect::new(0.0, 0.0, 1.0, 1.0, 35.0).unwrap();
    ensure(
        is_success(&shifted, &[sq]).unwrap() && !is_success(&tilted, &[sq]).unwrap(),
        || "is_success on rectangles".into(),
    )?;
    within(Duration::from_secs(300), start)?;
    Ok(format!("10000 pairs at 10^6 samples, max |exact - MC| {worst:.2e}; {third:.9}, {diag:.9}"))
}

fn rates(model: &maskgrasp::Model, mode: QueryMode, eval: &[maskgrasp::SceneExample]) -> (f64, f64, f64) {
    let r = evaluate_model(model, mode, eval, Execution::default()).unwrap();
    (r.seen_success().unwrap(), r.unseen_success().unwrap(), r.harmonic.unwrap())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let gen = GeneratorConfig::default();
    let ds = generate_dataset(&gen, 3000, 500, 500, Execution::default()).map_err(|e| e.to_string())?;
    let eval = ds.eval();
    let cfg = TrainConfig::default();
    let untrained = init_params(gen.d, cfg.heads, 2 * gen.d, cfg.seed).unwrap();
    let (bs, bu, _) = rates(&untrained, cfg.mode, &eval);
    let ckpt = train(&cfg, &ds.train, &[], Execution::default(), |_| {}).map_err(|e| e.to_string())?;
    let (s, u, h) = rates(&ckpt.model, cfg.mode, &eval);
    let detail = format!("seen {s:.3}, unseen {u:.3}, H {h:.3}; untrained seen {bs:.3}, unseen {bu:.3}");
    ensure(s >= 0.90 && u >= 0.80 && bs < 0.35 && bu < 0.35, || detail.clone())?;
    within(Duration::from_secs(600), start)?;
    Ok(format!("{detail}; {:.0?}", start.elapsed()))
}

fn ablation_direction() -> Outcome {
    let mut sums = [[0.0; 2]; 3];
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let gen = GeneratorConfig {
            occlusion_mode: true,
            seed: 42 + seed,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&gen, 3000, 500, 500, Execution::default()).map_err(|e| e.to_string())?;
        let eval = ds.eval();
        let base = TrainConfig { seed, ..TrainConfig::default() };
        let variants = [
            base.clone(),
            TrainConfig { disable_seg_stream: true, ..base.clone() },
            TrainConfig { disable_correspondence_loss: true, ..base.clone() },
        ];
        let mut row = Vec::new();
        for (i, cfg) in variants.iter().enumerate() {
            let ckpt = train(cfg, &ds.train, &[], Execution::default(), |_| {}).map_err(|e| e.to_string())?;
            let (_, u, h) = rates(&ckpt.model, cfg.mode, &eval);
            sums[i][0] += u / 3.0;
            sums[i][1] += h / 3.0;
            row.push(format!("u {u:.3} H {h:.3}"));
        }
        lines.push(format!("seed {seed}: full [{}], no-seg [{}], no-cor [{}]", row[0], row[1], row[2]));
    }
    for l in &lines {
        println!("    {l}");
    }
    let seg_gap = sums[0][0] - sums[1][0];
    let cor_gap = sums[0][1] - sums[2][1];
    let detail = format!(
        "mean unseen full {:.3} vs no-seg {:.3} (gap {seg_gap:+.3}, need >= 0.05); mean H full {:.3} vs no-cor {:.3} (gap {cor_gap:+.3}, need >= 0.01)",
        sums[0][0], sums[1][0], sums[0][1], sums[2][1]
    );
    ensure(seg_gap >= 0.05 && cor_gap >= 0.01, || detail.clone())?;
    Ok(detail)
}

fn dataset_bytes(ds: &maskgrasp::Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut all = ds.train.clone();
    all.extend(ds.eval());
    write_dataset_to(&mut buf, &ds.config, &all).unwrap();
    buf
}

fn determinism_and_persistence() -> Outcome {
    let gen = GeneratorConfig { d: 16, occlusion_mode: true, ..GeneratorConfig::default() };
    let a = generate_dataset(&gen, 200, 40, 40, Execution::default()).unwrap();
    let b = generate_dataset(&gen, 200, 40, 40, Execution::default()).unwrap();
    let c = generate_dataset(&gen, 200, 40, 40, Execution::Sequential).unwrap();
    ensure(dataset_bytes(&a) == dataset_bytes(&b) && dataset_bytes(&a) == dataset_bytes(&c), || {
        "datasets differ between runs".into()
    })?;

    let cfg = TrainConfig { epochs: 3, heads: 2, seed: 4, ..TrainConfig::default() };
    let eval = a.eval();
    let k1 = train(&cfg, &a.train, &eval, Execution::default(), |_| {}).unwrap();
    let k2 = train(&cfg, &a.train, &eval, Execution::Sequential, |_| {}).unwrap();
    ensure(k1.to_json().unwrap() == k2.to_json().unwrap(), || "checkpoints differ between runs".into())?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    k1.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    ensure(loaded == k1, || "loaded checkpoint differs".into())?;
    for scene in &eval {
        for mode in [QueryMode::TextQuery, QueryMode::RegionQuery] {
            let p = predict(&k1.model, scene, mode).unwrap();
            let q = predict(&loaded.model, scene, mode).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            let rect_bits = |p: &maskgrasp::GraspPrediction| {
                p.rects.iter().flat_map(|r| bits(&r.to_array())).collect::<Vec<_>>()
            };
            ensure(
                bits(&p.scores) == bits(&q.scores) && rect_bits(&p) == rect_bits(&q) && p.best_index == q.best_index,
                || format!("forward differs after reload on scene {}", scene.scene_id),
            )?;
        }
    }

    let mut r = rng(99);
    let mut scenes = Vec::new();
    let mut cfgs = Vec::new();
    for i in 0..10 {
        let g = GeneratorConfig {
            d: r.random_range(10..24),
            m: r.random_range(2..10),
            k: r.random_range(1..6),
            num_categories: r.random_range(8..24),
            noise_sigma: r.random_range(0.0..0.5),
            occlusion_mode: r.random_bool(0.5),
            seed: r.random(),
        };
        let ds = generate_dataset(&g, 6, 2, 2, Execution::default()).unwrap();
        let mut s = ds.train.clone();
        s.extend(ds.eval());
        ensure(s.len() == 10, || format!("batch {i}"))?;
        cfgs.push(g);
        scenes.push(s);
    }
    for (g, s) in cfgs.iter().zip(&scenes) {
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, g, s).unwrap();
        let (g2, s2) = read_dataset_from(buf.as_slice()).unwrap();
        ensure(&g2 == g && &s2 == s, || "read(write(x)) != x".into())?;
        let mut again = Vec::new();
        write_dataset_to(&mut again, &g2, &s2).unwrap();
        ensure(again == buf, || "rewrite is not byte-identical".into())?;
    }
    Ok(format!(
        "datasets and checkpoints byte-identical across runs and execution modes; reload bit-exact on {} forwards; 100 scenes round-trip",
        2 * eval.len()
    ))
}

fn metric_algebra() -> Outcome {
    let mut r = rng(8);
    let results = |succ: usize, count: usize, split: Split, r: &mut rand_chacha::ChaCha8Rng| {
        let mut v: Vec<SceneResult> = (0..count).map(|i| SceneResult { success: i < succ, split }).collect();
        v.shuffle(r);
        v
    };
    for n in 0..2000 {
        let (cs, cu) = (r.random_range(1..300), r.random_range(1..300));
        let (ss, su) = (r.random_range(0..=cs), r.random_range(0..=cu));
        let mut all = results(ss, cs, Split::Seen, &mut r);
        all.extend(results(su, cu, Split::Unseen, &mut r));
        all.shuffle(&mut r);
        let rep = evaluate_split(&all).unwrap();
        let (s, u) = (ss as f64 / cs as f64, su as f64 / cu as f64);
        let want = if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) };
        let h = rep.harmonic.unwrap();
        ensure((h - want).abs() < 1e-12, || format!("instance {n}: H {h} vs {want}"))?;

        let mut same = results(ss, cs, Split::Seen, &mut r);
        same.extend(results(ss, cs, Split::Unseen, &mut r));
        let hx = evaluate_split(&same).unwrap().harmonic.unwrap();
        ensure((hx - s).abs() < 1e-12, || format!("H(x,x) = {hx}, x = {s}"))?;

        let mut zero = results(ss, cs, Split::Seen, &mut r);
        zero.extend(results(0, cu, Split::Unseen, &mut r));
        ensure(evaluate_split(&zero).unwrap().harmonic == Some(0.0), || "H(s,0) != 0".into())?;

        let x: f64 = r.random();
        ensure((harmonic_mean(x, x) - x).abs() < 1e-12 && harmonic_mean(x, 0.0) == 0.0, || format!("x = {x}"))?;
    }
    Ok("2000 randomized split reports".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("attention correctness", attention_correctness),
        ("loss correctness", loss_correctness),
        ("geometry", geometry),
        ("end-to-end learning", end_to_end),
        ("ablation direction", ablation_direction),
        ("determinism and persistence", determinism_and_persistence),
        ("metric algebra", metric_algebra),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
