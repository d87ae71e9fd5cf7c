//! Acceptance criteria, one pass/fail line each. Run with
//! `cargo test -p decepkit-cli --test acceptance`.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use decepkit::dmc::{
    distill_loss, kl_div, modality_predict, teacher_distribution, teacher_predict, DistillHead, FusedHead, ProbDist,
    ProjectorParams,
};
use decepkit::harness::{
    build_model, gen_synthetic, gradcheck_suite, run_variant, stabilization, train, ExperimentConfig,
    GradCheckOptions, Model, ModelConfig, Sample, SyntheticSpec, TrainConfig, Variant,
};
use decepkit::numerics::{Graph, ParamStore, Tensor};
use decepkit::schema::{
    dedup_filter, parse_report, read_manifest, validate_manifest, ParseError, Ratio, Record, T4_MANIFEST_CSV,
    T4_TOTALS,
};
use decepkit::sics::{blend, polarity_apply, sics_forward};
use decepkit::Label;
use oracles::{random_rows, random_sics, DmcRef, SicsRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type Expectation = (&'static str, fn(&ParseError) -> bool);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn decepkit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_decepkit")).args(args).output().expect("binary runs")
}

fn gradient_certification() -> Outcome {
    let started = Instant::now();
    let opts = GradCheckOptions::default();
    ensure(opts.d <= 8 && opts.len <= 5 && opts.warm_steps == 100, "suite configuration out of range")?;
    let report = gradcheck_suite(&opts).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    let names: Vec<&str> = report.cases.iter().map(|c| c.name.as_str()).collect();
    ensure(names == ["sics", "dmc", "full@init", "full@100"], format!("cases {names:?}"))?;
    ensure(report.tol == 1e-4, "tolerance is not 1e-4")?;
    for c in &report.cases {
        ensure(c.passed, format!("{} max rel error {:.3e}", c.name, c.max_rel_error))?;
    }
    ensure(elapsed < 30.0, format!("took {elapsed:.1}s"))?;

    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let out = decepkit(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    ensure(out.status.success(), "gradcheck command failed")?;
    Ok(format!("max rel error {:.2e}, {elapsed:.2}s", report.max_rel_error()))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_sics: f64 = 0.0;
    for _ in 0..100 {
        let (d, h, l) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6));
        let (store, p, mut cfg) = random_sics(&mut rng, d, h);
        cfg.lambda = rng.random_range(0.0..=1.0);
        let x = random_rows(&mut rng, l, d, 3.0);
        let (out, _) = sics_forward(&Tensor::from_rows(&x).unwrap(), &store, &p, &cfg).map_err(|e| e.to_string())?;
        let expect = SicsRef::read(&store, &p, d, h).forward(&x, cfg.lambda);
        for (a, b) in out.data().iter().zip(expect.concat()) {
            worst_sics = worst_sics.max((a - b).abs());
        }
    }
    let mut worst_dmc: f64 = 0.0;
    for _ in 0..100 {
        let (dv, da, p) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let mut s = ParamStore::new();
        let pv = ProjectorParams::init(&mut s, "pv", dv, p, rng.random());
        let pa = ProjectorParams::init(&mut s, "pa", da, p, rng.random());
        let head = DistillHead::init(&mut s, "head", p, rng.random());
        let fused = FusedHead::init(&mut s, "fused", p, rng.random());
        for id in s.ids().collect::<Vec<_>>() {
            s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
        }
        let reference = DmcRef::read(&s, &pv, &pa, &head, &fused, (dv, da, p));
        let (lv, la) = (rng.random_range(1..6), rng.random_range(1..6));
        let xv = random_rows(&mut rng, lv, dv, 2.0);
        let xa = random_rows(&mut rng, la, da, 2.0);
        let (tv, ta) = (Tensor::from_rows(&xv).unwrap(), Tensor::from_rows(&xa).unwrap());
        let p_v = modality_predict(&tv, &s, &pv, &head).map_err(|e| e.to_string())?;
        let p_a = modality_predict(&ta, &s, &pa, &head).map_err(|e| e.to_string())?;
        let q = teacher_predict(&tv, &ta, &s, &pv, &pa, &fused).map_err(|e| e.to_string())?;
        let (rv, ra, rq) = (reference.student(0, &xv), reference.student(1, &xa), reference.teacher(&xv, &xa));
        for (a, b) in [(p_v, rv), (p_a, ra), (q, rq)] {
            for (x, y) in a.probs().iter().zip(b) {
                worst_dmc = worst_dmc.max((x - y).abs());
            }
        }
        let loss = distill_loss(&q, &p_v, &p_a).map_err(|e| e.to_string())?;
        worst_dmc = worst_dmc.max((loss - (DmcRef::kl(rq, rv) + DmcRef::kl(rq, ra))).abs());
    }
    ensure(worst_sics <= 1e-12, format!("adapter differs by {worst_sics:e}"))?;
    ensure(worst_dmc <= 1e-12, format!("distillation differs by {worst_dmc:e}"))?;
    Ok(format!("worst |diff| adapter {worst_sics:.1e}, distillation {worst_dmc:.1e}"))
}

fn sics_analytic_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let d = rng.random_range(1..9);
        let (store, p, mut cfg) = random_sics(&mut rng, d, d);
        let x = Tensor::from_rows(&random_rows(&mut rng, 3, d, 4.0)).unwrap();
        cfg.lambda = 0.0;
        let (out, _) = sics_forward(&x, &store, &p, &cfg).map_err(|e| e.to_string())?;
        ensure(out.data() == x.data(), "lambda 0 is not the identity")?;
        cfg.lambda = 0.2;
        let zeros = Tensor::zeros(&[3, d]);
        let (out, _) = sics_forward(&zeros, &store, &p, &cfg).map_err(|e| e.to_string())?;
        ensure(out.data().iter().all(|&v| v == 0.0), "zero input is not a fixpoint")?;
    }

    for _ in 0..50 {
        let (mut store, p, cfg) = random_sics(&mut rng, 5, 5);
        let x = Tensor::from_rows(&random_rows(&mut rng, 3, 5, 2.0)).unwrap();
        let (_, before) = sics_forward(&x, &store, &p, &cfg).map_err(|e| e.to_string())?;
        for (a, b) in [(p.w_plus, p.w_minus), (p.b_plus, p.b_minus)] {
            let (ta, tb) = (store.get(a).clone(), store.get(b).clone());
            store.get_mut(a).data_mut().copy_from_slice(tb.data());
            store.get_mut(b).data_mut().copy_from_slice(ta.data());
        }
        let (_, after) = sics_forward(&x, &store, &p, &cfg).map_err(|e| e.to_string())?;
        let flipped = before.refined.data().iter().zip(after.refined.data()).all(|(a, b)| *a == -*b);
        ensure(flipped, "swapping polarity branches does not negate the refinement")?;
    }

    let (store, p, cfg) = random_sics(&mut rng, 4, 4);
    for _ in 0..10_000 {
        let l = rng.random_range(1..4);
        let x = Tensor::from_rows(&random_rows(&mut rng, l, 4, 10.0)).unwrap();
        let (_, t) = sics_forward(&x, &store, &p, &cfg).map_err(|e| e.to_string())?;
        ensure(t.gate > 0.0 && t.gate < 1.0, format!("gate {}", t.gate))?;
    }

    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
    let wp = g.input(Tensor::vector(vec![0.5, -0.3]).unwrap());
    let wm = g.input(Tensor::vector(vec![0.2, 0.1]).unwrap());
    let refined = polarity_apply(&mut g, x, wp, wm).map_err(|e| e.to_string())?;
    let r = g.value(refined).data().to_vec();
    let out = blend(&mut g, refined, x, 0.2).map_err(|e| e.to_string())?;
    let o = g.value(out).data().to_vec();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    ensure(close(r[0], 0.3) && close(r[1], 0.2), format!("refined {r:?}"))?;
    ensure(close(o[0], 0.86) && close(o[1], -1.56), format!("output {o:?}"))?;
    Ok(format!("worked example refined {r:?} output {o:?}"))
}

fn sum_distill_terms(model: &Model, store: &mut ParamStore, batch: &[&Sample]) -> Result<(), String> {
    let mut g = Graph::new();
    let mut total = None;
    for s in batch {
        let vars = model.forward_sample(&mut g, store, s).map_err(|e| e.to_string())?;
        let t = model.distill_term(&mut g, store, &vars).map_err(|e| e.to_string())?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t).map_err(|e| e.to_string())?,
        });
    }
    g.backward_into(total.expect("non-empty batch"), store).map_err(|e| e.to_string())
}

fn dmc_analytic_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let q = ProbDist::new([a, 1.0 - a]).unwrap();
        let p = ProbDist::new([b, 1.0 - b]).unwrap();
        ensure(kl_div(&q, &p).unwrap() >= 0.0, format!("negative KL at {a}, {b}"))?;
        ensure(kl_div(&q, &q).unwrap() == 0.0, format!("KL(q, q) nonzero at {a}"))?;
    }
    let ln2 = kl_div(&ProbDist::new([1.0, 0.0]).unwrap(), &ProbDist::new([0.5, 0.5]).unwrap()).unwrap();
    ensure((ln2 - 2f64.ln()).abs() <= 1e-9, format!("KL([1,0],[.5,.5]) = {ln2}"))?;

    // The fused head sees no gradient from the distillation term.
    let data = gen_synthetic(&SyntheticSpec { n_samples: 32, seed: 5, ..Default::default() }).unwrap();
    let batch: Vec<&Sample> = data.samples.iter().take(8).collect();
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut store = model.store.clone();
    store.zero_grad();
    sum_distill_terms(&model, &mut store, &batch)?;
    for id in model.fused.ids() {
        ensure(store.grad_or_zeros(id).iter().all(|&v| v == 0.0), format!("{} has gradient", store.name(id)))?;
    }
    let head = model.distill.expect("default model has the head");
    let head_moves = head.ids().iter().all(|&id| store.grad_or_zeros(id).iter().any(|&v| v != 0.0));
    ensure(head_moves, "student head received no gradient")?;
    let mut g = Graph::new();
    let vars = model.forward_sample(&mut g, &model.store, batch[0]).unwrap();
    let q = teacher_distribution(&mut g, vars.logits).unwrap();
    let loss = g.sum(q).unwrap();
    let mut probe = model.store.clone();
    probe.zero_grad();
    g.backward_into(loss, &mut probe).unwrap();
    ensure(model.store.ids().all(|id| probe.grad_or_zeros(id).iter().all(|&v| v == 0.0)), "teacher is not detached")?;

    // The trained student head is discarded at inference without changing predictions.
    let cfg = TrainConfig { epochs: 100, max_steps: Some(60), ..Default::default() };
    let mut trained = build_model(&cfg, 8, 8).unwrap();
    train(&mut trained, &data, &cfg).map_err(|e| e.to_string())?;
    let stripped = trained.without_distillation().map_err(|e| e.to_string())?;
    ensure(stripped.distill.is_none(), "stripped model still has a head")?;
    for s in &data.samples {
        let (a, b) = (trained.predict(s).unwrap(), stripped.predict(s).unwrap());
        ensure(a.probs() == b.probs(), "prediction changed without the student head")?;
    }
    let pred_params = trained.prediction_params();
    ensure(
        head.ids().iter().all(|id| !pred_params.contains(id)),
        "student head is on the prediction path",
    )?;
    Ok(format!("KL([1,0],[.5,.5]) - ln 2 = {:.1e}", ln2 - 2f64.ln()))
}

fn gradient_rebalancing() -> Outcome {
    let started = Instant::now();
    let data = SyntheticSpec::default();
    ensure(data.snr_v == 4.0 * data.snr_a, "snr_v is not 4 * snr_a")?;
    let cfg = ExperimentConfig {
        data,
        train: TrainConfig { epochs: 10_000, max_steps: Some(500), batch_size: 32, alpha: 0.1, ..Default::default() },
        seeds: (0..5).collect(),
        variants: vec![Variant::Base, Variant::Dmc],
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let base = run_variant(&cfg, Variant::Base, seed).map_err(|e| e.to_string())?;
        let dmc = run_variant(&cfg, Variant::Dmc, seed).map_err(|e| e.to_string())?;
        ensure(base.steps == 500 && dmc.steps == 500, "runs stopped early")?;
        let (b, d) = (base.balance_b.ok_or("no B for Base")?, dmc.balance_b.ok_or("no B for +DMC")?);
        if d < b {
            wins += 1;
        }
        detail.push(format!("{b:.3}->{d:.3}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let summary = format!("B without->with DMC [{}], {wins}/5 seeds, {elapsed:.1}s", detail.join(", "));
    ensure(wins >= 4, summary.clone())?;
    ensure(elapsed < 120.0, summary.clone())?;
    Ok(summary)
}

fn feature_stabilization() -> Outcome {
    let cfg = TrainConfig { epochs: 10_000, max_steps: Some(500), ..Default::default() };
    let mut stable = 0;
    for seed in 0..5 {
        let spec = SyntheticSpec { spike_frac: 0.05, spike_gain: 10.0, seed, ..Default::default() };
        let report = stabilization(&spec, &cfg).map_err(|e| e.to_string())?;
        ensure(!report.dims.is_empty(), "no spiked dimensions")?;
        if report.stabilized() {
            stable += 1;
        }
    }
    let summary = format!("{stable}/5 seeds tighter on every spiked dimension");
    ensure(stable >= 4, summary.clone())?;
    Ok(summary)
}

fn ablation_structure() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = decepkit(&[
            "ablate", "--seeds", "5", "--steps", "300", "--snr-v", "5", "--snr-a", "5", "--out",
            dir.to_str().unwrap(),
        ]);
        (out, dir)
    };
    let (first, a) = run("a");
    let (second, b) = run("b");
    ensure(first.status.success() && second.status.success(), "ablate failed")?;
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
    ensure(read(&a, "comparison.json")? == read(&b, "comparison.json")?, "comparison differs across runs")?;
    for slug in ["base", "dmc", "sics", "full"] {
        for seed in 0..5 {
            let f = format!("trace_{slug}_seed{seed}.csv");
            ensure(read(&a, &f)? == read(&b, &f)?, format!("{f} differs across runs"))?;
        }
    }
    let cmp: serde_json::Value = serde_json::from_slice(&read(&a, "comparison.json")?).map_err(|e| e.to_string())?;
    let variants = cmp["variants"].as_object().ok_or("no variants")?;
    ensure(variants.len() == 4, "expected four variants")?;
    for name in ["Base", "+DMC", "+SICS", "Full"] {
        let seeds: Vec<u64> = variants[name].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
        ensure(seeds == [0, 1, 2, 3, 4], format!("{name} seeds {seeds:?}"))?;
    }
    let full: Vec<f64> = variants["Full"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["metrics"]["accuracy"].as_f64().unwrap())
        .collect();
    ensure(full.iter().all(|&a| a >= 0.95), format!("Full accuracy {full:?}"))?;
    let means: Vec<String> = ["Base", "+DMC", "+SICS", "Full"]
        .iter()
        .map(|n| {
            let runs = variants[*n].as_array().unwrap();
            let m = runs.iter().map(|r| r["metrics"]["accuracy"].as_f64().unwrap()).sum::<f64>() / runs.len() as f64;
            format!("{n} {m:.3}")
        })
        .collect();
    Ok(format!("bit-reproducible; mean accuracy {}", means.join(", ")))
}

const WORDS: [&str; 24] = [
    "brow", "gaze", "lips", "hands", "posture", "shrug", "blink", "smile", "frown", "nod", "pause", "pitch",
    "tremor", "volume", "tempo", "hesitation", "filler", "stress", "calm", "steady", "averted", "raised", "tight",
    "rapid",
];

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(6..14);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn schema_grammar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let corpus: Vec<String> = (0..200)
        .map(|_| {
            let label = if rng.random_bool(0.5) { Label::Deceptive } else { Label::Truthful };
            let (v, a, r) = (phrase(&mut rng), phrase(&mut rng), phrase(&mut rng));
            format!("Video Cues: {v}; Audio Cues: {a}; Reasoning: {r}; Prediction: {label}")
        })
        .collect();
    for line in &corpus {
        let report = parse_report(line).map_err(|e| format!("{line}: {e}"))?;
        ensure(report.canonical() == *line && report.to_string() == *line, format!("round trip changed {line}"))?;
    }

    let cases: [Expectation; 4] = [
        ("Video Cues: a; Audio Cues: b; Reasoning: c", |e| matches!(e, ParseError::FieldCount { found: 3 })),
        ("Video Cues: ; Audio Cues: b; Reasoning: c; Prediction: Truthful", |e| {
            matches!(e, ParseError::EmptyField { index: 0 })
        }),
        ("Video Cues: a; Audio Cues: b; Reasoning: c; Prediction: Maybe", |e| {
            matches!(e, ParseError::UnknownPrediction { index: 3, value } if value == "Maybe")
        }),
        ("Video Cues: a; b; Audio Cues: c; Reasoning: d; Prediction: Deceptive", |e| {
            matches!(e, ParseError::InternalSemicolon { .. })
        }),
    ];
    for (line, expected) in cases {
        match parse_report(line) {
            Ok(_) => return Err(format!("accepted {line:?}")),
            Err(e) => ensure(expected(&e), format!("{line:?} gave {e:?}"))?,
        }
    }

    let distinct: Vec<Record> = corpus[..60].iter().enumerate().map(|(i, l)| Record::new(format!("d{i}"), l.clone())).collect();
    let k = 13;
    let mut records = distinct.clone();
    for c in 0..k {
        let src = &distinct[(c * 7) % distinct.len()];
        let at = rng.random_range(0..=records.len());
        records.insert(at, Record::new(format!("copy{c}"), src.line.clone()));
    }
    let report = dedup_filter(&records, 0.95).map_err(|e| e.to_string())?;
    ensure(report.dropped.len() == k, format!("dropped {} of {k} copies", report.dropped.len()))?;
    ensure(report.kept.len() == distinct.len(), "a distinct record was dropped")?;
    // Copies placed ahead of their source may be the one kept; either way one of each pair goes.
    ensure(
        report.dropped.iter().all(|d| d.similarity == Some(1.0)),
        "a drop was not an exact copy",
    )?;
    Ok(format!("200/200 round trips, 4/4 malformation classes, {k}/{k} copies dropped"))
}

fn manifest_arithmetic() -> Outcome {
    let entries = read_manifest(T4_MANIFEST_CSV.as_bytes()).map_err(|e| e.to_string())?;
    let ratio: Ratio = "2:1".parse()?;
    let report = validate_manifest(&entries, Some(ratio), Some(T4_TOTALS));
    ensure(report.passed(), format!("{:?}", report.violations))?;
    ensure(report.totals == (1695, 1130, 565), format!("totals {:?}", report.totals))?;
    let totals: Vec<u64> = entries.iter().map(|e| e.total).collect();
    ensure(totals == [876, 702, 66, 51] && totals.iter().sum::<u64>() == 1695, format!("editions {totals:?}"))?;
    for e in &entries {
        ensure(e.deceptive + e.truthful == e.total && e.deceptive == 2 * e.truthful, format!("{} arithmetic", e.edition))?;
    }
    let groups = report.groups.ok_or("no group count")?;
    ensure(groups == 565 && groups * 3 == report.totals.0 && groups * 2 == report.totals.1, format!("{groups} groups"))?;

    let mut tampers = 0;
    for row in 0..entries.len() {
        for cell in 0..3 {
            for delta in [1i64, -1] {
                let mut t = entries.clone();
                let e = &mut t[row];
                let v = match cell {
                    0 => &mut e.total,
                    1 => &mut e.deceptive,
                    _ => &mut e.truthful,
                };
                *v = (*v as i64 + delta) as u64;
                let r = validate_manifest(&t, Some(ratio), Some(T4_TOTALS));
                ensure(!r.passed(), format!("tamper of row {row} cell {cell} by {delta} not detected"))?;
                tampers += 1;
            }
        }
    }
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/t4_deception.csv");
    let out = decepkit(&[
        "manifest", fixture, "--ratio", "2:1", "--expect-totals", "1695,1130,565", "--out", tmp.path().to_str().unwrap(),
    ]);
    ensure(out.status.success(), "manifest command rejected the fixture")?;
    Ok(format!("1695/1130/565 with 565 groups, {tampers}/{tampers} tampers detected"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient certification", gradient_certification),
        ("oracle equivalence", oracle_equivalence),
        ("adapter analytic cases", sics_analytic_cases),
        ("distillation analytic cases", dmc_analytic_cases),
        ("gradient rebalancing", gradient_rebalancing),
        ("feature stabilization", feature_stabilization),
        ("ablation structure", ablation_structure),
        ("report grammar and filters", schema_grammar),
        ("manifest arithmetic", manifest_arithmetic),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
