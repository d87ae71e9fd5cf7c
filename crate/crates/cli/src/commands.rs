use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use decepkit::dmc::balance_statistic;
use decepkit::harness::{
    build_model, evaluate, feature_spread, gen_synthetic, gradcheck_suite, run_experiment, train, BALANCE_WINDOW,
};
use decepkit::schema::{
    audit_stats, filter_corpus, length_stats, read_jsonl, read_manifest, read_plain, validate_manifest,
    validate_rules, FilterReport, NoAiCheck, Record,
};
use serde_json::{json, Value};

use crate::config::{CliConfig, Overrides};
use crate::{Cli, Command, CorpusArgs, DataArgs, Format, ReportsAction};

/// Runs a command. `Ok(false)` means the checks ran and something failed.
pub fn run(cli: Cli) -> Result<bool> {
    let mut cfg = CliConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    let mut ov = Overrides::default();
    ov.put("seed", cli.seed);
    collect(&cli.command, &mut ov);
    ov.apply(&mut cfg)?;

    let out = Output::prepare(&cli.out, &cfg)?;
    match &cli.command {
        Command::Gradcheck(a) => gradcheck(&cfg, a.corrupt.clone(), &out),
        Command::Train(_) => train_one(&cfg, &out),
        Command::Ablate(_) => ablate(&cfg, &out),
        Command::Reports { action } => reports(&cfg, action, &out),
        Command::Manifest(a) => manifest(&cfg, a, &out),
    }
}

fn collect_data(d: &DataArgs, ov: &mut Overrides) {
    ov.put("n_samples", d.n_samples);
    ov.put("d_v", d.d_v);
    ov.put("d_a", d.d_a);
    ov.put("l_v", d.l_v);
    ov.put("l_a", d.l_a);
    ov.put("snr_v", d.snr_v);
    ov.put("snr_a", d.snr_a);
    ov.put("spike_frac", d.spike_frac);
    ov.put("spike_gain", d.spike_gain);
}

fn collect(cmd: &Command, ov: &mut Overrides) {
    match cmd {
        Command::Gradcheck(a) => {
            ov.put("tol", a.tol);
            ov.put("gradcheck_d", a.d);
            ov.put("gradcheck_len", a.len);
            ov.put("gradcheck_batch", a.batch);
            ov.put("gradcheck_warm_steps", a.warm_steps);
        }
        Command::Train(a) => {
            ov.put("steps", a.steps);
            ov.put("lr", a.lr);
            ov.put("alpha", a.alpha);
            ov.put("lambda", a.lambda);
            ov.put("batch_size", a.batch_size);
            ov.put("use_sics", a.no_sics.then_some(false));
            ov.put("use_dmc", a.no_dmc.then_some(false));
            collect_data(&a.data, ov);
        }
        Command::Ablate(a) => {
            ov.put("seeds", a.seeds);
            ov.put("steps", a.steps);
            ov.put("lr", a.lr);
            ov.put("alpha", a.alpha);
            ov.put("batch_size", a.batch_size);
            collect_data(&a.data, ov);
        }
        Command::Reports { action } => {
            if let ReportsAction::Filter { threshold, .. } = action {
                ov.put("threshold", *threshold);
            }
        }
        Command::Manifest(_) => {}
    }
}

struct Output {
    dir: PathBuf,
    config: Value,
}

impl Output {
    /// Creates the directory and writes `resolved.conf`, so an unusable destination
    /// fails before any work is done.
    fn prepare(dir: &Path, cfg: &CliConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join("resolved.conf");
        fs::write(&path, cfg.to_conf()).with_context(|| format!("writing {}", path.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config: cfg.to_json(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `body` with the resolved config echoed under `"config"`.
    fn json(&self, name: &str, mut body: Value) -> Result<()> {
        if let Value::Object(m) = &mut body {
            m.insert("config".into(), self.config.clone());
        }
        let path = self.path(name);
        let text = serde_json::to_string_pretty(&body)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?))
    }
}

fn gradcheck(cfg: &CliConfig, corrupt: Option<String>, out: &Output) -> Result<bool> {
    let opts = decepkit::harness::GradCheckOptions {
        corrupt,
        ..cfg.gradcheck()
    };
    let started = Instant::now();
    let report = gradcheck_suite(&opts)?;
    eprintln!("gradcheck finished in {:.2}s", started.elapsed().as_secs_f64());
    for c in &report.cases {
        println!(
            "{:<10} coords {:>4}  max rel error {:.3e}  {}",
            c.name,
            c.coordinates,
            c.max_rel_error,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(w) = report.cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)) {
        if let (Some(p), Some(i), Some(a), Some(n)) = (&w.worst_param, w.worst_index, w.analytic, w.numeric) {
            println!("worst: {} {}[{}] analytic {:.6e} numeric {:.6e}", w.name, p, i, a, n);
        }
    }
    let passed = report.passed();
    println!(
        "gradcheck {} (tol {:e}, max rel error {:.3e})",
        if passed { "PASS" } else { "FAIL" },
        report.tol,
        report.max_rel_error()
    );
    out.json("gradcheck.json", json!({ "passed": passed, "report": report }))?;
    Ok(passed)
}

fn train_one(cfg: &CliConfig, out: &Output) -> Result<bool> {
    let spec = cfg.data_spec(cfg.seed);
    let tcfg = cfg.train_config(cfg.seed);
    let data = gen_synthetic(&spec)?;
    let mut model = build_model(&tcfg, spec.d_v, spec.d_a)?;
    let trace = train(&mut model, &data, &tcfg)?;
    let metrics = evaluate(&model, &data)?;
    let balance = balance_statistic(&trace.grad_trace(), BALANCE_WINDOW);

    let mut csv = out.create("trace.csv")?;
    trace.write_csv(&mut csv)?;
    csv.flush()?;
    fs::write(out.path("checkpoint.json"), model.store.to_json_string()).context("writing checkpoint.json")?;
    let spread = feature_spread(&model, &data, cfg.seed)?;
    if !spread.dims.is_empty() {
        out.json("spread.json", json!({ "stabilized": spread.stabilized(), "spread": spread }))?;
    }
    out.json(
        "run.json",
        json!({ "steps": trace.steps.len(), "metrics": metrics, "balance_b": balance, "epochs": trace.epochs }),
    )?;
    println!(
        "steps {}  accuracy {:.4}  f1 {:.4}  B {}",
        trace.steps.len(),
        metrics.accuracy,
        metrics.f1,
        balance.map_or("n/a".to_string(), |b| format!("{b:.4}"))
    );
    Ok(true)
}

fn ablate(cfg: &CliConfig, out: &Output) -> Result<bool> {
    if cfg.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let report = run_experiment(&cfg.experiment())?;
    for (v, runs) in &report.variants {
        for r in runs {
            let mut w = out.create(&format!("trace_{}_seed{}.csv", v.slug(), r.seed))?;
            r.trace.write_csv(&mut w)?;
            w.flush()?;
        }
        let mean_b: Vec<f64> = runs.iter().filter_map(|r| r.balance_b).collect();
        println!(
            "{:<6} runs {}  mean accuracy {:.4}  mean B {}",
            v.name(),
            runs.len(),
            report.mean_accuracy(*v).unwrap_or(f64::NAN),
            if mean_b.is_empty() {
                "n/a".to_string()
            } else {
                format!("{:.4}", mean_b.iter().sum::<f64>() / mean_b.len() as f64)
            }
        );
    }
    out.json(
        "comparison.json",
        json!({ "experiment": report.config, "variants": report.variants }),
    )?;
    Ok(true)
}

fn load_corpus(c: &CorpusArgs) -> Result<Vec<Record>> {
    let file = File::open(&c.input).with_context(|| format!("opening {}", c.input.display()))?;
    let reader = BufReader::new(file);
    let jsonl = match c.format {
        Format::Plain => false,
        Format::Jsonl => true,
        Format::Auto => c.input.extension().is_some_and(|e| e == "jsonl"),
    };
    let records = if jsonl { read_jsonl(reader) } else { read_plain(reader) };
    records.with_context(|| format!("reading {}", c.input.display()))
}

fn print_drops(report: &FilterReport) {
    for d in &report.dropped {
        println!("dropped {} ({:?}): {}", d.id, d.reason, d.detail);
    }
    println!(
        "{} records, kept {}, dropped {} (format {}, duplicate {}, content check {})",
        report.input,
        report.kept.len(),
        report.dropped.len(),
        report.counts.format,
        report.counts.duplicate,
        report.counts.ai_check
    );
}

fn reports(cfg: &CliConfig, action: &ReportsAction, out: &Output) -> Result<bool> {
    match action {
        ReportsAction::Validate { corpus, strict } => {
            let records = load_corpus(corpus)?;
            let report = validate_rules(&records);
            print_drops(&report);
            out.json("validate.json", json!({ "report": report }))?;
            Ok(!strict || report.is_clean())
        }
        ReportsAction::Filter { corpus, strict, .. } => {
            let records = load_corpus(corpus)?;
            let report = filter_corpus(&records, cfg.threshold, &NoAiCheck)
                .map_err(|e| anyhow::anyhow!("invalid threshold: {e}"))?;
            print_drops(&report);
            let mut w = out.create("kept.txt")?;
            let by_id: std::collections::HashMap<&str, &Record> =
                records.iter().map(|r| (r.id.as_str(), r)).collect();
            for id in &report.kept {
                writeln!(w, "{}", by_id[id.as_str()].line)?;
            }
            w.flush()?;
            out.json("filter.json", json!({ "threshold": cfg.threshold, "report": report }))?;
            Ok(!strict || report.is_clean())
        }
        ReportsAction::Stats { corpus, bin_width } => {
            if *bin_width == 0 {
                bail!("--bin-width must be at least 1");
            }
            let records = load_corpus(corpus)?;
            let lengths = length_stats(&records, *bin_width);
            match (lengths.mean, lengths.median, lengths.min, lengths.max) {
                (Some(mean), Some(median), Some(min), Some(max)) => println!(
                    "{} records, words mean {mean:.2} median {median:.1} min {min} max {max}",
                    lengths.count
                ),
                _ => println!("0 records"),
            }
            for b in &lengths.histogram {
                println!("  [{:>3}, {:>3}) {}", b.lo, b.hi, b.count);
            }
            let tagged: Vec<_> = records.iter().filter_map(|r| r.tags.as_ref()).collect();
            let audit = (!tagged.is_empty()).then(|| audit_stats(tagged.iter().copied()));
            if let Some(a) = &audit {
                for (axis, s) in [("visual", &a.visual), ("acoustic", &a.acoustic), ("reasoning", &a.reasoning)] {
                    let shares: Vec<String> = s
                        .categories
                        .iter()
                        .map(|c| format!("{} {}", c.category, c.count))
                        .collect();
                    println!("{axis}: {}", shares.join(", "));
                }
            }
            out.json("stats.json", json!({ "lengths": lengths, "audit": audit }))?;
            Ok(true)
        }
    }
}

fn manifest(_cfg: &CliConfig, a: &crate::ManifestArgs, out: &Output) -> Result<bool> {
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let entries = read_manifest(file).with_context(|| format!("reading {}", a.input.display()))?;
    let report = validate_manifest(&entries, a.ratio, a.expect_totals);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for v in &report.violations {
        println!("{}", v.message);
    }
    println!(
        "{} editions, totals {}/{}/{}: {}",
        report.editions,
        report.totals.0,
        report.totals.1,
        report.totals.2,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    out.json("manifest.json", json!({ "report": report }))?;
    Ok(report.passed())
}
