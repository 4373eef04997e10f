use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use medrec_core::cohort::{
    build_vocabs, index_cohort, load_cohort, save_cohort, split_cohort, CohortSplit, EventVocab, PatientRecord, Vocabs,
};
use medrec_core::eval::{evaluate_detailed, reference_values, BinStats, Evaluation, DEFAULT_BIN_EDGES};
use medrec_core::train::{history_csv, scoped_graph, EpochLog};
use medrec_core::{
    generate_synthetic_cohort, run_variant, train_stage1, train_stage2, Checkpoint, ForwardOptions, Report, Stage,
    SyntheticSpec, TrainConfig, Variant,
};

use crate::manifest::{beside, FileHash, Manifest};
use crate::plots;
use crate::Common;

const VOCAB_FILES: [&str; 3] = ["vocab.diagnosis.json", "vocab.procedure.json", "vocab.medication.json"];

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Config file (or defaults) with command-line overrides applied.
fn train_config(common: &Common, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => read_json(path)?,
        (None, Some(base)) => base,
        (None, None) => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(scope) = common.graph_scope {
        cfg.graph_scope = scope;
    }
    if let Some(tau) = common.tau {
        cfg.tau = tau;
    }
    if let Some(alpha) = common.alpha {
        cfg.alpha = alpha;
    }
    if let Some(variant) = common.variant {
        cfg.variant = variant;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_vocabs(dir: &Path, vocabs: &Vocabs) -> Result<Vec<PathBuf>> {
    let parts = [&vocabs.diagnosis, &vocabs.procedure, &vocabs.medication];
    let mut paths = Vec::new();
    for (name, vocab) in VOCAB_FILES.iter().zip(parts) {
        let path = dir.join(name);
        vocab.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn load_vocabs(dir: &Path) -> Result<Vocabs> {
    let load = |name: &str| {
        let path = dir.join(name);
        EventVocab::load(&path).with_context(|| format!("loading {}", path.display()))
    };
    Ok(Vocabs {
        diagnosis: load(VOCAB_FILES[0])?,
        procedure: load(VOCAB_FILES[1])?,
        medication: load(VOCAB_FILES[2])?,
    })
}

fn checkpoint_dir(checkpoint: &Path) -> &Path {
    match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn split_records(cohort: &Path, vocabs: &Vocabs, cfg: &TrainConfig) -> Result<CohortSplit<PatientRecord>> {
    let raw = load_cohort(cohort).with_context(|| format!("loading {}", cohort.display()))?;
    let records = index_cohort(&raw, vocabs)?;
    Ok(split_cohort(&records, cfg.split, cfg.seed)?)
}

fn pick_split<'a>(splits: &'a CohortSplit<PatientRecord>, name: &str) -> Result<&'a [PatientRecord]> {
    Ok(match name {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => bail!("unknown split `{other}`"),
    })
}

/// A checkpoint with its vocabularies, the cohort re-split exactly as it
/// was during training, and the effective config.
struct Loaded {
    ckpt: Checkpoint,
    config: TrainConfig,
    splits: CohortSplit<PatientRecord>,
    manifest: Manifest,
}

fn load_for_eval(command: &str, checkpoint: &Path, cohort: &Path, common: &Common) -> Result<Loaded> {
    if common.config.is_some() {
        bail!("--config does not apply here; the checkpoint carries its own config");
    }
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let config = train_config(common, Some(ckpt.config.clone()))?;
    let vocabs = load_vocabs(checkpoint_dir(checkpoint))?;
    ensure!(
        vocabs.sizes() == ckpt.sizes,
        "vocabulary files next to the checkpoint do not match its sizes"
    );
    let splits = split_records(cohort, &vocabs, &config)?;
    let mut manifest = Manifest::new(command, config.seed, &config)?;
    manifest.input(cohort)?;
    manifest.parent = Some(FileHash::of(checkpoint)?);
    Ok(Loaded {
        ckpt,
        config,
        splits,
        manifest,
    })
}

pub fn synth(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut s: SyntheticSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let raw = generate_synthetic_cohort(&s)?;
    create_parent(out)?;
    save_cohort(out, &raw)?;
    let mut manifest = Manifest::new("synth", s.seed, &s)?;
    if let Some(p) = spec {
        manifest.input(p)?;
    }
    manifest.output(out)?;
    manifest.write(&beside(out))?;
    println!("wrote {} patients to {}", raw.len(), out.display());
    Ok(())
}

pub fn build_graph(cohort: &Path, out: &Path, common: &Common) -> Result<()> {
    let cfg = train_config(common, None)?;
    let raw = load_cohort(cohort).with_context(|| format!("loading {}", cohort.display()))?;
    let vocabs = build_vocabs(&raw)?;
    let records = index_cohort(&raw, &vocabs)?;
    let splits = split_cohort(&records, cfg.split, cfg.seed)?;
    let graph = scoped_graph(&splits, cfg.graph_scope, vocabs.sizes().n_med)?;
    create_parent(out)?;
    graph.save(out)?;
    let mut manifest = Manifest::new("build-graph", cfg.seed, &cfg)?;
    manifest.input(cohort)?;
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.output(out)?;
    manifest.write(&beside(out))?;
    println!(
        "{} medications, {} edges -> {}",
        graph.n(),
        graph.edge_count(),
        out.display()
    );
    Ok(())
}

fn curve_svg(history: &[EpochLog]) -> String {
    let x: Vec<f64> = (1..=history.len()).map(|i| i as f64).collect();
    let col = |f: fn(&EpochLog) -> f64| history.iter().map(f).collect::<Vec<_>>();
    plots::line_chart(
        "training curve (stage I then stage II)",
        &x,
        &[
            ("loss_b", col(|h| h.loss_b)),
            ("loss_alpha", col(|h| h.loss_alpha)),
            ("val_jaccard", col(|h| h.val_jaccard)),
        ],
    )
}

pub fn train(stage: u8, cohort: &Path, from: Option<&Path>, out: &Path, common: &Common) -> Result<()> {
    let stage = Stage::from_number(stage)?;
    create_dir(out)?;
    let ckpt_path = out.join("checkpoint.json");
    let (ckpt, config, mut manifest, vocab_paths) = match stage {
        Stage::One => {
            let config = train_config(common, None)?;
            let raw = load_cohort(cohort).with_context(|| format!("loading {}", cohort.display()))?;
            let vocabs = build_vocabs(&raw)?;
            let records = index_cohort(&raw, &vocabs)?;
            let splits = split_cohort(&records, config.split, config.seed)?;
            let graph = scoped_graph(&splits, config.graph_scope, vocabs.sizes().n_med)?;
            let ckpt = train_stage1(&graph, &splits, vocabs.sizes(), &config)?;
            let manifest = Manifest::new("train --stage 1", config.seed, &config)?;
            (ckpt, config, manifest, save_vocabs(out, &vocabs)?)
        }
        Stage::Two => {
            let from = from.context("--from is required for stage 2")?;
            let s1 = Checkpoint::load(from).with_context(|| format!("loading {}", from.display()))?;
            let config = train_config(common, Some(s1.config.clone()))?;
            ensure!(
                config.seed == s1.config.seed && config.split == s1.config.split,
                "stage 2 must keep the seed and split ratios of the Stage I run"
            );
            let vocabs = load_vocabs(checkpoint_dir(from))?;
            ensure!(vocabs.sizes() == s1.sizes, "vocabulary files do not match the Stage I checkpoint");
            let splits = split_records(cohort, &vocabs, &config)?;
            let ckpt = train_stage2(&s1, &splits, &config)?;
            let mut manifest = Manifest::new("train --stage 2", config.seed, &config)?;
            manifest.parent = Some(FileHash::of(from)?);
            (ckpt, config, manifest, save_vocabs(out, &vocabs)?)
        }
    };
    ckpt.save(&ckpt_path)?;
    let history_path = out.join("history.csv");
    write_text(&history_path, &history_csv(&ckpt.history))?;
    manifest.input(cohort)?;
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.output(&ckpt_path)?;
    manifest.output(&history_path)?;
    for p in &vocab_paths {
        manifest.output(p)?;
    }
    if common.plots {
        let svg = out.join("training_curve.svg");
        write_text(&svg, &curve_svg(&ckpt.history))?;
        manifest.output(&svg)?;
    }
    manifest.write(&out.join("manifest.json"))?;
    let best = ckpt.history.iter().rev().find(|h| h.stage == stage.number() && h.epoch == ckpt.epoch);
    println!(
        "stage {} ({}) -> {}; best epoch {}{}",
        stage.number(),
        config.variant,
        ckpt_path.display(),
        ckpt.epoch,
        best.map(|h| format!(", val jaccard {:.4}", h.val_jaccard)).unwrap_or_default()
    );
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

fn bins_csv(bins: &[BinStats]) -> String {
    let mut s = String::from("lo,hi,count,jaccard,f1,prauc\n");
    for b in bins {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.lo,
            opt(b.hi),
            b.count,
            opt(b.jaccard),
            opt(b.f1),
            opt(b.prauc)
        ));
    }
    s
}

fn bin_label(b: &BinStats) -> String {
    match b.hi {
        Some(hi) => format!("[{},{})", b.lo, hi),
        None => format!("{}+", b.lo),
    }
}

fn bins_svg(title: &str, bins: &[BinStats]) -> String {
    let groups: Vec<String> = bins.iter().map(bin_label).collect();
    plots::bar_chart(
        title,
        &groups,
        &[
            ("jaccard", bins.iter().map(|b| b.jaccard).collect()),
            ("f1", bins.iter().map(|b| b.f1).collect()),
            ("prauc", bins.iter().map(|b| b.prauc).collect()),
        ],
    )
}

fn run_eval(loaded: &Loaded, split: &str, edges: &[f64]) -> Result<Evaluation> {
    let model = loaded.ckpt.model()?;
    let graph = loaded.ckpt.graph()?;
    let records = pick_split(&loaded.splits, split)?;
    let mut ev = evaluate_detailed(
        &model,
        &graph,
        records,
        loaded.ckpt.stage,
        loaded.config.variant,
        loaded.config.tau,
        edges,
    )?;
    ev.report.config = serde_json::to_value(&loaded.config)?;
    Ok(ev)
}

fn print_report(r: &Report) {
    println!(
        "stage {} {}: {} visits, jaccard {:.4}, f1 {:.4}, prauc {:.4}",
        r.stage, r.variant, r.n_visits, r.jaccard, r.f1, r.prauc
    );
}

pub fn evaluate(
    checkpoint: &Path,
    cohort: &Path,
    split: &str,
    dataset: Option<&str>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let reference = dataset
        .map(|d| reference_values(d).with_context(|| format!("no published results for dataset `{d}`")))
        .transpose()?;
    let mut loaded = load_for_eval("evaluate", checkpoint, cohort, common)?;
    let ev = run_eval(&loaded, split, &DEFAULT_BIN_EDGES)?;
    create_dir(out)?;
    let report_path = out.join("report.json");
    write_text(&report_path, &(serde_json::to_string_pretty(&ev.report)? + "\n"))?;
    let csv_path = out.join("report.csv");
    let r = &ev.report;
    let mut csv = format!(
        "split,stage,variant,n_visits,n_prauc_visits,jaccard,f1,prauc\n{split},{},{},{},{},{},{},{}\n",
        r.stage, r.variant, r.n_visits, r.n_prauc_visits, r.jaccard, r.f1, r.prauc
    );
    csv.push('\n');
    csv.push_str(&bins_csv(&r.bins));
    write_text(&csv_path, &csv)?;
    let pred_path = out.join("predictions.jsonl");
    let mut w = BufWriter::new(fs::File::create(&pred_path).with_context(|| format!("creating {}", pred_path.display()))?);
    for p in &ev.predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    for p in [&report_path, &csv_path, &pred_path] {
        loaded.manifest.output(p)?;
    }
    if common.plots {
        let svg = out.join("bins.svg");
        write_text(&svg, &bins_svg(&format!("{split} metrics by historical medication count"), &r.bins))?;
        loaded.manifest.output(&svg)?;
    }
    loaded.manifest.write(&out.join("manifest.json"))?;
    print_report(r);
    if let Some(refv) = reference {
        println!(
            "published {}: jaccard {:.3}, f1 {:.3}, prauc {:.3} (not comparable on other data)",
            refv.dataset, refv.jaccard, refv.f1, refv.prauc
        );
    }
    Ok(())
}

fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: Variant = name.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    ensure!(!out.is_empty(), "no variants given");
    Ok(out)
}

pub fn ablate(cohort: &Path, variants: &str, out: &Path, common: &Common) -> Result<()> {
    let variants = parse_variants(variants)?;
    let config = train_config(common, None)?;
    let raw = load_cohort(cohort).with_context(|| format!("loading {}", cohort.display()))?;
    let vocabs = build_vocabs(&raw)?;
    let records = index_cohort(&raw, &vocabs)?;
    let splits = split_cohort(&records, config.split, config.seed)?;
    let graph = scoped_graph(&splits, config.graph_scope, vocabs.sizes().n_med)?;
    let mut csv = String::from("variant,n_visits,jaccard,f1,prauc,traversals\n");
    let mut reports = Vec::new();
    for v in &variants {
        let run = run_variant(*v, &graph, &splits, vocabs.sizes(), &config)?;
        let mut r = run.report;
        r.config = serde_json::to_value(TrainConfig { variant: *v, ..config.clone() })?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            v, r.n_visits, r.jaccard, r.f1, r.prauc, run.traversals
        ));
        print_report(&r);
        reports.push(r);
    }
    create_dir(out)?;
    let csv_path = out.join("ablation.csv");
    write_text(&csv_path, &csv)?;
    let json_path = out.join("ablation.json");
    write_text(&json_path, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    let mut manifest = Manifest::new("ablate", config.seed, &config)?;
    manifest.input(cohort)?;
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    if common.plots {
        let svg = out.join("ablation.svg");
        let groups: Vec<String> = reports.iter().map(|r| r.variant.to_string()).collect();
        let col = |f: fn(&Report) -> f64| reports.iter().map(|r| Some(f(r))).collect::<Vec<_>>();
        let chart = plots::bar_chart(
            "test metrics by variant",
            &groups,
            &[("jaccard", col(|r| r.jaccard)), ("f1", col(|r| r.f1)), ("prauc", col(|r| r.prauc))],
        );
        write_text(&svg, &chart)?;
        manifest.output(&svg)?;
    }
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

pub fn robustness(
    checkpoint: &Path,
    cohort: &Path,
    split: &str,
    edges: &[f64],
    out: &Path,
    common: &Common,
) -> Result<()> {
    ensure!(
        !edges.is_empty() && edges.windows(2).all(|w| w[0] < w[1]) && edges.iter().all(|e| e.is_finite()),
        "bin edges must be finite and strictly ascending"
    );
    let mut loaded = load_for_eval("robustness", checkpoint, cohort, common)?;
    let ev = run_eval(&loaded, split, edges)?;
    create_dir(out)?;
    let csv_path = out.join("robustness.csv");
    write_text(&csv_path, &bins_csv(&ev.report.bins))?;
    loaded.manifest.output(&csv_path)?;
    if common.plots {
        let svg = out.join("robustness.svg");
        write_text(&svg, &bins_svg(&format!("{split} metrics by historical medication count"), &ev.report.bins))?;
        loaded.manifest.output(&svg)?;
    }
    loaded.manifest.write(&out.join("manifest.json"))?;
    for b in &ev.report.bins {
        println!("{:>10} n={:<5} jaccard {}", bin_label(b), b.count, opt(b.jaccard));
    }
    Ok(())
}

pub fn trace(checkpoint: &Path, cohort: &Path, split: &str, out: &Path, common: &Common) -> Result<()> {
    let mut loaded = load_for_eval("trace", checkpoint, cohort, common)?;
    let model = loaded.ckpt.model()?;
    let graph = loaded.ckpt.graph()?;
    let opts = ForwardOptions {
        stage: loaded.ckpt.stage,
        variant: loaded.config.variant,
        tau: loaded.config.tau,
        first_target: 1,
    };
    create_parent(out)?;
    let mut w = BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut n = 0;
    for r in pick_split(&loaded.splits, split)? {
        let fwd = model.forward_patient(r, &graph, &opts)?;
        for (i, t) in fwd.traversals.iter().enumerate() {
            let line = serde_json::json!({ "patient_id": r.patient_id, "index": i, "traversal": t });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
            n += 1;
        }
    }
    w.flush()?;
    drop(w);
    loaded.manifest.output(out)?;
    loaded.manifest.write(&beside(out))?;
    println!("wrote {n} traversals to {}", out.display());
    Ok(())
}
