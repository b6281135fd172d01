use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::warn;
use tcmkd_core::model::{load_checkpoint_variant, save_checkpoint, Provenance, Variant};
use tcmkd_core::signal::{
    load_dataset, load_recording, prepare_dataset, save_dataset, synth_generate, write_traw, DomainTag,
    RecordingFormat, SplitDataset, SynthSpec, DATASET_MANIFEST,
};
use tcmkd_core::train::{distill_student, evaluate, train_baseline, train_teacher, History};
use tcmkd_core::transfer::{
    extract_embeddings_no_kd, fit_anomaly_model, fit_projection, read_embeddings_csv, silhouette, tcmkd_tl_adapt,
    write_embeddings_csv, write_projection_csv, EmbeddingSet,
};

use crate::config::Settings;
use crate::manifest::{RunManifest, RUN_MANIFEST};
use crate::{Domain, InputFormat, ModelKind, TransferMode, UsageError};

const DATASET_FILES: [&str; 3] = [DATASET_MANIFEST, "train.seg", "test.seg"];

fn dataset_inputs(dir: &Path) -> Vec<PathBuf> {
    DATASET_FILES.iter().map(|f| dir.join(f)).collect()
}

fn open_dataset(dir: &Path) -> anyhow::Result<SplitDataset> {
    for f in dataset_inputs(dir) {
        if !f.is_file() {
            bail!("dataset file {} is missing (run `tcmkd ingest` first)", f.display());
        }
    }
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn expand_inputs(inputs: &[PathBuf], format: InputFormat) -> anyhow::Result<Vec<PathBuf>> {
    let ext = match format {
        InputFormat::Traw => "traw",
        InputFormat::Csv => "csv",
    };
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(UsageError(format!("no .{ext} input files given")).into());
    }
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
pub fn ingest(
    settings: &Settings,
    inputs: &[PathBuf],
    out: &Path,
    domain: Domain,
    format: InputFormat,
    sample_rate: Option<u32>,
    label: Option<usize>,
    num_classes: Option<usize>,
) -> anyhow::Result<()> {
    let files = expand_inputs(inputs, format)?;
    let fmt = match format {
        InputFormat::Traw => RecordingFormat::Traw,
        InputFormat::Csv => RecordingFormat::Csv {
            sample_rate_hz: sample_rate
                .ok_or_else(|| UsageError("CSV input needs --sample-rate".into()))?,
            label,
        },
    };
    let domain = match domain {
        Domain::Source => DomainTag::Source,
        Domain::Target => DomainTag::Target,
    };
    RunManifest::new("ingest", settings.seed, settings.entries())
        .arg("domain", domain)
        .arg("out", out.display())
        .inputs(&files)?
        .outputs(&DATASET_FILES)
        .write(out)?;

    let mut recordings = Vec::new();
    let mut failures = Vec::new();
    for f in &files {
        match load_recording(f, fmt) {
            Ok(r) => recordings.push(r),
            Err(e) => failures.push(format!("  {e}")),
        }
    }
    if !failures.is_empty() {
        bail!("{} of {} input file(s) failed to parse:\n{}", failures.len(), files.len(), failures.join("\n"));
    }
    let mut cfg = settings.pipeline();
    cfg.num_classes = num_classes;
    let ds = prepare_dataset(&recordings, domain, &cfg)?;
    save_dataset(out, &ds)?;
    let r = &ds.report;
    println!("recordings: {}", r.recordings);
    println!("segments: {}, windows: {}", r.segments, r.windows);
    println!(
        "train segments: {}, test segments: {}, excluded boundary segments: {}",
        r.train_segments, r.test_segments, r.excluded_boundary_segments
    );
    println!(
        "train windows: {}, test windows: {}",
        ds.train.windows().len(),
        ds.test.windows().len()
    );
    if !r.degenerate_recordings.is_empty() {
        println!("recordings kept whole in train: {}", r.degenerate_recordings.join(", "));
    }
    Ok(())
}

fn write_history(out: &Path, history: &History) -> anyhow::Result<()> {
    fs::write(out.join("metrics.csv"), history.to_csv())?;
    Ok(())
}

fn provenance(ds: &SplitDataset, settings: &Settings, epochs: usize) -> Provenance {
    Provenance {
        dataset_tag: ds.train.domain().to_string(),
        epochs,
        seed: settings.seed,
    }
}

fn print_final(history: &History) {
    if let Some(m) = history.last() {
        println!(
            "epoch {}: train_loss {:.6}, train_acc {:.4}, test_acc {:.4}",
            m.epoch, m.train_loss, m.train_accuracy, m.test_accuracy
        );
    }
}

const TRAIN_OUTPUTS: [&str; 3] = ["model.ckpt", "metrics.csv", "confusion.csv"];

pub fn train(settings: &Settings, data: &Path, kind: ModelKind, out: &Path) -> anyhow::Result<()> {
    let cfg = settings.train();
    let ds = open_dataset(data)?;
    let name = match kind {
        ModelKind::Baseline => "baseline",
        ModelKind::Teacher => "teacher",
    };
    RunManifest::new("train", settings.seed, settings.entries())
        .arg("data", data.display())
        .arg("model", name)
        .arg("out", out.display())
        .inputs(&dataset_inputs(data))?
        .outputs(&TRAIN_OUTPUTS)
        .write(out)?;
    let (model, history) = match kind {
        ModelKind::Baseline => train_baseline(&ds, &cfg)?,
        ModelKind::Teacher => train_teacher(&ds, &cfg)?,
    };
    save_checkpoint(&out.join("model.ckpt"), &model, &provenance(&ds, settings, cfg.epochs))?;
    write_history(out, &history)?;
    let (_, cm) = evaluate(&model, &ds.test)?;
    fs::write(out.join("confusion.csv"), cm.to_csv())?;
    print_final(&history);
    Ok(())
}

pub fn distill(settings: &Settings, data: &Path, teacher_path: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = settings.train();
    let ds = open_dataset(data)?;
    RunManifest::new("distill", settings.seed, settings.entries())
        .arg("data", data.display())
        .arg("teacher", teacher_path.display())
        .arg("out", out.display())
        .inputs(&dataset_inputs(data))?
        .input(teacher_path)?
        .outputs(&TRAIN_OUTPUTS)
        .write(out)?;
    let (teacher, _) = load_checkpoint_variant(teacher_path, Variant::Wide)
        .with_context(|| format!("loading teacher {}", teacher_path.display()))?;
    let (student, outcome) = distill_student(&ds, &teacher, &cfg)?;
    save_checkpoint(&out.join("model.ckpt"), &student, &provenance(&ds, settings, cfg.epochs))?;
    write_history(out, &outcome.history)?;
    let (_, cm) = evaluate(&student, &ds.test)?;
    fs::write(out.join("confusion.csv"), cm.to_csv())?;
    if outcome.excluded_segments > 0 {
        println!("segments without a window (not distilled): {}", outcome.excluded_segments);
    }
    print_final(&outcome.history);
    Ok(())
}

fn write_embeddings(out: &Path, e: &EmbeddingSet) -> anyhow::Result<()> {
    let f = fs::File::create(out.join("embeddings.csv"))?;
    write_embeddings_csv(std::io::BufWriter::new(f), e.dim, &e.vectors, e.labels.as_deref(), None)?;
    let proj = fit_projection(&e.vectors, e.dim)?;
    let f = fs::File::create(out.join("projection.csv"))?;
    write_projection_csv(std::io::BufWriter::new(f), &proj.project(&e.vectors), e.labels.as_deref(), None)?;
    Ok(())
}

pub fn transfer(
    settings: &Settings,
    data: &Path,
    mode: TransferMode,
    teacher: Option<&Path>,
    student: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let (mode_name, ckpt, outputs): (&str, &Path, &[&str]) = match (mode, teacher, student) {
        (TransferMode::NoKd, _, Some(s)) => ("no-kd", s, &["embeddings.csv", "projection.csv"]),
        (TransferMode::Tcmkd, Some(t), _) => (
            "tcmkd",
            t,
            &["embeddings.csv", "projection.csv", "student_target.ckpt", "adapt_loss.csv"],
        ),
        (TransferMode::NoKd, _, None) => return Err(UsageError("--mode no-kd needs --student".into()).into()),
        (TransferMode::Tcmkd, None, _) => return Err(UsageError("--mode tcmkd needs --teacher".into()).into()),
    };
    let ds = open_dataset(data)?;
    RunManifest::new("transfer", settings.seed, settings.entries())
        .arg("data", data.display())
        .arg("mode", mode_name)
        .arg("checkpoint", ckpt.display())
        .arg("out", out.display())
        .inputs(&dataset_inputs(data))?
        .input(ckpt)?
        .outputs(outputs)
        .write(out)?;
    let embeddings = match mode {
        TransferMode::NoKd => {
            let (model, _) = load_checkpoint_variant(ckpt, Variant::Narrow)
                .with_context(|| format!("no-kd mode needs a student checkpoint: {}", ckpt.display()))?;
            extract_embeddings_no_kd(&model, &ds)?
        }
        TransferMode::Tcmkd => {
            let (model, _) = load_checkpoint_variant(ckpt, Variant::Wide)
                .with_context(|| format!("tcmkd mode needs a teacher checkpoint: {}", ckpt.display()))?;
            let cfg = settings.adapt();
            let outcome = tcmkd_tl_adapt(&model, &ds, &cfg)?;
            let prov = provenance(&ds, settings, cfg.epochs);
            save_checkpoint(&out.join("student_target.ckpt"), &outcome.student, &prov)?;
            let mut curve = String::from("epoch,mse\n");
            for (i, l) in outcome.loss_curve.iter().enumerate() {
                let _ = writeln!(curve, "{},{l}", i + 1);
            }
            fs::write(out.join("adapt_loss.csv"), curve)?;
            println!(
                "adaptation mse: first {} last {}",
                outcome.loss_curve[0],
                outcome.loss_curve[outcome.loss_curve.len() - 1]
            );
            outcome.embeddings
        }
    };
    write_embeddings(out, &embeddings)?;
    println!("embeddings: {} x {}", embeddings.len(), embeddings.dim);
    if let Some(labels) = &embeddings.labels {
        if let Ok(s) = silhouette(&embeddings.vectors, embeddings.dim, labels) {
            println!("silhouette: {s:.6}");
        }
    }
    Ok(())
}

pub fn score(settings: &Settings, embeddings: &Path, reference: &Path, out: &Path) -> anyhow::Result<()> {
    let read = |p: &Path| -> anyhow::Result<_> {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        read_embeddings_csv(f).with_context(|| format!("reading {}", p.display()))
    };
    let emb = read(embeddings)?;
    let refs = read(reference)?;
    if emb.dim != refs.dim {
        bail!(
            "schema mismatch: {} has columns z0..z{}, reference {} has z0..z{}",
            embeddings.display(),
            emb.dim - 1,
            reference.display(),
            refs.dim - 1
        );
    }
    let model = fit_anomaly_model(&refs.vectors, refs.dim, settings.ridge, settings.quantile)?;
    let scores = model.score(&emb.vectors);
    let flags = model.flags(&scores);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(out)
        .with_context(|| format!("creating {}", out.display()))?;
    let mut header: Vec<String> = (0..emb.dim).map(|i| format!("z{i}")).collect();
    if emb.labels.is_some() {
        header.push("label".into());
    }
    header.extend(["score".into(), "flag".into()]);
    w.write_record(&header)?;
    for (i, row) in emb.vectors.chunks_exact(emb.dim).enumerate() {
        let mut rec: Vec<String> = row.iter().map(f32::to_string).collect();
        if let Some(l) = &emb.labels {
            rec.push(l[i].to_string());
        }
        rec.push(scores[i].to_string());
        rec.push(u8::from(flags[i]).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let flagged = flags.iter().filter(|&&f| f).count();
    println!("threshold: {}", model.threshold);
    println!(
        "flagged: {flagged} / {} ({:.2}%)",
        flags.len(),
        100.0 * flagged as f64 / flags.len().max(1) as f64
    );
    Ok(())
}

fn required_artifacts(m: &RunManifest) -> Vec<String> {
    match m.command.as_str() {
        "train" | "distill" | "transfer" => m.outputs.clone(),
        _ => Vec::new(),
    }
}

fn find_runs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    if root.join(RUN_MANIFEST).is_file() {
        runs.push(root.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(RUN_MANIFEST).is_file())
        .collect();
    subdirs.sort();
    runs.extend(subdirs);
    Ok(runs)
}

fn run_name(root: &Path, dir: &Path) -> String {
    dir.strip_prefix(root)
        .ok()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| ".".to_string(), |p| p.display().to_string())
}

pub fn report(root: &Path) -> anyhow::Result<()> {
    if !root.is_dir() {
        bail!("{} is not a directory", root.display());
    }
    let runs = find_runs(root)?;
    if runs.is_empty() {
        bail!("missing artifacts in {}:\n  {RUN_MANIFEST}", root.display());
    }
    let mut missing = Vec::new();
    let mut manifests = Vec::new();
    for dir in &runs {
        let m = RunManifest::read(dir)?;
        for a in required_artifacts(&m) {
            if !dir.join(&a).is_file() {
                missing.push(format!("  {}", dir.join(&a).display()));
            }
        }
        manifests.push((dir.clone(), m));
    }
    if !missing.is_empty() {
        bail!("missing artifacts:\n{}", missing.join("\n"));
    }

    let mut text = String::new();
    let mut curves = String::from("run,epoch,train_loss,train_acc,test_acc\n");
    let mut sil_csv = String::from("run,mode,silhouette\n");
    let mut by_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (dir, m) in &manifests {
        let name = run_name(root, dir);
        match m.command.as_str() {
            "train" | "distill" => {
                let kind = m.args.get("model").map_or("student", String::as_str);
                let mut rdr = csv::Reader::from_path(dir.join("metrics.csv"))?;
                let mut last = None;
                for rec in rdr.records() {
                    let rec = rec?;
                    if rec.len() != 6 {
                        bail!("{}: expected 6 metric columns, found {}", dir.join("metrics.csv").display(), rec.len());
                    }
                    let _ = writeln!(curves, "{name},{},{},{},{}", &rec[0], &rec[1], &rec[4], &rec[5]);
                    last = Some(rec);
                }
                match last {
                    Some(r) => {
                        let _ = writeln!(text, "{name} [{kind}]: epochs {}, train_acc {}, test_acc {}", &r[0], &r[4], &r[5]);
                    }
                    None => {
                        let _ = writeln!(text, "{name} [{kind}]: no epochs recorded");
                    }
                }
                let cm = fs::read_to_string(dir.join("confusion.csv"))?;
                let _ = writeln!(text, "  confusion (rows true, cols predicted):");
                for line in cm.lines() {
                    let _ = writeln!(text, "    {line}");
                }
            }
            "transfer" => {
                let mode = m.args.get("mode").cloned().unwrap_or_default();
                let f = fs::File::open(dir.join("embeddings.csv"))?;
                let table = read_embeddings_csv(f).with_context(|| format!("{}", dir.display()))?;
                match &table.labels {
                    Some(labels) => {
                        let s = silhouette(&table.vectors, table.dim, labels)?;
                        let _ = writeln!(text, "{name} [transfer {mode}]: {} embeddings, silhouette {s:.6}", table.len());
                        let _ = writeln!(sil_csv, "{name},{mode},{s}");
                        by_mode.entry(mode).or_default().push(s);
                    }
                    None => {
                        let _ = writeln!(text, "{name} [transfer {mode}]: {} embeddings (unlabelled)", table.len());
                    }
                }
            }
            other => {
                let _ = writeln!(text, "{name} [{other}]");
            }
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    if let (Some(t), Some(n)) = (by_mode.get("tcmkd"), by_mode.get("no-kd")) {
        let (t, n) = (mean(t), mean(n));
        let verdict = if t >= n { "tcmkd >= no-kd" } else { "tcmkd < no-kd" };
        let _ = writeln!(text, "silhouette: {verdict} ({t:.6} vs {n:.6})");
    }
    fs::write(root.join("report.txt"), &text)?;
    fs::write(root.join("curves.csv"), curves)?;
    fs::write(root.join("silhouettes.csv"), sil_csv)?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    settings: &Settings,
    out: &Path,
    classes: usize,
    recordings_per_class: usize,
    length: usize,
    carrier_shift: f64,
    noise: Option<f64>,
    prefix: String,
) -> anyhow::Result<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        num_classes: classes,
        recordings_per_class,
        recording_len: length,
        seg_len: settings.seg_len,
        carrier_shift,
        noise_std: noise.unwrap_or(defaults.noise_std),
        id_prefix: prefix,
        pair_carriers: (0..classes.div_ceil(2))
            .map(|p| defaults.pair_carriers.get(p).copied().unwrap_or(1.0 / (16.0 + 4.0 * p as f64)))
            .collect(),
        ..defaults
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    RunManifest::new("synth", settings.seed, settings.entries())
        .arg("classes", classes)
        .arg("recordings_per_class", recordings_per_class)
        .arg("length", length)
        .arg("carrier_shift", carrier_shift)
        .arg("noise", spec.noise_std)
        .arg("prefix", &spec.id_prefix)
        .write(out)?;
    let recs = synth_generate(&spec, settings.seed)?;
    for r in &recs {
        write_traw(&out.join(format!("{}.traw", r.id)), r)?;
    }
    println!("wrote {} recordings to {}", recs.len(), out.display());
    Ok(())
}

pub fn convert(input: &Path, output: &Path, sample_rate: u32, label: Option<usize>) -> anyhow::Result<()> {
    let rec = load_recording(
        input,
        RecordingFormat::Csv {
            sample_rate_hz: sample_rate,
            label,
        },
    )?;
    if rec.num_channels() < 2 {
        warn!("{} has a single channel; ingest needs two", input.display());
    }
    write_traw(output, &rec)?;
    println!("{}: {} channel(s) x {} samples", output.display(), rec.num_channels(), rec.len());
    Ok(())
}
