//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use vstain::backbone::{extract_subcrop_tokens, write_token_cache, Backbone};
use vstain::config::{BackboneKind, RunConfig};
use vstain::error::{Error, Result};
use vstain::evaluation::{deterministic_test_crops, evaluate_run, EvalContext, ReportMetadata};
use vstain::failure::{
    classify_tissue, export_worst_cases, stratify, train_failure_predictor, ClassifierKind, FailureRecord, TissueStats, Triplet,
};
use vstain::generator::Generator;
use vstain::image::{RgbImage, ValueRange};
use vstain::losses::read_log;
use vstain::nn::VarMap;
use vstain::render::{bar_plot, line_plot};
use vstain::stain::{dab_channel, dab_intensity_score, dab_kl};
use vstain::training::data::{read_manifest, write_synthetic_dataset, SyntheticConfig};
use vstain::training::{generate_images, parallel_map, run_training, Checkpoint, PairedSample, RunSinks, Split, StepContext, TrainState, TrainingData};

use crate::grids;
use crate::provenance::Provenance;
use crate::{BackboneArg, ClassifierArg, Cli, Command, Global};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.device != "cpu" {
        return Err(Error::Config(format!("device `{}` is not available; use `cpu`", g.device)));
    }
    if g.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Synth { out, pairs_per_stain, test_pairs_per_stain, side } => synth(g, out, *pairs_per_stain, *test_pairs_per_stain, *side),
        Command::ExtractFeatures { manifest, backbone, out } => extract_features(g, manifest, *backbone, out),
        Command::Train { manifest, out, resume, steps } => train(g, manifest, out, resume.as_deref(), *steps),
        Command::Infer { ckpt, manifest, image, token, out } => infer(g, ckpt, manifest.as_deref(), image.as_deref(), token.as_deref(), out),
        Command::Evaluate { ckpt, manifest, out } => evaluate(g, ckpt, manifest, out),
        Command::StratifyFailures { ckpt, manifest, classifier, out } => stratify_failures(g, ckpt, manifest, *classifier, out),
        Command::ExportGrids { dirs, manifest, tile, rows, out } => export_grids(g, dirs, manifest.as_deref(), *tile, *rows, out),
        Command::PlotLog { log, out } => plot_log(g, log, out),
    }
}

/// The `--config` file (or defaults) with environment overrides and `--seed`.
fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml_str("", std::env::vars(), Path::new("."))?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for it in items {
        let line = serde_json::to_string(it).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// A checkpoint's stored config and its EMA generator.
struct Loaded {
    ckpt: Checkpoint,
    cfg: RunConfig,
    ema: VarMap,
    generator: Generator,
}

fn load_checkpoint(path: &Path, g: &Global) -> Result<Loaded> {
    if g.config.is_some() {
        log::warn!("--config is ignored; the checkpoint's stored config defines the model");
    }
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_json(&ckpt.config)?;
    cfg.validate()?;
    let ema = ckpt.ema_vars()?;
    let generator = Generator::new(&ema, &cfg.generator, &cfg.processor)?;
    if ema.params().len() != ckpt.ema.len() {
        return Err(Error::Checkpoint("EMA weights do not match the stored architecture".into()));
    }
    Ok(Loaded { ckpt, cfg, ema, generator })
}

/// A token given by name or index.
fn parse_token(text: &str, vocab: &[String]) -> Result<usize> {
    if let Some(i) = vocab.iter().position(|v| v == text) {
        return Ok(i);
    }
    match text.parse::<usize>() {
        Ok(i) if i < vocab.len() => Ok(i),
        _ => Err(Error::InvalidToken {
            token: text.to_string(),
            valid: vocab.iter().enumerate().map(|(i, v)| format!("{v} ({i})")).collect::<Vec<_>>().join(", "),
        }),
    }
}

fn synth(g: &Global, out: &Path, pairs: usize, test_pairs: usize, side: usize) -> Result<()> {
    let desk = RunConfig::desk();
    if side != desk.eval.source_side {
        return Err(Error::Config(format!("--side must be {} to match the CPU config's evaluation protocol", desk.eval.source_side)));
    }
    let seed = g.seed.unwrap_or(0);
    let scfg = SyntheticConfig { side, pairs_per_stain: pairs, test_pairs_per_stain: test_pairs, ..SyntheticConfig::default() };
    let manifest = write_synthetic_dataset(out, &scfg, seed)?;
    let cfg_path = out.join("desk.toml");
    let cfg = RunConfig { seed, ..desk };
    write_text(&cfg_path, &cfg.to_toml())?;
    let mut prov = Provenance::new("synth", seed, g.workers, &g.device, serde_json::json!({ "pairs_per_stain": pairs, "test_pairs_per_stain": test_pairs, "side": side }));
    prov.output(&manifest);
    prov.output(&cfg_path);
    prov.write(out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn extract_features(g: &Global, manifest: &Path, backbone: BackboneArg, out: &Path) -> Result<()> {
    let mut cfg = load_config(g)?;
    cfg.backbone.kind = match backbone {
        BackboneArg::Toy => BackboneKind::Toy,
        BackboneArg::Pretrained => BackboneKind::Pretrained,
    };
    let bb = cfg.backbone()?;
    let samples = read_manifest(manifest)?;
    create_dir(out)?;
    let side = cfg.processor.grid_side;
    let paths = parallel_map(samples.len(), g.workers, |i| {
        let s = &samples[i];
        let img = RgbImage::load(&s.hne)?;
        let grid = extract_subcrop_tokens(&img, bb.as_ref(), side)?;
        let p = out.join(format!("{}.vstk", s.source_id));
        write_token_cache(&p, &s.source_id, &grid)?;
        Ok(p)
    })?;
    let mut prov = Provenance::new("extract-features", cfg.seed, g.workers, &g.device, cfg.to_json());
    prov.input(manifest);
    samples.iter().for_each(|s| prov.input(&s.hne));
    paths.iter().for_each(|p| prov.output(p));
    prov.write(out)?;
    println!("{} token grids from backbone {}", paths.len(), bb.id());
    Ok(())
}

fn loss_curves(log: &Path, out: &Path) -> Result<()> {
    let records = read_log(log)?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let names = ["percept", "l1", "edge", "adv", "fm", "dab"];
    for (k, name) in names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.components.named()[k].1)).filter(|p| p.1 > 0.0).collect();
        if !pts.is_empty() {
            series.push((name.to_string(), pts));
        }
    }
    series.push(("total".into(), records.iter().map(|r| (r.step as f64, r.total)).collect()));
    line_plot(&series, 640, 360, true)?.save(out)
}

fn train(g: &Global, manifest: &Path, out: &Path, resume: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let cfg = load_config(g)?;
    let samples = read_manifest(manifest)?;
    let data = TrainingData::load(&samples, &cfg.train.tokens, cfg.train.balancing)?;
    let bb = cfg.backbone()?;
    let ext = cfg.perceptual_extractor()?;
    let m = cfg.stain.stain_matrix()?;
    let mut state = match resume {
        Some(p) => Checkpoint::load(p)?.restore(&cfg.generator, &cfg.processor, &cfg.disc, &cfg.train)?,
        None => TrainState::new(cfg.seed, &cfg.generator, &cfg.processor, &cfg.disc, &cfg.train)?,
    };
    create_dir(out)?;
    let log_path = out.join("loss_log.jsonl");
    if resume.is_none() && log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let ck_dir = out.join("checkpoints");
    let until = steps.unwrap_or(cfg.train.steps);
    let ctx = StepContext { train: &cfg.train, loss: &cfg.loss, stain: &cfg.stain, stain_matrix: &m, perceptual: &ext };
    let sinks = RunSinks { log: Some(&log_path), checkpoints: Some(&ck_dir), config: cfg.to_json() };
    let outputs = run_training(&mut state, &data, &ctx, bb.as_ref(), cfg.processor.grid_side, g.workers, until, &sinks)?;
    let cfg_path = out.join("config.toml");
    write_text(&cfg_path, &cfg.to_toml())?;
    let mut prov = Provenance::new("train", state.seed, g.workers, &g.device, cfg.to_json());
    prov.input(manifest);
    if let Some(p) = resume {
        prov.input(p);
    }
    data.samples.iter().for_each(|s| {
        prov.input(&s.hne);
        prov.input(&s.ihc);
    });
    prov.output(&cfg_path);
    outputs.checkpoints.iter().for_each(|p| prov.output(p));
    if log_path.exists() {
        let plot = out.join("loss_curves.png");
        loss_curves(&log_path, &plot)?;
        prov.output(&log_path);
        prov.output(&plot);
    }
    prov.write(out)?;
    if let Some(last) = outputs.log.last() {
        println!("step {} total {:.4}", last.step + 1, last.total);
    }
    Ok(())
}

/// Splits `img` into `side`-px tiles, generates each and reassembles the output.
fn generate_tiled(gen: &Generator, bb: &dyn Backbone, grid_side: usize, side: usize, img: &RgbImage, token: usize) -> Result<RgbImage> {
    let (h, w) = (img.height(), img.width());
    if h % side != 0 || w % side != 0 {
        return Err(Error::Data(format!("input is {h}x{w}; sides must be multiples of the generator resolution {side}")));
    }
    let mut origins = Vec::new();
    for y in (0..h).step_by(side) {
        for x in (0..w).step_by(side) {
            origins.push((y, x));
        }
    }
    let tiles = origins.iter().map(|&(y, x)| img.crop(y, x, side, side)).collect::<Result<Vec<_>>>()?;
    let outs = generate_images(gen, bb, grid_side, &tiles, &vec![token; tiles.len()])?;
    let mut canvas = RgbImage::constant(h, w, [0.0; 3], ValueRange::Unit)?;
    for ((y, x), o) in origins.into_iter().zip(outs) {
        canvas.paste(&o.to_unit(), y, x)?;
    }
    Ok(canvas)
}

#[derive(serde::Serialize)]
struct InferRecord {
    input: PathBuf,
    output: PathBuf,
    token: String,
    dab_score: f64,
}

fn infer(g: &Global, ckpt: &Path, manifest: Option<&Path>, image: Option<&Path>, token: Option<&str>, out: &Path) -> Result<()> {
    let l = load_checkpoint(ckpt, g)?;
    let cfg = &l.cfg;
    let vocab = &cfg.train.tokens;
    let fixed = token.map(|t| parse_token(t, vocab)).transpose()?;
    let jobs: Vec<(PathBuf, String, usize)> = match (manifest, image) {
        (Some(m), _) => read_manifest(m)?
            .iter()
            .map(|s| Ok((s.hne.clone(), s.source_id.clone(), fixed.map_or_else(|| s.token(vocab), Ok)?)))
            .collect::<Result<_>>()?,
        (None, Some(p)) => {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            vec![(p.to_path_buf(), id, fixed.expect("clap requires --token with --image"))]
        }
        (None, None) => unreachable!("clap requires --manifest or --image"),
    };
    let bb = cfg.backbone()?;
    let m = cfg.stain.stain_matrix()?;
    create_dir(out)?;
    let records = parallel_map(jobs.len(), g.workers, |i| {
        let (input, id, t) = &jobs[i];
        let img = RgbImage::load(input)?;
        let gen = generate_tiled(&l.generator, bb.as_ref(), cfg.processor.grid_side, cfg.generator.resolution, &img, *t)?;
        let output = out.join(format!("{id}_{}.png", vocab[*t]));
        gen.save(&output)?;
        let dab_score = dab_intensity_score(&dab_channel(&gen, &m, cfg.stain.od_eps)?, cfg.stain.top_fraction)?;
        Ok(InferRecord { input: input.clone(), output, token: vocab[*t].clone(), dab_score })
    })?;
    let sidecar = out.join("dab_scores.jsonl");
    write_jsonl(&sidecar, &records)?;
    let mut prov = Provenance::new("infer", l.ckpt.seed, g.workers, &g.device, cfg.to_json());
    prov.input(ckpt);
    manifest.iter().for_each(|p| prov.input(p));
    records.iter().for_each(|r| prov.input(&r.input));
    records.iter().for_each(|r| prov.output(&r.output));
    prov.output(&sidecar);
    prov.write(out)?;
    println!("{} images from EMA weights at step {}", records.len(), l.ckpt.step);
    Ok(())
}

fn evaluate(g: &Global, ckpt: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let l = load_checkpoint(ckpt, g)?;
    let cfg = &l.cfg;
    let samples = read_manifest(manifest)?;
    let bb = cfg.backbone()?;
    let ext = cfg.perceptual_extractor()?;
    let ctx = EvalContext {
        generator: &l.generator,
        backbone: bb.as_ref(),
        grid_side: cfg.processor.grid_side,
        extractor: &ext,
        stain: &cfg.stain,
        eval: &cfg.eval,
        vocab: &cfg.train.tokens,
        workers: g.workers,
    };
    let metadata = ReportMetadata {
        n_models: 1,
        params: l.ema.num_params(),
        resolution: cfg.generator.resolution,
        mode: "unified".into(),
        checkpoint_step: l.ckpt.step,
        protocol: format!("four {0}-px quadrant crops of each {1}x{1} test image", cfg.eval.crop, cfg.eval.source_side),
    };
    let images = out.join("images");
    let report = evaluate_run(&samples, &ctx, Some(&images), metadata)?;
    report.save(out)?;
    let mut prov = Provenance::new("evaluate", l.ckpt.seed, g.workers, &g.device, cfg.to_json());
    prov.input(ckpt);
    prov.input(manifest);
    prov.output(&out.join("report.json"));
    prov.output(&out.join("report.txt"));
    prov.output(&images);
    prov.write(out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn tissue_table(stats: &[TissueStats]) -> String {
    let mut s = format!("{:<22} {:>5} {:>12} {:>12}\n", "tissue", "n", "fail rate", "mean DAB-KL");
    for t in stats {
        s.push_str(&format!("{:<22} {:>5} {:>12.4} {:>12.4}\n", t.tissue.name, t.n, t.failure_rate, t.mean_dab_kl));
    }
    s
}

fn stratify_failures(g: &Global, ckpt: &Path, manifest: &Path, classifier: ClassifierArg, out: &Path) -> Result<()> {
    let l = load_checkpoint(ckpt, g)?;
    let mut cfg = l.cfg.clone();
    cfg.failure.classifier = match classifier {
        ClassifierArg::Stub => ClassifierKind::Stub,
        ClassifierArg::External => ClassifierKind::External,
    };
    let clf = cfg.failure.classifier()?;
    let samples: Vec<PairedSample> = read_manifest(manifest)?.into_iter().filter(|s| s.split == Split::Test).collect();
    if samples.is_empty() {
        return Err(Error::Data("manifest has no test split samples".into()));
    }
    let bb = cfg.backbone()?;
    let m = cfg.stain.stain_matrix()?;
    let vocab = &cfg.train.tokens;
    type Item = (Vec<FailureRecord>, Vec<(String, Triplet)>, Vec<Vec<f64>>);
    let per_sample: Vec<Item> = parallel_map(samples.len(), g.workers, |i| {
        let s = &samples[i];
        let (hne, ihc) = (RgbImage::load(&s.hne)?, RgbImage::load(&s.ihc)?);
        let tissue = classify_tissue(&hne, clf.as_ref())?;
        let token = s.token(vocab)?;
        let hc = deterministic_test_crops(&hne, cfg.eval.crop)?;
        let rc = deterministic_test_crops(&ihc, cfg.eval.crop)?;
        let crops: Vec<RgbImage> = hc.iter().map(|c| c.image.clone()).collect();
        let gen = generate_images(&l.generator, bb.as_ref(), cfg.processor.grid_side, &crops, &vec![token; crops.len()])?;
        let mut item: Item = (Vec::new(), Vec::new(), Vec::new());
        for (k, ((h, r), o)) in hc.into_iter().zip(rc).zip(gen).enumerate() {
            let id = format!("{}_c{k}", s.source_id);
            let o = o.to_unit();
            let kl = dab_kl(&dab_channel(&o, &m, cfg.stain.od_eps)?, &dab_channel(&r.image, &m, cfg.stain.od_eps)?, &cfg.stain);
            item.0.push(FailureRecord::new(id.clone(), s.stain.clone(), tissue.clone(), kl, cfg.failure.threshold));
            item.2.push(bb.cls_embedding(&h.image)?);
            item.1.push((id, Triplet { hne: h.image, real: r.image, generated: o }));
        }
        Ok(item)
    })?;
    let mut records = Vec::new();
    let mut triplets = BTreeMap::new();
    let mut embeddings = Vec::new();
    for (r, t, e) in per_sample {
        records.extend(r);
        triplets.extend(t);
        embeddings.extend(e);
    }
    create_dir(out)?;
    let mut prov = Provenance::new("stratify-failures", l.ckpt.seed, g.workers, &g.device, cfg.to_json());
    prov.input(ckpt);
    prov.input(manifest);

    let rec_path = out.join("records.jsonl");
    write_jsonl(&rec_path, &records)?;
    let stats = stratify(&records)?;
    let (json_path, txt_path, bars_path) = (out.join("tissue_table.json"), out.join("tissue_table.txt"), out.join("failure_rates.png"));
    write_text(&json_path, &serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
    write_text(&txt_path, &tissue_table(&stats))?;
    let bars: Vec<(String, f64)> = stats.iter().map(|t| (t.tissue.name.clone(), t.failure_rate)).collect();
    bar_plot(&bars, (96 + 48 * bars.len()).max(320), 240, Some(1.0))?.save(&bars_path)?;
    for p in [&rec_path, &json_path, &txt_path, &bars_path] {
        prov.output(p);
    }
    for (stain, (grid, _)) in export_worst_cases(&records, &triplets, cfg.failure.worst_k, 96)? {
        let p = out.join(format!("worst_{stain}.png"));
        grid.save(&p)?;
        prov.output(&p);
    }
    let failed: Vec<bool> = records.iter().map(|r| r.failed).collect();
    let pred_path = out.join("predictor.json");
    let predictor = match train_failure_predictor(&embeddings, &failed, &cfg.failure.predictor) {
        Ok(rep) => serde_json::json!({ "status": "trained", "report": rep }),
        Err(Error::Data(why)) => serde_json::json!({ "status": "skipped", "reason": why }),
        Err(e) => return Err(e),
    };
    write_text(&pred_path, &serde_json::to_string_pretty(&predictor).expect("predictor serializes"))?;
    prov.output(&pred_path);
    prov.write(out)?;
    print!("{}", tissue_table(&stats));
    Ok(())
}

fn export_grids(g: &Global, dirs: &[PathBuf], manifest: Option<&Path>, tile: usize, rows: usize, out: &Path) -> Result<()> {
    let files = grids::aligned_files(dirs)?;
    let samples = manifest.map(read_manifest).transpose()?;
    let ordered = grids::order_rows(files, samples.as_deref());
    let written = grids::export_grids(dirs, &ordered, tile, rows, out)?;
    let mut prov = Provenance::new("export-grids", g.seed.unwrap_or(0), g.workers, &g.device, serde_json::json!({ "tile": tile, "rows": rows }));
    dirs.iter().for_each(|d| prov.input(d));
    manifest.iter().for_each(|p| prov.input(p));
    written.iter().for_each(|p| prov.output(p));
    prov.write(out)?;
    println!("{} grid images", written.len());
    Ok(())
}

fn plot_log(g: &Global, log: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let plot = out.join("loss_curves.png");
    loss_curves(log, &plot)?;
    let mut prov = Provenance::new("plot-log", g.seed.unwrap_or(0), g.workers, &g.device, serde_json::Value::Null);
    prov.input(log);
    prov.output(&plot);
    prov.write(out)?;
    Ok(())
}
