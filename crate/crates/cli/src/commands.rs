use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lungpatch_core::imaging::{encode_png, load_image, resize_pad, save_pgm, Image};
use lungpatch_core::labels::{
    annotation_to_labels, assign_patch_labels, read_manifest, split_cases, write_manifest,
    AnnotationLog, CaseRecord, LabelError, Split,
};
use lungpatch_core::metrics::{
    aggregate_by_case, render_table, subgroup_report, to_jsonl, ScoredItem,
};
use lungpatch_core::nnet::{
    call, load_checkpoint, save_checkpoint, train, Checkpoint, Preprocess, TinyResNet, TrainConfig,
};
use lungpatch_core::pipeline::{
    case_mask, crop_patches, geometry, grid_for_mask, patch_cam, patch_set, prepare_case,
    score_patches, PrepareOptions,
};
use lungpatch_core::segbaseline::{load_mask, segment_lungs};
use lungpatch_core::synth::{write_dataset, SynthConfig, TRUTH_DIR};
use lungpatch_core::{metrics, Mask, PatchGrid, SegConfig};
use lungpatch_service::{CaseScores, ServiceConfig};
use serde::Serialize;

use crate::args::*;
use crate::error::{CliError, Result};

struct Ctx<'a> {
    seed: u64,
    manifest: Option<&'a Path>,
    out_dir: &'a Path,
}

impl Ctx<'_> {
    fn manifest(&self) -> Result<(Vec<CaseRecord>, PathBuf)> {
        let path = self
            .manifest
            .ok_or_else(|| CliError::usage("--manifest is required here"))?;
        let cases = read_manifest(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cases, base))
    }

    fn out(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.out_dir.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(p)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(&it).expect("serializable"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Paths in a manifest written to `out_dir` that was read from `base`.
fn rebase(base: &Path, out_dir: &Path, p: &Path) -> PathBuf {
    let same = match (fs::canonicalize(base), fs::canonicalize(out_dir)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if p.is_absolute() || same {
        p.to_path_buf()
    } else {
        std::path::absolute(base.join(p)).unwrap_or_else(|_| base.join(p))
    }
}

fn rebased(cases: &[CaseRecord], base: &Path, out_dir: &Path) -> Vec<CaseRecord> {
    cases
        .iter()
        .map(|c| CaseRecord {
            image_path: rebase(base, out_dir, &c.image_path),
            mask_path: c.mask_path.as_deref().map(|m| rebase(base, out_dir, m)),
            ..c.clone()
        })
        .collect()
}

/// Runs `f` on every case, collecting per-case failures into one data error.
fn each_case<T>(
    cases: &[CaseRecord],
    mut f: impl FnMut(&CaseRecord) -> Result<T>,
) -> (Vec<(usize, T)>, Option<CliError>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        match f(c) {
            Ok(v) => ok.push((i, v)),
            Err(e) => failed.push(e.context(&c.case_id)),
        }
    }
    let err = (!failed.is_empty()).then(|| {
        let code = failed.iter().map(|e| e.code).max().unwrap_or(2);
        let lines: Vec<String> = failed.iter().map(|e| format!("  {e}")).collect();
        CliError {
            code,
            msg: format!(
                "{} of {} case(s) failed:\n{}",
                failed.len(),
                cases.len(),
                lines.join("\n")
            ),
        }
    });
    (ok, err)
}

fn image_and_mask(input: &Path, mask: Option<&Path>, seg: &SegConfig) -> Result<(Image, Mask)> {
    let image = load_image(input)?;
    let mask = match mask {
        Some(m) => load_mask(m, (image.width(), image.height()))?,
        None => segment_lungs(&image, seg)?,
    };
    Ok((image, mask))
}

fn seg_config(f: &SegFlags) -> Result<SegConfig> {
    let cfg = f.config();
    cfg.validate()?;
    Ok(cfg)
}

fn grid_spec(f: &GridFlags) -> Result<lungpatch_core::GridSpec> {
    f.spec().map_err(CliError::usage)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        manifest: cli.manifest.as_deref(),
        out_dir: &cli.out_dir,
    };
    fs::create_dir_all(ctx.out_dir).map_err(|e| CliError::io(ctx.out_dir, e))?;
    match cli.command {
        Command::Segment(a) => segment(&ctx, a),
        Command::Slice(a) => slice(&ctx, a),
        Command::LabelTransform(a) => label_transform(&ctx, a),
        Command::Split => split(&ctx),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Cam(a) => cam_cmd(&ctx, a),
        Command::GenSynthetic(a) => gen_synthetic(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SegRow {
    case_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou: Option<f64>,
}

fn segment(ctx: &Ctx, a: SegmentArgs) -> Result<()> {
    let seg = seg_config(&a.seg)?;
    if let Some(input) = &a.input {
        let image = load_image(input)?;
        let mask = segment_lungs(&image, &seg)?;
        let out = match &a.out {
            Some(p) => p.clone(),
            None => ctx.out("mask.pgm")?,
        };
        save_pgm(&mask.to_image(), &out)?;
        if let Some(t) = &a.truth {
            let truth = load_mask(t, (image.width(), image.height()))?;
            println!("iou {:.6}", metrics::iou(&mask, &truth)?);
        }
        println!("wrote {}", out.display());
        return Ok(());
    }

    let (cases, base) = ctx.manifest()?;
    let truth_dir = a.truth_dir.clone().or_else(|| {
        let d = base.join(TRUTH_DIR);
        d.is_dir().then_some(d)
    });
    let (done, err) = each_case(&cases, |c| {
        let image = load_image(CaseRecord::resolve(&base, &c.image_path))?;
        let mask = segment_lungs(&image, &seg)?;
        let rel = PathBuf::from("masks").join(format!("{}.pgm", c.case_id));
        save_pgm(&mask.to_image(), ctx.out(&rel)?)?;
        let iou = match &truth_dir {
            Some(d) => {
                let t = d.join(format!("{}.pgm", c.case_id));
                if t.exists() {
                    Some(metrics::iou(
                        &mask,
                        &load_mask(&t, (image.width(), image.height()))?,
                    )?)
                } else {
                    None
                }
            }
            None => None,
        };
        Ok((rel, iou))
    });

    let mut out_cases = rebased(&cases, &base, ctx.out_dir);
    let mut rows = Vec::new();
    for (i, (rel, iou)) in &done {
        out_cases[*i].mask_path = Some(rel.clone());
        rows.push(SegRow {
            case_id: cases[*i].case_id.clone(),
            iou: *iou,
        });
    }
    write_manifest(ctx.out("manifest.jsonl")?, &out_cases)?;
    write_jsonl(&ctx.out("segmentation.jsonl")?, &rows)?;
    let ious: Vec<f64> = rows.iter().filter_map(|r| r.iou).collect();
    print!("segmented {}/{} cases", done.len(), cases.len());
    if !ious.is_empty() {
        let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        print!("; IoU vs truth min {min:.4} mean {mean:.4}");
    }
    println!();
    err.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------

fn write_patches(dir: &Path, image: &Image, grid: &PatchGrid, size: Option<usize>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, crop) in crop_patches(image, grid)?.iter().enumerate() {
        let img = match size {
            Some(s) => resize_pad(crop, s, 0)?,
            None => crop.clone(),
        };
        save_pgm(&img, dir.join(format!("patch_{i:02}.pgm")))?;
    }
    write_jsonl(&dir.join("geometry.jsonl"), geometry(grid))
}

fn slice(ctx: &Ctx, a: SliceArgs) -> Result<()> {
    let seg = seg_config(&a.seg)?;
    let spec = grid_spec(&a.grid)?;
    if a.size == Some(0) {
        return Err(CliError::usage("--size must be positive"));
    }
    if let Some(input) = &a.input {
        let (image, mask) = image_and_mask(input, a.mask.as_deref(), &seg)?;
        let grid = grid_for_mask(&mask, spec)?;
        write_patches(ctx.out_dir, &image, &grid, a.size)?;
        println!("wrote {} patches to {}", grid.len(), ctx.out_dir.display());
        return Ok(());
    }
    let (cases, base) = ctx.manifest()?;
    let (done, err) = each_case(&cases, |c| {
        let image = load_image(CaseRecord::resolve(&base, &c.image_path))?;
        let mask = case_mask(c, &base, &image, &seg)?;
        let grid = grid_for_mask(&mask, spec)?;
        write_patches(
            &ctx.out_dir.join("patches").join(&c.case_id),
            &image,
            &grid,
            a.size,
        )?;
        Ok(grid.len())
    });
    let patches: usize = done.iter().map(|(_, n)| n).sum();
    println!(
        "sliced {}/{} cases into {patches} patches",
        done.len(),
        cases.len()
    );
    err.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LabelRow {
    case_id: String,
    grid: lungpatch_core::GridSpec,
    labels: Vec<u8>,
    positives: Vec<usize>,
}

fn label_transform(ctx: &Ctx, a: LabelArgs) -> Result<()> {
    let seg = seg_config(&a.seg)?;
    let spec = grid_spec(&a.grid)?;
    let (cases, base) = ctx.manifest()?;
    let latest: Option<BTreeMap<String, _>> = match &a.annotations {
        Some(p) => Some(
            AnnotationLog::replay(p)?
                .into_iter()
                .map(|r| (r.case_id.clone(), r))
                .collect(),
        ),
        None => None,
    };
    let mut uncovered = Vec::new();
    let (rows, err) = each_case(&cases, |c| {
        if let Some(m) = &latest {
            if !m.contains_key(&c.case_id) {
                return Ok(None);
            }
        }
        let image = load_image(CaseRecord::resolve(&base, &c.image_path))?;
        let mask = case_mask(c, &base, &image, &seg)?;
        let grid = grid_for_mask(&mask, spec)?;
        let labels = match &latest {
            Some(m) => annotation_to_labels(&m[&c.case_id], &grid)?,
            None => match assign_patch_labels(&grid, &c.nodules, a.mode.into()) {
                Ok(l) => l,
                Err(LabelError::UncoveredNodules(ids)) => {
                    uncovered.push(format!("{}: {}", c.case_id, ids.join(", ")));
                    return Ok(None);
                }
                Err(e) => return Err(e.into()),
            },
        };
        Ok(Some(LabelRow {
            case_id: c.case_id.clone(),
            grid: spec,
            positives: labels.positives(),
            labels: labels.0.iter().map(|&b| b as u8).collect(),
        }))
    });
    let rows: Vec<LabelRow> = rows.into_iter().filter_map(|(_, r)| r).collect();
    write_jsonl(&ctx.out("labels.jsonl")?, &rows)?;
    println!("labelled {} case(s)", rows.len());
    if !uncovered.is_empty() {
        let report = ctx.out("uncovered_nodules.txt")?;
        write_text(&report, &(uncovered.join("\n") + "\n"))?;
        return Err(CliError::data(format!(
            "nodule(s) outside every patch in {} case(s), listed in {}:\n  {}",
            uncovered.len(),
            report.display(),
            uncovered.join("\n  ")
        )));
    }
    err.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SplitRow<'a> {
    case_id: &'a str,
    split: Split,
}

fn assigned(ctx: &Ctx) -> Result<(Vec<CaseRecord>, PathBuf)> {
    let (cases, base) = ctx.manifest()?;
    Ok((split_cases(cases, ctx.seed)?, base))
}

fn split(ctx: &Ctx) -> Result<()> {
    let (cases, base) = assigned(ctx)?;
    write_manifest(
        ctx.out("manifest.jsonl")?,
        &rebased(&cases, &base, ctx.out_dir),
    )?;
    let count = |s: Split| cases.iter().filter(|c| c.split == s).count();
    println!(
        "train {} / val {} / test {}",
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let seg = seg_config(&a.seg)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        base_lr: a.lr,
        warmup_epochs: a.warmup,
        total_epochs: a.epochs,
        eta_min: a.eta_min,
        class_weights: a.class_weights,
        seed: ctx.seed,
        threshold: a.threshold,
        base_channels: a.base_channels,
        augment: a.augment,
        preprocess: Preprocess {
            patch_size: a.patch_size,
            ..Preprocess::default()
        },
    };
    cfg.validate()?;
    let opts = PrepareOptions {
        grid: grid_spec(&a.grid)?,
        label_mode: a.mode.into(),
        preprocess: cfg.preprocess,
        seg,
    };
    let (cases, base) = assigned(ctx)?;
    let (prepared, err) = each_case(&cases, |c| {
        if c.split == Split::Test {
            return Ok(None);
        }
        Ok(Some(prepare_case(c, &base, &opts)?))
    });
    if let Some(e) = err {
        return Err(e);
    }
    let prepared: Vec<_> = prepared.into_iter().filter_map(|(_, p)| p).collect();
    let train_set = patch_set(&prepared, Split::Train);
    let val_set = patch_set(&prepared, Split::Val);
    eprintln!(
        "train {} patches ({} positive), val {} patches ({} positive)",
        train_set.len(),
        train_set.positives(),
        val_set.len(),
        val_set.positives()
    );
    let net = TinyResNet::new(1, cfg.base_channels, ctx.seed);
    let val = (!val_set.is_empty()).then_some(&val_set);
    let out = train(net, &train_set, val, &cfg)?;

    let ckpt = Checkpoint::new(&out.net, cfg, out.class_weights, out.history.clone());
    let ckpt_path = ctx.out("checkpoint.json")?;
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_jsonl(&ctx.out("history.jsonl")?, &out.history)?;
    write_jsonl(
        &ctx.out("splits.jsonl")?,
        cases.iter().map(|c| SplitRow {
            case_id: &c.case_id,
            split: c.split,
        }),
    )?;
    if let Some(last) = out.history.last() {
        let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
        println!(
            "epoch {} loss {:.4} val AUROC {} AUPR {}",
            last.epoch + 1,
            last.train_loss,
            f(last.val_auroc),
            f(last.val_aupr)
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn load_net(path: &Path) -> Result<(TinyResNet, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt.network()?, ckpt))
}

fn read_items(path: &Path) -> Result<Vec<ScoredItem>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let item: ScoredItem = serde_json::from_str(l)
                .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if !(0.0..=1.0).contains(&item.score) {
                return Err(CliError::data(format!(
                    "{}:{}: score {} outside [0, 1]",
                    path.display(),
                    i + 1,
                    item.score
                )));
            }
            Ok(item)
        })
        .collect()
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let (items, ckpt_threshold) = match (&a.scores, &a.checkpoint) {
        (Some(p), _) => (read_items(p)?, None),
        (None, Some(p)) => {
            let (net, ckpt) = load_net(p)?;
            let opts = PrepareOptions {
                grid: grid_spec(&a.grid)?,
                preprocess: ckpt.train_config.preprocess,
                seg: seg_config(&a.seg)?,
                ..PrepareOptions::default()
            };
            let (cases, base) = assigned(ctx)?;
            let wanted = |s: Split| match a.split {
                SplitSel::All => true,
                SplitSel::Train => s == Split::Train,
                SplitSel::Val => s == Split::Val,
                SplitSel::Test => s == Split::Test,
            };
            let selected: Vec<CaseRecord> = cases.into_iter().filter(|c| wanted(c.split)).collect();
            let (scored, err) = each_case(&selected, |c| {
                let p = prepare_case(c, &base, &opts)?;
                let mut out = Vec::with_capacity(p.squares.len());
                for (k, sq) in p.squares.iter().enumerate() {
                    let x = opts.preprocess.tensor(sq)?;
                    out.push(ScoredItem {
                        score: call(net.forward(&x)?.logits, 0.5).0,
                        truth: p.labels.0[k],
                        case_id: c.case_id.clone(),
                        patch_index: k,
                        difficult: c.difficult,
                    });
                }
                Ok(out)
            });
            if let Some(e) = err {
                return Err(e);
            }
            let items: Vec<ScoredItem> = scored.into_iter().flat_map(|(_, v)| v).collect();
            write_jsonl(&ctx.out("scores.jsonl")?, &items)?;
            (items, Some(ckpt.train_config.threshold))
        }
        (None, None) => return Err(CliError::usage("eval needs --scores or --checkpoint")),
    };
    if items.is_empty() {
        return Err(CliError::data("no items to evaluate"));
    }
    let threshold = a.threshold.or(ckpt_threshold).unwrap_or(0.9);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::usage(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let patch = subgroup_report(&items, threshold);
    let case = subgroup_report(&aggregate_by_case(&items), threshold);
    write_text(&ctx.out("report.jsonl")?, &to_jsonl(&patch))?;
    write_text(&ctx.out("case_report.jsonl")?, &to_jsonl(&case))?;
    let text = format!(
        "Patch level (threshold {threshold})\n{}\nCase level, risk = max patch probability\n{}",
        render_table(&patch),
        render_table(&case)
    );
    write_text(&ctx.out("report.txt")?, &text)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PatchScore {
    patch_index: usize,
    probability: f64,
    positive: bool,
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let (net, ckpt) = load_net(&a.checkpoint)?;
    let pre = ckpt.train_config.preprocess;
    let threshold = ckpt.train_config.threshold;
    let seg = seg_config(&a.seg)?;
    let spec = grid_spec(&a.grid)?;
    if let Some(input) = &a.input {
        let (image, mask) = image_and_mask(input, a.mask.as_deref(), &seg)?;
        let grid = grid_for_mask(&mask, spec)?;
        let rows: Vec<PatchScore> = score_patches(&net, &image, &grid, &pre)?
            .into_iter()
            .enumerate()
            .map(|(i, p)| PatchScore {
                patch_index: i,
                probability: p,
                positive: p > threshold,
            })
            .collect();
        for r in &rows {
            println!("{}", serde_json::to_string(r).expect("serializable"));
        }
        return write_jsonl(&ctx.out("predictions.jsonl")?, &rows);
    }
    let (cases, base) = ctx.manifest()?;
    let selected: Vec<CaseRecord> = if a.cases.is_empty() {
        cases
    } else {
        let known: BTreeMap<&str, &CaseRecord> =
            cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        a.cases
            .iter()
            .map(|id| {
                known
                    .get(id.as_str())
                    .map(|c| (*c).clone())
                    .ok_or_else(|| CliError::usage(format!("unknown case {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    let (scored, err) = each_case(&selected, |c| {
        let image = load_image(CaseRecord::resolve(&base, &c.image_path))?;
        let grid = grid_for_mask(&case_mask(c, &base, &image, &seg)?, spec)?;
        Ok(CaseScores {
            case_id: c.case_id.clone(),
            scores: score_patches(&net, &image, &grid, &pre)?,
        })
    });
    let rows: Vec<CaseScores> = scored.into_iter().map(|(_, s)| s).collect();
    let path = ctx.out("scores.jsonl")?;
    write_jsonl(&path, &rows)?;
    let flagged = rows
        .iter()
        .filter(|r| r.risk().is_some_and(|p| p > threshold))
        .count();
    println!(
        "scored {} case(s), {flagged} with a patch above {threshold}; wrote {}",
        rows.len(),
        path.display()
    );
    err.map_or(Ok(()), Err)
}

fn cam_cmd(ctx: &Ctx, a: CamArgs) -> Result<()> {
    let (net, ckpt) = load_net(&a.checkpoint)?;
    let pre = ckpt.train_config.preprocess;
    let seg = seg_config(&a.seg)?;
    let spec = grid_spec(&a.grid)?;
    let (name, image, mask) = match (&a.input, &a.case) {
        (Some(input), _) => {
            let (image, mask) = image_and_mask(input, a.mask.as_deref(), &seg)?;
            (stem(input), image, mask)
        }
        (None, Some(id)) => {
            let (cases, base) = ctx.manifest()?;
            let c = cases
                .iter()
                .find(|c| &c.case_id == id)
                .ok_or_else(|| CliError::usage(format!("unknown case {id:?}")))?;
            let image = load_image(CaseRecord::resolve(&base, &c.image_path))?;
            let mask = case_mask(c, &base, &image, &seg)?;
            (id.clone(), image, mask)
        }
        (None, None) => return Err(CliError::usage("cam needs --in or --case")),
    };
    let grid = grid_for_mask(&mask, spec)?;
    let indices: Vec<usize> = match a.patch {
        Some(k) if k >= grid.len() => {
            return Err(CliError::usage(format!(
                "patch {k} out of range for {}-patch grid",
                grid.len()
            )))
        }
        Some(k) => vec![k],
        None => (0..grid.len()).collect(),
    };
    for k in &indices {
        let heat = patch_cam(&net, &image, &grid, *k, &pre)?;
        let path = ctx.out(PathBuf::from("cam").join(format!("{name}_p{k:02}.png")))?;
        fs::write(&path, encode_png(&heat.to_image())?).map_err(|e| CliError::io(&path, e))?;
    }
    println!(
        "wrote {} heatmap(s) to {}",
        indices.len(),
        ctx.out_dir.join("cam").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn gen_synthetic(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    if a.n == 0 || a.size < 64 {
        return Err(CliError::usage("need --n >= 1 and --size >= 64"));
    }
    if !(0.0..=1.0).contains(&a.positive_rate) || !(a.noise >= 0.0) {
        return Err(CliError::usage(
            "need --positive-rate in [0, 1] and --noise >= 0",
        ));
    }
    let cfg = SynthConfig {
        n: a.n,
        seed: ctx.seed,
        size: a.size,
        positive_rate: a.positive_rate,
        noise_std: a.noise,
    };
    let cases = write_dataset(&cfg, ctx.out_dir)?;
    let pos = cases.iter().filter(|c| !c.nodules.is_empty()).count();
    println!(
        "wrote {} cases ({pos} with a nodule) to {}",
        cases.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let manifest = ctx
        .manifest
        .ok_or_else(|| CliError::usage("--manifest is required here"))?;
    let cfg = ServiceConfig {
        manifest: manifest.to_path_buf(),
        annotation_log: a.annotation_log,
        checkpoint: a.checkpoint,
        scores: a.scores,
        grid: grid_spec(&a.grid)?,
        seg: seg_config(&a.seg)?,
    };
    lungpatch_service::serve_blocking(cfg, a.addr).map_err(|e| CliError::data(e.to_string()))
}
