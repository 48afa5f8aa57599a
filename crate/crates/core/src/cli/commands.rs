use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array3;
use serde::Serialize;

use super::config::{load_model, require_file, LoadedModel, ModelConfig, RunConfig};
use super::{Cli, EvaluateArgs, ExplainArgs, ModelArgs, RenderArgs, SanityArgs};
use crate::artifact::{colormap, overlay, side_by_side, write_smap};
use crate::backend::{arch, argmax, train, CaptureBackend, ImageTensor, LayerFilter, Network, PixelRange, TrainConfig};
use crate::data::{load_image, load_items, load_mnist_dir, read_manifest, synthetic_digits, Preprocessing};
use crate::error::{GamError, Result};
use crate::metrics::{evaluate, sample_pairs, EvalConfig, EvalItem, Task, ThresholdMode};
use crate::saliency::{explain, explain_detailed, Method, SaliencyMap};
use crate::sanity::{
    compare_models, predicted_class_scores, randomized_copy, train_label_pair, DataRandomizationConfig, LabelPermutation, SanityReport,
    SanityTest, SanityThresholds, MIN_IMAGES,
};
use crate::scoring::{ScoreKind, ScoreSpec};

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub partial_failures: usize,
}

fn seed(cli: &Cli, file: &RunConfig) -> u64 {
    cli.seed.or(file.seed).unwrap_or(0)
}

fn out_dir(cli: &Cli, file: &RunConfig) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| file.out.clone())
        .unwrap_or_else(|| PathBuf::from("gamkit-out"));
    std::fs::create_dir_all(&dir).map_err(|e| GamError::io(&dir, e))?;
    Ok(dir)
}

fn model_config(args: &ModelArgs, file: &ModelConfig) -> ModelConfig {
    ModelConfig {
        backbone: args.model.clone().or_else(|| file.backbone.clone()),
        weights: args.weights.clone().or_else(|| file.weights.clone()),
        embedding_point: args.embedding_point.clone().or_else(|| file.embedding_point.clone()),
        blocks: args.blocks.clone().or_else(|| file.blocks.clone()),
    }
}

struct Render {
    alpha: f64,
    colormap: String,
}

fn render_options(args: &RenderArgs, file: &RunConfig) -> Result<Render> {
    let alpha = args.alpha.or(file.alpha).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GamError::Config(format!("--alpha must lie in [0, 1], got {alpha}")));
    }
    let colormap_name = args
        .colormap
        .clone()
        .or_else(|| file.colormap.clone())
        .unwrap_or_else(|| "viridis".into());
    colormap(&colormap_name)?;
    Ok(Render {
        alpha,
        colormap: colormap_name,
    })
}

fn check_n(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(GamError::Config("n must be at least 1".into()));
    }
    Ok(n)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| GamError::io(path, e))
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: String,
    explained_against: Option<String>,
    model: &'a str,
    weights: &'a str,
    method: Method,
    n: usize,
    score_kind: ScoreKind,
    class_index: Option<usize>,
    class_label: Option<String>,
    score: Option<f64>,
    degenerate: Option<bool>,
    overflow: bool,
    non_finite: bool,
    error: Option<String>,
    layers: Vec<String>,
    map_shape: [usize; 2],
    preprocessing: &'a Preprocessing,
    seed: u64,
    smap: Option<String>,
    overlay: Option<String>,
}

struct ExplainJob<'a> {
    image_path: &'a Path,
    against: Option<&'a Path>,
    x: &'a ImageTensor,
    spec: ScoreSpec,
    class_index: Option<usize>,
    stem: String,
}

#[allow(clippy::too_many_arguments)]
fn emit(
    model: &LoadedModel,
    backend: &(dyn CaptureBackend + Sync + Send + '_),
    job: ExplainJob<'_>,
    method: Method,
    n: usize,
    render: &Render,
    seed: u64,
    out: &Path,
    outcome: &mut Outcome,
) -> Result<()> {
    let pre = model.preprocessing();
    let base = format!("{}.{}", job.stem, method);
    let mut sidecar = Sidecar {
        image: job.image_path.display().to_string(),
        explained_against: job.against.map(|p| p.display().to_string()),
        model: &model.network.arch,
        weights: &model.weights,
        method,
        n,
        score_kind: job.spec.kind,
        class_index: job.class_index,
        class_label: job.class_index.map(|c| model.class_name(c)),
        score: None,
        degenerate: None,
        overflow: false,
        non_finite: false,
        error: None,
        layers: Vec::new(),
        map_shape: [job.x.spatial().0, job.x.spatial().1],
        preprocessing: &pre,
        seed,
        smap: None,
        overlay: None,
    };
    match explain_detailed(backend, job.x, &job.spec, method, n) {
        Ok(ex) => {
            let smap = out.join(format!("{base}.smap"));
            write_smap(&smap, &ex.map, ex.score)?;
            let png = out.join(format!("{base}.png"));
            save_png(&png, &overlay(&pre.display(job.x), &ex.map, render.alpha, &render.colormap)?)?;
            sidecar.score = Some(ex.score);
            sidecar.degenerate = Some(ex.map.degenerate);
            sidecar.overflow = ex.overflow;
            sidecar.layers = ex.layers.iter().map(|l| l.to_string()).collect();
            sidecar.smap = Some(format!("{base}.smap"));
            sidecar.overlay = Some(format!("{base}.png"));
            outcome.files.extend([smap, png]);
            let mut line = format!("{}: {method} n={n} score {:.6}", job.stem, ex.score);
            if ex.map.degenerate {
                line.push_str(" (degenerate map)");
            }
            if ex.overflow {
                line.push_str(" (exp(s) overflows; analytic Grad-CAM++ coefficients used)");
            }
            outcome.summary.push(line);
        }
        Err(e @ (GamError::NonFiniteScore(_) | GamError::NonFiniteGradient(_))) => {
            sidecar.non_finite = true;
            sidecar.error = Some(e.to_string());
            outcome.summary.push(format!("{}: {e}", job.stem));
            outcome.partial_failures += 1;
        }
        Err(e) => return Err(e),
    }
    let json = out.join(format!("{base}.json"));
    write_json(&json, &sidecar)?;
    outcome.files.push(json);
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn embed(backend: &(dyn CaptureBackend + Sync + Send + '_), x: &ImageTensor) -> Result<crate::backend::Embedding> {
    Ok(backend.forward_capture(x, &[])?.1)
}

/// One map for a classification image, or one map per image of a pair.
pub fn cmd_explain(cli: &Cli, a: &ExplainArgs, file: &RunConfig) -> Result<Outcome> {
    let image = a
        .image
        .clone()
        .or_else(|| file.image.clone())
        .ok_or_else(|| GamError::Config("an input image is required".into()))?;
    require_file(&image, "image")?;
    let reference = a.reference.clone().or_else(|| file.reference.clone());
    if let Some(r) = &reference {
        require_file(r, "reference image")?;
    }
    let method: Method = a
        .method
        .clone()
        .or_else(|| file.method.clone())
        .unwrap_or_else(|| "gam".into())
        .parse()?;
    let n = check_n(a.n.or(file.n).unwrap_or(1))?;
    let kind: ScoreKind = match a.score.clone().or_else(|| file.score.clone()) {
        Some(s) => s.parse()?,
        None if reference.is_some() => ScoreKind::Cosine,
        None => ScoreKind::ClassLogit,
    };
    let class = a.class.clone().or_else(|| file.class.clone());
    match (kind, &reference) {
        (ScoreKind::ClassLogit, Some(_)) => return Err(GamError::Config("a reference image needs --score dot or cosine".into())),
        (ScoreKind::Dot | ScoreKind::Cosine, None) => return Err(GamError::Config(format!("--score {kind} needs --reference"))),
        (ScoreKind::Dot | ScoreKind::Cosine, Some(_)) if class.is_some() => {
            return Err(GamError::Config("--class applies to the logit score only".into()))
        }
        _ => {}
    }
    let render = render_options(&a.render, file)?;
    let seed = seed(cli, file);
    let model = load_model(&model_config(&a.model, &file.model), "builtin", seed)?;
    let backend = model.backend()?;
    let pre = model.preprocessing();
    let out = out_dir(cli, file)?;
    let (x, _) = load_image(&image, &pre)?;
    let mut outcome = Outcome::default();
    match reference {
        None => {
            let class_index = match class {
                Some(c) => model.class_index(&c)?,
                None => {
                    let p = backend
                        .class_probabilities(&x)?
                        .ok_or_else(|| GamError::UnknownClass("model has no classifier head".into()))?;
                    argmax(&p)
                }
            };
            let job = ExplainJob {
                image_path: &image,
                against: None,
                x: &x,
                spec: ScoreSpec::class_index(class_index),
                class_index: Some(class_index),
                stem: stem(&image),
            };
            emit(&model, backend.as_ref(), job, method, n, &render, seed, &out, &mut outcome)?;
        }
        Some(reference) => {
            let (y, _) = load_image(&reference, &pre)?;
            let (fx, fy) = (embed(backend.as_ref(), &x)?, embed(backend.as_ref(), &y)?);
            let first = stem(&image);
            let mut second = stem(&reference);
            if second == first {
                second.push_str("_ref");
            }
            let jobs = [
                ExplainJob {
                    image_path: &image,
                    against: Some(&reference),
                    x: &x,
                    spec: ScoreSpec::similarity(kind, fy),
                    class_index: None,
                    stem: first,
                },
                ExplainJob {
                    image_path: &reference,
                    against: Some(&image),
                    x: &y,
                    spec: ScoreSpec::similarity(kind, fx),
                    class_index: None,
                    stem: second,
                },
            ];
            for job in jobs {
                emit(&model, backend.as_ref(), job, method, n, &render, seed, &out, &mut outcome)?;
            }
        }
    }
    Ok(outcome)
}

#[derive(Serialize)]
struct EvaluateSummary<'a> {
    manifest: String,
    model: &'a str,
    weights: &'a str,
    preprocessing: Preprocessing,
    config: &'a EvalConfig,
    items_loaded: usize,
    load_failures: Vec<(String, String)>,
    failure_count: usize,
    overflow_count: usize,
    nonpositive_filtered: usize,
    report: &'a crate::metrics::EvalReport,
}

/// ADP, PIC and IoU for every requested `(method, n)`; writes `report.csv`
/// and `summary.json`.
pub fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs, file: &RunConfig) -> Result<Outcome> {
    let manifest = a
        .manifest
        .clone()
        .or_else(|| file.manifest.clone())
        .ok_or_else(|| GamError::Config("--manifest is required".into()))?;
    require_file(&manifest, "manifest")?;
    let methods: Vec<Method> = match (&a.method, &file.methods, &file.method) {
        (Some(m), _, _) => m.clone(),
        (None, Some(m), _) => m.clone(),
        (None, None, Some(m)) => vec![m.clone()],
        (None, None, None) => Method::ALL.iter().map(|m| m.to_string()).collect(),
    }
    .iter()
    .map(|m| m.parse())
    .collect::<Result<_>>()?;
    let ns = match (&a.n, &file.ns, file.n) {
        (Some(n), _, _) => n.clone(),
        (None, Some(n), _) => n.clone(),
        (None, None, Some(n)) => vec![n],
        (None, None, None) => vec![1, 2],
    };
    for &n in &ns {
        check_n(n)?;
    }
    let kind: ScoreKind = a
        .score
        .clone()
        .or_else(|| file.score.clone())
        .unwrap_or_else(|| "logit".into())
        .parse()?;
    let task = if kind == ScoreKind::ClassLogit {
        Task::Classification
    } else {
        Task::Similarity
    };
    let threshold = match (a.threshold, a.auto_threshold, file.threshold, file.auto_threshold) {
        (Some(t), _, _, _) => ThresholdMode::Fixed { threshold: t },
        (None, Some(f), _, _) => ThresholdMode::Auto { holdout_fraction: f },
        (None, None, Some(t), _) => ThresholdMode::Fixed { threshold: t },
        (None, None, None, f) => ThresholdMode::Auto {
            holdout_fraction: f.unwrap_or(0.2),
        },
    };
    let seed = seed(cli, file);
    let mut cfg = EvalConfig {
        task,
        score_kind: kind,
        methods,
        ns,
        threshold,
        seed,
        ..EvalConfig::default()
    };
    cfg.validate()?;
    let model = load_model(&model_config(&a.model, &file.model), "builtin", seed)?;
    let backend = model.backend()?;
    let pre = model.preprocessing();
    let out = out_dir(cli, file)?;

    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(GamError::EmptyInput("manifest"));
    }
    let mut load_failures = Vec::new();
    let mut items: Vec<EvalItem> = Vec::new();
    for (id, item) in load_items(&entries, &pre, &|l| model.class_index(&l.to_string())) {
        match item {
            Ok(it) => items.push(it),
            Err(e) => {
                log::warn!("{id}: {e}");
                load_failures.push((id, e.to_string()));
            }
        }
    }
    if items.is_empty() {
        return Err(GamError::EmptyInput("loadable manifest items"));
    }
    if task == Task::Similarity && items.iter().all(|it| it.pair_with.is_none()) {
        let labelled: Vec<&EvalItem> = items.iter().filter(|it| it.label.is_some()).collect();
        let labels: Vec<usize> = labelled.iter().map(|it| it.label.expect("labelled")).collect();
        let per_class = a.pairs_per_class.or(file.pairs_per_class).unwrap_or(3);
        cfg.pairs = sample_pairs(&labels, per_class, seed)
            .into_iter()
            .map(|(i, j)| (labelled[i].id.clone(), labelled[j].id.clone()))
            .collect();
    }
    let report = evaluate(backend.as_ref(), &items, &cfg)?;

    let csv = out.join("report.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| GamError::io(&csv, e))?;
    let summary = EvaluateSummary {
        manifest: manifest.display().to_string(),
        model: &model.network.arch,
        weights: &model.weights,
        preprocessing: pre,
        config: &cfg,
        items_loaded: items.len(),
        load_failures: load_failures.clone(),
        failure_count: report.failure_count() + load_failures.len(),
        overflow_count: report.runs.iter().map(|r| r.overflow_count).sum(),
        nonpositive_filtered: report.runs.iter().map(|r| r.nonpositive_filtered).sum(),
        report: &report,
    };
    let json = out.join("summary.json");
    write_json(&json, &summary)?;

    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut outcome = Outcome {
        files: vec![csv, json],
        summary: Vec::new(),
        partial_failures: summary.failure_count,
    };
    for r in &report.runs {
        let mut line = format!(
            "{} {} n={}: ADP {} PIC {} IoU {}",
            r.task,
            r.method,
            r.n,
            fmt(r.adp),
            fmt(r.pic),
            fmt(r.mean_iou)
        );
        if r.overflow_count > 0 {
            line.push_str(&format!(" ({} exp(s) overflows)", r.overflow_count));
        }
        if r.nonpositive_filtered > 0 {
            line.push_str(&format!(" ({} pairs with non-positive score skipped)", r.nonpositive_filtered));
        }
        outcome.summary.push(line);
    }
    Ok(outcome)
}

struct SanityData {
    train_images: Vec<Array3<f64>>,
    train_labels: Vec<usize>,
    eval_images: Vec<ImageTensor>,
}

fn sanity_data(dataset: &str, net: &Network, train_size: usize, images: usize, seed: u64) -> Result<SanityData> {
    let [c, h, w] = net.input_shape;
    let total = train_size + images;
    let classes = net.class_count().unwrap_or(10);
    let (all_images, all_labels): (Vec<Array3<f64>>, Vec<usize>) = if dataset == "synthetic" {
        if c != 1 || h != w {
            return Err(GamError::Config(format!(
                "synthetic digits need a square one-channel input, `{}` takes {c}x{h}x{w}",
                net.arch
            )));
        }
        let per_cycle = classes.min(10);
        synthetic_digits(total * 10 / per_cycle + 10, h, seed)
            .into_iter()
            .filter(|d| d.label < classes)
            .take(total)
            .map(|d| (d.image, d.label))
            .unzip()
    } else {
        let path = Path::new(dataset);
        if path.is_dir() {
            let (imgs, labels) = load_mnist_dir(path)?;
            if let Some(first) = imgs.first() {
                if first.dim() != (c, h, w) {
                    return Err(GamError::Config(format!(
                        "dataset images are {:?}, model expects {c}x{h}x{w}",
                        first.dim()
                    )));
                }
            }
            imgs.into_iter().zip(labels).take(total).unzip()
        } else if path.is_file() {
            let pre = Preprocessing::unit_range(net.input_shape);
            let entries = read_manifest(path)?;
            let mut pairs = Vec::new();
            for (id, item) in load_items(&entries, &pre, &|l| net.class_index(&l.to_string())) {
                let item = item?;
                let label = item.label.ok_or_else(|| GamError::InvalidRecord {
                    id,
                    reason: "sanity datasets need labels".into(),
                })?;
                pairs.push((item.image.into_data(), label));
                if pairs.len() == total {
                    break;
                }
            }
            pairs.into_iter().unzip()
        } else {
            return Err(GamError::Config(format!("dataset `{dataset}` does not exist")));
        }
    };
    if all_images.len() < total {
        return Err(GamError::Config(format!(
            "dataset has {} usable images, {train_size} training plus {images} evaluation images requested",
            all_images.len()
        )));
    }
    let eval_images = all_images[train_size..]
        .iter()
        .map(|x| ImageTensor::new(x.clone(), PixelRange::Normalized))
        .collect::<Result<_>>()?;
    Ok(SanityData {
        train_labels: all_labels[..train_size].to_vec(),
        train_images: all_images[..train_size].to_vec(),
        eval_images,
    })
}

fn upscale(img: &RgbImage, min_side: u32) -> RgbImage {
    let factor = (min_side / img.width().min(img.height()).max(1)).max(1);
    image::imageops::resize(img, img.width() * factor, img.height() * factor, FilterType::Nearest)
}

#[derive(Serialize)]
struct SanityOutput<'a> {
    backbone: &'a str,
    dataset: &'a str,
    weights: &'a str,
    blocks: Option<&'a Vec<String>>,
    seed: u64,
    train_size: usize,
    #[serde(flatten)]
    report: &'a SanityReport,
}

/// Runs one randomisation test and writes its JSON report plus
/// side-by-side overlays (image, intact model, randomised model).
pub fn cmd_sanity(cli: &Cli, a: &SanityArgs, file: &RunConfig) -> Result<Outcome> {
    let s = &file.sanity;
    let test = match a.test.clone().or_else(|| s.test.clone()).as_deref() {
        Some("param" | "parameter" | "parameter_randomization") => SanityTest::ParameterRandomization,
        Some("data" | "data_randomization") => SanityTest::DataRandomization,
        Some(other) => return Err(GamError::Config(format!("unknown sanity test `{other}` (param or data)"))),
        None => return Err(GamError::Config("--test param|data is required".into())),
    };
    let dataset = a
        .dataset
        .clone()
        .or_else(|| s.dataset.clone())
        .ok_or_else(|| GamError::Config("--dataset is required".into()))?;
    if dataset != "synthetic" && !Path::new(&dataset).exists() {
        return Err(GamError::Config(format!("dataset `{dataset}` does not exist")));
    }
    let method: Method = a
        .method
        .clone()
        .or_else(|| file.method.clone())
        .unwrap_or_else(|| "gam".into())
        .parse()?;
    let n = check_n(a.n.or(file.n).unwrap_or(1))?;
    let image_count = a.images.or(s.images).unwrap_or(40);
    if image_count < MIN_IMAGES {
        return Err(GamError::Config(format!("--images must be at least {MIN_IMAGES}")));
    }
    let is_param = test == SanityTest::ParameterRandomization;
    let train_size = a.train_size.or(s.train_size).unwrap_or(if is_param { 600 } else { 300 });
    let max_epochs = a.max_epochs.or(s.max_epochs).unwrap_or(if is_param { 40 } else { 150 });
    let permutation = match a.permutation.clone().or_else(|| s.permutation.clone()).as_deref() {
        None | Some("random") => None,
        Some("identity") => Some(LabelPermutation::Identity),
        Some(other) => return Err(GamError::Config(format!("unknown permutation `{other}` (random or identity)"))),
    };
    let render = render_options(&a.render, file)?;
    let seed = seed(cli, file);
    let mcfg = model_config(&a.model, &file.model);
    let backbone = mcfg.backbone.clone().unwrap_or_else(|| "lenet".into());
    let weights = mcfg.weights.clone().unwrap_or_else(|| "train".into());
    if !is_param && weights != "train" {
        return Err(GamError::Config(
            "the data test trains its own models; --weights must be `train`".into(),
        ));
    }
    let template = arch::build(&backbone, seed)?;
    let data = sanity_data(&dataset, &template, train_size, image_count, seed)?;
    let train_cfg = TrainConfig {
        max_epochs,
        batch_size: 32,
        learning_rate: 2e-3,
        target_accuracy: Some(if is_param { 99.0 } else { 95.0 }),
        require_target: !is_param,
        seed,
    };

    let (intact, other, training) = if is_param {
        let intact = if weights == "train" {
            let mut net = template;
            let report = train(&mut net, &data.train_images, &data.train_labels, &train_cfg)?;
            log::info!("trained {backbone}: {:.1}% train accuracy", report.train_accuracy);
            net
        } else {
            load_model(&mcfg, "builtin", seed)?.network
        };
        let other = randomized_copy(&intact, seed.wrapping_add(0x5eed));
        (intact, other, Vec::new())
    } else {
        let config = DataRandomizationConfig {
            arch: backbone.clone(),
            init_seed: seed,
            train: train_cfg,
            permutation: permutation.unwrap_or(LabelPermutation::Random {
                seed: seed.wrapping_add(0x1abe1),
            }),
        };
        train_label_pair(&config, &data.train_images, &data.train_labels)?
    };
    let mut intact = intact;
    let mut other = other;
    if let Some(point) = &mcfg.embedding_point {
        intact.embedding_point = super::config::parse_embedding_point(point)?;
        other.embedding_point = intact.embedding_point;
    }
    let scores = predicted_class_scores(&intact, &data.eval_images)?;
    let thresholds = SanityThresholds::default();
    let (mut report, maps) = match &mcfg.blocks {
        Some(names) => {
            let a = LayerFilter::new(&intact, names.clone())?;
            let b = LayerFilter::new(&other, names.clone())?;
            (
                compare_models(test, &a, &b, &data.eval_images, &scores, method, n, thresholds)?,
                preview(&a, &b, &data.eval_images, &scores, method, n)?,
            )
        }
        None => (
            compare_models(test, &intact, &other, &data.eval_images, &scores, method, n, thresholds)?,
            preview(&intact, &other, &data.eval_images, &scores, method, n)?,
        ),
    };
    report.training = training;

    let out = out_dir(cli, file)?;
    let tag = if is_param { "param" } else { "data" };
    let base = format!("sanity_{tag}_{method}_n{n}");
    let json = out.join(format!("{base}.json"));
    write_json(
        &json,
        &SanityOutput {
            backbone: &backbone,
            dataset: &dataset,
            weights: &weights,
            blocks: mcfg.blocks.as_ref(),
            seed,
            train_size,
            report: &report,
        },
    )?;
    let mut outcome = Outcome {
        files: vec![json],
        ..Outcome::default()
    };
    let pre = Preprocessing::unit_range(intact.input_shape);
    for (k, (x, (m1, m2))) in data.eval_images.iter().zip(maps).enumerate() {
        let shown = pre.display(x);
        let plain = SaliencyMap {
            grid: ndarray::Array2::zeros(x.spatial()),
            method,
            n_layers: n,
            degenerate: true,
        };
        let panels = [
            overlay(&shown, &plain, 0.0, &render.colormap)?,
            overlay(&shown, &m1, render.alpha, &render.colormap)?,
            overlay(&shown, &m2, render.alpha, &render.colormap)?,
        ]
        .map(|p| upscale(&p, 112));
        let png = out.join(format!("{base}_{k}.png"));
        save_png(&png, &side_by_side(&panels, 4))?;
        outcome.files.push(png);
    }
    outcome.summary.push(format!(
        "{tag} {method} n={n}: self {:.4} cross {:.4} -> {}",
        report.self_similarity,
        report.cross_similarity,
        if report.pass { "pass" } else { "fail" }
    ));
    Ok(outcome)
}

const PREVIEWS: usize = 4;

fn preview<A, B>(
    a: &A,
    b: &B,
    images: &[ImageTensor],
    scores: &[ScoreSpec],
    method: Method,
    n: usize,
) -> Result<Vec<(SaliencyMap, SaliencyMap)>>
where
    A: CaptureBackend + ?Sized,
    B: CaptureBackend + ?Sized,
{
    images
        .iter()
        .zip(scores)
        .take(PREVIEWS)
        .map(|(x, s)| Ok((explain(a, x, s, method, n)?, explain(b, x, s, method, n)?)))
        .collect()
}
