use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::region::{localization_iou, select_threshold, small_object_indices, BinarizationConfig, GroundTruthRegion, RegionRule};
use super::{adp, explanation_map, pic, EvalRecord, Task};
use crate::backend::{CaptureBackend, Embedding, ImageTensor};
use crate::error::{GamError, Result};
use crate::saliency::{explain_detailed, Method, SaliencyMap};
use crate::scoring::{self, ScoreKind, ScoreSpec};

/// One dataset item, already preprocessed to the model input.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub image: ImageTensor,
    pub label: Option<usize>,
    pub region: Option<GroundTruthRegion>,
    pub pair_with: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed {
        threshold: f64,
    },
    /// Choose per method and run on a seeded holdout split of this fraction.
    Auto {
        holdout_fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: Task,
    pub score_kind: ScoreKind,
    pub methods: Vec<Method>,
    pub ns: Vec<usize>,
    pub threshold: ThresholdMode,
    pub small_object_percentiles: Vec<f64>,
    /// Similarity pairs by item id. When empty, pairs come from `pair_with`.
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            task: Task::Classification,
            score_kind: ScoreKind::ClassLogit,
            methods: Method::ALL.to_vec(),
            ns: vec![1, 2],
            threshold: ThresholdMode::Auto { holdout_fraction: 0.2 },
            small_object_percentiles: vec![25.0, 10.0],
            pairs: Vec::new(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.ns.is_empty() {
            return Err(GamError::Config("at least one method and one n are required".into()));
        }
        if self.ns.contains(&0) {
            return Err(GamError::Config("n must be at least 1".into()));
        }
        match (self.task, self.score_kind) {
            (Task::Classification, ScoreKind::ClassLogit) | (Task::Similarity, ScoreKind::Dot | ScoreKind::Cosine) => {}
            (task, kind) => return Err(GamError::Config(format!("score `{kind}` does not fit the {task} task"))),
        }
        match self.threshold {
            ThresholdMode::Fixed { threshold } => {
                BinarizationConfig::new(threshold, RegionRule::AllPixels)?;
            }
            ThresholdMode::Auto { holdout_fraction } => {
                if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
                    return Err(GamError::Config(format!(
                        "holdout fraction must lie in (0, 1), got {holdout_fraction}"
                    )));
                }
            }
        }
        if let Some(p) = self.small_object_percentiles.iter().find(|p| !(**p > 0.0 && **p < 100.0)) {
            return Err(GamError::Config(format!("small-object percentile must lie in (0, 100), got {p}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub percentile: f64,
    pub count: usize,
    pub adp: Option<f64>,
    pub pic: Option<f64>,
    /// Percent.
    pub mean_iou: Option<f64>,
}

/// Everything measured for one `(method, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: Task,
    pub method: Method,
    pub n: usize,
    pub records: Vec<EvalRecord>,
    /// `(item id, IoU)` on the test split.
    pub ious: Vec<(String, f64)>,
    /// Thresholds used, for box and mask ground truth.
    pub thresholds: BTreeMap<String, f64>,
    pub adp: Option<f64>,
    pub pic: Option<f64>,
    /// Percent.
    pub mean_iou: Option<f64>,
    pub small_objects: Vec<SubsetMetrics>,
    /// Records dropped because the original confidence was not positive.
    pub nonpositive_filtered: usize,
    /// Units whose Grad-CAM++ score overflowed `exp`.
    pub overflow_count: usize,
    pub failures: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Adp,
    Pic,
    Iou,
}

/// Relative change of `metric` from `base` to `new` in percent, signed so an
/// improvement is positive. `None` when `base` is zero.
pub fn improvement(metric: MetricKind, base: f64, new: f64) -> Option<f64> {
    if base == 0.0 {
        return None;
    }
    Some(match metric {
        MetricKind::Adp => 100.0 * (base - new) / base,
        MetricKind::Pic | MetricKind::Iou => 100.0 * (new - base) / base,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub task: Task,
    pub method: Method,
    pub base_n: usize,
    pub n: usize,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub method: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
    pub improvements: Vec<Improvement>,
}

impl EvalReport {
    pub fn failure_count(&self) -> usize {
        self.runs.iter().map(|r| r.failures.len()).sum()
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let mut push = |task: Task, method: Method, n: usize, metric: String, value: Option<f64>| {
            if let Some(value) = value {
                rows.push(ReportRow {
                    task: task.to_string(),
                    method: method.to_string(),
                    n,
                    metric,
                    value,
                });
            }
        };
        for r in &self.runs {
            push(r.task, r.method, r.n, "adp".into(), r.adp);
            push(r.task, r.method, r.n, "pic".into(), r.pic);
            push(r.task, r.method, r.n, "iou".into(), r.mean_iou);
            for s in &r.small_objects {
                push(r.task, r.method, r.n, format!("adp_small{}", s.percentile), s.adp);
                push(r.task, r.method, r.n, format!("pic_small{}", s.percentile), s.pic);
                push(r.task, r.method, r.n, format!("iou_small{}", s.percentile), s.mean_iou);
            }
            push(r.task, r.method, r.n, "failures".into(), Some(r.failures.len() as f64));
        }
        for i in &self.improvements {
            let name = match i.metric {
                MetricKind::Adp => "adp_impr",
                MetricKind::Pic => "pic_impr",
                MetricKind::Iou => "iou_impr",
            };
            push(i.task, i.method, i.n, name.into(), Some(i.value));
        }
        rows
    }

    /// `task,method,n,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,method,n,metric,value\n");
        for r in self.rows() {
            out.push_str(&format!("{},{},{},{},{}\n", r.task, r.method, r.n, r.metric, r.value));
        }
        out
    }
}

/// Draws up to `per_class` distinct same-label pairs for every label.
pub fn sample_pairs(labels: &[usize], per_class: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for members in by_class.values() {
        let mut all: Vec<(usize, usize)> = members
            .iter()
            .enumerate()
            .flat_map(|(k, &a)| members[k + 1..].iter().map(move |&b| (a, b)))
            .collect();
        all.shuffle(&mut rng);
        all.truncate(per_class);
        pairs.extend(all);
    }
    pairs
}

// A scored unit: one image for classification, one pair for similarity.
struct Unit {
    id: String,
    members: Vec<usize>,
}

struct UnitOutcome {
    record: EvalRecord,
    maps: Vec<(usize, SaliencyMap)>,
    overflow: bool,
}

fn build_units(items: &[EvalItem], task: Task, pairs: &[(String, String)]) -> Result<Vec<Unit>> {
    match task {
        Task::Classification => Ok(items
            .iter()
            .enumerate()
            .map(|(i, it)| Unit {
                id: it.id.clone(),
                members: vec![i],
            })
            .collect()),
        Task::Similarity => {
            let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
            let lookup = |from: &str, id: &str| {
                index.get(id).copied().ok_or_else(|| GamError::InvalidRecord {
                    id: from.to_string(),
                    reason: format!("pair partner `{id}` is not in the dataset"),
                })
            };
            let mut linked = Vec::new();
            if pairs.is_empty() {
                for (i, it) in items.iter().enumerate() {
                    if let Some(other) = &it.pair_with {
                        linked.push((i, lookup(&it.id, other)?));
                    }
                }
            } else {
                for (a, b) in pairs {
                    linked.push((lookup(b, a)?, lookup(a, b)?));
                }
            }
            let mut seen = std::collections::HashSet::new();
            let mut units = Vec::new();
            for (i, j) in linked {
                let key = (i.min(j), i.max(j));
                if i != j && seen.insert(key) {
                    units.push(Unit {
                        id: format!("{}|{}", items[key.0].id, items[key.1].id),
                        members: vec![key.0, key.1],
                    });
                }
            }
            if units.is_empty() {
                return Err(GamError::EmptyInput("similarity pairs"));
            }
            Ok(units)
        }
    }
}

fn class_confidence<B: CaptureBackend + Sync + ?Sized>(model: &B, x: &ImageTensor, class: usize) -> Result<f64> {
    match model.class_probabilities(x)? {
        Some(p) => p
            .get(class)
            .copied()
            .ok_or_else(|| GamError::UnknownClass(format!("index {class} outside {} classes", p.len()))),
        None => Ok(model.capture(x, &ScoreSpec::class_index(class), &[])?.score),
    }
}

fn embed<B: CaptureBackend + ?Sized>(model: &B, x: &ImageTensor) -> Result<Embedding> {
    Ok(model.forward_capture(x, &[])?.1)
}

fn classification_unit<B: CaptureBackend + Sync + ?Sized>(
    model: &B,
    item: &EvalItem,
    idx: usize,
    method: Method,
    n: usize,
) -> Result<UnitOutcome> {
    let class = match item.label {
        Some(c) => c,
        None => {
            let p = model
                .class_probabilities(&item.image)?
                .ok_or_else(|| GamError::UnknownClass(format!("item {} has no label and the model no classifier", item.id)))?;
            crate::backend::argmax(&p)
        }
    };
    let spec = ScoreSpec::class_index(class);
    let ex = explain_detailed(model, &item.image, &spec, method, n)?;
    let y = class_confidence(model, &item.image, class)?;
    let o = class_confidence(model, &explanation_map(&item.image, &ex.map)?, class)?;
    Ok(UnitOutcome {
        record: EvalRecord {
            id: item.id.clone(),
            y,
            o,
            task: Task::Classification,
        },
        maps: vec![(idx, ex.map)],
        overflow: ex.overflow,
    })
}

fn similarity_unit<B: CaptureBackend + Sync + ?Sized>(
    model: &B,
    items: &[EvalItem],
    unit: &Unit,
    kind: ScoreKind,
    method: Method,
    n: usize,
) -> Result<UnitOutcome> {
    let (a, b) = (&items[unit.members[0]], &items[unit.members[1]]);
    let (fa, fb) = (embed(model, &a.image)?, embed(model, &b.image)?);
    let ea = explain_detailed(model, &a.image, &ScoreSpec::similarity(kind, fb.clone()), method, n)?;
    let eb = explain_detailed(model, &b.image, &ScoreSpec::similarity(kind, fa.clone()), method, n)?;
    let y = scoring::score(&fa, &ScoreSpec::similarity(kind, fb))?;
    let ma = embed(model, &explanation_map(&a.image, &ea.map)?)?;
    let mb = embed(model, &explanation_map(&b.image, &eb.map)?)?;
    let o = scoring::score(&ma, &ScoreSpec::similarity(kind, mb))?;
    Ok(UnitOutcome {
        record: EvalRecord {
            id: unit.id.clone(),
            y,
            o,
            task: Task::Similarity,
        },
        maps: vec![(unit.members[0], ea.map), (unit.members[1], eb.map)],
        overflow: ea.overflow || eb.overflow,
    })
}

fn holdout_split(localizable: &[usize], cfg: &EvalConfig) -> (Vec<usize>, Vec<usize>) {
    match cfg.threshold {
        ThresholdMode::Fixed { .. } => (Vec::new(), localizable.to_vec()),
        ThresholdMode::Auto { holdout_fraction } => {
            let mut order = localizable.to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            let mut take = ((order.len() as f64) * holdout_fraction).ceil() as usize;
            if order.len() >= 2 {
                take = take.clamp(1, order.len() - 1);
            }
            let mut holdout = order[..take.min(order.len())].to_vec();
            let mut test = order[take.min(order.len())..].to_vec();
            holdout.sort_unstable();
            test.sort_unstable();
            if test.is_empty() {
                test = holdout.clone();
            }
            (holdout, test)
        }
    }
}

/// Evaluates one `(method, n)` on `items`.
///
/// Per-unit failures are recorded and skipped. The thresholds are chosen on a
/// seeded holdout split (auto mode) and IoU is reported on the rest.
pub fn evaluate_run<B: CaptureBackend + Sync + ?Sized>(
    model: &B,
    items: &[EvalItem],
    method: Method,
    n: usize,
    cfg: &EvalConfig,
) -> Result<RunResult> {
    if items.is_empty() {
        return Err(GamError::EmptyInput("dataset"));
    }
    cfg.validate()?;
    let units = build_units(items, cfg.task, &cfg.pairs)?;
    let outcomes: Vec<Result<UnitOutcome>> = units
        .par_iter()
        .map(|u| match cfg.task {
            Task::Classification => classification_unit(model, &items[u.members[0]], u.members[0], method, n),
            Task::Similarity => similarity_unit(model, items, u, cfg.score_kind, method, n),
        })
        .collect();

    let mut records = Vec::new();
    let mut unit_of_record = Vec::new();
    let mut maps: BTreeMap<usize, SaliencyMap> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut nonpositive_filtered = 0;
    let mut overflow_count = 0;
    for (u, outcome) in units.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                overflow_count += usize::from(o.overflow);
                if !o.record.y.is_finite() || !o.record.o.is_finite() {
                    failures.push((
                        u.id.clone(),
                        GamError::NonFiniteScore(if o.record.y.is_finite() { o.record.o } else { o.record.y }).to_string(),
                    ));
                    continue;
                }
                maps.extend(o.maps);
                if o.record.y <= 0.0 {
                    nonpositive_filtered += 1;
                } else {
                    records.push(o.record);
                    unit_of_record.push(u);
                }
            }
            Err(e) => {
                log::warn!("{}: {e}", u.id);
                failures.push((u.id.clone(), e.to_string()));
            }
        }
    }

    let localizable: Vec<usize> = maps.keys().copied().filter(|&i| items[i].region.is_some()).collect();
    let (holdout, test) = holdout_split(&localizable, cfg);
    let mut thresholds = BTreeMap::new();
    let mut configs: HashMap<bool, BinarizationConfig> = HashMap::new();
    for is_box in [true, false] {
        let name = if is_box { "bbox" } else { "mask" };
        let rule = if is_box {
            RegionRule::LargestComponent
        } else {
            RegionRule::AllPixels
        };
        if !localizable
            .iter()
            .any(|&i| items[i].region.as_ref().is_some_and(|r| r.is_bbox() == is_box))
        {
            continue;
        }
        let chosen = match cfg.threshold {
            ThresholdMode::Fixed { threshold } => BinarizationConfig::new(threshold, rule)?,
            ThresholdMode::Auto { .. } => {
                let pool: Vec<(SaliencyMap, GroundTruthRegion)> = holdout
                    .iter()
                    .filter_map(|&i| {
                        let r = items[i].region.as_ref()?;
                        (r.is_bbox() == is_box).then(|| (maps[&i].clone(), r.clone()))
                    })
                    .collect();
                if pool.is_empty() {
                    BinarizationConfig::new(0.5, rule)?
                } else {
                    select_threshold(&pool, rule)?
                }
            }
        };
        thresholds.insert(name.to_string(), chosen.threshold);
        configs.insert(is_box, chosen);
    }
    let mut iou_of: BTreeMap<usize, f64> = BTreeMap::new();
    for &i in &test {
        let region = items[i].region.as_ref().expect("localizable item");
        match localization_iou(&maps[&i], region, &configs[&region.is_bbox()]) {
            Ok(v) => {
                iou_of.insert(i, v);
            }
            Err(e) => failures.push((items[i].id.clone(), e.to_string())),
        }
    }
    let mean_iou = |idx: &mut dyn Iterator<Item = usize>| {
        let vals: Vec<f64> = idx.filter_map(|i| iou_of.get(&i).copied()).collect();
        (!vals.is_empty()).then(|| 100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
    };

    let mut small_objects = Vec::new();
    let with_region: Vec<usize> = (0..items.len()).filter(|&i| items[i].region.is_some()).collect();
    if !with_region.is_empty() {
        let areas: Vec<f64> = with_region
            .iter()
            .map(|&i| items[i].region.as_ref().expect("region").area() as f64)
            .collect();
        for &p in &cfg.small_object_percentiles {
            let small: std::collections::BTreeSet<usize> = small_object_indices(&areas, p)?.into_iter().map(|k| with_region[k]).collect();
            let subset: Vec<EvalRecord> = records
                .iter()
                .zip(&unit_of_record)
                .filter(|(_, u)| u.members.iter().all(|m| small.contains(m)))
                .map(|(r, _)| r.clone())
                .collect();
            small_objects.push(SubsetMetrics {
                percentile: p,
                count: subset.len(),
                adp: adp(&subset).ok(),
                pic: pic(&subset).ok(),
                mean_iou: mean_iou(&mut small.iter().copied()),
            });
        }
    }

    Ok(RunResult {
        task: cfg.task,
        method,
        n,
        adp: adp(&records).ok(),
        pic: pic(&records).ok(),
        mean_iou: mean_iou(&mut iou_of.keys().copied()),
        ious: iou_of.iter().map(|(&i, &v)| (items[i].id.clone(), v)).collect(),
        records,
        thresholds,
        small_objects,
        nonpositive_filtered,
        overflow_count,
        failures,
    })
}

/// Runs every `(method, n)` of `cfg` and the improvement of each later `n`
/// over the first.
pub fn evaluate<B: CaptureBackend + Sync + ?Sized>(model: &B, items: &[EvalItem], cfg: &EvalConfig) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(GamError::EmptyInput("dataset"));
    }
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut improvements = Vec::new();
    for &method in &cfg.methods {
        let first = runs.len();
        for &n in &cfg.ns {
            runs.push(evaluate_run(model, items, method, n, cfg)?);
        }
        let base: &RunResult = &runs[first];
        for run in &runs[first + 1..] {
            for (metric, b, v) in [
                (MetricKind::Adp, base.adp, run.adp),
                (MetricKind::Pic, base.pic, run.pic),
                (MetricKind::Iou, base.mean_iou, run.mean_iou),
            ] {
                if let (Some(b), Some(v)) = (b, v) {
                    if let Some(value) = improvement(metric, b, v) {
                        improvements.push(Improvement {
                            task: cfg.task,
                            method,
                            base_n: base.n,
                            n: run.n,
                            metric,
                            value,
                        });
                    }
                }
            }
        }
    }
    Ok(EvalReport { runs, improvements })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_signs() {
        let v = improvement(MetricKind::Adp, 17.47, 17.22).unwrap();
        assert!((v - 1.431).abs() < 1e-3);
        assert!(improvement(MetricKind::Adp, 10.0, 12.0).unwrap() < 0.0);
        assert_eq!(improvement(MetricKind::Iou, 40.0, 50.0).unwrap(), 25.0);
        assert_eq!(improvement(MetricKind::Pic, 30.0, 30.0).unwrap(), 0.0);
        assert_eq!(improvement(MetricKind::Pic, 0.0, 1.0), None);
    }

    #[test]
    fn pairs_stay_within_class() {
        let labels = vec![0, 1, 0, 0, 1, 2, 0];
        let pairs = sample_pairs(&labels, 3, 9);
        assert_eq!(pairs.iter().filter(|(a, _)| labels[*a] == 0).count(), 3);
        assert_eq!(pairs.iter().filter(|(a, _)| labels[*a] == 1).count(), 1);
        assert!(pairs.iter().all(|&(a, b)| a < b && labels[a] == labels[b]));
        assert_eq!(pairs, sample_pairs(&labels, 3, 9));
    }
}
