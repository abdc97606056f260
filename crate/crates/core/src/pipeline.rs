//! File-based pipeline stages and the structured config that drives them.
//!
//! A dataset directory holds the sample pairs; every other artifact lives in a
//! work directory:
//!
//! ```text
//! points/<id>.json          detect
//! features/<id>.pdlf        features
//! triangulation/<id>.json   triangulate (plus <id>.svg)
//! joint/<id>.pdlf           pair (plus <id>.pdlf.meta.json)
//! model.pdln, history.csv   train
//! masks/<id>.png            segment
//! eval.csv, report.json     eval
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corners::{detect_corners, CornerPoint, DetectorConfig};
use crate::dataset::{
    assign_parts, augment_all, load_dataset, perturb, resize_image, resize_mask, save_dataset,
    synth_weak, Manifest, Part, Perturbation, SamplePair, SplitSpec, SynthConfig,
};
use crate::delaunay::{triangulate, Point2, Triangulation};
use crate::error::{Error, Result};
use crate::features::{
    decode_features, encode_features, extract_features, BuiltinExtractor, FeatureRecord,
    DEFAULT_FEATURE_DIM, DEFAULT_PATCH_SIZE,
};
use crate::image::{rgb_to_gray, Image, Mask};
use crate::metrics::{compute_metrics, confusion, mean_report, otsu_threshold, MetricsReport};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::train::{segment, train, write_history_csv, Example};
use crate::nn::{NetworkConfig, NetworkParams, TrainConfig};
use crate::overlay::{overlay_svg, OverlayInput};
use crate::pairing::{
    build_joint_map, load_joint_map, pair_features, pairing_edges, plane_for_network,
    save_joint_map, JointFeatureMap,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Builtin,
    /// Externally computed feature files, one per image.
    Import,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub extractor: ExtractorKind,
    pub dim: usize,
    pub patch_size: usize,
    /// Directory of `<id>.pdlf` files for the import extractor.
    pub import_dir: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            extractor: ExtractorKind::Builtin,
            dim: DEFAULT_FEATURE_DIM,
            patch_size: DEFAULT_PATCH_SIZE,
            import_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Probability threshold for segmentation masks.
    pub threshold: f32,
    pub detector: DetectorConfig,
    pub features: FeatureConfig,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threshold: 0.5,
            detector: DetectorConfig::default(),
            features: FeatureConfig::default(),
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Uses one seed for every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.net.seed = seed;
        self.train.seed = seed;
        self.split.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.features.dim == 0 {
            return Err(Error::Config("features.dim must be at least 1".into()));
        }
        if self.features.patch_size == 0 {
            return Err(Error::Config(
                "features.patch_size must be at least 1".into(),
            ));
        }
        if self.features.extractor == ExtractorKind::Import && self.features.import_dir.is_none() {
            return Err(Error::Config(
                "features.import_dir is required by the import extractor".into(),
            ));
        }
        if self.split.ratios.iter().all(|&r| r == 0) {
            return Err(Error::Config("split.ratios are all zero".into()));
        }
        let s = &self.synth;
        if !(s.contrast > 0.0 && s.contrast <= 0.5) {
            return Err(Error::Config(format!(
                "synth.contrast must lie in (0, 0.5], got {}",
                s.contrast
            )));
        }
        if !(s.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "synth.noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Features,
    Triangulate,
    Pair,
    Train,
    Segment,
    Eval,
    Augment,
    Synth,
    Perturb,
}

impl Stage {
    /// Stages from raw images to the evaluation report, in order.
    pub const CHAIN: [Stage; 7] = [
        Stage::Detect,
        Stage::Features,
        Stage::Triangulate,
        Stage::Pair,
        Stage::Train,
        Stage::Segment,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Features => "features",
            Stage::Triangulate => "triangulate",
            Stage::Pair => "pair",
            Stage::Train => "train",
            Stage::Segment => "segment",
            Stage::Eval => "eval",
            Stage::Augment => "augment",
            Stage::Synth => "synth",
            Stage::Perturb => "perturb",
        }
    }
}

/// Paths and stage-specific options for one invocation.
#[derive(Clone, Debug, Default)]
pub struct StageIo {
    /// Dataset root read by most stages.
    pub data: Option<PathBuf>,
    /// Work directory for artifacts, or the new dataset root for `augment`,
    /// `synth` and `perturb`.
    pub out: PathBuf,
    /// Split augmented variants independently of their origin image.
    pub paper_split: bool,
    pub perturbation: Option<Perturbation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub artifacts: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub const POINTS_DIR: &str = "points";
pub const FEATURES_DIR: &str = "features";
pub const TRIANGULATION_DIR: &str = "triangulation";
pub const JOINT_DIR: &str = "joint";
pub const MASKS_DIR: &str = "masks";
pub const MODEL_FILE: &str = "model.pdln";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const REPORT_FILE: &str = "report.json";

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read(path)?)?)
}

fn need_data(io: &StageIo, stage: Stage) -> Result<&Path> {
    io.data.as_deref().ok_or_else(|| {
        Error::InvalidArgument(format!("stage {} needs a dataset directory", stage.name()))
    })
}

/// Corner points of one image, with a warning when fewer than the configured
/// minimum were found.
pub fn detect_points(
    img: &Image,
    id: &str,
    cfg: &DetectorConfig,
) -> Result<(Vec<CornerPoint>, Option<String>)> {
    let points = detect_corners(img, cfg)?;
    let warning = (points.len() < cfg.min_points_warn).then(|| {
        format!(
            "{id}: {} interest points found, fewer than {}",
            points.len(),
            cfg.min_points_warn
        )
    });
    Ok((points, warning))
}

/// Pairing edges for an image: Delaunay edges, or the documented fallbacks
/// when the points do not span a triangle.
pub fn triangulation_for(points: &[Point2]) -> Triangulation {
    match triangulate(points) {
        Ok(t) => t,
        Err(_) => Triangulation {
            points: points.to_vec(),
            triangles: Vec::new(),
            edges: pairing_edges(points),
        },
    }
}

/// Detection, built-in features and pairing for one image in memory. `None`
/// when no interest point was found.
pub fn joint_map_for_image(
    img: &Image,
    id: &str,
    cfg: &PipelineConfig,
) -> Result<Option<JointFeatureMap>> {
    let (points, _) = detect_points(img, id, &cfg.detector)?;
    if points.is_empty() {
        return Ok(None);
    }
    let extractor = BuiltinExtractor {
        dim: cfg.features.dim,
    };
    let records = extract_features(img, &points, cfg.features.patch_size, &extractor)?;
    let locs: Vec<Point2> = records.iter().map(|r| (r.x, r.y)).collect();
    let t = triangulation_for(&locs);
    let pairwise = pair_features(&records, &t.edges)?;
    build_joint_map(&records, &pairwise, id).map(Some)
}

/// Image tensor at the network's input size and channel count.
pub fn network_image(img: &Image, net: &NetworkConfig) -> Result<Tensor> {
    let resized = resize_image(img, net.input_h, net.input_w)?;
    match (net.in_channels, resized.channels()) {
        (1, _) => rgb_to_gray(&resized)
            .to_tensor()
            .reshape(&[1, net.input_h, net.input_w]),
        (3, 3) => Ok(resized.to_tensor()),
        (3, 1) => {
            let plane = resized.plane(0);
            let data = [plane, plane, plane].concat();
            Tensor::from_vec(&[3, net.input_h, net.input_w], data)
        }
        (c, _) => Err(Error::Config(format!(
            "unsupported input channel count {c}"
        ))),
    }
}

/// Network-ready example with the target resized to the network size.
pub fn make_example(
    sample: &SamplePair,
    map: Option<&JointFeatureMap>,
    net: &NetworkConfig,
) -> Result<Example> {
    Ok(Example {
        image: network_image(&sample.image, net)?,
        plane: plane_for_network(map),
        target: resize_mask(&sample.gt, net.input_h, net.input_w),
    })
}

/// Mask at the image's own size.
pub fn segment_sample(
    img: &Image,
    map: Option<&JointFeatureMap>,
    params: &NetworkParams,
    net: &NetworkConfig,
    threshold: f32,
) -> Result<Mask> {
    let x = network_image(img, net)?;
    let mask = segment(&x, &plane_for_network(map), params, net, threshold)?;
    Ok(resize_mask(&mask, img.height(), img.width()))
}

/// Per-image metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub class_tag: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Which dataset part was evaluated, or `all`.
    pub part: String,
    pub mean: MetricsReport,
    /// Otsu thresholding on the same images, for reference.
    pub otsu_mean: MetricsReport,
}

fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("id,class,acc,iou,dice,voe,sens,prec,spec\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.id, r.class_tag, m.acc, m.iou, m.dice, m.voe, m.sens, m.prec, m.spec
        ));
    }
    s
}

/// Samples and their split part, computing the split when the manifest has
/// none.
fn dataset_with_parts(root: &Path, cfg: &PipelineConfig) -> Result<(Vec<SamplePair>, Vec<Part>)> {
    let (samples, manifest) = load_dataset(root)?;
    let parts = if manifest.samples.iter().all(|e| e.split.is_some()) {
        manifest.samples.iter().map(|e| e.split.unwrap()).collect()
    } else {
        assign_parts(&samples, &cfg.split)?
    };
    Ok((samples, parts))
}

fn load_joint_for(out: &Path, id: &str) -> Result<Option<JointFeatureMap>> {
    let path = out.join(JOINT_DIR).join(format!("{id}.pdlf"));
    if path.exists() {
        load_joint_map(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn joint_maps(
    out: &Path,
    samples: &[SamplePair],
    net: &NetworkConfig,
) -> Result<Vec<Option<JointFeatureMap>>> {
    if net.concat_block == 0 {
        return Ok(vec![None; samples.len()]);
    }
    let dir = out.join(JOINT_DIR);
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "concat_block {} needs joint maps in {}; run the pair stage first",
            net.concat_block,
            dir.display()
        )));
    }
    samples.iter().map(|s| load_joint_for(out, &s.id)).collect()
}

fn stage_detect(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    let (samples, _) = load_dataset(need_data(io, Stage::Detect)?)?;
    let dir = io.out.join(POINTS_DIR);
    mkdir(&dir)?;
    let results: Vec<(Vec<CornerPoint>, Option<String>)> = samples
        .par_iter()
        .map(|s| detect_points(&s.image, &s.id, &cfg.detector))
        .collect::<Result<_>>()?;
    let mut report = StageReport::default();
    for (s, (points, warning)) in samples.iter().zip(results) {
        let path = dir.join(format!("{}.json", s.id));
        write_json(&path, &points)?;
        report.artifacts.push(path);
        report.warnings.extend(warning);
    }
    Ok(report)
}

fn stage_features(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    let (samples, _) = load_dataset(need_data(io, Stage::Features)?)?;
    let dir = io.out.join(FEATURES_DIR);
    mkdir(&dir)?;
    let mut report = StageReport::default();
    let encoded: Vec<Vec<u8>> = match cfg.features.extractor {
        ExtractorKind::Builtin => {
            let extractor = BuiltinExtractor {
                dim: cfg.features.dim,
            };
            samples
                .par_iter()
                .map(|s| {
                    let points: Vec<CornerPoint> =
                        read_json(&io.out.join(POINTS_DIR).join(format!("{}.json", s.id)))?;
                    let records =
                        extract_features(&s.image, &points, cfg.features.patch_size, &extractor)?;
                    encode_features(&records)
                })
                .collect::<Result<_>>()?
        }
        ExtractorKind::Import => {
            let src = cfg.features.import_dir.as_deref().expect("validated");
            samples
                .iter()
                .map(|s| {
                    let path = src.join(format!("{}.pdlf", s.id));
                    let bytes = read(&path)?;
                    let records = decode_features(&bytes)?;
                    if let Some(r) = records.iter().find(|r| r.vector.len() != cfg.features.dim) {
                        return Err(Error::Shape(format!(
                            "{}: imported dimension {} differs from features.dim {}",
                            path.display(),
                            r.vector.len(),
                            cfg.features.dim
                        )));
                    }
                    Ok(bytes)
                })
                .collect::<Result<_>>()?
        }
    };
    for (s, bytes) in samples.iter().zip(encoded) {
        let path = dir.join(format!("{}.pdlf", s.id));
        write(&path, bytes)?;
        report.artifacts.push(path);
    }
    Ok(report)
}

fn read_records(out: &Path, id: &str) -> Result<Vec<FeatureRecord>> {
    decode_features(&read(&out.join(FEATURES_DIR).join(format!("{id}.pdlf")))?)
}

fn stage_triangulate(io: &StageIo) -> Result<StageReport> {
    let (samples, _) = load_dataset(need_data(io, Stage::Triangulate)?)?;
    let dir = io.out.join(TRIANGULATION_DIR);
    mkdir(&dir)?;
    let mut report = StageReport::default();
    for s in &samples {
        let records = read_records(&io.out, &s.id)?;
        let points: Vec<Point2> = records.iter().map(|r| (r.x, r.y)).collect();
        let t = triangulation_for(&points);
        if points.len() >= 3 && t.triangles.is_empty() {
            report.warnings.push(format!(
                "{}: collinear points, pairing consecutive neighbours",
                s.id
            ));
        }
        let json = dir.join(format!("{}.json", s.id));
        write_json(&json, &t)?;
        let svg = dir.join(format!("{}.svg", s.id));
        let input = OverlayInput {
            image: &s.image,
            points: &points,
            triangulation: Some(&t),
            mask: None,
        };
        write(&svg, overlay_svg(&input)?)?;
        report.artifacts.extend([json, svg]);
    }
    Ok(report)
}

fn stage_pair(io: &StageIo) -> Result<StageReport> {
    let (samples, _) = load_dataset(need_data(io, Stage::Pair)?)?;
    let dir = io.out.join(JOINT_DIR);
    mkdir(&dir)?;
    let mut report = StageReport::default();
    for s in &samples {
        let records = read_records(&io.out, &s.id)?;
        if records.is_empty() {
            report
                .warnings
                .push(format!("{}: no features, network gets a zero plane", s.id));
            continue;
        }
        let t: Triangulation = read_json(
            &io.out
                .join(TRIANGULATION_DIR)
                .join(format!("{}.json", s.id)),
        )?;
        let pairwise = pair_features(&records, &t.edges)?;
        let map = build_joint_map(&records, &pairwise, &s.id)?;
        let path = dir.join(format!("{}.pdlf", s.id));
        save_joint_map(&map, &path)?;
        report.artifacts.push(path);
    }
    Ok(report)
}

fn stage_train(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    let (samples, parts) = dataset_with_parts(need_data(io, Stage::Train)?, cfg)?;
    let maps = joint_maps(&io.out, &samples, &cfg.net)?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for ((s, m), p) in samples.iter().zip(&maps).zip(&parts) {
        match p {
            Part::Train => train_set.push(make_example(s, m.as_ref(), &cfg.net)?),
            Part::Val => val_set.push(make_example(s, m.as_ref(), &cfg.net)?),
            Part::Test => {}
        }
    }
    let params = NetworkParams::init(&cfg.net)?;
    let outcome = train(&train_set, &val_set, params, &cfg.net, &cfg.train)?;
    let mut report = StageReport::default();
    if let Some(epoch) = outcome.diverged_at {
        report.warnings.push(format!(
            "training diverged at epoch {epoch}; saved the last finite parameters"
        ));
    }
    mkdir(&io.out)?;
    let model = io.out.join(MODEL_FILE);
    save_checkpoint(&outcome.params, &cfg.net, &model)?;
    let history = io.out.join(HISTORY_FILE);
    write_history_csv(&outcome.history, &history)?;
    report.artifacts.extend([model, history]);
    Ok(report)
}

fn stage_segment(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    let (samples, _) = load_dataset(need_data(io, Stage::Segment)?)?;
    let (params, net) = load_checkpoint(&io.out.join(MODEL_FILE))?;
    let maps = joint_maps(&io.out, &samples, &net)?;
    let dir = io.out.join(MASKS_DIR);
    mkdir(&dir)?;
    let masks: Vec<Mask> = samples
        .par_iter()
        .zip(maps.par_iter())
        .map(|(s, m)| segment_sample(&s.image, m.as_ref(), &params, &net, cfg.threshold))
        .collect::<Result<_>>()?;
    let mut report = StageReport::default();
    for (s, mask) in samples.iter().zip(masks) {
        let path = dir.join(format!("{}.png", s.id));
        mask.save_png(&path)?;
        report.artifacts.push(path);
    }
    Ok(report)
}

fn stage_eval(io: &StageIo) -> Result<StageReport> {
    let root = need_data(io, Stage::Eval)?;
    let (samples, manifest) = load_dataset(root)?;
    let has_split = manifest.samples.iter().any(|e| e.split.is_some());
    let selected: Vec<&SamplePair> = samples
        .iter()
        .filter(|s| !has_split || manifest.part_of(&s.id) == Some(Part::Test))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let rows: Vec<(EvalRow, MetricsReport)> = selected
        .par_iter()
        .map(|s| {
            let pred = Mask::load_png(&io.out.join(MASKS_DIR).join(format!("{}.png", s.id)))?;
            let metrics = compute_metrics(&confusion(&pred, &s.gt)?);
            let otsu = compute_metrics(&confusion(&otsu_threshold(&s.image), &s.gt)?);
            let row = EvalRow {
                id: s.id.clone(),
                class_tag: s.class_tag.clone(),
                metrics,
            };
            Ok((row, otsu))
        })
        .collect::<Result<_>>()?;
    let per_image: Vec<EvalRow> = rows.iter().map(|(r, _)| r.clone()).collect();
    let metrics: Vec<MetricsReport> = per_image.iter().map(|r| r.metrics).collect();
    let otsu: Vec<MetricsReport> = rows.iter().map(|(_, o)| *o).collect();
    let report_body = EvalReport {
        images: per_image.len(),
        part: if has_split {
            "test".into()
        } else {
            "all".into()
        },
        mean: mean_report(&metrics),
        otsu_mean: mean_report(&otsu),
    };
    mkdir(&io.out)?;
    let csv = io.out.join(EVAL_CSV);
    write(&csv, eval_csv(&per_image))?;
    let json = io.out.join(REPORT_FILE);
    write_json(&json, &report_body)?;
    Ok(StageReport {
        artifacts: vec![csv, json],
        ..Default::default()
    })
}

fn write_dataset(
    out: &Path,
    samples: &[SamplePair],
    cfg: &PipelineConfig,
    paper_split: bool,
) -> Result<StageReport> {
    let spec = SplitSpec {
        ungrouped: cfg.split.ungrouped || paper_split,
        ..cfg.split.clone()
    };
    let parts = assign_parts(samples, &spec).ok();
    let mut report = StageReport::default();
    if parts.is_none() {
        report.warnings.push(format!(
            "{} samples cannot fill split ratios {:?}; no split recorded",
            samples.len(),
            spec.ratios
        ));
    }
    mkdir(out)?;
    save_dataset(out, samples, parts.as_deref())?;
    report
        .artifacts
        .push(out.join(crate::dataset::MANIFEST_FILE));
    Ok(report)
}

fn stage_augment(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    let (samples, _) = load_dataset(need_data(io, Stage::Augment)?)?;
    write_dataset(&io.out, &augment_all(&samples), cfg, io.paper_split)
}

fn stage_synth(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    write_dataset(&io.out, &synth_weak(&cfg.synth)?, cfg, io.paper_split)
}

fn stage_perturb(cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    let kind = io.perturbation.ok_or_else(|| {
        Error::InvalidArgument("perturb needs a perturbation kind and percent".into())
    })?;
    let (samples, manifest) = load_dataset(need_data(io, Stage::Perturb)?)?;
    let perturbed: Vec<SamplePair> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SamplePair {
                image: perturb(&s.image, kind, cfg.seed.wrapping_add(i as u64))?,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    let parts: Option<Vec<Part>> = manifest.samples.iter().map(|e| e.split).collect();
    mkdir(&io.out)?;
    save_dataset(&io.out, &perturbed, parts.as_deref())?;
    Ok(StageReport {
        artifacts: vec![io.out.join(crate::dataset::MANIFEST_FILE)],
        ..Default::default()
    })
}

/// Validates the config, then runs one stage.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, io: &StageIo) -> Result<StageReport> {
    cfg.validate()?;
    let mut report = match stage {
        Stage::Detect => stage_detect(cfg, io),
        Stage::Features => stage_features(cfg, io),
        Stage::Triangulate => stage_triangulate(io),
        Stage::Pair => stage_pair(io),
        Stage::Train => stage_train(cfg, io),
        Stage::Segment => stage_segment(cfg, io),
        Stage::Eval => stage_eval(io),
        Stage::Augment => stage_augment(cfg, io),
        Stage::Synth => stage_synth(cfg, io),
        Stage::Perturb => stage_perturb(cfg, io),
    }?;
    report.stage = stage.name().to_string();
    Ok(report)
}

/// Runs detect through eval on one dataset.
pub fn run_chain(cfg: &PipelineConfig, io: &StageIo) -> Result<Vec<StageReport>> {
    Stage::CHAIN
        .iter()
        .map(|&s| run_stage(s, cfg, io))
        .collect()
}

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PDLF_THREADS";

/// Sizes the global worker pool from `PDLF_THREADS` when set. Returns the
/// thread count in effect.
pub fn init_threads_from_env() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        // A pool that is already initialized keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Loads the manifest of a dataset written by the harness.
pub fn dataset_manifest(root: &Path) -> Result<Manifest> {
    Manifest::load(&root.join(crate::dataset::MANIFEST_FILE))
}
