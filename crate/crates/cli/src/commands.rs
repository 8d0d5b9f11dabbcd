//! Execution of resolved invocations into in-memory artifacts.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use deepcut_core::evaluation::{self, BoxRecord, MetricReport};
use deepcut_core::feature_io::{self, FeatureField, GeometryMeta, PlantedField};
use deepcut_core::mask::{BBox, LabelMask};
use deepcut_core::pipeline::{self, BoxMode, Composition, PipelineError, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{Metric, SynthKind};
use crate::error::CliError;
use crate::manifest::{Digest, Invocation, SynthSpec};

/// Everything a command produces; nothing touches the filesystem until the
/// caller persists it.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub stdout: Vec<u8>,
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    fn line<T: Serialize>(&mut self, value: &T) {
        serde_json::to_writer(&mut self.stdout, value).expect("records serialize");
        self.stdout.push(b'\n');
    }

    fn file(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn digests(&self) -> Vec<Digest> {
        std::iter::once(Digest::of("stdout", &self.stdout))
            .chain(self.files.iter().map(|(p, b)| Digest::of(p.display().to_string(), b)))
            .collect()
    }
}

/// Input access with digest bookkeeping.
pub struct Context<'a> {
    stdin: &'a mut dyn Read,
    stdin_used: bool,
    pub inputs: Vec<Digest>,
}

fn display(path: &Path) -> String {
    if is_stdin(path) {
        "<stdin>".to_string()
    } else {
        path.display().to_string()
    }
}

fn is_stdin(path: &Path) -> bool {
    path.as_os_str() == "-"
}

impl<'a> Context<'a> {
    pub fn new(stdin: &'a mut dyn Read) -> Self {
        Self {
            stdin,
            stdin_used: false,
            inputs: Vec::new(),
        }
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let name = display(path);
        let bytes = if is_stdin(path) {
            if self.stdin_used {
                return Err(CliError::Usage("stdin can be read only once".into()));
            }
            self.stdin_used = true;
            let mut buf = Vec::new();
            self.stdin
                .read_to_end(&mut buf)
                .map_err(|source| CliError::Io { path: name.clone(), source })?;
            buf
        } else {
            std::fs::read(path).map_err(|source| CliError::Io { path: name.clone(), source })?
        };
        self.inputs.push(Digest::of(name, &bytes));
        Ok(bytes)
    }

    fn read_field(&mut self, path: &Path) -> Result<FeatureField, CliError> {
        let bytes = self.read(path)?;
        feature_io::read_feature_field(&bytes[..]).map_err(|source| CliError::Features {
            path: display(path),
            source,
        })
    }
}

/// File stems used as image ids; repeated stems get a positional suffix.
pub fn image_ids(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            if is_stdin(p) {
                "stdin".to_string()
            } else {
                p.file_stem()
                    .map_or_else(|| "input".to_string(), |s| s.to_string_lossy().into_owned())
            }
        })
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &stems {
        *counts.entry(s).or_default() += 1;
    }
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| if counts[s.as_str()] > 1 { format!("{s}-{i}") } else { s.clone() })
        .collect()
}

fn load_fields(ctx: &mut Context, paths: &[PathBuf]) -> Result<Vec<(String, FeatureField)>, CliError> {
    let ids = image_ids(paths);
    let mut out = Vec::with_capacity(paths.len());
    for (id, path) in ids.into_iter().zip(paths) {
        out.push((id, ctx.read_field(path)?));
    }
    Ok(out)
}

fn pipeline_err(id: &str) -> impl Fn(PipelineError) -> CliError + '_ {
    move |source| CliError::Pipeline {
        id: id.to_string(),
        source,
    }
}

fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Domain(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

/// Per-image JSON sidecar.
#[derive(Clone, Debug, Serialize)]
pub struct MaskRecord {
    pub id: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub k_found: usize,
    pub labels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parts_found: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_bbox: Option<BBox>,
    pub loss_trace: Vec<f64>,
}

impl MaskRecord {
    fn new(id: &str, mask: &LabelMask, loss_trace: Vec<f64>) -> Self {
        Self {
            id: id.to_string(),
            grid_h: mask.grid_h,
            grid_w: mask.grid_w,
            k_found: mask.k_found,
            labels: mask.labels.clone(),
            background: None,
            parts_found: None,
            bbox: None,
            pixel_bbox: None,
            loss_trace,
        }
    }
}

struct ImageResult {
    record: MaskRecord,
    mask: LabelMask,
    foreground: LabelMask,
    meta: GeometryMeta,
}

fn binary(mask: &LabelMask) -> LabelMask {
    let labels = mask.labels.iter().map(|&l| usize::from(l != 0)).collect();
    LabelMask::new(mask.grid_h, mask.grid_w, labels).expect("same shape")
}

fn pgm(mask: &LabelMask, binary: bool) -> Vec<u8> {
    let mut buf = Vec::new();
    let written = if binary {
        mask.write_binary_pgm(&mut buf)
    } else {
        mask.write_pgm(&mut buf)
    };
    written.expect("writing to memory");
    buf
}

fn mask_files(art: &mut Artifacts, dir: &Path, result: &ImageResult) -> Result<(), CliError> {
    let id = &result.record.id;
    let err = pipeline_err(id);
    let pixels = pipeline::upsample_mask(&result.mask, &result.meta).map_err(&err)?;
    let fg_pixels = pipeline::upsample_mask(&result.foreground, &result.meta).map_err(&err)?;
    let json = serde_json::to_vec_pretty(&result.record).expect("records serialize");
    art.file(dir.join(format!("{id}.json")), json);
    art.file(dir.join(format!("{id}.pgm")), pgm(&result.mask, false));
    art.file(dir.join(format!("{id}.pixels.pgm")), pgm(&pixels, false));
    art.file(dir.join(format!("{id}.fg.pgm")), pgm(&fg_pixels, true));
    Ok(())
}

fn segment_image(id: &str, field: &FeatureField, cfg: &TrainConfig, two_stage: Option<usize>) -> Result<ImageResult, CliError> {
    let err = pipeline_err(id);
    let result = match two_stage {
        None => {
            let seg = pipeline::segment(field, cfg).map_err(&err)?;
            let (background, foreground) = pipeline::foreground_mask(&seg.mask);
            let mut record = MaskRecord::new(id, &seg.mask, seg.loss_trace);
            record.background = background;
            ImageResult {
                record,
                mask: seg.mask,
                foreground,
                meta: field.meta().clone(),
            }
        }
        Some(k_fg) => {
            let ts = pipeline::two_stage_segment(field, cfg, k_fg).map_err(&err)?;
            let mut record = MaskRecord::new(id, &ts.mask, ts.loss_trace);
            record.background = ts.background;
            record.parts_found = Some(ts.parts_found);
            ImageResult {
                record,
                foreground: binary(&ts.mask),
                mask: ts.mask,
                meta: field.meta().clone(),
            }
        }
    };
    log::info!("{id}: k_found {}", result.record.k_found);
    Ok(result)
}

/// One line of `localize` output: the pixel box plus its patch-grid box.
#[derive(Debug, Serialize)]
struct BoxLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    pixel: BBox,
    patch_box: BBox,
}

fn localize_image(id: &str, field: &FeatureField, cfg: &TrainConfig, mode: BoxMode) -> Result<ImageResult, CliError> {
    let loc = pipeline::localize(field, cfg, mode).map_err(pipeline_err(id))?;
    let seg = loc.segmentation;
    let (_, foreground) = pipeline::foreground_mask(&seg.mask);
    let mut record = MaskRecord::new(id, &seg.mask, seg.loss_trace);
    record.background = loc.background;
    record.bbox = Some(loc.patch_box);
    record.pixel_bbox = Some(loc.pixel_box);
    log::info!("{id}: box {:?}", loc.pixel_box);
    Ok(ImageResult {
        record,
        mask: seg.mask,
        foreground,
        meta: field.meta().clone(),
    })
}

fn collect(results: Vec<Result<ImageResult, CliError>>) -> Result<Vec<ImageResult>, CliError> {
    results.into_iter().collect()
}

fn run_images(
    ctx: &mut Context,
    inputs: &[PathBuf],
    jobs: usize,
    out_dir: Option<&PathBuf>,
    job: impl Fn(&str, &FeatureField) -> Result<ImageResult, CliError> + Sync + Send,
    stdout_line: impl Fn(&ImageResult, &mut Artifacts),
) -> Result<Artifacts, CliError> {
    let fields = load_fields(ctx, inputs)?;
    let results = collect(par_map(jobs, &fields, |(id, field)| job(id, field))?)?;
    let mut art = Artifacts::default();
    for result in &results {
        stdout_line(result, &mut art);
        if let Some(dir) = out_dir {
            mask_files(&mut art, dir, result)?;
        }
    }
    Ok(art)
}

fn run_parts(
    ctx: &mut Context,
    inputs: &[PathBuf],
    cfg: &TrainConfig,
    composition: Composition,
    out_dir: Option<&PathBuf>,
) -> Result<Artifacts, CliError> {
    let loaded = load_fields(ctx, inputs)?;
    let fields: Vec<FeatureField> = loaded.iter().map(|(_, f)| f.clone()).collect();
    let items = pipeline::sequence_segment(&fields, cfg, composition).map_err(pipeline_err("sequence"))?;
    let mut art = Artifacts::default();
    for ((id, field), item) in loaded.iter().zip(items) {
        let foreground = match composition {
            Composition::Direct => pipeline::foreground_mask(&item.mask).1,
            Composition::TwoStage { .. } => binary(&item.mask),
        };
        let result = ImageResult {
            record: MaskRecord::new(id, &item.mask, item.loss_trace),
            mask: item.mask,
            foreground,
            meta: field.meta().clone(),
        };
        art.line(&result.record);
        if let Some(dir) = out_dir {
            mask_files(&mut art, dir, &result)?;
        }
    }
    Ok(art)
}

#[derive(Debug, Serialize)]
struct ClusterRecord {
    n_items: usize,
    k_found: usize,
    labels: Vec<usize>,
    item_ids: Vec<String>,
    loss_trace: Vec<f64>,
}

fn run_cluster(
    ctx: &mut Context,
    inputs: &[PathBuf],
    cfg: &TrainConfig,
    out_dir: Option<&PathBuf>,
) -> Result<Artifacts, CliError> {
    let loaded = load_fields(ctx, inputs)?;
    let c = loaded[0].1.embed_dim();
    let mut features = Vec::new();
    let mut item_ids = Vec::new();
    for (id, field) in &loaded {
        if field.embed_dim() != c {
            return Err(CliError::Domain(format!(
                "{id}: embed_dim {} differs from {c} in the first input",
                field.embed_dim()
            )));
        }
        features.extend_from_slice(field.features());
        if field.n_nodes() == 1 {
            item_ids.push(id.clone());
        } else {
            item_ids.extend((0..field.n_nodes()).map(|i| format!("{id}:{i}")));
        }
    }
    let items = FeatureField::from_items(item_ids.len(), c, features, "items").map_err(|source| {
        CliError::Features {
            path: "items".into(),
            source,
        }
    })?;
    let result = pipeline::kless_cluster(&items, cfg).map_err(pipeline_err("items"))?;
    log::info!("{} items: k_found {}", item_ids.len(), result.k_found);
    let record = ClusterRecord {
        n_items: item_ids.len(),
        k_found: result.k_found,
        labels: result.labels,
        item_ids,
        loss_trace: result.loss_trace,
    };
    let mut art = Artifacts::default();
    art.line(&record);
    if let Some(dir) = out_dir {
        art.file(dir.join("clusters.json"), serde_json::to_vec_pretty(&record).expect("records serialize"));
    }
    Ok(art)
}

#[derive(Debug, Serialize)]
struct TruthRecord<'a> {
    grid_h: usize,
    grid_w: usize,
    k_found: usize,
    labels: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel_bbox: Option<BBox>,
}

fn run_synth(spec: &SynthSpec) -> Result<Artifacts, CliError> {
    let synth_err = |source| CliError::Features {
        path: "synth".into(),
        source,
    };
    let (planted, object): (PlantedField, Option<BBox>) = match spec.kind {
        SynthKind::Blocks => (
            feature_io::synth_planted_features(spec.grid_h, spec.grid_w, spec.k, spec.sigma, spec.seed)
                .map_err(synth_err)?,
            None,
        ),
        SynthKind::Object => {
            let obj = feature_io::synth_planted_object(spec.grid_h, spec.grid_w, spec.sigma, spec.seed)
                .map_err(synth_err)?;
            (obj.planted, Some(obj.object))
        }
    };
    let meta = planted.field.meta();
    let pixel_bbox = object
        .map(|b| pipeline::pixel_box(&b, meta))
        .transpose()
        .map_err(pipeline_err("synth"))?;

    let mut art = Artifacts::default();
    let mut dcut = Vec::new();
    feature_io::write_feature_field(&planted.field, &mut dcut).map_err(synth_err)?;
    match &spec.out {
        Some(path) => art.file(path.clone(), dcut),
        None => art.stdout = dcut,
    }
    if let Some(path) = &spec.truth_out {
        let record = TruthRecord {
            grid_h: planted.truth.grid_h,
            grid_w: planted.truth.grid_w,
            k_found: planted.truth.k_found,
            labels: &planted.truth.labels,
            bbox: object,
            pixel_bbox,
        };
        art.file(path.clone(), serde_json::to_vec_pretty(&record).expect("records serialize"));
    }
    if let Some(path) = &spec.truth_pgm {
        let pixels = pipeline::upsample_mask(&planted.truth, meta).map_err(pipeline_err("synth"))?;
        art.file(path.clone(), pgm(&pixels, false));
    }
    if let (Some(path), Some(bbox)) = (&spec.truth_boxes, pixel_bbox) {
        let id = spec
            .out
            .as_ref()
            .map_or_else(|| "stdin".to_string(), |p| image_ids(std::slice::from_ref(p)).remove(0));
        let mut line = serde_json::to_vec(&BoxRecord { id, bbox }).expect("records serialize");
        line.push(b'\n');
        art.file(path.clone(), line);
    }
    Ok(art)
}

fn read_boxes(ctx: &mut Context, paths: &[PathBuf]) -> Result<Vec<BoxRecord>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        let bytes = ctx.read(path)?;
        out.extend(evaluation::read_box_lines(&bytes[..]).map_err(|e| CliError::Domain(format!("{}: {e}", display(path))))?);
    }
    Ok(out)
}

fn read_labels(ctx: &mut Context, path: &Path) -> Result<Vec<usize>, CliError> {
    #[derive(serde::Deserialize)]
    struct Labels {
        labels: Vec<usize>,
    }
    let bytes = ctx.read(path)?;
    let parsed: Labels = serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: display(path),
        source,
    })?;
    Ok(parsed.labels)
}

fn run_eval(ctx: &mut Context, metric: Metric, pred: &[PathBuf], truth: &[PathBuf]) -> Result<Artifacts, CliError> {
    let report = match metric {
        Metric::Corloc => {
            let preds = read_boxes(ctx, pred)?;
            let truths = read_boxes(ctx, truth)?;
            let mut by_id = HashMap::new();
            for p in &preds {
                if by_id.insert(p.id.as_str(), p.bbox).is_some() {
                    return Err(CliError::Domain(format!("duplicate prediction for image {}", p.id)));
                }
            }
            let mut ids = Vec::with_capacity(truths.len());
            let mut matched = Vec::with_capacity(truths.len());
            for t in &truths {
                let p = by_id
                    .get(t.id.as_str())
                    .ok_or_else(|| CliError::Domain(format!("no prediction for image {}", t.id)))?;
                ids.push(t.id.clone());
                matched.push(*p);
            }
            let truth_boxes: Vec<BBox> = truths.iter().map(|t| t.bbox).collect();
            MetricReport::localization(&ids, &matched, &truth_boxes)?
        }
        Metric::Miou => {
            let mut preds = Vec::with_capacity(pred.len());
            let mut truths = Vec::with_capacity(truth.len());
            for (list, paths) in [(&mut preds, pred), (&mut truths, truth)] {
                for path in paths {
                    let bytes = ctx.read(path)?;
                    list.push(LabelMask::read_pgm(&bytes[..]).map_err(|source| CliError::Mask {
                        path: display(path),
                        source,
                    })?);
                }
            }
            MetricReport::segmentation(&image_ids(pred), &preds, &truths)?
        }
        Metric::Clustering => {
            let (mut p_all, mut t_all) = (Vec::new(), Vec::new());
            for (p, t) in pred.iter().zip(truth) {
                let p_labels = read_labels(ctx, p)?;
                let t_labels = read_labels(ctx, t)?;
                if p_labels.len() != t_labels.len() {
                    return Err(CliError::Domain(format!(
                        "{} has {} labels but {} has {}",
                        display(p),
                        p_labels.len(),
                        display(t),
                        t_labels.len()
                    )));
                }
                p_all.extend(p_labels);
                t_all.extend(t_labels);
            }
            MetricReport::clustering(&p_all, &t_all)?
        }
    };
    let mut art = Artifacts::default();
    art.line(&report);
    Ok(art)
}

#[derive(Debug, Serialize)]
struct CheckRecord<'a> {
    id: &'a str,
    path: String,
    grid_h: usize,
    grid_w: usize,
    embed_dim: usize,
    meta: &'a GeometryMeta,
}

fn run_extract_check(ctx: &mut Context, inputs: &[PathBuf], expect_embed_dim: Option<usize>) -> Result<Artifacts, CliError> {
    let ids = image_ids(inputs);
    let mut art = Artifacts::default();
    for (id, path) in ids.iter().zip(inputs) {
        let field = ctx.read_field(path)?;
        if let Some(c) = expect_embed_dim {
            if field.embed_dim() != c {
                return Err(CliError::Domain(format!(
                    "{}: embed_dim {} but {c} was expected",
                    display(path),
                    field.embed_dim()
                )));
            }
        }
        art.line(&CheckRecord {
            id,
            path: display(path),
            grid_h: field.grid_h(),
            grid_w: field.grid_w(),
            embed_dim: field.embed_dim(),
            meta: field.meta(),
        });
    }
    Ok(art)
}

pub fn execute(inv: &Invocation, ctx: &mut Context) -> Result<Artifacts, CliError> {
    match inv {
        Invocation::Segment {
            inputs,
            config,
            two_stage,
            out_dir,
            jobs,
        } => run_images(
            ctx,
            inputs,
            *jobs,
            out_dir.as_ref(),
            |id, field| segment_image(id, field, config, *two_stage),
            |r, art| art.line(&r.record),
        ),
        Invocation::Localize {
            inputs,
            config,
            box_mode,
            out_dir,
            jobs,
        } => run_images(
            ctx,
            inputs,
            *jobs,
            out_dir.as_ref(),
            |id, field| localize_image(id, field, config, *box_mode),
            |r, art| {
                art.line(&BoxLine {
                    id: &r.record.id,
                    pixel: r.record.pixel_bbox.expect("localize sets boxes"),
                    patch_box: r.record.bbox.expect("localize sets boxes"),
                })
            },
        ),
        Invocation::Parts {
            inputs,
            config,
            composition,
            out_dir,
        } => run_parts(ctx, inputs, config, *composition, out_dir.as_ref()),
        Invocation::Cluster {
            inputs,
            config,
            out_dir,
        } => run_cluster(ctx, inputs, config, out_dir.as_ref()),
        Invocation::Synth { spec } => run_synth(spec),
        Invocation::Eval { metric, pred, truth } => run_eval(ctx, *metric, pred, truth),
        Invocation::ExtractCheck {
            inputs,
            expect_embed_dim,
        } => run_extract_check(ctx, inputs, *expect_embed_dim),
    }
}
