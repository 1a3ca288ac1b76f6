use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gsavatar_core::io::{load_camera, load_model, read_json, save_model, write_json};
use gsavatar_core::{GaussianModel, Image};
use gsavatar_pipeline::config::load_config;
use gsavatar_pipeline::decoder::{train_decoder, DecoderBundle, DecoderConfig, TrainSubject};
use gsavatar_pipeline::encoder::{train_encoder, EncoderConfig};
use gsavatar_pipeline::fit::{fit_subject, init_from_landmarks, FitConfig, View};
use gsavatar_pipeline::latent::{fit_attribute_direction, interpolate, traverse, SvmConfig};
use gsavatar_pipeline::synth::{build_dataset, SynthConfig};
use gsavatar_pipeline::template::{build_template, template_stats};
use gsavatar_pipeline::{AttributeDirection, DatasetManifest, Encoder};
use serde::Serialize;

use crate::error::{AppError, AppResult, ErrorKind};
use crate::ops::{self, check_code, decode_model, parse_background, read_code, write_code};
use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "avatar", version, about = "Template-residual Gaussian avatars: data, training, inference and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    SynthData(SynthArgs),
    /// Fit one subject's Gaussian model from its views.
    FitSubject(FitArgs),
    /// Average fitted models into a template.
    BuildTemplate(TemplateArgs),
    /// Train the residual decoder, subject codes and embeddings.
    TrainDecoder(TrainDecoderArgs),
    /// Train the image encoder against trained codes.
    TrainEncoder(TrainEncoderArgs),
    /// Single-image inference, optionally refined.
    Infer(InferArgs),
    /// Decode a latent code into a model.
    Decode(DecodeArgs),
    /// Render a model to PNG.
    Render(RenderArgs),
    /// Fit a linear attribute direction to labeled codes.
    FitDirection(FitDirectionArgs),
    /// Move a code along an attribute direction.
    Traverse(TraverseArgs),
    /// Blend two codes.
    Interpolate(InterpolateArgs),
    /// PSNR, SSIM and MAE of predicted images against ground truth.
    Eval(EvalArgs),
    /// Serve the HTTP API over an artifact directory.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub res: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator settings (JSON); the flags above override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use only these view indices, comma-separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// Glob over fitted model files, e.g. `fits/*.json`.
    #[arg(long)]
    pub models: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write spread statistics of the inputs around the template.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDecoderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `codes.json` from a decoder directory.
    #[arg(long)]
    pub codes: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub decoder_dir: PathBuf,
    /// Refinement iterations against the input image.
    #[arg(long, default_value_t = 0)]
    pub refine: usize,
    /// Model JSON; the code is stored in its metadata.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub code_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub code: PathBuf,
    #[arg(long)]
    pub decoder_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    /// Background as `R,G,B` in [0, 1].
    #[arg(long, default_value = "1,1,1")]
    pub bg: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitDirectionArgs {
    /// `{id: code}` JSON, e.g. `codes.json` from a decoder directory.
    #[arg(long)]
    pub codes: PathBuf,
    /// `{id: ±1}` or `{id: {attribute: ±1}}`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    #[arg(long)]
    pub code: PathBuf,
    #[arg(long)]
    pub direction: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "AVATAR_ARTIFACT_DIR")]
    pub artifacts: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Concurrent refinement jobs.
    #[arg(long, default_value_t = 1)]
    pub refine_workers: usize,
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::FitSubject(a) => fit(a),
        Command::BuildTemplate(a) => template(a),
        Command::TrainDecoder(a) => decoder(a),
        Command::TrainEncoder(a) => encoder(a),
        Command::Infer(a) => infer(a),
        Command::Decode(a) => decode(a),
        Command::Render(a) => render(a),
        Command::FitDirection(a) => fit_direction(a),
        Command::Traverse(a) => traverse_cmd(a),
        Command::Interpolate(a) => interpolate_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn config<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> AppResult<C> {
    load_config(path).map_err(|e| AppError::from(e).with_field("config"))
}

fn select_views<T: Clone>(all: Vec<T>, picks: Option<&[usize]>) -> AppResult<Vec<T>> {
    let Some(picks) = picks else { return Ok(all) };
    picks
        .iter()
        .map(|&i| {
            all.get(i)
                .cloned()
                .ok_or_else(|| AppError::invalid("views", format!("view {i} out of range ({} views)", all.len())))
        })
        .collect()
}

fn load_dataset(dir: &Path) -> AppResult<DatasetManifest> {
    let m = DatasetManifest::load(dir).map_err(|e| AppError::from(e).with_field("data"))?;
    m.validate().map_err(|e| AppError::from(e).with_field("data"))?;
    Ok(m)
}

fn synth_data(a: SynthArgs) -> AppResult<()> {
    let mut cfg: SynthConfig = config(a.config.as_deref())?;
    if let Some(v) = a.views {
        cfg.n_views = v;
    }
    if let Some(r) = a.res {
        cfg.image_res = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    build_dataset(&a.out, a.subjects, &cfg)?;
    Ok(())
}

fn fit(a: FitArgs) -> AppResult<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg: FitConfig = config(a.config.as_deref())?;
    if let Some(n) = a.iters {
        cfg.iters = n;
    }
    cfg.background = data.global.background;
    let views = data.load_views::<f64>(&a.subject).map_err(|e| AppError::from(e).with_field("subject"))?;
    let views = select_views(views, a.views.as_deref())?;
    let init = init_from_landmarks(&data.load_landmarks::<f64>(&a.subject)?)?;
    let refs: Vec<View<f64>> = views.iter().map(|(image, camera)| View { image, camera }).collect();
    let out = fit_subject(&refs, &init, &cfg)?;
    save_model(&a.out, &out.model.with_metadata("subject_id", a.subject.as_str()))?;
    Ok(())
}

fn template(a: TemplateArgs) -> AppResult<()> {
    let paths = glob::glob(&a.models).map_err(|e| AppError::invalid("models", e.to_string()))?;
    let mut paths: Vec<PathBuf> = paths
        .collect::<Result<_, _>>()
        .map_err(|e| AppError::invalid("models", e.to_string()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::invalid("models", format!("no files match {}", a.models)));
    }
    let models: Vec<GaussianModel<f64>> = paths.iter().map(load_model).collect::<Result<_, _>>()?;
    let t = build_template(&models)?;
    if let Some(p) = &a.stats {
        write_json(p, &template_stats(&models, &t)?)?;
    }
    save_model(&a.out, &t)?;
    Ok(())
}

fn training_subjects(data: &DatasetManifest, views: Option<&[usize]>) -> AppResult<Vec<TrainSubject<f64>>> {
    data.subjects
        .iter()
        .map(|s| {
            Ok(TrainSubject {
                id: s.id.clone(),
                views: select_views(data.load_views(&s.id)?, views)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TrainLog {
    status: String,
    trace: Vec<f64>,
}

fn decoder(a: TrainDecoderArgs) -> AppResult<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg: DecoderConfig = config(a.config.as_deref())?;
    cfg.background = data.global.background;
    let template: GaussianModel<f64> = load_model(&a.template).map_err(|e| AppError::from(e).with_field("template"))?;
    let subjects = training_subjects(&data, a.views.as_deref())?;
    let out = train_decoder(&subjects, &template, &cfg)?;
    out.bundle.save(&a.out_dir)?;
    write_json(
        a.out_dir.join("train_log.json"),
        &TrainLog {
            status: format!("{:?}", out.status),
            trace: out.trace,
        },
    )?;
    Ok(())
}

fn encoder(a: TrainEncoderArgs) -> AppResult<()> {
    let data = load_dataset(&a.data)?;
    let cfg: EncoderConfig = config(a.config.as_deref())?;
    let codes: BTreeMap<String, Vec<f64>> = read_json(&a.codes).map_err(|e| AppError::from(e).with_field("codes"))?;
    let mut samples: Vec<(Image<f64>, String)> = Vec::new();
    for s in training_subjects(&data, a.views.as_deref())? {
        if codes.contains_key(&s.id) {
            samples.extend(s.views.into_iter().map(|(img, _)| (img, s.id.clone())));
        }
    }
    if samples.is_empty() {
        return Err(AppError::invalid("codes", "no dataset subject has a code"));
    }
    let out = train_encoder(&samples, &codes, &cfg)?;
    out.encoder.save(&a.out)?;
    Ok(())
}

fn load_bundle(dir: &Path) -> AppResult<DecoderBundle<f64>> {
    DecoderBundle::load(dir).map_err(|e| AppError::from(e).with_field("decoder-dir"))
}

fn infer(a: InferArgs) -> AppResult<()> {
    let image: Image<f64> = Image::load(&a.image).map_err(|e| AppError::from(e).with_field("image"))?;
    let cam = load_camera(&a.camera).map_err(|e| AppError::from(e).with_field("camera"))?;
    let encoder = Encoder::<f64>::load(&a.encoder).map_err(|e| AppError::from(e).with_field("encoder"))?;
    let bundle = load_bundle(&a.decoder_dir)?;
    let out = ops::infer(&image, &cam, &encoder, &bundle, a.refine)?;
    if let Some(p) = &a.code_out {
        write_code(p, &out.w)?;
    }
    let model = out.model.with_metadata("code", out.w.clone()).with_metadata("refine_iters", a.refine);
    save_model(&a.out, &model)?;
    Ok(())
}

fn decode(a: DecodeArgs) -> AppResult<()> {
    let bundle = load_bundle(&a.decoder_dir)?;
    let w = read_code(&a.code).map_err(|e| e.or_field("code"))?;
    let model = decode_model(&bundle, &w).map_err(|e| e.with_field("code"))?;
    save_model(&a.out, &model.with_metadata("code", w))?;
    Ok(())
}

fn render(a: RenderArgs) -> AppResult<()> {
    let bg = parse_background(&a.bg)?;
    let model: GaussianModel<f64> = load_model(&a.model).map_err(|e| AppError::from(e).with_field("model"))?;
    let cam = load_camera(&a.camera).map_err(|e| AppError::from(e).with_field("camera"))?;
    let png = ops::render_png(&model, &cam, bg)?;
    std::fs::write(&a.out, png).map_err(|e| AppError::invalid("out", format!("{}: {e}", a.out.display())))
}

fn fit_direction(a: FitDirectionArgs) -> AppResult<()> {
    let cfg: SvmConfig = config(a.config.as_deref())?;
    let codes: BTreeMap<String, Vec<f64>> = read_json(&a.codes).map_err(|e| AppError::from(e).with_field("codes"))?;
    let labels = ops::read_labels(&a.labels, &a.name)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (id, y) in &labels {
        if let Some(w) = codes.get(id) {
            xs.push(w.clone());
            ys.push(*y);
        }
    }
    let dir = fit_attribute_direction(&a.name, &xs, &ys, &cfg).map_err(|e| AppError::from(e).with_field("labels"))?;
    dir.save(&a.out)?;
    Ok(())
}

fn traverse_cmd(a: TraverseArgs) -> AppResult<()> {
    let w = read_code(&a.code).map_err(|e| e.or_field("code"))?;
    let dir = AttributeDirection::load(&a.direction).map_err(|e| AppError::from(e).with_field("direction"))?;
    check_code(&w, dir.n.len(), "code")?;
    let out = traverse(&w, &dir, a.lambda).map_err(|e| AppError::from(e).with_field("lambda"))?;
    write_code(&a.out, &out)
}

fn interpolate_cmd(a: InterpolateArgs) -> AppResult<()> {
    let w1 = read_code(&a.a).map_err(|e| e.or_field("a"))?;
    let w2 = read_code(&a.b).map_err(|e| e.or_field("b"))?;
    check_code(&w2, w1.len(), "b")?;
    let out = interpolate(&w1, &w2, a.alpha).map_err(|e| AppError::from(e).with_field("alpha"))?;
    write_code(&a.out, &out)
}

fn eval(a: EvalArgs) -> AppResult<()> {
    let report = ops::eval_dirs(&a.pred_dir, &a.gt_dir)?;
    Ok(write_json(&a.out, &report)?)
}

fn serve(a: ServeArgs) -> AppResult<()> {
    let artifacts = ops::Artifacts::load(&a.artifacts)?;
    let cfg = ServiceConfig {
        refine_workers: a.refine_workers.max(1),
        ..ServiceConfig::default()
    };
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::new(ErrorKind::Internal, e.to_string()))?;
    rt.block_on(service::serve(artifacts, cfg, &addr))
}
