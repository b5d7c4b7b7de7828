use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::info;
use surgidepth::depthdata::{
    load_dataset, read_depth, read_manifest, resize, resize_depth, resize_image, save_dataset, synthetic_dataset,
    write_depth, DepthFormat, DepthMap, Primitive, SamplePair, MANIFEST_FILE,
};
use surgidepth::metrics::{evaluate_case, EvalResult, Scaling};
use surgidepth::model::{forward, init, load_checkpoint, save_checkpoint, ModelState};
use surgidepth::semisup::{
    generate_pseudo_labels, load_pseudo_labels, load_unlabeled, save_pseudo_labels, train_student_with_labels,
    PROVENANCE_FILE,
};
use surgidepth::train::{finetune, TrainLog};

use crate::config::{
    env_seed, parse_interleave, parse_size, read_file_config, read_toml, require, write_resolved, Command, EvalArgs,
    FileConfig, Merge, PerturbArgs, PseudoArgs, RenderArgs, StudentArgs, SynthArgs, TrainArgs,
};
use crate::render::render_colormap;
use crate::report::emit_report;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::TrainTeacher(a) => train(a, false),
        Command::Finetune(a) => train(a, true),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::TrainStudent(a) => train_student(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
    }
}

fn prepare_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    let out = require(out, "out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::data("prepare-output", format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn load_model(path: &Path) -> Result<ModelState> {
    load_checkpoint(path).map_err(|e| CliError::data("load-checkpoint", e))
}

fn load_samples(path: &Path, size: (usize, usize)) -> Result<Vec<SamplePair>> {
    let data = load_dataset(path).map_err(|e| CliError::data("load-data", e))?;
    data.iter()
        .map(|s| if s.shape() == size { Ok(s.clone()) } else { resize(s, size) })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::data("load-data", e))
}

fn save_outputs(out: &Path, state: &ModelState, log: &TrainLog) -> Result<()> {
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(state, &ckpt).map_err(|e| CliError::data("write-output", e))?;
    log.write_csv(out.join(TRAIN_LOG_FILE)).map_err(|e| CliError::data("write-output", e))?;
    info!("wrote {} (final loss {:?})", ckpt.display(), log.final_loss());
    Ok(())
}

fn synth(mut args: SynthArgs) -> Result<()> {
    args.merge(read_file_config(args.config.as_deref())?.synth.unwrap_or_default());
    let seed = env_seed(&mut args.seed)?;
    let n = *args.n.get_or_insert(32);
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let primitive = match args.primitive.get_or_insert_with(|| "mixed".into()).as_str() {
        "mixed" => None,
        p => Some(p.parse::<Primitive>().map_err(|e| CliError::usage(e.to_string()))?),
    };
    let size = parse_size(args.size.get_or_insert_with(|| "64x96".into()))?;
    let format = match args.depth_format.get_or_insert_with(|| "pfm".into()).as_str() {
        "pfm" => {
            args.depth_scale = None;
            DepthFormat::Pfm
        }
        "png16" => {
            let depth_scale = *args.depth_scale.get_or_insert(1e-4);
            if !(depth_scale > 0.0 && depth_scale.is_finite()) {
                return Err(CliError::usage("--depth-scale must be positive"));
            }
            DepthFormat::Png16 { depth_scale }
        }
        other => return Err(CliError::usage(format!("unknown depth format `{other}` (pfm|png16)"))),
    };
    let out = prepare_out(&args.out)?;
    write_resolved(&out, &FileConfig { synth: Some(args), ..Default::default() })?;
    let samples = synthetic_dataset(n, primitive, size, seed).map_err(|e| CliError::data("synthesize", e))?;
    save_dataset(&out, &samples, format).map_err(|e| CliError::data("write-output", e))?;
    info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train(mut args: TrainArgs, is_finetune: bool) -> Result<()> {
    let mut file = read_file_config(args.config.as_deref())?;
    let section = if is_finetune { file.finetune.take() } else { file.train_teacher.take() };
    args.merge(section.unwrap_or_default());
    if !is_finetune && (args.init.is_some() || args.frozen.is_some()) {
        return Err(CliError::usage("train-teacher starts from scratch; --init and --frozen belong to finetune"));
    }
    let seed = env_seed(&mut args.seed)?;
    let config = args.optim.resolve(seed)?;
    let fresh_config = match &args.init {
        Some(_) if !args.model.is_empty() => {
            return Err(CliError::usage("model shape flags cannot be combined with --init"));
        }
        Some(_) => None,
        None => Some(args.model.resolve()?),
    };
    let data_path = require(&args.data, "data")?.clone();
    let out = prepare_out(&args.out)?;
    let resolved = args.clone();
    write_resolved(
        &out,
        &if is_finetune {
            FileConfig { finetune: Some(resolved), ..Default::default() }
        } else {
            FileConfig { train_teacher: Some(resolved), ..Default::default() }
        },
    )?;

    let state = match (&args.init, fresh_config) {
        (Some(p), _) => load_model(p)?,
        (None, Some(c)) => init(&c, seed).map_err(|e| CliError::usage(e.to_string()))?,
        (None, None) => unreachable!("config resolved when no checkpoint is given"),
    };
    let frozen = args.frozen.as_deref().map(load_model).transpose()?;
    let data = load_samples(&data_path, state.config.input_size)?;
    info!("training on {} samples for {} steps", data.len(), config.max_steps);
    let (trained, log) = finetune(&state, &data, &config, frozen.as_ref()).map_err(|e| CliError::train("train", e))?;
    save_outputs(&out, &trained, &log)
}

fn unlabeled_images(dir: &Path, size: (usize, usize)) -> Result<Vec<(String, surgidepth::depthdata::RgbImage)>> {
    let images = load_unlabeled(dir).map_err(|e| CliError::semisup("load-data", e))?;
    images
        .into_iter()
        .map(|(id, img)| {
            let img = if img.shape() == size { img } else { resize_image(&img, size)? };
            Ok((id, img))
        })
        .collect::<std::result::Result<_, surgidepth::depthdata::DataError>>()
        .map_err(|e| CliError::data("load-data", e))
}

fn pseudo_label(mut args: PseudoArgs) -> Result<()> {
    args.merge(read_file_config(args.config.as_deref())?.pseudo_label.unwrap_or_default());
    let teacher_path = require(&args.teacher, "teacher")?.clone();
    let images_path = require(&args.images, "images")?.clone();
    let out = prepare_out(&args.out)?;
    write_resolved(&out, &FileConfig { pseudo_label: Some(args), ..Default::default() })?;
    let teacher = load_model(&teacher_path)?;
    let images = unlabeled_images(&images_path, teacher.config.input_size)?;
    let set = generate_pseudo_labels(&teacher, &images).map_err(|e| CliError::semisup("pseudo-label", e))?;
    save_pseudo_labels(&set, &out, None).map_err(|e| CliError::semisup("write-output", e))?;
    info!("labeled {} images with teacher {}", set.entries.len(), set.teacher_checkpoint_id);
    Ok(())
}

fn train_student(mut args: StudentArgs) -> Result<()> {
    args.merge(read_file_config(args.config.as_deref())?.train_student.unwrap_or_default());
    if let Some(path) = &args.spec {
        args.perturb.merge(read_toml::<PerturbArgs>(path)?);
    }
    let seed = env_seed(&mut args.seed)?;
    let spec = args.perturb.resolve(seed)?;
    let config = args.optim.resolve(seed)?;
    let interleave = parse_interleave(args.interleave.get_or_insert_with(|| "1:1".into()))?;
    let teacher_path = require(&args.teacher, "teacher")?.clone();
    let labeled_path = require(&args.labeled, "labeled")?.clone();
    let unlabeled_path = require(&args.unlabeled, "unlabeled")?.clone();
    let out = prepare_out(&args.out)?;
    write_resolved(&out, &FileConfig { train_student: Some(args), ..Default::default() })?;

    let teacher = load_model(&teacher_path)?;
    let size = teacher.config.input_size;
    let labeled = load_samples(&labeled_path, size)?;
    let pseudo = if unlabeled_path.join(PROVENANCE_FILE).exists() {
        load_pseudo_labels(&unlabeled_path).map_err(|e| CliError::semisup("load-data", e))?
    } else {
        let images = unlabeled_images(&unlabeled_path, size)?;
        generate_pseudo_labels(&teacher, &images).map_err(|e| CliError::semisup("pseudo-label", e))?
    };
    info!("student: {} labeled, {} unlabeled, {} steps", labeled.len(), pseudo.entries.len(), config.max_steps);
    let (student, log) = train_student_with_labels(&teacher, &labeled, &pseudo, &spec, &config, interleave)
        .map_err(|e| CliError::semisup("train", e))?;
    save_outputs(&out, &student, &log)
}

fn dir_label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Predictions stored as a dataset (manifest) or as loose `<id>.pfm` /
/// `<id>.png` files.
struct PredDir {
    root: PathBuf,
    manifest: Option<HashMap<String, (String, f64)>>,
    scale: f64,
}

impl PredDir {
    fn open(root: &Path, scale: f64) -> Result<Self> {
        let manifest = if root.join(MANIFEST_FILE).exists() {
            let m = read_manifest(root).map_err(|e| CliError::data("load-predictions", e))?;
            Some(m.entries.into_iter().map(|e| (e.id, (e.depth_path, e.depth_scale))).collect())
        } else if root.is_dir() {
            None
        } else {
            return Err(CliError::data("load-predictions", format!("{} is not a directory", root.display())));
        };
        Ok(Self { root: root.to_path_buf(), manifest, scale })
    }

    fn load(&self, id: &str) -> Result<DepthMap> {
        let (path, scale) = match &self.manifest {
            Some(m) => {
                let (p, s) = m.get(id).ok_or_else(|| {
                    CliError::data("load-predictions", format!("{} has no prediction for `{id}`", self.root.display()))
                })?;
                (self.root.join(p), *s)
            }
            None => {
                let pfm = self.root.join(format!("{id}.pfm"));
                let png = self.root.join(format!("{id}.png"));
                (if pfm.exists() || !png.exists() { pfm } else { png }, self.scale)
            }
        };
        read_depth(&path, scale).map_err(|e| CliError::data("load-predictions", e))
    }
}

fn fit_to(pred: DepthMap, shape: (usize, usize)) -> Result<DepthMap> {
    if pred.shape() == shape {
        return Ok(pred);
    }
    resize_depth(&pred, shape).map_err(|e| CliError::data("load-predictions", e))
}

fn eval(mut args: EvalArgs) -> Result<()> {
    args.merge(read_file_config(args.config.as_deref())?.eval.unwrap_or_default());
    if args.gt.is_empty() {
        return Err(CliError::usage("missing required --gt"));
    }
    if args.pred.is_empty() && args.model.is_empty() {
        return Err(CliError::usage("give at least one --pred or --model"));
    }
    if args.case.is_empty() {
        args.case = args.gt.iter().map(|p| dir_label(p)).collect();
    } else if args.case.len() != args.gt.len() {
        return Err(CliError::usage("--case must be given once per --gt"));
    }
    let n_methods = args.pred.len() + args.model.len();
    if args.method.is_empty() {
        args.method = args.pred.iter().chain(&args.model).map(|p| dir_label(p)).collect();
    } else if args.method.len() != n_methods {
        return Err(CliError::usage("--method must be given once per --pred and --model"));
    }
    let scaling: Scaling = args
        .scaling
        .get_or_insert_with(|| Scaling::default().to_string())
        .parse()
        .map_err(CliError::Usage)?;
    let pred_scale = *args.pred_scale.get_or_insert(1.0);
    let save_pred = *args.save_pred.get_or_insert(false);
    let out = prepare_out(&args.out)?;
    write_resolved(&out, &FileConfig { eval: Some(args.clone()), ..Default::default() })?;

    let pred_dirs = args.pred.iter().map(|p| PredDir::open(p, pred_scale)).collect::<Result<Vec<_>>>()?;
    let models = args.model.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let mut results: Vec<(String, EvalResult)> = Vec::new();
    for (gt_path, case) in args.gt.iter().zip(&args.case) {
        let gt = load_dataset(gt_path).map_err(|e| CliError::data("load-data", e))?;
        let ids: Vec<String> = gt.iter().map(|s| s.id.clone()).collect();
        let gts: Vec<DepthMap> = gt.iter().map(|s| s.depth.clone()).collect();
        for (method, dir) in args.method.iter().zip(&pred_dirs) {
            let preds = gt
                .iter()
                .map(|s| fit_to(dir.load(&s.id)?, s.shape()))
                .collect::<Result<Vec<_>>>()?;
            let r = evaluate_case(case, &ids, &preds, &gts, scaling).map_err(|e| CliError::metric("evaluate", e))?;
            results.push((method.clone(), r));
        }
        for (method, model) in args.method[pred_dirs.len()..].iter().zip(&models) {
            let mut preds = Vec::with_capacity(gt.len());
            for s in &gt {
                let image = if s.shape() == model.config.input_size {
                    s.image.clone()
                } else {
                    resize_image(&s.image, model.config.input_size).map_err(|e| CliError::data("predict", e))?
                };
                let raw = forward(model, &image).map_err(|e| CliError::data("predict", format!("`{}`: {e}", s.id)))?;
                let pred = fit_to(raw, s.shape())?;
                if save_pred {
                    let dir = out.join("pred").join(method);
                    std::fs::create_dir_all(&dir).map_err(|e| CliError::data("write-output", e))?;
                    write_depth(&pred, dir.join(format!("{}.pfm", s.id)), DepthFormat::Pfm)
                        .map_err(|e| CliError::data("write-output", e))?;
                }
                preds.push(pred);
            }
            let r = evaluate_case(case, &ids, &preds, &gts, scaling).map_err(|e| CliError::metric("evaluate", e))?;
            results.push((method.clone(), r));
        }
    }
    let doc = emit_report(&results, &out).map_err(|e| CliError::data("write-report", e))?;
    print!("{}", doc.table);
    Ok(())
}

fn render(mut args: RenderArgs) -> Result<()> {
    args.merge(read_file_config(args.config.as_deref())?.render.unwrap_or_default());
    let scale = *args.scale.get_or_insert(1.0);
    let depth_path = require(&args.depth, "depth")?.clone();
    let out = prepare_out(&args.out)?;
    write_resolved(&out, &FileConfig { render: Some(args), ..Default::default() })?;
    let files = if depth_path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&depth_path)
            .map_err(|e| CliError::data("load-data", format!("{}: {e}", depth_path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pfm" || x == "png"))
            .collect();
        files.sort();
        files
    } else {
        vec![depth_path]
    };
    if files.is_empty() {
        return Err(CliError::data("load-data", "no .pfm or .png depth files found"));
    }
    for f in files {
        let depth = read_depth(&f, scale).map_err(|e| CliError::data("load-data", e))?;
        let target = out.join(format!("{}.png", dir_label(&f)));
        render_colormap(&depth, &target).map_err(|e| CliError::data("render", format!("{}: {e}", f.display())))?;
    }
    Ok(())
}
