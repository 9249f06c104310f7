//! The work behind each subcommand, callable without a process boundary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use erasing_core::attention::attention_maps;
use erasing_core::checkpoint::Checkpoint;
use erasing_core::datasets::{export_dataset, Dataset, SyntheticDataset, VocDataset, VOC_CLASSES};
use erasing_core::metrics::{ConfusionMatrix, MetricsReport};
use erasing_core::nn::ConvNet;
use erasing_core::pipeline::{evaluate_dataset, predict_segmentation};
use erasing_core::segmentation::{read_manifest, read_mask, segment_with_label, write_manifest, write_mask};
use erasing_core::training::{train, TrainEvent};
use erasing_core::visualize::panel_sheet;

use crate::config::{ConfigError, DatasetKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] erasing_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(_) | CliError::Io { .. } => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn mkdir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io(path))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(CliError::Usage(format!("split must be train or eval, got `{s}`"))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

pub fn class_names(cfg: &RunConfig) -> Vec<String> {
    match cfg.dataset {
        DatasetKind::Synthetic => (0..cfg.synth.class_count).map(|c| format!("shape{c}")).collect(),
        DatasetKind::Voc => VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Synthetic evaluation images follow the training indices, so the two
/// splits never share an image.
pub fn open_split(cfg: &RunConfig, split: Split) -> CliResult<Box<dyn Dataset>> {
    Ok(match cfg.dataset {
        DatasetKind::Synthetic => {
            let (start, count) = match split {
                Split::Train => (0, cfg.synth_train_count),
                Split::Eval => (cfg.synth_train_count as u64, cfg.synth_eval_count),
            };
            Box::new(SyntheticDataset::new(cfg.synth.clone(), start, count)?)
        }
        DatasetKind::Voc => {
            let root = cfg.voc_root.as_ref().expect("validated config has voc_root");
            let name = match split {
                Split::Train => &cfg.train_split,
                Split::Eval => &cfg.eval_split,
            };
            Box::new(VocDataset::open(root, name)?)
        }
    })
}

fn initial_networks(cfg: &RunConfig) -> CliResult<(ConvNet, ConvNet)> {
    let seed = cfg.hp.seed;
    let localizer = match &cfg.localizer_weights {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.localizer.config.classes != cfg.class_count() {
                return Err(ConfigError {
                    key: "localizer_weights".into(),
                    reason: format!(
                        "checkpoint has {} classes, dataset has {}",
                        ck.localizer.config.classes,
                        cfg.class_count()
                    ),
                }
                .into());
            }
            ck.localizer
        }
        None => ConvNet::new(cfg.localizer_config(), seed)?,
    };
    let adversarial = ConvNet::new(cfg.adversarial_config(), seed.wrapping_add(1))?;
    Ok((localizer, adversarial))
}

pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.localizer.config.classes != cfg.class_count() {
        return Err(CliError::Core(erasing_core::Error::InvalidArgument(format!(
            "checkpoint {} has {} classes but the dataset has {}",
            path.display(),
            ck.localizer.config.classes,
            cfg.class_count()
        ))));
    }
    Ok(ck)
}

/// Options for turning a split into masks.
pub struct SegOptions<'a> {
    pub out_dir: &'a Path,
    /// Use image-level labels; otherwise gate classes by predicted score.
    pub labeled: bool,
    /// Also keep the feature-resolution maps (labeled mode only).
    pub save_attention: bool,
}

pub struct SegOutcome {
    pub count: usize,
    pub confusion: Option<ConfusionMatrix>,
}

/// Write `masks/<id>.png` and `manifest.txt` under `opts.out_dir`, plus raw
/// attention maps when asked; scores against ground truth when every image
/// has it.
pub fn segment_split(
    localizer: &ConvNet,
    ds: &dyn Dataset,
    cfg: &RunConfig,
    opts: &SegOptions<'_>,
) -> CliResult<SegOutcome> {
    let masks_dir = opts.out_dir.join("masks");
    mkdir(&masks_dir)?;
    let attn_dir = opts.out_dir.join("attention");
    if opts.save_attention {
        mkdir(&attn_dir)?;
    }
    let mut cm = Some(ConfusionMatrix::new(localizer.config.classes));
    let mut entries = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let img = ds.get(i)?;
        let mask = if opts.labeled {
            let maps = attention_maps(localizer, &img, &img.label.positives(), cfg.attention)?;
            if opts.save_attention {
                for m in &maps {
                    m.save_raw(attn_dir.join(format!("{}_{}.attn", img.id, m.class_id)))?;
                }
            }
            segment_with_label(&maps, &img.label, img.height(), img.width(), cfg.hp.rho)?
        } else {
            predict_segmentation(localizer, &img, cfg.attention, cfg.hp.rho, cfg.score_threshold)?
        };
        let rel = PathBuf::from("masks").join(format!("{}.png", img.id));
        write_mask(&mask, opts.out_dir.join(&rel))?;
        match (ds.ground_truth(i)?, cm.as_mut()) {
            (Some(gt), Some(m)) => m.accumulate(&mask, &gt)?,
            _ => cm = None,
        }
        entries.push((img.id, rel));
    }
    write_manifest(opts.out_dir.join("manifest.txt"), &entries)?;
    Ok(SegOutcome {
        count: entries.len(),
        confusion: cm,
    })
}

pub fn write_report(report: &MetricsReport, dir: &Path) -> CliResult<()> {
    write_text(&dir.join("report.txt"), &report.to_table())?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    write_text(&dir.join("report.json"), &(json + "\n"))
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub report: Option<MetricsReport>,
    pub steps: usize,
}

/// Train, checkpoint, then segment and score the evaluation split.
///
/// Files under `out`: `config.cfg`, `train.log`, `checkpoints/step_*.json`,
/// `checkpoint.json`, `eval.log` (with `eval_every`), `seg_eval/` and
/// `report.{txt,json}` when ground truth exists.
pub fn run_train(cfg: &RunConfig, out: &Path, progress: bool) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    mkdir(out)?;
    write_text(&out.join("config.cfg"), &cfg.to_text())?;
    let names = class_names(cfg);
    let train_ds = open_split(cfg, Split::Train)?;
    let eval_ds = open_split(cfg, Split::Eval)?;
    let (localizer, adversarial) = initial_networks(cfg)?;
    let ck_dir = out.join("checkpoints");
    mkdir(&ck_dir)?;
    let log_path = out.join("train.log");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io(&log_path))?);
    let eval_path = out.join("eval.log");
    let mut eval_log = if cfg.eval_every > 0 {
        Some(BufWriter::new(fs::File::create(&eval_path).map_err(io(&eval_path))?))
    } else {
        None
    };
    let hp = cfg.hyperparams();
    let total = hp.total_steps(train_ds.len());
    let checkpoint_every = (cfg.checkpoint_every > 0).then_some(cfg.checkpoint_every);
    let state = train(
        train_ds.as_ref(),
        &hp,
        localizer,
        adversarial,
        checkpoint_every,
        |event| {
            match event {
                TrainEvent::Step(entry, state) => {
                    writeln!(log, "{}", entry.log_line()).map_err(|e| erasing_core::Error::Io {
                        path: log_path.clone(),
                        source: e,
                    })?;
                    if progress && (entry.step + 1) % 50 == 0 {
                        eprintln!("step {}/{total} {}", entry.step + 1, entry.log_line());
                    }
                    if let Some(f) = eval_log.as_mut() {
                        if state.step % cfg.eval_every == 0 {
                            let cm = evaluate_dataset(
                                &state.localizer,
                                eval_ds.as_ref(),
                                cfg.attention,
                                hp.rho,
                            )?;
                            let (p, r) = cm.precision_recall();
                            writeln!(f, "step={} miou={:.6} precision={:.6} recall={:.6}", state.step, cm.mean_iou(), p, r)
                                .map_err(|e| erasing_core::Error::Io {
                                    path: eval_path.clone(),
                                    source: e,
                                })?;
                        }
                    }
                }
                TrainEvent::Checkpoint(state) => {
                    Checkpoint::from_state(state, names.clone())
                        .save(ck_dir.join(format!("step_{:06}.json", state.step)))?;
                }
            }
            Ok(())
        },
    )?;
    log.flush().map_err(io(&log_path))?;
    if let Some(mut f) = eval_log {
        f.flush().map_err(io(&eval_path))?;
    }
    let final_checkpoint = out.join("checkpoint.json");
    Checkpoint::from_state(&state, names.clone()).save(&final_checkpoint)?;

    let seg = segment_split(
        &state.localizer,
        eval_ds.as_ref(),
        cfg,
        &SegOptions {
            out_dir: &out.join("seg_eval"),
            labeled: true,
            save_attention: true,
        },
    )?;
    let report = seg.confusion.map(|cm| cm.report(&names));
    if let Some(r) = &report {
        write_report(r, out)?;
    }
    Ok(TrainOutcome {
        final_checkpoint,
        report,
        steps: state.step,
    })
}

pub fn run_make_seg(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    labeled: bool,
    out: &Path,
) -> CliResult<SegOutcome> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint, cfg)?;
    let ds = open_split(cfg, split)?;
    let seg = segment_split(
        &ck.localizer,
        ds.as_ref(),
        cfg,
        &SegOptions {
            out_dir: out,
            labeled,
            save_attention: false,
        },
    )?;
    if let Some(cm) = &seg.confusion {
        write_report(&cm.report(&ck.class_names), out)?;
    }
    Ok(seg)
}

/// Score a prediction manifest against `gt_root/masks/<id>.png`.
pub fn run_evaluate(
    manifest: &Path,
    gt_root: &Path,
    class_names: &[String],
    out: &Path,
) -> CliResult<MetricsReport> {
    let entries = read_manifest(manifest)?;
    let mut cm = ConfusionMatrix::new(class_names.len());
    for (id, pred_path) in &entries {
        let pred = read_mask(pred_path, class_names.len())?;
        let gt_path = gt_root.join("masks").join(format!("{id}.png"));
        if !gt_path.is_file() {
            return Err(CliError::Io {
                path: gt_path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "ground-truth mask missing"),
            });
        }
        let gt = read_mask(&gt_path, class_names.len())?;
        cm.accumulate(&pred, &gt)?;
    }
    let report = cm.report(class_names);
    mkdir(out)?;
    write_report(&report, out)?;
    Ok(report)
}

pub fn run_visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    ids: &[String],
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint, cfg)?;
    let ds = open_split(cfg, split)?;
    mkdir(out)?;
    let mut remaining: Vec<&String> = ids.iter().collect();
    let mut written = Vec::new();
    for i in 0..ds.len() {
        if remaining.is_empty() {
            break;
        }
        let img = ds.get(i)?;
        let Some(pos) = remaining.iter().position(|id| **id == img.id) else {
            continue;
        };
        remaining.swap_remove(pos);
        let sheet = panel_sheet(&ck.localizer, &img, cfg.attention, cfg.hp.omega, cfg.hp.psi)?;
        let path = out.join(format!("{}.png", img.id));
        sheet.save(&path).map_err(erasing_core::Error::from)?;
        written.push(path);
    }
    if let Some(id) = remaining.first() {
        return Err(CliError::Core(erasing_core::Error::InvalidArgument(format!(
            "no image `{id}` in the {} split",
            split.name()
        ))));
    }
    Ok(written)
}

pub fn run_export(cfg: &RunConfig, split: Split, dest: &Path) -> CliResult<usize> {
    cfg.validate()?;
    let ds = open_split(cfg, split)?;
    Ok(export_dataset(ds.as_ref(), dest, split.name())?)
}
