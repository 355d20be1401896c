use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sand::data::{load_ndjson, Dataset};
use sand::encoder::{checkpoint, ModelConfig, SandModel};
use sand::heads::MultiTaskWeights;
use sand::kv::{exact, KvMap};
use sand::train::{stream_seed, train, TaskData, TrainConfig, TrainOutcome};

use crate::error::{CliError, CliResult};
use crate::io::{prepare_outputs, read_kv, require_file, write};
use crate::OutArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Flat `key = value` file with model, training and loss weight keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training split (single-task mode).
    #[arg(long, requires = "val", conflicts_with = "multi_task")]
    pub train: Option<PathBuf>,
    /// Validation split (single-task mode).
    #[arg(long, requires = "train")]
    pub val: Option<PathBuf>,
    /// One head per flag, as `NAME=TRAIN,VAL`. All tasks must hold the same
    /// samples; each loss is weighted by the λ of its head kind.
    #[arg(long, value_name = "NAME=TRAIN,VAL")]
    pub multi_task: Vec<String>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Disable gradient norm clipping.
    #[arg(long)]
    pub no_clip: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

/// A named head with its data.
#[derive(Debug, Clone)]
pub struct TaskInput {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug)]
pub struct TrainedRun {
    pub model: SandModel,
    pub outcome: TrainOutcome,
    /// Everything needed to rerun: the config as resolved.
    pub config: KvMap,
}

fn known_key(k: &str) -> bool {
    ModelConfig::is_known_key(k) || TrainConfig::is_known_key(k) || MultiTaskWeights::is_known_key(k)
}

/// Fills keys the data determines: input width, capacity and head kinds.
fn fill_from_data(kv: &mut KvMap, tasks: &[TaskInput]) -> CliResult<()> {
    let first = &tasks[0].train;
    if kv.get("input_dim").is_none() {
        kv.set("input_dim", first.input_dim);
    }
    if kv.get("t_max").is_none() {
        let t = tasks.iter().flat_map(|t| [t.train.max_len(), t.val.max_len()]).max().unwrap_or(1);
        kv.set("t_max", t.max(1));
    }
    let single = tasks.len() == 1 && kv.get("tasks").is_none();
    if single {
        if kv.get("head_kind").is_none() {
            kv.set("head_kind", first.task);
        }
        return Ok(());
    }
    match kv.get("tasks") {
        Some(list) => {
            let listed: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let given: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
            if listed != given {
                return Err(CliError::Usage(format!(
                    "config lists tasks {listed:?} but data was given for {given:?}"
                )));
            }
        }
        None => {
            let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
            kv.set("tasks", names.join(","));
        }
    }
    for t in tasks {
        let key = format!("task.{}.kind", t.name);
        if kv.get(&key).is_none() {
            kv.set(key, t.train.task);
        }
    }
    Ok(())
}

/// Builds and trains a model from a flat config. The config's `seed` is the
/// root seed; initialization, shuffling and dropout each draw a named
/// stream from it.
pub fn train_from_config(config: &KvMap, tasks: &[TaskInput]) -> CliResult<TrainedRun> {
    if tasks.is_empty() {
        return Err(CliError::Usage("no training data given".into()));
    }
    config.check_keys(known_key)?;
    let mut kv = config.clone();
    fill_from_data(&mut kv, tasks)?;
    let root: u64 = kv.parse_or("seed", 0)?;
    kv.set("seed", root);

    let mut model_cfg = ModelConfig::from_kv(&kv)?;
    model_cfg.seed = stream_seed(root, "init");
    let train_cfg = TrainConfig::from_kv(&kv)?;
    let weights = MultiTaskWeights::from_kv(&kv)?;
    let mut model = SandModel::new(model_cfg)?;

    let mut data = Vec::with_capacity(tasks.len());
    for t in tasks {
        let head = if tasks.len() == 1 {
            0
        } else {
            model.head_index(&t.name).ok_or_else(|| CliError::Usage(format!("no head named `{}`", t.name)))?
        };
        data.push(TaskData {
            head,
            train: &t.train,
            val: &t.val,
        });
    }
    let outcome = train(&mut model, &data, &train_cfg, &weights)?;

    let mut resolved = model.config().to_kv();
    resolved.set("seed", root);
    for (k, v) in train_cfg.to_kv().iter().chain(weights.to_kv().iter()) {
        if k != "seed" {
            resolved.set(k, v);
        }
    }
    Ok(TrainedRun {
        model,
        outcome,
        config: resolved,
    })
}

/// Best-epoch validation metrics as `task.metric = value`.
pub fn best_metrics(outcome: &TrainOutcome) -> KvMap {
    let mut kv = KvMap::new();
    match outcome.best() {
        Some(best) => {
            kv.set("best_epoch", best.epoch);
            kv.set("train_loss", exact(best.train_loss));
            for (name, r) in outcome.task_names.iter().zip(&best.val) {
                kv.set(format!("{name}.count"), r.count);
                for (m, v) in &r.values {
                    kv.set(format!("{name}.{m}"), exact(*v));
                }
            }
        }
        None => kv.set("best_epoch", "none"),
    }
    kv.set("epochs_run", outcome.history.len());
    kv.set("stopped_early", outcome.stopped_early);
    kv
}

pub fn summary(outcome: &TrainOutcome) -> String {
    let mut s = String::new();
    let Some(best) = outcome.best() else {
        return "no completed epoch\n".into();
    };
    let _ = writeln!(
        s,
        "best epoch {} of {}{}",
        best.epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    for (name, r) in outcome.task_names.iter().zip(&best.val) {
        let (metric, _) = sand::metrics::MetricsReport::headline_name(r.task);
        let _ = writeln!(s, "{name}: val {metric} = {:.4}", r.headline().unwrap_or(f64::NAN));
    }
    s
}

fn load(path: &Path) -> CliResult<Dataset> {
    require_file(path)?;
    Ok(load_ndjson(path)?)
}

fn task_inputs(args: &TrainArgs) -> CliResult<Vec<TaskInput>> {
    if !args.multi_task.is_empty() {
        return args
            .multi_task
            .iter()
            .map(|spec| {
                let (name, paths) = spec
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--multi-task expects NAME=TRAIN,VAL, got `{spec}`")))?;
                let (tr, va) = paths
                    .split_once(',')
                    .ok_or_else(|| CliError::Usage(format!("--multi-task expects NAME=TRAIN,VAL, got `{spec}`")))?;
                Ok(TaskInput {
                    name: name.trim().to_string(),
                    train: load(Path::new(tr.trim()))?,
                    val: load(Path::new(va.trim()))?,
                })
            })
            .collect();
    }
    match (&args.train, &args.val) {
        (Some(tr), Some(va)) => Ok(vec![TaskInput {
            name: "main".into(),
            train: load(tr)?,
            val: load(va)?,
        }]),
        _ => Err(CliError::Usage("give --train and --val, or --multi-task".into())),
    }
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut kv = match &args.config {
        Some(p) => read_kv(p)?,
        None => KvMap::new(),
    };
    if let Some(s) = args.seed {
        kv.set("seed", s);
    }
    if let Some(lr) = args.lr {
        kv.set("lr", exact(lr));
    }
    if let Some(e) = args.epochs {
        kv.set("epochs", e);
    }
    if let Some(b) = args.batch_size {
        kv.set("batch_size", b);
    }
    if let Some(p) = args.patience {
        kv.set("patience", p);
    }
    if args.no_clip {
        kv.set("clip_norm", 0);
    }
    let outputs = prepare_outputs(
        &args.out.out,
        &["model.ckpt", "history.csv", "config.kv", "metrics.kv"],
        args.out.force,
    )?;
    let tasks = task_inputs(args)?;
    let run = train_from_config(&kv, &tasks)?;

    checkpoint::save(&run.model, &outputs[0])?;
    write(&outputs[1], run.outcome.history_csv())?;
    write(&outputs[2], run.config.to_string())?;
    write(&outputs[3], best_metrics(&run.outcome).to_string())?;
    print!("{}", summary(&run.outcome));
    println!("wrote {}", args.out.out.display());
    match run.outcome.diverged {
        Some(why) => Err(CliError::Diverged(why)),
        None => Ok(()),
    }
}
