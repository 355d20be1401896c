use std::fmt::Write as _;
use std::path::PathBuf;

use sand::data::load_ndjson;
use sand::kv::{exact, KvMap};
use sand::metrics::MetricsReport;

use crate::error::{CliError, CliResult};
use crate::io::{prepare_outputs, read_kv, require_file, write};
use crate::train::{train_from_config, TaskInput};
use crate::OutArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct SweepArgs {
    /// Base config; grid values override its `layers`, `interp_factor` and
    /// `mask_window`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Attention module counts `N`.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    pub layers: Vec<usize>,
    /// Interpolation factors `M`.
    #[arg(long, value_delimiter = ',', default_values_t = [6usize, 12])]
    pub interp: Vec<usize>,
    /// Mask windows `r`.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize])]
    pub windows: Vec<usize>,
    /// Most training runs to perform; the grid is truncated beyond it.
    #[arg(long, default_value_t = 64)]
    pub max_runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub layers: usize,
    pub interp: usize,
    pub window: usize,
    pub metric: String,
    pub value: f64,
    pub best_epoch: Option<usize>,
}

pub const CSV_HEADER: &str = "N,M,r,metric,value,best_epoch";

/// Grid points in `N`, then `M`, then `r` order, cut to `max_runs`. The
/// flag is set when points were dropped.
pub fn grid(layers: &[usize], interp: &[usize], windows: &[usize], max_runs: usize) -> (Vec<[usize; 3]>, bool) {
    let mut points = Vec::new();
    for &n in layers {
        for &m in interp {
            for &r in windows {
                points.push([n, m, r]);
            }
        }
    }
    let truncated = points.len() > max_runs;
    points.truncate(max_runs);
    (points, truncated)
}

pub fn sweep(base: &KvMap, task: &TaskInput, points: &[[usize; 3]]) -> CliResult<Vec<SweepRow>> {
    points
        .iter()
        .map(|&[n, m, r]| {
            let mut kv = base.clone();
            kv.set("layers", n);
            kv.set("interp_factor", m);
            kv.set("mask_window", r);
            let run = train_from_config(&kv, std::slice::from_ref(task))?;
            let (metric, value) = match run.outcome.best() {
                Some(best) => {
                    let report = &best.val[0];
                    let (name, _) = MetricsReport::headline_name(report.task);
                    (name.to_string(), report.headline().unwrap_or(f64::NAN))
                }
                None => ("none".to_string(), f64::NAN),
            };
            Ok(SweepRow {
                layers: n,
                interp: m,
                window: r,
                metric,
                value,
                best_epoch: run.outcome.best_epoch,
            })
        })
        .collect()
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for row in rows {
        let epoch = row.best_epoch.map_or_else(String::new, |e| e.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{epoch}",
            row.layers,
            row.interp,
            row.window,
            row.metric,
            exact(row.value)
        );
    }
    s
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    let mut base = match &args.config {
        Some(p) => read_kv(p)?,
        None => KvMap::new(),
    };
    if let Some(s) = args.seed {
        base.set("seed", s);
    }
    if base.get("tasks").is_some() {
        return Err(CliError::Usage("sweep trains a single head; drop `tasks` from the config".into()));
    }
    let path = prepare_outputs(&args.out.out, &["sweep.csv"], args.out.force)?.remove(0);
    require_file(&args.train)?;
    require_file(&args.val)?;
    let task = TaskInput {
        name: "main".into(),
        train: load_ndjson(&args.train)?,
        val: load_ndjson(&args.val)?,
    };
    let (points, truncated) = grid(&args.layers, &args.interp, &args.windows, args.max_runs);
    if truncated {
        eprintln!(
            "warning: grid has {} points, running only the first {} (--max-runs)",
            args.layers.len() * args.interp.len() * args.windows.len(),
            points.len()
        );
    }
    let csv = to_csv(&sweep(&base, &task, &points)?);
    write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}
