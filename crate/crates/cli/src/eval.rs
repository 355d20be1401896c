use std::path::PathBuf;

use sand::data::load_ndjson;
use sand::encoder::checkpoint;
use sand::metrics::MetricsReport;
use sand::train::evaluate;

use crate::error::{CliError, CliResult};
use crate::io::{prepare_outputs, require_file, write};
use crate::OutArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// NDJSON dataset to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Head to evaluate; the first head by default.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Scores `head` of the checkpoint on the dataset at `data`.
pub fn eval_files(args: &EvalArgs) -> CliResult<(String, MetricsReport)> {
    require_file(&args.checkpoint)?;
    require_file(&args.data)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let ds = load_ndjson(&args.data)?;
    let index = match &args.head {
        Some(name) => model
            .head_index(name)
            .ok_or_else(|| CliError::Usage(format!("checkpoint has no head named `{name}`")))?,
        None => 0,
    };
    let spec = &model.heads()[index].spec;
    if spec.kind != ds.task {
        return Err(sand::Error::Label(format!(
            "head `{}` predicts {} but {} holds {} labels",
            spec.name,
            spec.kind,
            args.data.display(),
            ds.task
        ))
        .into());
    }
    let name = spec.name.clone();
    let report = evaluate(&model, index, &ds, args.batch.max(1))?;
    Ok((name, report))
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let (name, report) = eval_files(args)?;
    let file = format!("eval.{name}.kv");
    let path = prepare_outputs(&args.out.out, &[&file], args.out.force)?.remove(0);
    let text = report.to_kv().to_string();
    write(&path, &text)?;
    print!("{text}");
    println!("wrote {}", path.display());
    Ok(())
}
