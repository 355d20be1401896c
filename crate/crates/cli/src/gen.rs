use std::fmt::Write as _;

use sand::data::{generate, step_labels_from, write_csv, write_ndjson, GenSpec, Generator, Splits};
use sand::train::stream_seed;

use crate::error::{CliError, CliResult};
use crate::io::{prepare_outputs, write};
use crate::OutArgs;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, clap::Args)]
pub struct GenArgs {
    /// Generator: windowed-binary, long-range, step-binary or length-of-stay.
    #[arg(long, value_parser = parse_generator)]
    pub task: Generator,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Longest sequence length.
    #[arg(long = "len", default_value_t = 48)]
    pub len: usize,
    /// Shortest sequence length (defaults to --len).
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Measured variables per step.
    #[arg(long, default_value_t = 8)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target positive rate of the thresholded generators.
    #[arg(long, default_value_t = 0.5)]
    pub skew: f64,
    /// Trailing window of windowed-binary.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Label count of long-range.
    #[arg(long, default_value_t = 3)]
    pub labels: usize,
    /// 1-based motif step of long-range.
    #[arg(long, default_value_t = 1)]
    pub motif_pos: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.15, 0.15])]
    pub splits: Vec<f64>,
    /// Also write `<split>.steps.ndjson` with per-step labels derived from
    /// this input channel, for multi-task runs on shared inputs.
    #[arg(long, value_name = "CHANNEL")]
    pub step_labels_from: Option<usize>,
    /// Also write each split as CSV.
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Generator::ALL.iter().map(|g| g.name()).collect();
        format!("unknown task `{s}` (expected one of {})", names.join(", "))
    })
}

impl GenArgs {
    pub fn spec(&self) -> CliResult<GenSpec> {
        let splits: [f64; 3] = self
            .splits
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Usage("--splits takes three fractions".into()))?;
        let mut spec = GenSpec::new(self.task, self.n, self.len, self.input_dim, stream_seed(self.seed, "data"));
        spec.min_len = self.min_len.unwrap_or(self.len);
        spec.skew = self.skew;
        spec.window = self.window;
        spec.labels = self.labels;
        spec.motif_pos = self.motif_pos;
        spec.splits = splits;
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-split sample counts, one row per split.
pub fn count_table(title: &str, counts: [usize; 3]) -> String {
    let mut s = format!("{title}\n{:<8}{:>10}\n", "split", "samples");
    for (name, c) in SPLITS.iter().zip(counts) {
        let _ = writeln!(s, "{name:<8}{c:>10}");
    }
    let _ = writeln!(s, "{:<8}{:>10}", "total", counts.iter().sum::<usize>());
    s
}

pub fn run(args: &GenArgs) -> CliResult<()> {
    let spec = args.spec()?;
    let mut names: Vec<String> = SPLITS.iter().map(|s| format!("{s}.ndjson")).collect();
    if args.step_labels_from.is_some() {
        names.extend(SPLITS.iter().map(|s| format!("{s}.steps.ndjson")));
    }
    if args.csv {
        names.extend(SPLITS.iter().map(|s| format!("{s}.csv")));
    }
    names.push("manifest.kv".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let paths = prepare_outputs(&args.out.out, &refs, args.out.force)?;

    let (ds, manifest) = generate(&spec)?;
    let splits = Splits::from_counts(&ds, manifest.counts);
    let parts = [&splits.train, &splits.val, &splits.test];
    let mut next = paths.iter();
    for part in parts {
        write_ndjson(part, next.next().expect("path per output"))?;
    }
    if let Some(channel) = args.step_labels_from {
        for part in parts {
            let steps = step_labels_from(part, channel, spec.skew)?;
            write_ndjson(&steps, next.next().expect("path per output"))?;
        }
    }
    if args.csv {
        for part in parts {
            write_csv(part, next.next().expect("path per output"))?;
        }
    }
    let mut text = format!("# sand gen --task {} --seed {}\n", spec.generator, args.seed);
    if let Some(c) = args.step_labels_from {
        let _ = writeln!(text, "# step labels from channel {c}");
    }
    text.push_str(&manifest.to_kv().to_string());
    write(next.next().expect("path per output"), text)?;

    let title = format!(
        "{} ({}), T={}, R={}, seed={}",
        spec.generator,
        spec.task(),
        spec.len,
        spec.input_dim,
        args.seed
    );
    print!("{}", count_table(&title, manifest.counts));
    println!("class balance {:.4}", manifest.class_balance);
    println!("wrote {}", args.out.out.display());
    Ok(())
}
