use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sand::encoder::{Forward, ModelConfig, SandModel};
use sand::{Tape, Tensor};

use crate::error::{CliError, CliResult};
use crate::io::{prepare_outputs, write};
use crate::OutArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct BenchArgs {
    /// Sequence lengths.
    #[arg(long = "t", value_delimiter = ',', default_values_t = [256usize, 512])]
    pub t: Vec<usize>,
    /// Mask windows.
    #[arg(long = "r", value_delimiter = ',', default_values_t = [16usize])]
    pub r: Vec<usize>,
    /// Model widths.
    #[arg(long = "d", value_delimiter = ',', default_values_t = [64usize])]
    pub d: Vec<usize>,
    /// Layer counts.
    #[arg(long = "n", value_delimiter = ',', default_values_t = [1usize])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Timed repetitions per configuration; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Attend over the whole sequence with no mask (quadratic in T).
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchPoint {
    pub t: usize,
    pub r: usize,
    pub d: usize,
    pub n: usize,
    pub median_ms: f64,
}

pub const CSV_HEADER: &str = "T,r,d,N,median_ms";

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Median wall-clock milliseconds of one encoder forward plus backward pass
/// over a `batch × t × input_dim` input. One untimed pass runs first.
#[allow(clippy::too_many_arguments)]
pub fn time_encoder(
    t: usize,
    r: usize,
    d: usize,
    n: usize,
    heads: usize,
    input_dim: usize,
    batch: usize,
    masked: bool,
    repeats: usize,
    seed: u64,
) -> CliResult<f64> {
    if repeats == 0 || batch == 0 {
        return Err(CliError::Usage("repeats and batch must be >= 1".into()));
    }
    let model = SandModel::new(ModelConfig {
        input_dim,
        d_model: d,
        layers: n,
        heads,
        mask_window: r,
        masked,
        t_max: t,
        seed,
        ..ModelConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(
        vec![batch, t, input_dim],
        (0..batch * t * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let pass = || -> CliResult<f64> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = model.encode(&mut tape, &bound, &x, &mut Forward::eval())?;
        let loss = tape.sum(enc.output);
        tape.backward(loss)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    pass()?;
    let times = (0..repeats).map(|_| pass()).collect::<CliResult<Vec<f64>>>()?;
    Ok(median(times))
}

pub fn bench(args: &BenchArgs) -> CliResult<Vec<BenchPoint>> {
    let mut points = Vec::new();
    for &n in &args.n {
        for &d in &args.d {
            for &r in &args.r {
                for &t in &args.t {
                    let median_ms = time_encoder(
                        t,
                        r,
                        d,
                        n,
                        args.heads,
                        args.input_dim,
                        args.batch,
                        !args.no_mask,
                        args.repeats,
                        args.seed,
                    )?;
                    points.push(BenchPoint { t, r, d, n, median_ms });
                }
            }
        }
    }
    Ok(points)
}

pub fn to_csv(points: &[BenchPoint]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{:.4}", p.t, p.r, p.d, p.n, p.median_ms);
    }
    s
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    let name = if args.no_mask { "bench-nomask.csv" } else { "bench.csv" };
    let path: PathBuf = prepare_outputs(&args.out.out, &[name], args.out.force)?.remove(0);
    let csv = to_csv(&bench(args)?);
    write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}
