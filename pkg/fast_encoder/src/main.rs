//! Encode an EVT1 event file into a normalized VGF1 voxel grid.
//!
//! Streams the input through the rolling encoder state and reports
//! throughput (events/second) on stderr.  Exit codes: 0 success, 1 runtime
//! or format failure, 2 usage error.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use fast_encoder::formats::{read_evt1, write_vgf1};
use fast_encoder::RollingEncoder;

#[derive(Parser)]
#[command(name = "fast_encoder", version, about)]
struct Args {
    /// EVT1 input path
    #[arg(long)]
    input: String,
    /// VGF1 output path
    #[arg(long)]
    output: String,
    /// query time: window is [t-end - dt, t-end), microseconds
    #[arg(long = "t-end")]
    t_end: u64,
    /// window duration in microseconds
    #[arg(long)]
    dt: u64,
    /// number of temporal bins
    #[arg(long)]
    bins: u32,
    /// clip range for [0, 1] normalization
    #[arg(long)]
    clip: f32,
    /// sensor width (defaults to the EVT1 header)
    #[arg(long)]
    width: Option<u32>,
    /// sensor height (defaults to the EVT1 header)
    #[arg(long)]
    height: Option<u32>,
}

fn run(args: &Args) -> Result<(usize, f64), Box<dyn std::error::Error>> {
    let file = File::open(&args.input)?;
    let evt = read_evt1(BufReader::new(file))?;
    let width = args.width.unwrap_or(evt.width);
    let height = args.height.unwrap_or(evt.height);

    let start = Instant::now();
    let mut encoder = RollingEncoder::new(width, height);
    encoder.push_events(&evt.events)?;
    let grid = encoder.query_grid(args.t_end, args.bins, args.dt, args.clip)?;
    let seconds = start.elapsed().as_secs_f64();

    let out = File::create(&args.output)?;
    write_vgf1(BufWriter::new(out), &grid)?;
    Ok((evt.events.len(), seconds))
}

fn main() -> ExitCode {
    let args = Args::parse(); // clap exits with code 2 on usage errors
    match run(&args) {
        Ok((count, seconds)) => {
            let rate = if seconds > 0.0 { count as f64 / seconds } else { f64::INFINITY };
            eprintln!("encoded {count} events in {seconds:.6}s ({rate:.0} events/s)");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
