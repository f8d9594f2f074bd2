//! Command implementations behind the `irnn` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 validation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use irnn_core::pwl::{Activation, ActivationMode, PwlTable};
use irnn_core::quant::{BitWidth, QuantParams};
use irnn_core::runtime::{
    calibrate, convert, model_kind, ArchSpec, ConvertConfig, FloatModel, IntInput, IntModel, IntSequence, ModelInput,
    ModelKind, Sequence, StageQParams,
};
use irnn_core::IrnnError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}", io_message(path, source))]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
}

fn io_message(path: &Path, e: &std::io::Error) -> String {
    if path.as_os_str().is_empty() {
        e.to_string()
    } else {
        format!("{}: {e}", path.display())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<IrnnError> for CliError {
    fn from(e: IrnnError) -> Self {
        match e {
            IrnnError::Io(source) => CliError::Io {
                path: PathBuf::new(),
                source,
            },
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Attaches `path` to I/O failures coming out of the library.
fn at_path<T>(path: &Path, r: irnn_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        IrnnError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

#[derive(Debug, Parser)]
#[command(name = "irnn", version, about = "Integer-only LSTM inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized float model.
    Init(InitArgs),
    /// Gather per-stage ranges of a float model over input data.
    Calibrate(CalibrateArgs),
    /// Quantize a float model into an integer model.
    Convert(ConvertArgs),
    /// Run an integer model and write its outputs.
    Run(RunArgs),
    /// Time float, integer, and integer-with-float-activation inference.
    Bench(BenchArgs),
    /// Build PWL tables for one function and report their error.
    Pwl(PwlArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Real feature frames of this width.
    #[arg(long, conflicts_with = "vocab", required_unless_present = "vocab")]
    pub features: Option<usize>,
    /// Token ids below this bound, looked up by an embedding.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub embed: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long)]
    pub bidirectional: bool,
    #[arg(long, conflicts_with = "bidirectional")]
    pub madnorm: bool,
    #[arg(long)]
    pub residual: bool,
    /// Append an attention decoder with this attention width.
    #[arg(long)]
    pub attention: Option<usize>,
    /// Append a final projection with this many outputs.
    #[arg(long)]
    pub output: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input files; repeat for several.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub qparams: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub pieces: usize,
    #[arg(long, default_value_t = 32)]
    pub exp_pieces: usize,
    #[arg(long, default_value_t = 8, value_parser = parse_bits)]
    pub cell_bits: u32,
    #[arg(long, default_value_t = 8, value_parser = parse_bits)]
    pub gate_bits: u32,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_bits(s: &str) -> Result<u32, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bitwidth must be 8 or 16, got {s}")),
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Integer model to time; its dequantized twin is the float baseline.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PwlFunction {
    Tanh,
    Sigmoid,
    Exp,
    Identity,
}

impl From<PwlFunction> for Activation {
    fn from(f: PwlFunction) -> Self {
        match f {
            PwlFunction::Tanh => Activation::Tanh,
            PwlFunction::Sigmoid => Activation::Sigmoid,
            PwlFunction::Exp => Activation::Exp,
            PwlFunction::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Args)]
pub struct PwlArgs {
    #[arg(long, value_enum)]
    pub function: PwlFunction,
    /// Input range `a b`.
    #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [-4.0, 4.0])]
    pub range: Vec<f64>,
    #[arg(long, default_value_t = 8, value_parser = parse_bits)]
    pub bits: u32,
    /// Piece counts; repeat or list several.
    #[arg(long, num_args = 1.., default_values_t = [4, 8, 16, 32])]
    pub pieces: Vec<usize>,
    /// Dump of every input code; with several piece counts each file gets a
    /// `_p{N}` suffix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Executes one parsed command; output goes to files or `stdout`.
pub fn execute(cli: Cli, stdout: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::Init(a) => cmd_init(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Bench(a) => {
            let model = load_int(&a.model)?;
            let report = bench(&model, a.seq_len, a.warmup, a.iters, a.seed)?;
            eprint!("{}", report.text());
            match &a.out {
                Some(p) => fs::write(p, report.csv()).map_err(io_at(p)),
                None => stdout.write_all(report.csv().as_bytes()).map_err(io_at(Path::new("<stdout>"))),
            }
        }
        Command::Pwl(a) => {
            let rows = cmd_pwl(&a)?;
            stdout
                .write_all(pwl_stats_csv(&rows).as_bytes())
                .map_err(io_at(Path::new("<stdout>")))
        }
    }
}

pub fn cmd_init(a: &InitArgs) -> CliResult<()> {
    let input = match (a.features, a.vocab) {
        (Some(dim), None) => ModelInput::Features { dim },
        (None, Some(vocab)) => ModelInput::Tokens { vocab },
        _ => return Err(CliError::Usage("give exactly one of --features and --vocab".into())),
    };
    let spec = ArchSpec {
        input,
        embed: a.embed,
        hidden: a.hidden,
        layers: a.layers,
        bidirectional: a.bidirectional,
        madnorm: a.madnorm,
        residual: a.residual,
        attention: a.attention,
        output: a.output,
        scale: a.scale,
    };
    let model = FloatModel::random(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    at_path(&a.out, model.save(&a.out))
}

/// Sequences read from one input file.
#[derive(Clone, Debug, PartialEq)]
pub enum InputData {
    Tokens(Vec<Vec<usize>>),
    Features(Vec<Vec<Vec<f64>>>),
}

/// Token files hold whitespace-separated ids; blank lines separate
/// sequences. Feature files hold one sequence of little-endian `f32` frames.
pub fn read_input(path: &Path, input: ModelInput) -> CliResult<InputData> {
    match input {
        ModelInput::Tokens { .. } => {
            let text = fs::read_to_string(path).map_err(io_at(path))?;
            let mut seqs = Vec::new();
            let mut cur = Vec::new();
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    if !cur.is_empty() {
                        seqs.push(std::mem::take(&mut cur));
                    }
                    continue;
                }
                for tok in line.split_whitespace() {
                    cur.push(tok.parse::<usize>().map_err(|_| {
                        CliError::Validation(format!("{}:{}: invalid token id {tok:?}", path.display(), n + 1))
                    })?);
                }
            }
            if !cur.is_empty() {
                seqs.push(cur);
            }
            Ok(InputData::Tokens(seqs))
        }
        ModelInput::Features { dim } => {
            let bytes = fs::read(path).map_err(io_at(path))?;
            if bytes.len() % (4 * dim) != 0 {
                return Err(CliError::Validation(format!(
                    "{}: {} bytes is not a whole number of {dim}-wide f32 frames",
                    path.display(),
                    bytes.len()
                )));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let frames: Vec<Vec<f64>> = vals.chunks(dim).map(<[f64]>::to_vec).collect();
            Ok(InputData::Features(if frames.is_empty() { vec![] } else { vec![frames] }))
        }
    }
}

/// Writes feature frames in the format [`read_input`] accepts.
pub fn write_features(path: &Path, frames: &[Vec<f64>]) -> CliResult<()> {
    let bytes: Vec<u8> = frames.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_at(path))
}

fn load_float(path: &Path) -> CliResult<FloatModel> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    at_path(path, FloatModel::load(path))
}

fn load_int(path: &Path) -> CliResult<IntModel> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    if at_path(path, model_kind(path))? != ModelKind::Int {
        return Err(CliError::Validation(format!("{}: expected an integer model", path.display())));
    }
    at_path(path, IntModel::load(path))
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let model = load_float(&a.model)?;
    let data = a
        .data
        .iter()
        .map(|p| read_input(p, model.input()))
        .collect::<CliResult<Vec<_>>>()?;
    let mut batches: Vec<Sequence<'_>> = Vec::new();
    for d in &data {
        match d {
            InputData::Tokens(s) => batches.extend(s.iter().map(|t| Sequence::Tokens(t))),
            InputData::Features(s) => batches.extend(s.iter().map(|f| Sequence::Features(f))),
        }
    }
    let q = calibrate(&model, &batches)?;
    at_path(&a.out, q.save(&a.out))
}

pub fn cmd_convert(a: &ConvertArgs) -> CliResult<()> {
    let model = load_float(&a.model)?;
    if !a.qparams.exists() {
        return Err(io_at(&a.qparams)(std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let q = at_path(&a.qparams, StageQParams::load(&a.qparams))?;
    let cfg = ConvertConfig {
        pieces: a.pieces,
        exp_pieces: a.exp_pieces,
        cell_bits: a.cell_bits,
        gate_bits: a.gate_bits,
    };
    let int = convert(&model, &q, &cfg)?;
    at_path(&a.out, int.save(&a.out))
}

/// Outputs of every input sequence, one line per time step.
pub fn format_outputs(outs: &[Vec<Vec<i32>>]) -> String {
    let mut s = String::new();
    for (k, seq) in outs.iter().enumerate() {
        if k > 0 {
            s.push('\n');
        }
        for step in seq {
            let line: Vec<String> = step.iter().map(i32::to_string).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    s
}

/// Runs `model` over every sequence in `data`.
pub fn run_all(model: &IntModel, data: &InputData) -> CliResult<Vec<Vec<Vec<i32>>>> {
    let outs = match data {
        InputData::Tokens(seqs) => seqs
            .iter()
            .map(|t| model.run(IntSequence::Tokens(t)))
            .collect::<irnn_core::Result<Vec<_>>>()?,
        InputData::Features(seqs) => seqs
            .iter()
            .map(|f| {
                let q = model.quantize_features(f)?;
                model.run(IntSequence::Features(&q))
            })
            .collect::<irnn_core::Result<Vec<_>>>()?,
    };
    if outs.is_empty() {
        return Err(IrnnError::EmptySequence.into());
    }
    Ok(outs)
}

fn model_input(m: &IntModel) -> ModelInput {
    match m.input() {
        IntInput::Tokens { vocab } => ModelInput::Tokens { vocab },
        IntInput::Features { dim, .. } => ModelInput::Features { dim },
    }
}

pub fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let model = load_int(&a.model)?;
    let data = read_input(&a.input, model_input(&model))?;
    let outs = run_all(&model, &data)?;
    fs::write(&a.out, format_outputs(&outs)).map_err(io_at(&a.out))
}

/// Timing of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub config: String,
    /// Per-iteration wall time of every timed run.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub iters_per_sec: f64,
    /// Float mean latency over this configuration's mean latency.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub warmup: usize,
    pub iters: usize,
    pub seq_len: usize,
    pub rows: Vec<BenchRow>,
}

/// Stable schema: `config,mean_ms,iters_per_sec,speedup`.
pub const BENCH_HEADER: &str = "config,mean_ms,iters_per_sec,speedup";

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.3},{:.3}", r.config, r.mean_ms, r.iters_per_sec, r.speedup);
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "sequence length {}, {} warmup + {} timed runs\n",
            self.seq_len, self.warmup, self.iters
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "  {:<14} {:>10.3} ms  {:>9.2} it/s  x{:.2}",
                r.config, r.mean_ms, r.iters_per_sec, r.speedup
            );
        }
        s
    }
}

fn time<F: FnMut()>(warmup: usize, iters: usize, mut f: F) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect()
}

/// Times the float twin of `model`, `model` itself, and `model` with float
/// activations, single-threaded, on one random sequence.
pub fn bench(model: &IntModel, seq_len: usize, warmup: usize, iters: usize, seed: u64) -> CliResult<BenchReport> {
    if iters == 0 {
        return Err(CliError::Validation("--iters must be at least 1".into()));
    }
    if seq_len == 0 {
        return Err(CliError::Validation("--seq-len must be at least 1".into()));
    }
    let float = model.to_float()?;
    let mut no_qact = model.clone();
    no_qact.set_activation_mode(ActivationMode::Float);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tokens, frames, codes) = match model.input() {
        IntInput::Tokens { vocab } => ((0..seq_len).map(|_| rng.random_range(0..vocab)).collect(), vec![], vec![]),
        IntInput::Features { dim, .. } => {
            let f: Vec<Vec<f64>> = (0..seq_len)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let q = model.quantize_features(&f)?;
            (vec![], f, q)
        }
    };
    let (fseq, iseq) = match model.input() {
        IntInput::Tokens { .. } => (Sequence::Tokens(&tokens), IntSequence::Tokens(&tokens)),
        IntInput::Features { .. } => (Sequence::Features(&frames), IntSequence::Features(&codes)),
    };
    // Surface input errors before timing.
    model.run(iseq)?;
    let runs: [(&str, Vec<f64>); 3] = [
        ("float", time(warmup, iters, || {
            std::hint::black_box(float.forward(fseq).expect("validated input"));
        })),
        ("irnn_pwl", time(warmup, iters, || {
            std::hint::black_box(model.run(iseq).expect("validated input"));
        })),
        ("irnn_no_qact", time(warmup, iters, || {
            std::hint::black_box(no_qact.run(iseq).expect("validated input"));
        })),
    ];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base = mean(&runs[0].1);
    let rows = runs
        .into_iter()
        .map(|(name, samples_ms)| {
            let m = mean(&samples_ms);
            BenchRow {
                config: name.to_string(),
                mean_ms: m,
                iters_per_sec: 1e3 / m,
                speedup: base / m,
                samples_ms,
            }
        })
        .collect();
    Ok(BenchReport {
        warmup,
        iters,
        seq_len,
        rows,
    })
}

/// Error statistics of one PWL table over its whole input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PwlStats {
    pub pieces: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// Input codes whose integer output differs from the exact LUT.
    pub lut_mismatches: usize,
}

pub fn pwl_stats_csv(rows: &[PwlStats]) -> String {
    let mut s = String::from("pieces,max_abs_error,mean_abs_error,lut_mismatches\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9},{:.9},{}", r.pieces, r.max_abs_error, r.mean_abs_error, r.lut_mismatches);
    }
    s
}

/// Output parameters covering `f` over `[a, b]` for a monotone `f`.
pub fn pwl_output_qparams(f: Activation, a: f64, b: f64, bits: BitWidth) -> irnn_core::Result<QuantParams> {
    match f {
        Activation::Sigmoid => QuantParams::new(0.0, 1.0, bits),
        Activation::Tanh => QuantParams::new(-1.0, 1.0, bits),
        _ => {
            let (lo, hi) = (f.eval(a), f.eval(b));
            QuantParams::new(lo.min(hi), lo.max(hi), bits)
        }
    }
}

pub fn cmd_pwl(a: &PwlArgs) -> CliResult<Vec<PwlStats>> {
    let (lo, hi) = (a.range[0], a.range[1]);
    if lo >= hi {
        return Err(CliError::Validation(format!("--range needs a < b, got {lo} {hi}")));
    }
    let bits = BitWidth::from_bits(a.bits)?;
    let f: Activation = a.function.into();
    let in_qp = QuantParams::new(lo, hi, bits)?;
    let out_qp = pwl_output_qparams(f, lo, hi, BitWidth::B8)?;
    let lut = irnn_core::pwl::build_lut(|x| f.eval(x), &in_qp, &out_qp);
    let mut rows = Vec::with_capacity(a.pieces.len());
    for &n in &a.pieces {
        let table = PwlTable::for_activation(f, in_qp, out_qp, n)?;
        if let Some(out) = &a.out {
            let path = if a.pieces.len() == 1 {
                out.clone()
            } else {
                suffixed(out, n)
            };
            let file = fs::File::create(&path).map_err(io_at(&path))?;
            table
                .write_csv(std::io::BufWriter::new(file))
                .map_err(io_at(&path))?;
        }
        let lut_mismatches = (0..=in_qp.qmax())
            .filter(|&q| table.eval_int(q) != lut[q as usize])
            .count();
        rows.push(PwlStats {
            pieces: table.n_pieces(),
            max_abs_error: table.max_abs_error(|x| f.eval(x)),
            mean_abs_error: table.mean_abs_error(|x| f.eval(x)),
            lut_mismatches,
        });
    }
    Ok(rows)
}

fn suffixed(p: &Path, n: usize) -> PathBuf {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("pwl");
    let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    p.with_file_name(format!("{stem}_p{n}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::from(IrnnError::Io(std::io::Error::other("x"))).exit_code(), 2);
        assert_eq!(CliError::from(IrnnError::EmptySequence).exit_code(), 3);
    }

    #[test]
    fn token_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        fs::write(&p, "1\n2 3\n\n\n4\n").unwrap();
        assert_eq!(
            read_input(&p, ModelInput::Tokens { vocab: 9 }).unwrap(),
            InputData::Tokens(vec![vec![1, 2, 3], vec![4]])
        );
        fs::write(&p, "1\nx\n").unwrap();
        assert_eq!(read_input(&p, ModelInput::Tokens { vocab: 9 }).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let frames = vec![vec![0.5, -1.25], vec![2.0, 0.0]];
        write_features(&p, &frames).unwrap();
        assert_eq!(
            read_input(&p, ModelInput::Features { dim: 2 }).unwrap(),
            InputData::Features(vec![frames])
        );
        assert_eq!(read_input(&p, ModelInput::Features { dim: 3 }).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn output_format() {
        let s = format_outputs(&[vec![vec![1, -2], vec![3, 4]], vec![vec![5, 6]]]);
        assert_eq!(s, "1 -2\n3 4\n\n5 6\n");
    }

    #[test]
    fn suffix_names() {
        assert_eq!(suffixed(Path::new("/tmp/t.csv"), 8), PathBuf::from("/tmp/t_p8.csv"));
    }
}
