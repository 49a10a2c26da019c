//! densetrace: trace extraction, faithfulness evaluation and computation
//! density profiling for decoder-only transformers.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use densetrace::density::{
    aggregate_words, estimate_density, profile_generation, prompt_records,
};
use densetrace::graph::decompose_forward;
use densetrace::masked::{run_ablated, run_masked};
use densetrace::metrics::tv_distance;
use densetrace::model::ModelDir;
use densetrace::report::{
    read_density_csv, read_token_records_csv, render_html_report, write_baseline_csv,
    write_density_csv, write_necessity_csv, write_sweep_csv, write_token_records_csv,
    write_word_records_csv, BaselineRow, DensityRow, NecessityRow, Palette,
};
use densetrace::stats::{density_feature_report, spearman, FrequencyTable, DEFAULT_SHUFFLES};
use densetrace::trace::{
    complement_for_necessity, extract_trace, random_nonresidual_set, random_trace, ThresholdGrid,
};
use densetrace::{fixture, forward_dense, TokenSequence};

#[derive(Parser)]
#[command(
    name = "densetrace",
    version,
    about = "Edge-level tracing and computation-density profiling for transformer LMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model directory (config.json, model.safetensors, vocab.json, merges.txt).
    #[arg(long, value_name = "DIR")]
    model: PathBuf,
    /// Threshold grid: `default` or a comma-separated increasing list.
    #[arg(long, default_value = "default")]
    grid: String,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the threshold grid on one input: CSV of (tau, size, tv, nucleus)
    /// plus the integrated density.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Input text.
        #[arg(long)]
        text: String,
        /// Output CSV path (stdout when omitted).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Per-input density over a corpus file (one fragment per line).
    Density {
        #[command(flatten)]
        model: ModelArgs,
        /// UTF-8 text file, one input fragment per line.
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Generate a continuation and profile per-token density; writes token
    /// records and an HTML rendering (plus word records when a frequency
    /// table is given).
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prompt: String,
        /// Number of tokens to generate.
        #[arg(long, default_value_t = 30)]
        n_new: usize,
        /// Nucleus sampling mass.
        #[arg(long, default_value_t = 0.6)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `word<TAB>count` frequency list for the word-level report.
        #[arg(long, value_name = "PATH")]
        freq_table: Option<PathBuf>,
        /// Output base path; writes PATH plus .html/.words.csv/.report.json.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RecordFormat::Csv)]
        format: RecordFormat,
    },
    /// Faithfulness baselines (magnitude traces vs controls).
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Spearman correlation between two density CSVs over the same corpus.
    Correlate {
        a: PathBuf,
        b: PathBuf,
        /// Permutation-test seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render an HTML report from a token-records CSV.
    Report {
        /// Token records CSV (as written by `profile`).
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Write the deterministic tiny demo model into a directory.
    Fixture {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Magnitude-extracted traces vs size-matched random traces.
    Random {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Ablating trace edges vs ablating a random non-residual set.
    Necessity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RecordFormat {
    Csv,
    Json,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<densetrace::Error> for CliError {
    fn from(e: densetrace::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(args: &ModelArgs) -> Result<(ModelDir, ThresholdGrid), CliError> {
    let grid: ThresholdGrid = args
        .grid
        .parse()
        .map_err(|e: densetrace::Error| CliError::Usage(e.to_string()))?;
    let md = ModelDir::load(&args.model)?;
    Ok((md, grid))
}

fn encode(md: &ModelDir, text: &str) -> Result<TokenSequence, CliError> {
    let tokens = TokenSequence::new(md.tokenizer.encode(text)?)?;
    tokens.validate_for(&md.model.config)?;
    Ok(tokens)
}

fn write_or_stdout(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(CliError::Data(format!(
            "corpus {} contains no non-empty lines",
            path.display()
        )));
    }
    Ok(lines)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Sweep { model, text, out } => {
            let (md, grid) = load(&model)?;
            let tokens = encode(&md, &text)?;
            let (points, estimate) = estimate_density(&md.model, &tokens, &grid)?;
            let mut csv = Vec::new();
            write_sweep_csv(&mut csv, &points)?;
            write_or_stdout(out.as_deref(), &csv)?;
            println!("rho_hat = {:.6} ({} tokens)", estimate.rho_hat, tokens.len());
            Ok(())
        }

        Command::Density { model, corpus, out } => {
            let (md, grid) = load(&model)?;
            let lines = read_corpus(&corpus)?;
            // Parallel across inputs; output rows keep corpus order.
            let rows: Result<Vec<DensityRow>, CliError> = lines
                .par_iter()
                .enumerate()
                .map(|(index, line)| {
                    let tokens = encode(&md, line)?;
                    let (_, estimate) = estimate_density(&md.model, &tokens, &grid)?;
                    Ok(DensityRow {
                        index,
                        rho_hat: estimate.rho_hat,
                        n_tokens: tokens.len(),
                    })
                })
                .collect();
            let rows = rows?;
            let mut csv = Vec::new();
            write_density_csv(&mut csv, &rows)?;
            write_or_stdout(out.as_deref(), &csv)?;
            Ok(())
        }

        Command::Profile {
            model,
            prompt,
            n_new,
            p,
            seed,
            freq_table,
            out,
            format,
        } => {
            let (md, grid) = load(&model)?;
            if n_new == 0 {
                return Err(CliError::Usage("--n-new must be at least 1".into()));
            }
            let generated = profile_generation(&md.model, &md.tokenizer, &prompt, n_new, p, seed, &grid)?;

            match format {
                RecordFormat::Csv => {
                    let mut csv = Vec::new();
                    write_token_records_csv(&mut csv, &generated)?;
                    fs::write(&out, csv)?;
                }
                RecordFormat::Json => {
                    let json = serde_json::to_string_pretty(&generated)
                        .map_err(|e| CliError::Data(e.to_string()))?;
                    fs::write(&out, json)?;
                }
            }

            // HTML rendering with the prompt as uncolored context.
            let prompt_tokens = TokenSequence::new(md.tokenizer.encode(&prompt)?)?;
            let mut all = prompt_records(&md.tokenizer, &prompt_tokens)?;
            all.extend(generated.iter().cloned());
            let html = render_html_report(&all, &Palette::default());
            fs::write(out.with_extension("html"), html)?;

            if let Some(freq_path) = freq_table {
                let table = FrequencyTable::load(&freq_path)?;
                let words = aggregate_words(&generated, Some(&table));
                let mut csv = Vec::new();
                write_word_records_csv(&mut csv, &words)?;
                fs::write(out.with_extension("words.csv"), csv)?;
                match density_feature_report(&words, &generated, DEFAULT_SHUFFLES, seed) {
                    Ok(report) => {
                        let json = serde_json::to_string_pretty(&report)
                            .map_err(|e| CliError::Data(e.to_string()))?;
                        fs::write(out.with_extension("report.json"), json)?;
                    }
                    // Correlations need variation and enough words; a short
                    // profile is still useful without them.
                    Err(densetrace::Error::InsufficientData { .. })
                    | Err(densetrace::Error::DegenerateVariance(_)) => {
                        println!("too little data for the correlation report; skipped");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            println!(
                "profiled {} generated tokens (mean rho {:.4})",
                generated.len(),
                generated.iter().map(|r| r.rho_hat).sum::<f64>() / generated.len() as f64
            );
            Ok(())
        }

        Command::Baseline(BaselineCommand::Random { model, corpus, seed, out }) => {
            let (md, grid) = load(&model)?;
            let lines = read_corpus(&corpus)?;
            let rows: Result<Vec<Vec<BaselineRow>>, CliError> = lines
                .par_iter()
                .enumerate()
                .map(|(input, line)| {
                    let tokens = encode(&md, line)?;
                    let p_g = forward_dense(&md.model, &tokens)?;
                    let run = decompose_forward(&md.model, &tokens)?;
                    let floor = run.residual_ancestors().count() as f64
                        / run.ancestor_count() as f64;
                    let mut rows = Vec::new();
                    for (t_idx, &tau) in grid.taus().iter().enumerate() {
                        let trace = extract_trace(&run, tau)?;
                        let p_t = run_masked(&md.model, &tokens, &trace)?;
                        let mut rng = seeded_rng(seed, input, t_idx);
                        let rand =
                            random_trace(&run, trace.size_ratio.clamp(floor, 1.0), &mut rng)?;
                        let p_r = run_masked(&md.model, &tokens, &rand)?;
                        rows.push(BaselineRow {
                            input,
                            tau,
                            size: trace.size_ratio,
                            tv_magnitude: tv_distance(&p_g, &p_t)?,
                            tv_random: tv_distance(&p_g, &p_r)?,
                        });
                    }
                    Ok(rows)
                })
                .collect();
            let rows: Vec<BaselineRow> = rows?.into_iter().flatten().collect();
            let mut csv = Vec::new();
            write_baseline_csv(&mut csv, &rows)?;
            write_or_stdout(out.as_deref(), &csv)?;
            summarize_baseline(&rows);
            Ok(())
        }

        Command::Baseline(BaselineCommand::Necessity { model, corpus, seed, out }) => {
            let (md, grid) = load(&model)?;
            let lines = read_corpus(&corpus)?;
            let rows: Result<Vec<Vec<NecessityRow>>, CliError> = lines
                .par_iter()
                .enumerate()
                .map(|(input, line)| {
                    let tokens = encode(&md, line)?;
                    let p_g = forward_dense(&md.model, &tokens)?;
                    let run = decompose_forward(&md.model, &tokens)?;
                    let mut rows = Vec::new();
                    for (t_idx, &tau) in grid.taus().iter().enumerate() {
                        let trace = extract_trace(&run, tau)?;
                        let ablate = complement_for_necessity(&trace);
                        let mut rng = seeded_rng(seed, input, t_idx);
                        let control = random_nonresidual_set(&run, ablate.len(), &mut rng)?;
                        let p_abl = run_ablated(&md.model, &tokens, &ablate)?;
                        let p_ctl = run_ablated(&md.model, &tokens, &control)?;
                        rows.push(NecessityRow {
                            input,
                            tau,
                            ablated: ablate.len(),
                            tv_ablate_trace: tv_distance(&p_g, &p_abl)?,
                            tv_ablate_random: tv_distance(&p_g, &p_ctl)?,
                        });
                    }
                    Ok(rows)
                })
                .collect();
            let rows: Vec<NecessityRow> = rows?.into_iter().flatten().collect();
            let mut csv = Vec::new();
            write_necessity_csv(&mut csv, &rows)?;
            write_or_stdout(out.as_deref(), &csv)?;
            Ok(())
        }

        Command::Correlate { a, b, seed } => {
            let left = read_density_csv(fs::File::open(&a)?)?;
            let right = read_density_csv(fs::File::open(&b)?)?;
            if left.len() != right.len() {
                return Err(CliError::Data(format!(
                    "density files disagree on corpus size ({} vs {})",
                    left.len(),
                    right.len()
                )));
            }
            let xs: Vec<f64> = left.iter().map(|&(_, r)| r).collect();
            let ys: Vec<f64> = right.iter().map(|&(_, r)| r).collect();
            let rho = spearman(&xs, &ys)?;
            let p = densetrace::stats::permutation_p_value(
                &xs,
                &ys,
                densetrace::stats::CorrelationKind::Spearman,
                DEFAULT_SHUFFLES,
                seed,
            )?;
            println!("spearman = {rho:.4} (n = {}, permutation p = {p:.4})", xs.len());
            Ok(())
        }

        Command::Report { records, out } => {
            let records = read_token_records_csv(fs::File::open(&records)?)?;
            if records.is_empty() {
                return Err(CliError::Data("records file holds no rows".into()));
            }
            let html = render_html_report(&records, &Palette::default());
            fs::write(&out, html)?;
            Ok(())
        }

        Command::Fixture { out, seed } => {
            let model = fixture::tiny_model(seed);
            fixture::write_model_dir(&out, &model, &fixture::tiny_tokenizer())?;
            println!("wrote fixture model to {}", out.display());
            Ok(())
        }
    }
}

fn seeded_rng(seed: u64, input: usize, tau_idx: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(
        seed ^ ((input as u64) << 20) ^ ((tau_idx as u64) << 4),
    )
}

fn summarize_baseline(rows: &[BaselineRow]) {
    use std::collections::BTreeMap;
    let mut by_tau: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = by_tau.entry(r.tau.to_bits()).or_insert((0.0, 0.0, 0));
        e.0 += r.tv_magnitude;
        e.1 += r.tv_random;
        e.2 += 1;
    }
    println!("tau        mean_tv_magnitude  mean_tv_random");
    for (bits, (m, r, n)) in by_tau {
        let tau = f64::from_bits(bits);
        println!("{tau:<10e} {:<18.4} {:.4}", m / n as f64, r / n as f64);
    }
}
