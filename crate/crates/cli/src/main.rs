//! `vamidi` command-line interface.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 on
//! runtime failure. Diagnostics name the failing error variant.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vamidi::ablation::{grid, run_ablation, summary_markdown, write_summary_csv};
use vamidi::config::{ConfigError, RunConfig, StrategyKind};
use vamidi::metrics::{evaluate_corpus, markdown_table, write_corpus_csv, SummaryRow};
use vamidi::midi::write_midi;
use vamidi::model::{
    load_image_input, EmoModel, ImageExtractor, ImageFeature, ImageInput, ModelError, VaPredictor, FEATURE_DIM,
};
use vamidi::nn::{Checkpoint, GradcheckOptions, Tensor};
use vamidi::pairing::{config_hash, load_catalog, pair_datasets, split, EmotionDictionary, ItemKind, Similarity};
use vamidi::run::{
    eval_inputs, load_catalogs, load_dataset, pretrain_from_catalog, read_piece, resolve_predictor, token_records,
    training_examples, RunError,
};
use vamidi::synth::{desk_run_config, write_desk_dataset};
use vamidi::tokenizer::{decode, write_token_records, Vocabulary, BOS, EOS};
use vamidi::training::{fit, model_gradcheck, write_loss_csv, LossWeights, TrainingExample, VaLossMode};

#[derive(Parser)]
#[command(name = "vamidi", version, about = "Image-conditioned MIDI generation with valence/arousal guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair every MIDI piece with its most emotionally similar image.
    Pair(PairArgs),
    /// Tokenize the MIDI catalog into a JSON-lines token dataset.
    Tokenize(TokenizeArgs),
    /// Pretrain the VA predictor on a labelled MIDI catalog.
    PretrainVa(PretrainArgs),
    /// Train the generator from a run config.
    Train(TrainArgs),
    /// Generate a MIDI file from an image or feature file.
    Generate(GenerateArgs),
    /// Score a directory of MIDI files.
    Metrics(MetricsArgs),
    /// Run the encoder/decoder/VA-loss ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference check of the model's gradients.
    Gradcheck(GradcheckArgs),
    /// Write a small synthetic dataset and a matching run config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    midis: PathBuf,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split sizes `train,test,val`.
    #[arg(long, value_parser = parse_split)]
    split: Option<[usize; 3]>,
    /// Raw VA range of the catalogs, `lo,hi`.
    #[arg(long, value_parser = parse_range)]
    source_range: Option<[f64; 2]>,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    midis: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    midis: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write `model_epoch<N>.ckpt` after every epoch.
    #[arg(long)]
    checkpoint_every_epoch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Temperature,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    midi_dir: PathBuf,
    /// Per-piece CSV; the Markdown summary goes next to it with an `.md` extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, alias = "config")]
    config_grid: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Entries sampled per parameter block; 0 checks every entry.
    #[arg(long, default_value_t = 16)]
    entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> =
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|p| format!("expected three counts, got {}", p.len()))
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[f64; 2]>::try_from(parts).map_err(|p| format!("expected lo,hi, got {} values", p.len()))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn out_dir_of(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, RunError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn finish(cfg: &RunConfig, dir: &Path) -> Result<(), RunError> {
    cfg.validate()?;
    cfg.echo_to(dir)?;
    Ok(())
}

fn cmd_pair(a: PairArgs) -> Result<(), RunError> {
    let mut cfg = RunConfig::default();
    cfg.data.midi_catalog = Some(a.midis);
    cfg.data.image_catalog = Some(a.images);
    cfg.data.dictionary = a.dictionary;
    cfg.pairing.split = a.split;
    if let Some(r) = a.source_range {
        cfg.pairing.source_range = r;
    }
    cfg.train.seed = a.seed;
    cfg.validate()?;
    let (midis, images) = load_catalogs(&cfg)?;
    let mut manifest = pair_datasets(&midis, &images)?;
    if let Some(counts) = a.split {
        manifest = split(&manifest, counts, a.seed)?;
    }
    manifest.config_hash = config_hash(&(&cfg.pairing, a.seed));
    write(&a.out, manifest.to_json())?;
    finish(&cfg, &out_dir_of(&a.out))?;
    let finite: Vec<f64> = manifest
        .pairs
        .iter()
        .filter_map(|p| match p.similarity {
            Similarity::Finite(s) => Some(s),
            Similarity::Identical => None,
        })
        .collect();
    let identical = manifest.pairs.len() - finite.len();
    println!("pairs: {}", manifest.pairs.len());
    if finite.is_empty() {
        println!("similarity: all {identical} pairs identical");
    } else {
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(0.0, f64::max);
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        println!("similarity: min {min:.4} mean {mean:.4} max {max:.4} identical {identical}");
    }
    if let Some(c) = manifest.split_counts {
        println!("split: train {} test {} val {}", c[0], c[1], c[2]);
    }
    Ok(())
}

fn cmd_tokenize(a: TokenizeArgs) -> Result<(), RunError> {
    let mut cfg = base_config(a.config.as_deref())?;
    cfg.data.midi_catalog = Some(a.midis.clone());
    let dict = cfg.data.dictionary.as_deref().map(EmotionDictionary::load).transpose()?;
    let midis = load_catalog(&a.midis, ItemKind::Midi, dict.as_ref(), cfg.source_range())?;
    let records = token_records(&midis, &cfg)?;
    let mut buf = Vec::new();
    write_token_records(&mut buf, &records)?;
    write(&a.out, buf)?;
    finish(&cfg, &out_dir_of(&a.out))?;
    println!("tokenized {} pieces (vocabulary {})", records.len(), Vocabulary::new(cfg.model.vocab)?.hash());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), RunError> {
    let mut cfg = base_config(a.config.as_deref())?;
    cfg.data.midi_catalog = Some(a.midis.clone());
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let dict = cfg.data.dictionary.as_deref().map(EmotionDictionary::load).transpose()?;
    let midis = load_catalog(&a.midis, ItemKind::Midi, dict.as_ref(), cfg.source_range())?;
    let (predictor, report) = pretrain_from_catalog(&midis, &cfg)?;
    let dir = out_dir_of(&a.out);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    predictor.save(&a.out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&a.out.with_extension("report.json"), &json)?;
    finish(&cfg, &out_dir_of(&a.out))?;
    println!("{json}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), RunError> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load_dataset(&cfg)?;
    let data = training_examples(&ds, &cfg)?;
    let predictor = resolve_predictor(&ds.midis, &cfg, cfg.train.va_loss_mode)?;
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    cfg.echo_to(&a.out_dir)?;
    write(&a.out_dir.join("manifest.json"), ds.manifest.to_json())?;
    if let (Some(p), None) = (&predictor, &cfg.va_predictor.weights) {
        p.save(&a.out_dir.join("va_predictor.ckpt"))?;
    }
    let run = serde_json::to_value(&cfg).expect("config serializes");
    let mut model = EmoModel::new(cfg.model.clone(), cfg.train.seed)?;
    let curve = fit(&mut model, &data, predictor.as_ref(), &cfg.train, |row, m| {
        println!("epoch {} l_cc {:.6} l_va {:.6} l_total {:.6}", row.epoch, row.l_cc, row.l_va, row.l_total);
        if a.checkpoint_every_epoch {
            m.save(&a.out_dir.join(format!("model_epoch{}.ckpt", row.epoch)), run.clone())?;
        }
        Ok(())
    })?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &curve)?;
    write(&a.out_dir.join("loss.csv"), csv)?;
    model.save(&a.out_dir.join("model.ckpt"), run)?;
    println!("trained on {} pairs; wrote {}", data.len(), a.out_dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), RunError> {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(ModelError::from)?;
    let model = EmoModel::from_checkpoint(&ckpt)?;
    let mut cfg: RunConfig = serde_json::from_value(ckpt.config["run"].clone()).unwrap_or_default();
    cfg.model = model.config().clone();
    if let Some(s) = a.strategy {
        cfg.generate.strategy = match s {
            StrategyArg::Greedy => StrategyKind::Greedy,
            StrategyArg::Temperature => StrategyKind::Temperature,
        };
    }
    if let Some(t) = a.temperature {
        cfg.generate.temperature = t;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.max_len {
        cfg.generate.max_len = n;
    }
    cfg.validate()?;
    let image = load_image_input(&a.image, cfg.model.image_size)?;
    let seq = model.generate(&image, cfg.generate.max_len, cfg.generate.strategy(), cfg.train.seed)?;
    let piece = decode(seq.ids(), model.vocab(), cfg.tokenizer.steps_per_beat);
    write(&a.out, write_midi(&piece))?;
    finish(&cfg, &out_dir_of(&a.out))?;
    println!("{} tokens -> {} notes -> {}", seq.len(), piece.notes().len(), a.out.display());
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), RunError> {
    let cfg = base_config(a.config.as_deref())?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.midi_dir)
        .map_err(io_err(&a.midi_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("mid") || x.eq_ignore_ascii_case("midi")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RunError::MissingInput(format!("no .mid files in {}", a.midi_dir.display())));
    }
    let pieces = files
        .iter()
        .map(|f| Ok((f.file_name().unwrap_or_default().to_string_lossy().into_owned(), read_piece(f)?)))
        .collect::<Result<Vec<_>, RunError>>()?;
    let report = evaluate_corpus(&pieces, &cfg.metrics);
    let mut csv = Vec::new();
    write_corpus_csv(&mut csv, &report)?;
    write(&a.out, csv)?;
    let name = a.midi_dir.file_name().map_or("corpus".into(), |n| n.to_string_lossy().into_owned());
    let row = SummaryRow {
        model: name,
        music_quality_loss: report.mean.map(|m| m.1),
        metrics: report.mean.map(|m| m.0),
        note: None,
    };
    let md = markdown_table(&[row]);
    write(&a.out.with_extension("md"), &md)?;
    finish(&cfg, &out_dir_of(&a.out))?;
    print!("{md}");
    println!("scored {} of {} pieces", report.evaluated(), pieces.len());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), RunError> {
    let cfg = RunConfig::load(&a.config_grid)?;
    let ds = load_dataset(&cfg)?;
    let data = training_examples(&ds, &cfg)?;
    let eval = eval_inputs(&ds, &cfg, cfg.ablation.eval_images)?;
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    cfg.echo_to(&a.out_dir)?;
    let predictor = if cfg.ablation.va_loss.contains(&true) {
        match resolve_predictor(&ds.midis, &cfg, cfg.ablation.va_mode) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("warning [{}]: VA predictor unavailable: {e}", e.kind());
                None
            }
        }
    } else {
        None
    };
    let variants = grid(&cfg);
    let curves = a.out_dir.join("curves");
    fs::create_dir_all(&curves).map_err(io_err(&curves))?;
    let outcomes = run_ablation(&cfg, &variants, &data, &eval, predictor.as_ref(), |o| match &o.error {
        None => {
            println!("{}: ok (final l_cc {:.4})", o.row.model, o.curve.last().map_or(f64::NAN, |c| c.l_cc));
            let mut csv = Vec::new();
            if write_loss_csv(&mut csv, &o.curve).is_ok() {
                let _ = fs::write(curves.join(format!("{}.csv", o.row.model)), csv);
            }
        }
        Some(e) => println!("{}: failed ({e})", o.row.model),
    });
    let md = summary_markdown(&outcomes);
    write(&a.out_dir.join("ablation.md"), &md)?;
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &outcomes)?;
    write(&a.out_dir.join("ablation.csv"), csv)?;
    print!("{md}");
    let failed = outcomes.iter().filter(|o| !o.succeeded()).count();
    println!("{} variants, {failed} failed", outcomes.len());
    Ok(())
}

enum Outcome {
    Done,
    GradcheckFailed,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Outcome, RunError> {
    let cfg = RunConfig::load(&a.config)?;
    let seed = cfg.train.seed;
    let model = EmoModel::new(cfg.model.clone(), seed)?;
    let vocab = model.vocab().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.model.max_len.min(12);
    let mut tokens = vec![BOS];
    while tokens.len() < len - 1 {
        tokens.push(rng.gen_range(3..vocab.size() as u32));
    }
    tokens.push(EOS);
    let image = match cfg.model.image_extractor {
        ImageExtractor::Precomputed => {
            ImageInput::Feature(ImageFeature::new((0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())?)
        }
        ImageExtractor::TinyCnn => {
            let s = cfg.model.image_size;
            let px = (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
            ImageInput::Pixels(Tensor::new(vec![3, s, s], px).map_err(ModelError::from)?)
        }
    };
    let predictor = if cfg.train.va_loss_mode == VaLossMode::Off {
        None
    } else {
        Some(match &cfg.va_predictor.weights {
            Some(p) => VaPredictor::load(p, &vocab)?,
            None => {
                // centre the untrained predictor inside the clamp range
                let mut p = VaPredictor::new(&vocab, cfg.va_predictor.predictor(), seed)?;
                p.store.set_value("fc3.b", Tensor::row_vector(vec![5.0, 5.0])).map_err(ModelError::from)?;
                p
            }
        })
    };
    let ex = TrainingExample { id: "gradcheck".into(), tokens, image };
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        max_entries_per_block: (a.entries > 0).then_some(a.entries),
        seed,
        ..GradcheckOptions::default()
    };
    let report = model_gradcheck(&model, &ex, predictor.as_ref(), &LossWeights::new(1.0, 1.0)?, &opts)?;
    for b in &report.blocks {
        println!(
            "{:<28} {:>6} entries  rel {:.3e}  {}",
            b.name,
            b.entries_checked,
            b.relative_error,
            if b.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&report).expect("report serializes"))?;
        finish(&cfg, &out_dir_of(out))?;
    }
    println!("worst relative error {:.3e} (tolerance {:.1e})", report.worst(), report.tolerance);
    Ok(if report.passed() { Outcome::Done } else { Outcome::GradcheckFailed })
}

fn cmd_synth(a: SynthArgs) -> Result<(), RunError> {
    if a.pairs == 0 {
        return Err(ConfigError::Invalid("--pairs must be positive".into()).into());
    }
    let ds = write_desk_dataset(&a.out_dir, a.pairs, a.seed).map_err(|e| RunError::Io(e.to_string()))?;
    let mut cfg = desk_run_config();
    cfg.train.seed = a.seed;
    let text = cfg.to_toml();
    write(&a.out_dir.join("config.toml"), &text)?;
    println!(
        "wrote {} MIDI/image pairs, {} and {} under {}",
        ds.midis.len(),
        ds.midi_catalog.display(),
        ds.image_catalog.display(),
        a.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Pair(a) => cmd_pair(a).map(|_| Outcome::Done),
        Command::Tokenize(a) => cmd_tokenize(a).map(|_| Outcome::Done),
        Command::PretrainVa(a) => cmd_pretrain(a).map(|_| Outcome::Done),
        Command::Train(a) => cmd_train(a).map(|_| Outcome::Done),
        Command::Generate(a) => cmd_generate(a).map(|_| Outcome::Done),
        Command::Metrics(a) => cmd_metrics(a).map(|_| Outcome::Done),
        Command::Ablate(a) => cmd_ablate(a).map(|_| Outcome::Done),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a).map(|_| Outcome::Done),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::GradcheckFailed) => {
            eprintln!("error [GradcheckFailed]: gradients exceed tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.kind());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
