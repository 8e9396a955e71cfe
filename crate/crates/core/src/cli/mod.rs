//! Command implementations behind the `recurseq` binary.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::attribution::{attribute_positions, export_heatmap, AttributionMatrix, HeatmapFormat};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, NliModel, NLI_CLASSES};
use crate::nn::ForwardMode;
use crate::padding::tokenize_words;
use crate::retrieval::{load_corpus, load_glove, Embedder, EmbedderKind, GloveTable, ModelEmbedder, QuoteIndex};
use crate::tensor::{Rng, Tape};
use crate::train::{
    batches_by_length, calibrate_bn, calibrate_nli_bn, eval_byte_error_by_bucket, make_batch, power_of_two_buckets,
    sample_random_string, train_epoch, train_nli_epoch, EpochStats, NliExample, Sampler, Sgd,
};

pub mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, ModelKind, SavedModel};
pub use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Embed,
    Attribute,
    Retrieve,
    Repl,
}

/// A parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Upper bound on worker threads from `RECURSEQ_THREADS`, default 1.
pub fn thread_cap(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("RECURSEQ_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("{what} is required for this command")))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

fn nonempty_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?.into_iter().filter(|l| !l.trim().is_empty()).collect())
}

/// `premise<TAB>hypothesis<TAB>label`, the label a class name or index.
pub fn read_nli(path: &Path) -> Result<Vec<NliExample>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Data(format!("{}: line {}: {m}", path.display(), i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [premise, hypothesis, label] = fields[..] else {
            return Err(bad("expected premise<TAB>hypothesis<TAB>label"));
        };
        let label = NLI_CLASSES
            .iter()
            .position(|c| *c == label.trim())
            .or_else(|| label.trim().parse::<usize>().ok().filter(|&l| l < NLI_CLASSES.len()))
            .ok_or_else(|| bad(&format!("unknown label {label:?}")))?;
        let (premise, hypothesis) = (tokenize_words(premise), tokenize_words(hypothesis));
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(bad("empty sentence"));
        }
        out.push(NliExample { premise, hypothesis, label });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no sentence pairs", path.display())));
    }
    Ok(out)
}

fn write_output(output: &Option<PathBuf>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match output {
        Some(p) => checkpoint::write_atomic(p, text.as_bytes()),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_checkpoint(inv: &Invocation) -> Result<Checkpoint> {
    let path = required(&inv.checkpoint, "--checkpoint")?;
    let glove = inv.config.glove.as_deref().map(load_glove).transpose()?;
    let ck = Checkpoint::load(path, glove.as_ref())?;
    check_compatible(&inv.config, &ck)?;
    Ok(ck)
}

/// The run configuration must describe the architecture that was saved.
fn check_compatible(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    let mismatch = |what: &str, saved: String, run: String| {
        Err(Error::Config(format!("checkpoint has {what}={saved} but the run config has {what}={run}")))
    };
    if ck.header.kind != cfg.model {
        return mismatch("model", format!("{:?}", ck.header.kind), format!("{:?}", cfg.model));
    }
    match &ck.model {
        SavedModel::Byte(m) => {
            let (s, r) = (m.config, cfg.model_config());
            if s.big_k != r.big_k {
                return mismatch("K", s.big_k.to_string(), r.big_k.to_string());
            }
            if s.r != r.r {
                return mismatch("r", s.r.to_string(), r.r.to_string());
            }
            if s.d != r.d {
                return mismatch("d", s.d.to_string(), r.d.to_string());
            }
            if s.n_layers != r.n_layers {
                return mismatch("n_layers", s.n_layers.to_string(), r.n_layers.to_string());
            }
            if s.norm != r.norm {
                return mismatch("norm", format!("{:?}", s.norm), format!("{:?}", r.norm));
            }
            if s.padding != r.padding {
                return mismatch("padding", s.padding.to_string(), r.padding.to_string());
            }
        }
        SavedModel::Word(m) => {
            let (s, r) = (m.config, cfg.word_config());
            if s.n_layers != r.n_layers {
                return mismatch("n_layers", s.n_layers.to_string(), r.n_layers.to_string());
            }
            if s.hidden != r.hidden {
                return mismatch("hidden", s.hidden.to_string(), r.hidden.to_string());
            }
            if s.norm != r.norm {
                return mismatch("norm", format!("{:?}", s.norm), format!("{:?}", r.norm));
            }
        }
    }
    Ok(())
}

fn byte_model(ck: Checkpoint) -> Result<Autoencoder<f32>> {
    match ck.model {
        SavedModel::Byte(m) => Ok(m),
        SavedModel::Word(_) => Err(Error::Config("this command needs a byte-level model".into())),
    }
}

/// Runs one command. Interactive input is read from `stdin`; results go
/// to `--output` when given, otherwise to `stdout`.
pub fn run(inv: &Invocation, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    inv.config.validate()?;
    match inv.command {
        Command::Train => match inv.config.model {
            ModelKind::Byte => train_byte(inv),
            ModelKind::Word => train_word(inv),
        },
        Command::Eval => eval(inv, stdout),
        Command::Embed => embed(inv, stdout),
        Command::Attribute => attribute(inv),
        Command::Retrieve => retrieve(inv, stdout),
        Command::Repl => repl(inv, stdin, stdout),
    }
}

fn metrics_path(inv: &Invocation, checkpoint: &Path) -> PathBuf {
    inv.output.clone().unwrap_or_else(|| {
        let mut p = checkpoint.as_os_str().to_owned();
        p.push(".metrics.csv");
        PathBuf::from(p)
    })
}

fn write_metrics(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut csv = format!("{}\n", EpochStats::CSV_HEADER);
    for s in stats {
        csv.push_str(&s.csv_line());
        csv.push('\n');
    }
    checkpoint::write_atomic(path, csv.as_bytes())
}

fn train_byte(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let ck_path = required(&inv.checkpoint, "--checkpoint")?;
    let tc = cfg.train;
    let sampler = match &cfg.train_data {
        Some(p) => Sampler::corpus(nonempty_lines(p)?)?,
        None => Sampler::random(cfg.min_len, cfg.max_len)?,
    };
    let mut model = Autoencoder::<f32>::new(cfg.model_config(), &mut Rng::new(tc.seed))?;
    let mut sgd = Sgd::new(&model.params);
    let mut rng = Rng::new(tc.seed).fork(1);
    let mut stats = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let s = train_epoch(&mut model, &mut sgd, &sampler, &tc, epoch, &mut rng)?;
        log::info!("epoch {epoch}: loss {:.4}, byte error {:.4}", s.loss, s.byte_error);
        stats.push(s);
    }
    let mut calib_rng = Rng::new(tc.seed).fork(2);
    let texts: Vec<String> = (0..cfg.calib_samples.max(1)).map(|_| sampler.sample(&mut calib_rng)).collect();
    let batches: Vec<_> =
        batches_by_length(&texts, &model.config, tc.batch_size)?.into_iter().map(|(_, b)| b).collect();
    calibrate_bn(&mut model, &batches)?;
    write_metrics(&metrics_path(inv, ck_path), &stats)?;
    Checkpoint::byte(model, tc, tc.epochs, Some(sgd)).save(ck_path)
}

fn train_word(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let ck_path = required(&inv.checkpoint, "--checkpoint")?;
    let glove_path = required(&cfg.glove, "glove")?;
    let examples = read_nli(required(&cfg.train_data, "train_data")?)?;
    let glove = load_glove(glove_path)?;
    let tc = cfg.train;
    let mut model = NliModel::<f32>::new(cfg.word_config(), glove.vocab(), glove.tensor(), &mut Rng::new(tc.seed))?;
    let mut sgd = Sgd::new(&model.params);
    let mut rng = Rng::new(tc.seed).fork(1);
    let mut stats = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let s = train_nli_epoch(&mut model, &mut sgd, &examples, &tc, epoch, &mut rng)?;
        log::info!("epoch {epoch}: loss {:.4}, error {:.4}", s.loss, s.byte_error);
        stats.push(s);
    }
    let sentences: Vec<Vec<String>> =
        examples.iter().flat_map(|e| [e.premise.clone(), e.hypothesis.clone()]).collect();
    calibrate_nli_bn(&mut model, &sentences, tc.batch_size)?;
    write_metrics(&metrics_path(inv, ck_path), &stats)?;
    Checkpoint::word(model, glove_path.to_path_buf(), tc, tc.epochs, Some(sgd)).save(ck_path)
}

/// Held-out texts: the input file, or random strings drawn from the seed.
fn eval_texts(inv: &Invocation, max_tokens: usize) -> Result<Vec<String>> {
    if let Some(p) = &inv.input {
        return read_lines(p);
    }
    let cfg = &inv.config;
    let hi = cfg.eval_max_len.unwrap_or(max_tokens);
    if cfg.eval_min_len < 2 || cfg.eval_min_len > hi {
        return Err(Error::Config(format!("need 2 <= eval_min_len <= eval_max_len, got {}..{hi}", cfg.eval_min_len)));
    }
    let mut rng = Rng::new(cfg.train.seed).fork(3);
    (0..cfg.eval_samples).map(|_| sample_random_string(&mut rng, cfg.eval_min_len - 1, hi - 1)).collect()
}

fn eval(inv: &Invocation, stdout: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(inv)?;
    match ck.model {
        SavedModel::Byte(mut model) => {
            let texts = eval_texts(inv, 1 << model.config.big_k)?;
            let buckets = power_of_two_buckets(model.config.big_k);
            let report = eval_byte_error_by_bucket(&mut model, &texts, &buckets, inv.config.train.batch_size)?;
            write_output(&inv.output, &report.to_csv(), stdout)
        }
        SavedModel::Word(mut model) => {
            let examples = read_nli(required(&inv.input, "--input")?)?;
            let mut correct = 0;
            for chunk in examples.chunks(inv.config.train.batch_size.max(1)) {
                let p: Vec<&[String]> = chunk.iter().map(|e| e.premise.as_slice()).collect();
                let h: Vec<&[String]> = chunk.iter().map(|e| e.hypothesis.as_slice()).collect();
                let l: Vec<usize> = chunk.iter().map(|e| e.label).collect();
                correct += model.forward(&mut Tape::new(), &p, &h, &l, ForwardMode::Infer)?.correct;
            }
            let acc = correct as f64 / examples.len() as f64;
            write_output(&inv.output, &format!("n,accuracy\n{},{acc}\n", examples.len()), stdout)
        }
    }
}

fn csv_row(v: &[f32]) -> String {
    let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    cells.join(",") + "\n"
}

fn embed(inv: &Invocation, stdout: &mut dyn Write) -> Result<()> {
    let lines = read_lines(required(&inv.input, "--input")?)?;
    let ck = load_checkpoint(inv)?;
    let mut out = String::new();
    match ck.model {
        SavedModel::Byte(mut model) => {
            for line in &lines {
                let batch = make_batch(&[line], &model.config)?;
                let mut tape = Tape::new();
                let z = model.encode(&mut tape, &batch, ForwardMode::Infer)?;
                out.push_str(&csv_row(tape.value(z).data()));
            }
        }
        SavedModel::Word(mut model) => {
            let mut embedder =
                ModelEmbedder { model: &mut model, kind: inv.config.embedder, batch_size: inv.config.train.batch_size };
            for (line, v) in lines.iter().zip(embedder.embed(&lines)?) {
                if v.iter().all(|&x| x == 0.0) {
                    log::warn!("{line:?} has no known words; its embedding is zero");
                }
                out.push_str(&csv_row(&v));
            }
        }
    }
    write_output(&inv.output, &out, stdout)
}

fn attribute(inv: &Invocation) -> Result<()> {
    let output = required(&inv.output, "--output")?;
    let format = HeatmapFormat::from_path(output)?;
    let text = nonempty_lines(required(&inv.input, "--input")?)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data("attribution input is empty".into()))?;
    let mut model = byte_model(load_checkpoint(inv)?)?;
    let per = attribute_positions(&mut model, &text, None, inv.config.ig_steps)?;
    let worst = per.iter().map(|p| p.completeness_gap()).filter(|g| g.is_finite()).fold(0.0, f64::max);
    log::info!("largest relative completeness gap over positions: {worst:.4}");
    export_heatmap(&AttributionMatrix::from_positions(&per, &text), output, format)
}

/// What turns sentences into vectors for retrieval.
enum EmbedSource {
    Glove(GloveTable),
    Model(Box<NliModel<f32>>),
}

impl EmbedSource {
    fn open(inv: &Invocation) -> Result<Self> {
        if inv.checkpoint.is_some() {
            match load_checkpoint(inv)?.model {
                SavedModel::Word(m) => Ok(EmbedSource::Model(Box::new(m))),
                SavedModel::Byte(_) => Err(Error::Config("retrieval needs a word-level model".into())),
            }
        } else if inv.config.embedder == EmbedderKind::Bow {
            Ok(EmbedSource::Glove(load_glove(required(&inv.config.glove, "glove")?)?))
        } else {
            Err(Error::Config(format!("embedder {} needs --checkpoint", inv.config.embedder)))
        }
    }

    fn embedder(&mut self, inv: &Invocation) -> Box<dyn Embedder + '_> {
        match self {
            EmbedSource::Glove(g) => Box::new(move |s: &[String]| g.embed(s)),
            EmbedSource::Model(m) => {
                Box::new(ModelEmbedder { model: m, kind: inv.config.embedder, batch_size: inv.config.train.batch_size })
            }
        }
    }
}

fn open_index(inv: &Invocation, embedder: &mut dyn Embedder) -> Result<QuoteIndex> {
    let corpus = load_corpus(required(&inv.config.corpus, "corpus")?, inv.config.paired)?;
    let index = QuoteIndex::build(&corpus, embedder)?;
    if index.dropped > 0 {
        log::warn!("{} quotes had zero embeddings and were left out", index.dropped);
    }
    Ok(index)
}

fn retrieve(inv: &Invocation, stdout: &mut dyn Write) -> Result<()> {
    let queries = nonempty_lines(required(&inv.input, "--input")?)?;
    let mut source = EmbedSource::open(inv)?;
    let mut embedder = source.embedder(inv);
    let index = open_index(inv, embedder.as_mut())?;
    let mut out = String::from("query\trank\tsimilarity\tresponse\n");
    for (q, v) in queries.iter().zip(embedder.embed(&queries)?) {
        match index.knn(&v, inv.config.top_k, inv.config.strategy) {
            Ok(hits) => {
                for (rank, h) in hits.iter().enumerate() {
                    let resp = &index.entries[h.entry].response;
                    out.push_str(&format!("{q}\t{}\t{}\t{resp}\n", rank + 1, h.similarity));
                }
            }
            Err(Error::InvalidArgument(m)) => log::warn!("{q:?}: {m}"),
            Err(e) => return Err(e),
        }
    }
    write_output(&inv.output, &out, stdout)
}

fn repl(inv: &Invocation, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    let mut source = EmbedSource::open(inv)?;
    let mut embedder = source.embedder(inv);
    let index = open_index(inv, embedder.as_mut())?;
    let io = |e| Error::io("<stdio>", e);
    let mut line = String::new();
    loop {
        line.clear();
        if stdin.read_line(&mut line).map_err(io)? == 0 {
            return Ok(());
        }
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        match index.respond(query, embedder.as_mut(), inv.config.strategy) {
            Ok((response, _)) => writeln!(stdout, "{response}").map_err(io)?,
            Err(Error::InvalidArgument(m)) => eprintln!("{m}"),
            Err(e) => return Err(e),
        }
        stdout.flush().map_err(io)?;
    }
}
