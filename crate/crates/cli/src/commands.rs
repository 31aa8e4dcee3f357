use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;

use babylm_core::analysis::{epoch_from_path, extract_layer_weights, overlap_report, predict_semantic_topk};
use babylm_core::config::{load_config, Profile};
use babylm_core::finetune_eval::{
    accuracy, bio_violations, finetune as run_finetune, hashed_split, load_conll, load_tsv_classification,
    weighted_f1, FinetuneConfig, Metric, SeqTaskDataset, Task, TaskData, TokenTaskDataset,
};
use babylm_core::io::{read_utf8, write_atomic};
use babylm_core::mlsm::{code_stats, collect_hidden, dict_learn, l2_normalize, DictLearnOptions, SemanticDictionary};
use babylm_core::model::Model;
use babylm_core::numerics::GradCheckOptions;
use babylm_core::tokenizers::{AugmentedVocab, Tokenizer, TokenizerPreset, MASK_ID, PAD_ID, SEP_ID};
use babylm_core::training::{
    builtin_grad_check, ingest_corpus, pack_sequences, MaskVocab, MlsmContext, Objective, PretrainConfig,
    RunDir, Trainer,
};
use babylm_core::Error;

use crate::{CliError, ConfigArgs};

type CliResult = Result<(), CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(usage)
}

/// `tokenizer.tok` next to a checkpoint, or one directory up for epoch checkpoints.
fn default_tokenizer(checkpoint: &Path) -> Result<PathBuf, CliError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    for candidate in [dir.join("tokenizer.tok"), dir.join("..").join("tokenizer.tok")] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(usage(format!(
        "no tokenizer.tok found beside {}; pass --tokenizer",
        checkpoint.display()
    )))
}

fn load_tokenizer(explicit: Option<&Path>, checkpoint: &Path) -> Result<Tokenizer, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => default_tokenizer(checkpoint)?,
    };
    Ok(Tokenizer::load(&path)?)
}

fn resolve_config(
    args: &ConfigArgs,
    profile: Profile,
    snapshot: Option<&Path>,
    forced: &[String],
) -> Result<PretrainConfig, CliError> {
    let profile = match &args.profile {
        Some(p) => parse(p)?,
        None => profile,
    };
    let file = args.config.as_deref().or(snapshot);
    let mut overrides: Vec<String> = forced.to_vec();
    overrides.extend(args.overrides.iter().cloned());
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    load_config(file, profile, &overrides).map_err(|e| match e {
        Error::Io { .. } | Error::InvalidUtf8 { .. } => CliError::Runtime(e),
        other => usage(other),
    })
}

fn encode_corpus(tokenizer: &Tokenizer, corpus: &Path, seq_len: usize) -> Result<Vec<Vec<u32>>, CliError> {
    let corpus = ingest_corpus(corpus)?;
    let streams: Vec<Vec<u32>> = corpus.documents.iter().map(|d| tokenizer.encode(d)).collect();
    Ok(pack_sequences(&streams, seq_len, SEP_ID, PAD_ID)?)
}

pub fn train_tokenizer(preset: &str, corpus: &Path, vocab_size: usize, mask_tokens: Option<usize>, out: &Path) -> CliResult {
    let preset: TokenizerPreset = parse(preset)?;
    let corpus = ingest_corpus(corpus)?;
    let mut tokenizer = Tokenizer::train(preset, &corpus.documents, vocab_size)?;
    if let Some(k) = mask_tokens {
        let Tokenizer::WordPiece(model) = &tokenizer else {
            return Err(usage("--mask-tokens needs a WordPiece preset (elc or mlsm)"));
        };
        tokenizer = Tokenizer::Augmented(AugmentedVocab::augment(model, k)?);
    }
    tokenizer.save(out)?;
    println!("{tokenizer} trained on {} documents", corpus.documents.len());
    Ok(())
}

pub struct PretrainArgs {
    pub objective: String,
    pub config: ConfigArgs,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub tokenizer: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub resume: bool,
    pub max_steps: Option<usize>,
}

pub fn pretrain(args: PretrainArgs) -> CliResult {
    let objective: Objective = parse(&args.objective)?;
    let run = RunDir::create(&args.out)?;
    let snapshot = run.config_path();
    if args.resume && !snapshot.is_file() {
        return Err(usage(format!("--resume: {} has no config snapshot", args.out.display())));
    }
    let forced = [format!("objective={}", objective.name())];
    let cfg = resolve_config(
        &args.config,
        Profile::for_objective(objective),
        args.resume.then_some(snapshot.as_path()),
        &forced,
    )?;

    let (tokenizer, mlsm) = if objective == Objective::MlsmStudent {
        let (Some(teacher_path), Some(dict_path)) = (&args.teacher, &args.dict) else {
            return Err(usage("the mlsm objective needs --teacher and --dict"));
        };
        let teacher = Model::load_checkpoint(teacher_path)?;
        let dictionary = SemanticDictionary::load(dict_path)?;
        if cfg.latent_k != dictionary.k {
            return Err(usage(format!(
                "latent_k = {} but the dictionary has k = {}; set latent_k={}",
                cfg.latent_k, dictionary.k, dictionary.k
            )));
        }
        let augmented = match load_tokenizer(args.tokenizer.as_deref(), teacher_path)? {
            Tokenizer::WordPiece(m) => AugmentedVocab::augment(&m, dictionary.k)?,
            Tokenizer::Augmented(a) if a.k() == dictionary.k => a,
            Tokenizer::Augmented(a) => AugmentedVocab::augment(a.model(), dictionary.k)?,
            Tokenizer::Bpe(_) => return Err(usage("the mlsm objective needs the teacher's WordPiece tokenizer")),
        };
        let ctx = MlsmContext::new(teacher, dictionary, augmented.clone(), cfg.normalize_hidden)?;
        (Tokenizer::Augmented(augmented), Some(ctx))
    } else if args.resume {
        (Tokenizer::load(&run.tokenizer_path())?, None)
    } else if let Some(p) = &args.tokenizer {
        (Tokenizer::load(p)?, None)
    } else {
        let corpus = ingest_corpus(&args.corpus)?;
        (Tokenizer::train(cfg.tokenizer, &corpus.documents, cfg.vocab_size)?, None)
    };

    let sequences = encode_corpus(&tokenizer, &args.corpus, cfg.seq_len)?;
    let model = Model::init(cfg.model_config(tokenizer.vocab_size()), cfg.seed, cfg.init_std as f32)?;
    let mask_vocab = MaskVocab { mask_id: MASK_ID, ordinary: tokenizer.ordinary_ids() };
    let mut trainer = Trainer::new(cfg.clone(), model, sequences, mask_vocab, mlsm)?;
    if args.resume {
        trainer.restore(&run)?;
    } else {
        write_atomic(&snapshot, cfg.to_text().as_bytes())?;
        tokenizer.save(&run.tokenizer_path())?;
    }

    let records = trainer.run(Some(&run), args.max_steps)?;
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "{}: step {}/{} (epoch {}), last loss {last:.6}",
        objective,
        trainer.state.global_step,
        trainer.total_steps(),
        trainer.state.epoch
    );
    if objective == Objective::MlsmStudent {
        println!(
            "latent targets: {} produced, max |sum - 1| = {:.3e}",
            trainer.target_stats.count, trainer.target_stats.max_sum_error
        );
    }
    Ok(())
}

pub fn build_dictionary(teacher_path: &Path, tokenizer: Option<&Path>, corpus: &Path, config: &ConfigArgs, out: &Path) -> CliResult {
    let cfg = resolve_config(config, Profile::Mlsm, None, &[])?;
    let teacher = Model::load_checkpoint(teacher_path)?;
    let tokenizer = load_tokenizer(tokenizer, teacher_path)?;
    if tokenizer.vocab_size() != teacher.config.vocab_size {
        return Err(usage(format!(
            "tokenizer has {} ids, teacher vocabulary has {}",
            tokenizer.vocab_size(),
            teacher.config.vocab_size
        )));
    }
    let layer = cfg.resolved_teacher_layer(teacher.config.num_layers);
    let seq_len = cfg.seq_len.min(teacher.config.max_seq_len);
    let sequences = encode_corpus(&tokenizer, corpus, seq_len)?;
    let mut hiddens = collect_hidden(&teacher, &sequences, layer, cfg.dict_samples, cfg.seed)?;
    if cfg.normalize_hidden {
        hiddens.iter_mut().for_each(|h| l2_normalize(h));
    }
    let report = dict_learn(
        &hiddens,
        DictLearnOptions {
            k: cfg.latent_k,
            lambda: cfg.lambda,
            iterations: cfg.dict_iterations,
            seed: cfg.seed,
            teacher_layer: layer,
        },
    )?;
    report.dictionary.save(out)?;
    for (i, obj) in report.objective.iter().enumerate() {
        println!("iteration {}\tobjective {obj:.6}", i + 1);
    }
    let stats = code_stats(&hiddens, &report.dictionary)?;
    println!(
        "dictionary: k = {}, d = {}, layer {layer}, {} hidden vectors",
        report.dictionary.k,
        report.dictionary.d,
        hiddens.len()
    );
    println!(
        "codes: {:.2} non-zeros on average, {} all-zero, mean target entropy {:.4}",
        stats.mean_nonzeros, stats.zero_codes, stats.mean_target_entropy
    );
    Ok(())
}

pub struct FinetuneArgs {
    pub task: String,
    pub checkpoint: PathBuf,
    pub tokenizer: Option<PathBuf>,
    pub data: PathBuf,
    pub seeds: u64,
    pub epochs: usize,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub out: PathBuf,
}

fn split_tokens(all: TokenTaskDataset) -> (TokenTaskDataset, TokenTaskDataset) {
    let (train, _, test) = hashed_split(all.sentences.len());
    let pick = |idx: &[usize]| TokenTaskDataset { sentences: idx.iter().map(|&i| all.sentences[i].clone()).collect() };
    (pick(&train), pick(&test))
}

fn split_seqs(all: SeqTaskDataset) -> (SeqTaskDataset, SeqTaskDataset) {
    let (train, _, test) = hashed_split(all.examples.len());
    let pick = |idx: &[usize]| SeqTaskDataset { examples: idx.iter().map(|&i| all.examples[i].clone()).collect() };
    (pick(&train), pick(&test))
}

fn load_task_data(task: Task, dir: &Path) -> Result<TaskData, CliError> {
    let ext = if task == Task::Ntc { "tsv" } else { "conll" };
    let train_path = dir.join(format!("train.{ext}"));
    let test_path = dir.join(format!("test.{ext}"));
    if !train_path.is_file() {
        return Err(usage(format!("{} not found", train_path.display())));
    }
    Ok(if task == Task::Ntc {
        let train = load_tsv_classification(&train_path)?;
        let (train, test) = if test_path.is_file() {
            (train, load_tsv_classification(&test_path)?)
        } else {
            split_seqs(train)
        };
        TaskData::Sequences { train, test }
    } else {
        let train = load_conll(&train_path)?;
        let (train, test) = if test_path.is_file() { (train, load_conll(&test_path)?) } else { split_tokens(train) };
        if task == Task::Ner {
            for (name, d) in [("train", &train), ("test", &test)] {
                for v in bio_violations(d) {
                    eprintln!(
                        "warning: {name} sentence {} token {}: `{}` follows {}",
                        v.sentence + 1,
                        v.token + 1,
                        v.label,
                        v.previous.as_deref().unwrap_or("sentence start")
                    );
                }
            }
        }
        TaskData::Tokens { train, test }
    })
}

pub fn finetune(args: FinetuneArgs) -> CliResult {
    let task: Task = parse(&args.task)?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let model = Model::load_checkpoint(&args.checkpoint)?;
    let tokenizer = load_tokenizer(args.tokenizer.as_deref(), &args.checkpoint)?;
    let data = load_task_data(task, &args.data)?;
    let defaults = FinetuneConfig::default();
    let cfg = FinetuneConfig {
        epochs: args.epochs,
        seeds: (1..=args.seeds).collect(),
        lr: args.lr.unwrap_or(defaults.lr),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        ..defaults
    };
    let report = run_finetune(&model, &tokenizer, task, &data, &cfg)?;
    report.save(&args.out)?;
    println!(
        "{} {}: mean {:.4} std {:.4} over {} seeds",
        report.task,
        report.metric.name(),
        report.mean,
        report.std,
        report.seeds.len()
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_utf8(path)?
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).trim().to_string())
        .collect())
}

/// Gold and predicted labels aligned line by line; blank gold lines are unlabelled.
pub fn evaluate(metric: &str, gold: &Path, pred: &Path, out: Option<&Path>) -> CliResult {
    let metric: Metric = parse(metric)?;
    let mut gold_labels = read_labels(gold)?;
    let mut pred_labels = read_labels(pred)?;
    while gold_labels.last().is_some_and(String::is_empty) && pred_labels.last().is_some_and(String::is_empty) {
        gold_labels.pop();
        pred_labels.pop();
    }
    if gold_labels.len() != pred_labels.len() {
        return Err(usage(format!(
            "{} gold lines but {} predicted lines",
            gold_labels.len(),
            pred_labels.len()
        )));
    }
    let score = match metric {
        Metric::Accuracy => {
            let gold: Vec<Option<String>> =
                gold_labels.into_iter().map(|g| (!g.is_empty()).then_some(g)).collect();
            accuracy(&pred_labels, &gold)?
        }
        Metric::WeightedF1 => {
            let (g, p): (Vec<String>, Vec<String>) =
                gold_labels.into_iter().zip(pred_labels).filter(|(g, _)| !g.is_empty()).unzip();
            weighted_f1(&p, &g)?
        }
    };
    println!("{}\t{score}", metric.name());
    if let Some(out) = out {
        let rec = json!({ "metric": metric.name(), "score": score });
        write_atomic(out, format!("{rec}\n").as_bytes())?;
    }
    Ok(())
}

pub fn analyze_layers(checkpoint: &Path, csv: &Path, svg: Option<&Path>) -> CliResult {
    let model = Model::load_checkpoint(checkpoint)?;
    let matrix = extract_layer_weights(&model, epoch_from_path(checkpoint))?;
    matrix.export_csv(csv)?;
    if let Some(svg) = svg {
        matrix.export_svg(svg)?;
    }
    println!("{} layers written to {}", matrix.num_layers(), csv.display());
    Ok(())
}

fn read_targets(path: &Path) -> Result<Vec<(String, String, String)>, CliError> {
    let text = read_utf8(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        match fields.as_slice() {
            [w, s, g] if !w.is_empty() && !s.is_empty() && !g.is_empty() => {
                out.push((w.to_string(), s.to_string(), g.to_string()))
            }
            _ => {
                return Err(CliError::Runtime(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `word<TAB>sentence<TAB>group`, got `{line}`"),
                }))
            }
        }
    }
    Ok(out)
}

pub fn analyze_semantics(
    checkpoint: &Path,
    tokenizer: Option<&Path>,
    dict: &Path,
    targets: &Path,
    top: usize,
    out: &Path,
) -> CliResult {
    let student = Model::load_checkpoint(checkpoint)?;
    let tokenizer = load_tokenizer(tokenizer, checkpoint)?;
    let dictionary = SemanticDictionary::load(dict)?;
    if dictionary.k != student.config.latent_k {
        return Err(usage(format!(
            "dictionary has k = {}, checkpoint latent head has k = {}",
            dictionary.k, student.config.latent_k
        )));
    }
    if top > dictionary.k {
        return Err(usage(format!("--top {top} exceeds the {} latent categories", dictionary.k)));
    }
    let targets = read_targets(targets)?;
    let profiles = targets
        .iter()
        .map(|(w, s, _)| predict_semantic_topk(&student, &tokenizer, s, w, top))
        .collect::<Result<Vec<_>, Error>>()?;
    let groups: Vec<String> = targets.into_iter().map(|(_, _, g)| g).collect();
    let report = overlap_report(&profiles, &groups)?;
    write_atomic(out, report.to_json(&profiles).as_bytes())?;
    let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "{} targets: within-group overlap {}, cross-group overlap {}",
        profiles.len(),
        fmt(report.within_group_mean),
        fmt(report.cross_group_mean)
    );
    Ok(())
}

const GRAD_CHECK_LIMIT: f64 = 1e-3;

pub fn grad_check(eps: f64, coords: usize, seed: u64) -> CliResult {
    if !(eps > 0.0) || coords == 0 {
        return Err(usage("--eps must be positive and --coords at least 1"));
    }
    let options = GradCheckOptions { eps, max_per_param: coords, seed };
    let mut failed = Vec::new();
    for objective in [Objective::MlmStandard, Objective::MlmElc, Objective::MlsmStudent] {
        let r = builtin_grad_check(objective, options)?;
        let ok = r.max_relative_error < GRAD_CHECK_LIMIT;
        println!(
            "{objective}\tmax_relative_error {:.3e}\t{} coordinates\tworst {}[{}]\t{}",
            r.max_relative_error,
            r.coordinates_checked,
            r.worst_param,
            r.worst_index,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(objective.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(Error::InvalidArgument(format!(
            "gradient check failed for {}",
            failed.join(", ")
        ))))
    }
}
