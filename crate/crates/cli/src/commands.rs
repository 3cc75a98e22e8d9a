use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cogtran::alignment::progressive_align;
use cogtran::dataio::{summarize_corpus, Dataset};
use cogtran::encoding::Mode;
use cogtran::metrics::{sound_exchange_errors, EvalReport, Prediction};
use cogtran::model::init_params;
use cogtran::phonology::{segment, SoundClassModel};
use cogtran::training::{
    build_vocabulary, cross_validate, evaluate_model, finetune as finetune_params, fit, make_instances, predict as predict_word,
    train as train_params, Pretrain, Proto, Task, TaskRegistry, TrainConfig, Words,
};
use cogtran::trimming::trim;

use crate::config::{RunArgs, RunConfig};
use crate::error::{io_err, CliError, Result};
use crate::fetch::{self, Manifest};
use crate::run::{load_data, load_model, recorded_task, split_corpus, RunDir, ERRORS_FILE};
use crate::WordSource;

fn log_epoch(epoch: usize, loss: f64) {
    log::info!("epoch {epoch}: loss {loss:.4}");
}

fn print_scores(label: &str, r: &EvalReport) {
    println!("{label}\tED {:.4}\tNED {:.4}\tBC {:.4}\tn {}", r.ed, r.ned, r.bc, r.n);
}

/// `lang:form` pairs given on the command line.
fn parse_set(items: &[String]) -> Result<Words> {
    items
        .iter()
        .map(|item| {
            let (lang, form) = item
                .split_once(':')
                .ok_or_else(|| CliError::usage(format!("expected LANG:FORM, got `{item}`")))?;
            Ok((lang.trim().to_string(), segment(form)?))
        })
        .collect()
}

fn output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(io_err(path)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn fetch(out: &Path, manifest: Option<&Path>, sources: &[String]) -> Result<()> {
    let manifest = match manifest {
        Some(path) => Manifest::parse(&fs::read_to_string(path).map_err(io_err(path))?, path)?,
        None => Manifest::parse(fetch::DEFAULT_MANIFEST, Path::new("built-in manifest"))?,
    };
    let mut local = BTreeMap::new();
    for s in sources {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected NAME=PATH, got `{s}`")))?;
        if !manifest.sources.iter().any(|m| m.name == name) {
            return Err(CliError::usage(format!("manifest has no source `{name}`")));
        }
        local.insert(name.to_string(), PathBuf::from(path));
    }
    let files = fetch::fetch(&manifest, out, &local)?;
    let mut dirs: Vec<&str> = files.iter().filter_map(|f| f.rsplit_once('/').map(|(d, _)| d)).collect();
    dirs.dedup();
    for dir in dirs {
        let corpus = cogtran::dataio::load_corpus(&out.join(dir))?;
        let s = summarize_corpus(&corpus);
        println!("{dir}\t{} families\t{} words\t{} cognate sets", corpus.len(), s.words, s.cognate_sets);
    }
    Ok(())
}

pub fn align(src: &WordSource, trimmed: bool) -> Result<()> {
    let sound = SoundClassModel::builtin();
    let render = |words: &Words| -> Result<String> {
        let msa = progressive_align(words, &sound)?;
        Ok(if trimmed { trim(&msa)?.to_tsv() } else { msa.to_tsv() })
    };
    let text = match &src.data {
        Some(path) => {
            let mut text = String::new();
            for d in load_data(path, None)? {
                for s in &d.sets {
                    if s.words.len() < if trimmed { 2 } else { 1 } {
                        log::warn!("{} {}: too few words, skipped", d.family, s.id);
                        continue;
                    }
                    text.push_str(&format!("# {}\t{}\n", d.family, s.id));
                    text.push_str(&render(&s.words)?);
                }
            }
            text
        }
        None if src.set.is_empty() => return Err(CliError::usage("give --data or --set")),
        None => render(&parse_set(&src.set)?)?,
    };
    output(src.out.as_deref(), &text)
}

pub fn vocab(data: &Path, task: &str, proto_lang: Option<&str>, out: Option<&Path>) -> Result<()> {
    let registry = TaskRegistry::default();
    let task = registry.get(task)?;
    let corpus = load_data(data, proto_lang)?;
    let vocab = build_vocabulary(&[(&corpus, task)], &SoundClassModel::builtin())?;
    output(out, &vocab.to_text())
}

fn with_proto(corpus: &[Dataset]) -> Vec<Dataset> {
    corpus.iter().filter(|d| d.proto_language.is_some()).cloned().collect()
}

pub fn pretrain(c: &RunConfig) -> Result<()> {
    let run = RunDir::create(c.require_out()?)?;
    let sound = SoundClassModel::builtin();
    let reflex = match &c.reflex_data {
        Some(p) => load_data(p, None)?,
        None => Vec::new(),
    };
    let proto = match &c.data {
        Some(p) => {
            let corpus = load_data(p, c.proto_language.as_deref())?;
            match c.test_proportion {
                Some(prop) => split_corpus(&corpus, prop, c.seed)?.0,
                None => corpus,
            }
        }
        None => Vec::new(),
    };
    if reflex.is_empty() && proto.is_empty() {
        return Err(CliError::usage("pretrain needs --reflex-data, --data or both"));
    }
    let supervised = with_proto(&proto);
    let vocab = build_vocabulary(&[(&reflex, &Pretrain), (&proto, &Pretrain), (&supervised, &Proto)], &sound)?;
    let mut instances = make_instances(&reflex, &Pretrain, Mode::Train, &vocab, &sound)?;
    instances.extend(make_instances(&proto, &Pretrain, Mode::Train, &vocab, &sound)?);
    let cfg = c.train_config(TrainConfig::pretrain());
    let model = c.model_config().with_vocab_size(vocab.len());
    let params = init_params(&model, cfg.seed)?;
    log::info!("pre-training on {} instances, vocabulary of {}", instances.len(), vocab.len());
    let (params, losses) = train_params(params, &instances, &cfg, log_epoch)?;
    let recorded = RunConfig {
        task: "pretrain".into(),
        ..c.clone()
    };
    run.write_config("pretrain", &recorded, Some(&model), Some(&cfg))?;
    run.write_losses(&losses)?;
    run.write_model(&params, &vocab)?;
    println!("pretrain\tinstances {}\tfinal loss {:.4}", instances.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn split_or_all(c: &RunConfig, corpus: Vec<Dataset>) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    match c.test_proportion {
        Some(p) => split_corpus(&corpus, p, c.seed),
        None => Ok((corpus, Vec::new())),
    }
}

fn evaluate_into(
    run: &RunDir,
    params: &cogtran::model::Params<f32>,
    vocab: &cogtran::encoding::Vocabulary,
    test: &[Dataset],
    task: &dyn Task,
) -> Result<()> {
    if test.iter().all(|d| d.sets.is_empty()) {
        return Ok(());
    }
    let (report, records) = evaluate_model(params, vocab, test, task, &SoundClassModel::builtin())?;
    run.write_report(&report)?;
    run.write_predictions(&records)?;
    print_scores("test", &report);
    Ok(())
}

pub fn train(c: &RunConfig) -> Result<()> {
    let registry = TaskRegistry::default();
    let task = registry.get(&c.task)?;
    let run = RunDir::create(c.require_out()?)?;
    let corpus = load_data(c.require_data()?, c.proto_language.as_deref())?;
    let (train_sets, test_sets) = split_or_all(c, corpus)?;
    let cfg = c.train_config(task.default_config());
    let fitted = fit(&train_sets, task, &c.model_config(), &cfg, &SoundClassModel::builtin(), log_epoch)?;
    run.write_config("train", c, Some(&fitted.params.config), Some(&cfg))?;
    run.write_losses(&fitted.losses)?;
    run.write_model(&fitted.params, &fitted.vocab)?;
    println!("train\tepochs {}\tfinal loss {:.4}", fitted.losses.len(), fitted.losses.last().copied().unwrap_or(f64::NAN));
    evaluate_into(&run, &fitted.params, &fitted.vocab, &test_sets, task)
}

pub fn finetune(model: &Path, args: &RunArgs) -> Result<()> {
    let mut c = args.resolve()?;
    if args.task.is_none() && args.config.is_none() {
        c.task = "proto".into();
    }
    let registry = TaskRegistry::default();
    let task = registry.get(&c.task)?;
    let (params, vocab, _) = load_model(model)?;
    let run = RunDir::create(c.require_out()?)?;
    let sound = SoundClassModel::builtin();
    let corpus = load_data(c.require_data()?, c.proto_language.as_deref())?;
    let (train_sets, test_sets) = split_or_all(&c, corpus)?;
    let instances = make_instances(&train_sets, task, Mode::Train, &vocab, &sound)?;
    let cfg = c.train_config(TrainConfig::finetune());
    let (params, losses) = finetune_params(params, &vocab, &vocab, &instances, &cfg, log_epoch)?;
    run.write_config("finetune", &c, Some(&params.config), Some(&cfg))?;
    run.write_losses(&losses)?;
    run.write_model(&params, &vocab)?;
    println!("finetune\tepochs {}\tinstances {}", losses.len(), instances.len());
    evaluate_into(&run, &params, &vocab, &test_sets, task)
}

pub fn predict(model: &Path, set: &[String], target: &str) -> Result<()> {
    let (params, vocab, _) = load_model(model)?;
    let words = parse_set(set)?;
    let word = predict_word(&params, &vocab, &words, target, &SoundClassModel::builtin())?;
    println!("{target}\t{}", word.form());
    Ok(())
}

pub fn eval(
    model: &Path,
    data: &Path,
    task: Option<&str>,
    proto_lang: Option<&str>,
    per_family: bool,
    out: Option<&Path>,
) -> Result<()> {
    let (params, vocab, run_path) = load_model(model)?;
    let task_name = match task {
        Some(t) => t.to_string(),
        None => recorded_task(&run_path).ok_or_else(|| CliError::usage("--task is required for this model"))?,
    };
    let registry = TaskRegistry::default();
    let task = registry.get(&task_name)?;
    let corpus = load_data(data, proto_lang)?;
    let (report, records) = evaluate_model(&params, &vocab, &corpus, task, &SoundClassModel::builtin())?;
    let run = RunDir::create(out.unwrap_or(&run_path))?;
    run.write_report(&report)?;
    run.write_predictions(&records)?;
    print_scores("eval", &report);
    if per_family {
        print!("{}", report.family_table());
    }
    Ok(())
}

pub fn cv(c: &RunConfig) -> Result<()> {
    let registry = TaskRegistry::default();
    let task = registry.get(&c.task)?;
    let run = RunDir::create(c.require_out()?)?;
    let corpus = load_data(c.require_data()?, c.proto_language.as_deref())?;
    let cfg = c.train_config(task.default_config());
    let model = c.model_config();
    run.write_config("cv", c, Some(&model), Some(&cfg))?;
    let report = cross_validate(&corpus, task, c.folds, &model, &cfg, &SoundClassModel::builtin(), |i, r| {
        print_scores(&format!("fold {i}"), r)
    })?;
    run.write_json(crate::run::REPORT_FILE, &report)?;
    println!(
        "mean\tED {:.4} ± {:.4}\tNED {:.4} ± {:.4}\tBC {:.4} ± {:.4}",
        report.mean.ed, report.std.ed, report.mean.ned, report.std.ned, report.mean.bc, report.std.bc
    );
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let cols: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| CliError::usage(format!("{}: no `{name}` column", path.display())))
    };
    let (fam, pred, gold) = (find("family")?, find("predicted")?, find("gold")?);
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split('\t').collect();
        let cell = |i: usize| cells.get(i).copied().unwrap_or("").trim();
        if cell(pred).is_empty() || cell(gold).is_empty() {
            continue;
        }
        out.push(Prediction {
            family: cell(fam).to_string(),
            pred: segment(cell(pred))?,
            gold: segment(cell(gold))?,
        });
    }
    Ok(out)
}

pub fn errors(predictions: &Path, top: usize, out: Option<&Path>) -> Result<()> {
    let pairs = read_predictions(predictions)?;
    let table = sound_exchange_errors(&pairs, &SoundClassModel::builtin())?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => predictions.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    RunDir::create(&dir)?.write_text(ERRORS_FILE, &table.to_tsv())?;
    for (i, (pair, f)) in table.top(top).iter().enumerate() {
        println!("{}\t{pair}\t{f:.4}", i + 1);
    }
    Ok(())
}
