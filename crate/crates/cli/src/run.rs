//! Run directories and shared loading helpers.

use std::fs;
use std::path::{Path, PathBuf};

use cogtran::dataio::{load_corpus, Dataset};
use cogtran::metrics::EvalReport;
use cogtran::model::{load_archive, save_archive, ModelConfig, Params, WEIGHTS_FILE};
use cogtran::encoding::Vocabulary;
use cogtran::phonology::join;
use cogtran::training::{PredictionRecord, TrainConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GIT_DESCRIBE: &str = env!("COGTRAN_GIT_DESCRIBE");

pub const RUN_CONFIG_FILE: &str = "config.json";
pub const LOSSES_FILE: &str = "losses.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const ERRORS_FILE: &str = "errors.tsv";
pub const MODEL_DIR: &str = "model";

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'a str,
    git: &'a str,
    command: &'a str,
    run: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(io_err(path))?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path.join(name);
        fs::write(&path, contents).map_err(io_err(path))
    }

    pub fn write_config(
        &self,
        command: &str,
        run: &RunConfig,
        model: Option<&ModelConfig>,
        train: Option<&TrainConfig>,
    ) -> Result<()> {
        let record = RunRecord {
            version: VERSION,
            git: GIT_DESCRIBE,
            command,
            run,
            model,
            train,
        };
        let json = serde_json::to_string_pretty(&record).expect("run record serializes");
        self.write(RUN_CONFIG_FILE, &(json + "\n"))
    }

    pub fn write_losses(&self, losses: &[f64]) -> Result<()> {
        let mut out = String::from("epoch\tloss\n");
        for (i, l) in losses.iter().enumerate() {
            out.push_str(&format!("{}\t{l:.6}\n", i + 1));
        }
        self.write(LOSSES_FILE, &out)
    }

    pub fn write_model(&self, params: &Params<f32>, vocab: &Vocabulary) -> Result<()> {
        Ok(save_archive(&self.path.join(MODEL_DIR), params, vocab)?)
    }

    pub fn write_report(&self, report: &EvalReport) -> Result<()> {
        self.write(REPORT_FILE, &report.to_json())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let json = serde_json::to_string_pretty(value).expect("value serializes");
        self.write(name, &(json + "\n"))
    }

    pub fn write_predictions(&self, records: &[PredictionRecord]) -> Result<()> {
        self.write(PREDICTIONS_FILE, &predictions_tsv(records))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        self.write(name, text)
    }
}

pub fn predictions_tsv(records: &[PredictionRecord]) -> String {
    let mut out = String::from("family\tcogid\tlanguage\tpredicted\tgold\n");
    for r in records {
        let gold = r.gold.as_deref().map(join).unwrap_or_default();
        out.push_str(&format!("{}\t{}\t{}\t{}\t{gold}\n", r.family, r.set_id, r.language, join(&r.predicted)));
    }
    out
}

/// A model path is either a run directory holding `model/` or the archive
/// directory itself. Returns the archive directory and the run directory.
pub fn locate_model(path: &Path) -> Result<(PathBuf, PathBuf)> {
    if path.join(MODEL_DIR).join(WEIGHTS_FILE).is_file() {
        return Ok((path.join(MODEL_DIR), path.to_path_buf()));
    }
    if path.join(WEIGHTS_FILE).is_file() {
        let run = path.parent().map(Path::to_path_buf).unwrap_or_else(|| path.to_path_buf());
        return Ok((path.to_path_buf(), run));
    }
    Err(CliError::usage(format!("no model archive under {}", path.display())))
}

pub fn load_model(path: &Path) -> Result<(Params<f32>, Vocabulary, PathBuf)> {
    let (archive, run) = locate_model(path)?;
    let (params, vocab) = load_archive(&archive)?;
    Ok((params, vocab, run))
}

/// The task recorded in a run directory's config, if any.
pub fn recorded_task(run: &Path) -> Option<String> {
    let text = fs::read_to_string(run.join(RUN_CONFIG_FILE)).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value["run"]["task"].as_str().map(str::to_string)
}

/// Load a corpus and declare the proto-language where one is requested.
/// Datasets lacking that column are left unchanged.
pub fn load_data(path: &Path, proto_language: Option<&str>) -> Result<Vec<Dataset>> {
    let mut corpus = load_corpus(path)?;
    if let Some(proto) = proto_language {
        let mut found = false;
        for d in &mut corpus {
            if d.languages.iter().any(|l| l == proto) {
                d.set_proto(proto)?;
                found = true;
            }
        }
        if !found {
            return Err(cogtran::dataio::DataError::UnknownLanguage(proto.to_string()).into());
        }
    }
    Ok(corpus)
}

/// Split every dataset by the same proportion and seed.
pub fn split_corpus(corpus: &[Dataset], proportion: f64, seed: u64) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    let mut train = Vec::with_capacity(corpus.len());
    let mut test = Vec::with_capacity(corpus.len());
    for d in corpus {
        let (a, b) = d.split(proportion, seed)?;
        train.push(a);
        test.push(b);
    }
    Ok((train, test))
}
