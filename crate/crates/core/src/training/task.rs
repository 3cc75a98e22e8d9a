//! Prediction tasks, selected by name at run time.
//!
//! A task decides which words of a cognate set are aligned together, which
//! language is hidden in each training instance, and which languages are
//! predicted at evaluation time.

use crate::dataio::CognateSet;
use crate::phonology::Phoneme;

use super::{TrainConfig, TrainError};

pub type Words = Vec<(String, Vec<Phoneme>)>;

pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;

    /// Words aligned (and trimmed) together for a training instance.
    fn training_words(&self, set: &CognateSet) -> Words;

    /// Languages hidden in turn, one training instance each.
    fn training_targets(&self, set: &CognateSet) -> Result<Vec<String>, TrainError>;

    /// Languages predicted when evaluating against gold words.
    fn evaluation_targets(&self, set: &CognateSet) -> Vec<String>;

    fn default_config(&self) -> TrainConfig;

    /// Attested words visible when `target` is predicted.
    fn context_words(&self, set: &CognateSet, target: &str) -> Words {
        self.training_words(set)
            .into_iter()
            .filter(|(l, _)| l != target)
            .collect()
    }
}

fn leave_one_out(words: &Words) -> Vec<String> {
    if words.len() < 2 {
        return Vec::new();
    }
    words.iter().map(|(l, _)| l.clone()).collect()
}

/// Predict a held-out daughter word from its cognates.
pub struct Reflex;

impl Task for Reflex {
    fn name(&self) -> &'static str {
        "reflex"
    }

    fn training_words(&self, set: &CognateSet) -> Words {
        set.words.clone()
    }

    fn training_targets(&self, set: &CognateSet) -> Result<Vec<String>, TrainError> {
        Ok(leave_one_out(&set.words))
    }

    fn evaluation_targets(&self, set: &CognateSet) -> Vec<String> {
        match &set.target {
            Some(t) => vec![t.clone()],
            None => leave_one_out(&set.words),
        }
    }

    fn default_config(&self) -> TrainConfig {
        TrainConfig::reflex()
    }
}

/// Reconstruct the proto-language word from the daughter words.
pub struct Proto;

impl Proto {
    fn proto_of(set: &CognateSet) -> Result<&str, TrainError> {
        set.proto_language
            .as_deref()
            .ok_or_else(|| TrainError::NoProtoLanguage(set.family.clone()))
    }
}

impl Task for Proto {
    fn name(&self) -> &'static str {
        "proto"
    }

    fn training_words(&self, set: &CognateSet) -> Words {
        set.words.clone()
    }

    fn training_targets(&self, set: &CognateSet) -> Result<Vec<String>, TrainError> {
        let proto = Self::proto_of(set)?;
        if set.word(proto).is_none() || set.daughter_words().is_empty() {
            return Err(TrainError::TooFewWords {
                family: set.family.clone(),
                set: set.id.clone(),
            });
        }
        Ok(vec![proto.to_string()])
    }

    fn evaluation_targets(&self, set: &CognateSet) -> Vec<String> {
        let Some(proto) = set.proto_language.as_deref() else {
            return Vec::new();
        };
        let known = set.word(proto).is_some() || set.target.as_deref() == Some(proto);
        if known && !set.daughter_words().is_empty() {
            vec![proto.to_string()]
        } else {
            Vec::new()
        }
    }

    fn default_config(&self) -> TrainConfig {
        TrainConfig::proto()
    }
}

/// Reflex prediction over daughter words only; proto-language rows are
/// dropped so pre-training never sees them.
pub struct Pretrain;

impl Task for Pretrain {
    fn name(&self) -> &'static str {
        "pretrain"
    }

    fn training_words(&self, set: &CognateSet) -> Words {
        set.daughter_words()
    }

    fn training_targets(&self, set: &CognateSet) -> Result<Vec<String>, TrainError> {
        Ok(leave_one_out(&set.daughter_words()))
    }

    fn evaluation_targets(&self, set: &CognateSet) -> Vec<String> {
        leave_one_out(&set.daughter_words())
    }

    fn default_config(&self) -> TrainConfig {
        TrainConfig::pretrain()
    }
}

/// Tasks by name.
pub struct TaskRegistry {
    tasks: Vec<Box<dyn Task>>,
}

impl TaskRegistry {
    pub fn empty() -> Self {
        TaskRegistry { tasks: Vec::new() }
    }

    /// Later registrations replace earlier ones of the same name.
    pub fn register(&mut self, task: Box<dyn Task>) {
        self.tasks.retain(|t| t.name() != task.name());
        self.tasks.push(task);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Task, TrainError> {
        self.tasks
            .iter()
            .find(|t| t.name() == name)
            .map(|t| t.as_ref())
            .ok_or_else(|| TrainError::UnknownTask(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.tasks.iter().map(|t| t.name()).collect()
    }
}

impl Default for TaskRegistry {
    fn default() -> Self {
        let mut r = TaskRegistry::empty();
        r.register(Box::new(Reflex));
        r.register(Box::new(Proto));
        r.register(Box::new(Pretrain));
        r
    }
}
