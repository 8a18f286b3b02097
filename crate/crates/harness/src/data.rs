//! Dataset splits from the generator or from JSONL files.

use std::path::Path;

use adaanchor::tasks::{self, generate_dataset, split_dataset, Splits};
use adaanchor::{ProblemInstance, Vocabulary};

use crate::config::DataConfig;
use crate::error::Result;

/// The generated splits for `seed`, with any configured files substituted.
pub fn build_splits(config: &DataConfig, seed: u64, vocab: &Vocabulary) -> Result<Splits> {
    let total = config.train_size + config.validation_size + config.test_size;
    let mut splits = if total == 0 {
        Splits {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        }
    } else {
        let all = generate_dataset(total, (config.min_difficulty, config.max_difficulty), seed, vocab)?;
        let n = total as f64;
        let fractions = [
            config.train_size as f64 / n,
            config.validation_size as f64 / n,
            config.test_size as f64 / n,
        ];
        split_dataset(all, fractions, seed ^ 0x5151)?
    };
    if let Some(p) = &config.train_path {
        splits.train = load(p, vocab)?;
    }
    if let Some(p) = &config.validation_path {
        splits.validation = load(p, vocab)?;
    }
    if let Some(p) = &config.test_path {
        splits.test = load(p, vocab)?;
    }
    Ok(splits)
}

fn load(path: &Path, vocab: &Vocabulary) -> Result<Vec<ProblemInstance>> {
    let loaded = tasks::load_jsonl(path, vocab)?;
    if loaded.skipped_out_of_vocabulary > 0 {
        eprintln!(
            "warning: skipped {} out-of-vocabulary records in {}",
            loaded.skipped_out_of_vocabulary,
            path.display()
        );
    }
    Ok(loaded.instances)
}

/// Order-sensitive FNV-1a fingerprint of a split's questions and answers.
pub fn fingerprint(instances: &[ProblemInstance]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for inst in instances {
        for b in inst.question.bytes().chain([0]).chain(inst.answer.bytes()).chain([1]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}
