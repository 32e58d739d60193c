use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::FIRST_CONTENT_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn target(&self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            _ => Err(Error::Config(format!("unknown task `{s}` (copy, reverse, sort)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Reads `src<TAB>tgt` lines of space-separated token ids.
    pub fn parse(text: &str) -> Result<Self> {
        let ids = |line: usize, s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("invalid token id `{t}`"),
                    })
                })
                .collect()
        };
        let mut examples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (src, tgt) = raw.split_once('\t').ok_or_else(|| Error::Parse {
                line,
                msg: "expected `src<TAB>tgt`".into(),
            })?;
            examples.push(Example {
                src: ids(line, src)?,
                tgt: ids(line, tgt)?,
            });
        }
        Ok(Dataset { examples })
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        self.examples
            .iter()
            .map(|e| format!("{}\t{}\n", join(&e.src), join(&e.tgt)))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

/// Seeded generator of source/target pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self, model_max_len: usize) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT_TOKEN + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves fewer than two content tokens",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.max_len > model_max_len {
            return Err(Error::Config(format!(
                "task length {} exceeds model max_len {model_max_len}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate(self.max_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let examples = (0..self.samples)
            .map(|_| {
                let len = rng.random_range(self.min_len..=self.max_len);
                let src: Vec<usize> = (0..len)
                    .map(|_| rng.random_range(FIRST_CONTENT_TOKEN..self.vocab_size))
                    .collect();
                Example {
                    tgt: self.kind.target(&src),
                    src,
                }
            })
            .collect();
        Ok(Dataset { examples })
    }
}
