//! JSON-lines question files.
//!
//! One object per line:
//!
//! ```json
//! {"id": "q1", "question": "...", "choices": [{"label": "A", "text": "..."}], "answer": "A"}
//! ```
//!
//! Choices must be labelled `A, B, C, ...` in order. Blank lines are ignored.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnswerOption, Label, Question};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRow {
    pub id: String,
    pub question: String,
    pub choices: Vec<DatasetChoice>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetChoice {
    pub label: String,
    pub text: String,
}

impl DatasetRow {
    pub fn into_question(self) -> Result<Question> {
        let options = self
            .choices
            .into_iter()
            .map(|c| {
                Ok(AnswerOption {
                    label: c.label.trim().parse::<Label>()?,
                    text: c.text,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let q = Question {
            id: self.id,
            stem: self.question,
            options,
            gold: self.answer.trim().parse()?,
        };
        q.validate()?;
        Ok(q)
    }
}

impl From<&Question> for DatasetRow {
    fn from(q: &Question) -> Self {
        DatasetRow {
            id: q.id.clone(),
            question: q.stem.clone(),
            choices: q
                .options
                .iter()
                .map(|o| DatasetChoice {
                    label: o.label.to_string(),
                    text: o.text.clone(),
                })
                .collect(),
            answer: q.gold.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub questions: Vec<Question>,
}

impl DatasetFile {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<DatasetFile> {
    let at = |line: usize, msg: String| Error::Dataset {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    let mut questions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetRow = serde_json::from_str(line).map_err(|e| at(lineno, e.to_string()))?;
        let q = row.into_question().map_err(|e| at(lineno, e.to_string()))?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{lineno}: duplicate question id {:?}",
                path.display(),
                q.id
            )));
        }
        questions.push(q);
    }
    Ok(DatasetFile {
        path: path.to_path_buf(),
        questions,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read dataset {}: {e}", path.display())))?;
    parse_dataset(&text, path)
}
