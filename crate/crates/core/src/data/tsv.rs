//! Tab-separated corpus files.
//!
//! Column layouts, one example per line (ranking: one candidate per line):
//!
//! ```text
//! single      label  text
//! pair        label  text_a  text_b
//! regression  score  text_a  text_b
//! ranking     query_id  is_positive(0/1)  query  candidate
//! ```
//!
//! Ranking rows are grouped by `query_id` in order of first appearance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Candidate, DatasetSplit, Example, Split};
use crate::error::{Error, Result};
use crate::task::{TaskKind, TaskSpec};

pub fn load_tsv(path: impl AsRef<Path>, spec: &TaskSpec, split: Split) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, spec, split, path)
}

/// Parses TSV text; `origin` only labels error messages.
pub fn parse_tsv(text: &str, spec: &TaskSpec, split: Split, origin: &Path) -> Result<DatasetSplit> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let columns = match spec.kind {
        TaskKind::Single => 2,
        TaskKind::Pair | TaskKind::Regression | TaskKind::Ranking => 4 - usize::from(spec.kind != TaskKind::Ranking),
    };
    let mut examples = Vec::new();
    let mut groups: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(parse_err(
                line_no,
                format!("expected {columns} columns for a {} task, found {}", spec.kind, fields.len()),
            ));
        }
        let class = |label: &str| {
            spec.label_index(label)
                .ok_or_else(|| parse_err(line_no, format!("unknown label {label:?} for task {}", spec.name)))
        };
        match spec.kind {
            TaskKind::Single => examples.push(Example::Single {
                text: fields[1].to_string(),
                class: class(fields[0])?,
            }),
            TaskKind::Pair => examples.push(Example::Pair {
                text_a: fields[1].to_string(),
                text_b: fields[2].to_string(),
                class: class(fields[0])?,
            }),
            TaskKind::Regression => {
                let score: f64 = fields[0]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("score {:?} is not a number", fields[0])))?;
                if !score.is_finite() {
                    return Err(parse_err(line_no, format!("score {score} is not finite")));
                }
                examples.push(Example::Regression {
                    text_a: fields[1].to_string(),
                    text_b: fields[2].to_string(),
                    score,
                });
            }
            TaskKind::Ranking => {
                let positive = match fields[1] {
                    "1" => true,
                    "0" => false,
                    other => return Err(parse_err(line_no, format!("is_positive must be 0 or 1, found {other:?}"))),
                };
                let candidate = Candidate {
                    text: fields[3].to_string(),
                    positive,
                };
                match groups.get(fields[0]) {
                    Some(&at) => {
                        let Example::Ranking { query, candidates, .. } = &mut examples[at] else {
                            unreachable!("ranking groups index ranking examples")
                        };
                        if query != fields[2] {
                            return Err(parse_err(
                                line_no,
                                format!("query {} has conflicting query text", fields[0]),
                            ));
                        }
                        candidates.push(candidate);
                    }
                    None => {
                        groups.insert(fields[0].to_string(), examples.len());
                        examples.push(Example::Ranking {
                            query_id: fields[0].to_string(),
                            query: fields[2].to_string(),
                            candidates: vec![candidate],
                        });
                    }
                }
            }
        }
    }
    for ex in &examples {
        ex.validate()?;
    }
    if split == Split::Train && examples.is_empty() {
        return Err(Error::Validation(format!(
            "{}: training split of task {} is empty",
            origin.display(),
            spec.name
        )));
    }
    Ok(DatasetSplit {
        task_name: spec.name.clone(),
        split,
        examples,
    })
}

fn clean(field: &str) -> Result<&str> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(Error::Validation(format!("field {field:?} contains a tab or line break")));
    }
    Ok(field)
}

/// Serializes a split in the layout [`parse_tsv`] reads.
pub fn to_tsv(split: &DatasetSplit, spec: &TaskSpec) -> Result<String> {
    let label = |class: usize| {
        spec.labels
            .get(class)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("class {class} has no label in task {}", spec.name)))
    };
    let mut out = String::new();
    for ex in &split.examples {
        if ex.kind() != spec.kind {
            return Err(Error::Validation(format!(
                "{} example in a {} task",
                ex.kind(),
                spec.kind
            )));
        }
        match ex {
            Example::Single { text, class } => {
                writeln!(out, "{}\t{}", label(*class)?, clean(text)?).unwrap();
            }
            Example::Pair { text_a, text_b, class } => {
                writeln!(out, "{}\t{}\t{}", label(*class)?, clean(text_a)?, clean(text_b)?).unwrap();
            }
            Example::Regression { text_a, text_b, score } => {
                writeln!(out, "{score:?}\t{}\t{}", clean(text_a)?, clean(text_b)?).unwrap();
            }
            Example::Ranking {
                query_id,
                query,
                candidates,
            } => {
                for c in candidates {
                    let flag = if c.positive { 1 } else { 0 };
                    writeln!(out, "{}\t{flag}\t{}\t{}", clean(query_id)?, clean(query)?, clean(&c.text)?).unwrap();
                }
            }
        }
    }
    Ok(out)
}

pub fn write_tsv(path: impl AsRef<Path>, split: &DatasetSplit, spec: &TaskSpec) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_tsv(split, spec)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, spec: &TaskSpec) -> Result<DatasetSplit> {
        parse_tsv(text, spec, Split::Train, Path::new("mem.tsv"))
    }

    #[test]
    fn single_sentence_file_order() {
        let spec = TaskSpec::new("sst", TaskKind::Single).with_labels(["neg", "pos"]);
        let split = parse("pos\ta fine film\nneg\ta dull film\n", &spec).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(
            split.examples[0],
            Example::Single {
                text: "a fine film".into(),
                class: 1
            }
        );
        assert_eq!(
            split.examples[1],
            Example::Single {
                text: "a dull film".into(),
                class: 0
            }
        );
    }

    #[test]
    fn ranking_rows_group_by_query() {
        let spec = TaskSpec::new("qnli", TaskKind::Ranking);
        let text = "q1\t0\twho\ta\nq1\t1\twho\tb\nq1\t0\twho\tc\nq1\t0\twho\td\n";
        let split = parse(text, &spec).unwrap();
        assert_eq!(split.len(), 1);
        let Example::Ranking { candidates, .. } = &split.examples[0] else { panic!() };
        assert_eq!(candidates.len(), 4);
        assert!(candidates[1].positive);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let spec = TaskSpec::new("rte", TaskKind::Pair);
        let err = parse("0\ta\tb\n1\n", &spec).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ranking_positive_count_is_validated() {
        let spec = TaskSpec::new("qnli", TaskKind::Ranking);
        let err = parse("q1\t1\twho\ta\nq1\t1\twho\tb\n", &spec).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = parse("q1\t0\twho\ta\nq1\t0\twho\tb\n", &spec).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn unknown_label_and_bad_score() {
        let spec = TaskSpec::new("sst", TaskKind::Single);
        assert!(matches!(parse("7\ttext\n", &spec), Err(Error::Parse { line: 1, .. })));
        let spec = TaskSpec::new("sts", TaskKind::Regression);
        assert!(matches!(parse("x\ta\tb\n", &spec), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_training_file_is_rejected() {
        let spec = TaskSpec::new("sst", TaskKind::Single);
        assert!(matches!(parse("", &spec), Err(Error::Validation(_))));
        assert!(parse_tsv("", &spec, Split::Dev, Path::new("d")).unwrap().is_empty());
    }
}
