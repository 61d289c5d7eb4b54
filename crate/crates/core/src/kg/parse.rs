use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Reads a tab-separated triple file. Lines starting with `#` and blank lines
/// are skipped.
pub fn parse_triple_file(path: &Path) -> Result<Vec<RawTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, path)
}

/// Parses triple-file contents; `origin` is used in error messages.
pub fn parse_triples(text: &str, origin: &Path) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            return Err(err(format!("field {} is empty", pos + 1)));
        }
        out.push(RawTriple {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// One entity identifier per line; blank and `#` lines are skipped.
pub fn parse_items_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<RawTriple>> {
        parse_triples(text, Path::new("t.tsv"))
    }

    #[test]
    fn splits_fields() {
        let t = parse("i1\thas_genre\tjazz").unwrap();
        assert_eq!(
            t,
            vec![RawTriple {
                head: "i1".into(),
                relation: "has_genre".into(),
                tail: "jazz".into()
            }]
        );
    }

    #[test]
    fn comments_are_skipped() {
        let t = parse("# comment\ni1\tr\tv\n").unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn two_field_line_names_its_line_number() {
        let err = parse("a\tr\tb\nc\tr\td\ne\tr\tf\ng\th\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_field_is_an_error() {
        let err = parse("a\t\tb").unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}
