//! Benchmark bundles: a merged KG, its frozen features and per-domain
//! downstream tasks, stored on disk behind a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_multidomain_kg, parse_items_file, parse_triple_file, DomainSource, FeatureTable, MultiDomainKG};
use crate::error::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 768;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: String,
    pub valid: String,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPaths {
    pub train: String,
    pub valid: String,
    pub test: String,
    pub n_labels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub name: String,
    pub triples_path: String,
    pub items_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactions: Option<SplitPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<TextPaths>,
}

/// On-disk description of a benchmark. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub domains: Vec<ManifestDomain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<String>,
    /// Used to hash entity names when no feature file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionSplits {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExample {
    pub label: usize,
    pub item: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTask {
    pub n_labels: usize,
    pub train: Vec<TextExample>,
    pub valid: Vec<TextExample>,
    pub test: Vec<TextExample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainTasks {
    pub domain: String,
    pub interactions: Option<InteractionSplits>,
    pub text: Option<TextTask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub kg: MultiDomainKG,
    pub features: FeatureTable,
    pub tasks: Vec<DomainTasks>,
}

impl Benchmark {
    pub fn task(&self, domain: &str) -> Result<&DomainTasks> {
        self.tasks
            .iter()
            .find(|t| t.domain == domain)
            .ok_or_else(|| Error::Config(format!("unknown domain {domain:?}")))
    }
}

/// Maps a 1–5 review score to a 0-based class index.
pub fn review_label(score: u32) -> Result<usize> {
    match score {
        1..=5 => Ok(score as usize - 1),
        _ => Err(Error::Config(format!("review score {score} outside 1..=5"))),
    }
}

fn tsv_fields<'a>(path: &Path, lineno: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.splitn(n, '\t').collect();
    if fields.len() != n || fields.iter().any(|f| f.is_empty()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: format!("expected {n} non-empty tab-separated fields"),
        });
    }
    Ok(fields)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
}

pub fn read_interactions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    data_lines(&text)
        .map(|(n, l)| {
            let f = tsv_fields(path, n, l, 2)?;
            if f[1].contains('\t') {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n,
                    message: "expected 2 fields".into(),
                });
            }
            Ok((f[0].to_string(), f[1].to_string()))
        })
        .collect()
}

pub fn read_text_examples(path: &Path) -> Result<Vec<TextExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    data_lines(&text)
        .map(|(n, l)| {
            let f = tsv_fields(path, n, l, 3)?;
            let label = f[0].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: n,
                message: format!("label {:?} is not a non-negative integer", f[0]),
            })?;
            Ok(TextExample {
                label,
                item: f[1].to_string(),
                text: f[2].to_string(),
            })
        })
        .collect()
}

fn interactions_tsv(rows: &[(String, String)]) -> String {
    rows.iter().map(|(u, i)| format!("{u}\t{i}\n")).collect()
}

fn text_tsv(rows: &[TextExample]) -> String {
    rows.iter()
        .map(|e| format!("{}\t{}\t{}\n", e.label, e.item, e.text))
        .collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes every component under `dir` and returns the manifest path.
pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest {
        domains: Vec::new(),
        features_path: Some("features.mdkf".into()),
        feature_dim: None,
        feature_seed: None,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bench.features.write(&dir.join("features.mdkf"))?;
    for (src, task) in bench.kg.to_sources().iter().zip(&bench.tasks) {
        let name = &src.name;
        let triples: String = src
            .triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
            .collect();
        let items: String = src.items.iter().map(|i| format!("{i}\n")).collect();
        write(&dir.join(name).join("triples.tsv"), triples)?;
        write(&dir.join(name).join("items.txt"), items)?;
        let mut entry = ManifestDomain {
            name: name.clone(),
            triples_path: format!("{name}/triples.tsv"),
            items_path: format!("{name}/items.txt"),
            interactions: None,
            text: None,
        };
        if let Some(inter) = &task.interactions {
            for (split, rows) in [("train", &inter.train), ("valid", &inter.valid), ("test", &inter.test)] {
                write(&dir.join(name).join(format!("rec_{split}.tsv")), interactions_tsv(rows))?;
            }
            entry.interactions = Some(SplitPaths {
                train: format!("{name}/rec_train.tsv"),
                valid: format!("{name}/rec_valid.tsv"),
                test: format!("{name}/rec_test.tsv"),
            });
        }
        if let Some(text) = &task.text {
            for (split, rows) in [("train", &text.train), ("valid", &text.valid), ("test", &text.test)] {
                write(&dir.join(name).join(format!("text_{split}.tsv")), text_tsv(rows))?;
            }
            entry.text = Some(TextPaths {
                train: format!("{name}/text_train.tsv"),
                valid: format!("{name}/text_valid.tsv"),
                test: format!("{name}/text_test.tsv"),
                n_labels: text.n_labels,
            });
        }
        manifest.domains.push(entry);
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&path, json + "\n")?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a benchmark from its manifest. Without a feature file, entity
/// names are hashed.
pub fn load_benchmark(manifest_path: &Path) -> Result<Benchmark> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.domains.is_empty() {
        return Err(Error::Config("manifest lists no domains".into()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut sources = Vec::new();
    let mut tasks = Vec::new();
    for d in &manifest.domains {
        sources.push(DomainSource {
            name: d.name.clone(),
            triples: parse_triple_file(&base.join(&d.triples_path))?,
            items: parse_items_file(&base.join(&d.items_path))?,
        });
        let interactions = match &d.interactions {
            Some(p) => Some(InteractionSplits {
                train: read_interactions(&base.join(&p.train))?,
                valid: read_interactions(&base.join(&p.valid))?,
                test: read_interactions(&base.join(&p.test))?,
            }),
            None => None,
        };
        let text = match &d.text {
            Some(p) => {
                let task = TextTask {
                    n_labels: p.n_labels,
                    train: read_text_examples(&base.join(&p.train))?,
                    valid: read_text_examples(&base.join(&p.valid))?,
                    test: read_text_examples(&base.join(&p.test))?,
                };
                if p.n_labels < 2 {
                    return Err(Error::Config(format!(
                        "domain {:?} text task needs at least 2 labels",
                        d.name
                    )));
                }
                let all = task.train.iter().chain(&task.valid).chain(&task.test);
                if let Some(bad) = all.clone().find(|e| e.label >= p.n_labels) {
                    return Err(Error::Config(format!(
                        "label {} out of range for {} classes in domain {:?}",
                        bad.label, p.n_labels, d.name
                    )));
                }
                Some(task)
            }
            None => None,
        };
        tasks.push(DomainTasks {
            domain: d.name.clone(),
            interactions,
            text,
        });
    }
    let kg = build_multidomain_kg(&sources)?;
    let features = match &manifest.features_path {
        Some(p) => FeatureTable::read(&base.join(p))?,
        None => FeatureTable::hashed(
            kg.entities().names(),
            manifest.feature_dim.unwrap_or(DEFAULT_FEATURE_DIM),
            manifest.feature_seed.unwrap_or(0),
        ),
    };
    if features.rows() != kg.num_entities() {
        return Err(Error::Config(format!(
            "feature table has {} rows but the graph has {} entities",
            features.rows(),
            kg.num_entities()
        )));
    }
    Ok(Benchmark { kg, features, tasks })
}
