//! Dataset files: chemistries, train/val episodes, vocabulary and manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use alchemy_core::seed::derive_seed;
use alchemy_core::task::{build_episodes, split_chemistries, SplitSpec, TaskKind};
use alchemy_core::{generate_chemistry, vocab_spec, Chemistry, Episode};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, DatasetConfig, RunConfig};
use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;
pub const CHEMISTRIES_FILE: &str = "chemistries.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

const CHEMISTRY_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const EPISODE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChemistryRow {
    pub id: u32,
    pub seed: u64,
    pub chemistry: Chemistry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRow {
    #[serde(flatten)]
    pub episode: Episode,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset_hash: String,
    pub task_kind: TaskKind,
    pub k: usize,
    pub dataset: DatasetConfig,
    pub max_seq_len: usize,
    pub split: SplitSpec,
    pub n_chemistries: usize,
    pub n_train_episodes: usize,
    pub n_val_episodes: usize,
    /// SHA-256 of each data file.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Hash over the file hashes; two datasets agree iff this agrees.
    pub fn content_hash(&self) -> String {
        let joined: String = self.files.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        sha256_hex(joined.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub chemistries: BTreeMap<u32, Chemistry>,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
}

impl Dataset {
    pub fn chemistry(&self, id: u32) -> Result<&Chemistry, CliError> {
        self.chemistries
            .get(&id)
            .ok_or_else(|| CliError::Runtime(format!("episode references unknown chemistry {id}")))
    }

    pub fn split(&self, name: &str) -> Result<&[Episode], CliError> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(CliError::Config(format!("split: unknown split {other:?} (train or val)"))),
        }
    }
}

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_root().join("datasets").join(&cfg.dataset_hash()[..12])
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<String, CliError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row).map_err(|e| io_err(path, e))?;
        buf.push(b'\n');
    }
    write_file(path, &buf)?;
    Ok(sha256_hex(&buf))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Parses one JSON value per non-empty line, reporting the 1-based line on failure.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Generates chemistries, splits them and writes all dataset files into `dir`.
pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let d = &cfg.dataset;
    let rows: Vec<ChemistryRow> = (0..d.pool_size)
        .map(|id| {
            let seed = derive_seed(d.seed, &[CHEMISTRY_STREAM, id as u64]);
            generate_chemistry(seed)
                .map(|chemistry| ChemistryRow { id, seed, chemistry })
                .map_err(|e| CliError::Runtime(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let ids: Vec<u32> = rows.iter().map(|r| r.id).collect();
    let split = split_chemistries(&ids, d.split_ratio, derive_seed(d.seed, &[SPLIT_STREAM]))
        .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    let spec = cfg.task_spec();
    let episodes_for = |chem_ids: &[u32]| -> Result<Vec<EpisodeRow>, CliError> {
        let mut sorted = chem_ids.to_vec();
        sorted.sort_unstable();
        let mut out = Vec::new();
        for id in sorted {
            let chem = &rows[id as usize].chemistry;
            let eps = build_episodes(chem, id, &spec, derive_seed(d.seed, &[EPISODE_STREAM, id as u64]))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            out.extend(eps.into_iter().map(|episode| EpisodeRow {
                target_class: episode.target_class(),
                episode,
            }));
        }
        Ok(out)
    };
    let train = episodes_for(&split.train_chemistries)?;
    let val = episodes_for(&split.val_chemistries)?;

    let mut files = BTreeMap::new();
    files.insert(CHEMISTRIES_FILE.to_string(), write_jsonl(&dir.join(CHEMISTRIES_FILE), &rows)?);
    files.insert(TRAIN_FILE.to_string(), write_jsonl(&dir.join(TRAIN_FILE), &train)?);
    files.insert(VAL_FILE.to_string(), write_jsonl(&dir.join(VAL_FILE), &val)?);
    let vocab = vocab_spec().to_tsv();
    write_file(&dir.join(VOCAB_FILE), vocab.as_bytes())?;
    files.insert(VOCAB_FILE.to_string(), sha256_hex(vocab.as_bytes()));

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dataset_hash: cfg.dataset_hash(),
        task_kind: cfg.task_kind,
        k: cfg.k,
        dataset: d.clone(),
        max_seq_len: cfg.model.max_seq_len,
        n_chemistries: rows.len(),
        n_train_episodes: train.len(),
        n_val_episodes: val.len(),
        split,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads a dataset directory, checking file hashes against the manifest.
pub fn load(dir: &Path) -> Result<Dataset, CliError> {
    let manifest = read_manifest(dir)?;
    for (name, expected) in &manifest.files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        if &sha256_hex(&bytes) != expected {
            return Err(CliError::Validation(format!("{}: content hash differs from manifest", path.display())));
        }
    }
    let chemistries = read_jsonl::<ChemistryRow>(&dir.join(CHEMISTRIES_FILE))?
        .into_iter()
        .map(|r| (r.id, r.chemistry))
        .collect();
    let episodes = |name: &str| -> Result<Vec<Episode>, CliError> {
        let path = dir.join(name);
        read_jsonl::<EpisodeRow>(&path)?
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                if row.episode.target_class() != row.target_class {
                    return Err(CliError::Validation(format!(
                        "{}:{}: target_class {} disagrees with target stone",
                        path.display(),
                        i + 1,
                        row.target_class
                    )));
                }
                Ok(row.episode)
            })
            .collect()
    };
    Ok(Dataset {
        dir: dir.to_path_buf(),
        train: episodes(TRAIN_FILE)?,
        val: episodes(VAL_FILE)?,
        manifest,
        chemistries,
    })
}

/// Loads the dataset for `cfg`, generating it first when absent.
pub fn ensure(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = dataset_dir(cfg);
    if !dir.join(MANIFEST_FILE).exists() {
        generate(cfg, &dir)?;
    }
    let ds = load(&dir)?;
    if ds.manifest.dataset_hash != cfg.dataset_hash() {
        return Err(CliError::Validation(format!("{}: manifest belongs to another config", dir.display())));
    }
    Ok(ds)
}
