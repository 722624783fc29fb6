//! `validate`: invariant checks over chemistry files, episode files or dataset directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use alchemy_core::{Chemistry, Episode};
use serde::Serialize;

use crate::dataset::{self, read_jsonl, ChemistryRow, EpisodeRow, CHEMISTRIES_FILE, MANIFEST_FILE, TRAIN_FILE, VAL_FILE};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineViolation {
    pub file: String,
    pub line: usize,
    pub invariant: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct ValidationSummary {
    pub path: String,
    pub kind: String,
    pub records: usize,
    pub passed: bool,
    pub violation_counts: BTreeMap<String, usize>,
    pub violations: Vec<LineViolation>,
}

impl ValidationSummary {
    fn push(&mut self, file: &Path, line: usize, invariant: &str, description: String) {
        *self.violation_counts.entry(invariant.to_string()).or_default() += 1;
        self.violations.push(LineViolation {
            file: file.display().to_string(),
            line,
            invariant: invariant.to_string(),
            description,
        });
    }

    fn finish(mut self) -> Self {
        self.passed = self.violations.is_empty();
        self
    }
}

/// Either a wrapped row or a bare chemistry object.
#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ChemistryLine {
    Row(ChemistryRow),
    Bare(Chemistry),
}

fn check_chemistries(path: &Path, summary: &mut ValidationSummary) -> Result<BTreeMap<u32, Chemistry>, CliError> {
    let lines: Vec<ChemistryLine> = read_jsonl(path).map_err(|e| match e {
        CliError::Parse { path, line, message } if message.contains("did not match any variant") => CliError::Parse {
            path,
            line,
            message: "not a chemistry record".into(),
        },
        other => other,
    })?;
    let mut out = BTreeMap::new();
    for (i, l) in lines.into_iter().enumerate() {
        let (id, chem) = match l {
            ChemistryLine::Row(r) => (r.id, r.chemistry),
            ChemistryLine::Bare(c) => (i as u32, c),
        };
        summary.records += 1;
        for v in chem.validate().violations {
            summary.push(path, i + 1, &v.invariant, v.description);
        }
        if out.insert(id, chem).is_some() {
            summary.push(path, i + 1, "unique-id", format!("chemistry id {id} repeated"));
        }
    }
    Ok(out)
}

fn check_episodes(path: &Path, chems: &BTreeMap<u32, Chemistry>, summary: &mut ValidationSummary) -> Result<Vec<Episode>, CliError> {
    let rows: Vec<EpisodeRow> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        summary.records += 1;
        let e = row.episode;
        match chems.get(&e.chemistry_id) {
            None => summary.push(path, i + 1, "chemistry-reference", format!("unknown chemistry {}", e.chemistry_id)),
            Some(c) => {
                for p in e.check(c) {
                    summary.push(path, i + 1, "episode", p);
                }
            }
        }
        if row.target_class != e.target_class() {
            summary.push(path, i + 1, "target-class", format!("target_class {} disagrees with target stone", row.target_class));
        }
        out.push(e);
    }
    Ok(out)
}

fn first_line(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let (i, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| CliError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "empty file".into(),
        })?;
    serde_json::from_str(line).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: i + 1,
        message: e.to_string(),
    })
}

pub fn cmd_validate(path: &Path) -> Result<ValidationSummary, CliError> {
    let mut summary = ValidationSummary {
        path: path.display().to_string(),
        ..Default::default()
    };
    if path.is_dir() {
        summary.kind = "dataset".into();
        let chems = check_chemistries(&path.join(CHEMISTRIES_FILE), &mut summary)?;
        let train = check_episodes(&path.join(TRAIN_FILE), &chems, &mut summary)?;
        let val = check_episodes(&path.join(VAL_FILE), &chems, &mut summary)?;
        let manifest_path = path.join(MANIFEST_FILE);
        if let Err(e) = dataset::load(path) {
            summary.push(&manifest_path, 0, "manifest", e.to_string());
        } else {
            let train_ids: std::collections::BTreeSet<u32> = train.iter().map(|e| e.chemistry_id).collect();
            if let Some(e) = val.iter().find(|e| train_ids.contains(&e.chemistry_id)) {
                summary.push(&manifest_path, 0, "disjoint-split", format!("chemistry {} in both splits", e.chemistry_id));
            }
        }
        return Ok(summary.finish());
    }
    let probe = first_line(path)?;
    let is_episode = probe.get("task_kind").is_some();
    if is_episode {
        summary.kind = "episodes".into();
        let chem_path = path.with_file_name(CHEMISTRIES_FILE);
        if !chem_path.exists() {
            return Err(CliError::Validation(format!(
                "{}: episode files are validated against a sibling {CHEMISTRIES_FILE}",
                path.display()
            )));
        }
        let mut scratch = ValidationSummary::default();
        let chems = check_chemistries(&chem_path, &mut scratch)?;
        check_episodes(path, &chems, &mut summary)?;
    } else {
        summary.kind = "chemistries".into();
        check_chemistries(path, &mut summary)?;
    }
    Ok(summary.finish())
}
