//! Newline-delimited dataset files and their manifest.
//!
//! Each line is one self-describing JSON record:
//!
//! ```text
//! {"format_version":1,"id":0,"regime":"productivity","phase":"train",
//!  "strategy":"perturb_one",
//!  "rules":[{"attribute":"number","kind":"unary","variant":"progression","params":{"step":1}}, ...],
//!  "context":[{"position_mask":7,"type":2,"size":1,"color":4}, ...8 panels],
//!  "candidates":[...8 panels],"answer_index":3}
//! ```
//!
//! A layout without a rule simply has no `position` entry in `rules`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gen::{fold_sizes, generate_phase, GenError};
use crate::rpm::{Attribute, Cycle, DistractorStrategy, PanelSpec, Phase, Regime, Relation, RelationKind, RpmInstance, RuleSet};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        line: usize,
        found: u64,
        expected: u32,
    },
    #[error(transparent)]
    Generation(#[from] GenError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RuleParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<Cycle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub attribute: Attribute,
    pub kind: RelationKind,
    pub variant: String,
    pub params: RuleParams,
}

impl RuleRecord {
    pub fn new(attribute: Attribute, relation: Relation) -> Self {
        let (variant, params) = match relation {
            Relation::Constant => ("constant", RuleParams::default()),
            Relation::Progression(s) => (
                "progression",
                RuleParams {
                    step: Some(s),
                    cycle: None,
                },
            ),
            Relation::ArithmeticPlus => ("arithmetic_plus", RuleParams::default()),
            Relation::ArithmeticMinus => ("arithmetic_minus", RuleParams::default()),
            Relation::DistributeThree(c) => (
                "distribute_three",
                RuleParams {
                    step: None,
                    cycle: Some(c),
                },
            ),
        };
        RuleRecord {
            attribute,
            kind: relation.kind(),
            variant: variant.into(),
            params,
        }
    }

    pub fn relation(&self) -> Result<Relation, String> {
        let rel = match (self.variant.as_str(), &self.params) {
            ("constant", _) => Relation::Constant,
            ("progression", RuleParams { step: Some(s), .. }) => Relation::Progression(*s),
            ("arithmetic_plus", _) => Relation::ArithmeticPlus,
            ("arithmetic_minus", _) => Relation::ArithmeticMinus,
            ("distribute_three", RuleParams { cycle: Some(c), .. }) => Relation::DistributeThree(*c),
            (v, _) => return Err(format!("unknown or incomplete relation variant `{v}`")),
        };
        if rel.kind() != self.kind {
            return Err(format!("variant `{}` is not of kind {}", self.variant, self.kind.name()));
        }
        Ok(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub format_version: u32,
    pub id: u64,
    pub regime: Regime,
    pub phase: Phase,
    pub strategy: DistractorStrategy,
    pub rules: Vec<RuleRecord>,
    pub context: Vec<PanelSpec>,
    pub candidates: Vec<PanelSpec>,
    pub answer_index: usize,
}

impl InstanceRecord {
    pub fn from_instance(inst: &RpmInstance) -> Self {
        InstanceRecord {
            format_version: FORMAT_VERSION,
            id: inst.id,
            regime: inst.regime,
            phase: inst.phase,
            strategy: inst.strategy,
            rules: inst
                .rules
                .instances()
                .into_iter()
                .map(|r| RuleRecord::new(r.attribute, r.relation))
                .collect(),
            context: inst.context.to_vec(),
            candidates: inst.candidates.to_vec(),
            answer_index: inst.answer_index,
        }
    }

    pub fn to_instance(&self) -> Result<RpmInstance, String> {
        let mut rels: [Option<Relation>; 5] = [None; 5];
        for r in &self.rules {
            let slot = &mut rels[r.attribute as usize];
            if slot.is_some() {
                return Err(format!("duplicate rule for {}", r.attribute));
            }
            *slot = Some(r.relation()?);
        }
        let need = |a: Attribute| rels[a as usize].ok_or_else(|| format!("missing rule for {a}"));
        let rules = RuleSet::new(
            need(Attribute::Number)?,
            rels[Attribute::Position as usize],
            need(Attribute::Type)?,
            need(Attribute::Size)?,
            need(Attribute::Color)?,
        )
        .map_err(|e| e.to_string())?;
        let panels = |v: &[PanelSpec], what: &str| -> Result<[PanelSpec; 8], String> {
            for p in v {
                p.check().map_err(|e| e.to_string())?;
            }
            v.try_into().map_err(|_| format!("{what} must hold 8 panels, found {}", v.len()))
        };
        if self.answer_index >= 8 {
            return Err(format!("answer index {} out of range", self.answer_index));
        }
        Ok(RpmInstance {
            id: self.id,
            regime: self.regime,
            phase: self.phase,
            strategy: self.strategy,
            rules,
            context: panels(&self.context, "context")?,
            candidates: panels(&self.candidates, "candidates")?,
            answer_index: self.answer_index,
        })
    }
}

/// Serializes one instance as a single JSON line (no trailing newline).
pub fn to_line(inst: &RpmInstance) -> String {
    serde_json::to_string(&InstanceRecord::from_instance(inst)).expect("records serialize")
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<RpmInstance, DatasetError> {
    let parse = |msg: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| parse("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(DatasetError::VersionMismatch {
            path: path.to_path_buf(),
            line: line_no,
            found,
            expected: FORMAT_VERSION,
        });
    }
    let rec: InstanceRecord = serde_json::from_value(raw).map_err(|e| parse(e.to_string()))?;
    rec.to_instance().map_err(parse)
}

/// Streaming reader over a dataset file; line numbers are 1-based.
pub struct DatasetReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for DatasetReader {
    type Item = Result<RpmInstance, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(DatasetError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_line(&self.path, self.line_no, &line));
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetReader, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(DatasetReader {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<RpmInstance>, DatasetError> {
    load_dataset(path)?.collect()
}

/// Writes instances one per line and returns the file's SHA-256 digest.
pub fn write_dataset(path: &Path, instances: &[RpmInstance]) -> Result<String, DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut hasher = Sha256::new();
    for inst in instances {
        let mut line = to_line(inst);
        line.push('\n');
        hasher.update(line.as_bytes());
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub phase: Phase,
    /// File name relative to the manifest's directory.
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub regime: Regime,
    pub strategy: DistractorStrategy,
    pub count: usize,
    pub folds: FoldSizes,
    pub seed: u64,
    /// Rule pool the validation fold draws from.
    pub val_pool: Phase,
    pub files: Vec<ManifestFile>,
    /// SHA-256 over the concatenated file digests.
    pub checksum: String,
}

impl DatasetManifest {
    pub fn path_of(&self, dir: &Path, phase: Phase) -> Option<PathBuf> {
        self.files.iter().find(|f| f.phase == phase).map(|f| dir.join(&f.file))
    }
}

pub fn split_file_name(regime: Regime, strategy: DistractorStrategy, phase: Phase) -> String {
    format!("{}_{}_{}.jsonl", regime.name(), strategy.name(), phase.name())
}

pub fn manifest_file_name(regime: Regime, strategy: DistractorStrategy) -> String {
    format!("{}_{}_manifest.json", regime.name(), strategy.name())
}

/// Generates `n` instances split 6/2/2 into train/val/test files under `dir`,
/// plus a manifest. Output bytes depend only on the arguments.
pub fn generate_split(
    regime: Regime,
    strategy: DistractorStrategy,
    n: usize,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    let [train, val, test] = fold_sizes(n);
    if n < 10 {
        return Err(GenError::TooFewInstances(n).into());
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    let mut hasher = Sha256::new();
    for phase in Phase::ALL {
        let instances = generate_phase(regime, phase, strategy, n, seed)?;
        let file = split_file_name(regime, strategy, phase);
        let sha256 = write_dataset(&dir.join(&file), &instances)?;
        hasher.update(sha256.as_bytes());
        files.push(ManifestFile {
            phase,
            file,
            count: instances.len(),
            sha256,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        regime,
        strategy,
        count: n,
        folds: FoldSizes { train, val, test },
        seed,
        val_pool: Phase::Train,
        files,
        checksum: hex::encode(hasher.finalize()),
    };
    let path = dir.join(manifest_file_name(regime, strategy));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::VersionMismatch {
            path: path.to_path_buf(),
            line: 1,
            found: manifest.format_version as u64,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}
