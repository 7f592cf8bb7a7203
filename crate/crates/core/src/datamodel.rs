//! Manifest schema, study-level splits and nested training-set titration.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_COLUMNS: [&str; 11] = [
    "video_id",
    "study_id",
    "path",
    "n_frames",
    "height",
    "width",
    "fps",
    "lvh_label",
    "severe_as_label",
    "split",
    "excluded_flow_gradient",
];

pub const DEFAULT_RATIOS: [f64; 6] = [0.01, 0.05, 0.10, 0.25, 0.50, 1.00];
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.75, 0.10, 0.15);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    InternalTest,
    ExternalTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::InternalTest => "internal_test",
            Split::ExternalTest => "external_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "internal_test" | "test" => Ok(Split::InternalTest),
            "external_test" => Ok(Split::ExternalTest),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Lvh,
    SevereAs,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Lvh => "lvh",
            Outcome::SevereAs => "severe_as",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lvh" => Ok(Outcome::Lvh),
            "severe_as" => Ok(Outcome::SevereAs),
            other => Err(format!("unknown outcome {other:?} (expected lvh or severe_as)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub study_id: String,
    pub path: PathBuf,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudyRecord {
    pub study_id: String,
    pub lvh_label: Option<bool>,
    pub severe_as_label: Option<bool>,
    pub split: Option<Split>,
    pub excluded_flow_gradient: bool,
}

impl StudyRecord {
    pub fn new(study_id: impl Into<String>) -> Self {
        Self {
            study_id: study_id.into(),
            lvh_label: None,
            severe_as_label: None,
            split: None,
            excluded_flow_gradient: false,
        }
    }

    pub fn label(&self, outcome: Outcome) -> Option<bool> {
        match outcome {
            Outcome::Lvh => self.lvh_label,
            Outcome::SevereAs => self.severe_as_label,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub studies: Vec<StudyRecord>,
    pub videos: Vec<VideoRecord>,
    /// `#`-prefixed lines preceding the header, without the marker.
    pub comments: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    video_id: String,
    study_id: String,
    path: String,
    n_frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    lvh_label: String,
    severe_as_label: String,
    split: String,
    excluded_flow_gradient: String,
}

fn parse_label(s: &str) -> std::result::Result<Option<bool>, String> {
    match s.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(format!("label must be 0, 1 or empty, got {other:?}")),
    }
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(format!("flag must be true/false, got {other:?}")),
    }
}

fn fmt_label(l: Option<bool>) -> &'static str {
    match l {
        None => "",
        Some(false) => "0",
        Some(true) => "1",
    }
}

impl Manifest {
    pub fn study(&self, study_id: &str) -> Option<&StudyRecord> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    /// Video indices grouped by study, in manifest order.
    pub fn videos_by_study(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, v) in self.videos.iter().enumerate() {
            map.entry(v.study_id.clone()).or_default().push(i);
        }
        map
    }

    pub fn studies_in(&self, split: Split) -> Vec<StudyRecord> {
        self.studies
            .iter()
            .filter(|s| s.split == Some(split))
            .cloned()
            .collect()
    }

    /// Indices of videos whose study is in `study_ids`.
    pub fn videos_of(&self, study_ids: &HashSet<&str>) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| study_ids.contains(self.videos[i].study_id.as_str()))
            .collect()
    }

    /// Check referential integrity between videos and studies.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.video_id.as_str()) {
                return Err(Error::DuplicateVideoId(v.video_id.clone()));
            }
        }
        let studies: HashSet<&str> = self.studies.iter().map(|s| s.study_id.as_str()).collect();
        if studies.len() != self.studies.len() {
            return Err(Error::Config("duplicate study_id in study table".into()));
        }
        for v in &self.videos {
            if !studies.contains(v.study_id.as_str()) {
                return Err(Error::DanglingStudy {
                    video_id: v.video_id.clone(),
                    study_id: v.study_id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Drop studies flagged `excluded_flow_gradient` together with their videos.
    pub fn drop_excluded(&mut self) {
        let excluded: HashSet<String> = self
            .studies
            .iter()
            .filter(|s| s.excluded_flow_gradient)
            .map(|s| s.study_id.clone())
            .collect();
        self.studies.retain(|s| !excluded.contains(&s.study_id));
        self.videos.retain(|v| !excluded.contains(&v.study_id));
    }

    /// Resolve relative video paths against the manifest's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        for v in &mut self.videos {
            if v.path.is_relative() {
                v.path = base.join(&v.path);
            }
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let study: HashMap<&str, &StudyRecord> = self.studies.iter().map(|s| (s.study_id.as_str(), s)).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_COLUMNS)?;
        for v in &self.videos {
            let s = study.get(v.study_id.as_str()).ok_or_else(|| Error::DanglingStudy {
                video_id: v.video_id.clone(),
                study_id: v.study_id.clone(),
            })?;
            w.write_record([
                v.video_id.clone(),
                v.study_id.clone(),
                v.path.to_string_lossy().into_owned(),
                v.n_frames.to_string(),
                v.height.to_string(),
                v.width.to_string(),
                format!("{}", v.fps),
                fmt_label(s.lvh_label).to_string(),
                fmt_label(s.severe_as_label).to_string(),
                s.split.map(|x| x.as_str()).unwrap_or("").to_string(),
                s.excluded_flow_gradient.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, self.to_csv_string()?.as_bytes())
    }
}

/// Parse manifest text. Study attributes are repeated on every video row and
/// must agree; excluded studies are dropped.
pub fn parse_manifest(text: &str, source: &Path) -> Result<Manifest> {
    let comments = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_COLUMNS {
        return Err(Error::Manifest {
            path: source.to_path_buf(),
            line: 1,
            message: format!("header must be exactly {}", MANIFEST_COLUMNS.join(",")),
        });
    }
    let mut studies: Vec<StudyRecord> = Vec::new();
    let mut study_index: HashMap<String, usize> = HashMap::new();
    let mut videos = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = (i + 2) as u64;
        let err = |message: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            message,
        };
        let row = row.map_err(|e| err(e.to_string()))?;
        if !seen.insert(row.video_id.clone()) {
            return Err(Error::DuplicateVideoId(row.video_id));
        }
        if row.n_frames == 0 || row.height == 0 || row.width == 0 || !(row.fps > 0.0) {
            return Err(err("n_frames, height, width and fps must be positive".into()));
        }
        let split = match row.split.as_str() {
            "" => None,
            s => Some(s.parse::<Split>().map_err(err)?),
        };
        let record = StudyRecord {
            study_id: row.study_id.clone(),
            lvh_label: parse_label(&row.lvh_label).map_err(err)?,
            severe_as_label: parse_label(&row.severe_as_label).map_err(err)?,
            split,
            excluded_flow_gradient: parse_flag(&row.excluded_flow_gradient).map_err(err)?,
        };
        match study_index.get(&row.study_id) {
            Some(&k) if studies[k] != record => {
                return Err(err(format!(
                    "study {} has conflicting attributes across rows",
                    row.study_id
                )));
            }
            Some(_) => {}
            None => {
                study_index.insert(row.study_id.clone(), studies.len());
                studies.push(record);
            }
        }
        videos.push(VideoRecord {
            video_id: row.video_id,
            study_id: row.study_id,
            path: PathBuf::from(row.path),
            n_frames: row.n_frames,
            height: row.height,
            width: row.width,
            fps: row.fps,
        });
    }
    let mut m = Manifest {
        studies,
        videos,
        comments,
    };
    m.drop_excluded();
    m.validate()?;
    Ok(m)
}

/// Load a manifest, resolve relative paths against its directory and check
/// that every referenced video file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text, path)?;
    m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    for v in &m.videos {
        if !v.path.exists() {
            return Err(Error::io(
                &v.path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "video file referenced by manifest not found",
                ),
            ));
        }
    }
    Ok(m)
}

/// Assign train/val/internal_test at study granularity. Val and test take
/// `floor(fraction * n)` studies; the remainder goes to train.
pub fn split_by_study(studies: &[StudyRecord], fractions: (f64, f64, f64), seed: u64) -> Result<Vec<StudyRecord>> {
    let (tr, va, te) = fractions;
    if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!(
            "{fractions:?} must be non-negative and sum to 1"
        )));
    }
    let buckets = [tr, va, te].iter().filter(|&&f| f > 0.0).count();
    if studies.len() < buckets {
        return Err(Error::InvalidFractions(format!(
            "{} studies cannot fill {buckets} non-empty splits",
            studies.len()
        )));
    }
    let mut ids: Vec<&str> = studies.iter().map(|s| s.study_id.as_str()).collect();
    ids.sort_unstable();
    let mut r = rng::stream(seed, &[rng::tag("split_by_study")]);
    ids.shuffle(&mut r);
    let n = ids.len();
    let n_val = (va * n as f64 + 1e-9).floor() as usize;
    let n_test = (te * n as f64 + 1e-9).floor() as usize;
    let assign: HashMap<&str, Split> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let s = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::InternalTest
            } else {
                Split::Train
            };
            (id, s)
        })
        .collect();
    Ok(studies
        .iter()
        .map(|s| StudyRecord {
            split: Some(assign[s.study_id.as_str()]),
            ..s.clone()
        })
        .collect())
}

/// `floor(ratio * total)`, robust to binary representation of the ratio.
pub fn titration_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64 + 1e-9).floor() as usize
}

/// Nested subset of the training studies: one seeded shuffle, then a prefix of
/// `floor(ratio * n)` studies.
pub fn titrate(train_studies: &[StudyRecord], ratio: f64, seed: u64) -> Result<Vec<StudyRecord>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let count = titration_count(train_studies.len(), ratio);
    if count == 0 {
        return Err(Error::TitrationEmpty {
            ratio,
            total: train_studies.len(),
        });
    }
    let mut order: Vec<&StudyRecord> = train_studies.iter().collect();
    order.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    let mut r = rng::stream(seed, &[rng::tag("titrate")]);
    order.shuffle(&mut r);
    Ok(order.into_iter().take(count).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str =
        "video_id,study_id,path,n_frames,height,width,fps,lvh_label,severe_as_label,split,excluded_flow_gradient";

    fn studies(n: usize) -> Vec<StudyRecord> {
        (0..n).map(|i| StudyRecord::new(format!("s{i:04}"))).collect()
    }

    #[test]
    fn parses_structure_and_absent_labels() {
        let text = format!(
            "# config_sha256=abc\n{HEADER}\nv1,s1,a.raw,30,112,112,20,1,0,train,false\n\
             v2,s1,b.raw,30,112,112,20,1,0,train,false\nv3,s2,c.raw,40,112,112,20,,1,,false\n"
        );
        let m = parse_manifest(&text, Path::new("m.csv")).unwrap();
        assert_eq!((m.studies.len(), m.videos.len()), (2, 3));
        assert_eq!(m.comments, vec!["config_sha256=abc".to_string()]);
        let s2 = m.study("s2").unwrap();
        assert_eq!((s2.lvh_label, s2.severe_as_label, s2.split), (None, Some(true), None));
        let round = parse_manifest(&m.to_csv_string().unwrap(), Path::new("m.csv")).unwrap();
        assert_eq!(round, m);
    }

    #[test]
    fn duplicate_video_id_is_an_error() {
        let text = format!("{HEADER}\nv1,s1,a,3,8,8,20,1,0,,false\nv1,s2,b,3,8,8,20,0,0,,false\n");
        let e = parse_manifest(&text, Path::new("m.csv")).unwrap_err();
        assert!(e.to_string().contains("duplicate video_id"), "{e}");
    }

    #[test]
    fn excluded_studies_are_dropped_and_dangling_detected() {
        let text = format!("{HEADER}\nv1,s1,a,3,8,8,20,1,0,,true\nv2,s2,b,3,8,8,20,0,0,,false\n");
        let m = parse_manifest(&text, Path::new("m.csv")).unwrap();
        assert_eq!(m.videos.len(), 1);
        assert_eq!(m.studies.len(), 1);

        let mut bad = m.clone();
        bad.videos[0].study_id = "nope".into();
        assert!(matches!(bad.validate(), Err(Error::DanglingStudy { .. })));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = studies(100);
        let a = split_by_study(&s, DEFAULT_FRACTIONS, 3).unwrap();
        let count = |sp| a.iter().filter(|x| x.split == Some(sp)).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::InternalTest)),
            (75, 10, 15)
        );
        assert_eq!(split_by_study(&s, DEFAULT_FRACTIONS, 3).unwrap(), a);
        assert_ne!(split_by_study(&s, DEFAULT_FRACTIONS, 4).unwrap(), a);
        assert!(split_by_study(&studies(2), DEFAULT_FRACTIONS, 0).is_err());
        assert!(split_by_study(&s, (0.5, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn reproduces_published_titration_counts() {
        let lvh = [51, 259, 519, 1298, 2597, 5194];
        let sas = [53, 265, 531, 1327, 2655, 5311];
        for (i, r) in DEFAULT_RATIOS.iter().enumerate() {
            assert_eq!(titration_count(5194, *r), lvh[i]);
            assert_eq!(titration_count(5311, *r), sas[i]);
        }
        let s = studies(5194);
        assert_eq!(titrate(&s, 0.10, 1).unwrap().len(), 519);
    }

    #[test]
    fn titrate_identity_and_empty() {
        let s = studies(20);
        let mut all: Vec<_> = titrate(&s, 1.0, 9).unwrap().into_iter().map(|x| x.study_id).collect();
        all.sort();
        assert_eq!(all, s.iter().map(|x| x.study_id.clone()).collect::<Vec<_>>());
        let e = titrate(&s, 0.01, 9).unwrap_err();
        assert!(e.to_string().contains("titration subset empty"), "{e}");
        assert!(titrate(&s, 0.0, 9).is_err());
    }

    proptest! {
        #[test]
        fn titration_is_nested(n in 1usize..400, seed in any::<u64>()) {
            let s = studies(n);
            let mut prev: Option<HashSet<String>> = None;
            for r in DEFAULT_RATIOS {
                let Ok(sub) = titrate(&s, r, seed) else { continue };
                prop_assert_eq!(sub.len(), titration_count(n, r));
                let set: HashSet<String> = sub.into_iter().map(|x| x.study_id).collect();
                if let Some(p) = &prev {
                    prop_assert!(p.is_subset(&set));
                }
                prev = Some(set);
            }
        }

        #[test]
        fn split_partitions(n in 3usize..300, seed in any::<u64>()) {
            let a = split_by_study(&studies(n), DEFAULT_FRACTIONS, seed).unwrap();
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.iter().all(|s| s.split.is_some()));
        }
    }
}
