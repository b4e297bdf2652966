use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{load_features, FeatureMap};
use super::vocab::Vocabulary;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Contract(format!("unknown split `{other}`"))),
        }
    }
}

// On-disk JSON schema.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub version: String,
    /// Feature file path, relative to the JSON file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub dialogs: Vec<DialogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRecord {
    pub image_id: String,
    /// Dialogs without a split belong to every split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub caption: String,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub question: String,
    pub answer: String,
    pub answer_options: Vec<String>,
    pub gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_grounding: Option<Vec<usize>>,
}

impl DatasetFile {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.dialogs.iter().flat_map(|d| {
            std::iter::once(d.caption.as_str()).chain(d.rounds.iter().flat_map(|r| {
                [r.question.as_str(), r.answer.as_str()]
                    .into_iter()
                    .chain(r.answer_options.iter().map(String::as_str))
            }))
        })
    }

    /// Structural checks that serde cannot express; errors carry a JSON path.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: String, msg: String| Err(Error::Parse { path, msg });
        for (i, d) in self.dialogs.iter().enumerate() {
            if d.rounds.is_empty() {
                return bad(format!("dialogs[{i}].rounds"), "dialog has no rounds".into());
            }
            for (j, r) in d.rounds.iter().enumerate() {
                let at = |f: &str| format!("dialogs[{i}].rounds[{j}].{f}");
                let n = r.answer_options.len();
                if n == 0 {
                    return bad(at("answer_options"), "no candidates".into());
                }
                if r.gt_index >= n {
                    return bad(at("gt_index"), format!("{} out of range for {n} candidates", r.gt_index));
                }
                if let Some(rel) = &r.relevance {
                    if rel.len() != n {
                        return bad(at("relevance"), format!("length {} != {n} candidates", rel.len()));
                    }
                    if let Some(v) = rel.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return bad(at("relevance"), format!("value {v} outside [0, 1]"));
                    }
                    let max = rel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if rel[r.gt_index] < max {
                        return bad(at("relevance"), "ground truth is not maximally relevant".into());
                    }
                }
            }
        }
        Ok(())
    }
}

// In-memory, tokenized form.

#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub question_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
    pub gt_grounding: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogExample {
    pub image_id: String,
    /// `[μ, d_v]`
    pub region_features: Tensor,
    pub caption_tokens: Vec<usize>,
    pub rounds: Vec<Round>,
}

impl DialogExample {
    pub fn num_regions(&self) -> usize {
        self.region_features.rows()
    }

    /// History for round `t`: the caption, then one concatenated Q-A pair
    /// per earlier round. Always `t + 1` elements.
    pub fn history(&self, t: usize) -> Vec<Vec<usize>> {
        std::iter::once(self.caption_tokens.clone())
            .chain(self.rounds[..t].iter().map(|r| {
                let mut qa = r.question_tokens.clone();
                qa.extend_from_slice(&r.answer_tokens);
                qa
            }))
            .collect()
    }
}

/// Immutable collection of examples sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct DialogDataset {
    pub vocab: Arc<Vocabulary>,
    pub examples: Vec<DialogExample>,
}

impl DialogDataset {
    pub fn num_units(&self) -> usize {
        self.examples.iter().map(|e| e.rounds.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_relevance(&self) -> bool {
        self.rounds().all(|r| r.relevance.is_some())
    }

    pub fn has_grounding(&self) -> bool {
        self.rounds().all(|r| r.gt_grounding.is_some())
    }

    fn rounds(&self) -> impl Iterator<Item = &Round> {
        self.examples.iter().flat_map(|e| e.rounds.iter())
    }

    /// Tokenizes the dialogs of `split` (file order) and attaches features.
    pub fn from_file(
        file: &DatasetFile,
        features: &FeatureMap,
        split: Split,
        vocab: Arc<Vocabulary>,
    ) -> Result<Self> {
        file.validate()?;
        let mut examples = Vec::new();
        for (i, d) in file.dialogs.iter().enumerate() {
            if d.split.is_some_and(|s| s != split) {
                continue;
            }
            let feats = features
                .get(&d.image_id)
                .ok_or_else(|| Error::MissingFeature(d.image_id.clone()))?;
            let mu = feats.rows();
            let mut rounds = Vec::with_capacity(d.rounds.len());
            for (j, r) in d.rounds.iter().enumerate() {
                if let Some(g) = &r.gt_grounding {
                    if let Some(&bad) = g.iter().find(|&&k| k >= mu) {
                        return Err(Error::Parse {
                            path: format!("dialogs[{i}].rounds[{j}].gt_grounding"),
                            msg: format!("region {bad} out of range for {mu} regions"),
                        });
                    }
                }
                rounds.push(Round {
                    question_tokens: vocab.encode(&r.question),
                    answer_tokens: vocab.encode(&r.answer),
                    candidates: r.answer_options.iter().map(|a| vocab.encode(a)).collect(),
                    gt_index: r.gt_index,
                    relevance: r.relevance.clone(),
                    gt_grounding: r.gt_grounding.clone(),
                });
            }
            examples.push(DialogExample {
                image_id: d.image_id.clone(),
                region_features: feats.clone(),
                caption_tokens: vocab.encode(&d.caption),
                rounds,
            });
        }
        Ok(DialogDataset { vocab, examples })
    }
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        msg: e.to_string(),
    })?;
    file.validate()?;
    Ok(file)
}

pub fn features_path(json_path: &Path, file: &DatasetFile) -> PathBuf {
    let dir = json_path.parent().unwrap_or(Path::new("."));
    dir.join(file.features.as_deref().unwrap_or("features.bin"))
}

/// Loads `split` from a dataset JSON and its feature file, building the
/// vocabulary from every text in the file.
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<DialogDataset> {
    load_dataset_with_vocab(path, split, None)
}

pub fn load_dataset_with_vocab(
    path: impl AsRef<Path>,
    split: Split,
    vocab: Option<Arc<Vocabulary>>,
) -> Result<DialogDataset> {
    let path = path.as_ref();
    let file = read_dataset_file(path)?;
    let features = load_features(features_path(path, &file))?;
    let vocab = vocab.unwrap_or_else(|| Arc::new(Vocabulary::build(file.texts())));
    DialogDataset::from_file(&file, &features, split, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::features::save_features;

    fn round(gt: usize, n: usize) -> RoundRecord {
        RoundRecord {
            question: "is it red ?".into(),
            answer: "yes".into(),
            answer_options: (0..n).map(|i| format!("option {i}")).collect(),
            gt_index: gt,
            relevance: None,
            gt_grounding: None,
        }
    }

    fn file(rounds_per: usize, n: usize) -> DatasetFile {
        DatasetFile {
            version: "1.0".into(),
            features: Some("feats.bin".into()),
            dialogs: ["img_a", "img_b"]
                .iter()
                .map(|id| DialogRecord {
                    image_id: id.to_string(),
                    split: None,
                    caption: "a man on a horse".into(),
                    rounds: (0..rounds_per).map(|t| round(t % n, n)).collect(),
                })
                .collect(),
        }
    }

    fn write(dir: &Path, f: &DatasetFile, ids: &[&str]) -> PathBuf {
        let mut feats = FeatureMap::new();
        for id in ids {
            feats.insert(id.to_string(), Tensor::zeros([3, 4]));
        }
        save_features(dir.join("feats.bin"), &feats).unwrap();
        let p = dir.join("data.json");
        std::fs::write(&p, serde_json::to_string(f).unwrap()).unwrap();
        p
    }

    #[test]
    fn loads_two_images_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &file(2, 5), &["img_a", "img_b"]);
        let ds = load_dataset(&p, Split::Val).unwrap();
        assert_eq!(ds.examples.len(), 2);
        assert_eq!(ds.examples[0].image_id, "img_a");
        assert_eq!(ds.num_units(), 4);
    }

    #[test]
    fn ten_round_dialogs_with_100_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &file(10, 100), &["img_a", "img_b"]);
        let ds = load_dataset(&p, Split::Val).unwrap();
        assert!(ds.examples.iter().all(|e| e.rounds.len() == 10));
        assert!(ds.examples[0].rounds.iter().all(|r| r.candidates.len() == 100));
        assert_eq!(ds.examples[0].history(9).len(), 10);
    }

    #[test]
    fn gt_index_at_boundary_is_a_parse_error() {
        let mut f = file(1, 100);
        f.dialogs[1].rounds[0].gt_index = 100;
        match f.validate() {
            Err(Error::Parse { path, .. }) => assert_eq!(path, "dialogs[1].rounds[0].gt_index"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_features_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &file(1, 3), &["img_a"]);
        assert!(matches!(load_dataset(&p, Split::Train), Err(Error::MissingFeature(id)) if id == "img_b"));
    }

    #[test]
    fn schema_violation_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, r#"{"version": "1.0", "dialogs": [{"image_id": 3}]}"#).unwrap();
        assert!(matches!(load_dataset(&p, Split::Train), Err(Error::Parse { .. })));
    }

    #[test]
    fn split_filter() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = file(1, 3);
        f.dialogs[0].split = Some(Split::Train);
        f.dialogs[1].split = Some(Split::Val);
        let p = write(dir.path(), &f, &["img_a", "img_b"]);
        let tr = load_dataset(&p, Split::Train).unwrap();
        let va = load_dataset(&p, Split::Val).unwrap();
        assert_eq!(tr.examples[0].image_id, "img_a");
        assert_eq!(va.examples[0].image_id, "img_b");
        assert_eq!(tr.examples.len() + va.examples.len(), 2);
    }

    #[test]
    fn relevance_must_peak_at_gt() {
        let mut f = file(1, 3);
        f.dialogs[0].rounds[0].relevance = Some(vec![0.0, 1.0, 0.5]);
        f.dialogs[0].rounds[0].gt_index = 2;
        assert!(matches!(f.validate(), Err(Error::Parse { .. })));
    }

    #[test]
    fn history_holds_caption_then_pairs() {
        let vocab = Arc::new(Vocabulary::build(file(3, 2).texts()));
        let mut feats = FeatureMap::new();
        feats.insert("img_a".into(), Tensor::zeros([2, 2]));
        feats.insert("img_b".into(), Tensor::zeros([2, 2]));
        let ds = DialogDataset::from_file(&file(3, 2), &feats, Split::Train, vocab.clone()).unwrap();
        let e = &ds.examples[0];
        assert_eq!(e.history(0), vec![e.caption_tokens.clone()]);
        let h = e.history(2);
        assert_eq!(h.len(), 3);
        assert_eq!(vocab.decode(&h[1]), "is it red ? yes");
    }
}
