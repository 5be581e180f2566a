//! Labelled corpora in retain / forget / holdout layout.
//!
//! Each split is one or more JSON-lines files. A record carries an `id`, a
//! `text` (or `question` and `answer`, joined with a space, or any fields
//! named by a template) and optionally `paraphrase_of`, naming the sample it
//! rephrases. Paraphrase records are not samples of their own; they supply
//! the text of the paraphrased view.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Error, Label, Result};

pub const DEFAULT_CLASS_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub paraphrase_of: Option<String>,
    /// `path:line` of the record.
    pub source: String,
    /// Explicit prompt / answer pair for generation baselines.
    pub prompt: Option<String>,
    pub answer: Option<String>,
}

/// Where to find the splits and how to read records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Split name to files. Names resolve through `split_aliases`, then as
    /// labels (`retain`, `forget`, `holdout` and their long forms).
    pub split_files: BTreeMap<String, Vec<PathBuf>>,
    pub split_aliases: BTreeMap<String, String>,
    /// e.g. `"Q: {question} A: {answer}"`; placeholders name record fields.
    pub text_template: Option<String>,
    pub prompt_field: Option<String>,
    pub answer_field: Option<String>,
}

impl CorpusSpec {
    pub fn resolve_label(&self, split: &str) -> Result<Label> {
        let name = self.split_aliases.get(split).map(String::as_str).unwrap_or(split);
        name.parse::<Label>()
            .map_err(|_| Error::Config(format!("split `{split}` does not name a label; add an alias")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Base samples sorted by id.
    samples: Vec<Sample>,
    /// Paraphrase records sorted by id.
    paraphrases: Vec<Sample>,
}

impl Corpus {
    /// Validates ids and paraphrase links.
    pub fn new(mut records: Vec<Sample>) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        for w in records.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Data(format!(
                    "duplicate id `{}` at {} and {}",
                    w[0].id, w[0].source, w[1].source
                )));
            }
        }
        let (paraphrases, samples): (Vec<Sample>, Vec<Sample>) =
            records.into_iter().partition(|s| s.paraphrase_of.is_some());
        for p in &paraphrases {
            let target = p.paraphrase_of.as_deref().expect("partitioned");
            match samples.binary_search_by(|s| s.id.as_str().cmp(target)) {
                Err(_) => {
                    return Err(Error::Data(format!(
                        "{}: paraphrase `{}` refers to unknown sample `{target}`",
                        p.source, p.id
                    )))
                }
                Ok(i) if samples[i].label != p.label => {
                    return Err(Error::Data(format!(
                        "{}: paraphrase `{}` is {} but `{target}` is {}",
                        p.source, p.id, p.label, samples[i].label
                    )))
                }
                Ok(_) => {}
            }
        }
        Ok(Self { samples, paraphrases })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn paraphrases(&self) -> &[Sample] {
        &self.paraphrases
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    /// First paraphrase (by id) of sample `id`.
    pub fn paraphrase_for(&self, id: &str) -> Option<&Sample> {
        self.paraphrases.iter().find(|p| p.paraphrase_of.as_deref() == Some(id))
    }
}

fn field_string(obj: &Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn render_template(template: &str, obj: &Map<String, Value>) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or("unclosed `{` in text template")?;
        let name = &after[..close];
        let value = field_string(obj, name).ok_or_else(|| format!("template field `{name}` missing"))?;
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn record_text(obj: &Map<String, Value>, spec: &CorpusSpec) -> std::result::Result<String, String> {
    if let Some(t) = &spec.text_template {
        return render_template(t, obj);
    }
    if let Some(text) = field_string(obj, "text") {
        return Ok(text);
    }
    match (field_string(obj, "question"), field_string(obj, "answer")) {
        (Some(q), Some(a)) => Ok(format!("{q} {a}")),
        _ => Err("record has neither `text` nor `question` and `answer`".into()),
    }
}

fn parse_record(line: &str, label: Label, source: String, spec: &CorpusSpec) -> std::result::Result<Sample, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let id = field_string(obj, "id").ok_or("record has no string `id`")?;
    let text = record_text(obj, spec)?;
    if text.is_empty() {
        return Err(format!("sample `{id}` has empty text"));
    }
    let paraphrase_of = match obj.get("paraphrase_of") {
        None | Some(Value::Null) => None,
        Some(_) => Some(field_string(obj, "paraphrase_of").ok_or("`paraphrase_of` is not a string")?),
    };
    let optional = |f: &Option<String>| -> std::result::Result<Option<String>, String> {
        match f {
            None => Ok(None),
            Some(name) => field_string(obj, name)
                .map(Some)
                .ok_or_else(|| format!("field `{name}` missing")),
        }
    };
    Ok(Sample {
        id,
        text,
        label,
        paraphrase_of,
        prompt: optional(&spec.prompt_field)?,
        answer: optional(&spec.answer_field)?,
        source,
    })
}

fn load_split_file(path: &Path, label: Label, spec: &CorpusSpec) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let source = format!("{}:{}", path.display(), i + 1);
        let sample = parse_record(&line, label, source, spec).map_err(|m| Error::format(path, i + 1, m))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.split_files.is_empty() {
        return Err(Error::Config("no split files configured".into()));
    }
    let mut records = Vec::new();
    for (split, paths) in &spec.split_files {
        let label = spec.resolve_label(split)?;
        let before = records.len();
        for path in paths {
            records.extend(load_split_file(path, label, spec)?);
        }
        if records[before..].iter().all(|s| s.paraphrase_of.is_some()) {
            return Err(Error::Data(format!("split `{split}` contains no samples")));
        }
    }
    Corpus::new(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewSelector {
    Original,
    Paraphrased,
}

impl ViewSelector {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewSelector::Original => "original",
            ViewSelector::Paraphrased => "paraphrased",
        }
    }
}

impl std::str::FromStr for ViewSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" | "orig" => Ok(ViewSelector::Original),
            "paraphrased" | "reph" => Ok(ViewSelector::Paraphrased),
            other => Err(Error::Parameter(format!("unknown view selector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusView {
    pub selector: ViewSelector,
    pub cap: usize,
    /// Sorted by label, then id.
    pub samples: Vec<Sample>,
}

/// Up to `cap` samples per class, drawn by a seeded shuffle. The sample
/// choice does not depend on `selector`, so both arms see the same ids.
pub fn select_view(corpus: &Corpus, selector: ViewSelector, cap: usize, seed: u64) -> Result<CorpusView> {
    if cap == 0 {
        return Err(Error::Parameter("per-class cap must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for label in Label::ALL {
        let mut class: Vec<&Sample> = corpus.samples.iter().filter(|s| s.label == label).collect();
        if class.len() > cap {
            class.shuffle(&mut rng);
            class.truncate(cap);
            class.sort_by(|a, b| a.id.cmp(&b.id));
        }
        chosen.extend(class.into_iter().cloned());
    }
    if selector == ViewSelector::Paraphrased {
        let mut missing = BTreeSet::new();
        for s in &mut chosen {
            match corpus.paraphrase_for(&s.id) {
                Some(p) => s.text = p.text.clone(),
                None => {
                    missing.insert(s.id.clone());
                }
            }
        }
        if !missing.is_empty() {
            let ids: Vec<String> = missing.into_iter().collect();
            return Err(Error::Data(format!("samples without a paraphrase: {}", ids.join(", "))));
        }
    }
    Ok(CorpusView {
        selector,
        cap,
        samples: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    fn split(prefix: &str, n: usize) -> Vec<String> {
        (0..n)
            .map(|i| format!(r#"{{"id":"{prefix}{i:02}","text":"{prefix} text {i}"}}"#))
            .collect()
    }

    fn three_splits(dir: &Path, n: usize) -> CorpusSpec {
        let mut spec = CorpusSpec::default();
        for name in ["retain", "forget", "holdout"] {
            let p = write_lines(dir, &format!("{name}.jsonl"), &split(name, n));
            spec.split_files.insert(name.into(), vec![p]);
        }
        spec
    }

    #[test]
    fn loads_three_splits() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = load_corpus(&three_splits(dir.path(), 10)).unwrap();
        assert_eq!(corpus.len(), 30);
        assert_eq!(corpus.class_counts(), [10, 10, 10]);
        let s = corpus.samples().iter().find(|s| s.id == "forget03").unwrap();
        assert_eq!(s.label, Label::Forgotten);
        assert!(s.source.ends_with("forget.jsonl:4"));
    }

    #[test]
    fn duplicate_ids_across_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = three_splits(dir.path(), 3);
        let dup = write_lines(dir.path(), "dup.jsonl", &[r#"{"id":"retain01","text":"x"}"#.into()]);
        spec.split_files.get_mut("forget").unwrap().push(dup);
        let err = load_corpus(&spec).unwrap_err().to_string();
        assert!(err.contains("duplicate id `retain01`"), "{err}");
    }

    #[test]
    fn test_split_alias() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = three_splits(dir.path(), 2);
        let holdout = spec.split_files.remove("holdout").unwrap();
        spec.split_files.insert("test".into(), holdout.clone());
        assert!(matches!(load_corpus(&spec), Err(Error::Config(_))));
        spec.split_aliases.insert("test".into(), "holdout".into());
        let corpus = load_corpus(&spec).unwrap();
        assert_eq!(corpus.class_counts(), [2, 2, 2]);
    }

    #[test]
    fn empty_split_and_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = three_splits(dir.path(), 2);
        let empty = write_lines(dir.path(), "empty.jsonl", &[]);
        spec.split_files.insert("holdout".into(), vec![empty]);
        assert!(load_corpus(&spec).unwrap_err().to_string().contains("no samples"));

        let bad = write_lines(
            dir.path(),
            "bad.jsonl",
            &[r#"{"id":"a","text":"ok"}"#.into(), "{".into()],
        );
        spec.split_files.insert("holdout".into(), vec![bad]);
        match load_corpus(&spec) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paraphrase_links() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = three_splits(dir.path(), 2);
        let para = write_lines(
            dir.path(),
            "retain_para.jsonl",
            &[r#"{"id":"p0","text":"reworded","paraphrase_of":"retain00"}"#.into()],
        );
        spec.split_files.get_mut("retain").unwrap().push(para);
        let corpus = load_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 6);
        assert_eq!(corpus.paraphrase_for("retain00").unwrap().text, "reworded");

        let view = select_view(&corpus, ViewSelector::Original, 10, 0).unwrap();
        assert_eq!(view.samples.len(), 6);
        let err = select_view(&corpus, ViewSelector::Paraphrased, 10, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("retain01") && !err.contains("retain00"), "{err}");

        let dangling = write_lines(
            dir.path(),
            "dangling.jsonl",
            &[r#"{"id":"p1","text":"x","paraphrase_of":"nobody"}"#.into()],
        );
        spec.split_files.get_mut("forget").unwrap().push(dangling);
        assert!(load_corpus(&spec)
            .unwrap_err()
            .to_string()
            .contains("unknown sample `nobody`"));
    }

    #[test]
    fn paraphrase_label_must_match() {
        let mk = |id: &str, label, of: Option<&str>| Sample {
            id: id.into(),
            text: "t".into(),
            label,
            paraphrase_of: of.map(Into::into),
            source: "mem".into(),
            prompt: None,
            answer: None,
        };
        let err = Corpus::new(vec![mk("a", Label::Retained, None), mk("b", Label::Holdout, Some("a"))]);
        assert!(err.is_err());
    }

    #[test]
    fn paraphrased_view_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = CorpusSpec::default();
        for name in ["retain", "forget"] {
            let mut lines = split(name, 3);
            for i in 0..3 {
                lines.push(format!(
                    r#"{{"id":"{name}{i:02}-p","text":"para {i}","paraphrase_of":"{name}{i:02}"}}"#
                ));
            }
            let p = write_lines(dir.path(), &format!("{name}.jsonl"), &lines);
            spec.split_files.insert(name.into(), vec![p]);
        }
        let corpus = load_corpus(&spec).unwrap();
        let orig = select_view(&corpus, ViewSelector::Original, 2, 9).unwrap();
        let reph = select_view(&corpus, ViewSelector::Paraphrased, 2, 9).unwrap();
        assert_eq!(orig.samples.len(), 4);
        for (o, r) in orig.samples.iter().zip(&reph.samples) {
            assert_eq!(o.id, r.id);
            assert_eq!(o.label, r.label);
            assert!(r.text.starts_with("para"));
            assert!(!o.text.starts_with("para"));
        }
    }

    #[test]
    fn cap_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = load_corpus(&three_splits(dir.path(), 10)).unwrap();
        let a = select_view(&corpus, ViewSelector::Original, 5, 3).unwrap();
        assert_eq!(a.samples.len(), 15);
        for label in Label::ALL {
            assert_eq!(a.samples.iter().filter(|s| s.label == label).count(), 5);
        }
        assert_eq!(a, select_view(&corpus, ViewSelector::Original, 5, 3).unwrap());
        let full = select_view(&corpus, ViewSelector::Original, 1000, 3).unwrap();
        let mut expected = corpus.samples().to_vec();
        expected.sort_by(|a, b| (a.label, &a.id).cmp(&(b.label, &b.id)));
        assert_eq!(full.samples, expected);
        assert!(select_view(&corpus, ViewSelector::Original, 0, 3).is_err());
    }

    #[test]
    fn order_independent_loading() {
        let dir = tempfile::tempdir().unwrap();
        let spec = three_splits(dir.path(), 6);
        let a = load_corpus(&spec).unwrap();
        let mut lines = split("retain", 6);
        lines.reverse();
        write_lines(dir.path(), "retain.jsonl", &lines);
        let b = load_corpus(&spec).unwrap();
        let strip = |c: &Corpus| {
            c.samples()
                .iter()
                .map(|s| (s.id.clone(), s.text.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn question_answer_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "qa.jsonl",
            &[r#"{"id":1,"question":"Who wrote it?","answer":"Nobody."}"#.into()],
        );
        let mut spec = CorpusSpec::default();
        spec.split_files.insert("forget".into(), vec![p]);
        let c = load_corpus(&spec).unwrap();
        assert_eq!(c.samples()[0].text, "Who wrote it? Nobody.");
        assert_eq!(c.samples()[0].id, "1");

        spec.text_template = Some("Q: {question}\nA: {answer}".into());
        spec.prompt_field = Some("question".into());
        spec.answer_field = Some("answer".into());
        let c = load_corpus(&spec).unwrap();
        assert_eq!(c.samples()[0].text, "Q: Who wrote it?\nA: Nobody.");
        assert_eq!(c.samples()[0].prompt.as_deref(), Some("Who wrote it?"));

        spec.text_template = Some("{missing}".into());
        assert!(load_corpus(&spec).is_err());
    }
}
