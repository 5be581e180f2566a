//! Generator for self-contained synthetic workspaces: a random embedding
//! table, a three-split corpus, a geometry file for the synthetic oracle and
//! a ready-to-run config.
//!
//! Forgotten samples get a flat landscape, retained samples a basin and
//! holdout samples a volatile one. With `shared_centers` the i-th sample of
//! every class has the same central loss, so the original-text loss carries
//! no class information at all.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::write_embedding_table;
use crate::oracle::{Geometry, GeometryAssignment};
use crate::runner::ExperimentConfig;
use crate::{Error, Label, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub per_class: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub center_low: f64,
    pub center_high: f64,
    pub flat_jitter: f64,
    pub basin_slope: f64,
    pub basin_jitter: f64,
    pub volatile_amplitude: f64,
    pub shared_centers: bool,
    pub paraphrases: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            per_class: 100,
            vocab_size: 400,
            dim: 16,
            min_len: 20,
            max_len: 40,
            center_low: 1.5,
            center_high: 2.5,
            flat_jitter: 0.05,
            basin_slope: 3.0,
            basin_jitter: 0.05,
            volatile_amplitude: 1.0,
            shared_centers: true,
            paraphrases: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorkspace {
    pub root: PathBuf,
    pub embedding_table: PathBuf,
    pub split_files: BTreeMap<String, PathBuf>,
    pub geometry: PathBuf,
    pub config_path: PathBuf,
    /// The config as written, with paths resolved.
    pub config: ExperimentConfig,
}

pub fn class_geometry(spec: &SyntheticSpec, label: Label, center: f64) -> Geometry {
    match label {
        Label::Forgotten => Geometry::Flat {
            center_loss: center,
            jitter: spec.flat_jitter,
        },
        Label::Retained => Geometry::Basin {
            center_loss: center,
            slope: spec.basin_slope,
            jitter: spec.basin_jitter,
        },
        Label::Holdout => Geometry::Volatile {
            mean_loss: center,
            amplitude: spec.volatile_amplitude,
        },
    }
}

fn split_name(label: Label) -> &'static str {
    match label {
        Label::Retained => "retain",
        Label::Forgotten => "forget",
        Label::Holdout => "holdout",
    }
}

fn token(i: usize) -> String {
    format!("w{i:04}")
}

fn random_text(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect()
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|&i| token(i)).collect::<Vec<_>>().join(" ")
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes a workspace under `dir` and returns its paths and config.
pub fn generate_workspace(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<SyntheticWorkspace> {
    let root = dir.as_ref().to_path_buf();
    if spec.per_class < 2 || spec.vocab_size < 2 || spec.dim == 0 || spec.min_len < 2 || spec.max_len < spec.min_len {
        return Err(Error::Parameter(format!("degenerate synthetic spec {spec:?}")));
    }
    std::fs::create_dir_all(root.join("corpus")).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let tokens: Vec<Vec<u8>> = (0..spec.vocab_size).map(|i| token(i).into_bytes()).collect();
    let rows: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let embedding_table = root.join("embeddings.txt");
    write_embedding_table(&embedding_table, &tokens, &rows)?;

    let centers: Vec<f64> = (0..spec.per_class)
        .map(|_| rng.random_range(spec.center_low..spec.center_high))
        .collect();
    let mut geometry_lines = String::new();
    let mut split_files = BTreeMap::new();
    for label in Label::ALL {
        let name = split_name(label);
        let mut lines = String::new();
        for (i, shared) in centers.iter().enumerate() {
            let id = format!("{name}-{i:04}");
            let ids = random_text(&mut rng, spec);
            let center = if spec.shared_centers {
                *shared
            } else {
                rng.random_range(spec.center_low..spec.center_high)
            };
            let record = serde_json::json!({"id": id, "text": join(&ids)});
            let _ = writeln!(lines, "{record}");
            if spec.paraphrases {
                let mut para = ids.clone();
                for (j, t) in para.iter_mut().enumerate() {
                    if j % 3 == 1 {
                        *t = rng.random_range(0..spec.vocab_size);
                    }
                }
                let record = serde_json::json!({"id": format!("{id}-p"), "text": join(&para), "paraphrase_of": id});
                let _ = writeln!(lines, "{record}");
            }
            let assignment = GeometryAssignment {
                id,
                geometry: class_geometry(spec, label, center),
            };
            let _ = writeln!(geometry_lines, "{}", serde_json::to_string(&assignment)?);
        }
        let path = root.join("corpus").join(format!("{name}.jsonl"));
        write(&path, &lines)?;
        split_files.insert(name.to_string(), path);
    }
    let geometry = root.join("geometry.jsonl");
    write(&geometry, &geometry_lines)?;

    let views = if spec.paraphrases {
        r#"["original", "paraphrased"]"#
    } else {
        r#"["original"]"#
    };
    let toml = format!(
        r#"seed = {seed}
output_dir = "out"
split_files = {{ retain = ["corpus/retain.jsonl"], forget = ["corpus/forget.jsonl"], holdout = ["corpus/holdout.jsonl"] }}
views = {views}
oracle_kind = "synthetic"
synthetic_profiles = "geometry.jsonl"
synthetic_seed = {seed}
oracle_vocab_stats = true
embedding_table = "embeddings.txt"
"#,
        seed = spec.seed
    );
    let config_path = root.join("config.toml");
    write(&config_path, &toml)?;
    let config = ExperimentConfig::load(&config_path)?;
    Ok(SyntheticWorkspace {
        root,
        embedding_table,
        split_files,
        geometry,
        config_path,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::load_corpus;

    #[test]
    fn workspace_is_loadable_and_deterministic() {
        let spec = SyntheticSpec {
            per_class: 5,
            paraphrases: true,
            ..SyntheticSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let wa = generate_workspace(a.path(), &spec).unwrap();
        let wb = generate_workspace(b.path(), &spec).unwrap();
        wa.config.validate().unwrap();
        for f in ["embeddings.txt", "geometry.jsonl", "corpus/retain.jsonl"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let corpus = load_corpus(&wa.config.corpus_spec()).unwrap();
        assert_eq!(corpus.class_counts(), [5, 5, 5]);
        assert_eq!(corpus.paraphrases().len(), 15);
        let _ = wb;
    }

    #[test]
    fn shared_centers_align_across_classes() {
        let spec = SyntheticSpec {
            per_class: 4,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ws = generate_workspace(dir.path(), &spec).unwrap();
        let text = std::fs::read_to_string(&ws.geometry).unwrap();
        let geos: Vec<GeometryAssignment> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(geos.len(), 12);
        for i in 0..4 {
            assert_eq!(geos[i].geometry.center(), geos[4 + i].geometry.center());
            assert_eq!(geos[i].geometry.center(), geos[8 + i].geometry.center());
        }
        assert!(matches!(geos[0].geometry, Geometry::Basin { .. }));
        assert!(matches!(geos[4].geometry, Geometry::Flat { .. }));
        assert!(matches!(geos[8].geometry, Geometry::Volatile { .. }));
    }
}
