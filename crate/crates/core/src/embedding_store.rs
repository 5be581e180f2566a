//! Token vocabulary with unit-normalised embeddings and exact cosine
//! nearest-neighbour lists.
//!
//! Table file layout:
//!
//! ```text
//! ill-emb v1 <vocab_size> <dim>
//! <escaped token>\t<f> <f> ... <f>
//! ```
//!
//! Token strings are rendered byte by byte: printable ASCII (0x20..=0x7e)
//! is written verbatim except the backslash, which becomes `\\`; every other
//! byte becomes `\xNN`.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::{Error, Result};

const HEADER_MAGIC: &str = "ill-emb";
const HEADER_VERSION: &str = "v1";

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingTable {
    tokens: Vec<Vec<u8>>,
    dim: usize,
    /// Row-major, `vocab_size * dim`, each row unit length.
    embeddings: Vec<f32>,
    m_max: usize,
    /// Row-major, `vocab_size * m_max`.
    neighbors: Vec<TokenId>,
}

impl TokenEmbeddingTable {
    /// Builds a table from raw rows, normalising each row and computing the
    /// `m_max` nearest neighbours of every token by exact cosine search.
    pub fn from_rows(tokens: Vec<Vec<u8>>, rows: Vec<Vec<f64>>, m_max: usize) -> Result<Self> {
        let vocab_size = tokens.len();
        if rows.len() != vocab_size {
            return Err(Error::Parameter(format!(
                "{} tokens but {} embedding rows",
                vocab_size,
                rows.len()
            )));
        }
        if vocab_size == 0 {
            return Err(Error::Parameter("empty vocabulary".into()));
        }
        if m_max == 0 || m_max >= vocab_size {
            return Err(Error::Parameter(format!(
                "m_max must satisfy 1 <= m_max < vocab_size ({vocab_size}), got {m_max}"
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Parameter("embedding dimension is zero".into()));
        }
        let mut embeddings = Vec::with_capacity(vocab_size * dim);
        for (id, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Parameter(format!(
                    "row {id} has {} components, expected {dim}",
                    row.len()
                )));
            }
            let norm = normalize_into(row, &mut embeddings)
                .ok_or_else(|| Error::Data(format!("embedding row {id} cannot be normalised")))?;
            debug_assert!(norm > 0.0);
        }
        let neighbors = exact_neighbors(&embeddings, dim, vocab_size, m_max);
        Ok(Self {
            tokens,
            dim,
            embeddings,
            m_max,
            neighbors,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn token(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn embedding(&self, id: TokenId) -> &[f32] {
        let start = id as usize * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    pub fn neighbor_list(&self, id: TokenId) -> &[TokenId] {
        let start = id as usize * self.m_max;
        &self.neighbors[start..start + self.m_max]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Cosine similarity; rows are unit length so this is a dot product.
    pub fn cosine(&self, a: TokenId, b: TokenId) -> f64 {
        dot(self.embedding(a), self.embedding(b))
    }

    /// The `rank`-th (1-based) nearest neighbour of `token`.
    pub fn nearest_neighbor(&self, token: TokenId, rank: usize) -> Result<TokenId> {
        if !self.contains(token) {
            return Err(Error::Parameter(format!(
                "token id {token} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        if rank == 0 || rank > self.m_max {
            return Err(Error::Parameter(format!(
                "neighbor rank {rank} outside 1..={}",
                self.m_max
            )));
        }
        Ok(self.neighbor_list(token)[rank - 1])
    }
}

fn normalize_into(row: &[f64], out: &mut Vec<f32>) -> Option<f64> {
    if row.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    out.extend(row.iter().map(|v| (v / norm) as f32));
    Some(norm)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Non-increasing similarity, ties by ascending id.
fn by_similarity(a: &(f64, TokenId), b: &(f64, TokenId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn exact_neighbors(embeddings: &[f32], dim: usize, vocab_size: usize, m_max: usize) -> Vec<TokenId> {
    let lists: Vec<Vec<TokenId>> = (0..vocab_size)
        .into_par_iter()
        .map(|t| {
            let row = &embeddings[t * dim..(t + 1) * dim];
            let mut scored: Vec<(f64, TokenId)> = (0..vocab_size)
                .filter(|&u| u != t)
                .map(|u| (dot(row, &embeddings[u * dim..(u + 1) * dim]), u as TokenId))
                .collect();
            if m_max < scored.len() {
                scored.select_nth_unstable_by(m_max - 1, by_similarity);
                scored.truncate(m_max);
            }
            scored.sort_by(by_similarity);
            scored.into_iter().map(|(_, id)| id).collect()
        })
        .collect();
    lists.concat()
}

/// Loads a table in the `ill-emb v1` format and builds `m_max`-NN lists.
pub fn load_embedding_table(path: impl AsRef<Path>, m_max: usize) -> Result<TokenEmbeddingTable> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(format!("opening embedding table {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?,
        None => return Err(Error::format(path, 1, "missing header line")),
    };
    let (vocab_size, dim) = parse_header(&header).map_err(|m| Error::format(path, 1, m))?;
    if m_max >= vocab_size {
        return Err(Error::Parameter(format!(
            "m_max ({m_max}) must be smaller than the vocabulary size ({vocab_size})"
        )));
    }

    let mut tokens = Vec::with_capacity(vocab_size);
    let mut rows = Vec::with_capacity(vocab_size);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.is_empty() && tokens.len() == vocab_size {
            continue;
        }
        if tokens.len() == vocab_size {
            return Err(Error::format(path, line_no, "more rows than the header declares"));
        }
        let (token, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, line_no, "expected `<token>\\t<values>`"))?;
        let token = unescape_token(token).map_err(|m| Error::format(path, line_no, m))?;
        let row = values
            .split(' ')
            .enumerate()
            .map(|(col, v)| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::format(path, line_no, format!("bad float `{v}` in column {}", col + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != dim {
            return Err(Error::format(
                path,
                line_no,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        if row.iter().all(|v| *v == 0.0) {
            return Err(Error::format(
                path,
                line_no,
                "zero embedding vector cannot be normalised",
            ));
        }
        tokens.push(token);
        rows.push(row);
    }
    if tokens.len() != vocab_size {
        return Err(Error::format(
            path,
            tokens.len() + 2,
            format!("header declares {vocab_size} rows, found {}", tokens.len()),
        ));
    }
    TokenEmbeddingTable::from_rows(tokens, rows, m_max)
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = line.split(' ').collect();
    match parts.as_slice() {
        [HEADER_MAGIC, HEADER_VERSION, vocab, dim] => {
            let vocab = vocab
                .parse::<usize>()
                .map_err(|_| format!("bad vocab size `{vocab}`"))?;
            let dim = dim.parse::<usize>().map_err(|_| format!("bad dimension `{dim}`"))?;
            if vocab == 0 || dim == 0 {
                return Err("vocab size and dimension must be positive".into());
            }
            Ok((vocab, dim))
        }
        _ => Err(format!(
            "expected `{HEADER_MAGIC} {HEADER_VERSION} <vocab_size> <dim>`, got `{line}`"
        )),
    }
}

/// Writes `tokens`/`rows` in the table format. Rows are written as given.
pub fn write_embedding_table(path: impl AsRef<Path>, tokens: &[Vec<u8>], rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER_MAGIC} {HEADER_VERSION} {} {dim}", tokens.len());
    for (token, row) in tokens.iter().zip(rows) {
        out.push_str(&escape_token(token));
        out.push('\t');
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn escape_token(bytes: &[u8]) -> String {
    escape_bytes(bytes, false)
}

/// Escaping used by tokenizer files, where a literal space separates fields.
pub(crate) fn escape_bytes(bytes: &[u8], escape_space: bool) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b' ' if escape_space => out.push_str("\\x20"),
            0x20..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02x}");
            }
        }
    }
    out
}

pub fn unescape_token(s: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') => {
                let hex = s
                    .get(i + 2..i + 4)
                    .ok_or_else(|| format!("truncated escape at byte {i}"))?;
                let b = u8::from_str_radix(hex, 16).map_err(|_| format!("bad escape `\\x{hex}` at byte {i}"))?;
                out.push(b);
                i += 4;
            }
            _ => return Err(format!("dangling backslash at byte {i}")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TokenEmbeddingTable {
        TokenEmbeddingTable::from_rows(
            vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()],
            vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]],
            2,
        )
        .unwrap()
    }

    #[test]
    fn toy_neighbor_order() {
        let t = toy();
        assert_eq!(t.neighbor_list(0), &[1, 2]);
        assert_eq!(t.nearest_neighbor(0, 1).unwrap(), 1);
        // cos(e1, e0) = 0.9 / |(.9,.1)| = 0.99388, cos(e1, e2) = 0.11043
        assert_eq!(t.neighbor_list(1), &[0, 2]);
        assert_eq!(t.neighbor_list(2), &[1, 0]);
        assert!((t.cosine(0, 1) - 0.9 / (0.82f64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn rank_out_of_range() {
        let t = toy();
        assert!(matches!(t.nearest_neighbor(0, 0), Err(Error::Parameter(_))));
        assert!(matches!(t.nearest_neighbor(0, 3), Err(Error::Parameter(_))));
        assert!(t.nearest_neighbor(7, 1).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let t = TokenEmbeddingTable::from_rows(
            (0..4).map(|i| vec![b'a' + i]).collect(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 1.0]],
            3,
        )
        .unwrap();
        // token 0 is orthogonal to 1, 2 and 3
        assert_eq!(t.neighbor_list(0), &[1, 2, 3]);
        assert_eq!(t.neighbor_list(1), &[3, 0, 2]);
    }

    #[test]
    fn m_max_bounds() {
        let rows = vec![vec![1.0], vec![2.0]];
        let tokens = vec![b"x".to_vec(), b"y".to_vec()];
        assert!(TokenEmbeddingTable::from_rows(tokens.clone(), rows.clone(), 2).is_err());
        assert!(TokenEmbeddingTable::from_rows(tokens, rows, 1).is_ok());
    }

    #[test]
    fn escape_roundtrip() {
        let raw: Vec<u8> = vec![b'a', b' ', b'\\', 0x00, 0xc3, 0xa9, b'\t', 0x7f];
        let esc = escape_token(&raw);
        assert_eq!(esc, "a \\\\\\x00\\xc3\\xa9\\x09\\x7f");
        assert_eq!(unescape_token(&esc).unwrap(), raw);
        assert_eq!(escape_bytes(b"a b", true), "a\\x20b");
        assert!(unescape_token("\\q").is_err());
        assert!(unescape_token("\\x4").is_err());
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");

        std::fs::write(&path, "ill-emb v1 2 2\na\t1 0\nb\t0 0\n").unwrap();
        match load_embedding_table(&path, 1) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }

        std::fs::write(&path, "ill-emb v1 2 2\na\t1 0\nb\t0 x\n").unwrap();
        assert!(matches!(
            load_embedding_table(&path, 1),
            Err(Error::Format { line: 3, .. })
        ));

        std::fs::write(&path, "ill-emb v2 2 2\n").unwrap();
        assert!(matches!(
            load_embedding_table(&path, 1),
            Err(Error::Format { line: 1, .. })
        ));

        std::fs::write(&path, "ill-emb v1 3 2\na\t1 0\nb\t0 1\n").unwrap();
        assert!(matches!(load_embedding_table(&path, 1), Err(Error::Format { .. })));

        std::fs::write(&path, "ill-emb v1 2 2\na\t1 0\nb\t0 1\n").unwrap();
        assert!(matches!(load_embedding_table(&path, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let tokens = vec![b"hello".to_vec(), b" world".to_vec(), b"\\n\n".to_vec()];
        let rows = vec![vec![3.0, 4.0], vec![0.5, -0.25], vec![-1.0, 1e-3]];
        write_embedding_table(&path, &tokens, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ill-emb v1 3 2\nhello\t3 4\n world\t0.5 -0.25\n\\\\n\\x0a\t"));
        let t = load_embedding_table(&path, 2).unwrap();
        assert_eq!(t.tokens(), tokens.as_slice());
        assert!((t.embedding(0)[0] - 0.6).abs() < 1e-7);
    }
}
