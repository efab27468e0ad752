//! Scene prompts and their embedding sequences.
//!
//! The text encoder is replaced by a deterministic hash: each whitespace
//! token maps to a seeded pseudo-random unit vector. Precomputed embeddings
//! can be loaded from a tab-separated file instead.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const TEMPLATE_PREFIX: &str = "an image taken in ";
pub const PAD_TOKEN: &str = "<pad>";
pub const DEFAULT_TEXT_DIM: usize = 32;
pub const DEFAULT_TOKENS: usize = 8;
pub const MIN_TEXT_DIM: usize = 8;

/// `"an image taken in {scene_name}"`.
pub fn expand_template(scene_name: &str) -> Result<String> {
    if scene_name.trim().is_empty() {
        return Err(Error::invalid("scene name must be nonempty"));
    }
    Ok(format!("{TEMPLATE_PREFIX}{scene_name}"))
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &format!("token:{token}"));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Hashed embedding of `text`: one unit row per whitespace token, truncated
/// or padded to `tokens` rows.
pub fn embed(text: &str, dim: usize, tokens: usize, seed: u64) -> Result<Tensor> {
    if dim < MIN_TEXT_DIM {
        return Err(Error::invalid(format!("text dimension {dim} < {MIN_TEXT_DIM}")));
    }
    if tokens == 0 {
        return Err(Error::invalid("token count must be ≥ 1"));
    }
    let words = text.split_whitespace().chain(std::iter::repeat(PAD_TOKEN));
    let data = words
        .take(tokens)
        .flat_map(|w| token_vector(w, dim, seed))
        .collect();
    Tensor::new(&[tokens, dim], data)
}

#[derive(Debug, Clone)]
pub struct DomainPrompt {
    pub scene_name: String,
    pub template_text: String,
    pub embedding: Tensor,
}

impl DomainPrompt {
    pub fn hashed(scene_name: &str, dim: usize, tokens: usize, seed: u64) -> Result<Self> {
        let template_text = expand_template(scene_name)?;
        let embedding = embed(&template_text, dim, tokens, seed)?;
        Ok(Self {
            scene_name: scene_name.to_string(),
            template_text,
            embedding,
        })
    }
}

/// Parses the embedding file format: `name<TAB>v v v ...`, `#` comments.
/// Each entry is reshaped to `tokens` rows and rows are re-normalized.
pub fn parse_embeddings(text: &str, tokens: usize) -> Result<BTreeMap<String, Tensor>> {
    if tokens == 0 {
        return Err(Error::invalid("token count must be ≥ 1"));
    }
    let mut out = BTreeMap::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (name, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected '<scene name><TAB><values>'".into(),
        })?;
        let vals = values
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad real: {e}"),
            })?;
        if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                msg: "values must be finite and nonempty".into(),
            });
        }
        if vals.len() % tokens != 0 {
            return Err(Error::format(
                0,
                format!("line {line_no}: {} values not divisible into {tokens} rows", vals.len()),
            ));
        }
        match width {
            Some(w) if w != vals.len() => {
                return Err(Error::format(
                    0,
                    format!("line {line_no}: {} values, earlier entries had {w}", vals.len()),
                ))
            }
            _ => width = Some(vals.len()),
        }
        let dim = vals.len() / tokens;
        let mut rows = Vec::with_capacity(vals.len());
        for (r, row) in vals.chunks_exact(dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::format(
                    0,
                    format!("line {line_no}: row {r} is zero and cannot be normalized"),
                ));
            }
            rows.extend(row.iter().map(|x| x / norm));
        }
        out.insert(name.to_string(), Tensor::new(&[tokens, dim], rows)?);
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path, tokens: usize) -> Result<BTreeMap<String, Tensor>> {
    parse_embeddings(&std::fs::read_to_string(path)?, tokens)
}

/// Resolves scene names to embedding matrices.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub dim: usize,
    pub tokens: usize,
    pub seed: u64,
    pub table: Option<BTreeMap<String, Tensor>>,
    /// Unknown scenes are an error instead of falling back to the empty-scene prompt.
    pub strict: bool,
}

impl PromptBank {
    pub fn hashed(dim: usize, tokens: usize, seed: u64) -> Self {
        Self {
            dim,
            tokens,
            seed,
            table: None,
            strict: false,
        }
    }

    /// Embedding of the bare template, used for unresolvable scenes.
    pub fn empty_scene(&self) -> Result<Tensor> {
        embed(TEMPLATE_PREFIX.trim_end(), self.dim, self.tokens, self.seed)
    }

    pub fn resolve(&self, scene_name: &str) -> Result<Tensor> {
        match &self.table {
            None => match expand_template(scene_name) {
                Ok(text) => embed(&text, self.dim, self.tokens, self.seed),
                Err(_) if !self.strict => self.empty_scene(),
                Err(_) => Err(Error::UnknownDomain(scene_name.to_string())),
            },
            Some(table) => match table.get(scene_name) {
                Some(t) => Ok(t.clone()),
                None if self.strict => Err(Error::UnknownDomain(scene_name.to_string())),
                None => self.empty_scene(),
            },
        }
    }
}
