//! Cognitive stage: attribute texts → token embeddings → fused semantic
//! prior.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use medseg_autograd::{Mat, Tape, Var};
use medseg_data::AttributeRecord;

use crate::nn::{ranges, TransformerLayer};
use crate::params::{Binding, Builder, ParamStore, Pid};
use crate::{CoreError, Result};

/// The word table shipped with the crate.
pub const DEFAULT_VOCAB: &str = include_str!("../assets/vocab.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttributeKind {
    Position,
    Texture,
    Shape,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 3] = [AttributeKind::Position, AttributeKind::Texture, AttributeKind::Shape];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributeKind::Position => "position",
            AttributeKind::Texture => "texture",
            AttributeKind::Shape => "shape",
        })
    }
}

/// Word-to-id table read from `token<TAB>id` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, id) = line
                .split_once('\t')
                .ok_or_else(|| CoreError::Config(format!("vocab line {}: expected token<TAB>id", n + 1)))?;
            let id: usize =
                id.trim().parse().map_err(|_| CoreError::Config(format!("vocab line {}: bad id '{id}'", n + 1)))?;
            if ids.insert(word.to_string(), id).is_some() {
                return Err(CoreError::Config(format!("vocab line {}: duplicate token '{word}'", n + 1)));
            }
        }
        Ok(Self { ids })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    pub fn to_tsv(&self) -> String {
        let mut pairs: Vec<_> = self.ids.iter().collect();
        pairs.sort_by_key(|(_, &id)| id);
        pairs.iter().map(|(w, id)| format!("{w}\t{id}\n")).collect()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    /// One past the largest id.
    pub fn min_size(&self) -> usize {
        self.ids.values().max().map_or(0, |m| m + 1)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| CoreError::UnknownWord(w.to_string()))).collect()
    }

    /// Fixed sentence describing one attribute of `record`.
    pub fn template(kind: AttributeKind, record: &AttributeRecord) -> String {
        match kind {
            AttributeKind::Position => {
                let p = record.position;
                let row = ["top", "middle", "bottom"][p.row()];
                let col = ["left", "center", "right"][p.col()];
                format!("{row} {col} region")
            }
            AttributeKind::Texture => {
                let t = ["smooth", "striped", "checkered", "speckled"][record.texture.index()];
                format!("{t} texture")
            }
            AttributeKind::Shape => format!("{} shape", record.shape.name()),
        }
    }

    pub fn attribute_text(&self, kind: AttributeKind, record: &AttributeRecord) -> Result<AttributeText> {
        Ok(AttributeText { kind, tokens: self.tokenize(&Self::template(kind, record))? })
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("shipped vocabulary parses")
    }
}

/// A tokenized attribute description.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeText {
    pub kind: AttributeKind,
    pub tokens: Vec<usize>,
}

/// Encoded attribute: one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTokens {
    pub kind: AttributeKind,
    pub embedding: Mat,
}

impl AttributeTokens {
    pub fn len(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embedding.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }
}

/// Pooled prior `T_attr` (1×d) and the fused token sequence it pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrior {
    pub pooled: Mat,
    pub fused_tokens: Mat,
}

/// Token embedding + learned positional embedding + encoder layers.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: Pid,
    pub position_embedding: Pid,
    pub layers: Vec<TransformerLayer>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(
        b: &mut Builder,
        name: &str,
        vocab_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
    ) -> Self {
        Self {
            token_embedding: b.normal(&format!("{name}.token_embedding"), vocab_size, dim, 0.5),
            position_embedding: b.normal(&format!("{name}.position_embedding"), max_len, dim, 0.1),
            layers: (0..layers).map(|i| TransformerLayer::new(b, &format!("{name}.layer{i}"), dim, heads)).collect(),
            vocab_size,
            max_len,
            dim,
        }
    }

    pub fn validate(&self, text: &AttributeText) -> Result<()> {
        if text.tokens.is_empty() {
            return Err(CoreError::InvalidInput(format!("empty {} text", text.kind)));
        }
        if text.tokens.len() > self.max_len {
            return Err(CoreError::InvalidInput(format!(
                "{} tokens exceed the maximum of {}",
                text.tokens.len(),
                self.max_len
            )));
        }
        match text.tokens.iter().find(|&&id| id >= self.vocab_size) {
            Some(&id) => Err(CoreError::OutOfVocabulary { id, size: self.vocab_size }),
            None => Ok(()),
        }
    }

    /// Encodes several texts as independent sequences on one set of tape
    /// nodes; returns one L×d value per text. Texts must be validated.
    pub fn forward_batch(&self, t: &mut Tape, p: &Binding, texts: &[&AttributeText]) -> Vec<Var> {
        let ids: Vec<usize> = texts.iter().flat_map(|x| x.tokens.iter().copied()).collect();
        let pos: Vec<usize> = texts.iter().flat_map(|x| 0..x.tokens.len()).collect();
        let tok = t.gather_rows(p.get(self.token_embedding), &ids);
        let pe = t.gather_rows(p.get(self.position_embedding), &pos);
        let mut x = t.add(tok, pe);
        let seqs = ranges(texts.iter().map(|x| x.tokens.len()));
        for layer in &self.layers {
            x = layer.forward(t, p, x, &seqs);
        }
        seqs.into_iter().map(|r| t.slice_rows(x, r.start, r.end)).collect()
    }

    /// Encodes one text with the parameters in `store`.
    pub fn encode_attribute(&self, store: &ParamStore, text: &AttributeText) -> Result<AttributeTokens> {
        self.validate(text)?;
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let out = self.forward_batch(&mut t, &p, &[text])[0];
        Ok(AttributeTokens { kind: text.kind, embedding: t.value(out).clone() })
    }
}

/// Cross-attribute Transformer block with per-attribute segment embeddings,
/// followed by average pooling over tokens.
#[derive(Clone, Debug)]
pub struct AttributeFusion {
    pub segment_embedding: Pid,
    pub block: TransformerLayer,
    pub dim: usize,
}

impl AttributeFusion {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            segment_embedding: b.normal(&format!("{name}.segment_embedding"), 3, dim, 0.1),
            block: TransformerLayer::new(b, &format!("{name}.block"), dim, heads),
            dim,
        }
    }

    /// Returns `(fused_tokens, pooled)`. `cross_attention = false` skips the
    /// Transformer block (the tokens are pooled as concatenated).
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Binding,
        parts: &[(AttributeKind, Var)],
        cross_attention: bool,
    ) -> (Var, Var) {
        assert!(!parts.is_empty(), "fusion needs at least one attribute");
        let rows: Vec<Var> = parts
            .iter()
            .map(|&(kind, x)| {
                let n = t.shape(x).0;
                let seg = t.gather_rows(p.get(self.segment_embedding), &vec![kind.index(); n]);
                t.add(x, seg)
            })
            .collect();
        let x = t.concat_rows(&rows);
        let n = t.shape(x).0;
        let fused = if cross_attention { self.block.forward(t, p, x, std::slice::from_ref(&(0..n))) } else { x };
        let pooled = t.mean_rows(fused);
        (fused, pooled)
    }

    pub fn fuse_attributes(
        &self,
        store: &ParamStore,
        pos: &AttributeTokens,
        tex: &AttributeTokens,
        shape: &AttributeTokens,
    ) -> Result<SemanticPrior> {
        for a in [pos, tex, shape] {
            if a.dim() != self.dim {
                return Err(CoreError::Dimension(format!(
                    "{} tokens have d={}, fusion expects {}",
                    a.kind,
                    a.dim(),
                    self.dim
                )));
            }
            if a.is_empty() {
                return Err(CoreError::InvalidInput(format!("empty {} tokens", a.kind)));
            }
        }
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let parts: Vec<(AttributeKind, Var)> =
            [pos, tex, shape].iter().map(|a| (a.kind, t.constant(a.embedding.clone()))).collect();
        let (fused, pooled) = self.forward(&mut t, &p, &parts, true);
        Ok(SemanticPrior { pooled: t.value(pooled).clone(), fused_tokens: t.value(fused).clone() })
    }
}
