//! Classifier-weight transfer from 2D parsing tasks to the surface task.
//!
//! The surface classifier is not learned directly: its weight matrix is
//! synthesized, on every forward pass, from the location / body-part /
//! keypoint classifier weights. A fixed relation graph scores how much each
//! surface label should borrow from each 2D label — half from lexical
//! embedding cosine similarity, half from co-occurrence frequency masked to
//! compositionally related pairs — and a small learned two-layer map turns
//! the borrowed rows into surface rows. Gradients flow through the synthesis
//! back into the 2D parser weights, so sparse surface supervision also
//! sharpens the densely supervised tasks and vice versa.

use std::collections::BTreeMap;

use dctensor::Tensor;

use crate::body;
use crate::error::{Error, Result};
use crate::init::ParamStore;

/// A label and the lexical tokens used to embed it.
#[derive(Debug, Clone)]
pub struct Label {
    pub name: String,
    pub tokens: Vec<String>,
}

impl Label {
    fn new(name: &str) -> Label {
        Label { name: name.to_string(), tokens: body::label_tokens(name) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParserTask {
    Loc,
    Part,
    Kpt,
}

pub const PARSER_TASKS: [ParserTask; 3] = [ParserTask::Loc, ParserTask::Part, ParserTask::Kpt];

/// Label vocabulary: three 2D-parser node sets plus the surface set
/// (background at index 0).
pub struct NodeVocab {
    pub loc: Vec<Label>,
    pub part: Vec<Label>,
    pub kpt: Vec<Label>,
    pub surface: Vec<Label>,
}

impl NodeVocab {
    pub fn standard() -> NodeVocab {
        NodeVocab {
            loc: body::LOC_NAMES.iter().map(|n| Label::new(n)).collect(),
            part: body::PART_NAMES.iter().map(|n| Label::new(n)).collect(),
            kpt: body::KEYPOINT_NAMES.iter().map(|n| Label::new(n)).collect(),
            surface: std::iter::once(Label::new("background"))
                .chain(body::SURFACE_NAMES.iter().map(|n| Label::new(n)))
                .collect(),
        }
    }

    pub fn task_labels(&self, task: ParserTask) -> &[Label] {
        match task {
            ParserTask::Loc => &self.loc,
            ParserTask::Part => &self.part,
            ParserTask::Kpt => &self.kpt,
        }
    }

    /// All 2D node labels in column order (loc, part, kpt).
    pub fn node_labels(&self) -> Vec<&Label> {
        self.loc.iter().chain(&self.part).chain(&self.kpt).collect()
    }

    pub fn node_count(&self) -> usize {
        self.loc.len() + self.part.len() + self.kpt.len()
    }

    pub fn surface_count(&self) -> usize {
        self.surface.len()
    }

    /// Column range of a task inside the node axis.
    pub fn task_columns(&self, task: ParserTask) -> std::ops::Range<usize> {
        let (l, p) = (self.loc.len(), self.part.len());
        match task {
            ParserTask::Loc => 0..l,
            ParserTask::Part => l..l + p,
            ParserTask::Kpt => l + p..l + p + self.kpt.len(),
        }
    }
}

/// Token → vector lookup parsed from `token v1 … vD` lines.
pub struct EmbeddingTable {
    dim: usize,
    map: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn parse(text: &str) -> Result<EmbeddingTable> {
        let mut map = BTreeMap::new();
        let mut dim = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap().to_string();
            let vec: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("embeddings line {}: bad float {f:?}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if vec.is_empty() {
                return Err(Error::Parse(format!("embeddings line {}: no values", lineno + 1)));
            }
            if dim == 0 {
                dim = vec.len();
            } else if vec.len() != dim {
                return Err(Error::Parse(format!(
                    "embeddings line {}: {} values, expected {dim}",
                    lineno + 1,
                    vec.len()
                )));
            }
            if map.insert(token.clone(), vec).is_some() {
                return Err(Error::Parse(format!(
                    "embeddings line {}: duplicate token {token:?}",
                    lineno + 1
                )));
            }
        }
        if map.is_empty() {
            return Err(Error::Parse("embedding table is empty".into()));
        }
        Ok(EmbeddingTable { dim, map })
    }

    /// The curated table shipped with the crate.
    pub fn builtin() -> EmbeddingTable {
        EmbeddingTable::parse(include_str!("../data/embeddings.txt")).expect("shipped table parses")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean of the label's token vectors; names any missing token.
    pub fn label_vector(&self, label: &Label) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        for token in &label.tokens {
            let Some(v) = self.map.get(token) else {
                return Err(Error::invalid(
                    "embedding",
                    format!("token {token:?} of label {:?} missing from embedding table", label.name),
                ));
            };
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
        let n = label.tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::invalid("semantic_similarity", "zero-norm label embedding"));
    }
    Ok(dot / (na * nb))
}

/// Cosine similarity of every (surface, node) label pair: `[|C_s|, |C_n|]`.
pub fn semantic_similarity(vocab: &NodeVocab, table: &EmbeddingTable) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> =
        vocab.surface.iter().map(|l| table.label_vector(l)).collect::<Result<_>>()?;
    let cols: Vec<Vec<f64>> =
        vocab.node_labels().iter().map(|l| table.label_vector(l)).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for r in &rows {
        for c in &cols {
            data.push(cosine(r, c)?);
        }
    }
    Ok(Tensor::from_vec(vec![rows.len(), cols.len()], data)?)
}

/// Parses `surface_label,node_label,value` CSV into a `[|C_s|, |C_n|]` grid.
/// Unknown labels and duplicate pairs are errors; absent pairs become 0.
fn parse_pair_csv(vocab: &NodeVocab, text: &str, what: &'static str) -> Result<Vec<f64>> {
    let row_of: BTreeMap<&str, usize> =
        vocab.surface.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let col_of: BTreeMap<&str, usize> =
        vocab.node_labels().iter().enumerate().map(|(j, l)| (l.name.as_str(), j)).collect();
    let (rows, cols) = (vocab.surface_count(), vocab.node_count());
    let mut grid = vec![f64::NAN; rows * cols];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let fail = |msg: String| Error::Parse(format!("{what} line {}: {msg}", lineno + 1));
        if fields.len() != 3 {
            return Err(fail(format!("{} fields, expected 3", fields.len())));
        }
        let &row = row_of.get(fields[0]).ok_or_else(|| {
            fail(format!("unknown surface label {:?}", fields[0]))
        })?;
        let &col = col_of.get(fields[1]).ok_or_else(|| {
            fail(format!("unknown node label {:?}", fields[1]))
        })?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| fail(format!("bad value {:?}", fields[2])))?;
        if !grid[row * cols + col].is_nan() {
            return Err(fail(format!("duplicate pair ({}, {})", fields[0], fields[1])));
        }
        grid[row * cols + col] = value;
    }
    for v in &mut grid {
        if v.is_nan() {
            *v = 0.0;
        }
    }
    Ok(grid)
}

/// Open-interval clamp width for rescaled frequencies.
pub const FREQ_EPSILON: f64 = 1e-3;

/// Min-max rescales raw co-occurrence counts into `(0,1)`: `[|C_s|, |C_n|]`.
pub fn frequency_matrix(vocab: &NodeVocab, counts_csv: &str) -> Result<Tensor> {
    let grid = parse_pair_csv(vocab, counts_csv, "relation counts")?;
    if grid.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(Error::Parse("relation counts must be nonnegative integers".into()));
    }
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    let rescale = |v: f64| {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        t.clamp(FREQ_EPSILON, 1.0 - FREQ_EPSILON)
    };
    let data: Vec<f64> = grid.into_iter().map(rescale).collect();
    Ok(Tensor::from_vec(vec![vocab.surface_count(), vocab.node_count()], data)?)
}

/// Binary compositional-relation mask: `[|C_s|, |C_n|]` of {0,1}.
pub fn mask_matrix(vocab: &NodeVocab, mask_csv: &str) -> Result<Tensor> {
    let grid = parse_pair_csv(vocab, mask_csv, "compositional mask")?;
    if grid.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Parse("compositional mask entries must be 0 or 1".into()));
    }
    Ok(Tensor::from_vec(vec![vocab.surface_count(), vocab.node_count()], grid)?)
}

/// Elementwise `freq ⊙ mask`; validates the operand ranges.
pub fn dependence_matrix(freq: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if freq.shape() != mask.shape() {
        return Err(Error::invalid(
            "dependence_matrix",
            format!("freq {:?} vs mask {:?}", freq.shape(), mask.shape()),
        ));
    }
    if freq.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::invalid("dependence_matrix", "frequencies must lie in (0,1)"));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("dependence_matrix", "mask must be binary"));
    }
    Ok(freq.mul(mask)?)
}

/// `omega·m_s + tau·m_d`.
pub fn graph_matrix(m_s: &Tensor, m_d: &Tensor, omega: f64, tau: f64) -> Result<Tensor> {
    if m_s.shape() != m_d.shape() {
        return Err(Error::invalid(
            "graph_matrix",
            format!("m_s {:?} vs m_d {:?}", m_s.shape(), m_d.shape()),
        ));
    }
    Ok(m_s.scale(omega)?.add(&m_d.scale(tau)?)?)
}

/// The full Eq.-pipeline products, kept for inspection/export.
pub struct RelationGraph {
    pub vocab: NodeVocab,
    pub m_s: Tensor,
    pub m_f: Tensor,
    pub i_mask: Tensor,
    pub m_d: Tensor,
    pub m_g: Tensor,
    pub omega: f64,
    pub tau: f64,
}

impl RelationGraph {
    pub fn build(
        vocab: NodeVocab,
        table: &EmbeddingTable,
        counts_csv: &str,
        mask_csv: &str,
        omega: f64,
        tau: f64,
    ) -> Result<RelationGraph> {
        let m_s = semantic_similarity(&vocab, table)?;
        let m_f = frequency_matrix(&vocab, counts_csv)?;
        let i_mask = mask_matrix(&vocab, mask_csv)?;
        let m_d = dependence_matrix(&m_f, &i_mask)?;
        let m_g = graph_matrix(&m_s, &m_d, omega, tau)?;
        Ok(RelationGraph { vocab, m_s, m_f, i_mask, m_d, m_g, omega, tau })
    }

    /// Builds from the data files shipped with the crate.
    pub fn builtin(omega: f64, tau: f64) -> Result<RelationGraph> {
        RelationGraph::build(
            NodeVocab::standard(),
            &EmbeddingTable::builtin(),
            include_str!("../data/relation_counts.csv"),
            include_str!("../data/compositional_mask.csv"),
            omega,
            tau,
        )
    }

    /// The graph restricted to one task's columns: `[|C_s|, |C_task|]`.
    pub fn task_block(&self, task: ParserTask) -> Tensor {
        task_block_of(&self.m_g, &self.vocab, task)
    }
}

fn task_block_of(m: &Tensor, vocab: &NodeVocab, task: ParserTask) -> Tensor {
    let cols = vocab.node_count();
    let range = vocab.task_columns(task);
    let rows = vocab.surface_count();
    let data = m.data();
    let mut out = Vec::with_capacity(rows * range.len());
    for r in 0..rows {
        out.extend_from_slice(&data[r * cols + range.start..r * cols + range.end]);
    }
    drop(data);
    Tensor::from_vec(vec![rows, range.len()], out).expect("finite block")
}

/// Uniform averaging ablation: every entry of a task block is `1/|C_task|`.
pub fn averaging_block(vocab: &NodeVocab, task: ParserTask) -> Tensor {
    let rows = vocab.surface_count();
    let cols = vocab.task_labels(task).len();
    Tensor::full(vec![rows, cols], 1.0 / cols as f64)
}

/// `W_a = block · W_task` — borrows 2D parser rows per the graph column
/// weights. Differentiable into `w`.
pub fn associate(block: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(block.matmul(w)?)
}

/// Two-layer synthesis: concat associated blocks along width, times `w_t`,
/// LeakyReLU(0.2), times `w_i` → `[|C_s|, D]`.
pub fn transform(assocs: &[&Tensor], w_t: &Tensor, w_i: &Tensor) -> Result<Tensor> {
    if assocs.is_empty() {
        return Err(Error::invalid("transform", "no associated blocks"));
    }
    let psi = if assocs.len() == 1 { assocs[0].clone() } else { Tensor::concat(assocs, 1)? };
    Ok(psi.matmul(w_t)?.leaky_relu(0.2)?.matmul(w_i)?)
}

/// How the surface classifier's weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KtmMode {
    /// Plain learned `[25, D]` parameter; no transfer.
    Off,
    /// Transfer from the keypoint parser only.
    KptOnly,
    /// Transfer from all three parsers through the relation graph.
    Full,
    /// Full pipeline but with the uniform averaging graph.
    AveragingGraph,
    /// Graph association only — blocks averaged, no learned transform.
    GraphOnly,
}

impl KtmMode {
    pub fn parse(s: &str) -> Result<KtmMode> {
        Ok(match s {
            "off" => KtmMode::Off,
            "v1-kpt-only" => KtmMode::KptOnly,
            "v2-full" => KtmMode::Full,
            "crkg_a" => KtmMode::AveragingGraph,
            "crkg-s-only" => KtmMode::GraphOnly,
            other => {
                return Err(Error::Parse(format!(
                    "unknown ktm mode {other:?} (expected off|v1-kpt-only|v2-full|crkg_a|crkg-s-only)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            KtmMode::Off => "off",
            KtmMode::KptOnly => "v1-kpt-only",
            KtmMode::Full => "v2-full",
            KtmMode::AveragingGraph => "crkg_a",
            KtmMode::GraphOnly => "crkg-s-only",
        }
    }

    /// Number of associated blocks entering the transform (0 = no transform).
    pub fn transform_blocks(&self) -> usize {
        match self {
            KtmMode::Off | KtmMode::GraphOnly => 0,
            KtmMode::KptOnly => 1,
            KtmMode::Full | KtmMode::AveragingGraph => 3,
        }
    }
}

/// The 2D parser classifier weights plus the synthesis parameters.
pub struct ParserWeights {
    pub w_loc: Tensor,
    pub w_part: Tensor,
    pub w_kpt: Tensor,
    pub w_t: Option<Tensor>,
    pub w_i: Option<Tensor>,
}

impl ParserWeights {
    pub fn new(d: usize, mode: KtmMode, params: &mut ParamStore) -> ParserWeights {
        let w_loc = params.linear("parser.loc", 2, d);
        let w_part = params.linear("parser.part", body::PART_COUNT, d);
        let w_kpt = params.linear("parser.kpt", body::KEYPOINT_COUNT, d);
        let blocks = mode.transform_blocks();
        let (w_t, w_i) = if blocks > 0 {
            (
                Some(params.linear("transfer.w_t", blocks * d, d)),
                Some(params.linear("transfer.w_i", d, d)),
            )
        } else {
            (None, None)
        };
        ParserWeights { w_loc, w_part, w_kpt, w_t, w_i }
    }
}

/// Surface-weight synthesizer: owns the graph blocks for its mode.
pub struct Ktm {
    pub mode: KtmMode,
    blocks: Vec<Tensor>,
}

impl Ktm {
    pub fn new(mode: KtmMode, omega: f64, tau: f64) -> Result<Ktm> {
        let blocks = match mode {
            KtmMode::Off => Vec::new(),
            KtmMode::KptOnly => {
                let g = RelationGraph::builtin(omega, tau)?;
                vec![g.task_block(ParserTask::Kpt)]
            }
            KtmMode::Full | KtmMode::GraphOnly => {
                let g = RelationGraph::builtin(omega, tau)?;
                PARSER_TASKS.iter().map(|&t| g.task_block(t)).collect()
            }
            KtmMode::AveragingGraph => {
                let vocab = NodeVocab::standard();
                PARSER_TASKS.iter().map(|&t| averaging_block(&vocab, t)).collect()
            }
        };
        Ok(Ktm { mode, blocks })
    }

    /// Graph blocks in task order (empty when the mode is `Off`).
    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    /// Synthesizes the surface classifier `[|C_s|, D]` from the current
    /// parser weights. Must not be called in `Off` mode.
    pub fn synthesize(&self, pw: &ParserWeights) -> Result<Tensor> {
        match self.mode {
            KtmMode::Off => Err(Error::invalid("ktm", "mode off synthesizes nothing")),
            KtmMode::KptOnly => {
                let a = associate(&self.blocks[0], &pw.w_kpt)?;
                transform(&[&a], pw.w_t.as_ref().unwrap(), pw.w_i.as_ref().unwrap())
            }
            KtmMode::Full | KtmMode::AveragingGraph => {
                let a_loc = associate(&self.blocks[0], &pw.w_loc)?;
                let a_part = associate(&self.blocks[1], &pw.w_part)?;
                let a_kpt = associate(&self.blocks[2], &pw.w_kpt)?;
                transform(
                    &[&a_loc, &a_part, &a_kpt],
                    pw.w_t.as_ref().unwrap(),
                    pw.w_i.as_ref().unwrap(),
                )
            }
            KtmMode::GraphOnly => {
                let a_loc = associate(&self.blocks[0], &pw.w_loc)?;
                let a_part = associate(&self.blocks[1], &pw.w_part)?;
                let a_kpt = associate(&self.blocks[2], &pw.w_kpt)?;
                Ok(a_loc.add(&a_part)?.add(&a_kpt)?.scale(1.0 / 3.0)?)
            }
        }
    }
}

/// Renders a `[|C_s|, |C_n|]` matrix as CSV with labelled rows and columns.
pub fn matrix_csv(m: &Tensor, vocab: &NodeVocab) -> String {
    let mut out = String::from("surface_label");
    for l in vocab.node_labels() {
        out.push(',');
        out.push_str(&l.name);
    }
    out.push('\n');
    let cols = vocab.node_count();
    let data = m.data();
    for (r, label) in vocab.surface.iter().enumerate() {
        out.push_str(&label.name);
        for c in 0..cols {
            out.push_str(&format!(",{}", data[r * cols + c]));
        }
        out.push('\n');
    }
    out
}
