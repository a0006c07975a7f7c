//! node2vec segment embeddings over the line graph: second-order biased
//! random walks followed by skip-gram with negative sampling.
//!
//! Negative samples come from the walk-corpus unigram distribution raised
//! to 3/4. SGD uses a learning rate decaying linearly to zero over all
//! epochs. Only the input matrix is kept as the embedding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{LineGraph, RoadNetwork, SegmentId};
use crate::seeds::derive_seed;

pub const EMBEDDING_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("invalid walk config: {0}")]
    Config(String),
    #[error("empty walk corpus")]
    NoWalks,
    #[error("embedding file: {0}")]
    Format(String),
    #[error("embedding table has no vector for segment {0}")]
    MissingSegment(SegmentId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub context_size: usize,
    pub p: f64,
    pub q: f64,
    pub negatives_per_positive: usize,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walk_length: 20,
            walks_per_node: 10,
            context_size: 10,
            p: 1.0,
            q: 1.0,
            negatives_per_positive: 1,
            dim: EMBEDDING_DIM,
            epochs: 5,
            learning_rate: 0.025,
            seed: 17,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let counts = [
            ("walk_length", self.walk_length),
            ("walks_per_node", self.walks_per_node),
            ("context_size", self.context_size),
            ("negatives_per_positive", self.negatives_per_positive),
            ("dim", self.dim),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(EmbeddingError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.p > 0.0 && self.q > 0.0) {
            return Err(EmbeddingError::Config("p and q must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EmbeddingError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// One walk from `start`, truncated early at a vertex without successors.
fn walk_from(lg: &LineGraph, start: usize, cfg: &WalkConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut walk = Vec::with_capacity(cfg.walk_length);
    walk.push(start);
    while walk.len() < cfg.walk_length {
        let cur = *walk.last().unwrap();
        let next = &lg.successors[cur];
        if next.is_empty() {
            break;
        }
        let step = if walk.len() == 1 || (cfg.p == 1.0 && cfg.q == 1.0) {
            next[rng.gen_range(0..next.len())]
        } else {
            let prev = walk[walk.len() - 2];
            let weights: Vec<f64> = next
                .iter()
                .map(|&x| {
                    if x == prev {
                        1.0 / cfg.p
                    } else if lg.has_edge(prev, x) || lg.has_edge(x, prev) {
                        1.0
                    } else {
                        1.0 / cfg.q
                    }
                })
                .collect();
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            next[dist.sample(rng)]
        };
        walk.push(step);
    }
    walk
}

/// `walks_per_node` walks from every vertex, in vertex-major order. Each
/// walk has its own RNG seeded from `(seed, vertex, walk index)`.
pub fn generate_walks(lg: &LineGraph, cfg: &WalkConfig) -> Vec<Vec<usize>> {
    let mut walks = Vec::with_capacity(lg.vertex_count() * cfg.walks_per_node);
    for v in 0..lg.vertex_count() {
        for k in 0..cfg.walks_per_node {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[v as u64, k as u64]));
            walks.push(walk_from(lg, v, cfg, &mut rng));
        }
    }
    walks
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub ids: Vec<SegmentId>,
    /// Input matrix, one row per entry of `ids`.
    pub vectors: Vec<Vec<f64>>,
    /// Output matrix; only populated by training.
    pub context_vectors: Vec<Vec<f64>>,
    index: BTreeMap<SegmentId, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, ids: Vec<SegmentId>, vectors: Vec<Vec<f64>>) -> Result<Self, EmbeddingError> {
        if ids.len() != vectors.len() {
            return Err(EmbeddingError::Format("id and vector counts differ".into()));
        }
        let mut index = BTreeMap::new();
        for (i, (id, v)) in ids.iter().zip(&vectors).enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::Format(format!(
                    "segment {id}: expected {dim} values, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::Format(format!("segment {id}: non-finite value")));
            }
            if index.insert(*id, i).is_some() {
                return Err(EmbeddingError::Format(format!("duplicate segment {id}")));
            }
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            context_vectors: Vec::new(),
            index,
        })
    }

    pub fn get(&self, id: SegmentId) -> Result<&[f64], EmbeddingError> {
        self.index
            .get(&id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or(EmbeddingError::MissingSegment(id))
    }

    /// Every network segment must have a vector of the table's dimension.
    pub fn check_covers(&self, net: &RoadNetwork, dim: usize) -> Result<(), EmbeddingError> {
        if self.dim != dim {
            return Err(EmbeddingError::Format(format!(
                "dimension {} does not match expected {dim}",
                self.dim
            )));
        }
        for s in net.segments() {
            self.get(s.id)?;
        }
        Ok(())
    }

    pub fn cosine(&self, a: SegmentId, b: SegmentId) -> Result<f64, EmbeddingError> {
        Ok(cosine(self.get(a)?, self.get(b)?))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Result of skip-gram training: the table plus the mean pair loss of each
/// epoch (measured during the pass).
#[derive(Debug, Clone)]
pub struct SkipGramRun {
    pub table: EmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

/// Skip-gram with negative sampling on `walks` over `vertex_count` vertices.
pub fn train_skipgram(
    walks: &[Vec<usize>],
    vertex_count: usize,
    ids: &[SegmentId],
    cfg: &WalkConfig,
) -> Result<SkipGramRun, EmbeddingError> {
    cfg.validate()?;
    if walks.iter().all(|w| w.is_empty()) {
        return Err(EmbeddingError::NoWalks);
    }
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5eed]));
    let mut input: Vec<Vec<f64>> = (0..vertex_count)
        .map(|_| (0..dim).map(|_| (rng.gen::<f64>() - 0.5) / dim as f64).collect())
        .collect();
    let mut output = vec![vec![0.0; dim]; vertex_count];

    let mut counts = vec![0.0f64; vertex_count];
    for w in walks {
        for &v in w {
            counts[v] += 1.0;
        }
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75))).map_err(|_| EmbeddingError::NoWalks)?;

    let pairs_per_epoch: usize = walks
        .iter()
        .map(|w| {
            (0..w.len())
                .map(|i| {
                    let lo = i.saturating_sub(cfg.context_size);
                    let hi = (i + cfg.context_size).min(w.len() - 1);
                    hi - lo
                })
                .sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut grad_in = vec![0.0; dim];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut n = 0usize;
        for w in walks {
            for (i, &center) in w.iter().enumerate() {
                let lo = i.saturating_sub(cfg.context_size);
                let hi = (i + cfg.context_size).min(w.len().saturating_sub(1));
                for (j, &ctx) in w.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.learning_rate * (1.0 - seen as f64 / total).max(1e-4);
                    seen += 1;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let mut targets = Vec::with_capacity(1 + cfg.negatives_per_positive);
                    targets.push((ctx, 1.0));
                    for _ in 0..cfg.negatives_per_positive {
                        targets.push((noise.sample(&mut rng), 0.0));
                    }
                    for (t, label) in targets {
                        let u = &input[center];
                        let o = &mut output[t];
                        let dot: f64 = u.iter().zip(o.iter()).map(|(a, b)| a * b).sum();
                        let s = sigmoid(dot);
                        loss -= if label > 0.5 {
                            s.max(1e-12).ln()
                        } else {
                            (1.0 - s).max(1e-12).ln()
                        };
                        let coeff = lr * (label - s);
                        for d in 0..dim {
                            grad_in[d] += coeff * o[d];
                            o[d] += coeff * u[d];
                        }
                    }
                    for (x, g) in input[center].iter_mut().zip(&grad_in) {
                        *x += g;
                    }
                    n += 1;
                }
            }
        }
        epoch_losses.push(if n > 0 { loss / n as f64 } else { 0.0 });
    }
    let mut table = EmbeddingTable::new(dim, ids.to_vec(), input)?;
    table.context_vectors = output;
    Ok(SkipGramRun { table, epoch_losses })
}

/// Walks plus skip-gram on a network's line graph.
pub fn embed_network(net: &RoadNetwork, cfg: &WalkConfig) -> Result<SkipGramRun, EmbeddingError> {
    cfg.validate()?;
    let lg = net.line_graph();
    if lg.vertex_count() == 0 {
        return Err(EmbeddingError::NoWalks);
    }
    let walks = generate_walks(&lg, cfg);
    train_skipgram(&walks, lg.vertex_count(), &lg.ids, cfg)
}

/// CSV `segment_id,v0..v{dim-1}`.
pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), EmbeddingError> {
    let mut out = String::from("segment_id");
    for d in 0..table.dim {
        out.push_str(&format!(",v{d}"));
    }
    out.push('\n');
    for (id, v) in table.ids.iter().zip(&table.vectors) {
        out.push_str(&id.0.to_string());
        for x in v {
            out.push_str(&format!(",{x:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, EmbeddingError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EmbeddingError::Format("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"segment_id") {
        return Err(EmbeddingError::Format("first column must be segment_id".into()));
    }
    let dim = cols.len() - 1;
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let line_no = n + 2;
        let id = fields
            .next()
            .and_then(|f| f.trim().parse::<u32>().ok())
            .ok_or_else(|| EmbeddingError::Format(format!("line {line_no}: bad segment id")))?;
        let v: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EmbeddingError::Format(format!("line {line_no}: {e}")))?;
        ids.push(SegmentId(id));
        vectors.push(v);
    }
    EmbeddingTable::new(dim, ids, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WalkConfig {
        WalkConfig::default()
    }

    #[test]
    fn chain_walk_is_forced() {
        let lg = LineGraph::from_adjacency(vec![vec![1], vec![2], vec![]]);
        let c = WalkConfig {
            walk_length: 3,
            walks_per_node: 4,
            ..cfg()
        };
        let walks = generate_walks(&lg, &c);
        assert_eq!(walks.len(), 12);
        for w in walks.iter().take(4) {
            assert_eq!(w, &vec![0, 1, 2]);
        }
        // walks from the sink truncate immediately
        assert_eq!(walks[8], vec![2]);
    }

    #[test]
    fn isolated_vertex_walk_has_length_one() {
        let lg = LineGraph::from_adjacency(vec![vec![]]);
        let walks = generate_walks(&lg, &cfg());
        assert!(walks.iter().all(|w| w == &vec![0]));
    }

    #[test]
    fn unbiased_walk_steps_are_uniform() {
        // complete graph K4 as a directed 3-regular graph
        let adj: Vec<Vec<usize>> = (0..4).map(|v| (0..4).filter(|&u| u != v).collect()).collect();
        let lg = LineGraph::from_adjacency(adj);
        let c = WalkConfig {
            walk_length: 101,
            walks_per_node: 25,
            ..cfg()
        };
        let walks = generate_walks(&lg, &c);
        // transitions out of vertex 0, bucketed by neighbour
        let mut hist = [0f64; 4];
        for w in &walks {
            for pair in w.windows(2) {
                if pair[0] == 0 {
                    hist[pair[1]] += 1.0;
                }
            }
        }
        let n: f64 = hist.iter().sum();
        assert!(n > 2000.0, "{n}");
        let expected = n / 3.0;
        let chi2: f64 = hist[1..].iter().map(|o| (o - expected).powi(2) / expected).sum();
        // chi-square, 2 dof: 99.9% quantile is 13.8
        assert!(chi2 < 13.8, "chi2 {chi2} for {hist:?}");
        assert_eq!(hist[0], 0.0);
    }

    #[test]
    fn biased_walk_respects_return_parameter() {
        // undirected path 0-1-2 as a directed graph; tiny p => almost always return
        let lg = LineGraph::from_adjacency(vec![vec![1], vec![0, 2], vec![1]]);
        let c = WalkConfig {
            walk_length: 3,
            walks_per_node: 200,
            p: 1e-3,
            q: 1.0,
            ..cfg()
        };
        let walks = generate_walks(&lg, &c);
        let returns = walks
            .iter()
            .filter(|w| w.len() == 3 && w[0] == 0)
            .filter(|w| w[2] == 0)
            .count();
        assert!(returns > 190, "{returns}");
    }

    #[test]
    fn pair_graph_gets_positive_affinity() {
        let lg = LineGraph::from_adjacency(vec![vec![1], vec![0]]);
        let c = WalkConfig {
            epochs: 50,
            ..cfg()
        };
        let walks = generate_walks(&lg, &c);
        let run = train_skipgram(&walks, 2, &lg.ids, &c).unwrap();
        let t = &run.table;
        let dot: f64 = t.vectors[0].iter().zip(&t.context_vectors[1]).map(|(a, b)| a * b).sum();
        assert!(sigmoid(dot) > 0.5);
    }

    #[test]
    fn two_cliques_separate() {
        let mut adj = vec![Vec::new(); 10];
        for a in 0..10 {
            for b in 0..10 {
                if a != b && (a < 5) == (b < 5) {
                    adj[a].push(b);
                }
            }
        }
        let lg = LineGraph::from_adjacency(adj);
        let c = cfg();
        let run = train_skipgram(&generate_walks(&lg, &c), 10, &lg.ids, &c).unwrap();
        let t = &run.table;
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for a in 0..10 {
            for b in (a + 1)..10 {
                let cs = cosine(&t.vectors[a], &t.vectors[b]);
                if (a < 5) == (b < 5) {
                    intra += cs;
                    ni += 1;
                } else {
                    inter += cs;
                    nx += 1;
                }
            }
        }
        assert!(intra / ni as f64 > inter / nx as f64);
    }

    #[test]
    fn skipgram_loss_non_increasing_at_small_rate() {
        let adj: Vec<Vec<usize>> = (0..12).map(|v| vec![(v + 1) % 12, (v + 3) % 12]).collect();
        let lg = LineGraph::from_adjacency(adj);
        let c = WalkConfig {
            learning_rate: 0.005,
            epochs: 8,
            ..cfg()
        };
        let run = train_skipgram(&generate_walks(&lg, &c), 12, &lg.ids, &c).unwrap();
        for w in run.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] * 1.01, "{:?}", run.epoch_losses);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let adj: Vec<Vec<usize>> = (0..6).map(|v| vec![(v + 1) % 6, (v + 2) % 6]).collect();
        let lg = LineGraph::from_adjacency(adj);
        let c = cfg();
        let a = train_skipgram(&generate_walks(&lg, &c), 6, &lg.ids, &c).unwrap();
        let b = train_skipgram(&generate_walks(&lg, &c), 6, &lg.ids, &c).unwrap();
        assert_eq!(a.table, b.table);
        assert!(a.table.vectors.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn config_validation() {
        assert!(WalkConfig { p: 0.0, ..cfg() }.validate().is_err());
        assert!(WalkConfig { walk_length: 0, ..cfg() }.validate().is_err());
        assert_eq!(cfg().dim, 32);
        assert_eq!(cfg().walk_length, 20);
        assert_eq!(cfg().context_size, 10);
        assert_eq!(cfg().walks_per_node, 10);
        assert_eq!(cfg().negatives_per_positive, 1);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let t = EmbeddingTable::new(
            3,
            vec![SegmentId(4), SegmentId(9)],
            vec![vec![0.1, -2.5e-7, 3.0], vec![1.0 / 3.0, 0.0, -1.0]],
        )
        .unwrap();
        save_embeddings(&t, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            back.get(SegmentId(5)),
            Err(EmbeddingError::MissingSegment(SegmentId(5)))
        ));
        fs::write(&path, "segment_id,v0,v1\n1,0.5\n").unwrap();
        assert!(load_embeddings(&path).is_err());
    }
}
