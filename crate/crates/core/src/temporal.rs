//! Temporal fusion: a short memory of past query states, carried into the current
//! frame's ego coordinates and turned into a [`QueryPrior`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{transform_points_ego, EgoMotion, Point3};
use crate::lane::{resample_linear_extrapolate, WorldBox};
use crate::model::{sigmoid, ExtraQueries, ForwardOutput, LaneModel, QueryPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Single-frame model.
    #[default]
    None,
    /// Initial anchors replaced by the previous frame's refined anchors.
    Anchors,
    /// Current queries cross-attend to all stored query contents.
    QuerySa,
    /// Top-K stored queries appended with the initial anchors of their source index.
    TopkQuery,
    /// Top-K stored queries appended with their own transformed anchors.
    TopkQueryAnchors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub top_k: usize,
    pub history_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: FusionVariant::None,
            top_k: 6,
            history_len: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 {
            return Err(Error::Config("fusion.history_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Query state of one past frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Query contents `[Q', D]`.
    pub contents: Tensor,
    /// Refined anchors per query in that frame's coordinates.
    pub anchors: Vec<Vec<Point3>>,
    /// Normalized `(start, end)` per query.
    pub ranges: Vec<(f64, f64)>,
    pub confidences: Vec<f64>,
    /// Index of the learned query each entry descends from.
    pub source_index: Vec<usize>,
    /// Transform from the entry's frame to the latest stored frame.
    pub motion_to_latest: EgoMotion,
}

impl MemoryEntry {
    /// Captures the final-layer state of a forward pass. `source_index` must cover every
    /// query of the pass, including appended ones.
    pub fn from_output(g: &Graph, model: &LaneModel, out: &ForwardOutput, source_index: Vec<usize>) -> Result<Self> {
        let q = out.num_queries;
        if source_index.len() != q {
            return Err(Error::Shape(format!(
                "{} source indices for {q} queries",
                source_index.len()
            )));
        }
        let n = model.cfg.anchors;
        let last = out
            .layers
            .last()
            .ok_or_else(|| Error::Shape("model has no layers".into()))?;
        let ax = &g.value(last.anchor_x).data;
        let az = &g.value(last.anchor_z).data;
        let r = &g.value(out.range).data;
        let anchors = (0..q)
            .map(|qi| {
                (0..n)
                    .map(|i| [ax[qi * n + i], model.y_grid[i], az[qi * n + i]])
                    .collect()
            })
            .collect();
        Ok(Self {
            contents: g.value(out.content).clone(),
            anchors,
            ranges: (0..q).map(|qi| (r[2 * qi], r[2 * qi + 1])).collect(),
            confidences: g.value(out.conf_logit).data.iter().map(|&l| sigmoid(l)).collect(),
            source_index,
            motion_to_latest: EgoMotion::identity(),
        })
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}

/// Bounded history, oldest entry first.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMemory {
    pub history_len: usize,
    pub entries: VecDeque<MemoryEntry>,
}

impl TemporalMemory {
    pub fn new(history_len: usize) -> Self {
        Self {
            history_len,
            entries: VecDeque::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<&MemoryEntry> {
        self.entries.back()
    }

    /// Stores the state of a new frame. `motion_from_prev` maps the previously latest
    /// frame into the new one and is folded into every older entry.
    pub fn update(&mut self, entry: MemoryEntry, motion_from_prev: &EgoMotion) {
        for e in &mut self.entries {
            e.motion_to_latest = e.motion_to_latest.then(motion_from_prev);
        }
        self.entries.push_back(MemoryEntry {
            motion_to_latest: EgoMotion::identity(),
            ..entry
        });
        while self.entries.len() > self.history_len {
            self.entries.pop_front();
        }
    }
}

/// Moves an anchor set by `motion`, re-samples it on `y_grid` (linear extrapolation past
/// the ends) and clamps it into the world box.
pub fn propagate_anchors(points: &[Point3], motion: &EgoMotion, y_grid: &[f64], world: &WorldBox) -> Vec<Point3> {
    let mut moved = transform_points_ego(points, motion);
    moved.sort_by(|a, b| a[1].total_cmp(&b[1]));
    resample_linear_extrapolate(&moved, y_grid)
        .into_iter()
        .map(|p| world.clamp(p))
        .collect()
}

/// Picks the `k` most confident stored queries as `(entry, query)` pairs. Ties keep the
/// order of a newest-entry-first flattening. Asking for more than is stored returns all.
pub fn select_top_k(memory: &TemporalMemory, k: usize) -> Vec<(usize, usize)> {
    let mut flat: Vec<(usize, usize, f64)> = memory
        .entries
        .iter()
        .enumerate()
        .rev()
        .flat_map(|(ei, e)| e.confidences.iter().enumerate().map(move |(qi, &c)| (ei, qi, c)))
        .collect();
    if k > flat.len() {
        log::warn!("top-k of {k} requested with only {} stored queries", flat.len());
    }
    flat.sort_by(|a, b| b.2.total_cmp(&a.2));
    flat.into_iter().take(k).map(|(e, q, _)| (e, q)).collect()
}

fn range_logits(range: (f64, f64)) -> [f64; 2] {
    let lg = |p: f64| {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    };
    let (s, e) = range;
    let rest = (1.0 - s).max(1e-12);
    [lg(s), lg((e - s) / rest)]
}

/// Builds the prior for the current frame from `memory`, where `motion_from_prev` maps the
/// latest stored frame into the current one. An empty memory (or `top_k = 0` for the
/// Top-K variants) gives an empty prior, i.e. the single-frame model.
pub fn build_prior(
    cfg: &FusionConfig,
    memory: &TemporalMemory,
    motion_from_prev: &EgoMotion,
    model: &LaneModel,
) -> QueryPrior {
    let mut prior = QueryPrior::default();
    if memory.is_empty() {
        return prior;
    }
    let to_current = |e: &MemoryEntry| e.motion_to_latest.then(motion_from_prev);
    let (q, n, d) = (model.cfg.queries, model.cfg.anchors, model.cfg.dim);
    match cfg.variant {
        FusionVariant::None => {}
        FusionVariant::Anchors => {
            let latest = memory.latest().expect("non-empty");
            let motion = to_current(latest);
            let (mut xs, mut zs) = (Vec::with_capacity(q * n), Vec::with_capacity(q * n));
            for qi in 0..q.min(latest.len()) {
                for p in propagate_anchors(&latest.anchors[qi], &motion, &model.y_grid, &model.world) {
                    xs.push(p[0]);
                    zs.push(p[2]);
                }
            }
            if xs.len() == q * n {
                prior.anchor_override = Some((xs, zs));
            }
        }
        FusionVariant::QuerySa => {
            let rows: usize = memory.entries.iter().map(|e| e.len()).sum();
            let data = memory
                .entries
                .iter()
                .flat_map(|e| e.contents.data.iter().copied())
                .collect();
            prior.memory = Some(Tensor::new(vec![rows, d], data));
        }
        FusionVariant::TopkQuery | FusionVariant::TopkQueryAnchors => {
            if cfg.top_k == 0 {
                return prior;
            }
            let picks = select_top_k(memory, cfg.top_k);
            let mut content = Vec::with_capacity(picks.len() * d);
            let mut source_index = Vec::with_capacity(picks.len());
            let (mut xs, mut zs, mut rs) = (Vec::new(), Vec::new(), Vec::new());
            for &(ei, qi) in &picks {
                let e = &memory.entries[ei];
                content.extend_from_slice(&e.contents.data[qi * d..(qi + 1) * d]);
                source_index.push(e.source_index[qi]);
                if cfg.variant == FusionVariant::TopkQueryAnchors {
                    for p in propagate_anchors(&e.anchors[qi], &to_current(e), &model.y_grid, &model.world) {
                        xs.push(p[0]);
                        zs.push(p[2]);
                    }
                    rs.extend(range_logits(e.ranges[qi]));
                }
            }
            prior.extra = Some(ExtraQueries {
                content: Tensor::new(vec![picks.len(), d], content),
                source_index,
                anchors: (cfg.variant == FusionVariant::TopkQueryAnchors).then_some((xs, zs, rs)),
            });
        }
    }
    prior
}

/// Source indices of every query a forward pass with `prior` produces.
pub fn source_indices(model: &LaneModel, prior: &QueryPrior) -> Vec<usize> {
    let mut s: Vec<usize> = (0..model.cfg.queries).collect();
    if let Some(extra) = &prior.extra {
        s.extend_from_slice(&extra.source_index);
    }
    s
}
