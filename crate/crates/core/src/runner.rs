//! Data loading, sequence inference with temporal fusion, and dataset evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::eval::{
    once_counts, openlane_counts, sequence_stability, stability_report, threshold, EvalConfig, OnceCounts, OnceReport,
    OpenLaneCounts, OpenLaneReport, StabilityReport,
};
use crate::lane::GroundTruthLane;
use crate::model::{image_tensor, LaneModel, LanePrediction, QueryPrior};
use crate::synth::{generate_sequence, FrameSample};
use crate::temporal::{build_prior, source_indices, FusionConfig, FusionVariant, MemoryEntry, TemporalMemory};

/// Loads the configured dataset or generates it from the scene configuration.
pub fn load_data(cfg: &RunConfig) -> Result<Vec<Vec<FrameSample>>> {
    match &cfg.data.dataset {
        Some(root) => load_dataset(root),
        None => (0..cfg.data.sequences as u64)
            .map(|s| generate_sequence(&cfg.data.scene, s, cfg.data.frames))
            .collect(),
    }
}

/// Image size shared by every frame.
pub fn image_size(data: &[Vec<FrameSample>]) -> Result<(usize, usize)> {
    let first = data
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::EmptyInput("dataset has no frames".into()))?;
    let size = first.rig.image_size;
    if let Some(f) = data.iter().flatten().find(|f| f.rig.image_size != size) {
        return Err(Error::Shape(format!(
            "frame {} of {} is {:?}, expected {size:?}",
            f.index, f.sequence_id, f.rig.image_size
        )));
    }
    Ok(size)
}

/// Rolling inference state for one sequence.
pub struct SequenceRunner<'a> {
    model: &'a LaneModel,
    store: &'a ParamStore,
    fusion: FusionConfig,
    memory: TemporalMemory,
}

impl<'a> SequenceRunner<'a> {
    pub fn new(model: &'a LaneModel, store: &'a ParamStore, fusion: &FusionConfig) -> Self {
        Self {
            model,
            store,
            fusion: fusion.clone(),
            memory: TemporalMemory::new(fusion.history_len),
        }
    }

    /// Prior for `frame` from the frames seen so far.
    pub fn prior(&self, frame: &FrameSample) -> QueryPrior {
        build_prior(&self.fusion, &self.memory, &frame.ego_motion_from_prev, self.model)
    }

    /// Runs one frame and stores its state.
    pub fn step(&mut self, frame: &FrameSample) -> Result<Vec<LanePrediction>> {
        let prior = self.prior(frame);
        let mut g = Graph::new(self.store);
        let out = self
            .model
            .forward(&mut g, &image_tensor(&frame.image), &frame.rig, &prior)?;
        let preds = self.model.predictions(&g, &out);
        if self.fusion.variant != FusionVariant::None {
            let entry = MemoryEntry::from_output(&g, self.model, &out, source_indices(self.model, &prior))?;
            self.memory.update(entry, &frame.ego_motion_from_prev);
        }
        Ok(preds)
    }
}

/// Per-frame predictions of a whole sequence.
pub fn infer_sequence(
    model: &LaneModel,
    store: &ParamStore,
    frames: &[FrameSample],
    fusion: &FusionConfig,
) -> Result<Vec<Vec<LanePrediction>>> {
    let mut runner = SequenceRunner::new(model, store, fusion);
    frames.iter().map(|f| runner.step(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub openlane: OpenLaneReport,
    pub once: OnceReport,
    /// Only for sequences of at least two frames.
    pub stability: Option<StabilityReport>,
}

impl EvalSummary {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let o = &self.openlane;
        let mut rows = vec![
            ("frames".to_string(), self.frames as f64),
            ("openlane_F1".into(), o.f1),
            ("openlane_precision".into(), o.precision),
            ("openlane_recall".into(), o.recall),
            ("x_err_near".into(), o.x_err_near),
            ("x_err_far".into(), o.x_err_far),
            ("z_err_near".into(), o.z_err_near),
            ("z_err_far".into(), o.z_err_far),
            ("once_F1".into(), self.once.f1),
            ("once_precision".into(), self.once.precision),
            ("once_recall".into(), self.once.recall),
            ("once_mean_CD_error".into(), self.once.mean_cd_error),
        ];
        if let Some(a) = o.category_accuracy {
            rows.push(("category_accuracy".into(), a));
        }
        if let Some(s) = &self.stability {
            rows.push(("mean_F_stab".into(), s.mean_f_stab));
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// Scores already computed predictions against their frames.
pub fn score(data: &[Vec<FrameSample>], preds: &[Vec<Vec<LanePrediction>>], cfg: &EvalConfig) -> Result<EvalSummary> {
    let mut ol = OpenLaneCounts::default();
    let mut once = OnceCounts::default();
    let mut stab = Vec::new();
    let mut frames = 0;
    for (seq, seq_preds) in data.iter().zip(preds) {
        let mut per_frame = Vec::with_capacity(seq.len());
        for (frame, p) in seq.iter().zip(seq_preds) {
            let lanes: Vec<_> = p.iter().map(|l| l.lane.clone()).collect();
            let kept = threshold(&lanes, cfg);
            ol.add(&openlane_counts(&kept, &frame.lanes, cfg)?);
            once.add(&once_counts(&kept, &frame.lanes, cfg)?);
            per_frame.push((kept, frame.lanes.clone()));
            frames += 1;
        }
        if per_frame.len() >= 2 {
            stab.push(sequence_stability(&seq[0].sequence_id, &per_frame, cfg)?);
        }
    }
    if frames == 0 {
        return Err(Error::EmptyInput("nothing to evaluate".into()));
    }
    Ok(EvalSummary {
        frames,
        openlane: ol.report(),
        once: once.report(),
        stability: if stab.is_empty() {
            None
        } else {
            Some(stability_report(stab)?)
        },
    })
}

/// Runs the model over every sequence and scores it.
pub fn evaluate(
    model: &LaneModel,
    store: &ParamStore,
    data: &[Vec<FrameSample>],
    fusion: &FusionConfig,
    cfg: &EvalConfig,
) -> Result<(EvalSummary, Vec<Vec<Vec<LanePrediction>>>)> {
    let preds = data
        .iter()
        .map(|seq| infer_sequence(model, store, seq, fusion))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(data, &preds, cfg)?, preds))
}

/// Predictions and ground truth of one frame, as written by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub index: usize,
    pub predictions: Vec<LanePrediction>,
    pub ground_truth: Vec<GroundTruthLane>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePredictions {
    pub sequence_id: String,
    pub frames: Vec<FramePredictions>,
}

/// Inference output file with the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub config: serde_json::Value,
    pub sequences: Vec<SequencePredictions>,
}

impl PredictionsFile {
    pub fn new(cfg: &RunConfig, data: &[Vec<FrameSample>], preds: Vec<Vec<Vec<LanePrediction>>>) -> Self {
        let sequences = data
            .iter()
            .zip(preds)
            .map(|(seq, p)| SequencePredictions {
                sequence_id: seq.first().map(|f| f.sequence_id.clone()).unwrap_or_default(),
                frames: seq
                    .iter()
                    .zip(p)
                    .map(|(f, predictions)| FramePredictions {
                        index: f.index,
                        predictions,
                        ground_truth: f.lanes.clone(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            config: cfg.echo(),
            sequences,
        }
    }
}
