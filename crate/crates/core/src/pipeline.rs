//! End-to-end run: lines, representations, constraints, training, clustering.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_line_graph, connected_components, project_2d, ClusterAssignment, LineAffinityGraph};
use crate::config::PipelineConfig;
use crate::constraints::{generate_constraints, ConstraintSet, ConstraintStats, RuleTagger};
use crate::document::{build_contextual_lines, DocumentModel, WordId};
use crate::edits::palette;
use crate::error::Result;
use crate::features::{assemble_representations, Representations};
use crate::model::{embed_all, init_model, train, EmbeddingModel, TrainReport};
use crate::util::seeded_rng;

/// Everything a run produces; the starting point of refinement.
#[derive(Clone, Debug)]
pub struct PipelineState {
    /// Resolved configuration (component seeds filled in).
    pub config: PipelineConfig,
    /// Document with contextual lines assigned.
    pub doc: DocumentModel,
    pub reps: Representations,
    pub constraints: ConstraintSet,
    pub model: EmbeddingModel,
    pub train_report: TrainReport,
    pub latents: Array2<f64>,
    pub graph: LineAffinityGraph,
    pub assignment: ClusterAssignment,
    pub projection: Array2<f64>,
    pub timings: Timings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub lines: f64,
    pub features: f64,
    pub constraints: f64,
    pub train: f64,
    pub cluster: f64,
    pub total: f64,
}

/// Runs the whole pipeline on `doc`.
pub fn run_pipeline(doc: DocumentModel, cfg: &PipelineConfig) -> Result<PipelineState> {
    cfg.validate()?;
    let config = cfg.resolved();
    doc.validate()?;
    let start = Instant::now();
    let mut timings = Timings::default();

    let mut t = Instant::now();
    let mut doc = doc;
    let lines = build_contextual_lines(&doc, &config.lines);
    doc.assign_lines(lines);
    timings.lines = lap(&mut t);

    let reps = assemble_representations(&doc, &config.features)?;
    timings.features = lap(&mut t);

    let mut rng = seeded_rng(config.constraints.rng_seed);
    let constraints = generate_constraints(&doc, &reps.visual, &RuleTagger, &config.constraints, &mut rng)?;
    timings.constraints = lap(&mut t);

    let mut model = init_model(reps.dim, config.train.latent_dim, config.train.init_std, config.init_seed());
    let train_report = train(&mut model, &reps, &constraints, &config.train)?;
    timings.train = lap(&mut t);

    let (latents, graph, assignment, projection) = cluster_with(&doc, &model, &reps, &config)?;
    timings.cluster = lap(&mut t);
    timings.total = start.elapsed().as_secs_f64();
    log::info!(
        "{}: {} words, {} lines, {} constraints, {} clusters in {:.1}s",
        doc.doc_id,
        doc.words.len(),
        doc.lines.len(),
        constraints.len(),
        assignment.len(),
        timings.total
    );
    Ok(PipelineState {
        config,
        doc,
        reps,
        constraints,
        model,
        train_report,
        latents,
        graph,
        assignment,
        projection,
        timings,
    })
}

fn lap(t: &mut Instant) -> f64 {
    let s = t.elapsed().as_secs_f64();
    *t = Instant::now();
    s
}

type Clustered = (Array2<f64>, LineAffinityGraph, ClusterAssignment, Array2<f64>);

/// Embeds every word with `model` and clusters the line graph.
pub fn cluster_with(
    doc: &DocumentModel,
    model: &EmbeddingModel,
    reps: &Representations,
    cfg: &PipelineConfig,
) -> Result<Clustered> {
    let latents = embed_all(model, reps)?;
    let graph = build_line_graph(doc, &latents, &cfg.cluster)?;
    let assignment = connected_components(&graph, doc);
    let projection = project_2d(&latents);
    Ok((latents, graph, assignment, projection))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub word_id: WordId,
    pub x: f64,
    pub y: f64,
    pub cluster_id: usize,
}

/// Scatter data for the UI: one point per word plus the cluster palette.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPayload {
    pub points: Vec<ProjectionPoint>,
    pub palette: BTreeMap<usize, String>,
}

pub fn projection_payload(
    word_ids: &[WordId],
    projection: &Array2<f64>,
    assignment: &ClusterAssignment,
) -> ProjectionPayload {
    let clusters = assignment.word_to_cluster();
    let points = word_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| {
            clusters.get(id).map(|&c| ProjectionPoint {
                word_id: *id,
                x: projection[[i, 0]],
                y: projection[[i, 1]],
                cluster_id: c,
            })
        })
        .collect();
    ProjectionPayload {
        points,
        palette: palette(assignment),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub clusters: usize,
    pub words: usize,
    pub lines: usize,
    pub largest: usize,
    pub singletons: usize,
    pub graph_edges: usize,
}

impl ClusterSummary {
    pub fn of(doc: &DocumentModel, graph: &LineAffinityGraph, assignment: &ClusterAssignment) -> Self {
        ClusterSummary {
            clusters: assignment.len(),
            words: assignment.word_count(),
            lines: doc.lines.len(),
            largest: assignment.clusters.iter().map(|c| c.word_ids.len()).max().unwrap_or(0),
            singletons: assignment.clusters.iter().filter(|c| c.word_ids.len() == 1).count(),
            graph_edges: graph.edges.len(),
        }
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub doc_id: String,
    pub seed: u64,
    pub summary: ClusterSummary,
    pub constraints: ConstraintStats,
    pub train: TrainReport,
    pub timings: Timings,
}

impl PipelineState {
    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary::of(&self.doc, &self.graph, &self.assignment)
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            doc_id: self.doc.doc_id.clone(),
            seed: self.config.seed,
            summary: self.summary(),
            constraints: self.constraints.stats(),
            train: self.train_report.clone(),
            timings: self.timings.clone(),
        }
    }

    pub fn projection_payload(&self) -> ProjectionPayload {
        projection_payload(&self.reps.word_ids(), &self.projection, &self.assignment)
    }
}
