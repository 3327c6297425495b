//! Interactive refinement: user selections become constraints, the network is
//! warm-started on the merged pool and the document is re-clustered.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, LineAffinityGraph};
use crate::config::PipelineConfig;
use crate::constraints::{Constraint, ConstraintSet, ConstraintSource, ConstraintStats};
use crate::document::{DocumentModel, WordId};
use crate::error::{Error, Result};
use crate::features::{assemble_representations, Representations};
use crate::model::{checkpoint_bytes, model_from_checkpoint, train, EmbeddingModel, TrainReport};
use crate::pipeline::{cluster_with, projection_payload, ClusterSummary, PipelineState, ProjectionPayload};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum UserSelection {
    MustGroup { word_ids: Vec<WordId> },
    CannotGroup { group_a: Vec<WordId>, group_b: Vec<WordId> },
}

fn dedup(ids: &[WordId]) -> Vec<WordId> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl UserSelection {
    pub fn validate(&self) -> Result<()> {
        match self {
            UserSelection::MustGroup { word_ids } => {
                if dedup(word_ids).len() < 2 {
                    return Err(Error::validation("word_ids", "a must group needs at least two distinct words"));
                }
            }
            UserSelection::CannotGroup { group_a, group_b } => {
                if group_a.is_empty() || group_b.is_empty() {
                    return Err(Error::validation("group_a", "both groups must be non-empty"));
                }
                if let Some(w) = group_a.iter().find(|w| group_b.contains(w)) {
                    return Err(Error::validation("group_b", format!("word {w} is in both groups")));
                }
            }
        }
        Ok(())
    }

    /// Validates and checks that every word exists in `doc`.
    pub fn validate_for(&self, doc: &DocumentModel) -> Result<()> {
        self.validate()?;
        let ids: Vec<&WordId> = match self {
            UserSelection::MustGroup { word_ids } => word_ids.iter().collect(),
            UserSelection::CannotGroup { group_a, group_b } => group_a.iter().chain(group_b).collect(),
        };
        match ids.into_iter().find(|id| doc.word(**id).is_none()) {
            Some(id) => Err(Error::validation("word_ids", format!("unknown word {id}"))),
            None => Ok(()),
        }
    }
}

/// All pairwise constraints implied by a selection.
pub fn selection_to_constraints(sel: &UserSelection) -> Result<Vec<Constraint>> {
    sel.validate()?;
    let mut out = Vec::new();
    match sel {
        UserSelection::MustGroup { word_ids } => {
            let ids = dedup(word_ids);
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    out.push(Constraint::must(*a, *b, ConstraintSource::User));
                }
            }
        }
        UserSelection::CannotGroup { group_a, group_b } => {
            for a in dedup(group_a) {
                for b in dedup(group_b) {
                    out.push(Constraint::cannot(a, b, ConstraintSource::User));
                }
            }
        }
    }
    Ok(out)
}

/// Deduplicated user constraints keyed by pair; opposite kinds on one pair
/// are an error.
fn user_by_pair(user: &[Constraint]) -> Result<BTreeMap<(WordId, WordId), Constraint>> {
    let mut by_pair: BTreeMap<(WordId, WordId), Constraint> = BTreeMap::new();
    for c in user {
        match by_pair.get(&c.pair()) {
            Some(prev) if prev.kind != c.kind => {
                let (a, b) = c.pair();
                return Err(Error::Contradiction(a, b));
            }
            Some(_) => {}
            None => {
                by_pair.insert(c.pair(), Constraint::new(c.a, c.b, c.kind, ConstraintSource::User));
            }
        }
    }
    Ok(by_pair)
}

/// Union of the automatic and user constraints. Automatic constraints on a
/// user-constrained pair are dropped; user constraints are never sampled.
pub fn merge_constraints(auto: &ConstraintSet, user: &[Constraint]) -> Result<ConstraintSet> {
    let user = user_by_pair(user)?;
    let mut merged: Vec<Constraint> = auto
        .constraints
        .iter()
        .filter(|c| !user.contains_key(&c.pair()))
        .copied()
        .collect();
    merged.extend(user.into_values());
    merged.sort_by_key(|c| (c.pair(), c.source == ConstraintSource::User));
    Ok(ConstraintSet::new(merged))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub round: usize,
    pub epochs: usize,
    pub user_constraints: usize,
    pub constraints: ConstraintStats,
    pub summary: ClusterSummary,
    pub train: Option<TrainReport>,
}

/// A trained document that accepts user constraints.
#[derive(Clone, Debug)]
pub struct RefineSession {
    pub config: PipelineConfig,
    pub doc: DocumentModel,
    pub reps: Representations,
    pub model: EmbeddingModel,
    pub auto: ConstraintSet,
    pub user: Vec<Constraint>,
    pub latents: Array2<f64>,
    pub graph: LineAffinityGraph,
    pub assignment: ClusterAssignment,
    pub projection: Array2<f64>,
    pub history: Vec<RefineRecord>,
}

impl From<PipelineState> for RefineSession {
    fn from(s: PipelineState) -> Self {
        RefineSession {
            config: s.config,
            doc: s.doc,
            reps: s.reps,
            model: s.model,
            auto: s.constraints,
            user: Vec::new(),
            latents: s.latents,
            graph: s.graph,
            assignment: s.assignment,
            projection: s.projection,
            history: Vec::new(),
        }
    }
}

/// On-disk form of a session; the model lives in a separate checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SessionFile {
    config: PipelineConfig,
    doc: DocumentModel,
    auto: ConstraintSet,
    user: Vec<Constraint>,
    history: Vec<RefineRecord>,
}

pub const SESSION_FILE: &str = "session.json";
pub const MODEL_FILE: &str = "model.ckpt";

impl RefineSession {
    /// The pool the next refinement trains on.
    pub fn merged(&self) -> Result<ConstraintSet> {
        merge_constraints(&self.auto, &self.user)
    }

    /// Adds selections atomically: on any error the session is unchanged.
    pub fn add_selections(&mut self, selections: &[UserSelection]) -> Result<ConstraintStats> {
        let mut user = self.user.clone();
        for sel in selections {
            sel.validate_for(&self.doc)?;
            user.extend(selection_to_constraints(sel)?);
        }
        let merged = merge_constraints(&self.auto, &user)?;
        self.user = user_by_pair(&user)?.into_values().collect();
        Ok(merged.stats())
    }

    /// Warm-started retraining for `epochs` epochs followed by re-clustering.
    /// Optimizer moments start fresh each round.
    pub fn refine(&mut self, epochs: usize) -> Result<&RefineRecord> {
        let merged = self.merged()?;
        let round = self.history.len() + 1;
        let train_report = if epochs > 0 {
            let mut cfg = self.config.train.clone();
            cfg.epochs = epochs;
            cfg.rng_seed = derive_seed(self.config.train.rng_seed, &format!("refine-{round}"));
            let mut model = self.model.clone();
            let report = train(&mut model, &self.reps, &self.training_pool(&merged), &cfg)?;
            self.model = model;
            Some(report)
        } else {
            None
        };
        self.recluster()?;
        self.history.push(RefineRecord {
            round,
            epochs,
            user_constraints: self.user.len(),
            constraints: merged.stats(),
            summary: self.summary(),
            train: train_report,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// The merged set with every user constraint repeated so a handful of
    /// scribbles is not drowned out by the automatic pairs.
    fn training_pool(&self, merged: &ConstraintSet) -> ConstraintSet {
        let mut pool = merged.constraints.clone();
        let user: Vec<Constraint> = pool.iter().filter(|c| c.source == ConstraintSource::User).copied().collect();
        for _ in 1..self.config.refine_user_repeat {
            pool.extend_from_slice(&user);
        }
        ConstraintSet::new(pool)
    }

    fn recluster(&mut self) -> Result<()> {
        let (latents, graph, assignment, projection) = cluster_with(&self.doc, &self.model, &self.reps, &self.config)?;
        self.latents = latents;
        self.graph = graph;
        self.assignment = assignment;
        self.projection = projection;
        Ok(())
    }

    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary::of(&self.doc, &self.graph, &self.assignment)
    }

    pub fn projection_payload(&self) -> ProjectionPayload {
        projection_payload(&self.reps.word_ids(), &self.projection, &self.assignment)
    }

    /// Replaces the document after an edit and re-derives everything
    /// downstream of it with the current model.
    pub fn replace_document(&mut self, doc: DocumentModel) -> Result<()> {
        doc.validate()?;
        let live: std::collections::HashSet<WordId> = doc.words.iter().map(|w| w.id).collect();
        self.reps = assemble_representations(&doc, &self.config.features)?;
        self.auto = ConstraintSet::new(
            self.auto
                .constraints
                .iter()
                .filter(|c| live.contains(&c.a) && live.contains(&c.b))
                .copied()
                .collect(),
        );
        self.user.retain(|c| live.contains(&c.a) && live.contains(&c.b));
        self.doc = doc;
        self.recluster()
    }

    /// Writes `session.json` and `model.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let file = SessionFile {
            config: self.config.clone(),
            doc: self.doc.clone(),
            auto: self.auto.clone(),
            user: self.user.clone(),
            history: self.history.clone(),
        };
        write_atomic(&dir.join(MODEL_FILE), &checkpoint_bytes(&self.model))?;
        write_atomic(&dir.join(SESSION_FILE), serde_json::to_string(&file)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: SessionFile = serde_json::from_slice(&fs::read(dir.join(SESSION_FILE))?)?;
        let model = model_from_checkpoint(&fs::read(dir.join(MODEL_FILE))?)?;
        let reps = assemble_representations(&file.doc, &file.config.features)?;
        let (latents, graph, assignment, projection) = cluster_with(&file.doc, &model, &reps, &file.config)?;
        Ok(RefineSession {
            config: file.config,
            doc: file.doc,
            reps,
            model,
            auto: file.auto,
            user: file.user,
            latents,
            graph,
            assignment,
            projection,
            history: file.history,
        })
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintKind;
    use crate::constraints::ConstraintSource::{Inter, User};
    use crate::document::{BBox, WordUnit};
    use crate::pipeline::run_pipeline;

    #[test]
    fn selection_counts() {
        let must = UserSelection::MustGroup { word_ids: vec![1, 2, 3, 4] };
        assert_eq!(selection_to_constraints(&must).unwrap().len(), 6);
        let cannot = UserSelection::CannotGroup { group_a: vec![1, 2], group_b: vec![3, 4, 5] };
        let cs = selection_to_constraints(&cannot).unwrap();
        assert_eq!(cs.len(), 6);
        assert!(cs.iter().all(|c| !c.is_must() && c.source == User));
        let one = UserSelection::MustGroup { word_ids: vec![1] };
        assert!(matches!(selection_to_constraints(&one), Err(Error::Validation { .. })));
        let dup = UserSelection::MustGroup { word_ids: vec![1, 1] };
        assert!(selection_to_constraints(&dup).is_err());
        let overlap = UserSelection::CannotGroup { group_a: vec![1, 2], group_b: vec![2] };
        assert!(selection_to_constraints(&overlap).is_err());
        let empty = UserSelection::CannotGroup { group_a: vec![], group_b: vec![2] };
        assert!(selection_to_constraints(&empty).is_err());
    }

    #[test]
    fn selection_json() {
        let sel: UserSelection = serde_json::from_str(r#"{"kind":"MUST_GROUP","word_ids":[1,2]}"#).unwrap();
        assert_eq!(sel, UserSelection::MustGroup { word_ids: vec![1, 2] });
        let sel: UserSelection =
            serde_json::from_str(r#"{"kind":"CANNOT_GROUP","group_a":[1],"group_b":[2]}"#).unwrap();
        assert!(matches!(sel, UserSelection::CannotGroup { .. }));
    }

    #[test]
    fn merge_rules() {
        let auto = ConstraintSet::new(vec![Constraint::cannot(3, 9, Inter), Constraint::must(1, 2, Inter)]);
        let merged = merge_constraints(&auto, &[Constraint::must(9, 3, User)]).unwrap();
        assert_eq!(merged.len(), 2);
        let c39 = merged.constraints.iter().find(|c| c.pair() == (3, 9)).unwrap();
        assert_eq!((c39.kind, c39.source), (ConstraintKind::MustLink, User));
        assert!(matches!(
            merge_constraints(&auto, &[Constraint::must(3, 9, User), Constraint::cannot(3, 9, User)]),
            Err(Error::Contradiction(3, 9))
        ));
        let union = merge_constraints(&auto, &[Constraint::must(5, 6, User)]).unwrap();
        assert_eq!(union.len(), 3);
        assert!(union.find_contradiction().is_none());
    }

    fn doc() -> DocumentModel {
        let mut words = Vec::new();
        for r in 0..5u64 {
            let y = 0.05 + 0.15 * r as f64;
            words.push(WordUnit {
                id: 2 * r,
                text: format!("Dish{r}"),
                bbox: BBox::new(0.1, y, 0.15, 0.04),
                line_id: None,
                style: None,
                feature: None,
            });
            words.push(WordUnit {
                id: 2 * r + 1,
                text: format!("${r}.50"),
                bbox: BBox::new(0.7, y, 0.08, 0.04),
                line_id: None,
                style: None,
                feature: None,
            });
        }
        DocumentModel::new("r", 1.0, words)
    }

    fn session() -> RefineSession {
        let mut cfg = PipelineConfig::with_seed(5);
        cfg.train.epochs = 2;
        run_pipeline(doc(), &cfg).unwrap().into()
    }

    #[test]
    fn zero_epoch_refine_is_idempotent() {
        let mut s = session();
        let before = s.assignment.clone();
        let model = s.model.clone();
        s.refine(0).unwrap();
        assert_eq!(s.assignment, before);
        assert_eq!(s.model, model);
        assert_eq!(s.history.len(), 1);
    }

    #[test]
    fn refine_is_deterministic_and_keeps_user_constraints() {
        let mut a = session();
        let mut b = session();
        let sel = [UserSelection::MustGroup { word_ids: vec![0, 2, 4] }];
        let stats = a.add_selections(&sel).unwrap();
        assert_eq!(stats.user_must, 3);
        b.add_selections(&sel).unwrap();
        for s in [&mut a, &mut b] {
            s.refine(2).unwrap();
            s.refine(2).unwrap();
        }
        assert_eq!(a.model, b.model);
        assert_eq!(a.assignment, b.assignment);
        let merged = a.merged().unwrap();
        for c in &a.user {
            assert!(merged.constraints.contains(c));
        }
    }

    #[test]
    fn contradictions_leave_session_unchanged() {
        let mut s = session();
        s.add_selections(&[UserSelection::MustGroup { word_ids: vec![0, 1] }]).unwrap();
        let err = s
            .add_selections(&[UserSelection::CannotGroup { group_a: vec![0], group_b: vec![1] }])
            .unwrap_err();
        assert!(matches!(err, Error::Contradiction(0, 1)));
        assert_eq!(s.user.len(), 1);
        assert!(s.add_selections(&[UserSelection::MustGroup { word_ids: vec![0, 999] }]).is_err());
        assert_eq!(s.user.len(), 1);
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut s = session();
        s.add_selections(&[UserSelection::MustGroup { word_ids: vec![1, 3] }]).unwrap();
        s.refine(1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = RefineSession::load(dir.path()).unwrap();
        assert_eq!(back.model, s.model);
        assert_eq!(back.assignment, s.assignment);
        assert_eq!(back.projection, s.projection);
        assert_eq!(back.user, s.user);
        assert_eq!(back.history, s.history);
        assert_eq!(back.doc, s.doc);
    }
}
