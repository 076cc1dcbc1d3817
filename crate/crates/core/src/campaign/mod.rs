//! Lock-step execution of the fault-free, faulty and hardened models.
//!
//! Every image is run through all legs from the same input tensor. Work is
//! split into independent `(image, fault group)` items; with more than one
//! thread they run on a private pool, but results are gathered and written
//! in a fixed key order, so the output is identical for any thread count.
//!
//! Output directory:
//!
//! ```text
//! meta/scenario.yml   resolved scenario (seed = fault matrix seed)
//! meta/dataset.json   data set descriptor
//! meta/model.txt      model name
//! faults/campaign.alff, faults/campaign.alfr
//! results/orig.csv, corr.csv, resil.csv   (classification)
//! results/orig.json, corr.json, resil.json (detection)
//! ```

mod monitor;
mod replay;
mod runset;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::{DatasetDescriptor, DatasetHandle};
use crate::error::{Error, Result};
use crate::evaluation::{
    classification_csv_bytes, detection_json_bytes, sde_due_classification, sde_due_detection, ClassificationRow,
    DetectionRow, Evaluation, FaultLoc, Leg, DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH,
};
use crate::fault_gen::{fault_matrix_to_bytes, generate_fault_matrix, FaultMatrix};
use crate::injector::{AppliedFault, CorruptedModel, FaultIterator};
use crate::model::{decode_detections, Model, Task};
use crate::scenario::{InjPolicy, ScenarioConfig};
use crate::tensor::Tensor;

pub use monitor::{detect_nan_inf, harden_with_clipper, profile_ranges, LayerEvent, Monitor, RangeMonitor, RangeProfile};
pub use replay::{replay, replay_dir, ReplayReport};
pub use runset::{load_runset, runset_from_bytes, runset_to_bytes, save_runset, RunsetRecord, RECORD_LEN};
pub use sweep::{sweep, SweepAxis, SweepPoint, SweepValue};

use monitor::LegTap;
use runset::{id_to_u32, to_u32};

pub const SCENARIO_FILE: &str = "meta/scenario.yml";
pub const DATASET_FILE: &str = "meta/dataset.json";
pub const MODEL_FILE: &str = "meta/model.txt";
pub const FAULT_FILE: &str = "faults/campaign.alff";
pub const RUNSET_FILE: &str = "faults/campaign.alfr";
pub const RESULTS_DIR: &str = "results";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CampaignOptions {
    /// Adds the clipper-hardened third leg.
    pub with_mitigation: bool,
    /// Worker threads; 0 and 1 both mean single-threaded.
    pub threads: usize,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            with_mitigation: false,
            threads: 1,
        }
    }
}

/// One leg's inference of one image.
#[derive(Debug, Clone)]
pub struct LegResult {
    pub output: Tensor,
    pub nan: bool,
    pub inf: bool,
    pub applied: Vec<AppliedFault>,
    events: Vec<(usize, Tensor)>,
}

/// All legs of one image at one step.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub epoch: usize,
    pub batch_index: usize,
    pub image_id: u64,
    pub gt_label: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub orig: LegResult,
    pub corr: LegResult,
    pub resil: Option<LegResult>,
}

impl ImageOutcome {
    pub fn leg(&self, leg: Leg) -> Option<&LegResult> {
        match leg {
            Leg::Orig => Some(&self.orig),
            Leg::Corr => Some(&self.corr),
            Leg::Resil => self.resil.as_ref(),
        }
    }

    fn key(&self) -> (usize, usize, u64) {
        (self.epoch, self.batch_index, self.image_id)
    }
}

/// The raw outputs of one image's legs, all from the same input.
#[derive(Debug, Clone, Copy)]
pub struct TripletOutput<'a> {
    pub epoch: usize,
    pub batch_index: usize,
    pub image_id: u64,
    pub orig: &'a Tensor,
    pub corr: &'a Tensor,
    pub resil: Option<&'a Tensor>,
}

/// Faulty and hardened models for one injection scope.
struct ScopeModels {
    corr: CorruptedModel,
    resil: Option<CorruptedModel>,
}

struct WorkItem {
    epoch: usize,
    batch_index: usize,
    position: usize,
    sample: usize,
    scope: Arc<ScopeModels>,
}

struct EpochCursor {
    epoch: usize,
    order: Vec<usize>,
    batch: usize,
    cached: Option<(usize, Arc<ScopeModels>)>,
}

/// A model, a data set and a scenario with its fault matrix; runs
/// campaigns epoch by epoch or all at once.
pub struct Session {
    model: Arc<Model>,
    hardened: Option<Arc<Model>>,
    profile: Option<RangeProfile>,
    dataset: DatasetHandle,
    cfg: ScenarioConfig,
    matrix: Arc<FaultMatrix>,
    faults: FaultIterator,
    monitors: Vec<Box<dyn Monitor>>,
    pool: Option<rayon::ThreadPool>,
    next_epoch: usize,
    cursor: Option<EpochCursor>,
    outcomes: Vec<ImageOutcome>,
}

fn check_dataset(cfg: &ScenarioConfig, ds: &DatasetHandle) -> Result<()> {
    if cfg.dataset_size != ds.len() as u64 {
        return Err(Error::validation(
            "dataset_size",
            format!("scenario expects {} images, data set {} has {}", cfg.dataset_size, ds.name, ds.len()),
        ));
    }
    Ok(())
}

impl Session {
    /// Generates the fault matrix from the scenario's seed.
    pub fn new(model: Model, dataset: DatasetHandle, cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        check_dataset(&cfg, &dataset)?;
        let matrix = generate_fault_matrix(&model, &cfg, cfg.seed)?;
        Session::with_faults(model, dataset, cfg, matrix)
    }

    /// Uses a pre-generated fault matrix; it must belong to `cfg` and `model`.
    pub fn with_faults(model: Model, dataset: DatasetHandle, cfg: ScenarioConfig, matrix: FaultMatrix) -> Result<Self> {
        cfg.validate()?;
        check_dataset(&cfg, &dataset)?;
        let model = Arc::new(model);
        let matrix = Arc::new(matrix);
        let faults = FaultIterator::new(Arc::clone(&model), Arc::clone(&matrix), &cfg)?;
        Ok(Session {
            model,
            hardened: None,
            profile: None,
            dataset,
            cfg,
            matrix,
            faults,
            monitors: Vec::new(),
            pool: None,
            next_epoch: 0,
            cursor: None,
            outcomes: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dataset(&self) -> &DatasetHandle {
        &self.dataset
    }

    pub fn fault_matrix(&self) -> &FaultMatrix {
        &self.matrix
    }

    pub fn hardened_model(&self) -> Option<&Model> {
        self.hardened.as_deref()
    }

    pub fn get_scenario(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Replaces the scenario and regenerates the fault matrix from its seed.
    /// Refused while an epoch is in progress.
    pub fn set_scenario(&mut self, cfg: ScenarioConfig) -> Result<()> {
        if self.cursor.is_some() {
            return Err(Error::EpochInProgress);
        }
        cfg.validate()?;
        check_dataset(&cfg, &self.dataset)?;
        let matrix = generate_fault_matrix(&self.model, &cfg, cfg.seed)?;
        self.install(cfg, matrix)
    }

    /// Replaces scenario and fault matrix together.
    pub fn set_faults(&mut self, cfg: ScenarioConfig, matrix: FaultMatrix) -> Result<()> {
        if self.cursor.is_some() {
            return Err(Error::EpochInProgress);
        }
        cfg.validate()?;
        check_dataset(&cfg, &self.dataset)?;
        self.install(cfg, matrix)
    }

    fn install(&mut self, cfg: ScenarioConfig, matrix: FaultMatrix) -> Result<()> {
        let matrix = Arc::new(matrix);
        self.faults = FaultIterator::new(Arc::clone(&self.model), Arc::clone(&matrix), &cfg)?;
        self.cfg = cfg;
        self.matrix = matrix;
        self.next_epoch = 0;
        self.outcomes.clear();
        Ok(())
    }

    /// Profiles the data set fault-free and adds a clipper-hardened leg.
    pub fn enable_mitigation(&mut self) -> Result<&RangeProfile> {
        if self.cursor.is_some() {
            return Err(Error::EpochInProgress);
        }
        let profile = profile_ranges(&self.model, &self.dataset)?;
        self.hardened = Some(Arc::new(harden_with_clipper(&self.model, &profile)?));
        self.profile = Some(profile);
        Ok(self.profile.as_ref().expect("just set"))
    }

    pub fn disable_mitigation(&mut self) {
        self.hardened = None;
        self.profile = None;
    }

    pub fn range_profile(&self) -> Option<&RangeProfile> {
        self.profile.as_ref()
    }

    /// Runs work items on `threads` workers; 0 or 1 keeps everything on the
    /// calling thread.
    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        self.pool = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Some(pool)
        } else {
            None
        };
        Ok(())
    }

    pub fn attach_monitor(&mut self, monitor: impl Monitor + 'static) {
        self.monitors.push(Box::new(monitor));
    }

    /// Removes and returns every attached monitor.
    pub fn take_monitors(&mut self) -> Vec<Box<dyn Monitor>> {
        std::mem::take(&mut self.monitors)
    }

    pub fn epoch_in_progress(&self) -> bool {
        self.cursor.is_some()
    }

    /// Starts the next epoch. Fails with [`Error::EndOfFaults`] once all
    /// `num_runs` epochs have run.
    pub fn begin_epoch(&mut self) -> Result<usize> {
        if self.cursor.is_some() {
            return Err(Error::EpochInProgress);
        }
        if self.next_epoch >= self.cfg.num_runs as usize {
            return Err(Error::EndOfFaults);
        }
        let index: std::collections::HashMap<u64, usize> =
            self.dataset.samples().iter().enumerate().map(|(i, s)| (s.image_id, i)).collect();
        let order = self.dataset.ordered().iter().map(|s| index[&s.image_id]).collect();
        let epoch = self.next_epoch;
        self.cursor = Some(EpochCursor {
            epoch,
            order,
            batch: 0,
            cached: None,
        });
        self.next_epoch += 1;
        Ok(epoch)
    }

    /// Runs the next batch of the current epoch; `None` once the epoch's
    /// batches are done.
    pub fn next_batch(&mut self) -> Result<Option<&[ImageOutcome]>> {
        let Some(items) = self.plan_batch()? else {
            return Ok(None);
        };
        let start = self.outcomes.len();
        let done = self.execute(items)?;
        self.outcomes.extend(done);
        Ok(Some(&self.outcomes[start..]))
    }

    pub fn end_epoch(&mut self) -> Result<()> {
        match self.cursor.take() {
            Some(_) => Ok(()),
            None => Err(Error::Config("no epoch in progress".into())),
        }
    }

    /// Runs every epoch from the start and returns the collected run.
    pub fn run(&mut self) -> Result<CampaignRun> {
        if self.cursor.is_some() {
            return Err(Error::EpochInProgress);
        }
        self.next_epoch = 0;
        self.outcomes.clear();
        while self.next_epoch < self.cfg.num_runs as usize {
            self.begin_epoch()?;
            let mut items = Vec::new();
            while let Some(batch) = self.plan_batch()? {
                items.extend(batch);
            }
            let done = self.execute(items)?;
            self.outcomes.extend(done);
            self.end_epoch()?;
        }
        self.take_run()
    }

    /// Packs the outcomes gathered so far into a [`CampaignRun`].
    pub fn take_run(&mut self) -> Result<CampaignRun> {
        let mut outcomes = std::mem::take(&mut self.outcomes);
        outcomes.sort_by_key(ImageOutcome::key);
        CampaignRun::new(self, outcomes)
    }

    fn plan_batch(&mut self) -> Result<Option<Vec<WorkItem>>> {
        let Session {
            cursor,
            faults,
            hardened,
            cfg,
            ..
        } = self;
        let cur = cursor.as_mut().ok_or_else(|| Error::Config("no epoch in progress".into()))?;
        let bs = cfg.batch_size as usize;
        let start = cur.batch * bs;
        if start >= cur.order.len() {
            return Ok(None);
        }
        let end = (start + bs).min(cur.order.len());
        let mut items = Vec::with_capacity(end - start);
        for (position, i) in (start..end).enumerate() {
            let step = match cfg.inj_policy {
                InjPolicy::PerImage => i,
                InjPolicy::PerBatch => cur.batch,
                InjPolicy::PerEpoch => 0,
            };
            let scope = match &cur.cached {
                Some((s, m)) if *s == step => Arc::clone(m),
                _ => {
                    let corr = faults.scope(cur.epoch, step)?;
                    let resil = hardened.as_ref().map(|h| corr.rebase(h)).transpose()?;
                    let m = Arc::new(ScopeModels { corr, resil });
                    cur.cached = Some((step, Arc::clone(&m)));
                    m
                }
            };
            items.push(WorkItem {
                epoch: cur.epoch,
                batch_index: cur.batch,
                position,
                sample: cur.order[i],
                scope,
            });
        }
        cur.batch += 1;
        Ok(Some(items))
    }

    fn execute(&mut self, items: Vec<WorkItem>) -> Result<Vec<ImageOutcome>> {
        let capture = !self.monitors.is_empty();
        let model = &*self.model;
        let ds = &self.dataset;
        let work = |it: &WorkItem| infer(model, ds, it, capture);
        let results: Vec<Result<ImageOutcome>> = match &self.pool {
            Some(pool) => pool.install(|| items.par_iter().map(work).collect()),
            None => items.iter().map(work).collect(),
        };
        let mut outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
        if capture {
            for o in &mut outcomes {
                let (epoch, batch_index, image_id) = (o.epoch, o.batch_index, o.image_id);
                let legs = [(Leg::Orig, Some(&mut o.orig)), (Leg::Corr, Some(&mut o.corr)), (Leg::Resil, o.resil.as_mut())];
                for (leg, result) in legs {
                    let Some(result) = result else { continue };
                    for (layer, output) in std::mem::take(&mut result.events) {
                        let event = LayerEvent {
                            leg,
                            epoch,
                            batch_index,
                            image_id,
                            layer,
                            output: &output,
                        };
                        for m in &mut self.monitors {
                            m.observe(&event);
                        }
                    }
                }
            }
        }
        Ok(outcomes)
    }
}

fn run_leg(
    capture: bool,
    f: impl FnOnce(&mut LegTap) -> Result<(Tensor, Vec<AppliedFault>)>,
) -> Result<LegResult> {
    let mut tap = LegTap::new(capture);
    let (output, applied) = f(&mut tap)?;
    tap.check(&output);
    Ok(LegResult {
        output,
        nan: tap.nan,
        inf: tap.inf,
        applied,
        events: tap.capture.unwrap_or_default(),
    })
}

fn infer(model: &Model, ds: &DatasetHandle, it: &WorkItem, capture: bool) -> Result<ImageOutcome> {
    let s = &ds.samples()[it.sample];
    let orig = run_leg(capture, |tap| Ok((model.forward_with(&s.image, tap)?, Vec::new())))?;
    let corr = run_leg(capture, |tap| it.scope.corr.run(&s.image, it.position, tap))?;
    let resil = match &it.scope.resil {
        Some(r) => Some(run_leg(capture, |tap| r.run(&s.image, it.position, tap))?),
        None => None,
    };
    Ok(ImageOutcome {
        epoch: it.epoch,
        batch_index: it.batch_index,
        image_id: s.image_id,
        gt_label: s.label,
        height: s.height,
        width: s.width,
        orig,
        corr,
        resil,
    })
}

/// Everything a finished campaign produced, in memory.
#[derive(Debug, Clone)]
pub struct CampaignRun {
    /// The scenario with `seed` set to the fault matrix seed.
    pub cfg: ScenarioConfig,
    pub matrix: Arc<FaultMatrix>,
    pub dataset: DatasetDescriptor,
    pub model_name: String,
    pub task: Task,
    outcomes: Vec<ImageOutcome>,
    records: Vec<RunsetRecord>,
}

impl CampaignRun {
    fn new(session: &Session, outcomes: Vec<ImageOutcome>) -> Result<Self> {
        let mut records = Vec::new();
        for o in &outcomes {
            for f in &o.corr.applied {
                records.push(RunsetRecord {
                    epoch: to_u32(o.epoch, "epoch")?,
                    batch_index: to_u32(o.batch_index, "batch_index")?,
                    image_id: id_to_u32(o.image_id)?,
                    fault_column: to_u32(f.column, "fault_column")?,
                    location: f.record,
                    original_value: f.original,
                    corrupted_value: f.corrupted,
                    flip_direction: f.direction,
                    nan_detected: o.corr.nan,
                    inf_detected: o.corr.inf,
                });
            }
        }
        records.sort_by_key(RunsetRecord::sort_key);
        let mut cfg = session.cfg.clone();
        cfg.seed = session.matrix.seed;
        Ok(CampaignRun {
            cfg,
            matrix: Arc::clone(&session.matrix),
            dataset: DatasetDescriptor::of(&session.dataset),
            model_name: session.model.name().to_owned(),
            task: session.model.task(),
            outcomes,
            records,
        })
    }

    pub fn outcomes(&self) -> &[ImageOutcome] {
        &self.outcomes
    }

    /// Runset records sorted by epoch, batch, image and fault column.
    pub fn records(&self) -> &[RunsetRecord] {
        &self.records
    }

    pub fn has_mitigation(&self) -> bool {
        self.outcomes.first().is_some_and(|o| o.resil.is_some())
    }

    pub fn triplets(&self) -> impl Iterator<Item = TripletOutput<'_>> {
        self.outcomes.iter().map(|o| TripletOutput {
            epoch: o.epoch,
            batch_index: o.batch_index,
            image_id: o.image_id,
            orig: &o.orig.output,
            corr: &o.corr.output,
            resil: o.resil.as_ref().map(|r| &r.output),
        })
    }

    fn fault_locs(&self, applied: &[AppliedFault]) -> Vec<FaultLoc> {
        applied
            .iter()
            .map(|f| FaultLoc::from_applied(f, self.cfg.injection_target, self.cfg.rnd_mode))
            .collect()
    }

    pub fn classification_rows(&self, leg: Leg) -> Vec<ClassificationRow> {
        self.outcomes
            .iter()
            .filter_map(|o| {
                let r = o.leg(leg)?;
                let mut row = ClassificationRow::from_logits(leg, o.image_id, o.epoch as u64, o.gt_label, r.output.data());
                row.faults = self.fault_locs(&r.applied);
                row.nan = r.nan;
                row.inf = r.inf;
                Some(row)
            })
            .collect()
    }

    pub fn detection_rows(&self, leg: Leg) -> Vec<DetectionRow> {
        self.outcomes
            .iter()
            .filter_map(|o| {
                let r = o.leg(leg)?;
                Some(DetectionRow {
                    image_id: o.image_id,
                    epoch: o.epoch as u64,
                    detections: decode_detections(&r.output, self.task, o.height, o.width),
                    faults: self.fault_locs(&r.applied),
                    nan: r.nan,
                    inf: r.inf,
                })
            })
            .collect()
    }

    fn legs(&self) -> Vec<Leg> {
        let mut legs = vec![Leg::Orig, Leg::Corr];
        if self.has_mitigation() {
            legs.push(Leg::Resil);
        }
        legs
    }

    /// KPIs of the faulty and hardened legs against the fault-free leg.
    pub fn evaluate(&self) -> Result<Evaluation> {
        if self.task.is_detection() {
            let orig = self.detection_rows(Leg::Orig);
            let eval = |leg| sde_due_detection(&orig, &self.detection_rows(leg), DEFAULT_IOU_THRESH, DEFAULT_CONF_THRESH);
            Ok(Evaluation {
                corr: eval(Leg::Corr)?,
                resil: self.has_mitigation().then(|| eval(Leg::Resil)).transpose()?,
            })
        } else {
            let orig = self.classification_rows(Leg::Orig);
            let eval = |leg| sde_due_classification(&orig, &self.classification_rows(leg));
            Ok(Evaluation {
                corr: eval(Leg::Corr)?,
                resil: self.has_mitigation().then(|| eval(Leg::Resil)).transpose()?,
            })
        }
    }

    /// Result files as `(path relative to the run directory, contents)`.
    pub fn result_files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        self.legs()
            .into_iter()
            .map(|leg| {
                if self.task.is_detection() {
                    Ok((format!("{RESULTS_DIR}/{leg}.json"), detection_json_bytes(leg, &self.detection_rows(leg))?))
                } else {
                    Ok((format!("{RESULTS_DIR}/{leg}.csv"), classification_csv_bytes(leg, &self.classification_rows(leg))?))
                }
            })
            .collect()
    }

    /// Every file of the output directory, in writing order.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let descriptor = serde_json::to_string_pretty(&self.dataset).expect("serializable") + "\n";
        let mut files = vec![
            (SCENARIO_FILE.to_owned(), self.cfg.to_yaml().into_bytes()),
            (DATASET_FILE.to_owned(), descriptor.into_bytes()),
            (MODEL_FILE.to_owned(), format!("{}\n", self.model_name).into_bytes()),
            (FAULT_FILE.to_owned(), fault_matrix_to_bytes(&self.matrix)),
            (RUNSET_FILE.to_owned(), runset_to_bytes(&self.records)?),
        ];
        files.extend(self.result_files()?);
        Ok(files)
    }

    /// Writes the meta, fault and results sets under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for (rel, bytes) in self.files()? {
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(dir.to_path_buf())
    }
}

/// Runs a full campaign with `faults` and writes it to `out_dir`.
pub fn run_campaign(
    model: &Model,
    ds: &DatasetHandle,
    cfg: &ScenarioConfig,
    faults: &FaultMatrix,
    options: CampaignOptions,
    out_dir: impl AsRef<Path>,
) -> Result<CampaignRun> {
    let mut session = Session::with_faults(model.clone(), ds.clone(), cfg.clone(), faults.clone())?;
    session.set_threads(options.threads)?;
    if options.with_mitigation {
        session.enable_mitigation()?;
    }
    let run = session.run()?;
    run.write(out_dir)?;
    Ok(run)
}

pub fn attach_monitor(session: &mut Session, monitor: impl Monitor + 'static) {
    session.attach_monitor(monitor);
}
