//! Alternating rounds of dual-path bridging and cross-path distillation.

use alloc::vec::Vec;

use crate::bridging::{dpdb_stage, EmaTeacher, PathConfig, PathStepLog};
use crate::ckd::{ckd_stage_with, DistillConfig, DistillStepLog, PrototypeSet, TeacherPair};
use crate::data::{DomainData, TrainData};
use crate::error::{arg_err, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::mixing::PathKind;
use crate::model::{Arch, SegModel};
use crate::rng::{DetRng, RngState};
use crate::tensor::Tensor;
use crate::train::StageSchedule;

/// Which model of a path is handed to distillation and reported as its teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TeacherModel {
    /// The EMA model that produced the path's pseudo-labels.
    #[default]
    Ema,
    /// The gradient-trained path model.
    Path,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundPlan {
    pub rounds: usize,
    pub region: PathConfig,
    pub class: PathConfig,
    pub distill: DistillConfig,
    pub teacher_model: TeacherModel,
    pub seed: u64,
}

impl RoundPlan {
    /// Default plan where every stage shares `schedule`.
    pub fn new(rounds: usize, schedule: StageSchedule, seed: u64) -> Self {
        Self {
            rounds,
            region: PathConfig::new(PathKind::Region, schedule.clone()),
            class: PathConfig::new(PathKind::Class, schedule.clone()),
            distill: DistillConfig::new(schedule),
            teacher_model: TeacherModel::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(arg_err!("at least one round is required"));
        }
        if self.region.kind != PathKind::Region || self.class.kind != PathKind::Class {
            return Err(arg_err!("the region path must mix regions and the class path classes"));
        }
        self.region.validate()?;
        self.class.validate()?;
        self.distill.validate()
    }
}

/// Stage names used for error context, logs and checkpoint tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    RegionPath,
    ClassPath,
    TeacherEval,
    Prototypes,
    Student,
    StudentEval,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::RegionPath => "region",
            Stage::ClassPath => "class",
            Stage::TeacherEval => "teacher-eval",
            Stage::Prototypes => "prototypes",
            Stage::Student => "student",
            Stage::StudentEval => "student-eval",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Stage::RegionPath, Stage::ClassPath, Stage::TeacherEval, Stage::Prototypes, Stage::Student, Stage::StudentEval]
            .into_iter()
            .find(|s| s.tag() == tag)
    }
}

/// Progress notifications, emitted in stage order within each round.
pub enum StageEvent<'a> {
    PathTrained { round: usize, kind: PathKind, teacher: &'a SegModel, logs: &'a [PathStepLog], rng: RngState },
    TeachersEvaluated { round: usize, region: &'a EvalReport, class: &'a EvalReport },
    PrototypesReady { round: usize, prototypes: Option<&'a (PrototypeSet, PrototypeSet)> },
    StudentTrained { round: usize, student: &'a SegModel, logs: &'a [DistillStepLog], rng: RngState },
    StudentEvaluated { round: usize, report: &'a EvalReport },
}

impl StageEvent<'_> {
    pub fn round(&self) -> usize {
        match self {
            StageEvent::PathTrained { round, .. }
            | StageEvent::TeachersEvaluated { round, .. }
            | StageEvent::PrototypesReady { round, .. }
            | StageEvent::StudentTrained { round, .. }
            | StageEvent::StudentEvaluated { round, .. } => *round,
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            StageEvent::PathTrained { kind: PathKind::Region, .. } => Stage::RegionPath,
            StageEvent::PathTrained { .. } => Stage::ClassPath,
            StageEvent::TeachersEvaluated { .. } => Stage::TeacherEval,
            StageEvent::PrototypesReady { .. } => Stage::Prototypes,
            StageEvent::StudentTrained { .. } => Stage::Student,
            StageEvent::StudentEvaluated { .. } => Stage::StudentEval,
        }
    }
}

/// Evaluations of one round; `None` when no evaluation data was given.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub region: Option<EvalReport>,
    pub class: Option<EvalReport>,
    pub student: Option<EvalReport>,
}

pub struct DdbOutcome {
    pub student: SegModel,
    /// Teachers of the last round.
    pub teachers: (SegModel, SegModel),
    pub reports: Vec<RoundReport>,
}

/// Random stream of `stage` in `round`.
pub fn stage_rng(seed: u64, round: usize, stage: Stage) -> DetRng {
    DetRng::derive(seed, &alloc::format!("round{}/{}", round, stage.tag()))
}

/// Fresh models of round 1: region-path, class-path and student.
pub fn initial_models(arch: &Arch, seed: u64) -> Result<[SegModel; 3]> {
    Ok([
        SegModel::init(arch.clone(), &mut DetRng::derive(seed, "init/region"))?,
        SegModel::init(arch.clone(), &mut DetRng::derive(seed, "init/class"))?,
        SegModel::init(arch.clone(), &mut DetRng::derive(seed, "init/student"))?,
    ])
}

/// Trains one bridging path from `init` and returns the model handed to
/// distillation.
pub fn train_path(
    init: &SegModel,
    cfg: &PathConfig,
    which: TeacherModel,
    data: &TrainData,
    rng: &mut DetRng,
) -> Result<(SegModel, Vec<PathStepLog>)> {
    let mut model = init.clone();
    let mut ema = EmaTeacher::new(&model, cfg.alpha)?;
    let logs = dpdb_stage(&mut model, &mut ema, data, cfg, rng)?;
    let teacher = match which {
        TeacherModel::Ema => ema.into_model(),
        TeacherModel::Path => model,
    };
    Ok((teacher, logs))
}

fn eval_opt(model: &SegModel, eval: &[DomainData]) -> Result<Option<EvalReport>> {
    if eval.is_empty() {
        Ok(None)
    } else {
        evaluate(model, eval).map(Some)
    }
}

/// Runs `plan.rounds` alternations. Round 1 starts both paths and the student
/// from fresh models; later rounds start both paths from the previous
/// student, which keeps training in the next distillation stage.
pub fn run_ddb(
    plan: &RoundPlan,
    arch: &Arch,
    data: &TrainData,
    eval: &[DomainData],
    observer: &mut dyn FnMut(StageEvent<'_>) -> Result<()>,
) -> Result<DdbOutcome> {
    plan.validate()?;
    arch.validate()?;
    data.validate(arch.classes)?;
    let [mut init_region, mut init_class, mut student] = initial_models(arch, plan.seed)?;
    let targets: Vec<&Tensor> = data.pooled_targets().map(|s| &s.image).collect();
    let mut reports = Vec::with_capacity(plan.rounds);
    let mut last_teachers = None;
    for round in 1..=plan.rounds {
        let mut teachers = Vec::with_capacity(2);
        for (init, cfg, stage) in [(&init_region, &plan.region, Stage::RegionPath), (&init_class, &plan.class, Stage::ClassPath)] {
            let mut rng = stage_rng(plan.seed, round, stage);
            let (teacher, logs) =
                train_path(init, cfg, plan.teacher_model, data, &mut rng).map_err(|e| e.in_stage(round, stage.tag()))?;
            observer(StageEvent::PathTrained { round, kind: cfg.kind, teacher: &teacher, logs: &logs, rng: rng.state() })?;
            teachers.push(teacher);
        }
        let teacher_class = teachers.pop().expect("two teachers");
        let teacher_region = teachers.pop().expect("two teachers");

        let in_eval = |e: crate::Error| e.in_stage(round, Stage::TeacherEval.tag());
        let region_report = eval_opt(&teacher_region, eval).map_err(in_eval)?;
        let class_report = eval_opt(&teacher_class, eval).map_err(in_eval)?;
        if let (Some(r), Some(c)) = (&region_report, &class_report) {
            observer(StageEvent::TeachersEvaluated { round, region: r, class: c })?;
        }

        let pair = TeacherPair::prepare(&teacher_region, &teacher_class, targets.iter().copied(), plan.distill.ensemble)
            .map_err(|e| e.in_stage(round, Stage::Prototypes.tag()))?;
        observer(StageEvent::PrototypesReady { round, prototypes: pair.prototypes.as_ref() })?;

        let mut rng = stage_rng(plan.seed, round, Stage::Student);
        let logs = ckd_stage_with(&mut student, &pair, data, &plan.distill, &mut rng)
            .map_err(|e| e.in_stage(round, Stage::Student.tag()))?;
        observer(StageEvent::StudentTrained { round, student: &student, logs: &logs, rng: rng.state() })?;

        let student_report = eval_opt(&student, eval).map_err(|e| e.in_stage(round, Stage::StudentEval.tag()))?;
        if let Some(r) = &student_report {
            observer(StageEvent::StudentEvaluated { round, report: r })?;
        }
        reports.push(RoundReport { round, region: region_report, class: class_report, student: student_report });

        init_region = student.clone();
        init_class = student.clone();
        last_teachers = Some((teacher_region, teacher_class));
    }
    let teachers = last_teachers.expect("at least one round");
    Ok(DdbOutcome { student, teachers, reports })
}
