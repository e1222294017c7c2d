//! The four comparative studies: field omission, record modification, training
//! data fraction and prompt-tuning method.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use diffcore::Scalar;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::infer::{evaluate, sliding_window_infer};
use super::train::{test_cases, train, training_cases, LmWeights};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{SegModel, Variant};
use crate::phantom::{label, side_of, Case, ClinicalRecord, Field, Grid, Laterality, NStage, Surgery};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Omission,
    Modification,
    DataFraction,
    Tuning,
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "omission" => AblationKind::Omission,
            "modification" => AblationKind::Modification,
            "data-fraction" => AblationKind::DataFraction,
            "tuning" => AblationKind::Tuning,
            _ => return Err(Error::Config(format!("unknown ablation kind '{s}'; expected omission, modification, data-fraction or tuning"))),
        })
    }
}

pub const DATA_FRACTIONS: [f64; 3] = [1.0, 0.4, 0.2];

/// One evaluated arm of a study.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub report: MetricReport,
}

/// Evaluates the full-text model once without omission, then once per clinical field omitted.
pub fn omission_study<T: Scalar>(model: &SegModel<T>, cases: &[Case], patch: [usize; 3], seed: u64) -> Result<Vec<Arm>> {
    let mut arms = vec![Arm { name: "none".into(), report: evaluate(model, cases, &[], patch, seed)? }];
    for f in Field::CLINICAL {
        arms.push(Arm { name: f.key().into(), report: evaluate(model, cases, &[f], patch, seed)? });
    }
    Ok(arms)
}

/// Mean Dice drop of each omitted field relative to the first (no-omission) arm.
pub fn omission_drops(arms: &[Arm]) -> Vec<(String, f64)> {
    let base = arms[0].report.dice.mean;
    arms[1..].iter().map(|a| (a.name.clone(), base - a.report.dice.mean)).collect()
}

/// Mean `w` coordinate of the mask, `None` when empty.
pub fn centroid_w(mask: &Grid<u8>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0 {
            sum += mask.coords(i)[1] as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Fraction of voxels with any of `labels` on `side` that the mask includes.
pub fn inclusion_fraction(mask: &Grid<u8>, anatomy: &Grid<u8>, labels: &[u8], side: Laterality) -> Option<f64> {
    let width = anatomy.dims()[1];
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, &l) in anatomy.data().iter().enumerate() {
        if labels.contains(&l) && side_of(anatomy.coords(i)[1], width) == side {
            total += 1;
            hit += (mask.data()[i] != 0) as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Direction-only summary of the modification experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Modification {
    pub cases: usize,
    /// Cases whose predicted centroid changes side when laterality flips.
    pub laterality_crossings: usize,
    pub nodes_n0: f64,
    pub nodes_n1: f64,
    pub skin_mastectomy: f64,
    pub skin_bcs: f64,
    pub wall_mastectomy: f64,
    pub wall_bcs: f64,
}

impl Modification {
    pub fn crossing_rate(&self) -> f64 {
        self.laterality_crossings as f64 / self.cases.max(1) as f64
    }

    pub fn render(&self) -> String {
        format!(
            "laterality_crossing_rate {:.6}\nnode_inclusion n0 {:.6} n1 {:.6}\nskin_inclusion mastectomy {:.6} breast-conserving {:.6}\nwall_inclusion mastectomy {:.6} breast-conserving {:.6}\n",
            self.crossing_rate(),
            self.nodes_n0,
            self.nodes_n1,
            self.skin_mastectomy,
            self.skin_bcs,
            self.wall_mastectomy,
            self.wall_bcs
        )
    }
}

fn complete(r: &ClinicalRecord) -> Result<(Laterality, Surgery)> {
    match (r.laterality, r.surgery, r.t_stage, r.n_stage) {
        (Some(l), Some(s), Some(_), Some(_)) => Ok((l, s)),
        _ => Err(Error::Data("modification needs complete records".into())),
    }
}

/// Flips one field at a time on fixed volumes and measures how the prediction moves.
pub fn modification_study<T: Scalar>(model: &SegModel<T>, cases: &[Case], patch: [usize; 3]) -> Result<Modification> {
    let predict = |c: &Case, r: &ClinicalRecord| sliding_window_infer(model, &c.intensity, &model.render(r, &[]), patch);
    let mut m = Modification { cases: cases.len(), laterality_crossings: 0, nodes_n0: 0.0, nodes_n1: 0.0, skin_mastectomy: 0.0, skin_bcs: 0.0, wall_mastectomy: 0.0, wall_bcs: 0.0 };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (mut n0, mut n1, mut sm, mut sb, mut wm, mut wb) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for c in cases {
        let anatomy = c.labels.as_ref().ok_or_else(|| Error::Data(format!("case {} has no anatomy labels", c.id)))?;
        let (side, _) = complete(&c.record)?;
        let mid = (c.intensity.dims()[1] as f64 - 1.0) / 2.0;
        let base = predict(c, &c.record)?;
        let mut flipped = c.record;
        flipped.laterality = Some(side.flipped());
        let moved = predict(c, &flipped)?;
        if let (Some(a), Some(b)) = (centroid_w(&base), centroid_w(&moved)) {
            if (a - mid) * (b - mid) < 0.0 {
                m.laterality_crossings += 1;
            }
        }
        let nodes = [label::LEFT_NODES, label::RIGHT_NODES];
        for (stage, acc) in [(NStage::N0, &mut n0), (NStage::N1, &mut n1)] {
            let r = ClinicalRecord { n_stage: Some(stage), ..c.record };
            acc.extend(inclusion_fraction(&predict(c, &r)?, anatomy, &nodes, side));
        }
        for (surgery, skin, wall) in [(Surgery::Mastectomy, &mut sm, &mut wm), (Surgery::BreastConserving, &mut sb, &mut wb)] {
            let r = ClinicalRecord { surgery: Some(surgery), ..c.record };
            let p = predict(c, &r)?;
            skin.extend(inclusion_fraction(&p, anatomy, &[label::SKIN], side));
            wall.extend(inclusion_fraction(&p, anatomy, &[label::CHEST_WALL], side));
        }
    }
    (m.nodes_n0, m.nodes_n1, m.skin_mastectomy, m.skin_bcs, m.wall_mastectomy, m.wall_bcs) = (mean(&n0), mean(&n1), mean(&sm), mean(&sb), mean(&wm), mean(&wb));
    Ok(m)
}

/// Loads `dir/name.ckpt` when present, otherwise trains and saves it there.
pub fn train_or_load(cfg: &ExperimentConfig, name: &str, cases: &[Case], lm: Option<&LmWeights>, dir: &Path) -> Result<SegModel<f32>> {
    let path = dir.join(format!("{name}.ckpt"));
    if path.exists() {
        let ck = Checkpoint::<f32>::load(&path)?;
        if ck.config == *cfg {
            return Ok(ck.model);
        }
    }
    let out = train::<f32>(cfg, cases, lm)?;
    out.checkpoint.save(&path)?;
    std::fs::write(dir.join(format!("{name}.loss")), super::train::render_log(&out.log)).map_err(|e| Error::io(dir, e))?;
    Ok(out.checkpoint.model)
}

/// `base` switched to another variant, keeping its prompt shape where the variant allows one.
fn arm_config(base: &ExperimentConfig, v: Variant) -> ExperimentConfig {
    let (prompts, prompt_len) = match v {
        Variant::SinglePrompt => (1, base.prompt_len),
        Variant::NoTuning => (1, 0),
        _ => (base.prompts, base.prompt_len),
    };
    ExperimentConfig { variant: v, prompts, prompt_len, ..base.clone() }
}

fn needs_lm(cfgs: &[&ExperimentConfig]) -> bool {
    cfgs.iter().any(|c| c.variant.uses_lm())
}

/// Runs one study from `base`, writing arm checkpoints, per-arm metric reports
/// and `summary.txt` into `dir`. Returns the summary text.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig, dir: &Path) -> Result<String> {
    base.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train_set = training_cases(base)?;
    let test_set = test_cases(base)?;
    let mut summary = String::new();
    let arms: Vec<(String, ExperimentConfig)> = match kind {
        AblationKind::Omission | AblationKind::Modification => vec![("full".into(), ExperimentConfig { omit: Vec::new(), ..base.clone() })],
        AblationKind::DataFraction => [Variant::Multimodal, Variant::VisionOnly]
            .into_iter()
            .flat_map(|v| DATA_FRACTIONS.map(|f| (format!("{v}-{f}"), ExperimentConfig { train_fraction: f, ..arm_config(base, v) })))
            .collect(),
        AblationKind::Tuning => {
            [Variant::Multimodal, Variant::SinglePrompt, Variant::NoTuning].into_iter().map(|v| (v.to_string(), arm_config(base, v))).collect()
        }
    };
    let lm = if needs_lm(&arms.iter().map(|(_, c)| c).collect::<Vec<_>>()) { Some(LmWeights::obtain(base)?) } else { None };
    match kind {
        AblationKind::Omission => {
            let model = train_or_load(&arms[0].1, &arms[0].0, &train_set, lm.as_ref(), dir)?;
            let results = omission_study(&model, &test_set, base.patch, base.seed)?;
            for a in &results {
                a.report.write(&dir.join(format!("omit-{}.txt", a.name)))?;
                writeln!(summary, "omit {} dice {:.6} {:.6} {:.6}", a.name, a.report.dice.mean, a.report.dice.low, a.report.dice.high).unwrap();
            }
            for (name, drop) in omission_drops(&results) {
                writeln!(summary, "drop {name} {drop:.6}").unwrap();
            }
        }
        AblationKind::Modification => {
            let model = train_or_load(&arms[0].1, &arms[0].0, &train_set, lm.as_ref(), dir)?;
            summary.push_str(&modification_study(&model, &test_set, base.patch)?.render());
        }
        AblationKind::DataFraction | AblationKind::Tuning => {
            for (name, cfg) in &arms {
                let model = train_or_load(cfg, name, &train_set, lm.as_ref(), dir)?;
                let report = evaluate(&model, &test_set, &cfg.omit, cfg.patch, cfg.seed)?;
                report.write(&dir.join(format!("{name}.txt")))?;
                writeln!(summary, "{name} dice {:.6} {:.6} {:.6}", report.dice.mean, report.dice.low, report.dice.high).unwrap();
            }
        }
    }
    std::fs::write(dir.join("summary.txt"), &summary).map_err(|e| Error::io(dir, e))?;
    Ok(summary)
}
