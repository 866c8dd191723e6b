//! Consistency losses, the Mean Teacher pair and the combined objective.

mod losses;

pub use losses::{
    cons_loss_cutmix, cons_loss_cutout, cons_loss_ict, cons_loss_pair, cons_loss_stdaug, cons_loss_vat,
    confidence_filter, vat_loss_given, PairColour,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::Network;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    StdAug,
    Cutout,
    Cutmix,
    Ict,
    Vat,
}

impl ConsistencyMode {
    pub const ALL: [ConsistencyMode; 5] = [
        ConsistencyMode::StdAug,
        ConsistencyMode::Cutout,
        ConsistencyMode::Cutmix,
        ConsistencyMode::Ict,
        ConsistencyMode::Vat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConsistencyMode::StdAug => "std_aug",
            ConsistencyMode::Cutout => "cutout",
            ConsistencyMode::Cutmix => "cutmix",
            ConsistencyMode::Ict => "ict",
            ConsistencyMode::Vat => "vat",
        }
    }

    /// Whether the mode consumes two unlabelled images per sample.
    pub fn needs_pairs(self) -> bool {
        matches!(self, ConsistencyMode::Cutmix | ConsistencyMode::Ict)
    }

    pub fn distance(self) -> Distance {
        match self {
            ConsistencyMode::Vat => Distance::Kl,
            _ => Distance::MeanSquared,
        }
    }

    /// Consistency weight used when none is configured. With colour jitter
    /// every mode except VAT uses 1; without it std-aug uses 0.003 and ICT
    /// 0.01.
    pub fn default_gamma(self, colour: bool) -> f64 {
        match (self, colour) {
            (ConsistencyMode::Vat, _) => 0.1,
            (ConsistencyMode::StdAug, false) => 0.003,
            (ConsistencyMode::Ict, false) => 0.01,
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    MeanSquared,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub mode: ConsistencyMode,
    pub gamma: f64,
    pub distance: Distance,
    /// Teacher max-probability below which a pixel is left out of the loss.
    pub confidence_threshold: Option<f64>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self::new(ConsistencyMode::StdAug, ConsistencyMode::StdAug.default_gamma(false))
    }
}

impl ConsistencyConfig {
    pub fn new(mode: ConsistencyMode, gamma: f64) -> Self {
        Self {
            mode,
            gamma,
            distance: mode.distance(),
            confidence_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be non-negative, got {}", self.gamma)));
        }
        if self.distance != self.mode.distance() {
            return Err(Error::config(
                "distance",
                format!("mode {} requires {:?}", self.mode.name(), self.mode.distance()),
            ));
        }
        if let Some(t) = self.confidence_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("confidence_threshold", format!("must be in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

/// Student θ trained by gradient descent and teacher φ following it by EMA.
#[derive(Clone, Debug)]
pub struct TeacherStudent<N> {
    pub student: N,
    pub teacher: N,
    pub ema_decay: f64,
}

impl<N: Network + Clone> TeacherStudent<N> {
    /// The teacher starts as a copy of the student.
    pub fn new(student: N, ema_decay: f64) -> Result<Self> {
        let teacher = student.clone();
        Self::from_pair(student, teacher, ema_decay)
    }
}

impl<N: Network> TeacherStudent<N> {
    pub fn from_pair(student: N, teacher: N, ema_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::config("ema_decay", format!("must be in [0, 1), got {ema_decay}")));
        }
        student.params().check_compatible(teacher.params())?;
        Ok(Self {
            student,
            teacher,
            ema_decay,
        })
    }

    /// `φ ← decay·φ + (1 - decay)·θ` for every parameter, evaluated as
    /// `φ + (1 - decay)·(θ - φ)` so that `θ == φ` is an exact fixed point.
    pub fn ema_update(&mut self) -> Result<()> {
        let student = self.student.params();
        let teacher = self.teacher.params_mut();
        teacher.check_compatible(student)?;
        let d = self.ema_decay;
        for (phi, (_, theta)) in teacher.tensors_mut().zip(student.iter()) {
            for (p, &t) in phi.data_mut().iter_mut().zip(theta.data()) {
                *p += (1.0 - d) * (t - *p);
            }
        }
        Ok(())
    }
}

/// `sup + γ·cons`.
pub fn total_loss<'t>(sup: Var<'t>, cons: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    Ok(sup.add(cons.scale(gamma))?)
}
