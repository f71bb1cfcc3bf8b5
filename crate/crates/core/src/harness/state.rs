//! Trainer state to and from checkpoints.

use crate::acoustic::{AcousticModel, Discriminators, Stage1Trainer};
use crate::dsp::{MelConfig, MelExtractor};
use crate::duration::{DurationModel, DurationTrainer};
use crate::error::Result;
use crate::optim::AdamConfig;
use crate::prosody_flow::{FlowTrainer, ProsodyFlow};
use crate::rng::{capture, restore, rng_from_seed, RngState};
use crate::scalar::Scalar;

use super::checkpoint::Checkpoint;

pub const STAGE1: &str = "stage1";
pub const DURATION: &str = "duration";
pub const STAGE2: &str = "stage2";

pub fn stage1_checkpoint<T: Scalar>(t: &Stage1Trainer<T>, speakers: &[String]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(STAGE1, t.step);
    ck.set_meta("speakers", &speakers)?;
    ck.set_meta("acoustic", &t.model.config)?;
    ck.set_meta("discriminators", &t.disc.config)?;
    ck.set_meta("options", &t.options)?;
    ck.set_meta("mel", t.mel().config())?;
    ck.set_meta("rng", &capture(&t.rng))?;
    ck.push_store("g.", &t.model.params);
    ck.push_store("d.", &t.disc.params);
    ck.push_adam("opt_g.", &t.opt_g)?;
    ck.push_adam("opt_d.", &t.opt_d)?;
    Ok(ck)
}

/// Generator weights only. Construction draws from a throwaway generator
/// whose values are all overwritten.
pub fn acoustic_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<AcousticModel<T>> {
    let mut model = AcousticModel::new(ck.meta("acoustic")?, &mut rng_from_seed(0))?;
    ck.load_store("g.", &mut model.params)?;
    Ok(model)
}

pub fn restore_stage1<T: Scalar>(ck: &Checkpoint) -> Result<Stage1Trainer<T>> {
    let model = acoustic_from_checkpoint(ck)?;
    let mut disc = Discriminators::new(ck.meta("discriminators")?, &mut rng_from_seed(0));
    ck.load_store("d.", &mut disc.params)?;
    let mel: MelConfig = ck.meta("mel")?;
    let rng = restore(&ck.meta::<RngState>("rng")?);
    let mut t = Stage1Trainer::new(model, disc, ck.meta("options")?, MelExtractor::new(mel)?, rng)?;
    ck.load_adam("opt_g.", &mut t.opt_g)?;
    ck.load_adam("opt_d.", &mut t.opt_d)?;
    t.step = ck.step;
    Ok(t)
}

pub fn duration_checkpoint<T: Scalar>(t: &DurationTrainer<T>, speakers: &[String]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(DURATION, t.step);
    ck.set_meta("speakers", &speakers)?;
    ck.set_meta("duration", &t.model.config)?;
    ck.set_meta("divergence_limit", &t.divergence_limit)?;
    ck.set_meta("rng", &capture(&t.rng))?;
    ck.push_store("p.", &t.model.params);
    ck.push_adam("opt.", &t.opt)?;
    Ok(ck)
}

pub fn duration_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<DurationModel<T>> {
    let mut model = DurationModel::new(ck.meta("duration")?, &mut rng_from_seed(0))?;
    ck.load_store("p.", &mut model.params)?;
    Ok(model)
}

pub fn restore_duration<T: Scalar>(ck: &Checkpoint) -> Result<DurationTrainer<T>> {
    let model = duration_from_checkpoint(ck)?;
    let adam: AdamConfig = ck.meta("opt.config")?;
    let mut t = DurationTrainer::new(model, adam, restore(&ck.meta::<RngState>("rng")?));
    ck.load_adam("opt.", &mut t.opt)?;
    t.divergence_limit = ck.meta("divergence_limit")?;
    t.step = ck.step;
    Ok(t)
}

pub fn flow_checkpoint<T: Scalar>(t: &FlowTrainer<T>, speakers: &[String]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(STAGE2, t.step);
    ck.set_meta("speakers", &speakers)?;
    ck.set_meta("flow", &t.model.config)?;
    ck.set_meta("vocab", &t.model.vocab)?;
    ck.set_meta("options", &t.options)?;
    ck.set_meta("rng", &capture(&t.rng))?;
    ck.push_store("p.", &t.model.params);
    ck.push_adam("opt.", &t.opt)?;
    Ok(ck)
}

pub fn flow_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<ProsodyFlow<T>> {
    let mut model = ProsodyFlow::new(ck.meta("flow")?, ck.meta("vocab")?, &mut rng_from_seed(0))?;
    ck.load_store("p.", &mut model.params)?;
    Ok(model)
}

pub fn restore_flow<T: Scalar>(ck: &Checkpoint) -> Result<FlowTrainer<T>> {
    let model = flow_from_checkpoint(ck)?;
    let mut t = FlowTrainer::new(model, ck.meta("options")?, restore(&ck.meta::<RngState>("rng")?));
    ck.load_adam("opt.", &mut t.opt)?;
    t.step = ck.step;
    Ok(t)
}

