//! Shallow two-convolution extractor and the structure salience module.
//!
//! Each modality branch produces three same-resolution features:
//! `f1 = relu(conv(image))`, `f2 = relu(conv(f1))` and `f3 = ssm(f2)`. The
//! salience module convolves `f2`, pools it twice (max and mean, 3×3, stride
//! 1) and merges the two maps (by product for infrared, by sum for visible)
//! before a squeeze-and-excitation style channel gate.

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::params::{Modality, ParamVars, SpecList};
use crate::tensor::{Scalar, Tape, Var};

pub const KERNEL: usize = 3;
const POOL_WINDOW: usize = 3;

pub(crate) fn push_specs(config: &FusionConfig, modality: Modality, specs: &mut SpecList) {
    let c = config.channels;
    let m = modality.prefix();
    specs.conv(&format!("{m}.conv1"), c, 1, KERNEL);
    specs.conv(&format!("{m}.conv2"), c, c, KERNEL);
    if config.modules.ssm {
        let hidden = c / config.reduction;
        specs.conv(&format!("{m}.ssm.conv"), c, c, KERNEL);
        specs.linear(&format!("{m}.ssm.fc1"), hidden, c);
        specs.linear(&format!("{m}.ssm.fc2"), c, hidden);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchFeatures {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub modality: Modality,
}

impl BranchFeatures {
    /// `f*_i` for `i` in `1..=3`.
    pub fn level(&self, i: usize) -> Var {
        match i {
            1 => self.f1,
            2 => self.f2,
            _ => self.f3,
        }
    }
}

/// Runs one modality branch on a single-channel image.
pub fn extract<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    params: &ParamVars,
    config: &FusionConfig,
    modality: Modality,
) -> Result<BranchFeatures> {
    let (_, c, _, _) = tape.value(image).dims4("extract")?;
    if c != 1 {
        return Err(Error::shape("extract", "image channels", 1, c));
    }
    let m = modality.prefix();
    let f1 = params.conv3(tape, &format!("{m}.conv1"), image)?;
    let f1 = tape.relu(f1);
    let f2 = params.conv3(tape, &format!("{m}.conv2"), f1)?;
    let f2 = tape.relu(f2);
    let f3 = if config.modules.ssm {
        ssm_forward(tape, f2, params, modality)?
    } else {
        f2
    };
    Ok(BranchFeatures { f1, f2, f3, modality })
}

/// The salience module of one branch.
pub fn ssm_forward<T: Scalar>(tape: &mut Tape<T>, f2: Var, params: &ParamVars, modality: Modality) -> Result<Var> {
    let (n, c, _, _) = tape.value(f2).dims4("ssm_forward")?;
    let m = modality.prefix();
    let x = params.conv3(tape, &format!("{m}.ssm.conv"), f2)?;
    let pad = POOL_WINDOW / 2;
    let max = tape.maxpool2d(x, POOL_WINDOW, 1, pad)?;
    let avg = tape.avgpool2d(x, POOL_WINDOW, 1, pad)?;
    let combined = match modality {
        Modality::Infrared => tape.mul(max, avg)?,
        Modality::Visible => tape.add(max, avg)?,
    };
    let weight = channel_weight(tape, combined, params, &format!("{m}.ssm"))?;
    debug_assert_eq!(tape.shape(weight), &[n, c, 1, 1]);
    tape.mul(combined, weight)
}

/// `sigmoid(fc2(relu(fc1(gap(x)))))` as an `[n, c, 1, 1]` gate.
pub fn channel_weight<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &ParamVars, prefix: &str) -> Result<Var> {
    let (n, c, _, _) = tape.value(x).dims4("channel_weight")?;
    let squeezed = tape.global_avgpool(x)?;
    let flat = tape.reshape(squeezed, &[n, c])?;
    let hidden = params.linear(tape, &format!("{prefix}.fc1"), flat)?;
    let hidden = tape.relu(hidden);
    let excited = params.linear(tape, &format!("{prefix}.fc2"), hidden)?;
    let gate = tape.sigmoid(excited);
    tape.reshape(gate, &[n, c, 1, 1])
}
