//! Training objectives: change-detection cross-entropy, the two land-cover
//! mapping cross-entropies, the converse cross-entropy on changed areas, and
//! their unit-weight sum.
//!
//! Background pixels (map label 0, change label 255) contribute to none of
//! the losses. Every loss is a per-pixel mean over its contributing pixels so
//! magnitudes are resolution independent.

use crate::error::{Error, Result};
use crate::tensor::ops::MaskedLoss;
use crate::tensor::{Element, Tape, TensorId};

/// Sentinel in change labels marking unedited basemap areas.
pub const BCD_BACKGROUND: u8 = 255;
/// Background / ignore class in land-cover labels.
pub const LCM_IGNORE: u8 = 0;
/// Probability clamp inside the converse cross-entropy.
pub const CCE_EPS: f64 = 1e-7;

/// The four objectives and their sum, all scalars on the tape.
pub struct LossBundle {
    pub l_bcd: TensorId,
    pub l_lcm_osm: TensorId,
    pub l_lcm_opt: TensorId,
    pub l_cce: TensorId,
    pub l_total: TensorId,
    /// Contributing pixel counts, in the same order; zero means the
    /// corresponding term was pinned to 0.
    pub pixels: [usize; 4],
}

/// Scalar values of a bundle, for logging.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossValues {
    pub bcd: f64,
    pub lcm_osm: f64,
    pub lcm_opt: f64,
    pub cce: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values<E: Element>(&self, tape: &Tape<E>) -> LossValues {
        LossValues {
            bcd: tape.scalar_value(self.l_bcd).to_f64(),
            lcm_osm: tape.scalar_value(self.l_lcm_osm).to_f64(),
            lcm_opt: tape.scalar_value(self.l_lcm_opt).to_f64(),
            cce: tape.scalar_value(self.l_cce).to_f64(),
            total: tape.scalar_value(self.l_total).to_f64(),
        }
    }
}

/// Mean cross-entropy of the change logits over non-background pixels.
pub fn bcd_loss<E: Element>(
    tape: &mut Tape<E>,
    bcd_logits: TensorId,
    y_bcd: &[u8],
) -> Result<MaskedLoss> {
    if tape.shape(bcd_logits).first() != Some(&2) {
        return Err(Error::shape("bcd_loss", "change logits must have 2 channels".to_string()));
    }
    tape.cross_entropy(bcd_logits, y_bcd, BCD_BACKGROUND)
}

/// The two land-cover mapping cross-entropies. The optical branch trains on
/// the partial labels, so only unchanged pixels contribute there.
pub fn lcm_losses<E: Element>(
    tape: &mut Tape<E>,
    lcm_osm_logits: TensorId,
    y_osm: &[u8],
    lcm_opt_logits: TensorId,
    y_opt_partial: &[u8],
) -> Result<(MaskedLoss, MaskedLoss)> {
    let osm = tape.cross_entropy(lcm_osm_logits, y_osm, LCM_IGNORE)?;
    let opt = tape.cross_entropy(lcm_opt_logits, y_opt_partial, LCM_IGNORE)?;
    Ok((osm, opt))
}

/// Converse cross-entropy: on changed, non-background pixels the optical
/// branch must move probability away from the class the map data held.
pub fn cce_loss<E: Element>(
    tape: &mut Tape<E>,
    lcm_opt_logits: TensorId,
    y_osm: &[u8],
    y_bcd: &[u8],
) -> Result<MaskedLoss> {
    tape.converse_cross_entropy(lcm_opt_logits, y_osm, y_bcd, CCE_EPS)
}

/// All four objectives from the SCD forward outputs. With `with_cce = false`
/// the converse term is a constant zero, so the bundle still satisfies
/// `total = bcd + lcm_osm + lcm_opt + cce` exactly.
#[allow(clippy::too_many_arguments)]
pub fn scd_total<E: Element>(
    tape: &mut Tape<E>,
    bcd_logits: TensorId,
    lcm_osm_logits: TensorId,
    lcm_opt_logits: TensorId,
    y_osm: &[u8],
    y_bcd: &[u8],
    y_opt_partial: &[u8],
    with_cce: bool,
) -> Result<LossBundle> {
    let bcd = bcd_loss(tape, bcd_logits, y_bcd)?;
    let (osm, opt) = lcm_losses(tape, lcm_osm_logits, y_osm, lcm_opt_logits, y_opt_partial)?;
    let cce = if with_cce {
        cce_loss(tape, lcm_opt_logits, y_osm, y_bcd)?
    } else {
        MaskedLoss { loss: tape.constant(vec![E::zero()], &[1])?, pixels: 0 }
    };
    let s1 = tape.add(bcd.loss, osm.loss)?;
    let s2 = tape.add(s1, opt.loss)?;
    let total = tape.add(s2, cce.loss)?;
    Ok(LossBundle {
        l_bcd: bcd.loss,
        l_lcm_osm: osm.loss,
        l_lcm_opt: opt.loss,
        l_cce: cce.loss,
        l_total: total,
        pixels: [bcd.pixels, osm.pixels, opt.pixels, cce.pixels],
    })
}
