use crate::engine::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};

use super::graph::{BlockLayer, SppLayer};

/// Pooling-mixer MetaFormer block:
///
/// ```text
/// z1 = z  + Pool(Norm(z))
/// z2 = z1 + FFN(Norm(z1)),   FFN = fc2(swish(fc1(.)))
/// ```
///
/// With `subtract_input` the mixer is `Pool(n) - n` instead.
pub fn metaformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    z: Var,
    block: &BlockLayer,
) -> Result<Var> {
    let c = tape.value(z).shape().c;
    if c != block.width {
        return Err(Error::shapes(
            "metaformer_block",
            format!("input {}", tape.value(z).shape()),
            format!("block width {}", block.width),
        ));
    }
    let n1 = tape.layer_norm(store, z, block.norm1.0, block.norm1.1, block.eps)?;
    let mut mixed = tape.avg_pool_same(n1, block.kernel)?;
    if block.subtract_input {
        mixed = tape.sub(mixed, n1)?;
    }
    let z1 = tape.add(z, mixed)?;
    let n2 = tape.layer_norm(store, z1, block.norm2.0, block.norm2.1, block.eps)?;
    let h = tape.conv2d(store, n2, block.fc1.0, Some(block.fc1.1), 1, 0)?;
    let h = tape.swish(h);
    let f = tape.conv2d(store, h, block.fc2.0, Some(block.fc2.1), 1, 0)?;
    tape.add(z1, f)
}

/// Input concatenated with every pyramid branch, before fusion.
pub fn spp_concat<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    spp: &SppLayer,
) -> Result<Var> {
    let s = tape.value(x).shape();
    let mut cat = x;
    for (&bins, &(w, b)) in spp.bins.iter().zip(&spp.branches) {
        let pooled = tape.adaptive_avg_pool(x, bins)?;
        let proj = tape.conv2d(store, pooled, w, Some(b), 1, 0)?;
        let proj = tape.swish(proj);
        let up = tape.upsample_to(proj, s.h, s.w);
        cat = tape.concat(cat, up)?;
    }
    Ok(cat)
}

pub fn spp<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    spp: &SppLayer,
) -> Result<Var> {
    let cat = spp_concat(tape, store, x, spp)?;
    let fused = tape.conv2d(store, cat, spp.fuse.0, Some(spp.fuse.1), 1, 1)?;
    Ok(tape.swish(fused))
}
