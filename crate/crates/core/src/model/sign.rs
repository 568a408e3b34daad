use super::{ModelSpec, Theta};

/// Reflects factors whose anchor loading is negative in one draw. Returns
/// a flag per factor telling whether it was flipped (in any block).
pub fn sign_postprocess_one(theta: &mut Theta, spec: &ModelSpec) -> Vec<bool> {
    let k = spec.k();
    let mut flipped = vec![false; k];
    for block in &mut theta.blocks {
        for (f, flag) in flipped.iter_mut().enumerate() {
            let Some(a) = spec.anchor(f) else { continue };
            if block.lambda[(a, f)] >= 0.0 {
                continue;
            }
            *flag = true;
            block.lambda.column_mut(f).neg_mut();
            for g in 0..k {
                if g != f {
                    block.phi[(f, g)] = -block.phi[(f, g)];
                    block.phi[(g, f)] = -block.phi[(g, f)];
                }
            }
        }
    }
    flipped
}

/// Applies [`sign_postprocess_one`] to every draw.
pub fn sign_postprocess(draws: &mut [Theta], spec: &ModelSpec) {
    for t in draws {
        sign_postprocess_one(t, spec);
    }
}
