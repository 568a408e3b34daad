use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, OutcomeSchema, Row};
use crate::linalg::{cholesky, sigmoid};
use crate::model::{ModelSpec, Theta, Variant};
use crate::rng::{stream, tag};
use crate::{Error, Result};

/// Group sizes of the reference three-arm study (AVM, MET, RSG).
pub const REFERENCE_COUNTS: [usize; 3] = [150, 146, 153];

/// Pooled two-factor truth shaped like the reference study's fitted
/// posterior means: 2 continuous items, 4 binary items, 3 groups.
pub fn reference_theta() -> (ModelSpec, Theta) {
    let spec = ModelSpec::parse("EZ1-p", 2, 4, 3).expect("valid reference spec");
    let mut theta = Theta::null(&spec);
    let alpha = [
        [-2.30, -4.05, -1.87, -2.27, -2.83, -5.19],
        [-1.83, -2.95, -1.39, -2.58, -3.45, -5.17],
        [-1.60, -2.81, -2.70, -2.44, -4.11, -6.55],
    ];
    for (g, row) in alpha.iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            theta.alpha[(g, j)] = *a;
        }
    }
    let b = &mut theta.blocks[0];
    b.lambda[(1, 0)] = 1.78;
    for (j, l) in [0.46, -0.39, 2.15, 2.36].iter().enumerate() {
        b.lambda[(2 + j, 1)] = *l;
    }
    b.psi = DVector::from_vec(vec![0.45, 4.4]);
    (spec, theta)
}

/// Draws a dataset from the generative model, with rows grouped in schema
/// order and the schema chosen by [`OutcomeSchema::for_shape`].
pub fn simulate_dataset(spec: &ModelSpec, theta: &Theta, counts: &[usize], seed: u64) -> Result<Dataset> {
    let schema = OutcomeSchema::for_shape(spec.p_c, spec.p_b, spec.n_groups)?;
    simulate_with_schema(&schema, spec, theta, counts, seed)
}

pub fn simulate_with_schema(
    schema: &OutcomeSchema,
    spec: &ModelSpec,
    theta: &Theta,
    counts: &[usize],
    seed: u64,
) -> Result<Dataset> {
    theta.validate(spec)?;
    if counts.len() != spec.n_groups {
        return Err(Error::Model(format!(
            "expected {} group sizes, found {}",
            spec.n_groups,
            counts.len()
        )));
    }
    if schema.n_continuous() != spec.p_c || schema.n_binary() != spec.p_b || schema.n_groups() != spec.n_groups {
        return Err(Error::Schema("schema does not match the model shape".into()));
    }
    let (pc, pb, k) = (spec.p_c, spec.p_b, spec.k());
    let factors = |m: Option<&DMatrix<f64>>, what: &'static str| -> Result<Option<DMatrix<f64>>> {
        match m {
            Some(m) if m.nrows() > 0 => Ok(Some(cholesky(m).ok_or(Error::NotPositiveDefinite(what))?.l())),
            _ => Ok(None),
        }
    };
    let mut chol_phi = Vec::new();
    let mut chol_omega = Vec::new();
    let mut chol_sigma = Vec::new();
    for b in &theta.blocks {
        chol_phi.push(factors(Some(&b.phi), "phi")?);
        chol_omega.push(factors(b.omega.as_ref().filter(|_| spec.variant.has_residual_effects()), "omega")?);
        chol_sigma.push(factors(b.sigma.as_ref().filter(|_| spec.variant == Variant::Sat), "sigma")?);
    }

    let mut rng = stream(seed, &[tag::SIMULATE]);
    let normals = |n: usize, rng: &mut crate::rng::StreamRng| {
        DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    };
    let mut rows = Vec::with_capacity(counts.iter().sum());
    for (g, &n_g) in counts.iter().enumerate() {
        let b = spec.block_of(g);
        let block = &theta.blocks[b];
        for _ in 0..n_g {
            let z = match &chol_phi[b] {
                Some(l) => l * normals(k, &mut rng),
                None => DVector::zeros(k),
            };
            let u = match &chol_omega[b] {
                Some(l) => l * normals(pb, &mut rng),
                None => DVector::zeros(pb),
            };
            let mut y = Vec::with_capacity(pc + pb);
            let eps = match &chol_sigma[b] {
                Some(l) => l * normals(pc, &mut rng),
                None => {
                    let e = normals(pc, &mut rng);
                    DVector::from_iterator(pc, (0..pc).map(|j| e[j] * block.psi[j].sqrt()))
                }
            };
            for j in 0..pc {
                let mean = theta.alpha[(g, j)] + (0..k).map(|f| block.lambda[(j, f)] * z[f]).sum::<f64>();
                y.push(mean + eps[j]);
            }
            for jb in 0..pb {
                let item = pc + jb;
                let eta = theta.alpha[(g, item)] + (0..k).map(|f| block.lambda[(item, f)] * z[f]).sum::<f64>() + u[jb];
                let draw: f64 = rng.random();
                y.push(if draw < sigmoid(eta) { 1.0 } else { 0.0 });
            }
            rows.push(Row {
                subject_id: format!("s{:05}", rows.len() + 1),
                group: g,
                y,
            });
        }
    }
    Dataset::new(schema.clone(), rows)
}
