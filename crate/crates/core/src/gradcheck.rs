//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamSet};

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn total_probes(&self) -> usize {
        self.groups.iter().map(|g| g.probes).sum()
    }
}

/// Compares analytic gradients with central differences on `probes`
/// random coordinates of every parameter group (or all coordinates when a
/// group is smaller). The error measure is
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `loss` must be deterministic: it is re-evaluated twice per probe.
pub fn finite_diff_gradcheck<F>(
    loss: F,
    params: &ParamSet<f64>,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = loss(&mut tape, &bound)?;
    tape.backward(l)?;
    let analytic = bound.grads(&tape);
    drop(tape);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let l = loss(&mut tape, &bound)?;
        Ok(tape.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;
    for (gi, name) in params.names().iter().enumerate() {
        let len = params.tensors()[gi].len();
        let coords = sample(&mut rng, len, probes.min(len)).into_vec();
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = params.tensors()[gi].data()[c];
            work.tensors_mut()[gi].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work.tensors_mut()[gi].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work.tensors_mut()[gi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[gi].data()[c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        groups.push(GroupReport { name: name.clone(), probes: coords.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { max_rel_error: overall, groups })
}
