use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AuditReport;
use crate::autodiff::{NormMode, ParamStore, Tape, Tensor};
use crate::data::{preprocess, synth_shapes};
use crate::error::Result;
use crate::layers::normal_tensor;
use crate::network::{total_loss, ArchitectureSpec, Batch, BlockKind, BlockSpec, Model, PreparedCloud};

/// An entry passes when `|Δ| ≤ 1e-5 · max(|fd|, |analytic|)` or
/// `|Δ| ≤ 1e-8`; central differences cannot resolve gradients that are zero
/// up to rounding. Both conditions fold into one score,
/// `|Δ| / max(|fd|, |analytic|, 1e-3)`, compared against 1e-5.
const ABS_FLOOR: f64 = 1e-8;
const REL_TOL: f64 = 1e-5;

/// Worst entry of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub checked: usize,
    /// Entries skipped because a perturbation changed the kink signature.
    pub excluded: usize,
    /// Largest `|Δ| / max(|fd|, |analytic|, 1e-3)`.
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Finite-difference comparison over a set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub params: Vec<ParamGradError>,
    pub report: AuditReport,
}

/// Compares `analytic` (one tensor per parameter, in store order) with
/// central differences of `loss` at step `eps`, for up to `per_param`
/// evenly spaced entries of each parameter. `loss` returns the value and
/// the tape's kink signature; entries whose perturbations change the
/// signature are excluded.
pub fn finite_diff_check(
    check: &str,
    store: &ParamStore,
    analytic: &[Tensor],
    eps: f64,
    per_param: usize,
    loss: impl Fn(&ParamStore) -> Result<(f64, u64)>,
) -> Result<GradCheck> {
    let (_, base_sig) = loss(store)?;
    let mut work = store.clone();
    let mut params = Vec::new();
    let (mut total, mut excluded_total, mut worst) = (0, 0, 0.0f64);
    for (id, grad) in store.ids().zip(analytic) {
        let p = store.get(id);
        let n = p.value.len();
        let stride = (n / per_param.max(1)).max(1);
        let mut entry = ParamGradError {
            name: p.name.clone(),
            checked: 0,
            excluded: 0,
            max_rel: 0.0,
            max_abs: 0.0,
        };
        for e in (0..n).step_by(stride).take(per_param) {
            let orig = p.value.data()[e];
            work.get_mut(id).value.data_mut()[e] = orig + eps;
            let (lp, sp) = loss(&work)?;
            work.get_mut(id).value.data_mut()[e] = orig - eps;
            let (lm, sm) = loss(&work)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                entry.excluded += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * eps);
            let bw = grad.data()[e];
            let abs = (fd - bw).abs();
            entry.checked += 1;
            entry.max_abs = entry.max_abs.max(abs);
            let denom = fd.abs().max(bw.abs()).max(ABS_FLOOR / REL_TOL);
            entry.max_rel = entry.max_rel.max(abs / denom);
        }
        total += entry.checked;
        excluded_total += entry.excluded;
        worst = worst.max(entry.max_rel);
        params.push(entry);
    }
    Ok(GradCheck {
        params,
        report: AuditReport::new(check, total, worst, REL_TOL, excluded_total),
    })
}

/// Two-block network (simple and residual) on two small synthetic clouds:
/// cross-entropy plus orthonormalization loss in train mode. The frame
/// update weights leave their zero init so the update path carries
/// gradient, and biases are offset so no ReLU input sits exactly at zero.
/// Checks up to `per_param` entries of every parameter tensor.
pub fn toy_gradcheck(seed: u64, per_param: usize) -> Result<GradCheck> {
    let spec = ArchitectureSpec {
        lrf_scales: vec![6, 12],
        head_hidden: 8,
        blocks: vec![
            BlockSpec {
                kind: BlockKind::Simple,
                out: 4,
            },
            BlockSpec {
                kind: BlockKind::Residual,
                out: 8,
            },
        ],
        ..ArchitectureSpec::toy_classifier(3)
    };
    let mut model = Model::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get_mut(id);
        if p.name.ends_with("lrf_update.out.weight") {
            p.value = normal_tensor(p.value.rows(), p.value.cols(), 0.05, &mut rng);
        } else if p.name.ends_with(".bias") {
            p.value.add_assign(&normal_tensor(p.value.rows(), p.value.cols(), 0.05, &mut rng));
        }
    }
    let data = synth_shapes(1, 40, seed)?;
    let prepared: Vec<PreparedCloud> = data.samples[..2]
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(model.prepare(&preprocess(&s.cloud, 0.15)?)?.with_class(i % 3)))
        .collect::<Result<_>>()?;
    let batch = Batch::new(&prepared.iter().collect::<Vec<_>>())?;
    let labels = batch.classes.clone().expect("classes set");
    let loss = |store: &ParamStore| -> Result<(f64, u64, Tape, crate::autodiff::Var)> {
        let mut tape = Tape::new();
        let out = model.forward_with_store(store, &mut tape, &batch, NormMode::Train)?;
        let l = total_loss(&mut tape, out.logits, labels.clone(), out.ortho)?;
        Ok((tape.value(l).item(), tape.kink_signature(), tape, l))
    };
    let (_, _, tape, l) = loss(&model.store)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Tensor> = model
        .store
        .ids()
        .map(|id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| {
                    let v = &model.store.get(id).value;
                    Tensor::zeros(v.rows(), v.cols())
                })
        })
        .collect();
    finite_diff_check("toy network gradient check", &model.store, &analytic, 1e-6, per_param, |s| {
        loss(s).map(|(v, sig, _, _)| (v, sig))
    })
}
