//! Finite-difference gradient check shared by the test targets.

use echoclr::model::{EchoNet, Mode, ModelConfig};
use echoclr::nn::{ParamKind, Tensor};
use echoclr::pretrain::{loss_and_grads, nt_xent_with_grad, reorder_ce_with_grad, PretrainMode};
use echoclr::rng;
use rand::Rng as _;

const TAU: f64 = 0.5;
const STEP: f64 = 1e-6;

/// Loss from a fixed representation; head perturbations cannot change `h`.
fn head_loss(net: &EchoNet<f64>, h: &Tensor<f64>, targets: Option<&[usize]>) -> f64 {
    let z = net.project(h).unwrap();
    let nt = nt_xent_with_grad(&z, TAU).unwrap().0;
    nt + targets.map_or(0.0, |t| {
        reorder_ce_with_grad(&net.reorder_logits(h).unwrap(), t).unwrap().0
    })
}

/// Worst relative error over every trainable scalar and the number checked,
/// for a 2-pair batch of 4x16x16 clips in f64.
pub fn max_rel_error(mode: PretrainMode) -> (f64, usize) {
    let config = match mode {
        PretrainMode::EchoClr => ModelConfig::tiny(8).with_reorder(4),
        _ => ModelConfig::tiny(8),
    };
    let mut net: EchoNet<f64> = EchoNet::<f32>::random(config, 3).unwrap().cast();
    let mut r = rng::seeded(11);
    let clips = Tensor::from_vec(
        &[4, 1, 4, 16, 16],
        (0..4 * 4 * 16 * 16).map(|_| r.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let targets = [3usize, 17, 0, 9];
    let t = (mode == PretrainMode::EchoClr).then_some(&targets[..]);
    let (_, grads, _) = loss_and_grads(&net, &clips, t, mode, TAU, 1.0).unwrap();
    let h = net.encode(&clips, Mode::Train).unwrap().h;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for idx in 0..net.store.entries().len() {
        let entry = &net.store.entries()[idx];
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let in_encoder = entry.name.starts_with("encoder.");
        let analytic = grads.by_index(idx).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut eval = |delta: f64| {
                let orig = net.store.entries()[idx].value.data()[j];
                net.store.entries_mut()[idx].value.data_mut()[j] = orig + delta;
                let l = if in_encoder {
                    head_loss(&net, &net.encode(&clips, Mode::Train).unwrap().h, t)
                } else {
                    head_loss(&net, &h, t)
                };
                net.store.entries_mut()[idx].value.data_mut()[j] = orig;
                l
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}
