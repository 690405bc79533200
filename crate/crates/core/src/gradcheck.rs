//! Central finite-difference verification of analytic gradients.
//!
//! The loss used for a bare stage is a fixed random linear functional of the
//! stage output, which breaks symmetries that a plain sum would hide. Checks
//! run in inference mode so dropout does not inject randomness.

use crate::error::{Error, Result};
use crate::layers::{Mode, Stage};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error between analytic and numeric derivatives. The floor keeps
/// near-zero gradient pairs from blowing up the ratio; central differences
/// on these kernels are accurate to ~1e-9 absolute.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn loss_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weighted_loss(out: &Tensor, w: &[f64]) -> Result<f64> {
    out.ensure_finite("gradient check forward output")?;
    Ok(out.data().iter().zip(w).map(|(&o, &c)| o * c).sum())
}

/// Compares every parameter gradient and every input gradient of `stage`
/// against central finite differences with the given step. Returns the
/// maximum relative error observed.
pub fn finite_diff_check(
    stage: &Stage,
    store: &mut ParamStore,
    input: &Tensor,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, cache) = stage.forward(store, input.clone(), Mode::Infer, &mut rng)?;
    let w = loss_weights(out.numel());
    weighted_loss(&out, &w)?;

    // analytic gradients
    store.zero_grads();
    let upstream = Tensor::from_vec(out.shape(), w.clone())?;
    let grad_input = stage.backward(store, &cache, upstream)?;
    let analytic_params: Vec<(String, Vec<f64>)> = stage
        .all_param_names()
        .into_iter()
        .map(|n| {
            let g = store.get(&n).map(|p| p.grad.data().to_vec())?;
            Ok((n, g))
        })
        .collect::<Result<_>>()?;
    store.zero_grads();

    let mut worst: f64 = 0.0;
    let eval = |store: &ParamStore, input: &Tensor| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = stage.forward(store, input.clone(), Mode::Infer, &mut r)?;
        weighted_loss(&out, &w)
    };

    for (name, analytic) in &analytic_params {
        for i in 0..analytic.len() {
            let saved = store.get(name)?.value.data()[i];
            store.get_mut(name)?.value.data_mut()[i] = saved + step;
            let up = eval(store, input)?;
            store.get_mut(name)?.value.data_mut()[i] = saved - step;
            let down = eval(store, input)?;
            store.get_mut(name)?.value.data_mut()[i] = saved;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }

    let mut probe = input.clone();
    for i in 0..probe.numel() {
        let saved = probe.data()[i];
        probe.data_mut()[i] = saved + step;
        let up = eval(store, &probe)?;
        probe.data_mut()[i] = saved - step;
        let down = eval(store, &probe)?;
        probe.data_mut()[i] = saved;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_err(grad_input.data()[i], numeric));
    }

    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    fn checked_stage(layers: Vec<LayerSpec>, in_shape: &[usize], seed: u64) -> f64 {
        let stage = Stage::new("g", layers);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        stage.init_params(&mut store, &mut rng).unwrap();
        let n: usize = in_shape.iter().product();
        let input = Tensor::from_vec(
            in_shape,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        finite_diff_check(&stage, &mut store, &input, 1e-5).unwrap()
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        let err = checked_stage(
            vec![LayerSpec::Conv3 {
                in_channels: 2,
                out_channels: 3,
            }],
            &[2, 4, 4],
            21,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn maxpool2_input_gradients_match_finite_differences() {
        let err = checked_stage(vec![LayerSpec::MaxPool2], &[2, 4, 4], 22);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let err = checked_stage(vec![LayerSpec::Relu], &[3, 3, 3], 23);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let err = checked_stage(
            vec![LayerSpec::Linear {
                in_features: 12,
                out_features: 5,
            }],
            &[12],
            24,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn composite_stage_gradients_match_finite_differences() {
        let err = checked_stage(
            vec![
                LayerSpec::Conv3 {
                    in_channels: 1,
                    out_channels: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Linear {
                    in_features: 2 * 2 * 2,
                    out_features: 3,
                },
                LayerSpec::Dropout { rate: 0.5 },
            ],
            &[1, 4, 4],
            25,
        );
        assert!(err < 1e-4, "relative error {err}");
    }
}
