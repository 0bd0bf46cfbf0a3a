//! End-to-end gradient verification: the analytic gradient of the total CTC
//! loss with respect to every model parameter must match central finite
//! differences.

use ipl_core::am::{AcousticModel, ConvSpec, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input(t: usize, d: usize, r: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_fn((t, d), |_| r.gen_range(-1.0f32..1.0))
}

/// Total loss over a fixed set of (input, target) pairs, eval mode.
fn total_loss(model: &AcousticModel, cases: &[(Array2<f32>, Vec<usize>)]) -> f64 {
    cases
        .iter()
        .map(|(x, target)| {
            let lattice = model.forward(&x.view(), "gc").unwrap();
            ipl_core::am::ctc_loss_grad(&lattice, target).unwrap().0
        })
        .sum()
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let configs = [
        ModelConfig {
            conv: vec![ConvSpec {
                kernel: 2,
                stride: 2,
                channels: 3,
            }],
            hidden: vec![5],
            dropout: 0.0,
        },
        ModelConfig {
            conv: vec![
                ConvSpec {
                    kernel: 3,
                    stride: 1,
                    channels: 4,
                },
                ConvSpec {
                    kernel: 2,
                    stride: 2,
                    channels: 3,
                },
            ],
            hidden: vec![4, 4],
            dropout: 0.0,
        },
    ];
    for (ci, config) in configs.iter().enumerate() {
        let mut r = rng(40 + ci as u64);
        let d = 3;
        let n_labels = 4;
        let mut model = AcousticModel::init(config, d, n_labels, 7 + ci as u64).unwrap();
        assert!(
            model.n_params() <= 500,
            "gradient check is meant for small models, got {}",
            model.n_params()
        );
        let cases: Vec<(Array2<f32>, Vec<usize>)> = vec![
            (random_input(7, d, &mut r), vec![1, 2]),
            (random_input(5, d, &mut r), vec![3]),
            (random_input(6, d, &mut r), vec![]),
        ];

        // Analytic gradient accumulated over the same cases.
        let mut analytic = vec![0.0; model.n_params()];
        for (x, target) in &cases {
            let (_, grads) = model.loss_and_grad(&x.view(), target).unwrap();
            for (a, g) in analytic.iter_mut().zip(grads) {
                *a += g;
            }
        }

        let h = 1e-4;
        let base = total_loss(&model, &cases);
        let mut kinks = 0usize;
        for i in 0..model.n_params() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let plus = total_loss(&model, &cases);
            model.params_mut()[i] = orig - h;
            let minus = total_loss(&model, &cases);
            model.params_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            // Central differences are only valid where the loss is smooth on
            // [theta-h, theta+h]. A ReLU pre-activation crossing zero inside
            // the window makes the two one-sided slopes disagree; skip those
            // components (they must stay rare). Smooth curvature keeps the
            // one-sided slopes within O(h * f'') of each other.
            let left = (base - minus) / h;
            let right = (plus - base) / h;
            let disagree = (left - right).abs();
            if disagree > 0.2 * left.abs().max(right.abs()) && disagree > 1e-6 {
                kinks += 1;
                continue;
            }
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(
                rel <= 1e-3,
                "config {ci}, param {i}: analytic {} vs fd {fd} (rel {rel})",
                analytic[i]
            );
        }
        assert!(
            kinks <= model.n_params() / 10 + 1,
            "config {ci}: too many ReLU kink crossings ({kinks} of {})",
            model.n_params()
        );
    }
}
