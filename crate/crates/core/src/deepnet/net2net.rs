//! Function-preserving growth. Layer positions count activations: 0 is the
//! input, `1..=h` the hidden layers and `h + 1` the softmax output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DeepError, Layer, MlpModel};
use crate::matrix::Matrix;

fn check_hidden(teacher: &MlpModel, position: usize) -> Result<(), DeepError> {
    let h = teacher.n_hidden();
    if position == 0 || position > h {
        return Err(DeepError::BadLayer(format!(
            "position {position} is not a hidden layer (network has {h})"
        )));
    }
    Ok(())
}

/// Widens hidden layer `position` to `new_width` units. Each new unit
/// copies a uniformly chosen existing unit; outgoing weights are divided
/// by each source unit's replication count.
pub fn net2wider(
    teacher: &MlpModel,
    position: usize,
    new_width: usize,
    seed: u64,
) -> Result<MlpModel, DeepError> {
    check_hidden(teacher, position)?;
    let inbound = &teacher.layers[position - 1];
    let outbound = &teacher.layers[position];
    let old = inbound.outputs();
    if new_width < old {
        return Err(DeepError::ShrinkNotAllowed {
            from: old,
            to: new_width,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mapping: Vec<usize> = (0..new_width)
        .map(|j| if j < old { j } else { rng.gen_range(0..old) })
        .collect();
    let mut counts = vec![0usize; old];
    for &u in &mapping {
        counts[u] += 1;
    }

    let mut wide_in = Layer {
        weights: Matrix::zeros(new_width, inbound.inputs()),
        bias: Vec::with_capacity(new_width),
    };
    for (j, &u) in mapping.iter().enumerate() {
        wide_in.weights.row_mut(j).copy_from_slice(inbound.weights.row(u));
        wide_in.bias.push(inbound.bias[u]);
    }
    let mut wide_out = Layer {
        weights: Matrix::zeros(outbound.outputs(), new_width),
        bias: outbound.bias.clone(),
    };
    for o in 0..outbound.outputs() {
        let src = outbound.weights.row(o);
        for (dst, &u) in wide_out.weights.row_mut(o).iter_mut().zip(&mapping) {
            *dst = src[u] / counts[u] as f64;
        }
    }

    let mut student = teacher.clone();
    student.layers[position - 1] = wide_in;
    student.layers[position] = wide_out;
    Ok(student)
}

/// Inserts an identity-initialized ReLU layer directly after hidden layer
/// `position`. Exact because ReLU outputs are non-negative.
pub fn net2deeper(teacher: &MlpModel, position: usize) -> Result<MlpModel, DeepError> {
    check_hidden(teacher, position)?;
    let width = teacher.layers[position - 1].outputs();
    let mut student = teacher.clone();
    student.layers.insert(
        position,
        Layer {
            weights: Matrix::identity(width),
            bias: vec![0.0; width],
        },
    );
    Ok(student)
}
