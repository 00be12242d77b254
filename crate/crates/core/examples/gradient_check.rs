//! Checks tape gradients of a small MLP against central differences.
//!
//!     cargo run --example gradient_check

use autodiff::gradcheck::{central_difference, max_relative_error};
use autodiff::{ParameterSet, Tape, Tensor};
use humanrf::nets::Mlp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest relative error over all first-layer weights.
pub fn run(hidden: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::<f64>::new();
    let mlp = Mlp::new(&mut params, "mlp", 3, &[hidden, hidden], 2, &mut rng).unwrap();
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

    let loss = |params: &ParameterSet<f64>| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let input = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &bound, input).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum(sq);
        (tape, bound, l)
    };

    let (mut tape, bound, l) = loss(&params);
    tape.backward(l).unwrap();
    let grads = bound.grads(&tape);
    let first = mlp.layers()[0].0;
    let analytic = grads.grads[0].as_ref().unwrap().data().to_vec();
    let x0 = params.get(first).data().to_vec();
    let coords: Vec<usize> = (0..x0.len()).collect();
    let mut probe = params.clone();
    let numeric = central_difference(&x0, &coords, 1e-4, |w| {
        probe.get_mut(first).data_mut().copy_from_slice(w);
        let (tape, _, l) = loss(&probe);
        tape.value(l).item()
    });
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn main() {
    let err = run(16);
    println!("max relative error over first-layer weights: {err:.2e}");
}
