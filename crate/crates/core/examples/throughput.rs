//! Rough forward/backward timing of the default network.

use std::time::Instant;

use segcons::segnet::{ArchDescriptor, Network, SegNetwork};
use segcons::tensor::{Tape, Tensor};

fn main() -> segcons::Result<()> {
    let net = SegNetwork::build(ArchDescriptor::default(), 0)?;
    let batch = 4;
    let x = Tensor::from_fn([batch, 3, 64, 64], |i| ((i as f64) * 0.013).sin() * 0.5 + 0.5);
    let targets: Vec<Option<usize>> = (0..batch * 64 * 64).map(|i| Some(i % 4)).collect();
    println!("parameters: {}", net.params().num_scalars());
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        net.predict(&x)?;
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let p = net.params().bind(&tape, true);
        let loss = net.forward(&p, tape.constant(x.clone()))?.cross_entropy_seg(&targets)?;
        tape.backward(loss)?;
    }
    let both = t0.elapsed().as_secs_f64() / reps as f64;
    println!("batch {batch}: forward {fwd:.3}s, forward+backward {both:.3}s");
    Ok(())
}
