//! Step-by-step trace of the multi-step answer module on random memories.

use mtdnn::heads::{san_forward, HeadParams};
use mtdnn::rng::{stream, Purpose};
use mtdnn::{Graph, ParamStore, Tensor};
use rand::Rng;

fn main() -> mtdnn::Result<()> {
    let d = 8;
    let mut rng = stream(3, Purpose::Init);
    let mut store = ParamStore::new();
    let HeadParams::SanPairwise(head) = HeadParams::san(&mut store, "nli", d, 3, 5, 0.1, &mut rng)? else {
        unreachable!()
    };
    let mut memory = |rows: usize| Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (premise, hypothesis) = (memory(6)?, memory(4)?);

    for training in [false, true] {
        let mut g = Graph::with_params(&store);
        let p = g.constant(premise.clone())?;
        let h = g.constant(hypothesis.clone())?;
        let (out, trace) = san_forward(&mut g, p, h, &head, training, &mut stream(9, Purpose::Dropout))?;
        println!("training = {training}");
        println!("  summary attention over the hypothesis: {:.3?}", trace.alpha);
        for (k, step) in trace.steps.iter().enumerate() {
            println!("  step {k}: kept {} probs {:.4?} premise attention {:.3?}", trace.kept[k], step.probs, step.beta);
        }
        println!("  averaged: {:.4?}", g.value(out).data());
    }
    Ok(())
}
