//! Mid-scale checks on the default dataset that sit between unit tests and
//! the acceptance suite.

use fguap::dataset::generate_synthetic;
use fguap::models::{Arch, Model};
use fguap::trainer::evaluate_accuracy;

#[test]
fn untrained_model_sits_at_chance_on_balanced_data() {
    let (train, _) = generate_synthetic(42, 8, 200, 50, 24).unwrap();
    for (arch, seed) in [(Arch::Convnet, 1u64), (Arch::Mlp, 2), (Arch::Attnnet, 3)] {
        let model = Model::build(arch, 8, seed).unwrap();
        let acc = evaluate_accuracy(&model, &train).unwrap();
        assert!(
            (acc - 0.125).abs() <= 0.05,
            "{} untrained accuracy {acc} should be near 1/8",
            arch.tag()
        );
    }
}

#[test]
fn independent_tapes_run_concurrently() {
    let handles: Vec<_> = (0..4u64)
        .map(|seed| {
            std::thread::spawn(move || {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let tape = fguap::Tape::new();
                let a = tape.leaf(
                    fguap::Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng).with_grad(),
                );
                let b = tape.leaf(fguap::Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng));
                let loss = tape.mean_all(tape.mul(a, b).unwrap()).unwrap();
                tape.backward(loss).unwrap();
                tape.grad(a).unwrap().data()[0]
            })
        })
        .collect();
    for h in handles {
        assert!(h.join().unwrap().is_finite());
    }
}
