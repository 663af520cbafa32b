use std::time::Instant;

use canopy_core::model::{build_aug_vggish, build_fcn_vggish, fold_batchnorm, WeightBundle};
use canopy_core::Tensor;

fn main() {
    let input =
        Tensor::new(vec![1, 96, 64], (0..96 * 64).map(|i| ((i % 97) as f32 / 97.0) * 6.0 - 4.6).collect()).unwrap();
    for spec in [build_aug_vggish(50).unwrap(), build_fcn_vggish(50).unwrap()] {
        let arch = spec.arch_id;
        let bundle = WeightBundle::random(spec, 1);
        let folded = fold_batchnorm(&bundle).unwrap();
        for (label, b) in [("bn", &bundle), ("folded", &folded)] {
            let t = Instant::now();
            let p = b.forward_probs_input(&input).unwrap();
            println!("{arch} {label}: {:?} (p0 = {:.4})", t.elapsed(), p[0]);
        }
    }
}
