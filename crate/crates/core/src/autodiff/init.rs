use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{ParamRegistry, ParamRole};
use crate::formation::derive_seed;
use crate::scalar::Scalar;

/// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`, variance
/// `2/fan_in`) and zero biases. Each tensor draws from its own stream keyed
/// by parameter name, so the result does not depend on registration order.
pub fn init_params<T: Scalar>(registry: &mut ParamRegistry<T>, seed: u64) {
    for p in registry.iter_mut() {
        match p.role {
            ParamRole::Bias => p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero()),
            ParamRole::Weight { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"init", p.name.as_bytes()]));
                for v in p.tensor.data_mut() {
                    *v = T::lit(rng.gen_range(-bound..bound));
                }
            }
        }
        p.tensor.clear_grad();
    }
}
