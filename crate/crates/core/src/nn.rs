//! Shared plumbing for parameter structs and initializers.
//!
//! Model parameter structs are generic over their slot type `P`: the same
//! struct holds `Tensor<T>` when stored and [`Var`](crate::tensor::Var)
//! handles once bound to a tape. `map`, `visit` and `visit_mut` walk the
//! slots in a fixed order with dotted names.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Scalar, Tensor};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Declares a parameter struct whose fields are all slots of type `P`.
macro_rules! param_group {
    ($(#[$meta:meta])* $vis:vis struct $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        $vis struct $name<P> {
            $(pub $field: P,)*
        }

        impl<P> $name<P> {
            pub fn map<'s, Q>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P) -> Q) -> $name<Q> {
                $name {
                    $($field: f($crate::nn::join(prefix, stringify!($field)), &self.$field),)*
                }
            }

            pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
                $(f($crate::nn::join(prefix, stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut<'s>(
                &'s mut self,
                prefix: &str,
                f: &mut impl FnMut(String, &'s mut P),
            ) {
                $(f($crate::nn::join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use param_group;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shaped `[fan_in, fan_out]`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    sample([fan_in, fan_out], dist, rng)
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    sample(shape, dist, rng)
}

/// He normal init for a `[C_out, C_in, kh, kw]` kernel: std `sqrt(2 / fan_in)`
/// with `fan_in = C_in * kh * kw`.
pub fn he_conv<T: Scalar, R: Rng + ?Sized>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> Tensor<T> {
    let fan_in = c_in * k * k;
    normal([c_out, c_in, k, k], (2.0 / fan_in as f64).sqrt(), rng)
}

fn sample<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    dist: impl Distribution<f64>,
    rng: &mut R,
) -> Tensor<T> {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Weight decay applies to matrices and kernels; gains and biases (rank 1)
/// are exempt.
pub fn decays(t_rank: usize) -> bool {
    t_rank >= 2
}

/// Independent generator for a `(seed, tag..)` key, e.g. one stream per
/// (epoch, sample) so results do not depend on evaluation order.
pub fn derive_rng(seed: u64, tags: &[u64]) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let key = tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    rand_chacha::ChaCha8Rng::seed_from_u64(key)
}
