use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Inverted dropout driven by a seeded generator. A disabled instance is the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = (rate > 0.0).then(|| RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        Ok(Dropout { rate, rng })
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let Some(rng) = &self.rng else { return Ok(x) };
        let shape = x.shape();
        let keep = 1.0 - self.rate;
        let mut rng = rng.borrow_mut();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(x.graph().constant(Tensor::from_parts(shape, mask)))
    }
}
