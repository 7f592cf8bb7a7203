use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Grads, Linear, ParamStore, Scalar, Tensor};
use crate::rng::Rng;
use crate::sampleaug::factorial;

/// Largest permutation-classification head we allow (7! = 5040 fits, 8! does not).
pub const MAX_REORDER_CLASSES: usize = 10_080;

/// Projector `g`: two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Projector {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct ProjectorCache<T> {
    h: Tensor<T>,
    hidden: Tensor<T>,
}

impl Projector {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), input, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, output, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_features
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<(Tensor<T>, ProjectorCache<T>)> {
        let hidden = relu(&self.fc1.forward(store, h)?);
        let z = self.fc2.forward(store, &hidden)?;
        Ok((z, ProjectorCache { h: h.clone(), hidden }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ProjectorCache<T>,
        dz: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let dhidden = self.fc2.backward(store, &cache.hidden, dz, grads)?;
        let dpre = relu_backward(&cache.hidden, &dhidden);
        self.fc1.backward(store, &cache.h, &dpre, grads)
    }
}

/// Single affine layer over `h` predicting which of the `K!` frame orders was applied.
#[derive(Clone, Debug)]
pub struct ReorderHead {
    pub frames: usize,
    fc: Linear,
}

impl ReorderHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        frames: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let classes = reorder_classes(frames)?;
        Ok(Self {
            frames,
            fc: Linear::new(store, &format!("{prefix}.fc"), input, classes, rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.fc.out_features
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc.forward(store, h)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        dlogits: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        self.fc.backward(store, h, dlogits, grads)
    }
}

/// Number of reorder classes for `frames`, rejecting heads that would be absurdly wide.
pub fn reorder_classes(frames: usize) -> Result<usize> {
    if frames == 0 {
        return Err(Error::Config("reorder head needs at least one frame".into()));
    }
    if frames > 7 {
        return Err(Error::FactorialHeadTooLarge { k: frames });
    }
    let classes = factorial(frames);
    debug_assert!(classes <= MAX_REORDER_CLASSES);
    Ok(classes)
}

/// Binary disease classifier: one logit per clip.
#[derive(Clone, Debug)]
pub struct DiseaseHead {
    pub fc: Linear,
}

impl DiseaseHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, input: usize, rng: &mut Rng) -> Self {
        Self {
            fc: Linear::new(store, &format!("{prefix}.fc"), input, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc.forward(store, h)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        dlogit: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        self.fc.backward(store, h, dlogit, grads)
    }
}
