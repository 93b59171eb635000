//! Trainable codebook of Lie-algebra generators.
//!
//! The codebook holds `sections x elements_per_section` dense `D x D`
//! generators. Group elements are their matrix exponentials and act on
//! latents by matrix multiplication. The regularizers in [`losses`] shape
//! the latent changes `z - g z` these elements produce.

mod expm;
pub mod losses;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use expm::{matrix_exponential, SCALED_NORM, TAYLOR_ORDER};
pub use losses::{
    commutativity_loss, commutator_sum, parallel_loss, parallel_loss_from_changes, perpendicular_loss,
    perpendicular_loss_from_changes, same_section_pairs, sparsity_loss, sparsity_loss_from_changes,
    ParallelForm, PerpForm, PerpSampling,
};

use crate::error::{Error, Result};
use crate::nn::{device, normal_tensor, to_vec, ParamStore, DTYPE};

#[derive(Debug, Clone)]
pub struct SymmetryCodebook {
    num_sections: usize,
    elements_per_section: usize,
    latent_dim: usize,
    generators: Var,
}

impl SymmetryCodebook {
    /// Draws generators i.i.d. from `N(0, (scale / D)^2)`.
    pub fn init(
        num_sections: usize,
        elements_per_section: usize,
        latent_dim: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(num_sections, elements_per_section, latent_dim, scale, &mut rng)
    }

    pub fn init_with_rng(
        num_sections: usize,
        elements_per_section: usize,
        latent_dim: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_sections == 0 || elements_per_section == 0 || latent_dim == 0 {
            return Err(Error::invalid(format!(
                "codebook sizes must be positive, got |S|={num_sections} |SS|={elements_per_section} D={latent_dim}"
            )));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("codebook scale must be finite and >= 0, got {scale}")));
        }
        let shape = [num_sections, elements_per_section, latent_dim, latent_dim];
        let init = normal_tensor(&shape, scale / latent_dim as f64, rng)?;
        Ok(Self { num_sections, elements_per_section, latent_dim, generators: Var::from_tensor(&init)? })
    }

    /// Wraps explicit generators of shape `(S, SS, D, D)`.
    pub fn from_generators(generators: &Tensor) -> Result<Self> {
        let dims = generators.dims();
        if dims.len() != 4 || dims[2] != dims[3] || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("generators must have shape (S, SS, D, D), got {dims:?}")));
        }
        if to_vec(generators)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("generators must be finite"));
        }
        Ok(Self {
            num_sections: dims[0],
            elements_per_section: dims[1],
            latent_dim: dims[2],
            generators: Var::from_tensor(&generators.to_dtype(DTYPE)?)?,
        })
    }

    pub fn register(&self, store: &mut ParamStore, name: &str) -> Result<()> {
        store.insert(format!("{name}.generators"), self.generators.clone())
    }

    pub fn num_sections(&self) -> usize {
        self.num_sections
    }

    pub fn elements_per_section(&self) -> usize {
        self.elements_per_section
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.num_sections * self.elements_per_section
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generators as a `(S, SS, D, D)` tensor tracked by autograd.
    pub fn generators(&self) -> &Tensor {
        self.generators.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.generators
    }

    pub fn generator(&self, section: usize, element: usize) -> Result<Tensor> {
        self.check_index(section, element)?;
        Ok(self.generators().get(section)?.get(element)?)
    }

    pub fn element(&self, section: usize, element: usize) -> Result<GroupElement> {
        GroupElement::from_algebra(&self.generator(section, element)?)
    }

    /// `exp` of every generator, shape `(S, SS, D, D)`.
    pub fn group_matrices(&self) -> Result<Tensor> {
        matrix_exponential(self.generators())
    }

    /// Latent changes `z - g z` for every element, shape `(B, S, SS, D)`.
    ///
    /// `z` is a single latent `(D)` or a batch `(B, D)`.
    pub fn latent_changes(&self, z: &Tensor) -> Result<Tensor> {
        let groups = self.group_matrices()?;
        changes_from_maps(&groups, z)
    }

    fn check_index(&self, section: usize, element: usize) -> Result<()> {
        if section >= self.num_sections || element >= self.elements_per_section {
            return Err(Error::invalid(format!(
                "codebook index ({section}, {element}) out of range ({}, {})",
                self.num_sections, self.elements_per_section
            )));
        }
        Ok(())
    }
}

/// `z - M z` for arbitrary linear maps `maps` of shape `(S, SS, D, D)`.
pub fn changes_from_maps(maps: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (s, ss, d, d2) = maps.dims4()?;
    if d != d2 {
        return Err(Error::invalid("maps must be square"));
    }
    let z = as_batch(z, d)?;
    let b = z.dim(0)?;
    let flat = maps.reshape((s * ss * d, d))?;
    let mapped = z.matmul(&flat.t()?)?.reshape((b, s, ss, d))?;
    Ok(z.reshape((b, 1, 1, d))?.broadcast_sub(&mapped)?)
}

/// Promotes a `(D)` latent to `(1, D)`; checks the trailing dimension.
pub(crate) fn as_batch(z: &Tensor, d: usize) -> Result<Tensor> {
    let z = match z.rank() {
        1 => z.unsqueeze(0)?,
        2 => z.clone(),
        r => return Err(Error::invalid(format!("latent must be (D) or (B, D), got rank {r}"))),
    };
    if z.dim(1)? != d {
        return Err(Error::invalid(format!("latent dimension {} does not match {d}", z.dim(1)?)));
    }
    Ok(z)
}

/// An invertible matrix together with the algebra element it came from.
#[derive(Debug, Clone)]
pub struct GroupElement {
    matrix: Tensor,
    source_algebra: Tensor,
}

impl GroupElement {
    pub fn from_algebra(algebra: &Tensor) -> Result<Self> {
        if algebra.rank() != 2 {
            return Err(Error::invalid(format!("algebra element must be a matrix, got {:?}", algebra.dims())));
        }
        Ok(Self { matrix: matrix_exponential(algebra)?, source_algebra: algebra.clone() })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_algebra(&Tensor::zeros((dim, dim), DTYPE, &device())?)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn source_algebra(&self) -> &Tensor {
        &self.source_algebra
    }

    pub fn dim(&self) -> usize {
        self.matrix.dims()[0]
    }
}

/// `exp(-A)`; never forms a numerical inverse.
pub fn inverse_symmetry(g: &GroupElement) -> Result<GroupElement> {
    GroupElement::from_algebra(&g.source_algebra.neg()?)
}

/// `g z` for a latent `(D)` or batch `(B, D)`; output has the input's rank.
pub fn apply_symmetry(g: &GroupElement, z: &Tensor) -> Result<Tensor> {
    let d = g.dim();
    let single = z.rank() == 1;
    let batch = as_batch(z, d)?;
    let out = batch.matmul(&g.matrix.t()?)?;
    Ok(if single { out.squeeze(0)? } else { out })
}

/// `z - g z` for one element.
#[derive(Debug, Clone)]
pub struct LatentChange {
    pub delta: Tensor,
}

impl LatentChange {
    pub fn between(g: &GroupElement, z: &Tensor) -> Result<Self> {
        let gz = apply_symmetry(g, z)?;
        Ok(Self { delta: (z - gz)? })
    }
}
