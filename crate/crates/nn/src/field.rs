//! Running networks on whole grids and returning [`ProbabilityField`]s.
//!
//! A 3D network sees the grid as is. A 2D network sees the slice stack of its
//! plane (slices along the last axis), in chunks of at most `slice_chunk`
//! slices, and its output is permuted back to the grid layout.

use crossseg_core::{Error, Execution, NetSource, ProbabilityField, Result};
use ndarray::{s, Array3, Array4, Axis};

use crate::gemm::Gemm;
use crate::net::{Cache, Dimensionality, Network};
use crate::tensor::Feature;

/// Forward state of a whole-grid pass.
#[derive(Clone, Debug)]
pub struct FieldCache<T> {
    source: NetSource,
    chunks: Vec<(usize, Cache<T>)>,
}

fn check_kind<T: Gemm>(net: &Network<T>, source: NetSource) -> Result<()> {
    let want = match source {
        NetSource::Net3d => Dimensionality::Three,
        _ => Dimensionality::Two,
    };
    if net.config().dimensionality != want {
        return Err(Error::Validation(format!(
            "{:?} network cannot produce a {} field",
            net.config().dimensionality,
            source.name()
        )));
    }
    Ok(())
}

fn stack_perm(source: NetSource) -> [usize; 3] {
    source.plane().map_or([0, 1, 2], |p| p.stack_permutation())
}

fn permute4<T: Clone>(a: Array4<T>, p: [usize; 3]) -> Array4<T> {
    if p == [0, 1, 2] {
        return a;
    }
    a.permuted_axes([0, 1 + p[0], 1 + p[1], 1 + p[2]])
        .as_standard_layout()
        .into_owned()
}

fn chunk_bounds(len: usize, source: NetSource, slice_chunk: usize) -> Vec<(usize, usize)> {
    if source == NetSource::Net3d {
        return vec![(0, len)];
    }
    let c = slice_chunk.max(1);
    (0..len).step_by(c).map(|z| (z, (z + c).min(len))).collect()
}

/// Forward pass of `net` over `input`, keeping activations for training.
pub fn forward_field<T: Gemm>(
    net: &Network<T>,
    input: &Array3<T>,
    source: NetSource,
    slice_chunk: usize,
    exec: Execution,
) -> Result<(ProbabilityField<T>, FieldCache<T>)> {
    check_kind(net, source)?;
    let perm = stack_perm(source);
    let stack = input.view().permuted_axes(perm);
    let sd = stack.shape().to_vec();
    let k = net.config().num_classes;
    let mut out = Array4::<T>::zeros((k, sd[0], sd[1], sd[2]));
    let mut chunks = Vec::new();
    for (z0, z1) in chunk_bounds(sd[2], source, slice_chunk) {
        let part = stack.slice(s![.., .., z0..z1]).to_owned();
        let cache = net.forward(&Feature::from_grid(&part), exec)?;
        out.slice_mut(s![.., .., .., z0..z1]).assign(&cache.probs().to_class_first());
        chunks.push((z0, cache));
    }
    let field = ProbabilityField::new_unchecked(permute4(out, perm), source);
    Ok((field, FieldCache { source, chunks }))
}

/// Probabilities only, without retaining activations across chunks.
pub fn predict_field<T: Gemm>(
    net: &Network<T>,
    input: &Array3<T>,
    source: NetSource,
    slice_chunk: usize,
    exec: Execution,
) -> Result<ProbabilityField<T>> {
    check_kind(net, source)?;
    let perm = stack_perm(source);
    let stack = input.view().permuted_axes(perm);
    let sd = stack.shape().to_vec();
    let k = net.config().num_classes;
    let mut out = Array4::<T>::zeros((k, sd[0], sd[1], sd[2]));
    for (z0, z1) in chunk_bounds(sd[2], source, slice_chunk) {
        let part = stack.slice(s![.., .., z0..z1]).to_owned();
        let p = net.predict(&Feature::from_grid(&part), exec)?;
        out.slice_mut(s![.., .., .., z0..z1]).assign(&p.to_class_first());
    }
    Ok(ProbabilityField::new_unchecked(permute4(out, perm), source))
}

/// Parameter gradient given the loss gradient with respect to the field.
pub fn backward_field<T: Gemm>(
    net: &Network<T>,
    cache: &FieldCache<T>,
    grad: &Array4<T>,
    exec: Execution,
) -> Result<Vec<T>> {
    let perm = stack_perm(cache.source);
    let g = grad.view().permuted_axes([0, 1 + perm[0], 1 + perm[1], 1 + perm[2]]);
    let mut out = vec![T::zero(); net.num_params()];
    for (z0, c) in &cache.chunks {
        let len = c.probs().dims()[2];
        if g.len_of(Axis(3)) < z0 + len {
            return Err(Error::Shape("gradient does not cover the forward pass".into()));
        }
        let part = g.slice(s![.., .., .., *z0..z0 + len]).as_standard_layout().into_owned();
        net.backward(c, &Feature::from_class_first(&part), &mut out, exec)?;
    }
    Ok(out)
}
