//! Multi-threaded drivers over the core's mergeable accumulators.
//!
//! Samples are split into fixed-size chunks; partial results are combined in
//! chunk order, so output is identical for any thread count.

use std::ops::Range;

use arbor_core::models::{chunk_ranges, Reducer};
use arbor_core::tree::{apply_layer, log_fidelity, LayerAccumulator, TreeBuilder};
use arbor_core::{BuildConfig, LocalMap, Mps, ProductFeature, Result, TreeNetwork};
use rayon::prelude::*;

/// [`Reducer`] running chunks on the current rayon pool.
#[derive(Debug, Clone, Copy)]
pub struct RayonReducer {
    pub chunk: usize,
}

impl Default for RayonReducer {
    fn default() -> Self {
        Self { chunk: arbor_core::models::DEFAULT_CHUNK }
    }
}

impl Reducer for RayonReducer {
    fn sum(&self, n: usize, len: usize, f: &(dyn Fn(Range<usize>, &mut [f64]) + Sync)) -> Vec<f64> {
        let ranges: Vec<Range<usize>> = chunk_ranges(n, self.chunk).collect();
        let parts: Vec<Vec<f64>> = ranges
            .into_par_iter()
            .map(|r| {
                let mut part = vec![0.0; len];
                f(r, &mut part);
                part
            })
            .collect();
        let mut total = vec![0.0; len];
        for p in &parts {
            total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
        }
        total
    }

    fn fill(&self, n: usize, width: usize, out: &mut [f64], f: &(dyn Fn(Range<usize>, &mut [f64]) + Sync)) {
        let chunk = self.chunk.max(1);
        out[..n * width].par_chunks_mut(chunk * width).enumerate().for_each(|(i, slot)| {
            let start = i * chunk;
            f(start..start + slot.len() / width.max(1), slot);
        });
    }
}

/// Build a layer's accumulator from `samples`, one chunk per task.
pub fn accumulate_parallel(builder: &TreeBuilder, samples: &[ProductFeature], chunk: usize) -> Result<LayerAccumulator> {
    let batch = builder.config().batch_size;
    let parts = samples
        .par_chunks(chunk.max(1))
        .map(|c| {
            let mut acc = builder.new_accumulator()?;
            acc.accumulate_batch(c, batch)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = builder.new_accumulator()?;
    for p in &parts {
        total = total.merge(p)?;
    }
    Ok(total)
}

/// Parallel counterpart of [`arbor_core::build_tree`]; samples are coarse-grained in place.
pub fn build_tree_parallel(
    samples: &mut [ProductFeature],
    map: LocalMap,
    config: &BuildConfig,
    prior: Option<Mps>,
    chunk: usize,
) -> Result<TreeNetwork> {
    let first = samples.first().ok_or_else(|| arbor_core::Error::Argument("empty sample set".into()))?;
    let mut builder = TreeBuilder::new(config.clone(), map, first, prior)?;
    if let Some(i) = samples.iter().position(|s| s.site_dims() != builder.current_dims()) {
        return Err(arbor_core::Error::Shape(format!("sample {i} does not share the site structure of sample 0")));
    }
    while builder.needs_layer() {
        let acc = if config.mu >= 1.0 {
            accumulate_parallel(&builder, &samples[..1], chunk)?
        } else {
            match config.convergence {
                None => accumulate_parallel(&builder, samples, chunk)?,
                Some(conv) => {
                    let mut acc = builder.new_accumulator()?;
                    for block in samples.chunks(conv.check_every) {
                        let prev = acc.clone();
                        acc = acc.merge(&accumulate_parallel(&builder, block, chunk)?)?;
                        if prev.sample_count() > 0 && acc.converged(&prev, conv.tol)? {
                            log::info!("layer covariances converged after {} samples", acc.sample_count());
                            break;
                        }
                    }
                    acc
                }
            }
        };
        let env = builder.prior_environments();
        let pairs = acc.pairs();
        let isometries = (0..pairs.len())
            .into_par_iter()
            .map(|p| builder.solve_pair(&pairs[p], p, env.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let log_in = log_fidelity(samples);
        let layer = builder.push_layer(isometries, &acc)?.clone();
        samples.par_iter_mut().try_for_each(|s| -> Result<()> {
            *s = apply_layer(&layer, s)?;
            Ok(())
        })?;
        let log_out = log_fidelity(samples);
        builder.record_fidelity(log_in, log_out);
        log::info!(
            "layer {}: dims {:?}, log fidelity {:.6} -> {:.6}",
            builder.layers().len(),
            builder.current_dims(),
            log_in,
            log_out
        );
    }
    builder.finish()
}

/// Push every sample through all tree layers in parallel.
pub fn coarse_features_parallel(tree: &TreeNetwork, samples: &[ProductFeature]) -> Result<Vec<ProductFeature>> {
    samples.par_iter().map(|s| tree.apply(s)).collect()
}

/// Map inputs through the local feature map in parallel.
pub fn map_inputs(inputs: &[Vec<f64>], map: LocalMap, mode: arbor_core::ScaleMode) -> Result<Vec<ProductFeature>> {
    inputs.par_iter().map(|x| arbor_core::map_input(x, map, mode)).collect()
}
