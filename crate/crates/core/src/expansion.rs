//! Stage-1 data expansion: K clothes-changed inpainted variants per source
//! image.
//!
//! Work is keyed by source index with one derived random stream per source,
//! so generation can be chunked, parallelized, or resumed at any source
//! boundary without changing a single output pixel.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::diffusion::{inpaint_guided, EpsModel, NoiseSchedule};
use crate::grid::Image;
use crate::guidance::GuidanceSource;
use crate::nn;
use crate::rng;
use crate::synth::{ClothesId, Dataset, SubjectId};
use crate::{Error, Result};

/// Default number of generated outfits per source image.
pub const DEFAULT_K: usize = 10;

/// One generated variant with full provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRecord {
    pub image: Image,
    pub subject: SubjectId,
    pub clothes: ClothesId,
    pub source_index: u32,
    pub variant_index: u32,
}

/// The expanded set: exactly `k` records per source image, stored in source
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub k: usize,
    pub records: Vec<GeneratedRecord>,
}

impl GeneratedSet {
    /// `|G| = K·M`.
    pub fn expected_len(sources: usize, k: usize) -> usize {
        sources * k
    }

    pub fn sources(&self) -> usize {
        if self.k == 0 { 0 } else { self.records.len() / self.k }
    }

    /// The contiguous K variants generated from one source image.
    pub fn variants_of(&self, source: usize) -> &[GeneratedRecord] {
        &self.records[source * self.k..(source + 1) * self.k]
    }
}

/// Draws `k` distinct clothes IDs uniformly without replacement from
/// `{0..total_clothes} \ {exclude}`.
pub fn sample_clothes_ids(
    total_clothes: usize,
    exclude: ClothesId,
    k: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<ClothesId>> {
    if exclude.index() >= total_clothes {
        return Err(Error::Config(format!(
            "excluded clothes id {} outside 0..{total_clothes}",
            exclude.0
        )));
    }
    if k >= total_clothes {
        return Err(Error::Config(format!(
            "cannot draw {k} distinct clothes ids from a pool of {total_clothes} minus the source"
        )));
    }
    let picks = rand::seq::index::sample(rng, total_clothes - 1, k);
    Ok(picks
        .into_iter()
        .map(|i| {
            // Skip over the excluded id.
            let id = if i >= exclude.index() { i + 1 } else { i };
            ClothesId(id as u32)
        })
        .collect())
}

/// Generates variants for the train samples in `range`, in source order.
/// Each source uses the stream derived from `(seed, source_index)`.
pub fn expand_range<M: EpsModel, G: GuidanceSource>(
    dataset: &Dataset,
    denoiser: &M,
    schedule: &NoiseSchedule,
    k: usize,
    guidance: Option<&G>,
    seed: u64,
    range: Range<usize>,
) -> Result<Vec<GeneratedRecord>>
where
    M: Sync,
    G: Sync,
{
    if range.end > dataset.train.len() {
        return Err(Error::Config(format!(
            "source range end {} exceeds train size {}",
            range.end,
            dataset.train.len()
        )));
    }
    let total_clothes = dataset.spec.total_clothes();
    if k >= total_clothes {
        return Err(Error::Config(format!(
            "k = {k} requires more than {total_clothes} distinct clothes ids"
        )));
    }
    let sources: Vec<usize> = range.collect();
    let chunks = nn::map_chunks(&sources, 1, |_, chunk| -> Result<Vec<GeneratedRecord>> {
        let source = chunk[0];
        let mut local_rng = rng::derived(seed, source as u64);
        let sample = &dataset.train.samples[source];
        let mask = &dataset.train.masks[source];
        let targets = sample_clothes_ids(total_clothes, sample.clothes, k, &mut local_rng)?;
        let mut records = Vec::with_capacity(k);
        for (variant, target) in targets.into_iter().enumerate() {
            let descriptor = dataset.descriptor_for(target)?;
            let image = inpaint_guided(
                denoiser,
                &sample.image,
                mask,
                descriptor,
                schedule,
                &mut local_rng,
                guidance,
            )
            .map_err(|e| match e {
                Error::Numerical(msg) => {
                    Error::Numerical(format!("source index {source}, variant {variant}: {msg}"))
                }
                other => other,
            })?;
            records.push(GeneratedRecord {
                image,
                subject: sample.subject,
                clothes: target,
                source_index: source as u32,
                variant_index: variant as u32,
            });
        }
        Ok(records)
    });
    let mut out = Vec::with_capacity(sources.len() * k);
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Expands the full training split into `K·M` records.
pub fn expand_dataset<M: EpsModel, G: GuidanceSource>(
    dataset: &Dataset,
    denoiser: &M,
    schedule: &NoiseSchedule,
    k: usize,
    guidance: Option<&G>,
    seed: u64,
) -> Result<GeneratedSet>
where
    M: Sync,
    G: Sync,
{
    let records = expand_range(
        dataset,
        denoiser,
        schedule,
        k,
        guidance,
        seed,
        0..dataset.train.len(),
    )?;
    Ok(GeneratedSet { k, records })
}
