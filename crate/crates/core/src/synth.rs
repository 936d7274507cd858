//! Deterministic synthetic clothes-changing retrieval benchmark.
//!
//! Every image is composed from ground-truth factors: a per-subject identity
//! prototype outside a clothing band, a per-clothes prototype inside it, a
//! per-camera brightness offset, and i.i.d. observation noise. The generator
//! therefore knows the exact mask and the exact clothing code of every
//! sample, which downstream stages and tests rely on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::grid::{Image, Mask};
use crate::rng;
use crate::{Error, Result};

/// Identity of a person.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubjectId(pub u32);

/// Identity of one outfit. Clothes IDs are global: each belongs to exactly
/// one subject, mirroring how re-identification datasets label outfits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClothesId(pub u32);

impl ClothesId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Dataset-unique sample identifier, assigned at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleId(pub u32);

/// One labeled image: the `(x, s, c)` triplet plus a camera nuisance ID.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub image: Image,
    pub subject: SubjectId,
    pub clothes: ClothesId,
    pub camera: u32,
}

/// Discrete conditioning code for one outfit: a one-hot vector whose hot
/// index equals the clothes ID.
#[derive(Debug, Clone, PartialEq)]
pub struct ClothesDescriptor {
    pub clothes: ClothesId,
    pub code: Vec<f32>,
}

impl ClothesDescriptor {
    pub fn one_hot(clothes: ClothesId, total: usize) -> Self {
        let mut code = alloc::vec![0.0; total];
        code[clothes.index()] = 1.0;
        Self { clothes, code }
    }
}

/// Generation parameters. `seed` fully determines the dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DatasetSpec {
    pub subjects: u32,
    pub clothes_per_subject: u32,
    /// Images generated per (subject, clothes) pair, per split that carries
    /// the pair.
    pub images_per_pair: u32,
    pub cameras: u32,
    pub noise_std: f32,
    pub seed: u64,
    /// Maximum absolute row shift applied to the clothing band per image.
    pub mask_jitter: u32,
    pub height: usize,
    pub width: usize,
    /// Number of shared visual clothing styles; 0 draws every outfit
    /// independently. Small wardrobes make different subjects wear
    /// similar-looking clothes, which is what makes clothes-changed
    /// retrieval hard.
    pub wardrobe: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            subjects: 40,
            clothes_per_subject: 4,
            images_per_pair: 2,
            cameras: 2,
            noise_std: 0.08,
            seed: 7,
            mask_jitter: 1,
            height: 16,
            width: 16,
            wardrobe: 3,
        }
    }
}

impl DatasetSpec {
    /// Total number of distinct clothes IDs.
    pub fn total_clothes(&self) -> usize {
        (self.subjects * self.clothes_per_subject) as usize
    }

    /// The unshifted clothing band, scaled from rows 5..=13 at H=16.
    pub fn band(&self) -> (usize, usize) {
        (5 * self.height / 16, 13 * self.height / 16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.images_per_pair == 0 || self.cameras == 0 {
            return Err(Error::Config(String::from("all counts must be >= 1")));
        }
        if self.clothes_per_subject < 2 {
            return Err(Error::Config(String::from(
                "clothes_per_subject must be >= 2 so query and gallery hold different outfits",
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(String::from("noise_std must be finite and >= 0")));
        }
        if self.height < 4 || self.width < 1 {
            return Err(Error::Config(String::from("image shape too small")));
        }
        let (start, end) = self.band();
        if end >= self.height || start > end {
            return Err(Error::Config(String::from("clothing band does not fit the image")));
        }
        let j = self.mask_jitter as usize;
        if j > start || end + j >= self.height {
            return Err(Error::Config(format!(
                "mask_jitter {j} moves the band (rows {start}..={end}) outside the image"
            )));
        }
        if start.saturating_sub(j) == 0 && end + j == self.height - 1 {
            return Err(Error::Config(String::from("band plus jitter leaves no identity row")));
        }
        Ok(())
    }
}

/// Which split a sample lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Query,
    Gallery,
}

/// A split of the dataset with its ground-truth masks and the per-sample
/// band jitters used at generation time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub samples: Vec<Sample>,
    pub masks: Vec<Mask>,
    pub jitters: Vec<i32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The generated benchmark. Query and gallery are image-disjoint from train;
/// each subject's query outfit appears in the gallery only under different
/// clothes IDs, so clothes-changed matching is well-posed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub query: Split,
    pub gallery: Split,
    pub descriptors: Vec<ClothesDescriptor>,
    /// Ground-truth identity prototypes, for tests and reports only.
    pub identity_prototypes: Vec<Image>,
    /// Ground-truth clothing prototypes, for tests and reports only.
    pub clothes_prototypes: Vec<Image>,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Query => &self.query,
            SplitKind::Gallery => &self.gallery,
        }
    }

    fn locate(&self, id: SampleId) -> Option<(SplitKind, usize)> {
        let n_train = self.train.len() as u32;
        let n_query = self.query.len() as u32;
        let n_gallery = self.gallery.len() as u32;
        let i = id.0;
        if i < n_train {
            Some((SplitKind::Train, i as usize))
        } else if i < n_train + n_query {
            Some((SplitKind::Query, (i - n_train) as usize))
        } else if i < n_train + n_query + n_gallery {
            Some((SplitKind::Gallery, (i - n_train - n_query) as usize))
        } else {
            None
        }
    }

    /// Ground-truth mask used when `sample` was generated.
    pub fn mask_for(&self, sample: &Sample) -> Result<&Mask> {
        let (kind, idx) = self
            .locate(sample.id)
            .ok_or_else(|| Error::Lookup(format!("unknown sample id {}", sample.id.0)))?;
        let split = self.split(kind);
        let stored = &split.samples[idx];
        if stored.subject != sample.subject
            || stored.clothes != sample.clothes
            || stored.camera != sample.camera
        {
            return Err(Error::Lookup(format!(
                "sample id {} does not match the stored record",
                sample.id.0
            )));
        }
        Ok(&split.masks[idx])
    }

    /// Conditioning code for a clothes ID.
    pub fn descriptor_for(&self, clothes: ClothesId) -> Result<&ClothesDescriptor> {
        self.descriptors
            .get(clothes.index())
            .ok_or_else(|| Error::Lookup(format!("clothes id {} out of range", clothes.0)))
    }
}

fn camera_bias(camera: u32, cameras: u32) -> f32 {
    (camera as f32 - (cameras as f32 - 1.0) / 2.0) * 0.05
}

/// Appearance structure of the benchmark. Identities are small deviations
/// from a shared body template, so identity cues are learnable but subtle.
/// Outfits are drawn around a small wardrobe of shared visual styles, so
/// different subjects wear similar-looking clothes — the distractor
/// structure that makes clothes-changed retrieval genuinely hard.
const IDENTITY_BASE_AMPLITUDE: f64 = 0.5;
const IDENTITY_DEVIATION: f64 = 0.12;
const STYLE_AMPLITUDE: f64 = 0.8;
const CLOTHES_DEVIATION: f64 = 0.2;
const INDEPENDENT_CLOTHES_AMPLITUDE: f64 = 0.85;

fn draw_uniform(h: usize, w: usize, amplitude: f64, rng: &mut rng::Rng) -> Vec<f64> {
    (0..h * w).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * amplitude).collect()
}

fn draw_identity_prototypes(
    h: usize,
    w: usize,
    subjects: usize,
    rng: &mut rng::Rng,
) -> Vec<Image> {
    let base = draw_uniform(h, w, IDENTITY_BASE_AMPLITUDE, rng);
    (0..subjects)
        .map(|_| {
            let deviation = draw_uniform(h, w, IDENTITY_DEVIATION, rng);
            let pixels = base.iter().zip(&deviation).map(|(b, d)| (b + d) as f32).collect();
            Image::from_vec(h, w, pixels)
        })
        .collect()
}

fn draw_clothes_prototypes(
    h: usize,
    w: usize,
    total_clothes: usize,
    wardrobe: usize,
    rng: &mut rng::Rng,
) -> Vec<Image> {
    if wardrobe == 0 {
        return (0..total_clothes)
            .map(|_| {
                let pixels = draw_uniform(h, w, INDEPENDENT_CLOTHES_AMPLITUDE, rng)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect();
                Image::from_vec(h, w, pixels)
            })
            .collect();
    }
    let styles: Vec<Vec<f64>> =
        (0..wardrobe).map(|_| draw_uniform(h, w, STYLE_AMPLITUDE, rng)).collect();
    (0..total_clothes)
        .map(|c| {
            let style = &styles[c % wardrobe];
            let deviation = draw_uniform(h, w, CLOTHES_DEVIATION, rng);
            let pixels = style.iter().zip(&deviation).map(|(s, d)| (s + d) as f32).collect();
            Image::from_vec(h, w, pixels)
        })
        .collect()
}

struct SampleFactory<'a> {
    spec: &'a DatasetSpec,
    identity: &'a [Image],
    clothes: &'a [Image],
    next_id: u32,
}

impl SampleFactory<'_> {
    fn make(
        &mut self,
        subject: SubjectId,
        clothes: ClothesId,
        camera: u32,
        rng: &mut rng::Rng,
    ) -> (Sample, Mask, i32) {
        let spec = self.spec;
        let j = spec.mask_jitter as i32;
        let jitter = if j == 0 { 0 } else { rng.gen_range(-j..=j) };
        let (start, end) = spec.band();
        let band = ((start as i32 + jitter) as usize, (end as i32 + jitter) as usize);
        let mask = Mask::row_band(spec.height, spec.width, band);

        let bias = camera_bias(camera, spec.cameras);
        let ident = &self.identity[subject.0 as usize];
        let cloth = &self.clothes[clothes.index()];
        let mut pixels = Vec::with_capacity(spec.height * spec.width);
        for i in 0..spec.height * spec.width {
            let base = if mask.bits()[i] { cloth.pixels()[i] } else { ident.pixels()[i] };
            let z: f32 = rng.sample(StandardNormal);
            let value = if spec.noise_std > 0.0 { base + bias + spec.noise_std * z } else { base + bias };
            pixels.push(value.clamp(-1.0, 1.0));
        }
        let id = SampleId(self.next_id);
        self.next_id += 1;
        let image = Image::from_vec(spec.height, spec.width, pixels);
        (Sample { id, image, subject, clothes, camera }, mask, jitter)
    }
}

/// Generates the full benchmark. Bit-identical output for identical specs.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);

    let subjects = spec.subjects as usize;
    let cps = spec.clothes_per_subject as usize;
    let total_clothes = spec.total_clothes();

    let identity_prototypes = draw_identity_prototypes(spec.height, spec.width, subjects, &mut rng);
    let clothes_prototypes = draw_clothes_prototypes(
        spec.height,
        spec.width,
        total_clothes,
        spec.wardrobe as usize,
        &mut rng,
    );

    // One outfit per subject is reserved for the query split; its images
    // never appear in the gallery, which therefore only holds the subject in
    // different clothes.
    let query_outfit: Vec<usize> = (0..subjects).map(|_| rng.gen_range(0..cps)).collect();

    let descriptors = (0..total_clothes)
        .map(|c| ClothesDescriptor::one_hot(ClothesId(c as u32), total_clothes))
        .collect();

    let mut factory = SampleFactory {
        spec,
        identity: &identity_prototypes,
        clothes: &clothes_prototypes,
        next_id: 0,
    };

    let push = |split: &mut Split, sample: Sample, mask: Mask, jitter: i32| {
        split.samples.push(sample);
        split.masks.push(mask);
        split.jitters.push(jitter);
    };

    let mut train = Split::default();
    for s in 0..subjects {
        for k in 0..cps {
            let clothes = ClothesId((s * cps + k) as u32);
            for rep in 0..spec.images_per_pair {
                let camera = rep % spec.cameras;
                let (sample, mask, jitter) =
                    factory.make(SubjectId(s as u32), clothes, camera, &mut rng);
                push(&mut train, sample, mask, jitter);
            }
        }
    }

    let mut query = Split::default();
    for s in 0..subjects {
        let clothes = ClothesId((s * cps + query_outfit[s]) as u32);
        for rep in 0..spec.images_per_pair {
            let camera = rep % spec.cameras;
            let (sample, mask, jitter) =
                factory.make(SubjectId(s as u32), clothes, camera, &mut rng);
            push(&mut query, sample, mask, jitter);
        }
    }

    let mut gallery = Split::default();
    for s in 0..subjects {
        for k in 0..cps {
            if k == query_outfit[s] {
                continue;
            }
            let clothes = ClothesId((s * cps + k) as u32);
            for rep in 0..spec.images_per_pair {
                let camera = rep % spec.cameras;
                let (sample, mask, jitter) =
                    factory.make(SubjectId(s as u32), clothes, camera, &mut rng);
                push(&mut gallery, sample, mask, jitter);
            }
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        train,
        query,
        gallery,
        descriptors,
        identity_prototypes,
        clothes_prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            subjects: 4,
            clothes_per_subject: 3,
            images_per_pair: 2,
            cameras: 2,
            noise_std: 0.05,
            seed: 42,
            mask_jitter: 1,
            height: 16,
            width: 16,
            wardrobe: 3,
        }
    }

    #[test]
    fn train_size_matches_counting() {
        // |train| = subjects * clothes-per-subject * images-per-pair.
        let spec = DatasetSpec {
            subjects: 20,
            clothes_per_subject: 4,
            images_per_pair: 5,
            ..DatasetSpec::default()
        };
        let ds = gen_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 20 * 4 * 5);
        assert_eq!(ds.query.len(), 20 * 5);
        assert_eq!(ds.gallery.len(), 20 * 3 * 5);

        let default = gen_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(default.train.len(), 40 * 4 * 2);
        assert_eq!(default.query.len(), 40 * 2);
        assert_eq!(default.gallery.len(), 40 * 3 * 2);
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let spec = small_spec();
        let a = gen_dataset(&spec).unwrap();
        let b = gen_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec;
        other.seed = 43;
        assert_ne!(gen_dataset(&other).unwrap(), a);
    }

    #[test]
    fn zero_noise_zero_jitter_repeats_exactly() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        spec.mask_jitter = 0;
        let ds = gen_dataset(&spec).unwrap();
        let first = &ds.train.samples[0];
        for s in &ds.train.samples {
            if s.subject == first.subject && s.clothes == first.clothes && s.camera == first.camera
            {
                assert_eq!(s.image, first.image);
            }
        }
    }

    #[test]
    fn default_band_mask_has_144_ones() {
        let mut spec = small_spec();
        spec.mask_jitter = 0;
        let ds = gen_dataset(&spec).unwrap();
        let mask = &ds.train.masks[0];
        assert_eq!(mask.ones(), 9 * 16);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(mask.get(r, c), (5..=13).contains(&r));
            }
        }
    }

    #[test]
    fn jitter_replay_shifts_the_band() {
        let spec = small_spec();
        let ds = gen_dataset(&spec).unwrap();
        let idx = ds
            .train
            .jitters
            .iter()
            .position(|&j| j == 1)
            .expect("some sample drew jitter +1");
        let mask = &ds.train.masks[idx];
        for r in 0..16 {
            assert_eq!(mask.get(r, 0), (6..=14).contains(&r));
        }
    }

    #[test]
    fn descriptors_are_one_hot_at_the_clothes_index() {
        let ds = gen_dataset(&small_spec()).unwrap();
        let total = ds.spec.total_clothes();
        for c in 0..total {
            let d = ds.descriptor_for(ClothesId(c as u32)).unwrap();
            assert_eq!(d.clothes, ClothesId(c as u32));
            assert_eq!(d.code.len(), total);
            assert_eq!(d.code.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(d.code[c], 1.0);
        }
        assert!(ds.descriptor_for(ClothesId(total as u32)).is_err());
    }

    #[test]
    fn mask_lookup_rejects_unknown_samples() {
        let ds = gen_dataset(&small_spec()).unwrap();
        let mut fake = ds.train.samples[0].clone();
        fake.id = SampleId(999_999);
        assert!(matches!(ds.mask_for(&fake), Err(Error::Lookup(_))));
        let mut mismatched = ds.train.samples[0].clone();
        mismatched.camera += 17;
        assert!(ds.mask_for(&mismatched).is_err());
        assert!(ds.mask_for(&ds.train.samples[3]).is_ok());
    }

    #[test]
    fn identity_region_differs_only_by_noise() {
        let ds = gen_dataset(&small_spec()).unwrap();
        let spec = &ds.spec;
        let bound = 6.0 * spec.noise_std;
        let mut checked = 0usize;
        let mut within = 0usize;
        for (i, a) in ds.train.samples.iter().enumerate() {
            for (jj, b) in ds.train.samples.iter().enumerate().skip(i + 1) {
                if a.subject != b.subject || a.camera != b.camera {
                    continue;
                }
                // Identity region shared by both (outside either jittered band).
                let ma = &ds.train.masks[i];
                let mb = &ds.train.masks[jj];
                for cell in 0..a.image.len() {
                    if ma.bits()[cell] || mb.bits()[cell] {
                        continue;
                    }
                    checked += 1;
                    if (a.image.pixels()[cell] - b.image.pixels()[cell]).abs() <= bound {
                        within += 1;
                    }
                }
            }
        }
        assert!(checked > 1000);
        assert!(within as f64 >= 0.99 * checked as f64);
    }

    #[test]
    fn masked_region_correlates_with_its_clothes_prototype() {
        let ds = gen_dataset(&small_spec()).unwrap();
        for (i, s) in ds.train.samples.iter().enumerate() {
            let mask = &ds.train.masks[i];
            let own = s.image.masked_correlation(&ds.clothes_prototypes[s.clothes.index()], mask);
            for (c, proto) in ds.clothes_prototypes.iter().enumerate() {
                if c == s.clothes.index() {
                    continue;
                }
                let other = s.image.masked_correlation(proto, mask);
                assert!(
                    own > other,
                    "sample {i}: correlation with own prototype {own} not above {other}"
                );
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.subjects = 0;
        assert!(matches!(gen_dataset(&spec), Err(Error::Config(_))));
        let mut spec = small_spec();
        spec.clothes_per_subject = 1;
        assert!(gen_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.noise_std = -0.5;
        assert!(gen_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.mask_jitter = 10;
        assert!(gen_dataset(&spec).is_err());
    }

    #[test]
    fn queries_have_clothes_changed_matches_in_gallery() {
        let ds = gen_dataset(&small_spec()).unwrap();
        for q in &ds.query.samples {
            let mut found = false;
            for g in &ds.gallery.samples {
                if g.subject == q.subject {
                    assert_ne!(g.clothes, q.clothes);
                    found = true;
                }
            }
            assert!(found);
        }
    }
}
