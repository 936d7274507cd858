//! Embedding-based re-identification model and its progressive trainer.
//!
//! Training pairs every original batch item with one generated clothes-
//! changed variant of the same subject, doubling the batch. Variants are
//! drawn from a fixed 4-way partition of each source's generated set; the
//! sampling range widens by one partition every `N` epochs, so early epochs
//! see little clothing variety and late epochs see all of it.
//!
//! The loss is subject cross-entropy on a classifier head plus batch-hard
//! triplet loss (margin 0.3) on L2-normalized embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

#[allow(unused_imports)]
use num_traits::Float as _;

use crate::diffusion::OptimizerKind;
use crate::expansion::GeneratedSet;
use crate::grid::Image;
use crate::nn::{self, Mlp, MlpGrads, Real, SgdMomentum, Tape};
use crate::rng::{self, Rng};
use crate::synth::{ClothesId, Sample, SubjectId};
use crate::{Error, Result};

/// Widening period N: one more partition becomes active every N epochs.
pub const DEFAULT_WIDENING_PERIOD: usize = 5;
pub const DEFAULT_TRIPLET_MARGIN: f32 = 0.3;

/// Encoder (flatten → hidden → embedding) plus a subject-classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub encoder: Mlp<f32>,
    pub head: Mlp<f32>,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
}

impl EmbeddingModel {
    pub fn new(
        height: usize,
        width: usize,
        hidden: usize,
        embed_dim: usize,
        subjects: usize,
        rng: &mut Rng,
    ) -> Self {
        let encoder = Mlp::new(&[height * width, hidden, embed_dim], rng);
        let head = Mlp::new(&[embed_dim, subjects], rng);
        Self { encoder, head, height, width, embed_dim }
    }

    /// Unit-norm embedding of one image.
    pub fn embed_image(&self, image: &Image) -> Vec<f32> {
        assert_eq!((image.h(), image.w()), (self.height, self.width), "image shape mismatch");
        let mut v = self.encoder.forward(image.pixels());
        nn::l2_normalize(&mut v);
        v
    }
}

/// Hyper-parameters for one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ReidConfig {
    pub epochs: usize,
    /// Widening period N.
    pub period: usize,
    pub lr: f32,
    /// Originals per batch; progressive pairing doubles the realized size.
    pub batch: usize,
    pub margin: f32,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Items per gradient work unit (defaults to `batch`, so a paired batch
    /// is exactly two units).
    pub microbatch: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ReidConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            period: DEFAULT_WIDENING_PERIOD,
            lr: 0.05,
            batch: 32,
            margin: DEFAULT_TRIPLET_MARGIN,
            seed: 13,
            optimizer: OptimizerKind::Momentum { momentum: 0.9 },
            microbatch: 32,
            hidden: 256,
            embed_dim: 64,
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.period == 0 || self.batch == 0 || self.microbatch == 0 {
            return Err(Error::Config(String::from(
                "epochs, period, batch and microbatch must be >= 1",
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.margin >= 0.0) {
            return Err(Error::Config(String::from("invalid learning rate or margin")));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(String::from("hidden and embed_dim must be >= 1")));
        }
        Ok(())
    }
}

/// Splits variant record ids into four balanced partitions (±1) after a
/// seeded shuffle; the assignment is fixed for a whole run.
pub fn partition_generated(variant_ids: &[u32], seed: u64) -> Result<[Vec<u32>; 4]> {
    if variant_ids.len() < 4 {
        return Err(Error::Config(format!(
            "need at least 4 variants to form partitions, got {}",
            variant_ids.len()
        )));
    }
    let mut ids = variant_ids.to_vec();
    let mut r = rng::seeded(seed);
    ids.shuffle(&mut r);
    let k = ids.len();
    let base = k / 4;
    let rem = k % 4;
    let mut out: [Vec<u32>; 4] = Default::default();
    let mut offset = 0;
    for (p, slot) in out.iter_mut().enumerate() {
        let size = base + usize::from(p < rem);
        slot.extend_from_slice(&ids[offset..offset + size]);
        offset += size;
    }
    Ok(out)
}

/// Per-source partitions plus the widening clock.
#[derive(Debug, Clone)]
pub struct ProgressiveState {
    period: usize,
    epoch: usize,
    partitions: Vec<[Vec<u32>; 4]>,
}

impl ProgressiveState {
    /// Builds fixed partitions for every source in `generated`; each source
    /// uses a stream derived from `(seed, source_index)`.
    pub fn new(generated: &GeneratedSet, period: usize, seed: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config(String::from("widening period must be >= 1")));
        }
        let mut partitions = Vec::with_capacity(generated.sources());
        for source in 0..generated.sources() {
            let ids: Vec<u32> = (0..generated.k)
                .map(|j| (source * generated.k + j) as u32)
                .collect();
            let sub_seed = rng::derived(seed, source as u64).gen::<u64>();
            partitions.push(partition_generated(&ids, sub_seed)?);
        }
        Ok(Self { period, epoch: 0, partitions })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// `min(4, 1 + floor(epoch / N))`.
    pub fn active_partitions(&self) -> usize {
        (1 + self.epoch / self.period).min(4)
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn partitions_of(&self, source: usize) -> &[Vec<u32>; 4] {
        &self.partitions[source]
    }

    /// All record ids currently reachable for one source.
    pub fn active_union(&self, source: usize) -> Vec<u32> {
        let active = self.active_partitions();
        let mut union = Vec::new();
        for p in &self.partitions[source][..active] {
            union.extend_from_slice(p);
        }
        union
    }

    /// Uniform draw from the union of the active partitions of `source`.
    pub fn sample_pair(&self, source: usize, rng: &mut Rng) -> u32 {
        let active = self.active_partitions();
        let parts = &self.partitions[source];
        let total: usize = parts[..active].iter().map(Vec::len).sum();
        let mut pick = rng.gen_range(0..total);
        for p in &parts[..active] {
            if pick < p.len() {
                return p[pick];
            }
            pick -= p.len();
        }
        unreachable!("pick is bounded by the union size")
    }
}

/// Where a batch item's pixels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemSource {
    Original(usize),
    Generated(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub source: ItemSource,
    pub subject: SubjectId,
    pub clothes: ClothesId,
}

/// `originals ++ [pair(i)]`: item `i + B` is a generated variant of item `i`
/// (same subject, different clothes), doubling the batch.
pub fn build_batch(
    original_indices: &[usize],
    train: &[Sample],
    generated: &GeneratedSet,
    state: &ProgressiveState,
    rng: &mut Rng,
) -> Result<Vec<BatchItem>> {
    let mut batch = Vec::with_capacity(original_indices.len() * 2);
    for &idx in original_indices {
        let s = &train[idx];
        batch.push(BatchItem {
            source: ItemSource::Original(idx),
            subject: s.subject,
            clothes: s.clothes,
        });
    }
    for &idx in original_indices {
        if idx >= generated.sources() {
            return Err(Error::Data(format!(
                "train sample {idx} has no generated variants (set covers {} sources)",
                generated.sources()
            )));
        }
        let record_id = state.sample_pair(idx, rng) as usize;
        let rec = &generated.records[record_id];
        batch.push(BatchItem {
            source: ItemSource::Generated(record_id),
            subject: rec.subject,
            clothes: rec.clothes,
        });
    }
    Ok(batch)
}

/// Batch-hard triplet loss on unit-norm embeddings: per anchor, the farthest
/// positive and the nearest negative under Euclidean distance. Returns the
/// mean hinge loss over anchors that have both, plus gradients w.r.t. the
/// normalized embeddings.
fn batch_hard_triplet<F: Real>(
    embeddings: &[Vec<F>],
    subjects: &[usize],
    margin: F,
) -> (F, Vec<Vec<F>>) {
    let n = embeddings.len();
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut d_embed = alloc::vec![alloc::vec![F::zero(); dim]; n];
    if n < 2 {
        return (F::zero(), d_embed);
    }

    let mut dist = alloc::vec![F::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let cos = nn::dot(&embeddings[i], &embeddings[j]);
            let d = (F::one() + F::one() - cos - cos).max(F::zero()).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    struct Term {
        anchor: usize,
        positive: usize,
        negative: usize,
    }
    let mut terms = Vec::new();
    let mut anchors_with_both = 0usize;
    let mut hinge_sum = F::zero();
    for a in 0..n {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if subjects[j] == subjects[a] {
                if hardest_pos.map_or(true, |p| dist[a * n + j] > dist[a * n + p]) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.map_or(true, |m| dist[a * n + j] < dist[a * n + m]) {
                hardest_neg = Some(j);
            }
        }
        let (Some(p), Some(m)) = (hardest_pos, hardest_neg) else { continue };
        anchors_with_both += 1;
        let hinge = margin + dist[a * n + p] - dist[a * n + m];
        if hinge > F::zero() {
            hinge_sum += hinge;
            terms.push(Term { anchor: a, positive: p, negative: m });
        }
    }
    if anchors_with_both == 0 {
        return (F::zero(), d_embed);
    }
    let scale = F::one() / nn::real::<F>(anchors_with_both as f64);

    // d‖e_a - e_j‖ / d e_a = (e_a - e_j) / ‖e_a - e_j‖
    let add_pair = |a: usize, j: usize, sign: F, d_embed: &mut Vec<Vec<F>>| {
        let d = dist[a * n + j];
        if d <= nn::real(1e-12) {
            return;
        }
        let coef = sign * scale / d;
        for k in 0..dim {
            let diff = embeddings[a][k] - embeddings[j][k];
            d_embed[a][k] += coef * diff;
            d_embed[j][k] -= coef * diff;
        }
    };
    for term in &terms {
        add_pair(term.anchor, term.positive, F::one(), &mut d_embed);
        add_pair(term.anchor, term.negative, -F::one(), &mut d_embed);
    }
    (hinge_sum * scale, d_embed)
}

/// Cross-entropy + batch-hard triplet loss with parameter gradients, generic
/// over the float type. Forward and backward passes run in `microbatch`
/// chunks with a fixed reduction order, so results do not depend on worker
/// count.
pub fn reid_loss_grads<F: Real>(
    encoder: &Mlp<F>,
    head: &Mlp<F>,
    images: &[&[F]],
    subjects: &[usize],
    margin: F,
    microbatch: usize,
) -> (F, F, MlpGrads<F>, MlpGrads<F>) {
    assert_eq!(images.len(), subjects.len());
    let n = images.len();
    let scale = F::one() / nn::real::<F>(n.max(1) as f64);

    struct ItemState<F> {
        tape: Tape<F>,
        head_tape: Tape<F>,
        normalized: Vec<F>,
        norm: F,
    }

    // Phase A: forward passes (chunk-parallel, order preserved).
    let forwards: Vec<Vec<ItemState<F>>> = nn::map_chunks(images, microbatch, |_, chunk| {
        chunk
            .iter()
            .map(|pixels| {
                let tape = encoder.forward_tape(pixels);
                let mut normalized = tape.output().to_vec();
                let norm = nn::l2_normalize(&mut normalized);
                let head_tape = head.forward_tape(tape.output());
                ItemState { tape, head_tape, normalized, norm }
            })
            .collect()
    });
    let states: Vec<ItemState<F>> = forwards.into_iter().flatten().collect();

    // Phase B: batch-level losses and gradients w.r.t. logits / embeddings.
    let mut ce_loss = F::zero();
    let mut d_logits: Vec<Vec<F>> = Vec::with_capacity(n);
    for (state, &subject) in states.iter().zip(subjects) {
        let (loss, mut grad) = nn::softmax_cross_entropy(state.head_tape.output(), subject);
        ce_loss += loss * scale;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        d_logits.push(grad);
    }
    let normalized: Vec<Vec<F>> = states.iter().map(|s| s.normalized.clone()).collect();
    let (triplet_loss, d_embed) = batch_hard_triplet(&normalized, subjects, margin);

    // Phase C: backward passes (chunk-parallel, summed in chunk order).
    let indices: Vec<usize> = (0..n).collect();
    let backwards: Vec<(MlpGrads<F>, MlpGrads<F>)> =
        nn::map_chunks(&indices, microbatch, |_, chunk| {
            let mut enc = MlpGrads::zeros_like(encoder);
            let mut hg = MlpGrads::zeros_like(head);
            for &i in chunk {
                let state = &states[i];
                let mut d_v = head.backward(&state.head_tape, &d_logits[i], &mut hg);
                let d_norm =
                    nn::l2_normalize_backward(&state.normalized, &d_embed[i], state.norm);
                for (dv, dn) in d_v.iter_mut().zip(&d_norm) {
                    *dv += *dn;
                }
                encoder.backward(&state.tape, &d_v, &mut enc);
            }
            (enc, hg)
        });
    let mut enc_grads = MlpGrads::zeros_like(encoder);
    let mut head_grads = MlpGrads::zeros_like(head);
    for (enc, hg) in backwards {
        enc_grads.add_assign(&enc);
        head_grads.add_assign(&hg);
    }
    (ce_loss, triplet_loss, enc_grads, head_grads)
}

/// How training consumes the generated set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TrainMode {
    /// Originals only, batch size `batch`.
    Baseline,
    /// Progressive pairing: originals + one variant each, batch `2·batch`.
    Progressive,
    /// Originals and all variants concatenated and shuffled, batch `2·batch`.
    Merged,
}

/// Loss summary for one epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_ce: f32,
    pub mean_triplet: f32,
    pub batches: usize,
    pub items: usize,
    /// Active partition count during this epoch (1 when not progressive).
    pub active_partitions: usize,
    /// `(source_index, record_id)` of every sampled pair, for schedule audits.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub sampled_pairs: Vec<(u32, u32)>,
}

/// Owns optimizer state and the progressive clock across epochs.
pub struct ReidTrainer {
    pub cfg: ReidConfig,
    pub mode: TrainMode,
    state: Option<ProgressiveState>,
    opt_encoder: SgdMomentum<f32>,
    opt_head: SgdMomentum<f32>,
    epoch: usize,
}

impl ReidTrainer {
    pub fn new(cfg: &ReidConfig, mode: TrainMode, generated: Option<&GeneratedSet>) -> Result<Self> {
        cfg.validate()?;
        let state = match mode {
            TrainMode::Progressive => {
                let set = generated.ok_or_else(|| {
                    Error::Config(String::from("progressive training needs a generated set"))
                })?;
                Some(ProgressiveState::new(set, cfg.period, cfg.seed)?)
            }
            TrainMode::Merged => {
                if generated.is_none() {
                    return Err(Error::Config(String::from(
                        "merged training needs a generated set",
                    )));
                }
                None
            }
            TrainMode::Baseline => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            state,
            opt_encoder: cfg.optimizer.build(cfg.lr),
            opt_head: cfg.optimizer.build(cfg.lr),
            epoch: 0,
        })
    }

    pub fn progressive_state(&self) -> Option<&ProgressiveState> {
        self.state.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn train_on_items(
        &mut self,
        model: &mut EmbeddingModel,
        train: &[Sample],
        generated: Option<&GeneratedSet>,
        items: &[BatchItem],
    ) -> Result<(f32, f32)> {
        let images: Vec<&[f32]> = items
            .iter()
            .map(|item| match item.source {
                ItemSource::Original(i) => train[i].image.pixels(),
                ItemSource::Generated(r) => {
                    generated.expect("generated items imply a generated set").records[r]
                        .image
                        .pixels()
                }
            })
            .collect();
        let subjects: Vec<usize> = items.iter().map(|i| i.subject.0 as usize).collect();
        let (ce, triplet, enc_grads, head_grads) = reid_loss_grads(
            &model.encoder,
            &model.head,
            &images,
            &subjects,
            self.cfg.margin,
            self.cfg.microbatch,
        );
        if !(ce.is_finite() && triplet.is_finite()) {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {}: ce={ce}, triplet={triplet}",
                self.epoch
            )));
        }
        self.opt_encoder.step(&mut model.encoder, &enc_grads);
        self.opt_head.step(&mut model.head, &head_grads);
        Ok((ce, triplet))
    }

    /// Runs one epoch over `originals` (indices into `train`), in shuffled
    /// order; returns loss means and the sampled-pair log.
    pub fn run_epoch(
        &mut self,
        model: &mut EmbeddingModel,
        train: &[Sample],
        originals: &[usize],
        generated: Option<&GeneratedSet>,
        rng: &mut Rng,
    ) -> Result<EpochStats> {
        if originals.is_empty() {
            return Err(Error::Data(String::from("no original samples to train on")));
        }
        let active = self.state.as_ref().map_or(1, ProgressiveState::active_partitions);
        let mut order = originals.to_vec();
        order.shuffle(rng);

        let mut stats = EpochStats {
            epoch: self.epoch,
            mean_ce: 0.0,
            mean_triplet: 0.0,
            batches: 0,
            items: 0,
            active_partitions: active,
            sampled_pairs: Vec::new(),
        };

        match self.mode {
            TrainMode::Baseline => {
                for chunk in order.chunks(self.cfg.batch) {
                    let items: Vec<BatchItem> = chunk
                        .iter()
                        .map(|&i| BatchItem {
                            source: ItemSource::Original(i),
                            subject: train[i].subject,
                            clothes: train[i].clothes,
                        })
                        .collect();
                    let (ce, tri) = self.train_on_items(model, train, generated, &items)?;
                    stats.mean_ce += ce;
                    stats.mean_triplet += tri;
                    stats.batches += 1;
                    stats.items += items.len();
                }
            }
            TrainMode::Progressive => {
                let set = generated.ok_or_else(|| {
                    Error::Config(String::from("progressive training needs a generated set"))
                })?;
                let chunks: Vec<Vec<usize>> =
                    order.chunks(self.cfg.batch).map(<[usize]>::to_vec).collect();
                for chunk in chunks {
                    let state = self.state.as_ref().expect("progressive mode carries state");
                    let items = build_batch(&chunk, train, set, state, rng)?;
                    for item in &items {
                        if let ItemSource::Generated(r) = item.source {
                            stats
                                .sampled_pairs
                                .push((set.records[r].source_index, r as u32));
                        }
                    }
                    let (ce, tri) = self.train_on_items(model, train, generated, &items)?;
                    stats.mean_ce += ce;
                    stats.mean_triplet += tri;
                    stats.batches += 1;
                    stats.items += items.len();
                }
            }
            TrainMode::Merged => {
                let set = generated.ok_or_else(|| {
                    Error::Config(String::from("merged training needs a generated set"))
                })?;
                let mut items: Vec<BatchItem> = order
                    .iter()
                    .map(|&i| BatchItem {
                        source: ItemSource::Original(i),
                        subject: train[i].subject,
                        clothes: train[i].clothes,
                    })
                    .collect();
                for &i in &order {
                    for (j, rec) in set.variants_of(i).iter().enumerate() {
                        items.push(BatchItem {
                            source: ItemSource::Generated(i * set.k + j),
                            subject: rec.subject,
                            clothes: rec.clothes,
                        });
                    }
                }
                items.shuffle(rng);
                let batches: Vec<Vec<BatchItem>> =
                    items.chunks(self.cfg.batch * 2).map(<[BatchItem]>::to_vec).collect();
                for batch in batches {
                    let (ce, tri) = self.train_on_items(model, train, generated, &batch)?;
                    stats.mean_ce += ce;
                    stats.mean_triplet += tri;
                    stats.batches += 1;
                    stats.items += batch.len();
                }
            }
        }

        if stats.batches > 0 {
            stats.mean_ce /= stats.batches as f32;
            stats.mean_triplet /= stats.batches as f32;
        }
        self.epoch += 1;
        if let Some(state) = &mut self.state {
            state.advance_epoch();
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::GeneratedRecord;
    use crate::synth::{gen_dataset, DatasetSpec};

    fn fake_generated(sources: usize, k: usize, subjects: &[u32]) -> GeneratedSet {
        let mut records = Vec::new();
        for source in 0..sources {
            for j in 0..k {
                records.push(GeneratedRecord {
                    image: Image::filled(2, 2, (source * k + j) as f32 / 100.0),
                    subject: SubjectId(subjects[source]),
                    clothes: ClothesId(1000 + j as u32),
                    source_index: source as u32,
                    variant_index: j as u32,
                });
            }
        }
        GeneratedSet { k, records }
    }

    #[test]
    fn partition_sizes_are_balanced() {
        let ids: Vec<u32> = (0..10).collect();
        let parts = partition_generated(&ids, 3).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, alloc::vec![3, 3, 2, 2]);
        let mut all: Vec<u32> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);

        let parts4 = partition_generated(&[5, 6, 7, 8], 0).unwrap();
        assert!(parts4.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn partitioning_is_deterministic_in_seed() {
        let ids: Vec<u32> = (0..12).collect();
        assert_eq!(partition_generated(&ids, 9).unwrap(), partition_generated(&ids, 9).unwrap());
        assert_ne!(partition_generated(&ids, 9).unwrap(), partition_generated(&ids, 10).unwrap());
    }

    #[test]
    fn too_few_variants_is_an_error() {
        assert!(partition_generated(&[1, 2, 3], 0).is_err());
    }

    #[test]
    fn widening_schedule_matches_epoch_arithmetic() {
        let set = fake_generated(2, 8, &[0, 1]);
        let mut state = ProgressiveState::new(&set, 5, 3).unwrap();
        let expectations = [
            (0, 1),
            (4, 1),
            (5, 2),
            (7, 2),
            (10, 3),
            (15, 4),
            (1000, 4),
        ];
        for (epoch, want) in expectations {
            while state.epoch() < epoch {
                state.advance_epoch();
            }
            assert_eq!(state.active_partitions(), want, "epoch {epoch}");
        }
    }

    #[test]
    fn sample_pair_stays_inside_the_active_union() {
        let set = fake_generated(3, 10, &[0, 1, 2]);
        let mut state = ProgressiveState::new(&set, 5, 21).unwrap();
        let mut r = rng::seeded(1);
        for epoch in 0..20 {
            for source in 0..3 {
                let union = state.active_union(source);
                for _ in 0..50 {
                    let pick = state.sample_pair(source, &mut r);
                    assert!(union.contains(&pick), "epoch {epoch} source {source}");
                }
            }
            state.advance_epoch();
        }
        // At full width every variant is reachable.
        for source in 0..3 {
            let mut union = state.active_union(source);
            union.sort_unstable();
            let expected: Vec<u32> = (source as u32 * 10..(source as u32 + 1) * 10).collect();
            assert_eq!(union, expected);
        }
    }

    #[test]
    fn built_batches_double_and_pair_by_subject() {
        let spec = DatasetSpec {
            subjects: 4,
            clothes_per_subject: 2,
            images_per_pair: 2,
            height: 4,
            width: 4,
            mask_jitter: 0,
            ..DatasetSpec::default()
        };
        let ds = gen_dataset(&spec).unwrap();
        let subjects: Vec<u32> = ds.train.samples.iter().map(|s| s.subject.0).collect();
        let set = fake_generated(ds.train.len(), 4, &subjects);
        let state = ProgressiveState::new(&set, 5, 2).unwrap();
        let mut r = rng::seeded(3);
        let originals: Vec<usize> = (0..6).collect();
        let batch = build_batch(&originals, &ds.train.samples, &set, &state, &mut r).unwrap();
        assert_eq!(batch.len(), 12);
        for i in 0..6 {
            assert_eq!(batch[i].subject, batch[i + 6].subject);
            assert_ne!(batch[i].clothes, batch[i + 6].clothes);
        }
        let empty = build_batch(&[], &ds.train.samples, &set, &state, &mut r).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut r = rng::seeded(4);
        let model = EmbeddingModel::new(4, 4, 32, 16, 5, &mut r);
        for seed in 0..10 {
            let img = crate::diffusion::standard_normal_image(4, 4, &mut rng::seeded(seed));
            let e = model.embed_image(&img);
            let norm = nn::dot(&e, &e).sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng::seeded(5);
        let encoder = Mlp::<f64>::new(&[6, 5, 4], &mut r);
        let head = Mlp::<f64>::new(&[4, 3], &mut r);

        // Two subjects, three images each: anchors have positives and
        // negatives, so both loss terms are active.
        let images_owned: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) as f64 * 0.13).sin() * 0.8).collect())
            .collect();
        let subjects = alloc::vec![0usize, 0, 0, 1, 1, 2];
        let margin = 0.3;

        let images: Vec<&[f64]> = images_owned.iter().map(Vec::as_slice).collect();
        let (_, _, enc_grads, head_grads) =
            reid_loss_grads(&encoder, &head, &images, &subjects, margin, 2);

        let loss_of = |enc: &Mlp<f64>, hd: &Mlp<f64>| -> f64 {
            let images: Vec<&[f64]> = images_owned.iter().map(Vec::as_slice).collect();
            let (ce, tri, _, _) = reid_loss_grads(enc, hd, &images, &subjects, margin, 2);
            ce + tri
        };

        let step = 1e-4;
        let base = encoder.params_flat();
        let analytic = enc_grads.flat();
        let mut probe = encoder.clone();
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += step;
            probe.load_flat(&p);
            let up = loss_of(&probe, &head);
            p[i] = base[i] - step;
            probe.load_flat(&p);
            let down = loss_of(&probe, &head);
            let numeric = (up - down) / (2.0 * step);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-7);
            assert!(
                ((analytic[i] - numeric) / denom).abs() < 1e-4,
                "encoder param {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }

        let base = head.params_flat();
        let analytic = head_grads.flat();
        let mut probe = head.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += step;
            probe.load_flat(&p);
            let up = loss_of(&encoder, &probe);
            p[i] = base[i] - step;
            probe.load_flat(&p);
            let down = loss_of(&encoder, &probe);
            let numeric = (up - down) / (2.0 * step);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-7);
            assert!(
                ((analytic[i] - numeric) / denom).abs() < 1e-4,
                "head param {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn two_sample_batch_gradient_check() {
        // The smallest paired batch: one subject twice, no negatives, so the
        // triplet term vanishes and cross-entropy drives all gradients.
        let mut r = rng::seeded(6);
        let encoder = Mlp::<f64>::new(&[4, 3], &mut r);
        let head = Mlp::<f64>::new(&[3, 2], &mut r);
        let images_owned: Vec<Vec<f64>> =
            alloc::vec![alloc::vec![0.2, -0.4, 0.6, 0.1], alloc::vec![-0.3, 0.5, 0.0, 0.7]];
        let subjects = alloc::vec![1usize, 1];
        let images: Vec<&[f64]> = images_owned.iter().map(Vec::as_slice).collect();
        let (ce, tri, enc_grads, _) =
            reid_loss_grads(&encoder, &head, &images, &subjects, 0.3, 32);
        assert!(tri == 0.0);
        assert!(ce > 0.0);

        let loss_of = |enc: &Mlp<f64>| -> f64 {
            let images: Vec<&[f64]> = images_owned.iter().map(Vec::as_slice).collect();
            let (ce, tri, _, _) = reid_loss_grads(enc, &head, &images, &subjects, 0.3, 32);
            ce + tri
        };
        let step = 1e-4;
        let base = encoder.params_flat();
        let analytic = enc_grads.flat();
        let mut probe = encoder.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += step;
            probe.load_flat(&p);
            let up = loss_of(&probe);
            p[i] = base[i] - step;
            probe.load_flat(&p);
            let down = loss_of(&probe);
            let numeric = (up - down) / (2.0 * step);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-7);
            assert!(((analytic[i] - numeric) / denom).abs() < 1e-4);
        }
    }

    #[test]
    fn baseline_epoch_runs_and_reports() {
        let spec = DatasetSpec {
            subjects: 4,
            clothes_per_subject: 2,
            images_per_pair: 3,
            height: 8,
            width: 8,
            ..DatasetSpec::default()
        };
        let ds = gen_dataset(&spec).unwrap();
        let cfg = ReidConfig { batch: 8, hidden: 32, embed_dim: 16, ..ReidConfig::default() };
        let mut model = EmbeddingModel::new(8, 8, 32, 16, 4, &mut rng::seeded(7));
        let mut trainer = ReidTrainer::new(&cfg, TrainMode::Baseline, None).unwrap();
        let originals: Vec<usize> = (0..ds.train.len()).collect();
        let mut r = rng::seeded(8);
        let stats =
            trainer.run_epoch(&mut model, &ds.train.samples, &originals, None, &mut r).unwrap();
        assert_eq!(stats.items, ds.train.len());
        assert_eq!(stats.batches, ds.train.len().div_ceil(8));
        assert!(stats.mean_ce.is_finite() && stats.mean_ce > 0.0);
        assert!(model.encoder.all_finite());
    }
}
