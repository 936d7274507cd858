//! Feature extraction, clothes-changed evaluation (top-1 / mAP), and
//! test-time prediction refinement.
//!
//! Refinement augments a query with `l` clothes-changed inpainted variants,
//! retrieves the top-`m` gallery rows for the query and for every variant,
//! and accumulates max-normalized similarity scores per subject — but only
//! for subjects already present in the original query's top-`m` list. The
//! refined prediction is the argmax subject.
//!
//! The scoring path makes a single pass over the gallery per refined query,
//! evaluating all `l+1` vectors against each row while it is hot in cache.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float as _;

use crate::diffusion::{inpaint, EpsModel, NoiseSchedule};
use crate::expansion::sample_clothes_ids;
use crate::grid::Image;
use crate::nn;
use crate::reid::EmbeddingModel;
use crate::rng::Rng;
use crate::synth::{ClothesId, Dataset, Sample, SubjectId};
use crate::{Error, Result};

pub const DEFAULT_REFINE_L: usize = 6;
pub const DEFAULT_REFINE_M: usize = 5;

/// Identity labels attached to one feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLabel {
    pub subject: SubjectId,
    pub clothes: ClothesId,
    pub camera: u32,
}

/// Row-major matrix of unit-norm feature vectors with per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<RowLabel>,
}

impl FeatureMatrix {
    /// Builds the matrix, normalizing every row to unit L2 norm.
    pub fn from_rows(rows: &[Vec<f32>], labels: Vec<RowLabel>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data(String::from("feature matrix needs at least one row")));
        }
        if rows.len() != labels.len() {
            return Err(Error::Data(String::from("row and label counts differ")));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data(String::from("rows must share one nonzero dimension")));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let mut v = row.clone();
            nn::l2_normalize(&mut v);
            data.extend_from_slice(&v);
        }
        Ok(Self { dim, data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> &RowLabel {
        &self.labels[i]
    }
}

/// Embeds labeled samples into a [`FeatureMatrix`].
pub fn embed(model: &EmbeddingModel, samples: &[Sample]) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f32>> = samples.iter().map(|s| model.embed_image(&s.image)).collect();
    let labels = samples
        .iter()
        .map(|s| RowLabel { subject: s.subject, clothes: s.clothes, camera: s.camera })
        .collect();
    FeatureMatrix::from_rows(&rows, labels)
}

/// Embeds unlabeled images (query variants) into unit-norm rows.
pub fn embed_images(model: &EmbeddingModel, images: &[Image]) -> Vec<Vec<f32>> {
    images.iter().map(|img| model.embed_image(img)).collect()
}

fn normalized_copy(v: &[f32]) -> Vec<f32> {
    let mut out = v.to_vec();
    nn::l2_normalize(&mut out);
    out
}

/// Running top-`m` list ordered like a stable descending sort (ties keep the
/// lower gallery index).
struct TopBuffer {
    m: usize,
    entries: Vec<(usize, f32)>,
}

impl TopBuffer {
    fn new(m: usize) -> Self {
        Self { m, entries: Vec::with_capacity(m + 1) }
    }

    #[inline]
    fn offer(&mut self, index: usize, sim: f32) {
        if self.entries.len() == self.m {
            // Strict inequality: an equal late-comer never displaces an
            // earlier row.
            if sim <= self.entries[self.m - 1].1 {
                return;
            }
            self.entries.pop();
        }
        let pos = self.entries.partition_point(|e| e.1 >= sim);
        self.entries.insert(pos, (index, sim));
    }
}

/// One gallery pass for a family of query vectors: returns each vector's
/// top-`m` `(gallery index, cosine)` list over the rows accepted by
/// `eligible`.
fn top_m_scan<E: Fn(usize) -> bool>(
    queries: &[&[f32]],
    gallery: &FeatureMatrix,
    m: usize,
    eligible: E,
) -> Vec<Vec<(usize, f32)>> {
    let mut buffers: Vec<TopBuffer> = queries.iter().map(|_| TopBuffer::new(m)).collect();
    for (row_idx, row) in gallery.data.chunks_exact(gallery.dim).enumerate() {
        if !eligible(row_idx) {
            continue;
        }
        for (q, buffer) in queries.iter().zip(&mut buffers) {
            buffer.offer(row_idx, nn::dot(q, row));
        }
    }
    buffers.into_iter().map(|b| b.entries).collect()
}

/// Indices of the `m` gallery rows most cosine-similar to `query`, in
/// descending order; ties break toward the lower index.
pub fn top_m(query: &[f32], gallery: &FeatureMatrix, m: usize) -> Result<Vec<usize>> {
    if query.len() != gallery.dim() {
        return Err(Error::Config(format!(
            "query dimension {} does not match gallery dimension {}",
            query.len(),
            gallery.dim()
        )));
    }
    if m > gallery.len() {
        return Err(Error::Config(format!(
            "m = {m} exceeds gallery size {}",
            gallery.len()
        )));
    }
    let q = normalized_copy(query);
    let lists = top_m_scan(&[q.as_slice()], gallery, m, |_| true);
    Ok(lists.into_iter().next().expect("one query").into_iter().map(|(i, _)| i).collect())
}

/// Subject-ID → accumulated refined similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    entries: BTreeMap<u32, f32>,
}

impl ScoreTable {
    pub fn get(&self, subject: SubjectId) -> Option<f32> {
        self.entries.get(&subject.0).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SubjectId, f32)> + '_ {
        self.entries.iter().map(|(&s, &v)| (SubjectId(s), v))
    }

    /// Argmax subject; ties break toward the lower subject ID.
    pub fn predicted(&self) -> SubjectId {
        let mut best: Option<(u32, f32)> = None;
        for (&s, &v) in &self.entries {
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((s, v)),
            }
        }
        SubjectId(best.expect("score table is never empty").0)
    }
}

/// Accumulates clamped, max-normalized contributions from one top-m list.
/// When `restrict` is set, only subjects already present keep accumulating.
fn accumulate_list(
    table: &mut BTreeMap<u32, f32>,
    list: &[(usize, f32)],
    gallery: &FeatureMatrix,
    restrict: bool,
) {
    let max = list.iter().map(|&(_, s)| s.clamp(0.0, 1.0)).fold(0.0f32, f32::max);
    if max <= 0.0 {
        // All similarities clamped away; the normalization is undefined and
        // every contribution is zero. Subjects still enter the candidate set
        // from the primary list.
        if !restrict {
            for &(idx, _) in list {
                table.entry(gallery.label(idx).subject.0).or_insert(0.0);
            }
        }
        return;
    }
    for &(idx, sim) in list {
        let subject = gallery.label(idx).subject.0;
        let contribution = sim.clamp(0.0, 1.0) / max;
        if restrict {
            if let Some(score) = table.get_mut(&subject) {
                *score += contribution;
            }
        } else {
            *table.entry(subject).or_insert(0.0) += contribution;
        }
    }
}

fn refine_scan<E: Fn(usize) -> bool>(
    query: &[f32],
    variants: &[Vec<f32>],
    gallery: &FeatureMatrix,
    m: usize,
    eligible: E,
) -> ScoreTable {
    let q = normalized_copy(query);
    let normalized: Vec<Vec<f32>> = variants.iter().map(|v| normalized_copy(v)).collect();
    let mut all: Vec<&[f32]> = Vec::with_capacity(1 + normalized.len());
    all.push(&q);
    all.extend(normalized.iter().map(Vec::as_slice));

    let lists = top_m_scan(&all, gallery, m, eligible);
    let mut table = BTreeMap::new();
    accumulate_list(&mut table, &lists[0], gallery, false);
    for list in &lists[1..] {
        accumulate_list(&mut table, list, gallery, true);
    }
    ScoreTable { entries: table }
}

/// Prediction-refinement scoring: the query's top-`m` list seeds the subject
/// set and initial scores; each variant's top-`m` list adds to subjects
/// already in the set. Similarities are clamped to `[0, 1]` before the
/// per-list max-normalization; `m` is reduced to the gallery size when the
/// gallery is smaller.
pub fn refine(
    query: &[f32],
    variants: &[Vec<f32>],
    gallery: &FeatureMatrix,
    m: usize,
) -> Result<ScoreTable> {
    if gallery.is_empty() {
        return Err(Error::Data(String::from("refinement needs a nonempty gallery")));
    }
    if m == 0 {
        return Err(Error::Config(String::from("m must be >= 1")));
    }
    let m_eff = m.min(gallery.len());
    Ok(refine_scan(query, variants, gallery, m_eff, |_| true))
}

/// Inpaints `l` clothes-changed variants of a query image using its
/// ground-truth mask, each with a distinct target outfit different from the
/// query's own.
pub fn make_variants<M: EpsModel>(
    query: &Sample,
    dataset: &Dataset,
    denoiser: &M,
    schedule: &NoiseSchedule,
    l: usize,
    rng: &mut Rng,
) -> Result<Vec<Image>> {
    let mask = dataset.mask_for(query)?;
    let targets = sample_clothes_ids(dataset.spec.total_clothes(), query.clothes, l, rng)?;
    let mut out = Vec::with_capacity(l);
    for target in targets {
        let descriptor = dataset.descriptor_for(target)?;
        out.push(inpaint(denoiser, &query.image, mask, descriptor, schedule, rng)?);
    }
    Ok(out)
}

/// Gallery-eligibility rule for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Protocol {
    /// A gallery row is eligible unless it shares both subject and clothes
    /// with the query; an eligible row is a true match iff it shares the
    /// subject (then necessarily in different clothes).
    ClothesChanging,
}

impl Protocol {
    pub fn eligible(&self, query: &RowLabel, gallery: &RowLabel) -> bool {
        !(query.subject == gallery.subject && query.clothes == gallery.clothes)
    }

    pub fn is_match(&self, query: &RowLabel, gallery: &RowLabel) -> bool {
        query.subject == gallery.subject
    }

    pub fn name(&self) -> &'static str {
        "clothes-changing"
    }
}

/// Per-query refinement inputs for [`evaluate`].
pub struct Refinement<'a> {
    pub l: usize,
    pub m: usize,
    /// `variants[q]` holds the `l` variant feature vectors of query `q`.
    pub variants: &'a [Vec<Vec<f32>>],
}

/// Evaluation output. `top1` uses the refined argmax when refinement is
/// enabled; `map` always comes from the unrefined cosine ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub top1: f64,
    pub map: f64,
    pub n_query: usize,
    pub n_gallery: usize,
    pub refinement: Option<(usize, usize)>,
}

/// Ranks eligible gallery rows per query and reports clothes-changed top-1
/// and mAP. Errors if any query lacks an eligible true match.
pub fn evaluate(
    queries: &FeatureMatrix,
    gallery: &FeatureMatrix,
    protocol: Protocol,
    refinement: Option<&Refinement<'_>>,
) -> Result<MetricsReport> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Config(String::from("query and gallery dimensions differ")));
    }
    if let Some(r) = refinement {
        if r.variants.len() != queries.len() {
            return Err(Error::Config(format!(
                "refinement provides variants for {} queries but there are {}",
                r.variants.len(),
                queries.len()
            )));
        }
        if r.m == 0 {
            return Err(Error::Config(String::from("refinement m must be >= 1")));
        }
        if let Some(bad) = r.variants.iter().position(|v| v.len() != r.l) {
            return Err(Error::Config(format!(
                "query {bad} has {} variant features, expected l = {}",
                r.variants[bad].len(),
                r.l
            )));
        }
    }

    let mut top1_hits = 0usize;
    let mut ap_sum = 0.0f64;
    for qi in 0..queries.len() {
        let qlabel = *queries.label(qi);
        let eligible: Vec<usize> = (0..gallery.len())
            .filter(|&gi| protocol.eligible(&qlabel, gallery.label(gi)))
            .collect();
        let n_matches = eligible
            .iter()
            .filter(|&&gi| protocol.is_match(&qlabel, gallery.label(gi)))
            .count();
        if n_matches == 0 {
            return Err(Error::Protocol(format!(
                "query {qi} (subject {}, clothes {}) has no eligible true match in the gallery",
                qlabel.subject.0, qlabel.clothes.0
            )));
        }

        // Full eligible ranking for mAP (and unrefined top-1).
        let mut ranked: Vec<(usize, f32)> = eligible
            .iter()
            .map(|&gi| (gi, nn::dot(queries.row(qi), gallery.row(gi))))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity"));

        let mut hits = 0usize;
        let mut precision_sum = 0.0f64;
        for (rank0, &(gi, _)) in ranked.iter().enumerate() {
            if protocol.is_match(&qlabel, gallery.label(gi)) {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += precision_sum / n_matches as f64;

        let hit = match refinement {
            None => protocol.is_match(&qlabel, gallery.label(ranked[0].0)),
            Some(r) => {
                let in_eligible = |gi: usize| protocol.eligible(&qlabel, gallery.label(gi));
                let m_eff = r.m.min(eligible.len());
                let table =
                    refine_scan(queries.row(qi), &r.variants[qi], gallery, m_eff, in_eligible);
                table.predicted() == qlabel.subject
            }
        };
        if hit {
            top1_hits += 1;
        }
    }

    Ok(MetricsReport {
        top1: top1_hits as f64 / queries.len() as f64,
        map: ap_sum / queries.len() as f64,
        n_query: queries.len(),
        n_gallery: gallery.len(),
        refinement: refinement.map(|r| (r.l, r.m)),
    })
}
