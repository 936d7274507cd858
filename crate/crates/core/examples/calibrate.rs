//! Scratch calibration harness (not part of the deliverable test suite).

use std::time::Instant;

use revest_core::diffusion::{
    self, make_schedule, Denoiser, NoGuidance, ScheduleKind, TrainConfig,
};
use revest_core::expansion;
use revest_core::retrieval::{self, Protocol};
use revest_core::reid::{EmbeddingModel, ReidConfig, ReidTrainer, TrainMode};
use revest_core::rng;
use revest_core::synth::{gen_dataset, ClothesDescriptor, DatasetSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("flip");
    match mode {
        "flip" => flip_experiment(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3000),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.02),
        ),
        "e2e" => e2e_experiment(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3000),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8),
            args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1),
            args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.05),
            args.get(7).and_then(|s| s.parse().ok()).unwrap_or(5),
            args.get(8).and_then(|s| s.parse().ok()).unwrap_or(30),
            args.get(9).and_then(|s| s.parse().ok()).unwrap_or(20),
        ),
        "cond" => cond_probe(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2500),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(6),
            args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3),
            args.get(6).and_then(|s| s.parse().ok()).unwrap_or(4),
            args.get(7).and_then(|s| s.parse().ok()).unwrap_or(256),
        ),
        other => eprintln!("unknown mode {other}"),
    }
}

fn flip_experiment(t_steps: usize, steps: usize, lr: f32) {
    let start = Instant::now();
    let spec = DatasetSpec { wardrobe: 0, ..DatasetSpec::default() };
    let ds = gen_dataset(&spec).unwrap();
    let schedule = make_schedule(t_steps, 1e-4, 6.0 / t_steps as f32, ScheduleKind::Linear).unwrap();
    println!(
        "T={t_steps} alpha_bar_T={:.4} sigma_T={:.4}",
        schedule.alpha_bar(t_steps),
        schedule.sigma(t_steps)
    );

    let mut r = rng::seeded(1);
    let mut denoiser = Denoiser::new(
        spec.height,
        spec.width,
        ds.spec.total_clothes(),
        &[256, 256],
        32,
        &mut r,
    );
    let data: Vec<(&revest_core::Image, &ClothesDescriptor)> = ds
        .train
        .samples
        .iter()
        .map(|s| (&s.image, ds.descriptor_for(s.clothes).unwrap()))
        .collect();
    let cfg = TrainConfig { lr, steps, ..TrainConfig::default() };
    let losses = diffusion::train_denoiser(&mut denoiser, &data, &schedule, &cfg, &mut r).unwrap();
    println!(
        "train {:?}: loss first={:.2} mid={:.2} last20={:.3}",
        start.elapsed(),
        losses[0],
        losses[steps / 2],
        losses[steps - 20..].iter().sum::<f32>() / 20.0
    );

    // Conditioning check via plain sampling.
    let mut flips = 0;
    let mut total = 0;
    let sample_start = Instant::now();
    for trial in 0..50 {
        let c = revest_core::ClothesId(trial % ds.spec.total_clothes() as u32);
        let img =
            diffusion::sample(&denoiser, ds.descriptor_for(c).unwrap(), &schedule, &mut r).unwrap();
        let full = revest_core::Mask::from_bits(16, 16, vec![true; 256]);
        let own = img.masked_correlation(&ds.clothes_prototypes[c.index()], &full);
        let best_other = (0..ds.spec.total_clothes())
            .filter(|&cc| cc != c.index())
            .map(|cc| img.masked_correlation(&ds.clothes_prototypes[cc], &full))
            .fold(f32::MIN, f32::max);
        total += 1;
        if own > best_other {
            flips += 1;
        }
    }
    println!("sample-conditioning: {flips}/{total} ({:?})", sample_start.elapsed());

    // Inpainting flip check.
    let inpaint_start = Instant::now();
    let mut flips = 0;
    let mut total = 0;
    for trial in 0..100 {
        let idx = (trial * 7) % ds.train.len();
        let sample = &ds.train.samples[idx];
        let mask = &ds.train.masks[idx];
        let target = revest_core::ClothesId(
            ((sample.clothes.0 as usize + 1 + trial % (ds.spec.total_clothes() - 1))
                % ds.spec.total_clothes()) as u32,
        );
        let out = diffusion::inpaint(
            &denoiser,
            &sample.image,
            mask,
            ds.descriptor_for(target).unwrap(),
            &schedule,
            &mut r,
        )
        .unwrap();
        let corr_target = out.masked_correlation(&ds.clothes_prototypes[target.index()], mask);
        let corr_source =
            out.masked_correlation(&ds.clothes_prototypes[sample.clothes.index()], mask);
        total += 1;
        if corr_target > corr_source {
            flips += 1;
        }
    }
    println!(
        "inpaint-flip: {flips}/{total} in {:?}; total {:?}",
        inpaint_start.elapsed(),
        start.elapsed()
    );
}

fn e2e_experiment(
    t_steps: usize,
    steps: usize,
    k: usize,
    seed: u64,
    noise: f32,
    ipp: u32,
    epochs: usize,
    subjects: u32,
) {
    let start = Instant::now();
    let spec = DatasetSpec {
        seed: 100 + seed,
        noise_std: noise,
        images_per_pair: ipp,
        subjects,
        ..DatasetSpec::default()
    };
    let ds = gen_dataset(&spec).unwrap();
    let schedule = make_schedule(t_steps, 1e-4, 6.0 / t_steps as f32, ScheduleKind::Linear).unwrap();

    let mut r = rng::seeded(200 + seed);
    let mut denoiser = Denoiser::new(
        spec.height,
        spec.width,
        ds.spec.total_clothes(),
        &[256, 256],
        32,
        &mut r,
    );
    let data: Vec<(&revest_core::Image, &ClothesDescriptor)> = ds
        .train
        .samples
        .iter()
        .map(|s| (&s.image, ds.descriptor_for(s.clothes).unwrap()))
        .collect();
    let cfg = TrainConfig { lr: 0.003, steps, ..TrainConfig::default() };
    diffusion::train_denoiser(&mut denoiser, &data, &schedule, &cfg, &mut r).unwrap();
    println!("[seed {seed}] diffusion trained {:?}", start.elapsed());

    let t_exp = Instant::now();
    let generated =
        expansion::expand_dataset::<_, NoGuidance>(&ds, &denoiser, &schedule, k, None, 300 + seed)
            .unwrap();
    println!("[seed {seed}] expanded {} records {:?}", generated.records.len(), t_exp.elapsed());

    // Train baseline and expanded embedding models.
    let reid_cfg = ReidConfig { seed: 400 + seed, epochs, ..ReidConfig::default() };
    let originals: Vec<usize> = (0..ds.train.len()).collect();

    let t_reid = Instant::now();
    let mut baseline = EmbeddingModel::new(16, 16, 256, 64, spec.subjects as usize, &mut rng::seeded(500 + seed));
    let mut trainer = ReidTrainer::new(&reid_cfg, TrainMode::Baseline, None).unwrap();
    let mut er = rng::seeded(600 + seed);
    for e in 0..reid_cfg.epochs {
        let st =
            trainer.run_epoch(&mut baseline, &ds.train.samples, &originals, None, &mut er).unwrap();
        if e % 5 == 0 || e == reid_cfg.epochs - 1 {
            println!("  base e{e}: ce={:.4} tri={:.4}", st.mean_ce, st.mean_triplet);
        }
    }
    println!("[seed {seed}] baseline reid {:?}", t_reid.elapsed());

    let t_reid = Instant::now();
    let mut expanded = EmbeddingModel::new(16, 16, 256, 64, spec.subjects as usize, &mut rng::seeded(500 + seed));
    let mut trainer = ReidTrainer::new(&reid_cfg, TrainMode::Progressive, Some(&generated)).unwrap();
    let mut er = rng::seeded(600 + seed);
    for e in 0..reid_cfg.epochs {
        let st = trainer
            .run_epoch(&mut expanded, &ds.train.samples, &originals, Some(&generated), &mut er)
            .unwrap();
        if e % 5 == 0 || e == reid_cfg.epochs - 1 {
            println!("  prog e{e}: ce={:.4} tri={:.4} active={}", st.mean_ce, st.mean_triplet, st.active_partitions);
        }
    }
    println!("[seed {seed}] progressive reid {:?}", t_reid.elapsed());

    // Evaluate both.
    for (name, model) in [("baseline", &baseline), ("expanded", &expanded)] {
        let q = retrieval::embed(model, &ds.query.samples).unwrap();
        let g = retrieval::embed(model, &ds.gallery.samples).unwrap();
        let report = retrieval::evaluate(&q, &g, Protocol::ClothesChanging, None).unwrap();
        println!(
            "[seed {seed}] {name}: top1={:.4} mAP={:.4}",
            report.top1, report.map
        );
    }

    // Refinement on the expanded model.
    let t_ref = Instant::now();
    let model = &expanded;
    let l = 6;
    let mut variants_feats = Vec::new();
    for (qi, qs) in ds.query.samples.iter().enumerate() {
        let mut vr = rng::derived(700 + seed, qi as u64);
        let imgs = retrieval::make_variants(qs, &ds, &denoiser, &schedule, l, &mut vr).unwrap();
        variants_feats.push(retrieval::embed_images(model, &imgs));
    }
    let q = retrieval::embed(model, &ds.query.samples).unwrap();
    let g = retrieval::embed(model, &ds.gallery.samples).unwrap();
    let refinement = retrieval::Refinement { l, m: 5, variants: &variants_feats };
    let refined =
        retrieval::evaluate(&q, &g, Protocol::ClothesChanging, Some(&refinement)).unwrap();
    println!(
        "[seed {seed}] refined top1={:.4} ({:?}); total {:?}",
        refined.top1,
        t_ref.elapsed(),
        start.elapsed()
    );
}

#[allow(dead_code)]
fn cond_probe(t_steps: usize, steps: usize, subjects: u32, cps: u32, ipp: u32, hidden: usize) {
    use revest_core::Mask;
    let start = Instant::now();
    let spec = DatasetSpec {
        subjects,
        clothes_per_subject: cps,
        images_per_pair: ipp,
        noise_std: 0.05,
        seed: 9,
        wardrobe: 0,
        ..DatasetSpec::default()
    };
    let ds = gen_dataset(&spec).unwrap();
    let total = ds.spec.total_clothes();
    let schedule = make_schedule(t_steps, 1e-4, 6.0 / t_steps as f32, ScheduleKind::Linear).unwrap();
    let mut r = rng::seeded(17);
    let mut denoiser = Denoiser::new(16, 16, total, &[hidden, hidden], 32, &mut r);
    let data: Vec<(&revest_core::Image, &ClothesDescriptor)> = ds
        .train
        .samples
        .iter()
        .map(|s| (&s.image, ds.descriptor_for(s.clothes).unwrap()))
        .collect();
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    diffusion::train_denoiser(&mut denoiser, &data, &schedule, &cfg, &mut r).unwrap();
    let band = Mask::row_band(16, 16, (5, 13));
    let mut hits = 0;
    let trials = 60;
    let mut own_sum = 0.0f32;
    let mut other_sum = 0.0f32;
    let mut px_mean = 0.0f32;
    let mut px_std = 0.0f32;
    for trial in 0..trials {
        let c = revest_core::ClothesId((trial % total) as u32);
        let img = diffusion::sample(&denoiser, ds.descriptor_for(c).unwrap(), &schedule, &mut r).unwrap();
        let own = img.masked_correlation(&ds.clothes_prototypes[c.index()], &band);
        let best_other = (0..total)
            .filter(|&cc| cc != c.index())
            .map(|cc| img.masked_correlation(&ds.clothes_prototypes[cc], &band))
            .fold(f32::MIN, f32::max);
        own_sum += own;
        other_sum += best_other;
        let m = img.pixels().iter().sum::<f32>() / 256.0;
        px_mean += m / trials as f32;
        px_std += (img.pixels().iter().map(|p| (p - m) * (p - m)).sum::<f32>() / 256.0).sqrt()
            / trials as f32;
        if own > best_other {
            hits += 1;
        }
    }
    println!(
        "cond sample hits {hits}/{trials} own={:.3} bestother={:.3} px_mean={px_mean:.3} px_std={px_std:.3} T={t_steps} steps={steps} ({:?})",
        own_sum / trials as f32,
        other_sum / trials as f32,
        start.elapsed()
    );
}
